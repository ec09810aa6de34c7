use std::fmt::Write as _;

use crate::encoder::ForwardTrace;
use crate::error::{invalid, Result};
use crate::matrix::Matrix;
use crate::selectors::{cosine_similarity, Metric};

/// Fixed-width histogram over `[lo, hi]`; the last bin is closed.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if bins == 0 || !(hi > lo) {
            return invalid(format!("bad histogram range [{lo}, {hi}] with {bins} bins"));
        }
        Ok(Histogram { lo, hi, counts: vec![0; bins] })
    }

    pub fn bin_width(&self) -> f64 {
        (self.hi - self.lo) / self.counts.len() as f64
    }

    /// Values outside the range are clamped into the edge bins.
    pub fn add(&mut self, v: f64) {
        let b = ((v - self.lo) / self.bin_width()).floor();
        let last = self.counts.len() - 1;
        let idx = if b.is_nan() || b < 0.0 { 0 } else { (b as usize).min(last) };
        self.counts[idx] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn center(&self, bin: usize) -> f64 {
        self.lo + (bin as f64 + 0.5) * self.bin_width()
    }

    /// Two whitespace-separated columns, bin center and count, one bin per
    /// line.
    pub fn to_plot_text(&self) -> String {
        let mut s = String::new();
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(s, "{:.4} {}", self.center(i), c);
        }
        s
    }
}

/// DBSCAN labels, `None` for noise. A point is a core point when at least
/// `min_pts` points (itself included) lie within `eps`. With `min_pts == 1`
/// every point is core and the clusters are the connected components of the
/// `eps`-neighbourhood graph.
pub fn dbscan(points: &Matrix, eps: f64, min_pts: usize, metric: Metric) -> Vec<Option<usize>> {
    let n = points.rows();
    let neighbours: Vec<Vec<usize>> =
        (0..n).map(|i| (0..n).filter(|&j| metric.distance(points.row(i), points.row(j)) <= eps).collect()).collect();
    let core: Vec<bool> = neighbours.iter().map(|nb| nb.len() >= min_pts.max(1)).collect();
    let mut label: Vec<Option<usize>> = vec![None; n];
    let mut next = 0;
    for start in 0..n {
        if label[start].is_some() || !core[start] {
            continue;
        }
        label[start] = Some(next);
        let mut stack = vec![start];
        while let Some(p) = stack.pop() {
            if !core[p] {
                continue;
            }
            for &q in &neighbours[p] {
                if label[q].is_none() {
                    label[q] = Some(next);
                    stack.push(q);
                }
            }
        }
        next += 1;
    }
    label
}

pub fn cluster_count(labels: &[Option<usize>]) -> usize {
    labels.iter().flatten().max().map_or(0, |m| m + 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRedundancy {
    /// 0 is the embedded input, `j` the output of encoder `j`.
    pub layer: usize,
    /// Cosine similarity between CLS and every other row.
    pub similarity: Histogram,
    /// DBSCAN cluster count per trace.
    pub clusters: Vec<usize>,
    pub rows: Vec<usize>,
}

impl LayerRedundancy {
    pub fn mean_clusters(&self) -> f64 {
        self.clusters.iter().sum::<usize>() as f64 / self.clusters.len().max(1) as f64
    }
}

pub const DEFAULT_EPS: f64 = 0.2;
pub const DEFAULT_MIN_PTS: usize = 1;
pub const DEFAULT_BINS: usize = 20;

/// Similarity histograms and cluster counts at the requested layers.
pub fn redundancy_report(traces: &[ForwardTrace], layers: &[usize], eps: f64, min_pts: usize, bins: usize) -> Result<Vec<LayerRedundancy>> {
    layers
        .iter()
        .map(|&j| {
            let mut similarity = Histogram::new(-1.0, 1.0, bins)?;
            let mut clusters = Vec::with_capacity(traces.len());
            let mut rows = Vec::with_capacity(traces.len());
            for t in traces {
                if j > t.layers.len() {
                    return invalid(format!("layer {j} not present in a {}-layer trace", t.layers.len()));
                }
                let m = if j == 0 { &t.embedded } else { &t.layers[j - 1].output };
                for r in 1..m.rows() {
                    similarity.add(cosine_similarity(m.row(0), m.row(r)));
                }
                clusters.push(cluster_count(&dbscan(m, eps, min_pts, Metric::CosineDissimilarity)));
                rows.push(m.rows());
            }
            Ok(LayerRedundancy { layer: j, similarity, clusters, rows })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_rows_form_one_cluster() {
        let m = Matrix::from_fn(6, 3, |_, j| j as f64 + 1.0);
        assert_eq!(cluster_count(&dbscan(&m, 0.2, 1, Metric::CosineDissimilarity)), 1);
        let mut h = Histogram::new(-1.0, 1.0, 20).unwrap();
        (1..6).for_each(|r| h.add(cosine_similarity(m.row(0), m.row(r))));
        assert_eq!(h.counts[19], 5);
    }

    #[test]
    fn two_orthogonal_bundles() {
        let rows = [[1.0, 0.01, 0.0], [1.0, -0.02, 0.0], [0.99, 0.0, 0.03], [0.0, 1.0, 0.01], [0.02, 1.0, 0.0]];
        let m = Matrix::from_rows(&rows).unwrap();
        let labels = dbscan(&m, 0.2, 1, Metric::CosineDissimilarity);
        assert_eq!(cluster_count(&labels), 2);
        assert_eq!(labels[0], labels[2]);
        assert_ne!(labels[0], labels[3]);
    }

    #[test]
    fn min_pts_marks_noise() {
        let m = Matrix::from_rows(&[[0.0], [0.1], [0.15], [5.0]]).unwrap();
        let labels = dbscan(&m, 0.2, 3, Metric::Euclidean);
        assert_eq!(labels, vec![Some(0), Some(0), Some(0), None]);
        assert_eq!(cluster_count(&dbscan(&m, 0.2, 1, Metric::Euclidean)), 2);
    }

    #[test]
    fn clusters_never_exceed_rows() {
        let m = Matrix::from_fn(9, 4, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        for eps in [0.0, 0.05, 0.2, 1.0, 2.0] {
            assert!(cluster_count(&dbscan(&m, eps, 1, Metric::CosineDissimilarity)) <= 9);
        }
    }

    #[test]
    fn histogram_edges() {
        let mut h = Histogram::new(-1.0, 1.0, 4).unwrap();
        for v in [-1.0, -0.5, 0.0, 0.999, 1.0, 7.0] {
            h.add(v);
        }
        assert_eq!(h.counts, vec![1, 1, 1, 3]);
        assert!(h.to_plot_text().starts_with("-0.7500 1\n"));
        assert!(Histogram::new(1.0, 1.0, 3).is_err());
    }
}
