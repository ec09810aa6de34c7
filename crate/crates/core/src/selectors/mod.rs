//! Token selection strategies.
//!
//! Every subset selector keeps row 0 (the CLS token) and reports the realized
//! cover radius of its choice: the largest distance from any row to its
//! nearest selected row.

mod baselines;
mod kcenter;

pub use baselines::{attention_select, average_pool, pooled_len, select_first_k, select_random, token_significance};
pub use kcenter::{kcenter_exact, kcenter_greedy_batch, EXACT_ROW_LIMIT};

use std::fmt;

use crate::error::{invalid, Error, Result};
use crate::matrix::{dot, euclidean, norm, Matrix};

/// Distance used by the core-set selectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Metric {
    #[default]
    Euclidean,
    /// `1 - cos(a, b)`; zero vectors count as identical to each other and
    /// orthogonal to everything else.
    CosineDissimilarity,
}

impl Metric {
    #[inline]
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::Euclidean => euclidean(a, b),
            Metric::CosineDissimilarity => 1.0 - cosine_similarity(a, b),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Euclidean => "euclidean",
            Metric::CosineDissimilarity => "cosine",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "euclidean" | "l2" => Ok(Metric::Euclidean),
            "cosine" | "cosine_dissimilarity" => Ok(Metric::CosineDissimilarity),
            other => invalid(format!("unknown metric '{other}'")),
        }
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (dot(a, b) / (na * nb)).clamp(-1.0, 1.0),
    }
}

/// Outcome of a subset selection.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    /// Row indices in the order they were added; `selected[0] == 0`.
    pub selected: Vec<usize>,
    /// Score per entry of `selected`. For the core-set selectors this is the
    /// distance to the nearest earlier center at the time of addition, with
    /// `+inf` for CLS.
    pub importance: Vec<f64>,
    pub cover_radius: f64,
    pub m_used: usize,
    pub metric: Metric,
}

impl SelectionResult {
    pub fn k(&self) -> usize {
        self.selected.len()
    }

    /// Selected indices in ascending (original sequence) order.
    pub fn sorted(&self) -> Vec<usize> {
        let mut s = self.selected.clone();
        s.sort_unstable();
        s
    }
}

/// How many centers the batched greedy adds per round, as a function of `k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BatchSize {
    Fixed(usize),
    /// `ceil(f * k)`
    Fraction(f64),
    /// `k - 1`: everything in one round after CLS.
    AllButOne,
}

impl BatchSize {
    pub fn resolve(self, k: usize) -> usize {
        let upper = k.saturating_sub(1).max(1);
        let m = match self {
            BatchSize::Fixed(m) => m,
            BatchSize::Fraction(f) => (f * k as f64).ceil() as usize,
            BatchSize::AllButOne => upper,
        };
        m.clamp(1, upper)
    }

    /// The six batch sizes of the m-sweep.
    pub fn sweep() -> [BatchSize; 6] {
        [
            BatchSize::Fixed(1),
            BatchSize::Fraction(0.1),
            BatchSize::Fraction(0.2),
            BatchSize::Fraction(0.3),
            BatchSize::Fraction(0.4),
            BatchSize::AllButOne,
        ]
    }
}

impl fmt::Display for BatchSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BatchSize::Fixed(m) => write!(f, "{m}"),
            BatchSize::Fraction(x) => write!(f, "{x}k"),
            BatchSize::AllButOne => write!(f, "k-1"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SelectorKind {
    CoresetGreedy(BatchSize),
    CoresetExact,
    FirstK,
    Random(u64),
    /// Strided mean pooling; window in `2..=6`.
    AveragePool(usize),
    AttentionSelect,
}

impl SelectorKind {
    pub fn coreset(m: usize) -> Self {
        SelectorKind::CoresetGreedy(BatchSize::Fixed(m))
    }

    pub fn average_pool(window: usize) -> Result<Self> {
        check_window(window)?;
        Ok(SelectorKind::AveragePool(window))
    }

    pub fn is_subset(&self) -> bool {
        !matches!(self, SelectorKind::AveragePool(_))
    }

    /// Short name used in CSV output and on the command line.
    pub fn label(&self) -> String {
        match self {
            SelectorKind::CoresetGreedy(m) => format!("coreset:{m}"),
            SelectorKind::CoresetExact => "coreset-exact".into(),
            SelectorKind::FirstK => "first-k".into(),
            SelectorKind::Random(_) => "random".into(),
            SelectorKind::AveragePool(w) => format!("pool:{w}"),
            SelectorKind::AttentionSelect => "attention".into(),
        }
    }

    /// Parses `coreset[:m]`, `coreset:0.2k`, `coreset:k-1`, `coreset-exact`,
    /// `first-k`, `random[:seed]`, `pool:w`, `attention`.
    pub fn parse(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n.trim(), Some(a.trim())),
            None => (s.trim(), None),
        };
        let bad = || Error::InvalidArgument(format!("bad selector '{s}'"));
        match (name, arg) {
            ("coreset", None) => Ok(SelectorKind::coreset(1)),
            ("coreset", Some("k-1")) => Ok(SelectorKind::CoresetGreedy(BatchSize::AllButOne)),
            ("coreset", Some(a)) => {
                if let Some(f) = a.strip_suffix('k') {
                    let f: f64 = f.parse().map_err(|_| bad())?;
                    if !(f > 0.0 && f <= 1.0) {
                        return Err(bad());
                    }
                    Ok(SelectorKind::CoresetGreedy(BatchSize::Fraction(f)))
                } else {
                    let m: usize = a.parse().map_err(|_| bad())?;
                    if m == 0 {
                        return Err(bad());
                    }
                    Ok(SelectorKind::coreset(m))
                }
            }
            ("coreset-exact", None) => Ok(SelectorKind::CoresetExact),
            ("first-k", None) => Ok(SelectorKind::FirstK),
            ("random", None) => Ok(SelectorKind::Random(0)),
            ("random", Some(a)) => Ok(SelectorKind::Random(a.parse().map_err(|_| bad())?)),
            ("pool", Some(a)) => SelectorKind::average_pool(a.parse().map_err(|_| bad())?),
            ("attention", None) => Ok(SelectorKind::AttentionSelect),
            _ => Err(bad()),
        }
    }
}

/// Runs a subset selector. `attention` is required for
/// [`SelectorKind::AttentionSelect`] and ignored otherwise.
pub fn select(
    kind: SelectorKind,
    emb: &Matrix,
    k: usize,
    metric: Metric,
    attention: Option<&[Matrix]>,
) -> Result<SelectionResult> {
    match kind {
        SelectorKind::CoresetGreedy(m) => kcenter_greedy_batch(emb, k, m.resolve(k), metric),
        SelectorKind::CoresetExact => kcenter_exact(emb, k, metric),
        SelectorKind::FirstK => select_first_k(emb, k),
        SelectorKind::Random(seed) => select_random(emb, k, seed),
        SelectorKind::AttentionSelect => match attention {
            Some(att) => attention_select(emb, k, att),
            None => invalid("attention-select needs the preceding attention tensor"),
        },
        SelectorKind::AveragePool(_) => invalid("average pooling is not a subset selector"),
    }
}

/// Largest distance from any row to its nearest selected row.
pub fn cover_radius(emb: &Matrix, selected: &[usize], metric: Metric) -> Result<f64> {
    if selected.is_empty() {
        return invalid("cover radius of an empty selection");
    }
    if let Some(&bad) = selected.iter().find(|&&i| i >= emb.rows()) {
        return invalid(format!("selected index {bad} out of range for {} rows", emb.rows()));
    }
    Ok((0..emb.rows())
        .map(|u| {
            selected
                .iter()
                .map(|&v| metric.distance(emb.row(u), emb.row(v)))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max))
}

/// For every row, the position within `centers` of its nearest center
/// (ties to the earliest center) and the distance to it.
pub fn nearest_centers(emb: &Matrix, centers: &[usize], metric: Metric) -> Vec<(usize, f64)> {
    (0..emb.rows())
        .map(|u| {
            let mut best = (0, f64::INFINITY);
            for (pos, &c) in centers.iter().enumerate() {
                let d = if c == u { 0.0 } else { metric.distance(emb.row(u), emb.row(c)) };
                if d < best.1 {
                    best = (pos, d);
                }
            }
            best
        })
        .collect()
}

pub(crate) fn check_embeddings(emb: &Matrix) -> Result<()> {
    if emb.rows() == 0 || emb.cols() == 0 {
        return invalid("embedding matrix is empty");
    }
    if !emb.all_finite() {
        return invalid("embedding matrix contains NaN or infinite values");
    }
    Ok(())
}

pub(crate) fn check_k(emb: &Matrix, k: usize) -> Result<()> {
    check_embeddings(emb)?;
    if k == 0 {
        return invalid("k must be at least 1");
    }
    if k > emb.rows() {
        return invalid(format!("k = {k} exceeds the {} available rows", emb.rows()));
    }
    Ok(())
}

pub(crate) fn check_window(window: usize) -> Result<()> {
    if !(2..=6).contains(&window) {
        return invalid(format!("pooling window {window} outside 2..=6"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cover_radius_examples() {
        let pts = Matrix::column(&[0.0, 4.0, 5.0, 10.0]);
        assert_eq!(cover_radius(&pts, &[0, 3], Metric::Euclidean).unwrap(), 5.0);
        assert_eq!(cover_radius(&pts, &[0, 1, 2, 3], Metric::Euclidean).unwrap(), 0.0);
        let two = Matrix::column(&[0.0, 7.0]);
        assert_eq!(cover_radius(&two, &[0], Metric::Euclidean).unwrap(), 7.0);
        assert!(cover_radius(&pts, &[], Metric::Euclidean).is_err());
        assert!(cover_radius(&pts, &[4], Metric::Euclidean).is_err());
    }

    #[test]
    fn batch_size_resolution() {
        assert_eq!(BatchSize::Fixed(1).resolve(10), 1);
        assert_eq!(BatchSize::Fraction(0.1).resolve(10), 1);
        assert_eq!(BatchSize::Fraction(0.3).resolve(19), 6);
        assert_eq!(BatchSize::AllButOne.resolve(10), 9);
        assert_eq!(BatchSize::AllButOne.resolve(1), 1);
        assert_eq!(BatchSize::Fixed(50).resolve(5), 4);
    }

    #[test]
    fn selector_labels_round_trip() {
        for s in ["coreset:1", "coreset:0.2k", "coreset:k-1", "coreset-exact", "first-k", "pool:3", "attention"] {
            assert_eq!(SelectorKind::parse(s).unwrap().label(), s);
        }
        assert!(SelectorKind::parse("pool:7").is_err());
        assert!(SelectorKind::parse("pool:1").is_err());
        assert!(SelectorKind::parse("coreset:0").is_err());
        assert_eq!(SelectorKind::parse("random:9").unwrap(), SelectorKind::Random(9));
    }

    #[test]
    fn cosine_edge_cases() {
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[0.0, 0.0]), 1.0);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((Metric::CosineDissimilarity.distance(&[1.0, 0.0], &[0.0, 2.0]) - 1.0).abs() < 1e-15);
        assert!(Metric::CosineDissimilarity.distance(&[1.0, 1.0], &[3.0, 3.0]).abs() < 1e-15);
    }
}
