use std::collections::BTreeMap;

use crate::encoder::{forward, forward_with, EncoderStack, ForwardOptions, PipelineConfig, Placement, Reduction, SelectionPlan};
use crate::error::{invalid, Result};
use crate::harness::Example;
use crate::matrix::Matrix;
use crate::par;
use crate::schedule::LengthSchedule;
use crate::selectors::{nearest_centers, select, Metric, SelectorKind};

/// Plug-in mutual information of two label sequences, in nats.
pub fn mutual_information(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return invalid(format!("label lists differ in length ({} vs {})", a.len(), b.len()));
    }
    if a.is_empty() {
        return invalid("mutual information of empty label lists");
    }
    let n = a.len() as f64;
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut ma: BTreeMap<usize, usize> = BTreeMap::new();
    let mut mb: BTreeMap<usize, usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *ma.entry(x).or_default() += 1;
        *mb.entry(y).or_default() += 1;
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(x, y), &c)| {
            let pxy = c as f64 / n;
            pxy * (pxy * n * n / (ma[&x] as f64 * mb[&y] as f64)).ln()
        })
        .sum();
    Ok(mi.max(0.0))
}

/// Plug-in entropy in nats.
pub fn entropy(labels: &[usize]) -> f64 {
    let n = labels.len() as f64;
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    labels.iter().for_each(|&l| *counts.entry(l).or_default() += 1);
    -counts.values().map(|&c| c as f64 / n).map(|p| p * p.ln()).sum::<f64>()
}

/// Ranks starting at 1; tied values share their mean rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        idx[i..=j].iter().for_each(|&k| ranks[k] = r);
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation. `None` when either side is constant or the
/// lengths differ.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

/// Agreement with the unreduced model after removing the rank-`k` token,
/// for `k = 1..N-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationCurve {
    pub encoder: usize,
    /// `mi[k - 1]` is the mutual information after dropping rank `k`.
    pub mi: Vec<f64>,
    /// Mutual information of the baseline with itself (nothing dropped).
    pub reference: f64,
}

impl AblationCurve {
    pub fn ranks(&self) -> Vec<f64> {
        (1..=self.mi.len()).map(|k| k as f64).collect()
    }

    /// Spearman correlation between rank and mutual information.
    pub fn rank_correlation(&self) -> Option<f64> {
        spearman(&self.ranks(), &self.mi)
    }

    /// Spearman correlation between token importance (higher for earlier
    /// ranks) and mutual information.
    pub fn importance_correlation(&self) -> Option<f64> {
        let imp: Vec<f64> = self.ranks().iter().map(|r| -r).collect();
        spearman(&imp, &self.mi)
    }
}

/// For every example, orders the tokens entering encoder `encoder` (1-based)
/// by the selector's addition order, then for each rank `k` drops that one
/// token before the encoder runs and compares predictions with the
/// unreduced model.
pub fn importance_ablation(stack: &EncoderStack, examples: &[Example], encoder: usize, selector: SelectorKind) -> Result<AblationCurve> {
    let s = ablation_setup(stack, examples, encoder, selector)?;
    let mi = (1..s.n)
        .map(|k| ablated_predictions(stack, examples, &s, encoder, k).and_then(|p| mutual_information(&s.base, &p)))
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationCurve { encoder, mi, reference: mutual_information(&s.base, &s.base)? })
}

/// Mutual information after dropping the single rank-`rank` token.
pub fn ablate_rank(stack: &EncoderStack, examples: &[Example], encoder: usize, selector: SelectorKind, rank: usize) -> Result<f64> {
    let s = ablation_setup(stack, examples, encoder, selector)?;
    if rank == 0 || rank >= s.n {
        return invalid(format!("rank {rank} outside 1..{}; CLS cannot be dropped", s.n));
    }
    mutual_information(&s.base, &ablated_predictions(stack, examples, &s, encoder, rank)?)
}

struct Setup {
    base: Vec<usize>,
    orders: Vec<Vec<usize>>,
    /// Rows at the reduction site that feeds the ablated encoder.
    sites: Vec<Matrix>,
    n: usize,
}

fn ablation_setup(stack: &EncoderStack, examples: &[Example], encoder: usize, selector: SelectorKind) -> Result<Setup> {
    let layers = stack.dims.layers;
    if encoder == 0 || encoder > layers {
        return invalid(format!("encoder index {encoder} outside 1..={layers}"));
    }
    if !selector.is_subset() {
        return invalid("importance ablation needs a subset selector");
    }
    let Some(first) = examples.first() else {
        return invalid("no examples");
    };
    let n = first.tokens.rows();
    if examples.iter().any(|e| e.tokens.rows() != n) {
        return invalid("examples must share one sequence length");
    }
    let full = PipelineConfig::full(n, layers);
    let traced = par::map_slice(examples, |e| -> Result<(usize, Vec<usize>, Matrix)> {
        let t = forward(stack, &e.tokens, &full)?;
        let layer = &t.layers[encoder - 1];
        let sel = select(selector, &layer.input, n, Metric::Euclidean, Some(&layer.attention))?;
        let site = if encoder == 1 { t.embedded.clone() } else { t.layers[encoder - 2].output.clone() };
        Ok((t.predicted_class(), sel.selected, site))
    });
    let mut setup = Setup { base: Vec::new(), orders: Vec::new(), sites: Vec::new(), n };
    for r in traced {
        let (p, o, s) = r?;
        setup.base.push(p);
        setup.orders.push(o);
        setup.sites.push(s);
    }
    Ok(setup)
}

fn ablated_predictions(stack: &EncoderStack, examples: &[Example], setup: &Setup, encoder: usize, rank: usize) -> Result<Vec<usize>> {
    let layers = stack.dims.layers;
    let n = setup.n;
    let site = encoder - 1;
    let lengths: Vec<usize> = (0..=layers).map(|i| if i < site { n } else { n - 1 }).collect();
    let schedule = LengthSchedule::from_lengths(n, lengths)?;
    let config = PipelineConfig::new(schedule, SelectorKind::FirstK).with_placement(Placement::EndOfEncoder);
    let preds = par::map_range(examples.len(), |i| -> Result<usize> {
        let e = &examples[i];
        let dropped = setup.orders[i][rank];
        let keep: Vec<usize> = (0..n).filter(|&r| r != dropped).collect();
        let nearest = nearest_centers(&setup.sites[i], &keep, Metric::Euclidean).into_iter().map(|(c, _)| c).collect();
        let drop = Reduction::Drop { keep, nearest };
        let mut plan = SelectionPlan { input: Reduction::Keep, layers: vec![Reduction::Keep; layers] };
        if site == 0 {
            plan.input = drop;
        } else {
            plan.layers[site - 1] = drop;
        }
        let t = forward_with(stack, &e.tokens, &config, ForwardOptions { plan: Some(&plan), ..Default::default() })?;
        Ok(t.predicted_class())
    });
    preds.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_balanced_predictions_give_ln2() {
        let a: Vec<usize> = (0..100).map(|i| i % 2).collect();
        let mi = mutual_information(&a, &a).unwrap();
        assert!((mi - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn independent_predictions_give_zero() {
        let a: Vec<usize> = (0..100).map(|i| i % 2).collect();
        assert_eq!(mutual_information(&a, &[1; 100]).unwrap(), 0.0);
        // joint counts 25 in each cell of a 2x2 table
        let x: Vec<usize> = (0..100).map(|i| i % 2).collect();
        let y: Vec<usize> = (0..100).map(|i| (i / 2) % 2).collect();
        assert!(mutual_information(&x, &y).unwrap().abs() < 1e-15);
    }

    #[test]
    fn mi_errors_and_symmetry() {
        assert!(mutual_information(&[0, 1], &[0]).is_err());
        assert!(mutual_information(&[], &[]).is_err());
        let a = [0, 0, 1, 2, 2, 1, 0, 1];
        let b = [1, 0, 1, 1, 2, 0, 0, 2];
        let ab = mutual_information(&a, &b).unwrap();
        assert!((ab - mutual_information(&b, &a).unwrap()).abs() < 1e-15);
        assert!(ab >= 0.0 && ab <= entropy(&a).min(entropy(&b)) + 1e-12);
    }

    #[test]
    fn spearman_known_values() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 1.0, 0.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        // ranks x = 1..5, y = [1,2,3,5,4] -> 1 - 6*2/(5*24)
        let r = spearman(&[1.0, 2.0, 3.0, 4.0, 5.0], &[1.0, 2.0, 3.0, 9.0, 4.0]).unwrap();
        assert!((r - 0.9).abs() < 1e-12);
    }
}
