use crate::encoder::{forward, forward_pyramid_star, EncoderStack, ForwardTrace, PipelineConfig};
use crate::error::Result;
use crate::harness::Example;
use crate::matrix::Matrix;
use crate::par;
use crate::selectors::{cover_radius, Metric};

/// Slack allowed on the per-layer displacement inequality.
pub const DISPLACEMENT_SLACK: f64 = 1e-12;

/// Per-layer check that the summed replacement displacement stays within
/// `δ_j · (N − ℓ_j)`, with `δ_j` recomputed under the Euclidean metric.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementAudit {
    pub layer: usize,
    pub displacement: f64,
    pub delta: f64,
    pub removed: usize,
    pub holds: bool,
}

impl DisplacementAudit {
    pub fn limit(&self) -> f64 {
        self.delta * self.removed as f64
    }
}

/// Audits every reduction site of a pyramid* trace. `lengths` are the
/// scheduled `ℓ_0..ℓ_L`; site 0 is the input.
pub fn audit_displacement(trace: &ForwardTrace, lengths: &[usize]) -> Result<Vec<DisplacementAudit>> {
    let sites = std::iter::once(&trace.input_reduction).chain(trace.layers.iter().map(|l| &l.reduction));
    let mut out = Vec::with_capacity(lengths.len());
    for (j, rec) in sites.enumerate() {
        let n = rec.pre.rows();
        let centers = rec.centers();
        let delta = if centers.is_empty() { 0.0 } else { cover_radius(&rec.pre, &centers, Metric::Euclidean)? };
        let displacement = rec.post.sub(&rec.pre).row_norm_sum();
        let removed = n.saturating_sub(lengths[j]);
        let holds = displacement <= delta * removed as f64 + DISPLACEMENT_SLACK;
        out.push(DisplacementAudit { layer: j, displacement, delta, removed, holds });
    }
    Ok(out)
}

/// One example of the selection-loss study.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleLoss {
    /// `|L(x, y) − L*(x, y)|` between the unreduced model and pyramid*.
    pub loss_diff: f64,
    /// Realized `δ_j` for `j = 1..=L` under the pipeline metric.
    pub delta: Vec<f64>,
    pub audit: Vec<DisplacementAudit>,
    /// Empirical expansion `‖ΔO_j‖ / (‖ΔE_j‖ + D_j)` per encoder; `None`
    /// when the denominator is zero.
    pub lambda: Vec<Option<f64>>,
    /// `|ΔL| / ‖ΔO_L‖` for the classifier.
    pub lambda_c: Option<f64>,
    /// `λ_C · Σ_j δ_j (N − ℓ_j) Π_{a ≥ j} λ_a` from the empirical ratios,
    /// with Euclidean `δ_j`. Terms with `δ_j (N − ℓ_j) = 0` vanish even when
    /// their ratios are undefined.
    pub bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionLossRecord {
    pub examples: Vec<ExampleLoss>,
    /// `N − ℓ_j` for `j = 1..=L`.
    pub removed: Vec<usize>,
}

impl SelectionLossRecord {
    pub fn mean_loss_diff(&self) -> f64 {
        self.examples.iter().map(|e| e.loss_diff).sum::<f64>() / self.examples.len().max(1) as f64
    }

    pub fn audit_violations(&self) -> usize {
        self.examples.iter().flat_map(|e| &e.audit).filter(|a| !a.holds).count()
    }

    pub fn max_delta(&self) -> f64 {
        self.examples.iter().flat_map(|e| &e.delta).copied().fold(0.0, f64::max)
    }
}

/// Compares the unreduced model with its pyramid* counterpart on every
/// example.
pub fn selection_loss(stack: &EncoderStack, examples: &[Example], config: &PipelineConfig) -> Result<SelectionLossRecord> {
    let n = config.schedule.input_len();
    let lengths = config.schedule.lengths().to_vec();
    let full = PipelineConfig::full(n, config.schedule.layers());
    let per = par::map_range(examples.len(), |i| -> Result<ExampleLoss> {
        let e = &examples[i];
        let cfg = config.for_example(i as u64);
        let plain = forward(stack, &e.tokens, &full)?;
        let star = forward_pyramid_star(stack, &e.tokens, &cfg)?;
        example_loss(&plain, &star, &lengths, e)
    });
    Ok(SelectionLossRecord {
        examples: per.into_iter().collect::<Result<_>>()?,
        removed: lengths[1..].iter().map(|&l| n - l).collect(),
    })
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den > 0.0).then(|| num / den)
}

fn diff(a: &Matrix, b: &Matrix) -> f64 {
    a.sub(b).row_norm_sum()
}

fn example_loss(plain: &ForwardTrace, star: &ForwardTrace, lengths: &[usize], e: &Example) -> Result<ExampleLoss> {
    let target = e.target();
    let loss_diff = (plain.loss(target)? - star.loss(target)?).abs();
    let audit = audit_displacement(star, lengths)?;

    let mut lambda = Vec::with_capacity(star.layers.len());
    // deviation entering encoder 1 is whatever the input site displaced
    let mut e_dev = audit[0].displacement;
    for (j, (p, s)) in plain.layers.iter().zip(&star.layers).enumerate() {
        let o_dev = diff(&p.output, &s.output);
        lambda.push(ratio(o_dev, e_dev + audit[j + 1].displacement));
        e_dev = o_dev;
    }
    let lambda_c = ratio(loss_diff, e_dev);

    let mut bound = Some(0.0);
    for (j, a) in audit.iter().enumerate() {
        let term = a.limit();
        if term == 0.0 {
            continue;
        }
        // a deviation introduced at the input or inside encoder j passes through encoders j..=L
        let chain = lambda[j.saturating_sub(1)..].iter().try_fold(1.0, |acc, l| l.map(|l| acc * l));
        bound = match (bound, chain, lambda_c) {
            (Some(b), Some(c), Some(lc)) => Some(b + lc * term * c),
            _ => None,
        };
    }

    Ok(ExampleLoss { loss_diff, delta: star.cover_radii(), audit, lambda, lambda_c, bound })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{StackDims, Head};
    use crate::harness::{make_dataset, SyntheticTask};
    use crate::schedule::{LengthSchedule, Rounding};
    use crate::selectors::SelectorKind;

    fn setup() -> (EncoderStack, Vec<Example>) {
        let dims = StackDims { layers: 3, heads: 2, dim: 8, ffn: 16, max_len: 12, head: Head::Classification { classes: 2 } };
        let task = SyntheticTask { vocab: 30, seq_len: 12, classes: 2, redundancy: 0.3, filler_pool: 2, dim: 8, seed: 4 };
        (EncoderStack::random(dims, 8).unwrap(), make_dataset(&task, 20, 0).unwrap())
    }

    #[test]
    fn full_retention_loses_nothing() {
        let (stack, data) = setup();
        let cfg = PipelineConfig::full(12, 3);
        let r = selection_loss(&stack, &data, &cfg).unwrap();
        assert!(r.examples.iter().all(|e| e.loss_diff == 0.0 && e.bound == Some(0.0)));
        assert_eq!(r.removed, vec![0, 0, 0]);
    }

    #[test]
    fn duplicates_lose_nothing() {
        let (stack, mut data) = setup();
        for e in data.iter_mut() {
            let dup = e.tokens.row(1).to_vec();
            for r in 2..12 {
                e.tokens.row_mut(r).copy_from_slice(&dup);
            }
        }
        let s = LengthSchedule::from_lengths(12, vec![12, 2, 2, 2]).unwrap();
        let r = selection_loss(&stack, &data, &PipelineConfig::new(s, SelectorKind::coreset(1))).unwrap();
        assert_eq!(r.max_delta(), 0.0);
        assert!(r.examples.iter().all(|e| e.loss_diff == 0.0 && e.bound == Some(0.0)));
    }

    #[test]
    fn audit_holds_and_bound_dominates() {
        let (stack, data) = setup();
        for sel in [SelectorKind::coreset(1), SelectorKind::coreset(3), SelectorKind::Random(2), SelectorKind::FirstK] {
            let s = LengthSchedule::generate(12, 3, 0.3, 3, Rounding::Floor).unwrap();
            let r = selection_loss(&stack, &data, &PipelineConfig::new(s, sel)).unwrap();
            assert_eq!(r.audit_violations(), 0);
            for e in &r.examples {
                assert!(e.loss_diff >= 0.0 && e.delta.iter().all(|&d| d >= 0.0));
                if let Some(b) = e.bound {
                    assert!(b + 1e-9 * b.max(1.0) >= e.loss_diff, "{b} < {}", e.loss_diff);
                }
            }
        }
    }
}
