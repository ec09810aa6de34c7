use crate::error::{invalid, Result};
use crate::schedule::LengthSchedule;

/// Attention memory proxy `Σ_{j=1..L} ℓ_j² + ℓ_j·d`.
pub fn space_cost(schedule: &LengthSchedule, d: usize) -> f64 {
    schedule.lengths()[1..].iter().map(|&l| (l * l + l * d) as f64).sum()
}

/// `1 − S(schedule) / S(full)`, where the full schedule keeps `N` rows in
/// every layer.
pub fn space_reduction(schedule: &LengthSchedule, d: usize) -> f64 {
    let full = LengthSchedule::full(schedule.input_len(), schedule.layers());
    1.0 - space_cost(schedule, d) / space_cost(&full, d)
}

pub fn speedup(base_seconds: f64, pruned_seconds: f64) -> Result<f64> {
    if !(base_seconds > 0.0 && pruned_seconds > 0.0) || !base_seconds.is_finite() || !pruned_seconds.is_finite() {
        return invalid(format!("timings must be positive, got {base_seconds} and {pruned_seconds}"));
    }
    Ok(base_seconds / pruned_seconds)
}

/// One evaluated (schedule, selector, seed) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub schedule_id: String,
    pub selector: String,
    pub seed: u64,
    pub accuracy: f64,
    pub space_reduction: f64,
    pub flops_base: u64,
    pub flops_pruned: u64,
    pub wall_clock_base: Option<f64>,
    pub wall_clock_pruned: Option<f64>,
    pub speedup: Option<f64>,
}

impl RunRecord {
    /// Fills `speedup` from the two wall-clock fields.
    pub fn with_timing(mut self, base: f64, pruned: f64) -> Result<Self> {
        self.speedup = Some(speedup(base, pruned)?);
        self.wall_clock_base = Some(base);
        self.wall_clock_pruned = Some(pruned);
        Ok(self)
    }

    pub fn flops_ratio(&self) -> f64 {
        self.flops_base as f64 / self.flops_pruned as f64
    }
}

/// Points not dominated in (speedup, accuracy), sorted by speedup.
pub fn pareto_frontier(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut sorted: Vec<(f64, f64)> = points.iter().copied().filter(|(s, a)| s.is_finite() && a.is_finite()).collect();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.total_cmp(&a.1)));
    let mut frontier: Vec<(f64, f64)> = Vec::new();
    for p in sorted {
        if frontier.last().is_none_or(|best| p.1 > best.1) {
            frontier.push(p);
        }
    }
    frontier.reverse();
    frontier
}

/// Accuracy on the frontier at each target speedup, linearly interpolated.
/// `None` outside the frontier's speedup range.
pub fn pareto_at_points(points: &[(f64, f64)], targets: &[f64]) -> Vec<Option<f64>> {
    let f = pareto_frontier(points);
    targets.iter().map(|&t| interpolate(&f, t)).collect()
}

pub fn pareto_at(records: &[RunRecord], targets: &[f64]) -> Vec<Option<f64>> {
    let points: Vec<(f64, f64)> = records.iter().filter_map(|r| r.speedup.map(|s| (s, r.accuracy))).collect();
    pareto_at_points(&points, targets)
}

fn interpolate(frontier: &[(f64, f64)], t: f64) -> Option<f64> {
    let (first, last) = (frontier.first()?, frontier.last()?);
    if !(t >= first.0 && t <= last.0) {
        return None;
    }
    for w in frontier.windows(2) {
        let ((s0, a0), (s1, a1)) = (w[0], w[1]);
        if t == s0 {
            return Some(a0);
        }
        if t < s1 {
            let u = (t - s0) / (s1 - s0);
            return Some(a0 * (1.0 - u) + a1 * u);
        }
    }
    Some(last.1)
}
