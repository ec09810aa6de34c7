//! Measurements over schedules, runs and traces.

mod bound;
mod info;
mod metrics;
mod redundancy;

pub use bound::{audit_displacement, selection_loss, DisplacementAudit, ExampleLoss, SelectionLossRecord, DISPLACEMENT_SLACK};
pub use info::{ablate_rank, average_ranks, entropy, importance_ablation, mutual_information, spearman, AblationCurve};
pub use metrics::{pareto_at, pareto_at_points, pareto_frontier, space_cost, space_reduction, speedup, RunRecord};
pub use redundancy::{
    cluster_count, dbscan, redundancy_report, Histogram, LayerRedundancy, DEFAULT_BINS, DEFAULT_EPS, DEFAULT_MIN_PTS,
};

/// Denominator floor for [`relative_error`]. Central differences at step
/// 1e-5 carry about 1e-11 of absolute error, so gradients below this size
/// are compared in absolute terms.
pub const GRADIENT_FLOOR: f64 = 1e-4;

/// `|a − b| / max(|a|, |b|, GRADIENT_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRADIENT_FLOOR)
}
