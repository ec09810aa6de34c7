use crate::schedule::LengthSchedule;

use super::params::StackDims;

/// Multiply-accumulate count of one encoder on `len` rows:
/// `4·ℓ·d²` for the Q/K/V/O projections, `2·ℓ²·d` for scores and context,
/// `H·ℓ²` for the softmax and `2·ℓ·d·f` for the feed-forward block.
/// Biases and layer norms are linear in `ℓ·d` and left out.
pub fn layer_flops(len: usize, dim: usize, heads: usize, ffn: usize) -> u64 {
    let (l, d, h, f) = (len as u64, dim as u64, heads as u64, ffn as u64);
    4 * l * d * d + 2 * l * l * d + h * l * l + 2 * l * d * f
}

/// Total over encoders `1..=L`, each charged at its retained length `ℓ_j`.
pub fn count_flops(schedule: &LengthSchedule, dims: &StackDims) -> u64 {
    schedule.lengths()[1..].iter().map(|&l| layer_flops(l, dims.dim, dims.heads, dims.ffn)).sum()
}
