//! A small transformer encoder stack with a token-reduction site in every
//! layer.

mod backward;
mod flops;
mod forward;
pub(crate) mod ops;
mod params;

pub use backward::backward;
pub use flops::{count_flops, layer_flops};
pub use forward::{
    forward, forward_pyramid_star, forward_with, weighted_attention, ForwardOptions, ForwardTrace, LayerTrace, Mode,
    PipelineConfig, Placement, Reduction, ReductionRecord, SelectionPlan, Target, TokenMultiplicity,
};
pub use params::{EncoderStack, Gradients, Head, LayerParams, StackDims};

/// Captured pyramid-mode pass followed by backpropagation.
pub fn loss_and_gradients(
    stack: &EncoderStack,
    tokens: &crate::Matrix,
    config: &PipelineConfig,
    target: Target,
) -> crate::Result<(f64, Gradients)> {
    let trace = forward_with(stack, tokens, config, ForwardOptions { capture: true, ..Default::default() })?;
    let g = backward(stack, &trace, target)?;
    Ok((trace.loss(target)?, g))
}
