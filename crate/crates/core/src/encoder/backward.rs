use crate::error::{Error, Result};
use crate::matrix::Matrix;

use super::forward::{loss_and_grad, ForwardTrace, Placement, Target};
use super::ops;
use super::params::{EncoderStack, Gradients, LayerParams};

/// Loss gradient for a captured forward pass. Selections are treated as
/// constants, so rows that were dropped get exactly zero gradient.
pub fn backward(stack: &EncoderStack, trace: &ForwardTrace, target: Target) -> Result<Gradients> {
    let caches = trace
        .caches
        .as_ref()
        .ok_or_else(|| Error::State("forward trace was not captured for backpropagation".into()))?;
    if caches.len() != stack.layers.len() {
        return Err(Error::State("trace does not belong to this stack".into()));
    }
    let (_, dlogits) = loss_and_grad(&trace.logits, stack.dims.head, target)?;
    let dlogits = Matrix::new(1, dlogits.len(), dlogits)?;
    let d = stack.dims.dim;

    let mut grad = EncoderStack::zeros(stack.dims)?;
    let out = trace.final_output();
    let cls = Matrix::new(1, d, out.row(0).to_vec())?;
    grad.cls_w = cls.t_matmul(&dlogits);
    grad.cls_b = dlogits.clone();
    let mut dx = Matrix::zeros(out.rows(), d);
    dx.row_mut(0).copy_from_slice(dlogits.matmul_t(&stack.cls_w).row(0));

    for (j, cache) in caches.iter().enumerate().rev() {
        let p = &stack.layers[j];
        let g = &mut grad.layers[j];
        let reduction = &trace.layers[j].reduction.reduction;
        let dy = match trace.placement {
            Placement::EndOfEncoder => reduction.backward(&dx, cache.rows_at_site),
            Placement::AfterAttention => dx,
        };
        let dr2 = ln_backward(&dy, &p.ln2_g, &cache.ln2, &mut g.ln2_g, &mut g.ln2_b);
        let mut da = ops::feed_forward_backward(&dr2, &cache.ffn_in, p, &cache.ffn, g);
        da.add_assign(&dr2);
        if trace.placement == Placement::AfterAttention {
            da = reduction.backward(&da, cache.rows_at_site);
        }
        let dr1 = ln_backward(&da, &p.ln1_g, &cache.ln1, &mut g.ln1_g, &mut g.ln1_b);
        let mut dxin = attention_grad(&dr1, cache, p, g);
        dxin.add_assign(&dr1);
        dx = dxin;
    }

    let n = trace.embedded.rows();
    let input = trace.input_reduction.reduction.backward(&dx, n);
    for i in 0..n {
        for (a, b) in grad.position.row_mut(i).iter_mut().zip(input.row(i)) {
            *a += b;
        }
    }
    Ok(Gradients { tensors: grad.into_tensors(), input })
}

fn ln_backward(dy: &Matrix, gain: &Matrix, cache: &ops::LnCache, dg: &mut Matrix, db: &mut Matrix) -> Matrix {
    let (dx, g, b) = ops::layer_norm_backward(dy, gain, cache);
    dg.add_assign(&g);
    db.add_assign(&b);
    dx
}

fn attention_grad(dout: &Matrix, cache: &super::forward::LayerCache, p: &LayerParams, g: &mut LayerParams) -> Matrix {
    ops::attention_backward(dout, &cache.x, p, &cache.attn, g)
}
