//! Differentiable building blocks of an encoder layer.

use crate::matrix::Matrix;

use super::params::LayerParams;

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) struct LnCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

pub(crate) fn layer_norm(x: &Matrix, g: &Matrix, b: &Matrix) -> (Matrix, LnCache) {
    let (n, d) = x.shape();
    let mut xhat = Matrix::zeros(n, d);
    let mut y = Matrix::zeros(n, d);
    let mut inv_std = Vec::with_capacity(n);
    for i in 0..n {
        let r = x.row(i);
        let mean = r.iter().sum::<f64>() / d as f64;
        let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        for j in 0..d {
            let h = (r[j] - mean) * is;
            xhat[(i, j)] = h;
            y[(i, j)] = h * g[(0, j)] + b[(0, j)];
        }
    }
    (y, LnCache { xhat, inv_std })
}

/// Returns `(dx, dg, db)`.
pub(crate) fn layer_norm_backward(dy: &Matrix, g: &Matrix, cache: &LnCache) -> (Matrix, Matrix, Matrix) {
    let (n, d) = dy.shape();
    let mut dx = Matrix::zeros(n, d);
    let mut dg = Matrix::zeros(1, d);
    let mut db = Matrix::zeros(1, d);
    let mut dxhat = vec![0.0; d];
    for i in 0..n {
        let xh = cache.xhat.row(i);
        let dyr = dy.row(i);
        for j in 0..d {
            dg[(0, j)] += dyr[j] * xh[j];
            db[(0, j)] += dyr[j];
            dxhat[j] = dyr[j] * g[(0, j)];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let is = cache.inv_std[i];
        for j in 0..d {
            dx[(i, j)] = is * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    (dx, dg, db)
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

pub(crate) fn linear(x: &Matrix, w: &Matrix, b: &Matrix) -> Matrix {
    let mut y = x.matmul(w);
    y.add_row_broadcast(b);
    y
}

pub(crate) struct AttnCache {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Post-softmax attention, one `n × n` matrix per head.
    pub probs: Vec<Matrix>,
    pub ctx: Matrix,
}

/// Multi-head self-attention output `concat(softmax(QKᵀ/√d_h + log w) V) Wo + bo`.
/// `log_weights` adds a per-key bias, which is how token multiplicities enter.
pub(crate) fn attention(x: &Matrix, p: &LayerParams, log_weights: Option<&[f64]>) -> (Matrix, AttnCache) {
    let n = x.rows();
    let d = p.dim();
    let dh = d / p.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = linear(x, &p.wq, &p.bq);
    let k = linear(x, &p.wk, &p.bk);
    let v = linear(x, &p.wv, &p.bv);
    let mut ctx = Matrix::zeros(n, d);
    let mut probs = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qh = q.col_block(h * dh, dh);
        let kh = k.col_block(h * dh, dh);
        let vh = v.col_block(h * dh, dh);
        let mut s = qh.matmul_t(&kh);
        for i in 0..n {
            let row = s.row_mut(i);
            row.iter_mut().for_each(|x| *x *= scale);
            if let Some(lw) = log_weights {
                row.iter_mut().zip(lw).for_each(|(x, l)| *x += l);
            }
            softmax_in_place(row);
        }
        ctx.set_col_block(h * dh, &s.matmul(&vh));
        probs.push(s);
    }
    let out = linear(&ctx, &p.wo, &p.bo);
    (out, AttnCache { q, k, v, probs, ctx })
}

/// Gradients of [`attention`]; accumulates parameter gradients into `grad`
/// and returns `dx`.
pub(crate) fn attention_backward(
    dout: &Matrix,
    x: &Matrix,
    p: &LayerParams,
    cache: &AttnCache,
    grad: &mut LayerParams,
) -> Matrix {
    let n = x.rows();
    let d = p.dim();
    let dh = d / p.heads;
    let scale = 1.0 / (dh as f64).sqrt();

    grad.wo.add_assign(&cache.ctx.t_matmul(dout));
    grad.bo.add_assign(&dout.col_sums());
    let dctx = dout.matmul_t(&p.wo);

    let mut dq = Matrix::zeros(n, d);
    let mut dk = Matrix::zeros(n, d);
    let mut dv = Matrix::zeros(n, d);
    for h in 0..p.heads {
        let probs = &cache.probs[h];
        let qh = cache.q.col_block(h * dh, dh);
        let kh = cache.k.col_block(h * dh, dh);
        let vh = cache.v.col_block(h * dh, dh);
        let dout_h = dctx.col_block(h * dh, dh);
        let dprobs = dout_h.matmul_t(&vh);
        dv.set_col_block(h * dh, &probs.t_matmul(&dout_h));
        let mut ds = Matrix::zeros(n, n);
        for i in 0..n {
            let pr = probs.row(i);
            let dpr = dprobs.row(i);
            let inner: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
            for j in 0..n {
                ds[(i, j)] = pr[j] * (dpr[j] - inner) * scale;
            }
        }
        dq.set_col_block(h * dh, &ds.matmul(&kh));
        dk.set_col_block(h * dh, &ds.t_matmul(&qh));
    }

    grad.wq.add_assign(&x.t_matmul(&dq));
    grad.bq.add_assign(&dq.col_sums());
    grad.wk.add_assign(&x.t_matmul(&dk));
    grad.bk.add_assign(&dk.col_sums());
    grad.wv.add_assign(&x.t_matmul(&dv));
    grad.bv.add_assign(&dv.col_sums());
    let mut dx = dq.matmul_t(&p.wq);
    dx.add_assign(&dk.matmul_t(&p.wk));
    dx.add_assign(&dv.matmul_t(&p.wv));
    dx
}

pub(crate) struct FfnCache {
    pub pre: Matrix,
    pub act: Matrix,
}

pub(crate) fn feed_forward(x: &Matrix, p: &LayerParams) -> (Matrix, FfnCache) {
    let pre = linear(x, &p.w1, &p.b1);
    let mut act = pre.clone();
    act.as_mut_slice().iter_mut().for_each(|v| *v = gelu(*v));
    let out = linear(&act, &p.w2, &p.b2);
    (out, FfnCache { pre, act })
}

pub(crate) fn feed_forward_backward(
    dout: &Matrix,
    x: &Matrix,
    p: &LayerParams,
    cache: &FfnCache,
    grad: &mut LayerParams,
) -> Matrix {
    grad.w2.add_assign(&cache.act.t_matmul(dout));
    grad.b2.add_assign(&dout.col_sums());
    let mut dpre = dout.matmul_t(&p.w2);
    for (dv, &z) in dpre.as_mut_slice().iter_mut().zip(cache.pre.as_slice()) {
        *dv *= gelu_grad(z);
    }
    grad.w1.add_assign(&x.t_matmul(&dpre));
    grad.b1.add_assign(&dpre.col_sums());
    dpre.matmul_t(&p.w1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-3.0, -1.2, -0.1, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x = {x}");
        }
    }

    #[test]
    fn softmax_is_normalized_and_stable() {
        let mut r = vec![1000.0, 1001.0, 999.0];
        softmax_in_place(&mut r);
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(r[1] > r[0] && r[0] > r[2]);
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let x = Matrix::from_fn(3, 8, |i, j| (i * 8 + j) as f64 * 0.37 - 1.0);
        let (y, _) = layer_norm(&x, &Matrix::filled(1, 8, 1.0), &Matrix::zeros(1, 8));
        for r in y.row_iter() {
            let mean = r.iter().sum::<f64>() / 8.0;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }
}
