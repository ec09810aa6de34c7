use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};
use crate::matrix::Matrix;

/// Output head reading the final CLS embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// Softmax cross-entropy over `classes` logits.
    Classification { classes: usize },
    /// One output trained with `0.5 * (y - t)^2`.
    Regression,
}

impl Head {
    pub fn outputs(self) -> usize {
        match self {
            Head::Classification { classes } => classes,
            Head::Regression => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackDims {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ffn: usize,
    /// Rows of the positional embedding table.
    pub max_len: usize,
    pub head: Head,
}

impl Default for StackDims {
    fn default() -> Self {
        StackDims { layers: 4, heads: 2, dim: 32, ffn: 64, max_len: 32, head: Head::Classification { classes: 2 } }
    }
}

impl StackDims {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.dim == 0 || self.ffn == 0 || self.max_len == 0 {
            return invalid(format!("degenerate stack dimensions {self:?}"));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return invalid(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.head.outputs() == 0 {
            return invalid("classifier needs at least one class");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// One encoder: multi-head self-attention and a GELU feed-forward block,
/// each followed by a residual connection and layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub heads: usize,
    pub wq: Matrix,
    pub bq: Matrix,
    pub wk: Matrix,
    pub bk: Matrix,
    pub wv: Matrix,
    pub bv: Matrix,
    pub wo: Matrix,
    pub bo: Matrix,
    pub ln1_g: Matrix,
    pub ln1_b: Matrix,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub ln2_g: Matrix,
    pub ln2_b: Matrix,
}

impl LayerParams {
    pub(crate) const TENSORS: usize = 16;

    pub fn zeros(heads: usize, dim: usize, ffn: usize) -> Self {
        LayerParams {
            heads,
            wq: Matrix::zeros(dim, dim),
            bq: Matrix::zeros(1, dim),
            wk: Matrix::zeros(dim, dim),
            bk: Matrix::zeros(1, dim),
            wv: Matrix::zeros(dim, dim),
            bv: Matrix::zeros(1, dim),
            wo: Matrix::zeros(dim, dim),
            bo: Matrix::zeros(1, dim),
            ln1_g: Matrix::zeros(1, dim),
            ln1_b: Matrix::zeros(1, dim),
            w1: Matrix::zeros(dim, ffn),
            b1: Matrix::zeros(1, ffn),
            w2: Matrix::zeros(ffn, dim),
            b2: Matrix::zeros(1, dim),
            ln2_g: Matrix::zeros(1, dim),
            ln2_b: Matrix::zeros(1, dim),
        }
    }

    fn random(heads: usize, dim: usize, ffn: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut p = LayerParams::zeros(heads, dim, ffn);
        for w in [&mut p.wq, &mut p.wk, &mut p.wv, &mut p.wo] {
            fill_normal(w, (1.0 / dim as f64).sqrt(), rng);
        }
        fill_normal(&mut p.w1, (1.0 / dim as f64).sqrt(), rng);
        fill_normal(&mut p.w2, (1.0 / ffn as f64).sqrt(), rng);
        p.ln1_g = Matrix::filled(1, dim, 1.0);
        p.ln2_g = Matrix::filled(1, dim, 1.0);
        p
    }

    pub fn dim(&self) -> usize {
        self.wq.rows()
    }

    pub(crate) fn tensors(&self) -> [&Matrix; Self::TENSORS] {
        [
            &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo, &self.bo, &self.ln1_g, &self.ln1_b,
            &self.w1, &self.b1, &self.w2, &self.b2, &self.ln2_g, &self.ln2_b,
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut Matrix; Self::TENSORS] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.ln2_g,
            &mut self.ln2_b,
        ]
    }
}

/// Parameters of the whole model: positional embeddings, `L` encoders and
/// the output head.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStack {
    pub dims: StackDims,
    /// `max_len × dim`; starts at zero so untrained stacks preserve exact
    /// token duplicates.
    pub position: Matrix,
    pub layers: Vec<LayerParams>,
    /// `dim × outputs`
    pub cls_w: Matrix,
    /// `1 × outputs`
    pub cls_b: Matrix,
}

impl EncoderStack {
    pub fn zeros(dims: StackDims) -> Result<Self> {
        dims.validate()?;
        Ok(EncoderStack {
            dims,
            position: Matrix::zeros(dims.max_len, dims.dim),
            layers: (0..dims.layers).map(|_| LayerParams::zeros(dims.heads, dims.dim, dims.ffn)).collect(),
            cls_w: Matrix::zeros(dims.dim, dims.head.outputs()),
            cls_b: Matrix::zeros(1, dims.head.outputs()),
        })
    }

    /// Gaussian init scaled by `1/sqrt(fan_in)`, unit layer-norm gains,
    /// zero biases and positions.
    pub fn random(dims: StackDims, seed: u64) -> Result<Self> {
        let mut s = EncoderStack::zeros(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in s.layers.iter_mut() {
            *l = LayerParams::random(dims.heads, dims.dim, dims.ffn, &mut rng);
        }
        fill_normal(&mut s.cls_w, (1.0 / dims.dim as f64).sqrt(), &mut rng);
        Ok(s)
    }

    /// All parameter tensors in serialization order.
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut v = vec![&self.position];
        for l in &self.layers {
            v.extend(l.tensors());
        }
        v.push(&self.cls_w);
        v.push(&self.cls_b);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = vec![&mut self.position];
        for l in self.layers.iter_mut() {
            v.extend(l.tensors_mut());
        }
        v.push(&mut self.cls_w);
        v.push(&mut self.cls_b);
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.rows() * t.cols()).sum()
    }

    pub(crate) fn into_tensors(self) -> Vec<Matrix> {
        let mut v = vec![self.position];
        for l in self.layers {
            v.extend([
                l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo, l.ln1_g, l.ln1_b, l.w1, l.b1, l.w2, l.b2, l.ln2_g, l.ln2_b,
            ]);
        }
        v.push(self.cls_w);
        v.push(self.cls_b);
        v
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }
}

/// Gradients of a scalar loss, one tensor per entry of
/// [`EncoderStack::tensors`], plus the gradient w.r.t. the input tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Matrix>,
    pub input: Matrix,
}

impl Gradients {
    pub fn zeros_like(stack: &EncoderStack, rows: usize) -> Self {
        Gradients {
            tensors: stack.tensors().iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect(),
            input: Matrix::zeros(rows, stack.dims.dim),
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors.iter().map(|t| t.frobenius_norm().powi(2)).sum::<f64>().sqrt()
    }

    /// Accumulates parameter gradients; input gradients are ignored.
    pub fn add_params(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.tensors.iter_mut().for_each(|t| t.scale(s));
    }
}

fn fill_normal(m: &mut Matrix, std: f64, rng: &mut ChaCha8Rng) {
    let normal = Normal::new(0.0, std).expect("finite std");
    m.as_mut_slice().iter_mut().for_each(|v| *v = normal.sample(rng));
}
