//! Forward pass with per-layer token reduction.
//!
//! Each encoder `j` shrinks its sequence to `ℓ_j` rows at one site, either
//! right after the attention block or at the end of the encoder. In the
//! default (pyramid) mode the non-selected rows are dropped. In pyramid*
//! mode the sequence keeps all `N` rows and each non-selected row is
//! overwritten by its nearest selected row, which is the construction used
//! to bound the selection loss.

use crate::error::{invalid, Error, Result};
use crate::matrix::Matrix;
use crate::schedule::LengthSchedule;
use crate::selectors::{self, cover_radius, nearest_centers, pooled_len, Metric, SelectionResult, SelectorKind};

use super::ops::{self, AttnCache, FfnCache, LnCache};
use super::params::{EncoderStack, Head, LayerParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Placement {
    /// Between the attention block and the feed-forward block.
    #[default]
    AfterAttention,
    EndOfEncoder,
}

impl Placement {
    pub fn name(self) -> &'static str {
        match self {
            Placement::AfterAttention => "after_attention",
            Placement::EndOfEncoder => "end_of_encoder",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "after_attention" => Ok(Placement::AfterAttention),
            "end_of_encoder" => Ok(Placement::EndOfEncoder),
            other => invalid(format!("unknown placement '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    /// Non-selected rows are removed.
    #[default]
    Pyramid,
    /// Non-selected rows are replaced by their nearest selected row.
    PyramidStar,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub schedule: LengthSchedule,
    pub selector: SelectorKind,
    pub placement: Placement,
    /// Weight attention keys by how many original tokens each retained row
    /// stands for (pyramid mode only).
    pub weighted_attention: bool,
    pub metric: Metric,
}

impl PipelineConfig {
    pub fn new(schedule: LengthSchedule, selector: SelectorKind) -> Self {
        PipelineConfig {
            schedule,
            selector,
            placement: Placement::default(),
            weighted_attention: false,
            metric: Metric::Euclidean,
        }
    }

    /// No token reduction at all.
    pub fn full(n: usize, layers: usize) -> Self {
        PipelineConfig::new(LengthSchedule::full(n, layers), SelectorKind::FirstK)
    }

    pub fn with_placement(mut self, placement: Placement) -> Self {
        self.placement = placement;
        self
    }

    pub fn with_selector(mut self, selector: SelectorKind) -> Self {
        self.selector = selector;
        self
    }

    /// Re-seeds a random selector for one example so that examples do not
    /// share the same random subset.
    pub fn for_example(&self, example: u64) -> Self {
        let mut c = self.clone();
        if let SelectorKind::Random(seed) = c.selector {
            c.selector = SelectorKind::Random(mix_seed(seed, example));
        }
        c
    }
}

pub(crate) fn mix_seed(seed: u64, salt: u64) -> u64 {
    seed ^ salt.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Number of original tokens each row represents. Every weight is ≥ 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMultiplicity(Vec<usize>);

impl TokenMultiplicity {
    pub fn new(weights: Vec<usize>) -> Result<Self> {
        if weights.is_empty() {
            return invalid("empty multiplicity vector");
        }
        if weights.contains(&0) {
            return invalid("token multiplicities must be positive");
        }
        Ok(TokenMultiplicity(weights))
    }

    pub fn ones(n: usize) -> Self {
        TokenMultiplicity(vec![1; n])
    }

    /// Counts, for every center, the rows whose nearest center it is
    /// (itself included). `nearest[r]` indexes into the center list.
    pub fn from_assignment(nearest: &[usize], centers: usize) -> Result<Self> {
        let mut w = vec![0; centers];
        for &c in nearest {
            if c >= centers {
                return invalid(format!("center {c} out of range"));
            }
            w[c] += 1;
        }
        TokenMultiplicity::new(w)
    }

    pub fn weights(&self) -> &[usize] {
        &self.0
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn log_weights(&self) -> Vec<f64> {
        self.0.iter().map(|&w| (w as f64).ln()).collect()
    }

    pub fn is_uniform(&self) -> bool {
        self.0.iter().all(|&w| w == 1)
    }
}

/// Multi-head attention output (before the residual) of `layer` on `emb`,
/// with key logits shifted by `ln w_t`. Equivalent to attending over a
/// sequence in which row `t` appears `w_t` times.
pub fn weighted_attention(emb: &Matrix, multiplicity: &TokenMultiplicity, layer: &LayerParams) -> Result<Matrix> {
    if emb.cols() != layer.dim() {
        return invalid(format!("embedding width {} does not match layer width {}", emb.cols(), layer.dim()));
    }
    if multiplicity.weights().len() != emb.rows() {
        return invalid("one multiplicity per row required");
    }
    let lw = multiplicity.log_weights();
    Ok(ops::attention(emb, layer, Some(&lw)).0)
}

/// How one site changes the sequence.
#[derive(Debug, Clone, PartialEq)]
pub enum Reduction {
    Keep,
    /// Keep rows `keep` (ascending). `nearest[r]` is the position in `keep`
    /// of the kept row closest to input row `r`.
    Drop { keep: Vec<usize>, nearest: Vec<usize> },
    /// Row `r` of the output is input row `map[r]`.
    Replace { map: Vec<usize> },
    /// Strided mean pooling; CLS passes through.
    Pool { window: usize },
}

impl Reduction {
    pub fn output_rows(&self, rows_in: usize) -> usize {
        match self {
            Reduction::Keep | Reduction::Replace { .. } => rows_in,
            Reduction::Drop { keep, .. } => keep.len(),
            Reduction::Pool { window } => pooled_len(rows_in, *window),
        }
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        match self {
            Reduction::Keep => x.clone(),
            Reduction::Drop { keep, .. } => x.gather_rows(keep),
            Reduction::Replace { map } => x.gather_rows(map),
            Reduction::Pool { window } => selectors::average_pool(x, *window).expect("validated pooling window"),
        }
    }

    /// Pulls an output gradient back to the input rows. Rows that were
    /// dropped receive exactly zero.
    pub fn backward(&self, dy: &Matrix, rows_in: usize) -> Matrix {
        let mut dx = Matrix::zeros(rows_in, dy.cols());
        let mut scatter = |src: usize, dst: usize, s: f64| {
            for (a, b) in dx.row_mut(dst).iter_mut().zip(dy.row(src)) {
                *a += s * b;
            }
        };
        match self {
            Reduction::Keep => return dy.clone(),
            Reduction::Drop { keep, .. } => keep.iter().enumerate().for_each(|(i, &r)| scatter(i, r, 1.0)),
            Reduction::Replace { map } => map.iter().enumerate().for_each(|(i, &r)| scatter(i, r, 1.0)),
            Reduction::Pool { window } => {
                scatter(0, 0, 1.0);
                for (w, start) in (1..rows_in).step_by(*window).enumerate() {
                    let end = (start + window).min(rows_in);
                    let s = 1.0 / (end - start) as f64;
                    (start..end).for_each(|r| scatter(w + 1, r, s));
                }
            }
        }
        dx
    }

    fn carry_multiplicity(&self, w: &[usize]) -> Vec<usize> {
        match self {
            Reduction::Keep | Reduction::Replace { .. } => w.to_vec(),
            Reduction::Drop { keep, nearest } => {
                let mut out = vec![0; keep.len()];
                for (r, &c) in nearest.iter().enumerate() {
                    out[c] += w[r];
                }
                out
            }
            Reduction::Pool { window } => {
                let mut out = vec![w[0]];
                out.extend(w[1..].chunks(*window).map(|c| c.iter().sum::<usize>()));
                out
            }
        }
    }

    fn carry_positions(&self, pos: &[usize]) -> Vec<usize> {
        match self {
            Reduction::Keep | Reduction::Replace { .. } => pos.to_vec(),
            Reduction::Drop { keep, .. } => keep.iter().map(|&r| pos[r]).collect(),
            Reduction::Pool { window } => {
                let mut out = vec![pos[0]];
                out.extend(pos[1..].chunks(*window).map(|c| c[0]));
                out
            }
        }
    }
}

/// What happened at one reduction site.
#[derive(Debug, Clone)]
pub struct ReductionRecord {
    pub reduction: Reduction,
    /// Present when a subset selector ran at this site.
    pub selection: Option<SelectionResult>,
    /// Realized cover radius δ_j under the pipeline metric; 0 when nothing
    /// was removed.
    pub cover_radius: f64,
    /// Pyramid*: sum over rows of the Euclidean distance each row moved.
    pub displacement: f64,
    /// Pyramid*: rows overwritten by a different row.
    pub replaced: usize,
    /// Rows entering the site (S̃_j).
    pub pre: Matrix,
    /// Rows leaving the site (S_j, or S*_j in pyramid* mode).
    pub post: Matrix,
}

impl ReductionRecord {
    /// Rows of `pre` that survive as centers; empty for pooling.
    pub fn centers(&self) -> Vec<usize> {
        match &self.reduction {
            Reduction::Keep => (0..self.pre.rows()).collect(),
            Reduction::Drop { keep, .. } => keep.clone(),
            Reduction::Replace { map } => {
                let mut c = map.clone();
                c.sort_unstable();
                c.dedup();
                c
            }
            Reduction::Pool { .. } => Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// Encoder input E_j.
    pub input: Matrix,
    /// Post-softmax attention of this encoder, one matrix per head.
    pub attention: Vec<Matrix>,
    pub reduction: ReductionRecord,
    /// Encoder output O_j.
    pub output: Matrix,
    /// Original sequence position of every output row.
    pub positions: Vec<usize>,
    pub multiplicity: TokenMultiplicity,
}

pub(crate) struct LayerCache {
    pub x: Matrix,
    pub attn: AttnCache,
    pub ln1: LnCache,
    pub rows_at_site: usize,
    pub ffn_in: Matrix,
    pub ffn: FfnCache,
    pub ln2: LnCache,
}

pub struct ForwardTrace {
    pub mode: Mode,
    pub placement: Placement,
    pub head: Head,
    /// Tokens plus positional embeddings, before any reduction.
    pub embedded: Matrix,
    pub input_reduction: ReductionRecord,
    pub layers: Vec<LayerTrace>,
    pub logits: Vec<f64>,
    pub(crate) caches: Option<Vec<LayerCache>>,
}

impl std::fmt::Debug for ForwardTrace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ForwardTrace")
            .field("mode", &self.mode)
            .field("row_counts", &self.row_counts())
            .field("logits", &self.logits)
            .field("captured", &self.caches.is_some())
            .finish()
    }
}

/// Training / evaluation target for one example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Class(usize),
    Value(f64),
}

impl ForwardTrace {
    /// Rows after the input site and after every encoder.
    pub fn row_counts(&self) -> Vec<usize> {
        let mut v = vec![self.input_reduction.post.rows()];
        v.extend(self.layers.iter().map(|l| l.output.rows()));
        v
    }

    pub fn final_output(&self) -> &Matrix {
        &self.layers.last().expect("at least one layer").output
    }

    pub fn cls_embedding(&self) -> &[f64] {
        self.final_output().row(0)
    }

    pub fn predicted_class(&self) -> usize {
        argmax(&self.logits)
    }

    pub fn loss(&self, target: Target) -> Result<f64> {
        loss_and_grad(&self.logits, self.head, target).map(|(l, _)| l)
    }

    pub fn is_captured(&self) -> bool {
        self.caches.is_some()
    }

    /// The reductions this pass used, for replaying it with the same
    /// selections.
    pub fn plan(&self) -> SelectionPlan {
        SelectionPlan {
            input: self.input_reduction.reduction.clone(),
            layers: self.layers.iter().map(|l| l.reduction.reduction.clone()).collect(),
        }
    }

    /// Realized δ_j for `j = 1..=L`.
    pub fn cover_radii(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.reduction.cover_radius).collect()
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Loss and its gradient w.r.t. the logits.
pub(crate) fn loss_and_grad(logits: &[f64], head: Head, target: Target) -> Result<(f64, Vec<f64>)> {
    match (head, target) {
        (Head::Classification { classes }, Target::Class(c)) => {
            if c >= classes {
                return invalid(format!("class {c} out of range for {classes} classes"));
            }
            let mut p = logits.to_vec();
            ops::softmax_in_place(&mut p);
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            p[c] -= 1.0;
            Ok((lse - logits[c], p))
        }
        (Head::Regression, Target::Value(t)) => {
            let e = logits[0] - t;
            Ok((0.5 * e * e, vec![e]))
        }
        _ => invalid("target kind does not match the output head"),
    }
}

/// Fixed reductions to replay instead of running the selector.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionPlan {
    pub input: Reduction,
    pub layers: Vec<Reduction>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions<'a> {
    pub mode: Mode,
    /// Keep what [`super::backward`] needs.
    pub capture: bool,
    pub plan: Option<&'a SelectionPlan>,
}

/// Pyramid-mode forward pass without gradient capture.
pub fn forward(stack: &EncoderStack, tokens: &Matrix, config: &PipelineConfig) -> Result<ForwardTrace> {
    forward_with(stack, tokens, config, ForwardOptions::default())
}

/// Pyramid* forward pass: sequence length stays `N`, non-selected rows are
/// replaced by their nearest selected row.
pub fn forward_pyramid_star(stack: &EncoderStack, tokens: &Matrix, config: &PipelineConfig) -> Result<ForwardTrace> {
    forward_with(stack, tokens, config, ForwardOptions { mode: Mode::PyramidStar, ..Default::default() })
}

pub fn forward_with(
    stack: &EncoderStack,
    tokens: &Matrix,
    config: &PipelineConfig,
    opts: ForwardOptions<'_>,
) -> Result<ForwardTrace> {
    let schedule = &config.schedule;
    let dims = stack.dims;
    if schedule.layers() != dims.layers {
        return invalid(format!("schedule has {} layers, stack has {}", schedule.layers(), dims.layers));
    }
    if tokens.cols() != dims.dim {
        return invalid(format!("token width {} does not match model width {}", tokens.cols(), dims.dim));
    }
    if tokens.rows() != schedule.input_len() {
        return invalid(format!("{} tokens supplied, schedule expects {}", tokens.rows(), schedule.input_len()));
    }
    if tokens.rows() > dims.max_len {
        return invalid(format!("{} tokens exceed the positional table ({})", tokens.rows(), dims.max_len));
    }
    selectors::check_embeddings(tokens)?;
    if let Some(plan) = opts.plan {
        if plan.layers.len() != dims.layers {
            return invalid("selection plan does not cover every layer");
        }
    }
    if opts.mode == Mode::PyramidStar && !config.selector.is_subset() {
        return invalid("pyramid* mode needs a subset selector");
    }

    let n = tokens.rows();
    let mut x = tokens.clone();
    for i in 0..n {
        for (v, p) in x.row_mut(i).iter_mut().zip(stack.position.row(i)) {
            *v += p;
        }
    }
    let embedded = x.clone();
    let mut positions: Vec<usize> = (0..n).collect();
    let mut mult: Vec<usize> = vec![1; n];
    let site = Site { config, mode: opts.mode, plan: opts.plan };

    let input_reduction = site.reduce(0, &x, None, schedule.len_at(0))?;
    positions = input_reduction.reduction.carry_positions(&positions);
    mult = input_reduction.reduction.carry_multiplicity(&mult);
    x = input_reduction.post.clone();

    let weighted = config.weighted_attention && opts.mode == Mode::Pyramid;
    let mut layers = Vec::with_capacity(dims.layers);
    let mut caches = opts.capture.then(|| Vec::with_capacity(dims.layers));
    for (j, p) in (1..=dims.layers).zip(&stack.layers) {
        let target = schedule.len_at(j);
        let lw: Option<Vec<f64>> = weighted.then(|| mult.iter().map(|&w| (w as f64).ln()).collect());
        let (attn_out, attn) = ops::attention(&x, p, lw.as_deref());
        let mut r1 = attn_out;
        r1.add_assign(&x);
        let (a, ln1) = ops::layer_norm(&r1, &p.ln1_g, &p.ln1_b);

        let (ffn_in, early) = match config.placement {
            Placement::AfterAttention => {
                let rec = site.reduce(j, &a, Some(&attn.probs), target)?;
                (rec.post.clone(), Some(rec))
            }
            Placement::EndOfEncoder => (a, None),
        };
        let (f, ffn) = ops::feed_forward(&ffn_in, p);
        let mut r2 = f;
        r2.add_assign(&ffn_in);
        let (y, ln2) = ops::layer_norm(&r2, &p.ln2_g, &p.ln2_b);
        let rows_at_site = match config.placement {
            Placement::AfterAttention => x.rows(),
            Placement::EndOfEncoder => y.rows(),
        };
        let rec = match early {
            Some(rec) => rec,
            None => site.reduce(j, &y, Some(&attn.probs), target)?,
        };
        let output = match config.placement {
            Placement::AfterAttention => y,
            Placement::EndOfEncoder => rec.post.clone(),
        };
        positions = rec.reduction.carry_positions(&positions);
        mult = rec.reduction.carry_multiplicity(&mult);

        layers.push(LayerTrace {
            input: x.clone(),
            attention: attn.probs.clone(),
            reduction: rec,
            output: output.clone(),
            positions: positions.clone(),
            multiplicity: TokenMultiplicity(mult.clone()),
        });
        if let Some(c) = caches.as_mut() {
            c.push(LayerCache { x: x.clone(), attn, ln1, rows_at_site, ffn_in, ffn, ln2 });
        }
        x = output;
    }

    let cls = Matrix::new(1, dims.dim, x.row(0).to_vec())?;
    let mut logits = cls.matmul(&stack.cls_w);
    logits.add_assign(&stack.cls_b);

    Ok(ForwardTrace {
        mode: opts.mode,
        placement: config.placement,
        head: dims.head,
        embedded,
        input_reduction,
        layers,
        logits: logits.into_vec(),
        caches,
    })
}

struct Site<'a> {
    config: &'a PipelineConfig,
    mode: Mode,
    plan: Option<&'a SelectionPlan>,
}

impl Site<'_> {
    /// Reduces `x` to `target` rows at site `j` (0 = input).
    fn reduce(&self, j: usize, x: &Matrix, attention: Option<&[Matrix]>, target: usize) -> Result<ReductionRecord> {
        let (reduction, selection) = match self.plan {
            Some(plan) => {
                let r = if j == 0 { plan.input.clone() } else { plan.layers[j - 1].clone() };
                (r, None)
            }
            None => self.choose(j, x, attention, target)?,
        };
        self.check(&reduction, x.rows(), target, j)?;
        let post = reduction.apply(x);
        let (displacement, replaced) = match &reduction {
            Reduction::Replace { map } => {
                let moved = map.iter().enumerate().filter(|(r, &m)| *r != m).count();
                (post.sub(x).row_norm_sum(), moved)
            }
            _ => (0.0, 0),
        };
        let cover = match (&selection, &reduction) {
            (Some(s), _) => s.cover_radius,
            (None, Reduction::Keep) => 0.0,
            (None, Reduction::Drop { keep, .. }) => cover_radius(x, keep, self.config.metric)?,
            (None, Reduction::Replace { map }) => {
                let mut centers = map.clone();
                centers.sort_unstable();
                centers.dedup();
                cover_radius(x, &centers, self.config.metric)?
            }
            (None, Reduction::Pool { .. }) => f64::NAN,
        };
        Ok(ReductionRecord {
            reduction,
            selection,
            cover_radius: cover,
            displacement,
            replaced,
            pre: x.clone(),
            post,
        })
    }

    fn check(&self, r: &Reduction, rows_in: usize, target: usize, j: usize) -> Result<()> {
        let expect = match self.mode {
            Mode::Pyramid => target,
            Mode::PyramidStar => rows_in,
        };
        let got = r.output_rows(rows_in);
        let in_range = match r {
            Reduction::Drop { keep, nearest } => {
                keep.first() == Some(&0) && keep.iter().all(|&k| k < rows_in) && nearest.len() == rows_in
            }
            Reduction::Replace { map } => map.len() == rows_in && map.first() == Some(&0) && map.iter().all(|&m| m < rows_in),
            _ => true,
        };
        if got != expect || !in_range {
            return Err(Error::InvalidArgument(format!(
                "reduction at site {j} yields {got} of {rows_in} rows, schedule needs {expect}"
            )));
        }
        Ok(())
    }

    fn choose(
        &self,
        j: usize,
        x: &Matrix,
        attention: Option<&[Matrix]>,
        target: usize,
    ) -> Result<(Reduction, Option<SelectionResult>)> {
        let rows = x.rows();
        let distinct_target = match self.mode {
            Mode::Pyramid => target == rows,
            Mode::PyramidStar => target >= rows,
        };
        if distinct_target {
            return Ok((Reduction::Keep, None));
        }
        if target > rows {
            return invalid(format!("site {j} asks for {target} rows but only {rows} remain"));
        }
        let kind = match self.config.selector {
            SelectorKind::Random(seed) => SelectorKind::Random(mix_seed(seed, j as u64)),
            SelectorKind::AveragePool(window) => {
                if pooled_len(rows, window) != target {
                    return invalid(format!(
                        "pooling {rows} rows with window {window} gives {}, schedule wants {target} at site {j}",
                        pooled_len(rows, window)
                    ));
                }
                return Ok((Reduction::Pool { window }, None));
            }
            k => k,
        };
        let sel = selectors::select(kind, x, target, self.config.metric, attention)?;
        let centers = sel.sorted();
        let nearest: Vec<usize> = nearest_centers(x, &centers, Metric::Euclidean).into_iter().map(|(c, _)| c).collect();
        let reduction = match self.mode {
            Mode::Pyramid => Reduction::Drop { keep: centers, nearest },
            Mode::PyramidStar => Reduction::Replace { map: nearest.iter().map(|&c| centers[c]).collect() },
        };
        Ok((reduction, Some(sel)))
    }
}
