use std::fmt::Write as _;
use std::path::Path;

use crate::encoder::{EncoderStack, Head, PipelineConfig, Placement, StackDims};
use crate::error::{invalid, Error, Result};
use crate::par;
use crate::schedule::{LengthSchedule, Rounding};
use crate::selectors::{BatchSize, SelectorKind};

use super::{evaluate, finetune, make_dataset, Example, Optimizer, SyntheticTask, Timing, TrainConfig};

/// How a sweep names a length schedule.
#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleSpec {
    Full,
    /// `prune_upto:p`
    Decay { prune_upto: usize, p: f64 },
    /// `random:seed`
    Random { seed: u64 },
    /// `lengths:l1/l2/.../lL`
    Lengths(Vec<usize>),
}

impl ScheduleSpec {
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::InvalidArgument(format!("bad schedule '{s}'"));
        if s == "full" {
            return Ok(ScheduleSpec::Full);
        }
        let (a, b) = s.split_once(':').ok_or_else(bad)?;
        match a {
            "random" => Ok(ScheduleSpec::Random { seed: b.parse().map_err(|_| bad())? }),
            "lengths" => {
                let v = b.split('/').map(|x| x.trim().parse()).collect::<std::result::Result<Vec<usize>, _>>();
                Ok(ScheduleSpec::Lengths(v.map_err(|_| bad())?))
            }
            _ => Ok(ScheduleSpec::Decay { prune_upto: a.parse().map_err(|_| bad())?, p: b.parse().map_err(|_| bad())? }),
        }
    }

    pub fn id(&self) -> String {
        match self {
            ScheduleSpec::Full => "full".into(),
            ScheduleSpec::Decay { prune_upto, p } => format!("{prune_upto}:{p}"),
            ScheduleSpec::Random { seed } => format!("random:{seed}"),
            ScheduleSpec::Lengths(v) => {
                format!("lengths:{}", v.iter().map(|l| l.to_string()).collect::<Vec<_>>().join("/"))
            }
        }
    }

    pub fn build(&self, n: usize, layers: usize, rounding: Rounding) -> Result<LengthSchedule> {
        match self {
            ScheduleSpec::Full => Ok(LengthSchedule::full(n, layers)),
            ScheduleSpec::Decay { prune_upto, p } => LengthSchedule::generate(n, layers, *p, *prune_upto, rounding),
            ScheduleSpec::Random { seed } => Ok(LengthSchedule::random(n, layers, *seed)),
            ScheduleSpec::Lengths(v) => {
                if v.len() != layers {
                    return invalid(format!("schedule {} lists {} layers, model has {layers}", self.id(), v.len()));
                }
                let mut all = vec![n];
                all.extend(v);
                LengthSchedule::from_lengths(n, all)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Selection active in fine-tuning and at inference.
    Finetuned,
    /// Fine-tuned without selection, selection only at inference.
    InferenceOnly,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Finetuned => "finetuned",
            TrainMode::InferenceOnly => "inference_only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "finetuned" => Ok(TrainMode::Finetuned),
            "inference_only" => Ok(TrainMode::InferenceOnly),
            _ => invalid(format!("unknown mode '{s}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub task: SyntheticTask,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub train: TrainConfig,
    pub train_size: usize,
    pub test_size: usize,
    pub seeds: Vec<u64>,
    pub selectors: Vec<SelectorKind>,
    pub schedules: Vec<ScheduleSpec>,
    pub rounding: Rounding,
    pub modes: Vec<TrainMode>,
    pub placements: Vec<Placement>,
    /// Replace every coreset selector by the six batch sizes and add their
    /// per-schedule best as `coreset-opt`.
    pub m_sweep: bool,
    pub timing: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            task: SyntheticTask { vocab: 64, seq_len: 16, classes: 2, redundancy: 0.9, filler_pool: 2, dim: 16, seed: 0 },
            layers: 2,
            heads: 2,
            ffn: 32,
            train: TrainConfig { epochs: 8, ..TrainConfig::default() },
            train_size: 128,
            test_size: 128,
            seeds: vec![0],
            selectors: vec![SelectorKind::coreset(1)],
            schedules: vec![ScheduleSpec::Decay { prune_upto: 2, p: 0.25 }],
            rounding: Rounding::Floor,
            modes: vec![TrainMode::Finetuned],
            placements: vec![Placement::AfterAttention],
            m_sweep: false,
            timing: false,
        }
    }
}

fn list<T>(v: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(f).collect()
}

fn num<T: std::str::FromStr>(v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::InvalidArgument(format!("cannot parse '{v}'")))
}

fn flag(v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => invalid(format!("expected true or false, got '{v}'")),
    }
}

/// `a..b` (inclusive) or a comma list.
fn seeds(v: &str) -> Result<Vec<u64>> {
    if let Some((a, b)) = v.split_once("..") {
        let (a, b): (u64, u64) = (num(a.trim())?, num(b.trim())?);
        if a > b {
            return invalid(format!("empty seed range {v}"));
        }
        return Ok((a..=b).collect());
    }
    list(v, num)
}

impl SweepConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unknown keys,
    /// repeated keys and bad values are reported with their line number.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = SweepConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |message: String| Error::Config { line, message };
            let (key, value) = content.split_once('=').ok_or_else(|| err(format!("expected 'key = value', got '{content}'")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key '{key}'")));
            }
            c.set(key, value).map_err(|e| match e {
                Error::InvalidArgument(m) => err(format!("{key}: {m}")),
                other => err(format!("{key}: {other}")),
            })?;
        }
        c.validate().map_err(|e| Error::Config { line: 0, message: e.to_string() })?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        SweepConfig::parse(&std::fs::read_to_string(path)?)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "vocab" => self.task.vocab = num(v)?,
            "seq_len" => self.task.seq_len = num(v)?,
            "classes" => self.task.classes = num(v)?,
            "redundancy" => self.task.redundancy = num(v)?,
            "filler_pool" => self.task.filler_pool = num(v)?,
            "dim" => self.task.dim = num(v)?,
            "layers" => self.layers = num(v)?,
            "heads" => self.heads = num(v)?,
            "ffn" => self.ffn = num(v)?,
            "epochs" => self.train.epochs = num(v)?,
            "learning_rate" => self.train.learning_rate = num(v)?,
            "batch_size" => self.train.batch_size = num(v)?,
            "momentum" => {
                let b: f64 = num(v)?;
                self.train.optimizer = if b == 0.0 { Optimizer::Sgd } else { Optimizer::Momentum(b) };
            }
            "clip_norm" => self.train.clip_norm = if v == "none" { None } else { Some(num(v)?) },
            "train_size" => self.train_size = num(v)?,
            "test_size" => self.test_size = num(v)?,
            "seeds" => self.seeds = seeds(v)?,
            "selectors" => self.selectors = list(v, SelectorKind::parse)?,
            "schedules" => self.schedules = list(v, ScheduleSpec::parse)?,
            "rounding" => self.rounding = Rounding::parse(v)?,
            "modes" => self.modes = list(v, TrainMode::parse)?,
            "placements" => self.placements = list(v, Placement::parse)?,
            "m_sweep" => self.m_sweep = flag(v)?,
            "timing" => self.timing = flag(v)?,
            _ => return invalid(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.dims().validate()?;
        self.train.validate()?;
        if self.train_size == 0 || self.test_size == 0 {
            return invalid("train_size and test_size must be positive");
        }
        for (name, empty) in [
            ("seeds", self.seeds.is_empty()),
            ("selectors", self.selectors.is_empty()),
            ("schedules", self.schedules.is_empty()),
            ("modes", self.modes.is_empty()),
            ("placements", self.placements.is_empty()),
        ] {
            if empty {
                return invalid(format!("{name} must not be empty"));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> StackDims {
        StackDims {
            layers: self.layers,
            heads: self.heads,
            dim: self.task.dim,
            ffn: self.ffn,
            max_len: self.task.seq_len,
            head: Head::Classification { classes: self.task.classes },
        }
    }

    fn expanded_selectors(&self) -> Vec<SelectorKind> {
        let mut out = Vec::new();
        for s in &self.selectors {
            match s {
                SelectorKind::CoresetGreedy(_) if self.m_sweep => {
                    for m in BatchSize::sweep() {
                        let k = SelectorKind::CoresetGreedy(m);
                        if !out.contains(&k) {
                            out.push(k);
                        }
                    }
                }
                _ if !out.contains(s) => out.push(*s),
                _ => {}
            }
        }
        out
    }
}

/// Per-seed data and initial weights. A trial is the pair (data seed,
/// init seed), both derived from the sweep seed.
#[derive(Debug, Clone)]
pub struct Trial {
    pub seed: u64,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    pub init: EncoderStack,
}

impl Trial {
    pub fn new(config: &SweepConfig, seed: u64) -> Result<Self> {
        let task = SyntheticTask { seed, ..config.task };
        Ok(Trial {
            seed,
            train: make_dataset(&task, config.train_size, 0)?,
            test: make_dataset(&task, config.test_size, 1)?,
            init: EncoderStack::random(config.dims(), seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ 0x1717)?,
        })
    }

    pub fn train_config(&self, config: &SweepConfig) -> TrainConfig {
        TrainConfig { seed: self.seed, ..config.train }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub seed: u64,
    pub schedule: String,
    pub final_len: usize,
    pub selector: String,
    pub placement: Placement,
    pub mode: TrainMode,
    pub accuracy: Option<f64>,
    pub space_reduction: f64,
    pub flops_base: u64,
    pub flops_pruned: u64,
    pub status: String,
    pub wall_clock_base: Option<f64>,
    pub wall_clock_pruned: Option<f64>,
    pub speedup: Option<f64>,
}

/// Leading columns that are a pure function of config and seed.
pub const DETERMINISTIC_COLUMNS: usize = 11;
pub const SWEEP_HEADER: &str = "seed,schedule,final_len,selector,placement,mode,accuracy,space_reduction,flops_base,flops_pruned,status,wall_clock_base,wall_clock_pruned,speedup";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

impl SweepRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.seed,
            self.schedule,
            self.final_len,
            self.selector,
            self.placement.name(),
            self.mode.name(),
            opt(self.accuracy),
            self.space_reduction,
            self.flops_base,
            self.flops_pruned,
            self.status.replace(',', ";"),
            opt(self.wall_clock_base),
            opt(self.wall_clock_pruned),
            opt(self.speedup)
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 14 {
            return Err(Error::Format(format!("expected 14 sweep columns, got {}", f.len())));
        }
        let bad = |what: &str| Error::Format(format!("bad {what} in sweep row '{line}'"));
        let optf = |s: &str, what: &str| -> Result<Option<f64>> {
            if s == "NA" { Ok(None) } else { s.parse().map(Some).map_err(|_| bad(what)) }
        };
        Ok(SweepRow {
            seed: f[0].parse().map_err(|_| bad("seed"))?,
            schedule: f[1].to_string(),
            final_len: f[2].parse().map_err(|_| bad("final_len"))?,
            selector: f[3].to_string(),
            placement: Placement::parse(f[4]).map_err(|_| bad("placement"))?,
            mode: TrainMode::parse(f[5]).map_err(|_| bad("mode"))?,
            accuracy: optf(f[6], "accuracy")?,
            space_reduction: f[7].parse().map_err(|_| bad("space_reduction"))?,
            flops_base: f[8].parse().map_err(|_| bad("flops_base"))?,
            flops_pruned: f[9].parse().map_err(|_| bad("flops_pruned"))?,
            status: f[10].to_string(),
            wall_clock_base: optf(f[11], "wall_clock_base")?,
            wall_clock_pruned: optf(f[12], "wall_clock_pruned")?,
            speedup: optf(f[13], "speedup")?,
        })
    }
}

pub fn write_sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(SWEEP_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.to_csv());
    }
    s
}

pub fn read_sweep_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == SWEEP_HEADER => {}
        _ => return Err(Error::Format("missing sweep CSV header".into())),
    }
    lines.map(SweepRow::from_csv).collect()
}

/// Keeps the first `DETERMINISTIC_COLUMNS` fields of every line.
pub fn deterministic_part(csv: &str) -> String {
    csv.lines().map(|l| l.split(',').take(DETERMINISTIC_COLUMNS).collect::<Vec<_>>().join(",") + "\n").collect()
}

struct Cell {
    trial: usize,
    schedule: usize,
    placement: Placement,
    mode: TrainMode,
    selector: SelectorKind,
}

/// Runs every (seed, schedule, placement, mode, selector) cell. Cells run
/// in parallel and each is a pure function of the config and its seed;
/// failing cells are kept as rows with an error status.
pub fn sweep(config: &SweepConfig) -> Result<Vec<SweepRow>> {
    config.validate()?;
    let n = config.task.seq_len;
    let schedules: Vec<LengthSchedule> =
        config.schedules.iter().map(|s| s.build(n, config.layers, config.rounding)).collect::<Result<_>>()?;
    let trials: Vec<Trial> = par::map_slice(&config.seeds, |&s| Trial::new(config, s)).into_iter().collect::<Result<_>>()?;

    // unreduced fine-tuning, shared by every inference-only cell of a trial
    let needs_base = config.modes.contains(&TrainMode::InferenceOnly);
    let base: Vec<Option<Result<EncoderStack>>> = par::map_slice(&trials, |t| {
        needs_base.then(|| {
            let full = PipelineConfig::full(n, config.layers);
            finetune(&t.init, &t.train, &full, &t.train_config(config)).map(|o| o.stack)
        })
    });

    let selectors = config.expanded_selectors();
    let mut cells = Vec::new();
    for trial in 0..trials.len() {
        for schedule in 0..schedules.len() {
            for &placement in &config.placements {
                for &mode in &config.modes {
                    for &selector in &selectors {
                        cells.push(Cell { trial, schedule, placement, mode, selector });
                    }
                }
            }
        }
    }

    let timing = config.timing.then(Timing::default);
    let mut rows = par::map_slice(&cells, |c| {
        let t = &trials[c.trial];
        let schedule = &schedules[c.schedule];
        let pipeline = PipelineConfig::new(schedule.clone(), c.selector).with_placement(c.placement);
        let id = config.schedules[c.schedule].id();
        let outcome = (|| -> Result<_> {
            let stack = match c.mode {
                TrainMode::Finetuned => finetune(&t.init, &t.train, &pipeline, &t.train_config(config))?.stack,
                TrainMode::InferenceOnly => match &base[c.trial] {
                    Some(Ok(s)) => s.clone(),
                    Some(Err(e)) => return Err(Error::State(format!("unreduced fine-tuning failed: {e}"))),
                    None => unreachable!("base stacks exist whenever inference-only cells do"),
                },
            };
            evaluate(&stack, &t.test, &pipeline, &id, t.seed, timing)
        })();
        let mut row = SweepRow {
            seed: t.seed,
            schedule: id.clone(),
            final_len: *schedule.lengths().last().unwrap(),
            selector: c.selector.label(),
            placement: c.placement,
            mode: c.mode,
            accuracy: None,
            space_reduction: crate::analysis::space_reduction(schedule, config.task.dim),
            flops_base: crate::encoder::count_flops(&LengthSchedule::full(n, config.layers), &config.dims()),
            flops_pruned: crate::encoder::count_flops(schedule, &config.dims()),
            status: "ok".into(),
            wall_clock_base: None,
            wall_clock_pruned: None,
            speedup: None,
        };
        match outcome {
            Ok(ev) => {
                row.accuracy = Some(ev.accuracy);
                row.wall_clock_base = ev.record.wall_clock_base;
                row.wall_clock_pruned = ev.record.wall_clock_pruned;
                row.speedup = ev.record.speedup;
            }
            Err(e) => row.status = format!("error: {e}"),
        }
        row
    });

    if config.m_sweep && selectors.iter().any(|s| matches!(s, SelectorKind::CoresetGreedy(_))) {
        rows = with_coreset_opt(rows);
    }
    Ok(rows)
}

/// After each group of batch-size variants, appends a `coreset-opt` row
/// holding their best accuracy.
fn with_coreset_opt(rows: Vec<SweepRow>) -> Vec<SweepRow> {
    let mut out: Vec<SweepRow> = Vec::with_capacity(rows.len());
    let mut group: Vec<SweepRow> = Vec::new();
    let flush = |group: &mut Vec<SweepRow>, out: &mut Vec<SweepRow>| {
        if group.is_empty() {
            return;
        }
        let best = group.iter().filter(|r| r.accuracy.is_some()).max_by(|a, b| a.accuracy.unwrap().total_cmp(&b.accuracy.unwrap()));
        let mut opt = group[0].clone();
        opt.selector = "coreset-opt".into();
        match best {
            Some(b) => {
                opt.accuracy = b.accuracy;
                opt.status = format!("ok (best {})", b.selector);
                opt.wall_clock_base = b.wall_clock_base;
                opt.wall_clock_pruned = b.wall_clock_pruned;
                opt.speedup = b.speedup;
            }
            None => {
                opt.accuracy = None;
                opt.status = "error: every batch size failed".into();
            }
        }
        out.append(group);
        out.push(opt);
    };
    for r in rows {
        let is_coreset = r.selector.starts_with("coreset:");
        let same_group = group.first().is_some_and(|g| {
            g.seed == r.seed && g.schedule == r.schedule && g.placement == r.placement && g.mode == r.mode
        });
        if !is_coreset || !same_group {
            flush(&mut group, &mut out);
        }
        if is_coreset {
            group.push(r);
        } else {
            out.push(r);
        }
    }
    flush(&mut group, &mut out);
    out
}
