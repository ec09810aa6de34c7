use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use pyramid_core::analysis::{
    importance_ablation, pareto_at_points, redundancy_report, selection_loss, DEFAULT_BINS, DEFAULT_EPS, DEFAULT_MIN_PTS,
};
use pyramid_core::encoder::{forward, EncoderStack, PipelineConfig, Placement};
use pyramid_core::harness::{finetune, read_sweep_csv, sweep, write_sweep_csv, Example, ScheduleSpec, SweepConfig, Trial, SWEEP_HEADER};
use pyramid_core::schedule::{LengthSchedule, Rounding, DEFAULT_GRID};
use pyramid_core::selectors::{select, Metric, SelectorKind};
use pyramid_core::{io, par, Error, Matrix};

#[derive(Debug, Parser)]
#[command(name = "pyramid", version, about = "Core-set token selection for transformer encoders")]
pub struct Cli {
    /// Worker threads for data-parallel work (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write per-layer length schedules as CSV.
    GenConfigs(GenConfigs),
    /// Run a token selector on a matrix file.
    Select(Select),
    /// Run a config-driven experiment sweep.
    Sweep(SweepArgs),
    /// Interpolate accuracy on the speedup/accuracy frontier.
    Pareto(Pareto),
    /// Mutual information after removing the k-th most important token.
    AblateImportance(Ablate),
    /// Compare the unreduced model with its replacement-mode counterpart.
    BoundCheck(BoundCheck),
    /// Cosine-similarity histograms and DBSCAN cluster counts.
    Redundancy(Redundancy),
}

#[derive(Debug, Args)]
pub struct GenConfigs {
    #[arg(long, default_value_t = 128)]
    pub n: usize,
    #[arg(long, default_value_t = 12)]
    pub layers: usize,
    #[arg(long, default_value = "floor")]
    pub rounding: String,
    /// Comma-separated `prune_upto:p` pairs instead of the built-in grid.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Select {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub k: usize,
    /// Batch size for coreset: an integer, a fraction such as `0.2k`, or `k-1`.
    #[arg(long, default_value = "1")]
    pub m: String,
    /// coreset, coreset-exact, first-k or random.
    #[arg(long, default_value = "coreset")]
    pub method: String,
    #[arg(long, default_value = "euclidean")]
    pub metric: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write `order,index,importance` rows here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Pareto {
    /// Sweep CSV, or a `speedup,accuracy` CSV.
    #[arg(long)]
    pub input: PathBuf,
    /// Comma-separated target speedups.
    #[arg(long, value_delimiter = ',', required = true)]
    pub targets: Vec<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Model source shared by the commands that need a trained stack.
#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Trial seed; defaults to the first seed of the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Load parameters instead of training.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Skip fine-tuning and use the random initialization.
    #[arg(long)]
    pub untrained: bool,
    /// Write the parameters used to this file.
    #[arg(long)]
    pub save_model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Ablate {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Encoder indices (1-based), comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub encoders: Vec<usize>,
    #[arg(long, default_value = "coreset:1")]
    pub selector: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BoundCheck {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Schedule as `prune_upto:p`, `full`, `random:seed` or `lengths:l1/../lL`.
    #[arg(long, default_value = "2:0.25")]
    pub schedule: String,
    #[arg(long, default_value = "coreset:1")]
    pub selector: String,
    #[arg(long, default_value = "after_attention")]
    pub placement: String,
    /// Token matrix (one example) to check instead of the test split.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub label: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Redundancy {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Layers to report; 0 is the embedded input.
    #[arg(long, value_delimiter = ',', default_value = "0,1")]
    pub layers: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_EPS)]
    pub eps: f64,
    #[arg(long, default_value_t = DEFAULT_MIN_PTS)]
    pub min_pts: usize,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
    /// Directory for `similarity_layer<j>.txt` histograms.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    Core(Error),
    Usage(String),
    Violation(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Violation(m) => write!(f, "invariant violated: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    let threads = cli.threads;
    let (buf, r) = par::with_threads(threads, move || {
        let mut buf = Vec::new();
        let r = dispatch(cli.command, &mut buf);
        (buf, r)
    });
    // output is emitted even when an invariant check fails afterwards
    stdout.write_all(&buf)?;
    r
}

fn dispatch(cmd: Command, out: &mut Vec<u8>) -> Result<()> {
    match cmd {
        Command::GenConfigs(a) => gen_configs(a, out),
        Command::Select(a) => select_cmd(a, out),
        Command::Sweep(a) => sweep_cmd(a, out),
        Command::Pareto(a) => pareto_cmd(a, out),
        Command::AblateImportance(a) => ablate_cmd(a, out),
        Command::BoundCheck(a) => bound_cmd(a, out),
        Command::Redundancy(a) => redundancy_cmd(a, out),
    }
}

/// Writes `text` to `path`, or appends it to stdout when no path is given.
fn emit(path: Option<&Path>, text: &str, out: &mut Vec<u8>) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => out.extend_from_slice(text.as_bytes()),
    }
    Ok(())
}

/// Up to 12 significant digits, trailing zeros removed.
pub fn fmt_num(v: f64) -> String {
    if !v.is_finite() {
        return if v.is_nan() { "NA".into() } else if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let digits = (11 - v.abs().log10().floor() as i32).clamp(0, 17) as usize;
    let s = format!("{v:.digits$}");
    let s = if s.contains('.') { s.trim_end_matches('0').trim_end_matches('.').to_string() } else { s };
    if s == "-0" { "0".into() } else { s }
}

fn gen_configs(a: GenConfigs, out: &mut Vec<u8>) -> Result<()> {
    let rounding = Rounding::parse(&a.rounding)?;
    let grid: Vec<(usize, f64)> = match &a.grid {
        None => DEFAULT_GRID.to_vec(),
        Some(g) => g
            .split(',')
            .map(|pair| match ScheduleSpec::parse(pair)? {
                ScheduleSpec::Decay { prune_upto, p } => Ok((prune_upto, p)),
                _ => Err(CliError::Usage(format!("grid entries must be prune_upto:p, got '{pair}'"))),
            })
            .collect::<Result<_>>()?,
    };
    let schedules =
        grid.iter().map(|&(u, p)| LengthSchedule::generate(a.n, a.layers, p, u, rounding)).collect::<pyramid_core::Result<Vec<_>>>()?;
    let mut buf = Vec::new();
    LengthSchedule::write_csv(&schedules, &mut buf)?;
    emit(a.out.as_deref(), &String::from_utf8_lossy(&buf), out)
}

fn selector_for(method: &str, m: &str, seed: u64) -> Result<SelectorKind> {
    let spec = match method {
        "coreset" => format!("coreset:{m}"),
        "random" => format!("random:{seed}"),
        "coreset-exact" | "first-k" => method.to_string(),
        "attention" => return Err(CliError::Usage("attention selection needs attention weights, not a matrix file".into())),
        other => return Err(CliError::Usage(format!("unknown method '{other}'"))),
    };
    Ok(SelectorKind::parse(&spec)?)
}

fn select_cmd(a: Select, out: &mut Vec<u8>) -> Result<()> {
    let emb = io::read_matrix(&a.input)?;
    let kind = selector_for(&a.method, &a.m, a.seed)?;
    let metric = Metric::parse(&a.metric)?;
    let r = select(kind, &emb, a.k, metric, None)?;
    let join = |v: Vec<String>| v.join(",");
    let text = format!(
        "{}\nimportance: {}\ndelta: {}\n",
        join(r.selected.iter().map(|i| i.to_string()).collect()),
        join(r.importance.iter().map(|&v| fmt_num(v)).collect()),
        fmt_num(r.cover_radius)
    );
    out.extend_from_slice(text.as_bytes());
    if let Some(p) = &a.out {
        let mut csv = String::from("order,index,importance\n");
        for (o, (i, v)) in r.selected.iter().zip(&r.importance).enumerate() {
            csv.push_str(&format!("{o},{i},{}\n", fmt_num(*v)));
        }
        std::fs::write(p, csv)?;
    }
    Ok(())
}

fn sweep_cmd(a: SweepArgs, out: &mut Vec<u8>) -> Result<()> {
    let config = SweepConfig::from_file(&a.config)?;
    let rows = sweep(&config)?;
    emit(a.out.as_deref(), &write_sweep_csv(&rows), out)
}

fn pareto_cmd(a: Pareto, out: &mut Vec<u8>) -> Result<()> {
    let text = std::fs::read_to_string(&a.input)?;
    let groups: Vec<(String, Vec<(f64, f64)>)> = if text.lines().next().map(str::trim) == Some(SWEEP_HEADER) {
        let mut g: std::collections::BTreeMap<String, Vec<(f64, f64)>> = Default::default();
        for r in read_sweep_csv(&text)? {
            // analytic FLOPs ratio stands in when the sweep was not timed
            let speed = r.speedup.or((r.flops_pruned > 0).then(|| r.flops_base as f64 / r.flops_pruned as f64));
            if let (Some(s), Some(acc)) = (speed, r.accuracy) {
                g.entry(r.selector).or_default().push((s, acc));
            }
        }
        g.into_iter().collect()
    } else {
        vec![("all".to_string(), read_points(&text)?)]
    };
    let mut csv = String::from("group,target,accuracy\n");
    for (name, pts) in &groups {
        for (t, v) in a.targets.iter().zip(pareto_at_points(pts, &a.targets)) {
            csv.push_str(&format!("{name},{},{}\n", fmt_num(*t), v.map_or("NA".into(), fmt_num)));
        }
    }
    emit(a.out.as_deref(), &csv, out)
}

fn read_points(text: &str) -> Result<Vec<(f64, f64)>> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
    if lines.next() != Some("speedup,accuracy") {
        return Err(Error::Format("expected a 'speedup,accuracy' header or a sweep CSV".into()).into());
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let bad = || CliError::Core(Error::Format(format!("bad point on data line {}: '{l}'", i + 1)));
            let (s, acc) = l.split_once(',').ok_or_else(bad)?;
            Ok((s.trim().parse().map_err(|_| bad())?, acc.trim().parse().map_err(|_| bad())?))
        })
        .collect()
}

/// Loads, trains or initializes the stack for a model-driven command.
fn load_model(a: &ModelArgs) -> Result<(SweepConfig, Trial, EncoderStack)> {
    let config = SweepConfig::from_file(&a.config)?;
    let seed = a.seed.unwrap_or(config.seeds[0]);
    let trial = Trial::new(&config, seed)?;
    let stack = if let Some(p) = &a.model {
        let s = io::read_model(p)?;
        if s.dims != config.dims() {
            return Err(CliError::Usage(format!("model file dimensions {:?} do not match the config {:?}", s.dims, config.dims())));
        }
        s
    } else if a.untrained {
        trial.init.clone()
    } else {
        let full = PipelineConfig::full(config.task.seq_len, config.layers);
        finetune(&trial.init, &trial.train, &full, &trial.train_config(&config))?.stack
    };
    if let Some(p) = &a.save_model {
        io::write_model(p, &stack)?;
    }
    Ok((config, trial, stack))
}

fn ablate_cmd(a: Ablate, out: &mut Vec<u8>) -> Result<()> {
    let (_, trial, stack) = load_model(&a.model)?;
    let selector = SelectorKind::parse(&a.selector)?;
    let mut csv = String::from("encoder,rank,mi\n");
    let mut summary = String::new();
    for &j in &a.encoders {
        let curve = importance_ablation(&stack, &trial.test, j, selector)?;
        for (k, mi) in curve.mi.iter().enumerate() {
            csv.push_str(&format!("{j},{},{}\n", k + 1, fmt_num(*mi)));
        }
        summary.push_str(&format!(
            "# encoder {j}: reference mi {}, spearman(importance, mi) {}\n",
            fmt_num(curve.reference),
            curve.importance_correlation().map_or("NA".into(), fmt_num)
        ));
    }
    csv.push_str(&summary);
    emit(a.out.as_deref(), &csv, out)
}

fn bound_cmd(a: BoundCheck, out: &mut Vec<u8>) -> Result<()> {
    let (config, trial, stack) = load_model(&a.model)?;
    let schedule = ScheduleSpec::parse(&a.schedule)?.build(config.task.seq_len, config.layers, config.rounding)?;
    let pipeline = PipelineConfig::new(schedule, SelectorKind::parse(&a.selector)?).with_placement(Placement::parse(&a.placement)?);
    let examples = match &a.input {
        Some(p) => {
            let tokens: Matrix = io::read_matrix(p)?;
            vec![Example { ids: Vec::new(), tokens, label: a.label }]
        }
        None => trial.test.clone(),
    };
    let r = selection_loss(&stack, &examples, &pipeline)?;
    let mut csv = String::from("example,loss_diff,bound,max_delta,audit_violations\n");
    for (i, e) in r.examples.iter().enumerate() {
        csv.push_str(&format!(
            "{i},{},{},{},{}\n",
            fmt_num(e.loss_diff),
            e.bound.map_or("NA".into(), fmt_num),
            fmt_num(e.delta.iter().copied().fold(0.0, f64::max)),
            e.audit.iter().filter(|x| !x.holds).count()
        ));
    }
    csv.push_str(&format!("# mean loss difference {}\n", fmt_num(r.mean_loss_diff())));
    emit(a.out.as_deref(), &csv, out)?;
    let violations = r.audit_violations();
    if violations > 0 {
        return Err(CliError::Violation(format!("{violations} layer(s) displaced more than delta times the removed count")));
    }
    Ok(())
}

fn redundancy_cmd(a: Redundancy, out: &mut Vec<u8>) -> Result<()> {
    let (config, trial, stack) = load_model(&a.model)?;
    let full = PipelineConfig::full(config.task.seq_len, config.layers);
    let traces = par::map_slice(&trial.test, |e| forward(&stack, &e.tokens, &full)).into_iter().collect::<pyramid_core::Result<Vec<_>>>()?;
    let report = redundancy_report(&traces, &a.layers, a.eps, a.min_pts, a.bins)?;
    let mut csv = String::from("layer,mean_clusters,max_clusters,rows\n");
    for l in &report {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            l.layer,
            fmt_num(l.mean_clusters()),
            l.clusters.iter().max().unwrap_or(&0),
            l.rows.first().unwrap_or(&0)
        ));
        if let Some(dir) = &a.out_dir {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join(format!("similarity_layer{}.txt", l.layer)), l.similarity.to_plot_text())?;
        }
    }
    out.extend_from_slice(csv.as_bytes());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::fmt_num;

    #[test]
    fn number_formatting() {
        assert_eq!(fmt_num(0.8500000000000001), "0.85");
        assert_eq!(fmt_num(5.0), "5");
        assert_eq!(fmt_num(f64::INFINITY), "inf");
        assert_eq!(fmt_num(-0.0), "0");
        assert_eq!(fmt_num(123456.5), "123456.5");
        assert_eq!(fmt_num(1e-7), "0.0000001");
    }
}
