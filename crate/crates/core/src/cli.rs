//! Command-line front end.
//!
//! Every command builds a JSON report. With `--out <dir>` the report is
//! written to `<dir>/<command>.json` and an aligned text table goes to
//! stdout; without it the JSON itself goes to stdout.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::warn;
use serde::Serialize;

use crate::dataset::{generate_synthetic, load_dataset, save_dataset, MultiDomainDataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::experiment::{
    ablate, held_out_split, run_mode, shift_analysis, AblationReport, ExperimentConfig, Mode, ShiftAnalysis, Stage,
};
use crate::network::{evaluate_domain, load_any, save_checkpoint, save_concrete, Checkpoint, Layer};
use crate::tensor::read_tensor_file;
use crate::tucker::{param_count_full, param_count_tucker, select_ranks, RankSelection};

/// Angles of the built-in reference benchmark, in degrees.
pub const REFERENCE_ANGLES: [f64; 4] = [0.0, 25.0, 50.0, 75.0];

#[derive(Debug, Parser)]
#[command(name = "domaingen", version, about = "Domain generalization with generated, low-rank network weights")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-domain dataset.
    Synth(SynthArgs),
    /// Train one mode on the source domains and save its checkpoints.
    Train(TrainArgs),
    /// Accuracy of a checkpoint's agnostic model on one domain.
    Eval(EvalArgs),
    /// Feature-space shift with each domain held out in turn.
    Shift(ShiftArgs),
    /// Per-layer Tucker ranks of a checkpoint or tensor.
    Decompose(DecomposeArgs),
    /// Every mode with every domain held out in turn.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset directory.
    #[arg(long, conflicts_with = "synthetic_spec")]
    pub dataset: Option<PathBuf>,
    /// Synthetic spec: a JSON file, inline JSON, or `reference`.
    #[arg(long)]
    pub synthetic_spec: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainOverrides {
    /// Learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Instances drawn from each source domain per step.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Training steps.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Weight of the domain entry in two-hot descriptors.
    #[arg(long)]
    pub rho: Option<f64>,
    /// SGD momentum.
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Relative reconstruction budget for factorized layers.
    #[arg(long, default_value_t = 0.1)]
    pub epsilon: f64,
    /// Hidden widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    /// Steps of each single-domain fine-tune.
    #[arg(long)]
    pub finetune_iters: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON file, inline JSON, or `reference` (the default).
    #[arg(long)]
    pub synthetic_spec: Option<String>,
    /// Overrides the spec's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Domain excluded from training and scored at the end.
    #[arg(long)]
    pub held_out: Option<String>,
    /// deep_all, tuning_last, two_hot_last, two_hot_decomp_last or full.
    #[arg(long)]
    pub mode: String,
    /// Seed for training and for a synthetic spec.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint directory (generated or concrete).
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Domain to score.
    #[arg(long)]
    pub domain: String,
    /// Seed of a synthetic spec.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write `<out>/<command>.json` instead of printing JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ShiftArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Use the penultimate activations of this checkpoint's agnostic model.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Seed of a synthetic spec.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write `<out>/<command>.json` instead of printing JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    /// Checkpoint directory with conditioned layers.
    #[arg(long, conflicts_with = "tensor")]
    pub checkpoint: Option<PathBuf>,
    /// DGT1 tensor whose last mode indexes domains (shared slice last).
    #[arg(long)]
    pub tensor: Option<PathBuf>,
    /// Relative reconstruction budget.
    #[arg(long, default_value_t = 0.001)]
    pub epsilon: f64,
    /// Write `<out>/<command>.json` instead of printing JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Seed for training and for a synthetic spec.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write `<out>/<command>.json` instead of printing JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainOverrides,
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Numeric(_) => 4,
        _ => 3,
    }
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Shift(a) => cmd_shift(a),
        Command::Decompose(a) => cmd_decompose(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

fn parse_spec(text: &str, seed: Option<u64>) -> Result<SyntheticSpec> {
    let mut spec = if text == "reference" {
        SyntheticSpec::reference(&REFERENCE_ANGLES, 0)
    } else if text.trim_start().starts_with('{') {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("synthetic spec: {e}")))?
    } else {
        let raw = fs::read_to_string(text).map_err(|e| Error::Config(format!("{text}: {e}")))?;
        serde_json::from_str(&raw).map_err(|e| Error::Config(format!("{text}: {e}")))?
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    Ok(spec)
}

fn load_data(d: &DataArgs, seed: Option<u64>) -> Result<MultiDomainDataset> {
    match (&d.dataset, &d.synthetic_spec) {
        (Some(dir), None) => load_dataset(dir),
        (None, Some(spec)) => generate_synthetic(&parse_spec(spec, seed)?),
        _ => Err(Error::Config("give exactly one of --dataset or --synthetic-spec".into())),
    }
}

fn experiment_config(o: &TrainOverrides, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    let t = &mut cfg.train;
    t.seed = seed;
    if let Some(v) = o.lr {
        t.learning_rate = v;
    }
    if let Some(v) = o.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = o.iters {
        t.max_iterations = v;
    }
    if let Some(v) = o.rho {
        t.rho = v;
    }
    if let Some(v) = o.momentum {
        t.momentum = v;
    }
    cfg.epsilon = o.epsilon;
    if let Some(h) = &o.hidden {
        cfg.hidden = h.clone();
    }
    if let Some(v) = o.finetune_iters {
        cfg.finetune_iterations = v;
    }
    cfg
}

/// Writes `<out>/<name>.json` and prints `table`, or prints the JSON.
fn emit<T: Serialize>(out: Option<&Path>, name: &str, report: &T, table: &str) -> Result<()> {
    let json = serde_json::to_string_pretty(report)? + "\n";
    match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join(format!("{name}.json")), json)?;
            print!("{table}");
        }
        None => print!("{json}"),
    }
    Ok(())
}

/// Left-aligned first column, right-aligned others.
fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut s = String::new();
    let line = |cells: &[String], s: &mut String| {
        for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
            if i == 0 {
                let _ = write!(s, "{c:<w$}");
            } else {
                let _ = write!(s, "  {c:>w$}");
            }
        }
        s.push('\n');
    };
    line(&header.iter().map(|h| h.to_string()).collect::<Vec<_>>(), &mut s);
    for r in rows {
        line(r, &mut s);
    }
    s
}

fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

#[derive(Debug, Serialize)]
struct SynthReport {
    spec: SyntheticSpec,
    class_count: usize,
    input_shape: Vec<usize>,
    domains: Vec<DomainCount>,
}

#[derive(Debug, Serialize)]
struct DomainCount {
    name: String,
    instances: usize,
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let spec = parse_spec(a.synthetic_spec.as_deref().unwrap_or("reference"), a.seed)?;
    let data = generate_synthetic(&spec)?;
    save_dataset(&data, &a.out)?;
    let report = SynthReport {
        spec,
        class_count: data.class_count(),
        input_shape: data.input_shape().to_vec(),
        domains: data
            .domains()
            .iter()
            .map(|d| DomainCount {
                name: d.name.clone(),
                instances: d.len(),
            })
            .collect(),
    };
    let rows: Vec<Vec<String>> = report.domains.iter().map(|d| vec![d.name.clone(), d.instances.to_string()]).collect();
    emit(Some(&a.out), "synth", &report, &table(&["domain", "instances"], &rows))
}

#[derive(Debug, Serialize)]
struct TrainRunReport {
    mode: Mode,
    held_out: Option<String>,
    sources: Vec<String>,
    config: ExperimentConfig,
    stages: Vec<Stage>,
    ranks: Vec<RankSelection>,
    parameter_count: usize,
    val_accuracy: f64,
    held_out_accuracy: Option<f64>,
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mode: Mode = a.mode.parse()?;
    if !mode.uses_rho() && a.train.rho.is_some() {
        warn!("mode {mode} has no domain conditioning; --rho is ignored");
    }
    let data = load_data(&a.data, Some(a.seed))?;
    let cfg = experiment_config(&a.train, a.seed);
    let (sources, target) = match &a.held_out {
        Some(h) => {
            let (s, t) = held_out_split(&data, h)?;
            (s, Some(t))
        }
        None => (data, None),
    };
    let run = run_mode(mode, &sources, &cfg)?;
    let rho = mode.uses_rho().then_some(cfg.train.rho);
    save_checkpoint(&run.network, rho, a.out.join("checkpoint"))?;
    let agnostic = run.network.extract_agnostic()?;
    save_concrete(&agnostic, sources.domain_count(), a.out.join("agnostic"))?;
    let held_out_accuracy = target.as_ref().map(|t| evaluate_domain(&agnostic, t)).transpose()?;
    let report = TrainRunReport {
        mode,
        held_out: a.held_out.clone(),
        sources: sources.domain_names(),
        config: cfg,
        stages: run.stages.clone(),
        ranks: run.ranks.clone(),
        parameter_count: run.network.parameter_count(),
        val_accuracy: run.val_accuracy(),
        held_out_accuracy,
    };
    let rows: Vec<Vec<String>> = report
        .stages
        .iter()
        .map(|s| {
            vec![
                s.name.clone(),
                s.report.best_iteration.to_string(),
                pct(s.report.best_val_accuracy),
                s.report.parameter_count.to_string(),
            ]
        })
        .collect();
    let mut text = table(&["stage", "best_iter", "val_acc%", "params"], &rows);
    if let Some(acc) = held_out_accuracy {
        let _ = writeln!(text, "held-out {}: {}%", a.held_out.as_deref().unwrap_or(""), pct(acc));
    }
    emit(Some(&a.out), "train", &report, &text)
}

#[derive(Debug, Serialize)]
struct EvalReport {
    domain: String,
    instances: usize,
    accuracy: f64,
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ckpt = load_any(&a.checkpoint)?;
    let data = load_data(&a.data, a.seed)?;
    let domain = data
        .domain(&a.domain)
        .ok_or_else(|| Error::Config(format!("unknown domain {:?}", a.domain)))?;
    let accuracy = evaluate_domain(&ckpt.agnostic()?, domain)?;
    let report = EvalReport {
        domain: a.domain.clone(),
        instances: domain.len(),
        accuracy,
    };
    let text = table(
        &["domain", "instances", "accuracy%"],
        &[vec![report.domain.clone(), report.instances.to_string(), pct(accuracy)]],
    );
    emit(a.out.as_deref(), "eval", &report, &text)
}

fn cmd_shift(a: ShiftArgs) -> Result<()> {
    let data = load_data(&a.data, a.seed)?;
    let net = a.checkpoint.as_ref().map(|c| load_any(c)?.agnostic()).transpose()?;
    let report: ShiftAnalysis = shift_analysis(&data, net.as_ref())?;
    let mut rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| vec![r.held_out.clone(), r.sources.join(","), format!("{:.4}", r.report.d_shift)])
        .collect();
    rows.push(vec!["mean".into(), String::new(), format!("{:.4}", report.mean_d_shift)]);
    let text = table(&["held_out", "sources", "d_shift"], &rows);
    emit(a.out.as_deref(), "shift", &report, &text)
}

#[derive(Debug, Serialize)]
struct DecomposeReport {
    epsilon: f64,
    layers: Vec<LayerRanks>,
}

#[derive(Debug, Serialize)]
struct LayerRanks {
    layer: usize,
    kind: String,
    shape: Vec<usize>,
    ranks: Vec<usize>,
    achieved_error: f64,
    full_parameters: usize,
    tucker_parameters: usize,
}

fn layer_ranks(layer: usize, kind: &str, t: &crate::tensor::Tensor, epsilon: f64) -> Result<LayerRanks> {
    let shape = t.shape().to_vec();
    let (dims, last) = shape.split_at(shape.len() - 1);
    let domains = last[0].saturating_sub(1);
    let sel = select_ranks(t, epsilon)?;
    Ok(LayerRanks {
        layer,
        kind: kind.into(),
        shape: shape.clone(),
        full_parameters: param_count_full(dims, domains),
        tucker_parameters: param_count_tucker(dims, &sel.ranks, domains)?,
        ranks: sel.ranks,
        achieved_error: sel.achieved_error,
    })
}

fn cmd_decompose(a: DecomposeArgs) -> Result<()> {
    let layers = match (&a.checkpoint, &a.tensor) {
        (Some(dir), None) => {
            let Checkpoint::Generated { network, .. } = load_any(dir)? else {
                return Err(Error::Format("decompose needs a generated checkpoint".into()));
            };
            let mut out = Vec::new();
            for (i, l) in network.layers().iter().enumerate() {
                let Some(g) = l.generated() else { continue };
                if matches!(g.generator.form(), crate::domain::WeightForm::Shared(_)) {
                    continue;
                }
                let kind = match l {
                    Layer::Conv(..) => "conv",
                    _ => "fc",
                };
                out.push(layer_ranks(i, kind, &g.generator.full_tensor()?, a.epsilon)?);
            }
            if out.is_empty() {
                return Err(Error::Format("checkpoint has no domain-conditioned layers".into()));
            }
            out
        }
        (None, Some(file)) => {
            let t = read_tensor_file(file)?;
            if t.order() < 2 {
                return Err(Error::Format("tensor needs a trailing domain mode".into()));
            }
            vec![layer_ranks(0, "tensor", &t, a.epsilon)?]
        }
        _ => return Err(Error::Config("give exactly one of --checkpoint or --tensor".into())),
    };
    let report = DecomposeReport {
        epsilon: a.epsilon,
        layers,
    };
    let rows: Vec<Vec<String>> = report
        .layers
        .iter()
        .map(|l| {
            vec![
                format!("{} {}", l.layer, l.kind),
                format!("{:?}", l.shape),
                format!("{:?}", l.ranks),
                format!("{:.2e}", l.achieved_error),
                l.full_parameters.to_string(),
                l.tucker_parameters.to_string(),
            ]
        })
        .collect();
    let text = table(&["layer", "shape", "ranks", "error", "full", "tucker"], &rows);
    emit(a.out.as_deref(), "decompose", &report, &text)
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let data = load_data(&a.data, Some(a.seed))?;
    let cfg = experiment_config(&a.train, a.seed);
    let report: AblationReport = ablate(&data, &cfg)?;
    let mut header = vec!["held_out"];
    header.extend(Mode::ALL.iter().map(|m| m.name()));
    header.push("single_best");
    let row = |name: &str, acc: &crate::experiment::ModeAccuracies| {
        let mut r = vec![name.to_string()];
        r.extend(Mode::ALL.iter().map(|&m| pct(acc.get(m))));
        r.push(pct(acc.single_source_best));
        r
    };
    let mut rows: Vec<Vec<String>> = report.rows.iter().map(|r| row(&r.held_out, &r.accuracy)).collect();
    rows.push(row("mean", &report.mean));
    emit(a.out.as_deref(), "ablate", &report, &table(&header, &rows))
}
