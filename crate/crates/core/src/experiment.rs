//! Training modes of the ablation ladder, held-out evaluation and the
//! combined ablation table.
//!
//! Every mode sees only the source domains; the held-out domain is split off
//! before any mode-specific code runs.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{split_train_val, Domain, MultiDomainDataset};
use crate::domain::{ConcreteWeights, WeightForm, WeightGenerator};
use crate::error::{Error, Result};
use crate::network::{
    evaluate_domain, train, ConcreteLayer, ConcreteNetwork, GeneratedLayer, Layer, Network, NetworkBuilder,
    Parameterization, TrainConfig, TrainReport,
};
use crate::shift::{accuracy_margin, domain_shift, MarginReport, ShiftReport};
use crate::tensor::{Matrix, Tensor};
use crate::tucker::RankSelection;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Unconditioned weights trained on the pooled sources.
    DeepAll,
    /// Frozen body, unconditioned last layer.
    TuningLast,
    /// Frozen body, full-form generated last layer.
    TwoHotLast,
    /// Frozen body, Tucker-factorized generated last layer.
    TwoHotDecompLast,
    /// Every weight layer generated and Tucker-factorized.
    Full,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::DeepAll,
        Mode::TuningLast,
        Mode::TwoHotLast,
        Mode::TwoHotDecompLast,
        Mode::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::DeepAll => "deep_all",
            Mode::TuningLast => "tuning_last",
            Mode::TwoHotLast => "two_hot_last",
            Mode::TwoHotDecompLast => "two_hot_decomp_last",
            Mode::Full => "full",
        }
    }

    /// Whether training depends on the descriptor strength `rho`.
    pub fn uses_rho(self) -> bool {
        !matches!(self, Mode::DeepAll | Mode::TuningLast)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    /// Relative reconstruction budget when factorizing stacked weights.
    pub epsilon: f64,
    /// Hidden layer widths of the MLP.
    pub hidden: Vec<usize>,
    /// Steps of each single-domain fine-tune that seeds a factorization.
    pub finetune_iterations: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                batch_size: 32,
                max_iterations: 600,
                ..TrainConfig::default()
            },
            epsilon: 0.1,
            hidden: vec![32],
            finetune_iterations: 300,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!("epsilon must lie in (0, 1), got {}", self.epsilon)));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }

    fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.train.seed = seed;
        c
    }
}

/// Splits off `held_out`; the returned sources never contain it.
pub fn held_out_split(data: &MultiDomainDataset, held_out: &str) -> Result<(MultiDomainDataset, Domain)> {
    let target = data
        .domain(held_out)
        .cloned()
        .ok_or_else(|| Error::Config(format!("unknown held-out domain {held_out:?}")))?;
    Ok((data.without(held_out)?, target))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stage {
    pub name: String,
    pub report: TrainReport,
}

/// A trained mode: its generated network plus the training history.
#[derive(Debug, Clone)]
pub struct ModeRun {
    pub mode: Mode,
    pub network: Network,
    pub stages: Vec<Stage>,
    /// Rank selections of the factorized layers, in layer order.
    pub ranks: Vec<RankSelection>,
}

impl ModeRun {
    /// Best validation accuracy of the final stage.
    pub fn val_accuracy(&self) -> f64 {
        self.stages.last().map_or(0.0, |s| s.report.best_val_accuracy)
    }

    pub fn evaluate(&self, target: &Domain) -> Result<f64> {
        evaluate_domain(&self.network.extract_agnostic()?, target)
    }
}

/// Trains one mode on `sources`.
pub fn run_mode(mode: Mode, sources: &MultiDomainDataset, cfg: &ExperimentConfig) -> Result<ModeRun> {
    let mut runner = Runner::new(sources, cfg)?;
    runner.run(mode)
}

/// Trains all modes on `sources`, sharing intermediate runs where the
/// ladder builds on an earlier rung.
pub fn run_all_modes(sources: &MultiDomainDataset, cfg: &ExperimentConfig) -> Result<Vec<ModeRun>> {
    let mut runner = Runner::new(sources, cfg)?;
    Mode::ALL.into_iter().map(|m| runner.run(m)).collect()
}

struct Runner<'a> {
    sources: &'a MultiDomainDataset,
    cfg: &'a ExperimentConfig,
    deep_all: Option<ModeRun>,
    tuning_last: Option<ModeRun>,
    /// Per-domain fine-tunes of `tuning_last` (last layer) and `deep_all`.
    last_finetunes: Option<Finetunes>,
    full_finetunes: Option<Finetunes>,
}

#[derive(Clone)]
struct Finetunes {
    base: ModeRun,
    stages: Vec<Stage>,
    per_domain: Vec<ConcreteNetwork>,
}

impl<'a> Runner<'a> {
    fn new(sources: &'a MultiDomainDataset, cfg: &'a ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        if sources.domain_count() < 2 {
            return Err(Error::Config("need at least two source domains".into()));
        }
        Ok(Self {
            sources,
            cfg,
            deep_all: None,
            tuning_last: None,
            last_finetunes: None,
            full_finetunes: None,
        })
    }

    fn run(&mut self, mode: Mode) -> Result<ModeRun> {
        match mode {
            Mode::DeepAll => self.deep_all(),
            Mode::TuningLast => self.tuning_last(),
            Mode::TwoHotLast => self.stacked(mode, true, false),
            Mode::TwoHotDecompLast => self.stacked(mode, true, true),
            Mode::Full => self.stacked(mode, false, true),
        }
    }

    fn init(&self) -> Result<Network> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.train.seed);
        let s = self.sources.domain_count();
        let mut b = NetworkBuilder::new(self.sources.input_shape().to_vec(), s, Parameterization::Shared);
        for &h in &self.cfg.hidden {
            b = b.fc(h, &mut rng)?.relu();
        }
        b.fc(self.sources.class_count(), &mut rng)?
            .build(self.sources.class_count())
    }

    fn deep_all(&mut self) -> Result<ModeRun> {
        if let Some(r) = &self.deep_all {
            return Ok(r.clone());
        }
        let mut net = self.init()?;
        let report = train(&mut net, self.sources, &self.cfg.train)?;
        let run = single_stage(Mode::DeepAll, net, report);
        self.deep_all = Some(run.clone());
        Ok(run)
    }

    fn tuning_last(&mut self) -> Result<ModeRun> {
        if let Some(r) = &self.tuning_last {
            return Ok(r.clone());
        }
        let mut net = self.init()?;
        freeze_body(&mut net);
        let report = train(&mut net, self.sources, &self.cfg.train)?;
        let run = single_stage(Mode::TuningLast, net, report);
        self.tuning_last = Some(run.clone());
        Ok(run)
    }

    /// Fine-tunes the base model on each source alone.
    fn finetunes(&mut self, last_only: bool) -> Result<Finetunes> {
        let cached = if last_only { &self.last_finetunes } else { &self.full_finetunes };
        if let Some(f) = cached {
            return Ok(f.clone());
        }
        let base = if last_only { self.tuning_last()? } else { self.deep_all()? };
        let mut stages = Vec::new();
        let mut per_domain = Vec::with_capacity(self.sources.domain_count());
        for (d, name) in self.sources.domain_names().iter().enumerate() {
            let data = self.sources.select(std::slice::from_ref(name))?;
            let mut net = retarget_shared(&base.network, 1)?;
            let ft = TrainConfig {
                max_iterations: self.cfg.finetune_iterations,
                seed: self.cfg.train.seed.wrapping_add(d as u64 + 1),
                ..self.cfg.train.clone()
            };
            let report = train(&mut net, &data, &ft)?;
            stages.push(Stage {
                name: format!("finetune:{name}"),
                report,
            });
            per_domain.push(net.extract_agnostic()?);
        }
        let f = Finetunes {
            base,
            stages,
            per_domain,
        };
        if last_only {
            self.last_finetunes = Some(f.clone());
        } else {
            self.full_finetunes = Some(f.clone());
        }
        Ok(f)
    }

    /// Stacks the per-domain fine-tunes around the base model as the shared
    /// slice, optionally Tucker-factorizes the stack, and trains the result
    /// on all sources.
    fn stacked(&mut self, mode: Mode, last_only: bool, factorize: bool) -> Result<ModeRun> {
        let ft = self.finetunes(last_only)?;
        let mut stages = ft.base.stages.clone();
        for s in &mut stages {
            s.name = format!("{}:{}", ft.base.mode, s.name);
        }
        stages.extend(ft.stages.iter().cloned());
        let agnostic = ft.base.network.extract_agnostic()?;
        let epsilon = factorize.then_some(self.cfg.epsilon);
        let (mut net, ranks) =
            stack_network(&ft.base.network, &agnostic, &ft.per_domain, epsilon, self.cfg.train.rho, last_only)?;
        let report = train(&mut net, self.sources, &self.cfg.train)?;
        stages.push(Stage {
            name: mode.name().into(),
            report,
        });
        Ok(ModeRun {
            mode,
            network: net,
            stages,
            ranks,
        })
    }
}

fn single_stage(mode: Mode, network: Network, report: TrainReport) -> ModeRun {
    ModeRun {
        mode,
        network,
        stages: vec![Stage {
            name: mode.name().into(),
            report,
        }],
        ranks: Vec::new(),
    }
}

fn freeze_body(net: &mut Network) {
    let n = net.generators().count();
    for (i, g) in net.generators_mut().enumerate() {
        g.trainable = i + 1 == n;
    }
}

fn weights_of(c: &ConcreteNetwork) -> Vec<ConcreteWeights> {
    c.layers()
        .iter()
        .filter_map(|l| match l {
            ConcreteLayer::Fc { weight, bias } | ConcreteLayer::Conv { weight, bias, .. } => Some(ConcreteWeights {
                weight: weight.clone(),
                bias: bias.clone(),
            }),
            ConcreteLayer::Relu => None,
        })
        .collect()
}

fn replace_generators(template: &Network, domains: usize, mut make: impl FnMut(usize, &GeneratedLayer) -> Result<GeneratedLayer>) -> Result<Network> {
    let mut gi = 0;
    let layers = template
        .layers()
        .iter()
        .map(|l| {
            Ok(match l {
                Layer::Relu => Layer::Relu,
                Layer::Fc(g) => {
                    gi += 1;
                    Layer::Fc(make(gi - 1, g)?)
                }
                Layer::Conv(g, geom) => {
                    gi += 1;
                    Layer::Conv(make(gi - 1, g)?, *geom)
                }
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Network::new(layers, template.input_shape().to_vec(), domains, template.classes())
}

/// Unconditioned copy of `net`'s agnostic weights for `domains` domains.
fn retarget_shared(net: &Network, domains: usize) -> Result<Network> {
    let weights = weights_of(&net.extract_agnostic()?);
    replace_generators(net, domains, |i, g| {
        let w = &weights[i];
        let bias = Matrix::from_rows(std::slice::from_ref(&w.bias))?;
        Ok(GeneratedLayer {
            generator: WeightGenerator::new(g.generator.shape(), domains, WeightForm::Shared(w.weight.clone()), bias)?,
            trainable: g.trainable,
        })
    })
}

/// Slice that makes `shared + rho · slice` equal `w`.
fn delta(w: &ConcreteWeights, shared: &ConcreteWeights, rho: f64) -> Result<ConcreteWeights> {
    let data = w.weight.data().iter().zip(shared.weight.data()).map(|(a, b)| (a - b) / rho).collect();
    Ok(ConcreteWeights {
        weight: Tensor::new(w.weight.shape().to_vec(), data)?,
        bias: w.bias.iter().zip(&shared.bias).map(|(a, b)| (a - b) / rho).collect(),
    })
}

/// Generated network whose domain `i` weights start at `per_domain[i]` and
/// whose agnostic weights start at `agnostic`. With `epsilon` the stacks are
/// Tucker-factorized under that budget; with `last_only` the body keeps the
/// agnostic weights, unconditioned and frozen.
fn stack_network(
    template: &Network,
    agnostic: &ConcreteNetwork,
    per_domain: &[ConcreteNetwork],
    epsilon: Option<f64>,
    rho: f64,
    last_only: bool,
) -> Result<(Network, Vec<RankSelection>)> {
    let shared = weights_of(agnostic);
    let domain_weights: Vec<Vec<ConcreteWeights>> = per_domain.iter().map(weights_of).collect();
    let s = per_domain.len();
    let n = shared.len();
    let mut ranks = Vec::new();
    let net = replace_generators(template, s, |i, g| {
        let shape = g.generator.shape();
        if last_only && i + 1 < n {
            let bias = Matrix::from_rows(&[shared[i].bias.clone()])?;
            return Ok(GeneratedLayer {
                generator: WeightGenerator::new(shape, s, WeightForm::Shared(shared[i].weight.clone()), bias)?,
                trainable: false,
            });
        }
        let stack = domain_weights
            .iter()
            .map(|w| delta(&w[i], &shared[i], rho))
            .collect::<Result<Vec<_>>>()?;
        let generator = match epsilon {
            Some(eps) => {
                let (generator, sel) = WeightGenerator::factored_from_stack(shape, &stack, &shared[i], eps)?;
                ranks.push(sel);
                generator
            }
            None => WeightGenerator::full_from_stack(shape, &stack, &shared[i])?,
        };
        Ok(GeneratedLayer {
            generator,
            trainable: true,
        })
    })?;
    Ok((net, ranks))
}

/// Trains an unconditioned network on a single domain.
pub fn train_single_source(domain: &Domain, data: &MultiDomainDataset, cfg: &ExperimentConfig) -> Result<Network> {
    let one = data.select(std::slice::from_ref(&domain.name))?;
    let mut net = Runner {
        sources: &one,
        cfg,
        deep_all: None,
        tuning_last: None,
        last_finetunes: None,
        full_finetunes: None,
    }
    .init()?;
    train(&mut net, &one, &cfg.train)?;
    Ok(net)
}

/// Held-out accuracy of every mode, plus the best single-source model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeAccuracies {
    pub deep_all: f64,
    pub tuning_last: f64,
    pub two_hot_last: f64,
    pub two_hot_decomp_last: f64,
    pub full: f64,
    pub single_source_best: f64,
}

impl ModeAccuracies {
    pub fn get(&self, mode: Mode) -> f64 {
        match mode {
            Mode::DeepAll => self.deep_all,
            Mode::TuningLast => self.tuning_last,
            Mode::TwoHotLast => self.two_hot_last,
            Mode::TwoHotDecompLast => self.two_hot_decomp_last,
            Mode::Full => self.full,
        }
    }

    fn set(&mut self, mode: Mode, v: f64) {
        match mode {
            Mode::DeepAll => self.deep_all = v,
            Mode::TuningLast => self.tuning_last = v,
            Mode::TwoHotLast => self.two_hot_last = v,
            Mode::TwoHotDecompLast => self.two_hot_decomp_last = v,
            Mode::Full => self.full = v,
        }
    }

    fn zero() -> Self {
        Self {
            deep_all: 0.0,
            tuning_last: 0.0,
            two_hot_last: 0.0,
            two_hot_decomp_last: 0.0,
            full: 0.0,
            single_source_best: 0.0,
        }
    }

    /// Column means over `rows`.
    pub fn mean<'r>(rows: impl IntoIterator<Item = &'r ModeAccuracies>) -> Self {
        let mut m = Self::zero();
        let mut n = 0usize;
        for r in rows {
            n += 1;
            for mode in Mode::ALL {
                m.set(mode, m.get(mode) + r.get(mode));
            }
            m.single_source_best += r.single_source_best;
        }
        if n > 0 {
            for mode in Mode::ALL {
                m.set(mode, m.get(mode) / n as f64);
            }
            m.single_source_best /= n as f64;
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub held_out: String,
    pub seed: u64,
    pub accuracy: ModeAccuracies,
    /// Held-out accuracy of the model trained on each source alone.
    pub single_source: Vec<SourceAccuracy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceAccuracy {
    pub source: String,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config: ExperimentConfig,
    pub rows: Vec<AblationRow>,
    pub mean: ModeAccuracies,
}

/// Holds out each domain in turn and trains every mode on the rest. Cell
/// `k` (the `k`-th held-out domain) is seeded with `seed + k`.
pub fn ablate(data: &MultiDomainDataset, cfg: &ExperimentConfig) -> Result<AblationReport> {
    cfg.validate()?;
    let mut rows = Vec::with_capacity(data.domain_count());
    for (k, name) in data.domain_names().iter().enumerate() {
        let seed = cfg.train.seed.wrapping_add(k as u64);
        rows.push(ablation_row(data, name, &cfg.with_seed(seed))?);
    }
    let mean = ModeAccuracies::mean(&rows.iter().map(|r| r.accuracy.clone()).collect::<Vec<_>>());
    Ok(AblationReport {
        config: cfg.clone(),
        rows,
        mean,
    })
}

fn ablation_row(data: &MultiDomainDataset, held_out: &str, cfg: &ExperimentConfig) -> Result<AblationRow> {
    let (sources, target) = held_out_split(data, held_out)?;
    let mut acc = ModeAccuracies::zero();
    for run in run_all_modes(&sources, cfg)? {
        acc.set(run.mode, run.evaluate(&target)?);
    }
    let mut single_source = Vec::with_capacity(sources.domain_count());
    for d in sources.domains() {
        let net = train_single_source(d, &sources, cfg)?;
        single_source.push(SourceAccuracy {
            source: d.name.clone(),
            accuracy: evaluate_domain(&net.extract_agnostic()?, &target)?,
        });
    }
    acc.single_source_best = single_source.iter().map(|s| s.accuracy).fold(0.0, f64::max);
    Ok(AblationRow {
        held_out: held_out.to_string(),
        seed: cfg.train.seed,
        accuracy: acc,
        single_source,
    })
}

/// Feature-space shift with each domain held out in turn.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShiftAnalysis {
    /// `raw` or `penultimate`.
    pub features: String,
    pub rows: Vec<ShiftRow>,
    pub mean_d_shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShiftRow {
    pub held_out: String,
    pub sources: Vec<String>,
    pub report: ShiftReport,
}

fn domain_features(d: &Domain, net: Option<&ConcreteNetwork>) -> Result<Vec<Vec<f64>>> {
    d.instances
        .iter()
        .map(|i| match net {
            Some(n) => n.features(i.x.data()),
            None => Ok(i.x.data().to_vec()),
        })
        .collect()
}

/// Shift from the remaining domains to each held-out domain, on raw inputs
/// or on the penultimate activations of `net`.
pub fn shift_analysis(data: &MultiDomainDataset, net: Option<&ConcreteNetwork>) -> Result<ShiftAnalysis> {
    if data.domain_count() < 2 {
        return Err(Error::Config("shift analysis needs at least two domains".into()));
    }
    let feats = data
        .domains()
        .iter()
        .map(|d| domain_features(d, net))
        .collect::<Result<Vec<_>>>()?;
    let names = data.domain_names();
    let mut rows = Vec::with_capacity(names.len());
    for (t, name) in names.iter().enumerate() {
        let sources: Vec<Vec<Vec<f64>>> = (0..names.len()).filter(|&s| s != t).map(|s| feats[s].clone()).collect();
        let report = domain_shift(&sources, std::slice::from_ref(&feats[t]))?;
        rows.push(ShiftRow {
            held_out: name.clone(),
            sources: names.iter().filter(|n| *n != name).cloned().collect(),
            report,
        });
    }
    let mean_d_shift = rows.iter().map(|r| r.report.d_shift).sum::<f64>() / rows.len() as f64;
    Ok(ShiftAnalysis {
        features: if net.is_some() { "penultimate" } else { "raw" }.into(),
        rows,
        mean_d_shift,
    })
}

/// Within-domain versus cross-domain accuracy per domain.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarginAnalysis {
    pub domains: Vec<String>,
    pub within: Vec<f64>,
    pub cross: Vec<f64>,
    pub margin: MarginReport,
}

/// For each domain, holds out `test_fraction` of it; the within-domain model
/// trains on the rest of that domain, the cross-domain model (unconditioned,
/// pooled) on all other domains. Both are scored on the held-out part.
pub fn margin_analysis(data: &MultiDomainDataset, cfg: &ExperimentConfig, test_fraction: f64) -> Result<MarginAnalysis> {
    cfg.validate()?;
    let (rest, test) = split_train_val(data, test_fraction, cfg.train.seed)?;
    let mut within = Vec::new();
    let mut cross = Vec::new();
    for (k, name) in data.domain_names().iter().enumerate() {
        let cell = cfg.with_seed(cfg.train.seed.wrapping_add(k as u64));
        let target = test.domain(name).expect("split keeps every domain");
        let own = rest.domain(name).expect("split keeps every domain");
        let net = train_single_source(own, &rest, &cell)?;
        within.push(evaluate_domain(&net.extract_agnostic()?, target)?);
        let (sources, _) = held_out_split(data, name)?;
        let pooled = run_mode(Mode::DeepAll, &sources, &cell)?;
        cross.push(pooled.evaluate(target)?);
    }
    let margin = accuracy_margin(&within, &cross)?;
    Ok(MarginAnalysis {
        domains: data.domain_names(),
        within,
        cross,
        margin,
    })
}
