use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ConcreteNetwork, Gradients, Network, Sample};
use crate::dataset::{split_train_val, Domain, Instance, MultiDomainDataset};
use crate::error::{Error, Result};

/// Optimization settings. `batch_size` counts instances drawn from each
/// source domain per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_iterations: usize,
    pub rho: f64,
    pub seed: u64,
    pub val_fraction: f64,
    pub weight_decay: f64,
    /// Validation (and loss-curve) interval in steps.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            momentum: 0.9,
            batch_size: 64,
            max_iterations: 1000,
            rho: 0.3,
            seed: 0,
            val_fraction: 0.1,
            weight_decay: 0.0,
            eval_every: 50,
        }
    }
}

impl TrainConfig {
    /// Settings used for fine-tuning a pretrained AlexNet on image domains.
    pub fn alexnet_finetune() -> Self {
        Self {
            learning_rate: 5e-5,
            max_iterations: 25_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch size and eval interval must be positive".into()));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::Config("rho must be positive".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config("validation fraction must lie in (0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// SGD with momentum: `v ← μv − η(g + λθ)`, `θ ← θ + v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    velocity: Gradients,
    learning_rate: f64,
    momentum: f64,
    weight_decay: f64,
}

impl Sgd {
    pub fn new(net: &Network, learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            velocity: net.generators().map(|g| g.generator.zero_grads()).collect(),
            learning_rate,
            momentum,
            weight_decay,
        }
    }

    pub fn step(&mut self, net: &mut Network, grads: &Gradients) {
        for ((layer, v), g) in net.generators_mut().zip(&mut self.velocity).zip(grads) {
            if !layer.trainable {
                continue;
            }
            for ((p, vb), gb) in layer.generator.params_mut().into_iter().zip(v).zip(g) {
                for ((theta, vel), &grad) in p.iter_mut().zip(vb.iter_mut()).zip(gb) {
                    *vel = self.momentum * *vel - self.learning_rate * (grad + self.weight_decay * *theta);
                    *theta += *vel;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub iteration: usize,
    /// Mean training loss over the steps since the previous point.
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub iteration: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub seed: u64,
    pub loss_curve: Vec<LossPoint>,
    pub val_accuracy: Vec<EvalPoint>,
    pub best_iteration: usize,
    pub best_val_accuracy: f64,
    pub parameter_count: usize,
}

/// Multi-domain training.
///
/// Each source domain is split train/validation by a seeded shuffle. Every
/// step draws `batch_size` instances (with replacement) from each domain's
/// training part. The domain-agnostic model is scored on the pooled
/// validation parts every `eval_every` steps and the best-scoring parameters
/// (latest on ties) are left in `net`.
pub fn train(net: &mut Network, data: &MultiDomainDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if data.class_count() != net.classes() {
        return Err(Error::LabelSpace(format!(
            "dataset has {} classes, network {}",
            data.class_count(),
            net.classes()
        )));
    }
    if data.domain_count() != net.domains() {
        return Err(Error::Config(format!(
            "dataset has {} domains, network {}",
            data.domain_count(),
            net.domains()
        )));
    }
    if data.input_shape() != net.input_shape() {
        return Err(Error::Shape(format!(
            "dataset inputs {:?}, network {:?}",
            data.input_shape(),
            net.input_shape()
        )));
    }
    if let Some(d) = data.domains().iter().find(|d| d.len() < 2) {
        return Err(Error::EmptyDomain(format!("domain {:?} is too small to split", d.name)));
    }
    let (train_set, val_set) = split_train_val(data, cfg.val_fraction, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(net, cfg.learning_rate, cfg.momentum, cfg.weight_decay);

    let mut report = TrainReport {
        config: cfg.clone(),
        seed: cfg.seed,
        loss_curve: Vec::new(),
        val_accuracy: Vec::new(),
        best_iteration: 0,
        best_val_accuracy: f64::NEG_INFINITY,
        parameter_count: net.parameter_count(),
    };
    let mut best = net.clone();
    let mut running = 0.0;
    let mut since = 0usize;

    let mut record = |net: &Network, iteration: usize, report: &mut TrainReport| -> Result<()> {
        let acc = pooled_accuracy(&net.extract_agnostic()?, val_set.domains())?;
        report.val_accuracy.push(EvalPoint { iteration, accuracy: acc });
        if acc >= report.best_val_accuracy {
            report.best_val_accuracy = acc;
            report.best_iteration = iteration;
            best = net.clone();
        }
        Ok(())
    };
    record(net, 0, &mut report)?;

    let mut batch: Vec<Sample<'_>> = Vec::with_capacity(cfg.batch_size * train_set.domain_count());
    for it in 1..=cfg.max_iterations {
        batch.clear();
        for (d, dom) in train_set.domains().iter().enumerate() {
            for _ in 0..cfg.batch_size {
                let inst = &dom.instances[rng.gen_range(0..dom.len())];
                batch.push(Sample {
                    x: inst.x.data(),
                    label: inst.label,
                    domain: d,
                });
            }
        }
        let (loss, grads) = net.loss_and_grads(&batch, cfg.rho)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("training loss became {loss} at step {it}")));
        }
        opt.step(net, &grads);
        running += loss;
        since += 1;
        if it % cfg.eval_every == 0 || it == cfg.max_iterations {
            report.loss_curve.push(LossPoint {
                iteration: it,
                loss: running / since as f64,
            });
            running = 0.0;
            since = 0;
            record(net, it, &mut report)?;
        }
    }
    *net = best;
    Ok(report)
}

fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Fraction of instances whose highest score (lowest index on ties) is the label.
pub fn evaluate<'a>(net: &ConcreteNetwork, instances: impl IntoIterator<Item = &'a Instance>) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for inst in instances {
        total += 1;
        if argmax(&net.forward(inst.x.data())?) == inst.label {
            correct += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { correct as f64 / total as f64 })
}

pub fn evaluate_domain(net: &ConcreteNetwork, domain: &Domain) -> Result<f64> {
    evaluate(net, &domain.instances)
}

fn pooled_accuracy(net: &ConcreteNetwork, domains: &[Domain]) -> Result<f64> {
    evaluate(net, domains.iter().flat_map(|d| &d.instances))
}

#[cfg(test)]
pub(crate) fn argmax_for_tests(scores: &[f64]) -> usize {
    argmax(scores)
}
