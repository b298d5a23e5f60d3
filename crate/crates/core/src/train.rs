//! Minibatch training for the three regimes: plain cross-entropy, the
//! gradient-alignment objective, and PGD adversarial training.
//!
//! Every example gets its own tape; per-example parameter gradients are summed
//! in batch order and averaged, so results do not depend on evaluation order.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::attack::{self, PgdConfig, ThreatModel};
use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::{cross_entropy, pag_total_loss, PagLossConfig};
use crate::model::Mlp;
use crate::reps::RepStore;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Regime {
    Vanilla,
    Pag(PagLossConfig),
    Adversarial { pgd: PgdConfig, threat: ThreatModel },
}

impl Regime {
    pub fn name(&self) -> &'static str {
        match self {
            Regime::Vanilla => "vanilla",
            Regime::Pag(_) => "pag",
            Regime::Adversarial { .. } => "adversarial",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerConfig {
    SgdMomentum {
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    },
    Adam {
        lr: f64,
        weight_decay: f64,
    },
}

impl OptimizerConfig {
    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::SgdMomentum { lr, .. } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }

    pub fn build(&self, params: usize) -> Box<dyn Optimizer> {
        match *self {
            OptimizerConfig::SgdMomentum {
                lr,
                momentum,
                weight_decay,
            } => Box::new(Sgd::new(params, lr, momentum, weight_decay)),
            OptimizerConfig::Adam { lr, weight_decay } => Box::new(Adam::new(params, lr, weight_decay)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::SgdMomentum => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" | "sgd-momentum" => Ok(OptimizerKind::SgdMomentum),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

pub trait Optimizer {
    fn step(&mut self, params: &mut [f64], grads: &[f64]);
}

/// Heavy-ball SGD: `v = momentum * v + g`, `p -= lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(params: usize, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: vec![0.0; params],
        }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        for ((p, &g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let g = g + self.weight_decay * *p;
            *v = self.momentum * *v + g;
            *p -= self.lr * *v;
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with bias-corrected moments; weight decay is added to the gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(params: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            m: vec![0.0; params],
            v: vec![0.0; params],
            t: 0,
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for (i, (p, &g)) in params.iter_mut().zip(grads).enumerate() {
            let g = g + self.weight_decay * *p;
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub regime: Regime,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.optimizer.lr() > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-example objective over the epoch.
    pub train_loss: f64,
    /// Accuracy on the clean training set after the epoch.
    pub clean_acc: f64,
    pub ce_term: Option<f64>,
    pub cos_term: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Mlp,
    pub log: Vec<EpochRecord>,
}

#[derive(Debug)]
struct ExampleResult {
    loss: f64,
    ce: f64,
    cos: f64,
    grads: Vec<f64>,
}

fn flatten(grads: Vec<Tensor>, capacity: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(capacity);
    for g in grads {
        out.extend_from_slice(g.data());
    }
    out
}

fn ce_example(model: &Mlp, x: &[f64], y: usize) -> Result<ExampleResult> {
    let tape = Tape::new();
    let params = model.bind(&tape)?;
    let xv = tape.constant(Tensor::vector(x.to_vec()));
    let logits = model.logits(&tape, &params, xv)?;
    let loss = cross_entropy(&tape, logits, y)?;
    let value = tape.scalar(loss)?;
    let grads = tape.grad_values(loss, &params.ordered())?;
    Ok(ExampleResult {
        loss: value,
        ce: value,
        cos: 0.0,
        grads: flatten(grads, model.num_params()),
    })
}

fn pag_example(model: &Mlp, x: &[f64], y: usize, targets: &[&[f64]], config: &PagLossConfig) -> Result<ExampleResult> {
    let tape = Tape::new();
    let params = model.bind(&tape)?;
    let xv = tape.leaf("x", Tensor::vector(x.to_vec()))?;
    let terms = pag_total_loss(&tape, model, &params, xv, y, targets, config)?;
    let grads = tape.grad_values(terms.total, &params.ordered())?;
    Ok(ExampleResult {
        loss: tape.scalar(terms.total)?,
        ce: tape.scalar(terms.ce)?,
        cos: tape.scalar(terms.cos)?,
        grads: flatten(grads, model.num_params()),
    })
}

/// Trains `model` in place of a copy and returns it with per-epoch records.
///
/// Deterministic for a fixed config: batch order comes from `(seed, epoch)`
/// and adversarial random starts from `(seed, epoch, sample)`.
pub fn train(model: &Mlp, dataset: &Dataset, config: &TrainConfig, reps: Option<&RepStore>) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.dim() != model.input_dim() {
        return Err(Error::InputDim {
            expected: model.input_dim(),
            got: dataset.dim(),
        });
    }
    if dataset.classes() != model.classes() {
        return Err(Error::Config(format!(
            "dataset has {} classes, model outputs {}",
            dataset.classes(),
            model.classes()
        )));
    }
    match (&config.regime, reps) {
        (Regime::Pag(_), None) => return Err(Error::Config("pag regime needs a rep store".into())),
        (Regime::Pag(_), Some(store)) => store.check_matches(dataset)?,
        (_, Some(_)) => {
            return Err(Error::Config(format!(
                "{} regime does not take a rep store",
                config.regime.name()
            )))
        }
        _ => {}
    }

    let mut model = model.clone();
    let mut params = model.flat_params();
    let mut optimizer = config.optimizer.build(params.len());
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng::stream(config.seed, &[0x5f, epoch as u64]));
        let (mut loss_sum, mut ce_sum, mut cos_sum) = (0.0, 0.0, 0.0);

        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            let mut grad_sum = vec![0.0; params.len()];
            for &i in batch {
                let (x, y) = (dataset.sample(i), dataset.label(i));
                let ex = match &config.regime {
                    Regime::Vanilla => ce_example(&model, x, y)?,
                    Regime::Pag(cfg) => {
                        let targets = reps.expect("checked above").targets_for(i);
                        pag_example(&model, x, y, &targets, cfg)?
                    }
                    Regime::Adversarial { pgd, threat } => {
                        let mut r = rng::stream(config.seed, &[0xad, epoch as u64, i as u64]);
                        let adv = attack::pgd(&model, x, y, pgd, threat, &mut r)?;
                        ce_example(&model, &adv.adversarial, y)?
                    }
                };
                if !ex.loss.is_finite() || ex.grads.iter().any(|g| !g.is_finite()) {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: batch_idx,
                    });
                }
                loss_sum += ex.loss;
                ce_sum += ex.ce;
                cos_sum += ex.cos;
                for (s, g) in grad_sum.iter_mut().zip(&ex.grads) {
                    *s += g;
                }
            }
            let n = batch.len() as f64;
            grad_sum.iter_mut().for_each(|g| *g /= n);
            optimizer.step(&mut params, &grad_sum);
            model.set_flat_params(&params)?;
        }

        let n = dataset.len() as f64;
        let is_pag = matches!(config.regime, Regime::Pag(_));
        log.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            clean_acc: attack::clean_accuracy(&model, dataset)?,
            ce_term: is_pag.then_some(ce_sum / n),
            cos_term: is_pag.then_some(cos_sum / n),
        });
    }
    Ok(TrainOutcome { model, log })
}

/// `epoch,regime,train_loss,clean_acc[,cos_term,ce_term]`
pub fn metrics_csv(regime: &str, log: &[EpochRecord]) -> String {
    let with_terms = log.iter().any(|r| r.cos_term.is_some());
    let mut out = String::from("epoch,regime,train_loss,clean_acc");
    if with_terms {
        out.push_str(",cos_term,ce_term");
    }
    out.push('\n');
    for r in log {
        out.push_str(&format!("{},{},{:?},{:?}", r.epoch, regime, r.train_loss, r.clean_acc));
        if with_terms {
            out.push_str(&format!(
                ",{:?},{:?}",
                r.cos_term.unwrap_or(f64::NAN),
                r.ce_term.unwrap_or(f64::NAN)
            ));
        }
        out.push('\n');
    }
    out
}

pub fn write_metrics_csv(path: &Path, regime: &str, log: &[EpochRecord]) -> Result<()> {
    fs::write(path, metrics_csv(regime, log)).map_err(|e| Error::io(path, e))
}
