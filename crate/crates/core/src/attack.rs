//! Projected gradient descent under L2 and L-infinity threat models.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::cross_entropy;
use crate::model::Mlp;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    L2,
    Linf,
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormKind::L2 => "l2",
            NormKind::Linf => "linf",
        })
    }
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l2" => Ok(NormKind::L2),
            "linf" | "l-inf" | "inf" => Ok(NormKind::Linf),
            other => Err(Error::Config(format!("unknown norm `{other}` (expected l2 or linf)"))),
        }
    }
}

/// The allowed perturbation set: an epsilon-ball, optionally intersected with
/// a box constraint on the perturbed input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThreatModel {
    pub norm: NormKind,
    pub epsilon: f64,
    pub clamp: Option<(f64, f64)>,
}

impl ThreatModel {
    pub fn new(norm: NormKind, epsilon: f64, clamp: Option<(f64, f64)>) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
        }
        if let Some((lo, hi)) = clamp {
            if !(lo < hi) {
                return Err(Error::Config(format!("clamp interval [{lo}, {hi}] is empty")));
            }
        }
        Ok(Self { norm, epsilon, clamp })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PgdConfig {
    pub steps: usize,
    /// `None` selects `2 * epsilon / steps`.
    pub step_size: Option<f64>,
    pub random_init: bool,
    /// Targeted attack toward this class when set.
    pub target: Option<usize>,
    /// Seed for random initialization.
    pub seed: u64,
}

impl PgdConfig {
    pub fn new(steps: usize, step_size: Option<f64>, random_init: bool) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("PGD needs at least one step".into()));
        }
        if let Some(a) = step_size {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::Config(format!("step size must be positive, got {a}")));
            }
        }
        Ok(Self {
            steps,
            step_size,
            random_init,
            target: None,
            seed: 0,
        })
    }

    pub fn resolved_step_size(&self, threat: &ThreatModel) -> f64 {
        self.step_size
            .unwrap_or(2.0 * threat.epsilon / self.steps as f64)
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Projects `delta` onto the threat model's epsilon-ball in place.
pub fn project_in_place(delta: &mut [f64], threat: &ThreatModel) {
    let eps = threat.epsilon;
    match threat.norm {
        NormKind::Linf => {
            for d in delta.iter_mut() {
                *d = d.clamp(-eps, eps);
            }
        }
        NormKind::L2 => {
            let n = l2_norm(delta);
            if n > eps {
                let s = eps / n;
                for d in delta.iter_mut() {
                    *d *= s;
                }
            }
        }
    }
}

pub fn project(delta: &[f64], threat: &ThreatModel) -> Vec<f64> {
    let mut out = delta.to_vec();
    project_in_place(&mut out, threat);
    out
}

/// Shrinks `delta` so that every component of `x + delta` lies in the clamp box.
fn apply_value_clamp(x: &[f64], delta: &mut [f64], threat: &ThreatModel) {
    if let Some((lo, hi)) = threat.clamp {
        for (d, &xi) in delta.iter_mut().zip(x) {
            *d = (xi + *d).clamp(lo, hi) - xi;
        }
    }
}

/// A uniform draw from the threat model's ball.
pub fn random_start<R: Rng + ?Sized>(dim: usize, threat: &ThreatModel, rng: &mut R) -> Vec<f64> {
    let eps = threat.epsilon;
    match threat.norm {
        NormKind::Linf => (0..dim).map(|_| rng.gen_range(-eps..=eps)).collect(),
        NormKind::L2 => {
            let mut dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let n = l2_norm(&dir);
            let u: f64 = rng.gen();
            let radius = eps * u.powf(1.0 / dim as f64);
            let s = if n > 0.0 { radius / n } else { 0.0 };
            dir.iter_mut().for_each(|d| *d *= s);
            project(&dir, threat)
        }
    }
}

/// Gradient of the cross-entropy of `class` with respect to the input.
pub fn loss_input_gradient(model: &Mlp, x: &[f64], class: usize) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let params = model.bind_constant(&tape);
    let xv = tape.leaf("x", Tensor::vector(x.to_vec()))?;
    let logits = model.logits(&tape, &params, xv)?;
    let loss = cross_entropy(&tape, logits, class)?;
    Ok(tape.grad_values(loss, &[xv])?.remove(0).into_data())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PgdOutcome {
    pub adversarial: Vec<f64>,
    pub delta: Vec<f64>,
    /// Steps whose L2 gradient was exactly zero and so were left unnormalized.
    pub zero_grad_steps: usize,
}

/// Runs exactly `config.steps` projected steps from `x`.
///
/// Untargeted attacks ascend the cross-entropy of `y`; targeted attacks
/// descend the cross-entropy of `config.target`. L-infinity steps follow the
/// gradient sign, L2 steps the unit-norm gradient, both scaled by the step
/// size. Random starts use `rng`.
pub fn pgd<R: Rng + ?Sized>(
    model: &Mlp,
    x: &[f64],
    y: usize,
    config: &PgdConfig,
    threat: &ThreatModel,
    rng: &mut R,
) -> Result<PgdOutcome> {
    if x.len() != model.input_dim() {
        return Err(Error::InputDim {
            expected: model.input_dim(),
            got: x.len(),
        });
    }
    let alpha = config.resolved_step_size(threat);
    let (class, sign) = match config.target {
        Some(t) => (t, -1.0),
        None => (y, 1.0),
    };
    let mut delta = if config.random_init {
        random_start(x.len(), threat, rng)
    } else {
        vec![0.0; x.len()]
    };
    apply_value_clamp(x, &mut delta, threat);

    let mut zero_grad_steps = 0;
    let mut point = vec![0.0; x.len()];
    for _ in 0..config.steps {
        for ((p, &xi), &d) in point.iter_mut().zip(x).zip(&delta) {
            *p = xi + d;
        }
        let grad = loss_input_gradient(model, &point, class)?;
        let direction: Vec<f64> = match threat.norm {
            NormKind::Linf => grad.iter().map(|&g| sign_of(g)).collect(),
            NormKind::L2 => {
                let n = l2_norm(&grad);
                if n > 0.0 {
                    grad.iter().map(|g| g / n).collect()
                } else {
                    zero_grad_steps += 1;
                    grad
                }
            }
        };
        for (d, s) in delta.iter_mut().zip(&direction) {
            *d += sign * alpha * s;
        }
        project_in_place(&mut delta, threat);
        apply_value_clamp(x, &mut delta, threat);
    }
    let adversarial = x.iter().zip(&delta).map(|(a, b)| a + b).collect();
    Ok(PgdOutcome {
        adversarial,
        delta,
        zero_grad_steps,
    })
}

fn sign_of(g: f64) -> f64 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn clean_accuracy(model: &Mlp, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0usize;
    for i in 0..dataset.len() {
        if model.predict(dataset.sample(i))? == dataset.label(i) {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RobustReport {
    pub robust_accuracy: f64,
    pub zero_grad_steps: usize,
}

/// Fraction of samples still classified correctly after a per-sample attack.
///
/// Sample `i` draws its random start from a stream derived from
/// `(config.seed, i)`.
pub fn robust_accuracy(model: &Mlp, dataset: &Dataset, config: &PgdConfig, threat: &ThreatModel) -> Result<f64> {
    Ok(robust_report(model, dataset, config, threat)?.robust_accuracy)
}

pub fn robust_report(
    model: &Mlp,
    dataset: &Dataset,
    config: &PgdConfig,
    threat: &ThreatModel,
) -> Result<RobustReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0usize;
    let mut zero_grad_steps = 0;
    for i in 0..dataset.len() {
        let mut r = rng::stream(config.seed, &[0xa7, i as u64]);
        let out = pgd(model, dataset.sample(i), dataset.label(i), config, threat, &mut r)?;
        zero_grad_steps += out.zero_grad_steps;
        if model.predict(&out.adversarial)? == dataset.label(i) {
            correct += 1;
        }
    }
    Ok(RobustReport {
        robust_accuracy: correct as f64 / dataset.len() as f64,
        zero_grad_steps,
    })
}
