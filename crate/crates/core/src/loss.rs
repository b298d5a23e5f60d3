//! Cross-entropy, cosine-direction loss and the gradient-alignment objective.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{BoundParams, Mlp};
use crate::tensor::Tensor;

pub const DEFAULT_COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PagLossConfig {
    /// Weight of the summed cosine terms.
    pub lambda: f64,
    /// Floor on the norm product in the cosine denominator.
    pub cosine_eps: f64,
}

impl PagLossConfig {
    pub fn new(lambda: f64, cosine_eps: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be nonnegative, got {lambda}")));
        }
        if !(cosine_eps > 0.0) {
            return Err(Error::Config(format!("cosine eps must be positive, got {cosine_eps}")));
        }
        Ok(Self { lambda, cosine_eps })
    }
}

impl Default for PagLossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            cosine_eps: DEFAULT_COSINE_EPS,
        }
    }
}

/// `-log softmax(z)[y]`, stabilized through log-sum-exp.
pub fn cross_entropy(tape: &Tape, logits: Var, y: usize) -> Result<Var> {
    let classes = tape.shape(logits)?.iter().product();
    if y >= classes {
        return Err(Error::ClassOutOfRange { class: y, classes });
    }
    let lse = tape.log_sum_exp(logits)?;
    let zy = tape.index(logits, y)?;
    Ok(tape.sub(lse, zy)?)
}

/// `1 - v.u / max(|v| |u|, eps)`.
pub fn cosine_loss(tape: &Tape, v: Var, u: Var, eps: f64) -> Result<Var> {
    let (sv, su) = (tape.shape(v)?, tape.shape(u)?);
    if sv != su {
        return Err(crate::autodiff::GradError::ShapeMismatch {
            op: "cosine-loss",
            lhs: sv,
            rhs: su,
        }
        .into());
    }
    let denom = tape.max_const(tape.mul(tape.norm(v)?, tape.norm(u)?)?, eps)?;
    let cos = tape.mul(tape.dot(v, u)?, tape.recip(denom)?)?;
    let one = tape.constant(Tensor::scalar(1.0));
    Ok(tape.sub(one, cos)?)
}

/// Scalar pieces of the per-example objective.
#[derive(Clone, Copy, Debug)]
pub struct PagTerms {
    /// `ce + lambda * cos` (just `ce` when lambda is 0).
    pub total: Var,
    pub ce: Var,
    /// Sum over all classes of the cosine losses.
    pub cos: Var,
}

/// Cross-entropy plus `lambda` times the summed cosine losses between the
/// input-gradient of every class logit and its target direction.
///
/// `x` must be a leaf of `tape`; the input-gradients are recorded with their
/// graph so `total` is differentiable with respect to the parameters.
pub fn pag_total_loss(
    tape: &Tape,
    model: &Mlp,
    params: &BoundParams,
    x: Var,
    y: usize,
    targets: &[&[f64]],
    config: &PagLossConfig,
) -> Result<PagTerms> {
    let classes = model.classes();
    let dim = model.input_dim();
    if targets.len() != classes || targets.iter().any(|t| t.len() != dim) {
        return Err(Error::MissingTarget {
            expected: classes,
            dim,
            got: targets.iter().filter(|t| t.len() == dim).count(),
        });
    }
    let logits = model.logits(tape, params, x)?;
    let ce = cross_entropy(tape, logits, y)?;

    let mut cos: Option<Var> = None;
    for (class, target) in targets.iter().enumerate() {
        let z = tape.index(logits, class)?;
        let input_grad = tape.grad(z, &[x], true)?[0];
        let u = tape.constant(Tensor::vector(target.to_vec()));
        let term = cosine_loss(tape, input_grad, u, config.cosine_eps)?;
        cos = Some(match cos {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let cos = cos.expect("models have at least one class");

    let total = if config.lambda == 0.0 {
        ce
    } else {
        tape.add(ce, tape.scale(cos, config.lambda)?)?
    };
    Ok(PagTerms { total, ce, cos })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ce_of(z: &[f64], y: usize) -> f64 {
        let tape = Tape::new();
        let z = tape.constant(Tensor::vector(z.to_vec()));
        tape.scalar(cross_entropy(&tape, z, y).unwrap()).unwrap()
    }

    fn cos_of(v: &[f64], u: &[f64]) -> f64 {
        let tape = Tape::new();
        let v = tape.constant(Tensor::vector(v.to_vec()));
        let u = tape.constant(Tensor::vector(u.to_vec()));
        tape.scalar(cosine_loss(&tape, v, u, DEFAULT_COSINE_EPS).unwrap()).unwrap()
    }

    #[test]
    fn cross_entropy_values() {
        assert!((ce_of(&[0.0, 0.0], 0) - 2f64.ln()).abs() < 1e-15);
        assert!(ce_of(&[1000.0, 0.0], 0).abs() < 1e-12);
        assert!((ce_of(&[0.0, 0.0, 0.0, 0.0], 2) - 4f64.ln()).abs() < 1e-15);
        assert!(ce_of(&[0.0, 1000.0], 0).is_finite());
    }

    #[test]
    fn cross_entropy_rejects_bad_class() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::vector(vec![0.0, 1.0]));
        assert!(matches!(
            cross_entropy(&tape, z, 2),
            Err(Error::ClassOutOfRange { class: 2, classes: 2 })
        ));
    }

    #[test]
    fn cosine_loss_values() {
        assert!(cos_of(&[1.0, 2.0], &[1.0, 2.0]).abs() < 1e-15);
        assert!((cos_of(&[1.0, 0.0], &[0.0, 3.0]) - 1.0).abs() < 1e-15);
        assert!((cos_of(&[1.0, -2.0], &[-1.0, 2.0]) - 2.0).abs() < 1e-15);
        assert_eq!(cos_of(&[1.0, 2.0], &[0.0, 0.0]), 1.0);
    }

    #[test]
    fn cosine_loss_dim_mismatch() {
        let tape = Tape::new();
        let v = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let u = tape.constant(Tensor::vector(vec![1.0]));
        assert!(cosine_loss(&tape, v, u, 1e-8).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(PagLossConfig::new(-0.1, 1e-8).is_err());
        assert!(PagLossConfig::new(0.1, 0.0).is_err());
        assert!(PagLossConfig::new(0.0, 1e-8).is_ok());
    }

    #[test]
    fn missing_target_rejected() {
        let m = Mlp::init(&[2, 4, 2], 0).unwrap();
        let tape = Tape::new();
        let p = m.bind(&tape).unwrap();
        let x = tape.leaf("x", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let t = [1.0, 0.0];
        let err = pag_total_loss(&tape, &m, &p, x, 0, &[&t], &PagLossConfig::default()).unwrap_err();
        assert!(matches!(err, Error::MissingTarget { expected: 2, .. }));
    }
}
