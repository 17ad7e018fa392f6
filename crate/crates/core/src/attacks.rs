//! White-box FGSM/PGD under an l-infinity budget, and transfer evaluation.
//!
//! Attacks differentiate the summed BCE of the model in eval mode, so the
//! gradient of each row depends on that row alone and chunking is exact.
//! Perturbed features are not clamped to any data box.

use larar_autodiff::nn::{bce_per_sample, bce_sum};
use larar_autodiff::{AutodiffError, Graph, Tensor};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LararError, Result};
use crate::model::{Mode, NetworkParams, EVAL_CHUNK};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub iterations: usize,
    pub random_init: bool,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.3,
            alpha: 0.01,
            iterations: 10,
            random_init: true,
            seed: 0,
        }
    }
}

impl AttackConfig {
    /// Single full-budget step without random start, which is FGSM.
    pub fn fgsm_equivalent(epsilon: f64) -> Self {
        Self {
            epsilon,
            alpha: epsilon,
            iterations: 1,
            random_init: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(LararError::InvalidConfig(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if self.iterations == 0 {
            return Err(LararError::InvalidConfig("PGD needs at least one iteration".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(LararError::InvalidConfig(format!("alpha must be > 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

pub fn labels_column(y: &[u8]) -> Tensor {
    Tensor::column(&y.iter().map(|&v| f64::from(v)).collect::<Vec<_>>())
}

fn check_labels(x: &Tensor, y: &[u8]) -> Result<()> {
    if x.rows() != y.len() {
        return Err(LararError::ShapeMismatch(format!(
            "{} input rows but {} labels",
            x.rows(),
            y.len()
        )));
    }
    if let Some(bad) = y.iter().find(|&&v| v > 1) {
        return Err(LararError::NonBinaryLabel(format!("label value {bad}")));
    }
    Ok(())
}

fn attack_error(e: AutodiffError) -> LararError {
    match e {
        AutodiffError::NonFinite { op } => LararError::AttackFailure(format!("non-finite value in {op}")),
        other => other.into(),
    }
}

/// Gradient of the summed BCE with respect to the input rows, eval mode.
pub fn input_gradient(params: &NetworkParams, x: &Tensor, y: &[u8]) -> Result<Tensor> {
    check_labels(x, y)?;
    let g = Graph::new();
    let bound = params.bind(&g, false);
    let xv = g.leaf(x.clone());
    let trace = params.forward_graph(&bound, xv, Mode::Eval).map_err(|e| match e {
        LararError::Engine(e) => attack_error(e),
        other => other,
    })?;
    let loss = bce_sum(trace.prob, &labels_column(y)).map_err(attack_error)?;
    let grads = g.backward(loss, None).map_err(attack_error)?;
    let grad = grads.get_or_zeros(xv);
    if !grad.is_finite() {
        return Err(LararError::AttackFailure("non-finite input gradient".into()));
    }
    Ok(grad)
}

/// Eval-mode per-sample BCE.
pub fn per_sample_loss(params: &NetworkParams, x: &Tensor, y: &[u8]) -> Result<Vec<f64>> {
    check_labels(x, y)?;
    let g = Graph::new();
    let bound = params.bind(&g, false);
    let trace = params.forward_graph(&bound, g.constant(x.clone()), Mode::Eval)?;
    Ok(bce_per_sample(trace.prob, &labels_column(y))?.value().into_vec())
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Clamps `v` into the epsilon-ball around `x0` so that the floating-point
/// difference `v - x0` never exceeds `eps` in magnitude.
pub fn project_coord(v: f64, x0: f64, eps: f64) -> f64 {
    let mut v = v.clamp(x0 - eps, x0 + eps);
    while (v - x0).abs() > eps {
        v = if v > x0 { v.next_down() } else { v.next_up() };
    }
    v
}

fn signed_step(current: &Tensor, origin: &Tensor, grad: &Tensor, step: f64, eps: f64) -> Tensor {
    let mut out = current.clone();
    for ((o, &x0), &g) in out.data_mut().iter_mut().zip(origin.data()).zip(grad.data()) {
        let s = sign(g);
        if s != 0.0 {
            *o = project_coord(*o + step * s, x0, eps);
        }
    }
    out
}

/// Single-step attack `x + eps * sign(grad)`.
pub fn fgsm(params: &NetworkParams, x: &Tensor, y: &[u8], epsilon: f64) -> Result<Tensor> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(LararError::InvalidConfig(format!("epsilon must be >= 0, got {epsilon}")));
    }
    check_labels(x, y)?;
    if epsilon == 0.0 {
        return Ok(x.clone());
    }
    map_chunks(x, y, |_, xc, yc| {
        let grad = input_gradient(params, xc, yc)?;
        Ok(signed_step(xc, xc, &grad, epsilon, epsilon))
    })
}

/// Projected gradient descent on the loss, maximizing it inside the ball.
pub fn pgd(params: &NetworkParams, x: &Tensor, y: &[u8], cfg: &AttackConfig) -> Result<Tensor> {
    pgd_observed(params, x, y, cfg, |_, _, _| {})
}

/// PGD that reports every iterate to `observe(chunk_start, iteration, iterate)`.
///
/// Iteration `0` is the starting point after the optional random init.
pub fn pgd_observed<F>(params: &NetworkParams, x: &Tensor, y: &[u8], cfg: &AttackConfig, observe: F) -> Result<Tensor>
where
    F: Fn(usize, usize, &Tensor) + Sync,
{
    cfg.validate()?;
    check_labels(x, y)?;
    map_chunks(x, y, |start, xc, yc| {
        let eps = cfg.epsilon;
        let mut cur = if cfg.random_init && eps > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(chunk_seed(cfg.seed, start));
            let dist = Uniform::new_inclusive(-eps, eps);
            let mut t = xc.clone();
            for v in t.data_mut() {
                let x0 = *v;
                *v = project_coord(x0 + dist.sample(&mut rng), x0, eps);
            }
            t
        } else {
            xc.clone()
        };
        observe(start, 0, &cur);
        for k in 1..=cfg.iterations {
            let grad = input_gradient(params, &cur, yc)?;
            cur = signed_step(&cur, xc, &grad, cfg.alpha, eps);
            observe(start, k, &cur);
        }
        Ok(cur)
    })
}

fn chunk_seed(seed: u64, start: usize) -> u64 {
    seed ^ (start as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn map_chunks<F>(x: &Tensor, y: &[u8], f: F) -> Result<Tensor>
where
    F: Fn(usize, &Tensor, &[u8]) -> Result<Tensor> + Sync,
{
    if x.rows() <= EVAL_CHUNK {
        return f(0, x, y);
    }
    let starts: Vec<usize> = (0..x.rows()).step_by(EVAL_CHUNK).collect();
    let parts = starts
        .par_iter()
        .map(|&s| {
            let e = (s + EVAL_CHUNK).min(x.rows());
            f(s, &x.slice_rows(s, e), &y[s..e])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::vstack(&parts)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferOutcome {
    pub predictions: Vec<u8>,
    pub accuracy: f64,
}

/// Crafts PGD examples on `surrogate` and scores them on `target`.
pub fn transfer_attack(
    surrogate: &NetworkParams,
    target: &NetworkParams,
    x: &Tensor,
    y: &[u8],
    cfg: &AttackConfig,
) -> Result<TransferOutcome> {
    if surrogate.input_dim != target.input_dim {
        return Err(LararError::DimensionMismatch {
            expected: target.input_dim,
            got: surrogate.input_dim,
        });
    }
    let x_adv = pgd(surrogate, x, y, cfg)?;
    let predictions = target.predict(&x_adv)?;
    let accuracy = accuracy(&predictions, y);
    Ok(TransferOutcome { predictions, accuracy })
}

pub(crate) fn accuracy(pred: &[u8], y: &[u8]) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    pred.iter().zip(y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_never_exceeds_budget() {
        let cases = [(0.1, 0.3), (1e16, 0.3), (-7.25, 1e-17), (0.3, 0.1 + 0.2), (1.0 / 3.0, 0.7)];
        for (x0, eps) in cases {
            for v in [x0 + 10.0 * eps, x0 - 10.0 * eps, x0 + eps, x0 - eps] {
                let p = project_coord(v, x0, eps);
                assert!((p - x0).abs() <= eps, "x0={x0} eps={eps} v={v} p={p}");
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig::default().validate().is_ok());
        let bad = AttackConfig {
            iterations: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = AttackConfig {
            epsilon: -0.1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
