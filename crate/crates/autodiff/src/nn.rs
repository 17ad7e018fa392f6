//! Composite building blocks: binary cross-entropy and batch normalization.
//!
//! Both are assembled from primitive ops, so they inherit second-order
//! support from the primitive rules.

use serde::{Deserialize, Serialize};

use crate::error::{AutodiffError, Result};
use crate::graph::Var;
use crate::tensor::Tensor;

/// Probabilities are clipped to `[PROB_CLIP, 1 - PROB_CLIP]` inside the log.
pub const PROB_CLIP: f64 = 1e-12;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-sample binary cross-entropy, `n x 1`.
///
/// `prob` and `target` are `n x 1`; `target` holds labels in `{0, 1}`.
pub fn bce_per_sample<'g>(prob: Var<'g>, target: &Tensor) -> Result<Var<'g>> {
    let shape = prob.shape();
    if shape != target.shape() {
        return Err(AutodiffError::ShapeMismatch {
            op: "bce",
            lhs: shape,
            rhs: target.shape(),
        });
    }
    let g = prob.graph();
    let p = prob.clamp(PROB_CLIP, 1.0 - PROB_CLIP)?;
    let y = g.constant(target.clone());
    let not_y = g.constant(target.map(|v| 1.0 - v));
    let pos = y.mul(p.ln()?)?;
    let neg = not_y.mul(p.neg()?.add_scalar(1.0)?.ln()?)?;
    pos.add(neg)?.neg()
}

/// Mean binary cross-entropy over the batch.
pub fn bce_mean<'g>(prob: Var<'g>, target: &Tensor) -> Result<Var<'g>> {
    bce_per_sample(prob, target)?.mean()
}

/// Sum of per-sample binary cross-entropies.
///
/// The input gradient of the sum is the per-sample loss gradient stacked by
/// row, which is what attacks and gradient alignment consume.
pub fn bce_sum<'g>(prob: Var<'g>, target: &Tensor) -> Result<Var<'g>> {
    bce_per_sample(prob, target)?.sum()
}

/// Scalar BCE on plain numbers with the same clipping as the graph version.
pub fn bce_value(prob: f64, target: f64) -> f64 {
    let p = prob.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// Biased batch mean and variance observed in a training-mode pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Tensor,
    pub var: Tensor,
    pub count: usize,
}

/// Running statistics used in eval mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl RunningStats {
    /// Exponential moving average update with momentum [`BN_MOMENTUM`].
    ///
    /// The running variance tracks the unbiased batch variance. A batch of a
    /// single row carries no variance information and leaves the state
    /// untouched, except to seed it when nothing was recorded yet.
    pub fn update(current: Option<&RunningStats>, batch: &BatchStats) -> RunningStats {
        let n = batch.count as f64;
        let unbiased = if batch.count > 1 {
            batch.var.map(|v| v * n / (n - 1.0))
        } else {
            batch.var.clone()
        };
        match current {
            None => RunningStats {
                mean: batch.mean.clone(),
                var: unbiased,
            },
            Some(cur) if batch.count <= 1 => cur.clone(),
            Some(cur) => RunningStats {
                mean: cur
                    .mean
                    .zip_map(&batch.mean, |r, b| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * b),
                var: cur
                    .var
                    .zip_map(&unbiased, |r, b| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * b),
            },
        }
    }
}

/// Training-mode batch normalization over rows.
///
/// Returns the normalized, affinely transformed batch together with the batch
/// statistics, which the caller may fold into its running state.
pub fn batchnorm_train<'g>(x: Var<'g>, gamma: Var<'g>, beta: Var<'g>) -> Result<(Var<'g>, BatchStats)> {
    let [n, m] = x.shape();
    check_affine(m, gamma, beta)?;
    let inv_n = 1.0 / n as f64;
    let mean = x.sum_rows()?.scale(inv_n)?;
    let centered = x.sub(mean.broadcast_rows(n)?)?;
    let var = centered.square()?.sum_rows()?.scale(inv_n)?;
    let std = var.add_scalar(BN_EPS)?.sqrt()?;
    let normalized = centered.div(std.broadcast_rows(n)?)?;
    let out = normalized.mul(gamma.broadcast_rows(n)?)?.add_row(beta)?;
    let stats = BatchStats {
        mean: mean.value(),
        var: var.value(),
        count: n,
    };
    Ok((out, stats))
}

/// Eval-mode batch normalization using running statistics.
pub fn batchnorm_eval<'g>(
    x: Var<'g>,
    gamma: Var<'g>,
    beta: Var<'g>,
    running: Option<&RunningStats>,
) -> Result<Var<'g>> {
    let running = running.ok_or(AutodiffError::CalibrationMissing)?;
    let [n, m] = x.shape();
    check_affine(m, gamma, beta)?;
    if running.mean.shape() != [1, m] || running.var.shape() != [1, m] {
        return Err(AutodiffError::ShapeMismatch {
            op: "batchnorm_eval",
            lhs: [n, m],
            rhs: running.mean.shape(),
        });
    }
    let g = x.graph();
    let shift = g.constant(running.mean.map(|v| -v));
    let inv_std = g.constant(running.var.map(|v| 1.0 / (v + BN_EPS).sqrt()));
    let scale = inv_std.mul(gamma)?;
    x.add_row(shift)?.mul(scale.broadcast_rows(n)?)?.add_row(beta)
}

fn check_affine(m: usize, gamma: Var<'_>, beta: Var<'_>) -> Result<()> {
    for v in [gamma, beta] {
        if v.shape() != [1, m] {
            return Err(AutodiffError::ShapeMismatch {
                op: "batchnorm",
                lhs: [1, m],
                rhs: v.shape(),
            });
        }
    }
    Ok(())
}
