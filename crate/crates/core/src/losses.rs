//! Loss terms of the layer-weighted adversarial objective.

use larar_autodiff::nn::{bce_mean, bce_sum};
use larar_autodiff::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{LararError, Result};
use crate::model::{BoundParams, GraphTrace, Mode, NetworkParams, ParamSlot};
use crate::vulnerability::{lvs_graph, LvsReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_aux: f64,
    pub lambda_ga: f64,
    pub lambda_fs: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_aux: 0.2,
            lambda_ga: 1.0,
            lambda_fs: 0.5,
            beta: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_aux", self.lambda_aux),
            ("lambda_ga", self.lambda_ga),
            ("lambda_fs", self.lambda_fs),
            ("beta", self.beta),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(LararError::InvalidConfig(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// What the per-layer penalty measures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerPenalty {
    None,
    /// Relative shift, the vulnerability score.
    Lvs,
    /// Batch-mean absolute shift `‖h_adv − h_clean‖` without normalization.
    Shift,
}

/// Which terms of the objective are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Components {
    /// Generate adversarial examples and average clean and adversarial CE.
    pub adversarial: bool,
    pub aux: bool,
    pub ga: bool,
    pub fs: bool,
    pub penalty: LayerPenalty,
    /// Learn the layer weights; otherwise they stay at their current value.
    pub adaptive_weights: bool,
}

impl Default for Components {
    fn default() -> Self {
        Self::larar()
    }
}

impl Components {
    pub fn clean_only() -> Self {
        Self {
            adversarial: false,
            aux: false,
            ga: false,
            fs: false,
            penalty: LayerPenalty::None,
            adaptive_weights: false,
        }
    }

    pub fn base_advnn() -> Self {
        Self {
            adversarial: true,
            ga: true,
            fs: true,
            ..Self::clean_only()
        }
    }

    pub fn larar() -> Self {
        Self {
            adversarial: true,
            aux: true,
            ga: true,
            fs: true,
            penalty: LayerPenalty::Lvs,
            adaptive_weights: true,
        }
    }
}

/// ½ (mean BCE on clean + mean BCE on adversarial predictions).
pub fn loss_ce<'g>(prob_clean: Var<'g>, prob_adv: Var<'g>, y: &Tensor) -> Result<Var<'g>> {
    Ok(bce_mean(prob_clean, y)?.add(bce_mean(prob_adv, y)?)?.scale(0.5)?)
}

/// Sum over layers of the auxiliary heads' mean BCE on clean activations.
pub fn loss_aux<'g>(aux_prob: &[Var<'g>], y: &Tensor) -> Result<Var<'g>> {
    let (first, rest) = aux_prob
        .split_first()
        .ok_or_else(|| LararError::UnsupportedModel("auxiliary loss needs auxiliary heads".into()))?;
    let mut total = bce_mean(*first, y)?;
    for p in rest {
        total = total.add(bce_mean(*p, y)?)?;
    }
    Ok(total)
}

/// Batch mean of `‖∇ₓ BCE(x) − ∇ₓ BCE(x_adv)‖²`, differentiable in the
/// parameters. `clean` and `adv` must have been built with leaf inputs.
pub fn loss_ga<'g>(graph: &'g Graph, clean: &GraphTrace<'g>, adv: &GraphTrace<'g>, y: &Tensor) -> Result<Var<'g>> {
    let n = clean.input.shape()[0];
    let gc = input_grad(graph, clean, y)?;
    let ga = input_grad(graph, adv, y)?;
    Ok(gc.sub(ga)?.square()?.sum()?.scale(1.0 / n as f64)?)
}

fn input_grad<'g>(graph: &'g Graph, trace: &GraphTrace<'g>, y: &Tensor) -> Result<Var<'g>> {
    let loss = bce_sum(trace.prob, y)?;
    let grads = graph.grad(loss, &[trace.input], None)?;
    match grads[0] {
        Some(g) => Ok(g),
        None => Ok(graph.constant(Tensor::zeros(trace.input.shape()[0], trace.input.shape()[1]))),
    }
}

/// Batch mean of `‖h_L(x) − h_L(x_adv)‖²`.
pub fn loss_fs<'g>(h_clean: Var<'g>, h_adv: Var<'g>) -> Result<Var<'g>> {
    let n = h_clean.shape()[0];
    Ok(h_clean.sub(h_adv)?.square()?.sum()?.scale(1.0 / n as f64)?)
}

/// `beta * Σ_l w_l * s_l` for `1 x 1` scores `s_l` and a `1 x L` weight row.
pub fn layer_penalty<'g>(scores: &[Var<'g>], weights: Var<'g>, beta: f64) -> Result<Var<'g>> {
    let l = weights.shape()[1];
    if scores.len() != l || weights.shape()[0] != 1 {
        return Err(LararError::ShapeMismatch(format!(
            "{} layer scores for weights of shape {:?}",
            scores.len(),
            weights.shape()
        )));
    }
    let g = weights.graph();
    let mut total = g.constant(Tensor::scalar(0.0));
    for (i, s) in scores.iter().enumerate() {
        let mut e = Tensor::zeros(l, 1);
        e.set(i, 0, 1.0);
        let w_i = weights.matmul(g.constant(e))?;
        total = total.add(w_i.mul(*s)?)?;
    }
    Ok(total.scale(beta)?)
}

/// Penalty on precomputed scores, differentiable in the weights only.
pub fn loss_lvs<'g>(report: &LvsReport, weights: Var<'g>, beta: f64) -> Result<Var<'g>> {
    let g = weights.graph();
    let scores: Vec<Var<'g>> = report.per_layer.iter().map(|&s| g.constant(Tensor::scalar(s))).collect();
    layer_penalty(&scores, weights, beta)
}

/// Batch-mean unnormalized activation shift of one layer.
pub fn shift_graph<'g>(clean: Var<'g>, adv: Var<'g>) -> Result<Var<'g>> {
    Ok(adv.sub(clean)?.row_norms()?.mean()?)
}

/// Scalar values of each term, for logging.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub aux: f64,
    pub ga: f64,
    pub fs: f64,
    pub penalty: f64,
    pub total: f64,
}

/// The assembled objective on one batch.
pub struct TotalLoss<'g> {
    pub total: Var<'g>,
    pub breakdown: LossBreakdown,
    pub clean: GraphTrace<'g>,
    pub adv: Option<GraphTrace<'g>>,
    /// Per-layer penalty scores (LVS or shift), `1 x 1` each.
    pub scores: Vec<Var<'g>>,
    /// Weight row used by the penalty.
    pub weights: Option<Var<'g>>,
}

/// Builds the training objective for one batch in training mode.
///
/// `x_adv` is a constant with respect to the parameters. Inputs become
/// graph leaves only when gradient alignment needs input gradients.
pub fn total_loss<'g>(
    graph: &'g Graph,
    params: &NetworkParams,
    bound: &BoundParams<'g>,
    x: &Tensor,
    x_adv: Option<&Tensor>,
    y: &Tensor,
    components: &Components,
    lw: &LossWeights,
) -> Result<TotalLoss<'g>> {
    let input = |t: &Tensor| {
        if components.ga {
            graph.leaf(t.clone())
        } else {
            graph.constant(t.clone())
        }
    };
    let clean = params.forward_graph(bound, input(x), Mode::Train)?;
    let mut breakdown = LossBreakdown::default();

    let adv = if components.adversarial {
        let x_adv = x_adv.ok_or_else(|| LararError::InvalidConfig("adversarial objective needs x_adv".into()))?;
        Some(params.forward_graph(bound, input(x_adv), Mode::Train)?)
    } else {
        None
    };

    let mut total = match &adv {
        Some(a) => loss_ce(clean.prob, a.prob, y)?,
        None => bce_mean(clean.prob, y)?,
    };
    breakdown.ce = total.value().item();

    if components.aux {
        let aux = loss_aux(&clean.aux_prob, y)?;
        breakdown.aux = aux.value().item();
        total = total.add(aux.scale(lw.lambda_aux)?)?;
    }

    let mut scores = Vec::new();
    let mut weights = None;
    if let Some(a) = &adv {
        if components.ga {
            let ga = loss_ga(graph, &clean, a, y)?;
            breakdown.ga = ga.value().item();
            total = total.add(ga.scale(lw.lambda_ga)?)?;
        }
        if components.fs {
            let fs = loss_fs(clean.final_hidden(), a.final_hidden())?;
            breakdown.fs = fs.value().item();
            total = total.add(fs.scale(lw.lambda_fs)?)?;
        }
        if components.penalty != LayerPenalty::None {
            for (hc, ha) in clean.hidden.iter().zip(&a.hidden) {
                scores.push(match components.penalty {
                    LayerPenalty::Lvs => lvs_graph(*hc, *ha)?,
                    _ => shift_graph(*hc, *ha)?,
                });
            }
            let w = if components.adaptive_weights {
                bound.get(ParamSlot::LayerWeights)
            } else {
                graph.constant(params.layer_weights.clone())
            };
            let pen = layer_penalty(&scores, w, lw.beta)?;
            breakdown.penalty = pen.value().item();
            total = total.add(pen)?;
            weights = Some(w);
        }
    }
    breakdown.total = total.value().item();
    Ok(TotalLoss {
        total,
        breakdown,
        clean,
        adv,
        scores,
        weights,
    })
}
