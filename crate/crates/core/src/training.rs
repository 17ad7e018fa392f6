//! Training loops for the three model kinds: clean training, adversarial
//! training with a composite loss, and the full layer-weighted objective
//! with a curriculum on the attack budget.

use larar_autodiff::nn::bce_mean;
use larar_autodiff::{AutodiffError, Graph, Tensor};
use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{labels_column, pgd, AttackConfig};
use crate::data::FeatureMatrix;
use crate::error::{LararError, Result};
use crate::losses::{total_loss, Components, LayerPenalty, LossBreakdown, LossWeights};
use crate::model::{ModelKind, Mode, NetworkParams, ParamSlot};
use crate::optim::Adam;
use crate::vulnerability::lvs_per_sample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epsilon_max: f64,
    pub pgd_iterations: usize,
    pub pgd_step: f64,
    pub seed: u64,
    /// Ramp the attack budget as `epsilon_max * e / E`; otherwise use
    /// `epsilon_max` from the first epoch.
    pub curriculum: bool,
    /// Overrides the component set implied by the model kind.
    pub components: Option<Components>,
    /// Clamp layer weights at zero after each step.
    pub weight_clamp: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            learning_rate: 0.001,
            epsilon_max: 0.3,
            pgd_iterations: 10,
            pgd_step: 0.01,
            seed: 0,
            curriculum: true,
            components: None,
            weight_clamp: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(LararError::InvalidConfig("batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(LararError::InvalidConfig("learning rate must be positive".into()));
        }
        if !(self.epsilon_max >= 0.0 && self.epsilon_max.is_finite()) {
            return Err(LararError::InvalidConfig("epsilon_max must be nonnegative".into()));
        }
        if self.pgd_iterations == 0 || !(self.pgd_step > 0.0) {
            return Err(LararError::InvalidConfig("PGD needs iterations >= 1 and a positive step".into()));
        }
        Ok(())
    }

    /// Attack budget for epoch `e` in `1..=epochs`.
    pub fn epsilon_at(&self, epoch: usize) -> f64 {
        if self.curriculum && self.epochs > 0 {
            self.epsilon_max * epoch as f64 / self.epochs as f64
        } else {
            self.epsilon_max
        }
    }

    pub fn components_for(&self, kind: ModelKind) -> Components {
        self.components.unwrap_or(match kind {
            ModelKind::Vanilla => Components::clean_only(),
            ModelKind::BaseAdvnn => Components::base_advnn(),
            ModelKind::Larar => Components::larar(),
        })
    }

    fn attack_for(&self, epsilon: f64, epoch: usize, batch: usize) -> AttackConfig {
        AttackConfig {
            epsilon,
            alpha: self.pgd_step,
            iterations: self.pgd_iterations,
            random_init: true,
            seed: mix(self.seed, epoch as u64, batch as u64),
        }
    }
}

fn mix(seed: u64, epoch: u64, batch: u64) -> u64 {
    let mut z = seed
        .wrapping_add(epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(batch.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub epsilon: f64,
    /// Batch means of each loss term.
    pub loss: LossBreakdown,
    /// Batch-mean vulnerability score per layer, averaged over the epoch.
    /// Empty when no adversarial examples were generated.
    pub lvs: Vec<f64>,
    /// Layer weights at the end of the epoch.
    pub weights: Vec<f64>,
    /// Largest `|∂L/∂w_l − β·s_l|` seen this epoch, where `s_l` is the
    /// penalty score; `None` when the weights were not trained.
    pub weight_grad_residual: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub logs: Vec<EpochLog>,
}

/// Initializes a network of `kind` from `cfg.seed` and trains it.
pub fn train(kind: ModelKind, data: &FeatureMatrix, cfg: &TrainConfig, weights: &LossWeights) -> Result<TrainOutcome> {
    let params = NetworkParams::init(kind, data.dim(), cfg.seed)?;
    train_params(params, data, cfg, weights, cfg.components_for(kind))
}

/// Trains existing parameters with an explicit component set.
pub fn train_params(
    mut params: NetworkParams,
    data: &FeatureMatrix,
    cfg: &TrainConfig,
    lw: &LossWeights,
    components: Components,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    lw.validate()?;
    if data.dim() != params.input_dim {
        return Err(LararError::DimensionMismatch {
            expected: params.input_dim,
            got: data.dim(),
        });
    }
    if components.aux && !params.has_aux() {
        return Err(LararError::UnsupportedModel(format!("{} has no auxiliary heads", params.kind)));
    }
    if cfg.epochs > 0 && data.is_empty() {
        return Err(LararError::EmptyInput("training split"));
    }
    let train_weights = components.adaptive_weights && components.penalty != LayerPenalty::None && components.adversarial;
    let mut adam = Adam::new(cfg.learning_rate);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5348_5546);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let eps = cfg.epsilon_at(epoch);
        order.shuffle(&mut shuffle_rng);
        let mut sums = LossBreakdown::default();
        let mut lvs_sum = vec![0.0; params.num_hidden()];
        let mut batches = 0usize;
        let mut residual: Option<f64> = None;

        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let diverged = |reason: String| LararError::TrainingDiverged {
                epoch,
                batch: b,
                reason,
            };
            let xb = data.x.select_rows(idx);
            let yb: Vec<u8> = idx.iter().map(|&i| data.y[i]).collect();
            let y = labels_column(&yb);

            let x_adv = if components.adversarial {
                let clean = params.forward(&xb, Mode::Train).map_err(|e| engine(e, &diverged))?;
                params.absorb_batch_stats(&clean.batch_stats);
                Some(if eps == 0.0 {
                    xb.clone()
                } else {
                    pgd(&params, &xb, &yb, &cfg.attack_for(eps, epoch, b)).map_err(|e| engine(e, &diverged))?
                })
            } else {
                None
            };

            let g = Graph::new();
            let bound = params.bind(&g, true);
            let loss = if components.adversarial {
                total_loss(&g, &params, &bound, &xb, x_adv.as_ref(), &y, &components, lw)
            } else {
                clean_loss(&g, &params, &bound, &xb, &y)
            }
            .map_err(|e| engine(e, &diverged))?;
            if !loss.breakdown.total.is_finite() {
                return Err(diverged("non-finite loss".into()));
            }
            if !components.adversarial {
                params.absorb_batch_stats(&loss.clean.batch_stats);
            }

            let grads = g.backward(loss.total, None).map_err(|e| engine(e.into(), &diverged))?;
            let mut grad_list = Vec::new();
            for (slot, var) in &bound.slots {
                let gt = grads.get_or_zeros(*var);
                if !gt.is_finite() {
                    return Err(diverged(format!("non-finite gradient for {slot:?}")));
                }
                grad_list.push(if *slot == ParamSlot::LayerWeights && !train_weights {
                    Tensor::zeros(gt.rows(), gt.cols())
                } else {
                    gt
                });
            }

            if train_weights {
                let dw = &grad_list[grad_list.len() - 1];
                for (l, s) in loss.scores.iter().enumerate() {
                    let r = (dw.data()[l] - lw.beta * s.value().item()).abs();
                    residual = Some(residual.map_or(r, |m: f64| m.max(r)));
                }
            }

            if let Some(adv) = &loss.adv {
                for (l, (hc, ha)) in loss.clean.hidden.iter().zip(&adv.hidden).enumerate() {
                    let s = lvs_per_sample(&hc.value(), &ha.value())?;
                    lvs_sum[l] += s.iter().sum::<f64>() / s.len() as f64;
                }
            }
            accumulate(&mut sums, &loss.breakdown);
            batches += 1;

            let tensors: Vec<&mut Tensor> = params.tensors_mut().into_iter().map(|(_, t)| t).collect();
            adam.step(tensors, &grad_list)?;
            if cfg.weight_clamp {
                for w in params.layer_weights.data_mut() {
                    *w = w.max(0.0);
                }
            }
        }

        let inv = 1.0 / batches.max(1) as f64;
        let log = EpochLog {
            epoch,
            epsilon: eps,
            loss: LossBreakdown {
                ce: sums.ce * inv,
                aux: sums.aux * inv,
                ga: sums.ga * inv,
                fs: sums.fs * inv,
                penalty: sums.penalty * inv,
                total: sums.total * inv,
            },
            lvs: if components.adversarial {
                lvs_sum.iter().map(|s| s * inv).collect()
            } else {
                Vec::new()
            },
            weights: params.layer_weights().to_vec(),
            weight_grad_residual: residual,
        };
        info!(
            "{} epoch {epoch}/{}: eps {:.4} loss {:.5} lvs {:?} w {:?}",
            params.kind, cfg.epochs, log.epsilon, log.loss.total, log.lvs, log.weights
        );
        debug!("{:?}", log.loss);
        logs.push(log);
    }
    Ok(TrainOutcome { params, logs })
}

fn engine(e: LararError, diverged: &dyn Fn(String) -> LararError) -> LararError {
    match e {
        LararError::Engine(AutodiffError::NonFinite { op }) => diverged(format!("non-finite value in {op}")),
        LararError::AttackFailure(msg) => diverged(msg),
        other => other,
    }
}

fn clean_loss<'g>(
    g: &'g Graph,
    params: &NetworkParams,
    bound: &crate::model::BoundParams<'g>,
    x: &Tensor,
    y: &Tensor,
) -> Result<crate::losses::TotalLoss<'g>> {
    let clean = params.forward_graph(bound, g.constant(x.clone()), Mode::Train)?;
    let total = bce_mean(clean.prob, y)?;
    let v = total.value().item();
    Ok(crate::losses::TotalLoss {
        total,
        breakdown: LossBreakdown {
            ce: v,
            total: v,
            ..Default::default()
        },
        clean,
        adv: None,
        scores: Vec::new(),
        weights: None,
    })
}

fn accumulate(acc: &mut LossBreakdown, b: &LossBreakdown) {
    acc.ce += b.ce;
    acc.aux += b.aux;
    acc.ga += b.ga;
    acc.fs += b.fs;
    acc.penalty += b.penalty;
    acc.total += b.total;
}

/// Epoch series as CSV: one row per epoch with loss terms, per-layer scores
/// and per-layer weights.
pub fn epoch_csv(logs: &[EpochLog]) -> String {
    let layers = logs.iter().map(|l| l.weights.len()).max().unwrap_or(0);
    let mut out = String::from("epoch,epsilon,loss_total,loss_ce,loss_aux,loss_ga,loss_fs,loss_penalty");
    for l in 1..=layers {
        out.push_str(&format!(",lvs_{l}"));
    }
    for l in 1..=layers {
        out.push_str(&format!(",w_{l}"));
    }
    out.push('\n');
    for log in logs {
        let b = &log.loss;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}",
            log.epoch, log.epsilon, b.total, b.ce, b.aux, b.ga, b.fs, b.penalty
        ));
        for l in 0..layers {
            match log.lvs.get(l) {
                Some(v) => out.push_str(&format!(",{v}")),
                None => out.push(','),
            }
        }
        for l in 0..layers {
            match log.weights.get(l) {
                Some(v) => out.push_str(&format!(",{v}")),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}
