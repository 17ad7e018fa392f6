//! Layer vulnerability scores, calibrated detection thresholds and
//! early-exit inference through the auxiliary heads.

use larar_autodiff::{Tensor, Var};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{project_coord, AttackConfig};
use crate::error::{LararError, Result};
use crate::model::{ForwardTrace, Mode, NetworkParams};

/// Stabilizer added to the clean activation norm.
pub const LVS_EPS: f64 = 1e-8;
pub const DEFAULT_K: f64 = 2.5;
pub const DEFAULT_LAMBDA: f64 = 1.2;
pub const DEFAULT_EXIT_THRESHOLD: f64 = 0.95;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LvsReport {
    /// Batch-mean score per layer.
    pub per_layer: Vec<f64>,
    /// `per_sample[l][i]` is the score of sample `i` at layer `l`.
    pub per_sample: Vec<Vec<f64>>,
    pub epoch: Option<usize>,
}

/// Relative shift `‖adv_i − clean_i‖ / (‖clean_i‖ + 1e-8)` for every row.
pub fn lvs_per_sample(clean: &Tensor, adv: &Tensor) -> Result<Vec<f64>> {
    if clean.shape() != adv.shape() {
        return Err(LararError::ShapeMismatch(format!(
            "clean activations {:?} vs adversarial {:?}",
            clean.shape(),
            adv.shape()
        )));
    }
    Ok((0..clean.rows())
        .map(|i| {
            let (c, a) = (clean.row(i), adv.row(i));
            let diff = c.iter().zip(a).map(|(c, a)| (a - c) * (a - c)).sum::<f64>().sqrt();
            let base = c.iter().map(|c| c * c).sum::<f64>().sqrt();
            diff / (base + LVS_EPS)
        })
        .collect())
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn compute_lvs(clean: &ForwardTrace, adv: &ForwardTrace) -> Result<LvsReport> {
    if clean.hidden.len() != adv.hidden.len() {
        return Err(LararError::ShapeMismatch(format!(
            "traces have {} and {} layers",
            clean.hidden.len(),
            adv.hidden.len()
        )));
    }
    let per_sample = clean
        .hidden
        .iter()
        .zip(&adv.hidden)
        .map(|(c, a)| lvs_per_sample(c, a))
        .collect::<Result<Vec<_>>>()?;
    Ok(LvsReport {
        per_layer: per_sample.iter().map(|s| mean(s)).collect(),
        per_sample,
        epoch: None,
    })
}

/// Differentiable batch-mean score of one layer, `1 x 1`.
pub fn lvs_graph<'g>(clean: Var<'g>, adv: Var<'g>) -> Result<Var<'g>> {
    let num = adv.sub(clean)?.row_norms()?;
    let den = clean.row_norms()?.add_scalar(LVS_EPS)?;
    Ok(num.div(den)?.mean()?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerThreshold {
    pub mu: f64,
    /// Population standard deviation.
    pub sigma: f64,
    pub max: f64,
    pub tau: f64,
}

impl LayerThreshold {
    pub fn from_scores(scores: &[f64], k: f64, lambda: f64) -> Result<Self> {
        match scores.len() {
            0 => return Err(LararError::EmptyCalibration),
            1 => return Err(LararError::DegenerateCalibration(1)),
            _ => {}
        }
        let n = scores.len() as f64;
        let mu = scores.iter().sum::<f64>() / n;
        let sigma = (scores.iter().map(|s| (s - mu) * (s - mu)).sum::<f64>() / n).sqrt();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            mu,
            sigma,
            max,
            tau: Self::threshold(mu, sigma, max, k, lambda),
        })
    }

    pub fn threshold(mu: f64, sigma: f64, max: f64, k: f64, lambda: f64) -> f64 {
        (mu + k * sigma).max(lambda * max)
    }
}

/// Thresholds and reference statistics carried by a deployed model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub k: f64,
    pub lambda: f64,
    pub samples: usize,
    /// Thresholds on the single-input proxy score.
    pub proxy: Vec<LayerThreshold>,
    /// Mean clean activation per layer, `1 x d_l`.
    pub mean_activation: Vec<Tensor>,
    /// Thresholds on paired scores, calibrated against uniform noise of the
    /// same budget as the configured attack.
    pub paired: Vec<LayerThreshold>,
    pub reference_epsilon: f64,
}

impl CalibrationStats {
    pub fn num_layers(&self) -> usize {
        self.proxy.len()
    }

    pub fn thresholds(&self, mode: ScoreKind) -> Vec<f64> {
        let set = match mode {
            ScoreKind::Proxy => &self.proxy,
            ScoreKind::Paired => &self.paired,
        };
        set.iter().map(|t| t.tau).collect()
    }

    /// Recomputes every threshold from the stored statistics.
    pub fn is_consistent(&self) -> bool {
        self.proxy.iter().chain(&self.paired).all(|t| {
            t.tau == LayerThreshold::threshold(t.mu, t.sigma, t.max, self.k, self.lambda)
        })
    }
}

/// Single-input score `‖h_i − μ_h‖ / (‖μ_h‖ + 1e-8)` for every row.
pub fn proxy_scores(h: &Tensor, mean_activation: &Tensor) -> Result<Vec<f64>> {
    if h.cols() != mean_activation.cols() {
        return Err(LararError::ShapeMismatch(format!(
            "activation width {} vs reference width {}",
            h.cols(),
            mean_activation.cols()
        )));
    }
    let mu = mean_activation.row(0);
    let base = mu.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok((0..h.rows())
        .map(|i| {
            let d = h.row(i).iter().zip(mu).map(|(a, m)| (a - m) * (a - m)).sum::<f64>().sqrt();
            d / (base + LVS_EPS)
        })
        .collect())
}

/// Uniform-noise reference inside the epsilon-ball, seeded.
pub fn noise_reference(x: &Tensor, epsilon: f64, seed: u64) -> Tensor {
    if epsilon == 0.0 {
        return x.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new_inclusive(-epsilon, epsilon);
    let mut out = x.clone();
    for v in out.data_mut() {
        let x0 = *v;
        *v = project_coord(x0 + dist.sample(&mut rng), x0, epsilon);
    }
    out
}

pub fn calibrate_thresholds(
    params: &NetworkParams,
    calibration: &Tensor,
    attack: &AttackConfig,
    k: f64,
    lambda: f64,
) -> Result<CalibrationStats> {
    if calibration.rows() == 0 {
        return Err(LararError::EmptyCalibration);
    }
    if calibration.rows() == 1 {
        return Err(LararError::DegenerateCalibration(1));
    }
    let clean = params.forward(calibration, Mode::Eval)?;
    let noisy = params.forward(&noise_reference(calibration, attack.epsilon, attack.seed), Mode::Eval)?;
    let paired_scores = compute_lvs(&clean, &noisy)?;
    let mut proxy = Vec::new();
    let mut mean_activation = Vec::new();
    let mut paired = Vec::new();
    for (l, h) in clean.hidden.iter().enumerate() {
        let mu = h.sum_rows().map(|v| v / h.rows() as f64);
        proxy.push(LayerThreshold::from_scores(&proxy_scores(h, &mu)?, k, lambda)?);
        mean_activation.push(mu);
        paired.push(LayerThreshold::from_scores(&paired_scores.per_sample[l], k, lambda)?);
    }
    Ok(CalibrationStats {
        k,
        lambda,
        samples: calibration.rows(),
        proxy,
        mean_activation,
        paired,
        reference_epsilon: attack.epsilon,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreKind {
    Proxy,
    Paired,
}

#[derive(Clone, Copy, Debug)]
pub enum DetectMode<'a> {
    Proxy,
    /// Score each row against the matching row of a clean reference.
    Paired(&'a Tensor),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionVerdict {
    pub flagged: bool,
    /// Zero-based indices of layers whose score exceeded the threshold.
    pub triggering: Vec<usize>,
    pub scores: Vec<f64>,
}

impl DetectionVerdict {
    pub fn from_scores(scores: Vec<f64>, thresholds: &[f64]) -> Self {
        let triggering: Vec<usize> = scores
            .iter()
            .zip(thresholds)
            .enumerate()
            .filter(|(_, (s, t))| s > t)
            .map(|(l, _)| l)
            .collect();
        Self {
            flagged: !triggering.is_empty(),
            triggering,
            scores,
        }
    }
}

/// Per-layer, per-sample scores in the requested mode.
pub fn layer_scores(
    params: &NetworkParams,
    x: &Tensor,
    stats: &CalibrationStats,
    mode: DetectMode<'_>,
) -> Result<Vec<Vec<f64>>> {
    if stats.num_layers() != params.num_hidden() {
        return Err(LararError::ShapeMismatch(format!(
            "calibration covers {} layers, model has {}",
            stats.num_layers(),
            params.num_hidden()
        )));
    }
    let trace = params.forward(x, Mode::Eval)?;
    match mode {
        DetectMode::Proxy => trace
            .hidden
            .iter()
            .zip(&stats.mean_activation)
            .map(|(h, mu)| proxy_scores(h, mu))
            .collect(),
        DetectMode::Paired(reference) => {
            if reference.shape() != x.shape() {
                return Err(LararError::ShapeMismatch(format!(
                    "reference {:?} vs input {:?}",
                    reference.shape(),
                    x.shape()
                )));
            }
            let clean = params.forward(reference, Mode::Eval)?;
            Ok(compute_lvs(&clean, &trace)?.per_sample)
        }
    }
}

fn kind_of(mode: DetectMode<'_>) -> ScoreKind {
    match mode {
        DetectMode::Proxy => ScoreKind::Proxy,
        DetectMode::Paired(_) => ScoreKind::Paired,
    }
}

/// One verdict per input row.
pub fn detect(
    params: &NetworkParams,
    x: &Tensor,
    stats: &CalibrationStats,
    mode: DetectMode<'_>,
) -> Result<Vec<DetectionVerdict>> {
    let scores = layer_scores(params, x, stats, mode)?;
    let tau = stats.thresholds(kind_of(mode));
    Ok((0..x.rows())
        .map(|i| DetectionVerdict::from_scores(scores.iter().map(|s| s[i]).collect(), &tau))
        .collect())
}

/// One verdict for the whole batch, scoring each layer by its batch mean.
pub fn detect_batch(
    params: &NetworkParams,
    x: &Tensor,
    stats: &CalibrationStats,
    mode: DetectMode<'_>,
) -> Result<DetectionVerdict> {
    let scores = layer_scores(params, x, stats, mode)?;
    let tau = stats.thresholds(kind_of(mode));
    Ok(DetectionVerdict::from_scores(scores.iter().map(|s| mean(s)).collect(), &tau))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitDecision {
    pub label: u8,
    /// One-based layer index of the auxiliary head that answered, or
    /// `L + 1` when the output head was used.
    pub exit_layer: usize,
    pub macs: u64,
}

impl ExitDecision {
    pub fn exited_early(&self, num_hidden: usize) -> bool {
        self.exit_layer <= num_hidden
    }
}

/// Multiply-accumulate count of an ordinary forward pass for one sample.
pub fn full_forward_macs(params: &NetworkParams) -> u64 {
    let mut macs = 0u64;
    for layer in &params.hidden {
        let [i, o] = layer.linear.weight.shape();
        macs += (i * o) as u64;
        if layer.batchnorm.is_some() {
            macs += o as u64;
        }
    }
    macs + params.head.weight.len() as u64
}

/// Answers from the first auxiliary head whose probability is at least
/// `threshold` or at most `1 − threshold`.
///
/// The decision is made on logits, so a threshold of `1` never exits and a
/// threshold of `0.5` always exits at the first layer. The MAC count covers
/// the layers evaluated, the batchnorm scalings and every head consulted.
pub fn early_exit_infer(params: &NetworkParams, x: &Tensor, threshold: f64) -> Result<Vec<ExitDecision>> {
    if !params.has_aux() {
        return Err(LararError::UnsupportedModel(format!(
            "{} has no auxiliary heads for early exit",
            params.kind
        )));
    }
    if !(0.5..=1.0).contains(&threshold) {
        return Err(LararError::InvalidConfig(format!(
            "early-exit threshold must lie in [0.5, 1], got {threshold}"
        )));
    }
    let cut = if threshold == 1.0 {
        f64::INFINITY
    } else {
        (threshold / (1.0 - threshold)).ln()
    };
    let trace = params.forward(x, Mode::Eval)?;
    let num_hidden = params.num_hidden();
    let mut out = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let mut macs = 0u64;
        let mut decision = None;
        for (l, layer) in params.hidden.iter().enumerate() {
            let [fan_in, width] = layer.linear.weight.shape();
            macs += (fan_in * width) as u64;
            if layer.batchnorm.is_some() {
                macs += width as u64;
            }
            let Some(aux) = trace.aux_logits.get(l) else { continue };
            macs += params.aux[l].weight.len() as u64;
            let z = aux.get(i, 0);
            if z >= cut || z <= -cut {
                decision = Some(ExitDecision {
                    label: u8::from(z >= 0.0),
                    exit_layer: l + 1,
                    macs,
                });
                break;
            }
        }
        out.push(decision.unwrap_or_else(|| ExitDecision {
            label: u8::from(trace.output.get(i, 0) >= 0.5),
            exit_layer: num_hidden + 1,
            macs: macs + params.head.weight.len() as u64,
        }));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_threshold_case() {
        let t = LayerThreshold::from_scores(&[0.1, 0.2, 0.3], 2.5, 1.2).unwrap();
        assert!((t.mu - 0.2).abs() < 1e-15);
        assert!((t.sigma - (0.02f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((t.tau - 0.404124145).abs() < 1e-6);
    }

    #[test]
    fn zero_variance_uses_margin() {
        let t = LayerThreshold::from_scores(&[0.25; 4], 2.5, 1.2).unwrap();
        assert_eq!(t.sigma, 0.0);
        assert_eq!(t.tau, 1.2 * 0.25);
    }

    #[test]
    fn degenerate_and_empty_sets() {
        assert!(matches!(LayerThreshold::from_scores(&[], 2.5, 1.2), Err(LararError::EmptyCalibration)));
        assert!(matches!(
            LayerThreshold::from_scores(&[0.3], 2.5, 1.2),
            Err(LararError::DegenerateCalibration(1))
        ));
    }

    #[test]
    fn hand_norm_case() {
        let c = Tensor::from_rows(&[[3.0, 4.0]]).unwrap();
        let a = Tensor::from_rows(&[[3.0, 4.5]]).unwrap();
        let s = lvs_per_sample(&c, &a).unwrap();
        assert_eq!(s[0], 0.5 / (5.0 + 1e-8));
    }

    #[test]
    fn verdict_rule() {
        let v = DetectionVerdict::from_scores(vec![0.5, 0.3 + 1e-9], &[0.5, 0.3]);
        assert!(v.flagged);
        assert_eq!(v.triggering, vec![1]);
        let v = DetectionVerdict::from_scores(vec![0.5, 0.3], &[0.5, 0.3]);
        assert!(!v.flagged);
    }
}
