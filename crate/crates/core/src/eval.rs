//! Metrics, the three-model comparison, the ablation runner and early-exit
//! statistics.

use std::fmt;
use std::str::FromStr;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{fgsm, pgd, transfer_attack, AttackConfig};
use crate::data::Splits;
use crate::error::{LararError, Result};
use crate::losses::{Components, LayerPenalty, LossWeights};
use crate::model::{ModelKind, NetworkParams};
use crate::training::{train, train_params, EpochLog, TrainConfig};
use crate::vulnerability::{early_exit_infer, full_forward_macs, DEFAULT_EXIT_THRESHOLD};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Confusion counts and ratios with label `1` (attack) as the positive class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Metrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            accuracy: ratio(tp + tn, tp + fp + fn_ + tn),
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
            tn,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

pub fn compute_metrics(predictions: &[u8], truth: &[u8]) -> Result<Metrics> {
    if truth.is_empty() {
        return Err(LararError::EmptyInput("metrics need at least one sample"));
    }
    if predictions.len() != truth.len() {
        return Err(LararError::ShapeMismatch(format!(
            "{} predictions for {} labels",
            predictions.len(),
            truth.len()
        )));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &t) in predictions.iter().zip(truth) {
        match (p, t) {
            (1, 1) => tp += 1,
            (1, _) => fp += 1,
            (_, 1) => fn_ += 1,
            _ => tn += 1,
        }
    }
    Ok(Metrics::from_counts(tp, fp, fn_, tn))
}

/// Fraction of adversarial samples misclassified, `1 − adversarial accuracy`.
pub fn attack_success_rate(_clean_accuracy: f64, adversarial_accuracy: f64) -> f64 {
    1.0 - adversarial_accuracy
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Condition {
    Clean,
    Fgsm,
    Pgd,
    Transfer,
}

impl Condition {
    pub const ALL: [Condition; 4] = [Condition::Clean, Condition::Fgsm, Condition::Pgd, Condition::Transfer];

    pub fn label(self) -> &'static str {
        match self {
            Condition::Clean => "Clean",
            Condition::Fgsm => "FGSM",
            Condition::Pgd => "PGD",
            Condition::Transfer => "Transfer",
        }
    }

    pub fn is_attack(self) -> bool {
        self != Condition::Clean
    }
}

impl FromStr for Condition {
    type Err = LararError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "clean" => Ok(Condition::Clean),
            "fgsm" => Ok(Condition::Fgsm),
            "pgd" => Ok(Condition::Pgd),
            "transfer" => Ok(Condition::Transfer),
            other => Err(LararError::InvalidConfig(format!("unknown condition `{other}`"))),
        }
    }
}

/// Mean and sample standard deviation over seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: 0.0, std: 0.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub model: ModelKind,
    pub condition: Condition,
    pub accuracy: Stat,
    pub precision: Stat,
    pub recall: Stat,
    pub f1: Stat,
    /// Present for attack conditions; the mean is exactly `1 − accuracy.mean`.
    pub asr: Option<Stat>,
    pub per_seed: Vec<Metrics>,
}

impl Cell {
    pub fn from_runs(model: ModelKind, condition: Condition, per_seed: Vec<Metrics>) -> Self {
        let pick = |f: fn(&Metrics) -> f64| Stat::of(&per_seed.iter().map(f).collect::<Vec<_>>());
        let accuracy = pick(|m| m.accuracy);
        let asr = condition.is_attack().then(|| Stat {
            mean: attack_success_rate(f64::NAN, accuracy.mean),
            std: accuracy.std,
        });
        Self {
            model,
            condition,
            accuracy,
            precision: pick(|m| m.precision),
            recall: pick(|m| m.recall),
            f1: pick(|m| m.f1),
            asr,
            per_seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationVariant {
    Base,
    LvsOnly,
    AdaptiveOnly,
    AuxiliaryOnly,
    #[serde(rename = "lvs+adaptive")]
    LvsAdaptive,
    All,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 6] = [
        AblationVariant::Base,
        AblationVariant::LvsOnly,
        AblationVariant::AdaptiveOnly,
        AblationVariant::AuxiliaryOnly,
        AblationVariant::LvsAdaptive,
        AblationVariant::All,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Base => "base",
            AblationVariant::LvsOnly => "lvs-only",
            AblationVariant::AdaptiveOnly => "adaptive-only",
            AblationVariant::AuxiliaryOnly => "auxiliary-only",
            AblationVariant::LvsAdaptive => "lvs+adaptive",
            AblationVariant::All => "all",
        }
    }

    /// The base variant is the Base ADVNN network itself; every other variant
    /// uses the auxiliary-headed architecture.
    pub fn kind(self) -> ModelKind {
        match self {
            AblationVariant::Base => ModelKind::BaseAdvnn,
            _ => ModelKind::Larar,
        }
    }

    pub fn components(self) -> Components {
        let base = Components::base_advnn();
        match self {
            AblationVariant::Base => base,
            AblationVariant::LvsOnly => Components {
                penalty: LayerPenalty::Lvs,
                ..base
            },
            AblationVariant::AdaptiveOnly => Components {
                penalty: LayerPenalty::Shift,
                adaptive_weights: true,
                ..base
            },
            AblationVariant::AuxiliaryOnly => Components { aux: true, ..base },
            AblationVariant::LvsAdaptive => Components {
                penalty: LayerPenalty::Lvs,
                adaptive_weights: true,
                ..base
            },
            AblationVariant::All => Components::larar(),
        }
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationVariant {
    type Err = LararError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| LararError::InvalidConfig(format!("unknown ablation variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: AblationVariant,
    pub pgd_accuracy: Stat,
    pub per_seed: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyExitStats {
    pub threshold: f64,
    /// Share of samples answered by an auxiliary head.
    pub exit_fraction: Stat,
    pub mean_macs: Stat,
    pub full_macs: u64,
    /// Label agreement with the full forward pass on exited samples.
    pub agreement: Stat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSeries {
    pub model: String,
    pub seed: u64,
    pub logs: Vec<EpochLog>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub seeds: Vec<u64>,
    pub attack: AttackConfig,
    pub cells: Vec<Cell>,
    pub ablation: Vec<AblationCell>,
    pub early_exit: Option<EarlyExitStats>,
    pub series: Vec<EpochSeries>,
}

impl EvalReport {
    pub fn cell(&self, model: ModelKind, condition: Condition) -> Option<&Cell> {
        self.cells.iter().find(|c| c.model == model && c.condition == condition)
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty() && self.ablation.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub train: TrainConfig,
    pub weights: LossWeights,
    pub attack: AttackConfig,
    /// Overrides for the transfer attack; `None` reuses `attack`.
    pub transfer: Option<AttackConfig>,
    pub models: Vec<ModelKind>,
    pub conditions: Vec<Condition>,
    pub seeds: Vec<u64>,
    pub early_exit_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            weights: LossWeights::default(),
            attack: AttackConfig::default(),
            transfer: None,
            models: ModelKind::ALL.to_vec(),
            conditions: Condition::ALL.to_vec(),
            seeds: (0..5).collect(),
            early_exit_threshold: DEFAULT_EXIT_THRESHOLD,
        }
    }
}

impl EvalConfig {
    fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(LararError::InvalidConfig("at least one seed is required".into()));
        }
        self.train.validate()?;
        self.weights.validate()?;
        self.attack.validate()?;
        Ok(())
    }

    fn seeded(&self, seed: u64) -> (TrainConfig, AttackConfig, AttackConfig) {
        let train = TrainConfig {
            seed,
            ..self.train.clone()
        };
        let attack = AttackConfig {
            seed,
            ..self.attack.clone()
        };
        let transfer = AttackConfig {
            seed,
            ..self.transfer.clone().unwrap_or_else(|| self.attack.clone())
        };
        (train, attack, transfer)
    }
}

/// Scores one trained model under the requested conditions.
pub fn evaluate_model(
    params: &NetworkParams,
    surrogate: Option<&NetworkParams>,
    splits: &Splits,
    conditions: &[Condition],
    attack: &AttackConfig,
    transfer: &AttackConfig,
) -> Result<Vec<(Condition, Metrics)>> {
    let x = &splits.test.x;
    let y = &splits.test.y;
    conditions
        .iter()
        .map(|&c| {
            let preds = match c {
                Condition::Clean => params.predict(x)?,
                Condition::Fgsm => params.predict(&fgsm(params, x, y, attack.epsilon)?)?,
                Condition::Pgd => params.predict(&pgd(params, x, y, attack)?)?,
                Condition::Transfer => {
                    let s = surrogate.ok_or_else(|| {
                        LararError::InvalidConfig("transfer condition needs a trained surrogate".into())
                    })?;
                    transfer_attack(s, params, x, y, transfer)?.predictions
                }
            };
            Ok((c, compute_metrics(&preds, y)?))
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e: LararError| e.in_cell(format!("{} ({})", params.kind, cond_list(conditions))))
}

fn cond_list(c: &[Condition]) -> String {
    c.iter().map(|c| c.label()).collect::<Vec<_>>().join("/")
}

struct SeedRun {
    metrics: Vec<(ModelKind, Vec<(Condition, Metrics)>)>,
    series: Vec<EpochSeries>,
    exit: Option<(f64, f64, f64)>,
    full_macs: u64,
}

/// Trains every requested model for every seed and fills the report grid.
pub fn run_comparison(splits: &Splits, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    if cfg.models.is_empty() || cfg.conditions.is_empty() {
        return Err(LararError::InvalidConfig("the report grid is empty".into()));
    }
    let needs_surrogate = cfg.conditions.contains(&Condition::Transfer);
    let runs: Vec<SeedRun> = cfg
        .seeds
        .par_iter()
        .map(|&seed| -> Result<SeedRun> {
            let (train_cfg, attack, transfer) = cfg.seeded(seed);
            let mut trained: Vec<(ModelKind, NetworkParams)> = Vec::new();
            let mut series = Vec::new();
            let mut kinds = cfg.models.clone();
            if needs_surrogate && !kinds.contains(&ModelKind::Vanilla) {
                kinds.insert(0, ModelKind::Vanilla);
            }
            for &kind in &kinds {
                info!("seed {seed}: training {kind}");
                let out = train(kind, &splits.train, &train_cfg, &cfg.weights)
                    .map_err(|e| e.in_cell(format!("train {kind} seed {seed}")))?;
                if cfg.models.contains(&kind) {
                    series.push(EpochSeries {
                        model: kind.as_str().into(),
                        seed,
                        logs: out.logs,
                    });
                }
                trained.push((kind, out.params));
            }
            let surrogate = trained.iter().find(|(k, _)| *k == ModelKind::Vanilla).map(|(_, p)| p.clone());
            let mut metrics = Vec::new();
            for (kind, params) in trained.iter().filter(|(k, _)| cfg.models.contains(k)) {
                let m = evaluate_model(params, surrogate.as_ref(), splits, &cfg.conditions, &attack, &transfer)
                    .map_err(|e| e.in_cell(format!("seed {seed}")))?;
                metrics.push((*kind, m));
            }
            let larar = trained.iter().find(|(k, _)| *k == ModelKind::Larar);
            let (exit, full_macs) = match larar {
                Some((_, p)) => (
                    Some(exit_summary(p, &splits.test.x, cfg.early_exit_threshold)?),
                    full_forward_macs(p),
                ),
                None => (None, 0),
            };
            Ok(SeedRun {
                metrics,
                series,
                exit,
                full_macs,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut cells = Vec::new();
    for &model in &cfg.models {
        for &condition in &cfg.conditions {
            let per_seed: Vec<Metrics> = runs
                .iter()
                .map(|r| {
                    r.metrics
                        .iter()
                        .find(|(k, _)| *k == model)
                        .and_then(|(_, ms)| ms.iter().find(|(c, _)| *c == condition))
                        .map(|(_, m)| *m)
                        .expect("every requested cell is evaluated")
                })
                .collect();
            cells.push(Cell::from_runs(model, condition, per_seed));
        }
    }
    let exits: Vec<(f64, f64, f64)> = runs.iter().filter_map(|r| r.exit).collect();
    let early_exit = (!exits.is_empty()).then(|| EarlyExitStats {
        threshold: cfg.early_exit_threshold,
        exit_fraction: Stat::of(&exits.iter().map(|e| e.0).collect::<Vec<_>>()),
        mean_macs: Stat::of(&exits.iter().map(|e| e.1).collect::<Vec<_>>()),
        full_macs: runs.iter().map(|r| r.full_macs).max().unwrap_or(0),
        agreement: Stat::of(&exits.iter().map(|e| e.2).collect::<Vec<_>>()),
    });
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        seeds: cfg.seeds.clone(),
        attack: cfg.attack.clone(),
        cells,
        ablation: Vec::new(),
        early_exit,
        series: runs.into_iter().flat_map(|r| r.series).collect(),
    })
}

/// Scores already trained models on the test split as a one-seed report.
/// `seed` drives the attack randomness. The transfer condition uses
/// `surrogate` and fails without one.
pub fn evaluate_trained(
    models: &[NetworkParams],
    surrogate: Option<&NetworkParams>,
    splits: &Splits,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<EvalReport> {
    cfg.attack.validate()?;
    if models.is_empty() || cfg.conditions.is_empty() {
        return Err(LararError::InvalidConfig("the report grid is empty".into()));
    }
    for (i, m) in models.iter().enumerate() {
        if models[..i].iter().any(|o| o.kind == m.kind) {
            return Err(LararError::InvalidConfig(format!("two {} models in one report", m.kind)));
        }
    }
    let (_, attack, transfer) = cfg.seeded(seed);
    let mut cells = Vec::new();
    for params in models {
        for (condition, m) in evaluate_model(params, surrogate, splits, &cfg.conditions, &attack, &transfer)? {
            cells.push(Cell::from_runs(params.kind, condition, vec![m]));
        }
    }
    let early_exit = match models.iter().find(|m| m.kind == ModelKind::Larar) {
        Some(p) => {
            let (fraction, macs, agreement) = exit_summary(p, &splits.test.x, cfg.early_exit_threshold)?;
            Some(EarlyExitStats {
                threshold: cfg.early_exit_threshold,
                exit_fraction: Stat::of(&[fraction]),
                mean_macs: Stat::of(&[macs]),
                full_macs: full_forward_macs(p),
                agreement: Stat::of(&[agreement]),
            })
        }
        None => None,
    };
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        seeds: vec![seed],
        attack: attack.clone(),
        cells,
        ablation: Vec::new(),
        early_exit,
        series: Vec::new(),
    })
}

/// `(exit fraction, mean MACs, agreement on exited samples)`.
pub fn exit_summary(params: &NetworkParams, x: &larar_autodiff::Tensor, threshold: f64) -> Result<(f64, f64, f64)> {
    let decisions = early_exit_infer(params, x, threshold)?;
    let full = params.predict(x)?;
    let n = decisions.len().max(1) as f64;
    let l = params.num_hidden();
    let exited: Vec<usize> = (0..decisions.len()).filter(|&i| decisions[i].exited_early(l)).collect();
    let agree = exited.iter().filter(|&&i| decisions[i].label == full[i]).count();
    let agreement = if exited.is_empty() {
        1.0
    } else {
        agree as f64 / exited.len() as f64
    };
    let macs = decisions.iter().map(|d| d.macs as f64).sum::<f64>() / n;
    Ok((exited.len() as f64 / n, macs, agreement))
}

/// Trains each named variant for every seed and records its PGD accuracy.
pub fn run_ablation(splits: &Splits, cfg: &EvalConfig, variants: &[AblationVariant]) -> Result<EvalReport> {
    cfg.validate()?;
    if variants.is_empty() {
        return Err(LararError::InvalidConfig("no ablation variants requested".into()));
    }
    let per_seed: Vec<Vec<(f64, EpochSeries)>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let (train_cfg, attack, _) = cfg.seeded(seed);
            variants
                .iter()
                .map(|&v| {
                    let params = NetworkParams::init(v.kind(), splits.train.dim(), seed)?;
                    let out = train_params(params, &splits.train, &train_cfg, &cfg.weights, v.components())
                        .map_err(|e| e.in_cell(format!("ablation {v} seed {seed}")))?;
                    let adv = pgd(&out.params, &splits.test.x, &splits.test.y, &attack)?;
                    let acc = compute_metrics(&out.params.predict(&adv)?, &splits.test.y)?.accuracy;
                    Ok((
                        acc,
                        EpochSeries {
                            model: v.name().into(),
                            seed,
                            logs: out.logs,
                        },
                    ))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let ablation = variants
        .iter()
        .enumerate()
        .map(|(i, &variant)| {
            let accs: Vec<f64> = per_seed.iter().map(|r| r[i].0).collect();
            AblationCell {
                variant,
                pgd_accuracy: Stat::of(&accs),
                per_seed: accs,
            }
        })
        .collect();
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        seeds: cfg.seeds.clone(),
        attack: cfg.attack.clone(),
        cells: Vec::new(),
        ablation,
        early_exit: None,
        series: per_seed.into_iter().flat_map(|r| r.into_iter().map(|(_, s)| s)).collect(),
    })
}
