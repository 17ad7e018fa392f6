//! Resolved run configuration.
//!
//! A run is described by one TOML file with a section per concern. Values
//! resolve in three layers: built-in defaults, then the `--config` file,
//! then command-line flags. Sections and keys:
//!
//! ```toml
//! [run]      command, model, checkpoints, surrogate, method, input, split, output_dir, run_name, formats
//! [data]     paths, synth, splits, plus [data.schema] label/drop/categorical/numeric
//! [split]    train_fraction, stratified, calibration_fraction, seed
//! [train]    epochs, batch_size, learning_rate, epsilon_max, pgd_iterations, pgd_step, seed, curriculum, weight_clamp
//! [loss]     lambda_aux, lambda_ga, lambda_fs, beta
//! [attack]   epsilon, alpha, iterations, random_init, seed
//! [detect]   k, lambda, mode, early_exit_threshold
//! [eval]     models, conditions, seeds, variants
//! ```

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use larar::attacks::AttackConfig;
use larar::data::{SchemaHints, SplitSpec, SynthSpec};
use larar::eval::{AblationVariant, Condition, EvalConfig};
use larar::losses::LossWeights;
use larar::model::ModelKind;
use larar::report::ReportFormat;
use larar::training::TrainConfig;
use larar::vulnerability::{ScoreKind, DEFAULT_EXIT_THRESHOLD, DEFAULT_K, DEFAULT_LAMBDA};
use serde::{Deserialize, Serialize};

use crate::UsageError;

pub const OUTPUT_DIR_ENV: &str = "LARAR_OUTPUT_DIR";
pub const DEFAULT_OUTPUT_DIR: &str = "runs";

/// Which rows of the preprocessed data a command works on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Calibration,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub command: String,
    pub model: ModelKind,
    pub checkpoints: Vec<PathBuf>,
    pub surrogate: Option<PathBuf>,
    /// Attack applied by `attack`, or to the inputs of `detect`.
    pub method: Condition,
    /// `evaluate` trains every model per seed instead of loading checkpoints.
    pub compare: bool,
    pub split: SplitName,
    pub output_dir: Option<PathBuf>,
    pub run_name: Option<String>,
    pub formats: Vec<ReportFormat>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            command: String::new(),
            model: ModelKind::Larar,
            checkpoints: Vec::new(),
            surrogate: None,
            method: Condition::Pgd,
            compare: false,
            split: SplitName::Test,
            output_dir: None,
            run_name: None,
            formats: vec![ReportFormat::Json, ReportFormat::Markdown, ReportFormat::Csv],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// CSV files or directories of CSV files, concatenated in order.
    pub paths: Vec<PathBuf>,
    pub synth: Option<String>,
    /// A split cache written by `ingest`.
    pub splits: Option<PathBuf>,
    pub schema: SchemaHints,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectSection {
    pub k: f64,
    pub lambda: f64,
    pub mode: ScoreKind,
    pub early_exit_threshold: f64,
}

impl Default for DetectSection {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            lambda: DEFAULT_LAMBDA,
            mode: ScoreKind::Proxy,
            early_exit_threshold: DEFAULT_EXIT_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub models: Vec<ModelKind>,
    pub conditions: Vec<Condition>,
    pub seeds: Vec<u64>,
    pub variants: Vec<AblationVariant>,
}

impl Default for EvalSection {
    fn default() -> Self {
        let d = EvalConfig::default();
        Self {
            models: d.models,
            conditions: d.conditions,
            seeds: d.seeds,
            variants: AblationVariant::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub split: SplitSpec,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub attack: AttackConfig,
    pub detect: DetectSection,
    pub eval: EvalSection,
}

/// Where the rows come from, after resolution.
#[derive(Debug)]
pub enum DataSource<'a> {
    Csv(&'a [PathBuf]),
    Synth(SynthSpec),
    Cache(&'a Path),
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| UsageError(format!("config {}: {e}", path.display())).into())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing the resolved config")
    }

    pub fn data_source(&self) -> Result<DataSource<'_>> {
        let d = &self.data;
        let given = usize::from(!d.paths.is_empty()) + usize::from(d.synth.is_some()) + usize::from(d.splits.is_some());
        if given > 1 {
            return Err(UsageError("give only one of --data, --synth and --splits".into()).into());
        }
        if let Some(p) = &d.splits {
            return Ok(DataSource::Cache(p));
        }
        if let Some(s) = &d.synth {
            let spec: SynthSpec = s.parse().map_err(|e| UsageError(format!("{e}")))?;
            return Ok(DataSource::Synth(spec));
        }
        if !d.paths.is_empty() {
            return Ok(DataSource::Csv(&d.paths));
        }
        Err(UsageError("no dataset: pass --data PATH, --synth n=..,d=..,sep=.. or --splits CACHE".into()).into())
    }

    /// Base directory for run directories: the flag or file value, then the
    /// environment variable, then `runs`.
    pub fn output_base(&self) -> PathBuf {
        self.run.output_dir.clone().unwrap_or_else(|| {
            std::env::var_os(OUTPUT_DIR_ENV)
                .filter(|v| !v.is_empty())
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
        })
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            train: self.train.clone(),
            weights: self.loss.clone(),
            attack: self.attack.clone(),
            transfer: None,
            models: self.eval.models.clone(),
            conditions: self.eval.conditions.clone(),
            seeds: self.eval.seeds.clone(),
            early_exit_threshold: self.detect.early_exit_threshold,
        }
    }

    pub fn seeds_summary(&self) -> String {
        let eval: Vec<String> = self.eval.seeds.iter().map(u64::to_string).collect();
        format!(
            "split {}\ntrain {}\nattack {}\neval {}\n",
            self.split.seed,
            self.train.seed,
            self.attack.seed,
            eval.join(",")
        )
    }
}
