use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use larar::eval::{AblationVariant, Condition};
use larar::model::ModelKind;
use larar::report::ReportFormat;
use larar::vulnerability::ScoreKind;

use crate::config::{RunConfig, SplitName};

#[derive(Debug, Parser)]
#[command(name = "larar", version, about = "Layer-wise adversarial robustness experiments for intrusion detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and save a calibrated checkpoint.
    Train(TrainCmd),
    /// Score checkpoints, or train and compare every model over seeds.
    Evaluate(EvaluateCmd),
    /// Craft adversarial examples against a checkpoint.
    Attack(AttackCmd),
    /// Train the ablation variants and compare their PGD accuracy.
    Ablate(AblateCmd),
    /// Stream per-sample detection verdicts as JSON lines.
    Detect(DetectCmd),
    /// Preprocess CSV files into a split cache.
    Ingest(IngestCmd),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Evaluate(_) => "evaluate",
            Command::Attack(_) => "attack",
            Command::Ablate(_) => "ablate",
            Command::Detect(_) => "detect",
            Command::Ingest(_) => "ingest",
        }
    }
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML config file; flags override its values.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// CSV file or directory of CSV files (repeatable).
    #[arg(long = "data", value_name = "PATH")]
    pub data: Vec<PathBuf>,
    /// Synthetic dataset, e.g. `n=2000,d=10,sep=6`.
    #[arg(long, value_name = "SPEC")]
    pub synth: Option<String>,
    /// Split cache written by `ingest`.
    #[arg(long, value_name = "FILE")]
    pub splits: Option<PathBuf>,
    /// Name of the label column.
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    /// Base directory for run directories [env: LARAR_OUTPUT_DIR].
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Run directory name; defaults to the command and a config hash.
    #[arg(long)]
    pub run_name: Option<String>,
    /// Report formats, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub format: Vec<ReportFormat>,
    /// Print the resolved config and exit.
    #[arg(long)]
    pub print_config: bool,
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    /// Final training attack budget.
    #[arg(long)]
    pub epsilon_max: Option<f64>,
    #[arg(long)]
    pub pgd_iterations: Option<usize>,
    #[arg(long)]
    pub pgd_step: Option<f64>,
    /// Training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train at the full budget from the first epoch.
    #[arg(long)]
    pub no_curriculum: bool,
    #[arg(long)]
    pub lambda_aux: Option<f64>,
    #[arg(long)]
    pub lambda_ga: Option<f64>,
    #[arg(long)]
    pub lambda_fs: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
}

#[derive(Debug, Args)]
pub struct AttackFlags {
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub attack_seed: Option<u64>,
    /// Start PGD at the clean point instead of a random point in the ball.
    #[arg(long)]
    pub no_random_init: bool,
}

#[derive(Debug, Args)]
pub struct CalibrationFlags {
    /// Spread multiplier of the detection threshold.
    #[arg(long)]
    pub k: Option<f64>,
    /// Multiplier on the calibration maximum.
    #[arg(long)]
    pub lambda: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainCmd {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: Option<ModelKind>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub attack: AttackFlags,
    #[command(flatten)]
    pub calibration: CalibrationFlags,
}

#[derive(Debug, Args)]
pub struct EvaluateCmd {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint to score (repeatable).
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Vec<PathBuf>,
    /// Source model for the transfer attack.
    #[arg(long, value_name = "FILE")]
    pub surrogate: Option<PathBuf>,
    /// Train every model for every seed and compare them.
    #[arg(long)]
    pub compare: bool,
    #[arg(long, value_delimiter = ',')]
    pub models: Vec<ModelKind>,
    #[arg(long, value_delimiter = ',')]
    pub conditions: Vec<Condition>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Auxiliary-head confidence needed to exit early.
    #[arg(long)]
    pub exit_threshold: Option<f64>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub attack: AttackFlags,
}

#[derive(Debug, Args)]
pub struct AttackCmd {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// fgsm, pgd or transfer.
    #[arg(long)]
    pub method: Option<Condition>,
    #[arg(long, value_name = "FILE")]
    pub surrogate: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub split: Option<SplitName>,
    #[command(flatten)]
    pub attack: AttackFlags,
}

#[derive(Debug, Args)]
pub struct AblateCmd {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<AblationVariant>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub attack: AttackFlags,
}

#[derive(Debug, Args)]
pub struct DetectCmd {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// proxy (no reference needed) or paired (clean rows as reference).
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<ScoreKind>,
    /// Perturbation applied to the rows before detection: clean, fgsm or pgd.
    #[arg(long = "attack")]
    pub method: Option<Condition>,
    #[arg(long, value_enum)]
    pub split: Option<SplitName>,
    #[command(flatten)]
    pub attack: AttackFlags,
    #[command(flatten)]
    pub calibration: CalibrationFlags,
}

#[derive(Debug, Args)]
pub struct IngestCmd {
    #[command(flatten)]
    pub common: Common,
    /// Column to drop before encoding (repeatable).
    #[arg(long, value_name = "NAME")]
    pub drop: Vec<String>,
    /// Column to treat as categorical (repeatable).
    #[arg(long, value_name = "NAME")]
    pub categorical: Vec<String>,
}

fn parse_mode(s: &str) -> Result<ScoreKind, String> {
    match s.to_ascii_lowercase().as_str() {
        "proxy" => Ok(ScoreKind::Proxy),
        "paired" => Ok(ScoreKind::Paired),
        other => Err(format!("unknown detection mode `{other}` (proxy or paired)")),
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl Common {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if !self.data.is_empty() || self.synth.is_some() || self.splits.is_some() {
            cfg.data.paths = self.data.clone();
            cfg.data.synth = self.synth.clone();
            cfg.data.splits = self.splits.clone();
        }
        set(&mut cfg.data.schema.label, self.label.clone());
        set(&mut cfg.split.seed, self.split_seed);
        set(&mut cfg.split.train_fraction, self.train_fraction);
        if self.out.is_some() {
            cfg.run.output_dir = self.out.clone();
        }
        if self.run_name.is_some() {
            cfg.run.run_name = self.run_name.clone();
        }
        if !self.format.is_empty() {
            cfg.run.formats = self.format.clone();
        }
    }
}

impl TrainFlags {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let t = &mut cfg.train;
        set(&mut t.epochs, self.epochs);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.learning_rate, self.learning_rate);
        set(&mut t.epsilon_max, self.epsilon_max);
        set(&mut t.pgd_iterations, self.pgd_iterations);
        set(&mut t.pgd_step, self.pgd_step);
        set(&mut t.seed, self.seed);
        if self.no_curriculum {
            t.curriculum = false;
        }
        let l = &mut cfg.loss;
        set(&mut l.lambda_aux, self.lambda_aux);
        set(&mut l.lambda_ga, self.lambda_ga);
        set(&mut l.lambda_fs, self.lambda_fs);
        set(&mut l.beta, self.beta);
    }
}

impl AttackFlags {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let a = &mut cfg.attack;
        set(&mut a.epsilon, self.epsilon);
        set(&mut a.alpha, self.alpha);
        set(&mut a.iterations, self.iterations);
        set(&mut a.seed, self.attack_seed);
        if self.no_random_init {
            a.random_init = false;
        }
    }
}

impl CalibrationFlags {
    pub fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.detect.k, self.k);
        set(&mut cfg.detect.lambda, self.lambda);
    }
}

impl Command {
    pub fn common(&self) -> &Common {
        match self {
            Command::Train(c) => &c.common,
            Command::Evaluate(c) => &c.common,
            Command::Attack(c) => &c.common,
            Command::Ablate(c) => &c.common,
            Command::Detect(c) => &c.common,
            Command::Ingest(c) => &c.common,
        }
    }

    /// Layers the command's flags over `cfg`.
    pub fn apply(&self, cfg: &mut RunConfig) {
        cfg.run.command = self.name().to_string();
        self.common().apply(cfg);
        match self {
            Command::Train(c) => {
                set(&mut cfg.run.model, c.model);
                c.train.apply(cfg);
                c.attack.apply(cfg);
                c.calibration.apply(cfg);
            }
            Command::Evaluate(c) => {
                if !c.checkpoint.is_empty() {
                    cfg.run.checkpoints = c.checkpoint.clone();
                }
                if c.surrogate.is_some() {
                    cfg.run.surrogate = c.surrogate.clone();
                }
                if c.compare {
                    cfg.run.compare = true;
                }
                if !c.models.is_empty() {
                    cfg.eval.models = c.models.clone();
                }
                if !c.conditions.is_empty() {
                    cfg.eval.conditions = c.conditions.clone();
                }
                if !c.seeds.is_empty() {
                    cfg.eval.seeds = c.seeds.clone();
                }
                set(&mut cfg.detect.early_exit_threshold, c.exit_threshold);
                c.train.apply(cfg);
                c.attack.apply(cfg);
            }
            Command::Attack(c) => {
                if let Some(p) = &c.checkpoint {
                    cfg.run.checkpoints = vec![p.clone()];
                }
                set(&mut cfg.run.method, c.method);
                if c.surrogate.is_some() {
                    cfg.run.surrogate = c.surrogate.clone();
                }
                set(&mut cfg.run.split, c.split);
                c.attack.apply(cfg);
            }
            Command::Ablate(c) => {
                if !c.variants.is_empty() {
                    cfg.eval.variants = c.variants.clone();
                }
                if !c.seeds.is_empty() {
                    cfg.eval.seeds = c.seeds.clone();
                }
                c.train.apply(cfg);
                c.attack.apply(cfg);
            }
            Command::Detect(c) => {
                if let Some(p) = &c.checkpoint {
                    cfg.run.checkpoints = vec![p.clone()];
                }
                set(&mut cfg.detect.mode, c.mode);
                set(&mut cfg.run.method, c.method);
                set(&mut cfg.run.split, c.split);
                c.attack.apply(cfg);
                c.calibration.apply(cfg);
            }
            Command::Ingest(c) => {
                if !c.drop.is_empty() {
                    cfg.data.schema.drop = c.drop.clone();
                }
                if !c.categorical.is_empty() {
                    cfg.data.schema.categorical = c.categorical.clone();
                }
            }
        }
    }
}
