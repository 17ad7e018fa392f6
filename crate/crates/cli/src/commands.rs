use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use larar::attacks::{fgsm, pgd};
use larar::checkpoint::Checkpoint;
use larar::data::{self, FeatureMatrix, Splits};
use larar::eval::{compute_metrics, evaluate_trained, run_ablation, run_comparison, Condition, EvalReport};
use larar::model::{ModelKind, NetworkParams, EVAL_CHUNK};
use larar::report::{emit_report, to_markdown, ReportFormat};
use larar::training::{epoch_csv, train};
use larar::vulnerability::{calibrate_thresholds, detect, CalibrationStats, DetectMode, LayerThreshold, ScoreKind};
use larar::Tensor;
use log::{info, warn};
use serde_json::json;

use crate::args::{Cli, Command};
use crate::config::{DataSource, RunConfig, SplitName};
use crate::run::RunDir;
use crate::UsageError;

pub fn dispatch(cli: Cli) -> Result<()> {
    let common = cli.command.common();
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    cli.command.apply(&mut cfg);
    if common.print_config {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    cfg.data_source()?;
    match cli.command {
        Command::Train(_) => cmd_train(&cfg),
        Command::Evaluate(_) => cmd_evaluate(&cfg),
        Command::Attack(_) => cmd_attack(&cfg),
        Command::Ablate(_) => cmd_ablate(&cfg),
        Command::Detect(_) => cmd_detect(&cfg),
        Command::Ingest(_) => cmd_ingest(&cfg),
    }
}

fn csv_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x.eq_ignore_ascii_case("csv")))
                .collect();
            if found.is_empty() {
                bail!("no CSV files in {}", p.display());
            }
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn load_data(cfg: &RunConfig) -> Result<Splits> {
    let splits = match cfg.data_source()? {
        DataSource::Cache(p) => data::load_splits(p)?,
        DataSource::Csv(paths) => {
            let files = csv_files(paths)?;
            let raw = data::ingest_csv_files(&files, &cfg.data.schema)?;
            info!("read {} rows from {} file(s)", raw.len(), files.len());
            data::preprocess(&raw, &cfg.split)?
        }
        DataSource::Synth(spec) => data::preprocess(&spec.generate(cfg.split.seed), &cfg.split)?,
    };
    info!(
        "splits: train {}, calibration {}, test {}, {} features",
        splits.train.len(),
        splits.calibration.len(),
        splits.test.len(),
        splits.train.dim()
    );
    Ok(splits)
}

fn pick(splits: &Splits, which: SplitName) -> &FeatureMatrix {
    match which {
        SplitName::Train => &splits.train,
        SplitName::Calibration => &splits.calibration,
        SplitName::Test => &splits.test,
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path, None).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn single_checkpoint(cfg: &RunConfig) -> Result<Checkpoint> {
    match cfg.run.checkpoints.as_slice() {
        [p] => load_checkpoint(p),
        [] => Err(UsageError(format!("{} needs --checkpoint FILE", cfg.run.command)).into()),
        _ => Err(UsageError(format!("{} takes exactly one checkpoint", cfg.run.command)).into()),
    }
}

fn emit(dir: &RunDir, report: &EvalReport, formats: &[ReportFormat]) -> Result<()> {
    for &f in formats {
        let written = match f {
            ReportFormat::Json => emit_report(report, f, &dir.file("report.json"))?,
            ReportFormat::Markdown => emit_report(report, f, &dir.file("report.md"))?,
            ReportFormat::Csv if report.series.is_empty() => Vec::new(),
            ReportFormat::Csv => emit_report(report, f, &dir.file("series"))?,
        };
        for p in written {
            info!("wrote {}", p.display());
        }
    }
    print!("{}", to_markdown(report)?);
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let splits = load_data(cfg)?;
    let dir = RunDir::create(cfg)?;
    let out = train(cfg.run.model, &splits.train, &cfg.train, &cfg.loss)?;
    let calibration = match calibrate_thresholds(
        &out.params,
        &splits.calibration.x,
        &cfg.attack,
        cfg.detect.k,
        cfg.detect.lambda,
    ) {
        Ok(c) => Some(c),
        Err(e) => {
            warn!("checkpoint saved without detection thresholds: {e}");
            None
        }
    };
    let test = compute_metrics(&out.params.predict(&splits.test.x)?, &splits.test.y)?;
    let summary = json!({
        "model": cfg.run.model,
        "epochs": out.logs.len(),
        "test": test,
        "layer_weights": out.params.layer_weights(),
        "calibrated": calibration.is_some(),
    });
    let ckpt = Checkpoint {
        params: out.params,
        calibration,
    };
    let path = dir.file("model.larar");
    ckpt.save(&path)?;
    dir.write("epochs.csv", &epoch_csv(&out.logs))?;
    dir.write("summary.json", &format!("{}\n", serde_json::to_string_pretty(&summary)?))?;
    info!("test accuracy {:.4}", test.accuracy);
    println!("{}", path.display());
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig) -> Result<()> {
    if cfg.run.compare {
        if !cfg.run.checkpoints.is_empty() {
            return Err(UsageError("--compare trains its own models; drop --checkpoint".into()).into());
        }
        let splits = load_data(cfg)?;
        let dir = RunDir::create(cfg)?;
        let report = run_comparison(&splits, &cfg.eval_config())?;
        return emit(&dir, &report, &cfg.run.formats);
    }
    if cfg.run.checkpoints.is_empty() {
        return Err(UsageError("evaluate needs --checkpoint FILE or --compare".into()).into());
    }
    let mut models: Vec<NetworkParams> = cfg
        .run
        .checkpoints
        .iter()
        .map(|p| load_checkpoint(p).map(|c| c.params))
        .collect::<Result<_>>()?;
    models.sort_by_key(|m| m.kind);
    let surrogate = match &cfg.run.surrogate {
        Some(p) => Some(load_checkpoint(p)?.params),
        None => models.iter().find(|m| m.kind == ModelKind::Vanilla).cloned(),
    };
    let mut eval = cfg.eval_config();
    if surrogate.is_none() && eval.conditions.contains(&Condition::Transfer) {
        warn!("no vanilla surrogate given; skipping the transfer condition");
        eval.conditions.retain(|&c| c != Condition::Transfer);
    }
    let splits = load_data(cfg)?;
    let dir = RunDir::create(cfg)?;
    let report = evaluate_trained(&models, surrogate.as_ref(), &splits, &eval, cfg.attack.seed)?;
    emit(&dir, &report, &cfg.run.formats)
}

fn perturb(
    params: &NetworkParams,
    surrogate: Option<&NetworkParams>,
    x: &Tensor,
    y: &[u8],
    cfg: &RunConfig,
) -> Result<Tensor> {
    Ok(match cfg.run.method {
        Condition::Clean => x.clone(),
        Condition::Fgsm => fgsm(params, x, y, cfg.attack.epsilon)?,
        Condition::Pgd => pgd(params, x, y, &cfg.attack)?,
        Condition::Transfer => {
            let s = surrogate.ok_or_else(|| UsageError("the transfer attack needs --surrogate FILE".into()))?;
            pgd(s, x, y, &cfg.attack)?
        }
    })
}

fn write_features(path: &Path, columns: &[String], x: &Tensor, y: &[u8]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(columns.iter().map(String::as_str).chain(["label"]))?;
    for (i, &label) in y.iter().enumerate() {
        let mut record: Vec<String> = x.row(i).iter().map(f64::to_string).collect();
        record.push(label.to_string());
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_attack(cfg: &RunConfig) -> Result<()> {
    if cfg.run.method == Condition::Clean {
        return Err(UsageError("attack needs --method fgsm, pgd or transfer".into()).into());
    }
    let params = single_checkpoint(cfg)?.params;
    let surrogate = match &cfg.run.surrogate {
        Some(p) => Some(load_checkpoint(p)?.params),
        None => None,
    };
    if cfg.run.method == Condition::Transfer && surrogate.is_none() {
        return Err(UsageError("the transfer attack needs --surrogate FILE".into()).into());
    }
    cfg.attack.validate()?;
    let splits = load_data(cfg)?;
    let rows = pick(&splits, cfg.run.split);
    let dir = RunDir::create(cfg)?;
    let x_adv = perturb(&params, surrogate.as_ref(), &rows.x, &rows.y, cfg)?;
    let clean = compute_metrics(&params.predict(&rows.x)?, &rows.y)?;
    let adv = compute_metrics(&params.predict(&x_adv)?, &rows.y)?;
    let linf = x_adv.zip_map(&rows.x, |a, b| a - b).max_abs();
    let names: Vec<String> = rows.columns.iter().map(|c| c.name.clone()).collect();
    write_features(&dir.file("adversarial.csv"), &names, &x_adv, &rows.y)?;
    let summary = json!({
        "model": params.kind,
        "method": cfg.run.method,
        "split": cfg.run.split,
        "rows": rows.len(),
        "epsilon": cfg.attack.epsilon,
        "max_linf": linf,
        "clean_accuracy": clean.accuracy,
        "adversarial_accuracy": adv.accuracy,
        "attack_success_rate": 1.0 - adv.accuracy,
    });
    let text = format!("{}\n", serde_json::to_string_pretty(&summary)?);
    dir.write("summary.json", &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig) -> Result<()> {
    let splits = load_data(cfg)?;
    let dir = RunDir::create(cfg)?;
    let report = run_ablation(&splits, &cfg.eval_config(), &cfg.eval.variants)?;
    emit(&dir, &report, &cfg.run.formats)
}

/// Thresholds for the requested `k` and `λ`, recomputed from the stored
/// calibration moments when they differ from the ones used at training.
fn rethreshold(stats: &CalibrationStats, k: f64, lambda: f64) -> CalibrationStats {
    let mut s = stats.clone();
    if s.k != k || s.lambda != lambda {
        info!("detection thresholds recomputed for k = {k}, lambda = {lambda}");
        let redo = |t: &mut LayerThreshold| t.tau = LayerThreshold::threshold(t.mu, t.sigma, t.max, k, lambda);
        s.proxy.iter_mut().for_each(redo);
        s.paired.iter_mut().for_each(redo);
        s.k = k;
        s.lambda = lambda;
    }
    s
}

fn cmd_detect(cfg: &RunConfig) -> Result<()> {
    if cfg.run.method == Condition::Transfer {
        return Err(UsageError("detect perturbs rows with --attack clean, fgsm or pgd".into()).into());
    }
    let ckpt = single_checkpoint(cfg)?;
    let stats = rethreshold(ckpt.calibration()?, cfg.detect.k, cfg.detect.lambda);
    cfg.attack.validate()?;
    let splits = load_data(cfg)?;
    let rows = pick(&splits, cfg.run.split);
    let dir = RunDir::create(cfg)?;
    let params = &ckpt.params;

    let mut file = std::io::BufWriter::new(
        std::fs::File::create(dir.file("verdicts.jsonl")).context("creating verdicts.jsonl")?,
    );
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let mut flagged = 0usize;
    let mut per_layer = vec![0usize; params.num_hidden()];
    for start in (0..rows.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(rows.len());
        let x = rows.x.slice_rows(start, end);
        let y = &rows.y[start..end];
        let input = perturb(params, None, &x, y, cfg)?;
        let mode = match cfg.detect.mode {
            ScoreKind::Proxy => DetectMode::Proxy,
            ScoreKind::Paired => DetectMode::Paired(&x),
        };
        for (i, v) in detect(params, &input, &stats, mode)?.into_iter().enumerate() {
            flagged += usize::from(v.flagged);
            for &l in &v.triggering {
                per_layer[l] += 1;
            }
            let line = json!({
                "index": start + i,
                "label": y[i],
                "flagged": v.flagged,
                "triggering": v.triggering,
                "scores": v.scores,
            })
            .to_string();
            writeln!(out, "{line}")?;
            writeln!(file, "{line}")?;
        }
    }
    out.flush()?;
    file.flush()?;
    let summary = json!({
        "model": params.kind,
        "mode": cfg.detect.mode,
        "input": cfg.run.method,
        "split": cfg.run.split,
        "rows": rows.len(),
        "flagged": flagged,
        "flagged_per_layer": per_layer,
        "thresholds": stats.thresholds(cfg.detect.mode),
    });
    dir.write("summary.json", &format!("{}\n", serde_json::to_string_pretty(&summary)?))?;
    info!("flagged {flagged} of {} rows", rows.len());
    Ok(())
}

fn cmd_ingest(cfg: &RunConfig) -> Result<()> {
    if let DataSource::Cache(_) = cfg.data_source()? {
        return Err(UsageError("ingest reads --data or --synth, not an existing cache".into()).into());
    }
    let splits = load_data(cfg)?;
    let dir = RunDir::create(cfg)?;
    let path = dir.file("splits.bin");
    data::save_splits(&splits, &path)?;
    dir.write(
        "columns.json",
        &format!("{}\n", serde_json::to_string_pretty(&splits.train.columns)?),
    )?;
    let counts = |m: &FeatureMatrix| {
        let [neg, pos] = m.class_counts();
        json!({ "rows": m.len(), "normal": neg, "attack": pos })
    };
    let summary = json!({
        "features": splits.train.dim(),
        "train": counts(&splits.train),
        "calibration": counts(&splits.calibration),
        "test": counts(&splits.test),
    });
    dir.write("summary.json", &format!("{}\n", serde_json::to_string_pretty(&summary)?))?;
    println!("{}", path.display());
    Ok(())
}
