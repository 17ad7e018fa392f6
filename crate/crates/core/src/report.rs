//! Report rendering: schema-versioned JSON, markdown tables and per-run
//! epoch-series CSV files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{LararError, Result};
use crate::eval::{Cell, Condition, EvalReport, Stat};
use crate::model::ModelKind;
use crate::training::epoch_csv;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Markdown,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = LararError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(ReportFormat::Json),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(LararError::InvalidConfig(format!("unknown report format `{other}`"))),
        }
    }
}

pub fn to_json(report: &EvalReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report).map_err(|e| LararError::Serialization(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn from_json(s: &str) -> Result<EvalReport> {
    let report: EvalReport = serde_json::from_str(s).map_err(|e| LararError::Serialization(e.to_string()))?;
    if report.schema_version != crate::eval::REPORT_SCHEMA_VERSION {
        return Err(LararError::VersionMismatch {
            found: report.schema_version,
            supported: crate::eval::REPORT_SCHEMA_VERSION,
        });
    }
    Ok(report)
}

fn stat(s: &Stat, seeds: usize) -> String {
    if seeds > 1 {
        format!("{:.4} ± {:.4}", s.mean, s.std)
    } else {
        format!("{:.4}", s.mean)
    }
}

fn models(report: &EvalReport) -> Vec<ModelKind> {
    let mut out = Vec::new();
    for c in &report.cells {
        if !out.contains(&c.model) {
            out.push(c.model);
        }
    }
    out
}

fn conditions(report: &EvalReport) -> Vec<Condition> {
    Condition::ALL
        .into_iter()
        .filter(|c| report.cells.iter().any(|cell| cell.condition == *c))
        .collect()
}

fn row(cells: impl IntoIterator<Item = String>) -> String {
    let mut s = String::from("|");
    for c in cells {
        s.push(' ');
        s.push_str(&c);
        s.push_str(" |");
    }
    s.push('\n');
    s
}

fn rule(n: usize) -> String {
    row((0..n).map(|i| if i == 0 { "---".to_string() } else { "---:".to_string() }))
}

pub fn to_markdown(report: &EvalReport) -> Result<String> {
    if report.is_empty() {
        return Err(LararError::EmptyInput("report grid is empty"));
    }
    let seeds = report.seeds.len();
    let mut md = String::from("# Evaluation report\n\n");
    let seed_list: Vec<String> = report.seeds.iter().map(u64::to_string).collect();
    let a = &report.attack;
    let _ = writeln!(
        md,
        "Seeds: {}. Attack budget {} with {} PGD steps of size {}.\n",
        seed_list.join(", "),
        a.epsilon,
        a.iterations,
        a.alpha
    );
    if seeds > 1 {
        md.push_str("Values are mean ± sample standard deviation over seeds.\n\n");
    }

    let models = models(report);
    let conds = conditions(report);
    let get = |m: ModelKind, c: Condition| -> Option<&Cell> { report.cell(m, c) };
    let paired = models.contains(&ModelKind::Larar) && models.contains(&ModelKind::BaseAdvnn);

    if !report.cells.is_empty() {
        md.push_str("## Accuracy\n\n");
        md.push_str(&row(std::iter::once("Method".to_string()).chain(conds.iter().map(|c| c.label().to_string()))));
        md.push_str(&rule(conds.len() + 1));
        for &m in &models {
            md.push_str(&row(std::iter::once(m.display_name().to_string()).chain(
                conds.iter().map(|&c| get(m, c).map_or("-".into(), |cell| stat(&cell.accuracy, seeds))),
            )));
        }
        if paired {
            md.push_str(&row(std::iter::once("Improvement".to_string()).chain(conds.iter().map(|&c| {
                if c == Condition::Clean {
                    return "--".into();
                }
                match (get(ModelKind::Larar, c), get(ModelKind::BaseAdvnn, c)) {
                    (Some(l), Some(b)) if b.accuracy.mean > 0.0 => {
                        format!("{:+.2}%", (l.accuracy.mean / b.accuracy.mean - 1.0) * 100.0)
                    }
                    _ => "-".into(),
                }
            }))));
        }
        md.push('\n');

        let attacks: Vec<Condition> = conds.iter().copied().filter(|c| c.is_attack()).collect();
        if !attacks.is_empty() {
            md.push_str("## Attack success rate\n\n");
            md.push_str(&row(std::iter::once("Method".to_string()).chain(attacks.iter().map(|c| c.label().to_string()))));
            md.push_str(&rule(attacks.len() + 1));
            for &m in &models {
                md.push_str(&row(std::iter::once(m.display_name().to_string()).chain(attacks.iter().map(|&c| {
                    get(m, c)
                        .and_then(|cell| cell.asr)
                        .map_or("-".into(), |s| format!("{:.2}%", s.mean * 100.0))
                }))));
            }
            if paired {
                md.push_str(&row(std::iter::once("Reduction vs Base".to_string()).chain(attacks.iter().map(|&c| {
                    match (
                        get(ModelKind::Larar, c).and_then(|x| x.asr),
                        get(ModelKind::BaseAdvnn, c).and_then(|x| x.asr),
                    ) {
                        (Some(l), Some(b)) => format!("{:+.2} pp", (b.mean - l.mean) * 100.0),
                        _ => "-".into(),
                    }
                }))));
            }
            md.push('\n');
        }

        let detail: Vec<Condition> = conds.iter().copied().filter(|&c| c != Condition::Transfer).collect();
        md.push_str("## Detailed metrics\n\n");
        md.push_str(&row(
            ["Method".to_string(), "Metric".to_string()]
                .into_iter()
                .chain(detail.iter().map(|c| c.label().to_string())),
        ));
        md.push_str(&rule(detail.len() + 2));
        for &m in &models {
            for (i, (name, pick)) in [
                ("Precision", (|c: &Cell| c.precision) as fn(&Cell) -> Stat),
                ("Recall", |c: &Cell| c.recall),
                ("F1", |c: &Cell| c.f1),
            ]
            .into_iter()
            .enumerate()
            {
                let label = if i == 0 { m.display_name().to_string() } else { String::new() };
                md.push_str(&row([label, name.to_string()].into_iter().chain(
                    detail.iter().map(|&c| get(m, c).map_or("-".into(), |cell| stat(&pick(cell), seeds))),
                )));
            }
        }
        md.push('\n');
    }

    if !report.ablation.is_empty() {
        md.push_str("## Ablation\n\n");
        md.push_str(&row(["Variant".to_string(), "PGD accuracy".to_string()]));
        md.push_str(&rule(2));
        for cell in &report.ablation {
            md.push_str(&row([cell.variant.name().to_string(), stat(&cell.pgd_accuracy, seeds)]));
        }
        md.push('\n');
    }

    if let Some(e) = &report.early_exit {
        md.push_str("## Early exit\n\n");
        md.push_str(&row(
            ["Threshold", "Exit fraction", "Mean MACs", "Full MACs", "Agreement"].map(str::to_string),
        ));
        md.push_str(&rule(5));
        md.push_str(&row([
            format!("{}", e.threshold),
            stat(&e.exit_fraction, seeds),
            format!("{:.1}", e.mean_macs.mean),
            e.full_macs.to_string(),
            stat(&e.agreement, seeds),
        ]));
        md.push('\n');
    }
    Ok(md)
}

/// Writes the report. JSON and markdown go to `path` as a file; CSV writes
/// one epoch-series file per trained model and seed into the directory
/// `path` and returns their paths.
pub fn emit_report(report: &EvalReport, format: ReportFormat, path: &Path) -> Result<Vec<PathBuf>> {
    if report.is_empty() {
        return Err(LararError::EmptyInput("report grid is empty"));
    }
    let write = |p: &Path, s: &str| std::fs::write(p, s).map_err(|e| LararError::io(p, e));
    match format {
        ReportFormat::Json => {
            write(path, &to_json(report)?)?;
            Ok(vec![path.to_path_buf()])
        }
        ReportFormat::Markdown => {
            write(path, &to_markdown(report)?)?;
            Ok(vec![path.to_path_buf()])
        }
        ReportFormat::Csv => {
            std::fs::create_dir_all(path).map_err(|e| LararError::io(path, e))?;
            let mut out = Vec::new();
            for s in &report.series {
                let p = path.join(format!("epochs_{}_seed{}.csv", s.model.replace('+', "_"), s.seed));
                write(&p, &epoch_csv(&s.logs))?;
                out.push(p);
            }
            Ok(out)
        }
    }
}
