mod common;

use common::synth_splits;
use larar::attacks::AttackConfig;
use larar::eval::{
    attack_success_rate, compute_metrics, evaluate_trained, run_ablation, run_comparison, AblationVariant, Condition, EvalConfig,
    EvalReport, Metrics, Stat,
};
use larar::model::ModelKind;
use larar::report::{emit_report, from_json, to_json, to_markdown, ReportFormat};
use larar::training::TrainConfig;
use larar::LararError;
use proptest::prelude::*;

fn tiny_config(seeds: Vec<u64>) -> EvalConfig {
    EvalConfig {
        train: TrainConfig {
            epochs: 2,
            pgd_iterations: 2,
            pgd_step: 0.1,
            ..TrainConfig::default()
        },
        attack: AttackConfig {
            iterations: 3,
            alpha: 0.1,
            ..AttackConfig::default()
        },
        seeds,
        ..EvalConfig::default()
    }
}

#[test]
fn perfect_predictions() {
    let y = [1, 0, 1, 1, 0];
    let m = compute_metrics(&y, &y).unwrap();
    assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));
}

#[test]
fn metrics_need_matching_nonempty_input() {
    assert!(matches!(compute_metrics(&[], &[]), Err(LararError::EmptyInput(_))));
    assert!(compute_metrics(&[1, 0], &[1]).is_err());
}

#[test]
fn no_positive_predictions_gives_zero_f1() {
    let m = compute_metrics(&[0, 0, 0], &[1, 0, 1]).unwrap();
    assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
}

#[test]
fn attack_success_rate_examples() {
    assert!((attack_success_rate(0.9, 0.27) - 0.73).abs() < 1e-12);
    assert!((attack_success_rate(0.9, 0.3145) - 0.6855).abs() < 1e-12);
    assert_eq!(attack_success_rate(0.9, 1.0), 0.0);
}

#[test]
fn sample_standard_deviation() {
    let s = Stat::of(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(s.mean, 2.5);
    assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    assert_eq!(Stat::of(&[0.7]).std, 0.0);
}

proptest! {
    #[test]
    fn metric_identities(pred in proptest::collection::vec(0u8..2, 1..200), seed in any::<u64>()) {
        let truth: Vec<u8> = pred.iter().enumerate().map(|(i, &p)| if (seed >> (i % 64)) & 1 == 1 { 1 - p } else { p }).collect();
        let m = compute_metrics(&pred, &truth).unwrap();
        prop_assert_eq!(m.total(), pred.len());
        prop_assert_eq!(m.accuracy, (m.tp + m.tn) as f64 / m.total() as f64);
        let expect = if m.precision + m.recall > 0.0 { 2.0 * m.precision * m.recall / (m.precision + m.recall) } else { 0.0 };
        prop_assert!((m.f1 - expect).abs() < 1e-12);
        for v in [m.accuracy, m.precision, m.recall, m.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert_eq!(m, Metrics::from_counts(m.tp, m.fp, m.fn_, m.tn));
    }
}

#[test]
fn clean_only_grid_has_three_cells() {
    let splits = synth_splits(300, 4, 2.0, 1);
    let cfg = EvalConfig {
        conditions: vec![Condition::Clean],
        ..tiny_config(vec![0])
    };
    let r = run_comparison(&splits, &cfg).unwrap();
    assert_eq!(r.cells.len(), 3);
    assert!(r.cells.iter().all(|c| c.asr.is_none() && c.per_seed.len() == 1));
    assert!(r.early_exit.is_some());
    assert_eq!(r.series.len(), 3);
}

#[test]
fn full_grid_is_complete_and_consistent() {
    let splits = synth_splits(300, 4, 1.0, 2);
    let r = run_comparison(&splits, &tiny_config(vec![0, 1])).unwrap();
    assert_eq!(r.cells.len(), 12);
    for model in ModelKind::ALL {
        for cond in Condition::ALL {
            let cell = r.cell(model, cond).unwrap();
            assert_eq!(cell.per_seed.len(), 2);
            if let Some(asr) = cell.asr {
                assert!((asr.mean - (1.0 - cell.accuracy.mean)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn ablation_base_matches_the_comparison_cell() {
    let splits = synth_splits(300, 4, 1.0, 3);
    let cfg = tiny_config(vec![0, 4]);
    let cmp = run_comparison(
        &splits,
        &EvalConfig {
            models: vec![ModelKind::BaseAdvnn],
            conditions: vec![Condition::Pgd],
            ..cfg.clone()
        },
    )
    .unwrap();
    let abl = run_ablation(&splits, &cfg, &[AblationVariant::Base, AblationVariant::All]).unwrap();
    let cell = cmp.cell(ModelKind::BaseAdvnn, Condition::Pgd).unwrap();
    let per_seed: Vec<f64> = cell.per_seed.iter().map(|m| m.accuracy).collect();
    assert_eq!(abl.ablation[0].per_seed, per_seed);
    assert_eq!(abl.ablation[0].pgd_accuracy, cell.accuracy);
}

#[test]
fn all_ablation_equals_larar_training() {
    let splits = synth_splits(300, 4, 1.0, 4);
    let cfg = tiny_config(vec![2]);
    let cmp = run_comparison(
        &splits,
        &EvalConfig {
            models: vec![ModelKind::Larar],
            conditions: vec![Condition::Pgd],
            ..cfg.clone()
        },
    )
    .unwrap();
    let abl = run_ablation(&splits, &cfg, &[AblationVariant::All]).unwrap();
    assert_eq!(abl.ablation[0].per_seed[0], cmp.cells[0].per_seed[0].accuracy);
}

#[test]
fn empty_grids_are_rejected() {
    let splits = synth_splits(100, 3, 2.0, 5);
    let no_models = EvalConfig {
        models: Vec::new(),
        ..tiny_config(vec![0])
    };
    assert!(run_comparison(&splits, &no_models).is_err());
    let no_seeds = tiny_config(Vec::new());
    assert!(run_comparison(&splits, &no_seeds).is_err());
    assert!(run_ablation(&splits, &tiny_config(vec![0]), &[]).is_err());
    let empty = EvalReport {
        cells: Vec::new(),
        ablation: Vec::new(),
        early_exit: None,
        series: Vec::new(),
        ..run_ablation(&splits, &tiny_config(vec![0]), &[AblationVariant::Base]).unwrap()
    };
    assert!(matches!(to_markdown(&empty), Err(LararError::EmptyInput(_))));
    let dir = tempfile::tempdir().unwrap();
    assert!(emit_report(&empty, ReportFormat::Json, &dir.path().join("r.json")).is_err());
}

#[test]
fn report_round_trips_through_json_and_renders() {
    let splits = synth_splits(300, 4, 1.0, 6);
    let r = run_comparison(&splits, &tiny_config(vec![0, 1])).unwrap();
    let json = to_json(&r).unwrap();
    let back = from_json(&json).unwrap();
    assert_eq!(back, r);
    assert_eq!(to_markdown(&back).unwrap(), to_markdown(&r).unwrap());
    let md = to_markdown(&r).unwrap();
    for heading in ["## Accuracy", "## Attack success rate", "## Detailed metrics", "## Early exit"] {
        assert!(md.contains(heading), "{heading}");
    }
    let larar_clean = r.cell(ModelKind::Larar, Condition::Clean).unwrap().accuracy;
    assert!(md.contains(&format!("{:.4} ± {:.4}", larar_clean.mean, larar_clean.std)));
    let bumped = json.replacen("\"schema_version\": 1", "\"schema_version\": 2", 1);
    assert!(matches!(from_json(&bumped), Err(LararError::VersionMismatch { found: 2, supported: 1 })));
}

#[test]
fn emitted_files() {
    let splits = synth_splits(200, 4, 2.0, 7);
    let r = run_comparison(
        &splits,
        &EvalConfig {
            conditions: vec![Condition::Clean, Condition::Fgsm],
            ..tiny_config(vec![3])
        },
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("report.json");
    emit_report(&r, ReportFormat::Json, &json).unwrap();
    assert_eq!(from_json(&std::fs::read_to_string(&json).unwrap()).unwrap(), r);
    let csv = emit_report(&r, ReportFormat::Csv, &dir.path().join("series")).unwrap();
    let names: Vec<String> = csv.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(names, ["epochs_vanilla_seed3.csv", "epochs_base-advnn_seed3.csv", "epochs_larar_seed3.csv"]);
    assert_eq!("md".parse::<ReportFormat>().unwrap(), ReportFormat::Markdown);
    assert!("xml".parse::<ReportFormat>().is_err());
}

#[test]
fn comparison_is_deterministic() {
    let splits = synth_splits(200, 4, 1.0, 8);
    let cfg = tiny_config(vec![0, 1]);
    let a = to_json(&run_comparison(&splits, &cfg).unwrap()).unwrap();
    let b = to_json(&run_comparison(&splits, &cfg).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn easy_synthetic_data_orders_models_under_pgd() {
    // The separable dataset of the data module's examples.
    let splits = synth_splits(2000, 10, 6.0, 0);
    let cfg = EvalConfig {
        train: TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        },
        conditions: vec![Condition::Clean, Condition::Pgd],
        seeds: vec![0, 1, 2],
        ..EvalConfig::default()
    };
    let report = run_comparison(&splits, &cfg).unwrap();
    let acc = |m, c| report.cell(m, c).unwrap().accuracy.mean;
    for m in ModelKind::ALL {
        assert!(acc(m, Condition::Clean) > 0.95, "{m} clean {}", acc(m, Condition::Clean));
    }
    let pgd = |m| acc(m, Condition::Pgd);
    assert!(pgd(ModelKind::Larar) >= pgd(ModelKind::BaseAdvnn), "{}", to_markdown(&report).unwrap());
    assert!(pgd(ModelKind::BaseAdvnn) >= pgd(ModelKind::Vanilla), "{}", to_markdown(&report).unwrap());
}

#[test]
fn evaluate_trained_scores_given_models() {
    let splits = synth_splits(240, 4, 2.0, 3);
    let vanilla = common::quick_model(ModelKind::Vanilla, &splits, 2, 0);
    let larar_model = common::quick_model(ModelKind::Larar, &splits, 2, 0);
    let cfg = tiny_config(vec![0]);
    let models = [vanilla.clone(), larar_model.clone()];
    let report = evaluate_trained(&models, Some(&vanilla), &splits, &cfg, 4).unwrap();
    assert_eq!(report.cells.len(), 8);
    assert_eq!(report.seeds, vec![4]);
    let clean = compute_metrics(&larar_model.predict(&splits.test.x).unwrap(), &splits.test.y).unwrap();
    assert_eq!(report.cell(ModelKind::Larar, Condition::Clean).unwrap().per_seed, vec![clean]);
    assert!(report.early_exit.is_some());
    assert_eq!(evaluate_trained(&models, Some(&vanilla), &splits, &cfg, 4).unwrap(), report);

    let err = evaluate_trained(&[larar_model.clone(), larar_model.clone()], None, &splits, &cfg, 0).unwrap_err();
    assert!(matches!(err, LararError::InvalidConfig(_)));
    assert!(evaluate_trained(&[larar_model], None, &splits, &cfg, 0).is_err());
}
