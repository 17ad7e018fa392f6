use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use larar::checkpoint::{save_checkpoint, Checkpoint};
use larar::eval::{Condition, EvalReport};
use larar::model::{ModelKind, NetworkParams};
use larar::report::from_json;

const SMALL: [&str; 8] = [
    "--synth",
    "n=240,d=4,sep=3",
    "--epochs",
    "2",
    "--pgd-iterations",
    "2",
    "--pgd-step",
    "0.1",
];

fn larar(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_larar"))
        .args(args)
        .env("LARAR_OUTPUT_DIR", out)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = larar(out, args);
    assert!(
        o.status.success(),
        "larar {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn train_small(out: &Path, model: &str, name: &str) -> PathBuf {
    let mut args = vec!["train", "--model", model, "--run-name", name];
    args.extend(SMALL);
    PathBuf::from(ok(out, &args).trim())
}

fn report(dir: &Path) -> EvalReport {
    from_json(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn missing_dataset_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = larar(tmp.path(), &["train", "--model", "larar"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no dataset"));
    assert_eq!(std::fs::read_dir(tmp.path()).unwrap().count(), 0);
}

#[test]
fn unknown_flags_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let o = larar(tmp.path(), &["train", "--synth", "n=100,d=2,sep=1", "--epoch", "3"]);
    assert_eq!(o.status.code(), Some(2));
    let o = larar(tmp.path(), &["detect", "--variants", "all"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn defaults_match_the_reference_configuration() {
    let tmp = tempfile::tempdir().unwrap();
    let text = ok(tmp.path(), &["train", "--print-config"]);
    let v: toml::Value = toml::from_str(&text).unwrap();
    let f = |section: &str, key: &str| v[section][key].as_float().unwrap();
    let i = |section: &str, key: &str| v[section][key].as_integer().unwrap();
    assert_eq!(i("train", "epochs"), 20);
    assert_eq!(i("train", "batch_size"), 64);
    assert_eq!(f("train", "learning_rate"), 0.001);
    assert_eq!(f("train", "epsilon_max"), 0.3);
    assert_eq!(i("train", "pgd_iterations"), 10);
    assert_eq!(f("train", "pgd_step"), 0.01);
    assert_eq!(f("attack", "epsilon"), 0.3);
    assert_eq!(f("attack", "alpha"), 0.01);
    assert_eq!(i("attack", "iterations"), 10);
    assert_eq!(f("loss", "lambda_aux"), 0.2);
    assert_eq!(f("loss", "lambda_ga"), 1.0);
    assert_eq!(f("loss", "lambda_fs"), 0.5);
    assert_eq!(f("loss", "beta"), 0.3);
    assert_eq!(f("detect", "k"), 2.5);
    assert_eq!(f("detect", "lambda"), 1.2);
    assert_eq!(f("detect", "early_exit_threshold"), 0.95);
    assert_eq!(v["eval"]["seeds"].as_array().unwrap().len(), 5);
}

#[test]
fn flags_override_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, "[train]\nepochs = 3\nbatch_size = 32\n\n[detect]\nk = 3.0\n").unwrap();
    let text = ok(
        tmp.path(),
        &["train", "--config", cfg.to_str().unwrap(), "--epochs", "1", "--print-config"],
    );
    let v: toml::Value = toml::from_str(&text).unwrap();
    assert_eq!(v["train"]["epochs"].as_integer(), Some(1));
    assert_eq!(v["train"]["batch_size"].as_integer(), Some(32));
    assert_eq!(v["detect"]["k"].as_float(), Some(3.0));
    assert_eq!(v["loss"]["beta"].as_float(), Some(0.3));

    std::fs::write(&cfg, "[train]\nepohcs = 3\n").unwrap();
    let o = larar(tmp.path(), &["train", "--config", cfg.to_str().unwrap(), "--print-config"]);
    assert_eq!(o.status.code(), Some(2));
    let o = larar(tmp.path(), &["train", "--config", "/nonexistent/run.toml"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_run_directory_reproduces_byte_identical_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let first = train_small(tmp.path(), "larar", "a");
    let second = train_small(tmp.path(), "larar", "b");
    let dir_a = first.parent().unwrap();
    let dir_b = second.parent().unwrap();
    for f in ["config.toml", "seeds.txt", "git-describe.txt", "model.larar", "epochs.csv", "summary.json"] {
        assert!(dir_a.join(f).is_file(), "{f} missing");
    }
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
    assert_eq!(
        std::fs::read(dir_a.join("epochs.csv")).unwrap(),
        std::fs::read(dir_b.join("epochs.csv")).unwrap()
    );
    let seeds = std::fs::read_to_string(dir_a.join("seeds.txt")).unwrap();
    assert!(seeds.contains("train 0"));

    // Replaying the resolved config reproduces the checkpoint.
    let cfg = dir_a.join("config.toml");
    let replay = ok(tmp.path(), &["train", "--config", cfg.to_str().unwrap(), "--run-name", "c"]);
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(replay.trim()).unwrap());

    let ckpt = Checkpoint::load(&first, Some(ModelKind::Larar)).unwrap();
    assert!(ckpt.calibration().is_ok());
    assert_eq!(ckpt.params.input_dim, 4);
    let csv = std::fs::read_to_string(dir_a.join("epochs.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn default_run_directory_name_follows_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--model", "vanilla"];
    args.extend(SMALL);
    let a = ok(tmp.path(), &args);
    let b = ok(tmp.path(), &args);
    assert_eq!(a, b);
    let name = Path::new(a.trim()).parent().unwrap().file_name().unwrap().to_str().unwrap().to_string();
    assert!(name.starts_with("train-"), "{name}");
    assert!(Path::new(a.trim()).starts_with(tmp.path()));
}

#[test]
fn synthetic_training_example_finishes_within_a_minute() {
    let tmp = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let ckpt = ok(tmp.path(), &["train", "--model", "larar", "--synth", "n=2000,d=10,sep=6"]);
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 60.0, "took {secs:.1}s");
    let summary = std::fs::read_to_string(Path::new(ckpt.trim()).parent().unwrap().join("summary.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&summary).unwrap();
    assert_eq!(v["epochs"], 20);
    assert!(v["test"]["accuracy"].as_f64().unwrap() > 0.95);
}

#[test]
fn evaluate_reports_cells_for_every_condition() {
    let tmp = tempfile::tempdir().unwrap();
    let larar_ckpt = train_small(tmp.path(), "larar", "l");
    let vanilla = train_small(tmp.path(), "vanilla", "v");
    let mut args = vec![
        "evaluate",
        "--checkpoint",
        larar_ckpt.to_str().unwrap(),
        "--checkpoint",
        vanilla.to_str().unwrap(),
        "--run-name",
        "e",
        "--iterations",
        "3",
        "--alpha",
        "0.1",
    ];
    args.extend(&SMALL[..2]);
    let md = ok(tmp.path(), &args);
    assert!(md.contains("| Method | Clean | FGSM | PGD | Transfer |"));
    let r = report(&tmp.path().join("e"));
    for kind in [ModelKind::Vanilla, ModelKind::Larar] {
        for c in Condition::ALL {
            assert!(r.cell(kind, c).is_some(), "{kind} {c:?}");
        }
    }
    assert_eq!(r.cells.len(), 8);
    assert_eq!(r.cells[0].model, ModelKind::Vanilla);
    assert!(r.early_exit.is_some());
    assert!(tmp.path().join("e/report.md").is_file());
}

#[test]
fn evaluate_without_surrogate_drops_transfer() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = train_small(tmp.path(), "base-advnn", "b");
    let mut args = vec!["evaluate", "--checkpoint", ckpt.to_str().unwrap(), "--run-name", "e"];
    args.extend(&SMALL[..2]);
    ok(tmp.path(), &args);
    let r = report(&tmp.path().join("e"));
    assert_eq!(r.cells.len(), 3);
    assert!(r.cell(ModelKind::BaseAdvnn, Condition::Transfer).is_none());
}

#[test]
fn evaluate_with_missing_checkpoint_fails_at_runtime() {
    let tmp = tempfile::tempdir().unwrap();
    let o = larar(
        tmp.path(),
        &["evaluate", "--checkpoint", "/nonexistent/model.larar", "--synth", "n=100,d=2,sep=1"],
    );
    assert_eq!(o.status.code(), Some(1));
    let o = larar(tmp.path(), &["evaluate", "--synth", "n=100,d=2,sep=1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn evaluate_compare_trains_every_model() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["evaluate", "--compare", "--seeds", "0", "--run-name", "cmp", "--iterations", "2"];
    args.extend(SMALL);
    ok(tmp.path(), &args);
    let r = report(&tmp.path().join("cmp"));
    assert_eq!(r.cells.len(), 12);
    assert_eq!(r.series.len(), 3);
    assert_eq!(std::fs::read_dir(tmp.path().join("cmp/series")).unwrap().count(), 3);
}

#[test]
fn ablate_with_all_variants_gives_six_cells() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["ablate", "--seeds", "0", "--run-name", "abl", "--iterations", "2"];
    args.extend(SMALL);
    ok(tmp.path(), &args);
    let r = report(&tmp.path().join("abl"));
    assert_eq!(r.ablation.len(), 6);
    assert!(r.cells.is_empty());
}

#[test]
fn paired_detection_against_itself_flags_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = train_small(tmp.path(), "larar", "l");
    let out = ok(
        tmp.path(),
        &[
            "detect",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--mode",
            "paired",
            "--attack",
            "clean",
            "--synth",
            "n=240,d=4,sep=3",
            "--run-name",
            "d",
        ],
    );
    let lines: Vec<serde_json::Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 72);
    for (i, v) in lines.iter().enumerate() {
        assert_eq!(v["index"], i);
        assert_eq!(v["flagged"], false);
        assert!(v["scores"].as_array().unwrap().iter().all(|s| s.as_f64() == Some(0.0)));
    }
    let saved = std::fs::read_to_string(tmp.path().join("d/verdicts.jsonl")).unwrap();
    assert_eq!(saved, out);
}

#[test]
fn detect_on_uncalibrated_checkpoint_says_so() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("raw.larar");
    save_checkpoint(&NetworkParams::init(ModelKind::Larar, 4, 0).unwrap(), &path).unwrap();
    let o = larar(
        tmp.path(),
        &["detect", "--checkpoint", path.to_str().unwrap(), "--synth", "n=100,d=4,sep=1"],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("calibrate"));
}

#[test]
fn attack_stays_inside_the_budget() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = train_small(tmp.path(), "vanilla", "v");
    let out = ok(
        tmp.path(),
        &[
            "attack",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--method",
            "pgd",
            "--epsilon",
            "0.5",
            "--alpha",
            "0.2",
            "--synth",
            "n=240,d=4,sep=3",
            "--run-name",
            "atk",
        ],
    );
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(v["max_linf"].as_f64().unwrap() <= 0.5);
    let asr = v["attack_success_rate"].as_f64().unwrap();
    assert_eq!(asr, 1.0 - v["adversarial_accuracy"].as_f64().unwrap());
    let csv = std::fs::read_to_string(tmp.path().join("atk/adversarial.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("f0,f1,f2,f3,label"));
    assert_eq!(csv.lines().count(), 73);

    let o = larar(
        tmp.path(),
        &["attack", "--checkpoint", ckpt.to_str().unwrap(), "--method", "transfer", "--synth", "n=240,d=4,sep=3"],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ingest_writes_a_reusable_split_cache() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("flows");
    std::fs::create_dir(&data).unwrap();
    let mut a = String::from("id,dur,proto,attack_cat,label\n");
    let mut b = a.clone();
    for i in 0..60 {
        let label = i % 2;
        let proto = if i % 3 == 0 { "tcp" } else { "udp" };
        let row = format!("{i},{}.{},{proto},x,{label}\n", label * 2, i % 7);
        if i < 30 {
            a.push_str(&row);
        } else {
            b.push_str(&row);
        }
    }
    std::fs::write(data.join("part1.csv"), a).unwrap();
    std::fs::write(data.join("part2.csv"), b).unwrap();
    let cache = ok(tmp.path(), &["ingest", "--data", data.to_str().unwrap(), "--run-name", "ing"]);
    let cache = cache.trim();
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("ing/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["features"], 2);
    let rows: u64 = ["train", "calibration", "test"]
        .iter()
        .map(|s| summary[s]["rows"].as_u64().unwrap())
        .sum();
    assert_eq!(rows, 60);

    let ckpt = ok(
        tmp.path(),
        &["train", "--splits", cache, "--model", "vanilla", "--epochs", "1", "--run-name", "t"],
    );
    assert!(Path::new(ckpt.trim()).is_file());

    let o = larar(tmp.path(), &["ingest", "--splits", cache]);
    assert_eq!(o.status.code(), Some(2));
    let o = larar(tmp.path(), &["train", "--splits", cache, "--synth", "n=10,d=2,sep=1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn output_flag_beats_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let other = tmp.path().join("elsewhere");
    let mut args = vec!["train", "--model", "vanilla", "--out", other.to_str().unwrap()];
    args.extend(SMALL);
    let ckpt = ok(tmp.path(), &args);
    assert!(Path::new(ckpt.trim()).starts_with(&other));
}
