use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use iou_uniform::cli::{config_to_toml, parse_config, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE};
use iou_uniform::experiment::ExperimentConfig;
use tempfile::TempDir;

const SMALL: &str = r#"
seed = 3

[scenes]
train = 4
test = 6

[training.regressor]
steps = 200

[training.iou_predictor]
steps = 200
learning_rate = 3.0
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_iou-uniform"))
}

fn small_config(dir: &Path) -> PathBuf {
    let p = dir.join("small.toml");
    fs::write(&p, SMALL).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn run_in(tmp: &TempDir, out: &str, extra: &[&str]) -> (Output, PathBuf) {
    let cfg = small_config(tmp.path());
    let out_dir = tmp.path().join(out);
    let mut args = vec![
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--overwrite",
    ];
    args.extend_from_slice(extra);
    (run(&args), out_dir)
}

fn csv_rows(p: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(p).unwrap();
    r.records()
        .map(|rec| rec.unwrap().iter().map(str::to_owned).collect())
        .collect()
}

#[test]
fn help_and_usage_exit_codes() {
    assert_eq!(run(&["--help"]).status.code(), Some(EXIT_OK));
    assert_eq!(run(&["bogus"]).status.code(), Some(EXIT_USAGE));
    assert_eq!(run(&["reproduce", "--rows", "x"]).status.code(), Some(EXIT_USAGE));
}

#[test]
fn bad_config_is_a_runtime_error() {
    let tmp = TempDir::new().unwrap();
    let p = tmp.path().join("bad.toml");
    fs::write(&p, "sed = 1\n").unwrap();
    let o = run(&["--config", p.to_str().unwrap(), "simulate"]);
    assert_eq!(o.status.code(), Some(EXIT_RUNTIME));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sed"));
}

#[test]
fn missing_models_path_is_named() {
    let tmp = TempDir::new().unwrap();
    let (o, _) = run_in(&tmp, "out", &["eval", "--models", "/nonexistent/models"]);
    assert_eq!(o.status.code(), Some(EXIT_RUNTIME));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/models"));
}

#[test]
fn unknown_ladder_row_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let (o, _) = run_in(&tmp, "out", &["reproduce", "--rows", "5"]);
    assert_eq!(o.status.code(), Some(EXIT_RUNTIME));
    assert!(String::from_utf8_lossy(&o.stderr).contains("ladder row 5"));
}

#[test]
fn config_round_trips_through_toml() {
    let mut cfg = parse_config(SMALL).unwrap();
    cfg.sampler.intervals.weights[2] = 2.5;
    let text = config_to_toml(&cfg).unwrap();
    assert_eq!(parse_config(&text).unwrap(), cfg);
    assert_eq!(parse_config("").unwrap(), ExperimentConfig::default());
}

#[test]
fn simulate_echoes_config_and_histogram_decreases() {
    let tmp = TempDir::new().unwrap();
    let (o, dir) = run_in(&tmp, "sim", &["--seed", "9", "simulate"]);
    assert_eq!(o.status.code(), Some(EXIT_OK), "{}", String::from_utf8_lossy(&o.stderr));
    let echoed = parse_config(&fs::read_to_string(dir.join("config.toml")).unwrap()).unwrap();
    assert_eq!(echoed.seed, 9);
    assert_eq!(echoed.scenes.train, 4);
    let counts: Vec<usize> = csv_rows(&dir.join("fig1a_rpn_histogram.csv"))
        .iter()
        .map(|r| r.last().unwrap().parse().unwrap())
        .collect();
    assert_eq!(counts.len(), 5);
    assert!(counts.windows(2).all(|w| w[0] > w[1]), "{counts:?}");
}

#[test]
fn default_output_is_a_fresh_subdirectory() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path());
    let root = tmp.path().join("root");
    let args = [
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        root.to_str().unwrap(),
        "simulate",
    ];
    let a = run(&args);
    let b = run(&args);
    let da = String::from_utf8(a.stdout).unwrap();
    let db = String::from_utf8(b.stdout).unwrap();
    assert_ne!(da.trim(), db.trim());
    assert!(Path::new(da.trim()).starts_with(&root));
    assert!(Path::new(db.trim()).join("scenes_test.jsonl").exists());
}

#[test]
fn train_then_nms_compare_from_saved_models() {
    let tmp = TempDir::new().unwrap();
    let (o, train_dir) = run_in(&tmp, "train", &["train"]);
    assert_eq!(o.status.code(), Some(EXIT_OK), "{}", String::from_utf8_lossy(&o.stderr));
    let models = train_dir.join("models");
    let (o, dir) = run_in(&tmp, "nms", &["nms-compare", "--models", models.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(EXIT_OK), "{}", String::from_utf8_lossy(&o.stderr));
    for name in [
        "recall_cls.csv",
        "recall_fused_one_pass.csv",
        "recall_fused_two_pass.csv",
    ] {
        let rows = csv_rows(&dir.join(name));
        assert_eq!(rows.len(), 11, "{name}");
        let recalls: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
        assert!(recalls.windows(2).all(|w| w[0] >= w[1]), "{name}: {recalls:?}");
    }
}

#[test]
fn reproduce_is_deterministic_across_thread_counts() {
    let tmp = TempDir::new().unwrap();
    let (a, da) = run_in(&tmp, "a", &["--jobs", "1", "reproduce", "--rows", "1,4"]);
    let (b, db) = run_in(&tmp, "b", &["--jobs", "4", "reproduce", "--rows", "1,4"]);
    assert_eq!(a.status.code(), Some(EXIT_OK), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(b.status.code(), Some(EXIT_OK));
    let mut n = 0;
    for entry in fs::read_dir(&da).unwrap() {
        let name = entry.unwrap().file_name();
        if !name.to_string_lossy().ends_with(".csv") {
            continue;
        }
        assert_eq!(
            fs::read(da.join(&name)).unwrap(),
            fs::read(db.join(&name)).unwrap(),
            "{name:?}"
        );
        n += 1;
    }
    assert!(n >= 10);
    let ladder = csv_rows(&da.join("table4_ablation.csv"));
    let rows: Vec<&str> = ladder.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(rows, ["1", "4"]);
}

#[test]
fn zero_scenes_is_not_an_error() {
    let tmp = TempDir::new().unwrap();
    let p = tmp.path().join("empty.toml");
    fs::write(&p, "[scenes]\ntrain = 0\ntest = 0\n").unwrap();
    let out = tmp.path().join("out");
    let o = run(&[
        "--config",
        p.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--overwrite",
        "simulate",
    ]);
    assert_eq!(o.status.code(), Some(EXIT_OK), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(out.join("scenes_test.jsonl")).unwrap(), "");
}
