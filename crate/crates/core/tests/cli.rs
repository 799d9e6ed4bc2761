use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use colap::cli::{self, GlobalOptions};
use colap::data::{generate_synthetic, Corpus, SelectionMode, SyntheticSpec};
use colap::Error;
use serde_json::{json, Value};

fn spec(seed: u64, train_size: usize) -> SyntheticSpec {
    SyntheticSpec {
        dim: 6,
        num_labels: 3,
        train_size,
        test_size: 60,
        source_noise: 0.2,
        target_noise: 0.2,
        rotation_angle: 0.5,
        seed,
    }
}

fn experiment(method: &str, k: Value, num_layers: usize) -> Value {
    json!({
        "synthetic": spec(3, 300),
        "model": { "input_dim": 6, "hidden_dim": 5, "num_layers": num_layers, "num_labels": 3 },
        "train": {
            "batch_size": 16,
            "source_epochs": 2,
            "adapt_epochs": 3,
            "optim": { "learning_rate": 0.01 },
            "method": method,
            "seeds": [0, 1]
        },
        "output_dir": "out",
        "episode": { "k": k }
    })
}

fn write(dir: &Path, name: &str, value: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

fn opts(out: Option<PathBuf>) -> GlobalOptions {
    GlobalOptions {
        jobs: 2,
        out,
        ..Default::default()
    }
}

#[test]
fn generate_round_trips_and_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let spec_file = write(dir.path(), "spec.json", &serde_json::to_value(spec(5, 30)).unwrap());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let manifest = cli::cmd_generate(&spec_file, &a, None).unwrap();
    cli::cmd_generate(&spec_file, &b, None).unwrap();
    assert_eq!(manifest.seed, 5);

    let g = generate_synthetic(&spec(5, 30)).unwrap();
    for (name, corpus) in [
        (cli::SOURCE_FILE, &g.source),
        (cli::TARGET_TRAIN_FILE, &g.target_train),
        (cli::TARGET_TEST_FILE, &g.target_test),
    ] {
        assert_eq!(&Corpus::read_jsonl(&a.join(name), 3).unwrap(), corpus);
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap());
    }
    let manifest: Value = serde_json::from_slice(&fs::read(a.join(cli::MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["spec"]["seed"], 5);
}

#[test]
fn generate_honours_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let spec_file = write(dir.path(), "spec.json", &serde_json::to_value(spec(5, 30)).unwrap());
    let m = cli::cmd_generate(&spec_file, &dir.path().join("o"), Some(42)).unwrap();
    assert_eq!((m.seed, m.spec.seed), (42, 42));
}

#[test]
fn run_writes_reports_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let exp = write(dir.path(), "exp.json", &experiment("colap_xrcl", json!(6), 2));
    let report = cli::cmd_run(&exp, &opts(None)).unwrap();
    let out = dir.path().join("out");
    let csv = fs::read_to_string(out.join(cli::REPORT_CSV)).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "seed,method,K,tap_layer,accuracy,alignment_before,alignment_after"
    );
    assert_eq!(lines.count(), report.runs.len());
    for seed in [0, 1] {
        assert!(out.join(cli::checkpoint_file(seed)).exists());
    }
    let json: Value = serde_json::from_slice(&fs::read(out.join(cli::REPORT_JSON)).unwrap()).unwrap();
    let acc = json["runs"][0]["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn reports_differ_only_in_method() {
    let dir = tempfile::tempdir().unwrap();
    let mut configs = Vec::new();
    for method in ["ft", "colap_xrcl"] {
        let exp = write(dir.path(), &format!("{method}.json"), &experiment(method, json!(6), 2));
        let out = dir.path().join(method);
        cli::cmd_run(&exp, &opts(Some(out.clone()))).unwrap();
        let json: Value = serde_json::from_slice(&fs::read(out.join(cli::REPORT_JSON)).unwrap()).unwrap();
        let mut config = json["config"].clone();
        assert_eq!(config["train"]["method"], method);
        config["train"].as_object_mut().unwrap().remove("method");
        configs.push(config);
    }
    assert_eq!(configs[0], configs[1]);
}

#[test]
fn config_echo_reruns_to_the_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let exp = write(dir.path(), "exp.json", &experiment("ca", json!(6), 2));
    cli::cmd_run(&exp, &opts(Some(dir.path().join("first")))).unwrap();
    let first: Value =
        serde_json::from_slice(&fs::read(dir.path().join("first").join(cli::REPORT_JSON)).unwrap()).unwrap();
    let echo = write(dir.path(), "echo.json", &first["config"]);
    cli::cmd_run(&echo, &opts(Some(dir.path().join("second")))).unwrap();
    assert_eq!(
        fs::read(dir.path().join("first").join(cli::REPORT_JSON)).unwrap(),
        fs::read(dir.path().join("second").join(cli::REPORT_JSON)).unwrap()
    );
}

#[test]
fn k_sweep_produces_rows_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let exp = write(dir.path(), "exp.json", &experiment("ft", json!([5, 250]), 2));
    let report = cli::cmd_run(&exp, &opts(None)).unwrap();
    let ks: Vec<usize> = report.runs.iter().map(|r| r.k).collect();
    assert_eq!(ks, vec![5, 250, 5, 250]);
    assert_eq!(report.summary.iter().map(|s| s.k).collect::<Vec<_>>(), vec![5, 250]);
}

#[test]
fn unknown_experiment_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut exp = experiment("ft", json!(6), 2);
    exp["train"]["learning_rate"] = json!(0.1);
    let path = write(dir.path(), "exp.json", &exp);
    let err = cli::cmd_run(&path, &opts(None)).unwrap_err();
    assert!(err.to_string().contains("parsing experiment file"), "{err}");
}

#[test]
fn binary_reports_the_failing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut exp = experiment("ft", json!(6), 2);
    exp.as_object_mut().unwrap().remove("synthetic");
    exp["corpus"] = json!({
        "source": "missing/source.jsonl",
        "target_train": "missing/target_train.jsonl",
        "target_test": "missing/target_test.jsonl"
    });
    let path = write(dir.path(), "exp.json", &exp);
    let output = Command::new(env!("CARGO_BIN_EXE_colap"))
        .arg("run")
        .arg(&path)
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("loading source corpus"), "{stderr}");
}

#[test]
fn binary_runs_generated_corpora() {
    let dir = tempfile::tempdir().unwrap();
    let spec_file = write(dir.path(), "spec.json", &serde_json::to_value(spec(1, 60)).unwrap());
    let bin = env!("CARGO_BIN_EXE_colap");
    let status = Command::new(bin)
        .args(["generate", spec_file.to_str().unwrap(), "--out"])
        .arg(dir.path().join("data"))
        .status()
        .unwrap();
    assert!(status.success());

    let mut exp = experiment("colap_xccl", json!(6), 2);
    exp.as_object_mut().unwrap().remove("synthetic");
    exp["corpus"] = json!({
        "source": "data/source.jsonl",
        "target_train": "data/target_train.jsonl",
        "target_test": "data/target_test.jsonl"
    });
    let path = write(dir.path(), "exp.json", &exp);
    let status = Command::new(bin)
        .args(["--jobs", "2", "--seed-override", "9", "run"])
        .arg(&path)
        .status()
        .unwrap();
    assert!(status.success());
    let csv = fs::read_to_string(dir.path().join("out").join(cli::REPORT_CSV)).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("9,colap_xccl,6,2,"));
}

fn trained_checkpoint(dir: &Path) -> (PathBuf, PathBuf) {
    let spec_file = write(dir, "spec.json", &serde_json::to_value(spec(3, 300)).unwrap());
    cli::cmd_generate(&spec_file, &dir.join("data"), None).unwrap();
    let exp = write(dir, "exp.json", &experiment("ft", json!(6), 2));
    cli::cmd_run(&exp, &opts(None)).unwrap();
    (
        dir.join("data").join(cli::SOURCE_FILE),
        dir.join("out").join(cli::checkpoint_file(0)),
    )
}

#[test]
fn select_high_dominates_unselected_scores() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, ckpt) = trained_checkpoint(dir.path());
    let out = dir.path().join("sel.csv");
    let rows = cli::cmd_select(&corpus, &ckpt, 10, SelectionMode::High, 0, &out).unwrap();
    assert_eq!(rows.iter().filter(|r| r.selected).count(), 10);
    for class in 0..3 {
        let in_class: Vec<_> = rows.iter().filter(|r| r.label == class).collect();
        let worst_selected = in_class
            .iter()
            .filter(|r| r.selected)
            .map(|r| r.score)
            .fold(f64::INFINITY, f64::min);
        let best_unselected = in_class
            .iter()
            .filter(|r| !r.selected)
            .map(|r| r.score)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(worst_selected >= best_unselected);
    }
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().next().unwrap(), "id,label,score,selected");
    assert_eq!(text.lines().count(), rows.len() + 1);

    let top = cli::cmd_select(&corpus, &ckpt, 3, SelectionMode::High, 0, &out).unwrap();
    for class in 0..3 {
        let in_class = top.iter().filter(|r| r.label == class);
        let argmax = in_class.clone().max_by(|a, b| a.score.total_cmp(&b.score)).unwrap();
        assert!(argmax.selected);
        assert_eq!(in_class.filter(|r| r.selected).count(), 1);
    }
}

#[test]
fn select_random_is_reproducible_and_checks_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, ckpt) = trained_checkpoint(dir.path());
    let out = dir.path().join("sel.csv");
    let a = cli::cmd_select(&corpus, &ckpt, 7, SelectionMode::Random, 3, &out).unwrap();
    let b = cli::cmd_select(&corpus, &ckpt, 7, SelectionMode::Random, 3, &out).unwrap();
    assert_eq!(a, b);

    let wide = SyntheticSpec { dim: 9, ..spec(3, 30) };
    let g = generate_synthetic(&wide).unwrap();
    let wrong = dir.path().join("wide.jsonl");
    g.source.write_jsonl(&wrong).unwrap();
    let err = cli::cmd_select(&wrong, &ckpt, 3, SelectionMode::High, 0, &out).unwrap_err();
    assert!(err.to_string().contains("dimension 9"), "{err}");

    let err = cli::cmd_select(&corpus, &ckpt, 1000, SelectionMode::High, 0, &out).unwrap_err();
    assert!(matches!(
        err,
        Error::Stage { ref source, .. } if matches!(**source, Error::InsufficientInstances { .. })
    ));
}

#[test]
fn layer_ablation_rows() {
    let dir = tempfile::tempdir().unwrap();
    let exp = write(dir.path(), "exp.json", &experiment("colap_xrcl", json!(6), 6));
    let rows = cli::cmd_ablate_layer(&exp, &[1, 2, 3, 4, 5, 6], &opts(None)).unwrap();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.mean_accuracy)));
    let csv = fs::read_to_string(dir.path().join("out").join(cli::ABLATION_CSV)).unwrap();
    assert_eq!(csv.lines().count(), 7);

    let dup = cli::cmd_ablate_layer(&exp, &[3, 3], &opts(None)).unwrap();
    assert_eq!(dup[0].mean_accuracy, dup[1].mean_accuracy);
    assert_eq!(dup[0].mean_accuracy, rows[2].mean_accuracy);

    let mut top = experiment("colap_xrcl", json!(6), 6);
    top["model"]["tap_layer"] = json!(6);
    let top = write(dir.path(), "top.json", &top);
    let plain = cli::cmd_run(&top, &opts(Some(dir.path().join("plain")))).unwrap();
    let only_top = cli::cmd_ablate_layer(&exp, &[6], &opts(None)).unwrap();
    assert_eq!(only_top[0].mean_accuracy, plain.summary[0].mean_accuracy);

    for bad in [0, 7] {
        let err = cli::cmd_ablate_layer(&exp, &[bad], &opts(None)).unwrap_err();
        assert!(matches!(err, Error::LayerOutOfRange { layer, num_layers: 6 } if layer == bad));
    }
}
