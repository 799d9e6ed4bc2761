//! Command implementations behind the `colap` binary.
//!
//! Every command is a plain function so it can be driven from tests without a
//! subprocess. All JSON output goes through [`crate::io`], so floats carry 17
//! significant digits and identical inputs give identical bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::data::{generate_synthetic, select_exemplars, Corpus, SelectionMode, SyntheticSpec};
use crate::error::{Error, Result, StageContext};
use crate::harness::{run_experiment_with_models, score_corpus, RunReport};
use crate::io::{format_f64, write_json};
use crate::model::Checkpoint;

pub use crate::harness::ExperimentFile;

pub const SOURCE_FILE: &str = "source.jsonl";
pub const TARGET_TRAIN_FILE: &str = "target_train.jsonl";
pub const TARGET_TEST_FILE: &str = "target_test.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const ABLATION_CSV: &str = "ablate_layer.csv";

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct GlobalOptions {
    /// Replaces the seed list (run, ablate-layer), the synthetic seed (generate)
    /// or the selection seed (select).
    pub seed_override: Option<u64>,
    pub jobs: usize,
    /// Output directory (generate, run, ablate-layer) or file (select).
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub spec: SyntheticSpec,
    pub seed: u64,
    pub files: Vec<String>,
}

fn read_to_string(path: &Path, stage: &str) -> Result<String> {
    fs::read_to_string(path).stage(format!("{stage} {}", path.display()))
}

pub fn read_spec(path: &Path) -> Result<SyntheticSpec> {
    let text = read_to_string(path, "reading synthetic spec")?;
    serde_json::from_str(&text).stage(format!("parsing synthetic spec {}", path.display()))
}

pub fn read_experiment(path: &Path) -> Result<ExperimentFile> {
    let text = read_to_string(path, "reading experiment file")?;
    serde_json::from_str(&text).stage(format!("parsing experiment file {}", path.display()))
}

fn parent_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).stage(format!("creating output directory {}", dir.display()))
}

/// Writes the three synthetic corpora and a manifest into `out_dir`.
pub fn cmd_generate(spec_file: &Path, out_dir: &Path, seed_override: Option<u64>) -> Result<Manifest> {
    let mut spec = read_spec(spec_file)?;
    if let Some(seed) = seed_override {
        spec.seed = seed;
    }
    let g = generate_synthetic(&spec).stage("generating synthetic corpora")?;
    create_dir(out_dir)?;
    for (name, corpus) in [
        (SOURCE_FILE, &g.source),
        (TARGET_TRAIN_FILE, &g.target_train),
        (TARGET_TEST_FILE, &g.target_test),
    ] {
        corpus
            .write_jsonl(&out_dir.join(name))
            .stage(format!("writing {name}"))?;
    }
    let manifest = Manifest {
        spec,
        seed: spec.seed,
        files: vec![SOURCE_FILE.into(), TARGET_TRAIN_FILE.into(), TARGET_TEST_FILE.into()],
    };
    write_json(&out_dir.join(MANIFEST_FILE), &manifest).stage("writing manifest")?;
    Ok(manifest)
}

fn apply_overrides(exp: &mut ExperimentFile, opts: &GlobalOptions) {
    if let Some(seed) = opts.seed_override {
        exp.train.seeds = vec![seed];
    }
}

/// Output directory: `--out` if given, else the file's `output_dir`
/// resolved against the experiment file's directory.
fn output_dir(exp: &ExperimentFile, exp_file: &Path, opts: &GlobalOptions) -> PathBuf {
    match &opts.out {
        Some(out) => out.clone(),
        None => parent_dir(exp_file).join(&exp.output_dir),
    }
}

pub fn write_report_csv(path: &Path, report: &RunReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "seed",
        "method",
        "K",
        "tap_layer",
        "accuracy",
        "alignment_before",
        "alignment_after",
    ])?;
    for r in &report.runs {
        w.write_record([
            r.seed.to_string(),
            r.method.to_string(),
            r.k.to_string(),
            r.tap_layer.to_string(),
            format_f64(r.accuracy),
            format_f64(r.alignment_before),
            format_f64(r.alignment_after),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Runs an experiment file and writes `report.json`, `report.csv` and one
/// source-fine-tuned checkpoint per seed.
pub fn cmd_run(exp_file: &Path, opts: &GlobalOptions) -> Result<RunReport> {
    let mut exp = read_experiment(exp_file)?;
    apply_overrides(&mut exp, opts);
    let out = output_dir(&exp, exp_file, opts);
    let (report, models) = run_experiment_with_models(&exp, &parent_dir(exp_file), opts.jobs)?;
    create_dir(&out)?;
    write_json(&out.join(REPORT_JSON), &report).stage("writing report.json")?;
    write_report_csv(&out.join(REPORT_CSV), &report).stage("writing report.csv")?;
    for m in &models {
        let name = checkpoint_file(m.seed);
        write_json(&out.join(&name), &Checkpoint::new(exp.model, &m.params)).stage(format!("writing {name}"))?;
    }
    Ok(report)
}

pub fn checkpoint_file(seed: u64) -> String {
    format!("checkpoint_seed{seed}.json")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionRow {
    pub id: String,
    pub label: usize,
    pub score: f64,
    pub selected: bool,
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = read_to_string(path, "reading checkpoint")?;
    serde_json::from_str(&text).stage(format!("parsing checkpoint {}", path.display()))
}

/// Scores every instance of a source corpus with a checkpoint's tap-layer
/// prototypes, selects `k` exemplars and writes `id,label,score,selected`.
pub fn cmd_select(
    corpus_file: &Path,
    checkpoint_file: &Path,
    k: usize,
    mode: SelectionMode,
    seed: u64,
    out_file: &Path,
) -> Result<Vec<SelectionRow>> {
    let (model, params) = read_checkpoint(checkpoint_file)?
        .into_params()
        .stage("loading checkpoint")?;
    let corpus =
        Corpus::read_jsonl(corpus_file, model.num_labels).stage(format!("loading corpus {}", corpus_file.display()))?;
    if let Some(d) = corpus.dim().filter(|&d| d != model.input_dim) {
        return Err(Error::ShapeMismatch(format!(
            "corpus features have dimension {d}, checkpoint expects {}",
            model.input_dim
        )))
        .stage("loading corpus");
    }
    let scores = score_corpus(&params, &model, &corpus).stage("scoring exemplars")?;
    let chosen: std::collections::HashSet<String> = select_exemplars(&scores, &corpus, k, mode, seed)
        .stage("selecting exemplars")?
        .into_iter()
        .collect();
    let rows: Vec<SelectionRow> = corpus
        .instances
        .iter()
        .zip(&scores)
        .map(|(inst, &score)| SelectionRow {
            id: inst.id.clone(),
            label: inst.label,
            score,
            selected: chosen.contains(&inst.id),
        })
        .collect();
    if let Some(dir) = out_file.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let mut w = csv::Writer::from_path(out_file).stage("writing selection")?;
    w.write_record(["id", "label", "score", "selected"])
        .stage("writing selection")?;
    for r in &rows {
        w.write_record([
            r.id.clone(),
            r.label.to_string(),
            format_f64(r.score),
            r.selected.to_string(),
        ])
        .stage("writing selection")?;
    }
    w.flush().stage("writing selection")?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRow {
    pub tap_layer: usize,
    pub k: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

/// Reruns the experiment with the tap layer set to each entry of `layers`
/// and writes one row per layer (and K value) to `ablate_layer.csv`.
pub fn cmd_ablate_layer(exp_file: &Path, layers: &[usize], opts: &GlobalOptions) -> Result<Vec<LayerRow>> {
    let mut exp = read_experiment(exp_file)?;
    apply_overrides(&mut exp, opts);
    let num_layers = exp.model.num_layers;
    if layers.is_empty() {
        return Err(Error::InvalidConfig("layer list is empty".into()));
    }
    if let Some(&layer) = layers.iter().find(|&&l| l == 0 || l > num_layers) {
        return Err(Error::LayerOutOfRange { layer, num_layers });
    }
    let mut rows = Vec::new();
    for &layer in layers {
        let mut e = exp.clone();
        e.model.tap_layer = layer;
        let (report, _) = run_experiment_with_models(&e, &parent_dir(exp_file), opts.jobs)
            .stage(format!("running with tap layer {layer}"))?;
        rows.extend(report.summary.iter().map(|s| LayerRow {
            tap_layer: layer,
            k: s.k,
            mean_accuracy: s.mean_accuracy,
            std_accuracy: s.std_accuracy,
        }));
    }
    let out = output_dir(&exp, exp_file, opts);
    create_dir(&out)?;
    let mut w = csv::Writer::from_path(out.join(ABLATION_CSV)).stage("writing ablation report")?;
    w.write_record(["tap_layer", "method", "K", "mean_accuracy", "std_accuracy"])
        .stage("writing ablation report")?;
    for r in &rows {
        w.write_record([
            r.tap_layer.to_string(),
            exp.train.method.to_string(),
            r.k.to_string(),
            format_f64(r.mean_accuracy),
            format_f64(r.std_accuracy),
        ])
        .stage("writing ablation report")?;
    }
    w.flush().stage("writing ablation report")?;
    Ok(rows)
}
