//! Two-phase transfer protocol.
//!
//! 1. Fine-tune on the source language with cross-entropy.
//! 2. Adapt on a K-shot episode holding target instances and their source
//!    counterparts, for a fixed number of epochs with no validation data.
//!
//! The adaptation methods differ only in the objective and in how the final
//! parameters are formed:
//!
//! | method       | objective            | final parameters            |
//! |--------------|----------------------|-----------------------------|
//! | `ft`         | CE                   | last step                   |
//! | `ca`         | CE                   | mean of per-epoch snapshots |
//! | `colap_xrcl` | CE + XRCL (tap layer) | last step                  |
//! | `colap_xccl` | CE + XCCL (tap layer) | last step                  |

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    class_prototypes, exemplar_scores, generate_synthetic, sample_episode, select_exemplars, Corpus, Episode, Instance,
    SelectionMode, SyntheticSpec,
};
use crate::error::{Error, Result, StageContext};
use crate::losses::{backward, DenominatorMode, EpisodeBatch, LossConfig, Objective, PhiMode};
use crate::model::{argmax, average_checkpoints, encode, init_params, ModelConfig, ModelParams};
use crate::numerics::{adamw_step, cosine, OptimHyper, OptimState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Ft,
    Ca,
    ColapXrcl,
    ColapXccl,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Ft, Method::Ca, Method::ColapXrcl, Method::ColapXccl];

    pub fn objective(self) -> Objective {
        match self {
            Method::Ft | Method::Ca => Objective::CeOnly,
            Method::ColapXrcl => Objective::CePlusXrcl,
            Method::ColapXccl => Objective::CePlusXccl,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Ft => "ft",
            Method::Ca => "ca",
            Method::ColapXrcl => "colap_xrcl",
            Method::ColapXccl => "colap_xccl",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Contrastive settings; the objective itself follows from [`Method`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSettings {
    pub temperature: f64,
    pub phi_mode: PhiMode,
    pub denominator_mode: DenominatorMode,
}

impl Default for LossSettings {
    fn default() -> Self {
        let d = LossConfig::default();
        Self {
            temperature: d.temperature,
            phi_mode: d.phi_mode,
            denominator_mode: d.denominator_mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub source_epochs: usize,
    pub adapt_epochs: usize,
    pub optim: OptimHyper,
    pub loss: LossSettings,
    pub method: Method,
    pub seeds: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            source_epochs: 5,
            adapt_epochs: 10,
            optim: OptimHyper::default(),
            loss: LossSettings::default(),
            method: Method::Ft,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

impl TrainConfig {
    pub fn loss_config(&self, objective: Objective) -> LossConfig {
        LossConfig {
            temperature: self.loss.temperature,
            objective,
            phi_mode: self.loss.phi_mode,
            denominator_mode: self.loss.denominator_mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one seed is required".into()));
        }
        self.optim.validate()?;
        self.loss_config(Objective::CeOnly).validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLoss {
    pub epoch: usize,
    /// Mean per-instance loss over the epoch, measured before each update.
    pub loss: f64,
}

/// Independent stream seeds derived from one run seed.
pub(crate) fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_INIT: u64 = 1;
const STREAM_SOURCE_SHUFFLE: u64 = 2;
const STREAM_EPISODE: u64 = 3;
const STREAM_ADAPT_SHUFFLE: u64 = 4;

#[allow(clippy::too_many_arguments)]
fn optimize<F>(
    params: &ModelParams,
    model: &ModelConfig,
    hyper: &OptimHyper,
    epochs: usize,
    units: usize,
    batch_size: usize,
    seed: u64,
    mut make_batch: F,
    mut on_epoch_end: impl FnMut(&ModelParams),
    loss_cfg: &LossConfig,
) -> Result<(ModelParams, Vec<EpochLoss>)>
where
    F: FnMut(&[usize]) -> (EpisodeBatch, usize),
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flat = params.flatten();
    let mut state = OptimState::new(flat.len());
    let mut current = params.clone();
    let mut history = Vec::with_capacity(epochs);
    let mut order: Vec<usize> = (0..units).collect();
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0;
        for chunk in order.chunks(batch_size) {
            let (batch, instances) = make_batch(chunk);
            let (loss, grad) = backward(&batch, &current, model, loss_cfg)?;
            let (next, next_state) = adamw_step(&flat, &grad, &state, hyper)?;
            flat = next;
            state = next_state;
            current = ModelParams::unflatten(model, &flat)?;
            total += loss.total;
            count += instances;
        }
        if !total.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        history.push(EpochLoss {
            epoch,
            loss: total / count as f64,
        });
        on_epoch_end(&current);
    }
    Ok((current, history))
}

/// Mini-batch cross-entropy fine-tuning on the source corpus.
pub fn train_source(
    params: &ModelParams,
    model: &ModelConfig,
    train: &TrainConfig,
    source: &Corpus,
    seed: u64,
) -> Result<(ModelParams, Vec<EpochLoss>)> {
    source.check_covers_labels()?;
    let cfg = train.loss_config(Objective::CeOnly);
    optimize(
        params,
        model,
        &train.optim,
        train.source_epochs,
        source.len(),
        train.batch_size,
        seed,
        |idx| {
            let features = idx.iter().map(|&i| source.instances[i].features.clone()).collect();
            let labels = idx.iter().map(|&i| source.instances[i].label).collect();
            (EpisodeBatch::monolingual(features, labels), idx.len())
        },
        |_| {},
        &cfg,
    )
}

/// Few-shot adaptation on one episode.
///
/// Batches are drawn over episode positions, so a batch holds the targets at
/// those positions together with their source counterparts. Cross-entropy
/// covers both sides; the contrastive term (if any) contrasts them.
pub fn adapt_fewshot(
    params: &ModelParams,
    model: &ModelConfig,
    train: &TrainConfig,
    episode: &Episode,
    seed: u64,
) -> Result<(ModelParams, Vec<EpochLoss>)> {
    if train.method == Method::ColapXrcl && !episode.paired {
        return Err(Error::MethodEpisodeMismatch {
            method: train.method.to_string(),
        });
    }
    let cfg = train.loss_config(train.method.objective());
    let mut snapshots = Vec::new();
    let keep_snapshots = train.method == Method::Ca;
    let (last, history) = optimize(
        params,
        model,
        &train.optim,
        train.adapt_epochs,
        episode.k,
        train.batch_size,
        seed,
        |idx| {
            let pick = |side: &[Instance]| -> (Vec<Vec<f64>>, Vec<usize>) {
                idx.iter().map(|&i| (side[i].features.clone(), side[i].label)).unzip()
            };
            let (target_features, target_labels) = pick(&episode.target_instances);
            let (source_features, source_labels) = pick(&episode.source_instances);
            let batch = EpisodeBatch {
                target_features,
                target_labels,
                source_features,
                source_labels,
                pairing: episode.paired.then(|| (0..idx.len()).collect()),
            };
            (batch, 2 * idx.len())
        },
        |p| {
            if keep_snapshots {
                snapshots.push(p.clone());
            }
        },
        &cfg,
    )?;
    if keep_snapshots && !snapshots.is_empty() {
        Ok((average_checkpoints(&snapshots)?, history))
    } else {
        Ok((last, history))
    }
}

/// Fraction of instances whose top-scoring label (lowest index on ties) is
/// the true label.
pub fn evaluate(params: &ModelParams, model: &ModelConfig, test: &Corpus) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut correct = 0usize;
    for inst in &test.instances {
        let trace = crate::model::forward(params, model, &inst.features)?;
        if argmax(&trace.logits) == inst.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Mean tap-layer cosine over `(target, source)` pairs.
pub fn alignment_report(params: &ModelParams, model: &ModelConfig, pairs: &[(&Instance, &Instance)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut total = 0.0;
    for (t, s) in pairs {
        let (_, rt) = encode(params, model, &t.features)?;
        let (_, rs) = encode(params, model, &s.features)?;
        total += cosine(&rt, &rs)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Tap-layer representations of every corpus instance.
pub fn tap_representations(params: &ModelParams, model: &ModelConfig, corpus: &Corpus) -> Result<Vec<Vec<f64>>> {
    corpus
        .instances
        .iter()
        .map(|i| encode(params, model, &i.features).map(|(_, tap)| tap))
        .collect()
}

/// Prototype similarity score of every corpus instance.
pub fn score_corpus(params: &ModelParams, model: &ModelConfig, corpus: &Corpus) -> Result<Vec<f64>> {
    let reprs = tap_representations(params, model, corpus)?;
    let labels: Vec<usize> = corpus.instances.iter().map(|i| i.label).collect();
    let prototypes = class_prototypes(&reprs, &labels, corpus.num_labels)?;
    exemplar_scores(&reprs, &labels, &prototypes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusPaths {
    pub source: PathBuf,
    pub target_train: PathBuf,
    pub target_test: PathBuf,
}

/// One K value or a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KSetting {
    One(usize),
    Many(Vec<usize>),
}

impl KSetting {
    pub fn values(&self) -> Vec<usize> {
        match self {
            KSetting::One(k) => vec![*k],
            KSetting::Many(ks) => ks.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeConfig {
    pub k: KSetting,
    #[serde(default = "default_true")]
    pub paired: bool,
    #[serde(default)]
    pub selection: SelectionMode,
}

fn default_true() -> bool {
    true
}

/// The experiment file consumed by `colap run`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<CorpusPaths>,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub output_dir: PathBuf,
    pub episode: EpisodeConfig,
}

impl ExperimentFile {
    pub fn validate(&self) -> Result<()> {
        match (&self.synthetic, &self.corpus) {
            (Some(spec), None) => {
                spec.validate()?;
                if spec.dim != self.model.input_dim || spec.num_labels != self.model.num_labels {
                    return Err(Error::InvalidConfig(
                        "synthetic dim/num_labels must match model input_dim/num_labels".into(),
                    ));
                }
            }
            (None, Some(_)) => {}
            _ => {
                return Err(Error::InvalidConfig(
                    "exactly one of `synthetic` or `corpus` must be given".into(),
                ))
            }
        }
        self.model.validate()?;
        self.train.validate()?;
        let ks = self.episode.k.values();
        if ks.is_empty() || ks.contains(&0) {
            return Err(Error::InvalidConfig("episode K values must be positive".into()));
        }
        if self.train.method == Method::ColapXrcl
            && !self.episode.paired
            && self.episode.selection == SelectionMode::Random
        {
            return Err(Error::MethodEpisodeMismatch {
                method: self.train.method.to_string(),
            });
        }
        Ok(())
    }
}

/// Source corpus, parallel target training corpus and target test corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpora {
    pub source: Corpus,
    pub target_train: Corpus,
    pub target_test: Corpus,
}

/// Generates or loads the corpora. Relative corpus paths resolve against
/// `base_dir`.
pub fn load_corpora(exp: &ExperimentFile, base_dir: &Path) -> Result<Corpora> {
    if let Some(spec) = &exp.synthetic {
        let g = generate_synthetic(spec).stage("generating synthetic corpora")?;
        return Ok(Corpora {
            source: g.source,
            target_train: g.target_train,
            target_test: g.target_test,
        });
    }
    let paths = exp
        .corpus
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("no corpus given".into()))?;
    let n = exp.model.num_labels;
    let load = |p: &Path, what: &str| {
        Corpus::read_jsonl(&base_dir.join(p), n).stage(format!("loading {what} corpus {}", p.display()))
    };
    let corpora = Corpora {
        source: load(&paths.source, "source")?,
        target_train: load(&paths.target_train, "target_train")?,
        target_test: load(&paths.target_test, "target_test")?,
    };
    for c in [&corpora.source, &corpora.target_train, &corpora.target_test] {
        if c.dim().is_some_and(|d| d != exp.model.input_dim) {
            return Err(Error::DimensionMismatch {
                expected: exp.model.input_dim,
                found: c.dim().unwrap(),
            })
            .stage("loading corpora");
        }
    }
    Ok(corpora)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedRun {
    pub seed: u64,
    pub method: Method,
    pub k: usize,
    pub tap_layer: usize,
    pub accuracy: f64,
    pub zero_shot_accuracy: f64,
    /// Mean tap-layer cosine over the episode's positive pairs.
    pub alignment_before: f64,
    pub alignment_after: f64,
    /// Same statistic over every parallel pair of the target training corpus;
    /// `None` when the corpora carry no parallel links.
    pub corpus_alignment_before: Option<f64>,
    pub corpus_alignment_after: Option<f64>,
    pub source_loss: Vec<EpochLoss>,
    pub adapt_loss: Vec<EpochLoss>,
    pub selected_exemplar_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KSummary {
    pub k: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_zero_shot_accuracy: f64,
    pub mean_alignment_before: f64,
    pub mean_alignment_after: f64,
    pub mean_corpus_alignment_before: Option<f64>,
    pub mean_corpus_alignment_after: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub config: ExperimentFile,
    pub runs: Vec<SeedRun>,
    pub summary: Vec<KSummary>,
}

/// Source-fine-tuned model of one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceModel {
    pub seed: u64,
    pub params: ModelParams,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (0 for a single value).
fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn build_episode(
    exp: &ExperimentFile,
    corpora: &Corpora,
    source_params: &ModelParams,
    k: usize,
    seed: u64,
) -> Result<Episode> {
    match exp.episode.selection {
        SelectionMode::Random => sample_episode(&corpora.target_train, &corpora.source, k, exp.episode.paired, seed),
        mode => {
            let scores = score_corpus(source_params, &exp.model, &corpora.source)?;
            let ids = select_exemplars(&scores, &corpora.source, k, mode, seed)?;
            Episode::from_source_selection(&ids, &corpora.source, &corpora.target_train)
        }
    }
}

fn run_seed(exp: &ExperimentFile, corpora: &Corpora, seed: u64) -> Result<(Vec<SeedRun>, SourceModel)> {
    let model = &exp.model;
    let train = &exp.train;
    let init = init_params(model, derive_seed(seed, STREAM_INIT));
    let (source_params, source_loss) = train_source(
        &init,
        model,
        train,
        &corpora.source,
        derive_seed(seed, STREAM_SOURCE_SHUFFLE),
    )
    .stage(format!("source fine-tuning (seed {seed})"))?;
    let zero_shot = evaluate(&source_params, model, &corpora.target_test).stage("evaluating zero-shot model")?;

    let pairs = corpora.target_train.parallel_pairs(&corpora.source);
    let corpus_alignment = |p: &ModelParams| -> Result<Option<f64>> {
        if pairs.is_empty() {
            Ok(None)
        } else {
            alignment_report(p, model, &pairs).map(Some)
        }
    };
    let corpus_alignment_before = corpus_alignment(&source_params).stage("alignment report")?;

    let mut runs = Vec::new();
    for k in exp.episode.k.values() {
        let episode_seed = derive_seed(derive_seed(seed, STREAM_EPISODE), k as u64);
        let episode = build_episode(exp, corpora, &source_params, k, episode_seed)
            .stage(format!("building K={k} episode (seed {seed})"))?;
        let adapt_seed = derive_seed(derive_seed(seed, STREAM_ADAPT_SHUFFLE), k as u64);
        let (adapted, adapt_loss) = adapt_fewshot(&source_params, model, train, &episode, adapt_seed)
            .stage(format!("few-shot adaptation K={k} (seed {seed})"))?;
        let accuracy = evaluate(&adapted, model, &corpora.target_test).stage("evaluating adapted model")?;
        let episode_pairs: Vec<(&Instance, &Instance)> =
            episode.target_instances.iter().zip(&episode.source_instances).collect();
        let alignment_before = alignment_report(&source_params, model, &episode_pairs).stage("alignment report")?;
        let alignment_after = alignment_report(&adapted, model, &episode_pairs).stage("alignment report")?;
        let corpus_alignment_after = corpus_alignment(&adapted).stage("alignment report")?;
        runs.push(SeedRun {
            seed,
            method: train.method,
            k,
            tap_layer: model.tap_layer,
            accuracy,
            zero_shot_accuracy: zero_shot,
            alignment_before,
            alignment_after,
            corpus_alignment_before,
            corpus_alignment_after,
            source_loss: source_loss.clone(),
            adapt_loss,
            selected_exemplar_ids: episode.source_instances.iter().map(|i| i.id.clone()).collect(),
        });
    }
    Ok((
        runs,
        SourceModel {
            seed,
            params: source_params,
        },
    ))
}

/// Runs every seed (on up to `jobs` threads) and aggregates per K value.
///
/// Rows are ordered by seed (as listed), then K.
pub fn run_experiment_with_models(
    exp: &ExperimentFile,
    base_dir: &Path,
    jobs: usize,
) -> Result<(RunReport, Vec<SourceModel>)> {
    exp.validate().stage("validating experiment")?;
    let corpora = load_corpora(exp, base_dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let per_seed: Vec<(Vec<SeedRun>, SourceModel)> = pool.install(|| {
        exp.train
            .seeds
            .par_iter()
            .map(|&seed| run_seed(exp, &corpora, seed))
            .collect::<Result<Vec<_>>>()
    })?;

    let mut runs = Vec::new();
    let mut models = Vec::new();
    for (r, m) in per_seed {
        runs.extend(r);
        models.push(m);
    }

    let summary = exp
        .episode
        .k
        .values()
        .into_iter()
        .map(|k| {
            let rows: Vec<&SeedRun> = runs.iter().filter(|r| r.k == k).collect();
            let acc: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
            let zs: Vec<f64> = rows.iter().map(|r| r.zero_shot_accuracy).collect();
            let opt_mean = |f: fn(&SeedRun) -> Option<f64>| -> Option<f64> {
                let vals: Option<Vec<f64>> = rows.iter().map(|r| f(r)).collect();
                vals.map(|v| mean(&v))
            };
            KSummary {
                k,
                mean_accuracy: mean(&acc),
                std_accuracy: std_dev(&acc),
                mean_zero_shot_accuracy: mean(&zs),
                mean_alignment_before: mean(&rows.iter().map(|r| r.alignment_before).collect::<Vec<_>>()),
                mean_alignment_after: mean(&rows.iter().map(|r| r.alignment_after).collect::<Vec<_>>()),
                mean_corpus_alignment_before: opt_mean(|r| r.corpus_alignment_before),
                mean_corpus_alignment_after: opt_mean(|r| r.corpus_alignment_after),
            }
        })
        .collect();

    Ok((
        RunReport {
            config: exp.clone(),
            runs,
            summary,
        },
        models,
    ))
}

pub fn run_experiment(exp: &ExperimentFile, base_dir: &Path, jobs: usize) -> Result<RunReport> {
    run_experiment_with_models(exp, base_dir, jobs).map(|(report, _)| report)
}
