//! Training objectives: cross-entropy over label scores and the two
//! cross-lingual contrastive terms.
//!
//! Both contrastive losses share one shape. For each target representation
//! `t_i` there is a positive set `P_i` and a negative set `N_i` of source
//! representations, and `φ(t, S) = Σ_{s∈S} cos(t, s)`.
//!
//! * XRCL: `P_i` is the parallel twin of `t_i`, `N_i` every other source.
//! * XCCL: `P_i` are the sources sharing `t_i`'s label, `N_i` the rest.
//!
//! With [`DenominatorMode::NegativesOnly`] the per-target term is
//! `-log(exp(φ(t_i, P_i)/τ) / exp(φ(t_i, N_i)/τ)) = (φ(t_i, N_i) - φ(t_i, P_i)) / τ`.
//! [`DenominatorMode::InfoNce`] instead uses
//! `-φ⁺/τ + log(exp(φ⁺/τ) + Σ_{n∈N_i} exp(cos(t_i, n)/τ))`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{accumulate_gradient, forward, ForwardTrace, ModelConfig, ModelParams};
use crate::numerics::{cosine_with_grad, log_softmax, log_sum_exp, softmax};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    CeOnly,
    CePlusXrcl,
    CePlusXccl,
}

/// How the positive-set similarity of XCCL is aggregated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhiMode {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenominatorMode {
    /// Only the negative set appears in the denominator.
    #[default]
    NegativesOnly,
    /// Standard InfoNCE: positive plus every negative in a log-sum-exp.
    InfoNce,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub temperature: f64,
    pub objective: Objective,
    pub phi_mode: PhiMode,
    pub denominator_mode: DenominatorMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            objective: Objective::CeOnly,
            phi_mode: PhiMode::Sum,
            denominator_mode: DenominatorMode::NegativesOnly,
        }
    }
}

impl LossConfig {
    pub fn with_objective(mut self, objective: Objective) -> Self {
        self.objective = objective;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.temperature > 0.0 && self.temperature.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "temperature must be positive, got {}",
                self.temperature
            )))
        }
    }
}

/// Target/source representations entering a contrastive term.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub target_reprs: Vec<Vec<f64>>,
    pub source_reprs: Vec<Vec<f64>>,
    pub target_labels: Vec<usize>,
    pub source_labels: Vec<usize>,
    /// `pairing[i]` is the source index of target `i`'s translation.
    pub pairing: Option<Vec<usize>>,
}

impl ContrastiveBatch {
    fn check(&self) -> Result<()> {
        if self.target_reprs.len() != self.target_labels.len() || self.source_reprs.len() != self.source_labels.len() {
            return Err(Error::ShapeMismatch("representation and label counts differ".into()));
        }
        let dim = self
            .target_reprs
            .iter()
            .chain(&self.source_reprs)
            .map(Vec::len)
            .next()
            .unwrap_or(0);
        for r in self.target_reprs.iter().chain(&self.source_reprs) {
            crate::numerics::check_dim(dim, r.len())?;
        }
        Ok(())
    }

    fn bijective_pairing(&self) -> Result<&[usize]> {
        let pairing = self.pairing.as_deref().ok_or(Error::MissingPairing)?;
        let n = self.target_reprs.len();
        if pairing.len() != n || self.source_reprs.len() != n {
            return Err(Error::MissingPairing);
        }
        let mut seen = vec![false; n];
        for &j in pairing {
            if j >= n || seen[j] {
                return Err(Error::MissingPairing);
            }
            seen[j] = true;
        }
        Ok(pairing)
    }
}

/// Positive and negative source indices for one target.
struct ContrastSets {
    positives: Vec<usize>,
    negatives: Vec<usize>,
}

fn xrcl_sets(batch: &ContrastiveBatch) -> Result<Vec<ContrastSets>> {
    let pairing = batch.bijective_pairing()?;
    let n = batch.source_reprs.len();
    Ok(pairing
        .iter()
        .map(|&twin| ContrastSets {
            positives: vec![twin],
            negatives: (0..n).filter(|&j| j != twin).collect(),
        })
        .collect())
}

fn xccl_sets(batch: &ContrastiveBatch) -> Result<Vec<ContrastSets>> {
    batch
        .target_labels
        .iter()
        .map(|&y| {
            let (positives, negatives): (Vec<usize>, Vec<usize>) =
                (0..batch.source_labels.len()).partition(|&j| batch.source_labels[j] == y);
            if positives.is_empty() {
                return Err(Error::NoPositiveAvailable(y));
            }
            Ok(ContrastSets { positives, negatives })
        })
        .collect()
}

struct ContrastiveOutput {
    loss: f64,
    d_targets: Vec<Vec<f64>>,
    d_sources: Vec<Vec<f64>>,
}

fn contrastive(
    batch: &ContrastiveBatch,
    sets: &[ContrastSets],
    cfg: &LossConfig,
    positive_mean: bool,
) -> Result<ContrastiveOutput> {
    cfg.validate()?;
    let tau = cfg.temperature;
    let dim = batch.target_reprs.first().map_or(0, Vec::len);
    let mut d_targets = vec![vec![0.0; dim]; batch.target_reprs.len()];
    let mut d_sources = vec![vec![0.0; dim]; batch.source_reprs.len()];
    let mut loss = 0.0;

    for (i, set) in sets.iter().enumerate() {
        let t = &batch.target_reprs[i];
        let pos_terms = set
            .positives
            .iter()
            .map(|&j| cosine_with_grad(t, &batch.source_reprs[j]).map(|g| (j, g)))
            .collect::<Result<Vec<_>>>()?;
        let neg_terms = set
            .negatives
            .iter()
            .map(|&j| cosine_with_grad(t, &batch.source_reprs[j]).map(|g| (j, g)))
            .collect::<Result<Vec<_>>>()?;

        let mut pos = 0.0;
        for (_, (c, _, _)) in &pos_terms {
            pos += c;
        }
        let pos_scale = if positive_mean {
            1.0 / pos_terms.len() as f64
        } else {
            1.0
        };
        if positive_mean {
            pos /= pos_terms.len() as f64;
        }

        // dL/dφ⁺ and dL/dcos for each negative.
        let (term, d_pos, d_negs): (f64, f64, Vec<f64>) = match cfg.denominator_mode {
            DenominatorMode::NegativesOnly => {
                let mut neg = 0.0;
                for (_, (c, _, _)) in &neg_terms {
                    neg += c;
                }
                ((neg - pos) / tau, -1.0 / tau, vec![1.0 / tau; neg_terms.len()])
            }
            DenominatorMode::InfoNce => {
                let mut scaled = Vec::with_capacity(neg_terms.len() + 1);
                scaled.push(pos / tau);
                scaled.extend(neg_terms.iter().map(|(_, (c, _, _))| c / tau));
                let lse = log_sum_exp(&scaled);
                let weights = softmax(&scaled)?;
                (
                    lse - pos / tau,
                    (weights[0] - 1.0) / tau,
                    weights[1..].iter().map(|w| w / tau).collect(),
                )
            }
        };
        loss += term;

        let d_t = &mut d_targets[i];
        let pos_coeff = d_pos * pos_scale;
        for (j, (_, du, dv)) in &pos_terms {
            for k in 0..dim {
                d_t[k] += pos_coeff * du[k];
                d_sources[*j][k] += pos_coeff * dv[k];
            }
        }
        for ((j, (_, du, dv)), coeff) in neg_terms.iter().zip(&d_negs) {
            for k in 0..dim {
                d_t[k] += coeff * du[k];
                d_sources[*j][k] += coeff * dv[k];
            }
        }
    }

    Ok(ContrastiveOutput {
        loss,
        d_targets,
        d_sources,
    })
}

/// `-log softmax(logits)[y]`, evaluated in log space.
pub fn cross_entropy(logits: &[f64], y: usize) -> Result<f64> {
    if y >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label: y,
            num_labels: logits.len(),
        });
    }
    Ok(-log_softmax(logits)?[y])
}

fn cross_entropy_with_grad(logits: &[f64], y: usize) -> Result<(f64, Vec<f64>)> {
    let loss = cross_entropy(logits, y)?;
    let mut grad = softmax(logits)?;
    grad[y] -= 1.0;
    Ok((loss, grad))
}

/// Cross-lingual representation contrastive loss. Requires a bijective pairing.
pub fn xrcl_loss(batch: &ContrastiveBatch, cfg: &LossConfig) -> Result<f64> {
    batch.check()?;
    let sets = xrcl_sets(batch)?;
    Ok(contrastive(batch, &sets, cfg, false)?.loss)
}

/// Cross-lingual class contrastive loss. Positives are same-label sources.
pub fn xccl_loss(batch: &ContrastiveBatch, cfg: &LossConfig) -> Result<f64> {
    batch.check()?;
    let sets = xccl_sets(batch)?;
    Ok(contrastive(batch, &sets, cfg, cfg.phi_mode == PhiMode::Mean)?.loss)
}

fn contrastive_for_objective(batch: &ContrastiveBatch, cfg: &LossConfig) -> Result<Option<ContrastiveOutput>> {
    batch.check()?;
    match cfg.objective {
        Objective::CeOnly => Ok(None),
        Objective::CePlusXrcl => {
            let sets = xrcl_sets(batch)?;
            contrastive(batch, &sets, cfg, false).map(Some)
        }
        Objective::CePlusXccl => {
            let sets = xccl_sets(batch)?;
            contrastive(batch, &sets, cfg, cfg.phi_mode == PhiMode::Mean).map(Some)
        }
    }
}

/// A labelled batch of raw inputs from both languages.
///
/// Cross-entropy runs over every target and source instance; the contrastive
/// term contrasts targets against sources.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpisodeBatch {
    pub target_features: Vec<Vec<f64>>,
    pub target_labels: Vec<usize>,
    pub source_features: Vec<Vec<f64>>,
    pub source_labels: Vec<usize>,
    pub pairing: Option<Vec<usize>>,
}

impl EpisodeBatch {
    /// A single-language batch, as used during source fine-tuning.
    pub fn monolingual(features: Vec<Vec<f64>>, labels: Vec<usize>) -> Self {
        Self {
            source_features: features,
            source_labels: labels,
            ..Default::default()
        }
    }
}

/// Forward outputs of a batch: head logits and tap-layer representations.
#[derive(Debug, Clone)]
pub struct BatchOutputs {
    pub target_traces: Vec<ForwardTrace>,
    pub source_traces: Vec<ForwardTrace>,
    pub target_labels: Vec<usize>,
    pub source_labels: Vec<usize>,
    pub pairing: Option<Vec<usize>>,
    pub tap_layer: usize,
}

impl BatchOutputs {
    pub fn compute(params: &ModelParams, config: &ModelConfig, batch: &EpisodeBatch) -> Result<Self> {
        let run = |xs: &[Vec<f64>]| {
            xs.iter()
                .map(|x| forward(params, config, x))
                .collect::<Result<Vec<_>>>()
        };
        Ok(Self {
            target_traces: run(&batch.target_features)?,
            source_traces: run(&batch.source_features)?,
            target_labels: batch.target_labels.clone(),
            source_labels: batch.source_labels.clone(),
            pairing: batch.pairing.clone(),
            tap_layer: config.tap_layer,
        })
    }

    pub fn contrastive_batch(&self) -> ContrastiveBatch {
        let taps = |traces: &[ForwardTrace]| traces.iter().map(|t| t.activations[self.tap_layer].clone()).collect();
        ContrastiveBatch {
            target_reprs: taps(&self.target_traces),
            source_reprs: taps(&self.source_traces),
            target_labels: self.target_labels.clone(),
            source_labels: self.source_labels.clone(),
            pairing: self.pairing.clone(),
        }
    }

    fn labelled(&self) -> impl Iterator<Item = (&ForwardTrace, usize)> {
        self.target_traces
            .iter()
            .zip(self.target_labels.iter().copied())
            .chain(self.source_traces.iter().zip(self.source_labels.iter().copied()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub cross_entropy: f64,
    pub contrastive: f64,
    pub total: f64,
}

/// Summed cross-entropy plus the objective's contrastive term (unweighted).
pub fn total_loss(outputs: &BatchOutputs, cfg: &LossConfig) -> Result<LossBreakdown> {
    let mut ce = 0.0;
    for (trace, y) in outputs.labelled() {
        ce += cross_entropy(&trace.logits, y)?;
    }
    let contrastive = match contrastive_for_objective(&outputs.contrastive_batch(), cfg)? {
        Some(out) => out.loss,
        None => 0.0,
    };
    Ok(LossBreakdown {
        cross_entropy: ce,
        contrastive,
        total: ce + contrastive,
    })
}

/// Forward pass plus [`total_loss`].
pub fn batch_loss(
    params: &ModelParams,
    model: &ModelConfig,
    batch: &EpisodeBatch,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    total_loss(&BatchOutputs::compute(params, model, batch)?, cfg)
}

/// Loss and its analytic gradient with respect to every model parameter,
/// flattened in [`ModelParams::flatten`] order.
pub fn backward(
    batch: &EpisodeBatch,
    params: &ModelParams,
    model: &ModelConfig,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let outputs = BatchOutputs::compute(params, model, batch)?;
    let contrast = contrastive_for_objective(&outputs.contrastive_batch(), cfg)?;
    let mut grad = ModelParams::zeros(model);
    let mut ce = 0.0;

    let n_targets = outputs.target_traces.len();
    for (idx, (trace, y)) in outputs.labelled().enumerate() {
        let (loss, d_logits) = cross_entropy_with_grad(&trace.logits, y)?;
        ce += loss;
        let d_tap = contrast.as_ref().map(|c| {
            if idx < n_targets {
                c.d_targets[idx].as_slice()
            } else {
                c.d_sources[idx - n_targets].as_slice()
            }
        });
        accumulate_gradient(params, model, trace, &d_logits, d_tap, &mut grad);
    }

    let contrastive = contrast.map_or(0.0, |c| c.loss);
    let breakdown = LossBreakdown {
        cross_entropy: ce,
        contrastive,
        total: ce + contrastive,
    };
    Ok((breakdown, grad.flatten()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::numerics::{cosine, finite_diff_grad, FD_EPS};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn negatives_only(tau: f64) -> LossConfig {
        LossConfig {
            temperature: tau,
            ..Default::default()
        }
    }

    fn paired(targets: Vec<Vec<f64>>, sources: Vec<Vec<f64>>, labels: Vec<usize>) -> ContrastiveBatch {
        let n = targets.len();
        ContrastiveBatch {
            target_reprs: targets,
            source_reprs: sources,
            target_labels: labels.clone(),
            source_labels: labels,
            pairing: Some((0..n).collect()),
        }
    }

    #[test]
    fn cross_entropy_examples() {
        assert_abs_diff_eq!(cross_entropy(&[0.0, 0.0], 0).unwrap(), 2f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(
            cross_entropy(&[1f64.ln(), 3f64.ln()], 1).unwrap(),
            -(0.75f64).ln(),
            epsilon = 1e-15
        );
        let confident = cross_entropy(&[100.0, 0.0], 0).unwrap();
        assert!(confident.is_finite() && confident < 1e-40);
        assert!(matches!(
            cross_entropy(&[0.0, 0.0], 2),
            Err(Error::LabelOutOfRange {
                label: 2,
                num_labels: 2
            })
        ));
    }

    #[test]
    fn xrcl_single_pair_reduces_to_negative_cosine() {
        let b = paired(vec![vec![0.6, 0.8]], vec![vec![0.6, 0.8]], vec![0]);
        assert_abs_diff_eq!(xrcl_loss(&b, &negatives_only(1.0)).unwrap(), -1.0, epsilon = 1e-15);
    }

    #[test]
    fn xrcl_two_pairs() {
        let b = paired(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![0, 1],
        );
        assert_eq!(xrcl_loss(&b, &negatives_only(1.0)).unwrap(), -2.0);
        let info = LossConfig {
            denominator_mode: DenominatorMode::InfoNce,
            ..negatives_only(1.0)
        };
        let want = 2.0 * (1.0 + (-1f64).exp()).ln();
        assert_abs_diff_eq!(xrcl_loss(&b, &info).unwrap(), want, epsilon = 1e-15);
        assert_abs_diff_eq!(want, 0.6266, epsilon = 1e-4);
    }

    #[test]
    fn xrcl_requires_bijective_pairing() {
        let mut b = paired(vec![vec![1.0, 0.0]; 2], vec![vec![0.0, 1.0]; 2], vec![0, 1]);
        b.pairing = None;
        assert!(matches!(
            xrcl_loss(&b, &negatives_only(1.0)),
            Err(Error::MissingPairing)
        ));
        b.pairing = Some(vec![0, 0]);
        assert!(matches!(
            xrcl_loss(&b, &negatives_only(1.0)),
            Err(Error::MissingPairing)
        ));
        b.pairing = Some(vec![1, 0]);
        assert!(xrcl_loss(&b, &negatives_only(1.0)).is_ok());
    }

    #[test]
    fn zero_norm_representation_is_an_error() {
        let b = paired(vec![vec![0.0, 0.0]], vec![vec![1.0, 0.0]], vec![0]);
        assert!(matches!(
            xrcl_loss(&b, &negatives_only(1.0)),
            Err(Error::ZeroNormVector)
        ));
        assert!(matches!(
            xccl_loss(&b, &negatives_only(1.0)),
            Err(Error::ZeroNormVector)
        ));
    }

    #[test]
    fn xccl_examples() {
        let b = ContrastiveBatch {
            target_reprs: vec![vec![1.0, 0.0]],
            source_reprs: vec![vec![1.0, 0.0], vec![1.0, 0.0]],
            target_labels: vec![0],
            source_labels: vec![0, 0],
            pairing: None,
        };
        assert_eq!(xccl_loss(&b, &negatives_only(1.0)).unwrap(), -2.0);
        let mean = LossConfig {
            phi_mode: PhiMode::Mean,
            ..negatives_only(1.0)
        };
        assert_eq!(xccl_loss(&b, &mean).unwrap(), -1.0);

        let b = ContrastiveBatch {
            target_reprs: vec![vec![1.0, 0.0]],
            source_reprs: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            target_labels: vec![0],
            source_labels: vec![0, 1],
            pairing: None,
        };
        assert_eq!(xccl_loss(&b, &negatives_only(0.5)).unwrap(), -2.0);
    }

    #[test]
    fn xccl_without_positive_names_the_class() {
        let b = ContrastiveBatch {
            target_reprs: vec![vec![1.0, 0.0]],
            source_reprs: vec![vec![1.0, 0.0]],
            target_labels: vec![2],
            source_labels: vec![0],
            pairing: None,
        };
        assert!(matches!(
            xccl_loss(&b, &negatives_only(1.0)),
            Err(Error::NoPositiveAvailable(2))
        ));
    }

    #[test]
    fn non_positive_temperature_rejected() {
        let b = paired(vec![vec![1.0, 0.0]], vec![vec![1.0, 0.0]], vec![0]);
        assert!(matches!(
            xrcl_loss(&b, &negatives_only(0.0)),
            Err(Error::InvalidConfig(_))
        ));
    }

    fn tiny_batch() -> (ModelConfig, ModelParams, EpisodeBatch) {
        let model = ModelConfig::new(4, 4, 2, 2).with_tap_layer(1);
        let params = init_params(&model, 21);
        let batch = EpisodeBatch {
            target_features: vec![vec![0.3, -0.2, 0.9, 0.1], vec![-0.5, 0.4, 0.2, -0.8]],
            target_labels: vec![0, 1],
            source_features: vec![vec![0.4, -0.1, 0.7, 0.3], vec![-0.6, 0.5, 0.1, -0.6]],
            source_labels: vec![0, 1],
            pairing: Some(vec![0, 1]),
        };
        (model, params, batch)
    }

    #[test]
    fn ce_only_total_is_the_cross_entropy_sum() {
        let (model, params, batch) = tiny_batch();
        let out = BatchOutputs::compute(&params, &model, &batch).unwrap();
        let cfg = LossConfig::default();
        let total = total_loss(&out, &cfg).unwrap();
        let mut ce = 0.0;
        for t in out
            .target_traces
            .iter()
            .zip(&batch.target_labels)
            .chain(out.source_traces.iter().zip(&batch.source_labels))
        {
            ce += cross_entropy(&t.0.logits, *t.1).unwrap();
        }
        assert_eq!(total.total, ce);
        assert_eq!(total.contrastive, 0.0);
    }

    #[test]
    fn contrastive_term_is_additive() {
        let (model, params, batch) = tiny_batch();
        let out = BatchOutputs::compute(&params, &model, &batch).unwrap();
        let base = total_loss(&out, &LossConfig::default()).unwrap();
        let cfg = LossConfig::default().with_objective(Objective::CePlusXrcl);
        let with = total_loss(&out, &cfg).unwrap();
        let x = xrcl_loss(&out.contrastive_batch(), &cfg).unwrap();
        assert_eq!(with.contrastive, x);
        assert_eq!(with.cross_entropy, base.total);
        assert_abs_diff_eq!(with.total - base.total, x, epsilon = 1e-12);
    }

    #[test]
    fn orthogonal_pair_contributes_nothing() {
        let b = paired(vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]], vec![0]);
        assert_eq!(xrcl_loss(&b, &negatives_only(0.1)).unwrap(), 0.0);
    }

    #[test]
    fn ce_head_bias_gradient_is_softmax_minus_onehot() {
        let model = ModelConfig::new(3, 3, 1, 3);
        let params = init_params(&model, 4);
        let x = vec![0.2, -0.7, 0.5];
        let batch = EpisodeBatch::monolingual(vec![x.clone()], vec![1]);
        let (_, grad) = backward(&batch, &params, &model, &LossConfig::default()).unwrap();
        let grad = ModelParams::unflatten(&model, &grad).unwrap();
        let trace = forward(&params, &model, &x).unwrap();
        let p = softmax(&trace.logits).unwrap();
        for (v, pv) in p.iter().enumerate() {
            let want = pv - if v == 1 { 1.0 } else { 0.0 };
            assert_abs_diff_eq!(grad.head.bias[v], want, epsilon = 1e-15);
        }
    }

    #[test]
    fn flat_coordinate_has_zero_gradient() {
        // A hidden unit with zero outgoing head weights and zero input cannot
        // move the loss.
        let model = ModelConfig::new(2, 2, 1, 2);
        let mut params = init_params(&model, 1);
        params.head.weights[1] = 0.0;
        params.head.weights[3] = 0.0;
        let batch = EpisodeBatch::monolingual(vec![vec![0.5, 0.0]], vec![0]);
        let (_, grad) = backward(&batch, &params, &model, &LossConfig::default()).unwrap();
        let grad = ModelParams::unflatten(&model, &grad).unwrap();
        assert_eq!(grad.layers[0].weights[2..4], [0.0, 0.0]);
        assert_eq!(grad.layers[0].bias[1], 0.0);
        // the second input coordinate is zero, so its weights get no gradient
        assert_eq!(grad.layers[0].weights[1], 0.0);
    }

    #[test]
    fn backward_matches_finite_differences_on_tiny_batch() {
        let (model, params, batch) = tiny_batch();
        for objective in [Objective::CeOnly, Objective::CePlusXrcl, Objective::CePlusXccl] {
            let cfg = LossConfig::default().with_objective(objective);
            let (_, grad) = backward(&batch, &params, &model, &cfg).unwrap();
            let oracle = finite_diff_grad(
                |flat| {
                    let p = ModelParams::unflatten(&model, flat).unwrap();
                    batch_loss(&p, &model, &batch, &cfg).unwrap().total
                },
                &params.flatten(),
                FD_EPS,
            )
            .unwrap();
            for (a, b) in grad.iter().zip(&oracle) {
                assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()), "{objective:?}: {a} vs {b}");
            }
        }
    }

    fn vec2() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-1.0f64..1.0, 3).prop_filter("norm", |v| crate::numerics::norm(v) > 1e-2)
    }

    fn batch_strategy() -> impl Strategy<Value = ContrastiveBatch> {
        (1usize..5).prop_flat_map(|n| {
            (
                prop::collection::vec(vec2(), n),
                prop::collection::vec(vec2(), n),
                prop::collection::vec(0usize..2, n),
            )
                .prop_map(|(t, s, y)| paired(t, s, y))
        })
    }

    proptest! {
        #[test]
        fn xrcl_negatives_only_closed_form(batch in batch_strategy(), tau in 0.05f64..2.0) {
            let got = xrcl_loss(&batch, &negatives_only(tau)).unwrap();
            let n = batch.target_reprs.len();
            let mut want = 0.0;
            for i in 0..n {
                let t = &batch.target_reprs[i];
                let mut neg = 0.0;
                for j in (0..n).filter(|&j| j != i) {
                    neg += cosine(t, &batch.source_reprs[j]).unwrap();
                }
                want += (neg - cosine(t, &batch.source_reprs[i]).unwrap()) / tau;
            }
            prop_assert_eq!(got, want);
        }

        #[test]
        fn losses_scale_invariant(batch in batch_strategy(), alpha in 0.01f64..100.0, which in 0usize..4) {
            let mut scaled = batch.clone();
            let idx = which % batch.target_reprs.len();
            for x in &mut scaled.target_reprs[idx] { *x *= alpha; }
            for x in &mut scaled.source_reprs[0] { *x *= alpha; }
            let cfg = negatives_only(0.1);
            prop_assert!((xrcl_loss(&batch, &cfg).unwrap() - xrcl_loss(&scaled, &cfg).unwrap()).abs() < 1e-9);
            let mut sb = batch.clone();
            sb.source_labels = sb.target_labels.clone();
            let mut ss = scaled.clone();
            ss.source_labels = ss.target_labels.clone();
            prop_assert!((xccl_loss(&sb, &cfg).unwrap() - xccl_loss(&ss, &cfg).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn negatives_only_scales_inversely_with_temperature(batch in batch_strategy(), tau in 0.05f64..5.0) {
            let one = xrcl_loss(&batch, &negatives_only(1.0)).unwrap();
            let scaled = xrcl_loss(&batch, &negatives_only(tau)).unwrap();
            prop_assert!((scaled - one / tau).abs() < 1e-9 * (1.0 + scaled.abs()));
        }

        #[test]
        fn loss_monotone_in_positive_and_negative_cosines(
            info in any::<bool>(),
            tau in 0.05f64..2.0,
            theta in 0.2f64..1.2,
            delta in 0.05f64..0.3,
        ) {
            let denominator_mode = if info { DenominatorMode::InfoNce } else { DenominatorMode::NegativesOnly };
            let cfg = LossConfig { temperature: tau, denominator_mode, ..Default::default() };
            let single = |pos_angle: f64, neg_angle: f64| {
                let b = ContrastiveBatch {
                    target_reprs: vec![vec![1.0, 0.0]],
                    source_reprs: vec![vec![pos_angle.cos(), pos_angle.sin()], vec![neg_angle.cos(), neg_angle.sin()]],
                    target_labels: vec![0],
                    source_labels: vec![0, 1],
                    pairing: None,
                };
                xccl_loss(&b, &cfg).unwrap()
            };
            prop_assert!(single(theta - delta, 1.5) < single(theta, 1.5));
            prop_assert!(single(theta, 1.5 - delta) > single(theta, 1.5));
        }
    }
}
