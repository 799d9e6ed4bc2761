//! Dense vector math, the AdamW optimizer and a central-difference gradient
//! oracle.
//!
//! Everything here works on plain `f64` slices. Functions are pure: the
//! optimizer returns a new state instead of mutating one in place.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms below this are treated as zero vectors.
pub const NORM_FLOOR: f64 = 1e-12;

/// Default step for [`finite_diff_grad`].
pub const FD_EPS: f64 = 1e-5;

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { expected, found });
    }
    Ok(())
}

pub fn dot(u: &[f64], v: &[f64]) -> Result<f64> {
    check_dim(u.len(), v.len())?;
    Ok(u.iter().zip(v).map(|(a, b)| a * b).sum())
}

pub fn norm(u: &[f64]) -> f64 {
    u.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Cosine similarity `u·v / (‖u‖‖v‖)`.
///
/// Zero-norm inputs are an error rather than a silent zero similarity.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    let d = dot(u, v)?;
    let (nu, nv) = (norm(u), norm(v));
    if nu < NORM_FLOOR || nv < NORM_FLOOR {
        return Err(Error::ZeroNormVector);
    }
    Ok(d / (nu * nv))
}

/// Cosine similarity together with its partial derivatives with respect to
/// both arguments.
pub(crate) fn cosine_with_grad(u: &[f64], v: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let d = dot(u, v)?;
    let (nu, nv) = (norm(u), norm(v));
    if nu < NORM_FLOOR || nv < NORM_FLOOR {
        return Err(Error::ZeroNormVector);
    }
    let c = d / (nu * nv);
    let inv = 1.0 / (nu * nv);
    let (cu, cv) = (c / (nu * nu), c / (nv * nv));
    let du = u.iter().zip(v).map(|(a, b)| b * inv - cu * a).collect();
    let dv = u.iter().zip(v).map(|(a, b)| a * inv - cv * b).collect();
    Ok((c, du, dv))
}

/// Sum of cosine similarities between `r` and every member of `set`.
///
/// The empty set yields 0.
pub fn set_similarity<V: AsRef<[f64]>>(r: &[f64], set: &[V]) -> Result<f64> {
    let mut total = 0.0;
    for v in set {
        total += cosine(r, v.as_ref())?;
    }
    Ok(total)
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::EmptyInput);
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::EmptyInput);
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    let lse = log_sum_exp(logits);
    Ok(logits.iter().map(|x| x - lse).collect())
}

/// `ln Σ exp(x_i)` for a non-empty slice.
pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for OptimHyper {
    fn default() -> Self {
        Self {
            learning_rate: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl OptimHyper {
    /// A zero learning rate is accepted: it turns every step into a no-op.
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.epsilon > 0.0
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("optimizer hyperparameters {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
}

impl OptimState {
    pub fn new(num_params: usize) -> Self {
        Self {
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
            step_count: 0,
        }
    }
}

/// One AdamW step with bias correction and decoupled weight decay.
pub fn adamw_step(
    params: &[f64],
    grads: &[f64],
    state: &OptimState,
    hyper: &OptimHyper,
) -> Result<(Vec<f64>, OptimState)> {
    check_dim(params.len(), grads.len())?;
    check_dim(params.len(), state.first_moment.len())?;
    check_dim(params.len(), state.second_moment.len())?;

    let step_count = state.step_count + 1;
    let t = step_count as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    let lr = hyper.learning_rate;

    let mut next = Vec::with_capacity(params.len());
    let mut m_next = Vec::with_capacity(params.len());
    let mut v_next = Vec::with_capacity(params.len());
    for (((&p, &g), &m), &v) in params
        .iter()
        .zip(grads)
        .zip(&state.first_moment)
        .zip(&state.second_moment)
    {
        let m = hyper.beta1 * m + (1.0 - hyper.beta1) * g;
        let v = hyper.beta2 * v + (1.0 - hyper.beta2) * g * g;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        let decayed = p - lr * hyper.weight_decay * p;
        next.push(decayed - lr * m_hat / (v_hat.sqrt() + hyper.epsilon));
        m_next.push(m);
        v_next.push(v);
    }
    if next.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("optimizer update"));
    }
    Ok((
        next,
        OptimState {
            first_moment: m_next,
            second_moment: v_next,
            step_count,
        },
    ))
}

/// Central-difference gradient of `f` at `params`.
pub fn finite_diff_grad<F>(f: F, params: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        probe[i] = params[i] + eps;
        let plus = f(&probe);
        probe[i] = params[i] - eps;
        let minus = f(&probe);
        probe[i] = params[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFiniteEvaluation(i));
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}
