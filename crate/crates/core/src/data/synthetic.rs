//! Synthetic parallel corpora with a controllable cross-lingual shift.
//!
//! Source instances are noisy copies of unit-norm class means. Every target
//! training instance is its source twin pushed through a fixed orthogonal map
//! `Q` plus fresh noise. `Q` rotates `d/2` random orthogonal planes by the
//! same angle, so `rotation_angle` is exactly the angle between `x` and `Qx`
//! for any `x` when `d` is even (0 gives the identity).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Corpus, Instance};
use crate::error::{Error, Result};
use crate::numerics::norm;

pub const SOURCE_LANGUAGE: &str = "src";
pub const TARGET_LANGUAGE: &str = "tgt";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub num_labels: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub source_noise: f64,
    pub target_noise: f64,
    /// Radians in `[0, π]`.
    pub rotation_angle: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::InvalidSpec(msg.to_string()));
        if self.dim == 0 {
            return fail("dim must be positive");
        }
        if self.num_labels < 2 {
            return fail("num_labels must be at least 2");
        }
        if self.train_size < self.num_labels {
            return fail("train_size must cover every label");
        }
        if self.test_size == 0 {
            return fail("test_size must be positive");
        }
        if !(self.source_noise >= 0.0 && self.source_noise.is_finite())
            || !(self.target_noise >= 0.0 && self.target_noise.is_finite())
        {
            return fail("noise levels must be finite and non-negative");
        }
        if !(0.0..=std::f64::consts::PI).contains(&self.rotation_angle) {
            return fail("rotation_angle must lie in [0, pi]");
        }
        if self.dim == 1 && self.num_labels > 2 {
            return fail("a 1-dimensional space holds at most two distinct unit means");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpora {
    pub source: Corpus,
    pub target_train: Corpus,
    pub target_test: Corpus,
    pub class_means: Vec<Vec<f64>>,
    /// Row-major `dim × dim` orthogonal map.
    pub rotation: Vec<f64>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit_means(rng: &mut ChaCha8Rng, dim: usize, count: usize) -> Vec<Vec<f64>> {
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(count);
    while means.len() < count {
        let mut v = gaussian_vec(rng, dim);
        let n = norm(&v);
        if n < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n);
        let distinct = means
            .iter()
            .all(|m| m.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum::<f64>() > 1e-6);
        if distinct {
            means.push(v);
        }
    }
    means
}

/// Gram–Schmidt on Gaussian draws.
fn orthonormal_basis(rng: &mut ChaCha8Rng, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while basis.len() < dim {
        let mut v = gaussian_vec(rng, dim);
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
        let n = norm(&v);
        if n < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n);
        basis.push(v);
    }
    basis
}

/// `Q = I + Σ_k (cos θ - 1)(u uᵀ + w wᵀ) + sin θ (w uᵀ - u wᵀ)` over basis
/// planes `(u, w)`.
fn plane_rotation(basis: &[Vec<f64>], angle: f64) -> Vec<f64> {
    let dim = basis.len();
    let mut q = vec![0.0; dim * dim];
    for i in 0..dim {
        q[i * dim + i] = 1.0;
    }
    let (c, s) = (angle.cos() - 1.0, angle.sin());
    for pair in basis.chunks_exact(2) {
        let (u, w) = (&pair[0], &pair[1]);
        for i in 0..dim {
            for j in 0..dim {
                q[i * dim + j] += c * (u[i] * u[j] + w[i] * w[j]) + s * (w[i] * u[j] - u[i] * w[j]);
            }
        }
    }
    q
}

fn apply(q: &[f64], x: &[f64]) -> Vec<f64> {
    let dim = x.len();
    (0..dim)
        .map(|i| q[i * dim..(i + 1) * dim].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn add_noise(rng: &mut ChaCha8Rng, x: &mut [f64], sigma: f64) {
    for v in x {
        *v += sigma * rng.sample::<f64, _>(StandardNormal);
    }
}

pub fn source_id(i: usize) -> String {
    format!("{SOURCE_LANGUAGE}-{i:06}")
}

/// Deterministic per `spec.seed`. Labels cycle `0, 1, …, N_Y-1` so every
/// corpus is class-balanced.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpora> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means = unit_means(&mut rng, spec.dim, spec.num_labels);
    let basis = orthonormal_basis(&mut rng, spec.dim);
    let rotation = plane_rotation(&basis, spec.rotation_angle);

    let mut source = Vec::with_capacity(spec.train_size);
    let mut target_train = Vec::with_capacity(spec.train_size);
    for i in 0..spec.train_size {
        let label = i % spec.num_labels;
        let mut x = means[label].clone();
        add_noise(&mut rng, &mut x, spec.source_noise);
        let mut t = apply(&rotation, &x);
        add_noise(&mut rng, &mut t, spec.target_noise);
        let sid = source_id(i);
        target_train.push(Instance {
            id: format!("{TARGET_LANGUAGE}-{i:06}"),
            language: TARGET_LANGUAGE.into(),
            label,
            features: t,
            parallel_id: Some(sid.clone()),
        });
        source.push(Instance {
            id: sid,
            language: SOURCE_LANGUAGE.into(),
            label,
            features: x,
            parallel_id: None,
        });
    }

    let mut target_test = Vec::with_capacity(spec.test_size);
    for i in 0..spec.test_size {
        let label = i % spec.num_labels;
        let mut x = means[label].clone();
        add_noise(&mut rng, &mut x, spec.source_noise);
        let mut t = apply(&rotation, &x);
        add_noise(&mut rng, &mut t, spec.target_noise);
        target_test.push(Instance {
            id: format!("{TARGET_LANGUAGE}-test-{i:06}"),
            language: TARGET_LANGUAGE.into(),
            label,
            features: t,
            parallel_id: None,
        });
    }

    Ok(SyntheticCorpora {
        source: Corpus::new(SOURCE_LANGUAGE, spec.num_labels, source)?,
        target_train: Corpus::new(TARGET_LANGUAGE, spec.num_labels, target_train)?,
        target_test: Corpus::new(TARGET_LANGUAGE, spec.num_labels, target_test)?,
        class_means: means,
        rotation,
    })
}
