//! Prototype-based exemplar scoring and selection.
//!
//! An instance with representation `r` and label `y` scores
//! `s = cos(r, P_y) + N_Y - Σ_{c≠y} cos(r, P_c)`, where `P_c` is the mean
//! representation of class `c`. High scores mark instances that sit close to
//! their own prototype and away from the others.

use std::cmp::Ordering;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::episode::class_quota;
use super::Corpus;
use crate::error::{Error, Result};
use crate::numerics::{check_dim, cosine};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    High,
    Low,
    #[default]
    Random,
}

impl std::str::FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "high" => Ok(Self::High),
            "low" => Ok(Self::Low),
            "random" => Ok(Self::Random),
            other => Err(Error::InvalidConfig(format!("unknown selection mode {other}"))),
        }
    }
}

/// Per-class mean representation.
pub fn class_prototypes<V: AsRef<[f64]>>(reprs: &[V], labels: &[usize], num_labels: usize) -> Result<Vec<Vec<f64>>> {
    check_dim(reprs.len(), labels.len())?;
    let dim = reprs.first().map_or(0, |r| r.as_ref().len());
    let mut sums = vec![vec![0.0; dim]; num_labels];
    let mut counts = vec![0usize; num_labels];
    for (r, &y) in reprs.iter().zip(labels) {
        let r = r.as_ref();
        check_dim(dim, r.len())?;
        if y >= num_labels {
            return Err(Error::LabelOutOfRange { label: y, num_labels });
        }
        sums[y].iter_mut().zip(r).for_each(|(s, x)| *s += x);
        counts[y] += 1;
    }
    sums.into_iter()
        .zip(counts)
        .enumerate()
        .map(|(c, (sum, n))| {
            if n == 0 {
                Err(Error::EmptyClass(c))
            } else {
                Ok(sum.into_iter().map(|x| x / n as f64).collect())
            }
        })
        .collect()
}

pub fn exemplar_scores<V: AsRef<[f64]>>(reprs: &[V], labels: &[usize], prototypes: &[Vec<f64>]) -> Result<Vec<f64>> {
    check_dim(reprs.len(), labels.len())?;
    let num_labels = prototypes.len();
    reprs
        .iter()
        .zip(labels)
        .map(|(r, &y)| {
            if y >= num_labels {
                return Err(Error::LabelOutOfRange { label: y, num_labels });
            }
            let own = cosine(r.as_ref(), &prototypes[y])?;
            let mut others = 0.0;
            for (c, p) in prototypes.iter().enumerate() {
                if c != y {
                    others += cosine(r.as_ref(), p)?;
                }
            }
            Ok(own + num_labels as f64 - others)
        })
        .collect()
}

/// Picks `k` instance ids with per-class counts following the episode rule.
///
/// Within a class, `High` takes the largest scores and `Low` the smallest,
/// ties going to the smaller id. Ids come back grouped by class.
pub fn select_exemplars(
    scores: &[f64],
    corpus: &Corpus,
    k: usize,
    mode: SelectionMode,
    seed: u64,
) -> Result<Vec<String>> {
    check_dim(corpus.len(), scores.len())?;
    if k == 0 {
        return Err(Error::InvalidConfig("K must be positive".into()));
    }
    if k > corpus.len() {
        return Err(Error::InsufficientInstances {
            class: 0,
            required: k,
            available: corpus.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let quota = class_quota(k, corpus.num_labels, &mut rng);
    let mut ids = Vec::with_capacity(k);
    for (class, (mut pool, need)) in corpus.indices_by_class().into_iter().zip(quota).enumerate() {
        if pool.len() < need {
            return Err(Error::InsufficientInstances {
                class,
                required: need,
                available: pool.len(),
            });
        }
        let by_id = |a: &usize, b: &usize| corpus.instances[*a].id.cmp(&corpus.instances[*b].id);
        let chosen: Vec<usize> = match mode {
            SelectionMode::High | SelectionMode::Low => {
                pool.sort_by(|a, b| {
                    let ord = scores[*a].partial_cmp(&scores[*b]).unwrap_or(Ordering::Equal);
                    let ord = if mode == SelectionMode::High {
                        ord.reverse()
                    } else {
                        ord
                    };
                    ord.then_with(|| by_id(a, b))
                });
                pool.truncate(need);
                pool
            }
            SelectionMode::Random => index::sample(&mut rng, pool.len(), need)
                .into_iter()
                .map(|i| pool[i])
                .collect(),
        };
        ids.extend(chosen.into_iter().map(|i| corpus.instances[i].id.clone()));
    }
    Ok(ids)
}
