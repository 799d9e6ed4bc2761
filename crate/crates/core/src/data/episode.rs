//! K-shot episode sampling.
//!
//! Each class receives `floor(K/N_Y)` instances; the `K mod N_Y` leftover
//! slots go to distinct classes chosen uniformly at random.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Corpus, Instance};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub k: usize,
    /// `source_instances[i]` is the translation of `target_instances[i]`.
    pub paired: bool,
    pub target_instances: Vec<Instance>,
    pub source_instances: Vec<Instance>,
}

impl Episode {
    /// Identity pairing for paired episodes.
    pub fn pairing(&self) -> Option<Vec<usize>> {
        self.paired.then(|| (0..self.k).collect())
    }

    /// Builds a paired episode from chosen source instances and their target
    /// twins (looked up through the target's `parallel_id`).
    pub fn from_source_selection(source_ids: &[String], source: &Corpus, target: &Corpus) -> Result<Self> {
        let twins: std::collections::HashMap<&str, &Instance> = target
            .instances
            .iter()
            .filter_map(|t| t.parallel_id.as_deref().map(|p| (p, t)))
            .collect();
        let src_index = source.index_by_id();
        let mut target_instances = Vec::with_capacity(source_ids.len());
        let mut source_instances = Vec::with_capacity(source_ids.len());
        for id in source_ids {
            let s = src_index
                .get(id.as_str())
                .map(|&i| &source.instances[i])
                .ok_or_else(|| Error::MissingParallelTwin(id.clone()))?;
            let t = twins
                .get(id.as_str())
                .ok_or_else(|| Error::MissingParallelTwin(id.clone()))?;
            target_instances.push((*t).clone());
            source_instances.push(s.clone());
        }
        Ok(Self {
            k: source_ids.len(),
            paired: true,
            target_instances,
            source_instances,
        })
    }
}

/// Per-class counts for a K-shot episode over `num_labels` classes.
pub fn class_quota<R: Rng>(k: usize, num_labels: usize, rng: &mut R) -> Vec<usize> {
    let mut quota = vec![k / num_labels; num_labels];
    for c in index::sample(rng, num_labels, k % num_labels) {
        quota[c] += 1;
    }
    quota
}

fn draw_per_class<R: Rng>(corpus: &Corpus, quota: &[usize], rng: &mut R) -> Result<Vec<Vec<usize>>> {
    corpus
        .indices_by_class()
        .into_iter()
        .zip(quota)
        .enumerate()
        .map(|(class, (pool, &need))| {
            if pool.len() < need {
                return Err(Error::InsufficientInstances {
                    class,
                    required: need,
                    available: pool.len(),
                });
            }
            Ok(index::sample(rng, pool.len(), need)
                .into_iter()
                .map(|i| pool[i])
                .collect())
        })
        .collect()
}

/// Samples a K-shot episode.
///
/// Paired episodes take the parallel twins of the sampled targets as the
/// source side. Unpaired episodes draw an independent source sample with the
/// same per-class counts, aligned so position `i` on both sides shares a label.
pub fn sample_episode(target: &Corpus, source: &Corpus, k: usize, paired: bool, seed: u64) -> Result<Episode> {
    if k == 0 {
        return Err(Error::InvalidConfig("episode size K must be positive".into()));
    }
    if target.num_labels != source.num_labels {
        return Err(Error::InvalidConfig("source and target label counts differ".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let quota = class_quota(k, target.num_labels, &mut rng);
    let mut picks: Vec<usize> = draw_per_class(target, &quota, &mut rng)?
        .into_iter()
        .flatten()
        .collect();
    picks.shuffle(&mut rng);
    let target_instances: Vec<Instance> = picks.iter().map(|&i| target.instances[i].clone()).collect();

    let source_instances = if paired {
        let index = source.index_by_id();
        target_instances
            .iter()
            .map(|t| {
                t.parallel_id
                    .as_deref()
                    .and_then(|p| index.get(p))
                    .map(|&j| source.instances[j].clone())
                    .ok_or_else(|| Error::MissingParallelTwin(t.id.clone()))
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        let mut per_class = draw_per_class(source, &quota, &mut rng)?;
        target_instances
            .iter()
            .map(|t| source.instances[per_class[t.label].pop().expect("quota matches")].clone())
            .collect()
    };

    Ok(Episode {
        k,
        paired,
        target_instances,
        source_instances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn corpora() -> (Corpus, Corpus) {
        let g = generate_synthetic(&SyntheticSpec {
            dim: 4,
            num_labels: 3,
            train_size: 60,
            test_size: 3,
            source_noise: 0.1,
            target_noise: 0.1,
            rotation_angle: 0.3,
            seed: 1,
        })
        .unwrap();
        (g.target_train, g.source)
    }

    fn label_counts(instances: &[Instance], n: usize) -> Vec<usize> {
        let mut c = vec![0; n];
        instances.iter().for_each(|i| c[i.label] += 1);
        c
    }

    #[test]
    fn divisible_k_is_exactly_balanced() {
        let (t, s) = corpora();
        let e = sample_episode(&t, &s, 6, true, 3).unwrap();
        assert_eq!(label_counts(&e.target_instances, 3), vec![2, 2, 2]);
    }

    #[test]
    fn remainder_goes_to_random_classes() {
        let (t, s) = corpora();
        let mut seen = std::collections::HashSet::new();
        for seed in 0..30 {
            let e = sample_episode(&t, &s, 5, true, seed).unwrap();
            let mut counts = label_counts(&e.target_instances, 3);
            seen.insert(counts.clone());
            counts.sort();
            assert_eq!(counts, vec![1, 2, 2]);
        }
        assert_eq!(seen.len(), 3, "each class should sometimes get the short count");
    }

    #[test]
    fn paired_sources_are_twins() {
        let (t, s) = corpora();
        let e = sample_episode(&t, &s, 7, true, 9).unwrap();
        for (ti, si) in e.target_instances.iter().zip(&e.source_instances) {
            assert_eq!(ti.parallel_id.as_deref(), Some(si.id.as_str()));
            assert_eq!(ti.label, si.label);
        }
        assert_eq!(e.pairing(), Some((0..7).collect()));
    }

    #[test]
    fn unpaired_sources_are_label_matched() {
        let (t, s) = corpora();
        let e = sample_episode(&t, &s, 8, false, 4).unwrap();
        assert_eq!(e.pairing(), None);
        for (ti, si) in e.target_instances.iter().zip(&e.source_instances) {
            assert_eq!(ti.label, si.label);
        }
        let ids: std::collections::HashSet<_> = e.source_instances.iter().map(|i| &i.id).collect();
        assert_eq!(ids.len(), 8);
    }

    #[test]
    fn deterministic_per_seed() {
        let (t, s) = corpora();
        assert_eq!(
            sample_episode(&t, &s, 10, true, 5).unwrap(),
            sample_episode(&t, &s, 10, true, 5).unwrap()
        );
    }

    #[test]
    fn errors() {
        let (t, s) = corpora();
        assert!(matches!(
            sample_episode(&t, &s, 61, true, 0),
            Err(Error::InsufficientInstances { .. })
        ));
        let mut orphan = t.clone();
        orphan.instances.iter_mut().for_each(|i| i.parallel_id = None);
        assert!(matches!(
            sample_episode(&orphan, &s, 3, true, 0),
            Err(Error::MissingParallelTwin(_))
        ));
        assert!(sample_episode(&orphan, &s, 3, false, 0).is_ok());
    }
}
