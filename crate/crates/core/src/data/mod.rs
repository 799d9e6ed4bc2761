//! Labelled multilingual instances, corpora and their JSON Lines format.

mod episode;
mod exemplars;
mod synthetic;

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::to_json_compact;

pub use episode::{class_quota, sample_episode, Episode};
pub use exemplars::{class_prototypes, exemplar_scores, select_exemplars, SelectionMode};
pub use synthetic::{generate_synthetic, SyntheticCorpora, SyntheticSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Instance {
    pub id: String,
    pub language: String,
    pub label: usize,
    pub features: Vec<f64>,
    /// Id of the translation twin in the other language, if any.
    #[serde(default)]
    pub parallel_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub language: String,
    pub num_labels: usize,
    pub instances: Vec<Instance>,
}

impl Corpus {
    /// Builds a corpus and checks ids, labels, dimensions and finiteness.
    pub fn new(language: impl Into<String>, num_labels: usize, instances: Vec<Instance>) -> Result<Self> {
        let corpus = Self {
            language: language.into(),
            num_labels,
            instances,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    fn validate(&self) -> Result<()> {
        let mut ids = HashSet::with_capacity(self.instances.len());
        let dim = self.instances.first().map_or(0, |i| i.features.len());
        for inst in &self.instances {
            if !ids.insert(inst.id.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate instance id {}", inst.id)));
            }
            if inst.label >= self.num_labels {
                return Err(Error::LabelOutOfRange {
                    label: inst.label,
                    num_labels: self.num_labels,
                });
            }
            crate::numerics::check_dim(dim, inst.features.len())?;
            if inst.features.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("instance features"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.instances.first().map(|i| i.features.len())
    }

    /// Errors with [`Error::EmptyClass`] on the first label that never occurs.
    pub fn check_covers_labels(&self) -> Result<()> {
        let counts = self.class_counts();
        match counts.iter().position(|&c| c == 0) {
            Some(c) => Err(Error::EmptyClass(c)),
            None => Ok(()),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_labels];
        for inst in &self.instances {
            counts[inst.label] += 1;
        }
        counts
    }

    /// Indices of instances grouped by label, in corpus order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_labels];
        for (i, inst) in self.instances.iter().enumerate() {
            groups[inst.label].push(i);
        }
        groups
    }

    pub fn index_by_id(&self) -> HashMap<&str, usize> {
        self.instances
            .iter()
            .enumerate()
            .map(|(i, inst)| (inst.id.as_str(), i))
            .collect()
    }

    pub fn get(&self, id: &str) -> Option<&Instance> {
        self.instances.iter().find(|i| i.id == id)
    }

    /// Pairs of `(target, source)` instances linked through `parallel_id`.
    ///
    /// `self` is the target side. Instances without a twin are skipped.
    pub fn parallel_pairs<'a>(&'a self, source: &'a Corpus) -> Vec<(&'a Instance, &'a Instance)> {
        let index = source.index_by_id();
        self.instances
            .iter()
            .filter_map(|t| {
                let twin = t.parallel_id.as_deref()?;
                index.get(twin).map(|&j| (t, &source.instances[j]))
            })
            .collect()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for inst in &self.instances {
            out.push_str(&to_json_compact(inst)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }

    /// Reads a JSON Lines corpus. The language is taken from the first
    /// instance; blank lines are ignored.
    pub fn read_jsonl(path: &Path, num_labels: usize) -> Result<Self> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut instances = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            instances.push(serde_json::from_str::<Instance>(&line)?);
        }
        let language = instances.first().map(|i| i.language.clone()).unwrap_or_default();
        Corpus::new(language, num_labels, instances)
    }
}
