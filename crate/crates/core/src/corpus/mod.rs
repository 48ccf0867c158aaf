//! Corpus types, JSONL I/O, and the dataset construction pipeline.

mod builder;
mod cluster;
mod fragments;
mod stats;
mod synth;

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::SentenceLabelSet;

pub use builder::{build_dataset, build_dataset_with, split_for, BuildOptions, Dataset, SplitRatios};
pub use cluster::{cluster_fragments, kmeans, CharNgramTfidf, Embedder, KMeansOptions};
pub use fragments::split_fragments;
pub use stats::{corpus_stats, CorpusStats, SplitCounts};
pub use synth::{synth_corpus, SynthCorpus, SynthOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    /// Held-out splits keep `(product_id, aspect)` unique.
    pub fn is_held_out(self) -> bool {
        !matches!(self, Split::Train)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AspectCategory {
    pub name: String,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategorySchema {
    pub category: String,
    pub aspects: Vec<AspectCategory>,
    pub cluster_count: usize,
}

impl CategorySchema {
    pub fn new<S: AsRef<str>>(category: &str, names: &[S]) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Validation(format!(
                "schema {category:?} has no aspects"
            )));
        }
        let mut seen = HashSet::new();
        let mut aspects = Vec::with_capacity(names.len());
        for (index, name) in names.iter().enumerate() {
            let name = name.as_ref();
            if name.is_empty() {
                return Err(Error::Validation(format!(
                    "schema {category:?}: aspect {index} has an empty name"
                )));
            }
            if !seen.insert(name.to_string()) {
                return Err(Error::Validation(format!(
                    "schema {category:?}: duplicate aspect {name:?}"
                )));
            }
            aspects.push(AspectCategory {
                name: name.to_string(),
                index,
            });
        }
        Ok(Self {
            category: category.to_string(),
            cluster_count: aspects.len(),
            aspects,
        })
    }

    pub fn smartphone() -> Self {
        Self::new(
            "smartphone",
            &["appearance", "battery", "camera", "performance", "feature"],
        )
        .expect("static schema")
    }

    pub fn computer() -> Self {
        Self::new("computer", &["feature", "performance", "appearance"]).expect("static schema")
    }

    /// Schema whose aspect names are the raw cluster ids `cluster_<i>`.
    pub fn clustered(category: &str, k: usize) -> Result<Self> {
        let names: Vec<String> = (0..k).map(|i| format!("cluster_{i}")).collect();
        Self::new(category, &names)
    }

    pub fn len(&self) -> usize {
        self.aspects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.aspects.is_empty()
    }

    pub fn aspect(&self, name: &str) -> Option<&AspectCategory> {
        self.aspects.iter().find(|a| a.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cluster_count != self.aspects.len() {
            return Err(Error::Validation(format!(
                "schema {:?}: cluster_count {} != {} aspects",
                self.category,
                self.cluster_count,
                self.aspects.len()
            )));
        }
        for (i, a) in self.aspects.iter().enumerate() {
            if a.index != i || a.name.is_empty() {
                return Err(Error::Validation(format!(
                    "schema {:?}: bad aspect entry {a:?} at position {i}",
                    self.category
                )));
            }
        }
        Ok(())
    }
}

/// A product with its detail sentences and, for the builder, the writer's
/// multi-aspect summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductRecord {
    pub product_id: String,
    pub category: String,
    pub title: String,
    #[serde(rename = "details")]
    pub detail_sentences: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_summary: Option<String>,
}

impl ProductRecord {
    /// Title followed by the detail sentences, empties dropped.
    pub fn sentences(&self) -> Vec<String> {
        std::iter::once(&self.title)
            .chain(self.detail_sentences.iter())
            .filter(|s| !s.is_empty())
            .cloned()
            .collect()
    }
}

/// One `(product information, aspect, aspect summary)` tuple.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub product_id: String,
    pub category: String,
    pub sentences: Vec<String>,
    pub aspect: AspectCategory,
    pub summary: String,
    pub split: Split,
}

impl Instance {
    pub fn key(&self) -> (String, String) {
        (self.product_id.clone(), self.aspect.name.clone())
    }

    pub fn to_record(&self) -> InstanceRecord {
        InstanceRecord {
            product_id: self.product_id.clone(),
            category: self.category.clone(),
            sentences: self.sentences.clone(),
            aspect: self.aspect.name.clone(),
            summary: self.summary.clone(),
            overlap_rates: None,
            labels: None,
        }
    }
}

/// Line format of instance JSONL files. The label fields are only present
/// in files written by the labeling step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceRecord {
    pub product_id: String,
    pub category: String,
    pub sentences: Vec<String>,
    pub aspect: String,
    pub summary: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlap_rates: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<u8>>,
}

impl InstanceRecord {
    pub fn with_labels(mut self, set: &SentenceLabelSet) -> Self {
        self.overlap_rates = Some(set.overlap_rates.clone());
        self.labels = Some(set.labels.clone());
        self
    }
}

/// Length limits and the sentence separator shared by loader and builder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusLimits {
    pub max_input_chars: usize,
    pub max_target_chars: usize,
    pub separator: char,
}

impl Default for CorpusLimits {
    fn default() -> Self {
        Self {
            max_input_chars: 400,
            max_target_chars: 70,
            separator: '.',
        }
    }
}

impl CorpusLimits {
    /// Character length of the sentences joined with one separator after each.
    pub fn joined_len<S: AsRef<str>>(&self, sentences: &[S]) -> usize {
        sentences
            .iter()
            .map(|s| s.as_ref().chars().count() + 1)
            .sum()
    }

    pub fn join<S: AsRef<str>>(&self, sentences: &[S]) -> String {
        let mut out = String::new();
        for s in sentences {
            out.push_str(s.as_ref());
            out.push(self.separator);
        }
        out
    }
}

/// Checks the per-instance invariants and held-out uniqueness.
pub fn validate_instances(instances: &[Instance], limits: &CorpusLimits) -> Result<()> {
    let mut seen = HashSet::new();
    for (i, inst) in instances.iter().enumerate() {
        check_instance(inst, limits).map_err(|e| Error::Validation(format!("instance {i}: {e}")))?;
        if inst.split.is_held_out() && !seen.insert(inst.key()) {
            return Err(Error::Validation(format!(
                "duplicate ({}, {}) in {} split",
                inst.product_id, inst.aspect.name, inst.split
            )));
        }
    }
    Ok(())
}

fn check_instance(inst: &Instance, limits: &CorpusLimits) -> std::result::Result<(), String> {
    if inst.product_id.is_empty() {
        return Err("empty product_id".into());
    }
    if inst.sentences.is_empty() {
        return Err(format!("{}: no sentences", inst.product_id));
    }
    for s in &inst.sentences {
        if s.is_empty() {
            return Err(format!("{}: empty sentence", inst.product_id));
        }
        if s.contains(limits.separator) {
            return Err(format!(
                "{}: sentence {s:?} contains the separator {:?}",
                inst.product_id, limits.separator
            ));
        }
    }
    let joined = limits.joined_len(&inst.sentences);
    if joined > limits.max_input_chars {
        return Err(format!(
            "{}: input has {joined} chars, limit {}",
            inst.product_id, limits.max_input_chars
        ));
    }
    let target = inst.summary.chars().count();
    if target > limits.max_target_chars {
        return Err(format!(
            "{}: summary has {target} chars, limit {}",
            inst.product_id, limits.max_target_chars
        ));
    }
    Ok(())
}

/// Reads every non-blank line of a JSONL file as `T`.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize, W: Write>(mut w: W, items: &[T]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io("<writer>", e))?;
    }
    Ok(())
}

/// Resolves a record against the schema.
pub fn record_to_instance(
    rec: &InstanceRecord,
    schema: &CategorySchema,
    split: Split,
) -> Result<Instance> {
    let aspect = schema.aspect(&rec.aspect).cloned().ok_or_else(|| {
        Error::Validation(format!(
            "{}: aspect {:?} not in schema {:?}",
            rec.product_id, rec.aspect, schema.category
        ))
    })?;
    Ok(Instance {
        product_id: rec.product_id.clone(),
        category: rec.category.clone(),
        sentences: rec.sentences.clone(),
        aspect,
        summary: rec.summary.clone(),
        split,
    })
}

/// Loads an instance JSONL file, in file order, enforcing the instance
/// invariants. Over-long records are rejected, not truncated.
pub fn load_corpus(
    path: &Path,
    split: Split,
    schema: &CategorySchema,
    limits: &CorpusLimits,
) -> Result<Vec<Instance>> {
    Ok(load_labeled_corpus(path, split, schema, limits)?
        .into_iter()
        .map(|(inst, _)| inst)
        .collect())
}

/// Like [`load_corpus`] but also returns stored extractor labels, if any.
pub fn load_labeled_corpus(
    path: &Path,
    split: Split,
    schema: &CategorySchema,
    limits: &CorpusLimits,
) -> Result<Vec<(Instance, Option<SentenceLabelSet>)>> {
    let records: Vec<InstanceRecord> = read_jsonl(path)?;
    let mut out = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let inst = record_to_instance(rec, schema, split).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let labels = match (&rec.overlap_rates, &rec.labels) {
            (Some(rates), Some(labels)) => {
                if rates.len() != inst.sentences.len() || labels.len() != inst.sentences.len() {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: i + 1,
                        message: "label arrays do not match sentence count".into(),
                    });
                }
                Some(SentenceLabelSet {
                    overlap_rates: rates.clone(),
                    labels: labels.clone(),
                    threshold: f64::NAN,
                })
            }
            (None, None) => None,
            _ => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: "overlap_rates and labels must appear together".into(),
                })
            }
        };
        out.push((inst, labels));
    }
    let instances: Vec<Instance> = out.iter().map(|(i, _)| i.clone()).collect();
    validate_instances(&instances, limits)?;
    Ok(out)
}
