//! Character-level ROUGE, Distinct-n, corpus evaluation and extractor heat
//! maps.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::hash::Hash;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::{AspectCategory, Instance};
use crate::decoder::GenerationRecord;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::labeling::lcs_length_of;
use crate::model::Model;

/// Distinct n-grams over total n-grams across all sequences; 0 when there
/// are no n-grams at all.
pub fn distinct_n<T: Eq + Hash>(sequences: &[Vec<T>], n: usize) -> f64 {
    assert!(n >= 1, "n must be at least 1");
    let mut seen: HashSet<&[T]> = HashSet::new();
    let mut total = 0usize;
    for s in sequences {
        for w in s.windows(n) {
            seen.insert(w);
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        seen.len() as f64 / total as f64
    }
}

/// [`distinct_n`] over the characters of each text.
pub fn distinct_n_chars<S: AsRef<str>>(texts: &[S], n: usize) -> f64 {
    let seqs: Vec<Vec<char>> = texts.iter().map(|t| t.as_ref().chars().collect()).collect();
    distinct_n(&seqs, n)
}

fn f1(overlap: usize, cand: usize, reference: usize) -> f64 {
    if overlap == 0 || cand == 0 || reference == 0 {
        return 0.0;
    }
    let p = overlap as f64 / cand as f64;
    let r = overlap as f64 / reference as f64;
    2.0 * p * r / (p + r)
}

fn ngram_counts(chars: &[char], n: usize) -> HashMap<&[char], usize> {
    let mut m = HashMap::new();
    for w in chars.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

/// Character n-gram F1 with clipped (multiset) overlap counts.
pub fn rouge_n_f1(candidate: &str, reference: &str, n: usize) -> f64 {
    assert!(n >= 1, "n must be at least 1");
    let c: Vec<char> = candidate.chars().collect();
    let r: Vec<char> = reference.chars().collect();
    let cc = ngram_counts(&c, n);
    let rc = ngram_counts(&r, n);
    let overlap: usize = cc
        .iter()
        .map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0)))
        .sum();
    f1(
        overlap,
        c.len().saturating_sub(n - 1),
        r.len().saturating_sub(n - 1),
    )
}

/// LCS-based F1 over characters.
pub fn rouge_l_f1(candidate: &str, reference: &str) -> f64 {
    let c: Vec<char> = candidate.chars().collect();
    let r: Vec<char> = reference.chars().collect();
    f1(lcs_length_of(&c, &r), c.len(), r.len())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScores {
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
}

impl RougeScores {
    pub fn of(candidate: &str, reference: &str) -> Self {
        Self {
            rouge1: rouge_n_f1(candidate, reference, 1),
            rouge2: rouge_n_f1(candidate, reference, 2),
            rouge_l: rouge_l_f1(candidate, reference),
        }
    }

    fn mean(scores: &[RougeScores]) -> Self {
        if scores.is_empty() {
            return Self::default();
        }
        let k = scores.len() as f64;
        Self {
            rouge1: scores.iter().map(|s| s.rouge1).sum::<f64>() / k,
            rouge2: scores.iter().map(|s| s.rouge2).sum::<f64>() / k,
            rouge_l: scores.iter().map(|s| s.rouge_l).sum::<f64>() / k,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct OverallScores {
    #[serde(flatten)]
    pub rouge: RougeScores,
    pub dist2: f64,
    pub dist3: f64,
    pub dist4: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AspectScores {
    #[serde(flatten)]
    pub rouge: RougeScores,
    pub n_instances: usize,
}

/// Which texts Distinct-n is computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiversityMode {
    /// Each record's chosen summary.
    #[default]
    Top1,
    /// Every candidate, pooled once per product.
    TopK,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: OverallScores,
    pub per_aspect: BTreeMap<String, AspectScores>,
    pub n_instances: usize,
    pub diversity_mode: DiversityMode,
}

/// Scores generations against references joined on (product id, aspect).
///
/// ROUGE is the unweighted mean of per-instance F1, overall and per aspect.
pub fn evaluate(
    generations: &[GenerationRecord],
    references: &[Instance],
    mode: DiversityMode,
    exec: Execution,
) -> Result<EvalReport> {
    let mut by_key: HashMap<(&str, &str), &GenerationRecord> = HashMap::new();
    let mut problems = Vec::new();
    for g in generations {
        if by_key.insert((&g.product_id, &g.aspect), g).is_some() {
            problems.push(format!("duplicate generation ({}, {})", g.product_id, g.aspect));
        }
    }
    let mut pairs = Vec::with_capacity(references.len());
    let mut used = HashSet::new();
    for r in references {
        let key = (r.product_id.as_str(), r.aspect.name.as_str());
        match by_key.get(&key) {
            Some(g) if used.insert(key) => pairs.push((*g, r)),
            Some(_) => problems.push(format!("duplicate reference ({}, {})", key.0, key.1)),
            None => problems.push(format!("no generation for ({}, {})", key.0, key.1)),
        }
    }
    for g in generations {
        if !used.contains(&(g.product_id.as_str(), g.aspect.as_str())) {
            problems.push(format!("no reference for ({}, {})", g.product_id, g.aspect));
        }
    }
    if !problems.is_empty() {
        problems.sort();
        problems.dedup();
        return Err(Error::Validation(format!("unmatched records: {}", problems.join("; "))));
    }

    let scores = exec.map(&pairs, |(g, r)| RougeScores::of(&g.summary, &r.summary));
    let mut groups: BTreeMap<String, Vec<RougeScores>> = BTreeMap::new();
    for ((_, r), s) in pairs.iter().zip(&scores) {
        groups.entry(r.aspect.name.clone()).or_default().push(*s);
    }
    let per_aspect = groups
        .into_iter()
        .map(|(name, s)| {
            (
                name,
                AspectScores {
                    rouge: RougeScores::mean(&s),
                    n_instances: s.len(),
                },
            )
        })
        .collect();

    let texts: Vec<&str> = match mode {
        DiversityMode::Top1 => pairs.iter().map(|(g, _)| g.summary.as_str()).collect(),
        DiversityMode::TopK => {
            let mut seen = HashSet::new();
            pairs
                .iter()
                .filter(|(g, _)| seen.insert(g.product_id.as_str()))
                .flat_map(|(g, _)| g.candidates.iter().map(|c| c.text.as_str()))
                .collect()
        }
    };

    Ok(EvalReport {
        overall: OverallScores {
            rouge: RougeScores::mean(&scores),
            dist2: distinct_n_chars(&texts, 2),
            dist3: distinct_n_chars(&texts, 3),
            dist4: distinct_n_chars(&texts, 4),
        },
        per_aspect,
        n_instances: pairs.len(),
        diversity_mode: mode,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapExport {
    pub product_id: String,
    pub aspect: String,
    /// `(sentence, β)` in input order.
    pub rows: Vec<(String, f64)>,
}

impl HeatmapExport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["sentence", "score"])?;
        for (s, b) in &self.rows {
            out.write_record([s.as_str(), &b.to_string()])?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    /// Index of the highest-scoring sentence (first on ties).
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, (_, b)) in self.rows.iter().enumerate() {
            if best.is_none_or(|j| *b > self.rows[j].1) {
                best = Some(i);
            }
        }
        best
    }
}

/// Raw extractor scores of every input sentence under `aspect`.
pub fn export_heatmap(model: &Model, instance: &Instance, aspect: &AspectCategory) -> Result<HeatmapExport> {
    let scores = model
        .sentence_scores(&instance.sentences, Some(aspect))?
        .ok_or_else(|| Error::InvalidArgument("model has no extractor".into()))?;
    Ok(HeatmapExport {
        product_id: instance.product_id.clone(),
        aspect: aspect.name.clone(),
        rows: instance.sentences.iter().cloned().zip(scores).collect(),
    })
}
