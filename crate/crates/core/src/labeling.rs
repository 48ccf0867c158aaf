//! LCS-based overlap rates and binary extractor supervision.
//!
//! A sentence of the product information is labeled relevant to an aspect
//! summary when the longest common character subsequence covers at least
//! `threshold` of the sentence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.35;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceLabelSet {
    pub overlap_rates: Vec<f64>,
    pub labels: Vec<u8>,
    pub threshold: f64,
}

impl SentenceLabelSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &g)| g == 1)
            .map(|(i, _)| i)
    }
}

/// Options applied to both strings before the LCS is taken.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelOptions {
    /// Drop whitespace and punctuation before comparing. Off by default.
    pub strip_punctuation: bool,
}

/// Length of the longest common subsequence of the two character sequences.
pub fn lcs_length(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    lcs_length_of(&a, &b)
}

/// LCS over arbitrary comparable items, single-row DP.
pub fn lcs_length_of<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    // keep the shorter sequence on the row
    let (outer, inner) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    let mut row = vec![0usize; inner.len() + 1];
    for x in outer {
        let mut diag = 0;
        for (j, y) in inner.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y {
                diag + 1
            } else {
                up.max(row[j])
            };
            diag = up;
        }
    }
    row[inner.len()]
}

/// `lcs_length(sentence, summary) / chars(sentence)`.
pub fn overlap_rate(sentence: &str, summary: &str) -> Result<f64> {
    overlap_rate_with(sentence, summary, LabelOptions::default())
}

pub fn overlap_rate_with(sentence: &str, summary: &str, opts: LabelOptions) -> Result<f64> {
    let (s, y) = if opts.strip_punctuation {
        (strip(sentence), strip(summary))
    } else {
        (sentence.chars().collect(), summary.chars().collect())
    };
    if s.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "overlap rate undefined for empty sentence (summary {summary:?})"
        )));
    }
    Ok(lcs_length_of(&s, &y) as f64 / s.len() as f64)
}

fn strip(s: &str) -> Vec<char> {
    s.chars()
        .filter(|c| !c.is_whitespace() && !c.is_ascii_punctuation() && !is_cjk_punct(*c))
        .collect()
}

fn is_cjk_punct(c: char) -> bool {
    matches!(c, '\u{3000}'..='\u{303F}' | '\u{FF00}'..='\u{FF0F}' | '\u{FF1A}'..='\u{FF20}')
}

/// Overlap rates and labels, `label = 1` iff `rate >= threshold`.
pub fn label_sentences<S: AsRef<str>>(
    sentences: &[S],
    summary: &str,
    threshold: f64,
) -> Result<SentenceLabelSet> {
    label_sentences_with(sentences, summary, threshold, LabelOptions::default())
}

pub fn label_sentences_with<S: AsRef<str>>(
    sentences: &[S],
    summary: &str,
    threshold: f64,
    opts: LabelOptions,
) -> Result<SentenceLabelSet> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let overlap_rates = sentences
        .iter()
        .map(|s| overlap_rate_with(s.as_ref(), summary, opts))
        .collect::<Result<Vec<_>>>()?;
    let labels = overlap_rates
        .iter()
        .map(|&r| u8::from(r >= threshold))
        .collect();
    Ok(SentenceLabelSet {
        overlap_rates,
        labels,
        threshold,
    })
}
