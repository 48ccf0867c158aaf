//! Beam search over the copy-augmented distribution, greedy decoding, and
//! the Top-K candidate mode used by the diversity baseline.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{AspectCategory, Instance};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{DecodeSession, DecoderState, Model, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub max_decode_len: usize,
    /// Exponent `p` of the length normalisation `score = logprob / len^p`;
    /// 0 ranks by raw log-probability.
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 5,
            max_decode_len: 80,
            length_penalty: 0.0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.max_decode_len == 0 {
            return Err(Error::Validation("beam_size and max_decode_len must be at least 1".into()));
        }
        if !(self.length_penalty >= 0.0 && self.length_penalty.is_finite()) {
            return Err(Error::Validation(format!(
                "length_penalty must be non-negative, got {}",
                self.length_penalty
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub logprob: f64,
    /// Extended token ids, without `<eos>`.
    #[serde(skip)]
    pub tokens: Vec<usize>,
    #[serde(skip)]
    pub score: f64,
    /// Set on hypotheses that never produced `<eos>`.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub unfinished: bool,
}

/// One decoded input. `summary` is the top candidate's text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub product_id: String,
    pub aspect: String,
    pub summary: String,
    pub candidates: Vec<Candidate>,
    /// The requested number of candidates exceeded the beam size.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub k_capped: bool,
}

impl GenerationRecord {
    pub fn chosen(&self) -> &Candidate {
        &self.candidates[0]
    }
}

#[derive(Debug, Clone)]
struct Hyp {
    tokens: Vec<usize>,
    logprob: f64,
    state: DecoderState,
}

fn score(logprob: f64, len: usize, penalty: f64) -> f64 {
    if penalty == 0.0 {
        logprob
    } else {
        logprob / (len.max(1) as f64).powf(penalty)
    }
}

fn by_score(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search returning up to `beam_size` ranked candidates.
///
/// Hypotheses that emit `<eos>` move to a finished pool; search stops once
/// the pool holds `beam_size` entries or after `max_decode_len` tokens.
/// Expansion ties are broken by parent rank, then by lower token id.
fn search(session: &DecodeSession, cfg: &DecodeConfig) -> Vec<Candidate> {
    let layout = session.layout();
    let mut alive = vec![Hyp {
        tokens: Vec::new(),
        logprob: 0.0,
        state: session.initial_state(),
    }];
    let mut finished: Vec<Candidate> = Vec::new();
    let make = |tokens: Vec<usize>, logprob: f64, unfinished: bool| Candidate {
        text: layout.decode(session.model().vocab(), &tokens),
        score: score(logprob, tokens.len(), cfg.length_penalty),
        logprob,
        tokens,
        unfinished,
    };

    for _ in 0..cfg.max_decode_len {
        // (parent, token, logprob)
        let mut expansions: Vec<(usize, usize, f64)> = Vec::new();
        let mut states = Vec::with_capacity(alive.len());
        for (pi, h) in alive.iter().enumerate() {
            let prev = h.tokens.last().copied().unwrap_or(crate::model::BOS);
            let (dist, next, _) = session.step(&h.state, prev);
            let mut ranked: Vec<(usize, f64)> = dist
                .iter()
                .enumerate()
                .filter(|(_, &p)| p > 0.0)
                .map(|(id, &p)| (id, p.ln()))
                .collect();
            ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
            ranked.truncate(cfg.beam_size + 1);
            for (id, lp) in ranked {
                expansions.push((pi, id, h.logprob + lp));
            }
            states.push(next);
        }
        expansions.sort_by(|a, b| {
            let sa = score(a.2, alive[a.0].tokens.len() + 1, cfg.length_penalty);
            let sb = score(b.2, alive[b.0].tokens.len() + 1, cfg.length_penalty);
            sb.partial_cmp(&sa)
                .unwrap_or(Ordering::Equal)
                .then(a.0.cmp(&b.0))
                .then(a.1.cmp(&b.1))
        });

        let mut next_alive = Vec::with_capacity(cfg.beam_size);
        for (pi, id, lp) in expansions {
            if next_alive.len() == cfg.beam_size || finished.len() >= cfg.beam_size {
                break;
            }
            if id == EOS {
                finished.push(make(alive[pi].tokens.clone(), lp, false));
            } else {
                let mut tokens = alive[pi].tokens.clone();
                tokens.push(id);
                next_alive.push(Hyp {
                    tokens,
                    logprob: lp,
                    state: states[pi].clone(),
                });
            }
        }
        alive = next_alive;
        if finished.len() >= cfg.beam_size || alive.is_empty() {
            break;
        }
    }

    finished.sort_by(by_score);
    if finished.len() < cfg.beam_size {
        let mut rest: Vec<Candidate> = alive.into_iter().map(|h| make(h.tokens, h.logprob, true)).collect();
        rest.sort_by(by_score);
        finished.extend(rest.into_iter().take(cfg.beam_size - finished.len()));
    }
    finished
}

fn record(product_id: &str, aspect: &str, candidates: Vec<Candidate>, k_capped: bool) -> GenerationRecord {
    GenerationRecord {
        product_id: product_id.to_string(),
        aspect: aspect.to_string(),
        summary: candidates[0].text.clone(),
        candidates,
        k_capped,
    }
}

/// Beam-search decoding of one input under `aspect` (the null aspect when
/// `None`). `aspect_key` is the aspect name the record is filed under.
pub fn beam_search<S: AsRef<str>>(
    model: &Model,
    product_id: &str,
    sentences: &[S],
    aspect: Option<&AspectCategory>,
    aspect_key: &str,
    cfg: &DecodeConfig,
) -> Result<GenerationRecord> {
    cfg.validate()?;
    let session = model.start_decoding(sentences, aspect)?;
    Ok(record(product_id, aspect_key, search(&session, cfg), false))
}

/// The `k` best candidates. `k` above the beam size is capped and flagged.
pub fn topk_generate<S: AsRef<str>>(
    model: &Model,
    product_id: &str,
    sentences: &[S],
    aspect: Option<&AspectCategory>,
    aspect_key: &str,
    k: usize,
    cfg: &DecodeConfig,
) -> Result<GenerationRecord> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let mut rec = beam_search(model, product_id, sentences, aspect, aspect_key, cfg)?;
    rec.k_capped = k > cfg.beam_size;
    rec.candidates.truncate(k);
    Ok(rec)
}

/// Step-wise argmax decoding (lowest id wins ties); stops at `<eos>` or
/// after `max_len` tokens. The returned ids exclude `<eos>`.
pub fn greedy_decode<S: AsRef<str>>(
    model: &Model,
    sentences: &[S],
    aspect: Option<&AspectCategory>,
    max_len: usize,
) -> Result<Vec<usize>> {
    let session = model.start_decoding(sentences, aspect)?;
    let mut state = session.initial_state();
    let mut prev = crate::model::BOS;
    let mut out = Vec::new();
    while out.len() < max_len {
        let (dist, next, _) = session.step(&state, prev);
        let mut best = 0;
        for (id, &p) in dist.iter().enumerate() {
            if p > dist[best] {
                best = id;
            }
        }
        if best == EOS {
            break;
        }
        out.push(best);
        prev = best;
        state = next;
    }
    Ok(out)
}

/// How the aspect input is set when decoding a set of instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AspectMode {
    /// Each instance is decoded with its own aspect.
    #[default]
    Conditioned,
    /// Every instance is decoded with the null aspect (Top-1 baseline).
    Null,
    /// One null-aspect decode per product keeping K candidates, K being
    /// the product's instance count; instance `i` of a product gets
    /// candidate `i` as its summary.
    NullTopK,
}

/// Decodes every instance, in input order.
pub fn generate_all(
    model: &Model,
    instances: &[Instance],
    cfg: &DecodeConfig,
    mode: AspectMode,
    exec: Execution,
) -> Result<Vec<GenerationRecord>> {
    cfg.validate()?;
    match mode {
        AspectMode::Conditioned | AspectMode::Null => exec
            .map(instances, |inst| {
                let aspect = (mode == AspectMode::Conditioned).then_some(&inst.aspect);
                beam_search(model, &inst.product_id, &inst.sentences, aspect, &inst.aspect.name, cfg)
            })
            .into_iter()
            .collect(),
        AspectMode::NullTopK => {
            let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, inst) in instances.iter().enumerate() {
                groups.entry(inst.product_id.as_str()).or_default().push(i);
            }
            let groups: Vec<Vec<usize>> = groups.into_values().collect();
            let decoded = exec.map(&groups, |members| {
                let first = &instances[members[0]];
                topk_generate(
                    model,
                    &first.product_id,
                    &first.sentences,
                    None,
                    &first.aspect.name,
                    members.len(),
                    cfg,
                )
            });
            let mut out: Vec<Option<GenerationRecord>> = vec![None; instances.len()];
            for (members, rec) in groups.iter().zip(decoded) {
                let rec = rec?;
                for (rank, &i) in members.iter().enumerate() {
                    let mut r = rec.clone();
                    r.aspect = instances[i].aspect.name.clone();
                    let pick = rank.min(r.candidates.len() - 1);
                    r.summary = r.candidates[pick].text.clone();
                    out[i] = Some(r);
                }
            }
            Ok(out.into_iter().map(|r| r.expect("every instance grouped")).collect())
        }
    }
}
