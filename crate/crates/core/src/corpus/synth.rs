//! Deterministic synthetic corpora with known aspect structure.
//!
//! Detail sentences are an aspect cue word followed by product-specific
//! value characters. Cue words, prefixes and suffixes come from per-aspect
//! character pools; value characters come from one pool shared by every
//! aspect, so only the cue tells which sentences feed which summary. The
//! gold summary for an aspect is a fixed aspect prefix, the value
//! characters of every sentence of that aspect (in input order), and a
//! suffix selected by the first sentence's cue.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::labeling::{overlap_rate, DEFAULT_THRESHOLD};

use super::builder::{split_for, Dataset, SplitRatios};
use super::{CategorySchema, CorpusLimits, Instance, ProductRecord, Split};

const ASPECT_POOLS: [&str; 5] = [
    "外观机身轻薄时尚金属边框配色雅圆",
    "电池续航快充毫安容量持久耐用省功",
    "摄像拍照镜头夜景变焦清晰美颜广角",
    "处理器运行流畅游戏芯片速度强劲稳",
    "智能解锁指纹识别语音助手防水双卡",
];
const VALUE_POOL: &str = "一二三四五六七八九十百千万高低大小好优佳长短多少慢宽窄厚";
const FILLER_POOL: &str = "品牌新款型号官方正宗旗舰店包邮赠送";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthOptions {
    pub ratios: SplitRatios,
    pub separator: char,
    /// Upper bound on detail sentences per aspect (at least one is emitted).
    pub max_sentences_per_aspect: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            ratios: SplitRatios::default(),
            separator: CorpusLimits::default().separator,
            max_sentences_per_aspect: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub products: Vec<ProductRecord>,
    /// One instance per (product, aspect), in product order.
    pub instances: Vec<Instance>,
    /// Gold extractor labels aligned with `instances`.
    pub gold_labels: Vec<Vec<u8>>,
}

impl SynthCorpus {
    pub fn dataset(&self) -> Dataset {
        let mut ds = Dataset::default();
        for inst in &self.instances {
            match inst.split {
                Split::Train => ds.train.push(inst.clone()),
                Split::Dev => ds.dev.push(inst.clone()),
                Split::Test => ds.test.push(inst.clone()),
            }
        }
        ds
    }

    /// Instances of one split with their gold labels.
    pub fn split(&self, split: Split) -> Vec<(Instance, Vec<u8>)> {
        self.instances
            .iter()
            .zip(&self.gold_labels)
            .filter(|(i, _)| i.split == split)
            .map(|(i, g)| (i.clone(), g.clone()))
            .collect()
    }
}

struct Lexicon {
    cues: [String; 3],
    prefix: String,
    suffixes: [String; 2],
}

impl Lexicon {
    fn new(pool: Vec<char>) -> Self {
        let word = |i: usize| -> String { [pool[2 * i], pool[2 * i + 1]].iter().collect() };
        Self {
            cues: [word(0), word(1), word(2)],
            prefix: word(3),
            suffixes: [word(4), word(5)],
        }
    }
}

/// Character pool of aspect `index`; curated for the first five aspects,
/// Hangul blocks beyond that.
fn aspect_pool(index: usize) -> Vec<char> {
    match ASPECT_POOLS.get(index) {
        Some(p) => p.chars().collect(),
        None => (0..16)
            .map(|j| char::from_u32(0xAC00 + 16 * (index as u32 - 5) + j).expect("hangul"))
            .collect(),
    }
}

fn pick(pool: &[char], n: usize, rng: &mut ChaCha8Rng) -> String {
    (0..n).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
}

/// (aspect or None for filler, cue index, value chars, sentence text)
type Detail = (Option<usize>, usize, String, String);

fn draw_details(
    lexicons: &[Lexicon],
    value_pool: &[char],
    filler: &[char],
    max_per_aspect: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Detail> {
    let mut details = Vec::new();
    for (a, lex) in lexicons.iter().enumerate() {
        let n = rng.gen_range(1..=max_per_aspect);
        let mut cues = [0usize, 1, 2];
        cues.shuffle(rng);
        for &cue in cues.iter().cycle().take(n) {
            let values = pick(value_pool, 4, rng);
            let text = format!("{}{}", lex.cues[cue], values);
            details.push((Some(a), cue, values, text));
        }
    }
    for _ in 0..rng.gen_range(1..=2) {
        details.push((None, 0, String::new(), pick(filler, 6, rng)));
    }
    details.shuffle(rng);
    details
}

fn summary_of(lexicons: &[Lexicon], details: &[Detail], aspect: usize) -> String {
    let lex = &lexicons[aspect];
    let mine: Vec<&Detail> = details.iter().filter(|d| d.0 == Some(aspect)).collect();
    let mut summary = lex.prefix.clone();
    for d in &mine {
        summary.push_str(&d.2);
    }
    summary.push_str(&lex.suffixes[mine[0].1 % 2]);
    summary
}

fn labels_are_separable(lexicons: &[Lexicon], details: &[Detail]) -> bool {
    (0..lexicons.len()).all(|a| {
        let summary = summary_of(lexicons, details, a);
        details.iter().all(|d| {
            let rate = overlap_rate(&d.3, &summary).unwrap_or(0.0);
            (d.0 == Some(a)) == (rate >= DEFAULT_THRESHOLD)
        })
    })
}

/// Generates `n_products` products of `schema` with one gold instance per
/// aspect and the matching gold sentence labels.
pub fn synth_corpus(
    seed: u64,
    n_products: usize,
    schema: &CategorySchema,
    opts: &SynthOptions,
) -> SynthCorpus {
    let lexicons: Vec<Lexicon> = (0..schema.len()).map(|i| Lexicon::new(aspect_pool(i))).collect();
    let filler: Vec<char> = FILLER_POOL.chars().collect();
    let value_pool: Vec<char> = VALUE_POOL.chars().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_per_aspect = opts.max_sentences_per_aspect.max(1);

    let mut corpus = SynthCorpus {
        products: Vec::with_capacity(n_products),
        instances: Vec::with_capacity(n_products * schema.len()),
        gold_labels: Vec::with_capacity(n_products * schema.len()),
    };

    for p in 0..n_products {
        let product_id = format!("synth-{seed}-{p:05}");
        let title = pick(&filler, 4, &mut rng);

        // Values are redrawn until no sentence of another aspect reaches the
        // labeling threshold against a summary, keeping gold labels exact.
        let details = loop {
            let d = draw_details(&lexicons, &value_pool, &filler, max_per_aspect, &mut rng);
            if labels_are_separable(&lexicons, &d) {
                break d;
            }
        };

        let mut sentences = vec![title.clone()];
        sentences.extend(details.iter().map(|d| d.3.clone()));

        let split = split_for(&product_id, seed, opts.ratios);
        let mut summaries = Vec::with_capacity(lexicons.len());
        for a in 0..lexicons.len() {
            let summary = summary_of(&lexicons, &details, a);
            let mut labels = vec![0u8];
            labels.extend(details.iter().map(|d| u8::from(d.0 == Some(a))));

            corpus.instances.push(Instance {
                product_id: product_id.clone(),
                category: schema.category.clone(),
                sentences: sentences.clone(),
                aspect: schema.aspects[a].clone(),
                summary: summary.clone(),
                split,
            });
            corpus.gold_labels.push(labels);
            summaries.push(summary);
        }

        let sep = opts.separator.to_string();
        corpus.products.push(ProductRecord {
            product_id,
            category: schema.category.clone(),
            title,
            detail_sentences: details.into_iter().map(|d| d.3).collect(),
            raw_summary: Some(summaries.join(&sep) + &sep),
        });
    }
    corpus
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::validate_instances;
    use crate::labeling::label_sentences;
    use std::collections::HashSet;

    #[test]
    fn pools_are_disjoint() {
        let mut seen = HashSet::new();
        for i in 0..8 {
            let pool = aspect_pool(i);
            assert_eq!(pool.len(), 16, "pool {i}");
            for c in pool {
                assert!(seen.insert(c), "char {c} reused in pool {i}");
            }
        }
        for c in FILLER_POOL.chars().chain(VALUE_POOL.chars()) {
            assert!(seen.insert(c), "char {c} reused");
        }
        assert!(!seen.contains(&'.'));
    }

    #[test]
    fn deterministic() {
        let schema = CategorySchema::computer();
        let a = synth_corpus(5, 20, &schema, &SynthOptions::default());
        let b = synth_corpus(5, 20, &schema, &SynthOptions::default());
        assert_eq!(a, b);
        let c = synth_corpus(6, 20, &schema, &SynthOptions::default());
        assert_ne!(a.products, c.products);
    }

    #[test]
    fn zero_products_is_empty() {
        let c = synth_corpus(1, 0, &CategorySchema::computer(), &SynthOptions::default());
        assert!(c.products.is_empty() && c.instances.is_empty());
    }

    #[test]
    fn gold_labels_agree_with_labeling() {
        let c = synth_corpus(1, 50, &CategorySchema::smartphone(), &SynthOptions::default());
        for (inst, gold) in c.instances.iter().zip(&c.gold_labels) {
            let set = label_sentences(&inst.sentences, &inst.summary, 0.35).unwrap();
            assert_eq!(&set.labels, gold);
            for i in set.positives() {
                assert!(set.overlap_rates[i] >= 0.35);
            }
        }
    }

    #[test]
    fn instances_are_valid_and_vocab_small() {
        let c = synth_corpus(3, 200, &CategorySchema::computer(), &SynthOptions::default());
        validate_instances(&c.instances, &CorpusLimits::default()).unwrap();
        let mut chars = HashSet::new();
        for inst in &c.instances {
            chars.extend(inst.summary.chars());
            for s in &inst.sentences {
                chars.extend(s.chars());
            }
            let per_aspect: HashSet<_> = c
                .instances
                .iter()
                .filter(|i| i.product_id == inst.product_id)
                .map(|i| i.aspect.index)
                .collect();
            assert_eq!(per_aspect.len(), 3);
        }
        assert!(chars.len() <= 200);
        let ds = c.dataset();
        assert_eq!(ds.len(), 600);
        assert!(!ds.dev.is_empty() && !ds.test.is_empty());
    }
}
