use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::cluster::{cluster_fragments, CharNgramTfidf, Embedder};
use super::fragments::split_fragments;
use super::{CategorySchema, CorpusLimits, Instance, ProductRecord, Split};
use crate::error::{Error, Result};
use crate::exec::Execution;

/// Fractions of products assigned to train and dev; the rest go to test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub dev: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            dev: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildOptions {
    pub min_fragment_chars: usize,
    pub max_fragment_chars: usize,
    pub limits: CorpusLimits,
    pub ratios: SplitRatios,
    /// Drop products without surviving fragments instead of failing.
    pub skip_empty: bool,
    #[serde(skip)]
    pub exec: Execution,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            min_fragment_chars: 15,
            max_fragment_chars: 55,
            limits: CorpusLimits::default(),
            ratios: SplitRatios::default(),
            skip_empty: false,
            exec: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<Instance>,
    pub dev: Vec<Instance>,
    pub test: Vec<Instance>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Instance] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut Vec<Instance> {
        match split {
            Split::Train => &mut self.train,
            Split::Dev => &mut self.dev,
            Split::Test => &mut self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.dev.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Seed-stable split assignment from a 64-bit FNV-1a hash of the product id,
/// finalized with the murmur3 mixer so ids differing only in their last
/// characters still spread over the unit interval.
pub fn split_for(product_id: &str, seed: u64, ratios: SplitRatios) -> Split {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0100_0000_01b3;
    let mut h = OFFSET;
    for b in seed.to_le_bytes().iter().chain(product_id.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(PRIME);
    }
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h = h.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    h ^= h >> 33;
    let u = (h >> 11) as f64 / (1u64 << 53) as f64;
    if u < ratios.train {
        Split::Train
    } else if u < ratios.train + ratios.dev {
        Split::Dev
    } else {
        Split::Test
    }
}

/// Builds aspect instances from writer summaries using the default
/// character n-gram TF-IDF embedder fitted on the surviving fragments.
pub fn build_dataset(
    products: &[ProductRecord],
    schema: &CategorySchema,
    seed: u64,
    opts: &BuildOptions,
) -> Result<Dataset> {
    build_with(products, schema, None, seed, opts)
}

/// [`build_dataset`] with a caller-supplied fragment embedder.
pub fn build_dataset_with<E: Embedder + Sync>(
    products: &[ProductRecord],
    schema: &CategorySchema,
    embedder: &E,
    seed: u64,
    opts: &BuildOptions,
) -> Result<Dataset> {
    build_with(products, schema, Some(embedder as &dyn Embedder), seed, opts)
}

fn build_with(
    products: &[ProductRecord],
    schema: &CategorySchema,
    embedder: Option<&dyn Embedder>,
    seed: u64,
    opts: &BuildOptions,
) -> Result<Dataset> {
    schema.validate()?;
    if opts.min_fragment_chars > opts.max_fragment_chars {
        return Err(Error::InvalidArgument(format!(
            "fragment bounds [{}, {}] are empty",
            opts.min_fragment_chars, opts.max_fragment_chars
        )));
    }
    if opts.max_fragment_chars > opts.limits.max_target_chars {
        return Err(Error::InvalidArgument(format!(
            "max_fragment_chars {} exceeds max_target_chars {}",
            opts.max_fragment_chars, opts.limits.max_target_chars
        )));
    }
    let mut ids = HashSet::new();
    for p in products {
        if p.product_id.is_empty() || !ids.insert(p.product_id.as_str()) {
            return Err(Error::Validation(format!(
                "product id {:?} is empty or duplicated",
                p.product_id
            )));
        }
        if let Some(s) = p
            .detail_sentences
            .iter()
            .chain(std::iter::once(&p.title))
            .find(|s| s.contains(opts.limits.separator))
        {
            return Err(Error::Validation(format!(
                "{}: sentence {s:?} contains the separator",
                p.product_id
            )));
        }
    }

    let sep = opts.limits.separator;
    let per_product: Vec<Option<Vec<String>>> = opts.exec.map(products, |p| {
        p.raw_summary.as_deref().map(|raw| {
            split_fragments(raw, sep, opts.min_fragment_chars, opts.max_fragment_chars)
        })
    });

    let mut missing = Vec::new();
    let mut empty = Vec::new();
    for (p, frags) in products.iter().zip(&per_product) {
        match frags {
            None => missing.push(p.product_id.clone()),
            Some(f) if f.is_empty() => empty.push(p.product_id.clone()),
            _ => {}
        }
    }
    if !missing.is_empty() {
        return Err(Error::Validation(format!(
            "products without raw_summary: {}",
            missing.join(", ")
        )));
    }
    if !empty.is_empty() && (!opts.skip_empty || empty.len() == products.len()) {
        return Err(Error::Validation(format!(
            "no fragments survive the [{}, {}] filter for: {}",
            opts.min_fragment_chars,
            opts.max_fragment_chars,
            empty.join(", ")
        )));
    }

    let all: Vec<&str> = per_product
        .iter()
        .flatten()
        .flatten()
        .map(String::as_str)
        .collect();
    let clusters = match embedder {
        Some(e) => cluster_fragments(&all, schema.cluster_count, e, seed)?,
        None => {
            let tfidf = CharNgramTfidf::fit(&all);
            cluster_fragments(&all, schema.cluster_count, &tfidf, seed)?
        }
    };

    let mut dataset = Dataset::default();
    let mut next = 0;
    for (p, frags) in products.iter().zip(&per_product) {
        let frags = frags.as_deref().unwrap_or_default();
        if frags.is_empty() {
            continue;
        }
        let split = split_for(&p.product_id, seed, opts.ratios);
        let sentences = fit_sentences(p.sentences(), &opts.limits);
        let mut seen_aspects = HashSet::new();
        for frag in frags {
            let cluster = clusters[next];
            next += 1;
            // first fragment wins in held-out splits
            if split.is_held_out() && !seen_aspects.insert(cluster) {
                continue;
            }
            dataset.split_mut(split).push(Instance {
                product_id: p.product_id.clone(),
                category: p.category.clone(),
                sentences: sentences.clone(),
                aspect: schema.aspects[cluster].clone(),
                summary: frag.clone(),
                split,
            });
        }
    }
    Ok(dataset)
}

/// Drops trailing sentences (and clips a lone over-long one) so the joined
/// input fits `max_input_chars`.
fn fit_sentences(sentences: Vec<String>, limits: &CorpusLimits) -> Vec<String> {
    let mut out = Vec::new();
    let mut used = 0;
    for s in sentences {
        let n = s.chars().count() + 1;
        if used + n > limits.max_input_chars {
            if out.is_empty() && limits.max_input_chars > 1 {
                out.push(s.chars().take(limits.max_input_chars - 1).collect());
            }
            break;
        }
        used += n;
        out.push(s);
    }
    out
}
