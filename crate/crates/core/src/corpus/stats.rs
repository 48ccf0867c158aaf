use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{Instance, Split};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    /// Number of aspect summaries (instances).
    pub n_summaries: usize,
    /// Number of distinct products.
    pub n_products: usize,
    pub per_aspect: BTreeMap<String, usize>,
}

/// Table-style statistics: overall plus one column per split.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub overall: SplitCounts,
    pub train: SplitCounts,
    pub dev: SplitCounts,
    pub test: SplitCounts,
}

impl CorpusStats {
    pub fn split(&self, split: Split) -> &SplitCounts {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    /// Rows of `(column, #sum, #prod)`.
    pub fn table(&self) -> Vec<(&'static str, usize, usize)> {
        vec![
            ("overall", self.overall.n_summaries, self.overall.n_products),
            ("train", self.train.n_summaries, self.train.n_products),
            ("dev", self.dev.n_summaries, self.dev.n_products),
            ("test", self.test.n_summaries, self.test.n_products),
        ]
    }
}

fn count<'a>(instances: impl Iterator<Item = &'a Instance>) -> SplitCounts {
    let mut products = HashSet::new();
    let mut out = SplitCounts::default();
    for inst in instances {
        out.n_summaries += 1;
        products.insert(inst.product_id.as_str());
        *out.per_aspect.entry(inst.aspect.name.clone()).or_default() += 1;
    }
    out.n_products = products.len();
    out
}

pub fn corpus_stats(train: &[Instance], dev: &[Instance], test: &[Instance]) -> CorpusStats {
    CorpusStats {
        overall: count(train.iter().chain(dev).chain(test)),
        train: count(train.iter()),
        dev: count(dev.iter()),
        test: count(test.iter()),
    }
}
