use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Maps a text fragment to a fixed-dimension vector.
pub trait Embedder {
    fn embed(&self, text: &str) -> Vec<f64>;
}

impl<F> Embedder for F
where
    F: Fn(&str) -> Vec<f64>,
{
    fn embed(&self, text: &str) -> Vec<f64> {
        self(text)
    }
}

/// L2-normalised TF-IDF over character n-grams, fitted on a fragment set.
#[derive(Debug, Clone)]
pub struct CharNgramTfidf {
    orders: Vec<usize>,
    index: BTreeMap<String, usize>,
    idf: Vec<f64>,
}

impl CharNgramTfidf {
    /// Unigrams and bigrams.
    pub fn fit<S: AsRef<str>>(texts: &[S]) -> Self {
        Self::fit_orders(texts, &[1, 2])
    }

    pub fn fit_orders<S: AsRef<str>>(texts: &[S], orders: &[usize]) -> Self {
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            let grams: HashSet<String> = ngrams(t.as_ref(), orders).collect();
            for g in grams {
                *df.entry(g).or_default() += 1;
            }
        }
        let n = texts.len() as f64;
        let mut index = BTreeMap::new();
        let mut idf = Vec::with_capacity(df.len());
        for (i, (g, d)) in df.into_iter().enumerate() {
            index.insert(g, i);
            // smoothed idf
            idf.push(((1.0 + n) / (1.0 + d as f64)).ln() + 1.0);
        }
        Self {
            orders: orders.to_vec(),
            index,
            idf,
        }
    }

    pub fn dim(&self) -> usize {
        self.idf.len()
    }
}

impl Embedder for CharNgramTfidf {
    fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.idf.len()];
        for g in ngrams(text, &self.orders) {
            if let Some(&i) = self.index.get(&g) {
                v[i] += 1.0;
            }
        }
        for (x, w) in v.iter_mut().zip(&self.idf) {
            *x *= w;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

fn ngrams<'a>(text: &'a str, orders: &'a [usize]) -> impl Iterator<Item = String> + 'a {
    let chars: Vec<char> = text.chars().collect();
    orders.iter().flat_map(move |&n| {
        let windows: Vec<String> = if n == 0 || chars.len() < n {
            Vec::new()
        } else {
            chars.windows(n).map(|w| w.iter().collect()).collect()
        };
        windows.into_iter()
    })
}

#[derive(Debug, Clone, Copy)]
pub struct KMeansOptions {
    pub max_iterations: usize,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
        }
    }
}

/// Embeds each fragment and clusters the vectors into `k` groups.
pub fn cluster_fragments<S: AsRef<str>, E: Embedder + ?Sized>(
    fragments: &[S],
    k: usize,
    embedder: &E,
    seed: u64,
) -> Result<Vec<usize>> {
    if fragments.is_empty() {
        return Err(Error::InvalidArgument("no fragments to cluster".into()));
    }
    let points: Vec<Vec<f64>> = fragments.iter().map(|f| embedder.embed(f.as_ref())).collect();
    kmeans(&points, k, seed, KMeansOptions::default())
}

/// Lloyd's algorithm with seeded k-means++ initialisation.
///
/// Stops when assignments no longer change or after `max_iterations`.
/// Nearest-centroid ties go to the lowest cluster id; a cluster that loses
/// all its points keeps its previous centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, opts: KMeansOptions) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let dim = points.first().map(Vec::len).unwrap_or(0);
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape("embeddings have differing dimensions".into()));
    }
    let distinct: HashSet<Vec<u64>> = points
        .iter()
        .map(|p| p.iter().map(|x| x.to_bits()).collect())
        .collect();
    if k > distinct.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds the {} distinct embedded points",
            distinct.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = init_plus_plus(points, k, &mut rng);
    let mut assign = vec![usize::MAX; points.len()];
    for _ in 0..opts.max_iterations {
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        if next == assign {
            break;
        }
        assign = next;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assign) {
            counts[c] += 1;
            for (s, x) in sums[c].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    Ok(assign)
}

fn init_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.gen_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = None;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    chosen = Some(i);
                    if target < d {
                        break;
                    }
                    target -= d;
                }
            }
            chosen.expect("positive mass")
        } else {
            rng.gen_range(0..points.len())
        };
        let c = points[pick].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
/// Within-cluster sum of squares of an assignment.
pub(crate) fn wcss(points: &[Vec<f64>], assign: &[usize]) -> f64 {
    use std::collections::HashMap;
    let mut groups: HashMap<usize, Vec<&Vec<f64>>> = HashMap::new();
    for (p, &c) in points.iter().zip(assign) {
        groups.entry(c).or_default().push(p);
    }
    groups
        .values()
        .map(|members| {
            let dim = members[0].len();
            let mean: Vec<f64> = (0..dim)
                .map(|j| members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64)
                .collect();
            members.iter().map(|p| sq_dist(p, &mean)).sum::<f64>()
        })
        .sum()
}
