//! Diversity and distribution-match metrics over text embeddings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    /// Unit-norm embedding of `text`.
    fn embed(&self, text: &str) -> Vec<f64>;
}

/// Signed feature hashing over lowercase whitespace tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashedBagEmbedder {
    dim: usize,
    seed: u64,
}

impl HashedBagEmbedder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim < 8 {
            return Err(Error::domain(format!(
                "embedding dimension {dim} is below 8"
            )));
        }
        Ok(Self { dim, seed })
    }
}

pub fn default_embedder(dim: usize, seed: u64) -> Result<HashedBagEmbedder> {
    HashedBagEmbedder::new(dim, seed)
}

impl Embedder for HashedBagEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for tok in text.to_lowercase().split_whitespace() {
            let h = seed::derive(self.seed, &[seed::hash_str(tok)]);
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % self.dim as u64) as usize] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            v[0] = 1.0;
        } else {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn check_dims(sets: &[&[Vec<f64>]]) -> Result<()> {
    let mut dim = None;
    for v in sets.iter().flat_map(|s| s.iter()) {
        match dim {
            None => dim = Some(v.len()),
            Some(d) if d != v.len() => {
                return Err(Error::domain(format!(
                    "dimension mismatch: {d} vs {}",
                    v.len()
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Mean over items of the mean cosine similarity to their `k` nearest
/// neighbours, excluding the item itself. Ties go to the lower index.
pub fn sr_at_k(embeddings: &[Vec<f64>], k: usize) -> Result<f64> {
    let n = embeddings.len();
    if k == 0 || n <= k {
        return Err(Error::domain(format!(
            "SR@{k} needs more than {k} embeddings, got {n}"
        )));
    }
    check_dims(&[embeddings])?;
    let mut total = 0.0;
    for (i, yi) in embeddings.iter().enumerate() {
        let mut sims: Vec<(f64, usize)> = embeddings
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(j, yj)| (dot(yi, yj), j))
            .collect();
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        total += sims[..k].iter().map(|s| s.0).sum::<f64>() / k as f64;
    }
    Ok(total / n as f64)
}

fn mean_cross_distance(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let sum: f64 = x
        .iter()
        .map(|a| y.iter().map(|b| euclidean(a, b)).sum::<f64>())
        .sum();
    sum / (x.len() * y.len()) as f64
}

/// Two-sample energy distance; within-set means include the zero self-pairs.
pub fn energy_distance(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::domain("energy distance needs two nonempty samples"));
    }
    check_dims(&[x, y])?;
    Ok(2.0 * mean_cross_distance(x, y) - mean_cross_distance(x, x) - mean_cross_distance(y, y))
}

/// Energy distance scaled by the mean distance between distinct members of `x`.
pub fn ed_rel(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    let m = x.len();
    if m < 2 {
        return Err(Error::domain(
            "relative energy distance needs at least 2 reference vectors",
        ));
    }
    let ed = energy_distance(x, y)?;
    let denom = mean_cross_distance(x, x) * (m * m) as f64 / (m * (m - 1)) as f64;
    if denom == 0.0 {
        return Err(Error::domain("reference vectors are all identical"));
    }
    Ok(ed / denom)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityHistogram {
    /// `counts[b]` covers `[b/bins, (b+1)/bins)`; the last bin is closed.
    pub counts: Vec<usize>,
    pub maxima: Vec<f64>,
}

pub fn max_similarity_distribution(
    synth: &[Vec<f64>],
    reference: &[Vec<f64>],
    bins: usize,
) -> Result<SimilarityHistogram> {
    if reference.is_empty() {
        return Err(Error::domain("empty reference set"));
    }
    if bins == 0 {
        return Err(Error::domain("histogram needs at least one bin"));
    }
    check_dims(&[synth, reference])?;
    let maxima: Vec<f64> = synth
        .iter()
        .map(|s| {
            reference
                .iter()
                .map(|r| dot(s, r))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let mut counts = vec![0; bins];
    for &m in &maxima {
        counts[similarity_bin(m, bins)] += 1;
    }
    Ok(SimilarityHistogram { counts, maxima })
}

pub fn similarity_bin(sim: f64, bins: usize) -> usize {
    ((sim.max(0.0) * bins as f64).floor() as usize).min(bins - 1)
}

/// Fixed random 2-D projection of embeddings, for pool scatter snapshots.
pub fn project_2d(embeddings: &[Vec<f64>], seed: u64) -> Vec<[f64; 2]> {
    let Some(dim) = embeddings.first().map(Vec::len) else {
        return Vec::new();
    };
    let mut rng = seed::rng(seed);
    let axes: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    embeddings
        .iter()
        .map(|e| [dot(e, &axes[0]), dot(e, &axes[1])])
        .collect()
}
