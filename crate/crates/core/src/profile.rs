//! User embeddings, similarity-based sharer selection, and the k-means
//! sharer pool.

use std::cmp::Ordering;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Example, Token};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Bucket for a token: FNV-1a over the token id's little-endian `u32` bytes, mod `dim`.
pub fn token_bucket(token: Token, dim: usize) -> usize {
    let mut h = FNV_OFFSET;
    for byte in (token as u32).to_le_bytes() {
        h ^= u64::from(byte);
        h = h.wrapping_mul(FNV_PRIME);
    }
    (h % dim as u64) as usize
}

/// L2-normalized hashed token counts of `input ∥ reference`.
pub fn encode_history_item(item: &Example, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 {
        return Err(Error::Config("embedding dimension must be at least 1".into()));
    }
    if item.input.is_empty() && item.reference.is_empty() {
        return Err(Error::data("cannot encode an empty history item"));
    }
    let mut v = vec![0.0; dim];
    for &t in item.input.iter().chain(&item.reference) {
        v[token_bucket(t, dim)] += 1.0;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

/// A user's identity and history, with a lazily computed embedding.
#[derive(Debug)]
pub struct UserRecord {
    pub user_id: String,
    pub history: Vec<Example>,
    dim: usize,
    embedding: OnceLock<Vec<f64>>,
}

impl Clone for UserRecord {
    fn clone(&self) -> Self {
        let embedding = OnceLock::new();
        if let Some(e) = self.embedding.get() {
            let _ = embedding.set(e.clone());
        }
        Self {
            user_id: self.user_id.clone(),
            history: self.history.clone(),
            dim: self.dim,
            embedding,
        }
    }
}

impl UserRecord {
    pub fn new(user_id: impl Into<String>, history: Vec<Example>, dim: usize) -> Self {
        Self {
            user_id: user_id.into(),
            history,
            dim,
            embedding: OnceLock::new(),
        }
    }

    pub fn embedding(&self) -> Result<&[f64]> {
        if let Some(e) = self.embedding.get() {
            return Ok(e);
        }
        let e = user_embedding(&self.history, self.dim)?;
        Ok(self.embedding.get_or_init(|| e))
    }
}

/// Unweighted mean of the item encodings.
pub fn user_embedding(history: &[Example], dim: usize) -> Result<Vec<f64>> {
    if history.is_empty() {
        return Err(Error::data("cannot embed an empty history"));
    }
    let mut acc = vec![0.0; dim];
    for item in history {
        for (a, x) in acc.iter_mut().zip(encode_history_item(item, dim)?) {
            *a += x;
        }
    }
    let n = history.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Degenerate(format!(
            "vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("zero vector in cosine".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Ranks candidates by similarity to `target`; highest first, ties to the
/// lexicographically smaller id.
pub fn rank_by_similarity<'a>(target: &[f64], candidates: &[(&'a str, &[f64])]) -> Result<Vec<(&'a str, f64)>> {
    let mut scored = candidates
        .iter()
        .map(|(id, e)| Ok((*id, cosine(target, e)?)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Ok(scored)
}

/// The `k` sharers most similar to `target`, most similar first.
pub fn select_top_k<'a>(target: &UserRecord, sharers: &'a [UserRecord], k: usize) -> Result<Vec<&'a UserRecord>> {
    if sharers.is_empty() {
        return Err(Error::data("no sharers to select from"));
    }
    if k == 0 {
        return Err(Error::Config("top_k must be at least 1".into()));
    }
    let te = target.embedding()?;
    let candidates = sharers
        .iter()
        .map(|s| Ok((s.user_id.as_str(), s.embedding()?)))
        .collect::<Result<Vec<_>>>()?;
    let ranked = rank_by_similarity(te, &candidates)?;
    Ok(ranked
        .into_iter()
        .take(k)
        .map(|(id, _)| sharers.iter().find(|s| s.user_id == id).expect("ranked from sharers"))
        .collect())
}

#[derive(Debug, Clone)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squares after each assignment step.
    pub wcss_history: Vec<f64>,
}

pub const KMEANS_MAX_ITERS: usize = 100;
pub const KMEANS_TOL: f64 = 1e-8;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Lloyd's algorithm with k-means++ seeding.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeans> {
    if points.is_empty() {
        return Err(Error::data("k-means needs at least one point"));
    }
    if k == 0 {
        return Err(Error::Config("n_clusters must be at least 1".into()));
    }
    let k = k.min(points.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    while centroids.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| {
                centroids
                    .iter()
                    .map(|c| sq_dist(p, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = d2.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..points.len())
        };
        centroids.push(points[pick].clone());
    }

    let dim = points[0].len();
    let mut assignments = vec![0; points.len()];
    let mut wcss_history = Vec::new();
    for _ in 0..KMEANS_MAX_ITERS {
        let mut wcss = 0.0;
        for (p, a) in points.iter().zip(assignments.iter_mut()) {
            let (best, d) = centroids
                .iter()
                .enumerate()
                .map(|(j, c)| (j, sq_dist(p, c)))
                .min_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)))
                .expect("k >= 1");
            *a = best;
            wcss += d;
        }
        wcss_history.push(wcss);

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p) {
                *s += x;
            }
        }
        let mut shift: f64 = 0.0;
        for j in 0..k {
            // an empty cluster keeps its previous centroid
            if counts[j] == 0 {
                continue;
            }
            let new: Vec<f64> = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            shift = shift.max(sq_dist(&new, &centroids[j]).sqrt());
            centroids[j] = new;
        }
        if shift < KMEANS_TOL {
            break;
        }
    }
    Ok(KMeans {
        assignments,
        centroids,
        wcss_history,
    })
}

/// One representative per nonempty cluster: the member with the largest
/// history, ties to the smaller id. Returned sorted by id.
pub fn kmeans_pool(users: &[UserRecord], n_clusters: usize, seed: u64) -> Result<Vec<String>> {
    if users.is_empty() {
        return Err(Error::data("no users to cluster"));
    }
    if n_clusters >= users.len() {
        let mut all: Vec<String> = users.iter().map(|u| u.user_id.clone()).collect();
        all.sort();
        return Ok(all);
    }
    let points = users
        .iter()
        .map(|u| u.embedding().map(<[f64]>::to_vec))
        .collect::<Result<Vec<_>>>()?;
    let km = kmeans(&points, n_clusters, seed)?;
    let mut reps: Vec<Option<&UserRecord>> = vec![None; n_clusters];
    for (u, &c) in users.iter().zip(&km.assignments) {
        let better = match reps[c] {
            None => true,
            Some(cur) => match u.history.len().cmp(&cur.history.len()) {
                Ordering::Greater => true,
                Ordering::Equal => u.user_id < cur.user_id,
                Ordering::Less => false,
            },
        };
        if better {
            reps[c] = Some(u);
        }
    }
    let mut pool: Vec<String> = reps.into_iter().flatten().map(|u| u.user_id.clone()).collect();
    pool.sort();
    Ok(pool)
}
