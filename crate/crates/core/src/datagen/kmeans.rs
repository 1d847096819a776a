//! Lloyd's k-means with k-means++ seeding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    centroids: Tensor,
}

impl Codebook {
    pub fn new(centroids: Tensor) -> Result<Self> {
        centroids.dims2()?;
        Ok(Self { centroids })
    }

    pub fn k(&self) -> usize {
        self.centroids.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.centroids.shape()[1]
    }

    pub fn centroids(&self) -> &Tensor {
        &self.centroids
    }

    pub fn centroid(&self, id: usize) -> &[f64] {
        self.centroids.row(id)
    }

    /// Nearest centroid by squared Euclidean distance; the lowest id wins ties.
    pub fn nearest(&self, point: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for id in 0..self.k() {
            let d = sq_dist(point, self.centroid(id));
            if d < best.1 {
                best = (id, d);
            }
        }
        best
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean squared distance of each point to its assigned centroid.
pub fn distortion(points: &Tensor, codebook: &Codebook, ids: &[usize]) -> f64 {
    let n = ids.len();
    ids.iter()
        .enumerate()
        .map(|(i, &id)| sq_dist(points.row(i), codebook.centroid(id)))
        .sum::<f64>()
        / n as f64
}

/// Quantizes each row of `points`, returning centroid ids and the
/// matrix of chosen centroid rows.
pub fn quantize(points: &Tensor, codebook: &Codebook) -> Result<(Vec<usize>, Tensor)> {
    let (n, d) = points.dims2()?;
    if d != codebook.dim() {
        return Err(Error::Shape(format!(
            "points have width {d}, codebook has width {}",
            codebook.dim()
        )));
    }
    let ids: Vec<usize> = (0..n).map(|i| codebook.nearest(points.row(i)).0).collect();
    let mut data = Vec::with_capacity(n * d);
    for &id in &ids {
        data.extend_from_slice(codebook.centroid(id));
    }
    Ok((ids, Tensor::new(vec![n, d], data)?))
}

/// Fits `k` centroids; see [`kmeans_fit_traced`].
pub fn kmeans_fit(points: &Tensor, k: usize, max_iters: usize, seed: u64) -> Result<Codebook> {
    kmeans_fit_traced(points, k, max_iters, seed).map(|(c, _)| c)
}

/// Fits `k` centroids and also returns the distortion after the initial
/// assignment and after every Lloyd iteration.
///
/// Stops after `max_iters` iterations or as soon as no assignment changes.
/// A cluster left empty by an update is respawned on the point farthest
/// from its current centroid.
pub fn kmeans_fit_traced(
    points: &Tensor,
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<(Codebook, Vec<f64>)> {
    let (n, d) = points.dims2()?;
    if k == 0 {
        return Err(Error::Config("k-means: k must be positive".into()));
    }
    if n < k {
        return Err(Error::Config(format!(
            "k-means: k exceeds points (k = {k}, points = {n})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut codebook = Codebook::new(plus_plus_init(points, k, &mut rng)?)?;
    let mut ids: Vec<usize> = (0..n).map(|i| codebook.nearest(points.row(i)).0).collect();
    let mut history = vec![distortion(points, &codebook, &ids)];

    for _ in 0..max_iters {
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &id) in ids.iter().enumerate() {
            counts[id] += 1;
            for (s, x) in sums[id * d..(id + 1) * d].iter_mut().zip(points.row(i)) {
                *s += x;
            }
        }
        let mut next = codebook.centroids.clone();
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    next.data_mut()[c * d + j] = sums[c * d + j] / counts[c] as f64;
                }
            }
        }
        let empty: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
        if !empty.is_empty() {
            let mut order: Vec<(usize, f64)> = ids
                .iter()
                .enumerate()
                .map(|(i, &id)| (i, sq_dist(points.row(i), codebook.centroid(id))))
                .collect();
            order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            for (c, (i, _)) in empty.iter().zip(order) {
                next.data_mut()[c * d..(c + 1) * d].copy_from_slice(points.row(i));
            }
        }
        codebook = Codebook::new(next)?;
        let new_ids: Vec<usize> = (0..n).map(|i| codebook.nearest(points.row(i)).0).collect();
        history.push(distortion(points, &codebook, &new_ids));
        let done = new_ids == ids;
        ids = new_ids;
        if done {
            break;
        }
    }
    Ok((codebook, history))
}

/// k-means++ seeding: the first centroid uniformly, each further one with
/// probability proportional to squared distance from the nearest chosen.
fn plus_plus_init<R: Rng + ?Sized>(points: &Tensor, k: usize, rng: &mut R) -> Result<Tensor> {
    let (n, d) = points.dims2()?;
    let mut chosen: Vec<usize> = vec![rng.random_range(0..n)];
    let mut best: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in best.iter().enumerate() {
                if r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        } else {
            // Every point coincides with a chosen centroid.
            rng.random_range(0..n)
        };
        chosen.push(pick);
        for (i, b) in best.iter_mut().enumerate() {
            *b = b.min(sq_dist(points.row(i), points.row(pick)));
        }
    }
    let mut data = Vec::with_capacity(k * d);
    for &i in &chosen {
        data.extend_from_slice(points.row(i));
    }
    Tensor::new(vec![k, d], data)
}
