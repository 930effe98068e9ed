//! Starting points for `M`, `A` and `B`.
//!
//! Every random draw comes from ChaCha8 (`rand_chacha`) seeded with
//! `seed_from_u64(seed)`, one stream per kind of initialization, so a seed
//! yields the same matrices on every platform.

use std::path::PathBuf;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::distr::{Distribution, Open01};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::models::{DataMatrix, FactorSet, ProportionMatrix};

pub const DEFAULT_KMEANS_ITERS: usize = 100;
pub const KMEANS_TOL: f64 = 1e-9;
/// Uniform mass mixed into one-hot label proportions.
pub const LABEL_SMOOTHING: f64 = 0.05;

const STREAM_KMEANS: u64 = 1;
const STREAM_PROPORTIONS: u64 = 2;
const STREAM_INTERNAL: u64 = 3;
const STREAM_FACTORS: u64 = 4;

pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMethod {
    KMeans,
    Random,
    FromFile,
}

impl FromStr for InitMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "kmeans" | "k-means" => Ok(InitMethod::KMeans),
            "random" => Ok(InitMethod::Random),
            "file" => Ok(InitMethod::FromFile),
            other => Err(Error::InvalidArgument(format!("unknown init method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitSpec {
    pub method: InitMethod,
    pub seed: u64,
    pub kmeans_iters: usize,
    pub path: Option<PathBuf>,
}

impl InitSpec {
    pub fn kmeans(seed: u64) -> Self {
        InitSpec { method: InitMethod::KMeans, seed, kmeans_iters: DEFAULT_KMEANS_ITERS, path: None }
    }

    pub fn random(seed: u64) -> Self {
        InitSpec { method: InitMethod::Random, seed, kmeans_iters: DEFAULT_KMEANS_ITERS, path: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.method == InitMethod::KMeans && self.kmeans_iters == 0 {
            return Err(Error::InvalidArgument("kmeans_iters must be >= 1".into()));
        }
        if self.method == InitMethod::FromFile && self.path.is_none() {
            return Err(Error::InvalidArgument("file initialization needs a path".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    /// L × K centroids.
    pub centroids: Array2<f64>,
    /// Cluster index of each voxel.
    pub labels: Vec<usize>,
    pub iterations: usize,
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: ArrayView1<'_, f64>, centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.columns().into_iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// k-means++ seeding: first center uniform, then sampled with probability
/// proportional to the squared distance to the closest chosen center.
fn seed_centroids(points: ArrayView2<'_, f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = points.ncols();
    let mut centroids = Array2::zeros((points.nrows(), k));
    let first = rng.random_range(0..n);
    centroids.column_mut(0).assign(&points.column(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.column(i), points.column(first))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    idx = i;
                    break;
                }
            }
            idx
        } else {
            // all points coincide with chosen centers
            c.min(n - 1)
        };
        centroids.column_mut(c).assign(&points.column(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.column(i), points.column(pick)));
        }
    }
    centroids
}

/// Lloyd's algorithm on the columns of `points` with squared Euclidean
/// assignment. An emptied cluster is moved onto the point farthest from its
/// current centroid (lowest index on ties).
pub fn kmeans(points: ArrayView2<'_, f64>, k: usize, seed: u64, max_iters: usize) -> Result<KMeans> {
    let n = points.ncols();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("k-means needs 1 <= K <= N, got K = {k}, N = {n}")));
    }
    if max_iters == 0 {
        return Err(Error::InvalidArgument("kmeans_iters must be >= 1".into()));
    }
    let mut rng = rng_for(seed, STREAM_KMEANS);
    let mut centroids = seed_centroids(points, k, &mut rng);
    let mut labels = vec![0usize; n];
    let mut iterations = 0;

    for _ in 0..max_iters {
        iterations += 1;
        let mut dists = vec![0.0; n];
        for i in 0..n {
            let (c, d) = nearest(points.column(i), &centroids);
            labels[i] = c;
            dists[i] = d;
        }

        let mut counts = vec![0usize; k];
        for &c in &labels {
            counts[c] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let far = (0..n).filter(|&i| counts[labels[i]] > 1).fold(None, |best: Option<usize>, i| match best {
                Some(b) if dists[b] >= dists[i] => Some(b),
                _ => Some(i),
            });
            if let Some(i) = far {
                counts[labels[i]] -= 1;
                labels[i] = c;
                counts[c] = 1;
                dists[i] = 0.0;
            }
        }

        let mut next = Array2::zeros(centroids.raw_dim());
        for (i, &c) in labels.iter().enumerate() {
            let mut col = next.column_mut(c);
            col += &points.column(i);
        }
        for (c, mut col) in next.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| v / counts[c] as f64);
        }
        let shift =
            next.columns().into_iter().zip(centroids.columns()).map(|(a, b)| sq_dist(a, b).sqrt()).fold(0.0, f64::max);
        centroids = next;
        if shift <= KMEANS_TOL {
            break;
        }
    }
    // labels consistent with the final centroids
    for (label, col) in labels.iter_mut().zip(points.columns()) {
        *label = nearest(col, &centroids).0;
    }
    Ok(KMeans { centroids, labels, iterations })
}

/// Factor TACs from the k-means centroids of the voxel TACs.
pub fn init_factors_kmeans(y: &DataMatrix, k: usize, spec: &InitSpec) -> Result<FactorSet> {
    let km = kmeans(y.view(), k, spec.seed, spec.kmeans_iters)?;
    Ok(FactorSet { m: km.centroids, sbf_pinned: false })
}

/// `k` distinct voxel TACs drawn uniformly, floored at 1e-3 of the data peak
/// so no factor entry starts at zero.
pub fn init_factors_random(y: &DataMatrix, k: usize, spec: &InitSpec) -> Result<FactorSet> {
    let n = y.voxels();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("need 1 <= K <= N, got K = {k}, N = {n}")));
    }
    let mut rng = rng_for(spec.seed, STREAM_FACTORS);
    let picks = rand::seq::index::sample(&mut rng, n, k);
    let peak = y.values().fold(0.0f64, |a, &b| a.max(b));
    let floor = 1e-3 * if peak > 0.0 { peak } else { 1.0 };
    let mut m = Array2::zeros((y.frames(), k));
    for (c, i) in picks.iter().enumerate() {
        m.column_mut(c).assign(&y.view().column(i));
    }
    m.mapv_inplace(|v: f64| v.max(floor));
    Ok(FactorSet { m, sbf_pinned: false })
}

/// Index of the closest factor column (squared Euclidean) for every voxel.
pub fn nearest_labels(y: ArrayView2<'_, f64>, m: &Array2<f64>) -> Vec<usize> {
    y.columns().into_iter().map(|c| nearest(c, m).0).collect()
}

/// One-hot columns from cluster labels, mixed with `smoothing` uniform mass
/// so no entry is zero.
pub fn proportions_from_labels(labels: &[usize], k: usize, smoothing: f64) -> Result<ProportionMatrix> {
    if !(0.0..=1.0).contains(&smoothing) || smoothing == 0.0 {
        return Err(Error::InvalidArgument(format!("smoothing must lie in (0, 1], got {smoothing}")));
    }
    let mut a = Array2::from_elem((k, labels.len()), smoothing / k as f64);
    for (n, &c) in labels.iter().enumerate() {
        if c >= k {
            return Err(Error::InvalidArgument(format!("label {c} out of range for K = {k}")));
        }
        a[[c, n]] += 1.0 - smoothing;
    }
    Ok(ProportionMatrix { a })
}

/// i.i.d. uniform(0, 1) proportions; columns renormalized when `stochastic`.
pub fn init_proportions_random(k: usize, n: usize, spec: &InitSpec, stochastic: bool) -> ProportionMatrix {
    let mut rng = rng_for(spec.seed, STREAM_PROPORTIONS);
    let mut a = Array2::from_shape_simple_fn((k, n), || Open01.sample(&mut rng));
    if stochastic {
        for mut col in a.columns_mut() {
            let s = col.sum();
            col.mapv_inplace(|v| v / s);
        }
    }
    ProportionMatrix { a }
}

/// i.i.d. uniform(0, scale) internal proportions.
pub fn init_internal_random(nv: usize, n: usize, spec: &InitSpec, scale: f64) -> Result<Array2<f64>> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::InvalidArgument(format!("scale must be > 0, got {scale}")));
    }
    let mut rng = rng_for(spec.seed, STREAM_INTERNAL);
    Ok(Array2::from_shape_simple_fn((nv, n), || {
        let u: f64 = Open01.sample(&mut rng);
        scale * u
    }))
}
