//! Desk-scale synthetic dynamic images with known ground truth.
//!
//! Factor TACs are peak-normalized gamma variates `t^p e^(-t/τ)` sampled at
//! the mid-times of `L` frames spanning 60 minutes (durations growing from 1
//! to 5 units before rescaling). Proportions are Dirichlet draws; factor 1
//! dominates one contiguous block of voxel indices (the high-uptake region).
//! SLMM phantoms add internal variability supported on that block only.
//! Observations are drawn from one of several noise families around the
//! noiseless image `X*`.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};

use crate::error::{Error, Result};
use crate::init::rng_for;
use crate::models::{evaluate_model, DataMatrix, ModelKind, Theta};

const STREAM_TRUTH: u64 = 11;
const STREAM_NOISE: u64 = 12;

pub const DEFAULT_FRAMES: usize = 20;
pub const DEFAULT_FACTORS: usize = 4;
pub const DEFAULT_VOXELS: usize = 2500;
pub const DEFAULT_VARIABILITY_RANK: usize = 3;
pub const ACQUISITION_MINUTES: f64 = 60.0;
/// Upper bound of the internal proportions, relative to the SBF peak.
pub const VARIABILITY_SCALE: f64 = 0.3;

/// Observation noise around the noiseless image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseModel {
    /// `y = max(x + N(0, σ²), 0)`; σ = 0 gives `y = x`.
    Gaussian { sigma: f64 },
    /// `y = Poisson(s·x) / s`.
    Poisson { scale: f64 },
    /// `y = Gamma(shape α, scale x/α)`, mean `x`.
    Gamma { shape: f64 },
    /// Poisson counts followed by additive Gaussian noise, clamped at 0.
    PoissonGaussian { scale: f64, sigma: f64 },
}

/// Noise regimes standing in for short and long OSEM reconstructions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Few iterations, unfiltered: heavy-tailed multiplicative noise.
    SixIt,
    /// Many iterations, post-smoothed: low-variance Poisson-Gaussian noise.
    FiftyIt,
}

impl Preset {
    pub fn noise(self) -> NoiseModel {
        match self {
            Preset::SixIt => NoiseModel::Gamma { shape: 10.0 },
            Preset::FiftyIt => NoiseModel::PoissonGaussian { scale: 500.0, sigma: 0.005 },
        }
    }

    /// Sparsity weight λ for β ∈ {0, 1, 2}; linear interpolation between
    /// those points and constant beyond them.
    pub fn lambda(self, beta: f64) -> f64 {
        let table = match self {
            Preset::SixIt => [1.3e-4, 1.3e-3, 3.9e-3],
            Preset::FiftyIt => [6.8e-5, 6.8e-4, 2e-3],
        };
        if beta <= 0.0 {
            table[0]
        } else if beta >= 2.0 {
            table[2]
        } else if beta <= 1.0 {
            table[0] + beta * (table[1] - table[0])
        } else {
            table[1] + (beta - 1.0) * (table[2] - table[1])
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::SixIt => "6it",
            Preset::FiftyIt => "50it",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "6it" => Ok(Preset::SixIt),
            "50it" => Ok(Preset::FiftyIt),
            other => Err(Error::InvalidArgument(format!("unknown preset '{other}' (6it, 50it)"))),
        }
    }
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            NoiseModel::Gaussian { sigma } => sigma >= 0.0 && sigma.is_finite(),
            NoiseModel::Poisson { scale } => scale > 0.0 && scale.is_finite(),
            NoiseModel::Gamma { shape } => shape > 0.0 && shape.is_finite(),
            NoiseModel::PoissonGaussian { scale, sigma } => {
                scale > 0.0 && scale.is_finite() && sigma >= 0.0 && sigma.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid noise parameters {self}")))
        }
    }

    fn draw(&self, x: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
        let bad = |e: &dyn fmt::Display| Error::InvalidArgument(format!("noise at x = {x}: {e}"));
        Ok(match *self {
            NoiseModel::Gaussian { sigma } => {
                if sigma == 0.0 {
                    x
                } else {
                    (x + sigma * rng.sample::<f64, _>(rand_distr::StandardNormal)).max(0.0)
                }
            }
            NoiseModel::Poisson { scale } => poisson(scale * x, rng).map_err(|e| bad(&e))? / scale,
            NoiseModel::Gamma { shape } => Gamma::new(shape, x / shape).map_err(|e| bad(&e))?.sample(rng),
            NoiseModel::PoissonGaussian { scale, sigma } => {
                let counts = poisson(scale * x, rng).map_err(|e| bad(&e))? / scale;
                let n = Normal::new(0.0, sigma).map_err(|e| bad(&e))?;
                (counts + n.sample(rng)).max(0.0)
            }
        })
    }
}

fn poisson(mean: f64, rng: &mut ChaCha8Rng) -> std::result::Result<f64, rand_distr::PoissonError> {
    if mean <= 0.0 {
        return Ok(0.0);
    }
    Ok(Poisson::new(mean)?.sample(rng))
}

impl fmt::Display for NoiseModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            NoiseModel::Gaussian { sigma } => write!(f, "gaussian(sigma={sigma})"),
            NoiseModel::Poisson { scale } => write!(f, "poisson(scale={scale})"),
            NoiseModel::Gamma { shape } => write!(f, "gamma(shape={shape})"),
            NoiseModel::PoissonGaussian { scale, sigma } => {
                write!(f, "poisson-gaussian(scale={scale}, sigma={sigma})")
            }
        }
    }
}

/// Draws `noise(x)` element-wise, column by column.
pub fn add_noise(x: &Array2<f64>, noise: &NoiseModel, seed: u64) -> Result<Array2<f64>> {
    noise.validate()?;
    let mut rng = rng_for(seed, STREAM_NOISE);
    let mut y = Array2::zeros(x.raw_dim());
    for (mut yc, xc) in y.columns_mut().into_iter().zip(x.columns()) {
        for (yv, &xv) in yc.iter_mut().zip(xc.iter()) {
            *yv = noise.draw(xv, &mut rng)?;
        }
    }
    Ok(y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub frames: usize,
    pub voxels: usize,
    pub factors: usize,
    pub variability_rank: usize,
    pub kind: ModelKind,
    pub noise: NoiseModel,
    /// Drives the ground truth.
    pub seed: u64,
    /// Drives the noise draw; defaults to `seed`.
    pub noise_seed: Option<u64>,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            frames: DEFAULT_FRAMES,
            voxels: DEFAULT_VOXELS,
            factors: DEFAULT_FACTORS,
            variability_rank: DEFAULT_VARIABILITY_RANK,
            kind: ModelKind::Slmm,
            noise: NoiseModel::Gaussian { sigma: 0.0 },
            seed: 0,
            noise_seed: None,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let (l, n, k) = (self.frames, self.voxels, self.factors);
        if l < 2 || n == 0 || k == 0 {
            return Err(Error::InvalidArgument(format!("need L >= 2, N >= 1, K >= 1 (got {l}, {n}, {k})")));
        }
        if k > l.min(n) {
            return Err(Error::InvalidArgument(format!("K = {k} exceeds min(L, N) = {}", l.min(n))));
        }
        if self.kind == ModelKind::Slmm && (self.variability_rank == 0 || self.variability_rank >= l) {
            return Err(Error::InvalidArgument(format!(
                "variability rank must satisfy 1 <= N_v < L, got {}",
                self.variability_rank
            )));
        }
        self.noise.validate()
    }

    /// Voxel index range of the high-uptake block.
    pub fn high_uptake_block(&self) -> std::ops::Range<usize> {
        let start = self.voxels / 4;
        let len = (self.voxels / 5).max(1);
        start..(start + len).min(self.voxels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub m: Array2<f64>,
    pub a: Array2<f64>,
    pub v: Option<Array2<f64>>,
    pub b: Option<Array2<f64>>,
    /// Noiseless image.
    pub x: Array2<f64>,
    pub kind: ModelKind,
}

impl GroundTruth {
    /// The generating latent variables; the SBF is pinned for SLMM.
    pub fn theta(&self) -> Theta {
        let mut theta = Theta::new(self.m.clone(), self.a.clone()).pinned(self.kind == ModelKind::Slmm);
        if let (Some(v), Some(b)) = (&self.v, &self.b) {
            theta = theta.with_variability(v.clone(), b.clone());
        }
        theta
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub data: DataMatrix,
    pub truth: GroundTruth,
    /// Frame mid-times in minutes.
    pub frame_times: Vec<f64>,
}

/// Frame durations growing linearly and summing to the acquisition length.
pub fn frame_schedule(frames: usize) -> (Vec<f64>, Vec<f64>) {
    let raw: Vec<f64> =
        (0..frames).map(|l| if frames > 1 { 1.0 + 4.0 * l as f64 / (frames - 1) as f64 } else { 1.0 }).collect();
    let total: f64 = raw.iter().sum();
    let durations: Vec<f64> = raw.iter().map(|d| d * ACQUISITION_MINUTES / total).collect();
    let mut t = 0.0;
    let mids = durations
        .iter()
        .map(|d| {
            let mid = t + d / 2.0;
            t += d;
            mid
        })
        .collect();
    (durations, mids)
}

fn gamma_variate(times: &[f64], p: f64, tau: f64) -> Array1<f64> {
    let curve: Array1<f64> = times.iter().map(|&t| t.powf(p) * (-t / tau).exp()).collect();
    let peak = curve.fold(0.0f64, |a, &b| a.max(b));
    curve / peak
}

/// `(p, τ)` of factor `k`: specific binding, blood, white matter,
/// non-specific gray matter, then a generic progression.
fn factor_shape(k: usize) -> (f64, f64) {
    match k {
        0 => (1.2, 18.0),
        1 => (0.4, 2.5),
        2 => (1.0, 10.0),
        3 => (2.0, 6.0),
        _ => (0.6 + 0.35 * k as f64, 3.0 + 5.0 * k as f64),
    }
}

fn variability_shape(i: usize) -> (f64, f64) {
    (0.8 + 0.5 * i as f64, (30.0 - 6.0 * i as f64).max(4.0))
}

fn dirichlet(alpha: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let mut draws = Vec::with_capacity(alpha.len());
    for &a in alpha {
        let g = Gamma::new(a, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        draws.push(g.sample(rng).max(f64::MIN_POSITIVE));
    }
    let total: f64 = draws.iter().sum();
    Ok(draws.into_iter().map(|d| d / total).collect())
}

/// Builds a phantom and its ground truth.
pub fn generate(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let (l, n, k) = (spec.frames, spec.voxels, spec.factors);
    let (durations, times) = frame_schedule(l);
    let mut rng = rng_for(spec.seed, STREAM_TRUTH);

    let mut m = Array2::zeros((l, k));
    for kk in 0..k {
        let (p, tau) = factor_shape(kk);
        m.column_mut(kk).assign(&gamma_variate(&times, p, tau));
    }

    let block = spec.high_uptake_block();
    let mut a = Array2::zeros((k, n));
    for i in 0..n {
        let alpha: Vec<f64> = (0..k)
            .map(|kk| match (kk, block.contains(&i)) {
                (0, true) => 6.0,
                (0, false) => 0.3,
                _ => 1.0,
            })
            .collect();
        let col = if k == 1 { vec![1.0] } else { dirichlet(&alpha, &mut rng)? };
        for (kk, v) in col.into_iter().enumerate() {
            a[[kk, i]] = v;
        }
    }

    let (v, b) = if spec.kind == ModelKind::Slmm {
        let nv = spec.variability_rank;
        let mut v = Array2::zeros((l, nv));
        for i in 0..nv {
            let (p, tau) = variability_shape(i);
            v.column_mut(i).assign(&gamma_variate(&times, p, tau));
        }
        let peak = m.column(0).fold(0.0f64, |acc, &x| acc.max(x));
        let mut b = Array2::zeros((nv, n));
        for i in block.clone() {
            for r in 0..nv {
                b[[r, i]] = rng.random::<f64>() * VARIABILITY_SCALE * peak;
            }
        }
        (Some(v), Some(b))
    } else {
        (None, None)
    };

    let mut theta = Theta::new(m.clone(), a.clone());
    if let (Some(v), Some(b)) = (&v, &b) {
        theta = theta.with_variability(v.clone(), b.clone());
    }
    let x = evaluate_model(&theta)?;
    let y = add_noise(&x, &spec.noise, spec.noise_seed.unwrap_or(spec.seed))?;
    let data = DataMatrix::new(y)?.with_frame_durations(durations)?;
    Ok(Phantom { data, truth: GroundTruth { m, a, v, b, x, kind: spec.kind }, frame_times: times })
}
