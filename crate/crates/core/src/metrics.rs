//! Reconstruction and per-variable error metrics, plus factor alignment to
//! undo label switching before comparing against ground truth.

use ndarray::{s, Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::models::{evaluate_model, ModelKind, Theta};
use crate::phantom::GroundTruth;

/// `10 log10(max(X*)² / ‖X̂ − X*‖²_F)` in dB; `+∞` on exact recovery.
pub fn psnr(x_hat: ArrayView2<'_, f64>, x_star: ArrayView2<'_, f64>) -> Result<f64> {
    if x_hat.dim() != x_star.dim() {
        return Err(Error::shape("psnr", x_star.dim(), x_hat.dim()));
    }
    let peak = x_star.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if !(peak > 0.0) {
        return Err(Error::Domain("psnr needs a ground truth with a positive maximum".into()));
    }
    let err: f64 = x_hat.iter().zip(x_star.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / err).log10())
}

/// `‖θ̂ − θ*‖²_F / ‖θ*‖²_F`.
pub fn nmse(hat: ArrayView2<'_, f64>, star: ArrayView2<'_, f64>) -> Result<f64> {
    if hat.dim() != star.dim() {
        return Err(Error::shape("nmse", star.dim(), hat.dim()));
    }
    let denom: f64 = star.iter().map(|v| v * v).sum();
    if denom == 0.0 {
        return Err(Error::Domain("nmse is undefined for an all-zero reference".into()));
    }
    let num: f64 = hat.iter().zip(star.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(num / denom)
}

/// Minimum-cost assignment on a square cost matrix (Hungarian method,
/// potentials form). Returns `assign[row] = col`.
pub fn min_cost_assignment(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "cost matrix must be square");
    // 1-based internals; index 0 is the virtual start column
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        if owner[j] > 0 {
            assign[owner[j] - 1] = j - 1;
        }
    }
    assign
}

fn peak_normalized(m: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = m.to_owned();
    for mut c in out.columns_mut() {
        let peak = c.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        if peak > 0.0 {
            c.mapv_inplace(|v| v / peak);
        }
    }
    out
}

/// Matches estimated factors to true ones. `perm[k]` is the column of
/// `m_hat` paired with column `k` of `m_star`; the pairing minimizes the
/// total squared distance between peak-normalized columns. With
/// `pin_first`, factor 1 is kept in place.
pub fn align_factors(m_hat: ArrayView2<'_, f64>, m_star: ArrayView2<'_, f64>, pin_first: bool) -> Result<Vec<usize>> {
    if m_hat.dim() != m_star.dim() {
        return Err(Error::shape("factor alignment", m_star.dim(), m_hat.dim()));
    }
    let k = m_star.ncols();
    let start = usize::from(pin_first && k > 0);
    let hat = peak_normalized(m_hat);
    let star = peak_normalized(m_star);
    let free = k - start;
    let cost = Array2::from_shape_fn((free, free), |(i, j)| {
        let a = star.column(start + i);
        let b = hat.column(start + j);
        a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
    });
    let mut perm: Vec<usize> = (0..start).collect();
    if free > 0 {
        perm.extend(min_cost_assignment(&cost).into_iter().map(|j| j + start));
    }
    Ok(perm)
}

/// Reorders factor columns and proportion rows so that factor `k` of the
/// result is factor `perm[k]` of `theta`.
pub fn permute_factors(theta: &Theta, perm: &[usize]) -> Theta {
    let mut out = theta.clone();
    for (k, &src) in perm.iter().enumerate() {
        out.factors.m.column_mut(k).assign(&theta.factors.m.column(src));
        out.proportions.a.row_mut(k).assign(&theta.proportions.a.row(src));
    }
    out
}

/// Metrics of one fit against the phantom that generated its data.
/// Entries that do not apply (for instance `A₂..K` with a single factor)
/// are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub psnr: f64,
    pub nmse_a1: f64,
    pub nmse_a_rest: Option<f64>,
    /// NMSE of the nominal SBF column `m₁`.
    pub nmse_m1: f64,
    /// NMSE of the per-voxel SBF TACs `m₁1ᵀ + VB` (variability phantoms).
    pub nmse_sbf_tacs: Option<f64>,
    pub nmse_m_rest: Option<f64>,
    /// NMSE of `a₁ₙ·bₙ`; a fit without `B` scores 1.
    pub nmse_a1b: Option<f64>,
}

impl MetricRecord {
    pub const HEADER: [&'static str; 7] =
        ["psnr", "nmse_a1", "nmse_a_rest", "nmse_m1", "nmse_sbf_tacs", "nmse_m_rest", "nmse_a1b"];

    pub fn values(&self) -> [Option<f64>; 7] {
        [
            Some(self.psnr),
            Some(self.nmse_a1),
            self.nmse_a_rest,
            Some(self.nmse_m1),
            self.nmse_sbf_tacs,
            self.nmse_m_rest,
            self.nmse_a1b,
        ]
    }
}

fn a1_times_b(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut out = b.clone();
    for (mut c, &a1) in out.columns_mut().into_iter().zip(a.row(0).iter()) {
        c.mapv_inplace(|v| v * a1);
    }
    out
}

fn sbf_tacs(m: &Array2<f64>, vb: Option<Array2<f64>>, n: usize) -> Array2<f64> {
    let mut out = Array2::zeros((m.nrows(), n));
    for mut c in out.columns_mut() {
        c.assign(&m.column(0));
    }
    if let Some(vb) = vb {
        out += &vb;
    }
    out
}

/// Aligns `theta` to the ground truth and evaluates every metric.
pub fn report(theta: &Theta, truth: &GroundTruth) -> Result<MetricRecord> {
    if theta.m().dim() != truth.m.dim() || theta.a().dim() != truth.a.dim() {
        return Err(Error::shape("fit vs ground truth", truth.a.dim(), theta.a().dim()));
    }
    let pin = truth.kind == ModelKind::Slmm || theta.factors.sbf_pinned;
    let perm = align_factors(theta.m().view(), truth.m.view(), pin)?;
    let theta = permute_factors(theta, &perm);
    let x_hat = evaluate_model(&theta)?;
    let k = truth.m.ncols();
    let n = truth.a.ncols();

    let psnr = psnr(x_hat.view(), truth.x.view())?;
    let nmse_a1 = nmse(theta.a().slice(s![0..1, ..]), truth.a.slice(s![0..1, ..]))?;
    let nmse_m1 = nmse(theta.m().slice(s![.., 0..1]), truth.m.slice(s![.., 0..1]))?;
    let (nmse_a_rest, nmse_m_rest) = if k > 1 {
        (
            Some(nmse(theta.a().slice(s![1.., ..]), truth.a.slice(s![1.., ..]))?),
            Some(nmse(theta.m().slice(s![.., 1..]), truth.m.slice(s![.., 1..]))?),
        )
    } else {
        (None, None)
    };

    let (nmse_sbf_tacs, nmse_a1b) = match (&truth.v, &truth.b) {
        (Some(v_star), Some(b_star)) => {
            let star_ab = a1_times_b(&truth.a, b_star);
            let hat_ab = match theta.b() {
                Some(b) if b.dim() == b_star.dim() => a1_times_b(theta.a(), b),
                Some(b) => return Err(Error::shape("internal proportions", b_star.dim(), b.dim())),
                None => Array2::zeros(b_star.raw_dim()),
            };
            let a1b = if star_ab.iter().any(|&v| v != 0.0) { Some(nmse(hat_ab.view(), star_ab.view())?) } else { None };
            let star_tacs = sbf_tacs(&truth.m, Some(v_star.dot(b_star)), n);
            let hat_tacs = sbf_tacs(theta.m(), theta.variability.as_ref().map(|vs| vs.v.dot(&vs.b)), n);
            (Some(nmse(hat_tacs.view(), star_tacs.view())?), a1b)
        }
        _ => (None, None),
    };

    Ok(MetricRecord { psnr, nmse_a1, nmse_a_rest, nmse_m1, nmse_sbf_tacs, nmse_m_rest, nmse_a1b })
}

/// Mean and sample standard deviation of the finite entries of `values`.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return None;
    }
    let n = finite.len() as f64;
    let mean = finite.iter().sum::<f64>() / n;
    let var =
        if finite.len() > 1 { finite.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Some((mean, var.sqrt()))
}
