//! Element-wise β-divergence, its matrix aggregate, and the split gradient
//! used by every multiplicative update.
//!
//! `d_β(y|x)` interpolates the squared Euclidean distance (β = 2), the
//! generalized Kullback-Leibler divergence (β = 1) and the Itakura-Saito
//! divergence (β = 0). The three closed forms are dispatched exactly; every
//! other β goes through a generic branch rewritten with `expm1` so that it
//! stays accurate as β approaches 0 or 1.
//!
//! Matrix sums run voxel-major (column by column, frames inside a column), so
//! a given shape always reduces in the same order.

use std::fmt;

use ndarray::{ArrayView2, Zip};

use crate::error::{Error, Result};

/// Lower bound applied to model entries before any divergence or update.
pub const MODEL_FLOOR: f64 = 1e-12;

/// The β parameter of the divergence family.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Beta(f64);

/// Named members of the β family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BetaKind {
    ItakuraSaito,
    KullbackLeibler,
    Euclidean,
    Generic,
}

impl Beta {
    pub const IS: Beta = Beta(0.0);
    pub const KL: Beta = Beta(1.0);
    pub const EUCLIDEAN: Beta = Beta(2.0);

    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() {
            Ok(Beta(value))
        } else {
            Err(Error::InvalidArgument(format!("beta must be finite, got {value}")))
        }
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }

    pub fn kind(self) -> BetaKind {
        if self.0 == 0.0 {
            BetaKind::ItakuraSaito
        } else if self.0 == 1.0 {
            BetaKind::KullbackLeibler
        } else if self.0 == 2.0 {
            BetaKind::Euclidean
        } else {
            BetaKind::Generic
        }
    }

    /// True when β lies in [1, 2], where the divergence is convex in x and
    /// the majorization-minimization derivations hold as stated.
    pub fn in_convex_range(self) -> bool {
        (1.0..=2.0).contains(&self.0)
    }

    /// Exponent of the MM updates for the factor and NMF-proportion blocks.
    pub fn gamma(self) -> f64 {
        let b = self.0;
        if b < 1.0 {
            1.0 / (2.0 - b)
        } else if b > 2.0 {
            1.0 / (b - 1.0)
        } else {
            1.0
        }
    }

    /// Exponent of the strict-MM update of the internal variability block,
    /// `1 / (3 - β)` on [1, 2]. Outside that range no exponent is derived and
    /// 1 is returned.
    pub fn xi(self) -> f64 {
        if self.in_convex_range() {
            1.0 / (3.0 - self.0)
        } else {
            1.0
        }
    }
}

impl fmt::Display for Beta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl TryFrom<f64> for Beta {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        Beta::new(value)
    }
}

#[inline]
fn check_domain(y: f64, x: f64, beta: Beta) -> Result<()> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::Domain(format!("model value must be positive and finite, got {x}")));
    }
    if !(y >= 0.0) || !y.is_finite() {
        return Err(Error::Domain(format!("data value must be nonnegative and finite, got {y}")));
    }
    if beta.0 <= 0.0 && y == 0.0 {
        return Err(Error::Domain(format!("beta = {} is undefined at y = 0 (enable a data floor)", beta.0)));
    }
    Ok(())
}

/// `expm1(t·r) / t`, continuous at t = 0.
#[inline]
fn expm1_ratio(t: f64, r: f64) -> f64 {
    if t == 0.0 {
        r
    } else {
        (t * r).exp_m1() / t
    }
}

/// Generic branch `(y^β + (β-1)x^β - β y x^(β-1)) / (β(β-1))` for y > 0.
fn generic_branch(y: f64, x: f64, b: f64) -> f64 {
    let r = (y / x).ln();
    if b >= 0.5 {
        // x^(β-1)/β · [ y·expm1((β-1) r)/(β-1) + x - y ]; regular at β = 1
        let t = b - 1.0;
        x.powf(t) / b * (y * expm1_ratio(t, r) + x - y)
    } else {
        // x^β · [ expm1(β r)/β - (q - 1) ] / (β - 1) with q = y/x; regular at β = 0
        let q = y / x;
        x.powf(b) * (expm1_ratio(b, r) - (q - 1.0)) / (b - 1.0)
    }
}

/// Scalar β-divergence `d_β(y | x)`.
pub fn d_beta(y: f64, x: f64, beta: Beta) -> Result<f64> {
    check_domain(y, x, beta)?;
    Ok(d_beta_unchecked(y, x, beta))
}

/// `d_beta` without domain checks. Callers guarantee `x > 0`, `y >= 0`, and
/// `y > 0` whenever β ≤ 0.
#[inline]
pub(crate) fn d_beta_unchecked(y: f64, x: f64, beta: Beta) -> f64 {
    let d = match beta.kind() {
        BetaKind::Euclidean => 0.5 * (y - x) * (y - x),
        BetaKind::KullbackLeibler => {
            if y == 0.0 {
                x
            } else {
                y * (y / x).ln() - y + x
            }
        }
        BetaKind::ItakuraSaito => {
            let q = y / x;
            q - q.ln() - 1.0
        }
        BetaKind::Generic => {
            if y == 0.0 {
                x.powf(beta.0) / beta.0
            } else {
                generic_branch(y, x, beta.0)
            }
        }
    };
    // rounding can leave a tiny negative residue near y = x
    d.max(0.0)
}

/// Positive and negative parts of `∂d_β(y|x)/∂x = x^(β-1) - y·x^(β-2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradSplit {
    pub plus: f64,
    pub minus: f64,
}

impl GradSplit {
    pub fn net(self) -> f64 {
        self.plus - self.minus
    }
}

pub fn grad_x_d_beta(y: f64, x: f64, beta: Beta) -> Result<GradSplit> {
    check_domain(y, x, beta)?;
    let xb2 = x.powf(beta.0 - 2.0);
    Ok(GradSplit { plus: xb2 * x, minus: y * xb2 })
}

/// Validates a data matrix for use with `beta`.
pub fn check_data(y: ArrayView2<'_, f64>, beta: Beta) -> Result<()> {
    for ((l, n), &v) in y.indexed_iter() {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::Domain(format!("data entry ({l}, {n}) must be nonnegative and finite, got {v}")));
        }
        if beta.0 <= 0.0 && v == 0.0 {
            return Err(Error::Domain(format!(
                "data entry ({l}, {n}) is zero, undefined for beta = {} (enable a data floor)",
                beta.0
            )));
        }
    }
    Ok(())
}

/// Matrix divergence `D_β(Y | X) = Σ d_β(y_ln | x_ln)`.
///
/// Model entries are floored at [`MODEL_FLOOR`]; data entries are checked.
pub fn divergence(y: ArrayView2<'_, f64>, x: ArrayView2<'_, f64>, beta: Beta) -> Result<f64> {
    if y.dim() != x.dim() {
        return Err(Error::shape("model vs data", y.dim(), x.dim()));
    }
    check_data(y, beta)?;
    let mut total = 0.0;
    for (yc, xc) in y.columns().into_iter().zip(x.columns()) {
        let mut col = 0.0;
        for (&yv, &xv) in yc.iter().zip(xc.iter()) {
            if xv.is_nan() {
                return Err(Error::Domain("model value is NaN".into()));
            }
            col += d_beta_unchecked(yv, xv.max(MODEL_FLOOR), beta);
        }
        total += col;
    }
    Ok(total)
}

/// Clamps every data entry to at least `eps`.
pub fn floor_data(y: &mut ndarray::Array2<f64>, eps: f64) -> Result<()> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!("data floor must be positive, got {eps}")));
    }
    Zip::from(y).for_each(|v| *v = v.max(eps));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn b(v: f64) -> Beta {
        Beta::new(v).unwrap()
    }

    #[test]
    fn identity_is_zero() {
        for beta in [0.0, 0.5, 1.0, 1.5, 2.0] {
            assert_eq!(d_beta(1.0, 1.0, b(beta)).unwrap(), 0.0, "beta {beta}");
        }
    }

    #[test]
    fn closed_forms_by_hand() {
        assert_eq!(d_beta(3.0, 1.0, Beta::EUCLIDEAN).unwrap(), 2.0);
        let kl = d_beta(2.0, 1.0, Beta::KL).unwrap();
        assert!((kl - (2.0 * 2f64.ln() - 1.0)).abs() < 1e-15);
        assert!((kl - 0.386294).abs() < 1e-6);
        let is = d_beta(2.0, 1.0, Beta::IS).unwrap();
        assert!((is - (1.0 - 2f64.ln())).abs() < 1e-15);
        assert!((is - 0.306853).abs() < 1e-6);
    }

    #[test]
    fn generic_matches_textbook_formula_away_from_singularities() {
        for &beta in &[-0.5, 0.3, 0.7, 1.5, 2.4, 3.0] {
            for &(y, x) in &[(0.2, 3.0), (5.0, 0.5), (1.3, 1.1)] {
                let naive = (f64::powf(y, beta) + (beta - 1.0) * f64::powf(x, beta)
                    - beta * y * f64::powf(x, beta - 1.0))
                    / (beta * (beta - 1.0));
                let got = d_beta(y, x, b(beta)).unwrap();
                assert!((got - naive).abs() <= 1e-12 * naive.abs().max(1.0), "{beta} {y} {x}");
            }
        }
    }

    #[test]
    fn zero_data_for_positive_beta() {
        // generic branch at y = 0 reduces to x^β/β
        assert!((d_beta(0.0, 2.0, b(0.5)).unwrap() - 2f64.sqrt() / 0.5).abs() < 1e-14);
        assert_eq!(d_beta(0.0, 2.0, Beta::KL).unwrap(), 2.0);
        assert_eq!(d_beta(0.0, 2.0, Beta::EUCLIDEAN).unwrap(), 2.0);
    }

    #[test]
    fn domain_errors() {
        assert!(matches!(d_beta(1.0, 0.0, Beta::KL), Err(Error::Domain(_))));
        assert!(matches!(d_beta(-1.0, 1.0, Beta::KL), Err(Error::Domain(_))));
        assert!(matches!(d_beta(0.0, 1.0, Beta::IS), Err(Error::Domain(_))));
        assert!(matches!(d_beta(0.0, 1.0, b(-0.5)), Err(Error::Domain(_))));
        assert!(Beta::new(f64::NAN).is_err());
    }

    #[test]
    fn gradient_parts() {
        let g = grad_x_d_beta(1.0, 1.0, Beta::EUCLIDEAN).unwrap();
        assert_eq!((g.plus, g.minus), (1.0, 1.0));
        assert_eq!(g.net(), 0.0);
        let g = grad_x_d_beta(2.0, 1.0, Beta::KL).unwrap();
        assert_eq!((g.plus, g.minus), (1.0, 2.0));
    }

    #[test]
    fn matrix_divergence() {
        let y = array![[3.0]];
        let x = array![[1.0]];
        assert_eq!(divergence(y.view(), x.view(), Beta::EUCLIDEAN).unwrap(), 2.0);
        let y = array![[1.0, 2.0], [0.5, 4.0]];
        assert_eq!(divergence(y.view(), y.view(), b(0.3)).unwrap(), 0.0);
        let x = array![[1.0, 2.0, 3.0]];
        assert!(matches!(divergence(y.view(), x.view(), Beta::KL), Err(Error::Shape { .. })));
    }

    #[test]
    fn exponents() {
        assert_eq!(b(1.5).gamma(), 1.0);
        assert_eq!(b(0.0).gamma(), 0.5);
        assert_eq!(b(3.0).gamma(), 0.5);
        assert_eq!(b(2.0).xi(), 1.0);
        assert_eq!(b(1.0).xi(), 0.5);
        assert_eq!(b(0.0).xi(), 1.0);
    }

    #[test]
    fn floor_data_clamps() {
        let mut y = array![[0.0, 2.0]];
        floor_data(&mut y, 1e-3).unwrap();
        assert_eq!(y, array![[1e-3, 2.0]]);
        assert!(floor_data(&mut y, 0.0).is_err());
    }
}
