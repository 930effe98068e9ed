//! Factor models, their evaluation `X(θ)`, constraint checks and the
//! penalized objective.
//!
//! All matrices are `frames × voxels` (L × N) or `factors × voxels` (K × N);
//! columns index voxels.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};

use crate::divergence::{divergence, Beta};
use crate::error::{Error, Result};

/// Tolerance used by [`check_constraints`] for the sum-to-one constraint.
pub const SUM_TO_ONE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    /// Plain nonnegative factorization `Y ≈ MA`.
    Nmf,
    /// Linear mixing: NMF plus column-stochastic proportions.
    Lmm,
    /// Linear mixing with a variability term on the first factor.
    Slmm,
}

impl ModelKind {
    pub fn is_mixing(self) -> bool {
        matches!(self, ModelKind::Lmm | ModelKind::Slmm)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Nmf => "nmf",
            ModelKind::Lmm => "lmm",
            ModelKind::Slmm => "slmm",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nmf" => Ok(ModelKind::Nmf),
            "lmm" => Ok(ModelKind::Lmm),
            "slmm" => Ok(ModelKind::Slmm),
            other => Err(Error::InvalidArgument(format!("unknown model kind '{other}'"))),
        }
    }
}

/// Model family, divergence and penalty weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub beta: Beta,
    pub lambda: f64,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, beta: Beta, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
        }
        if lambda != 0.0 && kind != ModelKind::Slmm {
            return Err(Error::InvalidArgument(format!("lambda applies to slmm only, got {lambda} for {kind}")));
        }
        Ok(ModelSpec { kind, beta, lambda })
    }
}

/// Observed frames × voxels matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    values: Array2<f64>,
    /// Frame durations in minutes, carried as metadata only.
    pub frame_durations: Option<Vec<f64>>,
}

impl DataMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (l, n) = values.dim();
        if l == 0 || n == 0 {
            return Err(Error::InvalidArgument("data matrix must be non-empty".into()));
        }
        if let Some(((r, c), v)) = values.indexed_iter().find(|(_, v)| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::Domain(format!("data entry ({r}, {c}) is {v}")));
        }
        Ok(DataMatrix { values, frame_durations: None })
    }

    pub fn with_frame_durations(mut self, durations: Vec<f64>) -> Result<Self> {
        if durations.len() != self.frames() {
            return Err(Error::InvalidArgument(format!(
                "{} frame durations for {} frames",
                durations.len(),
                self.frames()
            )));
        }
        self.frame_durations = Some(durations);
        Ok(self)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn voxels(&self) -> usize {
        self.values.ncols()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.values
    }
}

/// L × K factor TACs. When `sbf_pinned` the first column is held fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorSet {
    pub m: Array2<f64>,
    pub sbf_pinned: bool,
}

/// K × N factor proportions.
#[derive(Debug, Clone, PartialEq)]
pub struct ProportionMatrix {
    pub a: Array2<f64>,
}

/// Variability basis `V` (L × N_v) and internal proportions `B` (N_v × N).
#[derive(Debug, Clone, PartialEq)]
pub struct VariabilitySet {
    pub v: Array2<f64>,
    pub b: Array2<f64>,
}

/// All latent variables of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Theta {
    pub factors: FactorSet,
    pub proportions: ProportionMatrix,
    pub variability: Option<VariabilitySet>,
}

impl Theta {
    pub fn new(m: Array2<f64>, a: Array2<f64>) -> Self {
        Theta { factors: FactorSet { m, sbf_pinned: false }, proportions: ProportionMatrix { a }, variability: None }
    }

    pub fn with_variability(mut self, v: Array2<f64>, b: Array2<f64>) -> Self {
        self.variability = Some(VariabilitySet { v, b });
        self
    }

    pub fn pinned(mut self, sbf_pinned: bool) -> Self {
        self.factors.sbf_pinned = sbf_pinned;
        self
    }

    pub fn m(&self) -> &Array2<f64> {
        &self.factors.m
    }

    pub fn a(&self) -> &Array2<f64> {
        &self.proportions.a
    }

    pub fn b(&self) -> Option<&Array2<f64>> {
        self.variability.as_ref().map(|vs| &vs.b)
    }

    pub fn frames(&self) -> usize {
        self.factors.m.nrows()
    }

    pub fn rank(&self) -> usize {
        self.factors.m.ncols()
    }

    pub fn voxels(&self) -> usize {
        self.proportions.a.ncols()
    }

    /// Checks the shapes of every block against each other.
    pub fn check_shapes(&self) -> Result<()> {
        let (l, k) = self.factors.m.dim();
        let (ka, n) = self.proportions.a.dim();
        if k == 0 || l == 0 || n == 0 {
            return Err(Error::InvalidArgument("empty factor or proportion matrix".into()));
        }
        if ka != k {
            return Err(Error::shape("proportions", (k, n), (ka, n)));
        }
        if let Some(vs) = &self.variability {
            let (lv, nv) = vs.v.dim();
            if lv != l {
                return Err(Error::shape("variability basis", (l, nv), (lv, nv)));
            }
            if vs.b.dim() != (nv, n) {
                return Err(Error::shape("internal proportions", (nv, n), vs.b.dim()));
            }
        }
        Ok(())
    }

    /// Checks that the blocks match `kind` and the data dimensions.
    pub fn check_against(&self, kind: ModelKind, frames: usize, voxels: usize) -> Result<()> {
        self.check_shapes()?;
        if (self.frames(), self.voxels()) != (frames, voxels) {
            return Err(Error::shape("model vs data", (frames, voxels), (self.frames(), self.voxels())));
        }
        match (kind, &self.variability) {
            (ModelKind::Slmm, None) => Err(Error::InvalidArgument("slmm requires a variability basis and B".into())),
            (ModelKind::Nmf | ModelKind::Lmm, Some(_)) => {
                Err(Error::InvalidArgument(format!("{kind} does not take a variability term")))
            }
            _ => Ok(()),
        }
    }
}

/// `VB`, the per-voxel variability of the first factor.
pub fn variability_term(vs: &VariabilitySet) -> Array2<f64> {
    vs.v.dot(&vs.b)
}

/// `X(θ) = MA`, plus `E₁A · VB` when a variability set is present.
pub fn evaluate_model(theta: &Theta) -> Result<Array2<f64>> {
    theta.check_shapes()?;
    let mut x = theta.factors.m.dot(&theta.proportions.a);
    if let Some(vs) = &theta.variability {
        let w = variability_term(vs);
        add_sbf_variability(&mut x, theta.proportions.a.row(0), &w);
    }
    Ok(x)
}

/// `x_ln += a_1n · w_ln`.
pub(crate) fn add_sbf_variability(x: &mut Array2<f64>, a1: ndarray::ArrayView1<'_, f64>, w: &Array2<f64>) {
    for ((mut xc, wc), &a) in x.columns_mut().into_iter().zip(w.columns()).zip(a1.iter()) {
        xc.scaled_add(a, &wc);
    }
}

/// `‖B‖₂,₁ = Σ_n ‖b_n‖₂` over the columns of `b`.
pub fn l21_norm(b: ArrayView2<'_, f64>) -> f64 {
    b.axis_iter(Axis(1)).map(|c| c.dot(&c).sqrt()).sum()
}

/// `D_β(Y | X(θ)) + λ‖B‖₂,₁`; the penalty only exists for SLMM.
pub fn objective(y: &DataMatrix, spec: &ModelSpec, theta: &Theta) -> Result<f64> {
    theta.check_against(spec.kind, y.frames(), y.voxels())?;
    let x = evaluate_model(theta)?;
    let data_term = divergence(y.view(), x.view(), spec.beta)?;
    Ok(data_term + penalty(spec, theta))
}

pub(crate) fn penalty(spec: &ModelSpec, theta: &Theta) -> f64 {
    match (spec.kind, theta.b()) {
        (ModelKind::Slmm, Some(b)) if spec.lambda > 0.0 => spec.lambda * l21_norm(b.view()),
        _ => 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    Negative(&'static str),
    NonFinite(&'static str),
    SumToOne,
}

/// A single constraint violation. `row` is `None` for column-level checks.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub row: Option<usize>,
    pub col: usize,
    pub magnitude: f64,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.kind, self.row) {
            (ViolationKind::SumToOne, _) => {
                write!(f, "column {} of A is off sum-to-one by {:e}", self.col, self.magnitude)
            }
            (ViolationKind::Negative(name), Some(r)) => {
                write!(f, "{name}[{r}, {}] is negative ({:e})", self.col, -self.magnitude)
            }
            (ViolationKind::NonFinite(name), Some(r)) => write!(f, "{name}[{r}, {}] is not finite", self.col),
            (kind, None) => write!(f, "{kind:?} at column {}", self.col),
        }
    }
}

fn sign_violations(name: &'static str, m: ArrayView2<'_, f64>, out: &mut Vec<Violation>) {
    for ((r, c), &v) in m.indexed_iter() {
        if !v.is_finite() {
            out.push(Violation {
                kind: ViolationKind::NonFinite(name),
                row: Some(r),
                col: c,
                magnitude: f64::INFINITY,
            });
        } else if v < 0.0 {
            out.push(Violation { kind: ViolationKind::Negative(name), row: Some(r), col: c, magnitude: -v });
        }
    }
}

/// Lists every violated constraint of `kind` in `theta`; empty when feasible.
pub fn check_constraints(kind: ModelKind, theta: &Theta) -> Vec<Violation> {
    let mut out = Vec::new();
    sign_violations("M", theta.factors.m.view(), &mut out);
    sign_violations("A", theta.proportions.a.view(), &mut out);
    if kind.is_mixing() {
        for (n, col) in theta.proportions.a.columns().into_iter().enumerate() {
            let dev = (col.sum() - 1.0).abs();
            if !(dev <= SUM_TO_ONE_TOL) {
                out.push(Violation { kind: ViolationKind::SumToOne, row: None, col: n, magnitude: dev });
            }
        }
    }
    if kind == ModelKind::Slmm {
        if let Some(b) = theta.b() {
            sign_violations("B", b.view(), &mut out);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn lmm_theta() -> Theta {
        Theta::new(array![[1.0, 0.0], [0.0, 1.0]], array![[0.5, 1.0], [0.5, 0.0]])
    }

    #[test]
    fn slmm_hand_expansion() {
        let theta = lmm_theta().with_variability(array![[1.0], [2.0]], array![[0.1, 0.0]]);
        let x = evaluate_model(&theta).unwrap();
        let expected = array![[0.5 + 0.05, 1.0], [0.5 + 0.1, 0.0]];
        for (a, b) in x.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn slmm_with_zero_b_is_lmm() {
        let lmm = evaluate_model(&lmm_theta()).unwrap();
        let slmm = evaluate_model(&lmm_theta().with_variability(array![[1.0], [2.0]], array![[0.0, 0.0]])).unwrap();
        assert_eq!(lmm, slmm);
    }

    #[test]
    fn rank_one_all_ones() {
        let theta = Theta::new(Array2::ones((3, 1)), Array2::ones((1, 4)));
        assert_eq!(evaluate_model(&theta).unwrap(), Array2::<f64>::ones((3, 4)));
    }

    #[test]
    fn l21_by_hand() {
        let b = array![[3.0, 0.0], [4.0, 0.0]];
        assert_eq!(l21_norm(b.view()), 5.0);
        let theta = Theta::new(array![[1.0], [1.0]], array![[1.0, 1.0]])
            .with_variability(array![[0.0], [0.0]], array![[0.0, 0.0]]);
        let mut t2 = theta.clone();
        t2.variability = Some(VariabilitySet { v: array![[0.0, 0.0], [0.0, 0.0]], b });
        let spec = ModelSpec::new(ModelKind::Slmm, Beta::EUCLIDEAN, 2.0).unwrap();
        let y = DataMatrix::new(array![[1.0, 1.0], [1.0, 1.0]]).unwrap();
        assert_eq!(objective(&y, &spec, &t2).unwrap(), 10.0);
        assert_eq!(objective(&y, &spec, &theta).unwrap(), 0.0);
    }

    #[test]
    fn lambda_only_for_slmm() {
        assert!(ModelSpec::new(ModelKind::Lmm, Beta::KL, 1.0).is_err());
        assert!(ModelSpec::new(ModelKind::Slmm, Beta::KL, -1.0).is_err());
        assert!(ModelSpec::new(ModelKind::Slmm, Beta::KL, 1.0).is_ok());
    }

    #[test]
    fn constraints() {
        assert!(check_constraints(ModelKind::Lmm, &lmm_theta()).is_empty());

        let mut off = lmm_theta();
        off.proportions.a[[1, 0]] = 0.4;
        let v = check_constraints(ModelKind::Lmm, &off);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::SumToOne);
        assert_eq!(v[0].col, 0);
        assert!((v[0].magnitude - 0.1).abs() < 1e-12);
        // NMF has no sum-to-one
        assert!(check_constraints(ModelKind::Nmf, &off).is_empty());

        let neg = lmm_theta().with_variability(array![[1.0], [2.0]], array![[0.1, -0.2]]);
        let v = check_constraints(ModelKind::Slmm, &neg);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::Negative("B"));
        assert_eq!((v[0].row, v[0].col), (Some(0), 1));
        assert!((v[0].magnitude - 0.2).abs() < 1e-15);
    }

    #[test]
    fn shape_checks() {
        let bad = Theta::new(Array2::ones((3, 2)), Array2::ones((3, 4)));
        assert!(matches!(evaluate_model(&bad), Err(Error::Shape { .. })));
        let y = DataMatrix::new(Array2::ones((3, 4))).unwrap();
        let spec = ModelSpec::new(ModelKind::Slmm, Beta::KL, 0.0).unwrap();
        let theta = Theta::new(Array2::ones((3, 1)), Array2::ones((1, 4)));
        assert!(objective(&y, &spec, &theta).is_err());
    }

    #[test]
    fn data_matrix_validation() {
        assert!(DataMatrix::new(array![[1.0, -1.0]]).is_err());
        assert!(DataMatrix::new(Array2::zeros((0, 3))).is_err());
        let d = DataMatrix::new(Array2::ones((2, 3))).unwrap();
        assert!(d.clone().with_frame_durations(vec![1.0]).is_err());
        assert_eq!(d.with_frame_durations(vec![1.0, 2.0]).unwrap().frame_durations, Some(vec![1.0, 2.0]));
    }
}
