//! Block-coordinate descent with multiplicative updates for β-NMF, β-LMM
//! and β-SLMM.
//!
//! One iteration visits the blocks in a fixed order: internal variability
//! `B`, factors `M` (columns 2..K when the first one is pinned), the first
//! proportion row `A₁`, then the remaining rows `A₂..K`. The model `X̃` is
//! recomputed after every block. NMF skips `B` and updates `A` in a single
//! step; LMM skips `B`.
//!
//! The factor update and the NMF proportion update are MM steps and use the
//! exponent `γ(β)`. The mixing-proportion update is the gradient-split
//! heuristic on the change of variable `a = u / Σu` (exponent 1, no descent
//! guarantee). The `B` update majorizes the ℓ2,1 penalty by its tangent; its
//! exponent `ξ(β)` is optional.

use std::fmt;
use std::ops::Range;

use log::{debug, warn};
use ndarray::{Array2, ArrayView1, ArrayView2, Axis, Zip};

use crate::divergence::{divergence, Beta, MODEL_FLOOR};
use crate::error::{Error, Result};
use crate::models::{
    add_sbf_variability, check_constraints, evaluate_model, penalty, variability_term, DataMatrix, ModelKind,
    ModelSpec, Theta,
};

/// Floor for `‖b̃_n‖₂` in the penalty gradient.
pub const NORM_FLOOR: f64 = 1e-12;

/// Relative slack tolerated before an objective increase is counted.
pub const MONOTONICITY_TOL: f64 = 1e-9;

/// Increases smaller than `f64::EPSILON` times the initial objective are
/// rounding noise and never counted.
fn rise_slack(prev: f64, initial: f64) -> f64 {
    MONOTONICITY_TOL * prev + f64::EPSILON * initial
}

/// Relative-decrease threshold with the factors held fixed.
pub const EPSILON_FIXED_FACTORS: f64 = 1e-5;
/// Relative-decrease threshold when the factors are estimated.
pub const EPSILON_ESTIMATED_FACTORS: f64 = 1e-4;
pub const DEFAULT_MAX_ITER: usize = 10_000;

/// Which blocks `fit` is allowed to update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockMask {
    pub variability: bool,
    pub factors: bool,
    pub proportions: bool,
}

impl Default for BlockMask {
    fn default() -> Self {
        BlockMask { variability: true, factors: true, proportions: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    /// Stop once `(J_prev - J) / J_prev < epsilon`.
    pub epsilon: f64,
    pub max_iter: usize,
    /// Apply `ξ(β)` to the `B` update (strict MM). Off by default, which
    /// converges faster.
    pub use_xi_exponent: bool,
    /// Recorded for reproducibility; the iteration itself draws no randomness.
    pub rng_seed: u64,
    pub blocks: BlockMask,
}

impl SolverConfig {
    /// Defaults for estimated or fixed factors.
    pub fn with_factors_fixed(fixed: bool) -> Self {
        SolverConfig {
            epsilon: if fixed { EPSILON_FIXED_FACTORS } else { EPSILON_ESTIMATED_FACTORS },
            max_iter: DEFAULT_MAX_ITER,
            use_xi_exponent: false,
            rng_seed: 0,
            blocks: BlockMask { factors: !fixed, ..BlockMask::default() },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidArgument(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidArgument("max_iter must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig::with_factors_fixed(false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxIter,
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Termination::Converged => "converged",
            Termination::MaxIter => "max_iter",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Variability,
    Factors,
    /// NMF: all proportion rows at once.
    Proportions,
    SbfProportions,
    OtherProportions,
}

impl Block {
    pub fn name(self) -> &'static str {
        match self {
            Block::Variability => "B",
            Block::Factors => "M",
            Block::Proportions => "A",
            Block::SbfProportions => "A1",
            Block::OtherProportions => "A2:K",
        }
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub theta: Theta,
    /// `J(θ⁰), J(θ¹), …`; one entry longer than `iterations`.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub termination: Termination,
    /// Iterations whose objective rose by more than [`MONOTONICITY_TOL`]
    /// (relative) plus rounding noise.
    pub monotonicity_violations: usize,
}

/// Hooks called while `fit` runs. Both default to no-ops.
pub trait FitObserver {
    fn after_block(&mut self, _iteration: usize, _block: Block, _theta: &Theta) {}
    fn after_iteration(&mut self, _iteration: usize, _theta: &Theta, _objective: f64) {}
}

impl FitObserver for () {}

/// Which rows of `A` a mixing update touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowSelect {
    All,
    First,
    Rest,
}

impl RowSelect {
    fn range(self, k: usize) -> Range<usize> {
        match self {
            RowSelect::All => 0..k,
            RowSelect::First => 0..k.min(1),
            RowSelect::Rest => k.min(1)..k,
        }
    }
}

/// `(X^(β-1), Y·X^(β-2))` with `X` floored: the positive and negative
/// gradient parts of `D_β` with respect to the model.
fn gradient_parts(y: ArrayView2<'_, f64>, x: ArrayView2<'_, f64>, beta: Beta) -> (Array2<f64>, Array2<f64>) {
    let e = beta.value() - 2.0;
    let mut plus = Array2::zeros(x.raw_dim());
    let mut minus = Array2::zeros(x.raw_dim());
    Zip::from(&mut plus).and(&mut minus).and(y).and(x).for_each(|p, q, &yv, &xv| {
        let xv = xv.max(MODEL_FLOOR);
        let xb2 = xv.powf(e);
        *p = xb2 * xv;
        *q = yv * xb2;
    });
    (plus, minus)
}

#[inline]
fn ratio(num: f64, den: f64) -> f64 {
    num.max(0.0) / den.max(MODEL_FLOOR)
}

#[inline]
fn scale(value: f64, r: f64, exponent: f64) -> f64 {
    if exponent == 1.0 {
        value * r
    } else {
        value * r.powf(exponent)
    }
}

/// Multiplicative MM update of the factor columns `first_col..K`:
/// `m_lk ← m_lk [Σ_n a_kn y_ln x_ln^(β-2) / Σ_n a_kn x_ln^(β-1)]^γ(β)`.
///
/// `x` is the current model including any variability term.
pub fn update_factors(
    y: ArrayView2<'_, f64>,
    x: ArrayView2<'_, f64>,
    m: ArrayView2<'_, f64>,
    a: ArrayView2<'_, f64>,
    beta: Beta,
    first_col: usize,
) -> Array2<f64> {
    let (plus, minus) = gradient_parts(y, x, beta);
    let num = minus.dot(&a.t());
    let den = plus.dot(&a.t());
    let gamma = beta.gamma();
    let mut out = m.to_owned();
    for k in first_col..m.ncols() {
        for l in 0..m.nrows() {
            out[[l, k]] = scale(m[[l, k]], ratio(num[[l, k]], den[[l, k]]), gamma);
        }
    }
    out
}

/// Multiplicative MM update of unconstrained proportions (β-NMF):
/// `a_kn ← a_kn [(Mᵀ(Y·X^(β-2)))_kn / (MᵀX^(β-1))_kn]^γ(β)`.
pub fn update_proportions_nmf(
    y: ArrayView2<'_, f64>,
    x: ArrayView2<'_, f64>,
    m: ArrayView2<'_, f64>,
    a: ArrayView2<'_, f64>,
    beta: Beta,
) -> Array2<f64> {
    let (plus, minus) = gradient_parts(y, x, beta);
    let num = m.t().dot(&minus);
    let den = m.t().dot(&plus);
    let gamma = beta.gamma();
    let mut out = a.to_owned();
    Zip::from(&mut out).and(&num).and(&den).for_each(|o, &nv, &dv| *o = scale(*o, ratio(nv, dv), gamma));
    out
}

/// Heuristic update of column-stochastic proportions through `a = u / Σu`.
///
/// For the selected rows `u_kn = a_kn r_kn` with
/// `r_kn = Σ_l (x^β + g_lk y x^(β-2)) / Σ_l (g_lk x^(β-1) + y x^(β-1))`,
/// where `g_l1 = m_l1 + w_ln` and `g_lk = m_lk` otherwise; the other rows keep
/// `u_kn = a_kn`. Each column is then renormalized to sum to one.
/// `w` is `VB` (absent for LMM).
pub fn update_proportions_mixing(
    y: ArrayView2<'_, f64>,
    x: ArrayView2<'_, f64>,
    m: ArrayView2<'_, f64>,
    a: ArrayView2<'_, f64>,
    w: Option<ArrayView2<'_, f64>>,
    beta: Beta,
    rows: RowSelect,
) -> Result<Array2<f64>> {
    let (frames, k) = m.dim();
    let rows = rows.range(k);
    let e = beta.value() - 2.0;
    let mut out = a.to_owned();
    let mut xb = vec![0.0; frames];
    let mut xb1 = vec![0.0; frames];
    let mut q = vec![0.0; frames];
    for (n, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
        let mut sum_xb = 0.0;
        let mut sum_yxb1 = 0.0;
        for l in 0..frames {
            let xv = x[[l, n]].max(MODEL_FLOOR);
            let yv = y[[l, n]];
            let xb2 = xv.powf(e);
            xb1[l] = xb2 * xv;
            xb[l] = xb1[l] * xv;
            q[l] = yv * xb2;
            sum_xb += xb[l];
            sum_yxb1 += yv * xb1[l];
        }
        for kk in rows.clone() {
            let mut num = sum_xb;
            let mut den = sum_yxb1;
            for l in 0..frames {
                let mut g = m[[l, kk]];
                if kk == 0 {
                    if let Some(w) = &w {
                        g += w[[l, n]];
                    }
                }
                num += g * q[l];
                den += g * xb1[l];
            }
            col[kk] *= ratio(num, den);
        }
        let total: f64 = col.sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::CollapsedColumn { voxel: n });
        }
        col.mapv_inplace(|v| v / total);
    }
    Ok(out)
}

/// Update of the internal proportions:
/// `b_in ← b_in (a_1n Σ_l v_li y x^(β-2) / (a_1n Σ_l v_li x^(β-1) + λ b_in/‖b_n‖₂))^exponent`.
///
/// Both data sums are clamped at zero before the ratio since `V` may hold
/// negative entries.
#[allow(clippy::too_many_arguments)]
pub fn update_variability(
    y: ArrayView2<'_, f64>,
    x: ArrayView2<'_, f64>,
    a1: ArrayView1<'_, f64>,
    v: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    beta: Beta,
    lambda: f64,
    exponent: f64,
) -> Array2<f64> {
    let (plus, minus) = gradient_parts(y, x, beta);
    let num = v.t().dot(&minus);
    let den = v.t().dot(&plus);
    let mut out = b.to_owned();
    for (n, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
        let a = a1[n];
        let norm = b.column(n).dot(&b.column(n)).sqrt().max(NORM_FLOOR);
        for i in 0..col.len() {
            let nv = (a * num[[i, n]]).max(0.0);
            let mut dv = (a * den[[i, n]]).max(0.0);
            if lambda > 0.0 {
                dv += lambda * b[[i, n]] / norm;
            }
            col[i] = scale(col[i], ratio(nv, dv), exponent);
        }
    }
    out
}

fn check_finite(block: Block, iteration: usize, values: &Array2<f64>) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { iteration, block: block.name() })
    }
}

/// Objective from an already evaluated model.
fn objective_from_model(y: &DataMatrix, x: &Array2<f64>, spec: &ModelSpec, theta: &Theta) -> Result<f64> {
    Ok(divergence(y.view(), x.view(), spec.beta)? + penalty(spec, theta))
}

fn model_of(theta: &Theta) -> Array2<f64> {
    // shapes were validated on entry and never change
    let mut x = theta.factors.m.dot(&theta.proportions.a);
    if let Some(vs) = &theta.variability {
        add_sbf_variability(&mut x, theta.proportions.a.row(0), &variability_term(vs));
    }
    x
}

/// Runs the block-coordinate descent from `theta0`.
pub fn fit(y: &DataMatrix, spec: &ModelSpec, theta0: &Theta, cfg: &SolverConfig) -> Result<FitResult> {
    fit_observed(y, spec, theta0, cfg, &mut ())
}

/// [`fit`] with an observer notified after every block and iteration.
pub fn fit_observed(
    y: &DataMatrix,
    spec: &ModelSpec,
    theta0: &Theta,
    cfg: &SolverConfig,
    observer: &mut dyn FitObserver,
) -> Result<FitResult> {
    cfg.validate()?;
    theta0.check_against(spec.kind, y.frames(), y.voxels())?;
    let violations = check_constraints(spec.kind, theta0);
    if let Some(first) = violations.first() {
        return Err(Error::InvalidArgument(format!(
            "initial point violates {} constraint(s), first: {first}",
            violations.len()
        )));
    }
    if spec.kind.is_mixing() && !spec.beta.in_convex_range() {
        warn!(
            "beta = {} is outside [1, 2]: the mixing-proportion and variability updates use exponent 1 without a descent guarantee",
            spec.beta
        );
    }

    let mut theta = theta0.clone();
    let mut x = evaluate_model(&theta)?;
    let mut prev = objective_from_model(y, &x, spec, &theta)?;
    if !prev.is_finite() {
        return Err(Error::NonFinite { iteration: 0, block: "init" });
    }
    let mut trace = vec![prev];
    let mut termination = Termination::MaxIter;
    let mut monotonicity_violations = 0;
    let k = theta.rank();
    let first_factor = usize::from(theta.factors.sbf_pinned);
    let b_exponent = if cfg.use_xi_exponent { spec.beta.xi() } else { 1.0 };

    let mut iterations = 0;
    while iterations < cfg.max_iter {
        let it = iterations + 1;

        if spec.kind == ModelKind::Slmm && cfg.blocks.variability {
            let vs = theta.variability.as_ref().expect("slmm carries a variability set");
            let b = update_variability(
                y.view(),
                x.view(),
                theta.proportions.a.row(0),
                vs.v.view(),
                vs.b.view(),
                spec.beta,
                spec.lambda,
                b_exponent,
            );
            check_finite(Block::Variability, it, &b)?;
            theta.variability.as_mut().unwrap().b = b;
            x = model_of(&theta);
            observer.after_block(it, Block::Variability, &theta);
        }

        if cfg.blocks.factors && first_factor < k {
            let m = update_factors(
                y.view(),
                x.view(),
                theta.factors.m.view(),
                theta.proportions.a.view(),
                spec.beta,
                first_factor,
            );
            check_finite(Block::Factors, it, &m)?;
            theta.factors.m = m;
            x = model_of(&theta);
            observer.after_block(it, Block::Factors, &theta);
        }

        if cfg.blocks.proportions {
            if spec.kind.is_mixing() {
                let steps: &[(Block, RowSelect)] = if k > 1 {
                    &[(Block::SbfProportions, RowSelect::First), (Block::OtherProportions, RowSelect::Rest)]
                } else {
                    &[(Block::SbfProportions, RowSelect::First)]
                };
                for &(block, rows) in steps {
                    let w = theta.variability.as_ref().map(variability_term);
                    let a = update_proportions_mixing(
                        y.view(),
                        x.view(),
                        theta.factors.m.view(),
                        theta.proportions.a.view(),
                        w.as_ref().map(|w| w.view()),
                        spec.beta,
                        rows,
                    )?;
                    check_finite(block, it, &a)?;
                    theta.proportions.a = a;
                    x = model_of(&theta);
                    observer.after_block(it, block, &theta);
                }
            } else {
                let a = update_proportions_nmf(
                    y.view(),
                    x.view(),
                    theta.factors.m.view(),
                    theta.proportions.a.view(),
                    spec.beta,
                );
                check_finite(Block::Proportions, it, &a)?;
                theta.proportions.a = a;
                x = model_of(&theta);
                observer.after_block(it, Block::Proportions, &theta);
            }
        }

        let current = objective_from_model(y, &x, spec, &theta)?;
        if !current.is_finite() {
            return Err(Error::NonFinite { iteration: it, block: "objective" });
        }
        if current > prev + rise_slack(prev, trace[0]) {
            monotonicity_violations += 1;
            debug!("objective increased at iteration {it}: {prev} -> {current}");
        }
        trace.push(current);
        iterations = it;
        observer.after_iteration(it, &theta, current);

        let converged = prev == 0.0 || (prev - current) / prev < cfg.epsilon;
        prev = current;
        if converged {
            termination = Termination::Converged;
            break;
        }
    }

    Ok(FitResult { theta, objective_trace: trace, iterations, termination, monotonicity_violations })
}
