//! β-divergence factor analysis of dynamic voxel-time data.
//!
//! The crate fits three nested factor models to an `L × N` matrix `Y`
//! (frames × voxels) under any member of the β-divergence family:
//!
//! * β-NMF: `Y ≈ MA` with `M, A ≥ 0`;
//! * β-LMM: additionally, every column of `A` sums to one;
//! * β-SLMM: `Y ≈ MA + [E₁A · VB]`, where a fixed basis `V` and nonnegative
//!   internal proportions `B` let the first factor vary from voxel to voxel,
//!   with an ℓ2,1 penalty `λ‖B‖₂,₁` favouring voxel-wise sparsity of `B`.
//!
//! Fits run block-coordinate descent with multiplicative updates
//! ([`solvers::fit`]). [`phantom`] builds synthetic data with known truth and
//! [`metrics`] scores a fit against it.
//!
//! ```
//! use betafact::{divergence::Beta, models::*, solvers::*};
//! use ndarray::array;
//!
//! let y = DataMatrix::new(array![[2.0, 4.0]]).unwrap();
//! let theta = Theta::new(array![[1.0]], array![[1.0, 1.0]]);
//! let spec = ModelSpec::new(ModelKind::Nmf, Beta::EUCLIDEAN, 0.0).unwrap();
//! let fit = fit(&y, &spec, &theta, &SolverConfig::default()).unwrap();
//! assert!(fit.objective_trace.last().unwrap() < &fit.objective_trace[0]);
//! ```

// NaN must fail the domain checks, so `!(v >= 0.0)` is intended.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod divergence;
pub mod error;
pub mod init;
pub mod io;
pub mod metrics;
pub mod models;
pub mod phantom;
pub mod solvers;

pub use divergence::Beta;
pub use error::{Error, Result};
pub use models::{DataMatrix, ModelKind, ModelSpec, Theta};
pub use solvers::{fit, FitResult, SolverConfig, Termination};
