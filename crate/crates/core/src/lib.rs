//! Construction of resonant (two-plane-wave) stationary solutions of the
//! periodic nonlinear polyharmonic Schrodinger equation
//!
//!   (-Delta)^l u + V u + sigma |u|^2 u = lambda u  on R^n, n in {2, 3},
//!
//! with quasi-periodic boundary conditions indexed by a quasimomentum
//! t in [0,1)^n, for 2l > n or (l = 1, n = 2) (Gross-Pitaevskii).
//!
//! Pipeline: quasimomentum geometry selects resonant points near a von
//! Laue plane, a 2x2 model block gives the leading eigenpair, contour
//! perturbation series refine it, and a fixed-point iteration on the
//! effective potential W = V + sigma |u_W|^2 turns the linear eigenpair
//! into a solution of the nonlinear problem. Sweep drivers check the
//! asymptotic claims (contraction, gradient, two-wave deficit,
//! isoenergetic deviation, resonant-set measure) as desk-scale trends.

pub mod error;
pub mod experiments;
pub mod fourier;
pub mod geometry;
pub mod nonlinear;
pub mod operators;
pub mod perturbation;

pub use error::{RbError, Result};
pub use fourier::{Amplitude, FourierSeries, LatticeVector};
pub use geometry::{Quasimomentum, ResonanceMode, SetParams};
pub use nonlinear::{ProblemContext, Solution, SolveMode};
pub use operators::{LatticeWindow, ModelBlock, TruncatedOperator};
