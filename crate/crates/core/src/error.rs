//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RbError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),

    #[error("unsupported dimension {0} (need 2 or 3)")]
    UnsupportedDimension(usize),

    #[error("grid too coarse: {points} points per axis, need at least {needed} for alias-free sampling")]
    AliasingViolation { points: usize, needed: usize },

    #[error("harmonic q must be nonzero")]
    ZeroHarmonic,

    #[error("window radius {radius} too small to certify decisions at k = {k}")]
    WindowTooSmall { radius: i64, k: f64 },

    #[error("resonant layer is empty (bound {bound} excludes the whole sphere at k = {k})")]
    EmptyLayer { k: f64, bound: f64 },

    #[error("sample count must be at least 1")]
    EmptySample,

    #[error("model coupling v_q is zero; the 2x2 block is undefined")]
    VqZero,

    #[error("lattice vector {0} lies outside the window (radius {1})")]
    OutsideWindow(String, i64),

    #[error("z = {z} is within {dist:.3e} of the model spectrum; resolvent undefined")]
    PoleOnContour { z: num_complex::Complex64, dist: f64 },

    #[error("contour (center {center}, radius {radius:.3e}) passes within {dist:.3e} of an eigenvalue")]
    ContourIntersectsSpectrum { center: f64, radius: f64, dist: f64 },

    #[error("series terms grew for 3 consecutive orders; term norms: {terms:?}")]
    SeriesDiverged { terms: Vec<f64> },

    #[error("resolvent expansion failed to converge after {iters} iterations (last delta {delta:.3e})")]
    NeumannDiverged { iters: usize, delta: f64 },

    #[error("selector matched {count} eigenvalues in [{lo}, {hi}]: {candidates:?}")]
    SelectorAmbiguous { lo: f64, hi: f64, count: usize, candidates: Vec<f64> },

    #[error("{test} rejected t: {reason}")]
    PointRejected { test: &'static str, reason: String },

    #[error("fixed point aborted at m = {m}: contraction ratios increased 3 times in a row")]
    NonContraction { m: usize },

    #[error("fixed point did not converge within {m_max} iterations (last delta {delta:.3e})")]
    FixedPointExhausted { m_max: usize, delta: f64 },

    #[error("regime validation failed: {0}")]
    RegimeViolation(String),

    #[error("gradient stencil solve failed at offset {axis}/{side}: {source}")]
    StencilFailed { axis: usize, side: i32, source: Box<RbError> },

    #[error("curve corrector failed to reach |lambda - lambda0| tolerance at point {index}")]
    CorrectorFailed { index: usize },

    #[error("sweep needs at least {needed} usable points, got {got}")]
    SweepTooSmall { needed: usize, got: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, RbError>;
