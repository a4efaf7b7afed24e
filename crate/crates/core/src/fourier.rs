//! Finite Fourier series over the integer dual lattice.
//!
//! A potential, an iterate of the fixed-point map, or a periodic wave part
//! is a finite map from dual-lattice vectors to complex amplitudes. All
//! arithmetic here is exact coefficient arithmetic: products are
//! convolutions, no grid is involved unless explicitly asked for.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{RbError, Result};

/// Coefficients with modulus at or below this are treated as exact zeros
/// and never stored. Numerical truncation is a separate, explicit step.
pub const ZERO_PRUNE: f64 = 1e-300;

/// Default relative tolerance for explicit numerical truncation.
pub const TRUNCATE_REL_TOL: f64 = 1e-14;

/// A point of the dual lattice Z^n, n in {2, 3}. Doubles as a harmonic
/// index q and as a plane-wave index j.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LatticeVector {
    dim: u8,
    c: [i64; 3],
}

impl LatticeVector {
    pub fn new(components: &[i64]) -> Result<Self> {
        let dim = components.len();
        if dim != 2 && dim != 3 {
            return Err(RbError::UnsupportedDimension(dim));
        }
        let mut c = [0i64; 3];
        c[..dim].copy_from_slice(components);
        Ok(Self { dim: dim as u8, c })
    }

    pub fn zero(dim: usize) -> Self {
        Self::new(&vec![0; dim]).expect("dim checked by caller")
    }

    pub fn of2(a: i64, b: i64) -> Self {
        Self { dim: 2, c: [a, b, 0] }
    }

    pub fn of3(a: i64, b: i64, d: i64) -> Self {
        Self { dim: 3, c: [a, b, d] }
    }

    pub fn dim(&self) -> usize {
        self.dim as usize
    }

    pub fn components(&self) -> &[i64] {
        &self.c[..self.dim as usize]
    }

    pub fn is_zero(&self) -> bool {
        self.components().iter().all(|&x| x == 0)
    }

    /// Squared Euclidean length |q|^2 as an exact integer.
    pub fn norm_sq(&self) -> i64 {
        self.components().iter().map(|&x| x * x).sum()
    }

    pub fn norm(&self) -> f64 {
        (self.norm_sq() as f64).sqrt()
    }

    /// Max-component (Chebyshev) radius; governs alias-free grid sizes
    /// and window membership.
    pub fn cheb(&self) -> i64 {
        self.components().iter().map(|&x| x.abs()).max().unwrap_or(0)
    }

    pub fn dot(&self, other: &LatticeVector) -> i64 {
        self.components()
            .iter()
            .zip(other.components())
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn add(&self, other: &LatticeVector) -> LatticeVector {
        debug_assert_eq!(self.dim, other.dim);
        let mut c = [0i64; 3];
        for (out, (a, b)) in c.iter_mut().zip(self.c.iter().zip(&other.c)) {
            *out = a + b;
        }
        LatticeVector { dim: self.dim, c }
    }

    pub fn sub(&self, other: &LatticeVector) -> LatticeVector {
        debug_assert_eq!(self.dim, other.dim);
        let mut c = [0i64; 3];
        for (out, (a, b)) in c.iter_mut().zip(self.c.iter().zip(&other.c)) {
            *out = a - b;
        }
        LatticeVector { dim: self.dim, c }
    }

    pub fn neg(&self) -> LatticeVector {
        let mut c = [0i64; 3];
        for (out, a) in c.iter_mut().zip(&self.c) {
            *out = -a;
        }
        LatticeVector { dim: self.dim, c }
    }
}

impl fmt::Debug for LatticeVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.components())
    }
}

impl fmt::Display for LatticeVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.components())
    }
}

impl Serialize for LatticeVector {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        self.components().serialize(ser)
    }
}

impl<'de> Deserialize<'de> for LatticeVector {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<i64>::deserialize(de)?;
        LatticeVector::new(&v).map_err(serde::de::Error::custom)
    }
}

/// Complex amplitude of the driving plane wave together with the
/// nonlinearity coupling. The regime bound on |sigma||A|^2 is checked by
/// `nonlinear::validate_regime`, not here.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Amplitude {
    pub a_re: f64,
    pub a_im: f64,
    pub sigma: f64,
}

impl Amplitude {
    pub fn new(a: Complex64, sigma: f64) -> Self {
        Self { a_re: a.re, a_im: a.im, sigma }
    }

    pub fn a(&self) -> Complex64 {
        Complex64::new(self.a_re, self.a_im)
    }

    /// sigma * |A|^2, the quantity every regime restriction bounds.
    pub fn sigma_a2(&self) -> f64 {
        self.sigma * self.a().norm_sqr()
    }
}

/// A finite trigonometric polynomial sum_q c_q e^{i<q,x>} on Q = [0, 2pi]^n,
/// stored as its nonzero coefficients in lexicographic key order.
#[derive(Clone, PartialEq)]
pub struct FourierSeries {
    dim: usize,
    coeffs: BTreeMap<LatticeVector, Complex64>,
}

impl FourierSeries {
    pub fn new(dim: usize) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(RbError::UnsupportedDimension(dim));
        }
        Ok(Self { dim, coeffs: BTreeMap::new() })
    }

    pub fn from_pairs<I>(dim: usize, pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (LatticeVector, Complex64)>,
    {
        let mut s = Self::new(dim)?;
        for (q, c) in pairs {
            if q.dim() != dim {
                return Err(RbError::DimensionMismatch(q.dim(), dim));
            }
            s.add_to(q, c);
        }
        Ok(s)
    }

    /// Real cosine potential c*(e^{iqx} + e^{-iqx}).
    pub fn cosine(q: LatticeVector, c: f64) -> Self {
        let mut s = Self { dim: q.dim(), coeffs: BTreeMap::new() };
        s.add_to(q, Complex64::new(c, 0.0));
        s.add_to(q.neg(), Complex64::new(c, 0.0));
        s
    }

    pub fn constant(dim: usize, c: Complex64) -> Result<Self> {
        let mut s = Self::new(dim)?;
        s.add_to(LatticeVector::zero(dim), c);
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn coeff(&self, q: &LatticeVector) -> Complex64 {
        self.coeffs.get(q).copied().unwrap_or(Complex64::ZERO)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&LatticeVector, &Complex64)> {
        self.coeffs.iter()
    }

    /// Insert-or-accumulate, pruning exact zeros so the stored form stays
    /// canonical.
    pub fn add_to(&mut self, q: LatticeVector, c: Complex64) {
        debug_assert_eq!(q.dim(), self.dim);
        let entry = self.coeffs.entry(q).or_insert(Complex64::ZERO);
        *entry += c;
        if entry.norm() <= ZERO_PRUNE {
            self.coeffs.remove(&q);
        }
    }

    pub fn set(&mut self, q: LatticeVector, c: Complex64) {
        debug_assert_eq!(q.dim(), self.dim);
        if c.norm() <= ZERO_PRUNE {
            self.coeffs.remove(&q);
        } else {
            self.coeffs.insert(q, c);
        }
    }

    /// The Wiener norm ||F||_* = sum over stored coefficients of |c|.
    pub fn star_norm(&self) -> f64 {
        self.coeffs.values().map(|c| c.norm()).sum()
    }

    /// Max Euclidean |q| over stored keys; 0 for the zero series.
    pub fn support_radius(&self) -> f64 {
        self.coeffs.keys().map(|q| q.norm_sq()).max().map_or(0.0, |m| (m as f64).sqrt())
    }

    /// Max |q_i| over stored keys; the alias-free grid bound.
    pub fn cheb_radius(&self) -> i64 {
        self.coeffs.keys().map(|q| q.cheb()).max().unwrap_or(0)
    }

    pub fn scale(&self, s: Complex64) -> Self {
        let mut out = Self { dim: self.dim, coeffs: BTreeMap::new() };
        for (q, c) in &self.coeffs {
            out.add_to(*q, c * s);
        }
        out
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.dim != other.dim {
            return Err(RbError::DimensionMismatch(self.dim, other.dim));
        }
        let mut out = self.clone();
        for (q, c) in &other.coeffs {
            out.add_to(*q, *c);
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.add(&other.scale(Complex64::new(-1.0, 0.0)))
    }

    /// Pointwise product in x-space, i.e. coefficient convolution:
    /// (FG)(q) = sum_p F(p) G(q-p).
    pub fn multiply(&self, other: &Self) -> Result<Self> {
        if self.dim != other.dim {
            return Err(RbError::DimensionMismatch(self.dim, other.dim));
        }
        let mut out = Self { dim: self.dim, coeffs: BTreeMap::new() };
        for (p, a) in &self.coeffs {
            for (r, b) in &other.coeffs {
                out.add_to(p.add(r), a * b);
            }
        }
        Ok(out)
    }

    /// Series of the complex conjugate function: coefficient at q becomes
    /// conj(coefficient at -q).
    pub fn reflect_conjugate(&self) -> Self {
        let mut out = Self { dim: self.dim, coeffs: BTreeMap::new() };
        for (q, c) in &self.coeffs {
            out.add_to(q.neg(), c.conj());
        }
        out
    }

    /// |f|^2 as a series. Hermitian-symbol by construction; the zeroth
    /// coefficient is sum |c_q|^2 >= 0.
    pub fn modulus_squared(&self) -> Self {
        self.multiply(&self.reflect_conjugate()).expect("same dim")
    }

    /// Split off the zeroth coefficient. Recombination via `add_to` is
    /// exact, bit for bit.
    pub fn mean_split(&self) -> (Self, Complex64) {
        let zero = LatticeVector::zero(self.dim);
        let mean = self.coeff(&zero);
        let mut rest = self.clone();
        rest.coeffs.remove(&zero);
        (rest, mean)
    }

    /// True if coeff(-q) = conj(coeff(q)) for every stored q, i.e. the
    /// function is real-valued in x-space.
    pub fn is_hermitian_symbol(&self, tol: f64) -> bool {
        self.coeffs
            .iter()
            .all(|(q, c)| (self.coeff(&q.neg()) - c.conj()).norm() <= tol)
    }

    /// Drop coefficients below `tol` in modulus. Returns the cleaned series
    /// and the total dropped mass (sum of dropped |c|).
    pub fn truncate_tol(&self, tol: f64) -> (Self, f64) {
        let mut out = Self { dim: self.dim, coeffs: BTreeMap::new() };
        let mut dropped = 0.0;
        for (q, c) in &self.coeffs {
            if c.norm() < tol {
                dropped += c.norm();
            } else {
                out.coeffs.insert(*q, *c);
            }
        }
        (out, dropped)
    }

    /// Drop coefficients with Euclidean |q| > radius. Returns the series
    /// and the dropped mass; the fixed-point loop reports this per
    /// iteration.
    pub fn truncate_radius(&self, radius: f64) -> (Self, f64) {
        let r2 = radius * radius;
        let mut out = Self { dim: self.dim, coeffs: BTreeMap::new() };
        let mut dropped = 0.0;
        for (q, c) in &self.coeffs {
            if (q.norm_sq() as f64) > r2 + 1e-12 {
                dropped += c.norm();
            } else {
                out.coeffs.insert(*q, *c);
            }
        }
        (out, dropped)
    }

    /// Sample on the uniform grid x = 2pi m / P per axis, row-major over
    /// axes. Requires P >= 2 * cheb_radius + 1 so distinct harmonics stay
    /// distinguishable.
    pub fn evaluate_grid(&self, points_per_axis: usize) -> Result<Vec<Complex64>> {
        let needed = (2 * self.cheb_radius() + 1) as usize;
        if points_per_axis < needed {
            return Err(RbError::AliasingViolation { points: points_per_axis, needed });
        }
        let p = points_per_axis;
        let total = p.pow(self.dim as u32);
        let mut out = vec![Complex64::ZERO; total];
        // Precompute the unit-circle table e^{2pi i m / P}.
        let table: Vec<Complex64> = (0..p)
            .map(|m| Complex64::from_polar(1.0, 2.0 * PI * m as f64 / p as f64))
            .collect();
        for (flat, val) in out.iter_mut().enumerate() {
            let mut idx = [0usize; 3];
            let mut rem = flat;
            for slot in idx[..self.dim].iter_mut().rev() {
                *slot = rem % p;
                rem /= p;
            }
            let mut acc = Complex64::ZERO;
            for (q, c) in &self.coeffs {
                let phase: i64 = q
                    .components()
                    .iter()
                    .zip(&idx[..self.dim])
                    .map(|(&qc, &m)| qc * m as i64)
                    .sum();
                acc += c * table[phase.rem_euclid(p as i64) as usize];
            }
            *val = acc;
        }
        Ok(out)
    }
}

impl fmt::Debug for FourierSeries {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FourierSeries(dim={}, {} modes)", self.dim, self.coeffs.len())
    }
}

// --- serialization -------------------------------------------------------
//
// Wire schema: {"dim": n, "coeffs": [{"q": [..], "re": .., "im": ..}]},
// coefficients in lexicographic key order (the BTreeMap order).

#[derive(Serialize, Deserialize)]
struct CoeffRecord {
    q: Vec<i64>,
    re: f64,
    im: f64,
}

#[derive(Serialize, Deserialize)]
struct SeriesRecord {
    dim: usize,
    coeffs: Vec<CoeffRecord>,
}

impl Serialize for FourierSeries {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        let rec = SeriesRecord {
            dim: self.dim,
            coeffs: self
                .coeffs
                .iter()
                .map(|(q, c)| CoeffRecord { q: q.components().to_vec(), re: c.re, im: c.im })
                .collect(),
        };
        rec.serialize(ser)
    }
}

impl<'de> Deserialize<'de> for FourierSeries {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let rec = SeriesRecord::deserialize(de)?;
        let mut s = FourierSeries::new(rec.dim).map_err(serde::de::Error::custom)?;
        for c in rec.coeffs {
            let q = LatticeVector::new(&c.q).map_err(serde::de::Error::custom)?;
            if q.dim() != rec.dim {
                return Err(serde::de::Error::custom("coefficient dimension mismatch"));
            }
            s.add_to(q, Complex64::new(c.re, c.im));
        }
        Ok(s)
    }
}
