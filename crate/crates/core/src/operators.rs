//! Finite-dimensional realizations on a lattice window: the free operator
//! H0(t), multiplication operators, the model operator with its exact 2x2
//! block, spectral projections, and structured resolvents.
//!
//! Everything is dense at desk scale; a window of radius 20 in 2D is a
//! 1681 x 1681 matrix and stays comfortably fast.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{RbError, Result};
use crate::fourier::{FourierSeries, LatticeVector};
use crate::geometry::{free_eigenvalue, Quasimomentum};

/// Relative distance from the model spectrum below which a resolvent
/// evaluation is refused.
const POLE_GUARD: f64 = 1e-12;

/// The cube {|j_i| <= radius} of the dual lattice with a fixed
/// lexicographic enumeration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatticeWindow {
    dim: usize,
    radius: i64,
}

impl LatticeWindow {
    pub fn new(dim: usize, radius: i64) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(RbError::UnsupportedDimension(dim));
        }
        if radius < 1 {
            return Err(RbError::InvalidConfig(format!("window radius {radius} < 1")));
        }
        Ok(Self { dim, radius })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn radius(&self) -> i64 {
        self.radius
    }

    pub fn size(&self) -> usize {
        let side = (2 * self.radius + 1) as usize;
        side.pow(self.dim as u32)
    }

    /// Lexicographic position of j, or None outside the window.
    pub fn index(&self, j: &LatticeVector) -> Option<usize> {
        if j.dim() != self.dim || j.cheb() > self.radius {
            return None;
        }
        let side = (2 * self.radius + 1) as usize;
        let mut idx = 0usize;
        for &c in j.components() {
            idx = idx * side + (c + self.radius) as usize;
        }
        Some(idx)
    }

    pub fn point(&self, idx: usize) -> LatticeVector {
        let side = 2 * self.radius + 1;
        let mut comps = [0i64; 3];
        let mut rem = idx as i64;
        for ax in (0..self.dim).rev() {
            comps[ax] = rem % side - self.radius;
            rem /= side;
        }
        LatticeVector::new(&comps[..self.dim]).expect("window dim is valid")
    }

    pub fn points(&self) -> impl Iterator<Item = LatticeVector> + '_ {
        (0..self.size()).map(move |i| self.point(i))
    }

    pub fn contains(&self, j: &LatticeVector) -> bool {
        self.index(j).is_some()
    }
}

/// Dense complex matrix indexed by a lattice window.
#[derive(Clone, PartialEq)]
pub struct TruncatedOperator {
    pub window: LatticeWindow,
    pub mat: DMatrix<Complex64>,
}

impl TruncatedOperator {
    pub fn zeros(window: LatticeWindow) -> Self {
        let n = window.size();
        Self { window, mat: DMatrix::zeros(n, n) }
    }

    pub fn identity(window: LatticeWindow) -> Self {
        let n = window.size();
        Self { window, mat: DMatrix::identity(n, n) }
    }

    pub fn size(&self) -> usize {
        self.window.size()
    }

    /// The matrix norm ||T||_0 = (1/2) max_r sum_p (|T_pr| + |T_rp|).
    pub fn op_norm_zero(&self) -> f64 {
        op_norm_zero(&self.mat)
    }

    pub fn hermiticity_defect(&self) -> f64 {
        let n = self.mat.nrows();
        let mut worst = 0.0f64;
        for r in 0..n {
            for c in r..n {
                let d = (self.mat[(r, c)] - self.mat[(c, r)].conj()).norm();
                worst = worst.max(d);
            }
        }
        worst
    }

    pub fn sub(&self, other: &Self) -> Self {
        debug_assert_eq!(self.window, other.window);
        Self { window: self.window, mat: &self.mat - &other.mat }
    }

    pub fn add(&self, other: &Self) -> Self {
        debug_assert_eq!(self.window, other.window);
        Self { window: self.window, mat: &self.mat + &other.mat }
    }

    /// Debug dump: square array of [re, im] pairs plus window metadata.
    pub fn to_debug_json(&self) -> serde_json::Value {
        let n = self.mat.nrows();
        let rows: Vec<Vec<[f64; 2]>> = (0..n)
            .map(|r| (0..n).map(|c| [self.mat[(r, c)].re, self.mat[(r, c)].im]).collect())
            .collect();
        serde_json::json!({
            "dim": self.window.dim(),
            "radius": self.window.radius(),
            "size": n,
            "entries": rows,
        })
    }
}

impl std::fmt::Debug for TruncatedOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "TruncatedOperator({}x{})", self.size(), self.size())
    }
}

pub fn op_norm_zero(mat: &DMatrix<Complex64>) -> f64 {
    let n = mat.nrows();
    let mut best = 0.0f64;
    for r in 0..n {
        let mut s = 0.0;
        for p in 0..n {
            s += mat[(p, r)].norm() + mat[(r, p)].norm();
        }
        best = best.max(s);
    }
    0.5 * best
}

/// Free eigenvalues |j + t|^{2l} in window order.
pub fn h0_diagonal(t: &Quasimomentum, w: &LatticeWindow, l: u32) -> Vec<f64> {
    w.points().map(|j| free_eigenvalue(&j, t, l)).collect()
}

/// H0(t) as a dense diagonal operator.
pub fn build_h0(t: &Quasimomentum, w: &LatticeWindow, l: u32) -> TruncatedOperator {
    let mut op = TruncatedOperator::zeros(*w);
    for (i, v) in h0_diagonal(t, w, l).into_iter().enumerate() {
        op.mat[(i, i)] = Complex64::new(v, 0.0);
    }
    op
}

/// Matrix of multiplication by W in the plane-wave basis:
/// (M_W)_{ab} = w_{a-b}. Harmonics of W that no window difference can
/// reach are silently unrepresentable here; the fixed-point loop truncates
/// and reports before this point.
pub fn build_multiplication(series: &FourierSeries, w: &LatticeWindow) -> TruncatedOperator {
    let mut op = TruncatedOperator::zeros(*w);
    let n = w.size();
    for a in 0..n {
        let pa = w.point(a);
        for b in 0..n {
            let pb = w.point(b);
            let c = series.coeff(&pa.sub(&pb));
            if c != Complex64::ZERO {
                op.mat[(a, b)] = c;
            }
        }
    }
    op
}

/// The exact 2x2 resonant block of the model operator, in the ordered
/// basis (j, j-q).
#[derive(Clone, Debug)]
pub struct ModelBlock {
    pub j: LatticeVector,
    pub j_minus_q: LatticeVector,
    pub v_q: Complex64,
    /// (p_j^{2l} + p_{j-q}^{2l}) / 2
    pub a: f64,
    /// sqrt(4|v_q|^2 + (p_j^{2l} - p_{j-q}^{2l})^2) / 2 >= |v_q|
    pub b: f64,
    pub lambda_plus: f64,
    pub lambda_minus: f64,
    /// unit eigenvectors, first nonzero component made real-positive
    pub e_plus: [Complex64; 2],
    pub e_minus: [Complex64; 2],
}

impl ModelBlock {
    /// Closed-form eigenpairs of [[alpha, v], [conj(v), beta]].
    pub fn new(
        j: LatticeVector,
        j_minus_q: LatticeVector,
        alpha: f64,
        beta: f64,
        v_q: Complex64,
    ) -> Result<Self> {
        if v_q.norm() == 0.0 {
            return Err(RbError::VqZero);
        }
        let a = 0.5 * (alpha + beta);
        let b = 0.5 * (4.0 * v_q.norm_sqr() + (alpha - beta).powi(2)).sqrt();
        let lambda_plus = a + b;
        let lambda_minus = a - b;
        // (beta - lambda_plus, -conj(v_q)) annihilates both rows of the
        // shifted block; likewise (-v_q, alpha - lambda_minus).
        let e_plus = phase_fix_2([
            Complex64::new(beta - lambda_plus, 0.0),
            -v_q.conj(),
        ]);
        let e_minus = phase_fix_2([
            -v_q,
            Complex64::new(alpha - lambda_minus, 0.0),
        ]);
        Ok(Self { j, j_minus_q, v_q, a, b, lambda_plus, lambda_minus, e_plus, e_minus })
    }

    pub fn eigenvalue(&self, branch: Branch) -> f64 {
        match branch {
            Branch::Plus => self.lambda_plus,
            Branch::Minus => self.lambda_minus,
        }
    }

    pub fn eigenvector(&self, branch: Branch) -> [Complex64; 2] {
        match branch {
            Branch::Plus => self.e_plus,
            Branch::Minus => self.e_minus,
        }
    }

    /// Residual of the 2x2 eigen equation, for self-checks.
    pub fn eigen_residual(&self, alpha: f64, beta: f64, branch: Branch) -> f64 {
        let e = self.eigenvector(branch);
        let lam = self.eigenvalue(branch);
        let r0 = Complex64::new(alpha - lam, 0.0) * e[0] + self.v_q * e[1];
        let r1 = self.v_q.conj() * e[0] + Complex64::new(beta - lam, 0.0) * e[1];
        (r0.norm_sqr() + r1.norm_sqr()).sqrt()
    }
}

/// Which eigenvalue branch of the block a resonant computation follows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Plus,
    Minus,
}

/// Normalize to unit length with the first component of modulus above
/// 1e-14 rotated to the positive real axis. Makes projections and psi
/// coefficients deterministic across platforms.
fn phase_fix_2(v: [Complex64; 2]) -> [Complex64; 2] {
    let norm = (v[0].norm_sqr() + v[1].norm_sqr()).sqrt();
    let lead = if v[0].norm() > 1e-14 * norm { v[0] } else { v[1] };
    let phase = lead / lead.norm();
    [v[0] / (phase * norm), v[1] / (phase * norm)]
}

/// Phase-fix an arbitrary vector the same way.
pub fn phase_fix(v: &mut nalgebra::DVector<Complex64>) {
    let norm = v.norm();
    if norm == 0.0 {
        return;
    }
    let lead = v.iter().find(|c| c.norm() > 1e-10 * norm).copied();
    if let Some(lead) = lead {
        let phase = lead / lead.norm();
        for c in v.iter_mut() {
            *c /= phase;
        }
    }
    *v /= Complex64::new(norm, 0.0);
}

/// Dense model operator H0(t) + the (j, j-q) coupling by v_q, together
/// with its closed-form block. The spectrum is {p_i^{2l}}_{i != j, j-q}
/// union {lambda_plus, lambda_minus}.
pub fn build_model(
    t: &Quasimomentum,
    j: &LatticeVector,
    q: &LatticeVector,
    potential: &FourierSeries,
    w: &LatticeWindow,
    l: u32,
) -> Result<(TruncatedOperator, ModelBlock)> {
    let v_q = potential.coeff(q);
    if v_q.norm() == 0.0 {
        return Err(RbError::VqZero);
    }
    let jq = j.sub(q);
    let idx_j = w
        .index(j)
        .ok_or_else(|| RbError::OutsideWindow(format!("{j}"), w.radius()))?;
    let idx_jq = w
        .index(&jq)
        .ok_or_else(|| RbError::OutsideWindow(format!("{jq}"), w.radius()))?;

    let mut op = build_h0(t, w, l);
    let v_mq = potential.coeff(&q.neg());
    op.mat[(idx_j, idx_jq)] = v_q;
    op.mat[(idx_jq, idx_j)] = v_mq;

    let alpha = free_eigenvalue(j, t, l);
    let beta = free_eigenvalue(&jq, t, l);
    let block = ModelBlock::new(*j, jq, alpha, beta, v_q)?;
    Ok((op, block))
}

/// Rank-1 spectral projection of the model onto one block branch,
/// supported on the (j, j-q) coordinates.
pub fn model_projection(
    block: &ModelBlock,
    branch: Branch,
    w: &LatticeWindow,
) -> Result<TruncatedOperator> {
    let idx_j = w
        .index(&block.j)
        .ok_or_else(|| RbError::OutsideWindow(format!("{}", block.j), w.radius()))?;
    let idx_jq = w
        .index(&block.j_minus_q)
        .ok_or_else(|| RbError::OutsideWindow(format!("{}", block.j_minus_q), w.radius()))?;
    let e = block.eigenvector(branch);
    let mut op = TruncatedOperator::zeros(*w);
    let coords = [idx_j, idx_jq];
    for (r, &ir) in coords.iter().enumerate() {
        for (c, &ic) in coords.iter().enumerate() {
            op.mat[(ir, ic)] = e[r] * e[c].conj();
        }
    }
    Ok(op)
}

/// The structured model operator used by resolvents: a real diagonal plus
/// at most one 2x2 coupling. Both the resonant model and the plain free
/// operator fit this shape.
#[derive(Clone, Debug)]
pub struct ModelOperator {
    pub window: LatticeWindow,
    pub diag: Vec<f64>,
    pub channel: Channel,
}

/// The distinguished coordinates a perturbation series channels through:
/// the single anchor j in the non-resonant case, the (j, j-q) block pair
/// in the resonant case.
#[derive(Clone, Debug)]
pub enum Channel {
    Single { idx: usize },
    Pair { idx_j: usize, idx_jq: usize, v: Complex64 },
}

impl Channel {
    pub fn coords(&self) -> Vec<usize> {
        match self {
            Channel::Single { idx } => vec![*idx],
            Channel::Pair { idx_j, idx_jq, .. } => vec![*idx_j, *idx_jq],
        }
    }
}

impl ModelOperator {
    /// Free operator anchored at j (non-resonant series).
    pub fn free(t: &Quasimomentum, j: &LatticeVector, w: &LatticeWindow, l: u32) -> Result<Self> {
        let idx = w
            .index(j)
            .ok_or_else(|| RbError::OutsideWindow(format!("{j}"), w.radius()))?;
        Ok(Self {
            window: *w,
            diag: h0_diagonal(t, w, l),
            channel: Channel::Single { idx },
        })
    }

    /// Resonant model with the (j, j-q) coupling from the block.
    pub fn resonant(
        t: &Quasimomentum,
        block: &ModelBlock,
        w: &LatticeWindow,
        l: u32,
    ) -> Result<Self> {
        let idx_j = w
            .index(&block.j)
            .ok_or_else(|| RbError::OutsideWindow(format!("{}", block.j), w.radius()))?;
        let idx_jq = w
            .index(&block.j_minus_q)
            .ok_or_else(|| RbError::OutsideWindow(format!("{}", block.j_minus_q), w.radius()))?;
        Ok(Self {
            window: *w,
            diag: h0_diagonal(t, w, l),
            channel: Channel::Pair { idx_j, idx_jq, v: block.v_q },
        })
    }

    /// Every eigenvalue of the structured operator.
    pub fn spectrum(&self) -> Vec<f64> {
        match &self.channel {
            Channel::Single { .. } => self.diag.clone(),
            Channel::Pair { idx_j, idx_jq, v } => {
                let mut out: Vec<f64> = self
                    .diag
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| i != idx_j && i != idx_jq)
                    .map(|(_, &d)| d)
                    .collect();
                let alpha = self.diag[*idx_j];
                let beta = self.diag[*idx_jq];
                let a = 0.5 * (alpha + beta);
                let b = 0.5 * (4.0 * v.norm_sqr() + (alpha - beta).powi(2)).sqrt();
                out.push(a + b);
                out.push(a - b);
                out
            }
        }
    }

    pub fn min_spectrum_distance(&self, z: Complex64) -> f64 {
        self.spectrum()
            .iter()
            .map(|&lam| (Complex64::new(lam, 0.0) - z).norm())
            .fold(f64::INFINITY, f64::min)
    }

    fn check_pole(&self, z: Complex64) -> Result<()> {
        let dist = self.min_spectrum_distance(z);
        if dist <= POLE_GUARD * z.norm().max(1.0) {
            return Err(RbError::PoleOnContour { z, dist });
        }
        Ok(())
    }

    /// 2x2 inverse of (block - z) in the (j, j-q) basis; the scalar
    /// (d_j - z)^{-1} in the single-anchor case (stored in the [0][0]
    /// entry with zeros elsewhere).
    pub fn channel_resolvent(&self, z: Complex64) -> [[Complex64; 2]; 2] {
        match &self.channel {
            Channel::Single { idx } => {
                let inv = Complex64::new(1.0, 0.0) / (Complex64::new(self.diag[*idx], 0.0) - z);
                [[inv, Complex64::ZERO], [Complex64::ZERO, Complex64::ZERO]]
            }
            Channel::Pair { idx_j, idx_jq, v } => {
                let da = Complex64::new(self.diag[*idx_j], 0.0) - z;
                let db = Complex64::new(self.diag[*idx_jq], 0.0) - z;
                let det = da * db - v * v.conj();
                [[db / det, -v / det], [-v.conj() / det, da / det]]
            }
        }
    }

    /// (model - z)^{-1} X: diagonal inversion off the channel, explicit
    /// small inversion on it. Exact up to rounding.
    pub fn resolvent_apply(
        &self,
        z: Complex64,
        x: &DMatrix<Complex64>,
    ) -> Result<DMatrix<Complex64>> {
        self.check_pole(z)?;
        let mut out = x.clone();
        self.resolvent_apply_in_place(z, &mut out);
        Ok(out)
    }

    /// Same as `resolvent_apply` but without the pole check or copy;
    /// callers on a validated contour use this in inner loops.
    pub fn resolvent_apply_in_place(&self, z: Complex64, x: &mut DMatrix<Complex64>) {
        let ncols = x.ncols();
        let coords = self.channel.coords();
        let ch = self.channel_resolvent(z);
        // stash the channel rows before the diagonal pass overwrites them
        let saved: Vec<Vec<Complex64>> = coords
            .iter()
            .map(|&r| (0..ncols).map(|c| x[(r, c)]).collect())
            .collect();
        for (i, &d) in self.diag.iter().enumerate() {
            if coords.contains(&i) {
                continue;
            }
            let inv = Complex64::new(1.0, 0.0) / (Complex64::new(d, 0.0) - z);
            for c in 0..ncols {
                x[(i, c)] *= inv;
            }
        }
        match coords.len() {
            1 => {
                let r = coords[0];
                for c in 0..ncols {
                    x[(r, c)] = ch[0][0] * saved[0][c];
                }
            }
            2 => {
                let (r0, r1) = (coords[0], coords[1]);
                for c in 0..ncols {
                    x[(r0, c)] = ch[0][0] * saved[0][c] + ch[0][1] * saved[1][c];
                    x[(r1, c)] = ch[1][0] * saved[0][c] + ch[1][1] * saved[1][c];
                }
            }
            _ => unreachable!(),
        }
    }

    /// X (model - z)^{-1}, acting on columns from the right.
    pub fn resolvent_apply_right_in_place(&self, z: Complex64, x: &mut DMatrix<Complex64>) {
        let nrows = x.nrows();
        let coords = self.channel.coords();
        let ch = self.channel_resolvent(z);
        let saved: Vec<Vec<Complex64>> = coords
            .iter()
            .map(|&c| (0..nrows).map(|r| x[(r, c)]).collect())
            .collect();
        for (i, &d) in self.diag.iter().enumerate() {
            if coords.contains(&i) {
                continue;
            }
            let inv = Complex64::new(1.0, 0.0) / (Complex64::new(d, 0.0) - z);
            for r in 0..nrows {
                x[(r, i)] *= inv;
            }
        }
        match coords.len() {
            1 => {
                let c0 = coords[0];
                for r in 0..nrows {
                    x[(r, c0)] = saved[0][r] * ch[0][0];
                }
            }
            2 => {
                let (c0, c1) = (coords[0], coords[1]);
                for r in 0..nrows {
                    x[(r, c0)] = saved[0][r] * ch[0][0] + saved[1][r] * ch[1][0];
                    x[(r, c1)] = saved[0][r] * ch[0][1] + saved[1][r] * ch[1][1];
                }
            }
            _ => unreachable!(),
        }
    }

    /// Dense form for oracles and residual checks.
    pub fn to_dense(&self) -> TruncatedOperator {
        let mut op = TruncatedOperator::zeros(self.window);
        for (i, &d) in self.diag.iter().enumerate() {
            op.mat[(i, i)] = Complex64::new(d, 0.0);
        }
        if let Channel::Pair { idx_j, idx_jq, v } = &self.channel {
            op.mat[(*idx_j, *idx_jq)] = *v;
            op.mat[(*idx_jq, *idx_j)] = v.conj();
        }
        op
    }
}

/// A perturbation operator in structured form: a multiplication operator
/// (B_{ab} += w_{a-b}) plus a handful of explicit point corrections (the
/// -P_q V P_q subtraction). Each shift carries precomputed source-index
/// maps so the inner loops stay free of window arithmetic.
#[derive(Clone, Debug)]
pub struct PerturbationOp {
    pub window: LatticeWindow,
    shifts: Vec<Shift>,
    points: Vec<(usize, usize, Complex64)>,
}

#[derive(Clone, Debug)]
struct Shift {
    coef: Complex64,
    /// row map for B X: entry a holds index(point(a) - s), or -1
    down: Vec<i64>,
    /// column map for X B: entry b holds index(point(b) + s), or -1
    up: Vec<i64>,
}

impl Shift {
    fn new(window: &LatticeWindow, s: &LatticeVector, coef: Complex64) -> Self {
        let n = window.size();
        let mut down = Vec::with_capacity(n);
        let mut up = Vec::with_capacity(n);
        for idx in 0..n {
            let p = window.point(idx);
            down.push(window.index(&p.sub(s)).map_or(-1, |i| i as i64));
            up.push(window.index(&p.add(s)).map_or(-1, |i| i as i64));
        }
        Self { coef, down, up }
    }
}

impl PerturbationOp {
    pub fn from_series(series: &FourierSeries, window: LatticeWindow) -> Self {
        let shifts = series.iter().map(|(q, c)| Shift::new(&window, q, *c)).collect();
        Self { window, shifts, points: Vec::new() }
    }

    pub fn zero(window: LatticeWindow) -> Self {
        Self { window, shifts: Vec::new(), points: Vec::new() }
    }

    pub fn add_point(&mut self, row: usize, col: usize, val: Complex64) {
        self.points.push((row, col, val));
    }

    /// Subtract P_q V P_q: the four entries the block projection keeps.
    pub fn subtract_block_part(
        &mut self,
        potential: &FourierSeries,
        idx_j: usize,
        idx_jq: usize,
        q: &LatticeVector,
    ) {
        let zero = LatticeVector::zero(q.dim());
        let v0 = potential.coeff(&zero);
        let vq = potential.coeff(q);
        let vmq = potential.coeff(&q.neg());
        if v0 != Complex64::ZERO {
            self.add_point(idx_j, idx_j, -v0);
            self.add_point(idx_jq, idx_jq, -v0);
        }
        if vq != Complex64::ZERO {
            self.add_point(idx_j, idx_jq, -vq);
        }
        if vmq != Complex64::ZERO {
            self.add_point(idx_jq, idx_j, -vmq);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.shifts.is_empty() && self.points.is_empty()
    }

    /// B X into a fresh matrix.
    pub fn apply_dense_left(&self, x: &DMatrix<Complex64>) -> DMatrix<Complex64> {
        let n = self.window.size();
        let ncols = x.ncols();
        let mut out = DMatrix::zeros(n, ncols);
        for shift in &self.shifts {
            let coef = shift.coef;
            for (a, &src) in shift.down.iter().enumerate() {
                if src >= 0 {
                    let src = src as usize;
                    for c in 0..ncols {
                        out[(a, c)] += coef * x[(src, c)];
                    }
                }
            }
        }
        for &(r, col, v) in &self.points {
            for c in 0..ncols {
                out[(r, c)] += v * x[(col, c)];
            }
        }
        out
    }

    /// X B into a fresh matrix.
    pub fn apply_dense_right(&self, x: &DMatrix<Complex64>) -> DMatrix<Complex64> {
        let n = self.window.size();
        let nrows = x.nrows();
        let mut out = DMatrix::zeros(nrows, n);
        for shift in &self.shifts {
            let coef = shift.coef;
            for (b, &src) in shift.up.iter().enumerate() {
                if src >= 0 {
                    let src = src as usize;
                    for r in 0..nrows {
                        out[(r, b)] += x[(r, src)] * coef;
                    }
                }
            }
        }
        for &(row, col, v) in &self.points {
            for r in 0..nrows {
                out[(r, col)] += x[(r, row)] * v;
            }
        }
        out
    }

    pub fn to_dense(&self) -> TruncatedOperator {
        let id = DMatrix::identity(self.window.size(), self.window.size());
        TruncatedOperator { window: self.window, mat: self.apply_dense_left(&id) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Quasimomentum;
    use approx::assert_abs_diff_eq;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn window_enumeration_roundtrip() {
        let w = LatticeWindow::new(2, 3).unwrap();
        assert_eq!(w.size(), 49);
        for idx in 0..w.size() {
            let p = w.point(idx);
            assert_eq!(w.index(&p), Some(idx));
        }
        assert_eq!(w.index(&LatticeVector::of2(4, 0)), None);

        let w3 = LatticeWindow::new(3, 2).unwrap();
        assert_eq!(w3.size(), 125);
        for idx in 0..w3.size() {
            assert_eq!(w3.index(&w3.point(idx)), Some(idx));
        }
    }

    #[test]
    fn h0_diagonal_entries() {
        let w = LatticeWindow::new(2, 2).unwrap();
        let t0 = Quasimomentum::of2(0.0, 0.0).unwrap();
        let h = build_h0(&t0, &w, 1);
        let i10 = w.index(&LatticeVector::of2(1, 0)).unwrap();
        assert_abs_diff_eq!(h.mat[(i10, i10)].re, 1.0);
        let i00 = w.index(&LatticeVector::zero(2)).unwrap();
        assert_abs_diff_eq!(h.mat[(i00, i00)].re, 0.0);

        let t = Quasimomentum::of2(0.5, 0.0).unwrap();
        let h2 = build_h0(&t, &w, 2);
        assert_abs_diff_eq!(h2.mat[(i10, i10)].re, 1.5f64.powi(4));
    }

    #[test]
    fn op_norm_zero_examples() {
        let w = LatticeWindow::new(2, 1).unwrap();
        assert_abs_diff_eq!(TruncatedOperator::identity(w).op_norm_zero(), 1.0);

        let mut single = TruncatedOperator::zeros(w);
        single.mat[(0, 1)] = c(2.0, 0.0);
        assert_abs_diff_eq!(single.op_norm_zero(), 1.0);

        let mut diag = TruncatedOperator::zeros(w);
        diag.mat[(0, 0)] = c(3.0, 0.0);
        diag.mat[(1, 1)] = c(-4.0, 0.0);
        assert_abs_diff_eq!(diag.op_norm_zero(), 4.0);
    }

    #[test]
    fn multiplication_operator_structure() {
        let w = LatticeWindow::new(2, 2).unwrap();
        let zero = FourierSeries::new(2).unwrap();
        assert_abs_diff_eq!(build_multiplication(&zero, &w).op_norm_zero(), 0.0);

        let cst = FourierSeries::constant(2, c(0.7, -0.1)).unwrap();
        let m = build_multiplication(&cst, &w);
        for i in 0..w.size() {
            assert_eq!(m.mat[(i, i)], c(0.7, -0.1));
        }

        let cos = FourierSeries::cosine(LatticeVector::of2(1, 0), 1.0);
        let m = build_multiplication(&cos, &w);
        let a = w.index(&LatticeVector::of2(1, 0)).unwrap();
        let b = w.index(&LatticeVector::of2(0, 0)).unwrap();
        assert_eq!(m.mat[(a, b)], c(1.0, 0.0));
        assert_eq!(m.mat[(b, a)], c(1.0, 0.0));
        assert_abs_diff_eq!(m.op_norm_zero(), 2.0);
        assert!(m.op_norm_zero() <= 2.0 * cos.star_norm());
        assert!(m.hermiticity_defect() < 1e-15);
    }

    #[test]
    fn model_block_symmetric_case() {
        let j = LatticeVector::of2(1, 0);
        let jq = LatticeVector::of2(-1, 0);
        let b = ModelBlock::new(j, jq, 16.0, 16.0, c(0.25, 0.0)).unwrap();
        assert_abs_diff_eq!(b.lambda_plus, 16.25);
        assert_abs_diff_eq!(b.lambda_minus, 15.75);
        // e_plus proportional to (1, 1)
        assert_abs_diff_eq!((b.e_plus[0] - b.e_plus[1]).norm(), 0.0, epsilon = 1e-14);
        assert!(b.e_plus[0].re > 0.0);
        assert!(b.eigen_residual(16.0, 16.0, Branch::Plus) < 1e-13);
        assert!(b.eigen_residual(16.0, 16.0, Branch::Minus) < 1e-13);
    }

    #[test]
    fn model_block_asymmetric_against_dense_oracle() {
        let j = LatticeVector::of2(1, 0);
        let jq = LatticeVector::of2(-1, 0);
        let (alpha, beta, v) = (16.0, 16.6, c(0.4, 0.0));
        let blk = ModelBlock::new(j, jq, alpha, beta, v).unwrap();
        assert_abs_diff_eq!(blk.a, 16.3, epsilon = 1e-14);
        assert_abs_diff_eq!(blk.b, 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(blk.lambda_plus, 16.8, epsilon = 1e-14);
        assert_abs_diff_eq!(blk.lambda_minus, 15.8, epsilon = 1e-14);
        // e_plus proportional to (1, 2)
        assert_abs_diff_eq!(ratio(&blk.e_plus), 2.0, epsilon = 1e-12);

        // dense 2x2 eigensolve oracle
        let m = DMatrix::from_row_slice(2, 2, &[c(alpha, 0.0), v, v.conj(), c(beta, 0.0)]);
        let eig = m.symmetric_eigen();
        let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        vals.sort_by(f64::total_cmp);
        assert_abs_diff_eq!(vals[0], blk.lambda_minus, epsilon = 1e-12);
        assert_abs_diff_eq!(vals[1], blk.lambda_plus, epsilon = 1e-12);

        // complex coupling keeps b >= |v_q| and orthogonal eigenvectors
        let blk = ModelBlock::new(j, jq, 16.0, 16.3, c(0.1, -0.2)).unwrap();
        assert!(blk.b >= blk.v_q.norm());
        let dot = blk.e_plus[0].conj() * blk.e_minus[0] + blk.e_plus[1].conj() * blk.e_minus[1];
        assert!(dot.norm() < 1e-14);
        assert!(blk.eigen_residual(16.0, 16.3, Branch::Plus) < 1e-13);
    }

    fn ratio(e: &[Complex64; 2]) -> f64 {
        (e[1] / e[0]).re
    }

    #[test]
    fn model_rejects_zero_coupling() {
        let t = Quasimomentum::of2(0.1, 0.2).unwrap();
        let w = LatticeWindow::new(2, 3).unwrap();
        let v = FourierSeries::cosine(LatticeVector::of2(1, 1), 0.1);
        let err = build_model(
            &t,
            &LatticeVector::of2(1, 0),
            &LatticeVector::of2(2, 0), // v_{(2,0)} = 0
            &v,
            &w,
            1,
        );
        assert!(matches!(err, Err(RbError::VqZero)));
    }

    #[test]
    fn model_spectrum_matches_dense_eigensolve() {
        let t = Quasimomentum::of2(0.05, 0.37).unwrap();
        let w = LatticeWindow::new(2, 4).unwrap();
        let j = LatticeVector::of2(1, 2);
        let q = LatticeVector::of2(2, 0);
        let v = FourierSeries::cosine(LatticeVector::of2(2, 0), 0.3);
        let (dense, blk) = build_model(&t, &j, &q, &v, &w, 2).unwrap();
        let model = ModelOperator::resonant(&t, &blk, &w, 2).unwrap();

        let eig = dense.mat.clone().symmetric_eigen();
        let mut got: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        got.sort_by(f64::total_cmp);
        let mut expect = model.spectrum();
        expect.sort_by(f64::total_cmp);
        assert_eq!(got.len(), expect.len());
        for (g, e) in got.iter().zip(&expect) {
            assert_abs_diff_eq!(g, e, epsilon = 1e-10);
        }
    }

    #[test]
    fn projections_idempotent_orthogonal_complete() {
        let j = LatticeVector::of2(1, 1);
        let q = LatticeVector::of2(2, 0);
        let jq = j.sub(&q);
        let w = LatticeWindow::new(2, 2).unwrap();
        let blk = ModelBlock::new(j, jq, 4.1, 4.3, c(0.12, 0.07)).unwrap();
        let ep = model_projection(&blk, Branch::Plus, &w).unwrap();
        let em = model_projection(&blk, Branch::Minus, &w).unwrap();

        let idem = (&ep.mat * &ep.mat) - &ep.mat;
        assert!(op_norm_zero(&idem) < 1e-12);
        assert!(ep.hermiticity_defect() < 1e-13);
        let tr: Complex64 = ep.mat.diagonal().iter().sum();
        assert_abs_diff_eq!(tr.re, 1.0, epsilon = 1e-13);
        let cross = &ep.mat * &em.mat;
        assert!(op_norm_zero(&cross) < 1e-12);

        // completeness on the block coordinates
        let sum = ep.add(&em);
        let ij = w.index(&j).unwrap();
        let ijq = w.index(&jq).unwrap();
        assert_abs_diff_eq!(sum.mat[(ij, ij)].re, 1.0, epsilon = 1e-13);
        assert_abs_diff_eq!(sum.mat[(ijq, ijq)].re, 1.0, epsilon = 1e-13);
        assert!(sum.mat[(ij, ijq)].norm() < 1e-13);
    }

    #[test]
    fn symmetric_block_projection_entries() {
        let j = LatticeVector::of2(1, 0);
        let jq = LatticeVector::of2(-1, 0);
        let w = LatticeWindow::new(2, 1).unwrap();
        let blk = ModelBlock::new(j, jq, 9.0, 9.0, c(0.5, 0.0)).unwrap();
        let ep = model_projection(&blk, Branch::Plus, &w).unwrap();
        let ij = w.index(&j).unwrap();
        let ijq = w.index(&jq).unwrap();
        for (r, cidx) in [(ij, ij), (ij, ijq), (ijq, ij), (ijq, ijq)] {
            assert_abs_diff_eq!(ep.mat[(r, cidx)].re, 0.5, epsilon = 1e-14);
        }
    }

    #[test]
    fn resolvent_diagonal_case_and_pole() {
        let t = Quasimomentum::of2(0.21, 0.43).unwrap();
        let w = LatticeWindow::new(2, 3).unwrap();
        let j = LatticeVector::of2(1, 1);
        let model = ModelOperator::free(&t, &j, &w, 2).unwrap();
        let z = c(3.0, 0.5);
        let x = DMatrix::identity(w.size(), w.size());
        let r = model.resolvent_apply(z, &x).unwrap();
        for i in 0..w.size() {
            let expect = Complex64::new(1.0, 0.0) / (c(model.diag[i], 0.0) - z);
            assert!((r[(i, i)] - expect).norm() < 1e-14);
        }

        // z exactly at an eigenvalue is refused
        let zpole = c(model.diag[w.index(&j).unwrap()], 0.0);
        assert!(matches!(
            model.resolvent_apply(zpole, &x),
            Err(RbError::PoleOnContour { .. })
        ));
    }

    #[test]
    fn resolvent_block_case_against_dense_solve() {
        let t = Quasimomentum::of2(0.0, 0.36).unwrap();
        let w = LatticeWindow::new(2, 4).unwrap();
        let j = LatticeVector::of2(1, 2);
        let q = LatticeVector::of2(2, 0);
        let v = FourierSeries::from_pairs(
            2,
            [
                (LatticeVector::of2(2, 0), c(0.2, 0.1)),
                (LatticeVector::of2(-2, 0), c(0.2, -0.1)),
            ],
        )
        .unwrap();
        let (dense, blk) = build_model(&t, &j, &q, &v, &w, 2).unwrap();
        let model = ModelOperator::resonant(&t, &blk, &w, 2).unwrap();

        // random z on the C1+ circle of radius |v_q|/10 around lambda_plus
        let d = blk.v_q.norm() / 10.0;
        for theta in [0.3f64, 1.7, 4.4] {
            let z = c(blk.lambda_plus, 0.0) + Complex64::from_polar(d, theta);
            let mut x = DMatrix::zeros(w.size(), w.size());
            for i in 0..w.size() {
                x[(i, 0)] = c((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos());
                x[(i, 1)] = c(1.0 / (1.0 + i as f64), -0.2);
            }
            let r = model.resolvent_apply(z, &x).unwrap();
            // residual check (H - z) r = x
            let mut hz = dense.mat.clone();
            for i in 0..w.size() {
                hz[(i, i)] -= z;
            }
            let resid = &hz * &r - &x;
            assert!(
                op_norm_zero(&resid) <= 1e-10 * op_norm_zero(&x).max(1.0),
                "residual too large at theta={theta}"
            );
            // against a dense LU solve oracle
            let lu = hz.lu();
            let oracle = lu.solve(&x).expect("dense solve");
            assert!(op_norm_zero(&(&r - &oracle)) < 1e-9);
        }
    }

    #[test]
    fn perturbation_matches_dense_form() {
        let w = LatticeWindow::new(2, 3).unwrap();
        let series = FourierSeries::from_pairs(
            2,
            [
                (LatticeVector::of2(1, 0), c(0.3, 0.1)),
                (LatticeVector::of2(-1, 0), c(0.3, -0.1)),
                (LatticeVector::of2(0, 2), c(-0.2, 0.0)),
                (LatticeVector::zero(2), c(0.05, 0.0)),
            ],
        )
        .unwrap();
        let mut b = PerturbationOp::from_series(&series, w);
        b.add_point(3, 8, c(-0.5, 0.25));
        let dense = b.to_dense();

        // compare against build_multiplication + the point
        let mut expect = build_multiplication(&series, &w);
        expect.mat[(3, 8)] += c(-0.5, 0.25);
        assert!(op_norm_zero(&(dense.mat.clone() - &expect.mat)) < 1e-14);

        // left and right application agree with dense matmul
        let n = w.size();
        let mut x = DMatrix::zeros(n, n);
        for i in 0..n {
            for jj in 0..n {
                x[(i, jj)] = c(((i * 7 + jj) % 5) as f64 * 0.2, ((i + 2 * jj) % 3) as f64 - 1.0);
            }
        }
        let left = b.apply_dense_left(&x);
        assert!(op_norm_zero(&(&left - &expect.mat * &x)) < 1e-12);
        let right = b.apply_dense_right(&x);
        assert!(op_norm_zero(&(&right - &x * &expect.mat)) < 1e-12);
    }
}
