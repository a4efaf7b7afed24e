//! Quasimomentum geometry: the folding map onto the dual cell, the von
//! Laue condition, membership tests for the non-resonant set chi_0 and the
//! resonant sets chi_q, and seeded samplers on the isoenergetic sphere.

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RbError, Result};
use crate::fourier::LatticeVector;

/// A point t of the dual elementary cell K = [0,1)^n. Parameterizes the
/// Bloch fiber operator H(t).
#[derive(Clone, Copy, PartialEq)]
pub struct Quasimomentum {
    dim: u8,
    t: [f64; 3],
}

impl Serialize for Quasimomentum {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        self.components().serialize(ser)
    }
}

impl<'de> Deserialize<'de> for Quasimomentum {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<f64>::deserialize(de)?;
        Quasimomentum::new(&v).map_err(serde::de::Error::custom)
    }
}

impl Quasimomentum {
    pub fn new(components: &[f64]) -> Result<Self> {
        let dim = components.len();
        if dim != 2 && dim != 3 {
            return Err(RbError::UnsupportedDimension(dim));
        }
        for &x in components {
            if !(0.0..1.0).contains(&x) {
                return Err(RbError::InvalidConfig(format!(
                    "quasimomentum component {x} outside [0,1)"
                )));
            }
        }
        let mut t = [0.0; 3];
        t[..dim].copy_from_slice(components);
        Ok(Self { dim: dim as u8, t })
    }

    pub fn of2(a: f64, b: f64) -> Result<Self> {
        Self::new(&[a, b])
    }

    pub fn dim(&self) -> usize {
        self.dim as usize
    }

    pub fn components(&self) -> &[f64] {
        &self.t[..self.dim as usize]
    }
}

impl std::fmt::Debug for Quasimomentum {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "t{:?}", self.components())
    }
}

/// Which regime the resonant-set conditions use: the polyharmonic bounds
/// in powers of k, or the two-dimensional Gross-Pitaevskii bounds in
/// powers of epsilon.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResonanceMode {
    Poly,
    Gpe2d,
}

/// Parameters of the non-resonant / resonant set conditions.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SetParams {
    /// Exponent delta in the polyharmonic bounds.
    #[serde(default)]
    pub delta: f64,
    /// The free small parameter of the 2D GPE regime.
    #[serde(default)]
    pub epsilon: f64,
    /// Lattice scan bound M: certification scans all |i|_inf <= M.
    pub window_radius: i64,
    pub mode: ResonanceMode,
    /// Constant prefactor applied to the separation bounds. The printed
    /// constants are asymptotic; 1.0 takes them literally.
    #[serde(default = "default_gap_prefactor")]
    pub gap_prefactor: f64,
    /// Relative tolerance for the witness condition |P_j(t)| = k.
    #[serde(default = "default_witness_tol")]
    pub witness_rel_tol: f64,
    /// Exponent gamma_2 of the amplitude bound |sigma||A|^2 < k^{-2l gamma_2}
    /// in the polyharmonic regime. None picks gamma_1/(2l), which balances
    /// the two contraction exponents.
    #[serde(default)]
    pub gamma2: Option<f64>,
}

fn default_gap_prefactor() -> f64 {
    1.0
}

fn default_witness_tol() -> f64 {
    1e-9
}

impl SetParams {
    pub fn poly(delta: f64, window_radius: i64) -> Self {
        Self {
            delta,
            epsilon: 0.0,
            window_radius,
            mode: ResonanceMode::Poly,
            gap_prefactor: 1.0,
            witness_rel_tol: 1e-9,
            gamma2: None,
        }
    }

    pub fn gpe2d(epsilon: f64, window_radius: i64) -> Self {
        Self {
            delta: 0.0,
            epsilon,
            window_radius,
            mode: ResonanceMode::Gpe2d,
            gap_prefactor: 1.0,
            witness_rel_tol: 1e-9,
            gamma2: None,
        }
    }

    /// Hypothesis check: 0 < 9 delta < 2l - n for the poly mode,
    /// 0 < epsilon < 1 for the 2D mode.
    pub fn hypothesis_ok(&self, l: u32, n: usize) -> bool {
        match self.mode {
            ResonanceMode::Poly => {
                self.delta > 0.0 && 9.0 * self.delta < (2 * l as i64 - n as i64) as f64
            }
            ResonanceMode::Gpe2d => self.epsilon > 0.0 && self.epsilon < 1.0,
        }
    }

    /// Near-degeneracy bound of resonant condition 2, in p^2 units.
    pub fn chi_q_closeness_bound(&self, k: f64, n: usize) -> f64 {
        match self.mode {
            ResonanceMode::Poly => self.gap_prefactor * k.powf(-(n as f64) + 2.0 - self.delta),
            ResonanceMode::Gpe2d => self.epsilon,
        }
    }

    /// Separation bound of resonant condition 3, in p^2 units.
    pub fn chi_q_separation_bound(&self, k: f64, n: usize) -> f64 {
        match self.mode {
            ResonanceMode::Poly => {
                self.gap_prefactor * 2.0 * k.powf(-(n as f64) + 2.0 - 6.0 * self.delta)
            }
            ResonanceMode::Gpe2d => 2.0 * self.epsilon.powi(6),
        }
    }

    /// Width of the spherical layer S_q that the sampler draws from.
    pub fn layer_bound(&self, k: f64, n: usize) -> f64 {
        match self.mode {
            ResonanceMode::Poly => 4.0 * k.powf(-(n as f64) + 2.0 - self.delta),
            ResonanceMode::Gpe2d => self.epsilon,
        }
    }

    /// Gap bound of the non-resonant condition, in p^{2l} units.
    pub fn chi0_gap_bound(&self, k: f64, l: u32, n: usize) -> f64 {
        self.gap_prefactor * k.powf((2 * l as i64 - n as i64) as f64 - self.delta)
    }
}

/// P_j(t) = j + t componentwise.
pub fn bloch_vector(j: &LatticeVector, t: &Quasimomentum) -> Vec<f64> {
    debug_assert_eq!(j.dim(), t.dim());
    j.components()
        .iter()
        .zip(t.components())
        .map(|(&a, &b)| a as f64 + b)
        .collect()
}

pub fn bloch_norm_sq(j: &LatticeVector, t: &Quasimomentum) -> f64 {
    bloch_vector(j, t).iter().map(|x| x * x).sum()
}

/// |P_j(t)|^{2l}, the free eigenvalue p_j^{2l}(t).
pub fn free_eigenvalue(j: &LatticeVector, t: &Quasimomentum, l: u32) -> f64 {
    bloch_norm_sq(j, t).powi(l as i32)
}

/// Unique decomposition x = j + t with t in [0,1)^n. Inverse of
/// `bloch_vector`, exactly.
pub fn fold_to_cell(x: &[f64]) -> Result<(LatticeVector, Quasimomentum)> {
    let dim = x.len();
    if dim != 2 && dim != 3 {
        return Err(RbError::UnsupportedDimension(dim));
    }
    let mut j = [0i64; 3];
    let mut t = [0.0f64; 3];
    for (i, &xi) in x.iter().enumerate() {
        let f = xi.floor();
        j[i] = f as i64;
        let mut frac = xi - f;
        // floating fold can land exactly on 1.0 for xi just below an integer
        if frac >= 1.0 {
            j[i] += 1;
            frac = 0.0;
        }
        t[i] = frac;
    }
    Ok((
        LatticeVector::new(&j[..dim])?,
        Quasimomentum::new(&t[..dim])?,
    ))
}

/// Von Laue defect |P_j(t)|^2 - |P_{j-q}(t)|^2 = 2<q, j+t> - |q|^2.
/// Zero exactly on the von Laue plane for q.
pub fn von_laue_defect(j: &LatticeVector, q: &LatticeVector, t: &Quasimomentum) -> Result<f64> {
    if q.is_zero() {
        return Err(RbError::ZeroHarmonic);
    }
    let p = bloch_vector(j, t);
    let qd: f64 = q
        .components()
        .iter()
        .zip(&p)
        .map(|(&qi, &pi)| qi as f64 * pi)
        .sum();
    Ok(2.0 * qd - q.norm_sq() as f64)
}

/// Outcome of a set-membership test, carrying enough context to log or
/// write to the sampler CSV.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Decision {
    Accept {
        j: Vec<i64>,
        /// chi0: p_j^{2l} - k^{2l}; chi_q: the von Laue defect in p^2.
        defect: f64,
        /// smallest certified separation from the other levels
        min_gap: f64,
        /// several indices matched the witness tolerance (boundary case)
        witness_tie: bool,
    },
    Reject {
        reason: RejectReason,
    },
}

impl Decision {
    pub fn accepted(&self) -> bool {
        matches!(self, Decision::Accept { .. })
    }

    pub fn witness(&self) -> Option<LatticeVector> {
        match self {
            Decision::Accept { j, .. } => LatticeVector::new(j).ok(),
            Decision::Reject { .. } => None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum RejectReason {
    /// no j with |P_j(t)| = k within tolerance
    NoWitness,
    /// chi0 condition 2: another level within the gap bound
    GapViolated { other: Vec<i64>, gap: f64, bound: f64 },
    /// chi_q condition 2: the (j, j-q) pair is not nearly degenerate
    PairNotDegenerate { defect: f64, bound: f64 },
    /// chi_q condition 3: a third level too close
    ThirdLevelClose { other: Vec<i64>, gap: f64, bound: f64 },
}

impl std::fmt::Display for RejectReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RejectReason::NoWitness => write!(f, "no_witness"),
            RejectReason::GapViolated { other, gap, bound } => {
                write!(f, "gap_violated(other={other:?}, gap={gap:.3e}, bound={bound:.3e})")
            }
            RejectReason::PairNotDegenerate { defect, bound } => {
                write!(f, "pair_not_degenerate(defect={defect:.3e}, bound={bound:.3e})")
            }
            RejectReason::ThirdLevelClose { other, gap, bound } => {
                write!(f, "third_level_close(other={other:?}, gap={gap:.3e}, bound={bound:.3e})")
            }
        }
    }
}

fn window_points(dim: usize, m: i64) -> Vec<LatticeVector> {
    let mut out = Vec::new();
    match dim {
        2 => {
            for a in -m..=m {
                for b in -m..=m {
                    out.push(LatticeVector::of2(a, b));
                }
            }
        }
        3 => {
            for a in -m..=m {
                for b in -m..=m {
                    for c in -m..=m {
                        out.push(LatticeVector::of3(a, b, c));
                    }
                }
            }
        }
        _ => unreachable!(),
    }
    out
}

/// All indices whose |P_i(t)| matches k within the relative witness
/// tolerance, in lexicographic order.
fn witnesses(t: &Quasimomentum, k: f64, m: i64, tol: f64) -> Vec<LatticeVector> {
    window_points(t.dim(), m)
        .into_iter()
        .filter(|i| (bloch_norm_sq(i, t).sqrt() - k).abs() <= tol * k)
        .collect()
}

/// Non-resonant membership: a unique witness p_j(t) = k and every other
/// free level separated from k^{2l} by more than the gap bound.
pub fn chi0_test(t: &Quasimomentum, k: f64, p: &SetParams, l: u32) -> Result<Decision> {
    if k <= 1.0 {
        return Err(RbError::InvalidConfig(format!("k = {k} must exceed 1")));
    }
    if (p.window_radius as f64) < k + 1.0 {
        return Err(RbError::WindowTooSmall { radius: p.window_radius, k });
    }
    let n = t.dim();
    let wits = witnesses(t, k, p.window_radius, p.witness_rel_tol);
    let Some(j) = wits.first().copied() else {
        return Ok(Decision::Reject { reason: RejectReason::NoWitness });
    };
    let witness_tie = wits.len() > 1;
    let bound = p.chi0_gap_bound(k, l, n);
    let pj2l = free_eigenvalue(&j, t, l);
    let mut min_gap = f64::INFINITY;
    let mut argmin = j;
    for i in window_points(n, p.window_radius) {
        if i == j {
            continue;
        }
        let gap = (free_eigenvalue(&i, t, l) - pj2l).abs();
        if gap < min_gap {
            min_gap = gap;
            argmin = i;
        }
    }
    if min_gap <= bound {
        return Ok(Decision::Reject {
            reason: RejectReason::GapViolated {
                other: argmin.components().to_vec(),
                gap: min_gap,
                bound,
            },
        });
    }
    Ok(Decision::Accept {
        j: j.components().to_vec(),
        defect: pj2l - k.powi(2 * l as i32),
        min_gap,
        witness_tie,
    })
}

/// Resonant membership for the harmonic q: a witness p_j(t) = k, the pair
/// (j, j-q) nearly degenerate in p^2, and every other level separated in
/// p^2 by the mode's bound.
pub fn chi_q_test(
    t: &Quasimomentum,
    k: f64,
    q: &LatticeVector,
    p: &SetParams,
) -> Result<Decision> {
    if q.is_zero() {
        return Err(RbError::ZeroHarmonic);
    }
    if k <= 1.0 {
        return Err(RbError::InvalidConfig(format!("k = {k} must exceed 1")));
    }
    // the witness sits within ceil(k) of the origin, its partner j-q
    // another |q| out; levels beyond the window are separated by at least
    // M^2 - k^2, far above any printed bound once M >= k + 1
    if (p.window_radius as f64) < k + 1.0
        || p.window_radius < k.ceil() as i64 + q.cheb()
    {
        return Err(RbError::WindowTooSmall { radius: p.window_radius, k });
    }
    let n = t.dim();
    let wits = witnesses(t, k, p.window_radius, p.witness_rel_tol);
    if wits.is_empty() {
        return Ok(Decision::Reject { reason: RejectReason::NoWitness });
    }
    let witness_tie = wits.len() > 1;
    // among the witnesses (lex order), the resonant one is the witness
    // whose partner j-q is nearly degenerate with it
    let bound2 = p.chi_q_closeness_bound(k, n);
    let mut j = wits[0];
    let mut defect = bloch_norm_sq(&j.sub(q), t) - bloch_norm_sq(&j, t);
    for w in &wits {
        let d = bloch_norm_sq(&w.sub(q), t) - bloch_norm_sq(w, t);
        if d.abs() < bound2 {
            j = *w;
            defect = d;
            break;
        }
    }
    let jq = j.sub(q);
    let pj2 = bloch_norm_sq(&j, t);
    if defect.abs() >= bound2 {
        return Ok(Decision::Reject {
            reason: RejectReason::PairNotDegenerate { defect, bound: bound2 },
        });
    }

    let bound3 = p.chi_q_separation_bound(k, n);
    let mut min_gap = f64::INFINITY;
    let mut argmin = j;
    for i in window_points(n, p.window_radius) {
        if i == j || i == jq {
            continue;
        }
        let gap = (bloch_norm_sq(&i, t) - pj2).abs();
        if gap < min_gap {
            min_gap = gap;
            argmin = i;
        }
    }
    if min_gap <= bound3 {
        return Ok(Decision::Reject {
            reason: RejectReason::ThirdLevelClose {
                other: argmin.components().to_vec(),
                gap: min_gap,
                bound: bound3,
            },
        });
    }
    Ok(Decision::Accept { j: j.components().to_vec(), defect, min_gap, witness_tie })
}

/// A point drawn on the resonant spherical layer, folded to the cell and
/// certified (or not) by `chi_q_test`.
pub type LayerSample = (Quasimomentum, Decision);

/// Draw `count` points uniformly on the layer
/// S_q(k) = { x in S(k) : | |x|^2 - |x-q|^2 | < layer_bound },
/// fold each into the cell, and certify with `chi_q_test`.
/// Deterministic for a fixed seed.
pub fn sample_resonant_layer(
    k: f64,
    q: &LatticeVector,
    p: &SetParams,
    count: usize,
    seed: u64,
) -> Result<Vec<LayerSample>> {
    if count == 0 {
        return Err(RbError::EmptySample);
    }
    if q.is_zero() {
        return Err(RbError::ZeroHarmonic);
    }
    let n = q.dim();
    let bound = p.layer_bound(k, n);
    if bound <= 0.0 {
        return Err(RbError::EmptyLayer { k, bound });
    }
    let qn = q.norm();
    // the defect is 2 |q| u - |q|^2 with u the coordinate along q-hat
    let u_lo = ((qn * qn - bound) / (2.0 * qn)).max(-k);
    let u_hi = ((qn * qn + bound) / (2.0 * qn)).min(k);
    if u_lo >= u_hi {
        return Err(RbError::EmptyLayer { k, bound });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    match n {
        2 => {
            let theta_q = (q.components()[1] as f64).atan2(q.components()[0] as f64);
            // cos(theta - theta_q) ranges over [u_lo/k, u_hi/k]
            let phi_lo = (u_hi / k).clamp(-1.0, 1.0).acos();
            let phi_hi = (u_lo / k).clamp(-1.0, 1.0).acos();
            for _ in 0..count {
                let phi = rng.random_range(phi_lo..=phi_hi);
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let theta = theta_q + sign * phi;
                let x = [k * theta.cos(), k * theta.sin()];
                let (_, t) = fold_to_cell(&x)?;
                let d = chi_q_test(&t, k, q, p)?;
                out.push((t, d));
            }
        }
        3 => {
            // area-uniform band: u uniform along q-hat, azimuth uniform
            let qc = q.components();
            let qhat = [qc[0] as f64 / qn, qc[1] as f64 / qn, qc[2] as f64 / qn];
            let helper = if qhat[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
            let mut e1 = cross(&qhat, &helper);
            let n1 = (e1.iter().map(|x| x * x).sum::<f64>()).sqrt();
            e1.iter_mut().for_each(|x| *x /= n1);
            let e2 = cross(&qhat, &e1);
            for _ in 0..count {
                let u = rng.random_range(u_lo..=u_hi);
                let phi = rng.random_range(0.0..std::f64::consts::TAU);
                let rho = (k * k - u * u).max(0.0).sqrt();
                let mut x = [0.0f64; 3];
                for i in 0..3 {
                    x[i] = u * qhat[i] + rho * (phi.cos() * e1[i] + phi.sin() * e2[i]);
                }
                let (_, t) = fold_to_cell(&x)?;
                let d = chi_q_test(&t, k, q, p)?;
                out.push((t, d));
            }
        }
        _ => return Err(RbError::UnsupportedDimension(n)),
    }
    Ok(out)
}

fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Monte Carlo estimate of the rejected fraction of the layer; the
/// measure lemmas say this decays as k grows.
pub fn measure_fraction(
    k: f64,
    q: &LatticeVector,
    p: &SetParams,
    count: usize,
    seed: u64,
) -> Result<f64> {
    let samples = sample_resonant_layer(k, q, p, count, seed)?;
    let rejected = samples.iter().filter(|(_, d)| !d.accepted()).count();
    Ok(rejected as f64 / count as f64)
}

/// First certified point on the layer, with its witness. Draws in batches
/// until one accepts; used by sweep drivers to seed solves.
pub fn find_resonant_point(
    k: f64,
    q: &LatticeVector,
    p: &SetParams,
    seed: u64,
    max_draws: usize,
) -> Result<(Quasimomentum, LatticeVector)> {
    let samples = sample_resonant_layer(k, q, p, max_draws, seed)?;
    for (t, d) in samples {
        if let Some(j) = d.witness() {
            return Ok((t, j));
        }
    }
    Err(RbError::PointRejected {
        test: "chi_q",
        reason: format!("no accepted point in {max_draws} draws at k = {k}"),
    })
}

/// A certified point exactly on the von Laue plane for q (zero defect,
/// the deepest resonance), found by intersecting the plane with spheres
/// of slowly increasing radius near `k_target`. Two-dimensional only:
/// the intersection is a point pair, checked in a deterministic order.
/// Returns (k, t, witness).
pub fn find_plane_point(
    k_target: f64,
    q: &LatticeVector,
    p: &SetParams,
    max_tries: usize,
) -> Result<(f64, Quasimomentum, LatticeVector)> {
    if q.dim() != 2 {
        return Err(RbError::UnsupportedDimension(q.dim()));
    }
    if q.is_zero() {
        return Err(RbError::ZeroHarmonic);
    }
    let qn = q.norm();
    let qc = q.components();
    let q_unit = [qc[0] as f64 / qn, qc[1] as f64 / qn];
    let perp = [-q_unit[1], q_unit[0]];
    // the stride is deliberately non-commensurate with the lattice, so
    // consecutive tries land on unrelated arcs
    for step in 0..max_tries {
        let k = k_target + 0.0137 * step as f64;
        if k <= qn / 2.0 {
            continue;
        }
        let h = (k * k - qn * qn / 4.0).sqrt();
        for sign in [1.0, -1.0] {
            let x = [
                0.5 * qn * q_unit[0] + sign * h * perp[0],
                0.5 * qn * q_unit[1] + sign * h * perp[1],
            ];
            let (_, t) = fold_to_cell(&x)?;
            let mut params = *p;
            params.window_radius = params.window_radius.max(k.ceil() as i64 + q.cheb() + 1);
            let d = chi_q_test(&t, k, q, &params)?;
            if let Some(j) = d.witness() {
                return Ok((k, t, j));
            }
        }
    }
    Err(RbError::PointRejected {
        test: "chi_q",
        reason: format!("no certified plane point within {max_tries} tries of k = {k_target}"),
    })
}

/// Complex-free helper used by tests to keep oracle arithmetic separate.
pub fn c64(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}
