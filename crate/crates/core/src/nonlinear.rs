//! The fixed-point construction: the map W -> V + sigma |u_W|^2, its
//! iteration from W_0, solution assembly, the PDE residual check, and
//! regime validation.
//!
//! One iteration solves the linear eigenproblem for the current W (the
//! model stays anchored at V), reads off the periodic wave part from the
//! projection column, and rebuilds the potential from the wave intensity.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{RbError, Result};
use crate::fourier::{Amplitude, FourierSeries, LatticeVector};
use crate::geometry::{
    bloch_norm_sq, chi0_test, chi_q_test, free_eigenvalue, Quasimomentum, ResonanceMode,
    SetParams,
};
use crate::operators::{
    model_projection, Branch, LatticeWindow, ModelOperator, PerturbationOp, TruncatedOperator,
};
use crate::perturbation::{
    projection_column_series, projection_solve, two_wave_deficit, Contour, LeanSolve,
    SeriesOptions,
};

/// Which construction the solve follows: the resonant two-wave one around
/// the block branch, or the non-resonant single-wave one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolveMode {
    Resonant,
    Nonresonant,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Tolerances {
    /// Fixed-point stop, relative to max(||V||_*, |sigma||A|^2).
    pub fp_tol_rel: f64,
    /// Series stopping tolerance (absolute).
    pub series_tol: f64,
    /// Relative PDE residual gate.
    pub residual_tol: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { fp_tol_rel: 1e-12, series_tol: 1e-12, residual_tol: 1e-8 }
    }
}

/// Everything one solve needs. The dimension is carried by `t`, `j`, `q`
/// and the window, which must agree.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProblemContext {
    pub l: u32,
    pub t: Quasimomentum,
    pub j: LatticeVector,
    /// the resonant harmonic; unused in non-resonant mode
    pub q: Option<LatticeVector>,
    pub potential: FourierSeries,
    pub amp: Amplitude,
    pub window_radius: i64,
    #[serde(default = "default_branch")]
    pub branch: Branch,
    pub mode: SolveMode,
    pub set_params: SetParams,
    #[serde(default)]
    pub tolerances: Tolerances,
    /// Support cap for the iterated potential; None means 4 * R_0.
    #[serde(default)]
    pub support_cap: Option<f64>,
    /// Fixed-point iteration cap.
    #[serde(default = "default_m_max")]
    pub m_max: usize,
}

fn default_branch() -> Branch {
    Branch::Plus
}

fn default_m_max() -> usize {
    50
}

impl ProblemContext {
    pub fn dim(&self) -> usize {
        self.t.dim()
    }

    pub fn window(&self) -> Result<LatticeWindow> {
        LatticeWindow::new(self.dim(), self.window_radius)
    }

    /// |P_j(t)|, the solve's energy scale.
    pub fn k(&self) -> f64 {
        bloch_norm_sq(&self.j, &self.t).sqrt()
    }

    pub fn q_required(&self) -> Result<LatticeVector> {
        self.q.ok_or_else(|| {
            RbError::InvalidConfig("resonant mode needs the harmonic q".into())
        })
    }

    /// Effective support cap: 4 R_0 unless overridden.
    pub fn r_w(&self) -> f64 {
        self.support_cap.unwrap_or(4.0 * self.potential.support_radius().max(1.0))
    }

    pub fn series_options(&self) -> SeriesOptions {
        SeriesOptions { tol: self.tolerances.series_tol, ..SeriesOptions::default() }
    }

    pub fn fp_tol_abs(&self) -> f64 {
        let scale = self.potential.star_norm().max(self.amp.sigma_a2().abs());
        self.tolerances.fp_tol_rel * if scale > 0.0 { scale } else { 1.0 }
    }

    /// Dimension bookkeeping plus the set-membership invariant: resonant
    /// contexts must sit in chi_q, non-resonant ones in chi_0.
    pub fn validate_membership(&self) -> Result<()> {
        let n = self.dim();
        if self.j.dim() != n || self.potential.dim() != n {
            return Err(RbError::DimensionMismatch(self.j.dim(), n));
        }
        if !(2 * self.l as usize > n || (self.l == 1 && n == 2)) {
            return Err(RbError::InvalidConfig(format!(
                "need 2l > n or (l = 1, n = 2), got l = {}, n = {n}",
                self.l
            )));
        }
        let k = self.k();
        match self.mode {
            SolveMode::Resonant => {
                let q = self.q_required()?;
                let d = chi_q_test(&self.t, k, &q, &self.set_params)?;
                match d.witness() {
                    Some(w) if w == self.j => Ok(()),
                    Some(w) => Err(RbError::PointRejected {
                        test: "chi_q",
                        reason: format!("witness {w} does not match context j = {}", self.j),
                    }),
                    None => Err(RbError::PointRejected {
                        test: "chi_q",
                        reason: format!("{d:?}"),
                    }),
                }
            }
            SolveMode::Nonresonant => {
                let d = chi0_test(&self.t, k, &self.set_params, self.l)?;
                match d.witness() {
                    Some(w) if w == self.j => Ok(()),
                    Some(w) => Err(RbError::PointRejected {
                        test: "chi_0",
                        reason: format!("witness {w} does not match context j = {}", self.j),
                    }),
                    None => Err(RbError::PointRejected {
                        test: "chi_0",
                        reason: format!("{d:?}"),
                    }),
                }
            }
        }
    }
}

/// One evaluation of the map: the refreshed potential plus everything the
/// iteration wants to record.
pub struct MapOutcome {
    pub w_next: FourierSeries,
    pub lambda: f64,
    pub psi: FourierSeries,
    pub projection: TruncatedOperator,
    pub solve: LeanSolve,
    pub truncated_mass: f64,
}

/// One application of the map M W = V + sigma |u_W|^2 (resonant) or of
/// its non-resonant variant with the mean of W split off and added back
/// to the eigenvalue.
pub fn apply_map(w: &FourierSeries, ctx: &ProblemContext) -> Result<MapOutcome> {
    let window = ctx.window()?;
    let opts = ctx.series_options();
    let (lambda, solve) = match ctx.mode {
        SolveMode::Resonant => {
            let q = ctx.q_required()?;
            let (model, block, b) = crate::perturbation::resonant_ingredients(
                &ctx.t,
                &ctx.j,
                &q,
                w,
                &ctx.potential,
                &window,
                ctx.l,
            )?;
            let contour = Contour::resonant(&block, ctx.branch, &ctx.set_params)?;
            let lean =
                projection_solve(&model, block.eigenvalue(ctx.branch), &b, &contour, &opts)?;
            (lean.lambda, lean)
        }
        SolveMode::Nonresonant => {
            let (w_tilde, mean) = w.mean_split();
            if mean.im.abs() > 1e-9 * (1.0 + mean.norm()) {
                return Err(RbError::InvalidConfig(format!(
                    "potential mean {mean} is not real"
                )));
            }
            let model = ModelOperator::free(&ctx.t, &ctx.j, &window, ctx.l)?;
            let contour =
                Contour::nonresonant(ctx.k(), ctx.l, ctx.dim(), ctx.set_params.delta)?;
            let b = PerturbationOp::from_series(&w_tilde, window);
            let base = free_eigenvalue(&ctx.j, &ctx.t, ctx.l) + mean.re;
            let lean = projection_solve(&model, base, &b, &contour, &opts)?;
            (lean.lambda, lean)
        }
    };
    let psi = projection_column_series(&solve.projection, &ctx.j, ctx.amp.a())?;
    let intensity = psi.modulus_squared().scale(Complex64::new(ctx.amp.sigma, 0.0));
    let (w_capped, radius_mass) = ctx.potential.add(&intensity)?.truncate_radius(ctx.r_w());
    // numerical truncation keeps the perturbation operator sparse; the
    // dropped mass is reported together with the support-cap mass
    let (w_next, tol_mass) =
        w_capped.truncate_tol(crate::fourier::TRUNCATE_REL_TOL * w_capped.star_norm());
    let truncated_mass = radius_mass + tol_mass;
    Ok(MapOutcome { w_next, lambda, psi, projection: solve.projection.clone(), solve, truncated_mass })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IterationStep {
    pub m: usize,
    /// ||W_m - W_{m-1}||_*
    pub d_w: f64,
    /// ||E_m - E_{m-1}||_0 (E_{-1} is the model projection)
    pub d_e: f64,
    pub truncated_mass: f64,
    /// d_w ratio against the previous step
    pub ratio: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct IterationTrace {
    pub steps: Vec<IterationStep>,
    pub converged: bool,
    pub m_final: usize,
    /// set when the loop stopped for a reason other than the tolerance
    pub abort: Option<String>,
}

impl IterationTrace {
    /// Geometric-mean contraction ratio over the clean steps (both
    /// differences well above the tolerance floor).
    pub fn plateau_ratio(&self, floor: f64) -> Option<f64> {
        let ratios: Vec<f64> = self
            .steps
            .windows(2)
            .filter(|w| w[1].d_w > floor && w[0].d_w > floor)
            .map(|w| w[1].d_w / w[0].d_w)
            .collect();
        if ratios.is_empty() {
            return None;
        }
        let log_mean = ratios.iter().map(|r| r.ln()).sum::<f64>() / ratios.len() as f64;
        Some(log_mean.exp())
    }
}

pub struct FixedPointOutcome {
    pub w: FourierSeries,
    pub trace: IterationTrace,
    /// the map outcome at the final W, reused by solution assembly
    pub last: MapOutcome,
}

/// W_0 is V in the resonant construction and V + sigma |A|^2 in the
/// non-resonant one; then W_m = map(W_{m-1}) until the Wiener-norm
/// difference drops below the tolerance.
///
/// Non-contraction (three consecutive ratio increases) aborts the loop;
/// the trace records the abort reason and `converged` stays false so no
/// caller can mistake the result for a fixed point.
pub fn iterate_fixed_point(ctx: &ProblemContext) -> Result<FixedPointOutcome> {
    let fp_tol = ctx.fp_tol_abs();
    let mut w = match ctx.mode {
        SolveMode::Resonant => ctx.potential.clone(),
        SolveMode::Nonresonant => {
            let mut w0 = ctx.potential.clone();
            w0.add_to(
                LatticeVector::zero(ctx.dim()),
                Complex64::new(ctx.amp.sigma_a2(), 0.0),
            );
            w0
        }
    };
    let window = ctx.window()?;
    let mut e_prev = match ctx.mode {
        SolveMode::Resonant => {
            let q = ctx.q_required()?;
            let (_, block, _) = crate::perturbation::resonant_ingredients(
                &ctx.t,
                &ctx.j,
                &q,
                &w,
                &ctx.potential,
                &window,
                ctx.l,
            )?;
            model_projection(&block, ctx.branch, &window)?
        }
        SolveMode::Nonresonant => {
            let mut e = TruncatedOperator::zeros(window);
            let idx = window
                .index(&ctx.j)
                .ok_or_else(|| RbError::OutsideWindow(format!("{}", ctx.j), window.radius()))?;
            e.mat[(idx, idx)] = Complex64::new(1.0, 0.0);
            e
        }
    };

    let mut trace = IterationTrace::default();
    let mut last: Option<MapOutcome> = None;
    let mut increases = 0usize;
    for m in 1..=ctx.m_max {
        let outcome = apply_map(&w, ctx)?;
        let d_w = outcome.w_next.sub(&w)?.star_norm();
        let d_e = outcome.projection.sub(&e_prev).op_norm_zero();
        let ratio = trace
            .steps
            .last()
            .map(|prev| if prev.d_w > 0.0 { d_w / prev.d_w } else { 0.0 });
        trace.steps.push(IterationStep {
            m,
            d_w,
            d_e,
            truncated_mass: outcome.truncated_mass,
            ratio,
        });
        trace.m_final = m;

        if let Some(r) = ratio {
            if r > 1.0 && d_w > fp_tol {
                increases += 1;
                if increases >= 3 {
                    trace.abort = Some(format!(
                        "non-contraction: ratios increased 3 times in a row at m = {m}"
                    ));
                    w = outcome.w_next.clone();
                    return Ok(FixedPointOutcome { w, trace, last: outcome });
                }
            } else {
                increases = 0;
            }
        }

        w = outcome.w_next.clone();
        e_prev = outcome.projection.clone();
        let done = d_w <= fp_tol;
        last = Some(outcome);
        if done {
            trace.converged = true;
            break;
        }
    }
    let last = last.expect("m_max >= 1");
    if !trace.converged && trace.abort.is_none() {
        trace.abort = Some(format!(
            "tolerance {fp_tol:.3e} not reached within {} iterations",
            ctx.m_max
        ));
    }
    Ok(FixedPointOutcome { w, trace, last })
}

/// A converged solve: the eigenvalue, the periodic wave part (amplitude
/// included), the effective potential, and the verification numbers.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Solution {
    pub lambda: f64,
    pub psi: FourierSeries,
    pub w: FourierSeries,
    pub trace: IterationTrace,
    /// relative PDE residual
    pub residual: f64,
    /// two-wave deficit; None in non-resonant mode
    pub deficit: Option<f64>,
    /// ||map(W) - W||_* at the returned W
    pub fp_defect: f64,
    pub diagnostics: SolveDiagnostics,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub r_used: usize,
    pub terms: Vec<f64>,
    pub converged: bool,
    pub rayleigh_gap: f64,
    pub trace_defect: f64,
    pub herm_defect: f64,
    pub idem_defect: f64,
    pub nodes_used: usize,
    /// |lambda_series - lambda_oracle| when an oracle run was requested
    pub oracle_gap: Option<f64>,
}

/// Final assembly at a converged W: one more map evaluation gives the
/// eigenpair and the fixed-point defect, then the residual and deficit
/// are computed from scratch.
pub fn assemble_solution(outcome: &FixedPointOutcome, ctx: &ProblemContext) -> Result<Solution> {
    if !outcome.trace.converged {
        return Err(RbError::FixedPointExhausted {
            m_max: ctx.m_max,
            delta: outcome.trace.steps.last().map_or(f64::NAN, |s| s.d_w),
        });
    }
    let final_map = apply_map(&outcome.w, ctx)?;
    let fp_defect = final_map.w_next.sub(&outcome.w)?.star_norm();
    let lambda = final_map.lambda;
    let psi = final_map.psi.clone();

    let deficit = match ctx.mode {
        SolveMode::Resonant => {
            let q = ctx.q_required()?;
            let window = ctx.window()?;
            let (_, block, _) = crate::perturbation::resonant_ingredients(
                &ctx.t,
                &ctx.j,
                &q,
                &outcome.w,
                &ctx.potential,
                &window,
                ctx.l,
            )?;
            Some(two_wave_deficit(
                &final_map.projection,
                &block,
                ctx.branch,
                ctx.amp.a(),
            )?)
        }
        SolveMode::Nonresonant => None,
    };

    let residual = residual(lambda, &psi, ctx)?;
    Ok(Solution {
        lambda,
        psi,
        w: outcome.w.clone(),
        trace: outcome.trace.clone(),
        residual,
        deficit,
        fp_defect,
        diagnostics: SolveDiagnostics {
            r_used: final_map.solve.r_used,
            terms: final_map.solve.lambda_terms.clone(),
            converged: final_map.solve.converged,
            rayleigh_gap: final_map.solve.rayleigh_gap,
            trace_defect: final_map.solve.trace_defect,
            herm_defect: final_map.solve.herm_defect,
            idem_defect: final_map.solve.idem_defect,
            nodes_used: final_map.solve.nodes_used,
            oracle_gap: None,
        },
    })
}

/// Relative residual of the PDE for u = psi e^{i<P_j(t), x>}, evaluated
/// exactly in coefficient space: the polyharmonic term acts diagonally as
/// |h + j + t|^{2l} on the shifted harmonics, the potential and cubic
/// terms are exact convolutions, and norms are L^2 by Parseval.
pub fn residual(lambda: f64, psi: &FourierSeries, ctx: &ProblemContext) -> Result<f64> {
    if psi.is_empty() {
        return Err(RbError::InvalidConfig("residual of an empty wave".into()));
    }
    let mut rho = FourierSeries::new(ctx.dim())?;
    for (h, c) in psi.iter() {
        let shifted = bloch_norm_sq(&h.add(&ctx.j), &ctx.t).powi(ctx.l as i32);
        rho.add_to(*h, Complex64::new(shifted - lambda, 0.0) * c);
    }
    let vu = ctx.potential.multiply(psi)?;
    let nl = psi
        .modulus_squared()
        .multiply(psi)?
        .scale(Complex64::new(ctx.amp.sigma, 0.0));
    let rho = rho.add(&vu)?.add(&nl)?;

    let l2 = |f: &FourierSeries| -> f64 {
        f.iter().map(|(_, c)| c.norm_sqr()).sum::<f64>().sqrt()
    };
    Ok(l2(&rho) / (lambda.abs().max(f64::MIN_POSITIVE) * l2(psi)))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegimeCheck {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegimeReport {
    pub checks: Vec<RegimeCheck>,
    pub all_pass: bool,
}

impl RegimeReport {
    pub fn failed(&self) -> Vec<&RegimeCheck> {
        self.checks.iter().filter(|c| !c.pass).collect()
    }
}

fn strict_less(name: &str, lhs: f64, rhs: f64) -> RegimeCheck {
    RegimeCheck { name: name.into(), lhs, rhs, pass: lhs < rhs }
}

fn strict_greater(name: &str, lhs: f64, rhs: f64) -> RegimeCheck {
    RegimeCheck { name: name.into(), lhs, rhs, pass: lhs > rhs }
}

/// Evaluate every printed regime inequality for the active mode, both
/// sides numeric, report-only.
pub fn validate_regime(ctx: &ProblemContext) -> RegimeReport {
    let mut checks = Vec::new();
    let n = ctx.dim();
    let l = ctx.l;
    let k = ctx.k();
    let sa2 = ctx.amp.sigma_a2().abs();
    match ctx.set_params.mode {
        ResonanceMode::Poly => {
            let two_l_minus_n = (2 * l as i64 - n as i64) as f64;
            checks.push(strict_less(
                "9 delta < 2l - n",
                9.0 * ctx.set_params.delta,
                two_l_minus_n,
            ));
            checks.push(strict_greater("delta > 0", ctx.set_params.delta, 0.0));
            let gamma1 = 0.5 * two_l_minus_n - 4.0 * ctx.set_params.delta;
            let gamma2 = ctx.set_params.gamma2.unwrap_or(gamma1 / (2.0 * l as f64));
            checks.push(strict_less(
                "|sigma||A|^2 < k^{-2l gamma2}",
                sa2,
                k.powf(-2.0 * l as f64 * gamma2),
            ));
        }
        ResonanceMode::Gpe2d => {
            let eps = ctx.set_params.epsilon;
            checks.push(strict_less("epsilon < 1", eps, 1.0));
            checks.push(strict_greater("epsilon > 0", eps, 0.0));
            checks.push(strict_less(
                "||V||_* < epsilon^9",
                ctx.potential.star_norm(),
                eps.powi(9),
            ));
            if let Some(q) = ctx.q {
                checks.push(strict_greater(
                    "|v_q| > epsilon^10",
                    ctx.potential.coeff(&q).norm(),
                    eps.powi(10),
                ));
            }
            checks.push(strict_less("|sigma||A|^2 < epsilon^11", sa2, eps.powi(11)));
        }
    }
    let ln_ok = 2 * l as usize > n || (l == 1 && n == 2);
    checks.push(RegimeCheck {
        name: "2l > n or (l = 1, n = 2)".into(),
        lhs: (2 * l) as f64,
        rhs: n as f64,
        pass: ln_ok,
    });
    let all_pass = checks.iter().all(|c| c.pass);
    RegimeReport { checks, all_pass }
}
