//! Acceptance suite: one test per criterion, each printing a pass line
//! with the measured numbers. Run with
//!
//!   cargo test -p rb-core --test acceptance -- --nocapture
//!
//! Tolerances are pinned here, not read from configuration.

use std::time::Instant;

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rb_core::error::RbError;
use rb_core::experiments::{
    model_curve_deviation, model_lambda_at, run_sweep, trace_isoenergetic, SweepFamily,
    SweepSpec, TraceSolver, TraceSpec,
};
use rb_core::fourier::{Amplitude, FourierSeries, LatticeVector};
use rb_core::geometry::{
    free_eigenvalue, sample_resonant_layer, Quasimomentum, SetParams,
};
use rb_core::nonlinear::{
    assemble_solution, iterate_fixed_point, validate_regime, ProblemContext, SolveMode,
    Tolerances,
};
use rb_core::operators::{model_projection, Branch, LatticeWindow, PerturbationOp};
use rb_core::perturbation::{
    direct_oracle, projection_solve, resonant_ingredients, resonant_series, series_full,
    two_wave_deficit, Contour, Selector, SeriesOptions,
};

fn c64(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

fn gpe_context(k_target: f64, window_pad: i64, seed: u64) -> ProblemContext {
    let eps = 0.45f64;
    let q = LatticeVector::of2(2, 0);
    let params = SetParams::gpe2d(eps, k_target.ceil() as i64 + 3);
    let samples = sample_resonant_layer(k_target, &q, &params, 500, seed).unwrap();
    let (t, j) = samples
        .iter()
        .find_map(|(t, d)| d.witness().map(|j| (*t, j)))
        .expect("no accepted GPE point");
    ProblemContext {
        l: 1,
        t,
        j,
        q: Some(q),
        potential: FourierSeries::cosine(q, 3.6e-4),
        amp: Amplitude::new(c64(0.005477, 0.0), 1.0),
        window_radius: k_target.ceil() as i64 + window_pad,
        branch: Branch::Plus,
        mode: SolveMode::Resonant,
        set_params: params,
        tolerances: Tolerances::default(),
        support_cap: None,
        m_max: 50,
    }
}

/// Criterion 1: exact cases.
/// V = 0, sigma != 0, non-resonant: lambda = k^{2l} + sigma |A|^2 and
/// residual <= 1e-13. Zero-perturbation resonant control: lambda equals
/// a + b to 1e-12 with deficit 0. Both under one second.
#[test]
fn criterion_1_exact_cases() {
    let start = Instant::now();

    // (a) free nonlinear plane wave
    let sigma = 0.7;
    let a = c64(0.3, -0.2);
    let ctx = ProblemContext {
        l: 2,
        t: Quasimomentum::of2(0.31, 0.27).unwrap(),
        j: LatticeVector::of2(2, 1),
        q: None,
        potential: FourierSeries::new(2).unwrap(),
        amp: Amplitude::new(a, sigma),
        window_radius: 5,
        branch: Branch::Plus,
        mode: SolveMode::Nonresonant,
        set_params: SetParams::poly(0.2, 5),
        tolerances: Tolerances::default(),
        support_cap: None,
        m_max: 50,
    };
    let out = iterate_fixed_point(&ctx).unwrap();
    let sol = assemble_solution(&out, &ctx).unwrap();
    let expect = free_eigenvalue(&ctx.j, &ctx.t, ctx.l) + sigma * a.norm_sqr();
    let lambda_err = (sol.lambda - expect).abs();
    assert!(lambda_err <= 1e-12 * expect, "lambda off by {lambda_err}");
    assert!(sol.residual <= 1e-13, "residual {}", sol.residual);

    // (b) zero perturbation of the resonant model
    let t = Quasimomentum::of2(0.0, 0.51).unwrap();
    let j = LatticeVector::of2(1, 2);
    let q = LatticeVector::of2(2, 0);
    let v = FourierSeries::cosine(q, 0.02);
    let w = LatticeWindow::new(2, 4).unwrap();
    let (model, block, _) = resonant_ingredients(&t, &j, &q, &v, &v, &w, 2).unwrap();
    let b0 = PerturbationOp::zero(w);
    let params = SetParams::poly(0.2, 4);
    let contour = Contour::resonant(&block, Branch::Plus, &params).unwrap();
    let base = model_projection(&block, Branch::Plus, &w).unwrap();
    let opts = SeriesOptions::default();
    let (lam, proj) = series_full(&model, block.lambda_plus, &base, &b0, &contour, &opts).unwrap();
    let lam_err = (lam.value - (block.a + block.b)).abs();
    assert!(lam_err <= 1e-12, "model control lambda off by {lam_err}");
    let deficit = two_wave_deficit(&proj.value, &block, Branch::Plus, c64(0.4, 0.1)).unwrap();
    assert!(deficit <= 1e-12, "model control deficit {deficit}");

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "criterion 1 took {elapsed:?}");
    println!(
        "ACCEPTANCE 1 PASS: free-wave lambda error {lambda_err:.2e}, residual {:.2e}; \
         model control lambda error {lam_err:.2e}, deficit {deficit:.2e}; {elapsed:?}",
        sol.residual
    );
}

/// Criterion 2: series-oracle equivalence on >= 50 randomized linear
/// resonant instances (n = 2, l = 2, M <= 12, ||V||_* <= 0.05,
/// |v_q| >= 0.01): |lambda_series - lambda_oracle| <= 1e-8 and
/// ||E_series - E_oracle||_0 <= 1e-7, oracle eigenvalue unique in its
/// interval. Under one minute.
#[test]
fn criterion_2_series_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20240809);
    let q = LatticeVector::of2(2, 0);
    let l = 2u32;
    let delta = 0.2;
    let mut done = 0usize;
    let mut max_lambda_gap = 0.0f64;
    let mut max_proj_gap = 0.0f64;
    let mut full_checked = 0usize;
    let mut attempts = 0usize;

    while done < 50 {
        attempts += 1;
        assert!(attempts < 400, "point search stalled after {done} instances");
        // two instances exercise the M = 12 top of the range
        let k_target: f64 = if done < 48 { rng.random_range(5.2..6.9) } else { 8.3 };
        let vq_mod = rng.random_range(0.02..0.022);
        let vq_arg = rng.random_range(0.0..std::f64::consts::TAU);
        let vq = Complex64::from_polar(vq_mod, vq_arg);
        let mut v = FourierSeries::new(2).unwrap();
        v.add_to(q, vq);
        v.add_to(q.neg(), vq.conj());
        for s in [LatticeVector::of2(1, 1), LatticeVector::of2(3, 1)] {
            let m = rng.random_range(0.0005..0.0015);
            let arg = rng.random_range(0.0..std::f64::consts::TAU);
            let coef = Complex64::from_polar(m, arg);
            v.add_to(s, coef);
            v.add_to(s.neg(), coef.conj());
        }
        assert!(v.star_norm() <= 0.05);
        assert!(v.coeff(&q).norm() >= 0.01);

        let mut params = SetParams::poly(delta, k_target.ceil() as i64 + 3);
        params.window_radius = k_target.ceil() as i64 + 3;
        let window = LatticeWindow::new(2, params.window_radius).unwrap();
        assert!(window.radius() <= 12);
        let samples =
            sample_resonant_layer(k_target, &q, &params, 200, rng.random::<u64>()).unwrap();
        let Some((t, j)) = samples.iter().find_map(|(t, d)| d.witness().map(|j| (*t, j)))
        else {
            continue;
        };

        let (model, block, b) = resonant_ingredients(&t, &j, &q, &v, &v, &window, l).unwrap();
        let contour = Contour::resonant(&block, Branch::Plus, &params).unwrap();
        let opts = SeriesOptions::default();
        let lean = projection_solve(&model, block.lambda_plus, &b, &contour, &opts).unwrap();
        assert!(lean.converged, "series did not converge: {:?}", lean.lambda_terms);

        // the paper's interval is lambda_hat +- k^{-delta}; at desk k the
        // other block branch sits closer than that, so the uniqueness
        // interval is tightened by the block half-gap
        let k = rb_core::geometry::bloch_norm_sq(&j, &t).sqrt();
        let half = k.powf(-delta).min(0.9 * block.b);
        let oracle = direct_oracle(
            &t,
            &v,
            &window,
            l,
            Selector::Interval { lo: block.lambda_plus - half, hi: block.lambda_plus + half },
        )
        .unwrap();

        let lambda_gap = (lean.lambda - oracle.lambda).abs();
        let proj_gap = lean.projection.sub(&oracle.projection).op_norm_zero();
        assert!(lambda_gap <= 1e-8, "instance {done}: lambda gap {lambda_gap}");
        assert!(proj_gap <= 1e-7, "instance {done}: projection gap {proj_gap}");
        max_lambda_gap = max_lambda_gap.max(lambda_gap);
        max_proj_gap = max_proj_gap.max(proj_gap);

        // order-resolved reference path on a subset
        if done % 10 == 0 {
            let out = resonant_series(
                &t, &j, &q, &v, &v, &window, l, Branch::Plus, &params, None, &opts,
            )
            .unwrap();
            assert!(out.lambda.converged && out.projection.converged);
            let lg = (out.lambda.value - oracle.lambda).abs();
            let pg = out.projection.value.sub(&oracle.projection).op_norm_zero();
            assert!(lg <= 1e-8, "full path lambda gap {lg}");
            assert!(pg <= 1e-7, "full path projection gap {pg}");
            full_checked += 1;
        }
        done += 1;
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "criterion 2 took {elapsed:?}");
    println!(
        "ACCEPTANCE 2 PASS: 50 instances ({full_checked} order-resolved), \
         max lambda gap {max_lambda_gap:.2e} <= 1e-8, max projection gap {max_proj_gap:.2e} \
         <= 1e-7; {elapsed:?}"
    );
}

/// Criterion 3: every converged resonant GPE solve inside the printed
/// restrictions has relative PDE residual <= 1e-8 and fixed-point defect
/// <= 10 fp_tol, each solve under 10 s at window radius 16.
#[test]
fn criterion_3_gpe_residual_gate() {
    let mut worst_res = 0.0f64;
    let mut worst_defect_rel = 0.0f64;
    let mut worst_time = 0.0f64;
    for (k_target, seed, amp) in [(7.8, 21, 0.005477), (9.4, 5, 0.004), (12.3, 3, 0.005)] {
        let mut ctx = gpe_context(k_target, 16 - k_target.ceil() as i64, seed);
        ctx.window_radius = 16;
        ctx.amp = Amplitude::new(c64(amp, 0.0), 1.0);
        assert!(validate_regime(&ctx).all_pass, "regime must hold");
        ctx.validate_membership().unwrap();

        let t0 = Instant::now();
        let out = iterate_fixed_point(&ctx).unwrap();
        assert!(out.trace.converged, "{:?}", out.trace);
        let sol = assemble_solution(&out, &ctx).unwrap();
        let dt = t0.elapsed().as_secs_f64();
        assert!(dt < 10.0, "solve at k={k_target} took {dt:.2}s");
        assert!(sol.residual <= 1e-8, "residual {}", sol.residual);
        let gate = 10.0 * ctx.fp_tol_abs();
        assert!(sol.fp_defect <= gate, "fp defect {} above {gate}", sol.fp_defect);
        worst_res = worst_res.max(sol.residual);
        worst_defect_rel = worst_defect_rel.max(sol.fp_defect / gate);
        worst_time = worst_time.max(dt);
    }
    println!(
        "ACCEPTANCE 3 PASS: 3 GPE solves at M=16, worst residual {worst_res:.2e} <= 1e-8, \
         worst defect {worst_defect_rel:.2e} of gate, worst time {worst_time:.2}s < 10s"
    );
}

fn poly_sweep_template(sigma_a2: f64) -> ProblemContext {
    let q = LatticeVector::of2(2, 0);
    let v = FourierSeries::from_pairs(
        2,
        [
            (q, c64(0.02, 0.0)),
            (q.neg(), c64(0.02, 0.0)),
            (LatticeVector::of2(1, 1), c64(0.005, 0.0)),
            (LatticeVector::of2(-1, -1), c64(0.005, 0.0)),
        ],
    )
    .unwrap();
    ProblemContext {
        l: 2,
        t: Quasimomentum::of2(0.1, 0.1).unwrap(),
        j: LatticeVector::of2(1, 2),
        q: Some(q),
        potential: v,
        amp: Amplitude::new(c64(sigma_a2.sqrt(), 0.0), 1.0),
        window_radius: 6,
        branch: Branch::Plus,
        mode: SolveMode::Resonant,
        set_params: SetParams::poly(0.2, 6),
        tolerances: Tolerances::default(),
        support_cap: None,
        m_max: 50,
    }
}

/// Criterion 4: the plateau contraction ratio strictly decreases when k
/// doubles across three values at fixed ||V||_* and sigma |A|^2.
#[test]
fn criterion_4_contraction_trend() {
    let spec = SweepSpec {
        family: SweepFamily::Contraction,
        k_values: vec![4.04, 8.08, 16.16],
        template: poly_sweep_template(2e-3),
        seed: 11,
        sample_count: 400,
        grad_step: 1e-5,
    };
    let table = run_sweep(&spec).unwrap();
    let ratios: Vec<f64> = table.rows.iter().filter_map(|r| r.metric).collect();
    assert_eq!(ratios.len(), 3, "rows failed: {:?}", table.rows);
    assert!(table.pass, "plateau ratios not strictly decreasing: {ratios:?}");
    println!("ACCEPTANCE 4 PASS: plateau contraction ratios {ratios:?} strictly decreasing");
}

/// Criterion 5: |grad lambda| within 20% of 2l k^{2l-1} at the largest
/// sweep k, deviation decreasing; the free case is analytic to 1e-6.
#[test]
fn criterion_5_gradient() {
    // free case: analytic gradient of p_j^{2l}
    let f = |x: &[f64]| -> rb_core::error::Result<f64> {
        let (j, t) = rb_core::geometry::fold_to_cell(x)?;
        Ok(free_eigenvalue(&j, &t, 2))
    };
    let x = [2.3, 1.7];
    let g = rb_core::perturbation::gradient_lambda(f, &x, 1e-4, false).unwrap();
    let norm2 = x[0] * x[0] + x[1] * x[1];
    let mut free_dev = 0.0f64;
    for (axis, &xi) in x.iter().enumerate() {
        let expect = 4.0 * norm2 * xi;
        free_dev = free_dev.max(((g.grad[axis] - expect) / expect).abs());
    }
    assert!(free_dev <= 1e-6, "free gradient deviation {free_dev}");

    let spec = SweepSpec {
        family: SweepFamily::Gradient,
        k_values: vec![4.54, 6.52, 9.11],
        template: poly_sweep_template(1e-4),
        seed: 3,
        sample_count: 400,
        grad_step: 1e-5,
    };
    let table = run_sweep(&spec).unwrap();
    let devs: Vec<f64> = table.rows.iter().filter_map(|r| r.metric).collect();
    assert_eq!(devs.len(), 3);
    let last = *devs.last().unwrap();
    assert!(last <= 0.2, "gradient deviation {last} above 20%");
    assert!(table.pass, "deviation did not decrease: {devs:?}");
    println!(
        "ACCEPTANCE 5 PASS: free-case deviation {free_dev:.2e} <= 1e-6; \
         sweep deviations {devs:?}, last <= 20% and decreasing"
    );
}

/// Criterion 6: two-wave deficit decays in k (negative log-log slope over
/// >= 4 points); the zero-perturbation control has deficit 0.
#[test]
fn criterion_6_deficit_decay() {
    // control: exact model has zero deficit (also checked in criterion 1)
    let t = Quasimomentum::of2(0.0, 0.51).unwrap();
    let j = LatticeVector::of2(1, 2);
    let q = LatticeVector::of2(2, 0);
    let v = FourierSeries::cosine(q, 0.02);
    let w = LatticeWindow::new(2, 4).unwrap();
    let (model, block, _) = resonant_ingredients(&t, &j, &q, &v, &v, &w, 2).unwrap();
    let params = SetParams::poly(0.2, 4);
    let contour = Contour::resonant(&block, Branch::Plus, &params).unwrap();
    let lean = projection_solve(
        &model,
        block.lambda_plus,
        &PerturbationOp::zero(w),
        &contour,
        &SeriesOptions::default(),
    )
    .unwrap();
    let control = two_wave_deficit(&lean.projection, &block, Branch::Plus, c64(1.0, 0.0)).unwrap();
    assert!(control <= 1e-12, "control deficit {control}");

    let spec = SweepSpec {
        family: SweepFamily::Deficit,
        k_values: vec![4.54, 6.52, 9.11, 13.03],
        template: poly_sweep_template(1e-4),
        seed: 17,
        sample_count: 400,
        grad_step: 1e-5,
    };
    let table = run_sweep(&spec).unwrap();
    let slope = table.slope.expect("slope over survivors");
    assert!(table.pass && slope < 0.0, "deficit slope {slope}: {:?}", table.rows);
    println!(
        "ACCEPTANCE 6 PASS: control deficit {control:.2e}; sweep slope {slope:.3} < 0 \
         over {:?}",
        table
            .rows
            .iter()
            .filter_map(|r| r.metric)
            .collect::<Vec<_>>()
    );
}
/// Criterion 7: the traced nonlinear level curve hugs the model curve
/// tighter when lambda_0 grows fourfold; the exact-model control stays
/// within 1e-9 of the closed-form level set.
#[test]
fn criterion_7_isoenergetic() {
    // control: a model-only trace sits on the closed-form level set
    let template = {
        let mut t = gpe_context(5.0, 3, 33);
        t.amp = Amplitude::new(c64(0.0, 0.0), 0.0);
        t
    };
    let lambda0_model = model_lambda_at(
        &rb_core::geometry::bloch_vector(&template.j, &template.t),
        &template,
    )
    .unwrap();
    let control_spec = TraceSpec {
        lambda0: lambda0_model,
        template: template.clone(),
        solver: TraceSolver::ModelOnly,
        step: None,
        max_points: 25,
        seed: 77,
        sample_count: 500,
    };
    let mut control = trace_isoenergetic(&control_spec).unwrap();
    let control_dev = model_curve_deviation(&mut control, &template).unwrap();
    assert!(control_dev <= 1e-9, "model control deviation {control_dev}");

    // full GPE curves at lambda0 and 4 lambda0
    let run_at = |k_target: f64, lambda0: f64, seed: u64| -> f64 {
        let ctx = gpe_context(k_target, 3, seed);
        let spec = TraceSpec {
            lambda0,
            template: ctx.clone(),
            solver: TraceSolver::Full,
            step: None,
            max_points: 8,
            seed,
            sample_count: 500,
        };
        let mut curve = trace_isoenergetic(&spec).unwrap();
        assert!(curve.points.len() >= 4, "curve too short: {}", curve.points.len());
        model_curve_deviation(&mut curve, &ctx).unwrap()
    };

    let ctx0 = gpe_context(5.0, 3, 33);
    let out0 = iterate_fixed_point(&ctx0).unwrap();
    let lambda0 = out0.last.lambda;
    let dev1 = run_at(5.0, lambda0, 33);
    let dev2 = run_at(2.0 * 5.0, 4.0 * lambda0, 34);
    assert!(
        dev2 < dev1,
        "deviation did not shrink: {dev1:.3e} at lambda0 vs {dev2:.3e} at 4 lambda0"
    );
    println!(
        "ACCEPTANCE 7 PASS: control deviation {control_dev:.2e} <= 1e-9; \
         max model deviation {dev1:.3e} at lambda0 = {lambda0:.2} vs {dev2:.3e} at 4x"
    );
}
/// Criterion 8: the Monte Carlo rejected fraction of the resonant layer
/// is non-increasing within 3 sigma across a doubling sweep.
#[test]
fn criterion_8_measure_trend() {
    let spec = SweepSpec {
        family: SweepFamily::Measure,
        k_values: vec![8.05, 16.05, 32.03],
        template: poly_sweep_template(0.0),
        seed: 4242,
        sample_count: 800,
        grad_step: 1e-5,
    };
    let table = run_sweep(&spec).unwrap();
    let fracs: Vec<f64> = table.rows.iter().filter_map(|r| r.metric).collect();
    assert!(table.pass, "rejected fraction increased beyond 3 sigma: {fracs:?}");
    println!("ACCEPTANCE 8 PASS: rejected fractions {fracs:?} non-increasing within 3 sigma");
}

/// Criterion 9: identical context and seed give identical serialized
/// solutions, and every produced solution re-verifies from scratch.
/// (The byte-identical file check lives in the CLI tests; this covers
/// the in-process bundle.)
#[test]
fn criterion_9_determinism_roundtrip() {
    let ctx = gpe_context(7.8, 3, 21);
    let run = || {
        let out = iterate_fixed_point(&ctx).unwrap();
        let sol = assemble_solution(&out, &ctx).unwrap();
        serde_json::to_string(&sol).unwrap()
    };
    let first = run();
    let second = run();
    assert_eq!(first, second, "two identical runs serialized differently");

    // round-trip re-verification from the serialized bundle
    let sol: rb_core::nonlinear::Solution = serde_json::from_str(&first).unwrap();
    let res = rb_core::nonlinear::residual(sol.lambda, &sol.psi, &ctx).unwrap();
    assert!(res <= ctx.tolerances.residual_tol, "re-verified residual {res}");
    let remap = rb_core::nonlinear::apply_map(&sol.w, &ctx).unwrap();
    let defect = remap.w_next.sub(&sol.w).unwrap().star_norm();
    assert!(defect <= 10.0 * ctx.fp_tol_abs(), "re-verified defect {defect}");
    println!(
        "ACCEPTANCE 9 PASS: byte-identical bundles ({} bytes); re-verified residual {res:.2e}, \
         defect {defect:.2e}",
        first.len()
    );
}

/// The per-point failure mode of sweeps must be a marked row, not a
/// panic; with too few survivors the sweep reports the documented error.
#[test]
fn sweep_failure_reporting() {
    let mut template = poly_sweep_template(0.0);
    template.q = Some(LatticeVector::of2(9, 9)); // v_q = 0 for this q
    let spec = SweepSpec {
        family: SweepFamily::LambdaGap,
        k_values: vec![5.0, 6.0, 7.0],
        template,
        seed: 1,
        sample_count: 50,
        grad_step: 1e-5,
    };
    match run_sweep(&spec) {
        Err(RbError::SweepTooSmall { got, .. }) => assert_eq!(got, 0),
        other => panic!("expected SweepTooSmall, got {other:?}"),
    }
}
