//! Command-line driver: deterministic runs from a JSON config, results
//! persisted as JSON plus plot-ready CSV.
//!
//! Exit codes: 0 success, 2 invalid config, 3 regime validation failed
//! (pass --force to proceed anyway), 4 non-convergence, 5 verification
//! failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use rb_core::error::RbError;
use rb_core::experiments::{
    model_curve_deviation, run_sweep, trace_isoenergetic, IsoCurve, SweepFamily, SweepSpec,
    SweepTable, TraceSolver, TraceSpec,
};
use rb_core::geometry::sample_resonant_layer;
use rb_core::nonlinear::{
    apply_map, assemble_solution, iterate_fixed_point, residual, validate_regime, IterationTrace,
    ProblemContext, Solution, SolveMode,
};
use rb_core::operators::Branch;
use rb_core::perturbation::projection_column_series;

const CONFIG_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "rb", about = "Resonant Bloch-wave constructor for the periodic nonlinear Schrodinger equation", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BranchArg {
    Plus,
    Minus,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Resonant,
    Nonresonant,
}

#[derive(Parser)]
struct RunArgs {
    /// JSON run configuration
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if missing)
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Proceed even if the regime validation fails
    #[arg(long)]
    force: bool,
    /// Override the block branch
    #[arg(long, value_enum)]
    branch: Option<BranchArg>,
    /// Override the solve mode
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the fixed-point solve and persist the solution bundle
    Solve(RunArgs),
    /// Run a trend sweep over k
    Sweep(RunArgs),
    /// Trace an isoenergetic curve
    Trace(RunArgs),
    /// Draw points on the resonant layer and write the decisions
    Sample(RunArgs),
    /// Re-verify a stored solution bundle from scratch
    Verify {
        /// Directory holding solution.json and resolved_config.json
        path: PathBuf,
    },
}

// --- config schema ----------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SweepConfig {
    family: SweepFamily,
    k_values: Vec<f64>,
    #[serde(default = "default_sample_count")]
    sample_count: usize,
    #[serde(default = "default_grad_step")]
    grad_step: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TraceConfig {
    lambda0: f64,
    #[serde(default = "default_trace_solver")]
    solver: TraceSolver,
    #[serde(default)]
    step: Option<f64>,
    #[serde(default = "default_max_points")]
    max_points: usize,
    #[serde(default = "default_sample_count")]
    sample_count: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SampleConfig {
    k: f64,
    #[serde(default = "default_sample_count")]
    count: usize,
}

fn default_sample_count() -> usize {
    500
}

fn default_grad_step() -> f64 {
    1e-5
}

fn default_max_points() -> usize {
    80
}

fn default_trace_solver() -> TraceSolver {
    TraceSolver::Full
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RunConfig {
    version: u32,
    #[serde(default)]
    seed: u64,
    problem: ProblemContext,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sweep: Option<SweepConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    trace: Option<TraceConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sample: Option<SampleConfig>,
}

fn load_config(args: &RunArgs) -> Result<RunConfig, String> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| format!("cannot read {}: {e}", args.config.display()))?;
    let mut cfg: RunConfig =
        serde_json::from_str(&text).map_err(|e| format!("config parse error: {e}"))?;
    if cfg.version != CONFIG_VERSION {
        return Err(format!(
            "unsupported config version {} (expected {CONFIG_VERSION})",
            cfg.version
        ));
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(branch) = args.branch {
        cfg.problem.branch = match branch {
            BranchArg::Plus => Branch::Plus,
            BranchArg::Minus => Branch::Minus,
        };
    }
    if let Some(mode) = args.mode {
        cfg.problem.mode = match mode {
            ModeArg::Resonant => SolveMode::Resonant,
            ModeArg::Nonresonant => SolveMode::Nonresonant,
        };
    }
    Ok(cfg)
}

// --- atomic output ----------------------------------------------------------

fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), String> {
    let path = dir.join(name);
    let mut text = serde_json::to_string_pretty(value).map_err(|e| e.to_string())?;
    text.push('\n');
    atomic_write(&path, text.as_bytes()).map_err(|e| format!("write {}: {e}", path.display()))
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<(), String> {
    let path = dir.join(name);
    atomic_write(&path, text.as_bytes()).map_err(|e| format!("write {}: {e}", path.display()))
}

fn prepare_out(dir: &Path) -> Result<(), String> {
    fs::create_dir_all(dir).map_err(|e| format!("create {}: {e}", dir.display()))
}

fn trace_csv(trace: &IterationTrace) -> String {
    let mut out = String::from("m,d_w,d_e,ratio,truncated_mass\n");
    for s in &trace.steps {
        let ratio = s.ratio.map_or(String::new(), |r| format!("{r:.17e}"));
        out.push_str(&format!(
            "{},{:.17e},{:.17e},{},{:.17e}\n",
            s.m, s.d_w, s.d_e, ratio, s.truncated_mass
        ));
    }
    out
}

fn sweep_csv(table: &SweepTable) -> String {
    let slope = table.slope.map_or(String::new(), |s| format!("{s:.17e}"));
    let mut out = String::from("k,metric,fit_slope,pass\n");
    for row in &table.rows {
        let metric = row.metric.map_or(String::new(), |m| format!("{m:.17e}"));
        out.push_str(&format!("{:.17e},{},{},{}\n", row.k, metric, slope, table.pass));
    }
    out
}

fn curve_csv(curve: &IsoCurve) -> String {
    let dim = curve.points.first().map_or(2, |p| p.t.dim());
    let mut header = String::from("index");
    for ax in 1..=dim {
        header.push_str(&format!(",t_{ax}"));
    }
    header.push_str(",lambda,model_deviation\n");
    let mut out = header;
    for (i, p) in curve.points.iter().enumerate() {
        out.push_str(&i.to_string());
        for c in p.t.components() {
            out.push_str(&format!(",{c:.17e}"));
        }
        out.push_str(&format!(",{:.17e},{:.17e}\n", p.lambda, p.model_deviation));
    }
    out
}

// --- exit-code plumbing -----------------------------------------------------

const EXIT_CONFIG: u8 = 2;
const EXIT_REGIME: u8 = 3;
const EXIT_NOCONV: u8 = 4;
const EXIT_VERIFY: u8 = 5;

fn fail(code: u8, msg: &str) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn classify(e: &RbError) -> u8 {
    match e {
        RbError::SeriesDiverged { .. }
        | RbError::NeumannDiverged { .. }
        | RbError::NonContraction { .. }
        | RbError::FixedPointExhausted { .. }
        | RbError::CorrectorFailed { .. } => EXIT_NOCONV,
        _ => EXIT_CONFIG,
    }
}

fn init_threads() {
    if let Ok(v) = std::env::var("RB_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
    }
}

fn main() -> ExitCode {
    init_threads();
    let cli = Cli::parse();
    match cli.command {
        Command::Solve(args) => cmd_solve(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Trace(args) => cmd_trace(args),
        Command::Sample(args) => cmd_sample(args),
        Command::Verify { path } => cmd_verify(&path),
    }
}

fn cmd_solve(args: RunArgs) -> ExitCode {
    let cfg = match load_config(&args) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_CONFIG, &e),
    };
    let ctx = &cfg.problem;
    if let Err(e) = ctx.validate_membership() {
        return fail(EXIT_CONFIG, &e.to_string());
    }
    let report = validate_regime(ctx);
    if !report.all_pass {
        for c in report.failed() {
            eprintln!("regime: {} failed ({:.6e} vs {:.6e})", c.name, c.lhs, c.rhs);
        }
        if !args.force {
            return ExitCode::from(EXIT_REGIME);
        }
        eprintln!("--force given; continuing despite regime failures");
    }
    if let Err(e) = prepare_out(&args.out) {
        return fail(EXIT_CONFIG, &e);
    }
    if let Err(e) = write_json(&args.out, "resolved_config.json", &cfg) {
        return fail(EXIT_CONFIG, &e);
    }

    let outcome = match iterate_fixed_point(ctx) {
        Ok(o) => o,
        Err(e) => return fail(classify(&e), &e.to_string()),
    };
    let _ = write_text(&args.out, "trace.csv", &trace_csv(&outcome.trace));
    if !outcome.trace.converged {
        let reason = outcome.trace.abort.as_deref().unwrap_or("not converged");
        return fail(EXIT_NOCONV, reason);
    }
    let solution = match assemble_solution(&outcome, ctx) {
        Ok(s) => s,
        Err(e) => return fail(classify(&e), &e.to_string()),
    };
    if let Err(e) = write_json(&args.out, "solution.json", &solution) {
        return fail(EXIT_CONFIG, &e);
    }
    println!(
        "lambda = {:.12e}  residual = {:.3e}  fp_defect = {:.3e}  iterations = {}",
        solution.lambda, solution.residual, solution.fp_defect, solution.trace.m_final
    );
    if solution.residual <= ctx.tolerances.residual_tol {
        ExitCode::SUCCESS
    } else {
        fail(
            EXIT_NOCONV,
            &format!(
                "residual {:.3e} above tolerance {:.3e}",
                solution.residual, ctx.tolerances.residual_tol
            ),
        )
    }
}

fn cmd_sweep(args: RunArgs) -> ExitCode {
    let cfg = match load_config(&args) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_CONFIG, &e),
    };
    let Some(sc) = cfg.sweep.clone() else {
        return fail(EXIT_CONFIG, "config has no \"sweep\" block");
    };
    if let Err(e) = prepare_out(&args.out) {
        return fail(EXIT_CONFIG, &e);
    }
    if let Err(e) = write_json(&args.out, "resolved_config.json", &cfg) {
        return fail(EXIT_CONFIG, &e);
    }
    let spec = SweepSpec {
        family: sc.family,
        k_values: sc.k_values,
        template: cfg.problem.clone(),
        seed: cfg.seed,
        sample_count: sc.sample_count,
        grad_step: sc.grad_step,
    };
    let table = match run_sweep(&spec) {
        Ok(t) => t,
        Err(e) => return fail(classify(&e), &e.to_string()),
    };
    let _ = write_json(&args.out, "sweep.json", &table);
    let _ = write_text(&args.out, "sweep.csv", &sweep_csv(&table));
    for row in &table.rows {
        if let Some(note) = &row.note {
            eprintln!("k = {}: {note}", row.k);
        }
    }
    println!(
        "family = {:?}  slope = {:?}  pass = {}",
        table.family, table.slope, table.pass
    );
    if table.pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_NOCONV)
    }
}

fn cmd_trace(args: RunArgs) -> ExitCode {
    let cfg = match load_config(&args) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_CONFIG, &e),
    };
    let Some(tc) = cfg.trace.clone() else {
        return fail(EXIT_CONFIG, "config has no \"trace\" block");
    };
    if let Err(e) = prepare_out(&args.out) {
        return fail(EXIT_CONFIG, &e);
    }
    if let Err(e) = write_json(&args.out, "resolved_config.json", &cfg) {
        return fail(EXIT_CONFIG, &e);
    }
    let spec = TraceSpec {
        lambda0: tc.lambda0,
        template: cfg.problem.clone(),
        solver: tc.solver,
        step: tc.step,
        max_points: tc.max_points,
        seed: cfg.seed,
        sample_count: tc.sample_count,
    };
    let mut curve = match trace_isoenergetic(&spec) {
        Ok(c) => c,
        Err(e) => return fail(classify(&e), &e.to_string()),
    };
    // deviation against the closed-form model level set, plus the traced
    // model control curve for plotting
    if let Err(e) = model_curve_deviation(&mut curve, &cfg.problem) {
        eprintln!("model deviation measurement failed: {e}");
    }
    let control_spec = TraceSpec { solver: TraceSolver::ModelOnly, ..spec };
    match trace_isoenergetic(&control_spec) {
        Ok(control) => {
            let _ = write_json(&args.out, "model_curve.json", &control);
            let _ = write_text(&args.out, "model_curve.csv", &curve_csv(&control));
        }
        Err(e) => eprintln!("model control trace failed: {e}"),
    }
    let _ = write_json(&args.out, "curve.json", &curve);
    let _ = write_text(&args.out, "curve.csv", &curve_csv(&curve));
    println!(
        "points = {}  max_model_deviation = {:.6e}  hit_boundary = {}",
        curve.points.len(),
        curve.max_model_deviation,
        curve.hit_boundary
    );
    ExitCode::SUCCESS
}

fn cmd_sample(args: RunArgs) -> ExitCode {
    let cfg = match load_config(&args) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_CONFIG, &e),
    };
    let Some(sc) = cfg.sample.clone() else {
        return fail(EXIT_CONFIG, "config has no \"sample\" block");
    };
    let q = match cfg.problem.q_required() {
        Ok(q) => q,
        Err(e) => return fail(EXIT_CONFIG, &e.to_string()),
    };
    let mut params = cfg.problem.set_params;
    params.window_radius = params.window_radius.max(sc.k.ceil() as i64 + q.cheb() + 1);
    let samples = match sample_resonant_layer(sc.k, &q, &params, sc.count, cfg.seed) {
        Ok(s) => s,
        Err(e) => return fail(EXIT_CONFIG, &e.to_string()),
    };
    if let Err(e) = prepare_out(&args.out) {
        return fail(EXIT_CONFIG, &e);
    }
    if let Err(e) = write_json(&args.out, "resolved_config.json", &cfg) {
        return fail(EXIT_CONFIG, &e);
    }
    let dim = cfg.problem.dim();
    let mut csv = String::from("");
    for ax in 1..=dim {
        csv.push_str(&format!("t_{ax},"));
    }
    for ax in 1..=dim {
        csv.push_str(&format!("j_{ax},"));
    }
    csv.push_str("decision,defect,min_gap,seed\n");
    let mut accepted = 0usize;
    for (t, d) in &samples {
        for c in t.components() {
            csv.push_str(&format!("{c:.17e},"));
        }
        match d {
            rb_core::geometry::Decision::Accept { j, defect, min_gap, .. } => {
                accepted += 1;
                for c in j {
                    csv.push_str(&format!("{c},"));
                }
                csv.push_str(&format!("accept,{defect:.17e},{min_gap:.17e},{}\n", cfg.seed));
            }
            rb_core::geometry::Decision::Reject { reason } => {
                for _ in 0..dim {
                    csv.push(',');
                }
                csv.push_str(&format!("reject:{reason},,,{}\n", cfg.seed));
            }
        }
    }
    let _ = write_text(&args.out, "samples.csv", &csv);
    println!(
        "samples = {}  accepted = {}  rejected_fraction = {:.4}",
        samples.len(),
        accepted,
        1.0 - accepted as f64 / samples.len() as f64
    );
    ExitCode::SUCCESS
}

/// Named re-checks of a stored bundle, from scratch. Any failure names
/// the check and exits 5.
fn cmd_verify(path: &Path) -> ExitCode {
    let dir = if path.is_dir() { path.to_path_buf() } else { path.parent().map(Path::to_path_buf).unwrap_or_default() };
    let sol_path = if path.is_dir() { dir.join("solution.json") } else { path.to_path_buf() };
    let cfg_path = dir.join("resolved_config.json");

    let sol_text = match fs::read_to_string(&sol_path) {
        Ok(t) => t,
        Err(e) => return fail(EXIT_VERIFY, &format!("read {}: {e}", sol_path.display())),
    };
    let cfg_text = match fs::read_to_string(&cfg_path) {
        Ok(t) => t,
        Err(e) => return fail(EXIT_VERIFY, &format!("read {}: {e}", cfg_path.display())),
    };
    let solution: Solution = match serde_json::from_str(&sol_text) {
        Ok(s) => s,
        Err(e) => return fail(EXIT_VERIFY, &format!("solution parse: {e}")),
    };
    let cfg: RunConfig = match serde_json::from_str(&cfg_text) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_VERIFY, &format!("config parse: {e}")),
    };
    let ctx = &cfg.problem;

    // 1. residual recomputed from the stored pair
    match residual(solution.lambda, &solution.psi, ctx) {
        Ok(r) if r <= ctx.tolerances.residual_tol => {
            println!("residual: ok ({r:.3e})");
        }
        Ok(r) => {
            return fail(
                EXIT_VERIFY,
                &format!("residual: {r:.3e} above {:.3e}", ctx.tolerances.residual_tol),
            )
        }
        Err(e) => return fail(EXIT_VERIFY, &format!("residual: {e}")),
    }

    // 2. fixed-point defect of the stored potential
    let remap = match apply_map(&solution.w, ctx) {
        Ok(m) => m,
        Err(e) => return fail(EXIT_VERIFY, &format!("fixed_point_defect: {e}")),
    };
    let defect = match remap.w_next.sub(&solution.w) {
        Ok(d) => d.star_norm(),
        Err(e) => return fail(EXIT_VERIFY, &format!("fixed_point_defect: {e}")),
    };
    let fp_gate = 10.0 * ctx.tolerances.fp_tol_rel
        * ctx.potential.star_norm().max(ctx.amp.sigma_a2().abs()).max(1e-300);
    if defect > fp_gate.max(10.0 * solution.fp_defect.max(1e-300)) {
        return fail(
            EXIT_VERIFY,
            &format!("fixed_point_defect: {defect:.3e} above gate {fp_gate:.3e}"),
        );
    }
    println!("fixed_point_defect: ok ({defect:.3e})");

    // 3. projection idempotence of the re-solved eigenpair
    if remap.solve.idem_defect > 1e-8 {
        return fail(
            EXIT_VERIFY,
            &format!("projection_idempotence: {:.3e}", remap.solve.idem_defect),
        );
    }
    println!("projection_idempotence: ok ({:.3e})", remap.solve.idem_defect);

    // 4. stored psi against the re-solved projection column
    let psi_again = match projection_column_series(&remap.projection, &ctx.j, ctx.amp.a()) {
        Ok(p) => p,
        Err(e) => return fail(EXIT_VERIFY, &format!("psi_consistency: {e}")),
    };
    let psi_gap = match psi_again.sub(&solution.psi) {
        Ok(d) => d.star_norm(),
        Err(e) => return fail(EXIT_VERIFY, &format!("psi_consistency: {e}")),
    };
    let psi_gate = 1e-8 * solution.psi.star_norm().max(1e-300);
    if psi_gap > psi_gate {
        return fail(
            EXIT_VERIFY,
            &format!("psi_consistency: {psi_gap:.3e} above {psi_gate:.3e}"),
        );
    }
    println!("psi_consistency: ok ({psi_gap:.3e})");

    // 5. stored lambda against the re-solve
    let lam_gap = (remap.lambda - solution.lambda).abs();
    let lam_gate = 1e-9 * solution.lambda.abs().max(1.0);
    if lam_gap > lam_gate {
        return fail(
            EXIT_VERIFY,
            &format!("lambda_consistency: {lam_gap:.3e} above {lam_gate:.3e}"),
        );
    }
    println!("lambda_consistency: ok ({lam_gap:.3e})");

    println!("verify: all checks passed");
    ExitCode::SUCCESS
}
