//! Command-level orchestration: admissibility checks, solving, the particle
//! comparison and the asymptotics analysis, with reproducible on-disk runs.
//!
//! Every command writes into the scenario's output directory. The run
//! record lists the reproducible artifacts with content hashes; wall-clock
//! timings go to the diagnostics CSV only, which is deliberately outside
//! the manifest so re-runs hash identically.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::analysis::{
    asymptotic_bound_check, free_motion_limit, mass_trace, shipped_test_bumps, weak_residual,
    MassTrace,
};
use crate::error::CoreError;
use crate::field::{write_slice_binary, write_slice_csv, DistributionField, Representation};
use crate::grid::PhaseSpaceGrid;
use crate::kernels::{
    check_admissibility, estimate_delta, AdmissibilityReport, DeltaEstimate, FieldSelector,
    KernelSet,
};
use crate::mc::{init_ensemble, step_ensemble, tally, Observables};
use crate::scenario::ScenarioConfig;
use crate::solver::{picard_solve, IterationDiagnostics, OperatorContext, PicardSettings};
use crate::tolerances::{QuadTolerances, LOW_POWER_REL_SE, MC_RATE_BOUND, MC_Z_BOUND};

/// Runtime knobs that do not alter the physics of a run (except the seed,
/// which replaces the configured one and is recorded).
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub workers: usize,
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    /// Directory kernel CSV paths resolve against (the config's directory).
    pub base_dir: PathBuf,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            workers: 2,
            out_dir: None,
            seed: None,
            base_dir: PathBuf::from("."),
        }
    }
}

/// Command failure carrying the exit-code contract:
/// 2 config, 3 condition, 4 non-convergence, 5 inequality violation.
#[derive(Debug)]
pub enum RunError {
    Config(String),
    Condition(Box<CheckOutcome>),
    NonConvergence(String),
    Inequality(String),
    Internal(CoreError),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Condition(_) => 3,
            RunError::NonConvergence(_) => 4,
            RunError::Inequality(_) => 5,
            RunError::Internal(_) => 1,
        }
    }

    pub fn message(&self) -> String {
        match self {
            RunError::Config(m) => format!("configuration error: {m}"),
            RunError::Condition(c) => {
                let failing: Vec<String> = c
                    .report
                    .conditions
                    .iter()
                    .filter(|x| !x.passed)
                    .map(|x| x.name.clone())
                    .collect();
                let mut parts = failing;
                if !c.delta.satisfied {
                    parts.push(format!("uniform redistribution bound (delta = {})", c.delta.delta));
                }
                format!("physical conditions failed: {}", parts.join("; "))
            }
            RunError::NonConvergence(m) => format!("solver did not converge: {m}"),
            RunError::Inequality(m) => format!("verification failed: {m}"),
            RunError::Internal(e) => format!("{e}"),
        }
    }

    /// Machine-readable error object for stdout.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "error": {
                "exit_code": self.exit_code(),
                "kind": match self {
                    RunError::Config(_) => "config",
                    RunError::Condition(_) => "condition",
                    RunError::NonConvergence(_) => "non-convergence",
                    RunError::Inequality(_) => "inequality",
                    RunError::Internal(_) => "internal",
                },
                "message": self.message(),
            }
        })
    }
}

impl From<CoreError> for RunError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config(m) => RunError::Config(m),
            CoreError::NonConvergence {
                max_iter,
                last_residual,
                ..
            } => RunError::NonConvergence(format!(
                "{max_iter} sweeps, last residual {last_residual:.3e}"
            )),
            other => RunError::Internal(other),
        }
    }
}

pub type RunResult<T> = std::result::Result<T, RunError>;

#[derive(Clone, Debug, Serialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct DiagnosticsSummary {
    pub iterations: usize,
    pub converged: bool,
    pub final_residual: Option<f64>,
    pub residual_history: Vec<f64>,
    pub contraction_ratios: Vec<f64>,
}

impl From<&IterationDiagnostics> for DiagnosticsSummary {
    fn from(d: &IterationDiagnostics) -> Self {
        Self {
            iterations: d.iterations,
            converged: d.converged,
            final_residual: d.residual_history.last().copied(),
            residual_history: d.residual_history.clone(),
            contraction_ratios: d.contraction_ratios.clone(),
        }
    }
}

/// Reproducibility record: the resolved config, solver diagnostics and the
/// hashed artifact manifest.
#[derive(Clone, Debug, Serialize)]
pub struct RunRecord {
    pub artifact_version: String,
    pub command: String,
    pub config: ScenarioConfig,
    pub diagnostics: Option<DiagnosticsSummary>,
    pub manifest: Vec<ManifestEntry>,
}

fn hash_file(out_dir: &Path, rel: &str) -> RunResult<ManifestEntry> {
    let bytes = std::fs::read(out_dir.join(rel)).map_err(|e| RunError::Internal(e.into()))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for b in digest {
        hex.push_str(&format!("{b:02x}"));
    }
    Ok(ManifestEntry {
        path: rel.to_string(),
        sha256: hex,
        bytes: bytes.len() as u64,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> RunResult<()> {
    let body = serde_json::to_string_pretty(value)
        .map_err(|e| RunError::Internal(CoreError::Validity(format!("json encode: {e}"))))?;
    std::fs::write(path, body + "\n").map_err(|e| RunError::Internal(e.into()))?;
    Ok(())
}

struct PreparedRun {
    config: ScenarioConfig,
    grid: Arc<PhaseSpaceGrid>,
    kernels: KernelSet,
    ctx: OperatorContext,
    out_dir: PathBuf,
}

fn prepare(config: &ScenarioConfig, opts: &RunOptions) -> RunResult<PreparedRun> {
    let mut config = config.clone();
    if let Some(seed) = opts.seed {
        config.mc.seed = seed;
    }
    config.validate().map_err(RunError::from)?;
    let grid = config.build_grid().map_err(RunError::from)?;
    let kernels = config
        .build_kernels(&grid, &opts.base_dir)
        .map_err(RunError::from)?;
    let ctx = OperatorContext::new(&kernels, grid.clone(), opts.workers.max(1))
        .map_err(RunError::from)?;
    let out_dir = opts.out_dir.clone().unwrap_or_else(|| config.output.dir.clone());
    std::fs::create_dir_all(&out_dir).map_err(|e| RunError::Internal(e.into()))?;
    Ok(PreparedRun {
        config,
        grid,
        kernels,
        ctx,
        out_dir,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub report: AdmissibilityReport,
    pub delta: DeltaEstimate,
    pub passed: bool,
}

fn run_conditions(run: &PreparedRun) -> RunResult<CheckOutcome> {
    let report = check_admissibility(&run.kernels, &run.grid).map_err(RunError::from)?;
    let delta = estimate_delta(&run.kernels, &run.grid, &run.grid.times()).map_err(RunError::from)?;
    let passed = report.passed() && delta.satisfied;
    Ok(CheckOutcome {
        report,
        delta,
        passed,
    })
}

/// Admissibility + uniform-redistribution-bound check; writes `check.json`.
pub fn cmd_check(config: &ScenarioConfig, opts: &RunOptions) -> RunResult<CheckOutcome> {
    let run = prepare(config, opts)?;
    let outcome = run_conditions(&run)?;
    write_json(&run.out_dir.join("check.json"), &outcome)?;
    if !outcome.passed {
        return Err(RunError::Condition(Box::new(outcome)));
    }
    Ok(outcome)
}

#[derive(Debug)]
pub struct SolveOutcome {
    pub record: RunRecord,
    pub out_dir: PathBuf,
    pub field: DistributionField,
    pub diagnostics: IterationDiagnostics,
}

fn solve_prepared(run: &PreparedRun) -> RunResult<(DistributionField, IterationDiagnostics)> {
    let settings = PicardSettings {
        mapping: run.config.solver.mapping,
        a: run.config.solver.weight_rate(),
        tol: run.config.solver.tol,
        max_iter: run.config.solver.max_iter,
    };
    match picard_solve(&run.ctx, &settings) {
        Ok(pair) => Ok(pair),
        Err(CoreError::NonConvergence {
            max_iter,
            last_residual,
            residual_history,
        }) => {
            // diagnostics are still written so the failure can be studied
            let diag = IterationDiagnostics {
                iterations: max_iter,
                converged: false,
                residual_history,
                ..Default::default()
            };
            write_diagnostics_csv(&run.out_dir.join("diagnostics.csv"), &diag)?;
            Err(RunError::NonConvergence(format!(
                "{max_iter} sweeps, last residual {last_residual:.3e}"
            )))
        }
        Err(e) => Err(e.into()),
    }
}

fn write_diagnostics_csv(path: &Path, diag: &IterationDiagnostics) -> RunResult<()> {
    let mut w = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| RunError::Internal(e.into()))?,
    );
    let fail = |e: std::io::Error| RunError::Internal(e.into());
    writeln!(w, "iteration,residual,ratio,wall_time_s").map_err(fail)?;
    for (i, r) in diag.residual_history.iter().enumerate() {
        let ratio = if i == 0 {
            String::new()
        } else {
            format!("{:?}", diag.contraction_ratios.get(i - 1).copied().unwrap_or(f64::NAN))
        };
        let wall = diag
            .sweep_seconds
            .get(i)
            .map(|s| format!("{s:.6}"))
            .unwrap_or_default();
        writeln!(w, "{},{:?},{},{}", i + 1, r, ratio, wall).map_err(fail)?;
    }
    Ok(())
}

/// Solves the scenario, writing Eulerian snapshots at the configured
/// cadence (both CSV and binary), the diagnostics CSV and the run record.
pub fn cmd_solve(config: &ScenarioConfig, opts: &RunOptions) -> RunResult<SolveOutcome> {
    let run = prepare(config, opts)?;
    let conditions = run_conditions(&run)?;
    if !conditions.passed {
        return Err(RunError::Condition(Box::new(conditions)));
    }
    let (field, diagnostics) = solve_prepared(&run)?;

    let stride = run.config.snapshot_stride();
    let mut manifest_files: Vec<String> = Vec::new();
    let mut k = 0;
    while k < run.grid.nt {
        let slice = field.eulerian_slice(k, opts.workers.max(1));
        let csv_name = format!("snapshot_{k:05}.csv");
        let bin_name = format!("snapshot_{k:05}.bin");
        write_slice_csv(&run.out_dir.join(&csv_name), &run.grid, &slice)
            .map_err(RunError::Internal)?;
        write_slice_binary(
            &run.out_dir.join(&bin_name),
            &run.grid,
            &slice,
            run.grid.time(k),
            Representation::Eulerian,
        )
        .map_err(RunError::Internal)?;
        manifest_files.push(csv_name);
        manifest_files.push(bin_name.clone());
        manifest_files.push(format!("{bin_name}.json"));
        if k == run.grid.nt - 1 {
            break;
        }
        k = (k + stride).min(run.grid.nt - 1);
    }
    write_diagnostics_csv(&run.out_dir.join("diagnostics.csv"), &diagnostics)?;

    let mut manifest = Vec::new();
    for rel in &manifest_files {
        manifest.push(hash_file(&run.out_dir, rel)?);
    }
    let record = RunRecord {
        artifact_version: env!("CARGO_PKG_VERSION").to_string(),
        command: "solve".into(),
        config: run.config.clone(),
        diagnostics: Some(DiagnosticsSummary::from(&diagnostics)),
        manifest,
    };
    write_json(&run.out_dir.join("run_record.json"), &record)?;
    Ok(SolveOutcome {
        record,
        out_dir: run.out_dir,
        field,
        diagnostics,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct McRow {
    pub t: f64,
    pub mass: f64,
    pub mass_se: f64,
    pub mean_velocity: Vec<f64>,
    pub mean_velocity_se: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub second_moment_se: Vec<f64>,
}

#[derive(Debug)]
pub struct McOutcome {
    pub rows: Vec<McRow>,
    pub out_dir: PathBuf,
}

fn mc_steps(config: &ScenarioConfig, grid: &PhaseSpaceGrid, kernels: &KernelSet) -> RunResult<(usize, f64)> {
    let t_final = grid.t_final();
    // shrink the requested step so checkpoints are hit exactly
    let per_segment = ((t_final / 5.0) / config.mc.dt).ceil().max(1.0) as usize;
    let n_steps = 5 * per_segment;
    let dt = t_final / n_steps as f64;
    // conservative rate bound from the sampled rate at t = 0
    let gamma0 = kernels
        .sample_field(FieldSelector::Gamma, 0.0, grid)
        .map_err(RunError::from)?;
    let gamma_max = gamma0.iter().cloned().fold(0.0, f64::max);
    if gamma_max * dt > MC_RATE_BOUND {
        return Err(RunError::Config(format!(
            "mc.dt = {dt:.4} violates max explosion rate * dt <= {MC_RATE_BOUND} (rate {gamma_max})"
        )));
    }
    Ok((n_steps, dt))
}

fn run_mc_path(
    run: &PreparedRun,
    opts: &RunOptions,
    record_every: usize,
) -> RunResult<(Vec<(usize, Observables)>, f64)> {
    let (n_steps, dt) = mc_steps(&run.config, &run.grid, &run.kernels)?;
    let p_matrix = run.kernels.p_matrix(&run.grid).map_err(RunError::from)?;
    let mut ens = init_ensemble(
        &run.kernels,
        &run.grid,
        run.config.mc.n_particles,
        run.config.mc.seed,
    )
    .map_err(RunError::from)?;
    let mut out = vec![(0usize, tally(&ens, &run.grid))];
    for step in 1..=n_steps {
        step_ensemble(
            &mut ens,
            &run.kernels,
            &run.grid,
            &p_matrix,
            dt,
            opts.workers.max(1),
        )
        .map_err(RunError::from)?;
        if step % record_every == 0 || step == n_steps {
            out.push((step, tally(&ens, &run.grid)));
        }
    }
    if run.config.mc.histogram {
        let hist = crate::mc::histogram(&ens, &run.grid);
        write_slice_csv(&run.out_dir.join("mc_histogram.csv"), &run.grid, &hist)
            .map_err(RunError::Internal)?;
    }
    Ok((out, dt))
}

/// Particle run alone: writes per-step observables with standard errors.
pub fn cmd_mc(config: &ScenarioConfig, opts: &RunOptions) -> RunResult<McOutcome> {
    let run = prepare(config, opts)?;
    let (samples, dt) = run_mc_path(&run, opts, 1)?;
    let rows: Vec<McRow> = samples
        .iter()
        .map(|(step, obs)| McRow {
            t: *step as f64 * dt,
            mass: obs.total_mass,
            mass_se: obs.mass_se,
            mean_velocity: obs.mean_velocity.clone(),
            mean_velocity_se: obs.mean_velocity_se.clone(),
            second_moment: obs.second_moment.clone(),
            second_moment_se: obs.second_moment_se.clone(),
        })
        .collect();

    let path = run.out_dir.join("mc.csv");
    let mut w = std::io::BufWriter::new(
        std::fs::File::create(&path).map_err(|e| RunError::Internal(e.into()))?,
    );
    let fail = |e: std::io::Error| RunError::Internal(e.into());
    let dim = run.grid.dim;
    let mut header = vec!["t".to_string(), "mass".into(), "mass_se".into()];
    for a in 0..dim {
        header.push(format!("mean_v{a}"));
        header.push(format!("mean_v{a}_se"));
        header.push(format!("second_v{a}"));
        header.push(format!("second_v{a}_se"));
    }
    writeln!(w, "{}", header.join(",")).map_err(fail)?;
    for row in &rows {
        let mut cols = vec![
            format!("{:?}", row.t),
            format!("{:?}", row.mass),
            format!("{:?}", row.mass_se),
        ];
        for a in 0..dim {
            cols.push(format!("{:?}", row.mean_velocity[a]));
            cols.push(format!("{:?}", row.mean_velocity_se[a]));
            cols.push(format!("{:?}", row.second_moment[a]));
            cols.push(format!("{:?}", row.second_moment_se[a]));
        }
        writeln!(w, "{}", cols.join(",")).map_err(fail)?;
    }
    drop(w);
    Ok(McOutcome {
        rows,
        out_dir: run.out_dir,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct CompareRow {
    pub t: f64,
    pub observable: String,
    pub deterministic: f64,
    pub monte_carlo: f64,
    pub standard_error: f64,
    pub z: f64,
    pub low_power: bool,
}

#[derive(Debug)]
pub struct CompareOutcome {
    pub rows: Vec<CompareRow>,
    pub all_within_band: bool,
    pub record: RunRecord,
    pub out_dir: PathBuf,
}

/// Deterministic vs particle observables at five checkpoints; exits
/// nonzero when any |z| exceeds the agreement band.
pub fn cmd_compare(config: &ScenarioConfig, opts: &RunOptions) -> RunResult<CompareOutcome> {
    let run = prepare(config, opts)?;
    let conditions = run_conditions(&run)?;
    if !conditions.passed {
        return Err(RunError::Condition(Box::new(conditions)));
    }
    if (run.grid.nt - 1) % 5 != 0 {
        return Err(RunError::Config(format!(
            "comparison checkpoints need (nt - 1) divisible by 5, got nt = {}",
            run.grid.nt
        )));
    }
    let (field, diagnostics) = solve_prepared(&run)?;
    let (n_steps, dt_mc) = mc_steps(&run.config, &run.grid, &run.kernels)?;
    let record_every = n_steps / 5;
    let (samples, _) = run_mc_path(&run, opts, record_every)?;

    let node_stride = (run.grid.nt - 1) / 5;
    let mut rows = Vec::new();
    let mut all_within = true;
    for (i, (step, obs)) in samples.iter().enumerate().skip(1) {
        debug_assert_eq!(step % record_every, 0);
        let k = i * node_stride;
        let t = run.grid.time(k);
        debug_assert!((t - *step as f64 * dt_mc).abs() < 1e-9);
        // deterministic observables from the characteristic slice
        let g_k = field.slice(k);
        let w = run.grid.xv_weights();
        let n_x = run.grid.n_x();
        let mut mass = 0.0;
        let mut mv = vec![0.0; run.grid.dim];
        let mut mv2 = vec![0.0; run.grid.dim];
        for iv in 0..run.grid.n_v() {
            let v = run.grid.v_node(iv);
            for ix in 0..n_x {
                let cell = g_k[iv * n_x + ix] * w[iv * n_x + ix];
                mass += cell;
                for a in 0..run.grid.dim {
                    mv[a] += v[a] * cell;
                    mv2[a] += v[a] * v[a] * cell;
                }
            }
        }
        let low_power = obs.empty
            || obs.total_mass == 0.0
            || obs.particles < crate::tolerances::LOW_POWER_MIN_PARTICLES
            || obs.mass_se / obs.total_mass.abs().max(1e-300) > LOW_POWER_REL_SE;
        let mut push = |name: String, det: f64, mc: f64, se: f64| {
            let z = if se > 0.0 { (mc - det) / se } else { 0.0 };
            if z.abs() > MC_Z_BOUND {
                all_within = false;
            }
            rows.push(CompareRow {
                t,
                observable: name,
                deterministic: det,
                monte_carlo: mc,
                standard_error: se,
                z,
                low_power,
            });
        };
        push("mass".into(), mass, obs.total_mass, obs.mass_se);
        for a in 0..run.grid.dim {
            push(
                format!("mean_v{a}"),
                mv[a] / mass,
                obs.mean_velocity[a],
                obs.mean_velocity_se[a],
            );
            push(
                format!("second_v{a}"),
                mv2[a] / mass,
                obs.second_moment[a],
                obs.second_moment_se[a],
            );
        }
    }

    let path = run.out_dir.join("compare.csv");
    let mut wtr = std::io::BufWriter::new(
        std::fs::File::create(&path).map_err(|e| RunError::Internal(e.into()))?,
    );
    let fail = |e: std::io::Error| RunError::Internal(e.into());
    writeln!(
        wtr,
        "t,observable,deterministic,monte_carlo,standard_error,z,low_power"
    )
    .map_err(fail)?;
    for r in &rows {
        writeln!(
            wtr,
            "{:?},{},{:?},{:?},{:?},{:?},{}",
            r.t, r.observable, r.deterministic, r.monte_carlo, r.standard_error, r.z, r.low_power
        )
        .map_err(fail)?;
    }
    drop(wtr);

    let manifest = vec![hash_file(&run.out_dir, "compare.csv")?];
    let record = RunRecord {
        artifact_version: env!("CARGO_PKG_VERSION").to_string(),
        command: "compare".into(),
        config: run.config.clone(),
        diagnostics: Some(DiagnosticsSummary::from(&diagnostics)),
        manifest,
    };
    write_json(&run.out_dir.join("run_record.json"), &record)?;

    if !all_within {
        return Err(RunError::Inequality(format!(
            "observable disagreement beyond {MC_Z_BOUND} standard errors (see compare.csv)"
        )));
    }
    Ok(CompareOutcome {
        rows,
        all_within_band: true,
        record,
        out_dir: run.out_dir,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct AsymptoticsSummary {
    pub delta: f64,
    pub tail_allowance: f64,
    pub eps_quad: QuadTolerances,
    pub diff_inequality_pass: bool,
    pub int_inequality_pass: bool,
    pub bound_pass: bool,
    pub distance_monotone_pass: bool,
    pub weak_residuals: Vec<f64>,
    pub weak_allowances: Vec<f64>,
    pub weak_pass: bool,
}

#[derive(Debug)]
pub struct AsymptoticsOutcome {
    pub summary: AsymptoticsSummary,
    pub trace: MassTrace,
    pub out_dir: PathBuf,
}

/// Solves, then verifies the decay inequalities, the convergence bound to
/// the forward limit and the weak-form residuals; writes `analysis.csv`
/// and `analysis_summary.json`.
pub fn cmd_asymptotics(config: &ScenarioConfig, opts: &RunOptions) -> RunResult<AsymptoticsOutcome> {
    let run = prepare(config, opts)?;
    let conditions = run_conditions(&run)?;
    if !conditions.passed {
        return Err(RunError::Condition(Box::new(conditions)));
    }
    let (field, _diagnostics) = solve_prepared(&run)?;
    let delta = conditions.delta.delta;

    let gamma_final = run
        .kernels
        .sample_field(FieldSelector::Gamma, run.grid.t_final(), &run.grid)
        .map_err(RunError::from)?;
    let gamma_max = gamma_final.iter().cloned().fold(0.0, f64::max);
    let fmax = field.max_abs();
    let (curv_l1, curv_max) = run.grid.x_second_differences(run.ctx.f0());
    let eps = QuadTolerances::derive(
        run.ctx.l1_f0(),
        fmax,
        run.grid.dt,
        gamma_max,
        delta,
        run.grid.t_final(),
        curv_l1,
        curv_max,
    );

    let trace = mass_trace(&field, &run.ctx, delta, eps.mass_ineq, eps.positivity)
        .map_err(RunError::from)?;
    let gamma_min_positive = gamma_final
        .iter()
        .cloned()
        .filter(|&g| g > 0.0)
        .fold(f64::INFINITY, f64::min);
    let limit = free_motion_limit(
        &field,
        &run.ctx,
        delta,
        (gamma_min_positive.is_finite()).then_some(gamma_min_positive),
        *trace.gamma_weighted_mass.last().unwrap(),
    )
    .map_err(RunError::from)?;

    let mut l1_dist = Vec::with_capacity(run.grid.nt);
    let mut bound_rhs = Vec::with_capacity(run.grid.nt);
    let mut bound_pass = true;
    for k in 0..run.grid.nt {
        let (lhs, rhs) = asymptotic_bound_check(&field, &limit, &trace, &run.ctx, k)
            .map_err(RunError::from)?;
        if lhs > rhs + eps.mass_ineq {
            bound_pass = false;
        }
        l1_dist.push(lhs);
        bound_rhs.push(rhs);
    }
    let mut distance_monotone_pass = true;
    for k in 0..run.grid.nt - 1 {
        if l1_dist[k + 1] > l1_dist[k] + eps.mass_ineq {
            distance_monotone_pass = false;
        }
    }

    let mut weak_residuals = Vec::new();
    let mut weak_allowances = Vec::new();
    let mut weak_pass = true;
    for bump in shipped_test_bumps(&run.grid) {
        let r = weak_residual(&field, &run.ctx, &bump).map_err(RunError::from)?;
        if r.residual > 10.0 * r.allowance {
            weak_pass = false;
        }
        weak_residuals.push(r.residual);
        weak_allowances.push(r.allowance);
    }

    // analysis.csv: one row per time node
    let path = run.out_dir.join("analysis.csv");
    let mut w = std::io::BufWriter::new(
        std::fs::File::create(&path).map_err(|e| RunError::Internal(e.into()))?,
    );
    let fail = |e: std::io::Error| RunError::Internal(e.into());
    writeln!(
        w,
        "t,mass,gamma_weighted_mass,l1_dist_to_f_inf,bound_rhs,ineq01_slack,ineq02_slack"
    )
    .map_err(fail)?;
    for k in 0..run.grid.nt {
        let s1 = if k < run.grid.nt - 1 {
            format!("{:?}", -trace.ineq_diff_excess[k])
        } else {
            String::new()
        };
        writeln!(
            w,
            "{:?},{:?},{:?},{:?},{:?},{},{:?}",
            trace.times[k],
            trace.mass[k],
            trace.gamma_weighted_mass[k],
            l1_dist[k],
            bound_rhs[k],
            s1,
            -trace.ineq_int_excess[k],
        )
        .map_err(fail)?;
    }
    drop(w);

    let summary = AsymptoticsSummary {
        delta,
        tail_allowance: limit.tail_allowance,
        eps_quad: eps,
        diff_inequality_pass: trace.diff_inequality_holds(),
        int_inequality_pass: trace.int_inequality_holds(),
        bound_pass,
        distance_monotone_pass,
        weak_residuals,
        weak_allowances,
        weak_pass,
    };
    write_json(&run.out_dir.join("analysis_summary.json"), &summary)?;

    if !(summary.diff_inequality_pass
        && summary.int_inequality_pass
        && summary.bound_pass
        && summary.distance_monotone_pass
        && summary.weak_pass)
    {
        return Err(RunError::Inequality(
            "a decay inequality, the convergence bound or a weak-form residual failed".into(),
        ));
    }
    Ok(AsymptoticsOutcome {
        summary,
        trace,
        out_dir: run.out_dir,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_config(gamma: f64) -> ScenarioConfig {
        let text = format!(
            r#"
[grid]
dim = 1
x_min = [-10.0]
x_max = [10.0]
nx = [81]
v_min = [-1.0]
v_max = [1.0]
nv = [21]
nt = 51
t_final = 1.0

[kernels.eta]
kind = "constant"
value = 0.5

[kernels.gamma]
kind = "constant"
value = {gamma}

[kernels.p]
kind = "constant"

[kernels.f0]
kind = "gaussian-bump"
amplitude = 1.0
x_center = [0.0]
x_sigma = [1.5]
v_center = [0.0]
v_sigma = [0.3]

[mc]
n_particles = 20000
seed = 7
dt = 0.02
"#
        );
        ScenarioConfig::from_toml_str(&text).unwrap()
    }

    fn opts(dir: &str) -> RunOptions {
        let out = std::env::temp_dir().join("fireworks-runner-tests").join(dir);
        std::fs::remove_dir_all(&out).ok();
        RunOptions {
            workers: 2,
            out_dir: Some(out),
            seed: None,
            base_dir: PathBuf::from("."),
        }
    }

    #[test]
    fn check_passes_and_reports_delta() {
        let outcome = cmd_check(&test_config(0.8), &opts("check-ok")).unwrap();
        assert!(outcome.passed);
        assert!((outcome.delta.delta - 0.5).abs() < 1e-12);
    }

    #[test]
    fn check_fails_on_condition_violation_with_exit_code_3() {
        let mut cfg = test_config(0.8);
        cfg.kernels.gamma = crate::scenario::FieldSpec::Inline(
            crate::kernels::ScalarField::Constant { value: 1.5 },
        );
        match cmd_check(&cfg, &opts("check-bad")) {
            Err(e) => assert_eq!(e.exit_code(), 3),
            Ok(_) => panic!("expected condition failure"),
        }
    }

    #[test]
    fn solve_writes_reproducible_outputs() {
        let cfg = test_config(0.8);
        let o1 = opts("solve-a");
        let o2 = opts("solve-b");
        let r1 = cmd_solve(&cfg, &o1).unwrap();
        let r2 = cmd_solve(&cfg, &RunOptions { workers: 4, ..o2 }).unwrap();
        assert!(r1.diagnostics.converged);
        let m1 = serde_json::to_string(&r1.record.manifest).unwrap();
        let m2 = serde_json::to_string(&r2.record.manifest).unwrap();
        assert_eq!(m1, m2, "manifests must not depend on worker count");
        let rec1 = std::fs::read(r1.out_dir.join("run_record.json")).unwrap();
        let rec2 = std::fs::read(r2.out_dir.join("run_record.json")).unwrap();
        assert_eq!(rec1, rec2);

        // exponential-mapping snapshots never dip negative
        for entry in &r1.record.manifest {
            if entry.path.ends_with(".bin") {
                let (_, values) =
                    crate::field::read_slice_binary(&r1.out_dir.join(&entry.path)).unwrap();
                assert!(values.iter().all(|&v| v >= 0.0), "{}", entry.path);
            }
        }
    }

    #[test]
    fn compare_agrees_within_band() {
        let cfg = test_config(0.5);
        let outcome = cmd_compare(&cfg, &opts("compare")).unwrap();
        assert!(outcome.all_within_band);
        assert!(outcome.rows.iter().all(|r| r.z.abs() <= MC_Z_BOUND));
    }

    #[test]
    fn tiny_ensembles_are_flagged_low_power() {
        let mut cfg = test_config(0.5);
        cfg.mc.n_particles = 100;
        let outcome = cmd_compare(&cfg, &opts("compare-low-power")).unwrap();
        assert!(outcome.rows.iter().all(|r| r.low_power));
        // wide standard errors keep the band satisfied
        assert!(outcome.all_within_band);
    }

    #[test]
    fn asymptotics_inequalities_hold() {
        let cfg = test_config(0.8);
        let outcome = cmd_asymptotics(&cfg, &opts("asym")).unwrap();
        assert!(outcome.summary.diff_inequality_pass);
        assert!(outcome.summary.int_inequality_pass);
        assert!(outcome.summary.bound_pass);
        assert!(outcome.summary.weak_pass);
    }
}
