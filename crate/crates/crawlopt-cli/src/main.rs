//! Command line driver: simulate, optimize, verify, mesh-study.
//!
//! Exit codes: 0 success, 1 failed verification, 2 unreadable input,
//! 3 invalid configuration.  Every run writes a manifest pinning the
//! input bytes, flags, and seed; equal manifests give equal outputs.

mod config;

use clap::{Args, Parser, Subcommand};
use crawlopt::fmt_f64;
use crawlopt::optimizer::{optimize, SolverConfig};
use crawlopt::stationarity::{
    classify_degenerate, extract_multipliers, one_link_reference, CertificateRequest,
    MultiplierMode, ReferenceCost, RESIDUAL_TOL,
};
use crawlopt::sweeping::{ControlGrid, DiscreteTrajectory};
use crawlopt::transcription::{build_pm, ProcessProblem, RunningCost};
use nalgebra::DVector;
use std::path::{Path, PathBuf};

use config::{load_cost, load_json, parse_mesh_range, parse_vector, ModelFile, RunManifest};

const EXIT_VERIFY: i32 = 1;
const EXIT_PARSE: i32 = 2;
const EXIT_VALIDATE: i32 = 3;

/// Convergence settings for the period-map iteration.
const ORBIT_TOL: f64 = 1e-10;
const ORBIT_CAP: usize = 500;

/// Trust-region half-width handed to the penalized surrogate in mesh
/// studies; only its feasibility gate depends on it, not the penalty.
const MESH_EPS_BAR: f64 = 2.0;

#[derive(Parser)]
#[command(name = "crawlopt", version, about = "Periodic gaits for dry-friction crawlers")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Integrate one gait and write the trajectory
    Simulate(SimulateArgs),
    /// Search for a reward-maximizing periodic gait
    Optimize(OptimizeArgs),
    /// Check the first-order conditions of a given gait
    Verify(VerifyArgs),
    /// Tabulate convergence quantities over a range of mesh levels
    MeshStudy(MeshStudyArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Model description (JSON)
    #[arg(long)]
    model: PathBuf,
    /// Running control cost (JSON); omitted means pure displacement
    #[arg(long)]
    cost: Option<PathBuf>,
    /// Output directory
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Seed override, recorded in the manifest
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Control grid (JSON)
    #[arg(long)]
    control: PathBuf,
    /// Comma-separated initial state; omitted means the periodic orbit
    #[arg(long)]
    x0: Option<String>,
}

#[derive(Args)]
struct OptimizeArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Solver settings (JSON); omitted means defaults
    #[arg(long)]
    solver: Option<PathBuf>,
    /// Dyadic mesh level
    #[arg(long, default_value_t = 6)]
    mesh: u32,
    /// Total-variation budget for the control
    #[arg(long)]
    tv_bound: Option<f64>,
    /// Extract and store a stationarity certificate for the best gait
    #[arg(long)]
    certify: bool,
    /// Ask for a certificate with unit cost weight and maximal margin
    #[arg(long)]
    nondegenerate: bool,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Control grid (JSON)
    #[arg(long)]
    control: PathBuf,
    /// Comma-separated initial state; omitted means the periodic orbit
    #[arg(long)]
    x0: Option<String>,
    /// Ask for a certificate with unit cost weight and maximal margin
    #[arg(long)]
    nondegenerate: bool,
}

#[derive(Args)]
struct MeshStudyArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Inclusive dyadic level range, written "lo..hi"
    #[arg(long)]
    mesh_range: String,
    /// Gait to study (JSON); single-link models default to the
    /// closed-form optimum
    #[arg(long)]
    control: Option<PathBuf>,
}

/// A terminating failure with its process exit code.
struct Fail {
    code: i32,
    msg: String,
}

fn fail(code: i32, msg: impl Into<String>) -> Fail {
    Fail { code, msg: msg.into() }
}

fn main() {
    env_logger::init();
    init_threads();
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            f.code
        }
    };
    std::process::exit(code);
}

/// Caps the worker pool when CRAWLOPT_THREADS is set.
fn init_threads() {
    if let Ok(v) = std::env::var("CRAWLOPT_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn run(cli: Cli) -> Result<i32, Fail> {
    match cli.cmd {
        Cmd::Simulate(a) => cmd_simulate(a),
        Cmd::Optimize(a) => cmd_optimize(a),
        Cmd::Verify(a) => cmd_verify(a),
        Cmd::MeshStudy(a) => cmd_mesh_study(a),
    }
}

fn load_problem(common: &CommonArgs) -> Result<(ModelFile, ProcessProblem), Fail> {
    let model: ModelFile =
        load_json(&common.model, "model file").map_err(|e| fail(EXIT_PARSE, e))?;
    let f2 = load_cost(common.cost.as_deref()).map_err(|e| fail(EXIT_PARSE, e))?;
    let problem = model.build(f2).map_err(|e| fail(EXIT_VALIDATE, e))?;
    Ok((model, problem))
}

fn load_control(path: &Path, problem: &ProcessProblem) -> Result<ControlGrid, Fail> {
    let grid: ControlGrid = load_json(path, "control file").map_err(|e| fail(EXIT_PARSE, e))?;
    if grid.control_dim() != problem.control_dim() {
        return Err(fail(
            EXIT_VALIDATE,
            format!(
                "control file has dimension {}, the model needs {}",
                grid.control_dim(),
                problem.control_dim()
            ),
        ));
    }
    let t = problem.horizon;
    if (grid.horizon() - t).abs() > 1e-9 * (1.0 + t.abs()) {
        return Err(fail(
            EXIT_VALIDATE,
            format!("control horizon {} differs from the model period {t}", grid.horizon()),
        ));
    }
    Ok(grid)
}

/// Initial state from the flag, or the attracting periodic orbit.
/// Returns the state, the period-map gap, and the periods simulated.
fn starting_state(
    problem: &ProcessProblem,
    grid: &ControlGrid,
    flag: Option<&str>,
) -> Result<(DVector<f64>, f64, usize), Fail> {
    if let Some(text) = flag {
        let x0 = parse_vector(text).map_err(|e| fail(EXIT_PARSE, e))?;
        if x0.len() != problem.set.dim() {
            return Err(fail(
                EXIT_VALIDATE,
                format!(
                    "initial state has {} coordinates, the model needs {}",
                    x0.len(),
                    problem.set.dim()
                ),
            ));
        }
        if !problem.set.contains(&x0, 1e-7) {
            return Err(fail(EXIT_VALIDATE, "initial state lies outside the admissible set"));
        }
        let traj = crawlopt::sweeping::simulate(&problem.set, &problem.dynamics, grid, &x0);
        let gap = (traj.final_state() - &x0).norm();
        return Ok((x0, gap, 1));
    }
    let (mut x, _) = problem.set.project(problem.set.interior_point());
    let mut gap = f64::INFINITY;
    let mut used = 0;
    for _ in 0..ORBIT_CAP {
        let traj = crawlopt::sweeping::simulate(&problem.set, &problem.dynamics, grid, &x);
        used += 1;
        gap = (traj.final_state() - &x).norm();
        if gap <= ORBIT_TOL {
            break;
        }
        x = traj.final_state().clone();
    }
    Ok((x, gap, used))
}

fn ensure_out(dir: &Path) -> Result<(), Fail> {
    std::fs::create_dir_all(dir)
        .map_err(|e| fail(EXIT_PARSE, format!("output directory {}: {e}", dir.display())))
}

fn write_out(dir: &Path, name: &str, contents: &str) -> Result<(), Fail> {
    let path = dir.join(name);
    std::fs::write(&path, contents)
        .map_err(|e| fail(EXIT_PARSE, format!("writing {}: {e}", path.display())))
}

fn write_manifest(manifest: &RunManifest, dir: &Path) -> Result<(), Fail> {
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| fail(EXIT_PARSE, format!("manifest: {e}")))?;
    write_out(dir, "manifest.json", &(text + "\n"))
}

/// Cumulative displacement after each interval, and its total.
fn displacement_track(problem: &ProcessProblem, traj: &DiscreteTrajectory) -> (Vec<f64>, f64) {
    let h = traj.h();
    let mut y = 0.0;
    let mut track = Vec::with_capacity(traj.intervals());
    for xi in &traj.reactions {
        y += h * problem.cost.f1.eval(xi);
        track.push(y);
    }
    (track, y)
}

fn cmd_simulate(args: SimulateArgs) -> Result<i32, Fail> {
    let (_, problem) = load_problem(&args.common)?;
    let grid = load_control(&args.control, &problem)?;
    let (x0, gap, periods) = starting_state(&problem, &grid, args.x0.as_deref())?;
    let (j, mut traj) = problem.objective(&grid, &x0);
    let (track, displacement) = displacement_track(&problem, &traj);
    traj.outputs = Some(track);

    ensure_out(&args.common.out)?;
    write_out(&args.common.out, "trajectory.csv", &traj.to_csv())?;
    let summary = format!(
        "{{\n  \"J\": {},\n  \"displacement\": {},\n  \"periodicity_gap\": {},\n  \"periods_used\": {}\n}}\n",
        fmt_f64(j),
        fmt_f64(displacement),
        fmt_f64(gap),
        periods
    );
    write_out(&args.common.out, "summary.json", &summary)?;

    let mut inputs: Vec<&Path> = vec![&args.common.model];
    if let Some(c) = &args.common.cost {
        inputs.push(c);
    }
    inputs.push(&args.control);
    let flags = format!("x0={:?}", args.x0);
    let manifest = RunManifest::new(
        "simulate",
        &inputs,
        &flags,
        args.common.seed.unwrap_or(0),
        &args.common.out,
    )
    .map_err(|e| fail(EXIT_PARSE, e))?;
    write_manifest(&manifest, &args.common.out)?;

    println!(
        "J = {}  displacement = {}  periodicity gap = {}  periods = {}",
        fmt_f64(j),
        fmt_f64(displacement),
        fmt_f64(gap),
        periods
    );
    Ok(0)
}

fn cmd_optimize(args: OptimizeArgs) -> Result<i32, Fail> {
    let (_, problem) = load_problem(&args.common)?;
    let mut cfg: SolverConfig = match &args.solver {
        Some(p) => load_json(p, "solver file").map_err(|e| fail(EXIT_PARSE, e))?,
        None => SolverConfig::default(),
    };
    if let Some(seed) = args.common.seed {
        cfg.seed = seed;
    }
    if let Some(k) = args.tv_bound {
        cfg.tv_bound = Some(k);
    }
    let report = optimize(&problem, args.mesh, &cfg).map_err(|e| fail(EXIT_VALIDATE, e.to_string()))?;

    ensure_out(&args.common.out)?;
    let mut history = String::from("iter,start,J,step\n");
    for row in &report.history {
        history.push_str(&format!(
            "{},{},{},{}\n",
            row.iter,
            row.start,
            fmt_f64(row.value),
            fmt_f64(row.step)
        ));
    }
    write_out(&args.common.out, "history.csv", &history)?;

    let grid_json = serde_json::to_string(&report.grid)
        .map_err(|e| fail(EXIT_PARSE, format!("gait serialization: {e}")))?;
    let x0_list = report
        .x0
        .iter()
        .map(|v| fmt_f64(*v))
        .collect::<Vec<_>>()
        .join(", ");
    let best = format!(
        "{{\n  \"value\": {},\n  \"x0\": [{}],\n  \"grid\": {}\n}}\n",
        fmt_f64(report.value),
        x0_list,
        grid_json
    );
    write_out(&args.common.out, "best_gait.json", &best)?;

    println!(
        "best J = {} after {} evaluations ({} starts)",
        fmt_f64(report.value),
        report.evaluations,
        report.start_values.len()
    );

    let mut exit = 0;
    if args.certify {
        let (_, traj) = problem.objective(&report.grid, &report.x0);
        let request = if args.nondegenerate {
            CertificateRequest::Nondegenerate
        } else {
            CertificateRequest::Any
        };
        match extract_multipliers(&problem, &report.grid, &traj, MultiplierMode::Plain, request) {
            Ok(cert) => {
                let class = classify_degenerate(&cert, RESIDUAL_TOL);
                print!("{}", cert.report());
                println!("class           {class}");
                let text = serde_json::to_string_pretty(&cert)
                    .map_err(|e| fail(EXIT_PARSE, format!("certificate: {e}")))?;
                write_out(&args.common.out, "certificate.json", &(text + "\n"))?;
                let worst = cert.residuals.values().cloned().fold(0.0, f64::max);
                if args.nondegenerate && worst > RESIDUAL_TOL {
                    println!("certificate residual {} exceeds {}", fmt_f64(worst), fmt_f64(RESIDUAL_TOL));
                    exit = EXIT_VERIFY;
                }
            }
            Err(e) => {
                println!("certificate extraction failed: {e}");
                exit = EXIT_VERIFY;
            }
        }
    }

    let mut inputs: Vec<&Path> = vec![&args.common.model];
    if let Some(c) = &args.common.cost {
        inputs.push(c);
    }
    if let Some(s) = &args.solver {
        inputs.push(s);
    }
    let flags = format!(
        "mesh={} tv_bound={:?} certify={} nondegenerate={}",
        args.mesh, args.tv_bound, args.certify, args.nondegenerate
    );
    let manifest = RunManifest::new("optimize", &inputs, &flags, cfg.seed, &args.common.out)
        .map_err(|e| fail(EXIT_PARSE, e))?;
    write_manifest(&manifest, &args.common.out)?;
    Ok(exit)
}

fn cmd_verify(args: VerifyArgs) -> Result<i32, Fail> {
    let (_, problem) = load_problem(&args.common)?;
    let grid = load_control(&args.control, &problem)?;
    let (x0, gap, _) = starting_state(&problem, &grid, args.x0.as_deref())?;
    let (j, traj) = problem.objective(&grid, &x0);
    let request = if args.nondegenerate {
        CertificateRequest::Nondegenerate
    } else {
        CertificateRequest::Any
    };

    ensure_out(&args.common.out)?;
    let mut inputs: Vec<&Path> = vec![&args.common.model];
    if let Some(c) = &args.common.cost {
        inputs.push(c);
    }
    inputs.push(&args.control);
    let flags = format!("x0={:?} nondegenerate={}", args.x0, args.nondegenerate);
    let manifest = RunManifest::new(
        "verify",
        &inputs,
        &flags,
        args.common.seed.unwrap_or(0),
        &args.common.out,
    )
    .map_err(|e| fail(EXIT_PARSE, e))?;
    write_manifest(&manifest, &args.common.out)?;

    println!("J = {}  periodicity gap = {}", fmt_f64(j), fmt_f64(gap));
    match extract_multipliers(&problem, &grid, &traj, MultiplierMode::Plain, request) {
        Ok(cert) => {
            let class = classify_degenerate(&cert, RESIDUAL_TOL);
            print!("{}", cert.report());
            println!("class           {class}");
            let text = serde_json::to_string_pretty(&cert)
                .map_err(|e| fail(EXIT_PARSE, format!("certificate: {e}")))?;
            write_out(&args.common.out, "certificate.json", &(text + "\n"))?;
            let worst = cert.residuals.values().cloned().fold(0.0, f64::max);
            if worst <= RESIDUAL_TOL {
                println!("verification passed (max residual {})", fmt_f64(worst));
                Ok(0)
            } else {
                println!("verification failed (max residual {})", fmt_f64(worst));
                Ok(EXIT_VERIFY)
            }
        }
        Err(e) => {
            println!("verification failed: {e}");
            Ok(EXIT_VERIFY)
        }
    }
}

/// Resamples a gait to the requested dyadic level, duplicating on the
/// way down and averaging on the way up.
fn resample(grid: &ControlGrid, m: u32) -> ControlGrid {
    let mut g = grid.clone();
    while g.level() < m {
        g = g.refine();
    }
    while g.level() > m {
        g = g.coarsen().expect("dyadic grids always coarsen");
    }
    g
}

/// Mesh-weighted L2 distance between two gaits on the same grid.
fn l2_gap(a: &ControlGrid, b: &ControlGrid) -> f64 {
    let h = a.h();
    let mut s = 0.0;
    for i in 0..a.intervals() {
        s += h * (a.value(i) - b.value(i)).norm_squared();
    }
    s.sqrt()
}

/// Sup distance between node states of trajectories one level apart.
fn state_delta(coarse: &DiscreteTrajectory, fine: &DiscreteTrajectory) -> f64 {
    let mut d: f64 = 0.0;
    for (j, x) in coarse.states.iter().enumerate() {
        d = d.max((x - &fine.states[2 * j]).amax());
    }
    d
}

fn cmd_mesh_study(args: MeshStudyArgs) -> Result<i32, Fail> {
    let (model, problem) = load_problem(&args.common)?;
    let (lo, hi) = parse_mesh_range(&args.mesh_range).map_err(|e| fail(EXIT_PARSE, e))?;
    if lo < 2 {
        return Err(fail(EXIT_PARSE, "mesh range must start at level 2 or above"));
    }
    if hi > 12 {
        return Err(fail(EXIT_PARSE, "mesh range above level 12 is not supported"));
    }
    let fine_level = hi + 2;

    // The reference gait at the fine mesh, and one gait per studied level.
    // Configuration files only produce the zero or quadratic cost.
    let analytic_cost = match problem.cost.f2 {
        RunningCost::Zero => ReferenceCost::Zero,
        _ => ReferenceCost::Quadratic,
    };
    let per_level = |m: u32| -> Result<(ControlGrid, DVector<f64>), Fail> {
        match (&args.control, &model) {
            (Some(path), _) => {
                let grid = resample(&load_control(path, &problem)?, m);
                let (x0, gap, _) = starting_state(&problem, &grid, None)?;
                if gap > 1e-6 {
                    return Err(fail(
                        EXIT_VALIDATE,
                        format!("no periodic orbit found at level {m} (gap {})", fmt_f64(gap)),
                    ));
                }
                Ok((grid, x0))
            }
            (None, ModelFile::OneLink { one_link }) => {
                let (grid, x0, _, _) =
                    one_link_reference(one_link.a, one_link.b, one_link.horizon, analytic_cost, m)
                        .map_err(|e| fail(EXIT_VALIDATE, e.to_string()))?;
                // Node snapping can leave the nominal start slightly off
                // the orbit; settle onto the exact fixed point.
                let (x0, _) = crawlopt::sweeping::periodic_orbit(
                    &problem.set,
                    &problem.dynamics,
                    &grid,
                    &x0,
                    ORBIT_TOL,
                    ORBIT_CAP,
                )
                .map_err(|e| fail(EXIT_VALIDATE, e.to_string()))?;
                Ok((grid, x0))
            }
            (None, ModelFile::Crawler(_)) => Err(fail(
                EXIT_PARSE,
                "mesh studies on crawler models need --control",
            )),
        }
    };

    let (ref_grid, ref_x0) = per_level(fine_level)?;
    let (_, ref_traj) = problem.objective(&ref_grid, &ref_x0);

    struct Row {
        m: u32,
        value: f64,
        control_gap: f64,
        penalty: f64,
        traj: DiscreteTrajectory,
    }
    let mut rows: Vec<Row> = Vec::new();
    for m in lo..=hi {
        let (grid_m, x0_m) = per_level(m)?;
        let (value, traj) = problem.objective(&grid_m, &x0_m);
        let control_gap = l2_gap(&resample(&grid_m, fine_level), &ref_grid);
        let pm = build_pm(&problem, (&ref_traj, &ref_grid), m, MESH_EPS_BAR)
            .map_err(|e| fail(EXIT_VALIDATE, e.to_string()))?;
        let at_ref = pm.score(&pm.reference_nodes()[0], pm.reference_controls());
        let penalty = at_ref.plain - at_ref.value;
        rows.push(Row { m, value, control_gap, penalty, traj });
    }

    ensure_out(&args.common.out)?;
    let mut csv = String::from("m,J,state_delta,control_gap,penalty\n");
    println!("{:>3} {:>24} {:>24} {:>24} {:>24}", "m", "J", "state_delta", "control_gap", "penalty");
    for i in 0..rows.len() {
        let delta = if i + 1 < rows.len() {
            Some(state_delta(&rows[i].traj, &rows[i + 1].traj))
        } else {
            None
        };
        let delta_text = delta.map(fmt_f64).unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            rows[i].m,
            fmt_f64(rows[i].value),
            delta_text,
            fmt_f64(rows[i].control_gap),
            fmt_f64(rows[i].penalty)
        ));
        println!(
            "{:>3} {:>24} {:>24} {:>24} {:>24}",
            rows[i].m,
            fmt_f64(rows[i].value),
            delta_text,
            fmt_f64(rows[i].control_gap),
            fmt_f64(rows[i].penalty)
        );
    }
    write_out(&args.common.out, "mesh_study.csv", &csv)?;

    let mut inputs: Vec<&Path> = vec![&args.common.model];
    if let Some(c) = &args.common.cost {
        inputs.push(c);
    }
    if let Some(c) = &args.control {
        inputs.push(c);
    }
    let flags = format!("mesh_range={lo}..{hi}");
    let manifest = RunManifest::new(
        "mesh-study",
        &inputs,
        &flags,
        args.common.seed.unwrap_or(0),
        &args.common.out,
    )
    .map_err(|e| fail(EXIT_PARSE, e))?;
    write_manifest(&manifest, &args.common.out)?;
    Ok(0)
}
