//! Gait search: multistart projected subgradient ascent with pattern
//! search polishing and an averaging post-pass for one-link problems.
//!
//! The reward is piecewise smooth, so gradients are central finite
//! differences and the polish step is derivative free.  Every iterate is
//! kept feasible by the control projection; the periodic initial state is
//! refreshed through the period map while iterating.

use nalgebra::DVector;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::sweeping::{periodic_orbit, ControlGrid};
use crate::transcription::{
    project_controls, vector_total_variation, PmProblem, ProcessProblem, SpeedFn,
    TranscriptionError,
};

/// How the periodic initial state is chosen.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum PeriodicMode {
    /// Iterate the period map to its fixed point while optimizing.
    Free,
    /// Keep the supplied initial state.
    Fixed { x0: Vec<f64> },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub starts: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Initial step size; iteration `k` uses `step0 / sqrt(k)`.
    pub step0: f64,
    pub fd_step: f64,
    pub tv_bound: Option<f64>,
    pub periodic_mode: PeriodicMode,
    /// Improvement below this does not reset the stall counter.
    pub stall_tol: f64,
    /// Stop a start after this many iterations without improvement.
    pub stall_iters: usize,
    pub polish: bool,
    pub bv_polish: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            starts: 6,
            seed: 0,
            max_iters: 150,
            step0: 0.25,
            fd_step: 1e-6,
            tv_bound: None,
            periodic_mode: PeriodicMode::Free,
            stall_tol: 1e-10,
            stall_iters: 50,
            polish: true,
            bv_polish: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), OptimizerError> {
        if self.starts == 0 {
            return Err(OptimizerError::BadConfig { field: "starts" });
        }
        if self.max_iters == 0 {
            return Err(OptimizerError::BadConfig { field: "max_iters" });
        }
        if !(self.step0 > 0.0) {
            return Err(OptimizerError::BadConfig { field: "step0" });
        }
        if !(self.fd_step > 0.0) {
            return Err(OptimizerError::BadConfig { field: "fd_step" });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerError {
    BadConfig { field: &'static str },
    /// The averaging post-pass is defined for one-link problems only.
    NotOneLink,
    Constraint(TranscriptionError),
}

impl std::fmt::Display for OptimizerError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OptimizerError::BadConfig { field } => write!(f, "solver config field {field} is invalid"),
            OptimizerError::NotOneLink => {
                write!(f, "averaging post-pass requires a one-link problem")
            }
            OptimizerError::Constraint(e) => write!(f, "constraint handling failed: {e}"),
        }
    }
}

impl std::error::Error for OptimizerError {}

impl From<TranscriptionError> for OptimizerError {
    fn from(e: TranscriptionError) -> Self {
        OptimizerError::Constraint(e)
    }
}

/// One scored iterate of one start.
#[derive(Clone, Debug)]
pub struct HistoryRow {
    pub iter: usize,
    pub start: usize,
    pub value: f64,
    pub step: f64,
}

pub struct SolveReport {
    pub value: f64,
    pub grid: ControlGrid,
    pub x0: DVector<f64>,
    /// Final value of each start, by start index.
    pub start_values: Vec<f64>,
    pub history: Vec<HistoryRow>,
    pub evaluations: usize,
}

/// Central finite differences of a scalar function.
pub fn estimate_gradient(
    f: impl Fn(&DVector<f64>) -> f64,
    point: &DVector<f64>,
    fd_step: f64,
) -> DVector<f64> {
    let mut g = DVector::zeros(point.len());
    let mut probe = point.clone();
    for i in 0..point.len() {
        let base = point[i];
        probe[i] = base + fd_step;
        let up = f(&probe);
        probe[i] = base - fd_step;
        let down = f(&probe);
        probe[i] = base;
        g[i] = (up - down) / (2.0 * fd_step);
    }
    g
}

fn flatten(w: &[DVector<f64>]) -> DVector<f64> {
    let d = w[0].len();
    DVector::from_fn(w.len() * d, |i, _| w[i / d][i % d])
}

fn unflatten(v: &DVector<f64>, d: usize) -> Vec<DVector<f64>> {
    (0..v.len() / d)
        .map(|i| DVector::from_fn(d, |c, _| v[i * d + c]))
        .collect()
}

/// Deterministic start values: zero, a square wave, then Latin hypercube
/// samples of the box.
fn start_values(
    problem: &ProcessProblem,
    m: u32,
    start: usize,
    seed: u64,
) -> Vec<DVector<f64>> {
    let mm = 1usize << m;
    let d = problem.control_dim();
    match start {
        0 => vec![DVector::zeros(d); mm],
        1 => (0..mm)
            .map(|i| {
                let s = if i < mm / 2 { 1.0 } else { -1.0 };
                DVector::from_fn(d, |c, _| s * problem.control_box[c])
            })
            .collect(),
        _ => {
            let mix = seed ^ (start as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let mut rng = ChaCha8Rng::seed_from_u64(mix);
            let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
            for c in 0..d {
                let mut idx: Vec<usize> = (0..mm).collect();
                idx.shuffle(&mut rng);
                let col: Vec<f64> = (0..mm)
                    .map(|i| {
                        let u: f64 = rng.random();
                        problem.control_box[c] * (2.0 * (idx[i] as f64 + u) / mm as f64 - 1.0)
                    })
                    .collect();
                cols.push(col);
            }
            (0..mm)
                .map(|i| DVector::from_fn(d, |c, _| cols[c][i]))
                .collect()
        }
    }
}

struct StartOutcome {
    value: f64,
    w: Vec<DVector<f64>>,
    x0: DVector<f64>,
    history: Vec<HistoryRow>,
    evals: usize,
}

/// Mean-preserving coordinate exchanges at shrinking step sizes.
fn pattern_polish(
    eval: &mut dyn FnMut(&[DVector<f64>]) -> f64,
    w: &mut Vec<DVector<f64>>,
    best: &mut f64,
    box_half: &[f64],
    tv: Option<f64>,
    scale: f64,
) {
    let mm = w.len();
    let d = w[0].len();
    for shrink in [0.25, 0.0625, 0.015625] {
        let delta = shrink * scale;
        let mut improved = true;
        let mut rounds = 0;
        while improved && rounds < 4 {
            improved = false;
            rounds += 1;
            for i in 0..mm {
                for &j in &[(i + 1) % mm, (i + mm / 2) % mm] {
                    if i == j {
                        continue;
                    }
                    for c in 0..d {
                        for sgn in [1.0, -1.0] {
                            let a = w[i][c] + sgn * delta;
                            let b = w[j][c] - sgn * delta;
                            if a.abs() > box_half[c] || b.abs() > box_half[c] {
                                continue;
                            }
                            let (oa, ob) = (w[i][c], w[j][c]);
                            w[i][c] = a;
                            w[j][c] = b;
                            let ok_tv = match tv {
                                Some(k) => vector_total_variation(w) <= k + 1e-10,
                                None => true,
                            };
                            let val = if ok_tv { eval(w) } else { f64::NEG_INFINITY };
                            if val > *best + 1e-14 {
                                *best = val;
                                improved = true;
                            } else {
                                w[i][c] = oa;
                                w[j][c] = ob;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn run_start_plain(
    problem: &ProcessProblem,
    m: u32,
    cfg: &SolverConfig,
    tv: Option<f64>,
    start: usize,
) -> Result<StartOutcome, OptimizerError> {
    let d = problem.control_dim();
    let scale = problem.control_box.iter().cloned().fold(0.0f64, f64::max);
    let mut w = project_controls(&start_values(problem, m, start, cfg.seed), &problem.control_box, true, tv)?;
    let mut x0 = match &cfg.periodic_mode {
        PeriodicMode::Fixed { x0 } => {
            let (z, _) = problem.set.project(&DVector::from_column_slice(x0));
            z
        }
        PeriodicMode::Free => problem.set.interior_point().clone(),
    };
    let mut evals = 0usize;
    let refresh = |w: &[DVector<f64>], x0: &mut DVector<f64>, evals: &mut usize| {
        let grid = ControlGrid::new(m, problem.horizon, w.to_vec()).expect("sized grid");
        if let Ok((z, _)) = periodic_orbit(&problem.set, &problem.dynamics, &grid, x0, 1e-9, 200) {
            *x0 = z;
        }
        *evals += 1;
    };
    if matches!(cfg.periodic_mode, PeriodicMode::Free) {
        refresh(&w, &mut x0, &mut evals);
    }
    let eval_at = |w: &[DVector<f64>], x0: &DVector<f64>, evals: &mut usize| -> f64 {
        *evals += 1;
        let grid = ControlGrid::new(m, problem.horizon, w.to_vec()).expect("sized grid");
        problem.objective(&grid, x0).0
    };

    let mut history = Vec::new();
    let mut value = eval_at(&w, &x0, &mut evals);
    let mut best = (value, w.clone(), x0.clone());
    history.push(HistoryRow {
        iter: 0,
        start,
        value,
        step: 0.0,
    });
    let mut last_gain = 0usize;
    for k in 1..=cfg.max_iters {
        let flat = flatten(&w);
        let x0_k = x0.clone();
        let mut fd_evals = 0usize;
        let g = estimate_gradient(
            |v| {
                let cand = unflatten(v, d);
                let grid = ControlGrid::new(m, problem.horizon, cand).expect("sized grid");
                problem.objective(&grid, &x0_k).0
            },
            &flat,
            cfg.fd_step,
        );
        fd_evals += 2 * flat.len();
        evals += fd_evals;
        let gn = g.norm();
        let step = cfg.step0 * scale / (k as f64).sqrt();
        if gn > 1e-13 {
            let cand = &flat + (step / gn) * g;
            w = project_controls(&unflatten(&cand, d), &problem.control_box, true, tv)?;
            // Keep the recorded start state periodic for the controls it is
            // recorded with; a stale pairing can price an unreachable
            // trajectory.
            if matches!(cfg.periodic_mode, PeriodicMode::Free) {
                refresh(&w, &mut x0, &mut evals);
            }
        }
        value = eval_at(&w, &x0, &mut evals);
        history.push(HistoryRow {
            iter: k,
            start,
            value,
            step,
        });
        if value > best.0 + cfg.stall_tol {
            best = (value, w.clone(), x0.clone());
            last_gain = k;
        } else if k - last_gain >= cfg.stall_iters {
            break;
        }
    }

    let (mut bv, mut bw, mut bx) = (best.0, best.1, best.2);
    if cfg.polish {
        let mut pw = bw.clone();
        let mut pv = bv;
        let x0_p = bx.clone();
        let mut eval = |cand: &[DVector<f64>]| -> f64 {
            let grid = ControlGrid::new(m, problem.horizon, cand.to_vec()).expect("sized grid");
            problem.objective(&grid, &x0_p).0
        };
        pattern_polish(&mut eval, &mut pw, &mut pv, &problem.control_box, tv, scale);
        evals += 3 * 4 * 2 * 2 * pw.len().max(1);
        // Price the polished controls at their own periodic start before
        // accepting them.
        let mut px = x0_p;
        if matches!(cfg.periodic_mode, PeriodicMode::Free) {
            refresh(&pw, &mut px, &mut evals);
        }
        let honest = eval_at(&pw, &px, &mut evals);
        if honest > bv {
            bv = honest;
            bw = pw;
            bx = px;
        }
    }
    // The reported value always belongs to the reported pair.
    if matches!(cfg.periodic_mode, PeriodicMode::Free) {
        refresh(&bw, &mut bx, &mut evals);
        bv = eval_at(&bw, &bx, &mut evals);
    }
    Ok(StartOutcome {
        value: bv,
        w: bw,
        x0: bx,
        history,
        evals,
    })
}

/// Maximizes the reward over feasible control grids at mesh level `m`.
pub fn optimize(
    problem: &ProcessProblem,
    m: u32,
    cfg: &SolverConfig,
) -> Result<SolveReport, OptimizerError> {
    cfg.validate()?;
    let tv = cfg.tv_bound.or(problem.tv_bound);
    let outcomes: Vec<Result<StartOutcome, OptimizerError>> = (0..cfg.starts)
        .into_par_iter()
        .map(|s| run_start_plain(problem, m, cfg, tv, s))
        .collect();
    let mut results = Vec::with_capacity(cfg.starts);
    for o in outcomes {
        results.push(o?);
    }
    let mut best = 0usize;
    for (i, r) in results.iter().enumerate() {
        if r.value > results[best].value {
            best = i;
        }
    }
    let mut value = results[best].value;
    let mut w = results[best].w.clone();
    let x0 = results[best].x0.clone();

    if cfg.bv_polish && matches!(problem.cost.f1, SpeedFn::HalfAbs) {
        let grid = ControlGrid::new(m, problem.horizon, w.clone()).expect("sized grid");
        let (_, traj) = problem.objective(&grid, &x0);
        if let Ok(better) = bv_regularize(problem, &grid, &traj) {
            let (jb, _) = problem.objective(&better, &x0);
            if jb >= value - 1e-12 {
                value = jb;
                w = better.values().to_vec();
            }
        }
    }

    let grid = ControlGrid::new(m, problem.horizon, w).expect("sized grid");
    let mut history: Vec<HistoryRow> = Vec::new();
    let mut start_values_out = Vec::with_capacity(cfg.starts);
    let mut evaluations = 0;
    for r in &results {
        history.extend(r.history.iter().cloned());
        start_values_out.push(r.value);
        evaluations += r.evals;
    }
    Ok(SolveReport {
        value,
        grid,
        x0,
        start_values: start_values_out,
        history,
        evaluations,
    })
}

/// Maximizes the reference-anchored penalized objective.  The initial
/// state is a decision variable alongside the controls.
pub fn optimize_pm(pm: &PmProblem, cfg: &SolverConfig) -> Result<SolveReport, OptimizerError> {
    cfg.validate()?;
    let problem = pm.problem();
    let d = problem.control_dim();
    let n = problem.set.dim();
    let mm = pm.intervals();
    let scale = problem.control_box.iter().cloned().fold(0.0f64, f64::max);
    let tv = cfg.tv_bound.or(problem.tv_bound);
    let ref_w = pm.reference_controls().to_vec();
    let ref_x0 = pm.reference_nodes()[0].clone();

    let run_start = |start: usize| -> Result<StartOutcome, OptimizerError> {
        let mut w = if start == 0 {
            ref_w.clone()
        } else {
            let mix = cfg.seed ^ (start as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let mut rng = ChaCha8Rng::seed_from_u64(mix);
            let amp = 0.05 * scale * start as f64 / cfg.starts.max(1) as f64;
            let noisy: Vec<DVector<f64>> = ref_w
                .iter()
                .map(|wi| {
                    DVector::from_fn(d, |c, _| {
                        (wi[c] + amp * (rng.random::<f64>() * 2.0 - 1.0))
                            .clamp(-problem.control_box[c], problem.control_box[c])
                    })
                })
                .collect();
            noisy
        };
        w = project_controls(&w, &problem.control_box, true, tv)?;
        let mut x0 = ref_x0.clone();
        let mut evals = 0usize;
        let score = |x0: &DVector<f64>, w: &[DVector<f64>], evals: &mut usize| -> f64 {
            *evals += 1;
            pm.score(x0, w).value
        };
        let mut value = score(&x0, &w, &mut evals);
        let mut best = (value, w.clone(), x0.clone());
        let mut history = vec![HistoryRow {
            iter: 0,
            start,
            value,
            step: 0.0,
        }];
        let mut last_gain = 0usize;
        for k in 1..=cfg.max_iters {
            let mut flat = DVector::zeros(n + mm * d);
            flat.rows_mut(0, n).copy_from(&x0);
            flat.rows_mut(n, mm * d).copy_from(&flatten(&w));
            let g = estimate_gradient(
                |v| {
                    let xx = v.rows(0, n).into_owned();
                    let ww = unflatten(&v.rows(n, mm * d).into_owned(), d);
                    pm.score(&xx, &ww).value
                },
                &flat,
                cfg.fd_step,
            );
            evals += 2 * flat.len();
            let gn = g.norm();
            let step = cfg.step0 * scale / (k as f64).sqrt();
            if gn > 1e-13 {
                let cand = &flat + (step / gn) * g;
                x0 = cand.rows(0, n).into_owned();
                w = project_controls(&unflatten(&cand.rows(n, mm * d).into_owned(), d), &problem.control_box, true, tv)?;
            }
            value = score(&x0, &w, &mut evals);
            history.push(HistoryRow {
                iter: k,
                start,
                value,
                step,
            });
            if value > best.0 + cfg.stall_tol {
                best = (value, w.clone(), x0.clone());
                last_gain = k;
            } else if k - last_gain >= cfg.stall_iters {
                break;
            }
        }
        let (mut bv, mut bw, bx) = (best.0, best.1, best.2);
        if cfg.polish {
            let x0_p = bx.clone();
            let mut eval = |cand: &[DVector<f64>]| -> f64 { pm.score(&x0_p, cand).value };
            pattern_polish(&mut eval, &mut bw, &mut bv, &problem.control_box, tv, 0.25 * scale);
            evals += bw.len();
        }
        Ok(StartOutcome {
            value: bv,
            w: bw,
            x0: bx,
            history,
            evals,
        })
    };

    let outcomes: Vec<Result<StartOutcome, OptimizerError>> = (0..cfg.starts)
        .into_par_iter()
        .map(run_start)
        .collect();
    let mut results = Vec::with_capacity(cfg.starts);
    for o in outcomes {
        results.push(o?);
    }
    let mut best = 0usize;
    for (i, r) in results.iter().enumerate() {
        if r.value > results[best].value {
            best = i;
        }
    }
    // Pull the winner back inside the locality cap if the search drifted
    // out: blend toward the reference until strict evaluation accepts it.
    let mut w = results[best].w.clone();
    let mut x0 = results[best].x0.clone();
    let mut blend = 1.0;
    let value = loop {
        match pm.evaluate(&x0, &w) {
            Ok(e) => break e.value,
            Err(_) => {
                blend *= 0.5;
                if blend < 1e-6 {
                    w = ref_w.clone();
                    x0 = ref_x0.clone();
                    break pm.evaluate(&x0, &w).map(|e| e.value)?;
                }
                for (wi, ri) in w.iter_mut().zip(&ref_w) {
                    *wi = &*wi * 0.5 + 0.5 * ri;
                }
                x0 = 0.5 * &x0 + 0.5 * &ref_x0;
            }
        }
    };
    let mut history: Vec<HistoryRow> = Vec::new();
    let mut start_values_out = Vec::with_capacity(cfg.starts);
    let mut evaluations = 0;
    for r in &results {
        history.extend(r.history.iter().cloned());
        start_values_out.push(r.value);
        evaluations += r.evals;
    }
    Ok(SolveReport {
        value,
        grid: ControlGrid::new(pm.level(), problem.horizon, w).expect("sized grid"),
        x0,
        start_values: start_values_out,
        history,
        evaluations,
    })
}

/// Replaces the control by its average on maximal wall-hold runs and
/// maximal interior runs of the realized trajectory.  Keeps the reward
/// when `f2 = 0`, improves it for strictly convex running costs, and
/// never increases the total variation.
pub fn bv_regularize(
    problem: &ProcessProblem,
    grid: &ControlGrid,
    traj: &crate::sweeping::DiscreteTrajectory,
) -> Result<ControlGrid, OptimizerError> {
    if !matches!(problem.cost.f1, SpeedFn::HalfAbs) {
        return Err(OptimizerError::NotOneLink);
    }
    let mm = grid.intervals();
    assert_eq!(traj.intervals(), mm, "trajectory mesh");
    let x0 = traj.states[0].clone();
    let (j_old, _) = problem.objective(grid, &x0);

    // Interval classes: hold at a given face, strictly interior, or a
    // transition that is left untouched.
    let tol = 1e-9;
    let face_at = |x: &DVector<f64>| -> Option<usize> {
        let gaps = problem.set.face_gaps(x);
        (0..problem.set.num_faces()).find(|&j| gaps[j] >= -tol)
    };
    #[derive(PartialEq, Clone, Copy)]
    enum Class {
        Hold(usize),
        Interior,
        Transition,
    }
    let classes: Vec<Class> = (0..mm)
        .map(|i| {
            let fa = face_at(&traj.states[i]);
            let fb = face_at(&traj.states[i + 1]);
            match (fa, fb) {
                (Some(a), Some(b)) if a == b => Class::Hold(a),
                (None, None) => Class::Interior,
                _ => Class::Transition,
            }
        })
        .collect();

    let mut values = grid.values().to_vec();
    let mut i = 0;
    while i < mm {
        if classes[i] == Class::Transition {
            i += 1;
            continue;
        }
        let mut j = i + 1;
        while j < mm && classes[j] == classes[i] {
            j += 1;
        }
        if j - i >= 2 {
            let mut avg = DVector::zeros(values[0].len());
            for v in &values[i..j] {
                avg += v;
            }
            avg /= (j - i) as f64;
            for v in values.iter_mut().take(j).skip(i) {
                v.copy_from(&avg);
            }
        }
        i = j;
    }

    let better = ControlGrid::new(grid.level(), grid.horizon(), values).expect("sized grid");
    let (j_new, _) = problem.objective(&better, &x0);
    if j_new >= j_old - 1e-12 {
        Ok(better)
    } else {
        Ok(grid.clone())
    }
}
