//! Discrete transcriptions of the periodic gait problem.
//!
//! Two regimes share this module.  The plain regime evaluates the reward
//! `J = h sum_i (f1(reaction_i) - f2(t_i, w_i))` of a control grid by
//! forward catching-up simulation.  The verification regime builds, around
//! a given reference process, the proximally penalized problem whose
//! maximizers approximate the reference as the mesh refines: node sets get
//! per-interval offset shifts, the dynamics carry the reference's averaged
//! reaction as a fixed drift, and deviations from the reference are charged
//! through the weight `kappa = 1 / sqrt(alpha)`, where `alpha` is the
//! reference's own averaging defect at the coarse mesh.

use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::crawler::{CrawlerModel, OneLink};
use crate::polytope::Polyhedron;
use crate::sweeping::{ControlGrid, DiscreteTrajectory, Dynamics};

type SpeedEval = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
type SpeedGens = Arc<dyn Fn(&DVector<f64>) -> Vec<DVector<f64>> + Send + Sync>;
type CostEval = Arc<dyn Fn(f64, &DVector<f64>) -> f64 + Send + Sync>;
type CostGrad = Arc<dyn Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync>;

/// The reward rate `f1`: Lipschitz, positively homogeneous, `f1(0) = 0`.
pub enum SpeedFn {
    /// `f1(w) = |w| / 2` in one dimension.
    HalfAbs,
    /// Body velocity of a crawler model.
    Crawler(Arc<CrawlerModel>),
    /// User-supplied evaluator with its slope generators.
    Custom {
        eval: SpeedEval,
        generators: SpeedGens,
        dim: usize,
    },
}

impl Clone for SpeedFn {
    fn clone(&self) -> Self {
        match self {
            SpeedFn::HalfAbs => SpeedFn::HalfAbs,
            SpeedFn::Crawler(m) => SpeedFn::Crawler(Arc::clone(m)),
            SpeedFn::Custom {
                eval,
                generators,
                dim,
            } => SpeedFn::Custom {
                eval: Arc::clone(eval),
                generators: Arc::clone(generators),
                dim: *dim,
            },
        }
    }
}

impl SpeedFn {
    pub fn dim(&self) -> usize {
        match self {
            SpeedFn::HalfAbs => 1,
            SpeedFn::Crawler(m) => m.shape_dim(),
            SpeedFn::Custom { dim, .. } => *dim,
        }
    }

    pub fn eval(&self, w: &DVector<f64>) -> f64 {
        match self {
            SpeedFn::HalfAbs => 0.5 * w[0].abs(),
            SpeedFn::Crawler(m) => m.body_velocity(w).0,
            SpeedFn::Custom { eval, .. } => eval(w),
        }
    }

    /// Slope generators of the active linear pieces at `w`.
    pub fn generators(&self, w: &DVector<f64>) -> Vec<DVector<f64>> {
        match self {
            SpeedFn::HalfAbs => {
                if w[0] > 0.0 {
                    vec![DVector::from_column_slice(&[0.5])]
                } else if w[0] < 0.0 {
                    vec![DVector::from_column_slice(&[-0.5])]
                } else {
                    vec![
                        DVector::from_column_slice(&[-0.5]),
                        DVector::from_column_slice(&[0.5]),
                    ]
                }
            }
            SpeedFn::Crawler(m) => m.velocity_subdifferential(w),
            SpeedFn::Custom { generators, .. } => generators(w),
        }
    }
}

/// The running control cost `f2(t, u)`.
pub enum RunningCost {
    Zero,
    /// `f2 = (weight / 2) |u|^2`.
    Quadratic { weight: f64 },
    /// Smooth user cost with its gradient in `u`.
    Custom { eval: CostEval, grad: CostGrad },
}

impl Clone for RunningCost {
    fn clone(&self) -> Self {
        match self {
            RunningCost::Zero => RunningCost::Zero,
            RunningCost::Quadratic { weight } => RunningCost::Quadratic { weight: *weight },
            RunningCost::Custom { eval, grad } => RunningCost::Custom {
                eval: Arc::clone(eval),
                grad: Arc::clone(grad),
            },
        }
    }
}

impl RunningCost {
    pub fn eval(&self, t: f64, u: &DVector<f64>) -> f64 {
        match self {
            RunningCost::Zero => 0.0,
            RunningCost::Quadratic { weight } => 0.5 * weight * u.norm_squared(),
            RunningCost::Custom { eval, .. } => eval(t, u),
        }
    }

    pub fn grad(&self, t: f64, u: &DVector<f64>) -> DVector<f64> {
        match self {
            RunningCost::Zero => DVector::zeros(u.len()),
            RunningCost::Quadratic { weight } => *weight * u,
            RunningCost::Custom { grad, .. } => grad(t, u),
        }
    }

    /// Largest gap between the stated gradient and central differences.
    pub fn gradient_defect(&self, t: f64, u: &DVector<f64>) -> f64 {
        let g = self.grad(t, u);
        let d = 1e-6;
        let mut worst = 0.0f64;
        for k in 0..u.len() {
            let mut up = u.clone();
            let mut um = u.clone();
            up[k] += d;
            um[k] -= d;
            let fd = (self.eval(t, &up) - self.eval(t, &um)) / (2.0 * d);
            worst = worst.max((fd - g[k]).abs());
        }
        worst
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum RunningCostData {
    Zero,
    Quadratic { weight: f64 },
}

impl Serialize for RunningCost {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        let data = match self {
            RunningCost::Zero => RunningCostData::Zero,
            RunningCost::Quadratic { weight } => RunningCostData::Quadratic { weight: *weight },
            RunningCost::Custom { .. } => {
                return Err(serde::ser::Error::custom(
                    "closure-backed running cost has no serial form",
                ))
            }
        };
        data.serialize(ser)
    }
}

impl<'de> Deserialize<'de> for RunningCost {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        Ok(match RunningCostData::deserialize(de)? {
            RunningCostData::Zero => RunningCost::Zero,
            RunningCostData::Quadratic { weight } => RunningCost::Quadratic { weight },
        })
    }
}

/// On-disk cost description: `{"f2": {"kind": ...}}`.
#[derive(Clone, Serialize, Deserialize)]
pub struct CostConfig {
    pub f2: RunningCost,
}

/// Complete running reward `f1 - f2`.
#[derive(Clone)]
pub struct CostSpec {
    pub f1: SpeedFn,
    pub f2: RunningCost,
}

impl CostSpec {
    pub fn new(f1: SpeedFn, f2: RunningCost) -> Self {
        CostSpec { f1, f2 }
    }

    /// Reward accumulated over one interval of width `h`.
    pub fn stage(&self, t: f64, reaction: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self.f1.eval(reaction) - self.f2.eval(t, u)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TranscriptionError {
    /// The control box must contain zero in its interior.
    InfeasibleConstraints { index: usize },
    /// Control values violate a declared constraint.
    ControlViolation { which: &'static str },
    /// The reference process cannot anchor a penalized problem.
    ReferenceInfeasible { reason: &'static str },
    /// The candidate leaves the trust region of the penalized problem.
    LocalityViolated { lhs: f64, bound: f64 },
}

impl std::fmt::Display for TranscriptionError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TranscriptionError::InfeasibleConstraints { index } => {
                write!(f, "control box half-width {index} is not positive")
            }
            TranscriptionError::ControlViolation { which } => {
                write!(f, "control values violate the {which} constraint")
            }
            TranscriptionError::ReferenceInfeasible { reason } => {
                write!(f, "reference process rejected: {reason}")
            }
            TranscriptionError::LocalityViolated { lhs, bound } => {
                write!(f, "locality term {lhs:.6e} exceeds {bound:.6e}")
            }
        }
    }
}

impl std::error::Error for TranscriptionError {}

/// Left-endpoint reward of a control grid:
/// `J = h sum_i (f1(xi_i) - f2(t_i, w_i))`.
pub fn objective(
    set: &Polyhedron,
    dynamics: &Dynamics,
    cost: &CostSpec,
    grid: &ControlGrid,
    x0: &DVector<f64>,
) -> (f64, DiscreteTrajectory) {
    let traj = crate::sweeping::simulate(set, dynamics, grid, x0);
    let h = grid.h();
    let mut j = 0.0;
    for i in 0..grid.intervals() {
        j += h * cost.stage(grid.node(i), &traj.reactions[i], grid.value(i));
    }
    (j, traj)
}

/// Shared description of one optimization instance.
#[derive(Clone)]
pub struct ProcessProblem {
    pub set: Polyhedron,
    pub dynamics: Dynamics,
    pub cost: CostSpec,
    /// Symmetric control box half-widths, one per control coordinate.
    pub control_box: Vec<f64>,
    pub horizon: f64,
    /// Optional bound on the total variation of the control sequence.
    pub tv_bound: Option<f64>,
}

impl ProcessProblem {
    pub fn one_link(ol: &OneLink, f2: RunningCost) -> Self {
        ProcessProblem {
            set: ol.set(),
            dynamics: Dynamics::control(1),
            cost: CostSpec::new(SpeedFn::HalfAbs, f2),
            control_box: vec![ol.control_halfwidth()],
            horizon: ol.horizon,
            tv_bound: None,
        }
    }

    pub fn crawler(model: &CrawlerModel, f2: RunningCost) -> Self {
        let d = model.shape_dim();
        ProcessProblem {
            set: model.set().clone(),
            dynamics: Dynamics::control(d),
            cost: CostSpec::new(SpeedFn::Crawler(Arc::new(model.clone())), f2),
            control_box: model.control_box().to_vec(),
            horizon: model.horizon(),
            tv_bound: None,
        }
    }

    pub fn with_tv_bound(mut self, k: f64) -> Self {
        self.tv_bound = Some(k);
        self
    }

    pub fn control_dim(&self) -> usize {
        self.control_box.len()
    }

    pub fn objective(&self, grid: &ControlGrid, x0: &DVector<f64>) -> (f64, DiscreteTrajectory) {
        objective(&self.set, &self.dynamics, &self.cost, grid, x0)
    }

    /// Feasibility projection for this problem's control constraints.
    pub fn project(&self, values: &[DVector<f64>]) -> Result<Vec<DVector<f64>>, TranscriptionError> {
        project_controls(values, &self.control_box, true, self.tv_bound)
    }
}

/// Sum of jump norms between consecutive values, no wraparound.
pub fn vector_total_variation(values: &[DVector<f64>]) -> f64 {
    values.windows(2).map(|p| (&p[1] - &p[0]).norm()).sum()
}

/// Euclidean projection onto `{w in box^M : sum_i w_i = 0}` (the zero-mean
/// part optional), with an optional total-variation budget enforced
/// afterwards by diffusion passes and a radial fallback.
pub fn project_controls(
    values: &[DVector<f64>],
    box_half: &[f64],
    zero_mean: bool,
    tv_bound: Option<f64>,
) -> Result<Vec<DVector<f64>>, TranscriptionError> {
    for (i, &a) in box_half.iter().enumerate() {
        if !(a > 0.0 && a.is_finite()) {
            return Err(TranscriptionError::InfeasibleConstraints { index: i });
        }
    }
    let m = values.len();
    let d = box_half.len();
    assert!(m > 0, "empty control sequence");
    for v in values {
        assert_eq!(v.len(), d, "control dimension");
    }

    let clip = |v: &DVector<f64>| -> DVector<f64> {
        DVector::from_fn(d, |k, _| v[k].clamp(-box_half[k], box_half[k]))
    };

    let mut v: Vec<DVector<f64>> = values.to_vec();
    if !zero_mean {
        for w in v.iter_mut() {
            *w = clip(w);
        }
    } else {
        // Alternating projections with correction terms converge to the
        // exact metric projection onto the intersection.
        let mut p = vec![DVector::<f64>::zeros(d); m];
        let mut q = vec![DVector::<f64>::zeros(d); m];
        let mut prev = v.clone();
        for _ in 0..20_000 {
            for i in 0..m {
                let y = &v[i] + &p[i];
                let c = clip(&y);
                p[i] = y - &c;
                v[i] = c;
            }
            let mut mean = DVector::<f64>::zeros(d);
            for i in 0..m {
                v[i] += &q[i];
                mean += &v[i];
            }
            mean /= m as f64;
            let mut sweep_gap = 0.0f64;
            for i in 0..m {
                let newv = &v[i] - &mean;
                q[i] = &v[i] - &newv;
                sweep_gap = sweep_gap.max((&newv - &prev[i]).norm());
                prev[i] = newv.clone();
                v[i] = newv;
            }
            if sweep_gap <= 1e-13 {
                break;
            }
        }
        // Exactness polish: clamp, then cancel any residual mean across
        // the coordinates that can absorb their share inside the box.
        for _ in 0..8 {
            for w in v.iter_mut() {
                *w = clip(w);
            }
            let mut done = true;
            for k in 0..d {
                let total: f64 = v.iter().map(|w| w[k]).sum();
                if total.abs() <= 1e-14 * m as f64 {
                    continue;
                }
                done = false;
                let share = total / m as f64;
                let free: Vec<usize> = (0..m)
                    .filter(|&i| (v[i][k] - share).abs() <= box_half[k])
                    .collect();
                let free = if free.is_empty() { (0..m).collect::<Vec<_>>() } else { free };
                let share = total / free.len() as f64;
                for &i in &free {
                    v[i][k] -= share;
                }
            }
            if done {
                break;
            }
        }
        for w in v.iter_mut() {
            *w = clip(w);
        }
    }

    if let Some(k) = tv_bound {
        if k < 0.0 {
            return Err(TranscriptionError::ControlViolation {
                which: "total variation bound",
            });
        }
        // Diffusion strictly shrinks the variation while preserving the
        // mean and the box; finish with an exact radial contraction toward
        // the flat gait if the budget is still exceeded.
        let mut rounds = 0;
        while vector_total_variation(&v) > k + 1e-10 && rounds < 500 {
            let theta = 0.45;
            let old = v.clone();
            for i in 0..m {
                let left = if i > 0 { &old[i - 1] } else { &old[i] };
                let right = if i + 1 < m { &old[i + 1] } else { &old[i] };
                v[i] = (1.0 - 2.0 * theta) * &old[i] + theta * left + theta * right;
            }
            rounds += 1;
        }
        let tv = vector_total_variation(&v);
        if tv > k + 1e-10 {
            let anchor: DVector<f64> = if zero_mean {
                DVector::zeros(d)
            } else {
                let mut mean = DVector::<f64>::zeros(d);
                for w in &v {
                    mean += w;
                }
                clip(&(mean / m as f64))
            };
            let s = k / tv;
            for w in v.iter_mut() {
                *w = &anchor + s * (&*w - &anchor);
            }
        }
    }
    Ok(v)
}

/// Locality radius used when none is supplied.
pub const DEFAULT_EPS_BAR: f64 = 0.5;

/// The reference-anchored penalized problem at mesh level `m`.
pub struct PmProblem {
    problem: ProcessProblem,
    m: u32,
    /// Per-node face offsets; node `2^m` reuses entry zero.
    c_shift: Vec<DVector<f64>>,
    node_sets: Vec<Polyhedron>,
    /// Averaged reference reaction on each interval (drift shift).
    shifts: Vec<DVector<f64>>,
    /// Norm of the residual vector the shift cannot represent.
    r_bar: Vec<f64>,
    /// Interval averages of the reference control at mesh `m`.
    u_avg: Vec<DVector<f64>>,
    /// Reference states at the coarse nodes.
    x_nodes: Vec<DVector<f64>>,
    /// Fine reference data for exact penalty integrals.
    fine_inc: Vec<DVector<f64>>,
    fine_u: Vec<DVector<f64>>,
    alpha: f64,
    kappa: f64,
    eps_bar: f64,
}

/// Everything a penalized evaluation produces.
pub struct PmEvaluation {
    /// Penalized value (negative infinity if the penalty weight is
    /// infinite and the deviation is not exactly zero).
    pub value: f64,
    /// Unpenalized reward of the realized process.
    pub plain: f64,
    /// Quadratic deviation from the reference (the locality left side).
    pub deviation: f64,
    /// Largest violation of the per-interval drift slack budget.
    pub slack_excess: f64,
    pub trajectory: DiscreteTrajectory,
}

impl PmProblem {
    pub fn level(&self) -> u32 {
        self.m
    }

    pub fn intervals(&self) -> usize {
        1 << self.m
    }

    pub fn h(&self) -> f64 {
        self.problem.horizon / self.intervals() as f64
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn eps_bar(&self) -> f64 {
        self.eps_bar
    }

    pub fn reference_controls(&self) -> &[DVector<f64>] {
        &self.u_avg
    }

    pub fn reference_nodes(&self) -> &[DVector<f64>] {
        &self.x_nodes
    }

    pub fn face_offsets(&self) -> &[DVector<f64>] {
        &self.c_shift
    }

    pub fn drift_slack(&self) -> &[f64] {
        &self.r_bar
    }

    pub fn problem(&self) -> &ProcessProblem {
        &self.problem
    }

    /// Reference control as a grid at this mesh.
    pub fn reference_grid(&self) -> ControlGrid {
        ControlGrid::new(self.m, self.problem.horizon, self.u_avg.clone()).expect("valid sizes")
    }

    /// Quadratic deviation of a realized process from the reference:
    /// `|x0 - ref0|^2 + sum_i int(|inc_i - ref_rate|^2 + |w_i - ref_u|^2)`.
    fn deviation(&self, x0: &DVector<f64>, increments: &[DVector<f64>], w: &[DVector<f64>]) -> f64 {
        let mm = self.intervals();
        let ratio = self.fine_inc.len() / mm;
        let hf = self.problem.horizon / self.fine_inc.len() as f64;
        let mut q = (x0 - &self.x_nodes[0]).norm_squared();
        for i in 0..mm {
            for k in i * ratio..(i + 1) * ratio {
                q += hf * (&increments[i] - &self.fine_inc[k]).norm_squared();
                q += hf * (&w[i] - &self.fine_u[k]).norm_squared();
            }
        }
        q
    }

    /// Runs the shifted catching-up dynamics and scores the penalized
    /// objective without any constraint checks.  Search loops use this for
    /// finite differences; final answers go through `evaluate`.
    pub fn score(&self, x0: &DVector<f64>, w: &[DVector<f64>]) -> PmEvaluation {
        let mm = self.intervals();
        let h = self.h();
        let dyn_ = &self.problem.dynamics;
        let mut states = Vec::with_capacity(mm + 1);
        let mut increments = Vec::with_capacity(mm);
        let mut reactions = Vec::with_capacity(mm);
        let mut decomps = Vec::with_capacity(mm);
        let mut slack_excess = 0.0f64;
        states.push(x0.clone());
        for i in 0..mm {
            let z = states.last().unwrap().clone();
            let t = i as f64 * h;
            let g = dyn_.eval(t, &z, &w[i]);
            let drift = &g - &self.shifts[i];
            let pred = &z + h * &drift;
            let arrive_set = &self.node_sets[(i + 1) % mm];
            let (next, dec) = arrive_set.project(&pred);
            let inc = (&next - &z) / h;
            // Slack audit: the drift equation allows a deviation of at most
            // the per-interval residual budget.
            let dev = (&inc - &drift).norm();
            slack_excess = slack_excess.max(dev - self.r_bar[i]);
            reactions.push(&g - &inc);
            increments.push(inc);
            decomps.push(dec);
            states.push(next);
        }

        let q = self.deviation(x0, &increments, w);
        let mut plain = 0.0;
        for i in 0..mm {
            plain += h * self.problem.cost.stage(i as f64 * h, &reactions[i], &w[i]);
        }
        let value = if self.kappa.is_finite() {
            plain - 0.5 * self.kappa * q
        } else if q <= 1e-12 {
            plain
        } else {
            f64::NEG_INFINITY
        };
        let trajectory = DiscreteTrajectory {
            horizon: self.problem.horizon,
            states,
            increments,
            reactions,
            decompositions: decomps,
            outputs: None,
        };
        PmEvaluation {
            value,
            plain,
            deviation: q,
            slack_excess,
            trajectory,
        }
    }

    /// Like `score` but rejects control constraint violations and
    /// candidates outside the locality cap.
    pub fn evaluate(
        &self,
        x0: &DVector<f64>,
        w: &[DVector<f64>],
    ) -> Result<PmEvaluation, TranscriptionError> {
        let mm = self.intervals();
        let d = self.problem.control_dim();
        if w.len() != mm || w.iter().any(|wi| wi.len() != d) {
            return Err(TranscriptionError::ControlViolation { which: "shape" });
        }
        for wi in w {
            for k in 0..d {
                if wi[k].abs() > self.problem.control_box[k] + 1e-12 {
                    return Err(TranscriptionError::ControlViolation { which: "box" });
                }
            }
        }
        let mut sum = DVector::<f64>::zeros(d);
        for wi in w {
            sum += wi;
        }
        let scale = 1.0 + self.problem.control_box.iter().fold(0.0f64, |a, &b| a.max(b));
        if sum.norm() > 1e-9 * mm as f64 * scale {
            return Err(TranscriptionError::ControlViolation { which: "zero-mean" });
        }
        let out = self.score(x0, w);
        let bound = self.eps_bar / 2.0;
        if out.deviation > bound + 1e-12 {
            return Err(TranscriptionError::LocalityViolated {
                lhs: out.deviation,
                bound,
            });
        }
        Ok(out)
    }

    pub fn objective(&self, x0: &DVector<f64>, w: &[DVector<f64>]) -> Result<f64, TranscriptionError> {
        Ok(self.evaluate(x0, w)?.value)
    }
}

/// Doubles the mesh of a reference process: controls duplicate, states gain
/// their interval midpoints.  Exact for piecewise data.
fn refine_reference(traj: &DiscreteTrajectory, grid: &ControlGrid) -> (DiscreteTrajectory, ControlGrid) {
    let g2 = grid.refine();
    let mut states = Vec::with_capacity(2 * traj.intervals() + 1);
    let mut increments = Vec::with_capacity(2 * traj.intervals());
    let mut reactions = Vec::with_capacity(2 * traj.intervals());
    let mut decomps = Vec::with_capacity(2 * traj.intervals());
    for i in 0..traj.intervals() {
        let mid = 0.5 * (&traj.states[i] + &traj.states[i + 1]);
        states.push(traj.states[i].clone());
        states.push(mid);
        increments.push(traj.increments[i].clone());
        increments.push(traj.increments[i].clone());
        reactions.push(traj.reactions[i].clone());
        reactions.push(traj.reactions[i].clone());
        decomps.push(traj.decompositions[i].clone());
        decomps.push(traj.decompositions[i].clone());
    }
    states.push(traj.states[traj.intervals()].clone());
    (
        DiscreteTrajectory {
            horizon: traj.horizon,
            states,
            increments,
            reactions,
            decompositions: decomps,
            outputs: None,
        },
        g2,
    )
}

/// Builds the penalized problem at mesh `m` around a reference process
/// given at its own (typically finer) dyadic mesh.
pub fn build_pm(
    problem: &ProcessProblem,
    reference: (&DiscreteTrajectory, &ControlGrid),
    m: u32,
    eps_bar: f64,
) -> Result<PmProblem, TranscriptionError> {
    let (traj0, grid0) = reference;
    if traj0.intervals() != grid0.intervals() {
        return Err(TranscriptionError::ReferenceInfeasible {
            reason: "trajectory and control grid have different meshes",
        });
    }
    if (traj0.horizon - problem.horizon).abs() > 1e-12 * (1.0 + problem.horizon) {
        return Err(TranscriptionError::ReferenceInfeasible {
            reason: "reference horizon differs from the problem horizon",
        });
    }
    // Refine the reference until it is at least as fine as the target mesh.
    let mut fine_traj = traj0.clone();
    let mut fine_grid = grid0.clone();
    while fine_grid.level() < m {
        let (t2, g2) = refine_reference(&fine_traj, &fine_grid);
        fine_traj = t2;
        fine_grid = g2;
    }
    let set = &problem.set;
    for x in &fine_traj.states {
        if !set.contains(x, 1e-7) {
            return Err(TranscriptionError::ReferenceInfeasible {
                reason: "reference state leaves the polyhedron",
            });
        }
    }
    if (fine_traj.final_state() - &fine_traj.states[0]).norm() > 1e-6 {
        return Err(TranscriptionError::ReferenceInfeasible {
            reason: "reference is not periodic",
        });
    }
    let mean = fine_grid.mean();
    if mean.norm() > 1e-8 {
        return Err(TranscriptionError::ReferenceInfeasible {
            reason: "reference control is not zero-mean",
        });
    }

    let mm = 1usize << m;
    let ratio = fine_traj.intervals() / mm;
    let h = problem.horizon / mm as f64;
    let hf = problem.horizon / fine_traj.intervals() as f64;
    let sigma = set.num_faces();

    // Coarse nodes and interval averages.
    let x_nodes: Vec<DVector<f64>> = (0..=mm).map(|i| fine_traj.states[i * ratio].clone()).collect();
    let mut coarse = fine_grid.clone();
    while coarse.level() > m {
        coarse = coarse.coarsen().expect("level positive");
    }
    let u_avg: Vec<DVector<f64>> = coarse.values().to_vec();

    // Per-interval face offsets: keep the base offset when the face stays
    // strictly inactive across the whole interval, else anchor it at the
    // left node of the reference.
    let base = set.offsets().clone();
    let mut c_shift = Vec::with_capacity(mm);
    for i in 0..mm {
        let mut ci = base.clone();
        for j in 0..sigma {
            let mut touched = false;
            for k in i * ratio..=(i + 1) * ratio {
                let gap = set.normals().row(j).transpose().dot(&fine_traj.states[k]) - base[j];
                if gap >= -1e-9 * (1.0 + base[j].abs()) {
                    touched = true;
                    break;
                }
            }
            if touched {
                ci[j] = set.normals().row(j).transpose().dot(&x_nodes[i]);
            }
        }
        c_shift.push(ci);
    }
    let mut node_sets = Vec::with_capacity(mm);
    for ci in &c_shift {
        node_sets.push(set.with_offsets(ci.clone()).map_err(|_| {
            TranscriptionError::ReferenceInfeasible {
                reason: "shifted node set lost its interior",
            }
        })?);
    }

    // Drift shift: interval average of the reference's reaction
    // g(s, ref_x(s), ref_u(s)) - ref_rate(s); and the residual the shift
    // cannot express, |avg g(s, ...) - g(t_i, x_i, u_avg_i)|.
    let mut shifts = Vec::with_capacity(mm);
    let mut r_bar = Vec::with_capacity(mm);
    for i in 0..mm {
        let t_i = i as f64 * h;
        let mut avg_g = DVector::<f64>::zeros(set.dim());
        for k in i * ratio..(i + 1) * ratio {
            // Midpoint state of the fine interval; exact for drives that
            // are at most affine in the state.
            let xm = 0.5 * (&fine_traj.states[k] + &fine_traj.states[k + 1]);
            let tm = (k as f64 + 0.5) * hf;
            avg_g += problem.dynamics.eval(tm, &xm, fine_grid.value(k));
        }
        avg_g /= ratio as f64;
        let omega = (&x_nodes[i + 1] - &x_nodes[i]) / h;
        shifts.push(&avg_g - &omega);
        let anchored = problem.dynamics.eval(t_i, &x_nodes[i], &u_avg[i]);
        r_bar.push((&avg_g - &anchored).norm());
    }

    // Averaging defect of the reference at this mesh.
    let mut alpha = 0.0;
    for i in 0..mm {
        let omega = (&x_nodes[i + 1] - &x_nodes[i]) / h;
        for k in i * ratio..(i + 1) * ratio {
            alpha += hf * (&omega - &fine_traj.increments[k]).norm_squared();
            alpha += hf * (&u_avg[i] - fine_grid.value(k)).norm_squared();
        }
    }
    let kappa = if alpha > 0.0 {
        1.0 / alpha.sqrt()
    } else {
        f64::INFINITY
    };

    Ok(PmProblem {
        problem: problem.clone(),
        m,
        c_shift,
        node_sets,
        shifts,
        r_bar,
        u_avg,
        x_nodes,
        fine_inc: fine_traj.increments.clone(),
        fine_u: fine_grid.values().to_vec(),
        alpha,
        kappa,
        eps_bar,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sweeping::{periodic_orbit, simulate};

    fn v1(a: f64) -> DVector<f64> {
        DVector::from_column_slice(&[a])
    }

    fn one_link_problem(f2: RunningCost) -> ProcessProblem {
        ProcessProblem::one_link(&OneLink::new(0.0, 1.0, 4.0).unwrap(), f2)
    }

    /// Four-phase gait: hold at the top, travel down, hold at the bottom,
    /// travel back up.  At these parameters each phase spans a quarter of
    /// the period.
    fn four_phase_grid(m: u32) -> ControlGrid {
        let mm = 1usize << m;
        let vals: Vec<DVector<f64>> = (0..mm)
            .map(|i| {
                let phase = i * 4 / mm;
                match phase {
                    0 => v1(1.0),
                    1 | 2 => v1(-1.0),
                    _ => v1(1.0),
                }
            })
            .collect();
        ControlGrid::new(m, 4.0, vals).unwrap()
    }

    #[test]
    fn cost_pieces_behave() {
        let q = RunningCost::Quadratic { weight: 0.3 };
        let u = DVector::from_column_slice(&[2.0, -1.0]);
        assert!((q.eval(0.0, &u) - 0.3 * 0.5 * 5.0).abs() < 1e-14);
        assert!(q.gradient_defect(0.0, &u) < 1e-5);
        let c = RunningCost::Custom {
            eval: Arc::new(|_t, u: &DVector<f64>| u[0].powi(4)),
            grad: Arc::new(|_t, u: &DVector<f64>| {
                DVector::from_column_slice(&[4.0 * u[0].powi(3)])
            }),
        };
        assert!(c.gradient_defect(0.0, &v1(0.7)) < 1e-5);
        let f1 = SpeedFn::HalfAbs;
        assert_eq!(f1.eval(&v1(0.0)), 0.0);
        for c in [0.5, 2.0, 10.0] {
            assert!((f1.eval(&v1(c * -3.0)) - c * f1.eval(&v1(-3.0))).abs() < 1e-12);
        }
    }

    #[test]
    fn cost_serde_round_trip() {
        let cfg = CostConfig {
            f2: RunningCost::Quadratic { weight: 0.25 },
        };
        let s = serde_json::to_string(&cfg).unwrap();
        assert!(s.contains("\"quadratic\""));
        let back: CostConfig = serde_json::from_str(&s).unwrap();
        match back.f2 {
            RunningCost::Quadratic { weight } => assert!((weight - 0.25).abs() < 1e-15),
            _ => panic!("wrong variant"),
        }
        let z: CostConfig = serde_json::from_str(r#"{"f2":{"kind":"zero"}}"#).unwrap();
        assert!(matches!(z.f2, RunningCost::Zero));
        let custom = RunningCost::Custom {
            eval: Arc::new(|_, _: &DVector<f64>| 0.0),
            grad: Arc::new(|_, u: &DVector<f64>| DVector::zeros(u.len())),
        };
        assert!(serde_json::to_string(&custom).is_err());
    }

    #[test]
    fn zero_control_earns_nothing() {
        let p = one_link_problem(RunningCost::Zero);
        let grid = ControlGrid::zeros(4, 4.0, 1);
        let (j, _) = p.objective(&grid, &v1(0.5));
        assert_eq!(j, 0.0);
    }

    #[test]
    fn four_phase_gait_reward_matches_hand_value() {
        let p = one_link_problem(RunningCost::Zero);
        let grid = four_phase_grid(8);
        let (j, traj) = p.objective(&grid, &v1(1.0));
        let h = grid.h();
        assert!((j - 1.0).abs() <= 2.0 * h, "j = {j}");
        // Periodic: back at the top after one period.
        assert!((traj.final_state()[0] - 1.0).abs() < 1e-12);
        let pq = one_link_problem(RunningCost::Quadratic { weight: 1.0 });
        let (jq, _) = pq.objective(&grid, &v1(1.0));
        assert!((jq + 1.0).abs() <= 2.0 * h, "jq = {jq}");
    }

    #[test]
    fn control_projection_hand_cases() {
        let out = project_controls(&[v1(2.0), v1(0.0)], &[1.0], true, None).unwrap();
        assert!((out[0][0] - 1.0).abs() < 1e-9, "{out:?}");
        assert!((out[1][0] + 1.0).abs() < 1e-9);
        let out = project_controls(&vec![v1(3.0); 6], &[1.0], true, None).unwrap();
        for w in &out {
            assert!(w[0].abs() < 1e-9);
        }
        // Feasible input is a fixed point.
        let vals = vec![v1(0.5), v1(-0.25), v1(-0.25)];
        let out = project_controls(&vals, &[1.0], true, None).unwrap();
        for (a, b) in out.iter().zip(&vals) {
            assert!((a - b).norm() < 1e-11);
        }
        assert!(matches!(
            project_controls(&[v1(0.0)], &[0.0], true, None),
            Err(TranscriptionError::InfeasibleConstraints { index: 0 })
        ));
    }

    #[test]
    fn control_projection_is_variational() {
        // The output must satisfy the projection inequality against
        // feasible competitors.
        let vals = vec![v1(1.7), v1(-0.3), v1(0.9), v1(-2.5)];
        let out = project_controls(&vals, &[1.0], true, None).unwrap();
        let sum: f64 = out.iter().map(|w| w[0]).sum();
        assert!(sum.abs() < 1e-9);
        let competitors = [
            vec![0.5, -0.5, 0.25, -0.25],
            vec![1.0, -1.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 0.0],
            vec![-0.25, 0.75, -0.75, 0.25],
        ];
        for comp in &competitors {
            let mut inner = 0.0;
            for i in 0..4 {
                inner += (vals[i][0] - out[i][0]) * (comp[i] - out[i][0]);
            }
            assert!(inner <= 1e-9, "competitor {comp:?}");
        }
    }

    #[test]
    fn variation_budget_is_enforced() {
        let vals = vec![v1(1.0), v1(-1.0), v1(1.0), v1(-1.0)];
        let out = project_controls(&vals, &[1.0], true, Some(2.0)).unwrap();
        assert!(vector_total_variation(&out) <= 2.0 + 1e-10);
        let sum: f64 = out.iter().map(|w| w[0]).sum();
        assert!(sum.abs() < 1e-9);
        for w in &out {
            assert!(w[0].abs() <= 1.0 + 1e-12);
        }
        // A sequence already under budget is untouched.
        let ok = vec![v1(0.2), v1(0.1)];
        let out = project_controls(&ok, &[1.0], false, Some(1.0)).unwrap();
        assert!((out[0][0] - 0.2).abs() < 1e-12);
    }

    /// Zero-mean interior gait that never touches the walls.
    fn interior_reference(m: u32) -> (DiscreteTrajectory, ControlGrid) {
        let p = one_link_problem(RunningCost::Zero);
        let mm = 1usize << m;
        let vals: Vec<DVector<f64>> = (0..mm)
            .map(|i| v1(0.2 * (std::f64::consts::TAU * (i as f64 + 0.5) / mm as f64).sin()))
            .collect();
        let grid = ControlGrid::new(m, 4.0, vals).unwrap();
        let (_, traj) = periodic_orbit(&p.set, &p.dynamics, &grid, &v1(0.5), 1e-12, 100).unwrap();
        (traj, grid)
    }

    #[test]
    fn penalized_problem_on_its_own_mesh() {
        let p = one_link_problem(RunningCost::Zero);
        let (traj, grid) = interior_reference(5);
        let pm = build_pm(&p, (&traj, &grid), 5, DEFAULT_EPS_BAR).unwrap();
        // Restriction to the same mesh is the identity.
        for (a, b) in pm.reference_controls().iter().zip(grid.values()) {
            assert!((a - b).norm() < 1e-15);
        }
        for r in pm.drift_slack() {
            assert!(*r < 1e-12);
        }
        // A piecewise representation of itself has no averaging defect.
        assert!(pm.alpha() < 1e-15);
        assert!(pm.kappa().is_infinite());
        // Untouched faces keep their base offsets.
        for ci in pm.face_offsets() {
            assert!((ci - p.set.offsets()).norm() < 1e-12);
        }
        // Evaluating the reference itself reproduces the plain reward.
        let eval = pm.evaluate(&traj.states[0], grid.values()).unwrap();
        let (j, _) = p.objective(&grid, &traj.states[0]);
        assert!((eval.value - j).abs() < 1e-12);
        assert!(eval.deviation < 1e-20);
    }

    #[test]
    fn penalty_weight_grows_with_the_mesh() {
        let p = one_link_problem(RunningCost::Zero);
        let (traj, grid) = interior_reference(10);
        let pm4 = build_pm(&p, (&traj, &grid), 4, DEFAULT_EPS_BAR).unwrap();
        let pm6 = build_pm(&p, (&traj, &grid), 6, DEFAULT_EPS_BAR).unwrap();
        assert!(pm4.alpha() > pm6.alpha());
        assert!(pm4.kappa() < pm6.kappa());
        assert!(pm4.alpha() > 0.0);
    }

    #[test]
    fn initial_state_shift_costs_exactly_its_square() {
        let p = one_link_problem(RunningCost::Zero);
        let (traj, grid) = interior_reference(8);
        let pm = build_pm(&p, (&traj, &grid), 6, DEFAULT_EPS_BAR).unwrap();
        let w = pm.reference_controls().to_vec();
        let x0 = pm.reference_nodes()[0].clone();
        let base = pm.evaluate(&x0, &w).unwrap();
        let delta = 1e-3;
        let shifted = pm.evaluate(&(&x0 + v1(delta)), &w).unwrap();
        // An interior reference keeps the same increments, so the value
        // drops by exactly kappa/2 * delta^2.
        let expect = 0.5 * pm.kappa() * delta * delta;
        assert!(
            ((base.value - shifted.value) - expect).abs() < 1e-9,
            "drop {} expect {expect}",
            base.value - shifted.value
        );
    }

    #[test]
    fn control_perturbation_is_penalized() {
        let p = one_link_problem(RunningCost::Zero);
        let (traj, grid) = interior_reference(8);
        let pm = build_pm(&p, (&traj, &grid), 6, DEFAULT_EPS_BAR).unwrap();
        let x0 = pm.reference_nodes()[0].clone();
        let w = pm.reference_controls().to_vec();
        let base = pm.evaluate(&x0, &w).unwrap();
        // Mean-preserving perturbation of two intervals.
        let mut w2 = w.clone();
        let delta = 0.05;
        w2[3][0] += delta;
        w2[11][0] -= delta;
        let pert = pm.evaluate(&x0, &w2).unwrap();
        assert!(pert.value < base.value);
        assert!(pert.deviation > base.deviation);
    }

    #[test]
    fn locality_cap_rejects_distant_candidates() {
        let p = one_link_problem(RunningCost::Zero);
        let (traj, grid) = interior_reference(6);
        let pm = build_pm(&p, (&traj, &grid), 6, 1e-4).unwrap();
        let x0 = pm.reference_nodes()[0].clone();
        let mut w = pm.reference_controls().to_vec();
        w[0][0] += 0.5;
        w[1][0] -= 0.5;
        match pm.evaluate(&x0, &w) {
            Err(TranscriptionError::LocalityViolated { lhs, bound }) => {
                assert!(lhs > bound);
            }
            other => panic!("expected locality rejection, got {:?}", other.map(|e| e.value)),
        }
    }

    #[test]
    fn constraint_validation_in_penalized_evaluation() {
        let p = one_link_problem(RunningCost::Zero);
        let (traj, grid) = interior_reference(5);
        let pm = build_pm(&p, (&traj, &grid), 5, DEFAULT_EPS_BAR).unwrap();
        let x0 = pm.reference_nodes()[0].clone();
        let mut w = pm.reference_controls().to_vec();
        w[0][0] = 2.0;
        assert!(matches!(
            pm.evaluate(&x0, &w),
            Err(TranscriptionError::ControlViolation { which: "box" })
        ));
        let mut w = pm.reference_controls().to_vec();
        for wi in w.iter_mut() {
            wi[0] += 0.01;
        }
        assert!(matches!(
            pm.evaluate(&x0, &w),
            Err(TranscriptionError::ControlViolation { which: "zero-mean" })
        ));
    }

    #[test]
    fn rejects_bad_references() {
        let p = one_link_problem(RunningCost::Zero);
        // Not periodic: constant push moves the state to the wall.
        let grid = ControlGrid::new(3, 4.0, vec![v1(0.5); 8]).unwrap();
        let traj = simulate(&p.set, &p.dynamics, &grid, &v1(0.0));
        assert!(matches!(
            build_pm(&p, (&traj, &grid), 3, DEFAULT_EPS_BAR),
            Err(TranscriptionError::ReferenceInfeasible { .. })
        ));
    }

    #[test]
    fn reward_converges_along_meshes() {
        // A smooth wall-touching gait: reward differences across three
        // levels shrink as the mesh refines.
        let p = one_link_problem(RunningCost::Zero);
        let j = |m: u32| {
            let mm = 1usize << m;
            let vals: Vec<DVector<f64>> = (0..mm)
                .map(|i| {
                    v1(0.9 * (std::f64::consts::TAU * (i as f64 + 0.5) / mm as f64).cos())
                })
                .collect();
            let grid = ControlGrid::new(m, 4.0, vals).unwrap();
            let (x0, _) =
                periodic_orbit(&p.set, &p.dynamics, &grid, &v1(0.5), 1e-11, 200).unwrap();
            p.objective(&grid, &x0).0
        };
        let e1 = (j(4) - j(7)).abs();
        let e2 = (j(6) - j(9)).abs();
        assert!(e2 <= e1.max(1e-9), "e1 = {e1}, e2 = {e2}");
    }

    #[test]
    fn touched_faces_get_anchored_offsets() {
        let p = one_link_problem(RunningCost::Zero);
        // Push to the wall and hold: the upper face is active for the
        // second half of the period.
        let mut vals = vec![v1(0.8); 8];
        for v in vals.iter_mut().skip(4) {
            *v = v1(-0.8);
        }
        let grid = ControlGrid::new(3, 4.0, vals).unwrap();
        let (x0, traj) = periodic_orbit(&p.set, &p.dynamics, &grid, &v1(0.5), 1e-12, 100).unwrap();
        let pm = build_pm(&p, (&traj, &grid), 3, DEFAULT_EPS_BAR).unwrap();
        let base = p.set.offsets();
        let mut anchored = 0;
        for (i, ci) in pm.face_offsets().iter().enumerate() {
            for j in 0..2 {
                let delta = (ci[j] - base[j]).abs();
                if delta > 0.0 {
                    anchored += 1;
                    // Anchored offsets stay within a Lipschitz step.
                    assert!(delta <= 0.8 * grid.h() + 1e-9, "interval {i}");
                }
            }
        }
        assert!(anchored > 0);
        let _ = x0;
    }
}
