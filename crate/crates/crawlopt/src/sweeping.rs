//! Catching-up discretization of a perturbed sweeping process.
//!
//! The continuous model is a differential inclusion whose state is pushed
//! back into a fixed polyhedron by normal-cone reactions:
//! `dx/dt in -N_C(x) + g(t, x, u)`.  The discrete scheme advances with an
//! explicit prediction and a metric projection,
//! `x_{i+1} = proj_C(x_i + h g(t_i, x_i, u_i))`, so the reaction
//! `xi_i = g_i - (x_{i+1} - x_i)/h` satisfies `h xi_i in N_C(x_{i+1})`
//! exactly, with the projection multipliers as certificate.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::polytope::{ActiveSet, ConeDecomposition, Polyhedron};

type GFn = Arc<dyn Fn(f64, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;
type JFn = Arc<dyn Fn(f64, &DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;

enum GKind {
    /// `g(t, x, u) = u`; state and control dimensions coincide.
    Control,
    /// `g(t, x, u) = A x + B u`.
    Affine { a: DMatrix<f64>, b: DMatrix<f64> },
    /// Arbitrary closure.
    General(GFn),
}

impl Clone for GKind {
    fn clone(&self) -> Self {
        match self {
            GKind::Control => GKind::Control,
            GKind::Affine { a, b } => GKind::Affine {
                a: a.clone(),
                b: b.clone(),
            },
            GKind::General(f) => GKind::General(Arc::clone(f)),
        }
    }
}

/// Right-hand side `g(t, x, u)` of the perturbed process with optional
/// analytic Jacobians.  Missing Jacobians fall back to central differences.
#[derive(Clone)]
pub struct Dynamics {
    kind: GKind,
    jac_x: Option<JFn>,
    jac_w: Option<JFn>,
    state_dim: usize,
    control_dim: usize,
    fd_step: f64,
}

impl Dynamics {
    /// Pure control drive `g = u`.
    pub fn control(dim: usize) -> Self {
        Dynamics {
            kind: GKind::Control,
            jac_x: None,
            jac_w: None,
            state_dim: dim,
            control_dim: dim,
            fd_step: 1e-6,
        }
    }

    /// Affine drive `g = A x + B u`.
    pub fn affine(a: DMatrix<f64>, b: DMatrix<f64>) -> Self {
        assert_eq!(a.nrows(), a.ncols(), "state matrix must be square");
        assert_eq!(a.nrows(), b.nrows(), "state and control rows must agree");
        let state_dim = a.nrows();
        let control_dim = b.ncols();
        Dynamics {
            kind: GKind::Affine { a, b },
            jac_x: None,
            jac_w: None,
            state_dim,
            control_dim,
            fd_step: 1e-6,
        }
    }

    /// Arbitrary smooth drive given as a closure.
    pub fn general(
        state_dim: usize,
        control_dim: usize,
        g: impl Fn(f64, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        Dynamics {
            kind: GKind::General(Arc::new(g)),
            jac_x: None,
            jac_w: None,
            state_dim,
            control_dim,
            fd_step: 1e-6,
        }
    }

    /// Attaches analytic Jacobians with respect to state and control.
    pub fn with_jacobians(
        mut self,
        jac_x: impl Fn(f64, &DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
        jac_w: impl Fn(f64, &DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.jac_x = Some(Arc::new(jac_x));
        self.jac_w = Some(Arc::new(jac_w));
        self
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    /// True when `g` is exactly the control, with no state coupling.
    pub fn is_control_drive(&self) -> bool {
        matches!(self.kind, GKind::Control)
    }

    /// The affine coefficients when `g = A x + B u`, `(A, B)`.
    pub fn affine_parts(&self) -> Option<(&DMatrix<f64>, &DMatrix<f64>)> {
        match &self.kind {
            GKind::Affine { a, b } => Some((a, b)),
            _ => None,
        }
    }

    pub fn eval(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        debug_assert_eq!(x.len(), self.state_dim);
        debug_assert_eq!(u.len(), self.control_dim);
        match &self.kind {
            GKind::Control => u.clone(),
            GKind::Affine { a, b } => a * x + b * u,
            GKind::General(f) => {
                let v = f(t, x, u);
                assert_eq!(v.len(), self.state_dim, "dynamics output dimension");
                v
            }
        }
    }

    /// Jacobian with respect to the state.
    pub fn jac_state(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        if let Some(j) = &self.jac_x {
            return j(t, x, u);
        }
        match &self.kind {
            GKind::Control => DMatrix::zeros(self.state_dim, self.state_dim),
            GKind::Affine { a, .. } => a.clone(),
            GKind::General(_) => self.fd_jacobian(t, x, u, true),
        }
    }

    /// Jacobian with respect to the control.
    pub fn jac_control(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        if let Some(j) = &self.jac_w {
            return j(t, x, u);
        }
        match &self.kind {
            GKind::Control => DMatrix::identity(self.state_dim, self.state_dim),
            GKind::Affine { b, .. } => b.clone(),
            GKind::General(_) => self.fd_jacobian(t, x, u, false),
        }
    }

    fn fd_jacobian(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>, wrt_state: bool) -> DMatrix<f64> {
        let cols = if wrt_state {
            self.state_dim
        } else {
            self.control_dim
        };
        let mut jac = DMatrix::<f64>::zeros(self.state_dim, cols);
        let d = self.fd_step;
        for k in 0..cols {
            let (gp, gm) = if wrt_state {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += d;
                xm[k] -= d;
                (self.eval(t, &xp, u), self.eval(t, &xm, u))
            } else {
                let mut up = u.clone();
                let mut um = u.clone();
                up[k] += d;
                um[k] -= d;
                (self.eval(t, x, &up), self.eval(t, x, &um))
            };
            jac.set_column(k, &((gp - gm) / (2.0 * d)));
        }
        jac
    }

    /// Largest deviation between attached Jacobians and central differences
    /// at one point.  Zero when no analytic Jacobians are attached.
    pub fn jacobian_defect(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let mut worst = 0.0f64;
        if self.jac_x.is_some() {
            let d = (self.jac_state(t, x, u) - self.fd_jacobian(t, x, u, true)).abs().max();
            worst = worst.max(d);
        }
        if self.jac_w.is_some() {
            let d = (self.jac_control(t, x, u) - self.fd_jacobian(t, x, u, false)).abs().max();
            worst = worst.max(d);
        }
        worst
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GridError {
    /// `values` must hold exactly `2^m` entries.
    ValueCount { expected: usize, got: usize },
    /// Horizon must be positive and finite.
    BadHorizon(f64),
    /// A value row has the wrong dimension.
    DimMismatch { index: usize },
}

impl std::fmt::Display for GridError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GridError::ValueCount { expected, got } => {
                write!(f, "expected {expected} control values, got {got}")
            }
            GridError::BadHorizon(t) => write!(f, "horizon {t} is not positive and finite"),
            GridError::DimMismatch { index } => {
                write!(f, "control value {index} has a different dimension")
            }
        }
    }
}

impl std::error::Error for GridError {}

/// Piecewise-constant control over a dyadic partition of one period.
///
/// Level `m` splits `[0, T]` into `2^m` equal intervals; `values[i]` is the
/// control on `[t_i, t_{i+1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlGrid {
    m: u32,
    horizon: f64,
    values: Vec<DVector<f64>>,
}

impl ControlGrid {
    pub fn new(m: u32, horizon: f64, values: Vec<DVector<f64>>) -> Result<Self, GridError> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(GridError::BadHorizon(horizon));
        }
        let expected = 1usize << m;
        if values.len() != expected {
            return Err(GridError::ValueCount {
                expected,
                got: values.len(),
            });
        }
        let dim = values[0].len();
        for (i, v) in values.iter().enumerate() {
            if v.len() != dim {
                return Err(GridError::DimMismatch { index: i });
            }
        }
        Ok(ControlGrid { m, horizon, values })
    }

    pub fn zeros(m: u32, horizon: f64, dim: usize) -> Self {
        ControlGrid::new(m, horizon, vec![DVector::zeros(dim); 1 << m]).expect("valid grid")
    }

    pub fn level(&self) -> u32 {
        self.m
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn intervals(&self) -> usize {
        1 << self.m
    }

    pub fn control_dim(&self) -> usize {
        self.values[0].len()
    }

    /// Mesh width `T / 2^m`.
    pub fn h(&self) -> f64 {
        self.horizon / self.intervals() as f64
    }

    /// Left node of interval `i`.
    pub fn node(&self, i: usize) -> f64 {
        i as f64 * self.h()
    }

    pub fn value(&self, i: usize) -> &DVector<f64> {
        &self.values[i]
    }

    pub fn values(&self) -> &[DVector<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [DVector<f64>] {
        &mut self.values
    }

    pub fn set_values(&mut self, values: Vec<DVector<f64>>) -> Result<(), GridError> {
        let replaced = ControlGrid::new(self.m, self.horizon, values)?;
        self.values = replaced.values;
        Ok(())
    }

    /// Next finer grid; each value is duplicated, the function is unchanged.
    pub fn refine(&self) -> ControlGrid {
        let mut values = Vec::with_capacity(2 * self.values.len());
        for v in &self.values {
            values.push(v.clone());
            values.push(v.clone());
        }
        ControlGrid {
            m: self.m + 1,
            horizon: self.horizon,
            values,
        }
    }

    /// Next coarser grid by pair averaging; `None` at level zero.
    pub fn coarsen(&self) -> Option<ControlGrid> {
        if self.m == 0 {
            return None;
        }
        let values = self
            .values
            .chunks_exact(2)
            .map(|p| (&p[0] + &p[1]) * 0.5)
            .collect();
        Some(ControlGrid {
            m: self.m - 1,
            horizon: self.horizon,
            values,
        })
    }

    /// Sum of jump sizes between consecutive intervals, no wraparound.
    pub fn total_variation(&self) -> f64 {
        self.values
            .windows(2)
            .map(|p| (&p[1] - &p[0]).norm())
            .sum()
    }

    /// Mean control value over the period.
    pub fn mean(&self) -> DVector<f64> {
        let mut s = DVector::zeros(self.control_dim());
        for v in &self.values {
            s += v;
        }
        s / self.values.len() as f64
    }
}

#[derive(Serialize, Deserialize)]
struct ControlGridData {
    m: u32,
    horizon: f64,
    values: Vec<Vec<f64>>,
}

impl Serialize for ControlGrid {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        ControlGridData {
            m: self.m,
            horizon: self.horizon,
            values: self
                .values
                .iter()
                .map(|v| v.iter().cloned().collect())
                .collect(),
        }
        .serialize(ser)
    }
}

impl<'de> Deserialize<'de> for ControlGrid {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let data = ControlGridData::deserialize(de)?;
        let values = data
            .values
            .into_iter()
            .map(DVector::from_vec)
            .collect();
        ControlGrid::new(data.m, data.horizon, values)
            .map_err(|e| serde::de::Error::custom(e.to_string()))
    }
}

/// One period of the discrete process.
#[derive(Debug, Clone)]
pub struct DiscreteTrajectory {
    pub horizon: f64,
    /// Node states `x^0 .. x^{2^m}`.
    pub states: Vec<DVector<f64>>,
    /// Difference quotients `(x^{i+1} - x^i) / h`, one per interval.
    pub increments: Vec<DVector<f64>>,
    /// Reactions `g^i - increments^i`, one per interval.
    pub reactions: Vec<DVector<f64>>,
    /// Cone certificate of each reaction at the arrival state.
    pub decompositions: Vec<ConeDecomposition>,
    /// Optional scalar output accumulated at the nodes.
    pub outputs: Option<Vec<f64>>,
}

impl DiscreteTrajectory {
    pub fn intervals(&self) -> usize {
        self.increments.len()
    }

    pub fn h(&self) -> f64 {
        self.horizon / self.intervals() as f64
    }

    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("nonempty trajectory")
    }

    /// Serializes one row per interval: left node time and state, increment,
    /// reaction, and the output when present.
    pub fn to_csv(&self) -> String {
        let n = self.states[0].len();
        let mut out = String::new();
        out.push('t');
        for k in 1..=n {
            out.push_str(&format!(",x{k}"));
        }
        for k in 1..=n {
            out.push_str(&format!(",delta{k}"));
        }
        for k in 1..=n {
            out.push_str(&format!(",xi{k}"));
        }
        if self.outputs.is_some() {
            out.push_str(",y");
        }
        out.push('\n');
        let h = self.h();
        for i in 0..self.intervals() {
            out.push_str(&crate::fmt_f64(i as f64 * h));
            for v in [&self.states[i], &self.increments[i], &self.reactions[i]] {
                for k in 0..n {
                    out.push(',');
                    out.push_str(&crate::fmt_f64(v[k]));
                }
            }
            if let Some(y) = &self.outputs {
                out.push(',');
                out.push_str(&crate::fmt_f64(y[i]));
            }
            out.push('\n');
        }
        out
    }
}

/// One catching-up step.  Returns the next state and the cone certificate
/// of the projection displacement `x_pred - x_next` (that is, `h xi`).
pub fn step(
    set: &Polyhedron,
    dynamics: &Dynamics,
    t: f64,
    h: f64,
    x: &DVector<f64>,
    u: &DVector<f64>,
    hint: &ActiveSet,
) -> (DVector<f64>, ConeDecomposition) {
    let pred = x + h * dynamics.eval(t, x, u);
    set.project_with_hint(&pred, hint)
}

/// Tolerance for accepting the initial state as a member of the set.
pub const INITIAL_STATE_TOL: f64 = 1e-7;

/// Runs one period of catching-up from `x0` under the grid's control.
///
/// Panics if `x0` lies outside the set beyond [`INITIAL_STATE_TOL`]; feed
/// states through [`Polyhedron::project`] first if membership is in doubt.
pub fn simulate(
    set: &Polyhedron,
    dynamics: &Dynamics,
    grid: &ControlGrid,
    x0: &DVector<f64>,
) -> DiscreteTrajectory {
    assert!(
        set.contains(x0, INITIAL_STATE_TOL),
        "initial state outside the sweeping set"
    );
    assert_eq!(x0.len(), set.dim());
    assert_eq!(dynamics.state_dim(), set.dim());
    assert_eq!(dynamics.control_dim(), grid.control_dim());

    let mm = grid.intervals();
    let h = grid.h();
    let mut states = Vec::with_capacity(mm + 1);
    let mut increments = Vec::with_capacity(mm);
    let mut reactions = Vec::with_capacity(mm);
    let mut decompositions = Vec::with_capacity(mm);
    states.push(x0.clone());
    let mut hint = ActiveSet::default();
    for i in 0..mm {
        let x = states.last().unwrap().clone();
        let t = grid.node(i);
        let u = grid.value(i);
        let g = dynamics.eval(t, &x, u);
        let pred = &x + h * &g;
        let (next, dec) = set.project_with_hint(&pred, &hint);
        let inc = (&next - &x) / h;
        let xi = &g - &inc;
        hint = ActiveSet::new(dec.indices.clone());
        // Rescale the certificate from h*xi to xi.
        let dec = ConeDecomposition {
            indices: dec.indices,
            coefficients: dec.coefficients.iter().map(|l| l / h).collect(),
            residual: dec.residual / h,
        };
        states.push(next);
        increments.push(inc);
        reactions.push(xi);
        decompositions.push(dec);
    }
    DiscreteTrajectory {
        horizon: grid.horizon(),
        states,
        increments,
        reactions,
        decompositions,
        outputs: None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PeriodicityError {
    /// Period-map iteration did not close up; holds the final gap.
    NotConverged { gap: f64 },
}

impl std::fmt::Display for PeriodicityError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PeriodicityError::NotConverged { gap } => {
                write!(f, "period map did not converge, last gap {gap:.3e}")
            }
        }
    }
}

impl std::error::Error for PeriodicityError {}

pub const DEFAULT_PERIODIC_TOL: f64 = 1e-9;
pub const DEFAULT_PERIODIC_CAP: usize = 200;

/// Iterates the period map `x0 -> x(T)` to a fixed point and returns the
/// closed orbit.  The map is nonexpansive, so plain iteration converges
/// whenever a periodic orbit attracts the guess.
pub fn periodic_orbit(
    set: &Polyhedron,
    dynamics: &Dynamics,
    grid: &ControlGrid,
    guess: &DVector<f64>,
    tol: f64,
    cap: usize,
) -> Result<(DVector<f64>, DiscreteTrajectory), PeriodicityError> {
    let (mut x0, _) = set.project(guess);
    let mut gap = f64::INFINITY;
    for _ in 0..cap {
        let traj = simulate(set, dynamics, grid, &x0);
        gap = (traj.final_state() - &x0).norm();
        if gap <= tol {
            return Ok((x0, traj));
        }
        x0 = traj.final_state().clone();
    }
    Err(PeriodicityError::NotConverged { gap })
}
