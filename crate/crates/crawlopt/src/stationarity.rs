//! First-order multiplier certificates for periodic crawling processes.
//!
//! A certificate bundles the adjoint node values, per-face reaction
//! densities, the zero-mean multiplier, and the control inclusion values
//! that together witness stationarity of a discrete periodic process.
//! [`check_continuous_conditions`] measures how far a candidate certificate
//! is from satisfying those conditions; [`extract_multipliers`] searches for
//! one by linear programming; [`one_link_reference`] supplies the closed-form
//! single-link gait together with its exact certificate.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::crawler::OneLink;
use crate::linprog::{self, LinearProgram, LpOutcome};
use crate::sweeping::{ControlGrid, DiscreteTrajectory};
use crate::transcription::{PmProblem, ProcessProblem, RunningCost};

/// Face activity tolerance when attributing reaction densities.
pub const ACTIVE_TOL: f64 = 1e-7;
/// Residual level below which a certificate counts as exact.
pub const RESIDUAL_TOL: f64 = 1e-7;
/// Box-face detection tolerance for the control inclusion.
const BOX_TOL: f64 = 1e-9;

/// Failures while building or extracting certificates.
#[derive(Debug, Clone, PartialEq)]
pub enum StationarityError {
    /// The period is too short for a wall-to-wall gait.
    PeriodTooShort { horizon: f64, needed: f64 },
    /// No multiplier set satisfies the conditions; `residual` is the
    /// smallest total violation of the relaxed linear system.
    Infeasible { residual: f64 },
    /// The linear solver failed or the request was malformed.
    Solver(&'static str),
}

impl fmt::Display for StationarityError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StationarityError::PeriodTooShort { horizon, needed } => write!(
                f,
                "period {horizon} too short, wall-to-wall locomotion needs more than {needed}"
            ),
            StationarityError::Infeasible { residual } => {
                write!(f, "no multiplier set exists, relaxed violation {residual:e}")
            }
            StationarityError::Solver(what) => write!(f, "multiplier solve failed: {what}"),
        }
    }
}

impl std::error::Error for StationarityError {}

/// Outcome of the degeneracy classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegeneracyClass {
    /// Constant adjoint cancelling the zero-mean multiplier, zero cost
    /// weight, no reaction densities: satisfied by every process.
    Degenerate,
    /// Informative but with `p + omega` vanishing somewhere.
    Nondegenerate,
    /// `p + omega` bounded away from zero on the whole period.
    StronglyNondegenerate,
}

impl fmt::Display for DegeneracyClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DegeneracyClass::Degenerate => "degenerate",
            DegeneracyClass::Nondegenerate => "nondegenerate",
            DegeneracyClass::StronglyNondegenerate => "strongly_nondegenerate",
        };
        write!(f, "{s}")
    }
}

/// Named residuals of the stationarity conditions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    /// Summed mismatch between adjoint increments and their prescription.
    pub adjoint: f64,
    /// Gap between the first and the wrapped-around last adjoint value.
    pub transversality: f64,
    /// Largest distance of a control inclusion value to its normal cone.
    pub maximality: f64,
    /// Total reaction mass sitting on faces with strictly negative gap.
    pub support: f64,
    /// Defect of the scale pinning `lambda + sup|p| = 1`.
    pub nontriviality: f64,
}

impl ResidualReport {
    pub fn max(&self) -> f64 {
        self.adjoint
            .max(self.transversality)
            .max(self.maximality)
            .max(self.support)
            .max(self.nontriviality)
    }

    pub fn to_map(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        m.insert("adjoint".to_string(), self.adjoint);
        m.insert("transversality".to_string(), self.transversality);
        m.insert("maximality".to_string(), self.maximality);
        m.insert("support".to_string(), self.support);
        m.insert("nontriviality".to_string(), self.nontriviality);
        m
    }
}

impl fmt::Display for ResidualReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16} residual", "condition")?;
        for (name, value) in self.to_map() {
            writeln!(f, "{:<16} {}", name, crate::fmt_f64(value))?;
        }
        Ok(())
    }
}

/// Multipliers witnessing first-order stationarity of a periodic process.
///
/// Vectors are stored as plain rows so certificates serialize to JSON
/// without helpers.  `p` holds one adjoint value per node including the
/// wrapped-around final node; `xi` holds per-interval face densities, so
/// the mass carried by face `j` across interval `i` is `xi[i][j] * h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationarityCertificate {
    /// Cost multiplier, nonnegative.
    pub lambda: f64,
    /// Adjoint node values `p^0 .. p^M` with `p^M = p^0`.
    pub p: Vec<Vec<f64>>,
    /// Reaction densities per interval and face, nonnegative.
    pub xi: Vec<Vec<f64>>,
    /// Multiplier of the zero-mean control constraint.
    pub omega: Vec<f64>,
    /// Control inclusion values, one per interval.
    pub psi: Vec<Vec<f64>>,
    /// Speed subgradients along the reactions, one per interval.
    pub eta: Vec<Vec<f64>>,
    /// Drift slack multipliers, one per interval.
    pub beta: Vec<Vec<f64>>,
    /// Residuals recorded by the most recent check.
    pub residuals: BTreeMap<String, f64>,
}

impl StationarityCertificate {
    pub fn intervals(&self) -> usize {
        self.xi.len()
    }

    /// Largest adjoint entry in absolute value.
    pub fn sup_p(&self) -> f64 {
        self.p
            .iter()
            .flat_map(|row| row.iter())
            .fold(0.0, |acc, v| acc.max(v.abs()))
    }

    /// Smallest node value of `|p + omega|` when the dimensions agree,
    /// otherwise the smallest `|psi|`.
    pub fn min_offset_adjoint(&self) -> f64 {
        let mut best = f64::INFINITY;
        if self.p.first().map(|r| r.len()) == Some(self.omega.len()) {
            for row in &self.p {
                let n: f64 = row
                    .iter()
                    .zip(&self.omega)
                    .map(|(p, w)| (p + w) * (p + w))
                    .sum::<f64>()
                    .sqrt();
                best = best.min(n);
            }
        } else {
            for row in &self.psi {
                let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                best = best.min(n);
            }
        }
        best
    }

    /// Multiplies every positively homogeneous field by `c`.
    pub fn scale(&mut self, c: f64) {
        assert!(c > 0.0, "certificate scaling must be positive");
        self.lambda *= c;
        for row in self.p.iter_mut().chain(&mut self.xi).chain(&mut self.psi).chain(&mut self.beta) {
            for v in row.iter_mut() {
                *v *= c;
            }
        }
        for v in self.omega.iter_mut() {
            *v *= c;
        }
    }

    /// Rescales so that `lambda + sup|p| = 1` exactly.
    pub fn normalize(&mut self) {
        let s = self.lambda + self.sup_p();
        if s > 0.0 && s.is_finite() {
            self.scale(1.0 / s);
        }
    }

    /// Fraction of saturated control coordinates obeying
    /// `u = -sign(p + omega)`; coordinates with a tiny offset adjoint or an
    /// interior control do not vote.  Returns 1 when nothing votes.
    pub fn bang_bang_agreement(&self, values: &[DVector<f64>], half_widths: &[f64]) -> f64 {
        assert_eq!(values.len(), self.intervals());
        let d = self.omega.len();
        let mut votes = 0usize;
        let mut hits = 0usize;
        for (i, w) in values.iter().enumerate() {
            if self.p[i].len() != d {
                return 1.0;
            }
            for c in 0..d.min(w.len()) {
                let off = self.p[i][c] + self.omega[c];
                let a = half_widths[c];
                if off.abs() <= 1e-9 || a <= 0.0 || w[c].abs() < a - BOX_TOL * (1.0 + a) {
                    continue;
                }
                votes += 1;
                if (w[c] > 0.0) == (off < 0.0) {
                    hits += 1;
                }
            }
        }
        if votes == 0 {
            1.0
        } else {
            hits as f64 / votes as f64
        }
    }

    /// Plain-text summary with the residual table.
    pub fn report(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("lambda          {}\n", crate::fmt_f64(self.lambda)));
        out.push_str(&format!("sup |p|         {}\n", crate::fmt_f64(self.sup_p())));
        out.push_str(&format!(
            "min |p + omega| {}\n",
            crate::fmt_f64(self.min_offset_adjoint())
        ));
        out.push_str(&format!("intervals       {}\n", self.intervals()));
        out.push_str(&format!("{:<16} residual\n", "condition"));
        for (name, value) in &self.residuals {
            out.push_str(&format!("{:<16} {}\n", name, crate::fmt_f64(*value)));
        }
        out
    }
}

fn dv(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

/// Euclidean distance from `psi` to the normal cone of the symmetric box
/// with the given half-widths at the point `w`.  The cone is a product, so
/// the distance splits coordinate by coordinate.
pub fn box_normal_gap(half_widths: &[f64], w: &DVector<f64>, psi: &DVector<f64>) -> f64 {
    let mut sq = 0.0;
    for c in 0..w.len() {
        let a = half_widths[c];
        if a <= 0.0 {
            continue;
        }
        let tol = BOX_TOL * (1.0 + a);
        let viol = if w[c] >= a - tol {
            (-psi[c]).max(0.0)
        } else if w[c] <= -a + tol {
            psi[c].max(0.0)
        } else {
            psi[c].abs()
        };
        sq += viol * viol;
    }
    sq.sqrt()
}

/// Distance of `eta` to the convex hull of the speed subdifferential
/// generators at the given reaction.
pub fn eta_hull_residual(
    problem: &ProcessProblem,
    reaction: &DVector<f64>,
    eta: &DVector<f64>,
) -> f64 {
    let gens = problem.cost.f1.generators(reaction);
    if gens.is_empty() {
        return eta.norm();
    }
    let n = eta.len();
    let k = gens.len();
    let mut a = DMatrix::<f64>::zeros(n + 1, k);
    let mut b = DVector::<f64>::zeros(n + 1);
    for (col, g) in gens.iter().enumerate() {
        for r in 0..n {
            a[(r, col)] = g[r];
        }
        a[(n, col)] = 1.0;
    }
    for r in 0..n {
        b[r] = eta[r];
    }
    b[n] = 1.0;
    let alpha = linprog::nnls(&a, &b, 1e-12);
    (&a * &alpha - &b).norm()
}

fn centroid_eta(problem: &ProcessProblem, reaction: &DVector<f64>) -> Vec<f64> {
    let gens = problem.cost.f1.generators(reaction);
    let n = reaction.len();
    if gens.is_empty() {
        return vec![0.0; n];
    }
    let mut c = DVector::<f64>::zeros(n);
    for g in &gens {
        c += g;
    }
    c /= gens.len() as f64;
    c.iter().cloned().collect()
}

/// Measures a certificate against the stationarity conditions of the
/// process `(grid, traj)` and returns the five named residuals.
///
/// The adjoint residual sums, over intervals, the mismatch between the
/// stored increment of `p` and the prescribed one (state Jacobian pullback
/// plus the face reactions).  The maximality residual recomputes the
/// control inclusion value from `p`, `omega`, and `lambda` and measures its
/// distance to the control box normal cone.  Support counts reaction mass
/// on faces that are inactive at both ends of an interval.
pub fn check_continuous_conditions(
    problem: &ProcessProblem,
    grid: &ControlGrid,
    traj: &DiscreteTrajectory,
    cert: &StationarityCertificate,
) -> ResidualReport {
    let mm = grid.intervals();
    let sigma = problem.set.num_faces();
    assert_eq!(cert.p.len(), mm + 1, "adjoint node count mismatch");
    assert_eq!(cert.xi.len(), mm, "reaction density count mismatch");
    assert_eq!(traj.states.len(), mm + 1, "trajectory node count mismatch");
    let h = grid.h();

    let mut adjoint = 0.0;
    let mut support = 0.0;
    let mut maximality: f64 = 0.0;
    for i in 0..mm {
        let t = grid.node(i);
        let x = &traj.states[i];
        let u = grid.value(i);
        let p_i = dv(&cert.p[i]);
        let p_next = dv(&cert.p[i + 1]);

        let jx = problem.dynamics.jac_state(t, x, u);
        let mut defect = &p_next - &p_i + jx.transpose() * &p_i * h;
        for j in 0..sigma {
            let mass = cert.xi[i][j] * h;
            if mass != 0.0 {
                defect -= problem.set.normal(j) * mass;
            }
        }
        adjoint += defect.amax();

        let gaps_l = problem.set.face_gaps(x);
        let gaps_r = problem.set.face_gaps(&traj.states[i + 1]);
        for j in 0..sigma {
            let tol = ACTIVE_TOL * (1.0 + problem.set.offsets()[j].abs());
            if gaps_l[j] < -tol && gaps_r[j] < -tol {
                support += cert.xi[i][j] * h;
            }
        }

        let jw = problem.dynamics.jac_control(t, x, u);
        let mut psi = -(jw.transpose() * &p_i) - dv(&cert.omega);
        if cert.lambda != 0.0 {
            psi -= problem.cost.f2.grad(t, u) * cert.lambda;
        }
        maximality = maximality.max(box_normal_gap(&problem.control_box, u, &psi));
    }

    let transversality = (dv(&cert.p[mm]) - dv(&cert.p[0])).amax();
    let nontriviality = (cert.lambda + cert.sup_p() - 1.0).abs();
    ResidualReport {
        adjoint,
        transversality,
        maximality,
        support,
        nontriviality,
    }
}

/// Sorts a certificate into the degeneracy classes.
///
/// Degenerate means the certificate carries no information: zero cost
/// weight, constant adjoint cancelled by the zero-mean multiplier, and no
/// reaction mass.  Strongly nondegenerate means the offset adjoint
/// `p + omega` stays away from zero over the whole period.
pub fn classify_degenerate(cert: &StationarityCertificate, tol: f64) -> DegeneracyClass {
    let p0 = dv(&cert.p[0]);
    let p_const = cert
        .p
        .iter()
        .map(|row| (dv(row) - &p0).amax())
        .fold(0.0, f64::max)
        <= tol;
    let xi_mass = {
        let h = 1.0 / cert.intervals().max(1) as f64;
        cert.xi
            .iter()
            .flat_map(|row| row.iter())
            .fold(0.0, |acc: f64, v| acc.max(v.abs()))
            * h
    };
    let off_max = if cert.p[0].len() == cert.omega.len() {
        cert.p
            .iter()
            .map(|row| {
                row.iter()
                    .zip(&cert.omega)
                    .map(|(p, w)| (p + w).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    } else {
        cert.psi
            .iter()
            .map(|row| row.iter().fold(0.0, |acc: f64, v| acc.max(v.abs())))
            .fold(0.0, f64::max)
    };
    if cert.lambda <= tol && p_const && off_max <= tol && xi_mass <= tol {
        return DegeneracyClass::Degenerate;
    }
    if cert.min_offset_adjoint() > tol {
        return DegeneracyClass::StronglyNondegenerate;
    }
    DegeneracyClass::Nondegenerate
}

/// The certificate that every control-driven process satisfies: zero cost
/// weight, constant unit adjoint cancelled by the zero-mean multiplier.
pub fn degenerate_certificate(
    problem: &ProcessProblem,
    grid: &ControlGrid,
    traj: &DiscreteTrajectory,
) -> StationarityCertificate {
    assert!(
        problem.dynamics.is_control_drive(),
        "the universal degenerate pattern needs identity control coupling"
    );
    let mm = grid.intervals();
    let n = problem.set.dim();
    let sigma = problem.set.num_faces();
    let mut c = vec![0.0; n];
    c[0] = 1.0;
    let omega: Vec<f64> = c.iter().map(|v| -v).collect();
    let eta: Vec<Vec<f64>> = (0..mm)
        .map(|i| centroid_eta(problem, &traj.reactions[i]))
        .collect();
    let mut cert = StationarityCertificate {
        lambda: 0.0,
        p: vec![c; mm + 1],
        xi: vec![vec![0.0; sigma]; mm],
        omega,
        psi: vec![vec![0.0; problem.control_dim()]; mm],
        eta,
        beta: vec![vec![0.0; n]; mm],
        residuals: BTreeMap::new(),
    };
    cert.residuals = check_continuous_conditions(problem, grid, traj, &cert).to_map();
    cert
}

/// Dynamics regime for multiplier extraction.
pub enum MultiplierMode<'a> {
    /// The process evolves in the problem's own set.
    Plain,
    /// The process evolves in the penalized surrogate's shifted sets.
    Pm(&'a PmProblem),
}

/// What the caller wants from the extractor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CertificateRequest {
    /// Any feasible multiplier set; control drives get the universal
    /// degenerate pattern without a solve.
    Any,
    /// Maximize the saturation margin of the control inclusion (with a
    /// small preference for larger `lambda`).
    Nondegenerate,
    /// Pin `lambda` to the given value, then maximize the margin.
    Lambda(f64),
}

struct IntervalData {
    /// Active faces at the interval's left node.
    active: Vec<usize>,
    /// Constant part of the control inclusion value multiplying `lambda`.
    lambda_grad: DVector<f64>,
    /// Control Jacobian at the left node.
    jw: DMatrix<f64>,
    /// State Jacobian at the left node.
    jx: DMatrix<f64>,
    /// Saturation of each control coordinate: -1 lower, 0 interior, +1
    /// upper, 2 unconstrained.
    saturation: Vec<i8>,
}

fn gather_interval_data(
    problem: &ProcessProblem,
    grid: &ControlGrid,
    traj: &DiscreteTrajectory,
    pm: Option<&PmProblem>,
) -> Vec<IntervalData> {
    let mm = grid.intervals();
    let mut out = Vec::with_capacity(mm);
    for i in 0..mm {
        let t = grid.node(i);
        let x = &traj.states[i];
        let u = grid.value(i);
        let offsets = match pm {
            Some(p) => p.face_offsets()[i].clone(),
            None => problem.set.offsets().clone(),
        };
        let gaps = problem.set.normals() * x - &offsets;
        let mut active = Vec::new();
        for j in 0..problem.set.num_faces() {
            if gaps[j] >= -ACTIVE_TOL * (1.0 + offsets[j].abs()) {
                active.push(j);
            }
        }
        // lambda multiplies -grad f2 plus, in the penalized regime with a
        // finite weight, the pull toward the reference control.
        let mut lambda_grad = -problem.cost.f2.grad(t, u);
        if let Some(p) = pm {
            if p.kappa().is_finite() {
                lambda_grad += (&p.reference_controls()[i] - u) * p.kappa();
            }
        }
        let jw = problem.dynamics.jac_control(t, x, u);
        let jx = problem.dynamics.jac_state(t, x, u);
        let mut saturation = Vec::with_capacity(u.len());
        for c in 0..u.len() {
            let a = problem.control_box[c];
            let tol = BOX_TOL * (1.0 + a);
            let s = if a <= tol {
                2
            } else if u[c] >= a - tol {
                1
            } else if u[c] <= -a + tol {
                -1
            } else {
                0
            };
            saturation.push(s);
        }
        out.push(IntervalData {
            active,
            lambda_grad,
            jw,
            jx,
            saturation,
        });
    }
    out
}

/// Solves the multiplier system as a linear program.  With `margin` the
/// objective pushes the control inclusion values away from the cone
/// boundary; with `relax` every stationarity row gets a nonnegative slack
/// and the summed slack is minimized instead (used to quantify
/// infeasibility).
fn solve_certificate_lp(
    problem: &ProcessProblem,
    grid: &ControlGrid,
    traj: &DiscreteTrajectory,
    pm: Option<&PmProblem>,
    pinned_lambda: Option<f64>,
    margin: bool,
    relax: bool,
) -> Result<LpOutcome, StationarityError> {
    let mm = grid.intervals();
    let n = problem.set.dim();
    let d = problem.control_dim();
    let h = grid.h();
    let data = gather_interval_data(problem, grid, traj, pm);

    let pairs: Vec<(usize, usize)> = data
        .iter()
        .enumerate()
        .flat_map(|(i, di)| di.active.iter().map(move |&j| (i, j)))
        .collect();
    let any_saturated = data
        .iter()
        .any(|di| di.saturation.iter().any(|&s| s == 1 || s == -1));

    let idx_lambda = 0usize;
    let p_base = 1usize;
    let xi_base = p_base + mm * n;
    let omega_base = xi_base + pairs.len();
    let t_idx = omega_base + d;
    let use_gamma = margin && any_saturated && !relax;
    let gamma_idx = t_idx + 1;
    let mut nvars = t_idx + 1 + usize::from(use_gamma);
    // Relaxation slacks: a +/- pair per adjoint row, one per box row.
    let slack_base = nvars;
    if relax {
        let box_rows: usize = data
            .iter()
            .map(|di| {
                di.saturation
                    .iter()
                    .filter(|&&s| s != 2)
                    .map(|&s| if s == 0 { 2 } else { 1 })
                    .sum::<usize>()
            })
            .sum();
        nvars += 2 * mm * n + box_rows;
    }

    let mut lp = LinearProgram::new(nvars);
    for i in 0..mm {
        for r in 0..n {
            lp.mark_free(p_base + i * n + r);
        }
    }
    for c in 0..d {
        lp.mark_free(omega_base + c);
    }
    if use_gamma {
        lp.mark_free(gamma_idx);
    }

    let mut slack = slack_base;
    // Adjoint rows: p^{i+1} - p^i + h Jx^T p^i - sum(mass_j n_j) = 0, the
    // last row wrapping p^{mm} back to p^0.
    for (i, di) in data.iter().enumerate() {
        let next = (i + 1) % mm;
        for r in 0..n {
            let mut row: Vec<(usize, f64)> = Vec::new();
            row.push((p_base + next * n + r, 1.0));
            row.push((p_base + i * n + r, -1.0));
            for c in 0..n {
                let v = di.jx[(c, r)];
                if v != 0.0 {
                    row.push((p_base + i * n + c, h * v));
                }
            }
            for (k, &(pi, pj)) in pairs.iter().enumerate() {
                if pi == i {
                    let v = problem.set.normals()[(pj, r)];
                    if v != 0.0 {
                        row.push((xi_base + k, -v));
                    }
                }
            }
            if relax {
                row.push((slack, 1.0));
                row.push((slack + 1, -1.0));
                slack += 2;
            }
            lp.add_eq(&row, 0.0);
        }
    }

    // Control inclusion rows.  The value is
    //   E_c = -(Jw^T p^i)_c - omega_c + lambda * lambda_grad_c
    // and must lie in the normal cone of the box at u^i.
    let mut grad_bound: f64 = 1.0;
    for (i, di) in data.iter().enumerate() {
        for c in 0..d {
            if di.saturation[c] == 2 {
                continue;
            }
            grad_bound = grad_bound.max(di.lambda_grad[c].abs());
            let mut row: Vec<(usize, f64)> = Vec::new();
            for r in 0..n {
                let v = di.jw[(r, c)];
                if v != 0.0 {
                    row.push((p_base + i * n + r, -v));
                }
            }
            row.push((omega_base + c, -1.0));
            if di.lambda_grad[c] != 0.0 {
                row.push((idx_lambda, di.lambda_grad[c]));
            }
            match di.saturation[c] {
                1 => {
                    // E >= gamma, entered as -E + gamma <= 0.
                    let mut neg: Vec<(usize, f64)> = row.iter().map(|&(j, v)| (j, -v)).collect();
                    if use_gamma {
                        neg.push((gamma_idx, 1.0));
                    }
                    if relax {
                        neg.push((slack, -1.0));
                        slack += 1;
                    }
                    lp.add_le(&neg, 0.0);
                }
                -1 => {
                    // E <= -gamma.
                    let mut pos = row.clone();
                    if use_gamma {
                        pos.push((gamma_idx, 1.0));
                    }
                    if relax {
                        pos.push((slack, -1.0));
                        slack += 1;
                    }
                    lp.add_le(&pos, 0.0);
                }
                _ => {
                    if relax {
                        row.push((slack, 1.0));
                        row.push((slack + 1, -1.0));
                        slack += 2;
                    }
                    lp.add_eq(&row, 0.0);
                }
            }
        }
    }

    // Scale pinning via the bound variable t >= |p^i_r|.
    for i in 0..mm {
        for r in 0..n {
            lp.add_le(&[(p_base + i * n + r, 1.0), (t_idx, -1.0)], 0.0);
            lp.add_le(&[(p_base + i * n + r, -1.0), (t_idx, -1.0)], 0.0);
        }
    }
    lp.add_eq(&[(idx_lambda, 1.0), (t_idx, 1.0)], 1.0);
    if let Some(v) = pinned_lambda {
        if !(0.0..=1.0).contains(&v) {
            return Err(StationarityError::Solver("pinned lambda outside [0, 1]"));
        }
        lp.add_eq(&[(idx_lambda, 1.0)], v);
    }
    // Keep the free multipliers inside a generous box so the margin
    // objective stays bounded.
    let guard = 50.0 * grad_bound;
    for c in 0..d {
        lp.add_le(&[(omega_base + c, 1.0)], guard);
        lp.add_le(&[(omega_base + c, -1.0)], guard);
    }
    if use_gamma {
        lp.add_le(&[(gamma_idx, 1.0)], 10.0);
    }

    if relax {
        let coeffs: Vec<(usize, f64)> = (slack_base..slack).map(|j| (j, 1.0)).collect();
        lp.set_maximize(false);
        lp.set_objective(&coeffs);
    } else {
        lp.set_maximize(true);
        if use_gamma {
            lp.set_objective(&[(gamma_idx, 1.0), (idx_lambda, 1e-3)]);
        } else {
            lp.set_objective(&[(idx_lambda, 1.0)]);
        }
    }
    lp.solve().map_err(|_| StationarityError::Solver("pivot limit"))
}

fn certificate_from_solution(
    problem: &ProcessProblem,
    grid: &ControlGrid,
    traj: &DiscreteTrajectory,
    pm: Option<&PmProblem>,
    x: &[f64],
) -> StationarityCertificate {
    let mm = grid.intervals();
    let n = problem.set.dim();
    let d = problem.control_dim();
    let h = grid.h();
    let data = gather_interval_data(problem, grid, traj, pm);
    let pairs: Vec<(usize, usize)> = data
        .iter()
        .enumerate()
        .flat_map(|(i, di)| di.active.iter().map(move |&j| (i, j)))
        .collect();
    let p_base = 1usize;
    let xi_base = p_base + mm * n;
    let omega_base = xi_base + pairs.len();

    let lambda = x[0].max(0.0);
    let mut p: Vec<Vec<f64>> = (0..mm)
        .map(|i| x[p_base + i * n..p_base + (i + 1) * n].to_vec())
        .collect();
    p.push(p[0].clone());
    let mut xi = vec![vec![0.0; problem.set.num_faces()]; mm];
    for (k, &(i, j)) in pairs.iter().enumerate() {
        xi[i][j] = x[xi_base + k].max(0.0) / h;
    }
    let omega: Vec<f64> = x[omega_base..omega_base + d].to_vec();

    let mut psi = Vec::with_capacity(mm);
    let mut eta = Vec::with_capacity(mm);
    let mut beta = Vec::with_capacity(mm);
    for (i, di) in data.iter().enumerate() {
        let p_i = dv(&p[i]);
        let mut e = -(di.jw.transpose() * &p_i) - dv(&omega);
        e += &di.lambda_grad * lambda;
        psi.push(e.iter().cloned().collect());
        let eta_i = centroid_eta(problem, &traj.reactions[i]);
        let b = match pm {
            Some(pp) => {
                let r = pp.drift_slack()[i];
                ((&p_i + dv(&eta_i) * lambda) * (h * r)).iter().cloned().collect()
            }
            None => vec![0.0; n],
        };
        eta.push(eta_i);
        beta.push(b);
    }

    StationarityCertificate {
        lambda,
        p,
        xi,
        omega,
        psi,
        eta,
        beta,
        residuals: BTreeMap::new(),
    }
}

/// Finds a multiplier set for the process `(grid, traj)` by linear
/// programming over the adjoint recursion, the face-support restriction,
/// the control inclusion, and the scale pinning.
///
/// Reaction variables exist only on faces active at an interval's left
/// node, so complementary slackness holds by construction.  The returned
/// certificate carries nonnegative densities, `lambda >= 0`, and its
/// residual map filled in.  When the system admits no solution the error
/// reports the smallest summed violation of the relaxed rows.
pub fn extract_multipliers(
    problem: &ProcessProblem,
    grid: &ControlGrid,
    traj: &DiscreteTrajectory,
    mode: MultiplierMode<'_>,
    request: CertificateRequest,
) -> Result<StationarityCertificate, StationarityError> {
    let pm = match &mode {
        MultiplierMode::Plain => None,
        MultiplierMode::Pm(p) => Some(*p),
    };
    if matches!(request, CertificateRequest::Any)
        && pm.is_none()
        && problem.dynamics.is_control_drive()
    {
        return Ok(degenerate_certificate(problem, grid, traj));
    }
    let pinned = match request {
        CertificateRequest::Lambda(v) => Some(v),
        _ => None,
    };
    let margin = !matches!(request, CertificateRequest::Any);
    match solve_certificate_lp(problem, grid, traj, pm, pinned, margin, false)? {
        LpOutcome::Optimal { x, .. } => {
            let mut cert = certificate_from_solution(problem, grid, traj, pm, &x);
            if pinned.is_none() {
                cert.normalize();
            }
            cert.residuals = check_continuous_conditions(problem, grid, traj, &cert).to_map();
            Ok(cert)
        }
        LpOutcome::Unbounded => Err(StationarityError::Solver("unbounded multiplier program")),
        LpOutcome::Infeasible => {
            let relaxed = solve_certificate_lp(problem, grid, traj, pm, pinned, false, true)?;
            match relaxed {
                LpOutcome::Optimal { value, .. } => {
                    Err(StationarityError::Infeasible { residual: value })
                }
                _ => Err(StationarityError::Solver("relaxation failed")),
            }
        }
    }
}

/// Cost selector for the closed-form single-link reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceCost {
    Zero,
    Quadratic,
}

/// Closed-form optimal single-link process on `[a, b]` with period `T`,
/// sampled on the dyadic mesh of level `m`, together with its certificate.
///
/// With zero running cost the optimum is the four-phase gait: hold at `b`
/// pushing outward, traverse to `a`, hold at `a` pulling inward, traverse
/// back, with both holds lasting `(T - 2(b-a))/2`.  Its reward equals the
/// total hold time over two.  The certificate is exact whenever the phase
/// boundaries land on mesh nodes; otherwise the jumps snap to the nearest
/// node and the residuals report the misalignment.  With the quadratic
/// running cost the only interior stationary process is the constant one,
/// returned as `u = 0` at the midpoint with a full-cost-weight certificate.
pub fn one_link_reference(
    a: f64,
    b: f64,
    horizon: f64,
    cost: ReferenceCost,
    m: u32,
) -> Result<(ControlGrid, DVector<f64>, f64, StationarityCertificate), StationarityError> {
    assert!(b > a && horizon > 0.0, "need b > a and a positive period");
    assert!(m >= 2, "need at least four intervals");
    let mm = 1usize << m;
    let h = horizon / mm as f64;
    match cost {
        ReferenceCost::Zero => {
            let travel = b - a;
            if horizon <= 2.0 * travel {
                return Err(StationarityError::PeriodTooShort {
                    horizon,
                    needed: 2.0 * travel,
                });
            }
            let hold = 0.5 * (horizon - 2.0 * travel);
            // Phase boundaries: leave b, arrive a, leave a.
            let t_leave_top = hold;
            let t_arrive_bot = hold + travel;
            let t_leave_bot = 2.0 * hold + travel;
            let phase_u = |t: f64| -> f64 {
                if t < t_leave_top {
                    1.0
                } else if t < t_arrive_bot {
                    -1.0
                } else if t < t_leave_bot {
                    -1.0
                } else {
                    1.0
                }
            };
            let values: Vec<DVector<f64>> = (0..mm)
                .map(|i| dv(&[phase_u((i as f64 + 0.5) * h)]))
                .collect();
            let grid = ControlGrid::new(m, horizon, values).expect("consistent grid data");
            let x0 = dv(&[b]);

            let i_leave_top = ((t_leave_top / h).round() as usize).clamp(1, mm - 1);
            let i_arrive_bot = ((t_arrive_bot / h).round() as usize).clamp(i_leave_top, mm - 1);
            let i_leave_bot = ((t_leave_bot / h).round() as usize).clamp(i_arrive_bot + 1, mm);

            let q = 0.3;
            let lambda = 0.7;
            let mut p = Vec::with_capacity(mm + 1);
            for i in 0..mm {
                let v = if i < i_leave_top || i >= i_leave_bot {
                    -q
                } else {
                    q
                };
                p.push(vec![v]);
            }
            p.push(p[0].clone());
            let mut xi = vec![vec![0.0, 0.0]; mm];
            // Face 0 has outward normal +1 (wall at b), face 1 has -1.
            xi[i_leave_top - 1][0] = 2.0 * q / h;
            xi[i_leave_bot - 1][1] = 2.0 * q / h;
            let psi: Vec<Vec<f64>> = (0..mm).map(|i| vec![-p[i][0]]).collect();
            let eta: Vec<Vec<f64>> = (0..mm)
                .map(|i| {
                    if i < i_leave_top {
                        vec![0.5]
                    } else if i >= i_arrive_bot && i < i_leave_bot {
                        vec![-0.5]
                    } else {
                        vec![0.0]
                    }
                })
                .collect();
            let mut cert = StationarityCertificate {
                lambda,
                p,
                xi,
                omega: vec![0.0],
                psi,
                eta,
                beta: vec![vec![0.0]; mm],
                residuals: BTreeMap::new(),
            };
            let ol = OneLink::new(a, b, horizon).expect("validated interval");
            let problem = ProcessProblem::one_link(&ol, RunningCost::Zero);
            let (_, traj) = problem.objective(&grid, &x0);
            cert.residuals = check_continuous_conditions(&problem, &grid, &traj, &cert).to_map();
            Ok((grid, x0, hold, cert))
        }
        ReferenceCost::Quadratic => {
            let grid = ControlGrid::zeros(m, horizon, 1);
            let x0 = dv(&[0.5 * (a + b)]);
            let mut cert = StationarityCertificate {
                lambda: 1.0,
                p: vec![vec![0.0]; mm + 1],
                xi: vec![vec![0.0, 0.0]; mm],
                omega: vec![0.0],
                psi: vec![vec![0.0]; mm],
                eta: vec![vec![0.0]; mm],
                beta: vec![vec![0.0]; mm],
                residuals: BTreeMap::new(),
            };
            let ol = OneLink::new(a, b, horizon).expect("validated interval");
            let problem = ProcessProblem::one_link(&ol, RunningCost::Quadratic { weight: 1.0 });
            let (_, traj) = problem.objective(&grid, &x0);
            cert.residuals = check_continuous_conditions(&problem, &grid, &traj, &cert).to_map();
            Ok((grid, x0, 0.0, cert))
        }
    }
}
