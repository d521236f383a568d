//! The N-block dry-friction crawler and its shape-space reduction.
//!
//! Blocks in a chain experience anisotropic dry friction: block `i` resists
//! forward sliding with threshold `mu_plus[i]` and backward sliding with
//! `mu_minus[i]`.  Eliminating the mean coordinate turns the force balance
//! into a sweeping process in shape space `R^{N-1}`, over the polyhedron
//!
//! `C = { z : -mu_minus[i] <= <Z e_i, z> <= mu_plus[i] }`,
//!
//! where `Z` maps block positions to consecutive differences.  The body
//! velocity is the mean block velocity of the dissipation-minimizing lift
//! of a shape velocity, a piecewise linear positively homogeneous function
//! computed here by linear programming.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::linprog::{LinearProgram, LpOutcome};
use crate::polytope::Polyhedron;
use crate::sweeping::DiscreteTrajectory;

/// Largest block count for which the exhaustive balance check is run.
pub const MAX_BLOCKS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    /// Block count outside `2..=MAX_BLOCKS`.
    BadBlockCount(usize),
    /// Spring stiffness must be positive.
    BadSpring(f64),
    /// Period must be positive and finite.
    BadPeriod(f64),
    /// Friction coefficient lists must have one entry per block.
    CoefficientCount { expected: usize, got: usize },
    /// A friction coefficient was not strictly positive.
    DegenerateFriction { index: usize },
    /// Control box must have `N-1` strictly positive half-widths.
    BadBox { index: usize },
    /// The balance `sum_{i in J} mu_plus[i] - sum_{i not in J} mu_minus[i]`
    /// vanishes for this subset, so quasistatic evolution is not unique.
    UniquenessViolation { subset: Vec<usize> },
    /// One-link interval must satisfy `a < b`.
    BadInterval { a: f64, b: f64 },
    /// Trajectory data does not match the model dimensions.
    DimensionMismatch { expected: usize, got: usize },
}

impl std::fmt::Display for ModelError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelError::BadBlockCount(n) => {
                write!(f, "block count {n} outside 2..={MAX_BLOCKS}")
            }
            ModelError::BadSpring(k) => write!(f, "spring stiffness {k} must be positive"),
            ModelError::BadPeriod(t) => write!(f, "period {t} must be positive and finite"),
            ModelError::CoefficientCount { expected, got } => {
                write!(f, "expected {expected} friction coefficients, got {got}")
            }
            ModelError::DegenerateFriction { index } => {
                write!(f, "friction coefficient {index} is not strictly positive")
            }
            ModelError::BadBox { index } => {
                write!(f, "control box half-width {index} is missing or not positive")
            }
            ModelError::UniquenessViolation { subset } => {
                write!(
                    f,
                    "friction thresholds balance exactly on block subset {subset:?}"
                )
            }
            ModelError::BadInterval { a, b } => {
                write!(f, "interval [{a}, {b}] is empty")
            }
            ModelError::DimensionMismatch { expected, got } => {
                write!(f, "expected dimension {expected}, got {got}")
            }
        }
    }
}

impl std::error::Error for ModelError {}

/// Plain-data description of a crawler, as read from configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of blocks.
    #[serde(rename = "N")]
    pub blocks: usize,
    /// Spring stiffness between consecutive blocks.
    pub k: f64,
    /// Forward friction thresholds, one per block.
    pub mu_plus: Vec<f64>,
    /// Backward friction thresholds, one per block.
    pub mu_minus: Vec<f64>,
    /// Gait period.
    #[serde(rename = "T")]
    pub horizon: f64,
    /// Control box half-widths, one per shape coordinate.
    #[serde(rename = "box")]
    pub control_box: Vec<f64>,
}

/// The dissipation-minimizing lift of a shape velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct VmDecomposition {
    /// `2N` nonnegative weights: forward parts of each block velocity,
    /// then backward parts.
    pub lambda: Vec<f64>,
    /// The minimizing block velocity vector, length `N`.
    pub anchor: DVector<f64>,
    /// Body velocity: the mean of the anchor.
    pub value: f64,
    /// Friction dissipation of the anchor.
    pub cost: f64,
}

/// Validated crawler with its derived geometry.
#[derive(Debug, Clone)]
pub struct CrawlerModel {
    config: ModelConfig,
    /// Friction force bound polytope in block space `R^N`.
    c0: Polyhedron,
    /// Reduced sweeping polyhedron in shape space `R^{N-1}`.
    set: Polyhedron,
    /// Difference map `R^N -> R^{N-1}`, `(Z X)_j = X_{j+1} - X_j`.
    zmat: DMatrix<f64>,
}

impl CrawlerModel {
    pub fn build(config: ModelConfig) -> Result<Self, ModelError> {
        let n = config.blocks;
        if !(2..=MAX_BLOCKS).contains(&n) {
            return Err(ModelError::BadBlockCount(n));
        }
        if !(config.k.is_finite() && config.k > 0.0) {
            return Err(ModelError::BadSpring(config.k));
        }
        if !(config.horizon.is_finite() && config.horizon > 0.0) {
            return Err(ModelError::BadPeriod(config.horizon));
        }
        for mu in [&config.mu_plus, &config.mu_minus] {
            if mu.len() != n {
                return Err(ModelError::CoefficientCount {
                    expected: n,
                    got: mu.len(),
                });
            }
        }
        for i in 0..n {
            if !(config.mu_plus[i] > 0.0 && config.mu_plus[i].is_finite()) {
                return Err(ModelError::DegenerateFriction { index: i });
            }
            if !(config.mu_minus[i] > 0.0 && config.mu_minus[i].is_finite()) {
                return Err(ModelError::DegenerateFriction { index: i + n });
            }
        }
        if config.control_box.len() != n - 1 {
            return Err(ModelError::BadBox {
                index: config.control_box.len().min(n - 1),
            });
        }
        for (i, &a) in config.control_box.iter().enumerate() {
            if !(a > 0.0 && a.is_finite()) {
                return Err(ModelError::BadBox { index: i });
            }
        }
        check_balance(&config.mu_plus, &config.mu_minus)?;

        // C0 in block coordinates: -mu_minus[i] <= X_i <= mu_plus[i].
        let mut a0 = DMatrix::<f64>::zeros(2 * n, n);
        let mut c0off = DVector::<f64>::zeros(2 * n);
        for i in 0..n {
            a0[(i, i)] = 1.0;
            c0off[i] = config.mu_plus[i];
            a0[(n + i, i)] = -1.0;
            c0off[n + i] = config.mu_minus[i];
        }
        let c0 = Polyhedron::new(a0, c0off).expect("box with positive bounds");

        let zmat = difference_map(n);
        // Reduced faces: <Z e_i, z> <= mu_plus[i] and -<Z e_i, z> <= mu_minus[i].
        let d = n - 1;
        let mut ar = DMatrix::<f64>::zeros(2 * n, d);
        let mut cr = DVector::<f64>::zeros(2 * n);
        for i in 0..n {
            let nu = zmat.column(i);
            for j in 0..d {
                ar[(i, j)] = nu[j];
                ar[(n + i, j)] = -nu[j];
            }
            cr[i] = config.mu_plus[i];
            cr[n + i] = config.mu_minus[i];
        }
        // Zero is strictly interior because every threshold is positive.
        let set = Polyhedron::new(ar, cr).expect("origin is strictly feasible");

        Ok(CrawlerModel {
            config,
            c0,
            set,
            zmat,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn blocks(&self) -> usize {
        self.config.blocks
    }

    /// Dimension of the shape space, `N - 1`.
    pub fn shape_dim(&self) -> usize {
        self.config.blocks - 1
    }

    pub fn stiffness(&self) -> f64 {
        self.config.k
    }

    pub fn horizon(&self) -> f64 {
        self.config.horizon
    }

    pub fn control_box(&self) -> &[f64] {
        &self.config.control_box
    }

    /// Friction bound polytope in block coordinates.
    pub fn friction_set(&self) -> &Polyhedron {
        &self.c0
    }

    /// Sweeping polyhedron in shape coordinates, `2N` unit-normal faces.
    pub fn set(&self) -> &Polyhedron {
        &self.set
    }

    /// The difference map as a matrix, `(N-1) x N`.
    pub fn shape_map(&self) -> &DMatrix<f64> {
        &self.zmat
    }

    /// The mean map as a row vector, `1 x N`.
    pub fn mean_map(&self) -> DMatrix<f64> {
        DMatrix::from_element(1, self.config.blocks, 1.0 / self.config.blocks as f64)
    }

    /// Body velocity for a shape velocity `w`.
    ///
    /// Minimizes the friction dissipation `sum_i max(mu_plus[i] X_i,
    /// -mu_minus[i] X_i)` over block velocities `X` with difference map
    /// image `w`, and returns the mean of the unique minimizer.
    pub fn body_velocity(&self, w: &DVector<f64>) -> (f64, VmDecomposition) {
        self.body_velocity_ordered(w, false)
    }

    /// Same program with the variable order reversed; used to confirm that
    /// the minimizer does not depend on pivoting accidents.
    fn body_velocity_ordered(&self, w: &DVector<f64>, reversed: bool) -> (f64, VmDecomposition) {
        let n = self.config.blocks;
        let d = n - 1;
        assert_eq!(w.len(), d, "shape velocity dimension");
        // Variables: forward parts (0..n), backward parts (n..2n).
        let order: Vec<usize> = if reversed {
            (0..2 * n).rev().collect()
        } else {
            (0..2 * n).collect()
        };
        let mut lp = LinearProgram::new(2 * n);
        let obj: Vec<(usize, f64)> = (0..2 * n)
            .map(|v| {
                let orig = order[v];
                let cost = if orig < n {
                    self.config.mu_plus[orig]
                } else {
                    self.config.mu_minus[orig - n]
                };
                (v, cost)
            })
            .collect();
        lp.set_objective(&obj);
        for j in 0..d {
            let row: Vec<(usize, f64)> = (0..2 * n)
                .map(|v| {
                    let orig = order[v];
                    let sign = if orig < n { 1.0 } else { -1.0 };
                    let col = if orig < n { orig } else { orig - n };
                    (v, sign * self.zmat[(j, col)])
                })
                .collect();
            lp.add_eq(&row, w[j]);
        }
        let (xs, cost) = match lp.solve().expect("dissipation program") {
            LpOutcome::Optimal { x, value } => (x, value),
            _ => unreachable!("feasible, bounded below by zero"),
        };
        let mut lambda = vec![0.0; 2 * n];
        for v in 0..2 * n {
            lambda[order[v]] = xs[v];
        }
        let mut anchor = DVector::<f64>::zeros(n);
        for i in 0..n {
            anchor[i] = lambda[i] - lambda[n + i];
        }
        let value = anchor.sum() / n as f64;
        (
            value,
            VmDecomposition {
                lambda,
                anchor,
                value,
                cost,
            },
        )
    }

    /// Generators of the slope set of the body velocity at `w`: gradients
    /// of every linear piece active there, deduplicated and sorted.
    ///
    /// Each piece corresponds to an optimal basis of the dissipation
    /// program; bases are enumerated exhaustively with a cost tie tolerance
    /// of 1e-10, so the cost grows combinatorially with the block count.
    pub fn velocity_subdifferential(&self, w: &DVector<f64>) -> Vec<DVector<f64>> {
        let n = self.config.blocks;
        let d = n - 1;
        assert_eq!(w.len(), d, "shape velocity dimension");
        let (_, dec) = self.body_velocity(w);
        let opt_cost = dec.cost;
        let tie = 1e-10 * (1.0 + opt_cost.abs());

        // Column i of the generator matrix is Z e_i for i < N and -Z e_{i-N}
        // otherwise; costs follow the same split.
        let col = |i: usize| -> DVector<f64> {
            let base = self.zmat.column(i % n).clone_owned();
            if i < n {
                base
            } else {
                -base
            }
        };
        let cost_of = |i: usize| -> f64 {
            if i < n {
                self.config.mu_plus[i]
            } else {
                self.config.mu_minus[i - n]
            }
        };

        let mut out: Vec<DVector<f64>> = Vec::new();
        let mut push_unique = |g: DVector<f64>| {
            if !out.iter().any(|h| (h - &g).norm() <= 1e-9) {
                out.push(g);
            }
        };

        for basis in Combinations::new(2 * n, d) {
            let mut ab = DMatrix::<f64>::zeros(d, d);
            for (k, &i) in basis.iter().enumerate() {
                ab.set_column(k, &col(i));
            }
            let lu = ab.clone().full_piv_lu();
            if !lu.is_invertible() {
                continue;
            }
            let Some(lam) = lu.solve(w) else { continue };
            if (&ab * &lam - w).norm() > 1e-9 * (1.0 + w.norm()) {
                continue;
            }
            if lam.iter().any(|&l| l < -1e-9) {
                continue;
            }
            let cost: f64 = basis
                .iter()
                .enumerate()
                .map(|(k, &i)| cost_of(i) * lam[k])
                .sum();
            if cost > opt_cost + tie {
                continue;
            }
            // Slope of the piece: solve A_B^T gamma = yhat, with yhat the
            // mean-map weights of the basic columns.
            let mut yhat = DVector::<f64>::zeros(d);
            for (k, &i) in basis.iter().enumerate() {
                yhat[k] = if i < n {
                    1.0 / n as f64
                } else {
                    -1.0 / n as f64
                };
            }
            let Some(gamma) = ab.transpose().full_piv_lu().solve(&yhat) else {
                continue;
            };
            push_unique(gamma);
        }
        out.sort_by(|a, b| {
            for k in 0..d {
                match a[k].partial_cmp(&b[k]).expect("finite slopes") {
                    std::cmp::Ordering::Equal => continue,
                    ord => return ord,
                }
            }
            std::cmp::Ordering::Equal
        });
        out
    }

    /// Integrates body positions along a trajectory of the reduced process:
    /// `y^{i+1} = y^i + h * v(reaction_i)`.  Returns one value per node.
    pub fn recover_position(
        &self,
        traj: &DiscreteTrajectory,
        y0: f64,
    ) -> Result<Vec<f64>, ModelError> {
        let d = self.shape_dim();
        if traj.states[0].len() != d {
            return Err(ModelError::DimensionMismatch {
                expected: d,
                got: traj.states[0].len(),
            });
        }
        let h = traj.h();
        let mut y = Vec::with_capacity(traj.intervals() + 1);
        y.push(y0);
        for xi in &traj.reactions {
            let (v, _) = self.body_velocity(xi);
            y.push(y.last().unwrap() + h * v);
        }
        Ok(y)
    }
}

/// The exhaustive balance check behind quasistatic uniqueness: no subset of
/// forward thresholds may exactly offset the complementary backward ones.
fn check_balance(mu_plus: &[f64], mu_minus: &[f64]) -> Result<(), ModelError> {
    let n = mu_plus.len();
    let scale: f64 = 1.0
        + mu_plus.iter().map(|m| m.abs()).sum::<f64>()
        + mu_minus.iter().map(|m| m.abs()).sum::<f64>();
    for mask in 0u64..(1u64 << n) {
        let mut sum = 0.0;
        for i in 0..n {
            if mask & (1 << i) != 0 {
                sum += mu_plus[i];
            } else {
                sum -= mu_minus[i];
            }
        }
        if sum.abs() <= 1e-12 * scale {
            let subset = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            return Err(ModelError::UniquenessViolation { subset });
        }
    }
    Ok(())
}

/// `(N-1) x N` matrix of consecutive differences.
fn difference_map(n: usize) -> DMatrix<f64> {
    let mut z = DMatrix::<f64>::zeros(n - 1, n);
    for j in 0..n - 1 {
        z[(j, j)] = -1.0;
        z[(j, j + 1)] = 1.0;
    }
    z
}

/// Lexicographic `k`-subsets of `0..n`.
struct Combinations {
    n: usize,
    current: Vec<usize>,
    done: bool,
}

impl Combinations {
    fn new(n: usize, k: usize) -> Self {
        Combinations {
            n,
            current: (0..k).collect(),
            done: k > n,
        }
    }
}

impl Iterator for Combinations {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.done {
            return None;
        }
        let out = self.current.clone();
        let k = self.current.len();
        // Advance to the next subset.
        let mut i = k;
        loop {
            if i == 0 {
                self.done = true;
                break;
            }
            i -= 1;
            if self.current[i] < self.n - (k - i) {
                self.current[i] += 1;
                for j in i + 1..k {
                    self.current[j] = self.current[j - 1] + 1;
                }
                break;
            }
        }
        Some(out)
    }
}

/// The scalar reference problem: state interval `[a, b]`, body velocity
/// `|w| / 2`, controls in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneLink {
    pub a: f64,
    pub b: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
}

impl OneLink {
    pub fn new(a: f64, b: f64, horizon: f64) -> Result<Self, ModelError> {
        if !(a.is_finite() && b.is_finite() && b > a) {
            return Err(ModelError::BadInterval { a, b });
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(ModelError::BadPeriod(horizon));
        }
        Ok(OneLink { a, b, horizon })
    }

    /// The interval `[a, b]` as a two-face polyhedron.
    pub fn set(&self) -> Polyhedron {
        let n = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let c = DVector::from_column_slice(&[self.b, -self.a]);
        Polyhedron::new(n, c).expect("nonempty interval")
    }

    /// Body velocity `|w| / 2`.
    pub fn speed(&self, w: f64) -> f64 {
        0.5 * w.abs()
    }

    /// Slope set of the body velocity at `w`.
    pub fn speed_generators(&self, w: f64) -> Vec<f64> {
        if w > 0.0 {
            vec![0.5]
        } else if w < 0.0 {
            vec![-0.5]
        } else {
            vec![-0.5, 0.5]
        }
    }

    /// Control box half-width (always one).
    pub fn control_halfwidth(&self) -> f64 {
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sweeping::{simulate, ControlGrid, Dynamics};

    /// The two-block model whose body velocity is exactly `|w| / 2`.
    fn pair_config() -> ModelConfig {
        ModelConfig {
            blocks: 2,
            k: 1.0,
            mu_plus: vec![1.0, 2.0],
            mu_minus: vec![3.0, 4.0],
            horizon: 4.0,
            control_box: vec![1.0],
        }
    }

    fn homog3(plus: f64, minus: f64) -> ModelConfig {
        ModelConfig {
            blocks: 3,
            k: 1.0,
            mu_plus: vec![plus; 3],
            mu_minus: vec![minus; 3],
            horizon: 4.0,
            control_box: vec![1.0, 1.0],
        }
    }

    fn v1(a: f64) -> DVector<f64> {
        DVector::from_column_slice(&[a])
    }

    fn v2(a: f64, b: f64) -> DVector<f64> {
        DVector::from_column_slice(&[a, b])
    }

    #[test]
    fn two_block_geometry() {
        let m = CrawlerModel::build(pair_config()).unwrap();
        assert_eq!(m.shape_dim(), 1);
        assert_eq!(m.set().num_faces(), 4);
        assert_eq!(m.friction_set().num_faces(), 4);
        // Friction bounds in block space: [-3, 1] x [-4, 2].
        assert!(m.friction_set().contains(&v2(0.9, -3.9), 0.0));
        assert!(!m.friction_set().contains(&v2(1.1, 0.0), 1e-9));
        // Effective shape interval is [-1, 2]: the tighter of the two
        // constraint pairs wins, the remaining faces are redundant.
        let (p, _) = m.set().project(&v1(5.0));
        assert!((p[0] - 2.0).abs() < 1e-12);
        let (q, _) = m.set().project(&v1(-5.0));
        assert!((q[0] + 1.0).abs() < 1e-12);
        assert!(m.set().contains(&v1(0.0), 0.0));
    }

    #[test]
    fn difference_map_shape() {
        let z = difference_map(3);
        let x = DVector::from_column_slice(&[1.0, 4.0, 9.0]);
        let d = &z * &x;
        assert_eq!(d, v2(3.0, 5.0));
    }

    #[test]
    fn symmetric_thresholds_are_rejected() {
        let mut cfg = pair_config();
        cfg.mu_plus = vec![1.0, 1.0];
        cfg.mu_minus = vec![1.0, 1.0];
        match CrawlerModel::build(cfg) {
            Err(ModelError::UniquenessViolation { subset }) => {
                // The named subset must actually balance: one forward
                // threshold against the other block's backward threshold.
                assert_eq!(subset.len(), 1);
            }
            other => panic!("expected uniqueness violation, got {other:?}"),
        }
    }

    #[test]
    fn validation_catches_bad_inputs() {
        let mut cfg = pair_config();
        cfg.mu_plus = vec![1.0];
        assert!(matches!(
            CrawlerModel::build(cfg),
            Err(ModelError::CoefficientCount { expected: 2, got: 1 })
        ));
        let mut cfg = pair_config();
        cfg.mu_minus[1] = -0.5;
        assert!(matches!(
            CrawlerModel::build(cfg),
            Err(ModelError::DegenerateFriction { index: 3 })
        ));
        let mut cfg = pair_config();
        cfg.blocks = 1;
        cfg.mu_plus = vec![1.0];
        cfg.mu_minus = vec![2.0];
        cfg.control_box = vec![];
        assert!(matches!(
            CrawlerModel::build(cfg),
            Err(ModelError::BadBlockCount(1))
        ));
        let mut cfg = pair_config();
        cfg.control_box = vec![-1.0];
        assert!(matches!(
            CrawlerModel::build(cfg),
            Err(ModelError::BadBox { index: 0 })
        ));
    }

    #[test]
    fn three_block_homogeneous_builds() {
        let m = CrawlerModel::build(homog3(1.0, 3.0)).unwrap();
        assert_eq!(m.shape_dim(), 2);
        assert_eq!(m.set().num_faces(), 6);
    }

    #[test]
    fn pair_speed_is_half_absolute_value() {
        let m = CrawlerModel::build(pair_config()).unwrap();
        for w in [-2.0, -0.5, 0.0, 1.0, 7.0] {
            let (v, dec) = m.body_velocity(&v1(w));
            assert!(
                (v - 0.5 * w.abs()).abs() < 1e-9,
                "w = {w}, v = {v}"
            );
            // The anchor projects back onto the queried shape velocity.
            let back = m.shape_map() * &dec.anchor;
            assert!((back[0] - w).abs() < 1e-9);
            assert!((dec.anchor.sum() / 2.0 - dec.value).abs() < 1e-12);
            assert!(dec.lambda.iter().all(|&l| l >= -1e-12));
        }
        // At w = 1 only the second block moves, forward.
        let (_, dec) = m.body_velocity(&v1(1.0));
        assert!((dec.anchor[0]).abs() < 1e-9);
        assert!((dec.anchor[1] - 1.0).abs() < 1e-9);
        assert!((dec.lambda[1] - 1.0).abs() < 1e-9);
        assert!((dec.cost - 2.0).abs() < 1e-9);
    }

    #[test]
    fn pivot_order_does_not_change_the_minimizer() {
        let m = CrawlerModel::build(homog3(1.0, 3.0)).unwrap();
        for w in [v2(1.0, 0.0), v2(-0.3, 0.7), v2(0.2, -1.1)] {
            let (va, da) = m.body_velocity_ordered(&w, false);
            let (vb, db) = m.body_velocity_ordered(&w, true);
            assert!((va - vb).abs() < 1e-9);
            assert!((da.anchor - db.anchor).norm() < 1e-9);
            for (a, b) in da.lambda.iter().zip(&db.lambda) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn forward_only_regime_speeds() {
        // Backward thresholds dominate: the crawler creeps forward no
        // matter how the shape changes.
        let m = CrawlerModel::build(homog3(1.0, 3.0)).unwrap();
        let (v, _) = m.body_velocity(&v2(1.0, 0.0));
        assert!((v - 2.0 / 3.0).abs() < 1e-9);
        let (v, _) = m.body_velocity(&v2(-1.0, 0.0));
        assert!((v - 1.0 / 3.0).abs() < 1e-9);
        for k in 0..64 {
            let th = std::f64::consts::TAU * k as f64 / 64.0;
            let (v, _) = m.body_velocity(&v2(th.cos(), th.sin()));
            assert!(v > 0.0, "direction {k}");
        }
    }

    #[test]
    fn backward_only_regime_speeds() {
        let m = CrawlerModel::build(homog3(3.0, 1.0)).unwrap();
        for k in 0..64 {
            let th = std::f64::consts::TAU * k as f64 / 64.0;
            let (v, _) = m.body_velocity(&v2(th.cos(), th.sin()));
            assert!(v < 0.0, "direction {k}");
        }
    }

    #[test]
    fn mixed_regime_attains_both_signs() {
        let m = CrawlerModel::build(homog3(1.0, 1.5)).unwrap();
        let mut pos = false;
        let mut neg = false;
        for k in 0..360 {
            let th = std::f64::consts::TAU * k as f64 / 360.0;
            let (v, _) = m.body_velocity(&v2(th.cos(), th.sin()));
            pos |= v > 1e-12;
            neg |= v < -1e-12;
        }
        assert!(pos && neg);
    }

    #[test]
    fn speed_is_positively_homogeneous_and_lipschitz() {
        let m = CrawlerModel::build(homog3(1.0, 3.0)).unwrap();
        let lip = 3.0; // largest threshold
        let dirs = [v2(0.3, -0.8), v2(-1.2, 0.4), v2(0.9, 0.9)];
        for w in &dirs {
            let (v, _) = m.body_velocity(w);
            for c in [0.5, 2.0, 10.0] {
                let (vc, _) = m.body_velocity(&(c * w));
                assert!((vc - c * v).abs() <= 1e-10 * (1.0 + vc.abs()));
            }
        }
        for a in &dirs {
            for b in &dirs {
                let (va, _) = m.body_velocity(a);
                let (vb, _) = m.body_velocity(b);
                assert!((va - vb).abs() <= lip * (a - b).norm() + 1e-12);
            }
        }
    }

    #[test]
    fn subdifferential_of_pair_model() {
        let m = CrawlerModel::build(pair_config()).unwrap();
        let g = m.velocity_subdifferential(&v1(1.0));
        assert_eq!(g.len(), 1);
        assert!((g[0][0] - 0.5).abs() < 1e-9);
        let g = m.velocity_subdifferential(&v1(-2.0));
        assert_eq!(g.len(), 1);
        assert!((g[0][0] + 0.5).abs() < 1e-9);
        let g = m.velocity_subdifferential(&v1(0.0));
        assert_eq!(g.len(), 2);
        assert!((g[0][0] + 0.5).abs() < 1e-9);
        assert!((g[1][0] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn subdifferential_supports_the_speed() {
        // Every active slope reproduces the value in its own direction.
        let m = CrawlerModel::build(homog3(1.0, 3.0)).unwrap();
        for w in [v2(1.0, 0.3), v2(-0.5, 0.8), v2(0.0, -1.0), v2(1.0, 1.0)] {
            let (v, _) = m.body_velocity(&w);
            let gens = m.velocity_subdifferential(&w);
            assert!(!gens.is_empty());
            for gamma in &gens {
                assert!((gamma.dot(&w) - v).abs() < 1e-8, "w = {w:?}");
            }
        }
    }

    #[test]
    fn position_recovery_from_wall_pushing() {
        // Hold the state at the upper wall with u = +1 for the first half
        // of the period: each such step contributes h * |1|/2 of progress.
        let m = CrawlerModel::build(pair_config()).unwrap();
        let d = Dynamics::control(1);
        let mut vals = vec![v1(1.0); 4];
        vals.extend(vec![v1(0.0); 4]);
        let grid = ControlGrid::new(3, 2.0, vals).unwrap();
        let traj = simulate(m.set(), &d, &grid, &v1(2.0));
        let y = m.recover_position(&traj, 0.0).unwrap();
        assert_eq!(y.len(), 9);
        // One unit of pushing time at speed 1/2.
        assert!((y[8] - 0.5).abs() < 1e-9);
        // No reaction, no movement.
        for i in 4..8 {
            assert!((y[i + 1] - y[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_regime_never_gains_ground() {
        let m = CrawlerModel::build(homog3(3.0, 1.0)).unwrap();
        let d = Dynamics::control(2);
        let vals = vec![
            v2(1.0, 0.0),
            v2(0.0, 1.0),
            v2(-1.0, 0.5),
            v2(0.0, -1.5),
        ];
        let grid = ControlGrid::new(2, 2.0, vals).unwrap();
        let x0 = DVector::zeros(2);
        let traj = simulate(m.set(), &d, &grid, &x0);
        let y = m.recover_position(&traj, 0.0).unwrap();
        for pair in y.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12);
        }
    }

    #[test]
    fn config_serde_round_trip() {
        let cfg = pair_config();
        let s = serde_json::to_string(&cfg).unwrap();
        assert!(s.contains("\"N\":2"));
        assert!(s.contains("\"box\""));
        let back: ModelConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, cfg);
        let raw = r#"{"N":2,"k":1.0,"mu_plus":[1.0,2.0],"mu_minus":[3.0,4.0],"T":4.0,"box":[1.0]}"#;
        let cfg2: ModelConfig = serde_json::from_str(raw).unwrap();
        assert_eq!(cfg2, cfg);
    }

    #[test]
    fn one_link_basics() {
        let ol = OneLink::new(0.0, 1.0, 4.0).unwrap();
        let set = ol.set();
        assert_eq!(set.num_faces(), 2);
        assert!(set.contains(&v1(0.5), 0.0));
        assert!((ol.speed(-3.0) - 1.5).abs() < 1e-15);
        assert_eq!(ol.speed_generators(0.0), vec![-0.5, 0.5]);
        assert_eq!(ol.speed_generators(2.0), vec![0.5]);
        assert!(OneLink::new(1.0, 1.0, 4.0).is_err());
        let s = serde_json::to_string(&ol).unwrap();
        assert!(s.contains("\"T\":4.0"));
        let back: OneLink = serde_json::from_str(&s).unwrap();
        assert_eq!(back, ol);
    }
}
