//! Convex polyhedra in half-space form, metric projection, and normal cones.
//!
//! A [`Polyhedron`] is stored as `{ x : <n_j, x> <= c_j }` with unit outward
//! normals `n_j`.  Construction verifies that the interior is nonempty and
//! keeps a strict interior point as a witness; projection and the normal
//! cone decompositions build on that witness.

use nalgebra::{DMatrix, DVector};
use serde::de::Error as DeError;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::linprog::{min_norm_nonneg, LinearProgram, LpOutcome};

/// Default tolerance for deciding that a face is active at a point.
pub const DEFAULT_ACTIVE_TOL: f64 = 1e-9;
/// Feasibility slack used when checking membership after a projection.
const PROJ_FEAS_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PolytopeError {
    /// A normal row was (numerically) zero and cannot be normalized.
    ZeroNormal(usize),
    /// Number of offsets does not match the number of normal rows.
    OffsetCount { faces: usize, offsets: usize },
    /// The half-spaces have empty intersection.
    Empty,
    /// The intersection is nonempty but has no interior point.
    NoInterior,
}

impl std::fmt::Display for PolytopeError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PolytopeError::ZeroNormal(j) => write!(f, "face {j} has a zero normal"),
            PolytopeError::OffsetCount { faces, offsets } => {
                write!(f, "{faces} normal rows but {offsets} offsets")
            }
            PolytopeError::Empty => write!(f, "half-spaces have empty intersection"),
            PolytopeError::NoInterior => write!(f, "polyhedron has empty interior"),
        }
    }
}

impl std::error::Error for PolytopeError {}

/// Indices of faces considered active at a point, ascending.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ActiveSet {
    indices: Vec<usize>,
}

impl ActiveSet {
    pub fn new(mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        ActiveSet { indices }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, j: usize) -> bool {
        self.indices.binary_search(&j).is_ok()
    }
}

/// A conic combination `sum lambda_j n_j` of outward normals.
///
/// `residual` is the Euclidean distance between the represented vector and
/// the combination actually achieved with `coefficients >= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConeDecomposition {
    pub indices: Vec<usize>,
    pub coefficients: Vec<f64>,
    pub residual: f64,
}

impl ConeDecomposition {
    pub fn empty() -> Self {
        ConeDecomposition {
            indices: Vec::new(),
            coefficients: Vec::new(),
            residual: 0.0,
        }
    }

    /// True when the vector lay in the cone up to `tol`.
    pub fn is_feasible(&self, tol: f64) -> bool {
        self.residual <= tol
    }

    /// Rebuilds `sum lambda_j n_j` against the owning polyhedron.
    pub fn combination(&self, poly: &Polyhedron) -> DVector<f64> {
        let mut v = DVector::zeros(poly.dim());
        for (&j, &l) in self.indices.iter().zip(&self.coefficients) {
            v += l * poly.normal(j);
        }
        v
    }

    /// Coefficient for face `j`, zero if absent.
    pub fn coefficient(&self, j: usize) -> f64 {
        self.indices
            .iter()
            .position(|&k| k == j)
            .map_or(0.0, |p| self.coefficients[p])
    }
}

/// Bounded-or-not convex polyhedron `{ x : A x <= c }` with unit rows of `A`.
#[derive(Debug, Clone)]
pub struct Polyhedron {
    a: DMatrix<f64>,
    c: DVector<f64>,
    interior: DVector<f64>,
}

impl Polyhedron {
    /// Normalizes each row to unit length (rescaling its offset), then
    /// certifies a strict interior point by linear programming.
    pub fn new(normals: DMatrix<f64>, offsets: DVector<f64>) -> Result<Self, PolytopeError> {
        let faces = normals.nrows();
        let dim = normals.ncols();
        assert!(dim >= 1, "polyhedron dimension must be at least 1");
        if offsets.len() != faces {
            return Err(PolytopeError::OffsetCount {
                faces,
                offsets: offsets.len(),
            });
        }
        let mut a = normals;
        let mut c = offsets;
        for j in 0..faces {
            let norm = a.row(j).norm();
            if norm < 1e-14 {
                return Err(PolytopeError::ZeroNormal(j));
            }
            if (norm - 1.0).abs() > 1e-15 {
                for k in 0..dim {
                    a[(j, k)] /= norm;
                }
                c[j] /= norm;
            }
        }
        let interior = interior_witness(&a, &c)?;
        Ok(Polyhedron { a, c, interior })
    }

    /// Same normals, new offsets.  Used for time-shifted moving sets.
    pub fn with_offsets(&self, offsets: DVector<f64>) -> Result<Self, PolytopeError> {
        if offsets.len() != self.num_faces() {
            return Err(PolytopeError::OffsetCount {
                faces: self.num_faces(),
                offsets: offsets.len(),
            });
        }
        let interior = interior_witness(&self.a, &offsets)?;
        Ok(Polyhedron {
            a: self.a.clone(),
            c: offsets,
            interior,
        })
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn num_faces(&self) -> usize {
        self.a.nrows()
    }

    pub fn normals(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn offsets(&self) -> &DVector<f64> {
        &self.c
    }

    pub fn normal(&self, j: usize) -> DVector<f64> {
        self.a.row(j).transpose()
    }

    /// A point with strictly negative gap on every face.
    pub fn interior_point(&self) -> &DVector<f64> {
        &self.interior
    }

    /// Signed face gaps `A x - c`; nonpositive inside.
    pub fn face_gaps(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.dim());
        &self.a * x - &self.c
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        self.face_gaps(x).iter().all(|&g| g <= tol)
    }

    /// Faces whose gap exceeds `-tol` (near-active or violated).
    pub fn active_set(&self, x: &DVector<f64>, tol: f64) -> ActiveSet {
        let gaps = self.face_gaps(x);
        ActiveSet::new(
            (0..self.num_faces())
                .filter(|&j| gaps[j] >= -tol)
                .collect(),
        )
    }

    /// Euclidean projection onto the polyhedron.
    ///
    /// Returns the nearest point together with the Karush-Kuhn-Tucker
    /// multipliers, so that `x - proj = sum lambda_j n_j` with `lambda >= 0`
    /// supported on faces active at the projection.
    pub fn project(&self, x: &DVector<f64>) -> (DVector<f64>, ConeDecomposition) {
        assert_eq!(x.len(), self.dim());
        let gaps = self.face_gaps(x);
        let viol: Vec<usize> = (0..self.num_faces()).filter(|&j| gaps[j] > 0.0).collect();
        if viol.is_empty() {
            return (x.clone(), ConeDecomposition::empty());
        }
        if viol.len() == 1 {
            let j = viol[0];
            let z = x - gaps[j] * self.normal(j);
            if self.contains(&z, PROJ_FEAS_TOL) {
                return (
                    z,
                    ConeDecomposition {
                        indices: vec![j],
                        coefficients: vec![gaps[j]],
                        residual: 0.0,
                    },
                );
            }
        }
        self.project_active_set(x, &[])
    }

    /// Projection seeded with a working set from a previous nearby solve.
    ///
    /// If the hinted faces already reproduce the optimality system the
    /// answer comes from a single least squares solve; otherwise this falls
    /// back to [`Polyhedron::project`].
    pub fn project_with_hint(
        &self,
        x: &DVector<f64>,
        hint: &ActiveSet,
    ) -> (DVector<f64>, ConeDecomposition) {
        assert_eq!(x.len(), self.dim());
        if !hint.is_empty() {
            let (z, lambda) = self.eq_projection(x, hint.indices());
            let lambda_ok = lambda.iter().all(|&l| l >= -1e-10);
            if lambda_ok && self.contains(&z, PROJ_FEAS_TOL) {
                return (z.clone(), self.finish_decomposition(x, &z, hint.indices(), &lambda));
            }
        }
        self.project(x)
    }

    /// Distance to the polyhedron (zero inside).
    pub fn distance(&self, x: &DVector<f64>) -> f64 {
        let (z, _) = self.project(x);
        (x - z).norm()
    }

    /// Decomposes `v` over the normal cone at `x`.
    ///
    /// Coefficients are the minimum-norm nonnegative weights on the faces
    /// active at `x` (with tolerance `active_tol`); the residual reports how
    /// far `v` is from the cone they span.
    pub fn normal_cone_coeffs(
        &self,
        x: &DVector<f64>,
        v: &DVector<f64>,
        active_tol: f64,
    ) -> ConeDecomposition {
        assert_eq!(x.len(), self.dim());
        assert_eq!(v.len(), self.dim());
        let act = self.active_set(x, active_tol);
        if act.is_empty() {
            return ConeDecomposition {
                indices: Vec::new(),
                coefficients: Vec::new(),
                residual: v.norm(),
            };
        }
        let k = act.len();
        let mut gens = DMatrix::<f64>::zeros(self.dim(), k);
        for (col, &j) in act.indices().iter().enumerate() {
            gens.set_column(col, &self.normal(j));
        }
        let lambda = min_norm_nonneg(&gens, v, 1e-6);
        let residual = (v - &gens * &lambda).norm();
        ConeDecomposition {
            indices: act.indices().to_vec(),
            coefficients: lambda.iter().cloned().collect(),
            residual,
        }
    }

    /// Positive linear independence of the active normals at `x`.
    ///
    /// Solves `max sum lambda` over `lambda >= 0`, `sum lambda_j n_j = 0`,
    /// `sum lambda <= 1`; independence holds exactly when the optimum is
    /// zero.  Vacuously true with no active faces.
    pub fn check_plicq(&self, x: &DVector<f64>, active_tol: f64) -> bool {
        let act = self.active_set(x, active_tol);
        if act.is_empty() {
            return true;
        }
        let k = act.len();
        let mut lp = LinearProgram::new(k);
        lp.set_maximize(true);
        lp.set_objective(&(0..k).map(|i| (i, 1.0)).collect::<Vec<_>>());
        for d in 0..self.dim() {
            let row: Vec<(usize, f64)> = act
                .indices()
                .iter()
                .enumerate()
                .map(|(i, &j)| (i, self.a[(j, d)]))
                .collect();
            lp.add_eq(&row, 0.0);
        }
        lp.add_le(&(0..k).map(|i| (i, 1.0)).collect::<Vec<_>>(), 1.0);
        match lp.solve().expect("positive independence program") {
            LpOutcome::Optimal { value, .. } => value <= 1e-7,
            _ => unreachable!("program is feasible and bounded"),
        }
    }

    /// Projection of `x` onto the affine hull of the faces in `ws`, with the
    /// minimum-norm multiplier vector: `z = x - A_ws^T lambda`.
    fn eq_projection(&self, x: &DVector<f64>, ws: &[usize]) -> (DVector<f64>, DVector<f64>) {
        if ws.is_empty() {
            return (x.clone(), DVector::zeros(0));
        }
        let k = ws.len();
        let mut nw = DMatrix::<f64>::zeros(k, self.dim());
        let mut cw = DVector::<f64>::zeros(k);
        for (i, &j) in ws.iter().enumerate() {
            nw.row_mut(i).copy_from(&self.a.row(j));
            cw[i] = self.c[j];
        }
        let rhs = &nw * x - cw;
        let gram = &nw * nw.transpose();
        let svd = gram.svd(true, true);
        let lambda = svd.solve(&rhs, 1e-12).expect("gram svd");
        let z = x - nw.transpose() * &lambda;
        (z, lambda)
    }

    /// Primal active-set loop for the projection quadratic program, started
    /// from the interior witness.
    fn project_active_set(&self, x: &DVector<f64>, seed: &[usize]) -> (DVector<f64>, ConeDecomposition) {
        let mut z = self.interior.clone();
        let mut ws: Vec<usize> = seed.to_vec();
        let scale = 1.0 + x.norm();
        let cap = 300 + 30 * self.num_faces();
        for _ in 0..cap {
            let (z_eq, lambda) = self.eq_projection(x, &ws);
            if (&z_eq - &z).norm() <= 1e-12 * scale {
                // At the minimizer over the working-set faces.
                let (min_l, arg_min) = lambda
                    .iter()
                    .enumerate()
                    .fold((f64::INFINITY, 0), |(m, a), (i, &l)| {
                        if l < m {
                            (l, i)
                        } else {
                            (m, a)
                        }
                    });
                if min_l < -1e-10 {
                    ws.remove(arg_min);
                    continue;
                }
                let gaps = self.face_gaps(&z_eq);
                let (worst_gap, worst) = gaps
                    .iter()
                    .enumerate()
                    .fold((f64::NEG_INFINITY, 0), |(m, a), (j, &g)| {
                        if g > m {
                            (g, j)
                        } else {
                            (m, a)
                        }
                    });
                if worst_gap > PROJ_FEAS_TOL * scale {
                    if !ws.contains(&worst) {
                        ws.push(worst);
                        ws.sort_unstable();
                        continue;
                    }
                } else {
                    return (z_eq.clone(), self.finish_decomposition(x, &z_eq, &ws, &lambda));
                }
            }
            let d = &z_eq - &z;
            let mut alpha = 1.0f64;
            let mut blocker: Option<usize> = None;
            for j in 0..self.num_faces() {
                if ws.contains(&j) {
                    continue;
                }
                let nd = self.a.row(j).transpose().dot(&d);
                if nd > 1e-14 {
                    let room = (self.c[j] - self.a.row(j).transpose().dot(&z)).max(0.0);
                    let aj = room / nd;
                    if aj < alpha - 1e-15 {
                        alpha = aj;
                        blocker = Some(j);
                    }
                }
            }
            z += alpha * d;
            if let Some(j) = blocker {
                ws.push(j);
                ws.sort_unstable();
            }
        }
        // Degenerate fallback: cyclic projections with correction terms.
        let z = self.dykstra(x);
        let d = x - &z;
        let dec = self.normal_cone_coeffs(&z, &d, DEFAULT_ACTIVE_TOL);
        (z, dec)
    }

    fn finish_decomposition(
        &self,
        x: &DVector<f64>,
        z: &DVector<f64>,
        ws: &[usize],
        lambda: &DVector<f64>,
    ) -> ConeDecomposition {
        let mut indices = Vec::new();
        let mut coefficients = Vec::new();
        for (i, &j) in ws.iter().enumerate() {
            let l = lambda[i].max(0.0);
            indices.push(j);
            coefficients.push(l);
        }
        let mut combo = DVector::<f64>::zeros(self.dim());
        for (&j, &l) in indices.iter().zip(&coefficients) {
            combo += l * self.normal(j);
        }
        let residual = ((x - z) - combo).norm();
        ConeDecomposition {
            indices,
            coefficients,
            residual,
        }
    }

    fn dykstra(&self, x: &DVector<f64>) -> DVector<f64> {
        let m = self.num_faces();
        let mut z = x.clone();
        let mut corr = vec![DVector::<f64>::zeros(self.dim()); m];
        for _ in 0..20_000 {
            let mut sweep_move = 0.0f64;
            for j in 0..m {
                let y = &z + &corr[j];
                let gap = self.a.row(j).transpose().dot(&y) - self.c[j];
                let znew = if gap > 0.0 {
                    &y - gap * self.normal(j)
                } else {
                    y.clone()
                };
                corr[j] = y - &znew;
                sweep_move = sweep_move.max((&znew - &z).norm());
                z = znew;
            }
            if sweep_move < 1e-13 {
                break;
            }
        }
        z
    }
}

/// Certifies a strict interior point by maximizing the common slack `t` in
/// `<n_j, x> + t <= c_j`, `0 <= t <= 1`.
fn interior_witness(a: &DMatrix<f64>, c: &DVector<f64>) -> Result<DVector<f64>, PolytopeError> {
    let dim = a.ncols();
    let faces = a.nrows();
    if faces == 0 {
        return Ok(DVector::zeros(dim));
    }
    let mut lp = LinearProgram::new(dim + 1);
    for k in 0..dim {
        lp.mark_free(k);
    }
    lp.set_maximize(true);
    lp.set_objective(&[(dim, 1.0)]);
    for j in 0..faces {
        let mut row: Vec<(usize, f64)> = (0..dim).map(|k| (k, a[(j, k)])).collect();
        row.push((dim, 1.0));
        lp.add_le(&row, c[j]);
    }
    lp.add_le(&[(dim, 1.0)], 1.0);
    match lp.solve().expect("interior witness program") {
        LpOutcome::Optimal { x, value } => {
            if value <= 1e-9 {
                Err(PolytopeError::NoInterior)
            } else {
                Ok(DVector::from_vec(x[..dim].to_vec()))
            }
        }
        LpOutcome::Infeasible => Err(PolytopeError::Empty),
        LpOutcome::Unbounded => unreachable!("slack is bounded above"),
    }
}

#[derive(Serialize, Deserialize)]
struct PolyhedronData {
    normals: Vec<Vec<f64>>,
    offsets: Vec<f64>,
}

impl Serialize for Polyhedron {
    fn serialize<S: Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        let data = PolyhedronData {
            normals: (0..self.num_faces())
                .map(|j| self.a.row(j).iter().cloned().collect())
                .collect(),
            offsets: self.c.iter().cloned().collect(),
        };
        data.serialize(ser)
    }
}

impl<'de> Deserialize<'de> for Polyhedron {
    fn deserialize<D: Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let data = PolyhedronData::deserialize(de)?;
        let faces = data.normals.len();
        let dim = data.normals.first().map_or(0, |r| r.len());
        if dim == 0 {
            return Err(D::Error::custom("polyhedron needs at least one normal row"));
        }
        let mut a = DMatrix::<f64>::zeros(faces, dim);
        for (j, row) in data.normals.iter().enumerate() {
            if row.len() != dim {
                return Err(D::Error::custom(format!(
                    "normal row {j} has length {} but dimension is {dim}",
                    row.len()
                )));
            }
            for (k, &v) in row.iter().enumerate() {
                a[(j, k)] = v;
            }
            let norm = a.row(j).norm();
            if (norm - 1.0).abs() > 1e-12 {
                log::warn!("normal row {j} had length {norm:.3e}; renormalizing");
            }
        }
        let c = DVector::from_vec(data.offsets);
        Polyhedron::new(a, c).map_err(|e| D::Error::custom(e.to_string()))
    }
}
