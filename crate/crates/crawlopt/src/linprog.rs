//! Dense linear programming and nonnegative least squares.
//!
//! Every linear program in this crate is small (at most a few hundred rows),
//! so a self-contained dense two-phase simplex is simpler and more
//! predictable than pulling in an external solver.  The solver uses Dantzig
//! pricing with a switch to Bland's rule after a stall threshold, which
//! guarantees termination on degenerate problems.

use nalgebra::{DMatrix, DVector};

/// Pivot elements smaller than this are treated as zero.
const PIVOT_TOL: f64 = 1e-11;
/// Feasibility slack accepted at the end of phase one.
const PHASE1_TOL: f64 = 1e-8;

/// Outcome of a solve on a well-posed program.
#[derive(Debug, Clone, PartialEq)]
pub enum LpOutcome {
    /// Finite optimum; `x` holds the caller-visible variables.
    Optimal { x: Vec<f64>, value: f64 },
    /// The constraint system has no solution.
    Infeasible,
    /// The objective is unbounded over the feasible set.
    Unbounded,
}

/// Failure of the solve procedure itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpError {
    /// The pivot loop hit its iteration cap.
    IterationLimit,
}

impl std::fmt::Display for LpError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LpError::IterationLimit => write!(f, "simplex iteration limit reached"),
        }
    }
}

impl std::error::Error for LpError {}

enum RowKind {
    Eq,
    Le,
}

/// Incremental builder for a linear program.
///
/// Variables are nonnegative unless [`LinearProgram::mark_free`] is called.
/// Rows are entered as sparse coefficient lists over the caller's variables.
pub struct LinearProgram {
    nvars: usize,
    maximize: bool,
    objective: Vec<f64>,
    free: Vec<bool>,
    rows: Vec<(Vec<(usize, f64)>, RowKind, f64)>,
}

impl LinearProgram {
    pub fn new(nvars: usize) -> Self {
        LinearProgram {
            nvars,
            maximize: false,
            objective: vec![0.0; nvars],
            free: vec![false; nvars],
            rows: Vec::new(),
        }
    }

    pub fn set_maximize(&mut self, maximize: bool) {
        self.maximize = maximize;
    }

    pub fn set_objective(&mut self, coeffs: &[(usize, f64)]) {
        for c in self.objective.iter_mut() {
            *c = 0.0;
        }
        for &(j, v) in coeffs {
            self.objective[j] = v;
        }
    }

    /// Allows a variable to take either sign.
    pub fn mark_free(&mut self, var: usize) {
        self.free[var] = true;
    }

    pub fn add_eq(&mut self, coeffs: &[(usize, f64)], rhs: f64) {
        self.rows.push((coeffs.to_vec(), RowKind::Eq, rhs));
    }

    pub fn add_le(&mut self, coeffs: &[(usize, f64)], rhs: f64) {
        self.rows.push((coeffs.to_vec(), RowKind::Le, rhs));
    }

    /// Runs two-phase simplex and maps the solution back to caller variables.
    pub fn solve(&self) -> Result<LpOutcome, LpError> {
        // Column layout: one column per nonneg var, two (pos/neg) per free
        // var, then one slack per `Le` row, then one artificial per row.
        let mut col_of = Vec::with_capacity(self.nvars);
        let mut ncols = 0usize;
        for j in 0..self.nvars {
            col_of.push(ncols);
            ncols += if self.free[j] { 2 } else { 1 };
        }
        let nstruct = ncols;
        let nslack = self
            .rows
            .iter()
            .filter(|r| matches!(r.1, RowKind::Le))
            .count();
        let m = self.rows.len();
        let ntotal = nstruct + nslack + m;

        // Tableau rows: [structural | slack | artificial | rhs].
        let mut tab = DMatrix::<f64>::zeros(m, ntotal + 1);
        let mut slack_idx = nstruct;
        for (i, (coeffs, kind, rhs)) in self.rows.iter().enumerate() {
            for &(j, v) in coeffs {
                let c = col_of[j];
                tab[(i, c)] += v;
                if self.free[j] {
                    tab[(i, c + 1)] -= v;
                }
            }
            if matches!(kind, RowKind::Le) {
                tab[(i, slack_idx)] = 1.0;
                slack_idx += 1;
            }
            tab[(i, ntotal)] = *rhs;
            if tab[(i, ntotal)] < 0.0 {
                for c in 0..=ntotal {
                    tab[(i, c)] = -tab[(i, c)];
                }
            }
            let art = nstruct + nslack + i;
            tab[(i, art)] = 1.0;
        }

        // Phase one: minimize the sum of artificials.
        let mut basis: Vec<usize> = (0..m).map(|i| nstruct + nslack + i).collect();
        let mut cost1 = vec![0.0; ntotal];
        for c in nstruct + nslack..ntotal {
            cost1[c] = 1.0;
        }
        let allowed1 = vec![true; ntotal];
        match run_simplex(&mut tab, &mut basis, &cost1, &allowed1)? {
            SimplexEnd::Optimal => {}
            SimplexEnd::Unbounded => unreachable!("phase-one objective is bounded below"),
        }
        let phase1: f64 = basis
            .iter()
            .enumerate()
            .filter(|(_, &b)| b >= nstruct + nslack)
            .map(|(i, _)| tab[(i, ntotal)])
            .sum();
        if phase1 > PHASE1_TOL {
            return Ok(LpOutcome::Infeasible);
        }
        // Pivot leftover artificials out of the basis where possible.
        for i in 0..m {
            if basis[i] >= nstruct + nslack {
                if let Some(c) = (0..nstruct + nslack).find(|&c| tab[(i, c)].abs() > 1e-7) {
                    pivot(&mut tab, &mut basis, i, c);
                }
            }
        }

        // Phase two over the original objective; artificials stay out.
        let sign = if self.maximize { -1.0 } else { 1.0 };
        let mut cost2 = vec![0.0; ntotal];
        for j in 0..self.nvars {
            let c = col_of[j];
            cost2[c] = sign * self.objective[j];
            if self.free[j] {
                cost2[c + 1] = -sign * self.objective[j];
            }
        }
        let mut allowed2 = vec![true; ntotal];
        for a in allowed2.iter_mut().skip(nstruct + nslack) {
            *a = false;
        }
        let end = run_simplex(&mut tab, &mut basis, &cost2, &allowed2)?;
        if matches!(end, SimplexEnd::Unbounded) {
            return Ok(LpOutcome::Unbounded);
        }

        let mut full = vec![0.0; ntotal];
        for (i, &b) in basis.iter().enumerate() {
            full[b] = tab[(i, ntotal)];
        }
        let mut x = vec![0.0; self.nvars];
        for j in 0..self.nvars {
            let c = col_of[j];
            x[j] = if self.free[j] {
                full[c] - full[c + 1]
            } else {
                full[c]
            };
        }
        let value: f64 = (0..self.nvars).map(|j| self.objective[j] * x[j]).sum();
        Ok(LpOutcome::Optimal { x, value })
    }
}

enum SimplexEnd {
    Optimal,
    Unbounded,
}

/// Primal simplex on a tableau whose basis columns are already identity.
fn run_simplex(
    tab: &mut DMatrix<f64>,
    basis: &mut Vec<usize>,
    cost: &[f64],
    allowed: &[bool],
) -> Result<SimplexEnd, LpError> {
    let m = tab.nrows();
    let n = tab.ncols() - 1;
    let max_iter = 200 + 60 * (m + n);
    let bland_after = 20 + 10 * (m + n);

    for iter in 0..max_iter {
        // Reduced costs r_j = c_j - c_B . col_j (basis columns are identity).
        let mut entering: Option<usize> = None;
        let mut best = -1e-9;
        for j in 0..n {
            if !allowed[j] || basis.contains(&j) {
                continue;
            }
            let mut r = cost[j];
            for i in 0..m {
                let cb = cost[basis[i]];
                if cb != 0.0 {
                    r -= cb * tab[(i, j)];
                }
            }
            if r < best {
                if iter < bland_after {
                    best = r;
                    entering = Some(j);
                } else {
                    entering = Some(j);
                    break;
                }
            }
        }
        let Some(e) = entering else {
            return Ok(SimplexEnd::Optimal);
        };

        // Ratio test; ties broken by smallest basis index (anti-cycling).
        let mut leave: Option<usize> = None;
        let mut best_ratio = f64::INFINITY;
        for i in 0..m {
            let a = tab[(i, e)];
            if a > PIVOT_TOL {
                let ratio = tab[(i, n)] / a;
                if ratio < best_ratio - 1e-12
                    || (ratio < best_ratio + 1e-12
                        && leave.map(|l| basis[i] < basis[l]).unwrap_or(false))
                {
                    best_ratio = ratio;
                    leave = Some(i);
                }
            }
        }
        let Some(l) = leave else {
            return Ok(SimplexEnd::Unbounded);
        };
        pivot(tab, basis, l, e);
    }
    Err(LpError::IterationLimit)
}

fn pivot(tab: &mut DMatrix<f64>, basis: &mut [usize], row: usize, col: usize) {
    let n = tab.ncols();
    let p = tab[(row, col)];
    for c in 0..n {
        tab[(row, c)] /= p;
    }
    for r in 0..tab.nrows() {
        if r != row {
            let f = tab[(r, col)];
            if f != 0.0 {
                for c in 0..n {
                    let v = tab[(row, c)];
                    tab[(r, c)] -= f * v;
                }
            }
        }
    }
    basis[row] = col;
}

/// Nonnegative least squares by Lawson-Hanson active sets.
///
/// Returns the minimizer of `|a x - b|` over `x >= 0`.  Deterministic: the
/// passive set grows by the largest-gradient rule with lowest-index ties.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>, tol: f64) -> DVector<f64> {
    let n = a.ncols();
    let mut x = DVector::<f64>::zeros(n);
    let mut passive = vec![false; n];
    let max_outer = 3 * n + 10;

    for _ in 0..max_outer {
        let resid = b - a * &x;
        let grad = a.transpose() * resid;
        let mut best: Option<(usize, f64)> = None;
        for j in 0..n {
            if !passive[j] && grad[j] > tol {
                if best.map(|(_, g)| grad[j] > g).unwrap_or(true) {
                    best = Some((j, grad[j]));
                }
            }
        }
        let Some((jstar, _)) = best else {
            return x;
        };
        passive[jstar] = true;

        // Inner loop: restrict to the passive set and back off along the
        // segment to x until the candidate is nonnegative.
        for _ in 0..max_outer {
            let z = ls_on_support(a, b, &passive);
            let mut alpha = 1.0f64;
            let mut blocked = false;
            for j in 0..n {
                if passive[j] && z[j] <= 0.0 {
                    let denom = x[j] - z[j];
                    if denom > 1e-300 {
                        alpha = alpha.min(x[j] / denom);
                    } else {
                        alpha = 0.0;
                    }
                    blocked = true;
                }
            }
            if !blocked {
                x = z;
                break;
            }
            for j in 0..n {
                if passive[j] {
                    x[j] += alpha * (z[j] - x[j]);
                    if x[j] <= 1e-12 {
                        x[j] = 0.0;
                        passive[j] = false;
                    }
                }
            }
        }
    }
    x
}

/// Least squares restricted to a support set, minimum-norm via SVD.
fn ls_on_support(a: &DMatrix<f64>, b: &DVector<f64>, support: &[bool]) -> DVector<f64> {
    let cols: Vec<usize> = (0..a.ncols()).filter(|&j| support[j]).collect();
    let mut z = DVector::<f64>::zeros(a.ncols());
    if cols.is_empty() {
        return z;
    }
    let sub = a.select_columns(cols.iter());
    let svd = sub.svd(true, true);
    let sol = svd.solve(b, 1e-12).expect("svd solve");
    for (k, &j) in cols.iter().enumerate() {
        z[j] = sol[k];
    }
    z
}

/// Minimum-norm nonnegative solution of a consistent system `a x = b`.
///
/// Implemented as Tikhonov-augmented NNLS; the regularization only breaks
/// ties between exact solutions, perturbing the residual by O(reg^2).
pub fn min_norm_nonneg(a: &DMatrix<f64>, b: &DVector<f64>, reg: f64) -> DVector<f64> {
    let (m, n) = (a.nrows(), a.ncols());
    let mut aug = DMatrix::<f64>::zeros(m + n, n);
    aug.view_mut((0, 0), (m, n)).copy_from(a);
    for j in 0..n {
        aug[(m + j, j)] = reg;
    }
    let mut baug = DVector::<f64>::zeros(m + n);
    baug.rows_mut(0, m).copy_from(b);
    let x = nnls(&aug, &baug, 1e-12);
    // Polish: re-solve exactly (minimum norm, no regularization) on the
    // support the augmented pass detected.  Keeps the answer when the
    // polish would leave the nonnegative orthant.
    let support: Vec<bool> = x.iter().map(|&v| v > 1e-10).collect();
    let z = ls_on_support(a, b, &support);
    if z.iter().all(|&v| v >= -1e-12) {
        z.map(|v| v.max(0.0))
    } else {
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maximize_on_triangle() {
        // max x + y with x + y <= 1 has value 1.
        let mut lp = LinearProgram::new(2);
        lp.set_maximize(true);
        lp.set_objective(&[(0, 1.0), (1, 1.0)]);
        lp.add_le(&[(0, 1.0), (1, 1.0)], 1.0);
        match lp.solve().unwrap() {
            LpOutcome::Optimal { value, .. } => assert!((value - 1.0).abs() < 1e-9),
            other => panic!("unexpected outcome {other:?}"),
        }
    }

    #[test]
    fn equality_with_free_variable() {
        // min |x| encoded as min xp + xn with xp - xn = -3.
        let mut lp = LinearProgram::new(1);
        lp.mark_free(0);
        lp.set_objective(&[(0, 1.0)]);
        lp.add_eq(&[(0, 1.0)], -3.0);
        match lp.solve().unwrap() {
            LpOutcome::Optimal { x, value } => {
                assert!((x[0] + 3.0).abs() < 1e-9);
                assert!((value + 3.0).abs() < 1e-9);
            }
            other => panic!("unexpected outcome {other:?}"),
        }
    }

    #[test]
    fn detects_infeasible() {
        let mut lp = LinearProgram::new(1);
        lp.add_eq(&[(0, 1.0)], -1.0); // x = -1 with x >= 0
        assert_eq!(lp.solve().unwrap(), LpOutcome::Infeasible);
    }

    #[test]
    fn detects_unbounded() {
        let mut lp = LinearProgram::new(1);
        lp.set_maximize(true);
        lp.set_objective(&[(0, 1.0)]);
        assert_eq!(lp.solve().unwrap(), LpOutcome::Unbounded);
    }

    #[test]
    fn transportation_like_program() {
        // min 2a + 3b, a + b = 4, a <= 3 -> a = 3, b = 1, value 9.
        let mut lp = LinearProgram::new(2);
        lp.set_objective(&[(0, 2.0), (1, 3.0)]);
        lp.add_eq(&[(0, 1.0), (1, 1.0)], 4.0);
        lp.add_le(&[(0, 1.0)], 3.0);
        match lp.solve().unwrap() {
            LpOutcome::Optimal { x, value } => {
                assert!((x[0] - 3.0).abs() < 1e-9);
                assert!((x[1] - 1.0).abs() < 1e-9);
                assert!((value - 9.0).abs() < 1e-9);
            }
            other => panic!("unexpected outcome {other:?}"),
        }
    }

    #[test]
    fn nnls_matches_closed_form() {
        // Project b onto the cone spanned by (1,0) and (1,1).
        let a = DMatrix::from_column_slice(2, 2, &[1.0, 0.0, 1.0, 1.0]);
        let b = DVector::from_column_slice(&[1.0, -1.0]);
        let x = nnls(&a, &b, 1e-12);
        // Best fit keeps only the first generator: x = (1, 0).
        assert!((x[0] - 1.0).abs() < 1e-8, "x = {x:?}");
        assert!(x[1].abs() < 1e-8);
    }

    #[test]
    fn min_norm_breaks_ties() {
        // 1 = x0 + x1 has many nonneg solutions; minimum norm is (0.5, 0.5).
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let b = DVector::from_column_slice(&[1.0]);
        let x = min_norm_nonneg(&a, &b, 1e-6);
        assert!((x[0] - 0.5).abs() < 1e-5, "x = {x:?}");
        assert!((x[1] - 0.5).abs() < 1e-5);
    }
}
