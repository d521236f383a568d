//! Shared fixtures and brute-force oracles for the integration tests.
//!
//! The oracles deliberately use exhaustive enumeration instead of the
//! library's own solvers so every comparison crosses an independent route.

#![allow(dead_code)]

use crawlopt::crawler::{CrawlerModel, ModelConfig};
use crawlopt::polytope::Polyhedron;
use crawlopt::sweeping::ControlGrid;
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random bounded polyhedron containing the origin strictly inside: the
/// coordinate box plus a few extra random faces.
pub fn random_polyhedron(rng: &mut ChaCha8Rng, dim: usize) -> Polyhedron {
    let extra = rng.random_range(0..=2usize);
    let faces = 2 * dim + extra;
    let mut normals = DMatrix::<f64>::zeros(faces, dim);
    let mut offsets = DVector::<f64>::zeros(faces);
    for i in 0..dim {
        normals[(2 * i, i)] = 1.0;
        normals[(2 * i + 1, i)] = -1.0;
        offsets[2 * i] = 0.3 + rng.random::<f64>();
        offsets[2 * i + 1] = 0.3 + rng.random::<f64>();
    }
    for e in 0..extra {
        let row = 2 * dim + e;
        loop {
            let mut n = DVector::<f64>::zeros(dim);
            for c in 0..dim {
                n[c] = 2.0 * rng.random::<f64>() - 1.0;
            }
            if n.norm() > 0.1 {
                n /= n.norm();
                for c in 0..dim {
                    normals[(row, c)] = n[c];
                }
                break;
            }
        }
        offsets[row] = 0.3 + rng.random::<f64>();
    }
    Polyhedron::new(normals, offsets).expect("origin is strictly interior")
}

pub fn random_point(rng: &mut ChaCha8Rng, dim: usize, radius: f64) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| radius * (2.0 * rng.random::<f64>() - 1.0))
}

/// Nearest point of the polyhedron by exhaustive search over face subsets.
///
/// For every subset of at most `dim` faces the point is projected onto the
/// subset's equality affine space; the closest feasible candidate is the
/// true projection because the projection itself appears for its own
/// active set and no feasible point can beat it.
pub fn projection_oracle(set: &Polyhedron, x: &DVector<f64>) -> DVector<f64> {
    let n = set.dim();
    let faces = set.num_faces();
    assert!(faces < 24, "enumeration oracle is for small face counts");
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 0u32..(1 << faces) {
        let idx: Vec<usize> = (0..faces).filter(|j| mask >> j & 1 == 1).collect();
        if idx.len() > n {
            continue;
        }
        let z = if idx.is_empty() {
            x.clone()
        } else {
            let k = idx.len();
            let mut a_s = DMatrix::<f64>::zeros(k, n);
            let mut rhs = DVector::<f64>::zeros(k);
            for (r, &j) in idx.iter().enumerate() {
                for c in 0..n {
                    a_s[(r, c)] = set.normals()[(j, c)];
                }
                rhs[r] = set.normals().row(j).transpose().dot(x) - set.offsets()[j];
            }
            let gram = &a_s * a_s.transpose();
            let svd = gram.svd(true, true);
            match svd.solve(&rhs, 1e-10) {
                Ok(mu) => x - a_s.transpose() * mu,
                Err(_) => continue,
            }
        };
        if !set.contains(&z, 1e-8) {
            continue;
        }
        let d = (x - &z).norm();
        if best.as_ref().map_or(true, |(bd, _)| d < *bd) {
            best = Some((d, z));
        }
    }
    best.expect("the polyhedron is nonempty").1
}

/// Smallest margin of the threshold balance condition: over every subset J
/// of blocks, |sum_J mu_plus - sum_{J^c} mu_minus|.
pub fn uniqueness_margin(mu_plus: &[f64], mu_minus: &[f64]) -> f64 {
    let n = mu_plus.len();
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << n) {
        let s: f64 = (0..n)
            .map(|i| {
                if mask >> i & 1 == 1 {
                    mu_plus[i]
                } else {
                    -mu_minus[i]
                }
            })
            .sum();
        best = best.min(s.abs());
    }
    best
}

/// Random friction model whose threshold balance margin stays above 1e-3.
pub fn random_model(rng: &mut ChaCha8Rng, blocks: usize) -> CrawlerModel {
    loop {
        let mu_plus: Vec<f64> = (0..blocks).map(|_| 0.2 + 2.8 * rng.random::<f64>()).collect();
        let mu_minus: Vec<f64> = (0..blocks).map(|_| 0.2 + 2.8 * rng.random::<f64>()).collect();
        if uniqueness_margin(&mu_plus, &mu_minus) < 1e-3 {
            continue;
        }
        let cfg = ModelConfig {
            blocks,
            k: 0.5 + 1.5 * rng.random::<f64>(),
            mu_plus,
            mu_minus,
            horizon: 1.0,
            control_box: vec![1.0; blocks - 1],
        };
        return CrawlerModel::build(cfg).expect("positive thresholds");
    }
}

struct Combinations {
    n: usize,
    current: Vec<usize>,
    started: bool,
}

impl Combinations {
    fn new(n: usize, k: usize) -> Self {
        Combinations {
            n,
            current: (0..k).collect(),
            started: false,
        }
    }
}

impl Iterator for Combinations {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let k = self.current.len();
        if !self.started {
            self.started = true;
            if k > self.n {
                return None;
            }
            return Some(self.current.clone());
        }
        let mut i = k;
        while i > 0 {
            i -= 1;
            if self.current[i] < self.n - (k - i) {
                self.current[i] += 1;
                for j in i + 1..k {
                    self.current[j] = self.current[j - 1] + 1;
                }
                return Some(self.current.clone());
            }
        }
        None
    }
}

/// Body velocity by enumerating supports of the dissipation program.
///
/// Columns of `[Z | -Z]` are costed by the forward and backward thresholds;
/// every invertible support of size `blocks - 1` that reproduces `w` with
/// nonnegative weights is a basic candidate.  Among the minimal-cost ones
/// the mean body velocity must be unique; the oracle asserts that and
/// returns it.
pub fn vm_oracle(model: &CrawlerModel, w: &DVector<f64>) -> f64 {
    let n = model.blocks();
    let d = n - 1;
    let z = model.shape_map();
    let cfg = model.config();
    let mut best_cost = f64::INFINITY;
    let mut means: Vec<f64> = Vec::new();
    for subset in Combinations::new(2 * n, d) {
        let mut mat = DMatrix::<f64>::zeros(d, d);
        for (col, &j) in subset.iter().enumerate() {
            let (block, sign) = if j < n { (j, 1.0) } else { (j - n, -1.0) };
            for r in 0..d {
                mat[(r, col)] = sign * z[(r, block)];
            }
        }
        let Some(c) = mat.clone().lu().solve(w) else {
            continue;
        };
        if c.iter().any(|v| !v.is_finite() || *v < -1e-9) {
            continue;
        }
        if (&mat * &c - w).amax() > 1e-9 {
            continue;
        }
        let mut cost = 0.0;
        let mut mean = 0.0;
        for (col, &j) in subset.iter().enumerate() {
            let (block, sign) = if j < n { (j, 1.0) } else { (j - n, -1.0) };
            let weight = if j < n {
                cfg.mu_plus[block]
            } else {
                cfg.mu_minus[block]
            };
            cost += weight * c[col].max(0.0);
            mean += sign * c[col] / n as f64;
        }
        if cost < best_cost - 1e-9 {
            best_cost = cost;
            means = vec![mean];
        } else if cost <= best_cost + 1e-9 {
            best_cost = best_cost.min(cost);
            means.push(mean);
        }
    }
    assert!(!means.is_empty(), "no support reproduces the shape velocity");
    for m in &means {
        assert!(
            (m - means[0]).abs() <= 1e-9,
            "mean velocity not unique across minimizers"
        );
    }
    means[0]
}

/// Clean four-phase single-link gait on [0, 1] with period 4.
pub fn four_phase_values(mm: usize) -> Vec<DVector<f64>> {
    (0..mm)
        .map(|i| {
            let v = match i * 4 / mm {
                0 => 1.0,
                1 | 2 => -1.0,
                _ => 1.0,
            };
            DVector::from_column_slice(&[v])
        })
        .collect()
}

/// Chattering but feasible gait: the four-phase pattern with mean
/// preserving jitter paired across the two hold quarters, so the box, the
/// zero mean, and exact periodicity from `x0 = 1` all survive.
pub fn chatter_gait(seed: u64, m: u32) -> (ControlGrid, DVector<f64>) {
    let mm = 1usize << m;
    let q = mm / 4;
    let mut vals: Vec<f64> = (0..mm)
        .map(|i| match i / q {
            0 => 1.0,
            1 | 2 => -1.0,
            _ => 1.0,
        })
        .collect();
    let mut r = rng(seed ^ 0x00C0_FFEE);
    for _ in 0..4 {
        let i = r.random_range(0..q);
        let j = 2 * q + r.random_range(0..q);
        let delta = 0.05 + 0.15 * r.random::<f64>();
        vals[i] -= delta;
        vals[j] += delta;
    }
    let values = vals
        .into_iter()
        .map(|v| DVector::from_column_slice(&[v]))
        .collect();
    (
        ControlGrid::new(m, 4.0, values).expect("consistent grid"),
        DVector::from_column_slice(&[1.0]),
    )
}

/// Random zero-mean bang pattern for the single link.
pub fn random_bang_gait(seed: u64, m: u32) -> ControlGrid {
    let mm = 1usize << m;
    let mut vals: Vec<f64> = (0..mm).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    vals.shuffle(&mut rng(seed ^ 0x0BA6_0BA6));
    let values = vals
        .into_iter()
        .map(|v| DVector::from_column_slice(&[v]))
        .collect();
    ControlGrid::new(m, 4.0, values).expect("consistent grid")
}

/// The same gait played over two consecutive periods.
pub fn repeat_gait(grid: &ControlGrid) -> ControlGrid {
    let mut vals = grid.values().to_vec();
    vals.extend_from_slice(grid.values());
    ControlGrid::new(grid.level() + 1, 2.0 * grid.horizon(), vals).expect("doubled grid")
}
