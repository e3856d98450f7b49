//! Conjugate gradient for dense symmetric positive definite systems with
//! several right-hand sides.
//!
//! Each column of the right-hand side runs its own CG recurrence; the columns
//! only share the matrix-block product so the matrix is streamed once per
//! iteration.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CgConfig {
    /// Stop when `||r|| <= tolerance * ||b||` for every column.
    pub tolerance: f64,
    /// Iteration cap; `None` means `10 * M`.
    pub max_iterations: Option<usize>,
}

impl Default for CgConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: None,
        }
    }
}

impl CgConfig {
    pub fn iteration_cap(&self, m: usize) -> usize {
        self.max_iterations.unwrap_or(10 * m).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CgDiagnostics {
    pub iterations: usize,
    /// Largest `||r|| / ||b||` over the columns at exit.
    pub final_relative_residual: f64,
    pub converged: bool,
    /// Smallest Rayleigh quotient `p'Ap / p'p` met during the solve. Positive for SPD systems.
    pub min_curvature: f64,
}

#[derive(Debug, Clone)]
pub struct CgSolution {
    /// Row-major `M x k` solution.
    pub x: Vec<f64>,
    pub diagnostics: CgDiagnostics,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * i + l] * b[4 * i + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// `out = A P` where `p_cols` holds the `k` columns of `P` back to back.
fn block_product(a: &[f64], m: usize, p_cols: &[f64], k: usize, out: &mut [f64]) {
    out.par_chunks_mut(k).enumerate().for_each(|(i, o)| {
        let row = &a[i * m..(i + 1) * m];
        for (c, oc) in o.iter_mut().enumerate() {
            *oc = dot(row, &p_cols[c * m..(c + 1) * m]);
        }
    });
}

/// Solves `A X = B` for a dense row-major `m x m` SPD matrix `a` and a
/// row-major `m x k` right-hand side `b`, starting from `X = 0`.
pub fn solve_dense(a: &[f64], m: usize, b: &[f64], k: usize, config: &CgConfig) -> CgSolution {
    assert_eq!(a.len(), m * m, "matrix must be m x m");
    assert_eq!(b.len(), m * k, "rhs must be m x k");
    let cap = config.iteration_cap(m);

    let col_dot = |u: &[f64], v: &[f64], c: usize| -> f64 {
        let mut s = 0.0;
        for j in 0..m {
            s += u[j * k + c] * v[j * k + c];
        }
        s
    };

    let mut x = vec![0.0; m * k];
    let mut r = b.to_vec();
    let mut p = b.to_vec();
    let mut ap = vec![0.0; m * k];
    let b_norm: Vec<f64> = (0..k).map(|c| col_dot(b, b, c).sqrt()).collect();
    let mut rr: Vec<f64> = (0..k).map(|c| col_dot(&r, &r, c)).collect();
    let mut active: Vec<bool> = (0..k)
        .map(|c| b_norm[c] > 0.0 && rr[c].sqrt() > config.tolerance * b_norm[c])
        .collect();
    let mut breakdown = false;
    let mut min_curvature = f64::INFINITY;
    let mut iterations = 0;

    let mut p_cols = vec![0.0; m * k];
    while iterations < cap && active.iter().any(|&a| a) {
        for j in 0..m {
            for c in 0..k {
                p_cols[c * m + j] = p[j * k + c];
            }
        }
        block_product(a, m, &p_cols, k, &mut ap);
        iterations += 1;
        for c in 0..k {
            if !active[c] {
                continue;
            }
            let pap = col_dot(&p, &ap, c);
            let pp = col_dot(&p, &p, c);
            min_curvature = min_curvature.min(pap / pp);
            if !(pap > 0.0) {
                breakdown = true;
                active[c] = false;
                continue;
            }
            let alpha = rr[c] / pap;
            for j in 0..m {
                x[j * k + c] += alpha * p[j * k + c];
                r[j * k + c] -= alpha * ap[j * k + c];
            }
            let rr_new = col_dot(&r, &r, c);
            let beta = rr_new / rr[c];
            for j in 0..m {
                p[j * k + c] = r[j * k + c] + beta * p[j * k + c];
            }
            rr[c] = rr_new;
            if rr_new.sqrt() <= config.tolerance * b_norm[c] {
                active[c] = false;
            }
        }
    }

    let final_relative_residual = (0..k)
        .map(|c| if b_norm[c] > 0.0 { rr[c].sqrt() / b_norm[c] } else { 0.0 })
        .fold(0.0, f64::max);
    let converged = !breakdown && final_relative_residual <= config.tolerance;
    CgSolution {
        x,
        diagnostics: CgDiagnostics {
            iterations,
            final_relative_residual,
            converged,
            min_curvature: if min_curvature.is_finite() { min_curvature } else { 0.0 },
        },
    }
}
