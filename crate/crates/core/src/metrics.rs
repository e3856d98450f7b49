//! Symmetric closest-point transport cost between point clouds.
//!
//! `D(a, b) = (Σ_{i∈a} min_{k∈b} ||a_i - b_k||² + Σ_{i∈b} min_{k∈a} ||b_i - a_k||²) / (2N)`
//! with `N = max(|a|, |b|)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::PointCloud;
use crate::sampling::{choose_indices, Seed};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub value: f64,
    pub n_a: usize,
    pub n_b: usize,
    /// The `N` in the `1 / (2N)` normalization.
    pub normalizer: usize,
    /// Sum over points of `a` of the squared distance to the nearest point of `b`.
    pub a_to_b: f64,
    pub b_to_a: f64,
}

impl CostReport {
    fn from_terms(n_a: usize, n_b: usize, a_to_b: f64, b_to_a: f64) -> Self {
        let normalizer = n_a.max(n_b);
        Self {
            value: (a_to_b + b_to_a) / (2.0 * normalizer as f64),
            n_a,
            n_b,
            normalizer,
            a_to_b,
            b_to_a,
        }
    }
}

#[inline]
fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let z = x - y;
        s += z * z;
    }
    s
}

fn check(a: &PointCloud, b: &PointCloud) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    Ok(())
}

fn directed_sum_brute(from: &PointCloud, to: &PointCloud) -> f64 {
    let mins: Vec<f64> = (0..from.len())
        .into_par_iter()
        .map(|i| {
            let p = from.row(i);
            (0..to.len())
                .map(|k| squared_distance(p, to.row(k)))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    mins.iter().sum()
}

/// Reference implementation: all pairwise distances.
pub fn closest_point_cost_brute(a: &PointCloud, b: &PointCloud) -> Result<CostReport> {
    check(a, b)?;
    Ok(CostReport::from_terms(
        a.len(),
        b.len(),
        directed_sum_brute(a, b),
        directed_sum_brute(b, a),
    ))
}

/// Nearest-neighbour search over points sorted by their first coordinate.
///
/// A candidate whose first-coordinate gap alone exceeds the best squared
/// distance found so far cannot win, so the sweep stops in that direction.
/// The minimum is taken over the same `squared_distance` values as the brute
/// force, so results are bitwise identical.
struct SortedSweep<'a> {
    cloud: &'a PointCloud,
    order: Vec<usize>,
    keys: Vec<f64>,
}

impl<'a> SortedSweep<'a> {
    fn new(cloud: &'a PointCloud) -> Self {
        let mut order: Vec<usize> = (0..cloud.len()).collect();
        order.sort_by(|&i, &j| cloud.row(i)[0].total_cmp(&cloud.row(j)[0]).then(i.cmp(&j)));
        let keys = order.iter().map(|&i| cloud.row(i)[0]).collect();
        Self { cloud, order, keys }
    }

    fn nearest(&self, p: &[f64]) -> f64 {
        let start = self.keys.partition_point(|&k| k < p[0]);
        let mut best = f64::INFINITY;
        let mut lo = start;
        let mut hi = start;
        let n = self.keys.len();
        loop {
            let mut moved = false;
            if hi < n {
                let g = self.keys[hi] - p[0];
                if g * g <= best {
                    best = best.min(squared_distance(p, self.cloud.row(self.order[hi])));
                    hi += 1;
                    moved = true;
                } else {
                    hi = n;
                }
            }
            if lo > 0 {
                let g = p[0] - self.keys[lo - 1];
                if g * g <= best {
                    best = best.min(squared_distance(p, self.cloud.row(self.order[lo - 1])));
                    lo -= 1;
                    moved = true;
                } else {
                    lo = 0;
                }
            }
            if !moved {
                return best;
            }
        }
    }

    fn directed_sum(&self, from: &PointCloud) -> f64 {
        let mins: Vec<f64> = (0..from.len())
            .into_par_iter()
            .map(|i| self.nearest(from.row(i)))
            .collect();
        mins.iter().sum()
    }
}

/// The transport cost, computed with a sorted sweep. Matches
/// [`closest_point_cost_brute`] exactly.
pub fn closest_point_cost(a: &PointCloud, b: &PointCloud) -> Result<CostReport> {
    check(a, b)?;
    let a_to_b = SortedSweep::new(b).directed_sum(a);
    let b_to_a = SortedSweep::new(a).directed_sum(b);
    Ok(CostReport::from_terms(a.len(), b.len(), a_to_b, b_to_a))
}

/// Cost between two disjoint seeded random subsets of `data`, each of
/// `subset_size` points: the floor a generator can hope to reach.
pub fn internal_similarity(data: &PointCloud, subset_size: usize, seed: Seed) -> Result<CostReport> {
    if subset_size == 0 {
        return Err(Error::invalid("subset_size", "must be at least 1"));
    }
    let needed = 2 * subset_size;
    if data.len() < needed {
        return Err(Error::InsufficientPoints {
            needed,
            available: data.len(),
        });
    }
    let idx = choose_indices(data.len(), needed, seed);
    let first = data.select(&idx[..subset_size]);
    let second = data.select(&idx[subset_size..]);
    closest_point_cost(&first, &second)
}
