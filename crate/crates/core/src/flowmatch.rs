//! One round of flow matching: homotopy training data between two clouds,
//! a per-slice RBF fit of the velocity, and transport along the fitted field.
//!
//! Training pairs `(x0, xT)` are drawn independently and uniformly with
//! replacement, freshly for every slice. For a round anchored at time `s`
//! (the start of a refinement segment; `s = 0` for a plain round) the
//! homotopy point and velocity at slice time `t` are
//!
//! ```text
//! a   = (t - s) / (1 - s)
//! x_t = a * xT + (1 - a) * x0
//! v   = (xT - x0) / (1 - s)
//! ```
//!
//! which for `s = 0` is the straight line `t xT + (1 - t) x0` with velocity `xT - x0`.

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cg::CgConfig;
use crate::error::{Error, Result};
use crate::ode::{integrate, OdeConfig};
use crate::pointcloud::PointCloud;
use crate::rbf::{fit_slice, KernelConfig, RbfVelocityField};
use crate::sampling::Seed;

/// End of the time horizon `T`.
pub const HORIZON: f64 = 1.0;

/// Default cap on pairs per slice.
pub const DEFAULT_MAX_PAIRS: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::invalid("grid", "need at least one slice time"));
        }
        if times.iter().any(|t| !(0.0..=HORIZON).contains(t)) {
            return Err(Error::invalid("grid", "slice times must lie in [0, 1]"));
        }
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("grid", "slice times must be strictly increasing"));
        }
        Ok(Self { times })
    }

    /// `n` equally spaced times covering `[t_lo, t_hi]` including both ends;
    /// a single slice sits at the midpoint.
    pub fn uniform(t_lo: f64, t_hi: f64, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("grid.slices", "need at least one slice"));
        }
        if !(0.0 <= t_lo && t_lo < t_hi && t_hi <= HORIZON) {
            return Err(Error::invalid("grid", "need 0 <= t_lo < t_hi <= 1"));
        }
        if n == 1 {
            return Self::new(vec![0.5 * (t_lo + t_hi)]);
        }
        let step = (t_hi - t_lo) / (n - 1) as f64;
        let mut times: Vec<f64> = (0..n).map(|i| t_lo + i as f64 * step).collect();
        times[n - 1] = t_hi;
        Self::new(times)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn horizon(&self) -> f64 {
        HORIZON
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairingPlan {
    pub pairs_per_slice: usize,
    pub seed: Seed,
}

impl PairingPlan {
    pub fn new(pairs_per_slice: usize, seed: Seed) -> Result<Self> {
        if pairs_per_slice == 0 {
            return Err(Error::invalid("pairing.pairs_per_slice", "must be at least 1"));
        }
        Ok(Self { pairs_per_slice, seed })
    }

    /// `min(n_start * n_target, 4096)`.
    pub fn default_pairs(n_start: usize, n_target: usize) -> usize {
        n_start.saturating_mul(n_target).min(DEFAULT_MAX_PAIRS)
    }
}

/// What to do when a slice's CG solve hits its iteration cap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CgFailurePolicy {
    Abort,
    #[default]
    Warn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HomotopyBatch {
    pub slice_time: f64,
    /// Segment start `s`; zero for a plain round.
    pub anchor_time: f64,
    /// Row of the start cloud used by each pair.
    pub source_index: Vec<usize>,
    /// Row of the target cloud used by each pair.
    pub target_index: Vec<usize>,
    pub points: Array2<f64>,
    pub velocities: Array2<f64>,
}

impl HomotopyBatch {
    /// Recomputes every pair from the raw clouds and compares bitwise.
    pub fn matches(&self, start: &PointCloud, target: &PointCloud) -> bool {
        let d = start.dim();
        let (mut p, mut v) = (vec![0.0; d], vec![0.0; d]);
        self.source_index.iter().zip(&self.target_index).enumerate().all(|(i, (&s, &g))| {
            homotopy_pair(start.row(s), target.row(g), self.slice_time, self.anchor_time, &mut p, &mut v);
            self.points.row(i).iter().zip(&p).all(|(a, b)| a.to_bits() == b.to_bits())
                && self.velocities.row(i).iter().zip(&v).all(|(a, b)| a.to_bits() == b.to_bits())
        })
    }
}

#[inline]
fn homotopy_pair(x0: &[f64], xt: &[f64], t: f64, anchor: f64, point: &mut [f64], velocity: &mut [f64]) {
    let span = HORIZON - anchor;
    let a = (t - anchor) / span;
    for k in 0..x0.len() {
        point[k] = a * xt[k] + (1.0 - a) * x0[k];
        velocity[k] = (xt[k] - x0[k]) / span;
    }
}

fn check_pair(start: &PointCloud, target: &PointCloud) -> Result<()> {
    if start.dim() != target.dim() {
        return Err(Error::DimensionMismatch {
            expected: target.dim(),
            found: start.dim(),
        });
    }
    Ok(())
}

/// Training data for a plain round at slice time `t`.
pub fn build_homotopy_batch(
    start: &PointCloud,
    target: &PointCloud,
    t: f64,
    plan: &PairingPlan,
) -> Result<HomotopyBatch> {
    build_corrected_batch(start, target, t, 0.0, plan)
}

/// Training data for the corrected homotopy of a segment starting at
/// `anchor`, where `start` holds the integrated state at `anchor`.
pub fn build_corrected_batch(
    start: &PointCloud,
    target: &PointCloud,
    t: f64,
    anchor: f64,
    plan: &PairingPlan,
) -> Result<HomotopyBatch> {
    check_pair(start, target)?;
    if !(0.0..HORIZON).contains(&anchor) || HORIZON - anchor <= 0.0 {
        return Err(Error::invalid("anchor_time", "segment start must lie in [0, 1)"));
    }
    if !(anchor..=HORIZON).contains(&t) {
        return Err(Error::invalid("slice_time", format!("t = {t} outside [{anchor}, 1]")));
    }
    if plan.pairs_per_slice == 0 {
        return Err(Error::invalid("pairing.pairs_per_slice", "must be at least 1"));
    }
    let p = plan.pairs_per_slice;
    let d = start.dim();
    let mut rng = plan.seed.rng();
    let mut source_index = Vec::with_capacity(p);
    let mut target_index = Vec::with_capacity(p);
    for _ in 0..p {
        source_index.push(rng.random_range(0..start.len()));
        target_index.push(rng.random_range(0..target.len()));
    }
    let mut points = vec![0.0; p * d];
    let mut velocities = vec![0.0; p * d];
    for i in 0..p {
        homotopy_pair(
            start.row(source_index[i]),
            target.row(target_index[i]),
            t,
            anchor,
            &mut points[i * d..(i + 1) * d],
            &mut velocities[i * d..(i + 1) * d],
        );
    }
    Ok(HomotopyBatch {
        slice_time: t,
        anchor_time: anchor,
        source_index,
        target_index,
        points: Array2::from_shape_vec((p, d), points).expect("p x d"),
        velocities: Array2::from_shape_vec((p, d), velocities).expect("p x d"),
    })
}

/// Everything a round needs besides the clouds and the grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundSettings<'a> {
    pub plan: &'a PairingPlan,
    pub kernel: &'a KernelConfig,
    pub cg: &'a CgConfig,
    pub on_cg_failure: CgFailurePolicy,
}

/// Fits one slice per grid time on a fresh homotopy batch (plain round).
pub fn fit_round(
    start: &PointCloud,
    target: &PointCloud,
    grid: &TimeGrid,
    settings: RoundSettings<'_>,
) -> Result<RbfVelocityField> {
    fit_segment(start, target, grid, 0.0, settings)
}

/// Fits the corrected homotopy of a segment starting at `anchor`.
///
/// Slice `i` pairs with seed `plan.seed.derive([i, 0])` and fits with
/// `plan.seed.derive([i, 1])`.
pub fn fit_segment(
    start: &PointCloud,
    target: &PointCloud,
    grid: &TimeGrid,
    anchor: f64,
    settings: RoundSettings<'_>,
) -> Result<RbfVelocityField> {
    check_pair(start, target)?;
    settings.kernel.validate()?;
    if let Some(&t) = grid.times().iter().find(|&&t| t < anchor) {
        return Err(Error::invalid("grid", format!("slice time {t} precedes segment start {anchor}")));
    }
    let slices = grid
        .times()
        .par_iter()
        .enumerate()
        .map(|(i, &t)| {
            let i = i as u64;
            let plan = PairingPlan {
                seed: settings.plan.seed.derive(&[i, 0]),
                ..*settings.plan
            };
            let batch = build_corrected_batch(start, target, t, anchor, &plan)?;
            let slice = fit_slice(
                batch.points.view(),
                batch.velocities.view(),
                t,
                settings.kernel,
                settings.cg,
                settings.plan.seed.derive(&[i, 1]),
            )?;
            if !slice.cg.converged {
                match settings.on_cg_failure {
                    CgFailurePolicy::Abort => {
                        return Err(Error::CgNotConverged {
                            slice_time: t,
                            iterations: slice.cg.iterations,
                            residual: slice.cg.final_relative_residual,
                        })
                    }
                    CgFailurePolicy::Warn => log::warn!(
                        "CG stopped at t = {t} after {} iterations, relative residual {:e}",
                        slice.cg.iterations,
                        slice.cg.final_relative_residual
                    ),
                }
            }
            Ok(slice)
        })
        .collect::<Result<Vec<_>>>()?;
    RbfVelocityField::new(slices, *settings.kernel)
}

/// Pushes `start` through `field` over the configured interval.
pub fn transport(start: &PointCloud, field: &RbfVelocityField, ode: &OdeConfig) -> Result<PointCloud> {
    integrate(field, start, ode, None).map(|(end, _)| end)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(p: usize, seed: u64) -> PairingPlan {
        PairingPlan::new(p, Seed(seed)).unwrap()
    }

    fn clouds() -> (PointCloud, PointCloud) {
        let a = PointCloud::from_rows(&[vec![0.0, 0.0], vec![1.0, -1.0], vec![0.5, 2.0]]).unwrap();
        let b = PointCloud::from_rows(&[vec![4.0, 4.0], vec![-3.0, 1.5]]).unwrap();
        (a, b)
    }

    #[test]
    fn endpoints_reproduce_samples() {
        let (a, b) = clouds();
        let at0 = build_homotopy_batch(&a, &b, 0.0, &plan(20, 1)).unwrap();
        let at1 = build_homotopy_batch(&a, &b, 1.0, &plan(20, 1)).unwrap();
        for i in 0..20 {
            assert_eq!(at0.points.row(i).to_vec(), a.row(at0.source_index[i]));
            assert_eq!(at1.points.row(i).to_vec(), b.row(at1.target_index[i]));
        }
    }

    #[test]
    fn hand_evaluated_midpoint() {
        let a = PointCloud::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let b = PointCloud::from_rows(&[vec![2.0, 4.0]]).unwrap();
        let batch = build_homotopy_batch(&a, &b, 0.5, &plan(1, 0)).unwrap();
        assert_eq!(batch.points.row(0).to_vec(), vec![1.0, 2.0]);
        assert_eq!(batch.velocities.row(0).to_vec(), vec![2.0, 4.0]);
    }

    #[test]
    fn corrected_batch_starts_at_integrated_state() {
        let (a, b) = clouds();
        let batch = build_corrected_batch(&a, &b, 0.4, 0.4, &plan(10, 3)).unwrap();
        for i in 0..10 {
            assert_eq!(batch.points.row(i).to_vec(), a.row(batch.source_index[i]));
            let want: Vec<f64> = a
                .row(batch.source_index[i])
                .iter()
                .zip(b.row(batch.target_index[i]))
                .map(|(x0, xt)| (xt - x0) / 0.6)
                .collect();
            assert_eq!(batch.velocities.row(i).to_vec(), want);
        }
        assert!(batch.matches(&a, &b));
        let end = build_corrected_batch(&a, &b, 1.0, 0.4, &plan(10, 3)).unwrap();
        for i in 0..10 {
            assert_eq!(end.points.row(i).to_vec(), b.row(end.target_index[i]));
        }
    }

    #[test]
    fn batch_validation() {
        let (a, b) = clouds();
        let c = PointCloud::from_rows(&[vec![0.0]]).unwrap();
        assert!(build_homotopy_batch(&a, &c, 0.5, &plan(4, 0)).is_err());
        assert!(build_homotopy_batch(&a, &b, 1.5, &plan(4, 0)).is_err());
        assert!(build_corrected_batch(&a, &b, 1.0, 1.0, &plan(4, 0)).is_err());
        assert!(build_corrected_batch(&a, &b, 0.2, 0.3, &plan(4, 0)).is_err());
        assert!(PairingPlan::new(0, Seed(0)).is_err());
    }

    #[test]
    fn default_pairs_cap() {
        assert_eq!(PairingPlan::default_pairs(10, 20), 200);
        assert_eq!(PairingPlan::default_pairs(2000, 2000), 4096);
    }

    #[test]
    fn uniform_grids() {
        let g = TimeGrid::uniform(0.0, 1.0, 5).unwrap();
        assert_eq!(g.times(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(TimeGrid::uniform(0.2, 0.6, 1).unwrap().times(), &[0.4]);
        let seg = TimeGrid::uniform(1.0 / 6.0, 2.0 / 6.0, 3).unwrap();
        assert_eq!(seg.times()[0], 1.0 / 6.0);
        assert_eq!(seg.times()[2], 2.0 / 6.0);
        assert!(TimeGrid::uniform(0.5, 0.5, 3).is_err());
        assert!(TimeGrid::new(vec![0.5, 0.5]).is_err());
        assert!(TimeGrid::new(vec![]).is_err());
    }
}
