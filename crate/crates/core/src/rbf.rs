//! Gaussian radial basis function interpolation of a time-dependent velocity field.
//!
//! At each slice time `t` the field is `v(x, t) = Φ(x, C_t) θ_t` where `C_t` are
//! the slice's centers and `θ_t` solves `(Φ(C_t, C_t) + βI) θ_t = v_t` by
//! conjugate gradient. Between slices the two neighbouring slice evaluations
//! are blended linearly in `t`.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cg::{self, CgConfig, CgDiagnostics};
use crate::error::{Error, Result};
use crate::io::ByteReader;
use crate::ode::VelocityField;
use crate::sampling::{choose_indices, Seed};

/// Cap on the number of points used by the median heuristic.
pub const MEDIAN_SUBSAMPLE: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BandwidthMode {
    /// `bandwidth_value` times the median pairwise distance of the slice's points.
    #[serde(alias = "median")]
    MedianHeuristic,
    /// `bandwidth_value` used as is.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    pub bandwidth_mode: BandwidthMode,
    pub bandwidth_value: f64,
    pub regularization_beta: f64,
    /// Fit on a seeded uniform subsample of at most this many centers.
    pub max_centers: Option<usize>,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            bandwidth_mode: BandwidthMode::MedianHeuristic,
            bandwidth_value: 1.0,
            regularization_beta: 1e-4,
            max_centers: None,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth_value.is_finite() && self.bandwidth_value > 0.0) {
            return Err(Error::invalid("kernel.bandwidth_value", "must be finite and > 0"));
        }
        if !(self.regularization_beta.is_finite() && self.regularization_beta >= 0.0) {
            return Err(Error::invalid("kernel.regularization_beta", "must be finite and >= 0"));
        }
        if self.max_centers == Some(0) {
            return Err(Error::invalid("kernel.max_centers", "must be at least 1"));
        }
        Ok(())
    }

    /// Strictly positive bandwidth for the given training points.
    pub fn resolve_bandwidth(&self, points: ArrayView2<'_, f64>, seed: Seed) -> Result<f64> {
        match self.bandwidth_mode {
            BandwidthMode::Fixed => Ok(self.bandwidth_value),
            BandwidthMode::MedianHeuristic => {
                median_heuristic_bandwidth(points, self.bandwidth_value, seed)
            }
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

#[inline]
fn inv_two_h2(bandwidth: f64) -> f64 {
    1.0 / (2.0 * bandwidth * bandwidth)
}

fn row_slice(a: &ArrayView2<'_, f64>) -> Vec<f64> {
    a.as_standard_layout().iter().copied().collect()
}

/// `Φ_ik = exp(-||c_i - c_k||² / (2 h²))`.
pub fn assemble_kernel_matrix(centers: ArrayView2<'_, f64>, bandwidth: f64) -> Result<Array2<f64>> {
    if centers.nrows() == 0 {
        return Err(Error::invalid("centers", "need at least one center"));
    }
    if !(bandwidth.is_finite() && bandwidth > 0.0) {
        return Err(Error::invalid("bandwidth", "must be finite and > 0"));
    }
    let m = centers.nrows();
    let d = centers.ncols();
    let c = row_slice(&centers);
    Ok(Array2::from_shape_vec((m, m), kernel_matrix(&c, m, d, bandwidth)).expect("m x m"))
}

fn kernel_matrix(c: &[f64], m: usize, d: usize, bandwidth: f64) -> Vec<f64> {
    let inv = inv_two_h2(bandwidth);
    let mut k = vec![0.0; m * m];
    k.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
        let ci = &c[i * d..(i + 1) * d];
        for (j, v) in row.iter_mut().enumerate() {
            *v = if i == j {
                1.0
            } else {
                (-squared_distance(ci, &c[j * d..(j + 1) * d]) * inv).exp()
            };
        }
    });
    k
}

/// Median pairwise Euclidean distance over a seeded subsample of at most
/// [`MEDIAN_SUBSAMPLE`] points, scaled by `multiplier`.
pub fn median_heuristic_bandwidth(points: ArrayView2<'_, f64>, multiplier: f64, seed: Seed) -> Result<f64> {
    let m = points.nrows();
    if m < 2 {
        return Err(Error::InsufficientPoints { needed: 2, available: m });
    }
    if !(multiplier.is_finite() && multiplier > 0.0) {
        return Err(Error::invalid("kernel.bandwidth_value", "multiplier must be finite and > 0"));
    }
    let d = points.ncols();
    let all = row_slice(&points);
    let sample: Vec<usize> = if m <= MEDIAN_SUBSAMPLE {
        (0..m).collect()
    } else {
        let mut idx = choose_indices(m, MEDIAN_SUBSAMPLE, seed);
        idx.sort_unstable();
        idx
    };
    let s = sample.len();
    let mut dists = Vec::with_capacity(s * (s - 1) / 2);
    for a in 0..s {
        let pa = &all[sample[a] * d..(sample[a] + 1) * d];
        for &ib in &sample[a + 1..] {
            dists.push(squared_distance(pa, &all[ib * d..(ib + 1) * d]).sqrt());
        }
    }
    let n = dists.len();
    let mid = n / 2;
    let (_, upper, _) = dists.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    let median = if n % 2 == 1 {
        upper
    } else {
        let lower = dists[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    };
    let h = median * multiplier;
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::DegenerateBandwidth);
    }
    Ok(h)
}

/// One fitted time slice.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceModel {
    pub slice_time: f64,
    pub centers: Array2<f64>,
    pub coefficients: Array2<f64>,
    pub bandwidth: f64,
    pub cg: CgDiagnostics,
}

impl SliceModel {
    pub fn dim(&self) -> usize {
        self.centers.ncols()
    }

    fn eval_row(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        let inv = inv_two_h2(self.bandwidth);
        let c = self.centers.as_slice().expect("standard layout");
        let th = self.coefficients.as_slice().expect("standard layout");
        out.fill(0.0);
        for (cj, tj) in c.chunks_exact(d).zip(th.chunks_exact(d)) {
            let w = (-squared_distance(x, cj) * inv).exp();
            for k in 0..d {
                out[k] += w * tj[k];
            }
        }
    }

    /// `Φ(queries, centers) θ`.
    pub fn evaluate(&self, queries: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if queries.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: queries.ncols(),
            });
        }
        let d = self.dim();
        let q = row_slice(&queries);
        let mut out = vec![0.0; q.len()];
        out.par_chunks_mut(d)
            .zip(q.par_chunks(d))
            .for_each(|(o, x)| self.eval_row(x, o));
        Ok(Array2::from_shape_vec(queries.raw_dim(), out).expect("same shape"))
    }
}

fn has_duplicate_rows(c: &[f64], d: usize) -> bool {
    let mut rows: Vec<&[f64]> = c.chunks_exact(d).collect();
    let key = |r: &[f64]| r.iter().map(|v| if *v == 0.0 { 0u64 } else { v.to_bits() }).collect::<Vec<_>>();
    rows.sort_by_key(|r| key(r));
    rows.windows(2).any(|w| w[0] == w[1])
}

/// Fits the slice interpolant for `targets` given at `training` points.
///
/// Non-convergence of CG is reported through `SliceModel::cg`, not as an error.
pub fn fit_slice(
    training: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
    slice_time: f64,
    config: &KernelConfig,
    cg_config: &CgConfig,
    seed: Seed,
) -> Result<SliceModel> {
    config.validate()?;
    let m = training.nrows();
    if m == 0 {
        return Err(Error::invalid("training_points", "need at least one point"));
    }
    if targets.nrows() != m {
        return Err(Error::invalid(
            "target_velocities",
            format!("{} rows for {m} training points", targets.nrows()),
        ));
    }
    if targets.ncols() != training.ncols() {
        return Err(Error::DimensionMismatch {
            expected: training.ncols(),
            found: targets.ncols(),
        });
    }
    if !slice_time.is_finite() {
        return Err(Error::invalid("slice_time", "must be finite"));
    }
    let d = training.ncols();
    let bandwidth = config.resolve_bandwidth(training, seed.derive(&[0]))?;
    let beta = config.regularization_beta;
    let x = row_slice(&training);
    let v = row_slice(&targets);

    let (centers, rhs, system, mc) = match config.max_centers {
        Some(cap) if cap < m => {
            let mut idx = choose_indices(m, cap, seed.derive(&[1]));
            idx.sort_unstable();
            let mut centers = Vec::with_capacity(cap * d);
            for &i in &idx {
                centers.extend_from_slice(&x[i * d..(i + 1) * d]);
            }
            // Least squares on the subsampled basis: (ΦᵀΦ + βI) θ = Φᵀ v.
            let inv = inv_two_h2(bandwidth);
            let mut phi = vec![0.0; m * cap];
            phi.par_chunks_mut(cap).enumerate().for_each(|(i, row)| {
                let xi = &x[i * d..(i + 1) * d];
                for (j, p) in row.iter_mut().enumerate() {
                    *p = (-squared_distance(xi, &centers[j * d..(j + 1) * d]) * inv).exp();
                }
            });
            let mut gram = vec![0.0; cap * cap];
            gram.par_chunks_mut(cap).enumerate().for_each(|(a, row)| {
                for (b, g) in row.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for i in 0..m {
                        s += phi[i * cap + a] * phi[i * cap + b];
                    }
                    *g = s;
                }
                row[a] += beta;
            });
            let mut rhs = vec![0.0; cap * d];
            for a in 0..cap {
                for i in 0..m {
                    let p = phi[i * cap + a];
                    for k in 0..d {
                        rhs[a * d + k] += p * v[i * d + k];
                    }
                }
            }
            (centers, rhs, gram, cap)
        }
        _ => {
            let mut k = kernel_matrix(&x, m, d, bandwidth);
            for i in 0..m {
                k[i * m + i] += beta;
            }
            (x, v, k, m)
        }
    };
    if beta == 0.0 && has_duplicate_rows(&centers, d) {
        return Err(Error::DuplicateCenters);
    }

    let sol = cg::solve_dense(&system, mc, &rhs, d, cg_config);
    Ok(SliceModel {
        slice_time,
        centers: Array2::from_shape_vec((mc, d), centers).expect("mc x d"),
        coefficients: Array2::from_shape_vec((mc, d), sol.x).expect("mc x d"),
        bandwidth,
        cg: sol.diagnostics,
    })
}

/// A velocity field made of fitted slices with strictly increasing times.
#[derive(Debug, Clone, PartialEq)]
pub struct RbfVelocityField {
    slices: Vec<SliceModel>,
    kernel_config: KernelConfig,
}

impl RbfVelocityField {
    pub fn new(slices: Vec<SliceModel>, kernel_config: KernelConfig) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::invalid("slices", "field needs at least one slice"))?;
        let d = first.dim();
        for s in &slices {
            if s.dim() != d {
                return Err(Error::DimensionMismatch { expected: d, found: s.dim() });
            }
            if !(0.0..=1.0).contains(&s.slice_time) {
                return Err(Error::invalid("slices.slice_time", "must lie in [0, 1]"));
            }
            if s.centers.nrows() != s.coefficients.nrows() {
                return Err(Error::invalid("slices", "centers and coefficients differ in length"));
            }
        }
        if slices.windows(2).any(|w| w[0].slice_time >= w[1].slice_time) {
            return Err(Error::invalid("slices.slice_time", "must be strictly increasing"));
        }
        Ok(Self { slices, kernel_config })
    }

    pub fn slices(&self) -> &[SliceModel] {
        &self.slices
    }

    pub fn kernel_config(&self) -> &KernelConfig {
        &self.kernel_config
    }

    pub fn cg_diagnostics(&self) -> Vec<CgDiagnostics> {
        self.slices.iter().map(|s| s.cg).collect()
    }

    /// The slice pair and blend weight used at time `t`.
    fn locate(&self, t: f64) -> (usize, Option<(usize, f64)>) {
        let s = &self.slices;
        let last = s.len() - 1;
        if t <= s[0].slice_time {
            return (0, None);
        }
        if t >= s[last].slice_time {
            return (last, None);
        }
        let hi = s.partition_point(|m| m.slice_time <= t);
        let lo = hi - 1;
        if s[lo].slice_time == t {
            return (lo, None);
        }
        let w = (t - s[lo].slice_time) / (s[hi].slice_time - s[lo].slice_time);
        (lo, Some((hi, w)))
    }

    fn eval_row(&self, x: &[f64], t: f64, out: &mut [f64], scratch: &mut [f64]) {
        match self.locate(t) {
            (i, None) => self.slices[i].eval_row(x, out),
            (lo, Some((hi, w))) => {
                self.slices[lo].eval_row(x, out);
                self.slices[hi].eval_row(x, scratch);
                for (o, s) in out.iter_mut().zip(scratch.iter()) {
                    *o = (1.0 - w) * *o + w * s;
                }
            }
        }
    }

    pub fn evaluate(&self, queries: ArrayView2<'_, f64>, t: f64) -> Result<Array2<f64>> {
        if queries.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: queries.ncols(),
            });
        }
        let q = row_slice(&queries);
        let mut out = vec![0.0; q.len()];
        self.velocity_into(&q, t, &mut out);
        Ok(Array2::from_shape_vec(queries.raw_dim(), out).expect("same shape"))
    }
}

impl VelocityField for RbfVelocityField {
    fn dim(&self) -> usize {
        self.slices[0].dim()
    }

    fn velocity_into(&self, points: &[f64], t: f64, out: &mut [f64]) {
        let d = self.dim();
        out.par_chunks_mut(d)
            .zip(points.par_chunks(d))
            .for_each_init(|| vec![0.0; d], |scratch, (o, x)| self.eval_row(x, t, o, scratch));
    }
}

pub const FIELD_MAGIC: [u8; 4] = *b"FRVF";
pub const FIELD_VERSION: u32 = 1;

/// Packed-binary container for a fitted field (little-endian):
/// magic `FRVF`, `u32` version, kernel config (`u8` mode, `f64` value, `f64` beta,
/// `u64` max_centers with 0 meaning none), `u64` slice count, `u64` d, then per
/// slice: `f64` time, `f64` bandwidth, `u64` CG iterations, `f64` residual,
/// `f64` min curvature, `u8` converged, `u64` M, M·d centers, M·d coefficients.
pub fn encode_field(field: &RbfVelocityField) -> Vec<u8> {
    let mut out = Vec::new();
    let cfg = &field.kernel_config;
    out.extend_from_slice(&FIELD_MAGIC);
    out.extend_from_slice(&FIELD_VERSION.to_le_bytes());
    out.push(match cfg.bandwidth_mode {
        BandwidthMode::MedianHeuristic => 0,
        BandwidthMode::Fixed => 1,
    });
    out.extend_from_slice(&cfg.bandwidth_value.to_le_bytes());
    out.extend_from_slice(&cfg.regularization_beta.to_le_bytes());
    out.extend_from_slice(&(cfg.max_centers.unwrap_or(0) as u64).to_le_bytes());
    out.extend_from_slice(&(field.slices.len() as u64).to_le_bytes());
    out.extend_from_slice(&(field.dim() as u64).to_le_bytes());
    for s in &field.slices {
        out.extend_from_slice(&s.slice_time.to_le_bytes());
        out.extend_from_slice(&s.bandwidth.to_le_bytes());
        out.extend_from_slice(&(s.cg.iterations as u64).to_le_bytes());
        out.extend_from_slice(&s.cg.final_relative_residual.to_le_bytes());
        out.extend_from_slice(&s.cg.min_curvature.to_le_bytes());
        out.push(s.cg.converged as u8);
        out.extend_from_slice(&(s.centers.nrows() as u64).to_le_bytes());
        for v in s.centers.iter().chain(s.coefficients.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_field(bytes: &[u8], path: &Path) -> Result<RbfVelocityField> {
    let mut r = ByteReader::new(bytes, path);
    if r.take(4)? != FIELD_MAGIC {
        return Err(r.error("bad magic, not a velocity field"));
    }
    if r.u32()? != FIELD_VERSION {
        return Err(r.error("unsupported field version"));
    }
    let bandwidth_mode = match r.u8()? {
        0 => BandwidthMode::MedianHeuristic,
        1 => BandwidthMode::Fixed,
        _ => return Err(r.error("unknown bandwidth mode")),
    };
    let bandwidth_value = r.f64()?;
    let regularization_beta = r.f64()?;
    let max_centers = match r.u64()? {
        0 => None,
        m => Some(m as usize),
    };
    let kernel_config = KernelConfig {
        bandwidth_mode,
        bandwidth_value,
        regularization_beta,
        max_centers,
    };
    let n_slices = r.u64()? as usize;
    let d = r.u64()? as usize;
    let mut slices = Vec::with_capacity(n_slices.min(1 << 16));
    for _ in 0..n_slices {
        let slice_time = r.f64()?;
        let bandwidth = r.f64()?;
        let iterations = r.u64()? as usize;
        let final_relative_residual = r.f64()?;
        let min_curvature = r.f64()?;
        let converged = r.u8()? != 0;
        let m = r.u64()? as usize;
        let len = m.checked_mul(d).filter(|l| l.checked_mul(16).is_some_and(|b| b <= r.remaining()));
        let len = len.ok_or_else(|| r.error("slice payload truncated"))?;
        let centers = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let coefficients = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        slices.push(SliceModel {
            slice_time,
            centers: Array2::from_shape_vec((m, d), centers).expect("m x d"),
            coefficients: Array2::from_shape_vec((m, d), coefficients).expect("m x d"),
            bandwidth,
            cg: CgDiagnostics {
                iterations,
                final_relative_residual,
                converged,
                min_curvature,
            },
        });
    }
    if r.remaining() != 0 {
        return Err(r.error("trailing bytes after field"));
    }
    RbfVelocityField::new(slices, kernel_config)
}

pub fn save_field(field: &RbfVelocityField, path: &Path) -> Result<()> {
    fs::write(path, encode_field(field)).map_err(|e| Error::io(path, e))
}

pub fn load_field(path: &Path) -> Result<RbfVelocityField> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_field(&bytes, path)
}
