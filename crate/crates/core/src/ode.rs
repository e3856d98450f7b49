//! Fixed-step explicit integration of `dx/dt = v(x, t)` for whole clouds.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{save_cloud, CloudFormat};
use crate::pointcloud::PointCloud;

/// A time-dependent velocity field evaluated row by row.
///
/// Implementations must compute each output row from its input row alone, so
/// evaluating a stacked batch equals stacking per-row evaluations.
pub trait VelocityField: Sync {
    fn dim(&self) -> usize;

    /// Writes `v(x_i, t)` for every row of the row-major `points` into `out`.
    fn velocity_into(&self, points: &[f64], t: f64, out: &mut [f64]);
}

/// Velocity field from a per-point closure `f(x, t, out)`.
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F> FnField<F>
where
    F: Fn(&[f64], f64, &mut [f64]) + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> VelocityField for FnField<F>
where
    F: Fn(&[f64], f64, &mut [f64]) + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity_into(&self, points: &[f64], t: f64, out: &mut [f64]) {
        for (x, o) in points.chunks_exact(self.dim).zip(out.chunks_exact_mut(self.dim)) {
            (self.f)(x, t, o);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Euler,
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdeConfig {
    pub method: Method,
    pub num_steps: usize,
    pub t_start: f64,
    pub t_end: f64,
}

impl Default for OdeConfig {
    fn default() -> Self {
        Self {
            method: Method::Rk4,
            num_steps: 50,
            t_start: 0.0,
            t_end: 1.0,
        }
    }
}

impl OdeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 {
            return Err(Error::invalid("ode.num_steps", "must be at least 1"));
        }
        if !(self.t_start.is_finite() && self.t_end.is_finite() && self.t_start < self.t_end) {
            return Err(Error::invalid("ode.t_start", "need finite t_start < t_end"));
        }
        Ok(())
    }

    pub fn step_size(&self) -> f64 {
        (self.t_end - self.t_start) / self.num_steps as f64
    }
}

/// Snapshots taken during an integration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    pub states: Vec<PointCloud>,
}

impl TrajectoryRecord {
    /// Writes one CSV per snapshot into `dir` as `snap_<index>_t<time>.csv`; returns the paths.
    pub fn export_csv(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths = Vec::with_capacity(self.states.len());
        for (i, (t, state)) in self.times.iter().zip(&self.states).enumerate() {
            let path = dir.join(format!("snap_{i:04}_t{t:.6}.csv"));
            save_cloud(state, &path, CloudFormat::Csv)?;
            paths.push(path);
        }
        Ok(paths)
    }
}

fn axpy_into(out: &mut [f64], x: &[f64], a: f64, y: &[f64]) {
    for ((o, xi), yi) in out.iter_mut().zip(x).zip(y) {
        *o = xi + a * yi;
    }
}

/// Integrates every point of `start` through `field` with `config.num_steps`
/// uniform steps. Step `k` starts at `t_start + k h`.
///
/// With `record_every = Some(k)` the state is captured at the start, every `k`
/// steps, and at the end.
pub fn integrate(
    field: &dyn VelocityField,
    start: &PointCloud,
    config: &OdeConfig,
    record_every: Option<usize>,
) -> Result<(PointCloud, Option<TrajectoryRecord>)> {
    config.validate()?;
    if field.dim() != start.dim() {
        return Err(Error::DimensionMismatch {
            expected: start.dim(),
            found: field.dim(),
        });
    }
    if record_every == Some(0) {
        return Err(Error::invalid("record_every", "must be at least 1"));
    }
    let d = start.dim();
    let n = config.num_steps;
    let h = config.step_size();
    let mut x = start.as_slice().to_vec();
    let len = x.len();
    let mut k1 = vec![0.0; len];
    let (mut k2, mut k3, mut k4, mut tmp) = match config.method {
        Method::Euler => (Vec::new(), Vec::new(), Vec::new(), Vec::new()),
        Method::Rk4 => (vec![0.0; len], vec![0.0; len], vec![0.0; len], vec![0.0; len]),
    };

    let mut record = record_every.map(|_| TrajectoryRecord {
        times: vec![config.t_start],
        states: vec![start.clone()],
    });

    for step in 0..n {
        let t = config.t_start + step as f64 * h;
        match config.method {
            Method::Euler => {
                field.velocity_into(&x, t, &mut k1);
                for (xi, vi) in x.iter_mut().zip(&k1) {
                    *xi += h * vi;
                }
            }
            Method::Rk4 => {
                let half = 0.5 * h;
                field.velocity_into(&x, t, &mut k1);
                axpy_into(&mut tmp, &x, half, &k1);
                field.velocity_into(&tmp, t + half, &mut k2);
                axpy_into(&mut tmp, &x, half, &k2);
                field.velocity_into(&tmp, t + half, &mut k3);
                axpy_into(&mut tmp, &x, h, &k3);
                field.velocity_into(&tmp, t + h, &mut k4);
                let sixth = h / 6.0;
                for i in 0..len {
                    x[i] += sixth * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
            }
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { step, point: i / d });
        }
        if let (Some(rec), Some(every)) = (record.as_mut(), record_every) {
            let done = step + 1;
            if done == n || done % every == 0 {
                let t_now = if done == n { config.t_end } else { config.t_start + done as f64 * h };
                rec.times.push(t_now);
                rec.states.push(PointCloud::from_flat(start.len(), d, x.clone())?);
            }
        }
    }
    let end = PointCloud::from_flat(start.len(), d, x)?;
    Ok((end, record))
}

/// Result of [`convergence_order`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OrderEstimate {
    /// Least-squares slope of `ln(error)` against `ln(h)`.
    Slope(f64),
    /// Every error was at rounding level; the method is exact for this field.
    Exact,
}

/// Estimates the global convergence order of `method` on `field` by
/// integrating `start` over `[t_start, t_end]` with each step count and
/// comparing against `exact` (the analytic end state).
pub fn convergence_order(
    field: &dyn VelocityField,
    start: &PointCloud,
    exact: &PointCloud,
    method: Method,
    t_start: f64,
    t_end: f64,
    step_counts: &[usize],
) -> Result<OrderEstimate> {
    if step_counts.len() < 2 {
        return Err(Error::invalid("step_counts", "need at least two step counts"));
    }
    let scale = exact.as_slice().iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut samples = Vec::with_capacity(step_counts.len());
    for &num_steps in step_counts {
        let cfg = OdeConfig { method, num_steps, t_start, t_end };
        let (end, _) = integrate(field, start, &cfg, None)?;
        let err = end
            .as_slice()
            .iter()
            .zip(exact.as_slice())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        samples.push((cfg.step_size(), err));
    }
    if samples.iter().all(|&(_, e)| e <= 64.0 * f64::EPSILON * scale) {
        return Ok(OrderEstimate::Exact);
    }
    let pts: Vec<(f64, f64)> = samples.iter().map(|&(h, e)| (h.ln(), e.max(f64::MIN_POSITIVE).ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(OrderEstimate::Slope(sxy / sxx))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud() -> PointCloud {
        PointCloud::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0], vec![-1.5, 0.25]]).unwrap()
    }

    #[test]
    fn constant_field_moves_by_duration_times_velocity() {
        let c = [0.3, -1.7];
        let field = FnField::new(2, move |_x: &[f64], _t, o: &mut [f64]| o.copy_from_slice(&c));
        for method in [Method::Euler, Method::Rk4] {
            let cfg = OdeConfig { method, num_steps: 7, t_start: 0.25, t_end: 1.0 };
            let (end, _) = integrate(&field, &cloud(), &cfg, None).unwrap();
            for i in 0..3 {
                for k in 0..2 {
                    let want = cloud().row(i)[k] + 0.75 * c[k];
                    assert!((end.row(i)[k] - want).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn zero_field_is_identity_bitwise() {
        let field = FnField::new(2, |_x: &[f64], _t, o: &mut [f64]| o.fill(0.0));
        let (end, _) = integrate(&field, &cloud(), &OdeConfig::default(), None).unwrap();
        assert_eq!(end, cloud());
    }

    #[test]
    fn rk4_reproduces_exponential() {
        let field = FnField::new(2, |x: &[f64], _t, o: &mut [f64]| o.copy_from_slice(x));
        let (end, _) = integrate(&field, &cloud(), &OdeConfig::default(), None).unwrap();
        let e = std::f64::consts::E;
        for (a, b) in end.as_slice().iter().zip(cloud().as_slice()) {
            assert!((a / b / e - 1.0).abs() < 1e-7);
        }
    }

    #[test]
    fn snapshots_cover_both_ends() {
        let field = FnField::new(2, |_x: &[f64], _t, o: &mut [f64]| o.fill(1.0));
        let cfg = OdeConfig { method: Method::Euler, num_steps: 10, t_start: 0.0, t_end: 1.0 };
        let (_, rec) = integrate(&field, &cloud(), &cfg, Some(3)).unwrap();
        let rec = rec.unwrap();
        assert_eq!(rec.times.len(), rec.states.len());
        assert_eq!(rec.times.first(), Some(&0.0));
        assert_eq!(rec.times.last(), Some(&1.0));
        assert_eq!(rec.times.len(), 5); // 0, 3, 6, 9, 10
        assert!(rec.times.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn blow_up_reports_step_and_point() {
        let field = FnField::new(1, |x: &[f64], _t, o: &mut [f64]| {
            o[0] = if x[0] > 1.0 { f64::INFINITY } else { 1.0 };
        });
        let start = PointCloud::from_rows(&[vec![0.0], vec![0.95]]).unwrap();
        let cfg = OdeConfig { method: Method::Euler, num_steps: 10, t_start: 0.0, t_end: 1.0 };
        match integrate(&field, &start, &cfg, None) {
            Err(Error::NonFiniteState { step, point }) => assert_eq!((step, point), (1, 1)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_configs() {
        let field = FnField::new(2, |_x: &[f64], _t, o: &mut [f64]| o.fill(0.0));
        let bad = OdeConfig { num_steps: 0, ..Default::default() };
        assert!(integrate(&field, &cloud(), &bad, None).is_err());
        let back = OdeConfig { t_start: 1.0, t_end: 0.0, ..Default::default() };
        assert!(integrate(&field, &cloud(), &back, None).is_err());
        let wrong = FnField::new(3, |_x: &[f64], _t, o: &mut [f64]| o.fill(0.0));
        assert!(integrate(&wrong, &cloud(), &OdeConfig::default(), None).is_err());
    }
}
