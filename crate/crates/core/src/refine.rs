//! Iterative refinement drivers.
//!
//! * [`end_path_correct`] repeats full flow-matching rounds, each starting from
//!   the previous round's transported cloud, until [`stop_check`] says stop.
//! * [`gradual_refine`] cuts `[0, 1]` at checkpoints and, segment by segment,
//!   re-aims a corrected homotopy from the integrated state toward the target.
//!
//! Round/segment `j` draws all randomness from `seed.derive([j])`, so a single
//! segment covering `[0, 1]` performs exactly the computation of end-path round 0.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cg::{CgConfig, CgDiagnostics};
use crate::error::{Error, Result};
use crate::flowmatch::{fit_segment, CgFailurePolicy, PairingPlan, RoundSettings, TimeGrid, HORIZON};
use crate::metrics::{closest_point_cost, CostReport};
use crate::ode::{integrate, Method, OdeConfig};
use crate::pointcloud::PointCloud;
use crate::rbf::{KernelConfig, RbfVelocityField};
use crate::sampling::Seed;

/// Per-round fitting and integration settings shared by both drivers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoundConfig {
    /// Slices per full `[0, 1]` round.
    pub slices: usize,
    /// `None` means `min(N_start * N_target, 4096)`.
    pub pairs_per_slice: Option<usize>,
    pub kernel: KernelConfig,
    pub cg: CgConfig,
    pub on_cg_failure: CgFailurePolicy,
    pub method: Method,
    /// Integration steps over the full `[0, 1]` interval.
    pub num_steps: usize,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            slices: 16,
            pairs_per_slice: None,
            kernel: KernelConfig::default(),
            cg: CgConfig::default(),
            on_cg_failure: CgFailurePolicy::Warn,
            method: Method::Rk4,
            num_steps: 50,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.slices == 0 {
            return Err(Error::invalid("round.slices", "must be at least 1"));
        }
        if self.pairs_per_slice == Some(0) {
            return Err(Error::invalid("round.pairs_per_slice", "must be at least 1"));
        }
        if self.num_steps == 0 {
            return Err(Error::invalid("round.num_steps", "must be at least 1"));
        }
        if !(self.cg.tolerance.is_finite() && self.cg.tolerance > 0.0) {
            return Err(Error::invalid("round.cg.tolerance", "must be finite and > 0"));
        }
        self.kernel.validate()
    }

    pub fn pairs_for(&self, start: &PointCloud, target: &PointCloud) -> usize {
        self.pairs_per_slice
            .unwrap_or_else(|| PairingPlan::default_pairs(start.len(), target.len()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopMode {
    /// Stop once the latest cost is at most the tolerance.
    Absolute,
    /// Stop once `|c_k - c_{k-1}| / max(c_{k-1}, eps)` is at most the tolerance.
    RelativeChange,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StopRule {
    pub mode: StopMode,
    pub tolerance: f64,
    /// Maximum number of rounds.
    pub max_iterations: usize,
}

impl Default for StopRule {
    fn default() -> Self {
        Self {
            mode: StopMode::RelativeChange,
            tolerance: 0.02,
            max_iterations: 20,
        }
    }
}

impl StopRule {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::invalid("refinement.max_iterations", "must be at least 1"));
        }
        if !(self.tolerance.is_finite() && self.tolerance >= 0.0) {
            return Err(Error::invalid("refinement.tolerance", "must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Converged,
    Cap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop(StopReason),
}

/// Decides whether to run another round given the costs so far; `costs[0]`
/// belongs to the initial cloud, so `costs.len() - 1` rounds have run.
pub fn stop_check(costs: &[f64], rule: &StopRule) -> StopDecision {
    if costs.len() < 2 {
        return StopDecision::Continue;
    }
    let last = costs[costs.len() - 1];
    let prev = costs[costs.len() - 2];
    let converged = match rule.mode {
        StopMode::Absolute => last <= rule.tolerance,
        StopMode::RelativeChange => (last - prev).abs() / prev.max(f64::MIN_POSITIVE) <= rule.tolerance,
    };
    if converged {
        StopDecision::Stop(StopReason::Converged)
    } else if costs.len() > rule.max_iterations {
        StopDecision::Stop(StopReason::Cap)
    } else {
        StopDecision::Continue
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndPathConfig {
    pub stop: StopRule,
    pub round: RoundConfig,
    pub seed: Seed,
}

impl Default for EndPathConfig {
    fn default() -> Self {
        Self {
            stop: StopRule::default(),
            round: RoundConfig::default(),
            seed: Seed(0),
        }
    }
}

pub fn uniform_checkpoints(segments: usize) -> Vec<f64> {
    (1..segments).map(|i| i as f64 / segments as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradualConfig {
    /// Interior checkpoints `0 < t_1 < ... < t_{n-1} < 1`.
    pub checkpoints: Vec<f64>,
    pub round: RoundConfig,
    /// Slices per segment; `None` means `max(2, round.slices / n)`.
    pub segment_slices: Option<usize>,
    pub seed: Seed,
}

impl Default for GradualConfig {
    fn default() -> Self {
        Self {
            checkpoints: uniform_checkpoints(6),
            round: RoundConfig::default(),
            segment_slices: None,
            seed: Seed(0),
        }
    }
}

impl GradualConfig {
    pub fn validate(&self) -> Result<()> {
        self.round.validate()?;
        if self.segment_slices == Some(0) {
            return Err(Error::invalid("refinement.segment_slices", "must be at least 1"));
        }
        validate_checkpoints(&self.checkpoints)
    }

    /// `[0, t_1, ..., t_{n-1}, 1]`.
    pub fn boundaries(&self) -> Vec<f64> {
        let mut b = Vec::with_capacity(self.checkpoints.len() + 2);
        b.push(0.0);
        b.extend_from_slice(&self.checkpoints);
        b.push(HORIZON);
        b
    }
}

pub fn validate_checkpoints(checkpoints: &[f64]) -> Result<()> {
    for (j, &t) in checkpoints.iter().enumerate() {
        if !t.is_finite() {
            return Err(Error::invalid(format!("checkpoints[{j}]"), "must be finite"));
        }
        if (HORIZON - t).abs() <= 1e-12 {
            return Err(Error::invalid(
                format!("checkpoints[{j}]"),
                format!("t = {t} equals T = 1; the corrected homotopy divides by 1 - t_j, which would be zero"),
            ));
        }
        if !(0.0 < t && t < HORIZON) {
            return Err(Error::invalid(format!("checkpoints[{j}]"), format!("t = {t} must lie strictly inside (0, 1)")));
        }
    }
    if checkpoints.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("checkpoints", "must be strictly increasing"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Iterate {
    pub label: String,
    /// Time on `[0, 1]` the cloud corresponds to.
    pub time: f64,
    pub cloud: PointCloud,
    /// Cost of `cloud` (side `a`) against the target (side `b`).
    pub cost: CostReport,
    /// CG diagnostics of the slices fitted to produce this iterate; empty for the initial cloud.
    pub cg: Vec<CgDiagnostics>,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Termination {
    Converged,
    Cap,
    /// All gradual-refinement segments ran.
    Completed,
    /// A round failed at runtime; earlier iterates are kept.
    Failed { round: usize, message: String },
}

impl Termination {
    pub fn label(&self) -> &'static str {
        match self {
            Termination::Converged => "converged",
            Termination::Cap => "cap",
            Termination::Completed => "completed",
            Termination::Failed { .. } => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementTrace {
    pub iterates: Vec<Iterate>,
    /// Field fitted in each round, in order.
    pub fields: Vec<RbfVelocityField>,
    /// Integration used with each field.
    pub integrations: Vec<OdeConfig>,
    pub termination: Termination,
}

impl RefinementTrace {
    pub fn costs(&self) -> Vec<f64> {
        self.iterates.iter().map(|it| it.cost.value).collect()
    }

    pub fn final_cloud(&self) -> &PointCloud {
        &self.iterates.last().expect("trace holds the initial cloud").cloud
    }

    /// Re-integrates `initial` through the stored fields.
    pub fn replay(&self, initial: &PointCloud) -> Result<PointCloud> {
        let mut x = initial.clone();
        for (field, ode) in self.fields.iter().zip(&self.integrations) {
            x = integrate(field, &x, ode, None)?.0;
        }
        Ok(x)
    }
}

fn check_clouds(start: &PointCloud, target: &PointCloud) -> Result<()> {
    if start.dim() != target.dim() {
        return Err(Error::DimensionMismatch {
            expected: target.dim(),
            found: start.dim(),
        });
    }
    Ok(())
}

fn initial_iterate(start: &PointCloud, target: &PointCloud) -> Result<Iterate> {
    Ok(Iterate {
        label: "initial".into(),
        time: 0.0,
        cloud: start.clone(),
        cost: closest_point_cost(start, target)?,
        cg: Vec::new(),
        wall_time_secs: 0.0,
    })
}

/// Fits on `[t_lo, t_hi]` anchored at `t_lo` and integrates `x` across it.
fn run_segment(
    x: &PointCloud,
    target: &PointCloud,
    round: &RoundConfig,
    seed: Seed,
    t_lo: f64,
    t_hi: f64,
    slices: usize,
    num_steps: usize,
) -> Result<(RbfVelocityField, OdeConfig, PointCloud)> {
    let grid = TimeGrid::uniform(t_lo, t_hi, slices)?;
    let plan = PairingPlan::new(round.pairs_for(x, target), seed)?;
    let settings = RoundSettings {
        plan: &plan,
        kernel: &round.kernel,
        cg: &round.cg,
        on_cg_failure: round.on_cg_failure,
    };
    let field = fit_segment(x, target, &grid, t_lo, settings)?;
    let ode = OdeConfig {
        method: round.method,
        num_steps,
        t_start: t_lo,
        t_end: t_hi,
    };
    let (next, _) = integrate(&field, x, &ode, None)?;
    Ok((field, ode, next))
}

/// End-path correction: `x_{j+1} = transport(x_j, fit_round(x_j, target))`.
///
/// Invalid inputs are errors; failures inside a round end the trace with
/// [`Termination::Failed`].
pub fn end_path_correct(start: &PointCloud, target: &PointCloud, cfg: &EndPathConfig) -> Result<RefinementTrace> {
    check_clouds(start, target)?;
    cfg.round.validate()?;
    cfg.stop.validate()?;

    let mut trace = RefinementTrace {
        iterates: vec![initial_iterate(start, target)?],
        fields: Vec::new(),
        integrations: Vec::new(),
        termination: Termination::Cap,
    };
    let mut x = start.clone();
    for round in 0..cfg.stop.max_iterations {
        let clock = Instant::now();
        let seed = cfg.seed.derive(&[round as u64]);
        let result = run_segment(&x, target, &cfg.round, seed, 0.0, HORIZON, cfg.round.slices, cfg.round.num_steps)
            .and_then(|(field, ode, next)| Ok((closest_point_cost(&next, target)?, field, ode, next)));
        let (cost, field, ode, next) = match result {
            Ok(r) => r,
            Err(e) if e.is_validation() && round == 0 => return Err(e),
            Err(e) => {
                trace.termination = Termination::Failed { round, message: e.to_string() };
                return Ok(trace);
            }
        };
        log::info!("end-path round {round}: cost {:.6e}", cost.value);
        trace.iterates.push(Iterate {
            label: format!("round-{round}"),
            time: HORIZON,
            cloud: next.clone(),
            cost,
            cg: field.cg_diagnostics(),
            wall_time_secs: clock.elapsed().as_secs_f64(),
        });
        trace.fields.push(field);
        trace.integrations.push(ode);
        x = next;
        if let StopDecision::Stop(reason) = stop_check(&trace.costs(), &cfg.stop) {
            trace.termination = match reason {
                StopReason::Converged => Termination::Converged,
                StopReason::Cap => Termination::Cap,
            };
            break;
        }
    }
    Ok(trace)
}

/// Gradual refinement over the configured checkpoints. Iterate `j + 1` is the
/// integrated state at the end of segment `j`; the last one sits at `t = 1`.
pub fn gradual_refine(start: &PointCloud, target: &PointCloud, cfg: &GradualConfig) -> Result<RefinementTrace> {
    check_clouds(start, target)?;
    cfg.validate()?;
    let bounds = cfg.boundaries();
    let segments = bounds.len() - 1;

    let mut trace = RefinementTrace {
        iterates: vec![initial_iterate(start, target)?],
        fields: Vec::new(),
        integrations: Vec::new(),
        termination: Termination::Completed,
    };
    let mut x = start.clone();
    for j in 0..segments {
        let clock = Instant::now();
        let (t_lo, t_hi) = (bounds[j], bounds[j + 1]);
        let (slices, steps) = if segments == 1 {
            (cfg.round.slices, cfg.round.num_steps)
        } else {
            let steps = (cfg.round.num_steps as f64 * (t_hi - t_lo)).round() as usize;
            let slices = cfg.segment_slices.unwrap_or((cfg.round.slices / segments).max(2));
            (slices, steps.max(5))
        };
        let seed = cfg.seed.derive(&[j as u64]);
        let result = run_segment(&x, target, &cfg.round, seed, t_lo, t_hi, slices, steps)
            .and_then(|(field, ode, next)| Ok((closest_point_cost(&next, target)?, field, ode, next)));
        let (cost, field, ode, next) = match result {
            Ok(r) => r,
            Err(e) if e.is_validation() && j == 0 => return Err(e),
            Err(e) => {
                trace.termination = Termination::Failed { round: j, message: e.to_string() };
                return Ok(trace);
            }
        };
        log::info!("gradual segment {j} [{t_lo:.4}, {t_hi:.4}]: cost {:.6e}", cost.value);
        trace.iterates.push(Iterate {
            label: format!("segment-{j}"),
            time: t_hi,
            cloud: next.clone(),
            cost,
            cg: field.cg_diagnostics(),
            wall_time_secs: clock.elapsed().as_secs_f64(),
        });
        trace.fields.push(field);
        trace.integrations.push(ode);
        x = next;
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stop_rule_examples() {
        let rule = StopRule { mode: StopMode::RelativeChange, tolerance: 0.05, max_iterations: 20 };
        assert_eq!(stop_check(&[10.0, 1.0], &rule), StopDecision::Continue);
        assert_eq!(stop_check(&[1.0, 0.99], &rule), StopDecision::Stop(StopReason::Converged));
        assert_eq!(stop_check(&[3.0], &rule), StopDecision::Continue);
        assert_eq!(stop_check(&[0.0, 0.0], &rule), StopDecision::Stop(StopReason::Converged));
    }

    #[test]
    fn cap_and_absolute_modes() {
        let rule = StopRule { mode: StopMode::RelativeChange, tolerance: 0.05, max_iterations: 2 };
        assert_eq!(stop_check(&[10.0, 5.0], &rule), StopDecision::Continue);
        assert_eq!(stop_check(&[10.0, 5.0, 1.0], &rule), StopDecision::Stop(StopReason::Cap));
        let abs = StopRule { mode: StopMode::Absolute, tolerance: 0.5, max_iterations: 10 };
        assert_eq!(stop_check(&[10.0, 0.6], &abs), StopDecision::Continue);
        assert_eq!(stop_check(&[10.0, 0.4], &abs), StopDecision::Stop(StopReason::Converged));
    }

    #[test]
    fn checkpoint_validation() {
        assert!(validate_checkpoints(&uniform_checkpoints(6)).is_ok());
        assert!(validate_checkpoints(&[]).is_ok());
        let err = validate_checkpoints(&[0.5, 1.0]).unwrap_err();
        assert!(err.to_string().contains("1 - t_j"), "{err}");
        assert!(validate_checkpoints(&[0.0, 0.5]).is_err());
        assert!(validate_checkpoints(&[0.6, 0.5]).is_err());
        assert!(validate_checkpoints(&[0.5, 1.5]).is_err());
    }

    #[test]
    fn default_gradual_has_six_segments() {
        let cfg = GradualConfig::default();
        let b = cfg.boundaries();
        assert_eq!(b.len(), 7);
        assert_eq!((b[0], b[6]), (0.0, 1.0));
    }
}
