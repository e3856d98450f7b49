//! Experiment configuration, read from TOML.
//!
//! Every section except `source` and `target` has defaults, so a minimal
//! config names the two clouds and nothing else. See `docs/config.md` in the
//! repository for the full schema.

use std::fs;
use std::path::{Path, PathBuf};

use flowrefine_core::cg::CgConfig;
use flowrefine_core::flowmatch::CgFailurePolicy;
use flowrefine_core::io::{load_cloud, CloudFormat};
use flowrefine_core::ode::Method;
use flowrefine_core::rbf::KernelConfig;
use flowrefine_core::refine::{uniform_checkpoints, EndPathConfig, GradualConfig, RoundConfig, StopMode, StopRule};
use flowrefine_core::sampling::{sample_gaussian_mixture, sample_standard_normal, GaussianMixtureSpec, MixtureComponent, Seed};
use flowrefine_core::PointCloud;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SourceConfig {
    Mixture { n: usize, components: Vec<MixtureComponent> },
    StandardNormal { n: usize, dim: usize },
    File { path: PathBuf, format: Option<CloudFormat> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TargetConfig {
    Mixture { n: usize, components: Vec<MixtureComponent> },
    File { path: PathBuf, format: Option<CloudFormat> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    OneShot,
    EndPath,
    Gradual,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CgSection {
    pub tolerance: f64,
    pub max_iterations: Option<usize>,
    pub on_failure: CgFailurePolicy,
}

impl Default for CgSection {
    fn default() -> Self {
        let cg = CgConfig::default();
        Self {
            tolerance: cg.tolerance,
            max_iterations: cg.max_iterations,
            on_failure: CgFailurePolicy::Warn,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OdeSection {
    pub method: Method,
    /// Steps over the full `[0, 1]` interval.
    pub num_steps: usize,
}

impl Default for OdeSection {
    fn default() -> Self {
        Self { method: Method::Rk4, num_steps: 50 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairingSection {
    /// `None` means `min(N_start * N_target, 4096)`.
    pub pairs_per_slice: Option<usize>,
    /// Time slices per full `[0, 1]` round.
    pub slices: usize,
}

impl Default for PairingSection {
    fn default() -> Self {
        Self { pairs_per_slice: None, slices: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinementSection {
    pub stop_mode: StopMode,
    pub stop_tolerance: f64,
    pub max_iterations: usize,
    /// Uniform segment count for gradual refinement, used when `checkpoints` is absent.
    pub segments: usize,
    pub checkpoints: Option<Vec<f64>>,
    pub segment_slices: Option<usize>,
}

impl Default for RefinementSection {
    fn default() -> Self {
        let stop = StopRule::default();
        Self {
            stop_mode: stop.mode,
            stop_tolerance: stop.tolerance,
            max_iterations: stop.max_iterations,
            segments: 6,
            checkpoints: None,
            segment_slices: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub cloud_format: CloudFormat,
    /// Snapshot every this many integration steps (2-D runs only); 0 disables.
    pub trajectory_every: usize,
    pub save_fields: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { cloud_format: CloudFormat::Csv, trajectory_every: 10, save_fields: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_algorithm")]
    pub algorithm: Algorithm,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub source: SourceConfig,
    pub target: TargetConfig,
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default)]
    pub cg: CgSection,
    #[serde(default)]
    pub ode: OdeSection,
    #[serde(default)]
    pub pairing: PairingSection,
    #[serde(default)]
    pub refinement: RefinementSection,
    #[serde(default)]
    pub output: OutputSection,
}

fn default_version() -> u32 {
    CONFIG_VERSION
}

fn default_algorithm() -> Algorithm {
    Algorithm::EndPath
}

/// Seed streams derived from the master seed.
pub mod streams {
    pub const SOURCE: [u64; 2] = [1, 0];
    pub const TARGET: [u64; 2] = [1, 1];
    pub const ALGORITHM: [u64; 1] = [2];
    pub const INTERNAL_SIMILARITY: [u64; 1] = [3];

    pub const DESCRIPTION: &str = "source = seed.derive([1,0]), target = seed.derive([1,1]), \
        algorithm = seed.derive([2]) with round/segment j using derive([j]) and slice i pairing with \
        derive([i,0]) and fitting with derive([i,1]), internal similarity = seed.derive([3]) \
        with the fresh target draw from derive([3,0]) and the split from derive([3,1])";
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, path: &Path) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Parse { path: path.to_path_buf(), message: e.to_string() })
    }

    /// Reads a TOML config, or the `config` entry of a JSON run manifest.
    /// Relative cloud paths are resolved against the file's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let mut cfg = if path.extension().is_some_and(|e| e == "json") {
            let value: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Parse { path: path.to_path_buf(), message: e.to_string() })?;
            let inner = value
                .get("config")
                .cloned()
                .ok_or_else(|| CliError::Parse { path: path.to_path_buf(), message: "no `config` entry".into() })?;
            serde_json::from_value(inner).map_err(|e| CliError::Parse { path: path.to_path_buf(), message: e.to_string() })?
        } else {
            Self::from_toml_str(&text, path)?
        };
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Makes relative cloud paths absolute against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                let joined = base.join(&*p);
                *p = std::path::absolute(&joined).unwrap_or(joined);
            }
        };
        if let SourceConfig::File { path, .. } = &mut self.source {
            fix(path);
        }
        if let TargetConfig::File { path, .. } = &mut self.target {
            fix(path);
        }
        if let Some(out) = &mut self.output_dir {
            fix(out);
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.version != CONFIG_VERSION {
            return Err(CliError::validation("version", format!("unsupported config version {}; expected {CONFIG_VERSION}", self.version)));
        }
        match &self.source {
            SourceConfig::Mixture { n, components } => {
                check_n("source.n", *n)?;
                check_mixture("source.components", components)?;
            }
            SourceConfig::StandardNormal { n, dim } => {
                check_n("source.n", *n)?;
                if *dim == 0 {
                    return Err(CliError::validation("source.dim", "must be at least 1"));
                }
            }
            SourceConfig::File { path, .. } => check_file("source.path", path)?,
        }
        match &self.target {
            TargetConfig::Mixture { n, components } => {
                check_n("target.n", *n)?;
                check_mixture("target.components", components)?;
            }
            TargetConfig::File { path, .. } => check_file("target.path", path)?,
        }
        if let (Some(a), Some(b)) = (self.source_dim(), self.target_dim()) {
            if a != b {
                return Err(CliError::validation("target", format!("dimension {b} differs from source dimension {a}")));
            }
        }
        if self.ode.num_steps == 0 {
            return Err(CliError::validation("ode.num_steps", "must be at least 1"));
        }
        if self.pairing.slices == 0 {
            return Err(CliError::validation("pairing.slices", "must be at least 1"));
        }
        if self.pairing.pairs_per_slice == Some(0) {
            return Err(CliError::validation("pairing.pairs_per_slice", "must be at least 1"));
        }
        if self.refinement.segments == 0 {
            return Err(CliError::validation("refinement.segments", "must be at least 1"));
        }
        self.round_config().validate()?;
        self.stop_rule().validate()?;
        self.gradual_config().validate()?;
        Ok(())
    }

    fn source_dim(&self) -> Option<usize> {
        match &self.source {
            SourceConfig::Mixture { components, .. } => components.first().map(|c| c.mean.len()),
            SourceConfig::StandardNormal { dim, .. } => Some(*dim),
            SourceConfig::File { .. } => None,
        }
    }

    fn target_dim(&self) -> Option<usize> {
        match &self.target {
            TargetConfig::Mixture { components, .. } => components.first().map(|c| c.mean.len()),
            TargetConfig::File { .. } => None,
        }
    }

    pub fn round_config(&self) -> RoundConfig {
        RoundConfig {
            slices: self.pairing.slices,
            pairs_per_slice: self.pairing.pairs_per_slice,
            kernel: self.kernel,
            cg: CgConfig { tolerance: self.cg.tolerance, max_iterations: self.cg.max_iterations },
            on_cg_failure: self.cg.on_failure,
            method: self.ode.method,
            num_steps: self.ode.num_steps,
        }
    }

    pub fn stop_rule(&self) -> StopRule {
        StopRule {
            mode: self.refinement.stop_mode,
            tolerance: self.refinement.stop_tolerance,
            max_iterations: self.refinement.max_iterations,
        }
    }

    pub fn algorithm_seed(&self) -> Seed {
        Seed(self.seed).derive(&streams::ALGORITHM)
    }

    pub fn end_path_config(&self) -> EndPathConfig {
        let mut stop = self.stop_rule();
        if self.algorithm == Algorithm::OneShot {
            stop.max_iterations = 1;
        }
        EndPathConfig { stop, round: self.round_config(), seed: self.algorithm_seed() }
    }

    pub fn checkpoints(&self) -> Vec<f64> {
        self.refinement
            .checkpoints
            .clone()
            .unwrap_or_else(|| uniform_checkpoints(self.refinement.segments))
    }

    pub fn gradual_config(&self) -> GradualConfig {
        GradualConfig {
            checkpoints: self.checkpoints(),
            round: self.round_config(),
            segment_slices: self.refinement.segment_slices,
            seed: self.algorithm_seed(),
        }
    }

    /// Samples or loads the source and target clouds.
    pub fn load_inputs(&self) -> CliResult<(PointCloud, PointCloud)> {
        let master = Seed(self.seed);
        let source = match &self.source {
            SourceConfig::Mixture { n, components } => sample_gaussian_mixture(
                &GaussianMixtureSpec { components: components.clone() },
                *n,
                master.derive(&streams::SOURCE),
            )?,
            SourceConfig::StandardNormal { n, dim } => sample_standard_normal(*dim, *n, master.derive(&streams::SOURCE))?,
            SourceConfig::File { path, format } => load_cloud(path, format.unwrap_or_else(|| CloudFormat::from_path(path)))?,
        };
        let target = match &self.target {
            TargetConfig::Mixture { n, components } => sample_gaussian_mixture(
                &GaussianMixtureSpec { components: components.clone() },
                *n,
                master.derive(&streams::TARGET),
            )?,
            TargetConfig::File { path, format } => load_cloud(path, format.unwrap_or_else(|| CloudFormat::from_path(path)))?,
        };
        if source.dim() != target.dim() {
            return Err(CliError::validation(
                "target",
                format!("dimension {} differs from source dimension {}", target.dim(), source.dim()),
            ));
        }
        Ok((source, target))
    }
}

fn check_n(field: &str, n: usize) -> CliResult<()> {
    if n == 0 {
        return Err(CliError::validation(field, "must be at least 1"));
    }
    Ok(())
}

fn check_mixture(field: &str, components: &[MixtureComponent]) -> CliResult<()> {
    GaussianMixtureSpec { components: components.to_vec() }
        .validate()
        .map_err(|e| CliError::validation(field, e))
}

fn check_file(field: &str, path: &Path) -> CliResult<()> {
    if !path.is_file() {
        return Err(CliError::validation(field, format!("{} does not exist", path.display())));
    }
    Ok(())
}
