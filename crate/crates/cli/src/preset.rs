//! Named benchmark configurations.

use std::path::PathBuf;

use flowrefine_core::rbf::KernelConfig;
use flowrefine_core::sampling::{
    sample_gaussian_mixture, sample_standard_normal, GaussianMixtureSpec, MixtureComponent, Seed,
};
use flowrefine_core::PointCloud;

use crate::config::{
    Algorithm, CgSection, ExperimentConfig, OdeSection, OutputSection, PairingSection, RefinementSection,
    SourceConfig, TargetConfig, CONFIG_VERSION,
};
use crate::error::{CliError, CliResult};

pub const TWO_TO_THREE: &str = "two-to-three-gaussians";
pub const TRANSLATION: &str = "gaussian-translation";
pub const LATENT_32: &str = "latent-32";
pub const LATENT_64: &str = "latent-64";

pub const NAMES: [&str; 4] = [TWO_TO_THREE, TRANSLATION, LATENT_32, LATENT_64];

/// Shift of the translation preset's target.
pub const TRANSLATION_SHIFT: [f64; 2] = [3.0, -2.0];

/// Points per synthetic latent cloud written by `sample --preset latent-*`.
pub const LATENT_POINTS: usize = 1000;
const LATENT_CLASSES: usize = 10;

fn isotropic(means: &[Vec<f64>], std: f64) -> Vec<MixtureComponent> {
    GaussianMixtureSpec::isotropic(means, std).components
}

/// Kernel used by every preset: median-heuristic bandwidth with a stronger
/// ridge than the library default, which keeps correction rounds from
/// flinging tail points.
fn preset_kernel() -> KernelConfig {
    KernelConfig { regularization_beta: 0.1, ..KernelConfig::default() }
}

fn base(source: SourceConfig, target: TargetConfig, algorithm: Algorithm) -> ExperimentConfig {
    ExperimentConfig {
        version: CONFIG_VERSION,
        seed: 0,
        algorithm,
        output_dir: None,
        source,
        target,
        kernel: preset_kernel(),
        cg: CgSection::default(),
        ode: OdeSection::default(),
        pairing: PairingSection { pairs_per_slice: Some(1024), slices: 16 },
        refinement: RefinementSection::default(),
        output: OutputSection::default(),
    }
}

/// Two Gaussians far to the left of three stacked Gaussians.
pub fn two_to_three() -> ExperimentConfig {
    let source = SourceConfig::Mixture { n: 2000, components: isotropic(&[vec![-30.0, -2.0], vec![-30.0, 2.0]], 0.5) };
    let target = TargetConfig::Mixture {
        n: 2000,
        components: isotropic(&[vec![0.0, -3.0], vec![0.0, 0.0], vec![0.0, 3.0]], 0.5),
    };
    let mut cfg = base(source, target, Algorithm::EndPath);
    // Ten slices per segment: six segments then fit about as many slices as
    // four sixteen-slice end-path rounds.
    cfg.refinement.segment_slices = Some(10);
    cfg
}

pub fn translation() -> ExperimentConfig {
    let source = SourceConfig::StandardNormal { n: 1000, dim: 2 };
    let target = TargetConfig::Mixture {
        n: 1000,
        components: isotropic(&[TRANSLATION_SHIFT.to_vec()], 1.0),
    };
    let mut cfg = base(source, target, Algorithm::OneShot);
    cfg.ode.num_steps = 20;
    cfg
}

fn latent(dim: usize) -> ExperimentConfig {
    let dir = PathBuf::from(format!("latent-{dim}"));
    let source = SourceConfig::File { path: dir.join("source.bin"), format: None };
    let target = TargetConfig::File { path: dir.join("target.bin"), format: None };
    let mut cfg = base(source, target, Algorithm::EndPath);
    cfg.ode.num_steps = 20;
    cfg.output.cloud_format = flowrefine_core::io::CloudFormat::PackedBinary;
    cfg
}

pub fn preset(name: &str) -> CliResult<ExperimentConfig> {
    match name {
        TWO_TO_THREE => Ok(two_to_three()),
        TRANSLATION => Ok(translation()),
        LATENT_32 => Ok(latent(32)),
        LATENT_64 => Ok(latent(64)),
        _ => Err(CliError::validation("preset", format!("unknown preset {name:?}; known: {}", NAMES.join(", ")))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

/// Class-structured stand-in for an encoded dataset: ten Gaussian blobs with
/// centers drawn once from a fixed seed.
pub fn latent_target_spec(dim: usize) -> GaussianMixtureSpec {
    let centers = sample_standard_normal(dim, LATENT_CLASSES, Seed(0x1a7e)).expect("valid sizes");
    let means: Vec<Vec<f64>> = (0..LATENT_CLASSES).map(|k| centers.row(k).to_vec()).collect();
    GaussianMixtureSpec::isotropic(&means, 0.25)
}

fn latent_dim(name: &str) -> Option<usize> {
    match name {
        LATENT_32 => Some(32),
        LATENT_64 => Some(64),
        _ => None,
    }
}

/// Draws `n` points of one side of a preset. File-based presets use their
/// synthetic latent generators.
pub fn sample_side(name: &str, side: Side, n: usize, seed: Seed) -> CliResult<PointCloud> {
    if let Some(dim) = latent_dim(name) {
        return Ok(match side {
            Side::Source => sample_standard_normal(dim, n, seed)?,
            Side::Target => sample_gaussian_mixture(&latent_target_spec(dim), n, seed)?,
        });
    }
    let cfg = preset(name)?;
    let cloud = match side {
        Side::Source => match cfg.source {
            SourceConfig::Mixture { components, .. } => sample_gaussian_mixture(&GaussianMixtureSpec { components }, n, seed)?,
            SourceConfig::StandardNormal { dim, .. } => sample_standard_normal(dim, n, seed)?,
            SourceConfig::File { .. } => unreachable!("only latent presets read files"),
        },
        Side::Target => match cfg.target {
            TargetConfig::Mixture { components, .. } => sample_gaussian_mixture(&GaussianMixtureSpec { components }, n, seed)?,
            TargetConfig::File { .. } => unreachable!("only latent presets read files"),
        },
    };
    Ok(cloud)
}
