//! Runs a configured experiment and writes its artifacts.
//!
//! Output directory layout:
//!
//! ```text
//! manifest.json        config echo, versions, per-iteration metrics, termination, file index
//! costs.csv            iteration,label,time,cost,a_to_b,b_to_a
//! timings.csv          iteration,label,wall_time_secs (the only non-reproducible file)
//! clouds/              source, target and one cloud per iterate
//! trajectories/<label> ODE snapshots per round (2-D runs only)
//! fields/<label>.frvf  fitted fields, when output.save_fields is set
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use flowrefine_core::io::{save_cloud, CloudFormat};
use flowrefine_core::metrics::internal_similarity;
use flowrefine_core::ode::integrate;
use flowrefine_core::rbf::save_field;
use flowrefine_core::refine::{end_path_correct, gradual_refine, RefinementTrace, Termination};
use flowrefine_core::sampling::{sample_gaussian_mixture, GaussianMixtureSpec, Seed, PRNG_ID};
use flowrefine_core::PointCloud;
use serde::{Deserialize, Serialize};

use crate::config::{streams, Algorithm, ExperimentConfig, TargetConfig};
use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const COSTS_FILE: &str = "costs.csv";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const MANIFEST_VERSION: u32 = 1;

/// Points per half of the internal-similarity baseline.
pub const SIMILARITY_SUBSET: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub index: usize,
    pub label: String,
    pub time: f64,
    pub cost: f64,
    pub a_to_b: f64,
    pub b_to_a: f64,
    pub cg_max_iterations: usize,
    pub cg_max_residual: f64,
    pub cg_all_converged: bool,
    pub cloud_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub subset_size: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub tool_version: String,
    pub prng: String,
    pub seed_scheme: String,
    pub config: ExperimentConfig,
    pub dim: usize,
    pub n_source: usize,
    pub n_target: usize,
    pub pairs_per_slice: usize,
    pub stop_rule: String,
    pub internal_similarity: Option<Baseline>,
    pub iterations: Vec<IterationRecord>,
    pub termination: Termination,
    pub files: Vec<String>,
}

impl RunManifest {
    pub fn load(path: &Path) -> CliResult<Self> {
        let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Parse { path, message: e.to_string() })
    }

    pub fn final_cost(&self) -> Option<f64> {
        self.iterations.last().map(|r| r.cost)
    }

    pub fn failed(&self) -> bool {
        matches!(self.termination, Termination::Failed { .. })
    }

    /// Human-readable summary used by `inspect`.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let c = &self.config;
        let _ = writeln!(s, "flowrefine {} (manifest v{})", self.tool_version, self.manifest_version);
        let _ = writeln!(s, "algorithm: {:?}, seed {}, d = {}, N = {} -> {}", c.algorithm, c.seed, self.dim, self.n_source, self.n_target);
        let _ = writeln!(s, "pairs per slice: {}, slices: {}, steps: {}", self.pairs_per_slice, c.pairing.slices, c.ode.num_steps);
        let _ = writeln!(s, "stop rule: {}", self.stop_rule);
        if let Some(b) = &self.internal_similarity {
            let _ = writeln!(s, "internal similarity ({} vs {}): {:.6e}", b.subset_size, b.subset_size, b.value);
        }
        for r in &self.iterations {
            let flag = if r.cg_all_converged { "" } else { "  [CG not converged]" };
            let _ = writeln!(s, "  {:>3} {:<12} t={:<8.4} cost={:.6e}{flag}", r.index, r.label, r.time, r.cost);
        }
        let _ = write!(s, "termination: {}", self.termination.label());
        if let Termination::Failed { round, message } = &self.termination {
            let _ = write!(s, " (round {round}: {message})");
        }
        s
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub trace: RefinementTrace,
    pub output_dir: PathBuf,
}

/// Internal-similarity floor of the target distribution.
///
/// Generated targets get a fresh draw of `2 * SIMILARITY_SUBSET` points split
/// in half; file targets are split directly, with smaller halves when the file
/// holds fewer than `2 * SIMILARITY_SUBSET` points.
pub fn internal_similarity_baseline(cfg: &ExperimentConfig, target: &PointCloud) -> CliResult<Option<Baseline>> {
    let seed = Seed(cfg.seed).derive(&streams::INTERNAL_SIMILARITY);
    let (pool, k) = match &cfg.target {
        TargetConfig::Mixture { components, .. } => {
            let spec = GaussianMixtureSpec { components: components.clone() };
            (sample_gaussian_mixture(&spec, 2 * SIMILARITY_SUBSET, seed.derive(&[0]))?, SIMILARITY_SUBSET)
        }
        TargetConfig::File { .. } => (target.clone(), SIMILARITY_SUBSET.min(target.len() / 2)),
    };
    if k == 0 {
        return Ok(None);
    }
    let r = internal_similarity(&pool, k, seed.derive(&[1]))?;
    Ok(Some(Baseline { subset_size: k, value: r.value }))
}

/// Executes the configured algorithm on already loaded clouds.
pub fn run_algorithm(cfg: &ExperimentConfig, source: &PointCloud, target: &PointCloud) -> CliResult<RefinementTrace> {
    let trace = match cfg.algorithm {
        Algorithm::OneShot | Algorithm::EndPath => end_path_correct(source, target, &cfg.end_path_config())?,
        Algorithm::Gradual => {
            log::warn!("gradual refinement selected; end-path correction is the default driver");
            gradual_refine(source, target, &cfg.gradual_config())?
        }
    };
    Ok(trace)
}

fn output_err(e: flowrefine_core::Error) -> CliError {
    match e {
        flowrefine_core::Error::Io { path, source } => CliError::Output { path, source },
        other => CliError::Core(other),
    }
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|source| CliError::Output { path: path.to_path_buf(), source })
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|source| CliError::Output { path: path.to_path_buf(), source })
}

fn rel(path: &Path, base: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

pub fn costs_csv(trace: &RefinementTrace) -> String {
    let mut s = String::from("iteration,label,time,cost,a_to_b,b_to_a\n");
    for (i, it) in trace.iterates.iter().enumerate() {
        let _ = writeln!(s, "{i},{},{},{},{},{}", it.label, it.time, it.cost.value, it.cost.a_to_b, it.cost.b_to_a);
    }
    s
}

fn timings_csv(trace: &RefinementTrace) -> String {
    let mut s = String::from("iteration,label,wall_time_secs\n");
    for (i, it) in trace.iterates.iter().enumerate() {
        let _ = writeln!(s, "{i},{},{}", it.label, it.wall_time_secs);
    }
    s
}

/// Validates, loads inputs, runs, and writes every artifact into `out`.
///
/// A round that fails at runtime still produces all artifacts; the error is
/// returned after the manifest is written.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> CliResult<RunOutcome> {
    cfg.validate()?;
    let (source, target) = cfg.load_inputs()?;
    let trace = run_algorithm(cfg, &source, &target)?;

    create_dir(out)?;
    let clouds_dir = out.join("clouds");
    create_dir(&clouds_dir)?;
    let fmt: CloudFormat = cfg.output.cloud_format;
    let mut files = vec![MANIFEST_FILE.to_string(), COSTS_FILE.to_string(), TIMINGS_FILE.to_string()];
    for (name, cloud) in [("source", &source), ("target", &target)] {
        let path = clouds_dir.join(format!("{name}.{}", fmt.extension()));
        save_cloud(cloud, &path, fmt).map_err(output_err)?;
        files.push(rel(&path, out));
    }

    let mut iterations = Vec::with_capacity(trace.iterates.len());
    for (i, it) in trace.iterates.iter().enumerate() {
        let path = clouds_dir.join(format!("{i:03}-{}.{}", it.label, fmt.extension()));
        save_cloud(&it.cloud, &path, fmt).map_err(output_err)?;
        let cloud_file = rel(&path, out);
        files.push(cloud_file.clone());
        iterations.push(IterationRecord {
            index: i,
            label: it.label.clone(),
            time: it.time,
            cost: it.cost.value,
            a_to_b: it.cost.a_to_b,
            b_to_a: it.cost.b_to_a,
            cg_max_iterations: it.cg.iter().map(|c| c.iterations).max().unwrap_or(0),
            cg_max_residual: it.cg.iter().map(|c| c.final_relative_residual).fold(0.0, f64::max),
            cg_all_converged: it.cg.iter().all(|c| c.converged),
            cloud_file,
        });
    }

    if source.dim() == 2 && cfg.output.trajectory_every > 0 {
        for (j, (field, ode)) in trace.fields.iter().zip(&trace.integrations).enumerate() {
            let label = &trace.iterates[j + 1].label;
            let (_, record) = integrate(field, &trace.iterates[j].cloud, ode, Some(cfg.output.trajectory_every))?;
            let dir = out.join("trajectories").join(label);
            let paths = record.expect("recording requested").export_csv(&dir).map_err(output_err)?;
            files.extend(paths.iter().map(|p| rel(p, out)));
        }
    }
    if cfg.output.save_fields {
        let dir = out.join("fields");
        create_dir(&dir)?;
        for (j, field) in trace.fields.iter().enumerate() {
            let path = dir.join(format!("{}.frvf", trace.iterates[j + 1].label));
            save_field(field, &path).map_err(output_err)?;
            files.push(rel(&path, out));
        }
    }

    let internal = internal_similarity_baseline(cfg, &target)?;

    let stop = cfg.end_path_config().stop;
    let stop_rule = match cfg.algorithm {
        Algorithm::Gradual => format!("fixed segments at checkpoints {:?}", cfg.checkpoints()),
        _ => format!(
            "{:?} on the transport cost, tolerance {}, at most {} rounds",
            stop.mode, stop.tolerance, stop.max_iterations
        ),
    };
    let manifest = RunManifest {
        manifest_version: MANIFEST_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        prng: PRNG_ID.to_string(),
        seed_scheme: streams::DESCRIPTION.to_string(),
        config: cfg.clone(),
        dim: source.dim(),
        n_source: source.len(),
        n_target: target.len(),
        pairs_per_slice: cfg.round_config().pairs_for(&source, &target),
        stop_rule,
        internal_similarity: internal,
        iterations,
        termination: trace.termination.clone(),
        files,
    };
    write_file(&out.join(COSTS_FILE), &costs_csv(&trace))?;
    write_file(&out.join(TIMINGS_FILE), &timings_csv(&trace))?;
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&out.join(MANIFEST_FILE), &(json + "\n"))?;

    if let Termination::Failed { round, message } = &trace.termination {
        return Err(CliError::RunFailed { round: *round, message: message.clone() });
    }
    Ok(RunOutcome { manifest, trace, output_dir: out.to_path_buf() })
}
