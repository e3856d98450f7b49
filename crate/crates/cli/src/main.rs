use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use flowrefine_cli::config::{ExperimentConfig, SourceConfig};
use flowrefine_cli::error::{CliError, CliResult};
use flowrefine_cli::experiment::{run_experiment, RunManifest};
use flowrefine_cli::preset::{self, Side};
use flowrefine_core::io::{csv_string, load_cloud, save_cloud, CloudFormat};
use flowrefine_core::metrics::closest_point_cost;
use flowrefine_core::sampling::{sample_gaussian_mixture, GaussianMixtureSpec, Seed};

#[derive(Parser)]
#[command(name = "flowrefine", version, about = "Iterative flow matching between point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a TOML config, a run manifest, or a preset.
    Run {
        /// Config file (.toml) or manifest.json of an earlier run.
        config: Option<PathBuf>,
        #[arg(long, conflicts_with = "config")]
        preset: Option<String>,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: config's output_dir, else ./runs/<name>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override refinement.max_iterations.
        #[arg(long)]
        max_iterations: Option<usize>,
    },
    /// Symmetric closest-point transport cost between two cloud files.
    Metric { a: PathBuf, b: PathBuf },
    /// Draw samples from a preset side or a mixture spec (JSON) and write them.
    Sample {
        #[arg(long, conflicts_with = "spec", required_unless_present = "spec")]
        preset: Option<String>,
        #[arg(long, value_enum, default_value = "source")]
        side: SideArg,
        /// Gaussian-mixture spec as JSON: {"components": [{weight, mean, covariance}]}.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file; the extension picks the format. Stdout (CSV) when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a finished run.
    Inspect {
        /// manifest.json or the run directory.
        path: PathBuf,
    },
    /// List presets or print one as TOML.
    Preset {
        #[command(subcommand)]
        action: PresetAction,
    },
}

#[derive(Subcommand)]
enum PresetAction {
    List,
    Show { name: String },
}

#[derive(Clone, Copy, ValueEnum)]
enum SideArg {
    Source,
    Target,
}

fn run(
    config: Option<PathBuf>,
    preset_name: Option<String>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    max_iterations: Option<usize>,
) -> CliResult<()> {
    let (mut cfg, name) = match (config, preset_name) {
        (Some(path), None) => {
            let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
            (ExperimentConfig::load(&path)?, name)
        }
        (None, Some(name)) => (preset::preset(&name)?, name),
        _ => return Err(CliError::validation("run", "give a config file or --preset")),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(m) = max_iterations {
        cfg.refinement.max_iterations = m;
    }
    let out = out.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| Path::new("runs").join(name));
    let outcome = run_experiment(&cfg, &out)?;
    println!("{}", outcome.manifest.summary());
    println!("artifacts: {}", outcome.output_dir.display());
    Ok(())
}

fn metric(a: &Path, b: &Path) -> CliResult<()> {
    let ca = load_cloud(a, CloudFormat::from_path(a))?;
    let cb = load_cloud(b, CloudFormat::from_path(b))?;
    let r = closest_point_cost(&ca, &cb)?;
    let json = serde_json::json!({
        "cost": r.value,
        "a_to_b": r.a_to_b,
        "b_to_a": r.b_to_a,
        "n_a": r.n_a,
        "n_b": r.n_b,
        "normalizer": r.normalizer,
    });
    println!("{json}");
    Ok(())
}

fn sample(
    preset_name: Option<String>,
    side: SideArg,
    spec: Option<PathBuf>,
    n: usize,
    seed: u64,
    out: Option<PathBuf>,
) -> CliResult<()> {
    if n == 0 {
        return Err(CliError::validation("n", "must be at least 1"));
    }
    let cloud = match (preset_name, spec) {
        (Some(name), _) => {
            let side = match side {
                SideArg::Source => Side::Source,
                SideArg::Target => Side::Target,
            };
            preset::sample_side(&name, side, n, Seed(seed))?
        }
        (None, Some(path)) => {
            let text = std::fs::read_to_string(&path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
            let spec: GaussianMixtureSpec =
                serde_json::from_str(&text).map_err(|e| CliError::Parse { path: path.clone(), message: e.to_string() })?;
            sample_gaussian_mixture(&spec, n, Seed(seed))?
        }
        (None, None) => return Err(CliError::validation("sample", "give --preset or --spec")),
    };
    match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|source| CliError::Output { path: dir.to_path_buf(), source })?;
            }
            save_cloud(&cloud, &path, CloudFormat::from_path(&path)).map_err(|e| match e {
                flowrefine_core::Error::Io { path, source } => CliError::Output { path, source },
                other => CliError::Core(other),
            })
        }
        None => {
            print!("{}", csv_string(&cloud));
            Ok(())
        }
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Run { config, preset, seed, out, max_iterations } => run(config, preset, seed, out, max_iterations),
        Command::Metric { a, b } => metric(&a, &b),
        Command::Sample { preset, side, spec, n, seed, out } => sample(preset, side, spec, n, seed, out),
        Command::Inspect { path } => {
            let m = RunManifest::load(&path)?;
            println!("{}", m.summary());
            Ok(())
        }
        Command::Preset { action: PresetAction::List } => {
            for name in preset::NAMES {
                let cfg = preset::preset(name)?;
                let inputs = match &cfg.source {
                    SourceConfig::File { .. } => "file inputs",
                    _ => "generated inputs",
                };
                println!("{name:<24} {:?}, {inputs}", cfg.algorithm);
            }
            Ok(())
        }
        Command::Preset { action: PresetAction::Show { name } } => {
            print!("{}", preset::preset(&name)?.to_toml_string());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Some(n) = std::env::var("FLOWREFINE_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("FLOWREFINE_THREADS ignored: {e}");
        }
    }
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
