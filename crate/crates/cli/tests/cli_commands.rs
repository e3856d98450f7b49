//! End-to-end runs of the `flowrefine` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn flowrefine(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowrefine"))
        .args(args)
        .current_dir(cwd)
        .env("FLOWREFINE_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Small end-path run: 60 standard-normal points to a blob at (4, 0).
fn small_config(extra: &str) -> String {
    format!(
        r#"
seed = 5
algorithm = "end-path"

[source]
kind = "standard-normal"
n = 60
dim = 2

[target]
kind = "mixture"
n = 60

[[target.components]]
weight = 1.0
mean = [4.0, 0.0]
covariance = [[0.25, 0.0], [0.0, 0.25]]

[kernel]
regularization_beta = 0.1

[pairing]
slices = 4
pairs_per_slice = 200

[ode]
num_steps = 10

[refinement]
max_iterations = 3
stop_tolerance = 0.0

[output]
trajectory_every = 5
{extra}
"#
    )
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    fs::write(dir.join(name), text).unwrap();
    name.to_string()
}

fn metric_cost(o: &Output) -> f64 {
    let v: serde_json::Value = serde_json::from_str(stdout(o).trim()).unwrap();
    v["cost"].as_f64().unwrap()
}

#[test]
fn metric_hand_values() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    write(p, "a.csv", "0,1\n2,3\n");
    write(p, "o.csv", "0,0\n");
    write(p, "f.csv", "3,4\n");
    write(p, "l2.csv", "0\n1\n");
    write(p, "l3.csv", "0\n1\n10\n");
    for (a, b, want) in [("a.csv", "a.csv", 0.0), ("o.csv", "f.csv", 25.0), ("l2.csv", "l3.csv", 13.5)] {
        let o = flowrefine(&["metric", a, b], p);
        assert!(o.status.success(), "{}", stderr(&o));
        assert_eq!(metric_cost(&o), want);
    }
}

#[test]
fn metric_rejects_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    write(p, "a.csv", "0,1\n");
    write(p, "b.csv", "0,1,2\n");
    write(p, "bad.csv", "0,x\n");
    for args in [["metric", "a.csv", "missing.csv"], ["metric", "a.csv", "b.csv"], ["metric", "bad.csv", "a.csv"]] {
        let o = flowrefine(&args, p);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn sample_writes_requested_rows() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let o = flowrefine(&["sample", "--preset", "two-to-three-gaussians", "--side", "target", "--n", "1000", "--out", "t.csv"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(p.join("t.csv")).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 1000);
    assert!(rows.iter().all(|r| r.split(',').count() == 2));
    let again = flowrefine(&["sample", "--preset", "two-to-three-gaussians", "--side", "target", "--n", "1000", "--out", "u.csv"], p);
    assert!(again.status.success());
    assert_eq!(fs::read(p.join("t.csv")).unwrap(), fs::read(p.join("u.csv")).unwrap());

    let o = flowrefine(&["sample", "--preset", "latent-32", "--n", "5", "--out", "l.bin"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = flowrefine(&["metric", "l.bin", "l.bin"], p);
    assert_eq!(metric_cost(&m), 0.0);

    let o = flowrefine(&["sample", "--preset", "gaussian-translation", "--n", "0"], p);
    assert_eq!(o.status.code(), Some(2));
    let o = flowrefine(&["sample", "--preset", "nope", "--n", "3"], p);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sample_from_mixture_spec() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    write(p, "spec.json", r#"{"components": [{"weight": 1.0, "mean": [1.0, 2.0, 3.0], "covariance": [[1,0,0],[0,1,0],[0,0,1]]}]}"#);
    let o = flowrefine(&["sample", "--spec", "spec.json", "--n", "4", "--seed", "9"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows: Vec<String> = stdout(&o).lines().filter(|l| !l.starts_with('#')).map(str::to_string).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.split(',').count() == 3));
}

#[test]
fn end_path_run_writes_artifacts_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let cfg = write(p, "small.toml", &small_config(""));
    for out in ["r1", "r2"] {
        let o = flowrefine(&["run", &cfg, "--out", out], p);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let costs = fs::read_to_string(p.join("r1/costs.csv")).unwrap();
    let lines: Vec<&str> = costs.lines().collect();
    assert_eq!(lines[0], "iteration,label,time,cost,a_to_b,b_to_a");
    assert_eq!(lines.len(), 1 + 4, "{costs}");
    let first: f64 = lines[1].split(',').nth(3).unwrap().parse().unwrap();
    let last: f64 = lines[4].split(',').nth(3).unwrap().parse().unwrap();
    assert!(last < first, "{costs}");

    for f in ["costs.csv", "manifest.json", "clouds/003-round-2.csv", "clouds/source.csv", "clouds/target.csv"] {
        assert_eq!(fs::read(p.join("r1").join(f)).unwrap(), fs::read(p.join("r2").join(f)).unwrap(), "{f}");
    }
    assert!(p.join("r1/timings.csv").exists());
    assert!(p.join("r1/trajectories/round-0").read_dir().unwrap().count() >= 3);

    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(p.join("r1/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["termination"]["kind"], "cap");
    assert_eq!(manifest["iterations"].as_array().unwrap().len(), 4);
    assert!(manifest["prng"].as_str().unwrap().starts_with("chacha20"));
    assert!(manifest.get("wall_time_secs").is_none());

    let o = flowrefine(&["inspect", "r1"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("round-2"));

    // A manifest is a valid config for a re-run.
    let o = flowrefine(&["run", "r1/manifest.json", "--out", "r3"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(p.join("r1/costs.csv")).unwrap(), fs::read(p.join("r3/costs.csv")).unwrap());
}

#[test]
fn seed_override_changes_results() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let cfg = write(p, "small.toml", &small_config("").replace("max_iterations = 3", "max_iterations = 1"));
    assert!(flowrefine(&["run", &cfg, "--out", "a"], p).status.success());
    assert!(flowrefine(&["run", &cfg, "--out", "b", "--seed", "6"], p).status.success());
    assert_ne!(fs::read(p.join("a/costs.csv")).unwrap(), fs::read(p.join("b/costs.csv")).unwrap());
}

#[test]
fn gradual_run_covers_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let text = small_config("")
        .replace("algorithm = \"end-path\"", "algorithm = \"gradual\"")
        .replace("max_iterations = 3", "segments = 3");
    let cfg = write(p, "g.toml", &text);
    let o = flowrefine(&["run", &cfg, "--out", "g"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("gradual"), "notice missing: {}", stderr(&o));
    let costs = fs::read_to_string(p.join("g/costs.csv")).unwrap();
    assert_eq!(costs.lines().count(), 1 + 4, "{costs}");
}

#[test]
fn checkpoint_at_one_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let text = small_config("").replace("algorithm = \"end-path\"", "algorithm = \"gradual\"").replace(
        "max_iterations = 3",
        "checkpoints = [0.5, 1.0]",
    );
    let cfg = write(p, "bad.toml", &text);
    let o = flowrefine(&["run", &cfg, "--out", "x"], p);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("checkpoints[1]"), "{}", stderr(&o));
    assert!(!p.join("x").exists());
}

#[test]
fn config_errors_exit_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let unknown = write(p, "unknown.toml", &small_config("colour = \"red\""));
    let zero_steps = write(p, "zero.toml", &small_config("").replace("num_steps = 10", "num_steps = 0"));
    for cfg in [unknown.as_str(), zero_steps.as_str(), "missing.toml"] {
        let o = flowrefine(&["run", cfg, "--out", "x"], p);
        assert_eq!(o.status.code(), Some(2), "{cfg}: {}", stderr(&o));
    }
    let o = flowrefine(&["run", "--preset", "nope"], p);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn cg_abort_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let text = small_config("\n[cg]\nmax_iterations = 1\ntolerance = 1e-14\non_failure = \"abort\"\n");
    let cfg = write(p, "abort.toml", &text);
    let o = flowrefine(&["run", &cfg, "--out", "f"], p);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(p.join("f/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["termination"]["kind"], "failed");
    assert_eq!(manifest["termination"]["round"], 0);
}

#[test]
fn presets_show_as_loadable_configs() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let o = flowrefine(&["preset", "list"], p);
    assert!(o.status.success());
    for name in ["two-to-three-gaussians", "gaussian-translation", "latent-32", "latent-64"] {
        assert!(stdout(&o).contains(name));
        let shown = flowrefine(&["preset", "show", name], p);
        assert!(shown.status.success());
        let cfg: toml::Value = toml::from_str(&stdout(&shown)).unwrap();
        assert!(cfg.get("source").is_some());
    }
}

#[test]
fn translation_preset_runs_from_cli() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let o = flowrefine(&["run", "--preset", "gaussian-translation", "--out", "t"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    let costs = fs::read_to_string(p.join("t/costs.csv")).unwrap();
    assert_eq!(costs.lines().count(), 3);
}

#[test]
fn mixture_preset_end_path_reports_costs() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let o = flowrefine(&["run", "--preset", "two-to-three-gaussians", "--max-iterations", "1", "--out", "m"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    let costs = fs::read_to_string(p.join("m/costs.csv")).unwrap();
    assert!(costs.lines().count() - 1 > 1, "{costs}");
}
