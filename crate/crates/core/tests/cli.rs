use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use tempfile::TempDir;

const SAMPLE: &str = include_str!("../configs/sample.toml");

/// Sample config shrunk to 8 modes and dt = 1e-2 so runs take milliseconds.
fn small_config(dir: &Path, edits: &[(&str, &str)]) -> PathBuf {
    let mut text = SAMPLE.replace("operator.modes = 256", "operator.modes = 8").replace("solver.dt = 1e-3", "solver.dt = 1e-2");
    for (from, to) in edits {
        assert!(text.contains(from), "sample lacks {from}");
        text = text.replace(from, to);
    }
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn svolterra(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_svolterra"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("SVOLTERRA_OUTPUT_DIR")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn simulate_is_byte_identical_for_a_fixed_seed() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), &[]);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(svolterra(&cfg, &a, &["simulate", "--path", "3"]).status.success());
    assert!(svolterra(&cfg, &b, &["simulate", "--path", "3"]).status.success());
    for f in ["path.csv", "jumps.csv"] {
        let x = fs::read(a.join("simulate").join(f)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, fs::read(b.join("simulate").join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn different_seeds_give_different_jumps() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), &[]);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(svolterra(&cfg, &a, &["--seed", "1", "simulate"]).status.success());
    assert!(svolterra(&cfg, &b, &["--seed", "2", "simulate"]).status.success());
    let x = fs::read_to_string(a.join("simulate/jumps.csv")).unwrap();
    let y = fs::read_to_string(b.join("simulate/jumps.csv")).unwrap();
    assert_ne!(x, y);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(b.join("simulate/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 2);
}

#[test]
fn path_csv_has_flagged_jump_rows() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), &[("noise.small = true", "noise.small = false")]);
    let out = dir.path().join("o");
    // find a path with at least one large jump
    let path = (0..50)
        .find(|p| {
            assert!(svolterra(&cfg, &out, &["simulate", "--path", &p.to_string()]).status.success());
            fs::read_to_string(out.join("simulate/jumps.csv")).unwrap().lines().count() > 1
        })
        .expect("a path with a large jump");
    let csv = fs::read_to_string(out.join("simulate/path.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header.first(), Some(&"t"));
    assert_eq!(header.last(), Some(&"flag"));
    assert_eq!(header.len(), 8 + 2);
    let flags: Vec<&str> = lines.map(|l| l.rsplit(',').next().unwrap()).collect();
    assert_eq!(flags.iter().filter(|f| **f == "0").count(), 101, "path {path}");
    let pre = flags.iter().filter(|f| **f == "-1").count();
    assert!(pre >= 1);
    assert_eq!(pre, flags.iter().filter(|f| **f == "1").count());
}

#[test]
fn every_subcommand_writes_one_manifest_with_the_config_hash() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), &[("mc.paths = 200", "mc.paths = 20")]);
    let hash = format!("{:x}", Sha256::digest(fs::read(&cfg).unwrap()));
    let out = dir.path().join("o");
    for sub in ["analyze-kernel", "resolvent", "simulate", "mc"] {
        let o = svolterra(&cfg, &out, &[sub]);
        assert!(o.status.success(), "{sub}: {}", stderr(&o));
        let d = out.join(sub);
        let manifests: Vec<_> = fs::read_dir(&d).unwrap().filter(|e| e.as_ref().unwrap().file_name() == "manifest.json").collect();
        assert_eq!(manifests.len(), 1);
        let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m["subcommand"], sub);
        assert_eq!(m["config_sha256"], hash.as_str());
        assert!(m["wall_time_seconds"].as_f64().unwrap() >= 0.0);
        for f in m["files"].as_array().unwrap() {
            assert!(d.join(f.as_str().unwrap()).is_file());
        }
    }
}

#[test]
fn json_output_format() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), &[("output.format = \"csv\"", "output.format = \"json\"")]);
    let out = dir.path().join("o");
    assert!(svolterra(&cfg, &out, &["simulate"]).status.success());
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("simulate/path.json")).unwrap()).unwrap();
    assert_eq!(v["modes"], 8);
}

#[test]
fn output_dir_comes_from_the_environment() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), &[]);
    let env_out = dir.path().join("env");
    let o = Command::new(env!("CARGO_BIN_EXE_svolterra"))
        .arg("--config")
        .arg(&cfg)
        .arg("analyze-kernel")
        .env("SVOLTERRA_OUTPUT_DIR", &env_out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(env_out.join("analyze-kernel/manifest.json").is_file());
}

#[test]
fn unknown_key_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), &[("noise.beta = 0.5", "noise.beta = 0.5\nnoise.sigma = 2.0")]);
    let o = svolterra(&cfg, &dir.path().join("o"), &["simulate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown key \"noise.sigma\""));
    assert!(!dir.path().join("o/simulate").exists());
}

#[test]
fn all_violations_are_reported_with_condition_names() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(
        dir.path(),
        &[("solver.alpha = 0.3", "solver.alpha = 0.1"), ("noise.beta = 0.5", "noise.beta = 0.5\nnoise.sigma = 2.0")],
    );
    let o = svolterra(&cfg, &dir.path().join("o"), &["verify"]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("noise.sigma"), "{e}");
    assert!(e.contains("\"alpha >= alpha_G\""), "{e}");
    assert!(e.contains("\"(alpha_F - alpha) rho < 1 - 1/q\""), "{e}");
}

#[test]
fn syntax_errors_carry_a_position() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "kernel.rho = 1.5\nsolver.q = \n").unwrap();
    let o = svolterra(&cfg, &dir.path().join("o"), &["simulate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn blow_up_exits_with_numeric_code() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), &[("solver.drift_linear = 1.0", "solver.drift_linear = -60.0")]);
    let o = svolterra(&cfg, &dir.path().join("o"), &["simulate"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("blow-up"));
}

#[test]
fn verify_passes_on_a_small_config() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), &[]);
    let out = dir.path().join("o");
    let o = svolterra(&cfg, &out, &["verify"]);
    assert_eq!(o.status.code(), Some(0), "{}\n{}", String::from_utf8_lossy(&o.stdout), stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("verify/verify.json")).unwrap()).unwrap();
    assert_eq!(v["passed"], true);
}

#[test]
fn missing_config_file_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let o = svolterra(&dir.path().join("nope.toml"), &dir.path().join("o"), &["simulate"]);
    assert_eq!(o.status.code(), Some(2));
}
