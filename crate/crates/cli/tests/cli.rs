use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gk-hydro")).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

const SSEP_PDE: &str = r#"
[model]
dim = 1
preset = "bistable-ssep"
lambda = 1.0

[pde]
m = 64
k = 4.0
horizon = 0.01
snapshots = 3
"#;

#[test]
fn pde_run_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.toml", SSEP_PDE);
    let out = dir.path().join("out");
    let o = gk(&["pde", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.starts_with("command: pde"));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "pde");
    let paths: Vec<&str> = manifest["artifacts"].as_array().unwrap().iter().map(|a| a["path"].as_str().unwrap()).collect();
    for name in ["observables.csv", "monitor.json", "report.txt"] {
        assert!(paths.contains(&name), "{name} missing from {paths:?}");
    }
    assert_eq!(fs::read_to_string(out.join("report.txt")).unwrap(), stdout);
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "sim.toml",
        "seed = 3\n[model]\ndim = 1\n[simulate]\nn = 32\nhorizon = 0.01\nsnapshots = 2\n",
    );
    let out = dir.path().join("o");
    let o = gk(&["simulate", "--config", &cfg, "--seed", "11", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"][0][0], 11);
}

#[test]
fn validation_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = write(dir.path(), "a.toml", "[model]\ndim = 1\nbogus = 3\n");
    let bad_k = write(dir.path(), "b.toml", "[model]\ndim = 1\n[pde]\nk = 0.5\n");
    let bad_expr = write(dir.path(), "c.toml", "[model]\ndim = 1\n[simulate]\nrho0 = \"0.5 + y\"\n");
    let wrong_dim = write(dir.path(), "d.toml", "[model]\ndim = 1\n");
    let out = dir.path().join("o");
    for (cmd, cfg) in [("rates", &unknown), ("pde", &bad_k), ("simulate", &bad_expr), ("interface", &wrong_dim)] {
        let o = gk(&[cmd, "--config", cfg, "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let o = gk(&["rates", "--config", dir.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn cfl_violation_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "cfl.toml", "[model]\ndim = 1\n[pde]\nm = 128\ndt = 1e-3\n");
    let o = gk(&["pde", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn unknown_subcommand_rejected() {
    let o = gk(&["bogus", "--config", "x.toml"]);
    assert!(!o.status.success());
}
