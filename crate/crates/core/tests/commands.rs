use std::fs;
use std::path::Path;

use gk_hydro::harness::{run, Command, ExperimentConfig, RunManifest};
use gk_hydro::Error;
use sha2::{Digest, Sha256};

fn config(text: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml(text).unwrap()
}

fn check_artifacts(dir: &Path, m: &RunManifest) {
    assert!(m.artifacts.iter().any(|a| a.path == "report.txt"));
    for a in &m.artifacts {
        let data = fs::read(dir.join(&a.path)).unwrap_or_else(|e| panic!("{}: {e}", a.path));
        assert_eq!(data.len() as u64, a.bytes, "{}", a.path);
        let digest: String = Sha256::digest(&data).iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(digest, a.sha256, "{}", a.path);
    }
    let on_disk: RunManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(&on_disk, m);
}

fn without_clock(mut m: RunManifest) -> RunManifest {
    m.wall_clock_seconds = 0.0;
    m
}

const D1: &str = r#"
seed = 7

[model]
dim = 1
preset = "bistable-ssep"
lambda = 1.0

[conductivity]
n = 1
nodes = 9

[cltvar]
ls = [2, 3]
gap_ls = [2, 3, 4]

[simulate]
n = 64
k = 2.0
horizon = 0.02
snapshots = 3
rho0 = "0.5 + 0.2*sin(2*pi*x)"
observables = ["1", "sin(2*pi*x)"]
write_configurations = true

[pde]
m = 64
k = 2.0
horizon = 0.02
snapshots = 3

[hydro]
ns = [32, 64]
k = 2.0
seeds = 2
horizon = 0.02
snapshots = 3
"#;

const D2: &str = r#"
seed = 3

[model]
dim = 2
preset = "bistable-ssep"
lambda = 4.0

[interface]
m = 48
ks = [8.0]
horizon = 0.004
snapshots = 3
vertices = 128
angles = 16

[pipeline]
ns = [48]
k = 4.0
seeds = 1
horizon = 0.01
snapshots = 2
block = 3
vertices = 128
angles = 16
rho0 = "0.5 + 0.25*tanh((0.3 - sqrt((x-0.5)^2 + (y-0.5)^2))/0.05)"
"#;

#[test]
fn every_command_writes_a_consistent_manifest() {
    let d1 = config(D1);
    let d2 = config(D2);
    for command in Command::ALL {
        let cfg = if matches!(command, Command::Interface | Command::InterfacePipeline) { &d2 } else { &d1 };
        let dir = tempfile::tempdir().unwrap();
        let m = run(command, cfg, Some(dir.path())).unwrap_or_else(|e| panic!("{}: {e}", command.name()));
        assert_eq!(m.command, command.name());
        assert_eq!(m.config_hash, cfg.hash());
        check_artifacts(dir.path(), &m);
    }
}

#[test]
fn expected_files_per_command() {
    let cfg = config(D1);
    let expect = [
        (Command::Rates, vec!["reaction.csv", "rates.json"]),
        (Command::Conductivity, vec!["d_table.json", "conductivity.csv"]),
        (Command::Cltvar, vec!["decay.csv", "sectors.csv", "gap.csv"]),
        (
            Command::Simulate,
            vec!["observables.csv", "final_block_profile.csv", "configurations/snap_0000.bin", "configurations/snap_0002.bin.json"],
        ),
        (Command::Pde, vec!["observables.csv", "monitor.json", "fields/field_0001.bin", "fields/field_0001.bin.json"]),
        (Command::HydroCompare, vec!["discrepancy.csv", "summary.csv"]),
    ];
    for (command, files) in expect {
        let dir = tempfile::tempdir().unwrap();
        let m = run(command, &cfg, Some(dir.path())).unwrap();
        let names: Vec<&str> = m.artifacts.iter().map(|a| a.path.as_str()).collect();
        for f in files {
            assert!(names.contains(&f), "{}: {f} not in {names:?}", command.name());
        }
    }
}

#[test]
fn runs_are_reproducible() {
    let cfg = config(D1);
    for command in [Command::Simulate, Command::HydroCompare, Command::Cltvar] {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ma = without_clock(run(command, &cfg, Some(a.path())).unwrap());
        let mb = without_clock(run(command, &cfg, Some(b.path())).unwrap());
        assert_eq!(ma, mb, "{}", command.name());
        assert_eq!(fs::read(a.path().join("report.txt")).unwrap(), fs::read(b.path().join("report.txt")).unwrap());
    }
}

#[test]
fn seed_changes_particle_output_only() {
    let mut cfg = config(D1);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = run(Command::Simulate, &cfg, Some(a.path())).unwrap();
    cfg.seed += 1;
    let mb = run(Command::Simulate, &cfg, Some(b.path())).unwrap();
    assert_ne!(ma.config_hash, mb.config_hash);
    assert_ne!(fs::read(a.path().join("observables.csv")).unwrap(), fs::read(b.path().join("observables.csv")).unwrap());
    let (pa, pb) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run(Command::Pde, &cfg, Some(pa.path())).unwrap();
    cfg.seed += 1;
    run(Command::Pde, &cfg, Some(pb.path())).unwrap();
    assert_eq!(fs::read(pa.path().join("observables.csv")).unwrap(), fs::read(pb.path().join("observables.csv")).unwrap());
}

#[test]
fn invalid_configs_are_rejected_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let bad_block = config("[model]\ndim = 1\n[simulate]\nn = 8\nblock = 4\n");
    let e = run(Command::Simulate, &bad_block, Some(&out)).unwrap_err();
    assert!(matches!(e, Error::Config(_)), "{e}");
    assert_eq!(e.exit_code(), 2);
    let wrong_dim = config(D1);
    assert_eq!(run(Command::InterfacePipeline, &wrong_dim, Some(&out)).unwrap_err().exit_code(), 2);
    assert!(!out.exists());
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            for command in Command::ALL {
                let interface = matches!(command, Command::Interface | Command::InterfacePipeline);
                if interface == (cfg.dim() == 2) {
                    cfg.validate(command).unwrap_or_else(|e| panic!("{} {}: {e}", path.display(), command.name()));
                }
            }
            seen += 1;
        }
    }
    assert!(seen >= 4);
}
