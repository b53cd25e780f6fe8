//! Experiment configuration, the command pipelines, run manifests and reports.
//!
//! A run reads one TOML file (schema in the README), writes tidy CSV/JSON into
//! its output directory and finishes with `report.txt` and `manifest.json`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::cltvar::{gap_sweep, variance_decay_sweep, Boundary};
use crate::conductivity::{tabulate_d, DiffusionTable, VariationalProblem};
use crate::error::{stage, Error, Result};
use crate::expr::Expr;
use crate::interface::{extract_level_set, sharp_vs_diffuse, write_fronts_csv, FrontCurve, Mobility, MobilityTensor};
use crate::kmc::{csv_err, run_schedule, SimulationState};
use crate::lattice::{write_snapshot, Torus};
use crate::localfn::VectorLocalFunction;
use crate::measures::ensemble_average;
use crate::pde::{discrepancy, DensityField, PdeProblem};
use crate::rates::{classify_reaction, interior_roots, RateModel, RateModelSpec};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Flip-rate scale: a fixed value, or the guideline `K = δ log N`.
#[derive(Clone, Copy, Debug, Deserialize, Serialize, PartialEq)]
#[serde(untagged)]
pub enum KRule {
    Fixed(f64),
    Delta { delta: f64 },
}

impl KRule {
    pub fn at(&self, n: usize) -> f64 {
        match *self {
            KRule::Fixed(k) => k,
            KRule::Delta { delta } => delta * (n as f64).ln(),
        }
    }
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub seed: u64,
    pub model: RateModelSpec,
    #[serde(default)]
    pub conductivity: ConductivitySection,
    #[serde(default)]
    pub rates: RatesSection,
    #[serde(default)]
    pub cltvar: CltvarSection,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub pde: PdeSection,
    #[serde(default)]
    pub interface: InterfaceSection,
    #[serde(default)]
    pub hydro: HydroSection,
    #[serde(default)]
    pub pipeline: PipelineSection,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ConductivitySection {
    /// Corrector box radius.
    pub n: usize,
    /// Interior density nodes of the `D` table.
    pub nodes: usize,
    /// `"chebyshev"` or `"uniform"`.
    pub grid: String,
    /// Precomputed table (JSON written by `conductivity`), used instead of solving.
    pub table: Option<PathBuf>,
}

impl Default for ConductivitySection {
    fn default() -> Self {
        ConductivitySection { n: 1, nodes: 17, grid: "chebyshev".into(), table: None }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RatesSection {
    /// Number of equispaced densities in `[0,1]` for `reaction.csv`.
    pub samples: usize,
    /// Classify the reaction (needs `D`) when it has three interior roots.
    pub classify: bool,
}

impl Default for RatesSection {
    fn default() -> Self {
        RatesSection { samples: 101, classify: true }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct CltvarSection {
    pub ls: Vec<usize>,
    pub gap_ls: Vec<usize>,
    /// Direction `θ`; `e_1` when absent.
    pub theta: Option<Vec<f64>>,
    /// `"zero"` or `"optimal"` (the minimizer at `corrector_rho`).
    pub corrector: String,
    pub corrector_rho: f64,
    /// Seed of the eight random boundary fills.
    pub fill_seed: u64,
}

impl Default for CltvarSection {
    fn default() -> Self {
        CltvarSection {
            ls: vec![2, 3, 4],
            gap_ls: vec![2, 3, 4, 5],
            theta: None,
            corrector: "zero".into(),
            corrector_rho: 0.5,
            fill_seed: 0,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub n: usize,
    pub k: KRule,
    pub horizon: f64,
    pub snapshots: usize,
    pub times: Option<Vec<f64>>,
    pub rho0: String,
    pub observables: Vec<String>,
    pub block: usize,
    pub write_configurations: bool,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection {
            n: 64,
            k: KRule::Fixed(1.0),
            horizon: 0.1,
            snapshots: 11,
            times: None,
            rho0: "0.5".into(),
            observables: vec!["1".into()],
            block: 2,
            write_configurations: false,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PdeSection {
    pub m: usize,
    pub k: f64,
    pub horizon: f64,
    pub snapshots: usize,
    pub times: Option<Vec<f64>>,
    pub rho0: String,
    /// Time step; half the stability bound when absent.
    pub dt: Option<f64>,
    pub observables: Vec<String>,
    pub write_fields: bool,
}

impl Default for PdeSection {
    fn default() -> Self {
        PdeSection {
            m: 256,
            k: 1.0,
            horizon: 0.1,
            snapshots: 11,
            times: None,
            rho0: "0.5 + 0.3*sin(2*pi*x)".into(),
            dt: None,
            observables: vec!["1".into()],
            write_fields: true,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct InterfaceSection {
    pub m: usize,
    pub ks: Vec<f64>,
    pub horizon: f64,
    pub snapshots: usize,
    pub times: Option<Vec<f64>>,
    pub rho0: String,
    pub vertices: usize,
    /// Angles on `[0, π)` at which `μ` is tabulated.
    pub angles: usize,
}

impl Default for InterfaceSection {
    fn default() -> Self {
        InterfaceSection {
            m: 128,
            ks: vec![16.0, 64.0],
            horizon: 0.01,
            snapshots: 5,
            times: None,
            rho0: DISC.into(),
            vertices: 512,
            angles: 64,
        }
    }
}

const DISC: &str = "0.5 + 0.2*tanh((0.3 - sqrt((x-0.5)^2 + (y-0.5)^2))/0.03)";

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct HydroSection {
    pub ns: Vec<usize>,
    pub k: KRule,
    pub seeds: usize,
    pub horizon: f64,
    pub snapshots: usize,
    pub times: Option<Vec<f64>>,
    pub rho0: String,
    pub observables: Vec<String>,
    pub block: usize,
    /// PDE cells per lattice site along each axis.
    pub refine: usize,
}

impl Default for HydroSection {
    fn default() -> Self {
        HydroSection {
            ns: vec![64],
            k: KRule::Fixed(1.0),
            seeds: 4,
            horizon: 0.1,
            snapshots: 11,
            times: None,
            rho0: "0.5 + 0.3*sin(2*pi*x)".into(),
            observables: vec!["1".into(), "sin(2*pi*x)".into(), "cos(2*pi*x)".into()],
            block: 1,
            refine: 1,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    pub ns: Vec<usize>,
    pub k: KRule,
    pub seeds: usize,
    /// First comparison time; the generation time `t_K` when absent.
    pub start: Option<f64>,
    pub horizon: f64,
    pub snapshots: usize,
    pub times: Option<Vec<f64>>,
    pub rho0: String,
    pub observables: Vec<String>,
    pub block: usize,
    pub vertices: usize,
    pub angles: usize,
}

impl Default for PipelineSection {
    fn default() -> Self {
        PipelineSection {
            ns: vec![128],
            k: KRule::Fixed(8.0),
            seeds: 1,
            start: None,
            horizon: 0.02,
            snapshots: 5,
            times: None,
            rho0: DISC.into(),
            observables: vec!["1".into(), "sin(2*pi*x)".into()],
            block: 4,
            vertices: 512,
            angles: 64,
        }
    }
}

/// The eight commands.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Rates,
    Conductivity,
    Cltvar,
    Simulate,
    Pde,
    Interface,
    HydroCompare,
    InterfacePipeline,
}

impl Command {
    pub const ALL: [Command; 8] = [
        Command::Rates,
        Command::Conductivity,
        Command::Cltvar,
        Command::Simulate,
        Command::Pde,
        Command::Interface,
        Command::HydroCompare,
        Command::InterfacePipeline,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Command::Rates => "rates",
            Command::Conductivity => "conductivity",
            Command::Cltvar => "cltvar",
            Command::Simulate => "simulate",
            Command::Pde => "pde",
            Command::Interface => "interface",
            Command::HydroCompare => "hydro-compare",
            Command::InterfacePipeline => "interface-pipeline",
        }
    }
}

impl FromStr for Command {
    type Err = Error;
    fn from_str(s: &str) -> Result<Command> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown command {s:?}")))
    }
}

fn schedule(start: f64, horizon: f64, snapshots: usize, times: &Option<Vec<f64>>) -> Result<Vec<f64>> {
    if let Some(t) = times {
        if t.is_empty() || t.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || t.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config("times must be a nonempty sorted list of nonnegative numbers".into()));
        }
        return Ok(t.clone());
    }
    if !(horizon > 0.0 && horizon.is_finite()) || snapshots == 0 || start < 0.0 || start > horizon {
        return Err(Error::Config(format!(
            "schedule needs 0 ≤ start ≤ horizon, horizon > 0 and snapshots ≥ 1 (got {start}, {horizon}, {snapshots})"
        )));
    }
    if snapshots == 1 {
        return Ok(vec![horizon]);
    }
    Ok((0..snapshots).map(|j| start + (horizon - start) * j as f64 / (snapshots - 1) as f64).collect())
}

fn parse_all(srcs: &[String], d: usize) -> Result<Vec<Expr>> {
    srcs.iter().map(|s| Expr::parse(s, d)).collect()
}

fn check_k(k: f64, what: &str) -> Result<()> {
    if !(k >= 1.0 && k.is_finite()) {
        return Err(Error::Config(format!("{what}: K = {k} must satisfy K ≥ 1")));
    }
    Ok(())
}

fn check_block(n: usize, l: usize) -> Result<()> {
    if 2 * l + 1 >= n {
        return Err(Error::Config(format!("block radius {l} needs 2l+1 < N = {n}")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<ExperimentConfig> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parse a file; relative paths inside are resolved against its directory.
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = ExperimentConfig::from_toml(&text)?;
        if let (Some(t), Some(dir)) = (&cfg.conductivity.table, path.parent()) {
            if t.is_relative() {
                cfg.conductivity.table = Some(dir.join(t));
            }
        }
        Ok(cfg)
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = PathBuf::new();
        hex(&Sha256::digest(serde_json::to_vec(&c).expect("config serializes")))
    }

    pub fn dim(&self) -> usize {
        self.model.dim
    }

    /// Checks the parts of the configuration that `command` reads.
    pub fn validate(&self, command: Command) -> Result<()> {
        let model = self.model.build()?;
        let d = model.dim;
        if let Some(t) = &self.conductivity.table {
            if !t.exists() {
                return Err(Error::Config(format!("diffusion table {} does not exist", t.display())));
            }
        }
        if !["chebyshev", "uniform"].contains(&self.conductivity.grid.as_str()) || self.conductivity.nodes < 3 {
            return Err(Error::Config("conductivity grid must be chebyshev or uniform with ≥ 3 nodes".into()));
        }
        match command {
            Command::Rates => {
                if self.rates.samples < 2 {
                    return Err(Error::Config("rates.samples must be ≥ 2".into()));
                }
            }
            Command::Conductivity => {}
            Command::Cltvar => {
                let c = &self.cltvar;
                if c.ls.is_empty() || !["zero", "optimal"].contains(&c.corrector.as_str()) {
                    return Err(Error::Config("cltvar needs ls and corrector = zero | optimal".into()));
                }
                if c.theta.as_ref().is_some_and(|t| t.len() != d) {
                    return Err(Error::Config(format!("cltvar.theta must have {d} entries")));
                }
            }
            Command::Simulate => {
                let s = &self.simulate;
                check_k(s.k.at(s.n), "simulate")?;
                check_block(s.n, s.block)?;
                schedule(0.0, s.horizon, s.snapshots, &s.times)?;
                Expr::parse(&s.rho0, d)?;
                parse_all(&s.observables, d)?;
            }
            Command::Pde => {
                let p = &self.pde;
                check_k(p.k, "pde")?;
                schedule(0.0, p.horizon, p.snapshots, &p.times)?;
                Expr::parse(&p.rho0, d)?;
                parse_all(&p.observables, d)?;
            }
            Command::Interface => {
                let i = &self.interface;
                if d != 2 {
                    return Err(Error::Config("interface runs in d = 2".into()));
                }
                for &k in &i.ks {
                    check_k(k, "interface")?;
                }
                schedule(0.0, i.horizon, i.snapshots, &i.times)?;
                Expr::parse(&i.rho0, d)?;
            }
            Command::HydroCompare => {
                let h = &self.hydro;
                if h.ns.is_empty() || h.seeds == 0 || h.refine == 0 {
                    return Err(Error::Config("hydro needs ns, seeds ≥ 1 and refine ≥ 1".into()));
                }
                for &n in &h.ns {
                    check_k(h.k.at(n), "hydro")?;
                    check_block(n, h.block)?;
                }
                schedule(0.0, h.horizon, h.snapshots, &h.times)?;
                Expr::parse(&h.rho0, d)?;
                parse_all(&h.observables, d)?;
            }
            Command::InterfacePipeline => {
                let p = &self.pipeline;
                if d != 2 {
                    return Err(Error::Config("interface-pipeline runs in d = 2".into()));
                }
                if p.ns.is_empty() || p.seeds == 0 {
                    return Err(Error::Config("pipeline needs ns and seeds ≥ 1".into()));
                }
                for &n in &p.ns {
                    check_k(p.k.at(n), "pipeline")?;
                    check_block(n, p.block)?;
                }
                schedule(p.start.unwrap_or(0.0), p.horizon, p.snapshots, &p.times)?;
                Expr::parse(&p.rho0, d)?;
                parse_all(&p.observables, d)?;
            }
        }
        Ok(())
    }

    /// `D` from the configured table file, or solved from the model.
    pub fn diffusion_table(&self, model: &RateModel) -> Result<DiffusionTable> {
        if let Some(path) = &self.conductivity.table {
            return load_table(path, model.dim);
        }
        let c = &self.conductivity;
        let grid = match c.grid.as_str() {
            "uniform" => DiffusionTable::uniform_grid(c.nodes + 1),
            _ => DiffusionTable::chebyshev_grid(c.nodes + 1),
        };
        tabulate_d(model, c.n, &grid)
    }
}

pub fn load_table(path: &Path, dim: usize) -> Result<DiffusionTable> {
    let mut t: DiffusionTable = serde_json::from_str(&fs::read_to_string(path)?)?;
    if t.dim != dim || t.rho.len() < 2 || t.rho.len() != t.values.len() || t.values.iter().any(|v| v.len() != dim * dim) {
        return Err(Error::Config(format!("diffusion table {} does not match d = {dim}", path.display())));
    }
    t.rebuild_slopes();
    Ok(t)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
pub struct Artifact {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub code_version: String,
    /// `(seed, stream)` of every particle run.
    pub seeds: Vec<(u64, u64)>,
    pub artifacts: Vec<Artifact>,
    pub metrics: Value,
    pub wall_clock_seconds: f64,
}

/// Output directory bookkeeping for one run.
pub struct RunContext {
    pub dir: PathBuf,
    artifacts: Vec<Artifact>,
    seeds: Vec<(u64, u64)>,
    started: Instant,
}

impl RunContext {
    pub fn new(dir: &Path) -> Result<RunContext> {
        fs::create_dir_all(dir)?;
        Ok(RunContext { dir: dir.to_path_buf(), artifacts: vec![], seeds: vec![], started: Instant::now() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Record a file already written under the run directory.
    pub fn record(&mut self, name: &str) -> Result<()> {
        let data = fs::read(self.path(name))?;
        self.artifacts.push(Artifact { path: name.into(), bytes: data.len() as u64, sha256: hex(&Sha256::digest(&data)) });
        Ok(())
    }

    pub fn write_bytes(&mut self, name: &str, data: &[u8]) -> Result<()> {
        if let Some(parent) = self.path(name).parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(self.path(name), data)?;
        self.record(name)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write_bytes(name, s.as_bytes())
    }

    /// Write a CSV with `header` and pre-formatted rows.
    pub fn write_csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let mut w = csv::Writer::from_writer(vec![]);
        w.write_record(header).map_err(csv_err)?;
        for r in rows {
            w.write_record(r).map_err(csv_err)?;
        }
        let data = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        self.write_bytes(name, &data)
    }

    pub fn add_seed(&mut self, seed: u64, stream: u64) {
        if !self.seeds.contains(&(seed, stream)) {
            self.seeds.push((seed, stream));
        }
    }

    /// Write `report.txt` and `manifest.json`.
    pub fn finish(mut self, command: Command, cfg: &ExperimentConfig, metrics: Value) -> Result<RunManifest> {
        let mut manifest = RunManifest {
            command: command.name().into(),
            config_hash: cfg.hash(),
            code_version: CODE_VERSION.into(),
            seeds: self.seeds.clone(),
            artifacts: self.artifacts.clone(),
            metrics,
            wall_clock_seconds: 0.0,
        };
        let rep = report(&manifest);
        self.write_bytes("report.txt", rep.text.as_bytes())?;
        manifest.artifacts = self.artifacts.clone();
        manifest.wall_clock_seconds = self.started.elapsed().as_secs_f64();
        let mut s = serde_json::to_string_pretty(&manifest)?;
        s.push('\n');
        fs::write(self.path("manifest.json"), s)?;
        Ok(manifest)
    }
}

fn num(v: f64) -> String {
    format!("{v}")
}

/// Run `command`; artifacts go to `out` (or the configured output directory).
pub fn run(command: Command, cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RunManifest> {
    cfg.validate(command)?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output.clone());
    let mut ctx = RunContext::new(&dir)?;
    let metrics = match command {
        Command::Rates => run_rates(cfg, &mut ctx),
        Command::Conductivity => run_conductivity(cfg, &mut ctx),
        Command::Cltvar => run_cltvar(cfg, &mut ctx),
        Command::Simulate => run_simulate(cfg, &mut ctx),
        Command::Pde => run_pde(cfg, &mut ctx),
        Command::Interface => run_interface(cfg, &mut ctx),
        Command::HydroCompare => run_hydro_comparison(cfg, &mut ctx).map(|r| serde_json::to_value(r).unwrap()),
        Command::InterfacePipeline => run_interface_pipeline(cfg, &mut ctx).map(|r| serde_json::to_value(r).unwrap()),
    }?;
    ctx.finish(command, cfg, metrics)
}

fn run_rates(cfg: &ExperimentConfig, ctx: &mut RunContext) -> Result<Value> {
    let model = cfg.model.build().map_err(stage("rates"))?;
    let bounds = model.validate()?;
    let f = model.reaction_term();
    let plus = crate::measures::ensemble_average_polynomial(&model.flip_plus);
    let minus = crate::measures::ensemble_average_polynomial(&model.flip_minus);
    let s = cfg.rates.samples;
    let rows: Vec<Vec<String>> = (0..s)
        .map(|k| {
            let r = k as f64 / (s - 1) as f64;
            vec![num(r), num(f.eval(r)), num(plus.eval(r)), num(minus.eval(r))]
        })
        .collect();
    ctx.write_csv("reaction.csv", &["rho", "f", "c_plus_mean", "c_minus_mean"], &rows)?;
    let roots = interior_roots(&f);
    let mut metrics = json!({
        "dim": model.dim,
        "radius": model.radius(),
        "c_min": bounds.c_min,
        "c_max": bounds.c_max,
        "flips_active": model.flips_active(),
        "reaction_coefficients": f.coeffs.clone(),
        "interior_roots": roots,
        "check_ensemble_average_at_half": ensemble_average(&model.flip_plus, 0.5) - plus.eval(0.5),
    });
    if cfg.rates.classify && roots.len() == 3 {
        let table = cfg.diffusion_table(&model).map_err(stage("conductivity"))?;
        let class = classify_reaction(&f, |r| table.eval(r), &table.rho).map_err(stage("classify"))?;
        metrics["classification"] = serde_json::to_value(&class)?;
    }
    ctx.write_json("rates.json", &metrics)?;
    Ok(metrics)
}

fn table_rows(table: &DiffusionTable) -> (Vec<String>, Vec<Vec<String>>) {
    let d = table.dim;
    let mut header = vec!["rho".to_string()];
    for i in 0..d {
        for j in 0..d {
            header.push(format!("d{}{}", i + 1, j + 1));
        }
    }
    header.extend(["eig_min".to_string(), "eig_max".to_string()]);
    let rows = table
        .rho
        .iter()
        .zip(&table.values)
        .map(|(r, v)| {
            let e = DMatrix::from_row_slice(d, d, v).symmetric_eigen().eigenvalues;
            let mut row = vec![num(*r)];
            row.extend(v.iter().map(|x| num(*x)));
            row.push(num(e.min()));
            row.push(num(e.max()));
            row
        })
        .collect();
    (header, rows)
}

fn run_conductivity(cfg: &ExperimentConfig, ctx: &mut RunContext) -> Result<Value> {
    let model = cfg.model.build()?;
    let bounds = model.validate()?;
    let table = cfg.diffusion_table(&model).map_err(stage("conductivity"))?;
    ctx.write_json("d_table.json", &table)?;
    let (header, rows) = table_rows(&table);
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    ctx.write_csv("conductivity.csv", &h, &rows)?;
    let (lo, hi) = table.eigenvalue_range(200);
    Ok(json!({
        "n": cfg.conductivity.n,
        "nodes": table.rho.len(),
        "eig_min": lo,
        "eig_max": hi,
        "c_min": bounds.c_min,
        "c_max": bounds.c_max,
        "max_off_diagonal": table.max_off_diagonal(),
    }))
}

fn run_cltvar(cfg: &ExperimentConfig, ctx: &mut RunContext) -> Result<Value> {
    let model = cfg.model.build()?;
    let d = model.dim;
    let c = &cfg.cltvar;
    let problem = VariationalProblem::new(&model, cfg.conductivity.n).map_err(stage("conductivity"))?;
    let f = if c.corrector == "optimal" {
        let res = problem.minimize(c.corrector_rho)?;
        problem.basis.corrector(&res.f_opt)?
    } else {
        VectorLocalFunction::zero(d)
    };
    let theta = c.theta.clone().unwrap_or_else(|| (0..d).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect());
    let reference = |r: f64| problem.minimize(r).map(|x| x.c_hat).unwrap_or_else(|_| DMatrix::zeros(d, d));
    let sweep = variance_decay_sweep(&model, &f, &c.ls, &theta, &Boundary::samples(c.fill_seed), &reference)
        .map_err(stage("cltvar"))?;
    let rows: Vec<Vec<String>> =
        sweep.rows.iter().map(|r| vec![r.d.to_string(), r.l.to_string(), r.sectors.to_string(), num(r.q4), num(r.q5), num(r.q6)]).collect();
    ctx.write_csv("decay.csv", &["d", "l", "sectors", "q4", "q5", "q6"], &rows)?;
    let recs: Vec<Vec<String>> = sweep
        .records
        .iter()
        .map(|r| {
            vec![r.d.to_string(), r.l.to_string(), r.m.to_string(), r.zeta.clone(), r.quantity.into(), num(r.value), num(r.target), num(r.gap)]
        })
        .collect();
    ctx.write_csv("sectors.csv", &["d", "l", "m", "boundary", "quantity", "value", "target", "gap"], &recs)?;
    let mut metrics = json!({
        "corrector": c.corrector,
        "q4_exponent": sweep.q4_exponent,
        "q5_exponent": sweep.q5_exponent,
        "q6_exponent": sweep.q6_exponent,
        "rows": sweep.rows,
    });
    if !c.gap_ls.is_empty() {
        let g = gap_sweep(&model, &c.gap_ls, Boundary::Empty).map_err(stage("spectral gap"))?;
        let rows: Vec<Vec<String>> = g.ls.iter().zip(&g.gaps).map(|(l, v)| vec![l.to_string(), num(*v)]).collect();
        ctx.write_csv("gap.csv", &["l", "gap"], &rows)?;
        metrics["gap_slope_vs_side"] = json!(g.slope_vs_side);
        metrics["gap_c0"] = json!(g.c0);
    }
    Ok(metrics)
}

fn run_simulate(cfg: &ExperimentConfig, ctx: &mut RunContext) -> Result<Value> {
    let model = cfg.model.build()?;
    let s = &cfg.simulate;
    let d = model.dim;
    let torus = Torus::new(d, s.n)?;
    let k = s.k.at(s.n);
    let rho0 = Expr::parse(&s.rho0, d)?;
    let obs = parse_all(&s.observables, d)?;
    let times = schedule(0.0, s.horizon, s.snapshots, &s.times)?;
    let mut state = SimulationState::init(&model, torus, |v| rho0.eval(v), k, cfg.seed, 0).map_err(stage("init"))?;
    ctx.add_seed(cfg.seed, 0);
    let closures: Vec<Box<dyn Fn(&[f64]) -> f64 + Sync>> =
        obs.iter().map(|e| Box::new(move |v: &[f64]| e.eval(v)) as Box<dyn Fn(&[f64]) -> f64 + Sync>).collect();
    let named: Vec<(String, &(dyn Fn(&[f64]) -> f64 + Sync))> =
        s.observables.iter().cloned().zip(closures.iter().map(|b| b.as_ref())).collect();
    let mut snaps = vec![];
    let series = run_schedule(&mut state, &times, &named, |st| {
        if s.write_configurations {
            snaps.push((st.t, st.cfg.clone()));
        }
        Ok(())
    })
    .map_err(stage("simulate"))?;
    let mut buf = vec![];
    series.write_csv(&mut buf)?;
    ctx.write_bytes("observables.csv", &buf)?;
    for (j, (t, c)) in snaps.iter().enumerate() {
        let name = format!("configurations/snap_{j:04}.bin");
        fs::create_dir_all(ctx.path("configurations"))?;
        write_snapshot(&ctx.path(&name), c, *t, Some(cfg.seed))?;
        ctx.record(&name)?;
        let side = crate::lattice::sidecar_path(Path::new(&name));
        ctx.record(&side.to_string_lossy())?;
    }
    let blocks = state.cfg.block_averages(s.block)?;
    let rows: Vec<Vec<String>> = (0..torus.volume())
        .map(|x| {
            let mut r: Vec<String> = torus.coords(x).iter().map(|c| c.to_string()).collect();
            r.push(num(blocks[x]));
            r
        })
        .collect();
    let mut header: Vec<&str> = ["x1", "x2", "x3", "x4"][..d].to_vec();
    header.push("block_density");
    ctx.write_csv("final_block_profile.csv", &header, &rows)?;
    Ok(json!({
        "n": s.n,
        "k": k,
        "t": state.t,
        "density": state.cfg.density(),
        "proposals": state.counts.proposals,
        "exchanges": state.counts.exchanges,
        "flips": state.counts.flips,
    }))
}

fn run_pde(cfg: &ExperimentConfig, ctx: &mut RunContext) -> Result<Value> {
    let model = cfg.model.build()?;
    let p = &cfg.pde;
    let d = model.dim;
    let f = model.reaction_term();
    let table = cfg.diffusion_table(&model).map_err(stage("conductivity"))?;
    let rho0 = Expr::parse(&p.rho0, d)?;
    let obs = parse_all(&p.observables, d)?;
    let times = schedule(0.0, p.horizon, p.snapshots, &p.times)?;
    let mut problem = PdeProblem::new(table, f, p.k, p.m, p.dt).map_err(stage("pde"))?;
    let init = problem.initial(|v| rho0.eval(v))?;
    let mass0 = init.mass();
    let (snaps, monitor) = problem.solve(init, &times).map_err(stage("pde"))?;
    let rows: Vec<Vec<String>> = snaps
        .iter()
        .map(|s| {
            let mut r = vec![num(s.t), num(s.min()), num(s.max())];
            r.extend(obs.iter().map(|e| num(s.pairing(|v| e.eval(v)))));
            r
        })
        .collect();
    let mut header = vec!["t".to_string(), "min".into(), "max".into()];
    header.extend(p.observables.iter().cloned());
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    ctx.write_csv("observables.csv", &h, &rows)?;
    if p.write_fields {
        fs::create_dir_all(ctx.path("fields"))?;
        for (j, s) in snaps.iter().enumerate() {
            let name = format!("fields/field_{j:04}.bin");
            s.write(&ctx.path(&name))?;
            ctx.record(&name)?;
            ctx.record(&crate::lattice::sidecar_path(Path::new(&name)).to_string_lossy())?;
        }
    }
    ctx.write_json("monitor.json", &monitor)?;
    if monitor.violated {
        return Err(Error::MonitorViolation { undershoot: monitor.max_undershoot, overshoot: monitor.max_overshoot });
    }
    let last = snaps.last().expect("nonempty schedule");
    Ok(json!({
        "m": p.m,
        "k": p.k,
        "dt": problem.dt,
        "cfl_bound": problem.cfl_bound,
        "steps": monitor.steps,
        "mass_drift": last.mass() - mass0,
        "max_undershoot": monitor.max_undershoot,
        "max_overshoot": monitor.max_overshoot,
    }))
}

fn mobility_rows(mu: &MobilityTensor) -> Vec<Vec<String>> {
    mu.angles
        .iter()
        .zip(&mu.values)
        .map(|(a, v)| vec![num(*a), num(v[0]), num(v[1]), num(v[2]), num(v[3])])
        .collect()
}

fn run_interface(cfg: &ExperimentConfig, ctx: &mut RunContext) -> Result<Value> {
    let model = cfg.model.build()?;
    let i = &cfg.interface;
    let table = cfg.diffusion_table(&model).map_err(stage("conductivity"))?;
    let mob = Mobility::new(table, model.reaction_term()).map_err(stage("mobility"))?;
    let mu = MobilityTensor::tabulate(&mob, i.angles).map_err(stage("mobility"))?;
    ctx.write_csv("mobility.csv", &["angle", "mu11", "mu12", "mu21", "mu22"], &mobility_rows(&mu))?;
    let rho0 = Expr::parse(&i.rho0, 2)?;
    let times = schedule(0.0, i.horizon, i.snapshots, &i.times)?;
    let times: Vec<f64> = times.into_iter().filter(|&t| t > 0.0).collect();
    let rows = sharp_vs_diffuse(&mob, &mu, i.m, &i.ks, &times, &|v| rho0.eval(v), i.vertices).map_err(stage("interface"))?;
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![num(r.k), num(r.t), num(r.hausdorff), num(r.hausdorff_cells), num(r.layer_width), num(r.pde_radius), num(r.sharp_radius)]
        })
        .collect();
    ctx.write_csv(
        "sharp_vs_diffuse.csv",
        &["k", "t", "hausdorff", "hausdorff_cells", "layer_width", "pde_radius", "sharp_radius"],
        &csv_rows,
    )?;
    Ok(json!({
        "rho_minus": mob.rho_minus,
        "rho_star": mob.rho_star,
        "rho_plus": mob.rho_plus,
        "tangential_mobility_min": mu.tangential_minimum(),
        "rows": rows,
    }))
}

/// Per `(N, observable)` summary of the hydrodynamic comparison.
#[derive(Clone, Debug, Serialize)]
pub struct HydroSummary {
    pub n: usize,
    pub k: f64,
    pub observable: String,
    /// `max_t mean_seeds |⟨ρ^N(t),φ⟩ − ⟨ρ_K(t),φ⟩|`.
    pub max_mean_gap: f64,
    /// `mean_seeds max_t |…|`.
    pub mean_max_gap: f64,
    pub max_mean_l2: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct HydroReport {
    pub summaries: Vec<HydroSummary>,
    /// Log-log slope of `max_mean_gap` in `N`, per observable.
    pub n_slopes: BTreeMap<String, f64>,
    /// Whether `max_mean_gap` decreases strictly along `ns`, per observable.
    pub decreasing: BTreeMap<String, bool>,
    pub monitor_max_violation: f64,
}

/// Particles against the PDE with the computed `D` and `f`, over `ns` and seeds.
pub fn run_hydro_comparison(cfg: &ExperimentConfig, ctx: &mut RunContext) -> Result<HydroReport> {
    let model = cfg.model.build().map_err(stage("model"))?;
    let h = &cfg.hydro;
    let d = model.dim;
    let f = model.reaction_term();
    let table = cfg.diffusion_table(&model).map_err(stage("conductivity"))?;
    let rho0 = Expr::parse(&h.rho0, d)?;
    let obs = parse_all(&h.observables, d)?;
    let times = schedule(0.0, h.horizon, h.snapshots, &h.times)?;
    let mut rows = vec![];
    let mut summaries = vec![];
    let mut monitor_max: f64 = 0.0;
    for &n in &h.ns {
        let k = h.k.at(n);
        let torus = Torus::new(d, n)?;
        let mut problem = PdeProblem::new(table.clone(), f.clone(), k, h.refine * n, None).map_err(stage("pde"))?;
        let init = problem.initial(|v| rho0.eval(v))?;
        let (snaps, monitor) = problem.solve(init, &times).map_err(stage("pde"))?;
        monitor_max = monitor_max.max(monitor.max_undershoot).max(monitor.max_overshoot);
        if monitor.violated {
            return Err(Error::MonitorViolation { undershoot: monitor.max_undershoot, overshoot: monitor.max_overshoot });
        }
        let per_seed: Vec<Vec<(Vec<f64>, f64)>> = (0..h.seeds as u64)
            .into_par_iter()
            .map(|s| {
                let mut state = SimulationState::init(&model, torus, |v| rho0.eval(v), k, cfg.seed, s)?;
                let phis: Vec<Box<dyn Fn(&[f64]) -> f64 + Sync>> =
                    obs.iter().map(|e| Box::new(move |v: &[f64]| e.eval(v)) as Box<dyn Fn(&[f64]) -> f64 + Sync>).collect();
                let refs: Vec<&(dyn Fn(&[f64]) -> f64 + Sync)> = phis.iter().map(|b| b.as_ref()).collect();
                times
                    .iter()
                    .zip(&snaps)
                    .map(|(&t, snap)| {
                        state.advance(t - state.t)?;
                        let dsc = discrepancy(snap, &state.cfg, h.block, &refs)?;
                        Ok((dsc.pairing_gaps, dsc.l2_gap))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()
            .map_err(stage("particles"))?;
        for (s, series) in per_seed.iter().enumerate() {
            for (j, (gaps, l2)) in series.iter().enumerate() {
                for (o, g) in gaps.iter().enumerate() {
                    rows.push(vec![n.to_string(), num(k), s.to_string(), num(times[j]), h.observables[o].clone(), num(*g), num(*l2)]);
                }
            }
        }
        let seeds = h.seeds as f64;
        let mean_l2 = (0..times.len()).map(|j| per_seed.iter().map(|s| s[j].1).sum::<f64>() / seeds).fold(0.0, f64::max);
        for (o, name) in h.observables.iter().enumerate() {
            let mean_at = |j: usize| per_seed.iter().map(|s| s[j].0[o]).sum::<f64>() / seeds;
            let max_mean = (0..times.len()).map(mean_at).fold(0.0, f64::max);
            let mean_max =
                per_seed.iter().map(|s| s.iter().map(|x| x.0[o]).fold(0.0, f64::max)).sum::<f64>() / seeds;
            summaries.push(HydroSummary {
                n,
                k,
                observable: name.clone(),
                max_mean_gap: max_mean,
                mean_max_gap: mean_max,
                max_mean_l2: mean_l2,
            });
        }
    }
    for s in 0..h.seeds as u64 {
        ctx.add_seed(cfg.seed, s);
    }
    ctx.write_csv("discrepancy.csv", &["n", "k", "seed", "t", "observable", "gap", "l2_gap"], &rows)?;
    let mut n_slopes = BTreeMap::new();
    let mut decreasing = BTreeMap::new();
    for name in &h.observables {
        let pts: Vec<&HydroSummary> = summaries.iter().filter(|s| &s.observable == name).collect();
        let xs: Vec<f64> = pts.iter().map(|s| s.n as f64).collect();
        let ys: Vec<f64> = pts.iter().map(|s| s.max_mean_gap).collect();
        if xs.len() >= 2 {
            n_slopes.insert(name.clone(), crate::conductivity::loglog_slope(&xs, &ys));
        }
        decreasing.insert(name.clone(), ys.windows(2).all(|w| w[1] < w[0]));
    }
    let summary_rows: Vec<Vec<String>> = summaries
        .iter()
        .map(|s| vec![s.n.to_string(), num(s.k), s.observable.clone(), num(s.max_mean_gap), num(s.mean_max_gap), num(s.max_mean_l2)])
        .collect();
    ctx.write_csv("summary.csv", &["n", "k", "observable", "max_mean_gap", "mean_max_gap", "max_mean_l2"], &summary_rows)?;
    Ok(HydroReport { summaries, n_slopes, decreasing, monitor_max_violation: monitor_max })
}

/// `t_K = log K / (2K f′(ρ_*))`.
pub fn generation_time(k: f64, f_prime_star: f64) -> f64 {
    k.ln() / (2.0 * k * f_prime_star)
}

#[derive(Clone, Debug, Serialize)]
pub struct PipelineRow {
    pub n: usize,
    pub k: f64,
    pub seed: u64,
    pub t: f64,
    pub hausdorff_cells: f64,
    pub pairing_gaps: Vec<f64>,
    pub particle_radius: f64,
    pub sharp_radius: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct PipelineSummary {
    pub n: usize,
    pub k: f64,
    pub t_k: f64,
    pub max_hausdorff_cells: f64,
    /// Per observable, `max_t mean_seeds` of the pairing gap.
    pub max_mean_pairing_gaps: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct PipelineReport {
    pub rho_minus: f64,
    pub rho_star: f64,
    pub rho_plus: f64,
    pub mobility_mean: f64,
    pub rows: Vec<PipelineRow>,
    pub summaries: Vec<PipelineSummary>,
}

/// Front of a particle configuration: the longest loop of the block-averaged
/// density at `level`, in macroscopic coordinates.
pub fn particle_front(cfg: &crate::lattice::Configuration, block: usize, level: f64, t: f64) -> Result<FrontCurve> {
    let torus = cfg.torus();
    let n = torus.side();
    let values = cfg.block_averages(block)?;
    let field = DensityField { d: 2, m: n, t, values };
    let mut front = extract_level_set(&field, level)?.swap_remove(0);
    // sites sit at x/N, cell centres at (x + ½)/N
    let shift = 0.5 / n as f64;
    for p in &mut front.points {
        p[0] -= shift;
        p[1] -= shift;
    }
    Ok(front)
}

/// Particle run, block profile and level set against the sharp flow from `Γ_0`.
pub fn run_interface_pipeline(cfg: &ExperimentConfig, ctx: &mut RunContext) -> Result<PipelineReport> {
    let model = cfg.model.build().map_err(stage("model"))?;
    let p = &cfg.pipeline;
    if model.dim != 2 {
        return Err(Error::Precondition("the interface pipeline runs in d = 2".into()));
    }
    let f = model.reaction_term();
    let table = cfg.diffusion_table(&model).map_err(stage("conductivity"))?;
    let mob = Mobility::new(table, f.clone()).map_err(stage("mobility"))?;
    let mu = MobilityTensor::tabulate(&mob, p.angles).map_err(stage("mobility"))?;
    ctx.write_csv("mobility.csv", &["angle", "mu11", "mu12", "mu21", "mu22"], &mobility_rows(&mu))?;
    let mobility_mean = mu.values.iter().map(|v| 0.5 * (v[0] + v[3])).sum::<f64>() / mu.values.len() as f64;
    let rho0 = Expr::parse(&p.rho0, 2)?;
    let obs = parse_all(&p.observables, 2)?;
    let fine = DensityField::from_fn(2, 4 * p.ns.iter().copied().max().unwrap_or(64).max(64), |v| rho0.eval(v))?;
    let gamma0 = extract_level_set(&fine, mob.rho_star).map_err(stage("initial front"))?.swap_remove(0).resample(p.vertices);
    let gamma0 = FrontCurve { t: 0.0, ..gamma0 };
    let fp = f.derivative().eval(mob.rho_star);
    let mut rows = vec![];
    let mut summaries = vec![];
    let mut fronts_out = vec![];
    for &n in &p.ns {
        let k = p.k.at(n);
        let t_k = generation_time(k, fp);
        let times = schedule(p.start.unwrap_or(t_k).min(p.horizon), p.horizon, p.snapshots, &p.times)?;
        let mut sharp = vec![];
        let mut cur = gamma0.clone();
        for &t in &times {
            cur = cur.evolve(&mu, t - cur.t).map_err(stage("sharp flow"))?;
            sharp.push(cur.clone());
        }
        let plus_pairings: Vec<Vec<f64>> = sharp
            .iter()
            .map(|g| {
                let xi = g.rasterize(2 * n, mob.rho_minus, mob.rho_plus, 3);
                obs.iter().map(|e| xi.pairing(|v| e.eval(v))).collect()
            })
            .collect();
        let torus = Torus::new(2, n)?;
        let per_seed: Vec<(Vec<PipelineRow>, Vec<FrontCurve>)> = (0..p.seeds as u64)
            .into_par_iter()
            .map(|s| {
                let mut state = SimulationState::init(&model, torus, |v| rho0.eval(v), k, cfg.seed, s)?;
                let mut out = vec![];
                let mut fronts = vec![];
                for (j, &t) in times.iter().enumerate() {
                    state.advance(t - state.t)?;
                    let front = particle_front(&state.cfg, p.block, mob.rho_star, t)?;
                    let gaps = obs
                        .iter()
                        .zip(&plus_pairings[j])
                        .map(|(e, xi)| (state.pairing(|v| e.eval(v)) - xi).abs())
                        .collect();
                    out.push(PipelineRow {
                        n,
                        k,
                        seed: s,
                        t,
                        hausdorff_cells: front.hausdorff(&sharp[j]) * n as f64,
                        pairing_gaps: gaps,
                        particle_radius: front.area_radius(),
                        sharp_radius: sharp[j].area_radius(),
                    });
                    fronts.push(front);
                }
                Ok((out, fronts))
            })
            .collect::<Result<_>>()
            .map_err(stage("particles"))?;
        let seeds = p.seeds as f64;
        let max_h = per_seed.iter().flat_map(|s| s.0.iter().map(|r| r.hausdorff_cells)).fold(0.0, f64::max);
        let gaps = (0..obs.len())
            .map(|o| {
                (0..times.len())
                    .map(|j| per_seed.iter().map(|s| s.0[j].pairing_gaps[o]).sum::<f64>() / seeds)
                    .fold(0.0, f64::max)
            })
            .collect();
        summaries.push(PipelineSummary { n, k, t_k, max_hausdorff_cells: max_h, max_mean_pairing_gaps: gaps });
        fronts_out.extend(sharp);
        if let Some(first) = per_seed.first() {
            fronts_out.extend(first.1.iter().cloned());
        }
        for (r, _) in per_seed {
            rows.extend(r);
        }
    }
    for s in 0..p.seeds as u64 {
        ctx.add_seed(cfg.seed, s);
    }
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut v = vec![r.n.to_string(), num(r.k), r.seed.to_string(), num(r.t), num(r.hausdorff_cells)];
            v.push(num(r.particle_radius));
            v.push(num(r.sharp_radius));
            v.extend(r.pairing_gaps.iter().map(|g| num(*g)));
            v
        })
        .collect();
    let mut header: Vec<String> =
        ["n", "k", "seed", "t", "hausdorff_cells", "particle_radius", "sharp_radius"].iter().map(|s| s.to_string()).collect();
    header.extend(p.observables.iter().map(|o| format!("gap[{o}]")));
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    ctx.write_csv("pipeline.csv", &h, &csv_rows)?;
    let mut buf = vec![];
    write_fronts_csv(&mut buf, &fronts_out)?;
    ctx.write_bytes("fronts.csv", &buf)?;
    Ok(PipelineReport {
        rho_minus: mob.rho_minus,
        rho_star: mob.rho_star,
        rho_plus: mob.rho_plus,
        mobility_mean,
        rows,
        summaries,
    })
}

/// Rendered report.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub text: String,
    pub json: Value,
}

fn fmt_value(v: &Value) -> String {
    match v {
        Value::Number(n) => match n.as_f64() {
            Some(x) if n.is_f64() => fmt_float(x),
            _ => n.to_string(),
        },
        Value::String(s) => s.clone(),
        Value::Null => "-".into(),
        Value::Bool(b) => b.to_string(),
        Value::Array(a) => format!("[{}]", a.iter().map(fmt_value).collect::<Vec<_>>().join(", ")),
        Value::Object(_) => v.to_string(),
    }
}

fn fmt_float(x: f64) -> String {
    if x == 0.0 {
        "0".into()
    } else if (1e-3..1e6).contains(&x.abs()) {
        let s = format!("{x:.6}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{x:.4e}")
    }
}

fn render_table(out: &mut String, indent: &str, rows: &[Value]) {
    let cols: Vec<String> = match rows.first() {
        Some(Value::Object(m)) => m.keys().cloned().collect(),
        _ => return,
    };
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| cols.iter().map(|c| r.get(c).map(fmt_value).unwrap_or_default()).collect())
        .collect();
    let widths: Vec<usize> =
        (0..cols.len()).map(|i| cells.iter().map(|r| r[i].len()).chain([cols[i].len()]).max().unwrap_or(0)).collect();
    let line = |vals: &[String]| {
        let parts: Vec<String> = vals.iter().zip(&widths).map(|(v, w)| format!("{v:>w$}")).collect();
        format!("{indent}{}\n", parts.join("  ").trim_end())
    };
    out.push_str(&line(&cols));
    for r in &cells {
        out.push_str(&line(r));
    }
}

fn render_metrics(out: &mut String, indent: &str, v: &Value) {
    let Value::Object(map) = v else {
        let _ = writeln!(out, "{indent}{}", fmt_value(v));
        return;
    };
    for (key, val) in map {
        match val {
            Value::Array(a) if a.first().is_some_and(Value::is_object) => {
                let _ = writeln!(out, "{indent}{key}:");
                render_table(out, &format!("{indent}  "), a);
            }
            Value::Object(_) => {
                let _ = writeln!(out, "{indent}{key}:");
                render_metrics(out, &format!("{indent}  "), val);
            }
            _ => {
                let _ = writeln!(out, "{indent}{key}: {}", fmt_value(val));
            }
        }
    }
}

/// Human-readable summary and machine JSON of a manifest. The wall-clock time
/// is left out so that the rendering is a pure function of the run.
pub fn report(manifest: &RunManifest) -> Report {
    let mut text = String::new();
    let _ = writeln!(text, "command: {}", manifest.command);
    let _ = writeln!(text, "config: {}", &manifest.config_hash[..manifest.config_hash.len().min(16)]);
    let _ = writeln!(text, "version: {}", manifest.code_version);
    let seeds: Vec<String> = manifest.seeds.iter().map(|(s, r)| format!("{s}/{r}")).collect();
    let _ = writeln!(text, "seeds: {}", if seeds.is_empty() { "-".into() } else { seeds.join(", ") });
    let _ = writeln!(text, "artifacts:");
    for a in &manifest.artifacts {
        let _ = writeln!(text, "  {}  {} bytes  {}", a.path, a.bytes, &a.sha256[..a.sha256.len().min(12)]);
    }
    let _ = writeln!(text, "metrics:");
    render_metrics(&mut text, "  ", &manifest.metrics);
    let json = json!({
        "command": manifest.command,
        "config_hash": manifest.config_hash,
        "code_version": manifest.code_version,
        "seeds": manifest.seeds,
        "artifacts": manifest.artifacts,
        "metrics": manifest.metrics,
    });
    Report { text, json }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[model]\ndim = 1\n";

    #[test]
    fn defaults_are_explicit() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.output, PathBuf::from("out"));
        assert_eq!(cfg.hydro, HydroSection::default());
        assert_eq!(cfg.conductivity.nodes, 17);
        for c in Command::ALL {
            assert_eq!(Command::from_str(c.name()).unwrap(), c);
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = "[model]\ndim = 1\n[hydro]\nseedz = 3\n";
        assert!(matches!(ExperimentConfig::from_toml(bad), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml("[model]\ndim = 1\ncolour = 2\n"), Err(Error::Config(_))));
    }

    #[test]
    fn k_rules() {
        let cfg = ExperimentConfig::from_toml("[model]\ndim = 1\n[hydro]\nk = { delta = 0.5 }\n").unwrap();
        assert!((cfg.hydro.k.at(100) - 0.5 * 100f64.ln()).abs() < 1e-15);
        let cfg = ExperimentConfig::from_toml("[model]\ndim = 1\n[hydro]\nk = 3\n").unwrap();
        assert_eq!(cfg.hydro.k.at(7), 3.0);
    }

    #[test]
    fn validation() {
        let mut cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        cfg.hydro.k = KRule::Fixed(0.5);
        assert!(matches!(cfg.validate(Command::HydroCompare), Err(Error::Config(_))));
        cfg.hydro.k = KRule::Fixed(1.0);
        cfg.hydro.block = 40;
        assert!(matches!(cfg.validate(Command::HydroCompare), Err(Error::Config(_))));
        cfg.hydro.block = 1;
        cfg.validate(Command::HydroCompare).unwrap();
        assert!(cfg.validate(Command::Interface).is_err());
        cfg.conductivity.table = Some(PathBuf::from("/nonexistent/table.json"));
        assert!(matches!(cfg.validate(Command::Rates), Err(Error::Config(_))));
        cfg.conductivity.table = None;
        cfg.pde.rho0 = "0.5 + y".into();
        assert!(matches!(cfg.validate(Command::Pde), Err(Error::Expression(_))));
    }

    #[test]
    fn schedules() {
        assert_eq!(schedule(0.0, 1.0, 3, &None).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(schedule(0.5, 1.0, 1, &None).unwrap(), vec![1.0]);
        assert!(schedule(0.0, 1.0, 3, &Some(vec![0.2, 0.1])).is_err());
        assert!(schedule(2.0, 1.0, 3, &None).is_err());
    }

    #[test]
    fn hash_ignores_output() {
        let a = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let mut b = a.clone();
        b.output = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn float_format() {
        assert_eq!(fmt_float(0.5), "0.5");
        assert_eq!(fmt_float(2.0), "2");
        assert_eq!(fmt_float(1.25e-7), "1.2500e-7");
        assert_eq!(fmt_float(-0.0312), "-0.0312");
    }
}
