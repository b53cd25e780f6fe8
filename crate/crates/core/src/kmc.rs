//! Continuous-time simulation of the Glauber–Kawasaki process with generator
//! `N² L_K + K L_G` by uniformized thinning.
//!
//! The clock is macroscopic: exchanges across a bond fire at rate `N² c_b(η)`,
//! flips at site `x` at rate `K c_x(η)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lattice::{Configuration, Offset, Torus};
use crate::localfn::LocalFunction;
use crate::measures::product_measure_sample;
use crate::rates::RateModel;

/// A local function compiled against a torus: one neighbour column per support site.
#[derive(Clone)]
struct Compiled {
    table: Vec<f64>,
    columns: Vec<Vec<u32>>,
}

impl Compiled {
    fn new(f: &LocalFunction, torus: &Torus) -> Compiled {
        let columns = f
            .support()
            .iter()
            .map(|&z| (0..torus.volume()).map(|x| torus.translate(x, z) as u32).collect())
            .collect();
        Compiled { table: f.table().to_vec(), columns }
    }

    fn eval(&self, cfg: &Configuration, x: usize) -> f64 {
        let mut idx = 0;
        for (k, col) in self.columns.iter().enumerate() {
            if cfg.get(col[x] as usize) {
                idx |= 1 << k;
            }
        }
        self.table[idx]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct EventCounts {
    pub proposals: u64,
    pub exchanges: u64,
    pub flips: u64,
}

/// Outcome of one thinning proposal.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Event {
    Rejected,
    Exchange(usize, usize),
    Flip(usize),
}

#[derive(Clone)]
pub struct SimulationState {
    pub cfg: Configuration,
    pub t: f64,
    pub k: f64,
    pub counts: EventCounts,
    pub seed: u64,
    pub stream: u64,
    rng: ChaCha8Rng,
    exchange: Vec<Compiled>,
    flip: Compiled,
    forward: Vec<Vec<u32>>,
    exchange_bound: f64,
    flip_bound: f64,
    total_rate: f64,
    p_exchange: f64,
}

impl SimulationState {
    /// Start from a given configuration.
    pub fn from_configuration(model: &RateModel, cfg: Configuration, k: f64, seed: u64, stream: u64) -> Result<Self> {
        let torus = *cfg.torus();
        if torus.dim() != model.dim {
            return Err(Error::Precondition("model and torus dimensions differ".into()));
        }
        if 2 * model.radius() >= torus.side() {
            return Err(Error::WrapViolation { radius: model.radius(), side: torus.side() });
        }
        if !(k >= 0.0 && k.is_finite()) {
            return Err(Error::Config(format!("K = {k} must be finite and nonnegative")));
        }
        let bounds = model.validate()?;
        let flip_bound = model.flip_plus.max_value().max(model.flip_minus.max_value()).max(0.0);
        let n = torus.side() as f64;
        let d = torus.dim();
        let vol = torus.volume() as f64;
        let ex_rate = vol * d as f64 * n * n * bounds.c_max;
        let fl_rate = if model.flips_active() { vol * k * flip_bound } else { 0.0 };
        let total_rate = ex_rate + fl_rate;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Ok(SimulationState {
            t: 0.0,
            k,
            counts: EventCounts::default(),
            seed,
            stream,
            rng,
            exchange: model.exchange.iter().map(|c| Compiled::new(c, &torus)).collect(),
            flip: Compiled::new(&model.flip_rate(), &torus),
            forward: (0..d)
                .map(|a| (0..torus.volume()).map(|x| torus.translate(x, Offset::unit(a)) as u32).collect())
                .collect(),
            exchange_bound: bounds.c_max,
            flip_bound,
            total_rate,
            p_exchange: ex_rate / total_rate,
            cfg,
        })
    }

    /// Sample the product measure with marginals `ρ₀(x/N)`, which must lie in `(0,1)`.
    pub fn init(
        model: &RateModel,
        torus: Torus,
        rho0: impl Fn(&[f64]) -> f64,
        k: f64,
        seed: u64,
        stream: u64,
    ) -> Result<Self> {
        let profile: Vec<f64> = (0..torus.volume()).map(|x| rho0(&torus.position(x))).collect();
        if let Some(x) = profile.iter().position(|p| !(*p > 0.0 && *p < 1.0)) {
            return Err(Error::ProfileOutOfRange { value: profile[x], at: torus.position(x) });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream.wrapping_add(1 << 32));
        let cfg = product_measure_sample(&profile, torus, &mut rng)?;
        SimulationState::from_configuration(model, cfg, k, seed, stream)
    }

    /// Upper bound on the total event rate in macroscopic time.
    pub fn total_rate(&self) -> f64 {
        self.total_rate
    }

    /// One thinning proposal; does not advance the clock.
    pub fn propose(&mut self) -> Event {
        self.counts.proposals += 1;
        let vol = self.cfg.torus().volume();
        let x = self.rng.random_range(0..vol);
        if self.rng.random::<f64>() < self.p_exchange {
            let axis = self.rng.random_range(0..self.forward.len());
            let y = self.forward[axis][x] as usize;
            let u: f64 = self.rng.random();
            if self.cfg.get(x) != self.cfg.get(y) && u * self.exchange_bound < self.exchange[axis].eval(&self.cfg, x) {
                self.cfg.swap_sites(x, y);
                self.counts.exchanges += 1;
                return Event::Exchange(x, y);
            }
        } else {
            let u: f64 = self.rng.random();
            if u * self.flip_bound < self.flip.eval(&self.cfg, x) {
                self.cfg.toggle(x);
                self.counts.flips += 1;
                return Event::Flip(x);
            }
        }
        Event::Rejected
    }

    /// Run the chain for macroscopic time `dt`.
    pub fn advance(&mut self, dt: f64) -> Result<()> {
        if !(dt >= 0.0) {
            return Err(Error::Precondition(format!("negative time step {dt}")));
        }
        let target = self.t + dt;
        let clock = Exp::new(self.total_rate).expect("positive total rate");
        loop {
            let wait = clock.sample(&mut self.rng);
            if self.t + wait > target {
                // memorylessness: the pending proposal is discarded
                self.t = target;
                return Ok(());
            }
            self.t += wait;
            self.propose();
        }
    }

    /// `N^{-d} Σ_x η_x φ(x/N)`.
    pub fn pairing(&self, phi: impl Fn(&[f64]) -> f64) -> f64 {
        empirical_pairing(&self.cfg, phi)
    }
}

/// `⟨ρ^N, φ⟩ = N^{-d} Σ_x η_x φ(x/N)`.
pub fn empirical_pairing(cfg: &Configuration, phi: impl Fn(&[f64]) -> f64) -> f64 {
    let torus = cfg.torus();
    let s: f64 = (0..torus.volume()).filter(|&x| cfg.get(x)).map(|x| phi(&torus.position(x))).sum();
    s / torus.volume() as f64
}

/// Block averages `η̄^ℓ_x` at every site.
pub fn block_profile(cfg: &Configuration, l: usize) -> Result<Vec<f64>> {
    cfg.block_averages(l)
}

/// Observable values at the requested times.
#[derive(Clone, Debug, Serialize)]
pub struct ObservableSeries {
    pub names: Vec<String>,
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl ObservableSeries {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for (t, row) in self.times.iter().zip(&self.values) {
            let mut rec = vec![format!("{t}")];
            rec.extend(row.iter().map(|v| format!("{v}")));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Advance through the sorted `times`, recording each observable and calling
/// `at_snapshot` with the state at each time.
pub fn run_schedule(
    state: &mut SimulationState,
    times: &[f64],
    observables: &[(String, &(dyn Fn(&[f64]) -> f64 + Sync))],
    mut at_snapshot: impl FnMut(&SimulationState) -> Result<()>,
) -> Result<ObservableSeries> {
    if times.windows(2).any(|w| w[1] < w[0]) || times.first().is_some_and(|&t| t < state.t) {
        return Err(Error::Config("snapshot times must be sorted and not in the past".into()));
    }
    let mut series = ObservableSeries {
        names: observables.iter().map(|o| o.0.clone()).collect(),
        times: vec![],
        values: vec![],
    };
    for &t in times {
        state.advance(t - state.t)?;
        series.times.push(t);
        series.values.push(observables.iter().map(|(_, phi)| state.pairing(phi)).collect());
        at_snapshot(state)?;
    }
    Ok(series)
}

/// Independent replicas, replica `r` on RNG stream `r` of `seed`; returns the
/// final configurations.
pub fn ensemble(
    model: &RateModel,
    torus: Torus,
    rho0: &(dyn Fn(&[f64]) -> f64 + Sync),
    k: f64,
    seed: u64,
    replicas: usize,
    horizon: f64,
) -> Result<Vec<Configuration>> {
    (0..replicas as u64)
        .into_par_iter()
        .map(|r| {
            let mut s = SimulationState::init(model, torus, rho0, k, seed, r)?;
            s.advance(horizon)?;
            Ok(s.cfg)
        })
        .collect()
}
