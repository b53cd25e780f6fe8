//! Finite-volume solver for `∂_t ρ = ∇·(D(ρ)∇ρ) + K f(ρ)` on the unit torus
//! in d = 1, 2, with Strang splitting and a comparison-principle monitor.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conductivity::DiffusionTable;
use crate::error::{Error, Result};
use crate::lattice::Configuration;
use crate::poly::Polynomial;

/// Cell averages on an `M^d` periodic grid, cell `i` centred at `(i + ½)/M`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityField {
    pub d: usize,
    pub m: usize,
    pub t: f64,
    pub values: Vec<f64>,
}

impl DensityField {
    pub fn from_fn(d: usize, m: usize, rho0: impl Fn(&[f64]) -> f64 + Sync) -> Result<DensityField> {
        if !(1..=2).contains(&d) || m < 3 {
            return Err(Error::Precondition(format!("grid d = {d}, M = {m} unsupported")));
        }
        let values = (0..m.pow(d as u32)).into_par_iter().map(|c| rho0(&cell_center(d, m, c))).collect();
        Ok(DensityField { d, m, t: 0.0, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn h(&self) -> f64 {
        1.0 / self.m as f64
    }

    pub fn center(&self, c: usize) -> Vec<f64> {
        cell_center(self.d, self.m, c)
    }

    /// `∫ ρ`.
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.len() as f64
    }

    /// `∫ ρ φ` by the midpoint rule.
    pub fn pairing(&self, phi: impl Fn(&[f64]) -> f64) -> f64 {
        (0..self.len()).map(|c| self.values[c] * phi(&self.center(c))).sum::<f64>() / self.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Little-endian `f64` values plus a JSON sidecar `<path>.json`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for v in &self.values {
            f.write_all(&v.to_le_bytes())?;
        }
        f.flush()?;
        let meta = serde_json::json!({"d": self.d, "m": self.m, "t": self.t, "encoding": "f64-le", "order": "row-major, last axis fastest"});
        std::fs::write(crate::lattice::sidecar_path(path), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<DensityField> {
        let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(crate::lattice::sidecar_path(path))?)?;
        let get = |k: &str| meta.get(k).ok_or_else(|| Error::Format(format!("sidecar lacks `{k}`")));
        let d = get("d")?.as_u64().ok_or_else(|| Error::Format("bad d".into()))? as usize;
        let m = get("m")?.as_u64().ok_or_else(|| Error::Format("bad m".into()))? as usize;
        let t = get("t")?.as_f64().ok_or_else(|| Error::Format("bad t".into()))?;
        let bytes = std::fs::read(path)?;
        if bytes.len() != 8 * m.pow(d as u32) {
            return Err(Error::Format(format!("expected {} bytes, found {}", 8 * m.pow(d as u32), bytes.len())));
        }
        let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(DensityField { d, m, t, values })
    }
}

fn cell_center(d: usize, m: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    let mut r = c;
    for a in (0..d).rev() {
        out[a] = ((r % m) as f64 + 0.5) / m as f64;
        r /= m;
    }
    out
}

/// Scalar Dormand–Prince 5(4) for `y' = g(y)` together with the variational
/// equation `z' = g'(y) z`; returns `(y(τ), z(τ))` with `z(0) = 1`.
fn flow_with_derivative(g: &Polynomial, dg: &Polynomial, y0: f64, tau: f64) -> (f64, f64) {
    const A: [[f64; 6]; 6] = [
        [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
        [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
        [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
    ];
    const E: [f64; 7] = [
        71.0 / 57600.0,
        0.0,
        -71.0 / 16695.0,
        71.0 / 1920.0,
        -17253.0 / 339200.0,
        22.0 / 525.0,
        -1.0 / 40.0,
    ];
    let rhs = |s: [f64; 2]| [g.eval(s[0]), dg.eval(s[0]) * s[1]];
    let mut s = [y0, 1.0];
    let mut t = 0.0;
    let mut h = tau;
    let tol = 1e-14;
    while t < tau {
        h = h.min(tau - t);
        let mut k = [[0.0; 2]; 7];
        k[0] = rhs(s);
        for i in 0..6 {
            let mut st = s;
            for (j, kj) in k.iter().enumerate().take(i + 1) {
                st[0] += h * A[i][j] * kj[0];
                st[1] += h * A[i][j] * kj[1];
            }
            k[i + 1] = rhs(st);
        }
        // stage 7 is evaluated at the fifth-order solution
        let mut y5 = s;
        for j in 0..6 {
            y5[0] += h * A[5][j] * k[j][0];
            y5[1] += h * A[5][j] * k[j][1];
        }
        let err = (0..2)
            .map(|c| (h * (0..7).map(|j| E[j] * k[j][c]).sum::<f64>()).abs() / (1.0 + y5[c].abs()))
            .fold(0.0, f64::max);
        if err <= tol || h < 1e-15 * tau {
            s = y5;
            t += h;
        }
        let fac = if err == 0.0 { 5.0 } else { (0.9 * (tol / err).powf(0.2)).clamp(0.2, 5.0) };
        h *= fac;
    }
    (s[0], s[1])
}

/// The time-`τ` flow map of `ρ' = K f(ρ)`, computed adaptively at nodes and
/// interpolated by monotone cubic Hermite with exact node derivatives.
#[derive(Clone, Debug)]
pub struct ReactionMap {
    nodes: Vec<f64>,
    values: Vec<f64>,
    slopes: Vec<f64>,
    g: Polynomial,
    dg: Polynomial,
    tau: f64,
}

impl ReactionMap {
    pub fn new(f: &Polynomial, k: f64, tau: f64, roots: &[f64], intervals: usize) -> ReactionMap {
        let g = f.scale(k);
        let dg = g.derivative();
        let mut nodes: Vec<f64> = (0..=intervals).map(|i| i as f64 / intervals as f64).collect();
        nodes.extend(roots.iter().filter(|r| (0.0..=1.0).contains(*r)));
        nodes.sort_by(f64::total_cmp);
        nodes.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        let (values, mut slopes): (Vec<f64>, Vec<f64>) = nodes
            .par_iter()
            .map(|&r| {
                if roots.contains(&r) {
                    (r, (tau * dg.eval(r)).exp())
                } else {
                    flow_with_derivative(&g, &dg, r, tau)
                }
            })
            .unzip();
        // Fritsch–Carlson limiter keeps the interpolant monotone
        for i in 0..nodes.len() - 1 {
            let delta = (values[i + 1] - values[i]) / (nodes[i + 1] - nodes[i]);
            if delta <= 0.0 {
                slopes[i] = 0.0;
                slopes[i + 1] = 0.0;
                continue;
            }
            let (a, b) = (slopes[i] / delta, slopes[i + 1] / delta);
            let s = a * a + b * b;
            if s > 9.0 {
                let t = 3.0 / s.sqrt();
                slopes[i] = t * a * delta;
                slopes[i + 1] = t * b * delta;
            }
        }
        ReactionMap { nodes, values, slopes, g, dg, tau }
    }

    pub fn apply(&self, rho: f64) -> f64 {
        let (lo, hi) = (self.nodes[0], *self.nodes.last().unwrap());
        if !(lo..=hi).contains(&rho) {
            return flow_with_derivative(&self.g, &self.dg, rho, self.tau).0;
        }
        let k = match self.nodes.binary_search_by(|v| v.total_cmp(&rho)) {
            Ok(k) => return self.values[k],
            Err(k) => k - 1,
        };
        let h = self.nodes[k + 1] - self.nodes[k];
        let t = (rho - self.nodes[k]) / h;
        (1.0 + 2.0 * t) * (1.0 - t) * (1.0 - t) * self.values[k]
            + t * (1.0 - t) * (1.0 - t) * h * self.slopes[k]
            + t * t * (3.0 - 2.0 * t) * self.values[k + 1]
            + t * t * (t - 1.0) * h * self.slopes[k + 1]
    }
}

/// Running record of the bounds `min(ρ₀) ∧ α₋ ≤ ρ ≤ max(ρ₀) ∨ α₊`.
#[derive(Clone, Debug, Serialize)]
pub struct MonitorReport {
    pub lower: f64,
    pub upper: f64,
    pub max_undershoot: f64,
    pub max_overshoot: f64,
    pub steps: u64,
    pub tolerance: f64,
    pub violated: bool,
}

impl MonitorReport {
    fn observe(&mut self, field: &DensityField) {
        self.max_undershoot = self.max_undershoot.max(self.lower - field.min());
        self.max_overshoot = self.max_overshoot.max(field.max() - self.upper);
        self.violated = self.max_undershoot > self.tolerance || self.max_overshoot > self.tolerance;
    }
}

pub const MONITOR_TOL: f64 = 1e-10;

/// Bounds from the comparison principle for data `field`.
pub fn comparison_bounds(field: &DensityField, f: &Polynomial) -> (f64, f64) {
    let (lo, hi) = (field.min(), field.max());
    if f.max_abs_coeff() == 0.0 {
        return (lo, hi);
    }
    let roots = f.roots_in(0.0, 1.0, 1000, 1e-13);
    match (roots.first(), roots.last()) {
        (Some(&a), Some(&b)) => (lo.min(a), hi.max(b)),
        _ => (lo.min(0.0), hi.max(1.0)),
    }
}

pub fn comparison_monitor(field: &DensityField, f: &Polynomial) -> MonitorReport {
    let (lower, upper) = comparison_bounds(field, f);
    let mut r = MonitorReport {
        lower,
        upper,
        max_undershoot: f64::NEG_INFINITY,
        max_overshoot: f64::NEG_INFINITY,
        steps: 0,
        tolerance: MONITOR_TOL,
        violated: false,
    };
    r.observe(field);
    r
}

pub struct PdeProblem {
    pub d: usize,
    pub m: usize,
    pub table: DiffusionTable,
    pub f: Polynomial,
    pub k: f64,
    pub dt: f64,
    pub cfl_bound: f64,
    roots: Vec<f64>,
    maps: HashMap<u64, ReactionMap>,
    reaction_nodes: usize,
}

impl PdeProblem {
    /// `dt = None` uses half the stability bound `h²/(2d c^*)`, with `c^*`
    /// the largest eigenvalue of the tabulated `D`.
    pub fn new(table: DiffusionTable, f: Polynomial, k: f64, m: usize, dt: Option<f64>) -> Result<PdeProblem> {
        let d = table.dim;
        if !(1..=2).contains(&d) {
            return Err(Error::Precondition(format!("the solver supports d = 1, 2, not {d}")));
        }
        let scale = table.values.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
        if table.max_off_diagonal() > 1e-12 * scale {
            return Err(Error::Precondition("off-diagonal diffusion entries are not supported by the scheme".into()));
        }
        if !(k >= 0.0 && k.is_finite()) {
            return Err(Error::Config(format!("K = {k} must be finite and nonnegative")));
        }
        let (_, c_max) = table.eigenvalue_range(400);
        let h = 1.0 / m as f64;
        let cfl_bound = h * h / (2.0 * d as f64 * c_max);
        let dt = dt.unwrap_or(0.5 * cfl_bound);
        if !(dt > 0.0 && dt <= cfl_bound) {
            return Err(Error::CflViolation { dt, bound: cfl_bound });
        }
        let roots = if f.max_abs_coeff() == 0.0 { vec![] } else { f.roots_in(0.0, 1.0, 1000, 1e-14) };
        Ok(PdeProblem { d, m, table, f, k, dt, cfl_bound, roots, maps: HashMap::new(), reaction_nodes: 4096 })
    }

    pub fn initial(&self, rho0: impl Fn(&[f64]) -> f64 + Sync) -> Result<DensityField> {
        DensityField::from_fn(self.d, self.m, rho0)
    }

    fn reacts(&self) -> bool {
        self.k > 0.0 && self.f.max_abs_coeff() > 0.0
    }

    fn react(&mut self, field: &mut DensityField, tau: f64) {
        if !self.reacts() {
            return;
        }
        let key = tau.to_bits();
        if !self.maps.contains_key(&key) {
            let map = ReactionMap::new(&self.f, self.k, tau, &self.roots, self.reaction_nodes);
            self.maps.insert(key, map);
        }
        let map = &self.maps[&key];
        field.values.par_iter_mut().for_each(|v| *v = map.apply(*v));
    }

    fn diffuse(&self, field: &mut DensityField, dt: f64) {
        let (d, m) = (self.d, self.m);
        let h = 1.0 / m as f64;
        let c = dt / (h * h);
        let rho = &field.values;
        let dd: Vec<Vec<f64>> =
            (0..d).map(|a| rho.par_iter().map(|&r| self.table.entry(r, a, a)).collect()).collect();
        let strides: Vec<usize> = (0..d).map(|a| m.pow((d - 1 - a) as u32)).collect();
        let neighbor = |cell: usize, a: usize, up: bool| {
            let s = strides[a];
            let i = (cell / s) % m;
            let j = if up { (i + 1) % m } else { (i + m - 1) % m };
            cell + j * s - i * s
        };
        let face = |lo: usize, hi: usize, a: usize| 0.5 * (dd[a][lo] + dd[a][hi]) * (rho[hi] - rho[lo]);
        let next: Vec<f64> = (0..rho.len())
            .into_par_iter()
            .map(|cell| {
                let mut div = 0.0;
                for a in 0..d {
                    let up = neighbor(cell, a, true);
                    let dn = neighbor(cell, a, false);
                    div += face(cell, up, a) - face(dn, cell, a);
                }
                rho[cell] + c * div
            })
            .collect();
        field.values = next;
    }

    /// One Strang step of length `dt ≤ self.dt`.
    pub fn step_by(&mut self, field: &mut DensityField, dt: f64) -> Result<()> {
        if dt > self.cfl_bound * (1.0 + 1e-12) {
            return Err(Error::CflViolation { dt, bound: self.cfl_bound });
        }
        self.react(field, 0.5 * dt);
        self.diffuse(field, dt);
        self.react(field, 0.5 * dt);
        field.t += dt;
        Ok(())
    }

    pub fn step(&mut self, field: &mut DensityField) -> Result<()> {
        self.step_by(field, self.dt)
    }

    /// March to each of the sorted `times`, returning the snapshots and the
    /// comparison monitor.
    pub fn solve(&mut self, mut field: DensityField, times: &[f64]) -> Result<(Vec<DensityField>, MonitorReport)> {
        if times.windows(2).any(|w| w[1] < w[0]) || times.first().is_some_and(|&t| t < field.t) {
            return Err(Error::Config("snapshot times must be sorted and not in the past".into()));
        }
        let mut monitor = comparison_monitor(&field, &self.f);
        let mut out = vec![];
        for &target in times {
            let span = target - field.t;
            let steps = (span / self.dt - 1e-9).ceil().max(0.0) as u64;
            if steps > 0 {
                let dt = span / steps as f64;
                for _ in 0..steps {
                    self.step_by(&mut field, dt)?;
                    monitor.observe(&field);
                    monitor.steps += 1;
                }
            }
            field.t = target;
            out.push(field.clone());
        }
        Ok((out, monitor))
    }
}

/// Pairing gaps and an L² gap between a PDE field and a particle configuration.
#[derive(Clone, Debug, Serialize)]
pub struct Discrepancy {
    pub pairing_gaps: Vec<f64>,
    pub l2_gap: f64,
}

/// Average the field over the lattice cells `[(x − ½)/N, (x + ½)/N)` per axis.
pub fn restrict(field: &DensityField, n: usize) -> Result<Vec<f64>> {
    if n > field.m {
        return Err(Error::GridMismatch(format!("PDE grid M = {} is coarser than the lattice N = {n}", field.m)));
    }
    let m = field.m;
    // overlap weights of cell j with lattice interval x, per axis
    let weights: Vec<Vec<(usize, f64)>> = (0..n)
        .map(|x| {
            let (a, b) = ((x as f64 - 0.5) / n as f64, (x as f64 + 0.5) / n as f64);
            let lo = (a * m as f64).floor() as i64;
            let hi = (b * m as f64).ceil() as i64;
            (lo..hi)
                .filter_map(|j| {
                    let (ca, cb) = (j as f64 / m as f64, (j + 1) as f64 / m as f64);
                    let w = (cb.min(b) - ca.max(a)).max(0.0) * n as f64;
                    (w > 0.0).then_some((j.rem_euclid(m as i64) as usize, w))
                })
                .collect()
        })
        .collect();
    Ok(match field.d {
        1 => (0..n).map(|x| weights[x].iter().map(|&(j, w)| w * field.values[j]).sum()).collect(),
        _ => (0..n * n)
            .into_par_iter()
            .map(|s| {
                let (x, y) = (s / n, s % n);
                let mut acc = 0.0;
                for &(i, wi) in &weights[x] {
                    for &(j, wj) in &weights[y] {
                        acc += wi * wj * field.values[i * m + j];
                    }
                }
                acc
            })
            .collect(),
    })
}

pub fn discrepancy(
    field: &DensityField,
    cfg: &Configuration,
    block: usize,
    phis: &[&(dyn Fn(&[f64]) -> f64 + Sync)],
) -> Result<Discrepancy> {
    let torus = cfg.torus();
    if torus.dim() != field.d {
        return Err(Error::GridMismatch(format!("lattice d = {} but field d = {}", torus.dim(), field.d)));
    }
    let coarse = restrict(field, torus.side())?;
    let blocks = cfg.block_averages(block)?;
    let l2 = (coarse.iter().zip(&blocks).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / coarse.len() as f64).sqrt();
    let gaps = phis
        .iter()
        .map(|phi| (crate::kmc::empirical_pairing(cfg, phi) - field.pairing(phi)).abs())
        .collect();
    Ok(Discrepancy { pairing_gaps: gaps, l2_gap: l2 })
}

/// Mean 10–90% width of the transition layers of a 1-d field between the
/// plateaus `lo < hi`.
pub fn layer_width_1d(field: &DensityField, lo: f64, hi: f64) -> Result<f64> {
    if field.d != 1 {
        return Err(Error::Precondition("layer width is measured in d = 1".into()));
    }
    let m = field.m;
    let v = &field.values;
    let h = field.h();
    let (a, mid, b) = (lo + 0.1 * (hi - lo), 0.5 * (lo + hi), lo + 0.9 * (hi - lo));
    let crossing = |i: usize, level: f64| -> Option<f64> {
        let (x, y) = (v[i], v[(i + 1) % m]);
        ((x - level) * (y - level) <= 0.0 && x != y).then(|| i as f64 + (level - x) / (y - x))
    };
    let mut widths = vec![];
    for i in 0..m {
        if crossing(i, mid).is_none() {
            continue;
        }
        let rising = v[(i + 1) % m] > v[i];
        // walk down- and up-hill from the midpoint crossing
        let find = |level: f64, forward: bool| -> Option<f64> {
            for step in 0..m {
                let j = if forward { (i + step) % m } else { (i + m - step % m) % m };
                if let Some(p) = crossing(j, level) {
                    let unwrapped = j as f64 + (p - j as f64);
                    let shift = if forward && j < i { m as f64 } else if !forward && j > i { -(m as f64) } else { 0.0 };
                    return Some(unwrapped + shift);
                }
            }
            None
        };
        let (pa, pb) = if rising { (find(a, false), find(b, true)) } else { (find(b, false), find(a, true)) };
        if let (Some(p), Some(q)) = (pa, pb) {
            widths.push((q - p).abs() * h);
        }
    }
    if widths.is_empty() {
        return Err(Error::EmptyLevelSet);
    }
    Ok(widths.iter().sum::<f64>() / widths.len() as f64)
}

/// Fraction of cells at periodic distance `> strip` from every `mid`-level
/// crossing that lie within `eps` of `lo` or `hi` (d = 1).
pub fn plateau_fraction_1d(field: &DensityField, lo: f64, hi: f64, strip: f64, eps: f64) -> Result<f64> {
    if field.d != 1 {
        return Err(Error::Precondition("plateau fraction is measured in d = 1".into()));
    }
    let m = field.m;
    let v = &field.values;
    let mid = 0.5 * (lo + hi);
    let fronts: Vec<f64> = (0..m)
        .filter_map(|i| {
            let (x, y) = (v[i], v[(i + 1) % m]);
            ((x - mid) * (y - mid) <= 0.0 && x != y).then(|| (i as f64 + 0.5 + (mid - x) / (y - x)) / m as f64)
        })
        .collect();
    let (mut outside, mut good) = (0usize, 0usize);
    for c in 0..m {
        let x = (c as f64 + 0.5) / m as f64;
        let far = fronts.iter().all(|&p| {
            let d = (x - p).abs();
            d.min(1.0 - d) > strip
        });
        if far {
            outside += 1;
            if (v[c] - lo).abs() <= eps || (v[c] - hi).abs() <= eps {
                good += 1;
            }
        }
    }
    if outside == 0 {
        return Err(Error::Precondition("the strip covers the whole torus".into()));
    }
    Ok(good as f64 / outside as f64)
}
