//! Localized Kawasaki generators on finite boxes and CLT-variance identities.
//!
//! A sector is the set of configurations of a box with a fixed particle
//! count; states are bitmasks over the box sites in colexicographic order,
//! which is also the order of the combinadic rank.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::conductivity::{loglog_slope, CorrectedConductivity};
use crate::error::{Error, Result};
use crate::lattice::{rect_offsets, Offset};
use crate::localfn::{LocalFunction, VectorLocalFunction};
use crate::measures::{thermo::compressibility, Combinations};
use crate::rates::RateModel;

pub const SECTOR_CAP: usize = 1_000_000;
const CG_TOL: f64 = 1e-12;
const DENSE_GAP_LIMIT: usize = 3000;

/// Axis-aligned box `[lo, hi]` (inclusive) in `Z^d`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BoxGeometry {
    pub lo: Vec<i32>,
    pub hi: Vec<i32>,
}

impl BoxGeometry {
    /// `Λ(ℓ) = [−ℓ, ℓ]^d`.
    pub fn cube(d: usize, l: usize) -> BoxGeometry {
        BoxGeometry { lo: vec![-(l as i32); d], hi: vec![l as i32; d] }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn sites(&self) -> Vec<Offset> {
        rect_offsets(&self.lo, &self.hi)
    }

    pub fn volume(&self) -> usize {
        self.lo.iter().zip(&self.hi).map(|(a, b)| (b - a + 1).max(0) as usize).product()
    }

    pub fn contains(&self, z: Offset) -> bool {
        (0..self.dim()).all(|i| z.0[i] >= self.lo[i] && z.0[i] <= self.hi[i])
    }

    /// The box with `n` layers removed on every side (`Λ(ℓ−n)` for cubes).
    pub fn shrink(&self, n: usize) -> Option<BoxGeometry> {
        let n = n as i32;
        let lo: Vec<i32> = self.lo.iter().map(|a| a + n).collect();
        let hi: Vec<i32> = self.hi.iter().map(|b| b - n).collect();
        lo.iter().zip(&hi).all(|(a, b)| a <= b).then_some(BoxGeometry { lo, hi })
    }
}

/// Boundary condition `ζ` outside the box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Boundary {
    Empty,
    Full,
    Checkerboard,
    Random(u64),
}

impl Boundary {
    pub fn occupied(&self, z: Offset) -> bool {
        match *self {
            Boundary::Empty => false,
            Boundary::Full => true,
            Boundary::Checkerboard => z.0.iter().sum::<i32>().rem_euclid(2) == 0,
            Boundary::Random(seed) => {
                let mut key = seed;
                for c in z.0 {
                    key = key.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(c as i64 as u64);
                }
                ChaCha8Rng::seed_from_u64(key).random::<bool>()
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            Boundary::Empty => "empty".into(),
            Boundary::Full => "full".into(),
            Boundary::Checkerboard => "checkerboard".into(),
            Boundary::Random(s) => format!("random-{s}"),
        }
    }

    /// Empty, full, checkerboard and 8 random fills.
    pub fn samples(seed: u64) -> Vec<Boundary> {
        let mut v = vec![Boundary::Empty, Boundary::Full, Boundary::Checkerboard];
        v.extend((0..8).map(|k| Boundary::Random(seed.wrapping_add(k))));
        v
    }
}

/// Configurations of a box with exactly `m` particles.
pub struct Sector {
    pub geometry: BoxGeometry,
    pub sites: Vec<Offset>,
    index: HashMap<Offset, usize>,
    pub m: usize,
    pub states: Vec<u64>,
    binom: Vec<Vec<u64>>,
}

impl Sector {
    pub fn new(geometry: BoxGeometry, m: usize) -> Result<Sector> {
        let sites = geometry.sites();
        let n = sites.len();
        if n > 64 {
            return Err(Error::SectorTooLarge { states: binomial_u128(n, m), cap: SECTOR_CAP });
        }
        if m > n {
            return Err(Error::Precondition(format!("{m} particles in a box of {n} sites")));
        }
        let count = binomial_u128(n, m);
        if count > SECTOR_CAP as u128 {
            return Err(Error::SectorTooLarge { states: count, cap: SECTOR_CAP });
        }
        let states: Vec<u64> = Combinations::new(n, m).collect();
        let index = sites.iter().enumerate().map(|(k, &z)| (z, k)).collect();
        let mut binom = vec![vec![0u64; m + 2]; n + 1];
        for (a, row) in binom.iter_mut().enumerate() {
            for (b, v) in row.iter_mut().enumerate() {
                *v = binomial_u128(a, b) as u64;
            }
        }
        Ok(Sector { geometry, sites, index, m, states, binom })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn volume(&self) -> usize {
        self.sites.len()
    }

    pub fn density(&self) -> f64 {
        self.m as f64 / self.volume() as f64
    }

    pub fn site_index(&self, z: Offset) -> Option<usize> {
        self.index.get(&z).copied()
    }

    /// Colexicographic combinadic rank.
    pub fn rank(&self, mask: u64) -> usize {
        let mut r = 0u64;
        let mut rest = mask;
        let mut k = 1;
        while rest != 0 {
            let p = rest.trailing_zeros() as usize;
            r += self.binom[p][k];
            rest &= rest - 1;
            k += 1;
        }
        r as usize
    }

    pub fn mean(&self, v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    pub fn tabulate(&self, f: impl Fn(u64) -> f64 + Sync) -> Vec<f64> {
        self.states.par_iter().map(|&s| f(s)).collect()
    }

    /// `ξ ↦ (τ_x g)(ξ)` for a local `g` whose shifted support lies in the box.
    pub fn tabulate_local(&self, g: &LocalFunction, x: Offset) -> Result<Vec<f64>> {
        let pos: Vec<usize> = g
            .support()
            .iter()
            .map(|&z| self.site_index(z + x).ok_or(Error::SupportEscape))
            .collect::<Result<_>>()?;
        Ok(self.tabulate(|s| {
            let mut idx = 0usize;
            for (k, &p) in pos.iter().enumerate() {
                if s >> p & 1 == 1 {
                    idx |= 1 << k;
                }
            }
            g.table()[idx]
        }))
    }
}

fn binomial_u128(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut r: u128 = 1;
    for i in 0..k {
        r = r * (n - i) as u128 / (i + 1) as u128;
    }
    r
}

/// A nearest-neighbour bond of the box: site indices and direction.
#[derive(Clone, Copy, Debug)]
pub struct BoxBond {
    pub x: usize,
    pub y: usize,
    pub axis: usize,
    pub origin: Offset,
}

/// `L_{Λ,ζ}` restricted to one sector, stored row-wise.
pub struct LocalizedGenerator {
    pub sector: Sector,
    pub boundary: Boundary,
    pub bonds: Vec<BoxBond>,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
    diag: Vec<f64>,
    /// Bond rates `c_b(ξ·ζ)` per state, `bonds.len()` entries per state.
    bond_rates: Vec<f64>,
}

impl LocalizedGenerator {
    pub fn build(model: &RateModel, geometry: BoxGeometry, boundary: Boundary, m: usize) -> Result<LocalizedGenerator> {
        if geometry.dim() != model.dim {
            return Err(Error::Precondition("box and model dimensions differ".into()));
        }
        let sector = Sector::new(geometry, m)?;
        let mut bonds = vec![];
        for (kx, &x) in sector.sites.iter().enumerate() {
            for axis in 0..model.dim {
                if let Some(ky) = sector.site_index(x + Offset::unit(axis)) {
                    bonds.push(BoxBond { x: kx, y: ky, axis, origin: x });
                }
            }
        }
        let nb = bonds.len();
        let rows: Vec<(Vec<(u32, f64)>, f64, Vec<f64>)> = sector
            .states
            .par_iter()
            .map(|&s| {
                let occ = |z: Offset| match sector.site_index(z) {
                    Some(k) => s >> k & 1 == 1,
                    None => boundary.occupied(z),
                };
                let mut row = Vec::new();
                let mut rates = Vec::with_capacity(nb);
                let mut out = 0.0;
                for b in &bonds {
                    let c = model.exchange[b.axis].eval_with(|z| occ(b.origin + z));
                    rates.push(c);
                    if (s >> b.x & 1) != (s >> b.y & 1) {
                        let t = s ^ (1 << b.x) ^ (1 << b.y);
                        row.push((sector.rank(t) as u32, c));
                        out += c;
                    }
                }
                row.sort_by_key(|e| e.0);
                (row, -out, rates)
            })
            .collect();
        let mut row_ptr = vec![0];
        let mut cols = vec![];
        let mut vals = vec![];
        let mut diag = vec![];
        let mut bond_rates = Vec::with_capacity(nb * sector.len());
        for (row, dg, rates) in rows {
            for (c, v) in row {
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
            diag.push(dg);
            bond_rates.extend(rates);
        }
        Ok(LocalizedGenerator { sector, boundary, bonds, row_ptr, cols, vals, diag, bond_rates })
    }

    pub fn len(&self) -> usize {
        self.sector.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sector.is_empty()
    }

    pub fn bond_rate(&self, state: usize, bond: usize) -> f64 {
        self.bond_rates[state * self.bonds.len() + bond]
    }

    /// `L v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        (0..self.len())
            .into_par_iter()
            .map(|i| {
                let mut acc = self.diag[i] * v[i];
                for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                    acc += self.vals[k] * v[self.cols[k] as usize];
                }
                acc
            })
            .collect()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = self.diag[i];
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                m[(i, self.cols[k] as usize)] = self.vals[k];
            }
        }
        m
    }

    /// Largest `|L_{st} − L_{ts}|` and largest `|row sum|`.
    pub fn structure_defects(&self) -> (f64, f64) {
        let mut entries = HashMap::new();
        let mut rowsum: f64 = 0.0;
        for i in 0..self.len() {
            let mut s = self.diag[i];
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                entries.insert((i, self.cols[k] as usize), self.vals[k]);
                s += self.vals[k];
            }
            rowsum = rowsum.max(s.abs());
        }
        let asym = entries
            .iter()
            .map(|(&(i, j), v)| (v - entries.get(&(j, i)).copied().unwrap_or(0.0)).abs())
            .fold(0.0, f64::max);
        (asym, rowsum)
    }

    /// Solve `(−L) u = g` on mean-zero functions by projected conjugate gradients.
    pub fn solve(&self, g: &[f64]) -> Result<Vec<f64>> {
        let n = self.len();
        let project = |v: &mut [f64]| {
            let mean = v.iter().sum::<f64>() / n as f64;
            v.iter_mut().for_each(|x| *x -= mean);
        };
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut b = g.to_vec();
        project(&mut b);
        let bnorm = dot(&b, &b).sqrt();
        let mut x = vec![0.0; n];
        if bnorm == 0.0 {
            return Ok(x);
        }
        let mut r = b.clone();
        let mut p = r.clone();
        let mut rr = dot(&r, &r);
        for _ in 0..(10 * n).max(100) {
            let mut ap: Vec<f64> = self.apply(&p).into_iter().map(|v| -v).collect();
            project(&mut ap);
            let alpha = rr / dot(&p, &ap);
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            let rr_new = dot(&r, &r);
            if rr_new.sqrt() <= CG_TOL * bnorm {
                project(&mut x);
                return Ok(x);
            }
            let beta = rr_new / rr;
            for i in 0..n {
                p[i] = r[i] + beta * p[i];
            }
            rr = rr_new;
        }
        Err(Error::QuadratureNonConvergence("conjugate gradients did not reach tolerance".into()))
    }
}

fn check_centered(sector: &Sector, f: &[f64]) -> Result<()> {
    let mean = sector.mean(f);
    let scale = f.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if mean.abs() > 1e-12 * scale {
        return Err(Error::NotCentered { mean });
    }
    Ok(())
}

/// `Δ(f, g) = ⟨f (−L)^{−1} g⟩_{Λ,m}` for centred `f`, `g`.
pub fn clt_variance(gen: &LocalizedGenerator, f: &[f64], g: &[f64]) -> Result<f64> {
    check_centered(&gen.sector, f)?;
    check_centered(&gen.sector, g)?;
    let u = gen.solve(g)?;
    Ok(gen.sector.mean(&f.iter().zip(&u).map(|(a, b)| a * b).collect::<Vec<_>>()))
}

/// Smallest nonzero eigenvalue of `−L` on the sector.
pub fn spectral_gap(gen: &LocalizedGenerator) -> Result<f64> {
    if gen.len() < 2 {
        return Err(Error::Precondition("sector has a single state".into()));
    }
    if gen.len() <= DENSE_GAP_LIMIT {
        Ok(gap_dense(gen))
    } else {
        gap_inverse_iteration(gen)
    }
}

fn gap_dense(gen: &LocalizedGenerator) -> f64 {
    let mut ev: Vec<f64> = (-gen.to_dense()).symmetric_eigen().eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev[1]
}

/// Inverse iteration on the mean-zero subspace.
fn gap_inverse_iteration(gen: &LocalizedGenerator) -> Result<f64> {
    let n = gen.len();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
    let mut lam = f64::INFINITY;
    for _ in 0..500 {
        let mean = v.iter().sum::<f64>() / n as f64;
        v.iter_mut().for_each(|x| *x -= mean);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        let lv = gen.apply(&v);
        let new = -v.iter().zip(&lv).map(|(a, b)| a * b).sum::<f64>();
        if (new - lam).abs() <= 1e-13 * new.abs() {
            return Ok(new);
        }
        lam = new;
        v = gen.solve(&v)?;
    }
    Ok(lam)
}

/// `A_{ℓ,i} = Σ_{bonds in direction i} (ξ_{x+e_i} − ξ_x)`.
pub fn current_a(gen: &LocalizedGenerator, axis: usize) -> Vec<f64> {
    let bonds: Vec<&BoxBond> = gen.bonds.iter().filter(|b| b.axis == axis).collect();
    gen.sector.tabulate(|s| {
        bonds.iter().map(|b| (s >> b.y & 1) as f64 - (s >> b.x & 1) as f64).sum()
    })
}

/// `B_{ℓ,i} = Σ_{bonds in direction i} c_b (ξ_{x+e_i} − ξ_x)`.
pub fn current_b(gen: &LocalizedGenerator, axis: usize) -> Vec<f64> {
    let sel: Vec<(usize, &BoxBond)> = gen.bonds.iter().enumerate().filter(|(_, b)| b.axis == axis).collect();
    (0..gen.len())
        .map(|i| {
            let s = gen.sector.states[i];
            sel.iter()
                .map(|(k, b)| gen.bond_rate(i, *k) * ((s >> b.y & 1) as f64 - (s >> b.x & 1) as f64))
                .sum()
        })
        .collect()
}

/// `n = r(F) + 1` with the convention `r(F) ≥ 1`.
pub fn h_depth(f: &VectorLocalFunction) -> usize {
    f.radius().max(1) + 1
}

/// `Σ_{y ∈ Λ(ℓ−n)} τ_y g` as a sector function.
pub fn shifted_sum(gen: &LocalizedGenerator, g: &LocalFunction, n: usize) -> Result<Vec<f64>> {
    let inner = gen
        .sector
        .geometry
        .shrink(n)
        .ok_or_else(|| Error::Precondition(format!("n = {n} exceeds the box radius")))?;
    let mut acc = vec![0.0; gen.len()];
    for y in inner.sites() {
        let t = gen.sector.tabulate_local(g, y)?;
        acc.iter_mut().zip(&t).for_each(|(a, b)| *a += b);
    }
    Ok(acc)
}

/// `H_{ℓ,i} = L(Σ_{y∈Λ(ℓ−n)} τ_y F_i)`.
pub fn current_h(gen: &LocalizedGenerator, f: &VectorLocalFunction, axis: usize) -> Result<Vec<f64>> {
    Ok(gen.apply(&shifted_sum(gen, &f.components[axis], h_depth(f))?))
}

fn combine(parts: &[Vec<f64>], theta: &[f64]) -> Vec<f64> {
    let n = parts[0].len();
    (0..n).map(|s| parts.iter().zip(theta).map(|(p, t)| p[s] * t).sum()).collect()
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct IdentityCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
}

/// `θ·(B − H)` as a sector function.
fn b_minus_h(gen: &LocalizedGenerator, f: &VectorLocalFunction, theta: &[f64]) -> Result<Vec<f64>> {
    let d = theta.len();
    let b: Vec<Vec<f64>> = (0..d).map(|i| current_b(gen, i)).collect();
    let h: Vec<Vec<f64>> = (0..d).map(|i| current_h(gen, f, i)).collect::<Result<_>>()?;
    let b = combine(&b, theta);
    let h = combine(&h, theta);
    Ok(b.iter().zip(&h).map(|(x, y)| x - y).collect())
}

/// Both sides of the Dirichlet-form identity for `ℓ_*^{−d} Δ(θ·(B − H))`.
pub fn dirichlet_identity_check(
    gen: &LocalizedGenerator,
    f: &VectorLocalFunction,
    theta: &[f64],
) -> Result<IdentityCheck> {
    let vol = gen.sector.volume() as f64;
    let g = b_minus_h(gen, f, theta)?;
    let lhs = clt_variance(gen, &g, &g)? / vol;

    let phi_f = shifted_sum(gen, &f.dot(theta)?, h_depth(f))?;
    let sector = &gen.sector;
    let total: f64 = (0..gen.len())
        .into_par_iter()
        .map(|i| {
            let s = sector.states[i];
            gen.bonds
                .iter()
                .enumerate()
                .map(|(k, b)| {
                    let (ox, oy) = ((s >> b.x & 1) as f64, (s >> b.y & 1) as f64);
                    let swapped = if ox != oy { sector.rank(s ^ (1 << b.x) ^ (1 << b.y)) } else { i };
                    let pb = phi_f[swapped] - phi_f[i];
                    let v = theta[b.axis] * (oy - ox) - pb;
                    gen.bond_rate(i, k) * v * v
                })
                .sum::<f64>()
        })
        .sum();
    let rhs = 0.5 * total / (gen.len() as f64 * vol);
    Ok(IdentityCheck { lhs, rhs, gap: (lhs - rhs).abs() })
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct CrossCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
    /// `rhs − (θ·θ̃) χ(m/ℓ_*^d)`.
    pub q5: f64,
}

/// Both sides of the covariance identity for `ℓ_*^{−d} Δ(θ̃·A, θ·(B − H))`.
pub fn cross_identity_check(
    gen: &LocalizedGenerator,
    f: &VectorLocalFunction,
    theta: &[f64],
    theta_t: &[f64],
) -> Result<CrossCheck> {
    let d = theta.len();
    let vol = gen.sector.volume() as f64;
    let a: Vec<Vec<f64>> = (0..d).map(|i| current_a(gen, i)).collect();
    let a = combine(&a, theta_t);
    let g = b_minus_h(gen, f, theta)?;
    let lhs = clt_variance(gen, &a, &g)? / vol;

    let phi_f = shifted_sum(gen, &f.dot(theta)?, h_depth(f))?;
    let sites = &gen.sector.sites;
    let phi = gen.sector.tabulate(|s| {
        (0..sites.len()).filter(|&k| s >> k & 1 == 1).map(|k| sites[k].dot(theta)).sum::<f64>()
    });
    let cov: Vec<f64> = (0..gen.len()).map(|i| a[i] * (phi[i] + phi_f[i])).collect();
    let rhs = gen.sector.mean(&cov) / vol;
    let dot: f64 = theta.iter().zip(theta_t).map(|(x, y)| x * y).sum();
    Ok(CrossCheck { lhs, rhs, gap: (lhs - rhs).abs(), q5: rhs - dot * compressibility(gen.sector.density()) })
}

/// One row of the CLT-variance decay sweep.
#[derive(Clone, Debug, Serialize)]
pub struct DecayRow {
    pub d: usize,
    pub l: usize,
    pub sectors: usize,
    /// `sup |ℓ_*^{−d} Δ(θ·A) − 2 (θ·ĉ^{−1}θ) χ²|`.
    pub q6: f64,
    /// `sup |ℓ_*^{−d} Δ(θ·(B−H)) − ½ θ·ĉ(ρ;F)θ|`.
    pub q4: f64,
    /// `sup |Q^{(5)}|`.
    pub q5: f64,
}

/// Per-sector record for CSV output.
#[derive(Clone, Debug, Serialize)]
pub struct SectorRecord {
    pub d: usize,
    pub l: usize,
    pub m: usize,
    pub zeta: String,
    pub quantity: &'static str,
    pub value: f64,
    pub target: f64,
    pub gap: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct DecaySweep {
    pub rows: Vec<DecayRow>,
    pub records: Vec<SectorRecord>,
    pub q6_exponent: Option<f64>,
    pub q4_exponent: Option<f64>,
    pub q5_exponent: Option<f64>,
}

/// `2 (θ·ĉ^{−1}θ) χ²`, read as 0 where `χ = 0`.
fn q6_target(c_hat: &DMatrix<f64>, theta: &[f64], rho: f64) -> f64 {
    let chi = compressibility(rho);
    if chi == 0.0 {
        return 0.0;
    }
    let t = nalgebra::DVector::from_column_slice(theta);
    let inv = c_hat.clone().try_inverse().unwrap_or_else(|| DMatrix::zeros(t.len(), t.len()));
    2.0 * (t.transpose() * inv * &t)[(0, 0)] * chi * chi
}

/// Sweep cubes `Λ(ℓ)`, all feasible sectors and sampled boundaries.
pub fn variance_decay_sweep(
    model: &RateModel,
    f: &VectorLocalFunction,
    ls: &[usize],
    theta: &[f64],
    boundaries: &[Boundary],
    c_hat_ref: &(dyn Fn(f64) -> DMatrix<f64> + Sync),
) -> Result<DecaySweep> {
    let d = model.dim;
    let corrected = CorrectedConductivity::new(model, f)?;
    let tnorm = nalgebra::DVector::from_column_slice(theta);
    let mut rows = vec![];
    let mut records = vec![];
    for &l in ls {
        let geom = BoxGeometry::cube(d, l);
        let vol = geom.volume();
        let with_h = geom.shrink(h_depth(f)).is_some();
        let ms: Vec<usize> = (0..=vol).filter(|&m| binomial_u128(vol, m) <= SECTOR_CAP as u128).collect();
        let tasks: Vec<(usize, Boundary)> =
            ms.iter().flat_map(|&m| boundaries.iter().map(move |&b| (m, b))).collect();
        let out: Vec<Vec<SectorRecord>> = tasks
            .par_iter()
            .map(|&(m, zeta)| {
                let gen = LocalizedGenerator::build(model, geom.clone(), zeta, m)?;
                let rho = m as f64 / vol as f64;
                let a: Vec<Vec<f64>> = (0..d).map(|i| current_a(&gen, i)).collect();
                let a = combine(&a, theta);
                let v6 = if gen.len() > 1 { clt_variance(&gen, &a, &a)? / vol as f64 } else { 0.0 };
                let t6 = q6_target(&c_hat_ref(rho), theta, rho);
                let mut recs = vec![SectorRecord {
                    d,
                    l,
                    m,
                    zeta: zeta.label(),
                    quantity: "q6",
                    value: v6,
                    target: t6,
                    gap: (v6 - t6).abs(),
                }];
                if with_h {
                    let id = if gen.len() > 1 {
                        dirichlet_identity_check(&gen, f, theta)?
                    } else {
                        IdentityCheck { lhs: 0.0, rhs: 0.0, gap: 0.0 }
                    };
                    let c = corrected.eval(rho);
                    let t4 = 0.5 * (tnorm.transpose() * &c * &tnorm)[(0, 0)];
                    recs.push(SectorRecord {
                        d,
                        l,
                        m,
                        zeta: zeta.label(),
                        quantity: "q4",
                        value: id.lhs,
                        target: t4,
                        gap: (id.lhs - t4).abs(),
                    });
                    let cr = if gen.len() > 1 {
                        cross_identity_check(&gen, f, theta, theta)?
                    } else {
                        CrossCheck { lhs: 0.0, rhs: 0.0, gap: 0.0, q5: 0.0 }
                    };
                    let t5 = theta.iter().map(|x| x * x).sum::<f64>() * compressibility(rho);
                    recs.push(SectorRecord {
                        d,
                        l,
                        m,
                        zeta: zeta.label(),
                        quantity: "q5",
                        value: cr.rhs,
                        target: t5,
                        gap: cr.q5.abs(),
                    });
                }
                Ok(recs)
            })
            .collect::<Result<_>>()?;
        let flat: Vec<SectorRecord> = out.into_iter().flatten().collect();
        let sup = |q: &str| flat.iter().filter(|r| r.quantity == q).map(|r| r.gap).fold(f64::NAN, f64::max);
        rows.push(DecayRow { d, l, sectors: tasks.len(), q6: sup("q6"), q4: sup("q4"), q5: sup("q5") });
        records.extend(flat);
    }
    let fit = |sel: fn(&DecayRow) -> f64| {
        let pts: Vec<(f64, f64)> =
            rows.iter().filter(|r| sel(r) > 1e-12 && sel(r).is_finite()).map(|r| (r.l as f64, sel(r))).collect();
        (pts.len() >= 2).then(|| {
            let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
            -loglog_slope(&x, &y)
        })
    };
    Ok(DecaySweep {
        q6_exponent: fit(|r| r.q6),
        q4_exponent: fit(|r| r.q4),
        q5_exponent: fit(|r| r.q5),
        rows,
        records,
    })
}

/// Spectral gaps of `−L` on `Λ(ℓ)` at the half-filled sector, and the fitted
/// exponent of `gap ~ ℓ_*^{−α}` together with `C₀ = min gap·ℓ²`.
#[derive(Clone, Debug, Serialize)]
pub struct GapSweep {
    pub ls: Vec<usize>,
    pub gaps: Vec<f64>,
    pub slope_vs_side: f64,
    pub c0: f64,
}

pub fn gap_sweep(model: &RateModel, ls: &[usize], boundary: Boundary) -> Result<GapSweep> {
    let d = model.dim;
    let gaps: Vec<f64> = ls
        .iter()
        .map(|&l| {
            let geom = BoxGeometry::cube(d, l);
            let m = geom.volume() / 2;
            spectral_gap(&LocalizedGenerator::build(model, geom, boundary, m)?)
        })
        .collect::<Result<_>>()?;
    let sides: Vec<f64> = ls.iter().map(|&l| (2 * l + 1) as f64).collect();
    let slope = loglog_slope(&sides, &gaps);
    let c0 = ls.iter().zip(&gaps).map(|(&l, g)| g * (l * l) as f64).fold(f64::INFINITY, f64::min);
    Ok(GapSweep { ls: ls.to_vec(), gaps, slope_vs_side: slope, c0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::ensemble_average;

    fn ssep1() -> RateModel {
        RateModel::ssep(1)
    }

    #[test]
    fn ranks_are_positions() {
        let s = Sector::new(BoxGeometry::cube(1, 3), 3).unwrap();
        for (i, &st) in s.states.iter().enumerate() {
            assert_eq!(s.rank(st), i);
        }
        assert_eq!(s.len() as f64, crate::measures::binomial(7, 3));
    }

    #[test]
    fn three_site_path_laplacian() {
        let g = LocalizedGenerator::build(&ssep1(), BoxGeometry::cube(1, 1), Boundary::Empty, 1).unwrap();
        let l = g.to_dense();
        // states 001, 010, 100: particle at the left, centre, right site
        let expect = DMatrix::from_row_slice(3, 3, &[-1.0, 1.0, 0.0, 1.0, -2.0, 1.0, 0.0, 1.0, -1.0]);
        assert_eq!(l, expect);
        let empty = LocalizedGenerator::build(&ssep1(), BoxGeometry::cube(1, 1), Boundary::Empty, 0).unwrap();
        assert_eq!(empty.to_dense(), DMatrix::zeros(1, 1));
    }

    #[test]
    fn generator_structure_nongradient_2d() {
        let m = RateModel::nongradient_example(2);
        for zeta in Boundary::samples(3) {
            let g = LocalizedGenerator::build(&m, BoxGeometry::cube(2, 1), zeta, 4).unwrap();
            let (asym, rows) = g.structure_defects();
            assert_eq!(asym, 0.0);
            assert!(rows < 1e-13);
            let mut ev: Vec<f64> = g.to_dense().symmetric_eigen().eigenvalues.iter().copied().collect();
            ev.sort_by(|a, b| b.total_cmp(a));
            assert!(ev[0].abs() < 1e-12 && ev[1] < -1e-8, "kernel must be one-dimensional");
            assert!(ev.iter().all(|&v| v < 1e-12));
        }
    }

    #[test]
    fn three_site_variance_oracle() {
        let g = LocalizedGenerator::build(&ssep1(), BoxGeometry::cube(1, 1), Boundary::Empty, 1).unwrap();
        // f = ξ_0 − 1/3 (centre site) = (−1/3, 2/3, −1/3) over states (left, centre, right)
        let f = vec![-1.0 / 3.0, 2.0 / 3.0, -1.0 / 3.0];
        let delta = clt_variance(&g, &f, &f).unwrap();
        let eig = (-g.to_dense()).symmetric_eigen();
        let mut oracle = 0.0;
        for k in 0..3 {
            let lam = eig.eigenvalues[k];
            if lam > 1e-12 {
                let v = eig.eigenvectors.column(k);
                let c: f64 = v.iter().zip(&f).map(|(a, b)| a * b).sum();
                oracle += c * c / lam / 3.0;
            }
        }
        assert!((delta - oracle).abs() < 1e-13);
        assert!((delta - 2.0 / 27.0).abs() < 1e-13);
        let gap = spectral_gap(&g).unwrap();
        assert!(delta >= f.iter().map(|x| x * x).sum::<f64>() / 3.0 / 3.0 - 1e-15);
        assert!((gap - 1.0).abs() < 1e-12);
        assert_eq!(clt_variance(&g, &[0.0; 3], &[0.0; 3]).unwrap(), 0.0);
        assert!(matches!(clt_variance(&g, &[1.0; 3], &[0.0; 3]), Err(Error::NotCentered { .. })));
    }

    #[test]
    fn two_site_gap() {
        let g = LocalizedGenerator::build(&ssep1(), BoxGeometry { lo: vec![0], hi: vec![1] }, Boundary::Empty, 1)
            .unwrap();
        assert!((spectral_gap(&g).unwrap() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn ssep_gap_matches_random_walk() {
        for l in 2..=5 {
            let g = LocalizedGenerator::build(&ssep1(), BoxGeometry::cube(1, l), Boundary::Empty, 2 * l).unwrap();
            let side = (2 * l + 1) as f64;
            let exact = 2.0 * (1.0 - (std::f64::consts::PI / side).cos());
            assert!((spectral_gap(&g).unwrap() - exact).abs() < 1e-10);
        }
    }

    #[test]
    fn gap_slope() {
        let s = gap_sweep(&ssep1(), &[2, 3, 4, 5], Boundary::Empty).unwrap();
        assert!((s.slope_vs_side + 2.0).abs() < 0.3, "{s:?}");
        let n = gap_sweep(&RateModel::nongradient_example(1), &[2, 3, 4, 5], Boundary::Checkerboard).unwrap();
        assert!(n.gaps.iter().all(|&g| g > 0.0));
        assert!((n.slope_vs_side + 2.0).abs() < 0.3, "{n:?}");
    }

    #[test]
    fn inverse_iteration_agrees_with_dense() {
        let m = RateModel::nongradient_example(1);
        let g = LocalizedGenerator::build(&m, BoxGeometry::cube(1, 5), Boundary::Full, 5).unwrap();
        let dense = gap_dense(&g);
        let iter = gap_inverse_iteration(&g).unwrap();
        assert!((dense - iter).abs() < 1e-8 * dense, "{dense} vs {iter}");
    }

    #[test]
    fn b_is_minus_generator_of_position() {
        let m = RateModel::nongradient_example(2);
        let g = LocalizedGenerator::build(&m, BoxGeometry::cube(2, 1), Boundary::Checkerboard, 4).unwrap();
        for axis in 0..2 {
            let sites = g.sector.sites.clone();
            let pos = g.sector.tabulate(|s| {
                (0..sites.len()).filter(|&k| s >> k & 1 == 1).map(|k| sites[k].0[axis] as f64).sum()
            });
            let lpos = g.apply(&pos);
            let b = current_b(&g, axis);
            assert!(b.iter().zip(&lpos).all(|(x, y)| (x + y).abs() < 1e-13));
        }
    }

    #[test]
    fn dirichlet_identity_ssep_all_sectors() {
        for m in 0..=5 {
            let g = LocalizedGenerator::build(&ssep1(), BoxGeometry::cube(1, 2), Boundary::Empty, m).unwrap();
            let zero = VectorLocalFunction::zero(1);
            if g.len() == 1 {
                continue;
            }
            let c = dirichlet_identity_check(&g, &zero, &[1.0]).unwrap();
            assert!(c.gap <= 1e-10, "m={m}: {c:?}");
        }
        let g0 = LocalizedGenerator::build(&RateModel::nongradient_example(1), BoxGeometry::cube(1, 3), Boundary::Full, 0)
            .unwrap();
        let f = VectorLocalFunction { components: vec![LocalFunction::parse(1, "(0) (1) -> 0 1 2 3").unwrap()] };
        let c = dirichlet_identity_check(&g0, &f, &[1.0]).unwrap();
        assert_eq!((c.lhs, c.rhs), (0.0, 0.0));
    }

    fn random_f_2d() -> VectorLocalFunction {
        VectorLocalFunction {
            components: vec![
                LocalFunction::parse(2, "(0,0) (1,0) (0,1) -> 0.1 -0.4 0.3 0.9 -0.2 0.5 0.0 -0.7").unwrap(),
                LocalFunction::parse(2, "(-1,0) (0,0) (1,1) -> 0.6 0.2 -0.5 0.1 0.3 -0.8 0.4 0.05").unwrap(),
            ],
        }
    }

    #[test]
    fn identities_2d_random_corrector() {
        let m = RateModel::nongradient_example(2);
        let f = random_f_2d();
        // r(F) = 1 needs n = 2 layers inside the box: Λ(1) is too small
        let small = LocalizedGenerator::build(&m, BoxGeometry::cube(2, 1), Boundary::Empty, 3).unwrap();
        assert!(matches!(dirichlet_identity_check(&small, &f, &[1.0, 0.0]), Err(Error::Precondition(_))));
        for (mm, zeta) in [(2, Boundary::Checkerboard), (3, Boundary::Random(1)), (23, Boundary::Full)] {
            let g = LocalizedGenerator::build(&m, BoxGeometry::cube(2, 2), zeta, mm).unwrap();
            let theta = [0.6, -0.8];
            let c = dirichlet_identity_check(&g, &f, &theta).unwrap();
            assert!(c.gap <= 1e-9 * c.lhs.abs().max(1.0), "{c:?}");
            let x = cross_identity_check(&g, &f, &theta, &[0.0, 1.0]).unwrap();
            assert!(x.gap <= 1e-9, "{x:?}");
        }
    }

    #[test]
    fn cross_identity_ssep() {
        for m in [0, 5] {
            let g = LocalizedGenerator::build(&ssep1(), BoxGeometry::cube(1, 2), Boundary::Empty, m).unwrap();
            let c = cross_identity_check(&g, &VectorLocalFunction::zero(1), &[1.0], &[1.0]).unwrap();
            assert_eq!((c.lhs, c.rhs), (0.0, 0.0));
        }
        // the box current telescopes, so the covariance equals χ(m/ℓ_*) exactly
        for l in 2..=5 {
            let vol = 2 * l + 1;
            let g = LocalizedGenerator::build(&ssep1(), BoxGeometry::cube(1, l), Boundary::Empty, vol / 2).unwrap();
            let c = cross_identity_check(&g, &VectorLocalFunction::zero(1), &[1.0], &[1.0]).unwrap();
            assert!(c.gap <= 1e-10 && c.q5.abs() < 1e-12, "{c:?}");
        }
    }

    #[test]
    fn exchangeability_of_gradients() {
        // ⟨τ_y Ψ_1 ξ_x⟩_{Λ,m} = 0 for x ∉ {y, y+e_1}
        let s = Sector::new(BoxGeometry::cube(1, 3), 3).unwrap();
        let psi = LocalFunction::occupation(1, Offset::new(&[1])).sub(&LocalFunction::occupation(1, Offset::ZERO)).unwrap();
        for y in -3..=2 {
            let py = s.tabulate_local(&psi, Offset::new(&[y])).unwrap();
            for x in -3..=3 {
                if x == y || x == y + 1 {
                    continue;
                }
                let k = s.site_index(Offset::new(&[x])).unwrap();
                let prod: f64 = s.states.iter().zip(&py).map(|(&st, p)| p * (st >> k & 1) as f64).sum();
                assert_eq!(prod, 0.0);
            }
        }
    }

    #[test]
    fn ssep_is_boundary_independent() {
        let geom = BoxGeometry::cube(1, 3);
        let base = LocalizedGenerator::build(&ssep1(), geom.clone(), Boundary::Empty, 3).unwrap();
        let a = current_a(&base, 0);
        let v0 = clt_variance(&base, &a, &a).unwrap();
        for zeta in Boundary::samples(11) {
            let g = LocalizedGenerator::build(&ssep1(), geom.clone(), zeta, 3).unwrap();
            assert_eq!(g.to_dense(), base.to_dense());
            assert_eq!(clt_variance(&g, &a, &a).unwrap(), v0);
        }
    }

    #[test]
    fn sweep_ssep() {
        let m = ssep1();
        let chat = |r: f64| DMatrix::identity(1, 1) * (2.0 * compressibility(r));
        let s = variance_decay_sweep(&m, &VectorLocalFunction::zero(1), &[2, 3, 4], &[1.0], &Boundary::samples(5), &chat)
            .unwrap();
        assert!(s.records.iter().all(|r| r.gap >= 0.0));
        // in d = 1 the SSEP identity ℓ_*^{-1}Δ(A) = χ(m/ℓ_*) is exact
        assert!(s.rows.iter().all(|r| r.q6 < 1e-10 && r.q5 < 1e-10), "{:?}", s.rows);
    }

    #[test]
    fn sweep_ssep_2d_decreases() {
        let m = RateModel::ssep(2);
        let chat = |r: f64| DMatrix::identity(2, 2) * (2.0 * compressibility(r));
        let s = variance_decay_sweep(&m, &VectorLocalFunction::zero(2), &[1, 2], &[1.0, 0.0], &[Boundary::Empty], &chat)
            .unwrap();
        assert!(s.rows[1].q6 < s.rows[0].q6, "{:?}", s.rows);
    }

    #[test]
    fn q4_shrinks_with_box() {
        let m = RateModel::nongradient_example(1);
        let p = crate::conductivity::VariationalProblem::new(&m, 1).unwrap();
        let fopt = p.basis.corrector(&p.minimize(0.5).unwrap().f_opt).unwrap();
        let zero = VectorLocalFunction::zero(1);
        // lhs for a box Λ(l) at m = l, and ½ĉ(ρ;F), ½ĉ(ρ)
        let run = |f: &VectorLocalFunction, l: usize| {
            let geom = BoxGeometry::cube(1, l);
            let rho = l as f64 / geom.volume() as f64;
            let g = LocalizedGenerator::build(&m, geom, Boundary::Checkerboard, l).unwrap();
            let lhs = dirichlet_identity_check(&g, f, &[1.0]).unwrap().lhs;
            let own = 0.5 * CorrectedConductivity::new(&m, f).unwrap().eval(rho)[(0, 0)];
            let best = 0.5 * p.minimize(rho).unwrap().c_hat[(0, 0)];
            (lhs, own, best)
        };
        for f in [&zero, &fopt] {
            let (l3, o3, _) = run(f, 3);
            let (l7, o7, _) = run(f, 7);
            assert!((l7 - o7).abs() < (l3 - o3).abs());
        }
        // against the optimal conductivity the corrector closes part of the gap
        let (lz, _, best) = run(&zero, 5);
        let (lo, _, _) = run(&fopt, 5);
        assert!((lo - best).abs() < (lz - best).abs());
        let s = Sector::new(BoxGeometry::cube(1, 4), 3).unwrap();
        let occ = LocalFunction::occupation(1, Offset::ZERO);
        let eta = s.tabulate_local(&occ, Offset::ZERO).unwrap();
        assert!((s.mean(&eta) - ensemble_average(&occ, s.density())).abs() < 1e-15);
    }
}
