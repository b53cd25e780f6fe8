//! Bernoulli and canonical expectations, thermodynamic functions.

use std::io::Write;

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lattice::{box_offsets, Configuration, Offset, Torus};
use crate::localfn::LocalFunction;
use crate::poly::Polynomial;

/// Product Bernoulli measure `ν_ρ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BernoulliMeasure {
    pub rho: f64,
}

impl BernoulliMeasure {
    pub fn new(rho: f64) -> Result<BernoulliMeasure> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::Precondition(format!("density {rho} outside [0,1]")));
        }
        Ok(BernoulliMeasure { rho })
    }

    pub fn expect(&self, f: &LocalFunction) -> f64 {
        ensemble_average(f, self.rho)
    }
}

/// Uniform measure on configurations of `box_sites` with exactly `m` particles.
#[derive(Clone, Debug, PartialEq)]
pub struct CanonicalMeasure {
    pub box_sites: Vec<Offset>,
    pub m: usize,
}

impl CanonicalMeasure {
    pub fn new(box_sites: Vec<Offset>, m: usize) -> Result<CanonicalMeasure> {
        if m > box_sites.len() {
            return Err(Error::Precondition(format!("{m} particles in a box of {} sites", box_sites.len())));
        }
        Ok(CanonicalMeasure { box_sites, m })
    }

    /// Sup-norm box `Λ(ℓ)` in dimension `d`.
    pub fn on_box(d: usize, l: usize, m: usize) -> Result<CanonicalMeasure> {
        CanonicalMeasure::new(box_offsets(d, l), m)
    }

    pub fn volume(&self) -> usize {
        self.box_sites.len()
    }

    pub fn density(&self) -> f64 {
        self.m as f64 / self.volume() as f64
    }
}

/// Sums of table values grouped by the number of occupied support sites.
fn popcount_sums(f: &LocalFunction) -> Vec<f64> {
    let k = f.support().len();
    let mut s = vec![0.0; k + 1];
    for (idx, v) in f.table().iter().enumerate() {
        s[idx.count_ones() as usize] += v;
    }
    s
}

/// `⟨f⟩_ρ`, exact over the truth table.
pub fn ensemble_average(f: &LocalFunction, rho: f64) -> f64 {
    let k = f.support().len();
    popcount_sums(f)
        .iter()
        .enumerate()
        .map(|(j, s)| s * rho.powi(j as i32) * (1.0 - rho).powi((k - j) as i32))
        .sum()
}

/// Exact coefficients of `ρ ↦ ⟨f⟩_ρ`.
pub fn ensemble_average_polynomial(f: &LocalFunction) -> Polynomial {
    let k = f.support().len();
    let sums = popcount_sums(f);
    let mut coeffs = vec![0.0; k + 1];
    // ρ^j (1-ρ)^{k-j} = Σ_i C(k-j, i) (-1)^i ρ^{j+i}
    for (j, s) in sums.iter().enumerate() {
        if *s == 0.0 {
            continue;
        }
        let mut binom = 1.0;
        for i in 0..=(k - j) {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            coeffs[j + i] += sign * binom * s;
            binom = binom * (k - j - i) as f64 / (i + 1) as f64;
        }
    }
    Polynomial::new(coeffs)
}

/// `n (n-1) ... (n-k+1)`.
fn falling(n: usize, k: usize) -> f64 {
    (0..k).map(|i| (n - i) as f64).product()
}

/// `⟨f⟩_{Λ,m}`. By exchangeability the law of the restriction to the support
/// is hypergeometric, so the average is a finite sum over the truth table.
pub fn canonical_average(f: &LocalFunction, mu: &CanonicalMeasure) -> Result<f64> {
    if f.support().iter().any(|z| !mu.box_sites.contains(z)) {
        return Err(Error::SupportEscape);
    }
    let (n, m, k) = (mu.volume(), mu.m, f.support().len());
    let total = falling(n, k);
    Ok(popcount_sums(f)
        .iter()
        .enumerate()
        .filter(|&(j, _)| j <= m && k - j <= n - m)
        .map(|(j, s)| s * falling(m, j) * falling(n - m, k - j) / total)
        .sum())
}

/// `|⟨h⟩_{Λ(ℓ),m} − ⟨h⟩_{m/ℓ_*^d}|`.
pub fn equivalence_gap(h: &LocalFunction, l: usize, m: usize, d: usize) -> Result<f64> {
    let mu = CanonicalMeasure::on_box(d, l, m)?;
    let c = canonical_average(h, &mu)?;
    Ok((c - ensemble_average(h, mu.density())).abs())
}

/// `C(n, k)` as a float.
pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Lexicographic enumeration of `k`-subsets of `0..n` as bitmasks (`n ≤ 64`).
pub struct Combinations {
    n: usize,
    next: Option<u64>,
}

impl Combinations {
    pub fn new(n: usize, k: usize) -> Combinations {
        assert!(n <= 64 && k <= n);
        let first = if k == 0 { 0 } else if k == 64 { u64::MAX } else { (1u64 << k) - 1 };
        Combinations { n, next: Some(first) }
    }
}

impl Iterator for Combinations {
    type Item = u64;

    fn next(&mut self) -> Option<u64> {
        let cur = self.next?;
        // Gosper's hack
        self.next = if cur == 0 {
            None
        } else {
            let c = cur & cur.wrapping_neg();
            let r = cur.wrapping_add(c);
            if r == 0 {
                None
            } else {
                let nxt = (((r ^ cur) >> 2) / c) | r;
                if self.n < 64 && nxt >> self.n != 0 {
                    None
                } else {
                    Some(nxt)
                }
            }
        };
        Some(cur)
    }
}

/// Canonical average by explicit enumeration of all `C(|Λ|, m)` configurations.
pub fn canonical_average_enumerated(f: &LocalFunction, mu: &CanonicalMeasure) -> Result<f64> {
    let n = mu.volume();
    if n > 64 {
        return Err(Error::SectorTooLarge { states: 1u128 << 64, cap: 64 });
    }
    if f.support().iter().any(|z| !mu.box_sites.contains(z)) {
        return Err(Error::SupportEscape);
    }
    let pos: Vec<usize> = f.support().iter().map(|z| mu.box_sites.iter().position(|w| w == z).unwrap()).collect();
    let (mut sum, mut count) = (0.0, 0u64);
    for mask in Combinations::new(n, mu.m) {
        sum += f.eval_with(|z| {
            let k = f.support().iter().position(|&w| w == z).unwrap();
            mask >> pos[k] & 1 == 1
        });
        count += 1;
    }
    Ok(sum / count as f64)
}

/// Thermodynamic functions of the Bernoulli family.
pub mod thermo {
    /// `p(λ) = log(e^λ + 1)`.
    pub fn pressure(lambda: f64) -> f64 {
        if lambda > 0.0 {
            lambda + (-lambda).exp().ln_1p()
        } else {
            lambda.exp().ln_1p()
        }
    }

    /// `q(u) = -u log u - (1-u) log(1-u)`, with `0 log 0 = 0`.
    pub fn entropy(u: f64) -> f64 {
        let xlogx = |x: f64| if x <= 0.0 { 0.0 } else { x * x.ln() };
        -xlogx(u) - xlogx(1.0 - u)
    }

    /// `ρ̄(λ) = p'(λ)`.
    pub fn density_of(lambda: f64) -> f64 {
        if lambda >= 0.0 {
            1.0 / (1.0 + (-lambda).exp())
        } else {
            let e = lambda.exp();
            e / (1.0 + e)
        }
    }

    /// `λ̄(ρ) = log(ρ / (1-ρ))`.
    pub fn chemical_potential(rho: f64) -> f64 {
        (rho / (1.0 - rho)).ln()
    }

    /// `χ(ρ) = ρ - ρ²`.
    pub fn compressibility(rho: f64) -> f64 {
        rho - rho * rho
    }

    /// `I(u; λ) = -λu - q(u) + p(λ)`.
    pub fn rate_function(u: f64, lambda: f64) -> f64 {
        -lambda * u - entropy(u) + pressure(lambda)
    }
}

/// Independent occupancies with `P(η_x = 1) = profile[x]`.
pub fn product_measure_sample<R: Rng + ?Sized>(profile: &[f64], torus: Torus, rng: &mut R) -> Result<Configuration> {
    if profile.len() != torus.volume() {
        return Err(Error::GridMismatch(format!(
            "profile has {} values for {} sites",
            profile.len(),
            torus.volume()
        )));
    }
    if let Some(x) = profile.iter().position(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::ProfileOutOfRange { value: profile[x], at: torus.position(x) });
    }
    Ok(Configuration::from_fn(torus, |x| {
        let p = profile[x];
        p >= 1.0 || (p > 0.0 && rng.random::<f64>() < p)
    }))
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct EquivalenceRow {
    pub d: usize,
    pub l: usize,
    pub m: usize,
    pub density: f64,
    pub gap: f64,
}

/// Sweep `ℓ` at fixed density (particle count rounded to the nearest integer).
pub fn equivalence_sweep(h: &LocalFunction, d: usize, ls: &[usize], density: f64) -> Result<Vec<EquivalenceRow>> {
    ls.iter()
        .map(|&l| {
            let vol = (2 * l + 1).pow(d as u32);
            let m = (density * vol as f64).round() as usize;
            let gap = equivalence_gap(h, l, m, d)?;
            Ok(EquivalenceRow { d, l, m, density: m as f64 / vol as f64, gap })
        })
        .collect()
}

pub fn write_equivalence_csv<W: Write>(out: W, rows: &[EquivalenceRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
