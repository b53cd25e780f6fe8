//! Variational conductivity, diffusion matrix and corrector.
//!
//! With `Ψ_i = η_{e_i} − η_0` and `T_i g = π_{0,e_i} Σ_y τ_y g`, translation
//! invariance folds the two orientations of every bond together:
//!
//! ```text
//! (θ, ĉ(ρ;F) θ) = Σ_i ⟨ c_{0,e_i} (θ_i Ψ_i − T_i(θ·F))² ⟩_ρ
//! ```
//!
//! Only `g = θ·F` enters, so the search space is scalar: the span of monomials
//! `η_S`, `S ⊆ Λ(n)`, one per translation class, singletons excluded
//! (`T_i η_z = 0`). The minimum over that span is `U − R G⁺ Rᵀ`; its
//! minimizer is linear in `θ`, so one corrector `F_i = g_{e_i}` attains every
//! direction at once.
//!
//! Expectations are exact polynomials in `ρ`: functions are expanded in the
//! multilinear basis `η_A`, where `⟨η_A⟩_ρ = ρ^{|A|}`.

use std::collections::{BTreeSet, HashMap};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{box_offsets, Offset};
use crate::localfn::{formal_sum_scalar, LocalFunction, VectorLocalFunction};
use crate::measures::{ensemble_average, thermo::compressibility};
use crate::poly::Polynomial;
use crate::rates::{RateBounds, RateModel};

/// Largest box `Λ(n)` whose subsets are enumerated for the basis.
const MAX_BOX_SITES: usize = 16;
const PINV_CUTOFF: f64 = 1e-10;

mod ml {
    use super::*;

    /// Site labels for bitmask monomials.
    #[derive(Default)]
    pub struct Sites {
        index: HashMap<Offset, u32>,
    }

    impl Sites {
        pub fn mask(&mut self, set: &[Offset]) -> Result<u128> {
            let mut m = 0u128;
            for z in set {
                let next = self.index.len() as u32;
                let k = *self.index.entry(*z).or_insert(next);
                if k >= 128 {
                    return Err(Error::SupportCapExceeded { size: k as usize + 1, cap: 128 });
                }
                m |= 1u128 << k;
            }
            Ok(m)
        }
    }

    /// Sorted, merged `Σ coef · η_A`.
    pub type Ml = Vec<(u128, f64)>;

    pub fn normalize(mut v: Vec<(u128, f64)>) -> Ml {
        v.sort_by_key(|t| t.0);
        let mut out: Ml = Vec::with_capacity(v.len());
        for (m, c) in v {
            match out.last_mut() {
                Some(last) if last.0 == m => last.1 += c,
                _ => out.push((m, c)),
            }
        }
        out.retain(|t| t.1 != 0.0);
        out
    }

    /// Offset-set monomials of a truth table (Möbius inversion).
    pub fn monomials(f: &LocalFunction) -> Vec<(Vec<Offset>, f64)> {
        let k = f.support().len();
        let mut a = f.table().to_vec();
        for bit in 0..k {
            for idx in 0..a.len() {
                if idx >> bit & 1 == 1 {
                    a[idx] -= a[idx ^ (1 << bit)];
                }
            }
        }
        a.iter()
            .enumerate()
            .filter(|(_, &c)| c != 0.0)
            .map(|(idx, &c)| {
                let set = (0..k).filter(|&j| idx >> j & 1 == 1).map(|j| f.support()[j]).collect();
                (set, c)
            })
            .collect()
    }

    pub fn to_ml(terms: &[(Vec<Offset>, f64)], sites: &mut Sites) -> Result<Ml> {
        let v = terms.iter().map(|(s, c)| Ok((sites.mask(s)?, *c))).collect::<Result<Vec<_>>>()?;
        Ok(normalize(v))
    }

    /// `T_e η_A = π_{0,e} Σ_y τ_y η_A` in offset-set form.
    pub fn transport(a: &[Offset], coef: f64, e: Offset, out: &mut Vec<(Vec<Offset>, f64)>) {
        let ys: BTreeSet<Offset> = a.iter().flat_map(|&s| [Offset::ZERO - s, e - s]).collect();
        for y in ys {
            let sh: Vec<Offset> = a.iter().map(|&s| s + y).collect();
            let (h0, he) = (sh.contains(&Offset::ZERO), sh.contains(&e));
            if h0 != he {
                let sw = sh
                    .iter()
                    .map(|&z| if z == Offset::ZERO { e } else if z == e { Offset::ZERO } else { z })
                    .collect();
                out.push((sw, coef));
                out.push((sh, -coef));
            }
        }
    }

    fn accumulate(acc: &mut Vec<f64>, deg: usize, v: f64) {
        if acc.len() <= deg {
            acc.resize(deg + 1, 0.0);
        }
        acc[deg] += v;
    }

    pub fn expect3(a: &Ml, b: &Ml, c: &Ml) -> Polynomial {
        let mut acc = vec![0.0];
        for &(ma, ca) in a {
            for &(mb, cb) in b {
                let mab = ma | mb;
                let cab = ca * cb;
                for &(mc, cc) in c {
                    accumulate(&mut acc, (mab | mc).count_ones() as usize, cab * cc);
                }
            }
        }
        Polynomial::new(acc)
    }
}

/// Monomial indicators `η_S`, one per translation class of `S ⊆ Λ(n)`, `|S| ≥ 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrectorBasis {
    pub dim: usize,
    pub n: usize,
    pub sets: Vec<Vec<Offset>>,
}

impl CorrectorBasis {
    pub fn new(dim: usize, n: usize) -> Result<CorrectorBasis> {
        let cells = box_offsets(dim, n);
        if cells.len() > MAX_BOX_SITES {
            return Err(Error::SupportCapExceeded { size: cells.len(), cap: MAX_BOX_SITES });
        }
        let mut seen = BTreeSet::new();
        let mut sets = vec![];
        for mask in 0u32..1 << cells.len() {
            if mask.count_ones() < 2 {
                continue;
            }
            let s: Vec<Offset> = (0..cells.len()).filter(|&k| mask >> k & 1 == 1).map(|k| cells[k]).collect();
            let anchor = s[0];
            let key: Vec<Offset> = s.iter().map(|&z| z - anchor).collect();
            if seen.insert(key) {
                sets.push(s);
            }
        }
        Ok(CorrectorBasis { dim, n, sets })
    }

    /// Basis from explicit monomial sets (no deduplication).
    pub fn from_sets(dim: usize, n: usize, sets: Vec<Vec<Offset>>) -> CorrectorBasis {
        CorrectorBasis { dim, n, sets }
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    /// `F_i = Σ_k coeffs[(k, i)] η_{S_k}`.
    pub fn corrector(&self, coeffs: &DMatrix<f64>) -> Result<VectorLocalFunction> {
        let d = self.dim;
        let support: Vec<Offset> = self.sets.iter().flatten().copied().collect::<BTreeSet<_>>().into_iter().collect();
        let mut components = vec![];
        for i in 0..d {
            let mut acc = LocalFunction::zero(d).extend_to(&support)?;
            for (k, s) in self.sets.iter().enumerate() {
                let a = coeffs[(k, i)];
                if a != 0.0 {
                    acc = acc.add(&LocalFunction::monomial(d, s)?.scale(a))?;
                }
            }
            components.push(acc.trim());
        }
        Ok(VectorLocalFunction { components })
    }
}

#[derive(Clone, Debug)]
pub struct ConductivityResult {
    pub rho: f64,
    pub n: usize,
    pub c_hat: DMatrix<f64>,
    /// Corrector coefficients, `|basis| × d`.
    pub f_opt: DMatrix<f64>,
    /// Largest gap between the per-direction minima and `(θ, ĉ(ρ;F_opt) θ)`.
    pub residual: f64,
}

/// Exact polynomial data of the minimization at radius `n`.
pub struct VariationalProblem {
    pub dim: usize,
    pub basis: CorrectorBasis,
    u: Vec<Polynomial>,
    r: Vec<Vec<Polynomial>>,
    g: Vec<Polynomial>,
}

impl VariationalProblem {
    pub fn new(model: &RateModel, n: usize) -> Result<VariationalProblem> {
        VariationalProblem::with_basis(model, CorrectorBasis::new(model.dim, n)?)
    }

    pub fn with_basis(model: &RateModel, basis: CorrectorBasis) -> Result<VariationalProblem> {
        let d = model.dim;
        let mut sites = ml::Sites::default();
        let mut u = vec![];
        let mut r = vec![];
        let mut tb_all = vec![];
        let mut c_all = vec![];
        for i in 0..d {
            let e = Offset::unit(i);
            let c = ml::to_ml(&ml::monomials(&model.exchange[i]), &mut sites)?;
            let psi = ml::to_ml(&[(vec![e], 1.0), (vec![Offset::ZERO], -1.0)], &mut sites)?;
            let tb: Vec<ml::Ml> = basis
                .sets
                .iter()
                .map(|s| {
                    let mut out = vec![];
                    ml::transport(s, 1.0, e, &mut out);
                    ml::to_ml(&out, &mut sites)
                })
                .collect::<Result<_>>()?;
            u.push(ml::expect3(&c, &psi, &psi));
            r.push(tb.par_iter().map(|t| ml::expect3(&c, &psi, t)).collect());
            tb_all.push(tb);
            c_all.push(c);
        }
        let k = basis.len();
        let g: Vec<Polynomial> = (0..k * k)
            .into_par_iter()
            .map(|idx| {
                let (a, b) = (idx / k, idx % k);
                if b < a {
                    return Polynomial::constant(0.0);
                }
                (0..d).fold(Polynomial::constant(0.0), |acc, j| {
                    acc.add(&ml::expect3(&c_all[j], &tb_all[j][a], &tb_all[j][b]))
                })
            })
            .collect();
        let mut g = g;
        for a in 0..k {
            for b in 0..a {
                g[a * k + b] = g[b * k + a].clone();
            }
        }
        Ok(VariationalProblem { dim: d, basis, u, r, g })
    }

    pub fn n(&self) -> usize {
        self.basis.n
    }

    /// `(U, R, G)` at density `rho`.
    pub fn matrices(&self, rho: f64) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
        let (d, k) = (self.dim, self.basis.len());
        let u = DVector::from_iterator(d, self.u.iter().map(|p| p.eval(rho)));
        let r = DMatrix::from_fn(d, k, |i, j| self.r[i][j].eval(rho));
        let g = DMatrix::from_fn(k, k, |a, b| self.g[a * k + b].eval(rho));
        (u, r, g)
    }

    /// Minimize at `rho`; `ĉ` is assembled by polarization of per-direction minima.
    pub fn minimize(&self, rho: f64) -> Result<ConductivityResult> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::Precondition(format!("density {rho} outside [0,1]")));
        }
        let d = self.dim;
        let (u, r, g) = self.matrices(rho);
        let gp = pseudo_inverse(&g);
        let min_along = |theta: &DVector<f64>| -> f64 {
            let v = r.transpose() * theta;
            let uu: f64 = (0..d).map(|i| u[i] * theta[i] * theta[i]).sum();
            uu - (v.transpose() * &gp * &v)[(0, 0)]
        };
        let mut c_hat = DMatrix::zeros(d, d);
        let mut probes = vec![];
        for i in 0..d {
            let e = DVector::from_fn(d, |k, _| if k == i { 1.0 } else { 0.0 });
            c_hat[(i, i)] = min_along(&e);
            probes.push(e);
        }
        for i in 0..d {
            for j in i + 1..d {
                let s = std::f64::consts::FRAC_1_SQRT_2;
                let t = DVector::from_fn(d, |k, _| if k == i || k == j { s } else { 0.0 });
                let v = min_along(&t) - 0.5 * (c_hat[(i, i)] + c_hat[(j, j)]);
                c_hat[(i, j)] = v;
                c_hat[(j, i)] = v;
                probes.push(t);
            }
        }
        let f_opt = &gp * r.transpose();
        let attained = corrected_matrix(&u, &r, &g, &f_opt);
        let residual = probes
            .iter()
            .map(|t| ((t.transpose() * &attained * t)[(0, 0)] - min_along(t)).abs())
            .fold(0.0, f64::max);
        Ok(ConductivityResult { rho, n: self.n(), c_hat, f_opt, residual })
    }

    /// `U − R G⁺ Rᵀ`, the matrix-valued minimum computed in one step.
    pub fn direct_matrix(&self, rho: f64) -> DMatrix<f64> {
        let (u, r, g) = self.matrices(rho);
        DMatrix::from_diagonal(&u) - &r * pseudo_inverse(&g) * r.transpose()
    }
}

/// `ĉ(ρ;F)` for `F` in the span: `U − R A − AᵀRᵀ + AᵀGA`.
fn corrected_matrix(u: &DVector<f64>, r: &DMatrix<f64>, g: &DMatrix<f64>, a: &DMatrix<f64>) -> DMatrix<f64> {
    let ra = r * a;
    DMatrix::from_diagonal(u) - &ra - ra.transpose() + a.transpose() * g * a
}

/// Least-norm pseudo-inverse of a symmetric positive semidefinite matrix.
pub fn pseudo_inverse(g: &DMatrix<f64>) -> DMatrix<f64> {
    let n = g.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let eig = g.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, &v| m.max(v));
    let cut = PINV_CUTOFF * max;
    let mut out = DMatrix::zeros(n, n);
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > cut && lam > 0.0 {
            let v = eig.eigenvectors.column(k);
            out += (v * v.transpose()) / lam;
        }
    }
    out
}

/// `ĉ(ρ;F)` as exact polynomial entries, for any local `F`.
pub struct CorrectedConductivity {
    dim: usize,
    entries: Vec<Polynomial>,
}

impl CorrectedConductivity {
    pub fn new(model: &RateModel, f: &VectorLocalFunction) -> Result<CorrectedConductivity> {
        let d = model.dim;
        if f.dim() != d {
            return Err(Error::Precondition("corrector dimension does not match the model".into()));
        }
        let mut sites = ml::Sites::default();
        let mono: Vec<Vec<(Vec<Offset>, f64)>> = f.components.iter().map(ml::monomials).collect();
        let mut entries = vec![Polynomial::constant(0.0); d * d];
        for k in 0..d {
            let e = Offset::unit(k);
            let c = ml::to_ml(&ml::monomials(&model.exchange[k]), &mut sites)?;
            let h: Vec<ml::Ml> = (0..d)
                .map(|i| {
                    let mut out = vec![];
                    if i == k {
                        out.push((vec![e], 1.0));
                        out.push((vec![Offset::ZERO], -1.0));
                    }
                    for (a, coef) in &mono[i] {
                        ml::transport(a, -coef, e, &mut out);
                    }
                    ml::to_ml(&out, &mut sites)
                })
                .collect::<Result<_>>()?;
            for i in 0..d {
                for j in i..d {
                    let p = ml::expect3(&c, &h[i], &h[j]);
                    entries[i * d + j] = entries[i * d + j].add(&p);
                }
            }
        }
        for i in 0..d {
            for j in 0..i {
                entries[i * d + j] = entries[j * d + i].clone();
            }
        }
        Ok(CorrectedConductivity { dim: d, entries })
    }

    pub fn eval(&self, rho: f64) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.dim, |i, j| self.entries[i * self.dim + j].eval(rho))
    }
}

/// `(θ, ĉ(ρ;F) θ)` by truth-table enumeration of the bond sum over `|x| = 1`.
pub fn quadratic_form(model: &RateModel, rho: f64, theta: &[f64], f: &VectorLocalFunction) -> Result<f64> {
    let d = model.dim;
    let g = f.dot(theta)?;
    let mut total = 0.0;
    for i in 0..d {
        let e = Offset::unit(i);
        for forward in [true, false] {
            let x = if forward { e } else { -e };
            let c = model.bond_rate(i, forward);
            let tx = x.dot(theta);
            let psi = LocalFunction::occupation(d, x).sub(&LocalFunction::occupation(d, Offset::ZERO))?;
            let tg = formal_sum_scalar(&g, Offset::ZERO, x)?;
            let h = psi.scale(tx).sub(&tg)?;
            let integrand = c.mul(&h.mul(&h)?)?;
            total += 0.5 * ensemble_average(&integrand, rho);
        }
    }
    Ok(total)
}

/// `D = ĉ / (2χ)`, with the bounds `c_* ≤ D ≤ c^*` asserted.
pub fn diffusion_matrix(result: &ConductivityResult, bounds: &RateBounds) -> Result<DMatrix<f64>> {
    let rho = result.rho;
    if rho <= 0.0 || rho >= 1.0 {
        return Err(Error::EndpointDensity(rho));
    }
    let dm = &result.c_hat / (2.0 * compressibility(rho));
    check_bounds(rho, &dm, bounds, 1e-10)?;
    Ok(dm)
}

fn check_bounds(rho: f64, dm: &DMatrix<f64>, bounds: &RateBounds, tol: f64) -> Result<()> {
    let eig = dm.clone().symmetric_eigen();
    for &v in eig.eigenvalues.iter() {
        if v < bounds.c_min - tol || v > bounds.c_max + tol {
            return Err(Error::BoundsViolation { rho, eigenvalue: v, lower: bounds.c_min, upper: bounds.c_max });
        }
    }
    Ok(())
}

/// `R(ρ;F) = ĉ(ρ;F) − ĉ_ref(ρ)`.
pub fn remainder(corrected: &CorrectedConductivity, reference: &ConductivityResult) -> DMatrix<f64> {
    corrected.eval(reference.rho) - &reference.c_hat
}

/// Largest absolute eigenvalue.
pub fn operator_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigen().eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()))
}

/// Entrywise monotone cubic (PCHIP) interpolation of `D` on a density grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiffusionTable {
    pub dim: usize,
    /// Nodes, including the extrapolated endpoints 0 and 1.
    pub rho: Vec<f64>,
    /// Row-major `d × d` matrix at every node.
    pub values: Vec<Vec<f64>>,
    #[serde(skip)]
    slopes: Vec<Vec<f64>>,
}

impl DiffusionTable {
    /// Build from interior nodes; `D(0)`, `D(1)` come from quadratic
    /// extrapolation through the three nearest nodes.
    pub fn from_interior(dim: usize, rho: Vec<f64>, values: Vec<Vec<f64>>) -> Result<DiffusionTable> {
        if rho.len() < 3 || rho.len() != values.len() {
            return Err(Error::Precondition("need at least three interior nodes with values".into()));
        }
        if rho.windows(2).any(|w| w[1] <= w[0]) || rho[0] <= 0.0 || *rho.last().unwrap() >= 1.0 {
            return Err(Error::Precondition("interior nodes must be increasing in (0,1)".into()));
        }
        let n = rho.len();
        let extrap = |idx: [usize; 3], x: f64| -> Vec<f64> {
            let xs = idx.map(|k| rho[k]);
            (0..dim * dim)
                .map(|e| {
                    let ys = idx.map(|k| values[k][e]);
                    lagrange3(xs, ys, x)
                })
                .collect()
        };
        let mut all_rho = vec![0.0];
        all_rho.extend(&rho);
        all_rho.push(1.0);
        let mut all_vals = vec![extrap([0, 1, 2], 0.0)];
        all_vals.extend(values.iter().cloned());
        all_vals.push(extrap([n - 3, n - 2, n - 1], 1.0));
        DiffusionTable::from_nodes(dim, all_rho, all_vals)
    }

    pub fn from_nodes(dim: usize, rho: Vec<f64>, values: Vec<Vec<f64>>) -> Result<DiffusionTable> {
        if values.iter().any(|v| v.len() != dim * dim) {
            return Err(Error::Precondition("node matrix has the wrong size".into()));
        }
        let slopes = (0..dim * dim)
            .map(|e| {
                let ys: Vec<f64> = values.iter().map(|v| v[e]).collect();
                pchip_slopes(&rho, &ys)
            })
            .collect();
        Ok(DiffusionTable { dim, rho, values, slopes })
    }

    /// Constant table.
    pub fn constant(m: &DMatrix<f64>) -> DiffusionTable {
        let d = m.nrows();
        let v: Vec<f64> = (0..d * d).map(|k| m[(k / d, k % d)]).collect();
        DiffusionTable::from_nodes(d, vec![0.0, 1.0], vec![v.clone(), v]).unwrap()
    }

    pub fn rebuild_slopes(&mut self) {
        let t = DiffusionTable::from_nodes(self.dim, self.rho.clone(), self.values.clone()).unwrap();
        self.slopes = t.slopes;
    }

    pub fn eval(&self, rho: f64) -> DMatrix<f64> {
        let d = self.dim;
        let (k, h, w) = self.locate(rho);
        let mut m = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in i..d {
                let v = self.hermite(i * d + j, k, h, w);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }

    /// Entry `D_ij(ρ)` without building the matrix.
    pub fn entry(&self, rho: f64, i: usize, j: usize) -> f64 {
        let (k, h, w) = self.locate(rho);
        self.hermite(i * self.dim + j, k, h, w)
    }

    fn locate(&self, rho: f64) -> (usize, f64, [f64; 4]) {
        let x = rho.clamp(self.rho[0], *self.rho.last().unwrap());
        let k = match self.rho.binary_search_by(|v| v.total_cmp(&x)) {
            Ok(k) => k.min(self.rho.len() - 2),
            Err(k) => k - 1,
        };
        let (x0, x1) = (self.rho[k], self.rho[k + 1]);
        let h = x1 - x0;
        let t = (x - x0) / h;
        let w = [
            (1.0 + 2.0 * t) * (1.0 - t) * (1.0 - t),
            t * (1.0 - t) * (1.0 - t),
            t * t * (3.0 - 2.0 * t),
            t * t * (t - 1.0),
        ];
        (k, h, w)
    }

    fn hermite(&self, e: usize, k: usize, h: f64, w: [f64; 4]) -> f64 {
        w[0] * self.values[k][e]
            + w[1] * h * self.slopes[e][k]
            + w[2] * self.values[k + 1][e]
            + w[3] * h * self.slopes[e][k + 1]
    }

    /// Largest off-diagonal entry over the nodes.
    pub fn max_off_diagonal(&self) -> f64 {
        let d = self.dim;
        self.values
            .iter()
            .flat_map(|v| (0..d * d).filter(move |e| e / d != e % d).map(move |e| v[e].abs()))
            .fold(0.0, f64::max)
    }

    /// Extreme eigenvalues of the interpolant over a uniform scan of `[0,1]`.
    pub fn eigenvalue_range(&self, samples: usize) -> (f64, f64) {
        (0..=samples).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), k| {
            let e = self.eval(k as f64 / samples as f64).symmetric_eigen();
            let (a, b) = e.eigenvalues.iter().fold((lo, hi), |(l, h), &v| (l.min(v), h.max(v)));
            (a, b)
        })
    }

    /// Interior Chebyshev–Lobatto nodes `(1 − cos(kπ/m))/2`, `k = 1..m−1`,
    /// clustered at the endpoints where `D` is extrapolated.
    pub fn chebyshev_grid(m: usize) -> Vec<f64> {
        (1..m).map(|k| 0.5 * (1.0 - (k as f64 * std::f64::consts::PI / m as f64).cos())).collect()
    }

    /// Interior nodes `k / m`, `k = 1..m−1`.
    pub fn uniform_grid(m: usize) -> Vec<f64> {
        (1..m).map(|k| k as f64 / m as f64).collect()
    }
}

fn lagrange3(xs: [f64; 3], ys: [f64; 3], x: f64) -> f64 {
    (0..3)
        .map(|i| {
            let w: f64 = (0..3).filter(|&j| j != i).map(|j| (x - xs[j]) / (xs[i] - xs[j])).product();
            w * ys[i]
        })
        .sum()
}

/// Fritsch–Carlson monotone slopes.
fn pchip_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let del: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
    if n == 2 {
        return vec![del[0]; 2];
    }
    let mut m = vec![0.0; n];
    for k in 1..n - 1 {
        if del[k - 1] * del[k] > 0.0 {
            let (w1, w2) = (2.0 * h[k] + h[k - 1], h[k] + 2.0 * h[k - 1]);
            m[k] = (w1 + w2) / (w1 / del[k - 1] + w2 / del[k]);
        }
    }
    let end = |h0: f64, h1: f64, d0: f64, d1: f64| {
        let s = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
        if s * d0 <= 0.0 {
            0.0
        } else if d0 * d1 <= 0.0 && s.abs() > 3.0 * d0.abs() {
            3.0 * d0
        } else {
            s
        }
    };
    m[0] = end(h[0], h[1], del[0], del[1]);
    m[n - 1] = end(h[n - 2], h[n - 3], del[n - 2], del[n - 3]);
    m
}

/// Minimize at every node and build the diffusion table.
pub fn tabulate_d(model: &RateModel, n: usize, grid: &[f64]) -> Result<DiffusionTable> {
    let bounds = model.validate()?;
    let problem = VariationalProblem::new(model, n)?;
    let values: Vec<Vec<f64>> = grid
        .par_iter()
        .map(|&rho| {
            let res = problem.minimize(rho)?;
            let dm = diffusion_matrix(&res, &bounds)?;
            Ok(dm.transpose().iter().copied().collect())
        })
        .collect::<Result<_>>()?;
    let mut table = DiffusionTable::from_interior(model.dim, grid.to_vec(), values)?;
    // The bounds hold up to the boundary; extrapolation can overshoot them
    // where they are attained (e.g. D(1) = c^*), so project the endpoints.
    let last = table.rho.len() - 1;
    for k in [0, last] {
        let d = model.dim;
        let m = DMatrix::from_row_slice(d, d, &table.values[k]);
        let mut eig = m.symmetric_eigen();
        eig.eigenvalues.apply(|v| *v = v.clamp(bounds.c_min, bounds.c_max));
        let p = eig.recompose();
        table.values[k] = p.transpose().iter().copied().collect();
    }
    table.rebuild_slopes();
    Ok(table)
}

/// Row of the `n`-sweep: `sup_ρ ‖ĉ_n(ρ) − ĉ_ref(ρ)‖`.
#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub n: usize,
    pub basis_size: usize,
    pub sup_remainder: f64,
}

pub fn remainder_sweep(model: &RateModel, ns: &[usize], reference_n: usize, grid: &[f64]) -> Result<Vec<SweepRow>> {
    let reference = VariationalProblem::new(model, reference_n)?;
    let refs: Vec<ConductivityResult> = grid.par_iter().map(|&r| reference.minimize(r)).collect::<Result<_>>()?;
    ns.iter()
        .map(|&n| {
            let p = VariationalProblem::new(model, n)?;
            let sup = refs
                .par_iter()
                .map(|rr| {
                    let res = p.minimize(rr.rho)?;
                    let f = p.basis.corrector(&res.f_opt)?;
                    let cc = CorrectedConductivity::new(model, &f)?;
                    Ok(operator_norm(&remainder(&cc, rr)))
                })
                .collect::<Result<Vec<f64>>>()?
                .into_iter()
                .fold(0.0, f64::max);
            Ok(SweepRow { n, basis_size: p.basis.len(), sup_remainder: sup })
        })
        .collect()
}

/// Least-squares slope of `log y` against `log x` (decay exponent is its negative).
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn chi(r: f64) -> f64 {
        compressibility(r)
    }

    #[test]
    fn basis_sizes() {
        assert_eq!(CorrectorBasis::new(1, 0).unwrap().len(), 0);
        assert_eq!(CorrectorBasis::new(1, 1).unwrap().len(), 3);
        assert_eq!(CorrectorBasis::new(1, 2).unwrap().len(), 15);
        assert!(CorrectorBasis::new(1, 1).unwrap().sets.iter().all(|s| s.iter().all(|z| z.norm() <= 1)));
    }

    #[test]
    fn quadratic_form_ssep_examples() {
        let m = RateModel::ssep(2);
        let zero = VectorLocalFunction::zero(2);
        assert!((quadratic_form(&m, 0.5, &[1.0, 0.0], &zero).unwrap() - 0.5).abs() < 1e-15);
        let theta = [0.3, -1.2];
        let q = quadratic_form(&m, 0.2, &theta, &zero).unwrap();
        assert!((q - 2.0 * chi(0.2) * (0.09 + 1.44)).abs() < 1e-14);
        for r in [0.0, 1.0] {
            assert_eq!(quadratic_form(&m, r, &theta, &zero).unwrap(), 0.0);
        }
        let eta0 = VectorLocalFunction { components: vec![LocalFunction::occupation(2, Offset::ZERO); 2] };
        assert!((quadratic_form(&m, 0.2, &theta, &eta0).unwrap() - q).abs() < 1e-14);
    }

    #[test]
    fn ssep_attains_two_chi() {
        for (d, n) in [(1, 0), (1, 1), (1, 2), (2, 1)] {
            let p = VariationalProblem::new(&RateModel::ssep(d), n).unwrap();
            for r in [0.1, 0.5, 0.77] {
                let res = p.minimize(r).unwrap();
                let target = DMatrix::identity(d, d) * (2.0 * chi(r));
                assert!((&res.c_hat - target).amax() < 1e-10, "d={d} n={n} rho={r}");
                assert!(res.f_opt.amax() < 1e-8);
            }
        }
    }

    #[test]
    fn empty_density_has_zero_conductivity() {
        for n in 0..=2 {
            let p = VariationalProblem::new(&RateModel::nongradient_example(1), n).unwrap();
            assert_eq!(p.minimize(0.0).unwrap().c_hat.amax(), 0.0);
        }
    }

    #[test]
    fn nongradient_corrector_strictly_helps() {
        let m = RateModel::nongradient_example(1);
        let p0 = VariationalProblem::new(&m, 0).unwrap();
        let p1 = VariationalProblem::new(&m, 1).unwrap();
        for k in 1..20 {
            let r = k as f64 / 20.0;
            let (a, b) = (p0.minimize(r).unwrap().c_hat[(0, 0)], p1.minimize(r).unwrap().c_hat[(0, 0)]);
            assert!(b < a - 1e-6, "rho={r}: {b} vs {a}");
        }
    }

    #[test]
    fn optimum_matches_truth_table_route() {
        let m = RateModel::nongradient_example(1);
        for n in [1, 2] {
            let p = VariationalProblem::new(&m, n).unwrap();
            for r in [0.2, 0.55, 0.9] {
                let res = p.minimize(r).unwrap();
                let f = p.basis.corrector(&res.f_opt).unwrap();
                let q = quadratic_form(&m, r, &[1.0], &f).unwrap();
                assert!((q - res.c_hat[(0, 0)]).abs() < 1e-11, "n={n} rho={r}: {q} vs {}", res.c_hat[(0, 0)]);
                assert!(res.residual < 1e-11);
            }
        }
    }

    #[test]
    fn polarization_matches_direct_matrix_program() {
        let m = RateModel::nongradient_example(2);
        let p = VariationalProblem::new(&m, 1).unwrap();
        for r in [0.3, 0.6] {
            let res = p.minimize(r).unwrap();
            assert!((&res.c_hat - p.direct_matrix(r)).amax() < 1e-12);
            assert!((&res.c_hat - res.c_hat.transpose()).amax() < 1e-12);
            assert!(res.residual < 1e-10);
        }
    }

    #[test]
    fn corrected_conductivity_matches_truth_tables_2d() {
        // r(F) = 0 keeps the truth-table route under the support cap in d = 2
        let m = RateModel::symmetric_nongradient(2);
        let f = VectorLocalFunction {
            components: vec![
                LocalFunction::parse(2, "(0,0) -> 0.2 -0.7").unwrap(),
                LocalFunction::parse(2, "(0,0) -> 1 0.4").unwrap(),
            ],
        };
        let cc = CorrectedConductivity::new(&m, &f).unwrap();
        let r = 0.35;
        let c = cc.eval(r);
        for theta in [[1.0, 0.0], [0.0, 1.0], [0.6, -0.8]] {
            let t = DVector::from_column_slice(&theta);
            let q = quadratic_form(&m, r, &theta, &f).unwrap();
            assert!(((t.transpose() * &c * &t)[(0, 0)] - q).abs() < 1e-13);
        }
        let g = VectorLocalFunction {
            components: vec![
                LocalFunction::parse(2, "(0,0) (1,0) -> 0 0.3 -0.1 0.5").unwrap(),
                LocalFunction::zero(2),
            ],
        };
        let cg = CorrectedConductivity::new(&m, &g).unwrap().eval(r);
        let q = quadratic_form(&m, r, &[1.0, 1.0], &g).unwrap();
        assert!((cg.sum() - q).abs() < 1e-13);
    }

    #[test]
    fn corrected_conductivity_matches_truth_tables_1d() {
        let m = RateModel::nongradient_example(1);
        let f = VectorLocalFunction {
            components: vec![LocalFunction::parse(1, "(-1) (0) (2) -> 0 1 -2 0.5 0.25 3 0 -1").unwrap()],
        };
        let cc = CorrectedConductivity::new(&m, &f).unwrap();
        for r in [0.0, 0.4, 0.95] {
            let q = quadratic_form(&m, r, &[1.0], &f).unwrap();
            assert!((cc.eval(r)[(0, 0)] - q).abs() < 1e-12);
        }
    }

    #[test]
    fn monotone_in_n_and_lower_bound() {
        let m = RateModel::nongradient_example(1);
        let b = m.validate().unwrap();
        let probs: Vec<VariationalProblem> = (0..=3).map(|n| VariationalProblem::new(&m, n).unwrap()).collect();
        for k in 1..10 {
            let r = k as f64 / 10.0;
            let vals: Vec<f64> = probs.iter().map(|p| p.minimize(r).unwrap().c_hat[(0, 0)]).collect();
            for w in vals.windows(2) {
                assert!(w[1] <= w[0] + 1e-12);
            }
            for v in &vals {
                assert!(*v >= 2.0 * b.c_min * chi(r) - 1e-12);
            }
        }
    }

    #[test]
    fn translated_duplicates_do_not_change_minimum() {
        let m = RateModel::nongradient_example(1);
        let base = CorrectorBasis::new(1, 1).unwrap();
        let mut sets = base.sets.clone();
        for s in &base.sets {
            sets.push(s.iter().map(|&z| z + Offset::new(&[1])).collect());
        }
        let p = VariationalProblem::with_basis(&m, base).unwrap();
        let q = VariationalProblem::with_basis(&m, CorrectorBasis::from_sets(1, 2, sets)).unwrap();
        for r in [0.25, 0.5, 0.8] {
            let (a, b) = (p.minimize(r).unwrap().c_hat[(0, 0)], q.minimize(r).unwrap().c_hat[(0, 0)]);
            assert!((a - b).abs() < 1e-11);
        }
    }

    #[test]
    fn diffusion_matrix_examples() {
        let m = RateModel::ssep(2);
        let b = m.validate().unwrap();
        let p = VariationalProblem::new(&m, 1).unwrap();
        let res = p.minimize(0.4).unwrap();
        let dm = diffusion_matrix(&res, &b).unwrap();
        assert!((dm - DMatrix::identity(2, 2)).amax() < 1e-10);
        assert!(matches!(diffusion_matrix(&p.minimize(0.0).unwrap(), &b), Err(Error::EndpointDensity(_))));

        let m = RateModel::nongradient_example(2);
        let b = m.validate().unwrap();
        let p = VariationalProblem::new(&m, 1).unwrap();
        for r in [0.05, 0.5, 0.95] {
            let dm = diffusion_matrix(&p.minimize(r).unwrap(), &b).unwrap();
            assert!((&dm - dm.transpose()).amax() < 1e-12);
        }
    }

    #[test]
    fn remainder_examples() {
        let m = RateModel::nongradient_example(1);
        let p = VariationalProblem::new(&m, 2).unwrap();
        let res = p.minimize(0.4).unwrap();
        let f = p.basis.corrector(&res.f_opt).unwrap();
        let rem = remainder(&CorrectedConductivity::new(&m, &f).unwrap(), &res);
        assert!(operator_norm(&rem) < 1e-11);

        let s = RateModel::ssep(2);
        let ps = VariationalProblem::new(&s, 1).unwrap();
        let rs = ps.minimize(0.3).unwrap();
        let rem = remainder(&CorrectedConductivity::new(&s, &VectorLocalFunction::zero(2)).unwrap(), &rs);
        assert!(operator_norm(&rem) < 1e-12);
    }

    #[test]
    fn remainder_decreases_with_radius() {
        let m = RateModel::nongradient_example(1);
        let grid = DiffusionTable::uniform_grid(10);
        let rows = remainder_sweep(&m, &[0, 1, 2], 4, &grid).unwrap();
        for w in rows.windows(2) {
            assert!(w[1].sup_remainder < w[0].sup_remainder, "{rows:?}");
        }
    }

    #[test]
    fn table_ssep_and_interpolation() {
        let t = tabulate_d(&RateModel::ssep(2), 1, &DiffusionTable::uniform_grid(8)).unwrap();
        for k in 0..=50 {
            assert!((t.eval(k as f64 / 50.0) - DMatrix::identity(2, 2)).amax() < 1e-10);
        }
        let m = RateModel::nongradient_example(1);
        let grid = DiffusionTable::uniform_grid(16);
        let t = tabulate_d(&m, 2, &grid).unwrap();
        let p = VariationalProblem::new(&m, 2).unwrap();
        let b = m.validate().unwrap();
        for &r in &grid {
            let exact = diffusion_matrix(&p.minimize(r).unwrap(), &b).unwrap();
            assert!((t.eval(r) - exact).amax() < 1e-14);
        }
        let (lo, hi) = t.eigenvalue_range(2000);
        assert!(lo >= b.c_min - 1e-6 && hi <= b.c_max + 1e-6, "{lo} {hi}");
    }

    #[test]
    fn symmetric_model_is_particle_hole_symmetric() {
        let m = RateModel::symmetric_nongradient(1);
        let p = VariationalProblem::new(&m, 2).unwrap();
        for r in [0.1, 0.3, 0.45] {
            let a = p.minimize(r).unwrap().c_hat[(0, 0)];
            let b = p.minimize(1.0 - r).unwrap().c_hat[(0, 0)];
            assert!((a - b).abs() < 1e-11);
        }
    }

    #[test]
    fn pchip_reproduces_linear_and_stays_monotone() {
        let x = vec![0.0, 0.1, 0.35, 0.6, 1.0];
        let y: Vec<Vec<f64>> = x.iter().map(|v| vec![2.0 * v + 1.0]).collect();
        let t = DiffusionTable::from_nodes(1, x, y).unwrap();
        for k in 0..=100 {
            let r = k as f64 / 100.0;
            assert!((t.eval(r)[(0, 0)] - (2.0 * r + 1.0)).abs() < 1e-14);
        }
        let x = vec![0.0, 0.2, 0.4, 0.6, 1.0];
        let y: Vec<Vec<f64>> = [1.0, 1.0, 1.5, 3.0, 3.0].iter().map(|&v| vec![v]).collect();
        let t = DiffusionTable::from_nodes(1, x, y).unwrap();
        let vals: Vec<f64> = (0..=200).map(|k| t.eval(k as f64 / 200.0)[(0, 0)]).collect();
        assert!(vals.windows(2).all(|w| w[1] >= w[0] - 1e-13));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn quadratic_form_is_convex(a in proptest::collection::vec(-1.0f64..1.0, 4),
                                    b in proptest::collection::vec(-1.0f64..1.0, 4),
                                    rho in 0.05f64..0.95) {
            let m = RateModel::nongradient_example(1);
            let mk = |t: &Vec<f64>| VectorLocalFunction {
                components: vec![LocalFunction::new(1, vec![Offset::new(&[0]), Offset::new(&[1])], t.clone()).unwrap()],
            };
            let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
            let q = |t: &Vec<f64>| quadratic_form(&m, rho, &[1.0], &mk(t)).unwrap();
            prop_assert!(q(&mid) <= 0.5 * (q(&a) + q(&b)) + 1e-12);
        }
    }
}
