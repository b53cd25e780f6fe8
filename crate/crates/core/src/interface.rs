//! Sharp-interface toolkit: the mobility tensor `μ(e)`, fronts as closed
//! polygons on the unit torus, level-set extraction, anisotropic curvature
//! flow and comparison with diffuse PDE solutions.

use std::collections::HashMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, Matrix2};
use rayon::prelude::*;
use serde::Serialize;

use crate::conductivity::DiffusionTable;
use crate::error::{Error, Result};
use crate::pde::{DensityField, PdeProblem};
use crate::poly::Polynomial;
use crate::quadrature::integrate_with_breaks;

pub const NEGATIVITY_TOL: f64 = 1e-10;

/// Quadrature controls for the mobility integrals.
#[derive(Clone, Copy, Debug)]
pub struct MobilityOptions {
    pub fd_step: f64,
    pub abs_tol: f64,
    pub rel_tol: f64,
}

impl Default for MobilityOptions {
    fn default() -> Self {
        MobilityOptions { fd_step: 1e-4, abs_tol: 1e-13, rel_tol: 1e-11 }
    }
}

impl MobilityOptions {
    /// Ten times tighter in every control.
    pub fn refined(&self) -> MobilityOptions {
        MobilityOptions { fd_step: self.fd_step / 10.0, abs_tol: self.abs_tol / 10.0, rel_tol: self.rel_tol / 10.0 }
    }
}

/// `D`, `f` and the roots `ρ₋ < ρ_* < ρ₊` of a bistable reaction.
#[derive(Clone, Debug)]
pub struct Mobility {
    pub table: DiffusionTable,
    pub f: Polynomial,
    pub rho_minus: f64,
    pub rho_star: f64,
    pub rho_plus: f64,
    pub options: MobilityOptions,
    breaks: Vec<f64>,
}

impl Mobility {
    pub fn new(table: DiffusionTable, f: Polynomial) -> Result<Mobility> {
        let roots = f.roots_in(0.0, 1.0, 1000, 1e-14);
        let interior: Vec<f64> = roots.into_iter().filter(|r| *r > 0.0 && *r < 1.0).collect();
        if interior.len() != 3 {
            return Err(Error::NotBistable { roots: interior.len() });
        }
        let df = f.derivative();
        if df.eval(interior[0]) >= 0.0 || df.eval(interior[2]) >= 0.0 || df.eval(interior[1]) <= 0.0 {
            return Err(Error::NotBistable { roots: 3 });
        }
        let breaks = table.rho.clone();
        Ok(Mobility {
            table,
            f,
            rho_minus: interior[0],
            rho_star: interior[1],
            rho_plus: interior[2],
            options: MobilityOptions::default(),
            breaks,
        })
    }

    pub fn with_options(mut self, options: MobilityOptions) -> Mobility {
        self.options = options;
        self
    }

    pub fn dim(&self) -> usize {
        self.table.dim
    }

    /// `a_e(ρ) = ê·D(ρ)ê` with `ê = e/|e|`.
    pub fn a(&self, e: &[f64], rho: f64) -> f64 {
        let n2: f64 = e.iter().map(|v| v * v).sum();
        let d = self.dim();
        let mut s = 0.0;
        for i in 0..d {
            for j in 0..d {
                s += e[i] * e[j] * self.table.entry(rho, i, j);
            }
        }
        s / n2
    }

    fn integral_af(&self, e: &[f64], a: f64, b: f64) -> Result<f64> {
        let (lo, hi, sign) = if a <= b { (a, b, 1.0) } else { (b, a, -1.0) };
        if hi == lo {
            return Ok(0.0);
        }
        let mut pts = vec![lo];
        pts.extend(self.breaks.iter().copied().filter(|&r| r > lo && r < hi));
        pts.push(hi);
        let mut g = |r: f64| self.a(e, r) * self.f.eval(r);
        Ok(sign * integrate_with_breaks(&mut g, &pts, self.options.abs_tol * 1e-2, self.options.rel_tol * 1e-2)?)
    }

    /// `W_e(ρ) = −2 ∫_{ρ₋}^{ρ} a_e f`. Above `ρ_*` it is evaluated as
    /// `2 ∫_ρ^{ρ₊} a_e f − 2 ∫_{ρ₋}^{ρ₊} a_e f` to avoid cancellation near `ρ₊`.
    pub fn w(&self, e: &[f64], rho: f64) -> Result<f64> {
        let b = if rho > self.rho_star { self.integral_af(e, self.rho_minus, self.rho_plus)? } else { 0.0 };
        let v = self.w_split(e, rho)? - 2.0 * b;
        if v < -NEGATIVITY_TOL {
            return Err(Error::NegativePotential { rho, value: v });
        }
        Ok(v.max(0.0))
    }

    /// `W_e` without the balance term; valid once [`Mobility::check_balance`] passed.
    fn w_split(&self, e: &[f64], rho: f64) -> Result<f64> {
        let v = if rho <= self.rho_star {
            -2.0 * self.integral_af(e, self.rho_minus, rho)?
        } else {
            2.0 * self.integral_af(e, rho, self.rho_plus)?
        };
        if v < -NEGATIVITY_TOL {
            return Err(Error::NegativePotential { rho, value: v });
        }
        Ok(v.max(0.0))
    }

    /// Fails unless `W_e(ρ₊)` vanishes within the negativity tolerance.
    pub fn check_balance(&self, e: &[f64]) -> Result<()> {
        let w_plus = -2.0 * self.integral_af(e, self.rho_minus, self.rho_plus)?;
        if w_plus < -NEGATIVITY_TOL {
            return Err(Error::NegativePotential { rho: self.rho_plus, value: w_plus });
        }
        if w_plus > NEGATIVITY_TOL {
            return Err(Error::Precondition(format!("W_e(ρ₊) = {w_plus:e} does not vanish; the model is not balanced")));
        }
        Ok(())
    }

    /// `|∫_{ρ₋}^{ρ₊} a_e f|`; zero for balanced models.
    pub fn balance_residual(&self, e: &[f64]) -> Result<f64> {
        Ok(self.integral_af(e, self.rho_minus, self.rho_plus)?.abs())
    }

    /// `∫_{ρ₋}^{ρ₊} g(ρ)`, with `ρ = ρ₋ + s²` below `ρ_*` and `ρ = ρ₊ − s²` above.
    fn integrate_layer(&self, mut g: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
        let mut err = None;
        let (abs, rel) = (self.options.abs_tol, self.options.rel_tol);
        let mut total = 0.0;
        for (base, sign, len) in [
            (self.rho_minus, 1.0, self.rho_star - self.rho_minus),
            (self.rho_plus, -1.0, self.rho_plus - self.rho_star),
        ] {
            let smax = len.sqrt();
            let mut h = |s: f64| match g(base + sign * s * s) {
                Ok(v) => 2.0 * s * v,
                Err(e) => {
                    err.get_or_insert(e);
                    0.0
                }
            };
            total += integrate_with_breaks(&mut h, &[0.0, smax], abs, rel)
                .map_err(|e| Error::QuadratureNonConvergence(format!("layer integral below base {base}: {e}")))?;
        }
        match err {
            Some(e) => Err(e),
            None => Ok(total),
        }
    }

    /// `λ(e) = ∫ √W_e`.
    pub fn lambda(&self, e: &[f64]) -> Result<f64> {
        self.check_balance(e)?;
        self.integrate_layer(|r| Ok(self.w_split(e, r)?.sqrt()))
    }

    /// `μ_ij(e) = λ^{-1} ∫ [D_ij √W_e − ½ ∂_{e_i}W_e ∂_{e_j}(a_e/√W_e)]`, the
    /// e-derivatives taken along the sphere by central differences.
    pub fn mu(&self, e: &[f64]) -> Result<DMatrix<f64>> {
        let d = self.dim();
        let n = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        let e: Vec<f64> = e.iter().map(|v| v / n).collect();
        let lam = self.lambda(&e)?;
        let delta = self.options.fd_step;
        let shifted = |i: usize, s: f64| {
            let mut v = e.clone();
            v[i] += s;
            v
        };
        for i in 0..d {
            self.check_balance(&shifted(i, delta))?;
            self.check_balance(&shifted(i, -delta))?;
        }
        let mut out = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                let dij = self.integrate_layer(|r| {
                    let w = self.w_split(&e, r)?;
                    let dw_i =
                        (self.w_split(&shifted(i, delta), r)? - self.w_split(&shifted(i, -delta), r)?) / (2.0 * delta);
                    let q = |v: &[f64]| -> Result<f64> { Ok(self.a(v, r) / self.w_split(v, r)?.sqrt()) };
                    let dq_j = (q(&shifted(j, delta))? - q(&shifted(j, -delta))?) / (2.0 * delta);
                    let second = if dw_i == 0.0 { 0.0 } else { dw_i * dq_j };
                    Ok(self.table.entry(r, i, j) * w.sqrt() - 0.5 * second)
                })?;
                out[(i, j)] = dij / lam;
            }
        }
        Ok(out)
    }
}

/// `μ(e)` in d = 2 tabulated over the angle of `e` on `[0, π)`
/// (`μ(−e) = μ(e)`), with linear interpolation in the angle.
#[derive(Clone, Debug, Serialize)]
pub struct MobilityTensor {
    pub angles: Vec<f64>,
    pub values: Vec<[f64; 4]>,
}

impl MobilityTensor {
    pub fn tabulate(mob: &Mobility, samples: usize) -> Result<MobilityTensor> {
        if mob.dim() != 2 {
            return Err(Error::Precondition("mobility tables are built in d = 2".into()));
        }
        let angles: Vec<f64> = (0..samples).map(|k| PI * k as f64 / samples as f64).collect();
        let values = angles
            .par_iter()
            .map(|&th| {
                let m = mob.mu(&[th.cos(), th.sin()])?;
                Ok([m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]])
            })
            .collect::<Result<_>>()?;
        Ok(MobilityTensor { angles, values })
    }

    pub fn isotropic(m: f64) -> MobilityTensor {
        MobilityTensor { angles: vec![0.0], values: vec![[m, 0.0, 0.0, m]] }
    }

    pub fn eval(&self, n: [f64; 2]) -> Matrix2<f64> {
        let k = self.angles.len();
        if k == 1 {
            let v = self.values[0];
            return Matrix2::new(v[0], v[1], v[2], v[3]);
        }
        let th = n[1].atan2(n[0]).rem_euclid(PI);
        let x = th / PI * k as f64;
        let i = (x.floor() as usize) % k;
        let w = x - x.floor();
        let (a, b) = (self.values[i], self.values[(i + 1) % k]);
        let m = |c: usize| (1.0 - w) * a[c] + w * b[c];
        Matrix2::new(m(0), m(1), m(2), m(3))
    }

    /// `min (θ, μ(e)θ)` over `θ ⊥ e`, `|θ| = 1`, across the table.
    pub fn tangential_minimum(&self) -> f64 {
        let k = self.angles.len();
        (0..k)
            .map(|i| {
                let th = if k == 1 { 0.0 } else { self.angles[i] };
                let t = [-th.sin(), th.cos()];
                let v = self.values[i];
                t[0] * (v[0] * t[0] + v[1] * t[1]) + t[1] * (v[2] * t[0] + v[3] * t[1])
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// Closed polygon in unwrapped coordinates of the unit torus; `Ω⁺` lies to
/// the left of the direction of traversal, so the left normal points into `Ω⁺`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrontCurve {
    pub points: Vec<[f64; 2]>,
    pub t: f64,
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn norm(a: [f64; 2]) -> f64 {
    a[0].hypot(a[1])
}

fn wrap(v: f64) -> f64 {
    v - v.round()
}

impl FrontCurve {
    /// Circle of radius `r` about `c`; `plus_inside` chooses the orientation.
    pub fn circle(c: [f64; 2], r: f64, n: usize, plus_inside: bool) -> FrontCurve {
        FrontCurve::parametric(n, |s| {
            let th = 2.0 * PI * s;
            [c[0] + r * th.cos(), c[1] + r * th.sin()]
        })
        .oriented(plus_inside)
    }

    pub fn ellipse(c: [f64; 2], a: f64, b: f64, n: usize) -> FrontCurve {
        FrontCurve::parametric(n, |s| {
            let th = 2.0 * PI * s;
            [c[0] + a * th.cos(), c[1] + b * th.sin()]
        })
    }

    /// Vertices `p(k/n)`, `k = 0..n`.
    pub fn parametric(n: usize, p: impl Fn(f64) -> [f64; 2]) -> FrontCurve {
        FrontCurve { points: (0..n).map(|k| p(k as f64 / n as f64)).collect(), t: 0.0 }
    }

    /// Reverse if needed so that `Ω⁺` is the bounded side (`plus_inside`) or not.
    pub fn oriented(mut self, plus_inside: bool) -> FrontCurve {
        if (self.signed_area() > 0.0) != plus_inside {
            self.points.reverse();
        }
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Shoelace area, positive for counter-clockwise traversal.
    pub fn signed_area(&self) -> f64 {
        let n = self.len();
        0.5 * (0..n)
            .map(|i| {
                let (p, q) = (self.points[i], self.points[(i + 1) % n]);
                p[0] * q[1] - q[0] * p[1]
            })
            .sum::<f64>()
    }

    pub fn length(&self) -> f64 {
        let n = self.len();
        (0..n).map(|i| norm(sub(self.points[(i + 1) % n], self.points[i]))).sum()
    }

    pub fn centroid(&self) -> [f64; 2] {
        let n = self.len() as f64;
        let s = self.points.iter().fold([0.0, 0.0], |a, p| [a[0] + p[0], a[1] + p[1]]);
        [s[0] / n, s[1] / n]
    }

    /// Radius of the disc with the same enclosed area.
    pub fn area_radius(&self) -> f64 {
        (self.signed_area().abs() / PI).sqrt()
    }

    /// `|Ω⁺|` on the unit torus.
    pub fn plus_area(&self) -> f64 {
        let a = self.signed_area();
        if a > 0.0 {
            a
        } else {
            1.0 + a
        }
    }

    /// Resample to `n` vertices equally spaced in arclength.
    pub fn resample(&self, n: usize) -> FrontCurve {
        let m = self.len();
        let mut cum = vec![0.0];
        for i in 0..m {
            let l = norm(sub(self.points[(i + 1) % m], self.points[i]));
            cum.push(cum[i] + l);
        }
        let total = cum[m];
        let mut out = Vec::with_capacity(n);
        let mut seg = 0;
        for k in 0..n {
            let s = total * k as f64 / n as f64;
            while cum[seg + 1] < s {
                seg += 1;
            }
            let w = if cum[seg + 1] > cum[seg] { (s - cum[seg]) / (cum[seg + 1] - cum[seg]) } else { 0.0 };
            let (p, q) = (self.points[seg], self.points[(seg + 1) % m]);
            out.push([p[0] + w * (q[0] - p[0]), p[1] + w * (q[1] - p[1])]);
        }
        FrontCurve { points: out, t: self.t }
    }

    /// True if two non-adjacent edges cross.
    pub fn self_intersects(&self) -> bool {
        let n = self.len();
        if n < 4 {
            return false;
        }
        let cell = (self.length() / n as f64).max(1e-9) * 2.0;
        let key = |p: [f64; 2]| ((p[0] / cell).floor() as i64, (p[1] / cell).floor() as i64);
        let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for i in 0..n {
            let (p, q) = (self.points[i], self.points[(i + 1) % n]);
            let (a, b) = (key(p), key(q));
            for x in a.0.min(b.0)..=a.0.max(b.0) {
                for y in a.1.min(b.1)..=a.1.max(b.1) {
                    grid.entry((x, y)).or_default().push(i);
                }
            }
        }
        let cross = |i: usize, j: usize| {
            let (p1, p2) = (self.points[i], self.points[(i + 1) % n]);
            let (q1, q2) = (self.points[j], self.points[(j + 1) % n]);
            let o = |a: [f64; 2], b: [f64; 2], c: [f64; 2]| (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
            let (d1, d2, d3, d4) = (o(q1, q2, p1), o(q1, q2, p2), o(p1, p2, q1), o(p1, p2, q2));
            d1 * d2 < 0.0 && d3 * d4 < 0.0
        };
        for bucket in grid.values() {
            for (a, &i) in bucket.iter().enumerate() {
                for &j in &bucket[a + 1..] {
                    let adjacent = i.abs_diff(j) <= 1 || i.abs_diff(j) == n - 1;
                    if !adjacent && cross(i, j) {
                        return true;
                    }
                }
            }
        }
        false
    }

    /// Normal velocities `V_i = −τ_i·μ(n_i)·(dn/ds)_i`; `n` is the left normal.
    pub fn normal_velocity(&self, mu: &MobilityTensor) -> Vec<([f64; 2], f64)> {
        let n = self.len();
        let edge_normal = |i: usize| {
            let e = sub(self.points[(i + 1) % n], self.points[i]);
            let l = norm(e);
            ([-e[1] / l, e[0] / l], l)
        };
        let edges: Vec<([f64; 2], f64)> = (0..n).map(edge_normal).collect();
        (0..n)
            .map(|i| {
                let (nb, lb) = edges[(i + n - 1) % n];
                let (na, la) = edges[i];
                let tang = sub(self.points[(i + 1) % n], self.points[(i + n - 1) % n]);
                let tl = norm(tang);
                let tau = [tang[0] / tl, tang[1] / tl];
                let nv = [-tau[1], tau[0]];
                let ds = 0.5 * (la + lb);
                let dn = [(na[0] - nb[0]) / ds, (na[1] - nb[1]) / ds];
                let m = mu.eval(nv);
                let mdn = [m[(0, 0)] * dn[0] + m[(0, 1)] * dn[1], m[(1, 0)] * dn[0] + m[(1, 1)] * dn[1]];
                (nv, -(tau[0] * mdn[0] + tau[1] * mdn[1]))
            })
            .collect()
    }

    /// Evolve by `V = −Tr(μ(n)∂_v n)` for time `dt` with explicit sub-steps,
    /// resampling to uniform arclength when the spacing degrades.
    pub fn evolve(&self, mu: &MobilityTensor, dt: f64) -> Result<FrontCurve> {
        let n = self.len();
        let mu_max = mu.values.iter().map(|v| v[0].abs() + v[1].abs() + v[2].abs() + v[3].abs()).fold(0.0, f64::max);
        let mut cur = self.clone();
        let mut t = 0.0;
        let mut since_check = 0;
        while t < dt {
            let spacing = cur.length() / n as f64;
            let h = (0.2 * spacing * spacing / mu_max).min(dt - t);
            let vel = cur.normal_velocity(mu);
            for (p, (nv, v)) in cur.points.iter_mut().zip(vel) {
                p[0] += h * v * nv[0];
                p[1] += h * v * nv[1];
            }
            t += h;
            cur.t += h;
            let lens: Vec<f64> = (0..n).map(|i| norm(sub(cur.points[(i + 1) % n], cur.points[i]))).collect();
            let (lo, hi) = lens.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &l| (a.min(l), b.max(l)));
            if hi > 1.5 * lo {
                cur = cur.resample(n);
            }
            since_check += 1;
            if since_check >= 200 {
                since_check = 0;
                if cur.self_intersects() {
                    return Err(Error::SelfIntersection { t: cur.t });
                }
            }
            if cur.signed_area().abs() < 1e-12 {
                return Err(Error::SelfIntersection { t: cur.t });
            }
        }
        if cur.self_intersects() {
            return Err(Error::SelfIntersection { t: cur.t });
        }
        Ok(cur)
    }

    /// Hausdorff distance on the torus, measured from vertices to edges.
    pub fn hausdorff(&self, other: &FrontCurve) -> f64 {
        directed(self, other).max(directed(other, self))
    }

    /// `ρ₊` on `Ω⁺`, `ρ₋` elsewhere, averaged on an `m × m` grid with `sub²` samples per cell.
    pub fn rasterize(&self, m: usize, rho_minus: f64, rho_plus: f64, sub: usize) -> DensityField {
        let values = (0..m * m)
            .into_par_iter()
            .map(|c| {
                let (i, j) = (c / m, c % m);
                let mut acc = 0.0;
                for a in 0..sub {
                    for b in 0..sub {
                        let p = [
                            (i as f64 + (a as f64 + 0.5) / sub as f64) / m as f64,
                            (j as f64 + (b as f64 + 0.5) / sub as f64) / m as f64,
                        ];
                        acc += if self.in_plus(p) { rho_plus } else { rho_minus };
                    }
                }
                acc / (sub * sub) as f64
            })
            .collect();
        DensityField { d: 2, m, t: self.t, values }
    }

    /// Whether `p` lies in `Ω⁺` (periodic images considered).
    pub fn in_plus(&self, p: [f64; 2]) -> bool {
        let c = self.centroid();
        let q = [c[0] + wrap(p[0] - c[0]), c[1] + wrap(p[1] - c[1])];
        let inside = winding(&self.points, q);
        inside == (self.signed_area() > 0.0)
    }
}

fn winding(poly: &[[f64; 2]], p: [f64; 2]) -> bool {
    let n = poly.len();
    let mut inside = false;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
            if p[0] < x {
                inside = !inside;
            }
        }
    }
    inside
}

fn directed(a: &FrontCurve, b: &FrontCurve) -> f64 {
    let n = b.len();
    a.points
        .par_iter()
        .map(|&p| {
            (0..n)
                .map(|j| {
                    let (q1, q2) = (b.points[j], b.points[(j + 1) % n]);
                    let e = sub(q2, q1);
                    // nearest image of p relative to the segment start
                    let r = sub(p, q1);
                    let r = [wrap(r[0]), wrap(r[1])];
                    let l2 = e[0] * e[0] + e[1] * e[1];
                    let s = if l2 > 0.0 { ((r[0] * e[0] + r[1] * e[1]) / l2).clamp(0.0, 1.0) } else { 0.0 };
                    norm([r[0] - s * e[0], r[1] - s * e[1]])
                })
                .fold(f64::INFINITY, f64::min)
        })
        .reduce(|| 0.0, f64::max)
}

/// Bilinear interpolation of a periodic 2-d field between cell centres.
pub fn sample(field: &DensityField, p: [f64; 2]) -> f64 {
    let m = field.m;
    let x = p[0] * m as f64 - 0.5;
    let y = p[1] * m as f64 - 0.5;
    let (i, j) = (x.floor(), y.floor());
    let (u, v) = (x - i, y - j);
    let idx = |a: f64, b: f64| {
        let a = (a as i64).rem_euclid(m as i64) as usize;
        let b = (b as i64).rem_euclid(m as i64) as usize;
        field.values[a * m + b]
    };
    (1.0 - u) * (1.0 - v) * idx(i, j) + u * (1.0 - v) * idx(i + 1.0, j) + (1.0 - u) * v * idx(i, j + 1.0)
        + u * v * idx(i + 1.0, j + 1.0)
}

/// Marching squares through cell centres; each closed loop is oriented with
/// `{ρ > level}` on its left. Loops are returned longest first.
pub fn extract_level_set(field: &DensityField, level: f64) -> Result<Vec<FrontCurve>> {
    if field.d != 2 {
        return Err(Error::Precondition("level sets are extracted in d = 2".into()));
    }
    let m = field.m;
    let h = 1.0 / m as f64;
    let val = |i: usize, j: usize| field.values[(i % m) * m + (j % m)];
    let above = |i: usize, j: usize| val(i, j) >= level;
    // edge (i, j, 0): (i,j)-(i+1,j); edge (i, j, 1): (i,j)-(i,j+1)
    let point = |e: (usize, usize, u8)| -> [f64; 2] {
        let (i, j, dir) = e;
        let (i2, j2) = if dir == 0 { (i + 1, j) } else { (i, j + 1) };
        let (a, b) = (val(i, j), val(i2, j2));
        let w = (level - a) / (b - a);
        let p0 = [(i as f64 + 0.5) * h, (j as f64 + 0.5) * h];
        let p1 = [(i2 as f64 + 0.5) * h, (j2 as f64 + 0.5) * h];
        [p0[0] + w * (p1[0] - p0[0]), p0[1] + w * (p1[1] - p0[1])]
    };
    let mut segs: Vec<[(usize, usize, u8); 2]> = vec![];
    for i in 0..m {
        for j in 0..m {
            let (i1, j1) = ((i + 1) % m, (j + 1) % m);
            let c = [above(i, j), above(i1, j), above(i1, j1), above(i, j1)];
            let bottom = (i, j, 0u8);
            let right = (i1, j, 1u8);
            let top = (i, j1, 0u8);
            let left = (i, j, 1u8);
            let mut cut = vec![];
            if c[0] != c[1] {
                cut.push(bottom);
            }
            if c[1] != c[2] {
                cut.push(right);
            }
            if c[3] != c[2] {
                cut.push(top);
            }
            if c[0] != c[3] {
                cut.push(left);
            }
            match cut.len() {
                0 => {}
                2 => segs.push([cut[0], cut[1]]),
                _ => {
                    let center = 0.25 * (val(i, j) + val(i1, j) + val(i1, j1) + val(i, j1)) >= level;
                    if center == c[0] {
                        segs.push([bottom, right]);
                        segs.push([top, left]);
                    } else {
                        segs.push([left, bottom]);
                        segs.push([right, top]);
                    }
                }
            }
        }
    }
    if segs.is_empty() {
        return Err(Error::EmptyLevelSet);
    }
    let mut at: HashMap<(usize, usize, u8), Vec<usize>> = HashMap::new();
    for (k, s) in segs.iter().enumerate() {
        for e in s {
            at.entry(*e).or_default().push(k);
        }
    }
    let mut used = vec![false; segs.len()];
    let mut loops = vec![];
    for start in 0..segs.len() {
        if used[start] {
            continue;
        }
        used[start] = true;
        let first = segs[start][0];
        let mut cur_edge = segs[start][1];
        let mut pts = vec![point(first)];
        let mut prev = pts[0];
        loop {
            let p = point(cur_edge);
            let q = [prev[0] + wrap(p[0] - prev[0]), prev[1] + wrap(p[1] - prev[1])];
            if cur_edge == first {
                break;
            }
            pts.push(q);
            prev = q;
            let next = at[&cur_edge].iter().copied().find(|&k| !used[k]);
            let Some(k) = next else { break };
            used[k] = true;
            cur_edge = if segs[k][0] == cur_edge { segs[k][1] } else { segs[k][0] };
        }
        if pts.len() < 3 {
            continue;
        }
        let mut curve = FrontCurve { points: pts, t: field.t };
        // put {ρ > level} on the left
        let (p, q) = (curve.points[0], curve.points[1]);
        let e = sub(q, p);
        let l = norm(e);
        let probe = [0.5 * (p[0] + q[0]) - e[1] / l * 0.25 * h, 0.5 * (p[1] + q[1]) + e[0] / l * 0.25 * h];
        if sample(field, probe) < level {
            curve.points.reverse();
        }
        loops.push(curve);
    }
    loops.sort_by(|a, b| b.length().total_cmp(&a.length()));
    Ok(loops)
}

/// Mean 10–90% width of the layer, sampled along the normals of `front`.
pub fn layer_width_2d(field: &DensityField, front: &FrontCurve, lo: f64, hi: f64) -> f64 {
    let h = field.h();
    let (a, b) = (lo + 0.1 * (hi - lo), lo + 0.9 * (hi - lo));
    let vel = front.normal_velocity(&MobilityTensor::isotropic(1.0));
    let widths: Vec<f64> = front
        .points
        .iter()
        .zip(&vel)
        .filter_map(|(p, (nv, _))| {
            let at = |s: f64| sample(field, [p[0] + s * nv[0], p[1] + s * nv[1]]);
            let step = 0.25 * h;
            let find = |level: f64, dir: f64| -> Option<f64> {
                let mut prev = at(0.0);
                for k in 1..(0.5 / step) as usize {
                    let s = dir * k as f64 * step;
                    let v = at(s);
                    if (prev - level) * (v - level) <= 0.0 && v != prev {
                        return Some(s - dir * step * (v - level) / (v - prev));
                    }
                    prev = v;
                }
                None
            };
            // ρ increases along the left normal
            Some(find(b, 1.0)? - find(a, -1.0)?)
        })
        .collect();
    widths.iter().sum::<f64>() / widths.len().max(1) as f64
}

/// `R(t) = √(R₀² − 2 m t)` for a circle under `V = −m κ`.
pub fn shrinking_circle_radius(r0: f64, m: f64, t: f64) -> f64 {
    (r0 * r0 - 2.0 * m * t).max(0.0).sqrt()
}

/// Sharp-vs-diffuse comparison row.
#[derive(Clone, Debug, Serialize)]
pub struct SharpDiffuseRow {
    pub k: f64,
    pub t: f64,
    pub hausdorff: f64,
    pub hausdorff_cells: f64,
    pub layer_width: f64,
    pub pde_radius: f64,
    pub sharp_radius: f64,
    pub relative_radius_gap: f64,
}

/// Solve the PDE at each `K`, extract `Γ_t` at `ρ_*`, evolve the sharp front
/// from the level set of the initial field, and compare.
pub fn sharp_vs_diffuse(
    mob: &Mobility,
    mu: &MobilityTensor,
    m: usize,
    ks: &[f64],
    times: &[f64],
    rho0: &(dyn Fn(&[f64]) -> f64 + Sync),
    vertices: usize,
) -> Result<Vec<SharpDiffuseRow>> {
    let mut rows = vec![];
    for &k in ks {
        let mut problem = PdeProblem::new(mob.table.clone(), mob.f.clone(), k, m, None)?;
        let init = problem.initial(rho0)?;
        let gamma0 = extract_level_set(&init, mob.rho_star)?.swap_remove(0).resample(vertices);
        let (snaps, _) = problem.solve(init, times)?;
        let mut sharp = gamma0;
        for snap in snaps {
            sharp = sharp.evolve(mu, snap.t - sharp.t)?;
            let diffuse = extract_level_set(&snap, mob.rho_star)?.swap_remove(0);
            let hd = diffuse.hausdorff(&sharp);
            let (pr, sr) = (diffuse.area_radius(), sharp.area_radius());
            rows.push(SharpDiffuseRow {
                k,
                t: snap.t,
                hausdorff: hd,
                hausdorff_cells: hd * m as f64,
                layer_width: layer_width_2d(&snap, &diffuse, mob.rho_minus, mob.rho_plus),
                pde_radius: pr,
                sharp_radius: sr,
                relative_radius_gap: (pr - sr).abs() / sr,
            });
        }
    }
    Ok(rows)
}

/// Write fronts as `t,curve,vertex,x,y` rows.
pub fn write_fronts_csv<W: std::io::Write>(out: W, fronts: &[FrontCurve]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "curve", "vertex", "x", "y"]).map_err(crate::kmc::csv_err)?;
    for (c, f) in fronts.iter().enumerate() {
        for (k, p) in f.points.iter().enumerate() {
            w.write_record(&[f.t.to_string(), c.to_string(), k.to_string(), p[0].to_string(), p[1].to_string()])
                .map_err(crate::kmc::csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rates::RateModel;

    fn bistable(lambda: f64) -> Polynomial {
        RateModel::ssep(1).with_bistable_flips(lambda).reaction_term()
    }

    fn diag(a: f64, b: f64) -> DiffusionTable {
        DiffusionTable::constant(&DMatrix::from_row_slice(2, 2, &[a, 0.0, 0.0, b]))
    }

    #[test]
    fn potential_against_antiderivative() {
        // D = I, f = −(ρ−¼)(ρ−½)(ρ−¾): W(ρ) = −2 ∫_{¼}^{ρ} f
        let f = bistable(1.0 / 32.0);
        let mob = Mobility::new(diag(1.0, 1.0), f.clone()).unwrap();
        let prim = f.integral();
        let exact = -2.0 * (prim.eval(0.5) - prim.eval(0.25));
        assert!((mob.w(&[1.0, 0.0], 0.5).unwrap() - exact).abs() < 1e-15);
        assert_eq!(mob.w(&[1.0, 0.0], 0.25).unwrap(), 0.0);
        assert!(mob.w(&[0.6, 0.8], 0.75).unwrap().abs() < 1e-15);
        assert!(mob.balance_residual(&[0.0, 1.0]).unwrap() < 1e-15);
        assert!((exact - 1.0 / 512.0).abs() < 1e-16);
    }

    #[test]
    fn unbalanced_model_rejected() {
        // D(ρ) increasing breaks the balance and makes W negative near ρ₊
        let t = DiffusionTable::from_nodes(2, vec![0.0, 1.0], vec![vec![1.0, 0.0, 0.0, 1.0], vec![3.0, 0.0, 0.0, 3.0]]).unwrap();
        let mob = Mobility::new(t, bistable(1.0)).unwrap();
        assert!(matches!(mob.w(&[1.0, 0.0], 0.7), Err(Error::NegativePotential { .. })));
        assert!(matches!(mob.lambda(&[0.0, 1.0]), Err(Error::NegativePotential { .. })));
        assert!(matches!(Mobility::new(diag(1.0, 1.0), Polynomial::new(vec![1.0, -2.0])), Err(Error::NotBistable { .. })));
    }

    #[test]
    fn identity_collapse() {
        let mob = Mobility::new(diag(1.0, 1.0), bistable(1.0)).unwrap();
        for k in 0..8 {
            let th = 0.37 + k as f64 * PI / 8.0;
            let mu = mob.mu(&[th.cos(), th.sin()]).unwrap();
            assert!((mu - DMatrix::identity(2, 2)).abs().max() < 1e-6);
        }
    }

    #[test]
    fn diagonal_mobility_closed_form() {
        // D = diag(1, 2): μ(e) = D − ∇_T a ⊗ ∇_T a / (4a), ∇_T a = 2(De − a e)
        let mob = Mobility::new(diag(1.0, 2.0), bistable(1.0)).unwrap();
        let oracle = Mobility::new(diag(1.0, 2.0), bistable(1.0)).unwrap().with_options(mob.options.refined());
        for th in [0.0, PI / 2.0, 0.3, 1.1] {
            let e = [th.cos(), th.sin()];
            let a = e[0] * e[0] + 2.0 * e[1] * e[1];
            let g = [2.0 * (e[0] - a * e[0]), 2.0 * (2.0 * e[1] - a * e[1])];
            let exact = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0])
                - DMatrix::from_row_slice(2, 2, &[g[0] * g[0], g[0] * g[1], g[1] * g[0], g[1] * g[1]]) / (4.0 * a);
            let mu = mob.mu(&e).unwrap();
            assert!((&mu - &exact).abs().max() < 1e-6, "{th}: {mu} vs {exact}");
            assert!((&mu - oracle.mu(&e).unwrap()).abs().max() < 1e-6);
            assert!((mu[(0, 1)] - mu[(1, 0)]).abs() < 1e-8);
        }
        let table = MobilityTensor::tabulate(&mob, 32).unwrap();
        assert!(table.tangential_minimum() > 0.0);
    }

    #[test]
    fn shrinking_circle() {
        let c = FrontCurve::circle([0.5, 0.5], 0.3, 512, true);
        let out = c.evolve(&MobilityTensor::isotropic(1.0), 0.02).unwrap();
        let r = out.area_radius();
        let exact = shrinking_circle_radius(0.3, 1.0, 0.02);
        assert!((r / exact - 1.0).abs() < 0.01, "{r} vs {exact}");
        // the opposite orientation also shrinks
        let c2 = FrontCurve::circle([0.5, 0.5], 0.3, 256, false).evolve(&MobilityTensor::isotropic(1.0), 0.02).unwrap();
        assert!((c2.area_radius() / exact - 1.0).abs() < 0.01);
    }

    #[test]
    fn ellipse_area_rate() {
        let e = FrontCurve::ellipse([0.5, 0.5], 0.3, 0.18, 512);
        let dt = 0.005;
        let out = e.evolve(&MobilityTensor::isotropic(1.0), dt).unwrap();
        let rate = (e.signed_area().abs() - out.signed_area().abs()) / dt;
        assert!((rate / (2.0 * PI) - 1.0).abs() < 0.02, "rate {rate}");
    }

    #[test]
    fn flat_front_is_stationary() {
        let line = FrontCurve::parametric(64, |s| [0.5 + 0.1 * (2.0 * PI * s).cos(), 0.5 + 0.1 * (2.0 * PI * s).sin()]);
        let vel = line.normal_velocity(&MobilityTensor::isotropic(1.0));
        // V = κ for a counter-clockwise circle with Ω⁺ inside
        assert!(vel.iter().all(|(_, v)| (v - 10.0).abs() < 0.05));
        let seg: Vec<[f64; 2]> = (0..16).map(|k| [k as f64 * 0.01, 0.3]).collect();
        let open = FrontCurve { points: seg, t: 0.0 };
        let v = open.normal_velocity(&MobilityTensor::isotropic(1.0));
        assert!(v[1..15].iter().all(|(_, v)| v.abs() < 1e-12));
    }

    #[test]
    fn level_set_of_radial_bump() {
        let m = 128;
        let f = DensityField::from_fn(2, m, |v| {
            let r = ((v[0] - 0.5).powi(2) + (v[1] - 0.5).powi(2)).sqrt();
            0.5 + 0.25 * ((0.2 - r) / 0.05).tanh()
        })
        .unwrap();
        let loops = extract_level_set(&f, 0.5).unwrap();
        assert_eq!(loops.len(), 1);
        let c = &loops[0];
        let h = 1.0 / m as f64;
        assert!(c.points.iter().all(|p| ((p[0] - 0.5).hypot(p[1] - 0.5) - 0.2).abs() < h));
        // higher density inside, so Ω⁺ is the bounded side: counter-clockwise
        assert!(c.signed_area() > 0.0);
        assert!(c.in_plus([0.5, 0.5]) && !c.in_plus([0.05, 0.05]));
        assert!(matches!(extract_level_set(&DensityField::from_fn(2, 8, |_| 0.3).unwrap(), 0.5), Err(Error::EmptyLevelSet)));
    }

    #[test]
    fn level_set_across_the_seam() {
        let f = DensityField::from_fn(2, 64, |v| {
            let dx = wrap(v[0] - 0.02);
            let dy = wrap(v[1] - 0.97);
            0.5 + 0.25 * ((0.15 - dx.hypot(dy)) / 0.03).tanh()
        })
        .unwrap();
        let loops = extract_level_set(&f, 0.5).unwrap();
        assert_eq!(loops.len(), 1);
        assert!((loops[0].area_radius() - 0.15).abs() < 1.0 / 64.0);
    }

    #[test]
    fn rasterize_roundtrip() {
        let c = FrontCurve::circle([0.4, 0.6], 0.25, 400, true);
        let m = 96;
        let field = c.rasterize(m, 0.25, 0.75, 4);
        let back = extract_level_set(&field, 0.5).unwrap().swap_remove(0);
        assert!(back.hausdorff(&c) <= 2.0 / m as f64, "{}", back.hausdorff(&c));
        // step-profile pairing with φ ≡ 1 matches the shoelace area
        let area = c.plus_area();
        let exact = 0.75 * area + 0.25 * (1.0 - area);
        assert!((field.mass() - exact).abs() < 2e-3);
    }

    #[test]
    fn hausdorff_on_torus() {
        let a = FrontCurve::circle([0.02, 0.5], 0.1, 200, true);
        let b = FrontCurve::circle([1.02, 0.5], 0.1, 200, true);
        assert!(a.hausdorff(&b) < 1e-12);
        let c = FrontCurve::circle([0.02, 0.5], 0.12, 200, true);
        assert!((a.hausdorff(&c) - 0.02).abs() < 1e-3);
    }

    #[test]
    fn self_intersection_detected() {
        let fig8 = FrontCurve::parametric(200, |s| {
            let th = 2.0 * PI * (s + 0.0013);
            [0.5 + 0.2 * th.sin(), 0.5 + 0.2 * th.sin() * th.cos()]
        });
        assert!(fig8.self_intersects());
        assert!(!FrontCurve::circle([0.5, 0.5], 0.2, 100, true).self_intersects());
    }

    #[test]
    fn isotropic_sharp_vs_diffuse() {
        // λ = 64, K = 64: layer scale (λK)^{-1/2} = 1/64 against R ≈ 0.25
        let mob = Mobility::new(diag(1.0, 1.0), bistable(64.0)).unwrap();
        let mu = MobilityTensor::isotropic(1.0);
        let r0 = 0.25;
        let rho0 = move |v: &[f64]| {
            let r = (v[0] - 0.5).hypot(v[1] - 0.5);
            0.5 + 0.2 * ((r0 - r) / 0.02).tanh()
        };
        let rows = sharp_vs_diffuse(&mob, &mu, 128, &[64.0], &[0.005, 0.01], &rho0, 256).unwrap();
        for r in &rows {
            assert!(r.relative_radius_gap < 0.03, "{r:?}");
        }
    }
}
