//! Finite-support functions of occupancy configurations.
//!
//! A [`LocalFunction`] is a truth table over an ordered support of offsets.
//! Bit `k` of a table index is the occupation at the `k`-th support offset.
//! Supports are kept sorted, so two functions with the same support compare
//! tablewise.
//!
//! Text format (used by rate-model files): whitespace separated offsets in
//! parentheses, `->`, then the `2^|support|` table values in index order:
//!
//! ```text
//! (2) -> 1 1.5            # d = 1: 1 + 0.5 η_2
//! (-1,0) (1,0) -> 0 1 1 2 # d = 2: η_{-e1} + η_{e1}
//! -> 3                    # constant
//! ```

use std::collections::BTreeSet;
use std::fmt;

use crate::error::{Error, Result};
use crate::lattice::{Configuration, Offset};

/// Maximum support size for truth-table enumeration.
pub const SUPPORT_CAP: usize = 24;

#[derive(Clone, Debug, PartialEq)]
pub struct LocalFunction {
    dim: usize,
    support: Vec<Offset>,
    table: Vec<f64>,
}

impl LocalFunction {
    pub fn new(dim: usize, support: Vec<Offset>, table: Vec<f64>) -> Result<LocalFunction> {
        if support.len() > SUPPORT_CAP {
            return Err(Error::SupportCapExceeded { size: support.len(), cap: SUPPORT_CAP });
        }
        if table.len() != 1usize << support.len() {
            return Err(Error::MalformedLocalFunction(format!(
                "table has {} entries, support of size {} needs {}",
                table.len(),
                support.len(),
                1usize << support.len()
            )));
        }
        for z in &support {
            if z.0[dim..].iter().any(|&c| c != 0) {
                return Err(Error::MalformedLocalFunction(format!("offset {z:?} exceeds dimension {dim}")));
            }
        }
        let unique: BTreeSet<Offset> = support.iter().copied().collect();
        if unique.len() != support.len() {
            return Err(Error::MalformedLocalFunction("repeated offset in support".into()));
        }
        let sorted: Vec<Offset> = unique.into_iter().collect();
        if sorted == support {
            return Ok(LocalFunction { dim, support, table });
        }
        // canonicalise: re-index the table against the sorted support
        let pos: Vec<usize> = sorted.iter().map(|z| support.iter().position(|w| w == z).unwrap()).collect();
        let mut new_table = vec![0.0; table.len()];
        for (idx, v) in new_table.iter_mut().enumerate() {
            let mut old = 0usize;
            for (k, &p) in pos.iter().enumerate() {
                if idx >> k & 1 == 1 {
                    old |= 1 << p;
                }
            }
            *v = table[old];
        }
        Ok(LocalFunction { dim, support: sorted, table: new_table })
    }

    pub fn constant(dim: usize, c: f64) -> LocalFunction {
        LocalFunction { dim, support: vec![], table: vec![c] }
    }

    pub fn zero(dim: usize) -> LocalFunction {
        LocalFunction::constant(dim, 0.0)
    }

    /// `η_z`.
    pub fn occupation(dim: usize, z: Offset) -> LocalFunction {
        LocalFunction { dim, support: vec![z], table: vec![0.0, 1.0] }
    }

    /// `Π_{z ∈ sites} η_z`.
    pub fn monomial(dim: usize, sites: &[Offset]) -> Result<LocalFunction> {
        let k = sites.len();
        let full = (1usize << k) - 1;
        let table = (0..1usize << k).map(|i| if i == full { 1.0 } else { 0.0 }).collect();
        LocalFunction::new(dim, sites.to_vec(), table)
    }

    /// Build from a function of the occupations on `support` (in the given order).
    pub fn from_fn(dim: usize, support: Vec<Offset>, f: impl Fn(&[bool]) -> f64) -> Result<LocalFunction> {
        if support.len() > SUPPORT_CAP {
            return Err(Error::SupportCapExceeded { size: support.len(), cap: SUPPORT_CAP });
        }
        let k = support.len();
        let mut occ = vec![false; k];
        let table = (0..1usize << k)
            .map(|idx| {
                for (j, o) in occ.iter_mut().enumerate() {
                    *o = idx >> j & 1 == 1;
                }
                f(&occ)
            })
            .collect();
        LocalFunction::new(dim, support, table)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn support(&self) -> &[Offset] {
        &self.support
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    /// Sup-norm radius of the support around the origin (0 for constants).
    pub fn radius(&self) -> usize {
        self.support.iter().map(|z| z.norm()).max().unwrap_or(0)
    }

    pub fn min_value(&self) -> f64 {
        self.table.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.table.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sup_norm(&self) -> f64 {
        self.table.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_zero(&self, tol: f64) -> bool {
        self.table.iter().all(|v| v.abs() <= tol)
    }

    /// Evaluate with an arbitrary occupation oracle `z ↦ η_z`.
    #[inline]
    pub fn eval_with(&self, mut occupied: impl FnMut(Offset) -> bool) -> f64 {
        let mut idx = 0usize;
        for (k, &z) in self.support.iter().enumerate() {
            if occupied(z) {
                idx |= 1 << k;
            }
        }
        self.table[idx]
    }

    /// `(τ_x f)(η)`.
    pub fn evaluate(&self, cfg: &Configuration, x: usize) -> Result<f64> {
        let torus = cfg.torus();
        if torus.side() <= 2 * self.radius() {
            return Err(Error::WrapViolation { radius: self.radius(), side: torus.side() });
        }
        if x >= torus.volume() {
            return Err(Error::SiteOutOfRange { site: x, volume: torus.volume() });
        }
        Ok(self.eval_with(|z| cfg.get(torus.translate(x, z))))
    }

    pub fn depends_on(&self, z: Offset) -> bool {
        let Some(k) = self.support.iter().position(|&w| w == z) else {
            return false;
        };
        (0..self.table.len()).any(|idx| idx >> k & 1 == 0 && self.table[idx] != self.table[idx | 1 << k])
    }

    /// Remove offsets the function does not depend on.
    pub fn trim(&self) -> LocalFunction {
        let keep: Vec<Offset> = self.support.iter().copied().filter(|&z| self.depends_on(z)).collect();
        if keep.len() == self.support.len() {
            return self.clone();
        }
        self.restrict_to(&keep)
    }

    // `keep` must contain every offset the function depends on.
    fn restrict_to(&self, keep: &[Offset]) -> LocalFunction {
        let pos: Vec<usize> = keep.iter().map(|z| self.support.iter().position(|w| w == z).unwrap()).collect();
        let table = (0..1usize << keep.len())
            .map(|idx| {
                let mut old = 0;
                for (k, &p) in pos.iter().enumerate() {
                    if idx >> k & 1 == 1 {
                        old |= 1 << p;
                    }
                }
                self.table[old]
            })
            .collect();
        LocalFunction { dim: self.dim, support: keep.to_vec(), table }
    }

    /// Re-index onto a sorted superset of the current support.
    pub fn extend_to(&self, support: &[Offset]) -> Result<LocalFunction> {
        if support.len() > SUPPORT_CAP {
            return Err(Error::SupportCapExceeded { size: support.len(), cap: SUPPORT_CAP });
        }
        let pos: Vec<usize> = self
            .support
            .iter()
            .map(|z| {
                support
                    .iter()
                    .position(|w| w == z)
                    .ok_or_else(|| Error::MalformedLocalFunction("extension support is not a superset".into()))
            })
            .collect::<Result<_>>()?;
        let table = (0..1usize << support.len())
            .map(|idx| {
                let mut old = 0;
                for (k, &p) in pos.iter().enumerate() {
                    if idx >> p & 1 == 1 {
                        old |= 1 << k;
                    }
                }
                self.table[old]
            })
            .collect();
        Ok(LocalFunction { dim: self.dim, support: support.to_vec(), table })
    }

    fn union_support(&self, other: &LocalFunction) -> Vec<Offset> {
        let s: BTreeSet<Offset> = self.support.iter().chain(other.support.iter()).copied().collect();
        s.into_iter().collect()
    }

    /// Pointwise combination on the union of supports.
    pub fn combine(&self, other: &LocalFunction, op: impl Fn(f64, f64) -> f64) -> Result<LocalFunction> {
        let support = self.union_support(other);
        let a = self.extend_to(&support)?;
        let b = other.extend_to(&support)?;
        let table = a.table.iter().zip(&b.table).map(|(&x, &y)| op(x, y)).collect();
        Ok(LocalFunction { dim: self.dim, support, table })
    }

    pub fn add(&self, other: &LocalFunction) -> Result<LocalFunction> {
        self.combine(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &LocalFunction) -> Result<LocalFunction> {
        self.combine(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &LocalFunction) -> Result<LocalFunction> {
        self.combine(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> LocalFunction {
        LocalFunction { dim: self.dim, support: self.support.clone(), table: self.table.iter().map(|v| v * c).collect() }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> LocalFunction {
        LocalFunction { dim: self.dim, support: self.support.clone(), table: self.table.iter().map(|&v| f(v)).collect() }
    }

    /// `τ_z f`, i.e. `η ↦ f(τ_z η)`; the support moves by `+z`.
    pub fn shift(&self, z: Offset) -> LocalFunction {
        LocalFunction {
            dim: self.dim,
            support: self.support.iter().map(|&w| w + z).collect(),
            table: self.table.clone(),
        }
    }

    /// Particle-hole conjugate `η ↦ f(1 - η)`.
    pub fn conjugate(&self) -> LocalFunction {
        let full = self.table.len() - 1;
        LocalFunction {
            dim: self.dim,
            support: self.support.clone(),
            table: (0..self.table.len()).map(|i| self.table[full ^ i]).collect(),
        }
    }

    fn with_offsets(&self, extra: &[Offset]) -> Result<LocalFunction> {
        let s: BTreeSet<Offset> = self.support.iter().chain(extra.iter()).copied().collect();
        self.extend_to(&s.into_iter().collect::<Vec<_>>())
    }

    /// `π_b f(η) = f(η^b) - f(η)` for the bond `b = {a, b}` given as offsets.
    pub fn exchange_difference(&self, a: Offset, b: Offset) -> Result<LocalFunction> {
        if (a - b).norm() != 1 || (a - b).0.iter().filter(|&&c| c != 0).count() != 1 {
            return Err(Error::MalformedLocalFunction(format!("{a:?}, {b:?} is not a nearest-neighbour bond")));
        }
        let g = self.with_offsets(&[a, b])?;
        let ka = g.support.iter().position(|&z| z == a).unwrap();
        let kb = g.support.iter().position(|&z| z == b).unwrap();
        let table = (0..g.table.len())
            .map(|idx| {
                let (ba, bb) = (idx >> ka & 1, idx >> kb & 1);
                let swapped = if ba != bb { idx ^ (1 << ka) ^ (1 << kb) } else { idx };
                g.table[swapped] - g.table[idx]
            })
            .collect();
        Ok(LocalFunction { dim: self.dim, support: g.support, table })
    }

    /// `π_x f(η) = f(η^x) - f(η)`.
    pub fn flip_difference(&self, x: Offset) -> Result<LocalFunction> {
        let g = self.with_offsets(&[x])?;
        let k = g.support.iter().position(|&z| z == x).unwrap();
        let table = (0..g.table.len()).map(|idx| g.table[idx ^ (1 << k)] - g.table[idx]).collect();
        Ok(LocalFunction { dim: self.dim, support: g.support, table })
    }

    /// Tablewise comparison on the union of supports.
    pub fn approx_eq(&self, other: &LocalFunction, tol: f64) -> bool {
        match self.sub(other) {
            Ok(diff) => diff.is_zero(tol),
            Err(_) => false,
        }
    }

    pub fn parse(dim: usize, text: &str) -> Result<LocalFunction> {
        let (lhs, rhs) = text
            .split_once("->")
            .ok_or_else(|| Error::MalformedLocalFunction(format!("missing '->' in {text:?}")))?;
        let mut support = vec![];
        let mut rest = lhs.trim();
        while !rest.is_empty() {
            let open = rest
                .strip_prefix('(')
                .ok_or_else(|| Error::MalformedLocalFunction(format!("expected '(' at {rest:?}")))?;
            let close = open
                .find(')')
                .ok_or_else(|| Error::MalformedLocalFunction("unterminated offset".into()))?;
            let coords: Vec<i32> = open[..close]
                .split(',')
                .map(|c| {
                    c.trim()
                        .parse::<i32>()
                        .map_err(|e| Error::MalformedLocalFunction(format!("bad coordinate {c:?}: {e}")))
                })
                .collect::<Result<_>>()?;
            if coords.len() != dim {
                return Err(Error::MalformedLocalFunction(format!(
                    "offset has {} coordinates, expected {dim}",
                    coords.len()
                )));
            }
            support.push(Offset::new(&coords));
            rest = open[close + 1..].trim_start();
        }
        let table: Vec<f64> = rhs
            .split_whitespace()
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|e| Error::MalformedLocalFunction(format!("bad value {v:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        LocalFunction::new(dim, support, table)
    }
}

impl fmt::Display for LocalFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for z in &self.support {
            let c: Vec<String> = z.coords(self.dim).iter().map(|c| c.to_string()).collect();
            write!(f, "({}) ", c.join(","))?;
        }
        write!(f, "->")?;
        for v in &self.table {
            write!(f, " {v}")?;
        }
        Ok(())
    }
}

/// `F = (F_i)_{i=1}^d`.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorLocalFunction {
    pub components: Vec<LocalFunction>,
}

impl VectorLocalFunction {
    pub fn zero(dim: usize) -> VectorLocalFunction {
        VectorLocalFunction { components: vec![LocalFunction::zero(dim); dim] }
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn radius(&self) -> usize {
        self.components.iter().map(|c| c.radius()).max().unwrap_or(0)
    }

    /// `θ · F`.
    pub fn dot(&self, theta: &[f64]) -> Result<LocalFunction> {
        let d = self.dim();
        let mut acc = LocalFunction::zero(d);
        for (c, &t) in self.components.iter().zip(theta) {
            if t != 0.0 {
                acc = acc.add(&c.scale(t))?;
            }
        }
        Ok(acc)
    }

    pub fn sup_norm(&self) -> f64 {
        self.components.iter().fold(0.0, |m, c| m.max(c.sup_norm()))
    }
}

/// `Σ_y π_b(τ_y g)` over the finitely many shifts whose support meets the bond.
pub fn formal_sum_scalar(g: &LocalFunction, a: Offset, b: Offset) -> Result<LocalFunction> {
    let shifts: BTreeSet<Offset> = g.support().iter().flat_map(|&s| [a - s, b - s]).collect();
    let mut acc = LocalFunction::zero(g.dim());
    for y in shifts {
        let term = g.shift(y).exchange_difference(a, b)?.trim();
        acc = acc.add(&term)?.trim();
    }
    Ok(acc.trim())
}

/// Componentwise `Σ_y π_b(τ_y F_i)`.
pub fn formal_sum_exchange_difference(f: &VectorLocalFunction, a: Offset, b: Offset) -> Result<VectorLocalFunction> {
    let components = f.components.iter().map(|g| formal_sum_scalar(g, a, b)).collect::<Result<_>>()?;
    Ok(VectorLocalFunction { components })
}
