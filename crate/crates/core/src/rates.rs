//! Exchange and flip rates, their validation, and the reaction term.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::Offset;
use crate::localfn::LocalFunction;
use crate::measures::ensemble_average_polynomial;
use crate::poly::Polynomial;
use crate::quadrature::integrate_with_breaks;

/// Jump rates `c_{0,e_i}` and flip rates `c^±`.
///
/// Only the bond-at-origin functions are stored; `c_{x,x+e_i} = τ_x c_{0,e_i}`.
/// The Glauber speed-up `K` and the lattice size belong to the simulation.
#[derive(Clone, Debug, PartialEq)]
pub struct RateModel {
    pub dim: usize,
    pub exchange: Vec<LocalFunction>,
    pub flip_plus: LocalFunction,
    pub flip_minus: LocalFunction,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RateBounds {
    pub c_min: f64,
    pub c_max: f64,
}

impl RateModel {
    pub fn new(
        dim: usize,
        exchange: Vec<LocalFunction>,
        flip_plus: LocalFunction,
        flip_minus: LocalFunction,
    ) -> Result<RateModel> {
        if exchange.len() != dim {
            return Err(Error::Config(format!("{} exchange rates given for dimension {dim}", exchange.len())));
        }
        if exchange.iter().chain([&flip_plus, &flip_minus]).any(|f| f.dim() != dim) {
            return Err(Error::Config("rate functions have mismatched dimension".into()));
        }
        Ok(RateModel { dim, exchange, flip_plus, flip_minus })
    }

    /// Symmetric simple exclusion, no flips.
    pub fn ssep(dim: usize) -> RateModel {
        RateModel {
            dim,
            exchange: vec![LocalFunction::constant(dim, 1.0); dim],
            flip_plus: LocalFunction::zero(dim),
            flip_minus: LocalFunction::zero(dim),
        }
    }

    /// `c_{0,e_1} = 1 + ½ η_{2e_1}`, other directions 1. Not particle-hole symmetric.
    pub fn nongradient_example(dim: usize) -> RateModel {
        let mut m = RateModel::ssep(dim);
        let two = Offset::unit(0) + Offset::unit(0);
        m.exchange[0] = LocalFunction::constant(dim, 1.0)
            .add(&LocalFunction::occupation(dim, two).scale(0.5))
            .unwrap();
        m
    }

    /// `c_{0,e_i} = 1 + ½ (η_{-e_i} - η_{2e_i})²`: non-gradient and particle-hole symmetric.
    pub fn symmetric_nongradient(dim: usize) -> RateModel {
        let exchange = (0..dim)
            .map(|i| {
                let e = Offset::unit(i);
                LocalFunction::from_fn(dim, vec![-e, e + e], |s| if s[0] != s[1] { 1.5 } else { 1.0 }).unwrap()
            })
            .collect();
        RateModel { exchange, ..RateModel::ssep(dim) }
    }

    /// Flip rates `c^+ = A + B η_{e_1}η_{-e_1}`, `c^- = A + B (1-η_{e_1})(1-η_{-e_1})`
    /// with `A = 3λ`, `B = 16λ`, so that `f(ρ) = -32λ(ρ-¼)(ρ-½)(ρ-¾)`.
    pub fn with_bistable_flips(mut self, lambda: f64) -> RateModel {
        let d = self.dim;
        let e = Offset::unit(0);
        let (a, b) = (3.0 * lambda, 16.0 * lambda);
        self.flip_plus = LocalFunction::from_fn(d, vec![-e, e], |s| a + if s[0] && s[1] { b } else { 0.0 }).unwrap();
        self.flip_minus = self.flip_plus.conjugate();
        self
    }

    /// `c_{0,e_i}` for `i < d`, or `c_{0,-e_i} = τ_{-e_i} c_{0,e_i}` for the reversed bond.
    pub fn bond_rate(&self, axis: usize, forward: bool) -> LocalFunction {
        if forward {
            self.exchange[axis].clone()
        } else {
            self.exchange[axis].shift(-Offset::unit(axis))
        }
    }

    /// `c = c^+(1-η_0) + c^-η_0`.
    pub fn flip_rate(&self) -> LocalFunction {
        let eta = LocalFunction::occupation(self.dim, Offset::ZERO);
        let hole = eta.map(|v| 1.0 - v);
        self.flip_plus.mul(&hole).unwrap().add(&self.flip_minus.mul(&eta).unwrap()).unwrap()
    }

    pub fn flips_active(&self) -> bool {
        !(self.flip_plus.is_zero(0.0) && self.flip_minus.is_zero(0.0))
    }

    /// Interaction range: the torus side must exceed twice this.
    pub fn radius(&self) -> usize {
        let ex = self
            .exchange
            .iter()
            .map(|c| c.radius().max(1))
            .max()
            .unwrap_or(1);
        ex.max(self.flip_plus.radius()).max(self.flip_minus.radius())
    }

    /// Checks detailed balance, non-degeneracy, and flip-rate admissibility.
    pub fn validate(&self) -> Result<RateBounds> {
        for (i, c) in self.exchange.iter().enumerate() {
            if c.depends_on(Offset::ZERO) || c.depends_on(Offset::unit(i)) {
                return Err(Error::DetailedBalanceViolation { direction: i });
            }
        }
        for (i, c) in self.exchange.iter().enumerate() {
            let min = c.min_value();
            if !(min > 0.0) {
                return Err(Error::DegeneracyViolation { direction: i, min });
            }
        }
        for (which, c) in [("c+", &self.flip_plus), ("c-", &self.flip_minus)] {
            let min = c.min_value();
            if !(min >= 0.0) || c.depends_on(Offset::ZERO) {
                return Err(Error::NegativityViolation { which, min });
            }
        }
        let c_min = self.exchange.iter().map(|c| c.min_value()).fold(f64::INFINITY, f64::min);
        let c_max = self.exchange.iter().map(|c| c.max_value()).fold(f64::NEG_INFINITY, f64::max);
        Ok(RateBounds { c_min, c_max })
    }

    /// `f(ρ) = (1-ρ)⟨c^+⟩_ρ - ρ⟨c^-⟩_ρ`.
    pub fn reaction_term(&self) -> Polynomial {
        let one_minus = Polynomial::new(vec![1.0, -1.0]);
        let plus = ensemble_average_polynomial(&self.flip_plus);
        let minus = ensemble_average_polynomial(&self.flip_minus);
        one_minus.mul(&plus).sub(&Polynomial::identity().mul(&minus))
    }
}

/// Sign conditions `f(0) > 0`, `f(1) < 0`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ReactionSigns {
    pub f0: f64,
    pub f1: f64,
    pub satisfied: bool,
}

pub fn reaction_signs(f: &Polynomial) -> ReactionSigns {
    let (f0, f1) = (f.eval(0.0), f.eval(1.0));
    ReactionSigns { f0, f1, satisfied: f0 > 0.0 && f1 < 0.0 }
}

#[derive(Clone, Debug, Serialize)]
pub struct ReactionClass {
    pub rho_minus: f64,
    pub rho_star: f64,
    pub rho_plus: f64,
    pub stable_slopes: bool,
    /// `∫_{ρ_-}^{ρ_+} f D dρ`, row-major.
    pub balance_matrix: Vec<f64>,
    /// `max_{|e|=1} |e·(∫ f D) e|`.
    pub max_direction_integral: f64,
    pub tolerance: f64,
    pub balanced: bool,
    pub interpretation: &'static str,
}

pub const BALANCE_INTERPRETATION: &str =
    "balanced iff the direction integral of f(rho) e.D(rho)e vanishes for every unit vector e";

/// Interior roots of `f` on a 10³-point grid, refined to 10⁻¹².
pub fn interior_roots(f: &Polynomial) -> Vec<f64> {
    f.roots_in(0.0, 1.0, 1000, 1e-12)
}

/// Bistability and the balance condition for `f` against `D`.
///
/// `breaks` are points where `D` may lose smoothness (interpolation nodes).
pub fn classify_reaction(
    f: &Polynomial,
    diffusion: impl Fn(f64) -> DMatrix<f64>,
    breaks: &[f64],
) -> Result<ReactionClass> {
    let roots = interior_roots(f);
    if roots.len() != 3 {
        return Err(Error::NotBistable { roots: roots.len() });
    }
    let (rm, rs, rp) = (roots[0], roots[1], roots[2]);
    let fp = f.derivative();
    let stable_slopes = fp.eval(rm) < 0.0 && fp.eval(rs) > 0.0 && fp.eval(rp) < 0.0;

    let d = diffusion(0.5).nrows();
    let mut points = vec![rm];
    points.extend(breaks.iter().copied().filter(|&x| x > rm && x < rp));
    points.push(rp);
    points.sort_by(f64::total_cmp);
    let mut integral = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let v = integrate_with_breaks(&mut |r| f.eval(r) * diffusion(r)[(i, j)], &points, 1e-15, 1e-13)?;
            integral[(i, j)] = v;
            integral[(j, i)] = v;
        }
    }
    let eig = integral.clone().symmetric_eigen();
    let max_dir = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));

    let samples: Vec<f64> = (0..=200).map(|k| rm + (rp - rm) * k as f64 / 200.0).collect();
    let max_f = samples.iter().fold(0.0f64, |m, &r| m.max(f.eval(r).abs()));
    let max_a = samples.iter().fold(0.0f64, |m, &r| {
        let e = diffusion(r).symmetric_eigen();
        m.max(e.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs())))
    });
    let tolerance = 1e-10 * max_f * max_a;
    Ok(ReactionClass {
        rho_minus: rm,
        rho_star: rs,
        rho_plus: rp,
        stable_slopes,
        balance_matrix: integral.transpose().iter().copied().collect(),
        max_direction_integral: max_dir,
        tolerance,
        balanced: max_dir <= tolerance,
        interpretation: BALANCE_INTERPRETATION,
    })
}

/// Serialized form of a rate model: either a preset or explicit tables in the
/// local-function text format.
#[derive(Clone, Debug, Default, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RateModelSpec {
    pub dim: usize,
    #[serde(default)]
    pub preset: Option<String>,
    /// Flip strength for the `bistable` presets.
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub exchange: Option<Vec<String>>,
    #[serde(default)]
    pub flip_plus: Option<String>,
    #[serde(default)]
    pub flip_minus: Option<String>,
}

pub const PRESETS: [&str; 5] = ["ssep", "nongradient", "symmetric-nongradient", "bistable-ssep", "bistable-nongradient"];

impl RateModelSpec {
    pub fn build(&self) -> Result<RateModel> {
        let d = self.dim;
        if d == 0 || d > crate::lattice::MAX_DIM {
            return Err(Error::Config(format!("dimension {d} not supported")));
        }
        let lambda = self.lambda.unwrap_or(1.0);
        let mut model = match self.preset.as_deref() {
            None => RateModel::ssep(d),
            Some("ssep") => RateModel::ssep(d),
            Some("nongradient") => RateModel::nongradient_example(d),
            Some("symmetric-nongradient") => RateModel::symmetric_nongradient(d),
            Some("bistable-ssep") => RateModel::ssep(d).with_bistable_flips(lambda),
            Some("bistable-nongradient") => RateModel::symmetric_nongradient(d).with_bistable_flips(lambda),
            Some(other) => {
                return Err(Error::Config(format!("unknown preset {other:?}; known: {}", PRESETS.join(", "))))
            }
        };
        if let Some(ex) = &self.exchange {
            let parsed: Vec<LocalFunction> = ex.iter().map(|s| LocalFunction::parse(d, s)).collect::<Result<_>>()?;
            model = RateModel::new(d, parsed, model.flip_plus, model.flip_minus)?;
        }
        if let Some(s) = &self.flip_plus {
            model.flip_plus = LocalFunction::parse(d, s)?;
        }
        if let Some(s) = &self.flip_minus {
            model.flip_minus = LocalFunction::parse(d, s)?;
        }
        model.validate()?;
        Ok(model)
    }

    /// Explicit tables for `model`.
    pub fn from_model(model: &RateModel) -> RateModelSpec {
        RateModelSpec {
            dim: model.dim,
            preset: None,
            lambda: None,
            exchange: Some(model.exchange.iter().map(|c| c.to_string()).collect()),
            flip_plus: Some(model.flip_plus.to_string()),
            flip_minus: Some(model.flip_minus.to_string()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::ensemble_average;

    fn o(x: i32) -> Offset {
        Offset::new(&[x])
    }

    #[test]
    fn validate_examples() {
        let b = RateModel::ssep(2).validate().unwrap();
        assert_eq!((b.c_min, b.c_max), (1.0, 1.0));
        let b = RateModel::nongradient_example(1).validate().unwrap();
        assert_eq!((b.c_min, b.c_max), (1.0, 1.5));
        let mut bad = RateModel::ssep(1);
        bad.exchange[0] = LocalFunction::occupation(1, o(1));
        assert!(matches!(bad.validate(), Err(Error::DetailedBalanceViolation { direction: 0 })));
        bad.exchange[0] = LocalFunction::occupation(1, o(2));
        assert!(matches!(bad.validate(), Err(Error::DegeneracyViolation { .. })));
        let mut neg = RateModel::ssep(1);
        neg.flip_plus = LocalFunction::constant(1, -0.1);
        assert!(matches!(neg.validate(), Err(Error::NegativityViolation { which: "c+", .. })));
        neg.flip_plus = LocalFunction::occupation(1, o(0));
        assert!(matches!(neg.validate(), Err(Error::NegativityViolation { .. })));
    }

    #[test]
    fn reaction_term_examples() {
        let mut m = RateModel::ssep(1);
        m.flip_plus = LocalFunction::constant(1, 1.0);
        m.flip_minus = LocalFunction::constant(1, 1.0);
        assert_eq!(m.reaction_term().coeffs, vec![1.0, -2.0]);
        m.flip_plus = LocalFunction::zero(1);
        let f = m.reaction_term();
        assert_eq!(f.coeffs, vec![0.0, -1.0]);
        let s = reaction_signs(&f);
        assert!(!s.satisfied && s.f0 == 0.0);
    }

    #[test]
    fn reaction_term_is_mean_of_flip_difference() {
        // f(ρ) = ⟨(1-2η_0) c⟩_ρ
        let m = RateModel::symmetric_nongradient(1).with_bistable_flips(0.7);
        let eta = LocalFunction::occupation(1, Offset::ZERO);
        let w = eta.map(|v| 1.0 - 2.0 * v).mul(&m.flip_rate()).unwrap();
        let f = m.reaction_term();
        for k in 0..=10 {
            let r = k as f64 / 10.0;
            assert!((f.eval(r) - ensemble_average(&w, r)).abs() < 1e-13);
        }
    }

    #[test]
    fn bistable_family_roots() {
        let f = RateModel::ssep(2).with_bistable_flips(1.0).reaction_term();
        // cross-check roots against a dense sampling oracle
        let roots = interior_roots(&f);
        assert_eq!(roots.len(), 3);
        let n = 200_000;
        let mut sampled = vec![];
        for k in 1..n {
            let (a, b) = (k as f64 / n as f64, (k + 1) as f64 / n as f64);
            if f.eval(a) == 0.0 || f.eval(a) * f.eval(b) < 0.0 {
                sampled.push(a);
            }
        }
        assert_eq!(sampled.len(), 3);
        for (r, s) in roots.iter().zip(&sampled) {
            assert!((r - s).abs() <= 1.0 / n as f64);
        }
        for (r, e) in roots.iter().zip([0.25, 0.5, 0.75]) {
            assert!((r - e).abs() < 1e-11);
        }
        assert!(f.derivative().eval(0.5) > 0.0);
        assert!((f.derivative().eval(0.5) - 2.0).abs() < 1e-12);
    }

    fn cubic() -> Polynomial {
        [0.25, 0.5, 0.75]
            .iter()
            .fold(Polynomial::constant(-1.0), |acc, &r| acc.mul(&Polynomial::new(vec![-r, 1.0])))
    }

    #[test]
    fn classify_examples() {
        assert!(matches!(
            classify_reaction(&Polynomial::new(vec![1.0, -2.0]), |_| DMatrix::identity(1, 1), &[]),
            Err(Error::NotBistable { roots: 1 })
        ));
        let c = classify_reaction(&cubic(), |_| DMatrix::identity(1, 1), &[]).unwrap();
        assert!(c.balanced && c.stable_slopes);
        assert!(c.max_direction_integral < 1e-16);

        let c = classify_reaction(&cubic(), |r| DMatrix::from_element(1, 1, 1.0 + r), &[]).unwrap();
        assert!(!c.balanced);
        // midpoint-rule oracle at high resolution
        let n = 400_000;
        let h = 0.5 / n as f64;
        let oracle: f64 = (0..n)
            .map(|k| {
                let r = 0.25 + (k as f64 + 0.5) * h;
                cubic().eval(r) * (1.0 + r) * h
            })
            .sum();
        assert!(oracle > 0.0 && c.balance_matrix[0] > 0.0);
        assert!((c.balance_matrix[0] - oracle).abs() < 1e-12);
        assert!((c.balance_matrix[0] - 1.0 / 3840.0).abs() < 1e-15);
    }

    #[test]
    fn classify_matrix_requires_every_direction() {
        let d = |r: f64| DMatrix::from_row_slice(2, 2, &[1.0, r - 0.5, r - 0.5, 1.0]);
        let c = classify_reaction(&cubic(), d, &[]).unwrap();
        // diagonal integrals vanish, off-diagonal does not
        assert!(c.balance_matrix[0].abs() < 1e-16);
        assert!(c.balance_matrix[1].abs() > 1e-6);
        assert!(!c.balanced);
    }

    #[test]
    fn reversibility_under_bernoulli() {
        // ⟨c_b g π_b h⟩_ρ = ⟨c_b h π_b g⟩_ρ
        let m = RateModel::nongradient_example(1);
        let c = &m.exchange[0];
        let g = LocalFunction::parse(1, "(0) (1) (2) -> 0.3 1 -2 4 0.5 0 7 1").unwrap();
        let h = LocalFunction::parse(1, "(-1) (1) -> 2 -1 0.5 3").unwrap();
        let (a, b) = (o(0), o(1));
        for rho in [0.1, 0.5, 0.83] {
            let l = c.mul(&g).unwrap().mul(&h.exchange_difference(a, b).unwrap()).unwrap();
            let r = c.mul(&h).unwrap().mul(&g.exchange_difference(a, b).unwrap()).unwrap();
            assert!((ensemble_average(&l, rho) - ensemble_average(&r, rho)).abs() < 1e-13);
        }
    }

    #[test]
    fn spec_roundtrip_and_presets() {
        for p in PRESETS {
            let spec = RateModelSpec { dim: 2, preset: Some(p.into()), lambda: Some(0.5), ..Default::default() };
            let model = spec.build().unwrap();
            let back = RateModelSpec::from_model(&model).build().unwrap();
            assert_eq!(back, model);
        }
        let spec = RateModelSpec { dim: 1, exchange: Some(vec!["(1) -> 1 2".into()]), ..Default::default() };
        assert!(matches!(spec.build(), Err(Error::DetailedBalanceViolation { .. })));
    }

    #[test]
    fn reaction_degree_bound() {
        let m = RateModel::ssep(1).with_bistable_flips(1.0);
        let k = m.flip_plus.support().len().max(m.flip_minus.support().len());
        assert!(m.reaction_term().degree() <= k + 1);
    }
}
