//! Dense real polynomials in one variable (ascending coefficients).

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polynomial {
    pub coeffs: Vec<f64>,
}

impl Polynomial {
    pub fn new(mut coeffs: Vec<f64>) -> Polynomial {
        while coeffs.len() > 1 && *coeffs.last().unwrap() == 0.0 {
            coeffs.pop();
        }
        if coeffs.is_empty() {
            coeffs.push(0.0);
        }
        Polynomial { coeffs }
    }

    pub fn constant(c: f64) -> Polynomial {
        Polynomial::new(vec![c])
    }

    /// `x`.
    pub fn identity() -> Polynomial {
        Polynomial::new(vec![0.0, 1.0])
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
    }

    pub fn derivative(&self) -> Polynomial {
        if self.coeffs.len() == 1 {
            return Polynomial::constant(0.0);
        }
        Polynomial::new(self.coeffs.iter().enumerate().skip(1).map(|(k, &c)| k as f64 * c).collect())
    }

    /// Antiderivative vanishing at 0.
    pub fn integral(&self) -> Polynomial {
        let mut c = vec![0.0];
        c.extend(self.coeffs.iter().enumerate().map(|(k, &a)| a / (k + 1) as f64));
        Polynomial::new(c)
    }

    pub fn add(&self, other: &Polynomial) -> Polynomial {
        let n = self.coeffs.len().max(other.coeffs.len());
        Polynomial::new(
            (0..n)
                .map(|k| self.coeffs.get(k).unwrap_or(&0.0) + other.coeffs.get(k).unwrap_or(&0.0))
                .collect(),
        )
    }

    pub fn sub(&self, other: &Polynomial) -> Polynomial {
        self.add(&other.scale(-1.0))
    }

    pub fn mul(&self, other: &Polynomial) -> Polynomial {
        let mut c = vec![0.0; self.coeffs.len() + other.coeffs.len() - 1];
        for (i, a) in self.coeffs.iter().enumerate() {
            for (j, b) in other.coeffs.iter().enumerate() {
                c[i + j] += a * b;
            }
        }
        Polynomial::new(c)
    }

    pub fn scale(&self, s: f64) -> Polynomial {
        Polynomial::new(self.coeffs.iter().map(|c| c * s).collect())
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.coeffs.iter().fold(0.0, |m, c| m.max(c.abs()))
    }

    /// Roots in the open interval `(a, b)`: sign changes on a uniform grid of
    /// `grid` points, refined by bisection to `tol`. Grid nodes where the
    /// polynomial vanishes exactly are reported as roots.
    pub fn roots_in(&self, a: f64, b: f64, grid: usize, tol: f64) -> Vec<f64> {
        let scale = self.max_abs_coeff();
        if scale == 0.0 {
            return vec![];
        }
        let xs: Vec<f64> = (0..=grid).map(|i| a + (b - a) * i as f64 / grid as f64).collect();
        let vs: Vec<f64> = xs.iter().map(|&x| self.eval(x)).collect();
        let mut roots = vec![];
        for i in 0..grid {
            let (x0, x1, v0, v1) = (xs[i], xs[i + 1], vs[i], vs[i + 1]);
            if v0 == 0.0 {
                if i > 0 {
                    roots.push(x0);
                }
                continue;
            }
            if v0 * v1 < 0.0 {
                let (mut lo, mut hi, mut flo) = (x0, x1, v0);
                while hi - lo > tol {
                    let mid = 0.5 * (lo + hi);
                    let fm = self.eval(mid);
                    if fm == 0.0 {
                        lo = mid;
                        hi = mid;
                        break;
                    }
                    if fm * flo < 0.0 {
                        hi = mid;
                    } else {
                        lo = mid;
                        flo = fm;
                    }
                }
                roots.push(0.5 * (lo + hi));
            }
        }
        roots
    }
}

impl fmt::Display for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (k, &c) in self.coeffs.iter().enumerate() {
            if c == 0.0 && self.coeffs.len() > 1 {
                continue;
            }
            if !first {
                write!(f, " {} ", if c < 0.0 { '-' } else { '+' })?;
            } else if c < 0.0 {
                write!(f, "-")?;
            }
            first = false;
            let a = c.abs();
            match k {
                0 => write!(f, "{a}")?,
                1 => write!(f, "{a}*rho")?,
                _ => write!(f, "{a}*rho^{k}")?,
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arithmetic() {
        let p = Polynomial::new(vec![1.0, -2.0]);
        let q = p.mul(&p);
        assert_eq!(q.coeffs, vec![1.0, -4.0, 4.0]);
        assert_eq!(q.derivative().coeffs, vec![-4.0, 8.0]);
        assert_eq!(q.integral().coeffs, vec![0.0, 1.0, -2.0, 4.0 / 3.0]);
        assert_eq!(p.sub(&p).coeffs, vec![0.0]);
        assert_eq!(q.eval(0.5), 0.0);
    }

    #[test]
    fn cubic_roots() {
        // -(x - 1/4)(x - 1/2)(x - 3/4)
        let p = [0.25, 0.5, 0.75]
            .iter()
            .fold(Polynomial::constant(-1.0), |acc, &r| acc.mul(&Polynomial::new(vec![-r, 1.0])));
        let roots = p.roots_in(0.0, 1.0, 1000, 1e-12);
        assert_eq!(roots.len(), 3);
        for (r, e) in roots.iter().zip([0.25, 0.5, 0.75]) {
            assert!((r - e).abs() < 1e-11);
        }
        assert_eq!(p.to_string().is_empty(), false);
    }
}
