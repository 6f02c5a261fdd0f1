//! Polynomial activations and their probabilists' Hermite structure.
//!
//! Hermite polynomials follow the probabilists' convention
//! `He_0 = 1, He_1 = t, He_{n+1} = t·He_n − n·He_{n−1}`, so `He_2 = t² − 1`
//! and `He_3 = t³ − 3t`. With `φ = Σ_k c_k He_k`, the projection
//! `E[φ(Z) He_k(Z)]` for standard normal `Z` equals `k!·c_k`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_DEGREE: usize = 8;
const MODE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Activation {
    coeffs: Vec<f64>,
    d1: Vec<f64>,
    d2: Vec<f64>,
    hermite: Vec<f64>,
}

/// Monomial coefficients of `He_0..=He_n`; row `k` holds `He_k`.
pub fn hermite_table(n: usize) -> Vec<Vec<f64>> {
    let mut table: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    table.push(vec![1.0]);
    if n >= 1 {
        table.push(vec![0.0, 1.0]);
    }
    for k in 1..n {
        let mut next = vec![0.0; k + 2];
        for (i, &c) in table[k].iter().enumerate() {
            next[i + 1] += c;
        }
        for (i, &c) in table[k - 1].iter().enumerate() {
            next[i] -= k as f64 * c;
        }
        table.push(next);
    }
    table
}

/// Monomial → Hermite coefficients (back substitution on the triangular basis).
pub fn monomial_to_hermite(coeffs: &[f64]) -> Vec<f64> {
    if coeffs.is_empty() {
        return Vec::new();
    }
    let n = coeffs.len() - 1;
    let table = hermite_table(n);
    let mut rest = coeffs.to_vec();
    let mut out = vec![0.0; n + 1];
    for k in (0..=n).rev() {
        let c = rest[k];
        out[k] = c;
        for (i, &h) in table[k].iter().enumerate() {
            rest[i] -= c * h;
        }
    }
    out
}

pub fn hermite_to_monomial(hermite: &[f64]) -> Vec<f64> {
    if hermite.is_empty() {
        return Vec::new();
    }
    let table = hermite_table(hermite.len() - 1);
    let mut out = vec![0.0; hermite.len()];
    for (k, &c) in hermite.iter().enumerate() {
        for (i, &h) in table[k].iter().enumerate() {
            out[i] += c * h;
        }
    }
    out
}

fn derivative(coeffs: &[f64]) -> Vec<f64> {
    if coeffs.len() <= 1 {
        return vec![0.0];
    }
    coeffs.iter().enumerate().skip(1).map(|(i, &c)| i as f64 * c).collect()
}

#[inline]
fn horner(coeffs: &[f64], t: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * t + c)
}

impl Activation {
    /// `coeffs[i]` multiplies `t^i`; trailing zeros are trimmed.
    pub fn from_monomial(coeffs: &[f64]) -> Result<Self> {
        let mut c = coeffs.to_vec();
        while c.len() > 1 && *c.last().unwrap() == 0.0 {
            c.pop();
        }
        if c.is_empty() {
            c.push(0.0);
        }
        let degree = c.len() - 1;
        if degree > MAX_DEGREE {
            return Err(Error::DegreeCap { degree, cap: MAX_DEGREE });
        }
        let d1 = derivative(&c);
        let d2 = derivative(&d1);
        let hermite = monomial_to_hermite(&c);
        Ok(Self { coeffs: c, d1, d2, hermite })
    }

    pub fn from_hermite(hermite: &[f64]) -> Result<Self> {
        Self::from_monomial(&hermite_to_monomial(hermite))
    }

    pub fn identity() -> Self {
        Self::from_monomial(&[0.0, 1.0]).expect("degree 1")
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn hermite_coeffs(&self) -> &[f64] {
        &self.hermite
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    /// `E[φ(Z) He_k(Z)] = k!·c_k`.
    pub fn hermite_projection(&self, k: usize) -> f64 {
        let c = self.hermite.get(k).copied().unwrap_or(0.0);
        c * (1..=k).map(|i| i as f64).product::<f64>()
    }

    #[inline]
    pub fn eval(&self, t: f64) -> f64 {
        horner(&self.coeffs, t)
    }

    #[inline]
    pub fn eval_d1(&self, t: f64) -> f64 {
        horner(&self.d1, t)
    }

    #[inline]
    pub fn eval_d2(&self, t: f64) -> f64 {
        horner(&self.d2, t)
    }

    pub fn eval_deriv(&self, t: f64, order: usize) -> Result<f64> {
        match order {
            0 => Ok(self.eval(t)),
            1 => Ok(self.eval_d1(t)),
            2 => Ok(self.eval_d2(t)),
            k => Err(Error::UnsupportedOrder(k)),
        }
    }

    /// `(φ(0), φ'(0), φ''(0))`.
    pub fn at_zero(&self) -> (f64, f64, f64) {
        (self.eval(0.0), self.eval_d1(0.0), self.eval_d2(0.0))
    }
}

/// `φ = 0.7·He_2 + 0.3·He_3`.
pub fn build_paper_activation() -> Activation {
    Activation::from_hermite(&[0.0, 0.0, 0.7, 0.3]).expect("degree 3")
}

/// Smallest `k > 0` whose Hermite coefficient exceeds `1e-12` in magnitude.
pub fn hermite_mode(act: &Activation) -> Result<usize> {
    act.hermite
        .iter()
        .enumerate()
        .skip(1)
        .find(|(_, c)| c.abs() > MODE_TOL)
        .map(|(k, _)| k)
        .ok_or(Error::NoHermiteMode)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_activation_values() {
        let act = build_paper_activation();
        let (p0, p1, p2) = act.at_zero();
        assert!((p0 + 0.7).abs() < 1e-15);
        assert!((p1 + 0.9).abs() < 1e-15);
        assert!((p2 - 1.4).abs() < 1e-15);
        assert!((act.eval(1.0) + 0.6).abs() < 1e-15);
        assert_eq!(hermite_mode(&act).unwrap(), 2);
        assert!((act.hermite_projection(2) - 1.4).abs() < 1e-15);
        assert!(act.hermite_coeffs()[1].abs() < 1e-15);
    }

    #[test]
    fn nonzero_conditions_hold() {
        let (a, b, c) = build_paper_activation().at_zero();
        assert!(a.abs() >= 0.5 && b.abs() >= 0.5 && c.abs() >= 0.5);
    }

    #[test]
    fn hermite_modes() {
        assert_eq!(hermite_mode(&Activation::identity()).unwrap(), 1);
        let cube = Activation::from_monomial(&[0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(hermite_mode(&cube).unwrap(), 1);
        let h = cube.hermite_coeffs();
        assert!((h[1] - 3.0).abs() < 1e-15 && (h[3] - 1.0).abs() < 1e-15);
        let constant = Activation::from_monomial(&[2.5]).unwrap();
        assert_eq!(hermite_mode(&constant), Err(Error::NoHermiteMode));
    }

    #[test]
    fn unsupported_order() {
        let act = build_paper_activation();
        assert!((act.eval_deriv(0.0, 1).unwrap() + 0.9).abs() < 1e-15);
        assert_eq!(act.eval_deriv(0.0, 3), Err(Error::UnsupportedOrder(3)));
    }

    #[test]
    fn degree_cap() {
        assert!(Activation::from_monomial(&[1.0; 9]).is_ok());
        assert!(matches!(Activation::from_monomial(&[1.0; 10]), Err(Error::DegreeCap { .. })));
    }

    #[test]
    fn hermite_table_matches_known() {
        let t = hermite_table(4);
        assert_eq!(t[2], vec![-1.0, 0.0, 1.0]);
        assert_eq!(t[3], vec![0.0, -3.0, 0.0, 1.0]);
        assert_eq!(t[4], vec![3.0, 0.0, -6.0, 0.0, 1.0]);
    }
}
