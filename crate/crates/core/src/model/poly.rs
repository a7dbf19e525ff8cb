//! Polynomial-in-space, harmonic-in-time scalar fields.
//!
//! Every term is `coeff * h(t) * x^powers` where `h` is `1`, `cos(2πkt/τ)` or
//! `sin(2πkt/τ)`, so the field is τ-periodic by construction and all
//! derivatives are exact.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeMode {
    Const,
    Cos(u32),
    Sin(u32),
}

impl TimeMode {
    fn value_and_rate(self, t: f64, period: f64) -> (f64, f64) {
        match self {
            TimeMode::Const => (1.0, 0.0),
            TimeMode::Cos(k) => {
                let w = TAU * k as f64 / period;
                let (s, c) = (w * t).sin_cos();
                (c, -w * s)
            }
            TimeMode::Sin(k) => {
                let w = TAU * k as f64 / period;
                let (s, c) = (w * t).sin_cos();
                (s, w * c)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolyTerm {
    pub coeff: f64,
    pub powers: Vec<u32>,
    #[serde(default = "const_mode")]
    pub time: TimeMode,
}

fn const_mode() -> TimeMode {
    TimeMode::Const
}

impl PolyTerm {
    pub fn new(coeff: f64, powers: Vec<u32>, time: TimeMode) -> Self {
        Self {
            coeff,
            powers,
            time,
        }
    }

    pub fn degree(&self) -> u32 {
        self.powers.iter().sum()
    }
}

#[inline]
fn monomial(x: &[f64], powers: &[u32]) -> f64 {
    let mut v = 1.0;
    for (&xi, &p) in x.iter().zip(powers) {
        if p > 0 {
            v *= xi.powi(p as i32);
        }
    }
    v
}

/// `∂/∂x_i` of the monomial.
#[inline]
fn monomial_d(x: &[f64], powers: &[u32], i: usize) -> f64 {
    let p = powers[i];
    if p == 0 {
        return 0.0;
    }
    let mut v = p as f64;
    for (j, (&xj, &pj)) in x.iter().zip(powers).enumerate() {
        let e = if j == i { pj - 1 } else { pj };
        if e > 0 {
            v *= xj.powi(e as i32);
        }
    }
    v
}

/// `∂²/∂x_i∂x_j` of the monomial.
fn monomial_dd(x: &[f64], powers: &[u32], i: usize, j: usize) -> f64 {
    let mut exps = powers.to_vec();
    let mut c = 1.0;
    for k in [i, j] {
        if exps[k] == 0 {
            return 0.0;
        }
        c *= exps[k] as f64;
        exps[k] -= 1;
    }
    for (&xk, &e) in x.iter().zip(&exps) {
        if e > 0 {
            c *= xk.powi(e as i32);
        }
    }
    c
}

/// A τ-periodic scalar polynomial field on `R × R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct TauPolynomial {
    dim: usize,
    period: f64,
    terms: Vec<PolyTerm>,
}

impl TauPolynomial {
    pub fn new(dim: usize, period: f64, terms: Vec<PolyTerm>) -> Result<Self> {
        if !(period > 0.0 && period.is_finite()) {
            return Err(Error::param("period", "must be positive and finite"));
        }
        for term in &terms {
            if term.powers.len() != dim {
                return Err(Error::DimensionMismatch {
                    context: "polynomial term powers",
                    expected: dim,
                    got: term.powers.len(),
                });
            }
            if !term.coeff.is_finite() {
                return Err(Error::param("coeff", "must be finite"));
            }
        }
        Ok(Self { dim, period, terms })
    }

    pub fn zero(dim: usize, period: f64) -> Self {
        Self {
            dim,
            period,
            terms: Vec::new(),
        }
    }

    pub fn constant(dim: usize, period: f64, c: f64) -> Self {
        Self {
            dim,
            period,
            terms: vec![PolyTerm::new(c, vec![0; dim], TimeMode::Const)],
        }
    }

    /// The coordinate function `x_i`.
    pub fn coordinate(dim: usize, period: f64, i: usize) -> Self {
        let mut powers = vec![0; dim];
        powers[i] = 1;
        Self {
            dim,
            period,
            terms: vec![PolyTerm::new(1.0, powers, TimeMode::Const)],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn terms(&self) -> &[PolyTerm] {
        &self.terms
    }

    pub fn degree(&self) -> u32 {
        self.terms.iter().map(PolyTerm::degree).max().unwrap_or(0)
    }

    pub fn is_zero(&self) -> bool {
        self.terms.iter().all(|t| t.coeff == 0.0)
    }

    /// True when no term depends on `x`.
    pub fn is_space_constant(&self) -> bool {
        self.terms.iter().all(|t| t.degree() == 0 || t.coeff == 0.0)
    }

    pub fn value(&self, t: f64, x: &[f64]) -> f64 {
        let mut v = 0.0;
        for term in &self.terms {
            let (h, _) = term.time.value_and_rate(t, self.period);
            v += term.coeff * h * monomial(x, &term.powers);
        }
        v
    }

    pub fn time_derivative(&self, t: f64, x: &[f64]) -> f64 {
        let mut v = 0.0;
        for term in &self.terms {
            let (_, dh) = term.time.value_and_rate(t, self.period);
            if dh != 0.0 {
                v += term.coeff * dh * monomial(x, &term.powers);
            }
        }
        v
    }

    pub fn partial(&self, t: f64, x: &[f64], i: usize) -> f64 {
        let mut v = 0.0;
        for term in &self.terms {
            if term.powers[i] == 0 {
                continue;
            }
            let (h, _) = term.time.value_and_rate(t, self.period);
            v += term.coeff * h * monomial_d(x, &term.powers, i);
        }
        v
    }

    pub fn gradient_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for term in &self.terms {
            let (h, _) = term.time.value_and_rate(t, self.period);
            let c = term.coeff * h;
            for (i, o) in out.iter_mut().enumerate() {
                if term.powers[i] > 0 {
                    *o += c * monomial_d(x, &term.powers, i);
                }
            }
        }
    }

    /// Row-major `d × d` Hessian.
    pub fn hessian_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        out.iter_mut().for_each(|o| *o = 0.0);
        for term in &self.terms {
            if term.degree() < 2 {
                continue;
            }
            let (h, _) = term.time.value_and_rate(t, self.period);
            let c = term.coeff * h;
            for i in 0..d {
                for j in i..d {
                    let v = c * monomial_dd(x, &term.powers, i, j);
                    out[i * d + j] += v;
                    if i != j {
                        out[j * d + i] += v;
                    }
                }
            }
        }
    }
}

/// A τ-periodic statistical observable `φ(t, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observable {
    pub label: String,
    poly: TauPolynomial,
}

impl Observable {
    pub fn new(label: impl Into<String>, poly: TauPolynomial) -> Self {
        Self {
            label: label.into(),
            poly,
        }
    }

    pub fn from_terms(
        label: impl Into<String>,
        dim: usize,
        period: f64,
        terms: Vec<PolyTerm>,
    ) -> Result<Self> {
        Ok(Self::new(label, TauPolynomial::new(dim, period, terms)?))
    }

    pub fn coordinate(dim: usize, period: f64, i: usize) -> Self {
        Self::new(format!("x{}", i + 1), TauPolynomial::coordinate(dim, period, i))
    }

    /// `x_1, …, x_d` in order.
    pub fn coordinates(dim: usize, period: f64) -> Vec<Self> {
        (0..dim).map(|i| Self::coordinate(dim, period, i)).collect()
    }

    pub fn constant(dim: usize, period: f64, c: f64) -> Self {
        Self::new("const", TauPolynomial::constant(dim, period, c))
    }

    pub fn poly(&self) -> &TauPolynomial {
        &self.poly
    }

    pub fn dim(&self) -> usize {
        self.poly.dim()
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> f64 {
        self.poly.value(t, x)
    }
}

/// A scalar function with caller-supplied time derivative, gradient and Hessian.
pub trait SmoothScalar {
    fn dim(&self) -> usize;
    fn value(&self, t: f64, x: &[f64]) -> f64;
    fn time_derivative(&self, t: f64, x: &[f64]) -> f64;
    fn gradient_into(&self, t: f64, x: &[f64], out: &mut [f64]);
    /// Row-major `dim × dim`.
    fn hessian_into(&self, t: f64, x: &[f64], out: &mut [f64]);
}

impl SmoothScalar for TauPolynomial {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, t: f64, x: &[f64]) -> f64 {
        TauPolynomial::value(self, t, x)
    }
    fn time_derivative(&self, t: f64, x: &[f64]) -> f64 {
        TauPolynomial::time_derivative(self, t, x)
    }
    fn gradient_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        TauPolynomial::gradient_into(self, t, x, out)
    }
    fn hessian_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        TauPolynomial::hessian_into(self, t, x, out)
    }
}

impl SmoothScalar for Observable {
    fn dim(&self) -> usize {
        self.poly.dim
    }
    fn value(&self, t: f64, x: &[f64]) -> f64 {
        self.poly.value(t, x)
    }
    fn time_derivative(&self, t: f64, x: &[f64]) -> f64 {
        self.poly.time_derivative(t, x)
    }
    fn gradient_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.poly.gradient_into(t, x, out)
    }
    fn hessian_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.poly.hessian_into(t, x, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TauPolynomial {
        // 2 x0^2 x1 cos(2πt) - 0.5 x1^3 + 3 sin(4πt)
        TauPolynomial::new(
            2,
            1.0,
            vec![
                PolyTerm::new(2.0, vec![2, 1], TimeMode::Cos(1)),
                PolyTerm::new(-0.5, vec![0, 3], TimeMode::Const),
                PolyTerm::new(3.0, vec![0, 0], TimeMode::Sin(2)),
            ],
        )
        .unwrap()
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let p = sample();
        let (t, x) = (0.13, [0.7, -1.2]);
        let h = 1e-6;
        let mut g = [0.0; 2];
        p.gradient_into(t, &x, &mut g);
        for i in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let fd = (p.value(t, &xp) - p.value(t, &xm)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6, "grad {i}: {fd} vs {}", g[i]);
        }
        let dt_fd = (p.value(t + h, &x) - p.value(t - h, &x)) / (2.0 * h);
        assert!((dt_fd - p.time_derivative(t, &x)).abs() < 1e-5);

        let mut hess = [0.0; 4];
        p.hessian_into(t, &x, &mut hess);
        for i in 0..2 {
            for j in 0..2 {
                let mut xp = x;
                let mut xm = x;
                xp[j] += h;
                xm[j] -= h;
                let fd = (p.partial(t, &xp, i) - p.partial(t, &xm, i)) / (2.0 * h);
                assert!((fd - hess[i * 2 + j]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn observables_are_tau_periodic() {
        let p = sample();
        for k in 0..50 {
            let t = k as f64 * 0.037;
            let x = [0.3 * k as f64 - 2.0, 1.1];
            assert!((p.value(t + 1.0, &x) - p.value(t, &x)).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_wrong_arity() {
        let err = TauPolynomial::new(3, 1.0, vec![PolyTerm::new(1.0, vec![1, 0], TimeMode::Const)]);
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
    }
}
