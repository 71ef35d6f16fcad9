//! Degree-≤5 time polynomials on a normalized domain.

use serde::{Deserialize, Serialize};

pub const MAX_DEGREE: usize = 5;

/// Polynomial `P(x) = a[0] x^d + a[1] x^(d-1) + … + a[d]` over normalized
/// time `x ∈ [0, 1]`, where `x = (τ - τ_start) / duration`.
///
/// Full-degree fits have six coefficients `a0..a5`, `a0` multiplying `x^5`.
/// Short actions may carry fewer (leading powers dropped).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyCoeffs {
    pub a: Vec<f64>,
    /// Physical length of the fit domain, seconds.
    pub duration: f64,
}

impl PolyCoeffs {
    pub fn new(a: Vec<f64>, duration: f64) -> Self {
        debug_assert!(!a.is_empty() && a.len() <= MAX_DEGREE + 1);
        Self { a, duration }
    }

    pub fn constant(value: f64, duration: f64) -> Self {
        Self::new(vec![value], duration)
    }

    pub fn degree(&self) -> usize {
        self.a.len() - 1
    }

    /// Coefficients left-padded with zeros to `[a0, …, a5]`.
    pub fn padded(&self) -> [f64; MAX_DEGREE + 1] {
        let mut out = [0.0; MAX_DEGREE + 1];
        out[MAX_DEGREE + 1 - self.a.len()..].copy_from_slice(&self.a);
        out
    }

    pub fn eval(&self, x: f64) -> f64 {
        eval_poly(self, x)
    }

    /// dP/dx at `x` (normalized units).
    pub fn derivative(&self, x: f64) -> f64 {
        let d = self.degree();
        self.a[..d].iter().enumerate().fold(0.0, |acc, (k, &c)| acc * x + c * (d - k) as f64)
    }

    pub fn integrate(&self, x0: f64, x1: f64) -> f64 {
        integrate_poly(self, x0, x1)
    }

    pub fn is_finite(&self) -> bool {
        self.duration.is_finite() && self.a.iter().all(|c| c.is_finite())
    }
}

/// Horner evaluation.
pub fn eval_poly(c: &PolyCoeffs, x: f64) -> f64 {
    c.a.iter().fold(0.0, |acc, &k| acc * x + k)
}

fn antiderivative(c: &PolyCoeffs, x: f64) -> f64 {
    let d = c.degree();
    let inner = c.a.iter().enumerate().fold(0.0, |acc, (k, &coef)| acc * x + coef / (d - k + 1) as f64);
    inner * x
}

/// Closed-form integral over `[x0, x1]` in normalized time, scaled by the
/// duration so the result is in physical units (metres for a speed fit).
pub fn integrate_poly(c: &PolyCoeffs, x0: f64, x1: f64) -> f64 {
    (antiderivative(c, x1) - antiderivative(c, x0)) * c.duration
}
