//! Equality-constrained polynomial least squares.
//!
//! Solved by null-space elimination: the constraint rows are QR-factored to
//! split coefficient space into a particular solution and a free subspace,
//! and the residual is minimized over the free part by SVD least squares.

use nalgebra::{DMatrix, DVector};

use super::poly::MAX_DEGREE;
use crate::{Error, Result};

/// One linear equality `row · a = target` over the coefficient vector
/// `[a0, …, a_d]` (highest power first).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearConstraint {
    pub row: Vec<f64>,
    pub target: f64,
}

impl LinearConstraint {
    /// `P(x) = target`.
    pub fn value_at(degree: usize, x: f64, target: f64) -> Self {
        Self { row: power_row(degree, x), target }
    }

    /// `dP/dx (x) · scale = target`.
    pub fn slope_at(degree: usize, x: f64, scale: f64, target: f64) -> Self {
        let row = (0..=degree)
            .map(|k| {
                let p = degree - k;
                if p == 0 {
                    0.0
                } else {
                    p as f64 * x.powi(p as i32 - 1) * scale
                }
            })
            .collect();
        Self { row, target }
    }

    /// `scale · ∫_{x0}^{x1} P(x) dx = target`.
    pub fn integral(degree: usize, x0: f64, x1: f64, scale: f64, target: f64) -> Self {
        let row = (0..=degree)
            .map(|k| {
                let q = (degree - k + 1) as i32;
                (x1.powi(q) - x0.powi(q)) / q as f64 * scale
            })
            .collect();
        Self { row, target }
    }

    pub fn residual(&self, a: &[f64]) -> f64 {
        self.achieved(a) - self.target
    }

    pub fn achieved(&self, a: &[f64]) -> f64 {
        self.row.iter().zip(a).map(|(r, c)| r * c).sum()
    }
}

fn power_row(degree: usize, x: f64) -> Vec<f64> {
    (0..=degree).map(|k| x.powi((degree - k) as i32)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsqSolution {
    /// Highest power first, length `degree + 1`.
    pub coeffs: Vec<f64>,
    pub rms_residual: f64,
}

const RANK_TOL: f64 = 1e-12;

/// Minimize `Σ (P(x_i) − y_i)²` subject to the given equality constraints.
///
/// Fails when the constraints are dependent or outnumber the coefficients,
/// or when the samples leave some free direction undetermined.
pub fn fit_constrained(xs: &[f64], ys: &[f64], degree: usize, constraints: &[LinearConstraint]) -> Result<LsqSolution> {
    if degree > MAX_DEGREE {
        return Err(Error::Fit(format!("degree {degree} exceeds {MAX_DEGREE}")));
    }
    if xs.len() != ys.len() {
        return Err(Error::Fit("sample abscissae and values differ in length".into()));
    }
    let n = degree + 1;
    let m = constraints.len();
    if m > n {
        return Err(Error::Fit(format!("{m} constraints over {n} coefficients")));
    }
    if constraints.iter().any(|c| c.row.len() != n) {
        return Err(Error::Fit("constraint row length does not match degree".into()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite())
        || constraints.iter().any(|c| !c.target.is_finite() || c.row.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::Fit("non-finite input".into()));
    }

    let v = DMatrix::from_fn(xs.len(), n, |i, k| xs[i].powi((degree - k) as i32));
    let y = DVector::from_column_slice(ys);

    let (a_p, free) = if m == 0 {
        (DVector::zeros(n), DMatrix::identity(n, n))
    } else {
        // Cᵀ padded to square so the QR yields a complete orthonormal basis.
        let mut ct = DMatrix::zeros(n, n);
        for (j, c) in constraints.iter().enumerate() {
            for k in 0..n {
                ct[(k, j)] = c.row[k];
            }
        }
        let qr = ct.qr();
        let q = qr.q();
        let r = qr.r();
        let scale = (0..m).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
        if scale == 0.0 || (0..m).any(|i| r[(i, i)].abs() <= RANK_TOL * scale) {
            return Err(Error::Fit("rank-deficient constraint set".into()));
        }
        // C = R1ᵀ Q1ᵀ, so C a = d with a = Q1 w gives R1ᵀ w = d (forward substitution).
        let mut w = DVector::zeros(m);
        for i in 0..m {
            let mut acc = constraints[i].target;
            for j in 0..i {
                acc -= r[(j, i)] * w[j];
            }
            w[i] = acc / r[(i, i)];
        }
        let q1 = q.columns(0, m).into_owned();
        let q2 = q.columns(m, n - m).into_owned();
        (q1 * w, q2)
    };

    let a = if free.ncols() == 0 {
        a_p
    } else {
        let vz = &v * &free;
        if vz.nrows() < vz.ncols() {
            return Err(Error::Fit(format!("{} sample(s) for {} free coefficient(s)", vz.nrows(), vz.ncols())));
        }
        let rhs = &y - &v * &a_p;
        let svd = vz.svd(true, true);
        let smax = svd.singular_values.max();
        if smax == 0.0 || svd.singular_values.min() <= RANK_TOL * smax * (n as f64) {
            return Err(Error::Fit("samples do not determine the free coefficients".into()));
        }
        let z = svd.solve(&rhs, 0.0).map_err(|e| Error::Fit(e.to_string()))?;
        a_p + free * z
    };

    let coeffs: Vec<f64> = a.iter().copied().collect();
    if coeffs.iter().any(|c| !c.is_finite()) {
        return Err(Error::Fit("non-finite coefficients".into()));
    }
    let rms_residual = if xs.is_empty() {
        0.0
    } else {
        let r = &v * &a - &y;
        (r.norm_squared() / xs.len() as f64).sqrt()
    };
    Ok(LsqSolution { coeffs, rms_residual })
}
