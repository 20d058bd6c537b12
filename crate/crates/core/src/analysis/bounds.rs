//! Stage error and per-step growth bounds for perturbed DIRK steps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::precision::Lu;
use crate::tableau::ButcherTableau;

fn check_implicit(t: &ButcherTableau) -> Result<()> {
    if let Some(i) = t.diag().iter().position(|&a| !(a > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "bounds need every a_ii > 0; stage {i} of {} is explicit",
            t.name
        )));
    }
    Ok(())
}

/// `|(A - diag(A)) A^-1|`, elementwise absolute value.
pub fn compute_q(t: &ButcherTableau) -> Result<Matrix<f64>> {
    check_implicit(t)?;
    let a = t.a_matrix();
    let inv = Lu::factor(&a)?.inverse();
    let mut off = a.clone();
    for i in 0..t.s {
        off[(i, i)] = 0.0;
    }
    let mut q = off.matmul(&inv).map(f64::abs);
    // Exact zeros on and above the diagonal; the product leaves roundoff there.
    for i in 0..t.s {
        for j in i..t.s {
            q[(i, j)] = 0.0;
        }
    }
    Ok(q)
}

/// `sum_{l=1}^{s-1} Q^l`.
fn q_series(q: &Matrix<f64>) -> Matrix<f64> {
    let s = q.rows();
    let mut acc = Matrix::zeros(s, s);
    let mut pow = Matrix::identity(s);
    for _ in 1..s {
        pow = pow.matmul(q);
        acc = acc.add(&pow);
    }
    acc
}

/// Stage bound coefficients `K` and `C` for the perturbation sizes `h`.
pub fn compute_k_c(t: &ButcherTableau, h: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if h.len() != t.s {
        return Err(Error::Dimension {
            expected: t.s,
            got: h.len(),
        });
    }
    if h.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::InvalidArgument(
            "perturbation sizes must be >= 0".into(),
        ));
    }
    let series = q_series(&compute_q(t)?);
    let diag = t.diag();
    let ah: Vec<f64> = diag.iter().zip(h).map(|(a, v)| a * v).collect();
    let se = series.matvec(&vec![1.0; t.s]);
    let sah = series.matvec(&ah);
    let k = se.iter().map(|v| 1.0 + 2.0 * v).collect();
    let c = ah.iter().zip(&sah).map(|(a, v)| a + 2.0 * v).collect();
    Ok((k, c))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaOmega {
    pub theta: f64,
    pub omega: f64,
}

impl ThetaOmega {
    /// Smallest step size from which the sharper growth bound holds;
    /// infinite when `theta = 0` and `omega > 0`.
    pub fn dt_threshold(&self, l: f64) -> f64 {
        if self.omega == 0.0 {
            return 0.0;
        }
        let denom = l * self.theta * self.theta;
        if denom == 0.0 {
            return f64::INFINITY;
        }
        2.0 * self.omega / denom
    }
}

pub fn compute_theta_omega(t: &ButcherTableau, eps: &[f64], h: &[f64]) -> Result<ThetaOmega> {
    if eps.len() != t.s {
        return Err(Error::Dimension {
            expected: t.s,
            got: eps.len(),
        });
    }
    if eps.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::InvalidArgument("eps must be >= 0".into()));
    }
    let (k, c) = compute_k_c(t, h)?;
    let diag = t.diag();
    let mut theta = 0.0;
    let mut omega = 0.0;
    for i in 0..t.s {
        let w = eps[i] * t.b[i] * diag[i];
        theta += w * k[i];
        omega += w * c[i];
    }
    Ok(ThetaOmega { theta, omega })
}

/// `err_n + dt^2 L Theta + dt sqrt(2 Omega L dt)`, and the sharper
/// `err_n + dt^2 L Theta` when `dt` reaches the threshold.
pub fn growth_bound(err_n: f64, dt: f64, l: f64, to: ThetaOmega) -> (f64, Option<f64>) {
    let base = err_n + dt * dt * l * to.theta;
    let general = base + dt * (2.0 * to.omega * l * dt).sqrt();
    let sharp = (dt >= to.dt_threshold(l)).then_some(base);
    (general, sharp)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundReport {
    pub q: Vec<Vec<f64>>,
    pub k: Vec<f64>,
    pub c: Vec<f64>,
    pub theta: f64,
    pub omega: f64,
    pub dt_threshold: f64,
    pub per_step_bound: f64,
}

impl BoundReport {
    pub fn new(
        t: &ButcherTableau,
        eps: &[f64],
        h: &[f64],
        l: f64,
        dt: f64,
        err_n: f64,
    ) -> Result<Self> {
        let q = compute_q(t)?;
        let (k, c) = compute_k_c(t, h)?;
        let to = compute_theta_omega(t, eps, h)?;
        let (general, sharp) = growth_bound(err_n, dt, l, to);
        Ok(Self {
            q: q.to_rows(),
            k,
            c,
            theta: to.theta,
            omega: to.omega,
            dt_threshold: to.dt_threshold(l),
            per_step_bound: sharp.unwrap_or(general),
        })
    }
}
