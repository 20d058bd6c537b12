//! Fourier differentiation matrices on periodic grids.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct DiffMatrix {
    pub n: usize,
    pub domain: (f64, f64),
    pub order: u8,
    pub entries: Matrix<f64>,
    pub grid: Vec<f64>,
}

impl DiffMatrix {
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.entries.matvec(v)
    }
}

pub fn grid(n: usize, domain: (f64, f64)) -> Vec<f64> {
    let h = (domain.1 - domain.0) / n as f64;
    (0..n).map(|j| domain.0 + j as f64 * h).collect()
}

fn check(n: usize) -> Result<()> {
    if n < 4 {
        return Err(Error::GridTooSmall(n));
    }
    Ok(())
}

fn sign(k: usize) -> f64 {
    if k.is_multiple_of(2) {
        1.0
    } else {
        -1.0
    }
}

/// First-derivative matrix. Entries are the cotangent (even `n`) or
/// cosecant (odd `n`) formulas on `[0, 2pi)`, scaled by `2pi / length`.
pub fn fourier_d1(n: usize, domain: (f64, f64)) -> Result<DiffMatrix> {
    check(n)?;
    let h = 2.0 * PI / n as f64;
    let scale = 2.0 * PI / (domain.1 - domain.0);
    let even = n.is_multiple_of(2);
    let entries = Matrix::from_fn(n, n, |i, j| {
        if i == j {
            return 0.0;
        }
        let k = (i + n - j) % n;
        let x = k as f64 * h / 2.0;
        let v = if even { 1.0 / x.tan() } else { 1.0 / x.sin() };
        0.5 * sign(k) * v * scale
    });
    Ok(DiffMatrix {
        n,
        domain,
        order: 1,
        entries,
        grid: grid(n, domain),
    })
}

/// Second-derivative matrix.
///
/// For even `n` this is the square of [`fourier_d1`], which annihilates the
/// Nyquist mode: the usual even-grid second-derivative entries plus the
/// rank-one term `(n/4)(-1)^(i-j)`.
pub fn fourier_d2(n: usize, domain: (f64, f64)) -> Result<DiffMatrix> {
    check(n)?;
    let h = 2.0 * PI / n as f64;
    let scale = (2.0 * PI / (domain.1 - domain.0)).powi(2);
    let even = n.is_multiple_of(2);
    let entries = Matrix::from_fn(n, n, |i, j| {
        let k = (i + n - j) % n;
        let v = if even {
            let nyquist = n as f64 / 4.0 * sign(k);
            if k == 0 {
                -PI * PI / (3.0 * h * h) - 1.0 / 6.0 + nyquist
            } else {
                let s = (k as f64 * h / 2.0).sin();
                -sign(k) / (2.0 * s * s) + nyquist
            }
        } else if k == 0 {
            -PI * PI / (3.0 * h * h) + 1.0 / 12.0
        } else {
            let x = k as f64 * h / 2.0;
            -0.5 * sign(k) / (x.sin() * x.tan())
        };
        v * scale
    });
    Ok(DiffMatrix {
        n,
        domain,
        order: 2,
        entries,
        grid: grid(n, domain),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{diff_norm_inf, mean, norm_inf};
    use proptest::prelude::*;

    const TWO_PI: (f64, f64) = (0.0, 2.0 * PI);

    fn max_err(a: &[f64], b: &[f64]) -> f64 {
        diff_norm_inf(a, b)
    }

    #[test]
    fn rejects_small_grids() {
        assert_eq!(fourier_d1(3, TWO_PI), Err(Error::GridTooSmall(3)));
        assert!(fourier_d2(2, TWO_PI).is_err());
    }

    #[test]
    fn first_derivative_examples() {
        for n in [50, 51] {
            let d = fourier_d1(n, TWO_PI).unwrap();
            let x = &d.grid;
            let sin: Vec<f64> = x.iter().map(|v| v.sin()).collect();
            let cos: Vec<f64> = x.iter().map(|v| v.cos()).collect();
            assert!(max_err(&d.apply(&sin), &cos) <= 1e-11);
            assert!(norm_inf(&d.apply(&vec![2.5; n])) <= 1e-11);
            let s3: Vec<f64> = x.iter().map(|v| (3.0 * v).sin()).collect();
            let c3: Vec<f64> = x.iter().map(|v| 3.0 * (3.0 * v).cos()).collect();
            assert!(max_err(&d.apply(&s3), &c3) <= 1e-10);
        }
    }

    #[test]
    fn second_derivative_examples() {
        for n in [50, 51] {
            let d = fourier_d2(n, TWO_PI).unwrap();
            let x = &d.grid;
            let sin: Vec<f64> = x.iter().map(|v| v.sin()).collect();
            let msin: Vec<f64> = sin.iter().map(|v| -v).collect();
            assert!(max_err(&d.apply(&sin), &msin) <= 1e-10);
            assert!(norm_inf(&d.apply(&vec![1.0; n])) <= 1e-10);
            let c2: Vec<f64> = x.iter().map(|v| (2.0 * v).cos()).collect();
            let m4: Vec<f64> = x.iter().map(|v| -4.0 * (2.0 * v).cos()).collect();
            assert!(max_err(&d.apply(&c2), &m4) <= 1e-9);
        }
    }

    #[test]
    fn remapped_domain() {
        let dom = (-PI, PI);
        let d1 = fourier_d1(32, dom).unwrap();
        let x = &d1.grid;
        assert_eq!(x[0], -PI);
        let u: Vec<f64> = x.iter().map(|v| v.cos()).collect();
        let du: Vec<f64> = x.iter().map(|v| -v.sin()).collect();
        assert!(max_err(&d1.apply(&u), &du) <= 1e-12);
        // Length 1 domain: d/dx sin(2 pi x) = 2 pi cos(2 pi x).
        let d = fourier_d1(16, (0.0, 1.0)).unwrap();
        let u: Vec<f64> = d.grid.iter().map(|v| (2.0 * PI * v).sin()).collect();
        let du: Vec<f64> = d
            .grid
            .iter()
            .map(|v| 2.0 * PI * (2.0 * PI * v).cos())
            .collect();
        assert!(max_err(&d.apply(&u), &du) <= 1e-11);
    }

    #[test]
    fn symmetry_and_row_sums() {
        for n in [16, 17, 50] {
            let d1 = fourier_d1(n, TWO_PI).unwrap().entries;
            let d2 = fourier_d2(n, TWO_PI).unwrap().entries;
            for i in 0..n {
                assert!(d1.row(i).iter().sum::<f64>().abs() <= 1e-11 * n as f64);
                assert!(d2.row(i).iter().sum::<f64>().abs() <= 1e-11 * n as f64);
                let col: f64 = (0..n).map(|r| d1[(r, i)]).sum();
                assert!(col.abs() <= 1e-11 * n as f64);
                for j in 0..n {
                    assert!((d1[(i, j)] + d1[(j, i)]).abs() <= 1e-11);
                    assert!((d2[(i, j)] - d2[(j, i)]).abs() <= 1e-11);
                }
            }
        }
    }

    #[test]
    fn d2_is_d1_squared() {
        for n in [16, 50, 17, 51] {
            let d1 = fourier_d1(n, TWO_PI).unwrap().entries;
            let d2 = fourier_d2(n, TWO_PI).unwrap().entries;
            let sq = d1.matmul(&d1);
            assert!(sq.sub(&d2).max_abs() <= 5e-9, "n={n}");
        }
    }

    proptest! {
        #[test]
        fn mean_annihilation(v in prop::collection::vec(-10.0f64..10.0, 24)) {
            let d1 = fourier_d1(24, TWO_PI).unwrap();
            let d2 = fourier_d2(24, TWO_PI).unwrap();
            let scale = norm_inf(&v).max(1e-300);
            prop_assert!(mean(&d1.apply(&v)).abs() <= 1e-12 * scale);
            // d2 entries are O(n^2); allow for that growth.
            prop_assert!(mean(&d2.apply(&v)).abs() <= 1e-12 * 24.0 * scale);
        }
    }
}
