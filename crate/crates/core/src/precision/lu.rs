//! Partial-pivoting LU carried out entirely at one precision level.

use super::{chop_matrix, ChopSpec, DWord, PrecisionLevel, Real};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Debug)]
pub struct Lu<T> {
    factors: Matrix<T>,
    perm: Vec<usize>,
}

impl<T: Real> Lu<T> {
    /// Factors `m`, failing when a pivot falls below
    /// `1e3 * u * ||m||_inf` for the level's unit roundoff `u`.
    pub fn factor(m: &Matrix<T>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::Dimension {
                expected: m.rows(),
                got: m.cols(),
            });
        }
        let n = m.rows();
        let threshold = 1e3 * T::LEVEL.unit_roundoff() * m.norm_inf();
        let mut a = m.clone();
        let mut perm: Vec<usize> = (0..n).collect();

        for k in 0..n {
            let mut p = k;
            let mut best = a[(k, k)].abs();
            for i in k + 1..n {
                let v = a[(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            let pivot = best.to_f64();
            if !(pivot > threshold) || !best.is_finite() {
                return Err(Error::Singular {
                    level: T::LEVEL,
                    column: k,
                    pivot,
                });
            }
            if p != k {
                perm.swap(p, k);
                a.swap_rows(p, k);
            }
            let inv = T::one() / a[(k, k)];
            for i in k + 1..n {
                let l = a[(i, k)] * inv;
                a[(i, k)] = l;
                if l.to_f64() == 0.0 {
                    continue;
                }
                let (pivot_row, row) = a.row_pair(k, i);
                axpy_neg(l, &pivot_row[k + 1..], &mut row[k + 1..]);
            }
        }
        Ok(Self { factors: a, perm })
    }

    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let n = self.dim();
        assert_eq!(b.len(), n, "solve dimension");
        let mut x: Vec<T> = self.perm.iter().map(|&p| b[p]).collect();
        self.substitute(&mut x, 0);
        x
    }

    // Forward then backward substitution in place; `first` is the index of
    // the first possibly nonzero entry of the permuted right-hand side.
    fn substitute(&self, x: &mut [T], first: usize) {
        let n = self.dim();
        let a = &self.factors;
        for i in first + 1..n {
            let mut acc = x[i];
            for j in first..i {
                acc -= a[(i, j)] * x[j];
            }
            x[i] = acc;
        }
        for i in (0..n).rev() {
            let mut acc = x[i];
            for j in i + 1..n {
                acc -= a[(i, j)] * x[j];
            }
            x[i] = acc / a[(i, i)];
        }
    }

    /// Solves `A X = B` for all columns of `B` at once, sweeping whole rows.
    pub fn solve_matrix(&self, b: &Matrix<T>) -> Matrix<T> {
        let n = self.dim();
        assert_eq!(b.rows(), n, "solve_matrix dimension");
        let mut x = Matrix::from_fn(n, b.cols(), |i, j| b[(self.perm[i], j)]);
        self.forward_rows(&mut x, false);
        self.backward_rows(&mut x);
        x
    }

    /// `A^-1 = U^-1 L^-1 P`, with `L^-1` formed on its lower triangle only.
    pub fn inverse(&self) -> Matrix<T> {
        let n = self.dim();
        let mut x = Matrix::identity(n);
        self.forward_rows(&mut x, true);
        self.backward_rows(&mut x);
        let mut inv_perm = vec![0; n];
        for (i, &p) in self.perm.iter().enumerate() {
            inv_perm[p] = i;
        }
        Matrix::from_fn(n, n, |r, c| x[(r, inv_perm[c])])
    }

    // Row-wise `X <- L^-1 X`. With `lower`, row `j` of `X` is known to vanish
    // right of column `j`.
    fn forward_rows(&self, x: &mut Matrix<T>, lower: bool) {
        let a = &self.factors;
        for i in 1..self.dim() {
            for j in 0..i {
                let l = a[(i, j)];
                if l.to_f64() != 0.0 {
                    let (src, dst) = x.row_pair(j, i);
                    if lower {
                        axpy_neg(l, &src[..=j], &mut dst[..=j]);
                    } else {
                        axpy_neg(l, src, dst);
                    }
                }
            }
        }
    }

    fn backward_rows(&self, x: &mut Matrix<T>) {
        let a = &self.factors;
        let n = self.dim();
        for i in (0..n).rev() {
            for j in i + 1..n {
                let u = a[(i, j)];
                if u.to_f64() != 0.0 {
                    let (src, dst) = x.row_pair(j, i);
                    axpy_neg(u, src, dst);
                }
            }
            let inv = T::one() / a[(i, i)];
            x.row_mut(i).iter_mut().for_each(|v| *v *= inv);
        }
    }
}

/// `y -= a x`.
#[inline]
fn axpy_neg<T: Real>(a: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi -= a * xi;
    }
}

/// A factorization tagged with its precision level.
#[derive(Clone, Debug)]
pub enum LevelLu {
    Single(Lu<f32>),
    Double(Lu<f64>),
    Extended(Lu<DWord>),
}

impl LevelLu {
    pub fn level(&self) -> PrecisionLevel {
        match self {
            LevelLu::Single(_) => PrecisionLevel::Single,
            LevelLu::Double(_) => PrecisionLevel::Double,
            LevelLu::Extended(_) => PrecisionLevel::Extended,
        }
    }

    /// Rounds `b` to the factorization's level, solves there and returns the
    /// result as doubles.
    pub fn solve_f64(&self, b: &[f64]) -> Vec<f64> {
        match self {
            LevelLu::Single(lu) => solve_as(lu, b),
            LevelLu::Double(lu) => lu.solve(b),
            LevelLu::Extended(lu) => solve_as(lu, b),
        }
    }
}

fn solve_as<T: Real>(lu: &Lu<T>, b: &[f64]) -> Vec<f64> {
    let bt: Vec<T> = b.iter().map(|&x| T::from_f64(x)).collect();
    lu.solve(&bt).iter().map(|x| x.to_f64()).collect()
}

/// Factors a double matrix after rounding it to `level`.
pub fn lu_factor(m: &Matrix<f64>, level: PrecisionLevel) -> Result<LevelLu> {
    Ok(match level {
        PrecisionLevel::Single => LevelLu::Single(Lu::factor(&m.map(|x| x as f32))?),
        PrecisionLevel::Double => LevelLu::Double(Lu::factor(m)?),
        PrecisionLevel::Extended => LevelLu::Extended(Lu::factor(&m.map(DWord::from))?),
    })
}

/// Inverts in double precision, then chops every entry of the inverse.
pub fn invert_then_chop(m: &Matrix<f64>, spec: ChopSpec) -> Result<Matrix<f64>> {
    let inv = Lu::factor(m)?.inverse();
    Ok(chop_matrix(&inv, spec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_well_conditioned(n: usize, seed: u64) -> Matrix<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut m = Matrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        for i in 0..n {
            m[(i, i)] += n as f64;
        }
        m
    }

    #[test]
    fn identity_solve_is_exact() {
        let lu = Lu::factor(&Matrix::<f64>::identity(4)).unwrap();
        let b = vec![1.5, -2.0, 3.25, 0.0];
        assert_eq!(lu.solve(&b), b);
    }

    #[test]
    fn two_by_two_each_level() {
        let m = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 3.0]]);
        for level in [
            PrecisionLevel::Single,
            PrecisionLevel::Double,
            PrecisionLevel::Extended,
        ] {
            let x = lu_factor(&m, level).unwrap().solve_f64(&[3.0, 4.0]);
            let tol = 10.0 * level.unit_roundoff().max(f64::EPSILON);
            assert!(
                (x[0] - 1.0).abs() < tol && (x[1] - 1.0).abs() < tol,
                "{level}: {x:?}"
            );
        }
    }

    #[test]
    fn singular_detected() {
        let m = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        for level in [
            PrecisionLevel::Single,
            PrecisionLevel::Double,
            PrecisionLevel::Extended,
        ] {
            assert!(matches!(lu_factor(&m, level), Err(Error::Singular { .. })));
        }
    }

    #[test]
    fn residual_scales_with_roundoff() {
        let m = random_well_conditioned(12, 3);
        let lu64 = Lu::factor(&m).unwrap();
        let kappa = m.norm_inf() * lu64.inverse().norm_inf();
        let b: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
        let bnorm = crate::linalg::norm_inf(&b);
        for level in [PrecisionLevel::Single, PrecisionLevel::Double] {
            let x = lu_factor(&m, level).unwrap().solve_f64(&b);
            let r = crate::linalg::diff_norm_inf(&m.matvec(&x), &b);
            assert!(
                r / bnorm <= 100.0 * kappa * level.unit_roundoff(),
                "{level}"
            );
        }
    }

    #[test]
    fn extended_refines_double() {
        let m = random_well_conditioned(8, 5);
        let b: Vec<f64> = (0..8).map(|i| 1.0 / (i as f64 + 1.0)).collect();
        let xd = lu_factor(&m, PrecisionLevel::Double).unwrap().solve_f64(&b);
        let md = m.map(DWord::from);
        let bd: Vec<DWord> = b.iter().map(|&x| DWord::from(x)).collect();
        let xe = Lu::factor(&md).unwrap().solve(&bd);
        let xe64: Vec<f64> = xe.iter().map(|x| x.to_f64()).collect();
        assert!(crate::linalg::diff_norm_inf(&xd, &xe64) <= 1e-15);
        // Residual of the extended solution, evaluated in extended arithmetic.
        let r = crate::linalg::diff_norm_inf(&md.matvec(&xe), &bd);
        assert!(r < 1e-28, "{r}");
    }

    #[test]
    fn inverse_round_trip() {
        let m = random_well_conditioned(9, 7);
        let inv = Lu::factor(&m).unwrap().inverse();
        let e = inv.matmul(&m).sub(&Matrix::identity(9)).max_abs();
        assert!(e < 1e-14, "{e}");
    }

    #[test]
    fn invert_then_chop_examples() {
        let spec = ChopSpec::new(4).unwrap();
        let id = Matrix::<f64>::identity(3);
        assert_eq!(invert_then_chop(&id, spec).unwrap(), id);
        let three = Matrix::from_rows(&[vec![3.0]]);
        assert_eq!(invert_then_chop(&three, spec).unwrap()[(0, 0)], 0.3333);
    }

    #[test]
    fn chopped_inverse_error_bound() {
        let n = 8;
        for d in [3u32, 5, 8] {
            let m = random_well_conditioned(n, 17 + d as u64);
            let spec = ChopSpec::new(d).unwrap();
            let p = invert_then_chop(&m, spec).unwrap();
            let inv = Lu::factor(&m).unwrap().inverse();
            let err = p.matmul(&m).sub(&Matrix::identity(n)).norm_inf();
            let bound = n as f64 * 10f64.powi(1 - d as i32) * inv.norm_inf() * m.norm_inf();
            assert!(err <= bound, "d={d}: {err} > {bound}");
        }
    }
}
