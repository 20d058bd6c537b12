//! Semi-discrete test problems on periodic grids.

use std::f64::consts::PI;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::precision::Real;
use crate::spectral::{fourier_d1, fourier_d2, grid};

/// Smallest water depth accepted by the shallow-water right-hand side.
pub const DEPTH_GUARD: f64 = 1e-8;

pub const PROBLEM_NAMES: [&str; 5] = ["burgers-a", "burgers-b", "shallow-water", "pm-a", "pm-b"];

#[derive(Clone, Debug)]
pub enum ProblemKind {
    /// `f(y) = -1/2 D (y∘y)`.
    Burgers { d1: Matrix<f64> },
    /// State `(eta; mu)`, `f = -(D mu; D(mu²/eta + eta²/2))`.
    ShallowWater { d1: Matrix<f64>, n: usize },
    /// `f(u) = D2 (u∘u∘u)`.
    PorousMedium { d2: Matrix<f64> },
    /// `f(y) = L y`.
    Linear { op: Matrix<f64> },
}

#[derive(Clone, Debug)]
pub struct Problem {
    pub name: String,
    pub kind: ProblemKind,
    pub n: usize,
    pub domain: (f64, f64),
    pub grid: Vec<f64>,
    pub initial: Vec<f64>,
    pub final_time: f64,
    dominant: Matrix<f64>,
    conserved: Vec<Range<usize>>,
}

impl Problem {
    pub fn by_name(name: &str, n: usize) -> Result<Self> {
        match name {
            "burgers-a" => burgers(n, BurgersInit::A),
            "burgers-b" => burgers(n, BurgersInit::B),
            "shallow-water" => shallow_water(n),
            "pm-a" => porous_medium(n, PorousVariant::A),
            "pm-b" => porous_medium(n, PorousVariant::B),
            _ => Err(Error::UnknownName {
                kind: "problem",
                name: name.to_string(),
            }),
        }
    }

    pub fn dim(&self) -> usize {
        self.initial.len()
    }

    /// The operator `L` used by the EIN stabilization.
    pub fn dominant_operator(&self) -> &Matrix<f64> {
        &self.dominant
    }

    /// Index ranges whose mean is invariant under the flow.
    pub fn conserved_blocks(&self) -> &[Range<usize>] {
        &self.conserved
    }

    pub fn with_final_time(mut self, t: f64) -> Self {
        self.final_time = t;
        self
    }

    pub fn rhs<T: Real>(&self, y: &[T]) -> Result<Vec<T>> {
        if y.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: y.len(),
            });
        }
        Ok(match &self.kind {
            ProblemKind::Burgers { d1 } => {
                let sq: Vec<T> = y.iter().map(|&v| v * v).collect();
                d1.apply(&sq).into_iter().map(|v| v.mul_f64(-0.5)).collect()
            }
            ProblemKind::PorousMedium { d2 } => {
                let cube: Vec<T> = y.iter().map(|&v| v * v * v).collect();
                d2.apply(&cube)
            }
            ProblemKind::ShallowWater { d1, n } => {
                let (eta, mu) = y.split_at(*n);
                check_depth(eta)?;
                let flux: Vec<T> = eta
                    .iter()
                    .zip(mu)
                    .map(|(&e, &m)| m * m / e + (e * e).mul_f64(0.5))
                    .collect();
                let mut out: Vec<T> = d1.apply(mu).into_iter().map(|v| -v).collect();
                out.extend(d1.apply(&flux).into_iter().map(|v| -v));
                out
            }
            ProblemKind::Linear { op } => op.apply(y),
        })
    }

    pub fn jacobian(&self, y: &[f64]) -> Result<Matrix<f64>> {
        if y.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: y.len(),
            });
        }
        Ok(match &self.kind {
            ProblemKind::Burgers { d1 } => d1.scale_cols(y).scale(-1.0),
            ProblemKind::PorousMedium { d2 } => {
                let w: Vec<f64> = y.iter().map(|v| 3.0 * v * v).collect();
                d2.scale_cols(&w)
            }
            ProblemKind::ShallowWater { d1, n } => {
                let n = *n;
                let (eta, mu) = y.split_at(n);
                check_depth(eta)?;
                let u: Vec<f64> = eta.iter().zip(mu).map(|(e, m)| m / e).collect();
                let lower_left: Vec<f64> = u.iter().zip(eta).map(|(u, e)| u * u - e).collect();
                let lower_right: Vec<f64> = u.iter().map(|u| -2.0 * u).collect();
                let ll = d1.scale_cols(&lower_left);
                let lr = d1.scale_cols(&lower_right);
                Matrix::from_fn(2 * n, 2 * n, |i, j| match (i < n, j < n) {
                    (true, true) => 0.0,
                    (true, false) => -d1[(i, j - n)],
                    (false, true) => ll[(i - n, j)],
                    (false, false) => lr[(i - n, j - n)],
                })
            }
            ProblemKind::Linear { op } => op.clone(),
        })
    }

    /// Largest drift of any conserved block mean between two states.
    pub fn conservation_drift(&self, y0: &[f64], y1: &[f64]) -> f64 {
        self.conserved
            .iter()
            .map(|r| (linalg::mean(&y1[r.clone()]) - linalg::mean(&y0[r.clone()])).abs())
            .fold(0.0, f64::max)
    }
}

fn check_depth<T: Real>(eta: &[T]) -> Result<()> {
    for (index, e) in eta.iter().enumerate() {
        let value = e.to_f64();
        if !(value > DEPTH_GUARD) {
            return Err(Error::DepthGuard { index, value });
        }
    }
    Ok(())
}

fn check_grid(n: usize) -> Result<()> {
    if n < 4 {
        return Err(Error::GridTooSmall(n));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BurgersInit {
    /// `1/2 + sin(x)/4`, integrated to `t = 3.5`.
    A,
    /// `sin(x)`, integrated to `t = 0.7`.
    B,
}

pub fn burgers(n: usize, init: BurgersInit) -> Result<Problem> {
    check_grid(n)?;
    let domain = (0.0, 2.0 * PI);
    let d1 = fourier_d1(n, domain)?.entries;
    let x = grid(n, domain);
    let (name, initial, final_time) = match init {
        BurgersInit::A => (
            "burgers-a",
            x.iter().map(|v| 0.5 + v.sin() / 4.0).collect(),
            3.5,
        ),
        BurgersInit::B => ("burgers-b", x.iter().map(|v| v.sin()).collect(), 0.7),
    };
    Ok(Problem {
        name: name.to_string(),
        dominant: d1.scale(-1.0),
        kind: ProblemKind::Burgers { d1 },
        n,
        domain,
        grid: x,
        initial,
        final_time,
        conserved: vec![0..n],
    })
}

pub fn shallow_water(n: usize) -> Result<Problem> {
    check_grid(n)?;
    let domain = (0.0, 2.0 * PI);
    let d1 = fourier_d1(n, domain)?.entries;
    let x = grid(n, domain);
    let mut initial: Vec<f64> = x.iter().map(|v| 1.0 + 0.1 * v.sin()).collect();
    initial.extend(std::iter::repeat_n(0.0, n));
    let dominant = Matrix::from_fn(2 * n, 2 * n, |i, j| match (i < n, j < n) {
        (true, true) => -d1[(i, j)],
        (false, false) => -d1[(i - n, j - n)],
        _ => 0.0,
    });
    Ok(Problem {
        name: "shallow-water".into(),
        kind: ProblemKind::ShallowWater { d1, n },
        n,
        domain,
        grid: x,
        initial,
        final_time: 0.5,
        dominant,
        conserved: vec![0..n, n..2 * n],
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PorousVariant {
    /// Domain `(-pi, pi)`, `u0 = cos(x)/2 + 1/2`.
    A,
    /// Domain `(0, 2pi)`, `u0 = sin(x)/2`.
    B,
}

pub fn porous_medium(n: usize, variant: PorousVariant) -> Result<Problem> {
    check_grid(n)?;
    let (name, domain) = match variant {
        PorousVariant::A => ("pm-a", (-PI, PI)),
        PorousVariant::B => ("pm-b", (0.0, 2.0 * PI)),
    };
    let d2 = fourier_d2(n, domain)?.entries;
    let x = grid(n, domain);
    let initial = match variant {
        PorousVariant::A => x.iter().map(|v| 0.5 * v.cos() + 0.5).collect(),
        PorousVariant::B => x.iter().map(|v| 0.5 * v.sin()).collect(),
    };
    Ok(Problem {
        name: name.into(),
        dominant: d2.clone(),
        kind: ProblemKind::PorousMedium { d2 },
        n,
        domain,
        grid: x,
        initial,
        final_time: 0.5,
        conserved: vec![0..n],
    })
}

/// `y' = L y`. No block is declared conserved.
pub fn linear(op: Matrix<f64>, initial: Vec<f64>, final_time: f64) -> Result<Problem> {
    if !op.is_square() || op.rows() != initial.len() {
        return Err(Error::Dimension {
            expected: initial.len(),
            got: op.rows(),
        });
    }
    let n = initial.len();
    Ok(Problem {
        name: "linear".into(),
        dominant: op.clone(),
        kind: ProblemKind::Linear { op },
        n,
        domain: (0.0, 1.0),
        grid: (0..n).map(|i| i as f64).collect(),
        initial,
        final_time,
        conserved: vec![],
    })
}

/// Scalar Dahlquist problem `y' = lambda y`.
pub fn scalar(lambda: f64, y0: f64, final_time: f64) -> Problem {
    linear(Matrix::from_rows(&[vec![lambda]]), vec![y0], final_time).expect("1x1")
}

/// The expansion point of a Taylor linearization.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearizationPoint {
    pub ybar: Vec<f64>,
}

impl LinearizationPoint {
    pub fn new(ybar: Vec<f64>) -> Self {
        Self { ybar }
    }
}

/// `y -> f_bar + J (y - ybar)`.
#[derive(Clone, Debug)]
pub struct AffineMap {
    pub ybar: Vec<f64>,
    pub f_bar: Vec<f64>,
    pub jac: Matrix<f64>,
}

impl AffineMap {
    pub fn eval(&self, y: &[f64]) -> Vec<f64> {
        let d = linalg::sub(y, &self.ybar);
        linalg::add(&self.f_bar, &self.jac.matvec(&d))
    }
}

fn check_point(p: &Problem, lp: &LinearizationPoint) -> Result<()> {
    if lp.ybar.len() != p.dim() {
        return Err(Error::Dimension {
            expected: p.dim(),
            got: lp.ybar.len(),
        });
    }
    Ok(())
}

/// `f(ybar) + f'(ybar)(y - ybar)` from the problem's own Jacobian.
pub fn taylor_linearize(p: &Problem, lp: &LinearizationPoint) -> Result<AffineMap> {
    check_point(p, lp)?;
    Ok(AffineMap {
        f_bar: p.rhs(&lp.ybar)?,
        jac: p.jacobian(&lp.ybar)?,
        ybar: lp.ybar.clone(),
    })
}

/// Burgers linearization from its closed form,
/// `-1/2 D ybar² - D diag(ybar)(y - ybar)`.
pub fn burgers_linearized(p: &Problem, lp: &LinearizationPoint) -> Result<AffineMap> {
    check_point(p, lp)?;
    let ProblemKind::Burgers { d1 } = &p.kind else {
        return Err(Error::InvalidArgument(format!(
            "{} is not a Burgers problem",
            p.name
        )));
    };
    let sq: Vec<f64> = lp.ybar.iter().map(|v| v * v).collect();
    let f_bar = d1.matvec(&sq).into_iter().map(|v| -0.5 * v).collect();
    let jac = d1.scale_cols(&lp.ybar).scale(-1.0);
    Ok(AffineMap {
        ybar: lp.ybar.clone(),
        f_bar,
        jac,
    })
}

/// `f(y) - f_lin(y) = -1/2 D (ybar - y)²` for Burgers.
pub fn burgers_linearization_residual(p: &Problem, ybar: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    let ProblemKind::Burgers { d1 } = &p.kind else {
        return Err(Error::InvalidArgument(format!(
            "{} is not a Burgers problem",
            p.name
        )));
    };
    let sq: Vec<f64> = ybar.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).collect();
    Ok(d1.matvec(&sq).into_iter().map(|v| -0.5 * v).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{diff_norm_inf, mean, norm_inf};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    /// Central-difference Jacobian, the oracle for `jacobian`.
    pub(crate) fn fd_jacobian(p: &Problem, y: &[f64]) -> Matrix<f64> {
        let n = y.len();
        let h = 1e-6 * (1.0 + norm_inf(y));
        let mut m = Matrix::zeros(n, n);
        let mut yp = y.to_vec();
        for j in 0..n {
            yp[j] = y[j] + h;
            let fp = p.rhs(&yp).unwrap();
            yp[j] = y[j] - h;
            let fm = p.rhs(&yp).unwrap();
            yp[j] = y[j];
            for i in 0..n {
                m[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        m
    }

    fn frob(m: &Matrix<f64>) -> f64 {
        m.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn fd_rel_error(p: &Problem, y: &[f64]) -> f64 {
        let j = p.jacobian(y).unwrap();
        frob(&j.sub(&fd_jacobian(p, y))) / frob(&j)
    }

    #[test]
    fn names_resolve() {
        for name in PROBLEM_NAMES {
            let p = Problem::by_name(name, 16).unwrap();
            assert_eq!(p.name, name);
        }
        assert!(Problem::by_name("heat", 16).is_err());
        assert!(Problem::by_name("pm-a", 3).is_err());
    }

    #[test]
    fn burgers_examples() {
        let p = burgers(16, BurgersInit::A).unwrap();
        assert!(norm_inf(&p.rhs(&[0.7; 16]).unwrap()) <= 1e-13);
        assert!(fd_rel_error(&p, &p.initial) <= 1e-5);
        assert_eq!(p.final_time, 3.5);
        let b = burgers(16, BurgersInit::B).unwrap();
        assert_eq!(b.final_time, 0.7);
        assert!((b.initial[4] - (PI / 2.0).sin()).abs() < 1e-15);
    }

    #[test]
    fn shallow_water_examples() {
        let p = shallow_water(16).unwrap();
        assert_eq!(p.dim(), 32);
        let f = p.rhs(&p.initial).unwrap();
        assert!(norm_inf(&f[..16]) <= 1e-14);
        let d1 = fourier_d1(16, (0.0, 2.0 * PI)).unwrap();
        let half_sq: Vec<f64> = p.initial[..16].iter().map(|e| 0.5 * e * e).collect();
        let expect: Vec<f64> = d1.apply(&half_sq).iter().map(|v| -v).collect();
        assert!(diff_norm_inf(&f[16..], &expect) <= 1e-14);
        assert!(fd_rel_error(&p, &p.initial) <= 1e-5);
        assert!(mean(&f[..16]).abs() <= 1e-12);
    }

    #[test]
    fn shallow_water_depth_guard() {
        let p = shallow_water(8).unwrap();
        let mut y = p.initial.clone();
        y[3] = 0.0;
        assert!(matches!(p.rhs(&y), Err(Error::DepthGuard { index: 3, .. })));
        assert!(p.jacobian(&y).is_err());
        let lp = LinearizationPoint::new(y);
        assert!(taylor_linearize(&p, &lp).is_err());
    }

    #[test]
    fn porous_medium_examples() {
        for variant in [PorousVariant::A, PorousVariant::B] {
            let p = porous_medium(16, variant).unwrap();
            assert!(norm_inf(&p.rhs(&[0.3; 16]).unwrap()) <= 1e-12);
            assert!(fd_rel_error(&p, &p.initial) <= 1e-5);
        }
        let a = porous_medium(16, PorousVariant::A).unwrap();
        assert_eq!(a.domain, (-PI, PI));
        assert_eq!(a.initial[0], 0.0);
    }

    #[test]
    fn jacobians_at_random_states() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
        for name in PROBLEM_NAMES {
            let p = Problem::by_name(name, 16).unwrap();
            for _ in 0..5 {
                let y: Vec<f64> = p
                    .initial
                    .iter()
                    .map(|v| v + 0.1 * rng.gen_range(-1.0..1.0))
                    .collect();
                let e = fd_rel_error(&p, &y);
                assert!(e <= 1e-5, "{name}: {e}");
            }
        }
    }

    #[test]
    fn burgers_linearization_paths() {
        let p = burgers(16, BurgersInit::A).unwrap();
        let ybar = p.initial.clone();
        let lp = LinearizationPoint::new(ybar.clone());
        let closed = burgers_linearized(&p, &lp).unwrap();
        let generic = taylor_linearize(&p, &lp).unwrap();
        assert!(diff_norm_inf(&closed.eval(&ybar), &p.rhs(&ybar).unwrap()) <= 1e-15);

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let y: Vec<f64> = ybar.iter().map(|v| v + rng.gen_range(-0.2..0.2)).collect();
            assert!(diff_norm_inf(&closed.eval(&y), &generic.eval(&y)) <= 1e-13);
            let h = linalg::sub(&p.rhs(&y).unwrap(), &closed.eval(&y));
            let identity = burgers_linearization_residual(&p, &ybar, &y).unwrap();
            assert!(diff_norm_inf(&h, &identity) <= 1e-13);
        }
    }

    #[test]
    fn linearization_residual_is_quadratic() {
        for name in PROBLEM_NAMES {
            let p = Problem::by_name(name, 16).unwrap();
            let lp = LinearizationPoint::new(p.initial.clone());
            let map = taylor_linearize(&p, &lp).unwrap();
            let dir: Vec<f64> = (0..p.dim())
                .map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.05)
                .collect();
            let h_at = |c: f64| {
                let y: Vec<f64> = p.initial.iter().zip(&dir).map(|(a, d)| a + c * d).collect();
                diff_norm_inf(&p.rhs(&y).unwrap(), &map.eval(&y))
            };
            assert!(h_at(0.0) <= 1e-14);
            let ratio = h_at(1.0) / h_at(0.5);
            assert!((ratio / 4.0 - 1.0).abs() <= 0.2, "{name}: {ratio}");
        }
    }

    #[test]
    fn generic_rhs_matches_double() {
        use crate::precision::DWord;
        let p = porous_medium(16, PorousVariant::B).unwrap();
        let y: Vec<DWord> = p.initial.iter().map(|&v| DWord::from(v)).collect();
        let fe = p.rhs(&y).unwrap();
        let fd = p.rhs(&p.initial).unwrap();
        let fe64: Vec<f64> = fe.iter().map(|v| v.to_f64()).collect();
        assert!(diff_norm_inf(&fe64, &fd) <= 1e-13);
    }

    proptest! {
        #[test]
        fn rhs_has_zero_mean(seed in 0u64..1000) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            for name in PROBLEM_NAMES {
                let p = Problem::by_name(name, 16).unwrap();
                let y: Vec<f64> = p.initial.iter().map(|v| v + 0.2 * rng.gen_range(-1.0..1.0)).collect();
                let f = p.rhs(&y).unwrap();
                let scale = norm_inf(&y).powi(3).max(1.0);
                for block in p.conserved_blocks() {
                    prop_assert!(mean(&f[block.clone()]).abs() <= 1e-12 * scale * 16.0);
                }
            }
        }

        #[test]
        fn jacobian_matches_differences(seed in 0u64..1000) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let name = PROBLEM_NAMES[(seed % 5) as usize];
            let p = Problem::by_name(name, 12).unwrap();
            let y: Vec<f64> = p.initial.iter().map(|v| v + 0.1 * rng.gen_range(-1.0..1.0)).collect();
            prop_assert!(fd_rel_error(&p, &y) <= 1e-5);
        }
    }
}
