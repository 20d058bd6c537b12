//! Solvers for the implicit stage equation `y = y_exp + alpha dt f(y)`.
//!
//! Every strategy returns the stage value together with the size of the
//! perturbation it introduced, `h = f(y) - f_eps(y)`. For the strategies
//! without an explicit surrogate `f_eps` (chopped inverse, low-precision
//! solves, corrected stages) `h` is the residual form
//! `(y_exp + alpha dt f(y) - y) / (alpha dt)`, which is the same quantity:
//! the computed `y` satisfies the stage equation exactly with `f - h`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::precision::{
    cast_down, cast_up, convert, ChopSpec, DWord, Lu, PrecisionLevel, PrecisionPair, Real,
};
use crate::problems::{taylor_linearize, AffineMap, LinearizationPoint, Problem};

#[derive(Clone, Debug)]
pub struct StageEquation<'p, T> {
    pub problem: &'p Problem,
    pub y_exp: Vec<T>,
    pub alpha: f64,
    pub dt: f64,
}

impl<'p, T: Real> StageEquation<'p, T> {
    pub fn new(problem: &'p Problem, y_exp: Vec<T>, alpha: f64, dt: f64) -> Result<Self> {
        if !(alpha >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "stage coefficient {alpha} < 0"
            )));
        }
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!("step size {dt} <= 0")));
        }
        if y_exp.len() != problem.dim() {
            return Err(Error::Dimension {
                expected: problem.dim(),
                got: y_exp.len(),
            });
        }
        Ok(Self {
            problem,
            y_exp,
            alpha,
            dt,
        })
    }

    /// `alpha * dt`.
    pub fn coef(&self) -> f64 {
        self.alpha * self.dt
    }

    /// `y_exp + alpha dt f(y) - y`.
    pub fn residual(&self, y: &[T]) -> Result<Vec<T>> {
        let f = self.problem.rhs(y)?;
        Ok(self.residual_with(y, &f))
    }

    pub fn residual_with(&self, y: &[T], fy: &[T]) -> Vec<T> {
        let c = self.coef();
        self.y_exp
            .iter()
            .zip(fy)
            .zip(y)
            .map(|((&e, &f), &v)| e + f.mul_f64(c) - v)
            .collect()
    }

    /// Residual-form perturbation `||r(y)|| / (alpha dt)`; zero for an
    /// explicit stage.
    pub fn perturbation(&self, y: &[T]) -> Result<f64> {
        if self.alpha == 0.0 {
            return Ok(0.0);
        }
        Ok(linalg::norm_inf(&self.residual(y)?) / self.coef())
    }
}

#[derive(Clone, Debug)]
pub struct StageSolution<T> {
    pub y: Vec<T>,
    pub h_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Where the Taylor expansion point of the linearized strategies sits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Expansion {
    /// The step start `y_n`, shared by all stages of the step.
    #[default]
    StepStart,
    /// The explicit part `y_exp` of each stage.
    Predictor,
}

/// How the chopped inverse enters the linearized stage solve.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChopForm {
    /// `y = ybar + P (y_exp + alpha dt f(ybar) - ybar)`: the chopped inverse
    /// acts on the stage residual at the expansion point, so the error it
    /// introduces scales with that residual.
    #[default]
    Increment,
    /// `y = P (y_exp + alpha dt (f(ybar) - J ybar))`.
    Direct,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StageStrategy {
    ExactNewton,
    Linearized {
        #[serde(default)]
        expansion: Expansion,
    },
    Chopped {
        digits: u32,
        #[serde(default)]
        expansion: Expansion,
        #[serde(default)]
        form: ChopForm,
    },
    MixedPrecision {
        high: PrecisionLevel,
        low: PrecisionLevel,
        #[serde(default = "default_mp_iters")]
        iters: usize,
        #[serde(default)]
        tol: f64,
    },
}

fn default_mp_iters() -> usize {
    1
}

impl StageStrategy {
    pub fn chopped(digits: u32) -> Self {
        StageStrategy::Chopped {
            digits,
            expansion: Expansion::StepStart,
            form: ChopForm::Increment,
        }
    }

    pub fn linearized() -> Self {
        StageStrategy::Linearized {
            expansion: Expansion::StepStart,
        }
    }

    pub fn mixed(pair: PrecisionPair, iters: usize) -> Self {
        StageStrategy::MixedPrecision {
            high: pair.high,
            low: pair.low,
            iters,
            tol: 0.0,
        }
    }

    pub fn is_exact(&self) -> bool {
        matches!(self, StageStrategy::ExactNewton)
    }

    /// The level the integrator state must be held at, if the strategy fixes it.
    pub fn required_level(&self) -> Option<PrecisionLevel> {
        match self {
            StageStrategy::MixedPrecision { high, .. } => Some(*high),
            StageStrategy::ExactNewton => None,
            _ => Some(PrecisionLevel::Double),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            StageStrategy::Chopped { digits, .. } => ChopSpec::new(digits).map(|_| ()),
            StageStrategy::MixedPrecision {
                high, low, iters, ..
            } => {
                PrecisionPair::new(high, low)?;
                if iters == 0 {
                    return Err(Error::InvalidArgument(
                        "mixed precision needs at least one iterate".into(),
                    ));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for StageStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let exp = |e: &Expansion| match e {
            Expansion::StepStart => "",
            Expansion::Predictor => "@predictor",
        };
        match self {
            StageStrategy::ExactNewton => write!(f, "exact"),
            StageStrategy::Linearized { expansion } => write!(f, "linearized{}", exp(expansion)),
            StageStrategy::Chopped {
                digits,
                expansion,
                form,
            } => {
                let form = match form {
                    ChopForm::Increment => "",
                    ChopForm::Direct => "-direct",
                };
                write!(f, "chop{digits}{form}{}", exp(expansion))
            }
            StageStrategy::MixedPrecision {
                high, low, iters, ..
            } => write!(f, "mixed:{high}/{low} x{iters}"),
        }
    }
}

/// Parses the short names used on the command line: `exact`, `linearized`,
/// `chop4`, `chop4-direct`, `mixed:double/single`, `mixed:double/single x3`,
/// optionally suffixed with `@predictor` for the linearized kinds.
impl FromStr for StageStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::UnknownName {
            kind: "stage strategy",
            name: s.to_string(),
        };
        let (body, expansion) = match s.strip_suffix("@predictor") {
            Some(b) => (b, Expansion::Predictor),
            None => (s, Expansion::StepStart),
        };
        if body == "exact" && expansion == Expansion::StepStart {
            return Ok(StageStrategy::ExactNewton);
        }
        if body == "linearized" {
            return Ok(StageStrategy::Linearized { expansion });
        }
        if let Some(rest) = body.strip_prefix("chop") {
            let (digits, form) = match rest.strip_suffix("-direct") {
                Some(d) => (d, ChopForm::Direct),
                None => (rest, ChopForm::Increment),
            };
            let digits: u32 = digits.parse().map_err(|_| unknown())?;
            let st = StageStrategy::Chopped {
                digits,
                expansion,
                form,
            };
            st.validate()?;
            return Ok(st);
        }
        if let Some(rest) = body.strip_prefix("mixed:") {
            if expansion != Expansion::StepStart {
                return Err(unknown());
            }
            let (pair, iters) = match rest.rsplit_once('x') {
                Some((p, n)) if n.trim().parse::<usize>().is_ok() => {
                    (p.trim(), n.trim().parse().map_err(|_| unknown())?)
                }
                _ => (rest.trim(), 1),
            };
            let pair: PrecisionPair = pair.parse()?;
            let st = StageStrategy::mixed(pair, iters);
            st.validate()?;
            return Ok(st);
        }
        Err(unknown())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NewtonJacobian {
    /// Full Newton: the Jacobian is refreshed at every iterate.
    PerIteration,
    /// Chord iteration with `I - alpha dt f'(y_n)` factored once per step.
    FrozenPerStep,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NewtonOptions {
    /// Absolute residual tolerance; `None` picks the level default.
    pub tol: Option<f64>,
    pub max_iter: usize,
    pub jacobian: NewtonJacobian,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: None,
            max_iter: 50,
            jacobian: NewtonJacobian::PerIteration,
        }
    }
}

impl NewtonOptions {
    pub fn tol_for(&self, level: PrecisionLevel) -> f64 {
        self.tol.unwrap_or(match level {
            PrecisionLevel::Single => 1e-5,
            PrecisionLevel::Double => 1e-12,
            PrecisionLevel::Extended => 1e-28,
        })
    }
}

/// Newton iteration on the stage residual. Residuals are evaluated at the
/// level of `T`; the correction is solved in double precision, which is all
/// a Newton step needs. `frozen` supplies a chord matrix factorization.
pub fn solve_newton_with<T: Real>(
    eq: &StageEquation<'_, T>,
    opts: &NewtonOptions,
    frozen: Option<&Lu<f64>>,
) -> Result<StageSolution<T>> {
    let mut y = eq.y_exp.clone();
    if eq.alpha == 0.0 {
        return Ok(StageSolution {
            y,
            h_norm: 0.0,
            iterations: 0,
            converged: true,
        });
    }
    let tol = opts.tol_for(T::LEVEL);
    let c = eq.coef();
    for it in 0..=opts.max_iter {
        let r = eq.residual(&y)?;
        let rn = linalg::norm_inf(&r);
        if !rn.is_finite() {
            break;
        }
        if rn <= tol {
            return Ok(StageSolution {
                y,
                h_norm: 0.0,
                iterations: it,
                converged: true,
            });
        }
        if it == opts.max_iter {
            break;
        }
        let r64 = linalg::to_f64(&r);
        let delta = match frozen {
            Some(lu) => lu.solve(&r64),
            None => {
                let j = eq.problem.jacobian(&linalg::to_f64(&y))?;
                Lu::factor(&j.shifted_identity(c))?.solve(&r64)
            }
        };
        for (v, d) in y.iter_mut().zip(&delta) {
            *v += T::from_f64(*d);
        }
    }
    Ok(StageSolution {
        y,
        h_norm: 0.0,
        iterations: opts.max_iter,
        converged: false,
    })
}

/// Reference Newton solve with per-iterate Jacobians.
pub fn solve_newton<T: Real>(
    eq: &StageEquation<'_, T>,
    tol: f64,
    max_iter: usize,
) -> Result<StageSolution<T>> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "Newton tolerance {tol} <= 0"
        )));
    }
    let opts = NewtonOptions {
        tol: Some(tol),
        max_iter,
        jacobian: NewtonJacobian::PerIteration,
    };
    solve_newton_with(eq, &opts, None)
}

/// A linearization together with its factored stage matrix, reusable by all
/// stages that share the expansion point and diagonal coefficient.
#[derive(Clone, Debug)]
pub struct LinearizedSystem {
    pub map: AffineMap,
    pub coef: f64,
    pub lu: Lu<f64>,
}

impl LinearizedSystem {
    pub fn new(map: AffineMap, coef: f64) -> Result<Self> {
        let lu = Lu::factor(&map.jac.shifted_identity(coef))?;
        Ok(Self { map, coef, lu })
    }

    /// Right-hand side `y_exp + c (f(ybar) - J ybar)` of the affine stage
    /// equation `(I - c J) y = ...`.
    fn rhs(&self, y_exp: &[f64]) -> Vec<f64> {
        let jy = self.map.jac.matvec(&self.map.ybar);
        y_exp
            .iter()
            .zip(&self.map.f_bar)
            .zip(&jy)
            .map(|((e, f), j)| e + self.coef * (f - j))
            .collect()
    }
}

fn check_coef(sys: &LinearizedSystem, eq: &StageEquation<'_, f64>) -> Result<()> {
    if sys.coef != eq.coef() {
        return Err(Error::InvalidArgument(
            "linearized system built for a different alpha dt".into(),
        ));
    }
    Ok(())
}

pub fn solve_linearized_with(
    eq: &StageEquation<'_, f64>,
    sys: &LinearizedSystem,
) -> Result<StageSolution<f64>> {
    check_coef(sys, eq)?;
    if eq.alpha == 0.0 {
        return solve_newton_with(eq, &NewtonOptions::default(), None);
    }
    let y = sys.lu.solve(&sys.rhs(&eq.y_exp));
    let h_norm = linalg::diff_norm_inf(&eq.problem.rhs(&y)?, &sys.map.eval(&y));
    Ok(StageSolution {
        y,
        h_norm,
        iterations: 1,
        converged: true,
    })
}

/// One solve of the stage equation with `f` replaced by its Taylor
/// expansion about `lp`.
pub fn solve_linearized(
    eq: &StageEquation<'_, f64>,
    lp: &LinearizationPoint,
) -> Result<StageSolution<f64>> {
    let sys = LinearizedSystem::new(taylor_linearize(eq.problem, lp)?, eq.coef())?;
    solve_linearized_with(eq, &sys)
}

/// The chopped inverse of a linearized system's stage matrix.
#[derive(Clone, Debug)]
pub struct ChoppedSystem {
    pub sys: LinearizedSystem,
    pub inverse: Matrix<f64>,
    pub spec: ChopSpec,
}

impl ChoppedSystem {
    pub fn new(sys: LinearizedSystem, spec: ChopSpec) -> Self {
        let inverse = crate::precision::chop_matrix(&sys.lu.inverse(), spec);
        Self { sys, inverse, spec }
    }
}

pub fn solve_chopped_with(
    eq: &StageEquation<'_, f64>,
    cs: &ChoppedSystem,
    form: ChopForm,
) -> Result<StageSolution<f64>> {
    check_coef(&cs.sys, eq)?;
    if eq.alpha == 0.0 {
        return solve_newton_with(eq, &NewtonOptions::default(), None);
    }
    let y = match form {
        ChopForm::Direct => cs.inverse.matvec(&cs.sys.rhs(&eq.y_exp)),
        ChopForm::Increment => {
            let ybar = &cs.sys.map.ybar;
            let r: Vec<f64> = eq
                .y_exp
                .iter()
                .zip(&cs.sys.map.f_bar)
                .zip(ybar)
                .map(|((e, f), b)| e + eq.coef() * f - b)
                .collect();
            linalg::add(ybar, &cs.inverse.matvec(&r))
        }
    };
    let h_norm = eq.perturbation(&y)?;
    Ok(StageSolution {
        y,
        h_norm,
        iterations: 1,
        converged: true,
    })
}

/// Linearized solve with the stage-matrix inverse chopped to `spec` digits.
pub fn solve_linearized_chopped(
    eq: &StageEquation<'_, f64>,
    lp: &LinearizationPoint,
    spec: ChopSpec,
    form: ChopForm,
) -> Result<StageSolution<f64>> {
    let sys = LinearizedSystem::new(taylor_linearize(eq.problem, lp)?, eq.coef())?;
    solve_chopped_with(eq, &ChoppedSystem::new(sys, spec), form)
}

/// The iterative mixed precision stage solver. Each iterate relinearizes at
/// the current value, forms `y_e` and `I - alpha dt J` at level `H`, solves
/// at level `L` and recombines at level `H`. Stops after `iters` iterates or
/// once the residual is at most `tol`.
pub fn solve_mixed_precision<H: Real, L: Real>(
    eq: &StageEquation<'_, H>,
    iters: usize,
    tol: f64,
) -> Result<StageSolution<H>> {
    if L::LEVEL > H::LEVEL {
        return Err(Error::CastToFiner {
            from: H::LEVEL,
            to: L::LEVEL,
        });
    }
    if iters == 0 {
        return Err(Error::InvalidArgument(
            "mixed precision needs at least one iterate".into(),
        ));
    }
    let mut y = eq.y_exp.clone();
    if eq.alpha == 0.0 {
        return Ok(StageSolution {
            y,
            h_norm: 0.0,
            iterations: 0,
            converged: true,
        });
    }
    let c = eq.coef();
    let n = y.len();
    let mut done = 0;
    let mut converged = false;
    while done < iters {
        let j = eq.problem.jacobian(&linalg::to_f64(&y))?;
        let fy = eq.problem.rhs(&y)?;
        let jy = j.apply(&y);
        let ye: Vec<H> = (0..n)
            .map(|i| eq.y_exp[i] + fy[i].mul_f64(c) - jy[i].mul_f64(c))
            .collect();
        let m_high: Matrix<H> = Matrix::from_fn(n, n, |r, k| {
            let v = -H::from_f64(j[(r, k)]).mul_f64(c);
            if r == k {
                H::one() + v
            } else {
                v
            }
        });
        let m_low: Matrix<L> = m_high.map(convert::<H, L>);
        let ye_low: Vec<L> = cast_down(&ye)?;
        let lu = Lu::factor(&m_low)?;
        let yt_low = lu.solve(&ye_low);
        if !linalg::all_finite(&yt_low) {
            return Err(Error::Overflow(L::LEVEL));
        }
        let yt: Vec<H> = cast_up(&yt_low)?;
        let jyt = j.apply(&yt);
        y = (0..n).map(|i| ye[i] + jyt[i].mul_f64(c)).collect();
        done += 1;
        if tol > 0.0 && linalg::norm_inf(&eq.residual(&y)?) <= tol {
            converged = true;
            break;
        }
    }
    let h_norm = eq.perturbation(&y)?;
    Ok(StageSolution {
        y,
        h_norm,
        iterations: done,
        converged: converged || tol == 0.0,
    })
}

/// [`solve_mixed_precision`] with the low level chosen at run time.
pub fn solve_mixed_dispatch<H: Real>(
    eq: &StageEquation<'_, H>,
    low: PrecisionLevel,
    iters: usize,
    tol: f64,
) -> Result<StageSolution<H>> {
    match low {
        PrecisionLevel::Single => solve_mixed_precision::<H, f32>(eq, iters, tol),
        PrecisionLevel::Double => solve_mixed_precision::<H, f64>(eq, iters, tol),
        PrecisionLevel::Extended => solve_mixed_precision::<H, DWord>(eq, iters, tol),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{burgers, linear, porous_medium, scalar, BurgersInit, PorousVariant};

    #[test]
    fn scalar_linear_newton() {
        let p = scalar(-3.0, 1.0, 1.0);
        let eq = StageEquation::new(&p, vec![2.0], 0.5, 0.1).unwrap();
        let s = solve_newton(&eq, 1e-12, 50).unwrap();
        assert_eq!(s.iterations, 1);
        assert!((s.y[0] - 2.0 / (1.0 + 0.15)).abs() < 1e-15);
        assert_eq!(s.h_norm, 0.0);
    }

    #[test]
    fn explicit_stage_is_free() {
        let p = scalar(-3.0, 1.0, 1.0);
        let eq = StageEquation::new(&p, vec![2.0], 0.0, 0.1).unwrap();
        let s = solve_newton(&eq, 1e-12, 50).unwrap();
        assert_eq!((s.y[0], s.iterations), (2.0, 0));
        let m = solve_mixed_precision::<f64, f32>(&eq, 1, 0.0).unwrap();
        assert_eq!((m.y[0], m.iterations), (2.0, 0));
    }

    #[test]
    fn rejects_bad_equations() {
        let p = scalar(-3.0, 1.0, 1.0);
        assert!(StageEquation::new(&p, vec![1.0], -0.5, 0.1).is_err());
        assert!(StageEquation::new(&p, vec![1.0], 0.5, 0.0).is_err());
        assert!(StageEquation::new(&p, vec![1.0, 2.0], 0.5, 0.1).is_err());
        let eq = StageEquation::new(&p, vec![1.0], 0.5, 0.1).unwrap();
        assert!(solve_newton(&eq, 0.0, 10).is_err());
        let e = StageEquation::new(&p, vec![DWord::ONE], 0.5, 0.1).unwrap();
        assert!(solve_mixed_precision::<DWord, f64>(&e, 0, 0.0).is_err());
        assert!(matches!(
            solve_mixed_precision::<f64, DWord>(&eq, 1, 0.0),
            Err(Error::CastToFiner { .. })
        ));
    }

    #[test]
    fn burgers_newton_converges_fast() {
        let p = burgers(16, BurgersInit::A).unwrap();
        let eq = StageEquation::new(&p, p.initial.clone(), 0.5, 1e-3).unwrap();
        let s = solve_newton(&eq, 1e-12, 50).unwrap();
        assert!(s.converged && s.iterations <= 6, "{}", s.iterations);
        assert!(linalg::norm_inf(&eq.residual(&s.y).unwrap()) <= 1e-12);
    }

    #[test]
    fn extended_newton_reaches_tight_tolerance() {
        let p = burgers(16, BurgersInit::A).unwrap();
        let y0: Vec<DWord> = p.initial.iter().map(|&v| DWord::from(v)).collect();
        let eq = StageEquation::new(&p, y0, 0.5, 1e-2).unwrap();
        let s = solve_newton_with(&eq, &NewtonOptions::default(), None).unwrap();
        assert!(s.converged);
        assert!(linalg::norm_inf(&eq.residual(&s.y).unwrap()) <= 1e-28);
    }

    #[test]
    fn linearization_exact_at_solution() {
        let p = burgers(16, BurgersInit::A).unwrap();
        let eq = StageEquation::new(&p, p.initial.clone(), 0.5, 1e-2).unwrap();
        let exact = solve_newton(&eq, 1e-14, 50).unwrap();
        let lin = solve_linearized(&eq, &LinearizationPoint::new(exact.y.clone())).unwrap();
        assert!(lin.h_norm <= 1e-13);
        assert!(linalg::diff_norm_inf(&lin.y, &exact.y) <= 1e-13);
    }

    fn linear_problem() -> Problem {
        let op = Matrix::from_rows(&[
            vec![-2.0, 1.0, 0.0],
            vec![0.5, -3.0, 0.25],
            vec![0.0, 1.0, -1.0],
        ]);
        linear(op, vec![1.0, -0.5, 0.25], 1.0).unwrap()
    }

    #[test]
    fn linear_problem_all_strategies_agree() {
        let p = linear_problem();
        let eq = StageEquation::new(&p, p.initial.clone(), 0.4, 0.2).unwrap();
        let newton = solve_newton(&eq, 1e-15, 50).unwrap();
        let lp = LinearizationPoint::new(p.initial.clone());
        let lin = solve_linearized(&eq, &lp).unwrap();
        assert!(linalg::diff_norm_inf(&lin.y, &newton.y) <= 1e-14);
        assert!(lin.h_norm <= 1e-15);
        for form in [ChopForm::Increment, ChopForm::Direct] {
            let ch = solve_linearized_chopped(&eq, &lp, ChopSpec::new(16).unwrap(), form).unwrap();
            assert!(linalg::diff_norm_inf(&ch.y, &newton.y) <= 1e-13);
        }
        let mp = solve_mixed_precision::<f64, f64>(&eq, 1, 0.0).unwrap();
        assert!(linalg::diff_norm_inf(&mp.y, &newton.y) <= 1e-13);
    }

    #[test]
    fn linearized_h_is_recomputable() {
        let p = burgers(16, BurgersInit::A).unwrap();
        let eq = StageEquation::new(&p, p.initial.clone(), 0.5, 0.05).unwrap();
        let lp = LinearizationPoint::new(p.initial.clone());
        let s = solve_linearized(&eq, &lp).unwrap();
        let map = taylor_linearize(&p, &lp).unwrap();
        let h = linalg::diff_norm_inf(&p.rhs(&s.y).unwrap(), &map.eval(&s.y));
        assert!((h - s.h_norm).abs() <= 1e-15);
        assert!(s.h_norm > 0.0);
    }

    #[test]
    fn chopped_converges_to_linearized() {
        let p = burgers(16, BurgersInit::A).unwrap();
        let eq = StageEquation::new(&p, p.initial.clone(), 0.5, 0.05).unwrap();
        let lp = LinearizationPoint::new(p.initial.clone());
        let lin = solve_linearized(&eq, &lp).unwrap();
        for form in [ChopForm::Increment, ChopForm::Direct] {
            let ch = solve_linearized_chopped(&eq, &lp, ChopSpec::new(15).unwrap(), form).unwrap();
            let rel = linalg::diff_norm_inf(&ch.y, &lin.y) / linalg::norm_inf(&lin.y);
            assert!(rel <= 1e-11, "{rel}");
        }
    }

    #[test]
    fn scalar_chop_error_size() {
        // (1 - c lambda) y = y_exp with c lambda = -1/3: inverse 0.75 is
        // exact in 2 digits, so use c lambda = -0.2: inverse 1/1.2.
        let p = scalar(-2.0, 1.0, 1.0);
        let eq = StageEquation::new(&p, vec![1.0], 1.0, 0.1).unwrap();
        let lp = LinearizationPoint::new(vec![1.0]);
        let exact = 1.0 / 1.2;
        for d in 2..=10u32 {
            let s = solve_linearized_chopped(&eq, &lp, ChopSpec::new(d).unwrap(), ChopForm::Direct)
                .unwrap();
            let chopped = crate::precision::chop_value(exact, d);
            assert!((s.y[0] - chopped).abs() <= 1e-16);
            assert!((s.y[0] - exact).abs() / exact <= 10f64.powi(1 - d as i32));
        }
    }

    #[test]
    fn mixed_double_double_matches_newton_iterates() {
        let p = porous_medium(16, PorousVariant::B).unwrap();
        let eq = StageEquation::new(&p, p.initial.clone(), 0.5, 1e-2).unwrap();
        for iters in 1..=3 {
            let mp = solve_mixed_precision::<f64, f64>(&eq, iters, 0.0).unwrap();
            let newton = solve_newton_with(
                &eq,
                &NewtonOptions {
                    tol: Some(1e-300),
                    max_iter: iters,
                    jacobian: NewtonJacobian::PerIteration,
                },
                None,
            )
            .unwrap();
            assert!(linalg::diff_norm_inf(&mp.y, &newton.y) <= 1e-14);
        }
    }

    #[test]
    fn mixed_scalar_walkthrough() {
        // Linear scalar stage: a single iterate gives ye = y_exp, the single
        // precision solve rounds y_exp and (1 - c lambda), and the high
        // precision recombination keeps only c lambda times that error.
        let lambda = -4.0;
        let p = scalar(lambda, 1.0, 1.0);
        let y_exp = 1.0 / 3.0;
        let eq = StageEquation::new(&p, vec![y_exp], 0.5, 0.1).unwrap();
        let c = 0.05;
        let m32 = (1.0 - c * lambda) as f32;
        let ye32 = y_exp as f32;
        let yt = (ye32 / m32) as f64;
        let oracle = y_exp + c * lambda * yt;
        let s = solve_mixed_precision::<f64, f32>(&eq, 1, 0.0).unwrap();
        assert!((s.y[0] - oracle).abs() <= 1e-16);
        let exact = y_exp / (1.0 - c * lambda);
        let err = (s.y[0] - exact).abs();
        assert!(err <= 4.0 * f32::EPSILON as f64 * exact * (c * lambda).abs() && err > 0.0);
    }

    #[test]
    fn mixed_extended_pipeline_runs() {
        let p = porous_medium(16, PorousVariant::B).unwrap();
        let y: Vec<DWord> = p.initial.iter().map(|&v| DWord::from(v)).collect();
        let eq = StageEquation::new(&p, y, 0.5, 1e-2).unwrap();
        // Every iterate re-solves for the full state in double, so the
        // perturbation floors near L u_double instead of shrinking further.
        let one = solve_mixed_dispatch(&eq, PrecisionLevel::Double, 1, 0.0).unwrap();
        let three = solve_mixed_dispatch(&eq, PrecisionLevel::Double, 3, 0.0).unwrap();
        assert_eq!(three.iterations, 3);
        assert!(three.h_norm < 1e-13, "{}", three.h_norm);
        assert!(three.h_norm <= one.h_norm.max(1e-13));
    }

    #[test]
    fn strategy_names_round_trip() {
        for name in [
            "exact",
            "linearized",
            "linearized@predictor",
            "chop4",
            "chop6-direct",
            "mixed:double/single x1",
            "mixed:extended/double x3",
        ] {
            let s: StageStrategy = name.parse().unwrap();
            assert_eq!(s.to_string(), name);
        }
        assert!("mixed:single/double".parse::<StageStrategy>().is_err());
        assert!("chop0".parse::<StageStrategy>().is_err());
        assert!("newton".parse::<StageStrategy>().is_err());
    }
}
