//! Correction iterations that reduce the stage perturbation after a cheap
//! stage solve, and the stabilization matrices they use.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::precision::{Lu, Real};
use crate::problems::Problem;
use crate::stage::StageEquation;

/// Iterates with a larger sup norm (or non-finite entries) count as diverged.
pub const DIVERGENCE_THRESHOLD: f64 = 1e10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BroydenVariant {
    /// `rho = Phi^T (dy - Phi R)`.
    Good,
    /// `rho = R`.
    Bad,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhiKind {
    /// `(I - mu dt f'(y0))^-1` with the Jacobian at the initial state.
    Jacobian,
    /// `(I - mu dt L)^-1` with the dominant linear operator `L`.
    Ein,
    /// Starts from the Jacobian matrix and is updated once per step.
    Broyden(BroydenVariant),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrectionKind {
    None,
    Explicit,
    Stabilized(PhiKind),
}

impl fmt::Display for CorrectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CorrectionKind::None => "none",
            CorrectionKind::Explicit => "explicit",
            CorrectionKind::Stabilized(PhiKind::Jacobian) => "phi-jacobian",
            CorrectionKind::Stabilized(PhiKind::Ein) => "phi-ein",
            CorrectionKind::Stabilized(PhiKind::Broyden(BroydenVariant::Good)) => {
                "phi-broyden-good"
            }
            CorrectionKind::Stabilized(PhiKind::Broyden(BroydenVariant::Bad)) => "phi-broyden-bad",
        };
        f.write_str(s)
    }
}

impl FromStr for CorrectionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => CorrectionKind::None,
            "explicit" => CorrectionKind::Explicit,
            "phi-jacobian" => CorrectionKind::Stabilized(PhiKind::Jacobian),
            "phi-ein" => CorrectionKind::Stabilized(PhiKind::Ein),
            "phi-broyden-good" => {
                CorrectionKind::Stabilized(PhiKind::Broyden(BroydenVariant::Good))
            }
            "phi-broyden-bad" => CorrectionKind::Stabilized(PhiKind::Broyden(BroydenVariant::Bad)),
            _ => {
                return Err(Error::UnknownName {
                    kind: "correction",
                    name: s.to_string(),
                })
            }
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MuPolicy {
    /// The diagonal coefficient of the stage being corrected.
    #[default]
    Aii,
    Fixed(f64),
}

impl MuPolicy {
    pub fn resolve(self, a_ii: f64) -> f64 {
        match self {
            MuPolicy::Aii => a_ii,
            MuPolicy::Fixed(m) => m,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectionPlan {
    pub kind: CorrectionKind,
    pub count: usize,
    #[serde(default)]
    pub mu: MuPolicy,
}

impl CorrectionPlan {
    pub fn none() -> Self {
        Self {
            kind: CorrectionKind::None,
            count: 0,
            mu: MuPolicy::Aii,
        }
    }

    pub fn new(kind: CorrectionKind, count: usize) -> Self {
        Self {
            kind,
            count,
            mu: MuPolicy::Aii,
        }
    }

    pub fn is_active(&self) -> bool {
        self.kind != CorrectionKind::None && self.count > 0
    }

    pub fn phi_kind(&self) -> Option<PhiKind> {
        match self.kind {
            CorrectionKind::Stabilized(k) => Some(k),
            _ => None,
        }
    }
}

impl fmt::Display for CorrectionPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_active() {
            write!(f, "{}({})", self.kind, self.count)
        } else {
            f.write_str("none")
        }
    }
}

#[derive(Clone, Debug)]
pub struct StabilizationMatrix {
    pub kind: PhiKind,
    pub phi: Matrix<f64>,
    pub mu: f64,
    pub dt: f64,
    pub updates: usize,
}

impl StabilizationMatrix {
    pub fn apply<T: Real>(&self, v: &[T]) -> Vec<T> {
        self.phi.apply(v)
    }
}

fn invert_shifted(op: &Matrix<f64>, mu: f64, dt: f64) -> Result<Matrix<f64>> {
    if !(mu >= 0.0 && dt > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "stabilization needs mu >= 0 and dt > 0, got mu={mu} dt={dt}"
        )));
    }
    Ok(Lu::factor(&op.shifted_identity(mu * dt))?.inverse())
}

/// `(I - mu dt f'(y0))^-1`.
pub fn build_phi_jacobian(
    p: &Problem,
    y0: &[f64],
    mu: f64,
    dt: f64,
) -> Result<StabilizationMatrix> {
    let phi = invert_shifted(&p.jacobian(y0)?, mu, dt)?;
    Ok(StabilizationMatrix {
        kind: PhiKind::Jacobian,
        phi,
        mu,
        dt,
        updates: 0,
    })
}

/// `(I - mu dt L)^-1` for the problem's dominant linear operator.
pub fn build_phi_ein(p: &Problem, mu: f64, dt: f64) -> Result<StabilizationMatrix> {
    let phi = invert_shifted(p.dominant_operator(), mu, dt)?;
    Ok(StabilizationMatrix {
        kind: PhiKind::Ein,
        phi,
        mu,
        dt,
        updates: 0,
    })
}

pub fn build_phi(
    kind: PhiKind,
    p: &Problem,
    y0: &[f64],
    mu: f64,
    dt: f64,
) -> Result<StabilizationMatrix> {
    match kind {
        PhiKind::Ein => build_phi_ein(p, mu, dt),
        PhiKind::Jacobian => build_phi_jacobian(p, y0, mu, dt),
        PhiKind::Broyden(_) => {
            let mut m = build_phi_jacobian(p, y0, mu, dt)?;
            m.kind = kind;
            Ok(m)
        }
    }
}

/// `r(y) = y_exp + alpha dt f(y) - y`.
pub fn residual<T: Real>(eq: &StageEquation<'_, T>, y: &[T]) -> Result<Vec<T>> {
    eq.residual(y)
}

/// `y_exp + alpha dt f(y)`.
pub fn explicit_correct<T: Real>(eq: &StageEquation<'_, T>, y: &[T]) -> Result<Vec<T>> {
    let r = eq.residual(y)?;
    Ok(linalg::add(y, &r))
}

/// `y + Phi r(y)`.
pub fn stabilized_correct<T: Real>(
    eq: &StageEquation<'_, T>,
    y: &[T],
    phi: &StabilizationMatrix,
) -> Result<Vec<T>> {
    let r = eq.residual(y)?;
    Ok(linalg::add(y, &phi.apply(&r)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BroydenRecord {
    pub step: usize,
    pub applied: bool,
    pub reason: Option<String>,
    /// `||Phi_new R - dy||` after an applied update.
    pub secant_error: f64,
    /// `||dy||` of the secant pair.
    pub dy_norm: f64,
}

pub const BROYDEN_SKIP_TOL: f64 = 1e-14;

/// One Broyden update of `phi` from the secant pair `(y_new, y_old)` with
/// right-hand sides `(f_new, f_old)` of a stage with coefficient `coef`.
pub fn broyden_update(
    phi: &mut StabilizationMatrix,
    variant: BroydenVariant,
    coef: f64,
    (y_new, f_new): (&[f64], &[f64]),
    (y_old, f_old): (&[f64], &[f64]),
    step: usize,
) -> BroydenRecord {
    let dy = linalg::sub(y_new, y_old);
    let df = linalg::sub(f_new, f_old);
    let r: Vec<f64> = dy.iter().zip(&df).map(|(a, b)| a - coef * b).collect();
    let skip = |reason: &str| BroydenRecord {
        step,
        applied: false,
        reason: Some(reason.to_string()),
        secant_error: f64::NAN,
        dy_norm: linalg::norm_inf(&dy),
    };
    let r_norm = linalg::norm2(&r);
    if r_norm == 0.0 {
        return skip("secant difference R is zero");
    }
    let upsilon = linalg::sub(&dy, &phi.phi.matvec(&r));
    let rho = match variant {
        BroydenVariant::Bad => r.clone(),
        BroydenVariant::Good => phi.phi.transpose().matvec(&upsilon),
    };
    let denom = linalg::dot(&rho, &r);
    if !(denom.abs() > BROYDEN_SKIP_TOL * linalg::norm2(&rho) * r_norm) {
        return skip("rho^T R is negligible");
    }
    let scaled: Vec<f64> = rho.iter().map(|v| v / denom).collect();
    phi.phi.add_outer(&upsilon, &scaled);
    phi.updates += 1;
    let secant_error = linalg::diff_norm_inf(&phi.phi.matvec(&r), &dy);
    BroydenRecord {
        step,
        applied: true,
        reason: None,
        secant_error,
        dy_norm: linalg::norm_inf(&dy),
    }
}

#[derive(Clone, Debug, Default)]
pub struct CorrectionTrace {
    /// `||r||` at the starting value and after every correction.
    pub residual_norms: Vec<f64>,
    pub diverged: bool,
    pub broyden: Option<BroydenRecord>,
}

fn blew_up<T: Real>(y: &[T]) -> bool {
    !linalg::all_finite(y) || linalg::norm_inf(y) > DIVERGENCE_THRESHOLD
}

/// Runs `plan.count` corrections from `y0`. For a Broyden plan with
/// `broyden_step = Some(step)`, the matrix is updated right after the first
/// correction from the pair `(y_1, y_0)` and the remaining corrections use
/// the updated matrix.
pub fn apply_plan<T: Real>(
    eq: &StageEquation<'_, T>,
    y0: Vec<T>,
    plan: &CorrectionPlan,
    mut phi: Option<&mut StabilizationMatrix>,
    broyden_step: Option<usize>,
) -> Result<(Vec<T>, CorrectionTrace)> {
    let mut trace = CorrectionTrace::default();
    let mut y = y0;
    if !plan.is_active() || eq.alpha == 0.0 {
        return Ok((y, trace));
    }
    if plan.phi_kind().is_some() && phi.is_none() {
        return Err(Error::InvalidArgument(
            "stabilized corrections need a stabilization matrix".into(),
        ));
    }
    let c = eq.coef();
    let mut fy = eq.problem.rhs(&y)?;
    for k in 0..plan.count {
        let r = eq.residual_with(&y, &fy);
        trace.residual_norms.push(linalg::norm_inf(&r));
        let next = match (&plan.kind, phi.as_deref()) {
            (CorrectionKind::Explicit, _) => linalg::add(&y, &r),
            (CorrectionKind::Stabilized(_), Some(m)) => linalg::add(&y, &m.apply(&r)),
            _ => unreachable!("plan checked above"),
        };
        if blew_up(&next) {
            trace.diverged = true;
            return Ok((next, trace));
        }
        let f_next = eq.problem.rhs(&next)?;
        if let (0, Some(step), CorrectionKind::Stabilized(PhiKind::Broyden(variant))) =
            (k, broyden_step, plan.kind)
        {
            let m = phi.as_deref_mut().expect("checked");
            trace.broyden = Some(broyden_update(
                m,
                variant,
                c,
                (&linalg::to_f64(&next), &linalg::to_f64(&f_next)),
                (&linalg::to_f64(&y), &linalg::to_f64(&fy)),
                step,
            ));
        }
        y = next;
        fy = f_next;
    }
    trace
        .residual_norms
        .push(linalg::norm_inf(&eq.residual_with(&y, &fy)));
    Ok((y, trace))
}

/// Stabilization matrices of one run, keyed on `(mu, dt)`.
#[derive(Clone, Debug, Default)]
pub struct PhiStore {
    entries: Vec<StabilizationMatrix>,
}

impl PhiStore {
    pub fn get_or_build(
        &mut self,
        kind: PhiKind,
        p: &Problem,
        y0: &[f64],
        mu: f64,
        dt: f64,
    ) -> Result<&mut StabilizationMatrix> {
        let pos = self
            .entries
            .iter()
            .position(|m| m.kind == kind && m.mu == mu && m.dt == dt);
        let idx = match pos {
            Some(i) => i,
            None => {
                self.entries.push(build_phi(kind, p, y0, mu, dt)?);
                self.entries.len() - 1
            }
        };
        Ok(&mut self.entries[idx])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{burgers, porous_medium, scalar, BurgersInit, PorousVariant};
    use crate::stage::solve_newton;
    use proptest::prelude::*;

    #[test]
    fn explicit_correction_contracts_by_c_lambda() {
        // Scalar: the error after one explicit correction is c lambda times
        // the error before it.
        let lambda = -2.0;
        let p = scalar(lambda, 1.0, 1.0);
        let eq = StageEquation::new(&p, vec![1.0], 0.5, 0.1).unwrap();
        let exact = 1.0 / (1.0 - 0.05 * lambda);
        let y0 = exact + 1e-3;
        let y1 = explicit_correct(&eq, &[y0]).unwrap()[0];
        assert!(((y1 - exact) - 0.05 * lambda * 1e-3).abs() <= 1e-15);
    }

    #[test]
    fn exact_phi_is_one_step() {
        let lambda = -50.0;
        let p = scalar(lambda, 1.0, 1.0);
        let eq = StageEquation::new(&p, vec![1.0], 0.5, 0.1).unwrap();
        let phi = build_phi_jacobian(&p, &[1.0], 0.5, 0.1).unwrap();
        let y = stabilized_correct(&eq, &[0.3], &phi).unwrap()[0];
        assert!((y - 1.0 / (1.0 - 0.05 * lambda)).abs() <= 1e-15);
    }

    #[test]
    fn ein_matches_jacobian_on_linear_part() {
        let p = porous_medium(16, PorousVariant::B).unwrap();
        let ein = build_phi_ein(&p, 0.5, 1e-2).unwrap();
        let expect = invert_shifted(p.dominant_operator(), 0.5, 1e-2).unwrap();
        assert!(ein.phi.sub(&expect).max_abs() == 0.0);
        assert!(build_phi_ein(&p, -1.0, 1e-2).is_err());
    }

    #[test]
    fn stabilized_beats_explicit_on_stiff_burgers() {
        let p = burgers(32, BurgersInit::A).unwrap();
        let dt = 0.05;
        let eq = StageEquation::new(&p, p.initial.clone(), 0.5, dt).unwrap();
        let exact = solve_newton(&eq, 1e-14, 50).unwrap().y;
        let start: Vec<f64> = exact.iter().map(|v| v + 1e-4).collect();
        let mut phi = build_phi_jacobian(&p, &p.initial, 0.5, dt).unwrap();
        let (ys, ts) = apply_plan(
            &eq,
            start.clone(),
            &CorrectionPlan::new(CorrectionKind::Stabilized(PhiKind::Jacobian), 3),
            Some(&mut phi),
            None,
        )
        .unwrap();
        let (ye, te) = apply_plan(
            &eq,
            start,
            &CorrectionPlan::new(CorrectionKind::Explicit, 3),
            None,
            None,
        )
        .unwrap();
        assert_eq!(ts.residual_norms.len(), 4);
        assert!(ts.residual_norms.windows(2).all(|w| w[1] < w[0]));
        assert!(linalg::diff_norm_inf(&ys, &exact) < linalg::diff_norm_inf(&ye, &exact));
        assert!(te.residual_norms[3] > ts.residual_norms[3]);
    }

    #[test]
    fn explicit_corrections_diverge_when_stiff() {
        let p = scalar(-1e4, 1.0, 1.0);
        let eq = StageEquation::new(&p, vec![1.0], 0.5, 0.1).unwrap();
        let (_, trace) = apply_plan(
            &eq,
            vec![0.5],
            &CorrectionPlan::new(CorrectionKind::Explicit, 10),
            None,
            None,
        )
        .unwrap();
        assert!(trace.diverged);
    }

    #[test]
    fn plan_requires_matrix() {
        let p = scalar(-1.0, 1.0, 1.0);
        let eq = StageEquation::new(&p, vec![1.0], 0.5, 0.1).unwrap();
        let plan = CorrectionPlan::new(CorrectionKind::Stabilized(PhiKind::Ein), 1);
        assert!(apply_plan(&eq, vec![1.0], &plan, None, None).is_err());
        let none = apply_plan(&eq, vec![0.7], &CorrectionPlan::none(), None, None).unwrap();
        assert_eq!(none.0, vec![0.7]);
        assert!(none.1.residual_norms.is_empty());
    }

    #[test]
    fn broyden_skips_zero_difference() {
        let p = scalar(-1.0, 1.0, 1.0);
        let mut phi = build_phi_jacobian(&p, &[1.0], 0.5, 0.1).unwrap();
        let before = phi.phi.clone();
        let rec = broyden_update(
            &mut phi,
            BroydenVariant::Good,
            0.05,
            (&[1.0], &[2.0]),
            (&[1.0], &[2.0]),
            3,
        );
        assert!(!rec.applied && rec.reason.is_some());
        assert_eq!(phi.phi, before);
        assert_eq!(phi.updates, 0);
    }

    #[test]
    fn broyden_update_inside_plan() {
        let p = burgers(16, BurgersInit::A).unwrap();
        let dt = 0.05;
        let eq = StageEquation::new(&p, p.initial.clone(), 0.5, dt).unwrap();
        let kind = PhiKind::Broyden(BroydenVariant::Bad);
        let mut phi = build_phi(kind, &p, &p.initial, 0.5, dt).unwrap();
        let plan = CorrectionPlan::new(CorrectionKind::Stabilized(kind), 3);
        let start: Vec<f64> = p.initial.iter().map(|v| v * 1.01).collect();
        let (_, trace) = apply_plan(&eq, start, &plan, Some(&mut phi), Some(7)).unwrap();
        let rec = trace.broyden.unwrap();
        assert!(rec.applied && rec.step == 7 && rec.secant_error < 1e-12);
        assert_eq!(phi.updates, 1);
    }

    #[test]
    fn store_keys_on_mu_and_dt() {
        let p = burgers(16, BurgersInit::A).unwrap();
        let mut store = PhiStore::default();
        store
            .get_or_build(PhiKind::Jacobian, &p, &p.initial, 0.5, 0.1)
            .unwrap();
        store
            .get_or_build(PhiKind::Jacobian, &p, &p.initial, 0.5, 0.1)
            .unwrap();
        assert_eq!(store.len(), 1);
        store
            .get_or_build(PhiKind::Jacobian, &p, &p.initial, 0.5, 0.05)
            .unwrap();
        assert_eq!(store.len(), 2);
    }

    #[test]
    fn names_round_trip() {
        for s in [
            "none",
            "explicit",
            "phi-jacobian",
            "phi-ein",
            "phi-broyden-good",
            "phi-broyden-bad",
        ] {
            assert_eq!(s.parse::<CorrectionKind>().unwrap().to_string(), s);
        }
        assert!("phi".parse::<CorrectionKind>().is_err());
    }

    proptest! {
        #[test]
        fn broyden_secant_condition(
            seed in prop::collection::vec(-1.0f64..1.0, 20),
            good in any::<bool>(),
        ) {
            let p = burgers(10, BurgersInit::A).unwrap();
            let mut phi = build_phi_jacobian(&p, &p.initial, 0.5, 0.1).unwrap();
            let y_old = p.initial.clone();
            let y_new: Vec<f64> = y_old.iter().zip(&seed).map(|(a, s)| a + 0.1 * s).collect();
            let f_old = p.rhs(&y_old).unwrap();
            let f_new = p.rhs(&y_new).unwrap();
            let variant = if good { BroydenVariant::Good } else { BroydenVariant::Bad };
            let rec = broyden_update(&mut phi, variant, 0.05, (&y_new, &f_new), (&y_old, &f_old), 0);
            if rec.applied {
                let dy = linalg::sub(&y_new, &y_old);
                let r: Vec<f64> = dy.iter().zip(f_new.iter().zip(&f_old))
                    .map(|(d, (a, b))| d - 0.05 * (a - b)).collect();
                let err = linalg::diff_norm_inf(&phi.phi.matvec(&r), &dy);
                prop_assert!(err <= 1e-12 * (1.0 + linalg::norm_inf(&dy)));
            }
        }
    }
}
