//! DIRK time stepping with a pluggable stage solver and optional
//! corrections.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corrections::{
    apply_plan, BroydenRecord, CorrectionPlan, CorrectionTrace, PhiKind, PhiStore,
    DIVERGENCE_THRESHOLD,
};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::precision::{ChopSpec, DWord, Lu, PrecisionLevel, Real};
use crate::problems::{taylor_linearize, LinearizationPoint, Problem};
use crate::stage::{
    solve_chopped_with, solve_linearized_with, solve_mixed_dispatch, solve_newton_with,
    ChoppedSystem, Expansion, LinearizedSystem, NewtonJacobian, NewtonOptions, StageEquation,
    StageSolution, StageStrategy,
};
use crate::tableau::ButcherTableau;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub newton: NewtonOptions,
    pub divergence_threshold: f64,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            newton: NewtonOptions::default(),
            divergence_threshold: DIVERGENCE_THRESHOLD,
        }
    }
}

impl RunOptions {
    /// Chord Newton with one factorization per step, for reference runs.
    pub fn reference() -> Self {
        Self {
            newton: NewtonOptions {
                jacobian: NewtonJacobian::FrozenPerStep,
                ..NewtonOptions::default()
            },
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct StageRecord<T> {
    pub y: Vec<T>,
    /// Perturbation left by the stage solver.
    pub h_pre: f64,
    /// Perturbation of the stage value actually used, after corrections.
    pub h: f64,
    pub iterations: usize,
    pub converged: bool,
    pub corrections: CorrectionTrace,
}

#[derive(Clone, Debug)]
pub struct StepOutput<T> {
    pub y_next: Vec<T>,
    pub stages: Vec<StageRecord<T>>,
}

impl<T: Real> StepOutput<T> {
    pub fn h_max(&self) -> f64 {
        self.stages.iter().map(|s| s.h).fold(0.0, f64::max)
    }

    /// Why this step counts as diverged, if it does.
    pub fn failure(&self, threshold: f64) -> Option<String> {
        for (i, s) in self.stages.iter().enumerate() {
            if !s.converged {
                return Some(format!("stage {i} solve did not converge"));
            }
            if s.corrections.diverged {
                return Some(format!("stage {i} corrections diverged"));
            }
        }
        if !linalg::all_finite(&self.y_next) {
            return Some("non-finite state".into());
        }
        let norm = linalg::norm_inf(&self.y_next);
        if norm > threshold {
            return Some(format!("state norm {norm:.3e} exceeds {threshold:.1e}"));
        }
        None
    }
}

#[derive(Default)]
struct StepCache {
    jac_n: Option<Matrix<f64>>,
    lin: Vec<LinearizedSystem>,
    chop: Vec<ChoppedSystem>,
    frozen: Vec<(f64, Lu<f64>)>,
}

/// Steps one problem with one tableau and stage strategy. The state is held
/// at the level of `T`.
pub struct Integrator<'a, T> {
    pub problem: &'a Problem,
    pub tableau: &'a ButcherTableau,
    pub strategy: StageStrategy,
    pub plan: CorrectionPlan,
    pub opts: RunOptions,
    phis: PhiStore,
    pub broyden_log: Vec<BroydenRecord>,
    steps_taken: usize,
    _level: std::marker::PhantomData<T>,
}

impl<'a, T: Real> Integrator<'a, T> {
    pub fn new(
        problem: &'a Problem,
        tableau: &'a ButcherTableau,
        strategy: StageStrategy,
        plan: CorrectionPlan,
        opts: RunOptions,
    ) -> Result<Self> {
        strategy.validate()?;
        if let StageStrategy::MixedPrecision { high, .. } = strategy {
            if high != T::LEVEL {
                return Err(Error::InvalidArgument(format!(
                    "mixed precision high level {high} but state held at {}",
                    T::LEVEL
                )));
            }
        }
        Ok(Self {
            problem,
            tableau,
            strategy,
            plan,
            opts,
            phis: PhiStore::default(),
            broyden_log: Vec::new(),
            steps_taken: 0,
            _level: std::marker::PhantomData,
        })
    }

    fn jac_n<'c>(&self, cache: &'c mut StepCache, y_n: &[T]) -> Result<&'c Matrix<f64>> {
        if cache.jac_n.is_none() {
            cache.jac_n = Some(self.problem.jacobian(&linalg::to_f64(y_n))?);
        }
        Ok(cache.jac_n.as_ref().expect("set above"))
    }

    fn linearized_system(
        &self,
        cache: &mut StepCache,
        y_n: &[T],
        y_exp: &[f64],
        expansion: Expansion,
        coef: f64,
    ) -> Result<LinearizedSystem> {
        match expansion {
            Expansion::Predictor => {
                let lp = LinearizationPoint::new(y_exp.to_vec());
                LinearizedSystem::new(taylor_linearize(self.problem, &lp)?, coef)
            }
            Expansion::StepStart => {
                if let Some(s) = cache.lin.iter().find(|s| s.coef == coef) {
                    return Ok(s.clone());
                }
                let ybar = linalg::to_f64(y_n);
                let map = crate::problems::AffineMap {
                    f_bar: self.problem.rhs(&ybar)?,
                    jac: self.jac_n(cache, y_n)?.clone(),
                    ybar,
                };
                let sys = LinearizedSystem::new(map, coef)?;
                cache.lin.push(sys.clone());
                Ok(sys)
            }
        }
    }

    fn solve_stage(
        &self,
        cache: &mut StepCache,
        y_n: &[T],
        eq: &StageEquation<'_, T>,
    ) -> Result<StageSolution<T>> {
        let coef = eq.coef();
        let lift = |s: StageSolution<f64>| StageSolution {
            y: linalg::from_f64(&s.y),
            h_norm: s.h_norm,
            iterations: s.iterations,
            converged: s.converged,
        };
        match self.strategy {
            StageStrategy::ExactNewton => {
                if eq.alpha == 0.0 {
                    return solve_newton_with(eq, &self.opts.newton, None);
                }
                match self.opts.newton.jacobian {
                    NewtonJacobian::PerIteration => solve_newton_with(eq, &self.opts.newton, None),
                    NewtonJacobian::FrozenPerStep => {
                        if !cache.frozen.iter().any(|(c, _)| *c == coef) {
                            let lu = Lu::factor(&self.jac_n(cache, y_n)?.shifted_identity(coef))?;
                            cache.frozen.push((coef, lu));
                        }
                        let lu = &cache
                            .frozen
                            .iter()
                            .find(|(c, _)| *c == coef)
                            .expect("cached")
                            .1;
                        solve_newton_with(eq, &self.opts.newton, Some(lu))
                    }
                }
            }
            StageStrategy::Linearized { expansion } => {
                let e = as_f64(eq);
                if eq.alpha == 0.0 {
                    return Ok(lift(solve_newton_with(&e, &self.opts.newton, None)?));
                }
                let sys = self.linearized_system(cache, y_n, &e.y_exp, expansion, coef)?;
                Ok(lift(solve_linearized_with(&e, &sys)?))
            }
            StageStrategy::Chopped {
                digits,
                expansion,
                form,
            } => {
                let e = as_f64(eq);
                if eq.alpha == 0.0 {
                    return Ok(lift(solve_newton_with(&e, &self.opts.newton, None)?));
                }
                let spec = ChopSpec::new(digits)?;
                let reuse = expansion == Expansion::StepStart;
                if !reuse {
                    let sys = self.linearized_system(cache, y_n, &e.y_exp, expansion, coef)?;
                    let cs = ChoppedSystem::new(sys, spec);
                    return Ok(lift(solve_chopped_with(&e, &cs, form)?));
                }
                let idx = match cache.chop.iter().position(|c| c.sys.coef == coef) {
                    Some(i) => i,
                    None => {
                        let sys = self.linearized_system(cache, y_n, &e.y_exp, expansion, coef)?;
                        cache.chop.push(ChoppedSystem::new(sys, spec));
                        cache.chop.len() - 1
                    }
                };
                Ok(lift(solve_chopped_with(&e, &cache.chop[idx], form)?))
            }
            StageStrategy::MixedPrecision {
                low, iters, tol, ..
            } => solve_mixed_dispatch(eq, low, iters, tol),
        }
    }

    /// One step of size `dt` from `y_n`.
    pub fn step(&mut self, y_n: &[T], dt: f64) -> Result<StepOutput<T>> {
        let t = self.tableau;
        let mut cache = StepCache::default();
        let mut fs: Vec<Vec<T>> = Vec::with_capacity(t.s);
        let mut stages = Vec::with_capacity(t.s);
        let mut broyden_pending = true;
        for i in 0..t.s {
            let mut y_exp = y_n.to_vec();
            for (j, f) in fs.iter().enumerate() {
                let a = t.a[i][j];
                if a != 0.0 {
                    let c = dt * a;
                    for (v, fv) in y_exp.iter_mut().zip(f) {
                        *v += fv.mul_f64(c);
                    }
                }
            }
            let alpha = t.a[i][i];
            let eq = StageEquation::new(self.problem, y_exp, alpha, dt)?;
            let sol = self.solve_stage(&mut cache, y_n, &eq)?;
            let (y, corrections, h) = if self.plan.is_active() && alpha > 0.0 {
                let broyden_step = match self.plan.phi_kind() {
                    Some(PhiKind::Broyden(_)) if broyden_pending => {
                        broyden_pending = false;
                        Some(self.steps_taken)
                    }
                    _ => None,
                };
                let phi = match self.plan.phi_kind() {
                    Some(kind) => {
                        let mu = self.plan.mu.resolve(alpha);
                        Some(self.phis.get_or_build(
                            kind,
                            self.problem,
                            &self.problem.initial,
                            mu,
                            dt,
                        )?)
                    }
                    None => None,
                };
                let (y, trace) = apply_plan(&eq, sol.y, &self.plan, phi, broyden_step)?;
                if let Some(rec) = &trace.broyden {
                    self.broyden_log.push(rec.clone());
                }
                let h = if trace.diverged {
                    f64::INFINITY
                } else {
                    eq.perturbation(&y)?
                };
                (y, trace, h)
            } else {
                (sol.y, CorrectionTrace::default(), sol.h_norm)
            };
            let failed = corrections.diverged || !sol.converged;
            fs.push(if failed {
                vec![T::zero(); y.len()]
            } else {
                self.problem.rhs(&y)?
            });
            stages.push(StageRecord {
                y,
                h_pre: sol.h_norm,
                h,
                iterations: sol.iterations,
                converged: sol.converged,
                corrections,
            });
            if failed {
                self.steps_taken += 1;
                return Ok(StepOutput {
                    y_next: vec![T::from_f64(f64::NAN); y_n.len()],
                    stages,
                });
            }
        }
        let mut y_next = y_n.to_vec();
        for (b, f) in t.b.iter().zip(&fs) {
            let c = dt * b;
            for (v, fv) in y_next.iter_mut().zip(f) {
                *v += fv.mul_f64(c);
            }
        }
        self.steps_taken += 1;
        Ok(StepOutput { y_next, stages })
    }

    pub fn run(mut self, dt: f64) -> Result<RunResult> {
        let (steps, last_dt) = step_plan(self.problem.final_time, dt)?;
        let start = Instant::now();
        let mut y: Vec<T> = linalg::from_f64(&self.problem.initial);
        let mut h = Vec::with_capacity(steps);
        let mut h_pre = Vec::with_capacity(steps);
        let mut t = 0.0;
        let mut failure = None;
        for k in 0..steps {
            let dt_k = if k + 1 == steps { last_dt } else { dt };
            match self.step(&y, dt_k) {
                Ok(out) => {
                    h.push(out.stages.iter().map(|s| s.h).collect());
                    h_pre.push(out.stages.iter().map(|s| s.h_pre).collect());
                    if let Some(why) = out.failure(self.opts.divergence_threshold) {
                        failure = Some(why);
                        break;
                    }
                    y = out.y_next;
                    t = if k + 1 == steps {
                        self.problem.final_time
                    } else {
                        (k + 1) as f64 * dt
                    };
                }
                Err(e) => {
                    failure = Some(e.to_string());
                    break;
                }
            }
        }
        let final_state = linalg::to_f64(&y);
        let diverged = failure.is_some();
        Ok(RunResult {
            problem: self.problem.name.clone(),
            n: self.problem.n,
            tableau: self.tableau.name.clone(),
            strategy: self.strategy.to_string(),
            corrections: self.plan.to_string(),
            level: T::LEVEL,
            dt,
            steps: h.len(),
            time_reached: t,
            conservation_drift: self
                .problem
                .conservation_drift(&self.problem.initial, &final_state),
            final_state,
            h,
            h_pre,
            diverged,
            diverged_at: if diverged { Some(t) } else { None },
            failure,
            wall_seconds: start.elapsed().as_secs_f64(),
            broyden: self.broyden_log,
        })
    }
}

fn as_f64<'p, T: Real>(eq: &StageEquation<'p, T>) -> StageEquation<'p, f64> {
    StageEquation {
        problem: eq.problem,
        y_exp: linalg::to_f64(&eq.y_exp),
        alpha: eq.alpha,
        dt: eq.dt,
    }
}

/// Number of steps and size of the last one; the last step is shortened so
/// that the run ends exactly at `t_final`.
pub fn step_plan(t_final: f64, dt: f64) -> Result<(usize, f64)> {
    if !(dt > 0.0 && t_final > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "need dt > 0 and final time > 0, got dt={dt} T={t_final}"
        )));
    }
    let ratio = t_final / dt;
    let nearest = ratio.round();
    if nearest >= 1.0 && (ratio - nearest).abs() <= 1e-9 * ratio {
        return Ok((nearest as usize, dt));
    }
    let steps = ratio.ceil() as usize;
    Ok((steps, t_final - (steps - 1) as f64 * dt))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunResult {
    pub problem: String,
    pub n: usize,
    pub tableau: String,
    pub strategy: String,
    pub corrections: String,
    pub level: PrecisionLevel,
    pub dt: f64,
    pub steps: usize,
    pub time_reached: f64,
    pub final_state: Vec<f64>,
    /// Per step, per stage perturbation after corrections.
    pub h: Vec<Vec<f64>>,
    /// Per step, per stage perturbation before corrections.
    pub h_pre: Vec<Vec<f64>>,
    pub diverged: bool,
    pub diverged_at: Option<f64>,
    pub failure: Option<String>,
    pub conservation_drift: f64,
    pub wall_seconds: f64,
    pub broyden: Vec<BroydenRecord>,
}

impl RunResult {
    pub fn h_max(&self) -> f64 {
        self.h.iter().flatten().copied().fold(0.0, f64::max)
    }

    pub fn h_per_step(&self) -> Vec<f64> {
        self.h
            .iter()
            .map(|s| s.iter().copied().fold(0.0, f64::max))
            .collect()
    }
}

/// Integrates with the state held at `level`.
pub fn integrate(
    problem: &Problem,
    tableau: &ButcherTableau,
    dt: f64,
    strategy: StageStrategy,
    plan: CorrectionPlan,
    level: PrecisionLevel,
    opts: RunOptions,
) -> Result<RunResult> {
    match level {
        PrecisionLevel::Single => {
            Integrator::<f32>::new(problem, tableau, strategy, plan, opts)?.run(dt)
        }
        PrecisionLevel::Double => {
            Integrator::<f64>::new(problem, tableau, strategy, plan, opts)?.run(dt)
        }
        PrecisionLevel::Extended => {
            Integrator::<DWord>::new(problem, tableau, strategy, plan, opts)?.run(dt)
        }
    }
}

/// [`integrate`] at the level the strategy needs (double if it has no
/// preference).
pub fn integrate_default(
    problem: &Problem,
    tableau: &ButcherTableau,
    dt: f64,
    strategy: StageStrategy,
    plan: CorrectionPlan,
) -> Result<RunResult> {
    let level = strategy.required_level().unwrap_or(PrecisionLevel::Double);
    integrate(
        problem,
        tableau,
        dt,
        strategy,
        plan,
        level,
        RunOptions::default(),
    )
}
