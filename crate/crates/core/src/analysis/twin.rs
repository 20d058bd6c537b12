//! Twin integrations: the perturbed stages and the exact Newton stages are
//! advanced side by side and their gap is checked against the stage and
//! per-step growth bounds.

use serde::{Deserialize, Serialize};

use super::bounds::{compute_k_c, compute_theta_omega, growth_bound};
use crate::corrections::CorrectionPlan;
use crate::error::{Error, Result};
use crate::integrate::{step_plan, Integrator, RunOptions};
use crate::linalg;
use crate::precision::PrecisionLevel;
use crate::problems::Problem;
use crate::stage::{NewtonJacobian, NewtonOptions, StageStrategy};
use crate::tableau::ButcherTableau;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TwinMode {
    /// The exact twin restarts from the perturbed state every step.
    #[default]
    Resync,
    /// Both trajectories run freely from the initial data.
    Free,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EpsMode {
    /// `eps_i` is the measured perturbation of stage `i` in that step.
    #[default]
    PerStep,
    /// `eps_i` is the largest perturbation of stage `i` over the run.
    RunMax,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwinOptions {
    pub mode: TwinMode,
    pub eps: EpsMode,
    /// Residual tolerance of the exact twin's Newton solves.
    pub newton_tol: f64,
    /// Absolute allowance for the exact twin's own solve error.
    pub slack: f64,
}

impl Default for TwinOptions {
    fn default() -> Self {
        Self {
            mode: TwinMode::Resync,
            eps: EpsMode::PerStep,
            newton_tol: 1e-13,
            slack: 1e-12,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TwinTrace {
    pub step_index: usize,
    pub dt: f64,
    /// Stiffness surrogate `||f'(y_n)||_inf`.
    pub l: f64,
    /// `||z_n - y_n||`.
    pub y_err: f64,
    pub stage_err: Vec<f64>,
    pub h: Vec<f64>,
    pub eps: Vec<f64>,
    pub stage_bound: Vec<f64>,
    pub stage_ok: Vec<bool>,
    /// `||z_{n+1} - y_{n+1}||`.
    pub step_err: f64,
    pub theta: f64,
    pub omega: f64,
    pub growth_bound: f64,
    pub step_ok: bool,
    /// The sharper bound, on steps where `dt` reaches its threshold.
    pub sharp_bound: Option<f64>,
    pub sharp_ok: Option<bool>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TwinReport {
    pub traces: Vec<TwinTrace>,
    pub diverged: bool,
    pub failure: Option<String>,
}

impl TwinReport {
    pub fn stage_violations(&self) -> usize {
        self.traces
            .iter()
            .map(|t| t.stage_ok.iter().filter(|ok| !**ok).count())
            .sum()
    }

    pub fn step_violations(&self) -> usize {
        self.traces.iter().filter(|t| !t.step_ok).count()
    }

    pub fn sharp_violations(&self) -> usize {
        self.traces
            .iter()
            .filter(|t| t.sharp_ok == Some(false))
            .count()
    }

    pub fn sharp_checked(&self) -> usize {
        self.traces.iter().filter(|t| t.sharp_ok.is_some()).count()
    }

    pub fn max_stage_err(&self) -> f64 {
        self.traces
            .iter()
            .flat_map(|t| t.stage_err.iter().copied())
            .fold(0.0, f64::max)
    }
}

struct Raw {
    dt: f64,
    l: f64,
    y_err: f64,
    stage_err: Vec<f64>,
    h: Vec<f64>,
    step_err: f64,
}

/// Runs the twin integration and evaluates the bounds on every step. The
/// perturbed strategy runs at double precision.
pub fn twin_integrate(
    p: &Problem,
    t: &ButcherTableau,
    dt: f64,
    strategy: StageStrategy,
    plan: CorrectionPlan,
    opts: &TwinOptions,
) -> Result<TwinReport> {
    if strategy.is_exact() {
        return Err(Error::InvalidArgument(
            "twin integration needs a perturbed strategy".into(),
        ));
    }
    if strategy.required_level() != Some(PrecisionLevel::Double) {
        return Err(Error::InvalidArgument(format!(
            "twin integration runs at double precision, {strategy} does not"
        )));
    }
    let mut cand = Integrator::<f64>::new(p, t, strategy, plan, RunOptions::default())?;
    let exact_opts = RunOptions {
        newton: NewtonOptions {
            tol: Some(opts.newton_tol),
            max_iter: 50,
            jacobian: NewtonJacobian::PerIteration,
        },
        ..RunOptions::default()
    };
    let mut exact = Integrator::<f64>::new(
        p,
        t,
        StageStrategy::ExactNewton,
        CorrectionPlan::none(),
        exact_opts,
    )?;
    let (steps, last) = step_plan(p.final_time, dt)?;
    let mut y = p.initial.clone();
    let mut z = p.initial.clone();
    let mut raw = Vec::with_capacity(steps);
    let mut failure = None;
    for k in 0..steps {
        let dt_k = if k + 1 == steps { last } else { dt };
        let l = p.jacobian(&y)?.norm_inf();
        let out_y = match cand.step(&y, dt_k) {
            Ok(o) => o,
            Err(e) => {
                failure = Some(e.to_string());
                break;
            }
        };
        if let Some(why) = out_y.failure(cand.opts.divergence_threshold) {
            failure = Some(why);
            break;
        }
        let z_start = match opts.mode {
            TwinMode::Resync => y.clone(),
            TwinMode::Free => z.clone(),
        };
        let out_z = exact.step(&z_start, dt_k)?;
        if let Some(why) = out_z.failure(exact.opts.divergence_threshold) {
            failure = Some(format!("exact twin: {why}"));
            break;
        }
        raw.push(Raw {
            dt: dt_k,
            l,
            y_err: linalg::diff_norm_inf(&z_start, &y),
            stage_err: out_y
                .stages
                .iter()
                .zip(&out_z.stages)
                .map(|(a, b)| linalg::diff_norm_inf(&a.y, &b.y))
                .collect(),
            h: out_y.stages.iter().map(|s| s.h).collect(),
            step_err: linalg::diff_norm_inf(&out_z.y_next, &out_y.y_next),
        });
        y = out_y.y_next;
        z = out_z.y_next;
    }
    let run_max: Vec<f64> = (0..t.s)
        .map(|i| raw.iter().map(|r| r.h[i]).fold(0.0, f64::max))
        .collect();
    let mut traces = Vec::with_capacity(raw.len());
    for (k, r) in raw.into_iter().enumerate() {
        let eps = match opts.eps {
            EpsMode::PerStep => r.h.clone(),
            EpsMode::RunMax => run_max.clone(),
        };
        let (kk, cc) = compute_k_c(t, &r.h)?;
        let stage_bound: Vec<f64> = kk
            .iter()
            .zip(&cc)
            .map(|(ki, ci)| ki * r.y_err + r.dt * ci)
            .collect();
        let stage_ok = r
            .stage_err
            .iter()
            .zip(&stage_bound)
            .map(|(e, b)| *e <= b + opts.slack)
            .collect();
        let to = compute_theta_omega(t, &eps, &r.h)?;
        let (general, sharp) = growth_bound(r.y_err, r.dt, r.l, to);
        traces.push(TwinTrace {
            step_index: k,
            dt: r.dt,
            l: r.l,
            y_err: r.y_err,
            stage_ok,
            stage_bound,
            stage_err: r.stage_err,
            h: r.h,
            eps,
            step_ok: r.step_err <= general + opts.slack,
            sharp_ok: sharp.map(|b| r.step_err <= b + opts.slack),
            step_err: r.step_err,
            theta: to.theta,
            omega: to.omega,
            growth_bound: general,
            sharp_bound: sharp,
        });
    }
    Ok(TwinReport {
        traces,
        diverged: failure.is_some(),
        failure,
    })
}
