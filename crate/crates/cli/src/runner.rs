//! Expands a resolved config into cells and runs them on the worker pool.

use std::collections::BTreeMap;
use std::time::Instant;

use anyhow::{anyhow, Result};
use mixdirk::analysis::{reference_solution, twin_integrate, TwinReport};
use mixdirk::corrections::CorrectionPlan;
use mixdirk::integrate::{integrate, RunOptions, RunResult};
use mixdirk::linalg;
use mixdirk::precision::PrecisionLevel;
use mixdirk::problems::Problem;
use mixdirk::stage::StageStrategy;
use mixdirk::tableau::ButcherTableau;
use rayon::prelude::*;

use crate::config::Resolved;

/// The full key of one integration.
#[derive(Clone, Debug, PartialEq)]
pub struct CellKey {
    pub problem: String,
    pub n: usize,
    pub tableau: String,
    pub strategy: String,
    pub plan: String,
    pub dt: f64,
}

impl CellKey {
    pub fn fields(&self) -> [String; 6] {
        [
            self.problem.clone(),
            self.n.to_string(),
            self.tableau.clone(),
            self.strategy.clone(),
            self.plan.clone(),
            crate::output::num(self.dt),
        ]
    }
}

pub struct Cell {
    pub key: CellKey,
    /// Index of the (problem, n, tableau, strategy, plan) series.
    pub series: usize,
    problem: usize,
    tableau: usize,
    strategy: StageStrategy,
    plan: CorrectionPlan,
}

pub struct CellOutcome {
    pub error: f64,
    pub diverged: bool,
    pub diverged_at: Option<f64>,
    pub failure: Option<String>,
    pub steps: usize,
    pub h_max: f64,
    pub conservation_drift: f64,
    pub h: Vec<Vec<f64>>,
    pub h_pre: Vec<Vec<f64>>,
    pub twin: Option<std::result::Result<TwinReport, String>>,
    pub wall_seconds: f64,
}

pub struct ReferenceRecord {
    pub problem: String,
    pub n: usize,
    pub tableau: String,
    pub level: PrecisionLevel,
    pub dt: f64,
    pub wall_seconds: f64,
}

pub struct StudyResults {
    pub cells: Vec<Cell>,
    pub outcomes: Vec<CellOutcome>,
    pub references: Vec<ReferenceRecord>,
}

fn state_level(strategy: &StageStrategy) -> PrecisionLevel {
    strategy.required_level().unwrap_or(PrecisionLevel::Double)
}

fn twin_applies(strategy: &StageStrategy) -> bool {
    !strategy.is_exact() && state_level(strategy) == PrecisionLevel::Double
}

/// Cells in key order: problem, n, tableau, strategy, plan, then dt. Plans
/// that resolve to the same corrections for a tableau run once.
pub fn expand(cfg: &Resolved) -> Result<(Vec<Problem>, Vec<Cell>)> {
    let mut problems = Vec::new();
    let mut cells = Vec::new();
    let mut series = 0;
    for name in &cfg.problems {
        for &n in &cfg.sizes {
            let pi = problems.len();
            problems.push(cfg.problem(name, n)?);
            for (ti, t) in cfg.tableaus.iter().enumerate() {
                for strategy in &cfg.strategies {
                    // Specs such as explicit(1) and explicit(p-1) coincide for p = 2.
                    let mut plans: Vec<CorrectionPlan> = Vec::new();
                    for spec in &cfg.plans {
                        let plan = spec.resolve(t);
                        if plans.contains(&plan) {
                            continue;
                        }
                        plans.push(plan);
                        for &dt in &cfg.dt_list {
                            cells.push(Cell {
                                key: CellKey {
                                    problem: name.clone(),
                                    n,
                                    tableau: t.name.clone(),
                                    strategy: strategy.to_string(),
                                    plan: plan.to_string(),
                                    dt,
                                },
                                series,
                                problem: pi,
                                tableau: ti,
                                strategy: *strategy,
                                plan,
                            });
                        }
                        series += 1;
                    }
                }
            }
        }
    }
    Ok((problems, cells))
}

fn reference_tableau(cfg: &Resolved, own: &ButcherTableau) -> Result<ButcherTableau> {
    match &cfg.reference.tableau {
        Some(name) => Ok(ButcherTableau::by_name(name)?),
        None => Ok(own.clone()),
    }
}

fn run_cell(
    cfg: &Resolved,
    problem: &Problem,
    tableau: &ButcherTableau,
    cell: &Cell,
    reference: &[f64],
) -> CellOutcome {
    let start = Instant::now();
    let dt = cell.key.dt;
    let run = integrate(
        problem,
        tableau,
        dt,
        cell.strategy,
        cell.plan,
        state_level(&cell.strategy),
        RunOptions::default(),
    );
    let mut outcome = match run {
        Ok(run) => from_run(run, reference),
        // A solver breakdown inside the run ends the cell like a divergence.
        Err(e) => CellOutcome {
            error: f64::INFINITY,
            diverged: true,
            diverged_at: None,
            failure: Some(e.to_string()),
            steps: 0,
            h_max: f64::NAN,
            conservation_drift: f64::NAN,
            h: Vec::new(),
            h_pre: Vec::new(),
            twin: None,
            wall_seconds: 0.0,
        },
    };
    if cfg.outputs.twin && twin_applies(&cell.strategy) {
        outcome.twin = Some(
            twin_integrate(problem, tableau, dt, cell.strategy, cell.plan, &cfg.twin)
                .map_err(|e| e.to_string()),
        );
    }
    outcome.wall_seconds = start.elapsed().as_secs_f64();
    outcome
}

fn from_run(run: RunResult, reference: &[f64]) -> CellOutcome {
    let error = if run.diverged {
        f64::INFINITY
    } else {
        linalg::diff_norm_inf(&run.final_state, reference)
    };
    CellOutcome {
        error,
        diverged: run.diverged,
        diverged_at: run.diverged_at,
        h_max: run.h_max(),
        failure: run.failure,
        steps: run.h.len(),
        conservation_drift: run.conservation_drift,
        h: run.h,
        h_pre: run.h_pre,
        twin: None,
        wall_seconds: 0.0,
    }
}

/// Runs every cell. Must be called inside the worker pool; results come back
/// in cell order regardless of scheduling.
pub fn run_study(cfg: &Resolved) -> Result<StudyResults> {
    let (problems, cells) = expand(cfg)?;

    // One reference per (problem, n, reference tableau).
    let mut wanted: BTreeMap<(usize, String), ButcherTableau> = BTreeMap::new();
    for cell in &cells {
        let t = reference_tableau(cfg, &cfg.tableaus[cell.tableau])?;
        wanted.entry((cell.problem, t.name.clone())).or_insert(t);
    }
    let dt_ref = cfg.reference_dt();
    let cache = cfg.reference.cache_dir.as_deref();
    let computed = wanted
        .into_par_iter()
        .map(|((pi, name), t)| {
            let start = Instant::now();
            let p = &problems[pi];
            let y = reference_solution(p, &t, dt_ref, cfg.reference.level, cache).map_err(|e| {
                anyhow!(
                    "reference run for {} n={} with {name} failed: {e}",
                    p.name,
                    p.n
                )
            })?;
            let record = ReferenceRecord {
                problem: p.name.clone(),
                n: p.n,
                tableau: name.clone(),
                level: cfg.reference.level,
                dt: dt_ref,
                wall_seconds: start.elapsed().as_secs_f64(),
            };
            Ok(((pi, name), (y, record)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut references = Vec::new();
    let mut states = BTreeMap::new();
    for (key, (y, record)) in computed {
        states.insert(key, y);
        references.push(record);
    }

    let outcomes = cells
        .par_iter()
        .map(|cell| -> Result<CellOutcome> {
            let t = &cfg.tableaus[cell.tableau];
            let ref_name = reference_tableau(cfg, t)?.name;
            let y_ref = &states[&(cell.problem, ref_name)];
            Ok(run_cell(cfg, &problems[cell.problem], t, cell, y_ref))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(StudyResults {
        cells,
        outcomes,
        references,
    })
}

/// Cells whose strategy has no double-precision twin.
pub fn twin_skipped(cfg: &Resolved) -> Vec<String> {
    if !cfg.outputs.twin {
        return Vec::new();
    }
    cfg.strategies
        .iter()
        .filter(|s| !twin_applies(s))
        .map(|s| s.to_string())
        .collect()
}
