//! Final-time error tables against a fine reference run.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corrections::CorrectionPlan;
use crate::error::{Error, Result};
use crate::integrate::{integrate, RunOptions};
use crate::linalg;
use crate::precision::PrecisionLevel;
use crate::problems::Problem;
use crate::stage::StageStrategy;
use crate::tableau::ButcherTableau;

/// Step sizes of the standard sweep, halving from 0.05.
pub const DEFAULT_DT_SWEEP: [f64; 6] = [0.05, 0.025, 0.0125, 0.00625, 0.003125, 0.0015625];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSpec {
    pub level: PrecisionLevel,
    /// The reference step is the smallest study step divided by this.
    pub dt_divisor: f64,
    /// Tableau of the reference run; the study's own tableau when `None`.
    pub tableau: Option<String>,
    pub cache_dir: Option<PathBuf>,
}

impl Default for ReferenceSpec {
    fn default() -> Self {
        Self {
            level: PrecisionLevel::Extended,
            dt_divisor: 10.0,
            tableau: None,
            cache_dir: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CachedReference {
    problem: String,
    n: usize,
    final_time: f64,
    dt_ref: f64,
    tableau: String,
    level: PrecisionLevel,
    state: Vec<f64>,
}

fn cache_path(
    dir: &Path,
    p: &Problem,
    t: &ButcherTableau,
    dt_ref: f64,
    level: PrecisionLevel,
) -> PathBuf {
    dir.join(format!(
        "ref-{}-n{}-T{:e}-dt{:e}-{}-{}.json",
        p.name, p.n, p.final_time, dt_ref, t.name, level
    ))
}

/// Exact Newton run at step `dt_ref`, read from or written to `cache_dir`
/// when given.
pub fn reference_solution(
    p: &Problem,
    t: &ButcherTableau,
    dt_ref: f64,
    level: PrecisionLevel,
    cache_dir: Option<&Path>,
) -> Result<Vec<f64>> {
    let path = cache_dir.map(|d| cache_path(d, p, t, dt_ref, level));
    if let Some(path) = &path {
        if let Ok(text) = fs::read_to_string(path) {
            if let Ok(c) = serde_json::from_str::<CachedReference>(&text) {
                if c.problem == p.name
                    && c.n == p.n
                    && c.final_time == p.final_time
                    && c.dt_ref == dt_ref
                    && c.tableau == t.name
                    && c.level == level
                    && c.state.len() == p.dim()
                {
                    return Ok(c.state);
                }
            }
        }
    }
    let run = integrate(
        p,
        t,
        dt_ref,
        StageStrategy::ExactNewton,
        CorrectionPlan::none(),
        level,
        RunOptions::reference(),
    )?;
    if run.diverged {
        return Err(Error::ReferenceDiverged(run.time_reached));
    }
    if let Some(path) = &path {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let cached = CachedReference {
            problem: p.name.clone(),
            n: p.n,
            final_time: p.final_time,
            dt_ref,
            tableau: t.name.clone(),
            level,
            state: run.final_state.clone(),
        };
        let text = serde_json::to_string(&cached).map_err(|e| Error::Io(e.to_string()))?;
        // Write then rename so concurrent readers never see a partial file.
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, text)?;
        fs::rename(&tmp, path)?;
    }
    Ok(run.final_state)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub dt: f64,
    /// Final-time max-norm error; infinite for diverged runs.
    pub error: f64,
    pub diverged: bool,
    pub diverged_at: Option<f64>,
    pub h_max: f64,
    pub conservation_drift: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub problem: String,
    pub n: usize,
    pub tableau: String,
    pub strategy: String,
    pub plan: String,
    pub rows: Vec<ConvergenceRow>,
    /// `slopes[i]` is the fitted order between rows `i` and `i + 1`.
    pub slopes: Vec<Option<f64>>,
}

impl ConvergenceTable {
    /// Median of the last three defined pairwise slopes.
    pub fn order(&self) -> Option<f64> {
        let defined: Vec<f64> = self.slopes.iter().flatten().copied().collect();
        let tail = &defined[defined.len().saturating_sub(3)..];
        median(tail)
    }

    /// Slope fitted between rows `i` and `j` directly.
    pub fn slope_between(&self, i: usize, j: usize) -> Option<f64> {
        slope(&self.rows[i], &self.rows[j])
    }

    pub fn any_diverged(&self) -> bool {
        self.rows.iter().any(|r| r.diverged)
    }
}

fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let m = s.len() / 2;
    Some(if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    })
}

fn slope(a: &ConvergenceRow, b: &ConvergenceRow) -> Option<f64> {
    let ok = |r: &ConvergenceRow| !r.diverged && r.error.is_finite() && r.error > 0.0;
    if !(ok(a) && ok(b)) {
        return None;
    }
    Some((a.error / b.error).ln() / (a.dt / b.dt).ln())
}

pub fn pairwise_slopes(rows: &[ConvergenceRow]) -> Vec<Option<f64>> {
    rows.windows(2).map(|w| slope(&w[0], &w[1])).collect()
}

fn check_dt_list(dt_list: &[f64]) -> Result<()> {
    if dt_list.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "convergence study needs at least 3 step sizes, got {}",
            dt_list.len()
        )));
    }
    if dt_list.iter().any(|d| !(*d > 0.0)) || dt_list.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::InvalidArgument(
            "step sizes must be positive and strictly decreasing".into(),
        ));
    }
    Ok(())
}

/// Runs every step size against a given reference state. Cells run in
/// parallel; each cell is sequential so results do not depend on scheduling.
pub fn convergence_study_with(
    p: &Problem,
    t: &ButcherTableau,
    strategy: StageStrategy,
    plan: CorrectionPlan,
    dt_list: &[f64],
    reference: &[f64],
) -> Result<ConvergenceTable> {
    check_dt_list(dt_list)?;
    if reference.len() != p.dim() {
        return Err(Error::Dimension {
            expected: p.dim(),
            got: reference.len(),
        });
    }
    let level = strategy.required_level().unwrap_or(PrecisionLevel::Double);
    let rows = dt_list
        .par_iter()
        .map(|&dt| {
            let run = integrate(p, t, dt, strategy, plan, level, RunOptions::default())?;
            let error = if run.diverged {
                f64::INFINITY
            } else {
                linalg::diff_norm_inf(&run.final_state, reference)
            };
            Ok(ConvergenceRow {
                dt,
                error,
                diverged: run.diverged,
                diverged_at: run.diverged_at,
                h_max: run.h_max(),
                conservation_drift: run.conservation_drift,
                wall_seconds: run.wall_seconds,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConvergenceTable {
        problem: p.name.clone(),
        n: p.n,
        tableau: t.name.clone(),
        strategy: strategy.to_string(),
        plan: plan.to_string(),
        slopes: pairwise_slopes(&rows),
        rows,
    })
}

pub fn convergence_study(
    p: &Problem,
    t: &ButcherTableau,
    strategy: StageStrategy,
    plan: CorrectionPlan,
    dt_list: &[f64],
    reference: &ReferenceSpec,
) -> Result<ConvergenceTable> {
    check_dt_list(dt_list)?;
    let ref_tableau = match &reference.tableau {
        Some(name) => ButcherTableau::by_name(name)?,
        None => t.clone(),
    };
    let dt_min = dt_list[dt_list.len() - 1];
    let y_ref = reference_solution(
        p,
        &ref_tableau,
        dt_min / reference.dt_divisor,
        reference.level,
        reference.cache_dir.as_deref(),
    )?;
    convergence_study_with(p, t, strategy, plan, dt_list, &y_ref)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{porous_medium, scalar, PorousVariant};
    use crate::tableau::make_sdirk2;

    fn row(dt: f64, error: f64) -> ConvergenceRow {
        ConvergenceRow {
            dt,
            error,
            diverged: !error.is_finite(),
            diverged_at: None,
            h_max: 0.0,
            conservation_drift: 0.0,
            wall_seconds: 0.0,
        }
    }

    #[test]
    fn slopes_and_order() {
        let rows: Vec<_> = [0.1, 0.05, 0.025, 0.0125, 0.00625]
            .iter()
            .map(|&dt| row(dt, 3.0 * dt * dt))
            .collect();
        let s = pairwise_slopes(&rows);
        assert!(s.iter().all(|v| (v.unwrap() - 2.0).abs() < 1e-12));
        let with_div = vec![row(0.1, f64::INFINITY), row(0.05, 1e-3), row(0.025, 2.5e-4)];
        let s = pairwise_slopes(&with_div);
        assert_eq!(s[0], None);
        assert!((s[1].unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn rejects_bad_dt_lists() {
        assert!(check_dt_list(&[0.1, 0.05]).is_err());
        assert!(check_dt_list(&[0.1, 0.1, 0.05]).is_err());
        assert!(check_dt_list(&[0.1, 0.05, 0.025]).is_ok());
    }

    #[test]
    fn midpoint_order_on_scalar() {
        let p = scalar(-2.0, 1.0, 1.0);
        let t = make_sdirk2();
        let table = convergence_study(
            &p,
            &t,
            StageStrategy::ExactNewton,
            CorrectionPlan::none(),
            &[0.1, 0.05, 0.025, 0.0125],
            &ReferenceSpec::default(),
        )
        .unwrap();
        assert!((table.order().unwrap() - 2.0).abs() < 0.05);
        // Against the exact solution too.
        let exact = convergence_study_with(
            &p,
            &t,
            StageStrategy::ExactNewton,
            CorrectionPlan::none(),
            &[0.1, 0.05, 0.025],
            &[(-2.0f64).exp()],
        )
        .unwrap();
        assert!((exact.order().unwrap() - 2.0).abs() < 0.05);
    }

    #[test]
    fn reference_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = porous_medium(8, PorousVariant::A)
            .unwrap()
            .with_final_time(0.05);
        let t = make_sdirk2();
        let a = reference_solution(&p, &t, 0.01, PrecisionLevel::Double, Some(dir.path())).unwrap();
        let files: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(files.len(), 1);
        let b = reference_solution(&p, &t, 0.01, PrecisionLevel::Double, Some(dir.path())).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn porous_medium_self_convergence() {
        // Second-order self-convergence of exact SDIRK2 from dt = 1e-2.
        let p = porous_medium(32, PorousVariant::A)
            .unwrap()
            .with_final_time(0.2);
        let t = make_sdirk2();
        let table = convergence_study(
            &p,
            &t,
            StageStrategy::ExactNewton,
            CorrectionPlan::none(),
            &[1e-2, 5e-3, 2.5e-3, 1.25e-3],
            &ReferenceSpec {
                level: PrecisionLevel::Double,
                ..ReferenceSpec::default()
            },
        )
        .unwrap();
        let order = table.order().unwrap();
        assert!((order - 2.0).abs() < 0.3, "{order} {:?}", table.rows);
    }
}
