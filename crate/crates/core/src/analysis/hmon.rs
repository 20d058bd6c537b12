//! Summaries of the recorded perturbation sizes of a run.

use serde::{Deserialize, Serialize};

use crate::integrate::RunResult;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HSeries {
    /// Per step, per stage `||h||_inf`.
    pub per_step: Vec<Vec<f64>>,
    pub max_per_stage: Vec<f64>,
    pub median_per_stage: Vec<f64>,
    pub max: f64,
}

impl HSeries {
    /// `(step, stage, h)` triples in step order.
    pub fn rows(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.per_step
            .iter()
            .enumerate()
            .flat_map(|(k, s)| s.iter().enumerate().map(move |(i, h)| (k, i, *h)))
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

pub fn h_monitor(run: &RunResult) -> HSeries {
    let stages = run.h.iter().map(Vec::len).max().unwrap_or(0);
    let column =
        |i: usize| -> Vec<f64> { run.h.iter().filter_map(|s| s.get(i).copied()).collect() };
    let max_per_stage: Vec<f64> = (0..stages)
        .map(|i| column(i).into_iter().fold(0.0, f64::max))
        .collect();
    let median_per_stage = (0..stages).map(|i| median(column(i))).collect();
    HSeries {
        per_step: run.h.clone(),
        max: max_per_stage.iter().copied().fold(0.0, f64::max),
        max_per_stage,
        median_per_stage,
    }
}
