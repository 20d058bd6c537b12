//! CSV tables and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mixdirk::analysis::{pairwise_slopes, ConvergenceRow, ConvergenceTable};
use serde_json::json;

use crate::config::Resolved;
use crate::runner::{CellOutcome, StudyResults};

pub const KEY_HEADER: [&str; 6] = ["problem", "n", "tableau", "strategy", "plan", "dt"];

/// Shortest round-trip form; infinities as `inf`.
pub fn num(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{x:e}")
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

fn flag(b: bool) -> String {
    b.to_string()
}

pub fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .with_context(|| format!("creating {}", path.display()))
}

fn header(extra: &[&str]) -> Vec<String> {
    KEY_HEADER
        .iter()
        .chain(extra)
        .map(|s| s.to_string())
        .collect()
}

/// Groups of consecutive cells that share (problem, n).
fn blocks(results: &StudyResults) -> Vec<(String, usize, std::ops::Range<usize>)> {
    let mut out: Vec<(String, usize, std::ops::Range<usize>)> = Vec::new();
    for (i, c) in results.cells.iter().enumerate() {
        match out.last_mut() {
            Some((p, n, r)) if *p == c.key.problem && *n == c.key.n => r.end = i + 1,
            _ => out.push((c.key.problem.clone(), c.key.n, i..i + 1)),
        }
    }
    out
}

fn row(o: &CellOutcome, dt: f64) -> ConvergenceRow {
    ConvergenceRow {
        dt,
        error: o.error,
        diverged: o.diverged,
        diverged_at: o.diverged_at,
        h_max: o.h_max,
        conservation_drift: o.conservation_drift,
        wall_seconds: 0.0,
    }
}

/// Convergence tables per series, in cell order.
pub fn tables(results: &StudyResults) -> Vec<(usize, ConvergenceTable)> {
    let mut out: Vec<(usize, ConvergenceTable)> = Vec::new();
    for (i, (c, o)) in results.cells.iter().zip(&results.outcomes).enumerate() {
        match out.last_mut() {
            Some((_, t)) if results.cells[i - 1].series == c.series => {
                t.rows.push(row(o, c.key.dt))
            }
            _ => out.push((
                i,
                ConvergenceTable {
                    problem: c.key.problem.clone(),
                    n: c.key.n,
                    tableau: c.key.tableau.clone(),
                    strategy: c.key.strategy.clone(),
                    plan: c.key.plan.clone(),
                    rows: vec![row(o, c.key.dt)],
                    slopes: Vec::new(),
                },
            )),
        }
    }
    for (_, t) in &mut out {
        t.slopes = pairwise_slopes(&t.rows);
    }
    out
}

/// Writes every table for the study and returns the file names.
pub fn write_tables(cfg: &Resolved, results: &StudyResults, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let tables = tables(results);
    for (problem, n, range) in blocks(results) {
        let stem = format!("{problem}-n{n}");

        let path = dir.join(format!("{stem}-convergence.csv"));
        let mut w = writer(&path)?;
        w.write_record(header(&[
            "error",
            "diverged",
            "diverged_at",
            "failure",
            "steps",
            "h_max",
            "conservation_drift",
            "slope",
        ]))?;
        for (start, t) in tables.iter().filter(|(s, _)| range.contains(s)) {
            for (j, r) in t.rows.iter().enumerate() {
                let cell = &results.cells[start + j];
                let o = &results.outcomes[start + j];
                let mut rec = cell.key.fields().to_vec();
                rec.extend([
                    num(r.error),
                    flag(r.diverged),
                    opt(r.diverged_at),
                    o.failure.clone().unwrap_or_default(),
                    o.steps.to_string(),
                    num(r.h_max),
                    num(r.conservation_drift),
                    opt(t.slopes.get(j).copied().flatten()),
                ]);
                w.write_record(rec)?;
            }
        }
        w.flush()?;
        files.push(path);

        let path = dir.join(format!("{stem}-orders.csv"));
        let mut w = writer(&path)?;
        w.write_record([
            "problem",
            "n",
            "tableau",
            "strategy",
            "plan",
            "order",
            "diverged_cells",
        ])?;
        for (_, t) in tables.iter().filter(|(s, _)| range.contains(s)) {
            w.write_record([
                t.problem.clone(),
                t.n.to_string(),
                t.tableau.clone(),
                t.strategy.clone(),
                t.plan.clone(),
                opt(t.order()),
                t.rows.iter().filter(|r| r.diverged).count().to_string(),
            ])?;
        }
        w.flush()?;
        files.push(path);

        if cfg.outputs.h_series {
            let path = dir.join(format!("{stem}-h-series.csv"));
            let mut w = writer(&path)?;
            w.write_record(header(&["step", "stage", "h_pre", "h"]))?;
            for i in range.clone() {
                let (cell, o) = (&results.cells[i], &results.outcomes[i]);
                let key = cell.key.fields();
                for (k, (hs, pre)) in o.h.iter().zip(&o.h_pre).enumerate() {
                    for (s, (h, hp)) in hs.iter().zip(pre).enumerate() {
                        let mut rec = key.to_vec();
                        rec.extend([k.to_string(), s.to_string(), num(*hp), num(*h)]);
                        w.write_record(rec)?;
                    }
                }
            }
            w.flush()?;
            files.push(path);
        }

        if cfg.outputs.twin {
            let path = dir.join(format!("{stem}-twin.csv"));
            let mut w = writer(&path)?;
            w.write_record(header(&[
                "step",
                "stage",
                "l",
                "y_err",
                "stage_err",
                "h",
                "eps",
                "stage_bound",
                "stage_ok",
                "step_err",
                "theta",
                "omega",
                "growth_bound",
                "step_ok",
                "sharp_bound",
                "sharp_ok",
            ]))?;
            for i in range.clone() {
                let Some(Ok(report)) = &results.outcomes[i].twin else {
                    continue;
                };
                let key = results.cells[i].key.fields();
                for tr in &report.traces {
                    for s in 0..tr.stage_err.len() {
                        let mut rec = key.to_vec();
                        rec.extend([
                            tr.step_index.to_string(),
                            s.to_string(),
                            num(tr.l),
                            num(tr.y_err),
                            num(tr.stage_err[s]),
                            num(tr.h[s]),
                            num(tr.eps[s]),
                            num(tr.stage_bound[s]),
                            flag(tr.stage_ok[s]),
                            num(tr.step_err),
                            num(tr.theta),
                            num(tr.omega),
                            num(tr.growth_bound),
                            flag(tr.step_ok),
                            opt(tr.sharp_bound),
                            tr.sharp_ok.map(flag).unwrap_or_default(),
                        ]);
                        w.write_record(rec)?;
                    }
                }
            }
            w.flush()?;
            files.push(path);
        }
    }
    Ok(files)
}

pub struct ManifestInfo<'a> {
    pub config_path: &'a Path,
    pub output_dir: &'a Path,
    pub jobs: usize,
    pub started_unix: u64,
    pub wall_seconds: f64,
    pub files: &'a [PathBuf],
    pub twin_skipped: &'a [String],
}

pub fn write_manifest(
    cfg: &Resolved,
    results: &StudyResults,
    info: &ManifestInfo<'_>,
) -> Result<PathBuf> {
    let name = |p: &PathBuf| {
        p.file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    };
    let cells: Vec<_> = results
        .cells
        .iter()
        .zip(&results.outcomes)
        .map(|(c, o)| {
            json!({
                "problem": c.key.problem,
                "n": c.key.n,
                "tableau": c.key.tableau,
                "strategy": c.key.strategy,
                "plan": c.key.plan,
                "dt": c.key.dt,
                "diverged": o.diverged,
                "failure": o.failure,
                "twin_failure": match &o.twin {
                    Some(Err(e)) => Some(e.clone()),
                    _ => None,
                },
                "wall_seconds": o.wall_seconds,
            })
        })
        .collect();
    let references: Vec<_> = results
        .references
        .iter()
        .map(|r| {
            json!({
                "problem": r.problem,
                "n": r.n,
                "tableau": r.tableau,
                "level": r.level,
                "dt": r.dt,
                "wall_seconds": r.wall_seconds,
            })
        })
        .collect();
    let manifest = json!({
        "tool": "mixdirk",
        "version": env!("CARGO_PKG_VERSION"),
        "library_version": mixdirk::VERSION,
        "config_file": info.config_path.display().to_string(),
        "config": cfg.to_json(),
        "output_dir": info.output_dir.display().to_string(),
        "jobs": info.jobs,
        "started_unix": info.started_unix,
        "wall_seconds": info.wall_seconds,
        "references": references,
        "cells": cells,
        "twin_skipped_strategies": info.twin_skipped,
        "files": info.files.iter().map(name).collect::<Vec<_>>(),
    });
    let path = info.output_dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}
