//! `mixdirk`: experiment runner for perturbed DIRK integrations.

mod config;
mod output;
mod runner;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use mixdirk::analysis::{h_monitor, reference_solution};
use mixdirk::integrate::{integrate, RunOptions};
use mixdirk::linalg;
use mixdirk::precision::PrecisionLevel;
use mixdirk::problems::Problem;
use mixdirk::stage::StageStrategy;
use mixdirk::tableau::{validate, ButcherTableau};

use config::PlanSpec;

/// Environment variable that overrides the configured output directory.
const OUTPUT_DIR_ENV: &str = "MIXDIRK_OUTPUT_DIR";

#[derive(Parser)]
#[command(
    name = "mixdirk",
    version,
    about = "Perturbed DIRK integration experiments"
)]
struct Cli {
    /// Worker threads (defaults to the number of cores).
    #[arg(long, short = 'j', global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every cell of an experiment config and write CSV tables.
    Run { config: PathBuf },
    /// Integrate one configuration and print a summary.
    SingleRun(Box<SingleRun>),
    /// Check the algebraic conditions of the built-in tableaus.
    ValidateTableaus {
        /// Additional tableau in JSON form (`name`, `p`, `A`, `b`, `c`).
        #[arg(long)]
        extra: Vec<PathBuf>,
    },
    /// List the model problems.
    ListProblems,
}

#[derive(Args)]
struct SingleRun {
    #[arg(long)]
    problem: String,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    tableau: String,
    #[arg(long)]
    dt: f64,
    /// `exact`, `linearized`, `chop<d>`, `mixed:<high>/<low>x<iters>`, ...
    #[arg(long, default_value = "exact")]
    strategy: String,
    /// `none`, `explicit(k)`, `phi-jacobian(p-1)`, ...
    #[arg(long, default_value = "none")]
    plan: String,
    #[arg(long)]
    final_time: Option<f64>,
    #[arg(long, default_value = "extended")]
    ref_level: String,
    #[arg(long, default_value_t = 10.0)]
    ref_divisor: f64,
    /// Reference tableau; the run's own when omitted.
    #[arg(long)]
    ref_tableau: Option<String>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Skip the reference run and the error report.
    #[arg(long)]
    no_reference: bool,
    /// Write the per-stage h series to this CSV file.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let jobs = cli
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let result = pool.install(|| match cli.command {
        Command::Run { config } => run(&config, jobs),
        Command::SingleRun(args) => single_run(&args),
        Command::ValidateTableaus { extra } => validate_tableaus(&extra),
        Command::ListProblems => list_problems(),
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(config_path: &Path, jobs: usize) -> Result<ExitCode> {
    let started_unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    let start = Instant::now();
    let cfg = config::load(config_path)?
        .resolve()
        .with_context(|| format!("invalid config {}", config_path.display()))?;
    let dir = match std::env::var_os(OUTPUT_DIR_ENV) {
        Some(d) if !d.is_empty() => PathBuf::from(d),
        _ => cfg.outputs.directory.clone(),
    };
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;

    let results = runner::run_study(&cfg)?;
    let files = output::write_tables(&cfg, &results, &dir)?;
    let skipped = runner::twin_skipped(&cfg);
    let diverged = results.outcomes.iter().filter(|o| o.diverged).count();
    let manifest = output::write_manifest(
        &cfg,
        &results,
        &output::ManifestInfo {
            config_path,
            output_dir: &dir,
            jobs,
            started_unix,
            wall_seconds: start.elapsed().as_secs_f64(),
            files: &files,
            twin_skipped: &skipped,
        },
    )?;
    println!(
        "{} cells ({} diverged), {} references, {:.1}s",
        results.cells.len(),
        diverged,
        results.references.len(),
        start.elapsed().as_secs_f64()
    );
    for f in files.iter().chain([&manifest]) {
        println!("wrote {}", f.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn single_run(a: &SingleRun) -> Result<ExitCode> {
    let mut problem = Problem::by_name(&a.problem, a.n)?;
    if let Some(t) = a.final_time {
        problem = problem.with_final_time(t);
    }
    let tableau = ButcherTableau::by_name(&a.tableau)?;
    let strategy: StageStrategy = a.strategy.parse()?;
    let plan = a
        .plan
        .parse::<PlanSpec>()
        .context("--plan")?
        .resolve(&tableau);
    let level = strategy.required_level().unwrap_or(PrecisionLevel::Double);
    let run = integrate(
        &problem,
        &tableau,
        a.dt,
        strategy,
        plan,
        level,
        RunOptions::default(),
    )?;

    println!(
        "problem     {} (n = {}, final time {})",
        problem.name,
        problem.n,
        output::num(problem.final_time)
    );
    println!(
        "method      {} / {} / {} / dt {} ({} steps, {} state)",
        tableau.name,
        strategy,
        plan,
        output::num(a.dt),
        run.steps,
        level
    );
    match (run.diverged, run.diverged_at) {
        (false, _) => println!("status      completed"),
        (true, Some(t)) => println!("status      diverged at t = {}", output::num(t)),
        (true, None) => println!("status      diverged"),
    }
    if let Some(f) = &run.failure {
        println!("failure     {f}");
    }
    if !a.no_reference {
        let ref_tableau = match &a.ref_tableau {
            Some(name) => ButcherTableau::by_name(name)?,
            None => tableau.clone(),
        };
        let ref_level: PrecisionLevel = a.ref_level.parse()?;
        let dt_ref = a.dt / a.ref_divisor;
        let y_ref = reference_solution(
            &problem,
            &ref_tableau,
            dt_ref,
            ref_level,
            a.cache_dir.as_deref(),
        )?;
        let error = if run.diverged {
            f64::INFINITY
        } else {
            linalg::diff_norm_inf(&run.final_state, &y_ref)
        };
        println!(
            "error       {} (reference {} {} dt {})",
            output::num(error),
            ref_tableau.name,
            ref_level,
            output::num(dt_ref)
        );
    }
    let h = h_monitor(&run);
    let per_stage: Vec<String> = h.max_per_stage.iter().map(|v| output::num(*v)).collect();
    println!(
        "max h       {} (per stage: {})",
        output::num(h.max),
        per_stage.join(", ")
    );
    println!("drift       {}", output::num(run.conservation_drift));

    if let Some(path) = &a.csv {
        let mut w = output::writer(path)?;
        let mut head: Vec<&str> = output::KEY_HEADER.to_vec();
        head.extend(["step", "stage", "h_pre", "h"]);
        w.write_record(&head)?;
        let key = [
            problem.name.clone(),
            problem.n.to_string(),
            tableau.name.clone(),
            strategy.to_string(),
            plan.to_string(),
            output::num(a.dt),
        ];
        for (k, (hs, pre)) in run.h.iter().zip(&run.h_pre).enumerate() {
            for (s, (v, vp)) in hs.iter().zip(pre).enumerate() {
                let mut rec = key.to_vec();
                rec.extend([
                    k.to_string(),
                    s.to_string(),
                    output::num(*vp),
                    output::num(*v),
                ]);
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
    }
    Ok(ExitCode::SUCCESS)
}

fn validate_tableaus(extra: &[PathBuf]) -> Result<ExitCode> {
    let mut tableaus = ButcherTableau::builtins();
    for path in extra {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        tableaus.push(
            ButcherTableau::from_json(&text)
                .with_context(|| format!("parsing {}", path.display()))?,
        );
    }
    let mut failed = 0;
    for t in &tableaus {
        let report = validate(t);
        println!("{report}");
        if !report.all_pass() {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} of {} tableaus failed", tableaus.len());
        Ok(ExitCode::from(1))
    } else {
        println!("all {} tableaus pass", tableaus.len());
        Ok(ExitCode::SUCCESS)
    }
}

fn list_problems() -> Result<ExitCode> {
    let entries = [
        ("burgers-a", "inviscid Burgers, u0 = 1/2 + sin(x)/4"),
        ("burgers-b", "inviscid Burgers, u0 = sin(x)"),
        (
            "shallow-water",
            "shallow water in conservative form, h0 = 1 + sin(x)/10, q0 = 0",
        ),
        ("pm-a", "porous medium u_t = (u^3)_xx, u0 = cos(x)/2 + 1/2"),
        ("pm-b", "porous medium u_t = (u^3)_xx, u0 = sin(x)/2"),
    ];
    println!(
        "{:<14} {:<7} {:<18} description",
        "name", "t_final", "domain"
    );
    for (name, about) in entries {
        let p = Problem::by_name(name, 8)?;
        let domain = format!("[{:.4}, {:.4}]", p.domain.0, p.domain.1);
        println!("{name:<14} {:<7} {domain:<18} {about}", p.final_time);
    }
    Ok(ExitCode::SUCCESS)
}
