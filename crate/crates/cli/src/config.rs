//! Experiment configuration files.
//!
//! A config is a TOML document. Every list-valued key under `[problem]` and
//! `[method]` is a sweep; the cross product of all sweeps is the cell set.
//! A single value may be given wherever a list is accepted.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use mixdirk::analysis::{EpsMode, TwinMode, TwinOptions};
use mixdirk::corrections::{CorrectionKind, CorrectionPlan};
use mixdirk::precision::PrecisionLevel;
use mixdirk::problems::Problem;
use mixdirk::stage::StageStrategy;
use mixdirk::tableau::ButcherTableau;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    fn items(&self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }

    /// Field path of item `i`: `base` for a scalar, `base[i]` for a list.
    fn path(&self, base: &str, i: usize) -> String {
        match self {
            OneOrMany::One(_) => base.to_string(),
            OneOrMany::Many(_) => format!("{base}[{i}]"),
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    /// Recorded in the manifest; the runner itself draws no random numbers.
    #[serde(default)]
    pub seed: u64,
    pub problem: ProblemSection,
    pub method: MethodSection,
    #[serde(default)]
    pub reference: ReferenceSection,
    #[serde(default)]
    pub outputs: OutputSection,
    #[serde(default)]
    pub twin: TwinSection,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub name: OneOrMany<String>,
    pub n: OneOrMany<usize>,
    /// Overrides the problem's default final time.
    #[serde(default)]
    pub final_time: Option<f64>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSection {
    pub tableau: OneOrMany<String>,
    pub strategy: OneOrMany<String>,
    #[serde(default = "default_plan")]
    pub plan: OneOrMany<String>,
    pub dt_list: Vec<f64>,
}

fn default_plan() -> OneOrMany<String> {
    OneOrMany::One("none".into())
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSection {
    #[serde(default = "default_level")]
    pub level: String,
    #[serde(default = "default_divisor")]
    pub dt_divisor: f64,
    #[serde(default)]
    pub tableau: Option<String>,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
}

fn default_level() -> String {
    "extended".into()
}

fn default_divisor() -> f64 {
    10.0
}

impl Default for ReferenceSection {
    fn default() -> Self {
        Self {
            level: default_level(),
            dt_divisor: default_divisor(),
            tableau: None,
            cache_dir: None,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_directory")]
    pub directory: PathBuf,
    #[serde(default = "default_format")]
    pub format: String,
    #[serde(default = "yes")]
    pub h_series: bool,
    #[serde(default)]
    pub twin: bool,
}

fn default_directory() -> PathBuf {
    PathBuf::from("output")
}

fn default_format() -> String {
    "csv".into()
}

fn yes() -> bool {
    true
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            directory: default_directory(),
            format: default_format(),
            h_series: true,
            twin: false,
        }
    }
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TwinSection {
    #[serde(default)]
    pub mode: TwinMode,
    #[serde(default)]
    pub eps: EpsMode,
}

/// Number of corrections, possibly tied to the tableau's order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlanCount {
    Fixed(usize),
    OrderMinusOne,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlanSpec {
    pub kind: CorrectionKind,
    pub count: PlanCount,
}

impl PlanSpec {
    pub fn resolve(&self, t: &ButcherTableau) -> CorrectionPlan {
        let count = match self.count {
            PlanCount::Fixed(k) => k,
            PlanCount::OrderMinusOne => t.p.saturating_sub(1),
        };
        if self.kind == CorrectionKind::None || count == 0 {
            CorrectionPlan::none()
        } else {
            CorrectionPlan::new(self.kind, count)
        }
    }
}

impl fmt::Display for PlanSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.kind, self.count) {
            (CorrectionKind::None, _) | (_, PlanCount::Fixed(0)) => f.write_str("none"),
            (k, PlanCount::Fixed(c)) => write!(f, "{k}({c})"),
            (k, PlanCount::OrderMinusOne) => write!(f, "{k}(p-1)"),
        }
    }
}

/// `none`, `explicit`, `explicit(2)`, `phi-jacobian(p-1)`, ...
impl FromStr for PlanSpec {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (kind, count) = match s.split_once('(') {
            Some((k, rest)) => {
                let inner = rest
                    .strip_suffix(')')
                    .ok_or_else(|| anyhow!("unbalanced parentheses in plan '{s}'"))?
                    .trim();
                let count = if inner.replace(' ', "") == "p-1" {
                    PlanCount::OrderMinusOne
                } else {
                    PlanCount::Fixed(
                        inner
                            .parse()
                            .map_err(|_| anyhow!("bad correction count '{inner}' in plan '{s}'"))?,
                    )
                };
                (k.trim(), count)
            }
            None => (s, PlanCount::Fixed(1)),
        };
        let kind: CorrectionKind = kind.parse()?;
        Ok(PlanSpec { kind, count })
    }
}

/// A config with every name resolved and every invariant checked.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub name: Option<String>,
    pub seed: u64,
    pub problems: Vec<String>,
    pub sizes: Vec<usize>,
    pub final_time: Option<f64>,
    pub tableaus: Vec<ButcherTableau>,
    pub strategies: Vec<StageStrategy>,
    pub plans: Vec<PlanSpec>,
    pub dt_list: Vec<f64>,
    pub reference: ReferenceResolved,
    pub outputs: OutputSection,
    pub twin: TwinOptions,
}

#[derive(Clone, Debug, Serialize)]
pub struct ReferenceResolved {
    pub level: PrecisionLevel,
    pub dt_divisor: f64,
    pub tableau: Option<String>,
    pub cache_dir: Option<PathBuf>,
}

impl Resolved {
    pub fn problem(&self, name: &str, n: usize) -> Result<Problem> {
        let p = Problem::by_name(name, n)?;
        Ok(match self.final_time {
            Some(t) => p.with_final_time(t),
            None => p,
        })
    }

    pub fn reference_dt(&self) -> f64 {
        self.dt_list[self.dt_list.len() - 1] / self.reference.dt_divisor
    }

    /// Canonical form of the resolved config, for the manifest.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "name": self.name,
            "seed": self.seed,
            "problem": {
                "name": self.problems,
                "n": self.sizes,
                "final_time": self.final_time,
            },
            "method": {
                "tableau": self.tableaus.iter().map(|t| &t.name).collect::<Vec<_>>(),
                "strategy": self.strategies.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
                "plan": self.plans.iter().map(|p| p.to_string()).collect::<Vec<_>>(),
                "dt_list": self.dt_list,
            },
            "reference": self.reference,
            "outputs": self.outputs,
            "twin": self.twin,
        })
    }
}

pub fn parse(text: &str) -> Result<ExperimentConfig> {
    let de = toml::Deserializer::new(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let msg = inner.message().trim().to_string();
        match (path.as_str(), inner.span()) {
            (".", _) | ("", _) => anyhow!("{msg}"),
            (p, _) => anyhow!("{p}: {msg}"),
        }
    })
}

pub fn load(path: &Path) -> Result<ExperimentConfig> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse(&text).with_context(|| format!("invalid config {}", path.display()))
}

fn each<T: Clone, U>(
    field: &OneOrMany<T>,
    base: &str,
    mut f: impl FnMut(&T) -> Result<U>,
) -> Result<Vec<U>> {
    let items = field.items();
    if items.is_empty() {
        bail!("{base}: must not be empty");
    }
    items
        .iter()
        .enumerate()
        .map(|(i, v)| f(v).map_err(|e| anyhow!("{}: {e:#}", field.path(base, i))))
        .collect()
}

impl ExperimentConfig {
    pub fn resolve(&self) -> Result<Resolved> {
        let problems = each(&self.problem.name, "problem.name", |name| {
            Problem::by_name(name, 16)?;
            Ok(name.clone())
        })?;
        let sizes = each(&self.problem.n, "problem.n", |&n| Ok(n))?;
        if let Some(t) = self.problem.final_time {
            if !(t > 0.0 && t.is_finite()) {
                bail!("problem.final_time: must be positive, got {t}");
            }
        }
        for name in &problems {
            for (i, &n) in self.problem.n.items().iter().enumerate() {
                Problem::by_name(name, n)
                    .map_err(|e| anyhow!("{}: {e}", self.problem.n.path("problem.n", i)))?;
            }
        }
        let tableaus = each(&self.method.tableau, "method.tableau", |name| {
            Ok(ButcherTableau::by_name(name)?)
        })?;
        let strategies = each(&self.method.strategy, "method.strategy", |s| {
            Ok(s.parse::<StageStrategy>()?)
        })?;
        let plans = each(&self.method.plan, "method.plan", |s| s.parse::<PlanSpec>())?;

        let dt_list = self.method.dt_list.clone();
        if dt_list.is_empty() {
            bail!("method.dt_list: must contain at least one step size");
        }
        for (i, dt) in dt_list.iter().enumerate() {
            if !(*dt > 0.0 && dt.is_finite()) {
                bail!("method.dt_list[{i}]: step sizes must be positive, got {dt}");
            }
        }
        if let Some(i) = dt_list.windows(2).position(|w| w[1] >= w[0]) {
            bail!(
                "method.dt_list[{}]: step sizes must be strictly decreasing ({} after {})",
                i + 1,
                dt_list[i + 1],
                dt_list[i]
            );
        }

        let level: PrecisionLevel = self
            .reference
            .level
            .parse()
            .map_err(|e| anyhow!("reference.level: {e}"))?;
        let divisor = self.reference.dt_divisor;
        if !(divisor >= 1.0 && divisor.is_finite()) {
            bail!("reference.dt_divisor: must be at least 1, got {divisor}");
        }
        if let Some(name) = &self.reference.tableau {
            ButcherTableau::by_name(name).map_err(|e| anyhow!("reference.tableau: {e}"))?;
        }
        if self.outputs.format != "csv" {
            bail!(
                "outputs.format: only \"csv\" is supported, got {:?}",
                self.outputs.format
            );
        }

        Ok(Resolved {
            name: self.name.clone(),
            seed: self.seed,
            problems,
            sizes,
            final_time: self.problem.final_time,
            tableaus,
            strategies,
            plans,
            dt_list,
            reference: ReferenceResolved {
                level,
                dt_divisor: divisor,
                tableau: self.reference.tableau.clone(),
                cache_dir: self.reference.cache_dir.clone(),
            },
            outputs: self.outputs.clone(),
            twin: TwinOptions {
                mode: self.twin.mode,
                eps: self.twin.eps,
                ..TwinOptions::default()
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [problem]
        name = "pm-a"
        n = [16, 32]

        [method]
        tableau = ["sdirk2", "sdirk3"]
        strategy = "chop4"
        plan = ["none", "explicit(p-1)"]
        dt_list = [0.02, 0.01, 0.005]
    "#;

    #[test]
    fn minimal_config_resolves() {
        let r = parse(MINIMAL).unwrap().resolve().unwrap();
        assert_eq!(r.sizes, vec![16, 32]);
        assert_eq!(r.tableaus.len(), 2);
        assert_eq!(r.reference.level, PrecisionLevel::Extended);
        assert!(r.outputs.h_series && !r.outputs.twin);
        let plan = r.plans[1].resolve(&r.tableaus[1]);
        assert_eq!(plan.to_string(), "explicit(2)");
    }

    #[test]
    fn plan_syntax() {
        let p: PlanSpec = "phi-jacobian(p-1)".parse().unwrap();
        assert_eq!(p.count, PlanCount::OrderMinusOne);
        assert_eq!(p.to_string(), "phi-jacobian(p-1)");
        let p: PlanSpec = "explicit".parse().unwrap();
        assert_eq!(p.count, PlanCount::Fixed(1));
        assert_eq!("none".parse::<PlanSpec>().unwrap().to_string(), "none");
        assert!("explicit(two)".parse::<PlanSpec>().is_err());
        assert!("implicit(1)".parse::<PlanSpec>().is_err());
    }

    #[test]
    fn errors_name_the_field() {
        let err = |text: &str| format!("{:#}", parse(text).and_then(|c| c.resolve()).unwrap_err());
        let e = err(&MINIMAL.replace("[0.02, 0.01, 0.005]", "[]"));
        assert!(e.contains("method.dt_list"), "{e}");
        let e = err(&MINIMAL.replace("[0.02, 0.01, 0.005]", "[0.01, 0.02]"));
        assert!(e.contains("method.dt_list[1]"), "{e}");
        let e = err(&MINIMAL.replace("\"sdirk3\"", "\"sdirk5\""));
        assert!(e.contains("method.tableau[1]"), "{e}");
        let e = err(&MINIMAL.replace("n = [16, 32]", "n = [16, \"x\"]"));
        assert!(e.contains("problem.n"), "{e}");
        let e = err(&MINIMAL.replace("strategy = \"chop4\"", "strategy = \"chop\""));
        assert!(e.contains("method.strategy"), "{e}");
        let e = err(&format!("{MINIMAL}\n[outputs]\ndirectroy = \"x\"\n"));
        assert!(e.contains("outputs"), "{e}");
    }
}
