//! Strictly-parsed run configuration: one TOML file per run, unknown keys
//! rejected, with dotted-path `--set key=value` overrides for sweeps.

use anyhow::{bail, Context, Result};
use serde::Deserialize;
use std::path::{Path, PathBuf};

use dem_core::estimator::{BetaOrder, Engine, FitOptions};
use dem_core::event_data::RiskSetPolicy;
use dem_core::inference::AicFlavor;
use dem_core::likelihood::BaselineGrid;
use dem_core::statistics::StatisticKind;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; all randomness in a run derives from it.
    pub seed: Option<u64>,
    /// Worker thread count; 0 or absent = all cores. The DEM_THREADS
    /// environment variable supplies a default, the config wins.
    pub threads: Option<usize>,
    pub output_dir: Option<PathBuf>,
    pub data: Option<DataSection>,
    pub model: Option<ModelSection>,
    pub fit: Option<FitSection>,
    pub select: Option<SelectSection>,
    pub sim: Option<SimSection>,
    pub study: Option<StudySection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub events: PathBuf,
    pub covariates: Option<PathBuf>,
    pub window_end: Option<f64>,
    #[serde(default)]
    pub remap_actors: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub incidence: Vec<String>,
    #[serde(default)]
    pub duration: Vec<String>,
    /// Point-event mode: no dissolution process, `duration` must be empty.
    #[serde(default)]
    pub rem: bool,
    pub policy: Option<PolicyName>,
    pub change_points: ChangePointRule,
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum PolicyName {
    Unrestricted,
    Exclusive,
}

impl PolicyName {
    pub fn to_policy(self) -> RiskSetPolicy {
        match self {
            PolicyName::Unrestricted => RiskSetPolicy::Unrestricted,
            PolicyName::Exclusive => RiskSetPolicy::ExclusiveEngagement,
        }
    }
}

/// Change-point rule: explicit list, uniform count, or fixed width.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, tag = "mode", rename_all = "snake_case")]
pub enum ChangePointRule {
    Explicit { points: Vec<f64> },
    Uniform { count: usize },
    Width { width: f64 },
}

impl ChangePointRule {
    pub fn build(&self, window_end: f64) -> Result<BaselineGrid> {
        let grid = match self {
            ChangePointRule::Explicit { points } => {
                BaselineGrid::from_change_points(points, window_end)
            }
            ChangePointRule::Uniform { count } => BaselineGrid::uniform(window_end, *count),
            ChangePointRule::Width { width } => BaselineGrid::fixed_width(window_end, *width),
        };
        grid.map_err(|e| anyhow::anyhow!("change-point rule: {e}"))
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSection {
    pub engine: EngineName,
    pub tol_param: f64,
    pub tol_rel_ll: f64,
    pub max_iter: usize,
    pub beta_order: BetaOrderName,
    pub step1_halving: bool,
    pub nr_mem_guard_gb: f64,
}

impl Default for FitSection {
    fn default() -> Self {
        let d = FitOptions::default();
        FitSection {
            engine: EngineName::BlockCoordinate,
            tol_param: d.tol_param,
            tol_rel_ll: d.tol_rel_ll,
            max_iter: d.max_iter,
            beta_order: BetaOrderName::Jacobi,
            step1_halving: d.step1_halving,
            nr_mem_guard_gb: 16.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum EngineName {
    BlockCoordinate,
    Newton,
    NewtonRaphson,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaOrderName {
    Jacobi,
    GaussSeidel,
}

impl FitSection {
    pub fn to_options(&self) -> FitOptions {
        FitOptions {
            tol_param: self.tol_param,
            tol_rel_ll: self.tol_rel_ll,
            max_iter: self.max_iter,
            beta_order: match self.beta_order {
                BetaOrderName::Jacobi => BetaOrder::Jacobi,
                BetaOrderName::GaussSeidel => BetaOrder::GaussSeidel,
            },
            step1_halving: self.step1_halving,
            nr_mem_guard_bytes: (self.nr_mem_guard_gb * (1u64 << 30) as f64) as u64,
        }
    }

    pub fn engine(&self) -> Engine {
        match self.engine {
            EngineName::BlockCoordinate => Engine::BlockCoordinate,
            EngineName::Newton | EngineName::NewtonRaphson => Engine::NewtonRaphson,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectSection {
    #[serde(default)]
    pub incidence_candidates: Vec<String>,
    #[serde(default)]
    pub duration_candidates: Vec<String>,
    #[serde(default = "default_criterion")]
    pub criterion: CriterionName,
}

fn default_criterion() -> CriterionName {
    CriterionName::Standard
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionName {
    Standard,
    PaperFormula,
}

impl CriterionName {
    pub fn to_flavor(self) -> AicFlavor {
        match self {
            CriterionName::Standard => AicFlavor::Standard,
            CriterionName::PaperFormula => AicFlavor::PaperFormula,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub n_actors: usize,
    pub window_end: f64,
    #[serde(default = "default_max_events")]
    pub max_events: usize,
    pub policy: Option<PolicyName>,
    pub incidence: SimSubSection,
    pub duration: Option<SimSubSection>,
    #[serde(default)]
    pub covariates: CovariateGenSection,
}

fn default_max_events() -> usize {
    10_000_000
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSubSection {
    #[serde(default)]
    pub stats: Vec<String>,
    #[serde(default)]
    pub alpha: Vec<f64>,
    /// Constant popularity level, or per-actor list via `beta_per_actor`.
    pub beta: Option<f64>,
    pub beta_per_actor: Option<Vec<f64>>,
    pub gamma: Vec<f64>,
    pub change_points: ChangePointRule,
}

/// Synthetic covariates generated from the master seed, for self-contained
/// simulation configs.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateGenSection {
    /// Names of standard-normal monadic covariates.
    #[serde(default)]
    pub standard_normal: Vec<String>,
    /// name -> number of equally likely levels.
    #[serde(default)]
    pub categorical: Vec<CategoricalGen>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoricalGen {
    pub name: String,
    pub levels: u32,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudySection {
    // recovery
    pub n_actors: usize,
    pub replicates: usize,
    pub window_end: f64,
    pub n_pieces: usize,
    pub select: bool,
    // scaling / speed
    pub n_grid: Vec<usize>,
    pub scaling_replicates: usize,
    pub bench_window_end: f64,
    pub bench_n_pieces: usize,
    pub bench_beta: f64,
    pub mem_guard_gb: f64,
    /// Emit SVG charts next to the CSVs.
    pub svg: bool,
}

impl Default for StudySection {
    fn default() -> Self {
        StudySection {
            n_actors: 100,
            replicates: 200,
            window_end: 10_000.0,
            n_pieces: 10,
            select: true,
            n_grid: vec![50, 100, 150, 200],
            scaling_replicates: 30,
            bench_window_end: 400.0,
            bench_n_pieces: 4,
            bench_beta: -4.0,
            mem_guard_gb: 16.0,
            svg: false,
        }
    }
}

/// Parses statistic names, failing on the first unknown one.
pub fn parse_stats(names: &[String]) -> Result<Vec<StatisticKind>> {
    names
        .iter()
        .map(|n| StatisticKind::parse(n).map_err(|e| anyhow::anyhow!("{e}")))
        .collect()
}

/// Loads the config file, applies `--set key=value` overrides onto the raw
/// TOML tree, and deserializes strictly.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<(RunConfig, String)> {
    let raw = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let mut value: toml::Value = toml::from_str(&raw).context("parsing config TOML")?;
    for kv in overrides {
        let (key, val) = kv
            .split_once('=')
            .with_context(|| format!("override `{kv}` is not key=value"))?;
        apply_override(&mut value, key.trim(), val.trim())
            .with_context(|| format!("applying override `{kv}`"))?;
    }
    let canonical = toml::to_string(&value).context("re-serializing config")?;
    let config: RunConfig = toml::from_str(&canonical).context("validating config")?;
    Ok((config, canonical))
}

fn apply_override(root: &mut toml::Value, dotted: &str, raw_value: &str) -> Result<()> {
    let parsed: toml::Value = match raw_value.parse::<i64>() {
        Ok(v) => toml::Value::Integer(v),
        Err(_) => match raw_value.parse::<f64>() {
            Ok(v) => toml::Value::Float(v),
            Err(_) => match raw_value {
                "true" => toml::Value::Boolean(true),
                "false" => toml::Value::Boolean(false),
                _ => {
                    // arrays and inline tables in TOML syntax, else a string
                    if raw_value.starts_with('[') || raw_value.starts_with('{') {
                        let doc: toml::Value = toml::from_str(&format!("x = {raw_value}"))
                            .context("parsing override value")?;
                        doc.get("x").cloned().expect("key just written")
                    } else {
                        toml::Value::String(raw_value.to_string())
                    }
                }
            },
        },
    };
    let mut node = root;
    let parts: Vec<&str> = dotted.split('.').collect();
    for (k, part) in parts.iter().enumerate() {
        if k + 1 == parts.len() {
            let table = node
                .as_table_mut()
                .with_context(|| format!("`{}` is not a table", parts[..k].join(".")))?;
            table.insert(part.to_string(), parsed);
            return Ok(());
        }
        let table = node
            .as_table_mut()
            .with_context(|| format!("`{}` is not a table", parts[..k].join(".")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    bail!("empty override key");
}

impl RunConfig {
    pub fn require_seed(&self) -> Result<u64> {
        self.seed.context("config needs a top-level `seed`")
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    /// Thread resolution: config beats DEM_THREADS beats all-cores.
    pub fn resolve_threads(&self) -> usize {
        if let Some(t) = self.threads {
            return t;
        }
        std::env::var("DEM_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(0)
    }
}
