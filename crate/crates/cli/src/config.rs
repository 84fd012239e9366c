//! Run configuration: TOML schema, validation, and resolution into the
//! engine's domain types.
//!
//! Unknown keys are rejected everywhere; validation collects every violation
//! before reporting.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mpq_core::bsde::{builtin_driver, BsdeProblem, Terminal};
use mpq_core::chain::{ChainOptions, KernelChoice, LevelSchedule};
use mpq_core::gaussian::CubatureRule;
use mpq_core::model::{builtin_model, DiffusionModel, TimeGrid};
use mpq_core::pricing::{OptionSide, Payoff, PayoffKind};
use mpq_core::quantizer::{InitScheme, OptimizerOptions};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub time: TimeSection,
    pub levels: LevelsSection,
    #[serde(default)]
    pub cubature: CubatureSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub transition: TransitionSection,
    #[serde(default)]
    pub payoff: Option<PayoffSection>,
    #[serde(default)]
    pub bsde: Option<BsdeSection>,
    #[serde(default)]
    pub verify: VerifySection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub run: RunSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSection {
    pub horizon: f64,
    pub steps: usize,
}

/// Exactly one of the three layouts must be given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct LevelsSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uniform: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_component: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<Vec<Vec<usize>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct CubatureSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points_per_axis: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_newton_iters")]
    pub max_newton_iters: usize,
    #[serde(default = "default_lloyd_iters")]
    pub max_lloyd_iters: usize,
    #[serde(default = "default_init")]
    pub init: String,
}

fn default_tolerance() -> f64 {
    OptimizerOptions::default().tolerance
}

fn default_newton_iters() -> usize {
    OptimizerOptions::default().max_newton_iters
}

fn default_lloyd_iters() -> usize {
    OptimizerOptions::default().max_lloyd_iters
}

fn default_init() -> String {
    "mixture-quantiles".into()
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let o = OptimizerOptions::default();
        Self {
            tolerance: o.tolerance,
            max_newton_iters: o.max_newton_iters,
            max_lloyd_iters: o.max_lloyd_iters,
            init: "mixture-quantiles".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionSection {
    #[serde(default = "default_kernel")]
    pub kernel: String,
    #[serde(default = "default_cell_cap")]
    pub cell_cap: usize,
    #[serde(default = "default_accept_residual")]
    pub accept_residual: f64,
}

fn default_kernel() -> String {
    "auto".into()
}

fn default_cell_cap() -> usize {
    ChainOptions::default().cell_cap
}

fn default_accept_residual() -> f64 {
    ChainOptions::default().accept_residual
}

impl Default for TransitionSection {
    fn default() -> Self {
        let c = ChainOptions::default();
        Self { kernel: "auto".into(), cell_cap: c.cell_cap, accept_residual: c.accept_residual }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PayoffSection {
    /// "basket" (weighted sum of all components) or "component".
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    /// 1-based component index for component payoffs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub component: Option<usize>,
    pub strikes: Vec<f64>,
    pub rate: f64,
    /// "call", "put", or "both".
    #[serde(default = "default_side")]
    pub side: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub benchmarks: Option<Vec<f64>>,
}

fn default_side() -> String {
    "both".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BsdeSection {
    pub driver: String,
    #[serde(default)]
    pub driver_params: BTreeMap<String, f64>,
    pub terminal: TerminalSection,
    #[serde(default)]
    pub write_surfaces: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminalSection {
    /// "call", "put", "weighted_call", or "sigmoid_sum".
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strike: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    #[serde(default = "default_samples")]
    pub samples: u64,
    /// Step whose transitions are compared against the sampler.
    #[serde(default = "default_verify_step")]
    pub step: usize,
    /// Cap on the number of source cells checked.
    #[serde(default = "default_max_rows")]
    pub max_rows: usize,
}

fn default_samples() -> u64 {
    200_000
}

fn default_verify_step() -> usize {
    1
}

fn default_max_rows() -> usize {
    16
}

impl Default for VerifySection {
    fn default() -> Self {
        Self { samples: 200_000, step: 1, max_rows: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_out_dir")]
    pub dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("mpq-out")
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("mpq-out") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default)]
    pub seed: u64,
    /// 0 = one worker per logical core.
    #[serde(default)]
    pub threads: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 0, threads: 0 }
    }
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_str(&text)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn from_str(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("config parse error: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Everything a subcommand needs, fully validated.
pub struct ResolvedRun {
    pub config: RunConfig,
    pub model: DiffusionModel,
    pub time_grid: TimeGrid,
    pub levels: LevelSchedule,
    pub cubature: CubatureRule,
    pub chain_opts: ChainOptions,
    pub payoff: Option<PayoffPlan>,
    pub bsde: Option<BsdePlan>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub threads: usize,
}

pub struct PayoffPlan {
    pub kind: PayoffKind,
    pub component: usize,
    pub strikes: Vec<f64>,
    pub sides: Vec<OptionSide>,
    pub rate: f64,
    pub benchmarks: Option<Vec<f64>>,
}

impl PayoffPlan {
    pub fn payoff(&self, side: OptionSide, strike: f64, maturity: f64) -> Payoff {
        Payoff { kind: self.kind.clone(), side, strike, rate: self.rate, maturity }
    }
}

pub struct BsdePlan {
    pub problem: BsdeProblem,
    pub write_surfaces: bool,
}

/// Validates the whole configuration, collecting every violation.
pub fn resolve(config: RunConfig) -> Result<ResolvedRun, CliError> {
    let mut errors: Vec<String> = Vec::new();

    let model = match builtin_model(&config.model.name, &config.model.params) {
        Ok(m) => Some(m),
        Err(e) => {
            errors.push(e.to_string());
            None
        }
    };

    let time_grid = match TimeGrid::new(config.time.horizon, config.time.steps) {
        Ok(t) => Some(t),
        Err(e) => {
            errors.push(e.to_string());
            None
        }
    };

    let dim = model.as_ref().map(|m| m.state_dim()).unwrap_or(1);
    let steps = config.time.steps.max(1);
    let given: u8 = [
        config.levels.uniform.is_some(),
        config.levels.per_component.is_some(),
        config.levels.table.is_some(),
    ]
    .iter()
    .map(|b| *b as u8)
    .sum();
    let levels = if given != 1 {
        errors.push(format!(
            "levels: exactly one of uniform/per_component/table must be set, found {given}"
        ));
        None
    } else {
        let built = if let Some(n) = config.levels.uniform {
            LevelSchedule::uniform(steps, dim, n)
        } else if let Some(per) = &config.levels.per_component {
            if per.len() != dim {
                errors.push(format!(
                    "levels.per_component holds {} entries, model has {dim} components",
                    per.len()
                ));
            }
            LevelSchedule::per_component(steps, per)
        } else {
            let table = config.levels.table.clone().unwrap();
            let mut full = vec![vec![1usize; dim]];
            full.extend(table);
            LevelSchedule::from_table(full)
        };
        match built {
            Ok(l) => Some(l),
            Err(e) => {
                errors.push(e.to_string());
                None
            }
        }
    };

    let q = model.as_ref().map(|m| m.brownian_dim()).unwrap_or(1);
    let cubature = match (&config.cubature.points_per_axis, &config.cubature.grid_file) {
        (Some(_), Some(_)) => {
            errors.push("cubature: points_per_axis and grid_file are mutually exclusive".into());
            None
        }
        (_, Some(path)) => match CubatureRule::from_grid_file(path, q.saturating_sub(1).max(1)) {
            Ok(r) => Some(r),
            Err(e) => {
                errors.push(e.to_string());
                None
            }
        },
        (ppa, None) => {
            let dim = q.saturating_sub(1).max(1);
            let points = ppa.unwrap_or(if dim <= 1 { 32 } else { 16 });
            match CubatureRule::gauss_hermite(dim, points) {
                Ok(r) => Some(r),
                Err(e) => {
                    errors.push(e.to_string());
                    None
                }
            }
        }
    };

    let init = match config.optimizer.init.as_str() {
        "mixture-quantiles" => Some(InitScheme::MixtureQuantiles),
        "gaussian-quantiles" => Some(InitScheme::GaussianQuantiles),
        "uniform" => Some(InitScheme::Uniform),
        other => {
            errors.push(format!("optimizer.init: unknown scheme '{other}'"));
            None
        }
    };
    if !(config.optimizer.tolerance > 0.0) {
        errors.push(format!("optimizer.tolerance must be positive, got {}", config.optimizer.tolerance));
    }

    let kernel = match KernelChoice::parse(&config.transition.kernel) {
        Ok(k) => Some(k),
        Err(e) => {
            errors.push(e.to_string());
            None
        }
    };

    let payoff = match &config.payoff {
        None => None,
        Some(section) => {
            let kind = match section.kind.as_str() {
                "basket" => {
                    let weights = section.weights.clone().unwrap_or_else(|| {
                        vec![1.0 / dim as f64; dim]
                    });
                    if weights.len() != dim {
                        errors.push(format!(
                            "payoff.weights holds {} entries, model has {dim} components",
                            weights.len()
                        ));
                    }
                    let sum: f64 = weights.iter().sum();
                    if (sum - 1.0).abs() > 1e-12 {
                        errors.push(format!("payoff.weights sum to {sum}, expected 1"));
                    }
                    Some(PayoffKind::Vector { weights })
                }
                "component" => {
                    let component = section.component.unwrap_or(1);
                    if component == 0 || component > dim {
                        errors.push(format!(
                            "payoff.component {component} out of range 1..={dim}"
                        ));
                        None
                    } else {
                        Some(PayoffKind::Component { index: component - 1 })
                    }
                }
                other => {
                    errors.push(format!("payoff.kind: unknown kind '{other}'"));
                    None
                }
            };
            if section.strikes.is_empty() {
                errors.push("payoff.strikes must not be empty".into());
            }
            for k in &section.strikes {
                if !(k.is_finite() && *k >= 0.0) {
                    errors.push(format!("payoff strike {k} must be a nonnegative real"));
                }
            }
            let sides = match section.side.as_str() {
                "call" => Some(vec![OptionSide::Call]),
                "put" => Some(vec![OptionSide::Put]),
                "both" => Some(vec![OptionSide::Call, OptionSide::Put]),
                other => {
                    errors.push(format!("payoff.side: unknown side '{other}'"));
                    None
                }
            };
            if let Some(b) = &section.benchmarks {
                if b.len() != section.strikes.len() {
                    errors.push(format!(
                        "payoff.benchmarks holds {} entries for {} strikes",
                        b.len(),
                        section.strikes.len()
                    ));
                }
            }
            let component = match &kind {
                Some(PayoffKind::Component { index }) => *index,
                _ => 0,
            };
            match (kind, sides) {
                (Some(kind), Some(sides)) => Some(PayoffPlan {
                    kind,
                    component,
                    strikes: section.strikes.clone(),
                    sides,
                    rate: section.rate,
                    benchmarks: section.benchmarks.clone(),
                }),
                _ => None,
            }
        }
    };

    let bsde = match &config.bsde {
        None => None,
        Some(section) => {
            let driver = match builtin_driver(&section.driver, &section.driver_params) {
                Ok(d) => Some(d),
                Err(e) => {
                    errors.push(e.to_string());
                    None
                }
            };
            let terminal = resolve_terminal(&section.terminal, dim, &mut errors);
            match (driver, terminal) {
                (Some(driver), Some(terminal)) => Some(BsdePlan {
                    problem: BsdeProblem { driver, terminal },
                    write_surfaces: section.write_surfaces,
                }),
                _ => None,
            }
        }
    };

    if config.verify.samples < 10_000 {
        errors.push(format!(
            "verify.samples must be at least 10000, got {}",
            config.verify.samples
        ));
    }

    if !errors.is_empty() {
        return Err(CliError::Config(format!(
            "invalid configuration:\n  - {}",
            errors.join("\n  - ")
        )));
    }

    let optimizer = OptimizerOptions {
        tolerance: config.optimizer.tolerance,
        max_newton_iters: config.optimizer.max_newton_iters,
        max_lloyd_iters: config.optimizer.max_lloyd_iters,
        init: init.unwrap(),
    };
    let chain_opts = ChainOptions {
        optimizer,
        kernel: kernel.unwrap(),
        cell_cap: config.transition.cell_cap,
        accept_residual: config.transition.accept_residual,
    };
    let out_dir = config.output.dir.clone();
    let seed = config.run.seed;
    let threads = config.run.threads;
    Ok(ResolvedRun {
        model: model.unwrap(),
        time_grid: time_grid.unwrap(),
        levels: levels.unwrap(),
        cubature: cubature.unwrap(),
        chain_opts,
        payoff,
        bsde,
        out_dir,
        seed,
        threads,
        config,
    })
}

fn resolve_terminal(
    section: &TerminalSection,
    dim: usize,
    errors: &mut Vec<String>,
) -> Option<Terminal> {
    let need_strike = |errors: &mut Vec<String>| {
        section.strike.or_else(|| {
            errors.push(format!("bsde.terminal '{}' needs a strike", section.kind));
            None
        })
    };
    match section.kind.as_str() {
        "call" => need_strike(errors).map(|strike| Terminal::Call { strike }),
        "put" => need_strike(errors).map(|strike| Terminal::Put { strike }),
        "weighted_call" => {
            let strike = need_strike(errors);
            let weights = section.weights.clone().or_else(|| {
                errors.push("bsde.terminal 'weighted_call' needs weights".into());
                None
            });
            if let Some(w) = &weights {
                if w.len() != dim {
                    errors.push(format!(
                        "bsde.terminal.weights holds {} entries, model has {dim} components",
                        w.len()
                    ));
                }
            }
            match (strike, weights) {
                (Some(strike), Some(weights)) => Some(Terminal::WeightedCall { weights, strike }),
                _ => None,
            }
        }
        "sigmoid_sum" => {
            let shift = section.shift.unwrap_or(0.0);
            Some(Terminal::SigmoidSum { shift })
        }
        other => {
            errors.push(format!("bsde.terminal.kind: unknown kind '{other}'"));
            None
        }
    }
}
