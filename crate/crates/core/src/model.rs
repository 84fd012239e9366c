//! SDE coefficients, the time grid and the componentwise Euler transition
//! data, plus the built-in model registry.
//!
//! A model is a pair of coefficient callbacks `(b, sigma)` behind the [`Sde`]
//! trait together with an admissible-domain predicate. Coefficient evaluation
//! must be reentrant; models are immutable after construction.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown model '{0}'")]
    UnknownModel(String),
    #[error("model '{model}': missing parameter '{name}'")]
    MissingParameter { model: &'static str, name: &'static str },
    #[error("model '{model}': invalid parameter {name} = {value} ({reason})")]
    InvalidParameter { model: &'static str, name: String, value: f64, reason: String },
    #[error("state {state:?} lies outside the admissible domain of model '{model}'")]
    ModelDomainError { model: String, state: Vec<f64> },
    #[error("component index {component} out of range for dimension {dimension}")]
    ComponentOutOfRange { component: usize, dimension: usize },
    #[error("step index {step} out of range for {steps} steps")]
    StepOutOfRange { step: usize, steps: usize },
}

/// Uniform discretization of `[0, T]` into `steps` intervals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self, ModelError> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(ModelError::InvalidParameter {
                model: "time_grid",
                name: "horizon".into(),
                value: horizon,
                reason: "must be a positive finite real".into(),
            });
        }
        if steps == 0 {
            return Err(ModelError::InvalidParameter {
                model: "time_grid",
                name: "steps".into(),
                value: 0.0,
                reason: "must be a positive integer".into(),
            });
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn delta(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.delta()
    }
}

/// Coefficients of `dX_t = b(t, X_t) dt + sigma(t, X_t) dW_t`.
pub trait Sde: Send + Sync {
    fn name(&self) -> &str;
    /// State dimension d.
    fn state_dim(&self) -> usize;
    /// Brownian dimension q.
    fn brownian_dim(&self) -> usize;
    fn initial_state(&self) -> Vec<f64>;
    /// Writes `b(t, x)` into `out` (length d).
    fn drift(&self, t: f64, x: &[f64], out: &mut [f64]);
    /// Writes `sigma(t, x)` into `out` row-major (length d*q).
    fn diffusion(&self, t: f64, x: &[f64], out: &mut [f64]);
    /// Admissible-domain predicate; coefficients must be finite on it.
    fn admits(&self, _x: &[f64]) -> bool {
        true
    }
}

/// Shared handle to an immutable model.
#[derive(Clone)]
pub struct DiffusionModel {
    inner: Arc<dyn Sde>,
}

impl fmt::Debug for DiffusionModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiffusionModel")
            .field("name", &self.inner.name())
            .field("d", &self.state_dim())
            .field("q", &self.brownian_dim())
            .finish()
    }
}

impl DiffusionModel {
    pub fn new<S: Sde + 'static>(sde: S) -> Self {
        Self { inner: Arc::new(sde) }
    }

    pub fn name(&self) -> &str {
        self.inner.name()
    }

    pub fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }

    pub fn brownian_dim(&self) -> usize {
        self.inner.brownian_dim()
    }

    pub fn initial_state(&self) -> Vec<f64> {
        self.inner.initial_state()
    }

    pub fn admits(&self, x: &[f64]) -> bool {
        self.inner.admits(x)
    }

    pub fn drift(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.inner.drift(t, x, out)
    }

    pub fn diffusion(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.inner.diffusion(t, x, out)
    }
}

/// One component's Euler transition data at a source state: conditionally on
/// `X_k = x`, component `l` of the Euler scheme moves to
/// `mean + sqrt(delta) * <vol_row, Z>`, `Z ~ N(0, I_q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EulerRow {
    /// `x^l + delta * b^l(t_k, x)`
    pub mean: f64,
    /// Row `l` of `sigma(t_k, x)` (unscaled).
    pub vol_row: Vec<f64>,
    /// Conditional standard deviation `sqrt(delta) * |vol_row|_2`.
    pub std_dev: f64,
}

/// Euler transition data of every component at once (one coefficient
/// evaluation).
pub fn euler_rows(
    model: &DiffusionModel,
    grid: &TimeGrid,
    k: usize,
    x: &[f64],
) -> Result<Vec<EulerRow>, ModelError> {
    if k >= grid.steps() {
        return Err(ModelError::StepOutOfRange { step: k, steps: grid.steps() });
    }
    if !model.admits(x) {
        return Err(ModelError::ModelDomainError {
            model: model.name().to_string(),
            state: x.to_vec(),
        });
    }
    let (d, q) = (model.state_dim(), model.brownian_dim());
    let t = grid.time(k);
    let delta = grid.delta();
    let mut b = vec![0.0; d];
    let mut s = vec![0.0; d * q];
    model.drift(t, x, &mut b);
    model.diffusion(t, x, &mut s);
    let sqrt_delta = delta.sqrt();
    Ok((0..d)
        .map(|l| {
            let vol_row = s[l * q..(l + 1) * q].to_vec();
            let norm = vol_row.iter().map(|v| v * v).sum::<f64>().sqrt();
            EulerRow { mean: x[l] + delta * b[l], vol_row, std_dev: sqrt_delta * norm }
        })
        .collect())
}

/// Euler transition data of a single component (`component` is 0-based).
pub fn euler_row(
    model: &DiffusionModel,
    grid: &TimeGrid,
    k: usize,
    component: usize,
    x: &[f64],
) -> Result<EulerRow, ModelError> {
    if component >= model.state_dim() {
        return Err(ModelError::ComponentOutOfRange {
            component,
            dimension: model.state_dim(),
        });
    }
    let mut rows = euler_rows(model, grid, k, x)?;
    Ok(rows.swap_remove(component))
}

pub type ModelParams = BTreeMap<String, f64>;

type Factory = fn(&ModelParams) -> Result<DiffusionModel, ModelError>;

/// Built-in models, registered by name.
const REGISTRY: &[(&str, Factory)] = &[
    ("black_scholes", build_black_scholes),
    ("basket2d", build_basket2d),
    ("heston", build_heston),
    ("unit_brownian", build_unit_brownian),
];

pub fn builtin_model_names() -> impl Iterator<Item = &'static str> {
    REGISTRY.iter().map(|(name, _)| *name)
}

/// Instantiates a built-in model from its registry name and parameter map.
pub fn builtin_model(name: &str, params: &ModelParams) -> Result<DiffusionModel, ModelError> {
    REGISTRY
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| ModelError::UnknownModel(name.to_string()))
        .and_then(|(_, factory)| factory(params))
}

struct ParamReader<'a> {
    model: &'static str,
    params: &'a ModelParams,
    seen: Vec<&'static str>,
}

impl<'a> ParamReader<'a> {
    fn new(model: &'static str, params: &'a ModelParams) -> Self {
        Self { model, params, seen: Vec::new() }
    }

    fn require(&mut self, name: &'static str) -> Result<f64, ModelError> {
        self.seen.push(name);
        self.params
            .get(name)
            .copied()
            .ok_or(ModelError::MissingParameter { model: self.model, name })
    }

    fn optional(&mut self, name: &'static str, default: f64) -> f64 {
        self.seen.push(name);
        self.params.get(name).copied().unwrap_or(default)
    }

    fn finish(self) -> Result<(), ModelError> {
        for key in self.params.keys() {
            if !self.seen.iter().any(|s| s == key) {
                return Err(ModelError::InvalidParameter {
                    model: self.model,
                    name: key.clone(),
                    value: self.params[key],
                    reason: "unknown parameter".into(),
                });
            }
        }
        Ok(())
    }
}

fn check(
    model: &'static str,
    name: &str,
    value: f64,
    ok: bool,
    reason: &str,
) -> Result<f64, ModelError> {
    if ok && value.is_finite() {
        Ok(value)
    } else {
        Err(ModelError::InvalidParameter {
            model,
            name: name.to_string(),
            value,
            reason: reason.to_string(),
        })
    }
}

/// dX = mu X dt + sigma X dW (one-dimensional geometric Brownian motion).
struct BlackScholes {
    mu: f64,
    sigma: f64,
    x0: f64,
}

impl Sde for BlackScholes {
    fn name(&self) -> &str {
        "black_scholes"
    }
    fn state_dim(&self) -> usize {
        1
    }
    fn brownian_dim(&self) -> usize {
        1
    }
    fn initial_state(&self) -> Vec<f64> {
        vec![self.x0]
    }
    fn drift(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        out[0] = self.mu * x[0];
    }
    fn diffusion(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        out[0] = self.sigma * x[0];
    }
}

fn build_black_scholes(params: &ModelParams) -> Result<DiffusionModel, ModelError> {
    let mut p = ParamReader::new("black_scholes", params);
    let mu = p.require("mu")?;
    let sigma = p.require("sigma")?;
    let x0 = p.optional("x0", 100.0);
    p.finish()?;
    check("black_scholes", "sigma", sigma, sigma > 0.0, "must be positive")?;
    check("black_scholes", "mu", mu, true, "")?;
    check("black_scholes", "x0", x0, true, "")?;
    Ok(DiffusionModel::new(BlackScholes { mu, sigma, x0 }))
}

/// Two correlated geometric Brownian motions:
///   dS1 = r S1 dt + rho sigma1 S1 dW1 + sqrt(1 - rho^2) sigma1 S1 dW2
///   dS2 = r S2 dt + sigma2 S2 dW1
struct Basket2d {
    r: f64,
    sigma1: f64,
    sigma2: f64,
    rho: f64,
    s0: [f64; 2],
}

impl Sde for Basket2d {
    fn name(&self) -> &str {
        "basket2d"
    }
    fn state_dim(&self) -> usize {
        2
    }
    fn brownian_dim(&self) -> usize {
        2
    }
    fn initial_state(&self) -> Vec<f64> {
        self.s0.to_vec()
    }
    fn drift(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        out[0] = self.r * x[0];
        out[1] = self.r * x[1];
    }
    fn diffusion(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        out[0] = self.rho * self.sigma1 * x[0];
        out[1] = (1.0 - self.rho * self.rho).sqrt() * self.sigma1 * x[0];
        out[2] = self.sigma2 * x[1];
        out[3] = 0.0;
    }
}

fn build_basket2d(params: &ModelParams) -> Result<DiffusionModel, ModelError> {
    let mut p = ParamReader::new("basket2d", params);
    let r = p.require("r")?;
    let sigma1 = p.require("sigma1")?;
    let sigma2 = p.require("sigma2")?;
    let rho = p.require("rho")?;
    let s01 = p.optional("s0_1", 100.0);
    let s02 = p.optional("s0_2", 100.0);
    p.finish()?;
    check("basket2d", "sigma1", sigma1, sigma1 > 0.0, "must be positive")?;
    check("basket2d", "sigma2", sigma2, sigma2 > 0.0, "must be positive")?;
    check("basket2d", "rho", rho, rho.abs() <= 1.0, "must lie in [-1, 1]")?;
    check("basket2d", "r", r, true, "")?;
    Ok(DiffusionModel::new(Basket2d { r, sigma1, sigma2, rho, s0: [s01, s02] }))
}

/// Stochastic-variance model:
///   dS = r S dt + rho sqrt(V+) S dW1 + sqrt(1 - rho^2) sqrt(V+) S dW2
///   dV = kappa (theta - V) dt + sigma sqrt(V+) dW1
///
/// The Euler scheme can push V below zero; the volatility rows evaluate
/// sqrt(max(V, 0)) (full truncation) while the drift keeps the raw V.
struct Heston {
    r: f64,
    kappa: f64,
    theta: f64,
    sigma: f64,
    rho: f64,
    s0: f64,
    v0: f64,
}

impl Sde for Heston {
    fn name(&self) -> &str {
        "heston"
    }
    fn state_dim(&self) -> usize {
        2
    }
    fn brownian_dim(&self) -> usize {
        2
    }
    fn initial_state(&self) -> Vec<f64> {
        vec![self.s0, self.v0]
    }
    fn drift(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        out[0] = self.r * x[0];
        out[1] = self.kappa * (self.theta - x[1]);
    }
    fn diffusion(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        let vol = x[1].max(0.0).sqrt();
        out[0] = self.rho * vol * x[0];
        out[1] = (1.0 - self.rho * self.rho).sqrt() * vol * x[0];
        out[2] = self.sigma * vol;
        out[3] = 0.0;
    }
}

fn build_heston(params: &ModelParams) -> Result<DiffusionModel, ModelError> {
    let mut p = ParamReader::new("heston", params);
    let r = p.require("r")?;
    let kappa = p.require("kappa")?;
    let theta = p.require("theta")?;
    let sigma = p.require("sigma")?;
    let rho = p.require("rho")?;
    let s0 = p.optional("s0", 100.0);
    let v0 = p.optional("v0", 0.0719);
    p.finish()?;
    check("heston", "kappa", kappa, kappa > 0.0, "must be positive")?;
    check("heston", "theta", theta, theta > 0.0, "must be positive")?;
    check("heston", "sigma", sigma, sigma > 0.0, "must be positive")?;
    check("heston", "rho", rho, rho.abs() <= 1.0, "must lie in [-1, 1]")?;
    check("heston", "v0", v0, v0 >= 0.0, "must be nonnegative")?;
    check("heston", "s0", s0, s0 > 0.0, "must be positive")?;
    check("heston", "r", r, true, "")?;
    Ok(DiffusionModel::new(Heston { r, kappa, theta, sigma, rho, s0, v0 }))
}

/// dX = dW in dimension d, started at the origin.
struct UnitBrownian {
    dim: usize,
}

impl Sde for UnitBrownian {
    fn name(&self) -> &str {
        "unit_brownian"
    }
    fn state_dim(&self) -> usize {
        self.dim
    }
    fn brownian_dim(&self) -> usize {
        self.dim
    }
    fn initial_state(&self) -> Vec<f64> {
        vec![0.0; self.dim]
    }
    fn drift(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn diffusion(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for l in 0..self.dim {
            out[l * self.dim + l] = 1.0;
        }
    }
}

fn build_unit_brownian(params: &ModelParams) -> Result<DiffusionModel, ModelError> {
    let mut p = ParamReader::new("unit_brownian", params);
    let d = p.require("d")?;
    p.finish()?;
    let dim = check("unit_brownian", "d", d, d >= 1.0 && d.fract() == 0.0 && d <= 16.0,
        "must be an integer in [1, 16]")? as usize;
    Ok(DiffusionModel::new(UnitBrownian { dim }))
}
