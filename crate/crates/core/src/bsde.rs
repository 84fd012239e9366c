//! Quantized explicit backward scheme for Markovian BSDEs driven by the
//! chain, with closed-form conditional-increment weights.
//!
//! The increment weights `Lambda[i][j][p] = E[Z^p 1{X_{k+1} = x^j} | X_k =
//! x^i]` come in two flavors: a fully closed form when q = d with diagonal
//! volatility, and a general evaluation that conditions on the p-th Brownian
//! coordinate. In the general case the remaining coordinates reduce to
//! interval masses per component; the outer integral over the conditioned
//! coordinate is taken segment by segment (split at every cell-indicator
//! breakpoint) with composite Gauss-Legendre panels, because indicator
//! factors and interval-intersection kinks defeat a plain node sum.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::chain::{halfopen_cell, phi_bounds, ProductGrid, QuantizedChain};
use crate::gaussian::{gauss_legendre, normal_pdf, CubatureRule};
use crate::model::{euler_rows, DiffusionModel, ModelError, TimeGrid};

/// Entries of a volatility row within this of zero count as zero when
/// classifying Brownian-coordinate dependence.
const DEP_EPS: f64 = 1e-14;

/// The conditioned coordinate is integrated over [-TAIL, TAIL]; the mass
/// beyond is below 1e-18.
const TAIL: f64 = 9.0;

#[derive(Debug, Error)]
pub enum BsdeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("closed-form increment weights need q = d with diagonal volatility: {0}")]
    NotApplicable(String),
    #[error("{what}: expected {expected}, found {found}")]
    DimensionMismatch { what: &'static str, expected: usize, found: usize },
    #[error("unknown driver '{0}'")]
    UnknownDriver(String),
    #[error("driver '{driver}': {message}")]
    DriverParameter { driver: &'static str, message: String },
}

/// Conditional-increment weights for one step: entry `(i, j, p)` is
/// `E[Z^p 1{X_{k+1} = x_{k+1}^j} | X_k = x_k^i]`.
#[derive(Debug, Clone)]
pub struct LambdaTensor {
    step: usize,
    rows: usize,
    cols: usize,
    brownian_dim: usize,
    data: Vec<f64>,
}

impl LambdaTensor {
    fn zeros(step: usize, rows: usize, cols: usize, brownian_dim: usize) -> Self {
        Self { step, rows, cols, brownian_dim, data: vec![0.0; rows * cols * brownian_dim] }
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn brownian_dim(&self) -> usize {
        self.brownian_dim
    }

    pub fn entry(&self, i: usize, j: usize, p: usize) -> f64 {
        self.data[(i * self.cols + j) * self.brownian_dim + p]
    }

    /// `sum_j entry(i, j, p)`, zero in exact arithmetic.
    pub fn row_sum(&self, i: usize, p: usize) -> f64 {
        (0..self.cols).map(|j| self.entry(i, j, p)).sum()
    }

    fn row_block(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols * self.brownian_dim..(i + 1) * self.cols * self.brownian_dim]
    }
}

fn diagonal_for_lambda(
    model: &DiffusionModel,
    grid: &TimeGrid,
    k: usize,
    source: &ProductGrid,
) -> Result<(), String> {
    let (d, q) = (model.state_dim(), model.brownian_dim());
    if d != q {
        return Err(format!("q = {q} differs from d = {d}"));
    }
    let t = grid.time(k);
    let mut s = vec![0.0; d * q];
    let mut x = vec![0.0; d];
    for i in 0..source.len() {
        source.point_into(i, &mut x);
        model.diffusion(t, &x, &mut s);
        for l in 0..d {
            for p in 0..q {
                if l != p && s[l * q + p].abs() > DEP_EPS {
                    return Err(format!(
                        "off-diagonal entry ({l},{p}) = {} at {x:?}",
                        s[l * q + p]
                    ));
                }
            }
        }
    }
    Ok(())
}

/// Closed-form increment weights for q = d with diagonal volatility: the
/// own-coordinate factor is a PDF difference, every other component
/// contributes its cell mass.
pub fn lambda_independent(
    model: &DiffusionModel,
    grid: &TimeGrid,
    k: usize,
    source: &ProductGrid,
    target: &ProductGrid,
) -> Result<LambdaTensor, BsdeError> {
    diagonal_for_lambda(model, grid, k, source).map_err(BsdeError::NotApplicable)?;
    let d = model.state_dim();
    let sqrt_delta = grid.delta().sqrt();
    let blocks: Vec<Vec<f64>> = (0..source.len())
        .into_par_iter()
        .map(|i| -> Result<Vec<f64>, BsdeError> {
            let x = source.point(i);
            let rows = euler_rows(model, grid, k, &x)?;
            // per component: cell masses and truncated-increment means
            let mut cell_mass: Vec<Vec<f64>> = Vec::with_capacity(d);
            let mut incr_mean: Vec<Vec<f64>> = Vec::with_capacity(d);
            for l in 0..d {
                let marg = target.marginal(l);
                let n = marg.len();
                let c = rows[l].vol_row[l];
                let mut mass = vec![0.0; n];
                let mut mean = vec![0.0; n];
                if c.abs() <= DEP_EPS {
                    mass[halfopen_cell(marg, rows[l].mean)] = 1.0;
                } else {
                    let scale = sqrt_delta * c;
                    let mut lower = vec![0.0; n];
                    let mut upper = vec![0.0; n];
                    phi_bounds(marg, rows[l].mean, scale, &mut lower, &mut upper);
                    for j in 0..n {
                        mass[j] = upper[j] - lower[j];
                        // E[Z 1{Z in (a, b)}] = pdf(a) - pdf(b), bounds in
                        // Phi-space invert through the quantile of the cell
                        let a = (marg.boundary(if scale > 0.0 { j } else { j + 1 }) - rows[l].mean)
                            / scale;
                        let b = (marg.boundary(if scale > 0.0 { j + 1 } else { j }) - rows[l].mean)
                            / scale;
                        mean[j] = normal_pdf(a) - normal_pdf(b);
                    }
                }
                cell_mass.push(mass);
                incr_mean.push(mean);
            }
            let mut block = vec![0.0; target.len() * d];
            let mut multi = vec![0usize; d];
            for j in 0..target.len() {
                for p in 0..d {
                    let mut v = incr_mean[p][multi[p]];
                    if v != 0.0 {
                        for (l, m) in multi.iter().enumerate() {
                            if l != p {
                                v *= cell_mass[l][*m];
                            }
                        }
                    }
                    block[j * d + p] = v;
                }
                for l in (0..d).rev() {
                    multi[l] += 1;
                    if multi[l] < target.marginal(l).len() {
                        break;
                    }
                    multi[l] = 0;
                }
            }
            Ok(block)
        })
        .collect::<Result<_, _>>()?;
    let mut tensor = LambdaTensor::zeros(k, source.len(), target.len(), d);
    for (i, block) in blocks.into_iter().enumerate() {
        let span = target.len() * d;
        tensor.data[i * span..(i + 1) * span].copy_from_slice(&block);
    }
    Ok(tensor)
}

/// General increment weights: component p is computed by conditioning on the
/// p-th Brownian coordinate. Components whose rows carry no other coordinate
/// become indicator intervals in the conditioned coordinate; the rest reduce
/// to interval masses (signed reduction when a single residual coordinate
/// drives the row, Euclidean-norm reduction otherwise).
///
/// `resolution` sets a floor on the total quadrature effort along the
/// conditioned coordinate (the rule's node count).
pub fn lambda_general(
    model: &DiffusionModel,
    grid: &TimeGrid,
    k: usize,
    source: &ProductGrid,
    target: &ProductGrid,
    cubature_1d: &CubatureRule,
) -> Result<LambdaTensor, BsdeError> {
    if cubature_1d.dimension() != 1 {
        return Err(BsdeError::DimensionMismatch {
            what: "conditioning cubature rule dimension",
            expected: 1,
            found: cubature_1d.dimension(),
        });
    }
    let d = model.state_dim();
    let q = model.brownian_dim();
    let sqrt_delta = grid.delta().sqrt();
    let (gl_nodes, gl_weights) = gauss_legendre(16);
    // composite panels at least this fine, and no coarser than the rule asks
    let max_panel_width = (2.0 * TAIL / (cubature_1d.len() as f64 / 16.0)).min(0.75);

    let blocks: Vec<Vec<f64>> = (0..source.len())
        .into_par_iter()
        .map(|i| -> Result<Vec<f64>, BsdeError> {
            let x = source.point(i);
            let rows = euler_rows(model, grid, k, &x)?;
            let mut block = vec![0.0; target.len() * q];
            let mut lower: Vec<Vec<f64>> =
                (0..d).map(|l| vec![0.0; target.marginal(l).len()]).collect();
            let mut upper: Vec<Vec<f64>> =
                (0..d).map(|l| vec![0.0; target.marginal(l).len()]).collect();
            let mut owner = vec![usize::MAX; d];

            for p in 0..q {
                // classify rows by their dependence beyond coordinate p
                #[derive(Clone, Copy)]
                enum Kind {
                    /// only coordinate p moves the row: indicator in the
                    /// conditioned coordinate
                    Indicator,
                    /// reduced to a scalar with this (signed) scale
                    Reduced(f64),
                }
                let kinds: Vec<Kind> = rows
                    .iter()
                    .map(|r| {
                        let residual: Vec<(usize, f64)> = r
                            .vol_row
                            .iter()
                            .enumerate()
                            .filter(|(pp, v)| *pp != p && v.abs() > DEP_EPS)
                            .map(|(pp, v)| (pp, *v))
                            .collect();
                        match residual.len() {
                            0 => Kind::Indicator,
                            1 => Kind::Reduced(sqrt_delta * residual[0].1),
                            _ => {
                                let norm =
                                    residual.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
                                Kind::Reduced(sqrt_delta * norm)
                            }
                        }
                    })
                    .collect();

                // breakpoints of the integrand along the conditioned axis:
                // indicator cell edges, plus every crossing of two reduced
                // rows' standardized bound lines (the interval-intersection
                // kinks)
                let mut cuts = vec![-TAIL, TAIL];
                for (l, kind) in kinds.iter().enumerate() {
                    if let Kind::Indicator = kind {
                        let c = rows[l].vol_row[p];
                        if c.abs() > DEP_EPS {
                            let marg = target.marginal(l);
                            for b in 1..marg.len() {
                                let u = (marg.boundary(b) - rows[l].mean) / (sqrt_delta * c);
                                if u.abs() < TAIL {
                                    cuts.push(u);
                                }
                            }
                        }
                    }
                }
                // line l,b: t(u) = (bound_b - mean_l)/scale_l - slope_l u
                let line = |l: usize, kind: &Kind| -> Option<(f64, f64)> {
                    match kind {
                        Kind::Reduced(scale) => {
                            Some((sqrt_delta * rows[l].vol_row[p] / scale, *scale))
                        }
                        Kind::Indicator => None,
                    }
                };
                for l in 0..d {
                    let Some((slope_l, scale_l)) = line(l, &kinds[l]) else { continue };
                    for lp in l + 1..d {
                        let Some((slope_lp, scale_lp)) = line(lp, &kinds[lp]) else { continue };
                        if (slope_l - slope_lp).abs() <= 1e-300 {
                            continue;
                        }
                        let marg_l = target.marginal(l);
                        let marg_lp = target.marginal(lp);
                        if cuts.len() + marg_l.len() * marg_lp.len() > 10_000 {
                            break;
                        }
                        for b in 1..marg_l.len() {
                            let al = (marg_l.boundary(b) - rows[l].mean) / scale_l;
                            for bp in 1..marg_lp.len() {
                                let alp = (marg_lp.boundary(bp) - rows[lp].mean) / scale_lp;
                                let u = (al - alp) / (slope_l - slope_lp);
                                if u.abs() < TAIL {
                                    cuts.push(u);
                                }
                            }
                        }
                    }
                }
                cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
                cuts.dedup();

                for seg in cuts.windows(2) {
                    let (a, b) = (seg[0], seg[1]);
                    if b - a <= 0.0 {
                        continue;
                    }
                    // owners of the indicator rows are constant on the segment
                    let mid = 0.5 * (a + b);
                    for (l, kind) in kinds.iter().enumerate() {
                        owner[l] = match kind {
                            Kind::Indicator => {
                                let c = rows[l].vol_row[p];
                                halfopen_cell(target.marginal(l), rows[l].mean + sqrt_delta * c * mid)
                            }
                            Kind::Reduced(_) => usize::MAX,
                        };
                    }
                    let panels = ((b - a) / max_panel_width).ceil().max(1.0) as usize;
                    for panel in 0..panels {
                        let pa = a + (b - a) * panel as f64 / panels as f64;
                        let pb = a + (b - a) * (panel + 1) as f64 / panels as f64;
                        let half = 0.5 * (pb - pa);
                        let mid = 0.5 * (pa + pb);
                        for (gn, gw) in gl_nodes.iter().zip(gl_weights.iter()) {
                            let u = mid + half * gn;
                            let wu = gw * half * u * normal_pdf(u);
                            if wu == 0.0 {
                                continue;
                            }
                            let mut any_reduced = false;
                            for l in 0..d {
                                if let Kind::Reduced(scale) = kinds[l] {
                                    any_reduced = true;
                                    let mean = rows[l].mean + sqrt_delta * rows[l].vol_row[p] * u;
                                    phi_bounds(
                                        target.marginal(l),
                                        mean,
                                        scale,
                                        &mut lower[l],
                                        &mut upper[l],
                                    );
                                }
                            }
                            let mut multi = vec![0usize; d];
                            for j in 0..target.len() {
                                let mut keep = true;
                                let mut phi_alpha = 0.0f64;
                                let mut phi_beta = 1.0f64;
                                for l in 0..d {
                                    match kinds[l] {
                                        Kind::Indicator => {
                                            if multi[l] != owner[l] {
                                                keep = false;
                                                break;
                                            }
                                        }
                                        Kind::Reduced(_) => {
                                            phi_alpha = phi_alpha.max(lower[l][multi[l]]);
                                            phi_beta = phi_beta.min(upper[l][multi[l]]);
                                        }
                                    }
                                }
                                if keep {
                                    let mass = if any_reduced {
                                        (phi_beta - phi_alpha).max(0.0)
                                    } else {
                                        1.0
                                    };
                                    block[j * q + p] += wu * mass;
                                }
                                for l in (0..d).rev() {
                                    multi[l] += 1;
                                    if multi[l] < target.marginal(l).len() {
                                        break;
                                    }
                                    multi[l] = 0;
                                }
                            }
                        }
                    }
                }
            }
            Ok(block)
        })
        .collect::<Result<_, _>>()?;

    let mut tensor = LambdaTensor::zeros(k, source.len(), target.len(), q);
    for (i, block) in blocks.into_iter().enumerate() {
        let span = target.len() * q;
        tensor.data[i * span..(i + 1) * span].copy_from_slice(&block);
    }
    Ok(tensor)
}

/// Closed form when applicable, general evaluation otherwise.
pub fn lambda_auto(
    model: &DiffusionModel,
    grid: &TimeGrid,
    k: usize,
    source: &ProductGrid,
    target: &ProductGrid,
    cubature_1d: &CubatureRule,
) -> Result<LambdaTensor, BsdeError> {
    match lambda_independent(model, grid, k, source, target) {
        Ok(t) => Ok(t),
        Err(BsdeError::NotApplicable(_)) => {
            lambda_general(model, grid, k, source, target, cubature_1d)
        }
        Err(e) => Err(e),
    }
}

/// BSDE driver `f(t, x, y, z)`.
pub trait Driver: Send + Sync {
    fn name(&self) -> &'static str;
    fn evaluate(&self, t: f64, x: &[f64], y: f64, z: &[f64]) -> f64;
    /// Lipschitz bound in (y, z), diagnostics only.
    fn lipschitz(&self) -> Option<f64> {
        None
    }
}

/// f = 0: the scheme reduces to iterated conditional expectations.
pub struct ZeroDriver;

impl Driver for ZeroDriver {
    fn name(&self) -> &'static str {
        "zero"
    }
    fn evaluate(&self, _t: f64, _x: &[f64], _y: f64, _z: &[f64]) -> f64 {
        0.0
    }
    fn lipschitz(&self) -> Option<f64> {
        Some(0.0)
    }
}

/// Self-financing hedge of a claim under the historical measure:
/// `f(y, z) = -r y - (mu - r)/sigma * z`.
pub struct BsHedgeDriver {
    pub rate: f64,
    pub mu: f64,
    pub sigma: f64,
}

impl Driver for BsHedgeDriver {
    fn name(&self) -> &'static str {
        "bs_hedge"
    }
    fn evaluate(&self, _t: f64, _x: &[f64], y: f64, z: &[f64]) -> f64 {
        -self.rate * y - (self.mu - self.rate) / self.sigma * z[0]
    }
    fn lipschitz(&self) -> Option<f64> {
        Some(self.rate.abs().max(((self.mu - self.rate) / self.sigma).abs()))
    }
}

/// `f(y, z) = (z_1 + ... + z_d) (y - (2 + d) / (2 d))`, a coupled driver with
/// a known closed-form solution against pure Brownian state.
pub struct CoupledSumDriver {
    pub dim: usize,
}

impl Driver for CoupledSumDriver {
    fn name(&self) -> &'static str {
        "chassagneux"
    }
    fn evaluate(&self, _t: f64, _x: &[f64], y: f64, z: &[f64]) -> f64 {
        let zsum: f64 = z.iter().sum();
        zsum * (y - (2.0 + self.dim as f64) / (2.0 * self.dim as f64))
    }
}

pub type DriverParams = BTreeMap<String, f64>;

/// Built-in drivers, registered by name.
pub fn builtin_driver(name: &str, params: &DriverParams) -> Result<Arc<dyn Driver>, BsdeError> {
    let require = |key: &str, driver: &'static str| {
        params.get(key).copied().ok_or(BsdeError::DriverParameter {
            driver,
            message: format!("missing parameter '{key}'"),
        })
    };
    match name {
        "zero" => Ok(Arc::new(ZeroDriver)),
        "bs_hedge" => {
            let rate = require("r", "bs_hedge")?;
            let mu = require("mu", "bs_hedge")?;
            let sigma = require("sigma", "bs_hedge")?;
            if sigma <= 0.0 {
                return Err(BsdeError::DriverParameter {
                    driver: "bs_hedge",
                    message: format!("sigma = {sigma} must be positive"),
                });
            }
            Ok(Arc::new(BsHedgeDriver { rate, mu, sigma }))
        }
        "chassagneux" => {
            let dim = require("d", "chassagneux")?;
            if dim < 1.0 || dim.fract() != 0.0 {
                return Err(BsdeError::DriverParameter {
                    driver: "chassagneux",
                    message: format!("d = {dim} must be a positive integer"),
                });
            }
            Ok(Arc::new(CoupledSumDriver { dim: dim as usize }))
        }
        other => Err(BsdeError::UnknownDriver(other.to_string())),
    }
}

pub fn builtin_driver_names() -> impl Iterator<Item = &'static str> {
    ["zero", "bs_hedge", "chassagneux"].into_iter()
}

/// Terminal condition `xi = h(X_T)`.
#[derive(Debug, Clone, PartialEq)]
pub enum Terminal {
    /// `(x^1 - K)+`
    Call { strike: f64 },
    /// `(K - x^1)+`
    Put { strike: f64 },
    /// `(w . x - K)+`
    WeightedCall { weights: Vec<f64>, strike: f64 },
    /// `s / (1 + s)` with `s = exp(x^1 + ... + x^d + shift)`
    SigmoidSum { shift: f64 },
}

impl Terminal {
    pub fn evaluate(&self, x: &[f64]) -> f64 {
        match self {
            Terminal::Call { strike } => (x[0] - strike).max(0.0),
            Terminal::Put { strike } => (strike - x[0]).max(0.0),
            Terminal::WeightedCall { weights, strike } => {
                (weights.iter().zip(x.iter()).map(|(w, v)| w * v).sum::<f64>() - strike).max(0.0)
            }
            Terminal::SigmoidSum { shift } => {
                let s = (x.iter().sum::<f64>() + shift).exp();
                s / (1.0 + s)
            }
        }
    }
}

/// Driver and terminal condition; the underlying model and time grid come
/// with the chain.
pub struct BsdeProblem {
    pub driver: Arc<dyn Driver>,
    pub terminal: Terminal,
}

/// Value and control surfaces of the backward sweep.
#[derive(Debug, Clone)]
pub struct BsdeSolution {
    /// `values[k][i]`, k = 0..=n.
    values: Vec<Vec<f64>>,
    /// `controls[k][i*q + p]`, k = 0..n.
    controls: Vec<Vec<f64>>,
    brownian_dim: usize,
}

impl BsdeSolution {
    pub fn value_surface(&self, k: usize) -> &[f64] {
        &self.values[k]
    }

    pub fn control_surface(&self, k: usize) -> &[f64] {
        &self.controls[k]
    }

    pub fn brownian_dim(&self) -> usize {
        self.brownian_dim
    }

    /// Value at the (deterministic) start state.
    pub fn y0(&self) -> f64 {
        self.values[0][0]
    }

    /// Control at the start state.
    pub fn z0(&self) -> &[f64] {
        &self.controls[0][..self.brownian_dim]
    }
}

/// Backward sweep of the explicit scheme with a per-step increment-weight
/// supplier (tensors are large; supplying them lazily keeps one step in
/// memory).
pub fn solve_bsde_with(
    chain: &QuantizedChain,
    problem: &BsdeProblem,
    mut lambda_for_step: impl FnMut(usize) -> Result<LambdaTensor, BsdeError>,
) -> Result<BsdeSolution, BsdeError> {
    let n = chain.steps();
    let q = chain.model().brownian_dim();
    let delta = chain.time_grid().delta();
    let sqrt_delta = delta.sqrt();

    let mut values = vec![Vec::new(); n + 1];
    let mut controls = vec![Vec::new(); n];
    let terminal_grid = chain.grid(n);
    values[n] = (0..terminal_grid.len())
        .map(|i| problem.terminal.evaluate(&terminal_grid.point(i)))
        .collect();

    for k in (0..n).rev() {
        let lambda = lambda_for_step(k)?;
        if lambda.rows() != chain.grid(k).len()
            || lambda.cols() != chain.grid(k + 1).len()
            || lambda.brownian_dim() != q
        {
            return Err(BsdeError::DimensionMismatch {
                what: "increment-weight tensor shape",
                expected: chain.grid(k).len(),
                found: lambda.rows(),
            });
        }
        let next = std::mem::take(&mut values[k + 1]);
        let matrix = chain.transition(k);
        let t = chain.time_grid().time(k);
        let grid_k = chain.grid(k);
        let step: Vec<(f64, Vec<f64>)> = (0..grid_k.len())
            .into_par_iter()
            .map(|i| {
                let cond_mean: f64 =
                    matrix.row(i).iter().zip(next.iter()).map(|(p, y)| p * y).sum();
                let mut control = vec![0.0; q];
                let block = lambda.row_block(i);
                for (j, y) in next.iter().enumerate() {
                    for (p, c) in control.iter_mut().enumerate() {
                        *c += y * block[j * q + p];
                    }
                }
                for c in control.iter_mut() {
                    *c /= sqrt_delta;
                }
                let x = grid_k.point(i);
                let value =
                    cond_mean + delta * problem.driver.evaluate(t, &x, cond_mean, &control);
                (value, control)
            })
            .collect();
        values[k + 1] = next;
        values[k] = step.iter().map(|(v, _)| *v).collect();
        controls[k] = step.into_iter().flat_map(|(_, c)| c).collect();
    }

    Ok(BsdeSolution { values, controls, brownian_dim: q })
}

/// Backward sweep with precomputed increment-weight tensors.
pub fn solve_bsde(
    chain: &QuantizedChain,
    lambdas: &[LambdaTensor],
    problem: &BsdeProblem,
) -> Result<BsdeSolution, BsdeError> {
    if lambdas.len() != chain.steps() {
        return Err(BsdeError::DimensionMismatch {
            what: "increment-weight tensors",
            expected: chain.steps(),
            found: lambdas.len(),
        });
    }
    solve_bsde_with(chain, problem, |k| Ok(lambdas[k].clone()))
}

/// Backward sweep computing the increment weights on the fly (closed form
/// when applicable, general evaluation otherwise).
pub fn solve_bsde_auto(
    chain: &QuantizedChain,
    problem: &BsdeProblem,
    cubature_1d: &CubatureRule,
) -> Result<BsdeSolution, BsdeError> {
    let model = chain.model().clone();
    let tg = *chain.time_grid();
    solve_bsde_with(chain, problem, move |k| {
        lambda_auto(&model, &tg, k, chain.grid(k), chain.grid(k + 1), cubature_1d)
    })
}

/// `E[Z 1{Z in (a, b)}]` for the standard normal.
pub fn truncated_increment_mean(a: f64, b: f64) -> f64 {
    normal_pdf_inf(a) - normal_pdf_inf(b)
}

fn normal_pdf_inf(u: f64) -> f64 {
    if u.is_finite() {
        normal_pdf(u)
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{build_chain, ChainOptions, LevelSchedule};
    use crate::model::builtin_model;
    use crate::quantizer::MarginalQuantizer;

    fn params(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn line_grid(points: &[f64]) -> ProductGrid {
        ProductGrid::new(vec![MarginalQuantizer::new(0, points.to_vec()).unwrap()])
    }

    #[test]
    fn full_line_cell_centers_to_zero() {
        let model = builtin_model("unit_brownian", &params(&[("d", 1.0)])).unwrap();
        let tg = TimeGrid::new(1.0, 2).unwrap();
        let source = line_grid(&[0.0]);
        let target = line_grid(&[0.0]);
        let t = lambda_independent(&model, &tg, 0, &source, &target).unwrap();
        assert_eq!(t.entry(0, 0, 0), 0.0);
    }

    #[test]
    fn half_line_cell_is_the_truncated_mean() {
        let model = builtin_model("unit_brownian", &params(&[("d", 1.0)])).unwrap();
        let tg = TimeGrid::new(1.0, 1).unwrap();
        let source = line_grid(&[0.0]);
        let target = line_grid(&[-1.0, 1.0]); // boundary at 0
        let t = lambda_independent(&model, &tg, 0, &source, &target).unwrap();
        let want = crate::gaussian::FRAC_1_SQRT_2PI;
        assert!((t.entry(0, 1, 0) - want).abs() < 1e-14, "{}", t.entry(0, 1, 0));
        assert!((t.entry(0, 0, 0) + want).abs() < 1e-14);
        assert!((truncated_increment_mean(0.0, f64::INFINITY) - want).abs() < 1e-16);
    }

    #[test]
    fn general_matches_independent_on_diagonal_model() {
        let model = builtin_model("unit_brownian", &params(&[("d", 2.0)])).unwrap();
        let tg = TimeGrid::new(1.0, 4).unwrap();
        let levels = LevelSchedule::uniform(4, 2, 4).unwrap();
        let rule = CubatureRule::gauss_hermite(1, 32).unwrap();
        let chain = build_chain(&model, &tg, &levels, &rule, &ChainOptions::default()).unwrap();
        let k = 1;
        let rule64 = CubatureRule::gauss_hermite(1, 64).unwrap();
        let ind = lambda_independent(&model, &tg, k, chain.grid(k), chain.grid(k + 1)).unwrap();
        let gen =
            lambda_general(&model, &tg, k, chain.grid(k), chain.grid(k + 1), &rule64).unwrap();
        for i in 0..ind.rows() {
            for j in 0..ind.cols() {
                for p in 0..2 {
                    assert!(
                        (ind.entry(i, j, p) - gen.entry(i, j, p)).abs() < 1e-8,
                        "entry ({i},{j},{p}): {} vs {}",
                        ind.entry(i, j, p),
                        gen.entry(i, j, p)
                    );
                }
            }
        }
    }

    #[test]
    fn rows_center_to_zero() {
        let model = builtin_model(
            "basket2d",
            &params(&[("r", 0.04), ("sigma1", 0.3), ("sigma2", 0.4), ("rho", 0.5)]),
        )
        .unwrap();
        let tg = TimeGrid::new(1.0, 3).unwrap();
        let levels = LevelSchedule::uniform(3, 2, 5).unwrap();
        let rule = CubatureRule::gauss_hermite(1, 32).unwrap();
        let chain = build_chain(&model, &tg, &levels, &rule, &ChainOptions::default()).unwrap();
        let k = 1;
        let t = lambda_general(&model, &tg, k, chain.grid(k), chain.grid(k + 1), &rule).unwrap();
        for i in 0..t.rows() {
            for p in 0..2 {
                assert!(t.row_sum(i, p).abs() < 1e-7, "row {i} coord {p}: {}", t.row_sum(i, p));
            }
        }
    }

    #[test]
    fn lambda_rows_match_monte_carlo_on_basket() {
        let model = builtin_model(
            "basket2d",
            &params(&[("r", 0.04), ("sigma1", 0.3), ("sigma2", 0.4), ("rho", 0.5)]),
        )
        .unwrap();
        let tg = TimeGrid::new(1.0, 3).unwrap();
        let levels = LevelSchedule::uniform(3, 2, 4).unwrap();
        let rule = CubatureRule::gauss_hermite(1, 32).unwrap();
        let chain = build_chain(&model, &tg, &levels, &rule, &ChainOptions::default()).unwrap();
        let k = 1;
        let t = lambda_general(&model, &tg, k, chain.grid(k), chain.grid(k + 1), &rule).unwrap();
        let i = 5;
        let est = crate::oracle::mc_lambda_row(
            &model,
            &tg,
            k,
            &chain.grid(k).point(i),
            chain.grid(k + 1),
            300_000,
            2024,
        )
        .unwrap();
        for p in 0..2 {
            for j in 0..t.cols() {
                let tol = 3.0 * est[p][j].std_error + 3.0 / est[p][j].samples as f64;
                assert!(
                    (t.entry(i, j, p) - est[p][j].value).abs() <= tol,
                    "entry ({j},{p}): closed {} vs mc {} (tol {tol})",
                    t.entry(i, j, p),
                    est[p][j].value
                );
            }
        }
    }

    #[test]
    fn zero_driver_reduces_to_terminal_expectation() {
        let model = builtin_model("black_scholes", &params(&[("mu", 0.1), ("sigma", 0.3)])).unwrap();
        let tg = TimeGrid::new(0.5, 8).unwrap();
        let levels = LevelSchedule::uniform(8, 1, 20).unwrap();
        let rule = CubatureRule::gauss_hermite(1, 8).unwrap();
        let chain = build_chain(&model, &tg, &levels, &rule, &ChainOptions::default()).unwrap();
        let problem = BsdeProblem {
            driver: Arc::new(ZeroDriver),
            terminal: Terminal::Call { strike: 100.0 },
        };
        let sol = solve_bsde_auto(&chain, &problem, &rule).unwrap();
        let expect = chain.expectation(8, |x| (x[0] - 100.0).max(0.0));
        assert!((sol.y0() - expect).abs() < 1e-12, "{} vs {expect}", sol.y0());
    }

    #[test]
    fn linear_driver_discounts_each_step() {
        struct Discount;
        impl Driver for Discount {
            fn name(&self) -> &'static str {
                "discount"
            }
            fn evaluate(&self, _t: f64, _x: &[f64], y: f64, _z: &[f64]) -> f64 {
                -0.1 * y
            }
        }
        let model = builtin_model("black_scholes", &params(&[("mu", 0.1), ("sigma", 0.3)])).unwrap();
        let tg = TimeGrid::new(0.5, 6).unwrap();
        let levels = LevelSchedule::uniform(6, 1, 15).unwrap();
        let rule = CubatureRule::gauss_hermite(1, 8).unwrap();
        let chain = build_chain(&model, &tg, &levels, &rule, &ChainOptions::default()).unwrap();
        let problem = BsdeProblem {
            driver: Arc::new(Discount),
            terminal: Terminal::Call { strike: 100.0 },
        };
        let sol = solve_bsde_auto(&chain, &problem, &rule).unwrap();
        // the explicit scheme gives exactly y_k = (1 - r delta) E[y_{k+1}]
        let factor = 1.0 - 0.1 * tg.delta();
        let mut expect: Vec<f64> = (0..chain.grid(6).len())
            .map(|i| (chain.grid(6).point(i)[0] - 100.0).max(0.0))
            .collect();
        for k in (0..6).rev() {
            let m = chain.transition(k);
            expect = (0..chain.grid(k).len())
                .map(|i| {
                    factor * m.row(i).iter().zip(expect.iter()).map(|(p, y)| p * y).sum::<f64>()
                })
                .collect();
        }
        assert!((sol.y0() - expect[0]).abs() < 1e-12);
    }

    #[test]
    fn precomputed_and_lazy_sweeps_agree_exactly() {
        let model = builtin_model("unit_brownian", &params(&[("d", 2.0)])).unwrap();
        let tg = TimeGrid::new(0.5, 4).unwrap();
        let levels = LevelSchedule::uniform(4, 2, 4).unwrap();
        let rule = CubatureRule::gauss_hermite(1, 16).unwrap();
        let chain = build_chain(&model, &tg, &levels, &rule, &ChainOptions::default()).unwrap();
        let problem = BsdeProblem {
            driver: builtin_driver("chassagneux", &params(&[("d", 2.0)])).unwrap(),
            terminal: Terminal::SigmoidSum { shift: 0.5 },
        };
        let lambdas: Vec<LambdaTensor> = (0..4)
            .map(|k| lambda_independent(&model, &tg, k, chain.grid(k), chain.grid(k + 1)).unwrap())
            .collect();
        let a = solve_bsde(&chain, &lambdas, &problem).unwrap();
        let b = solve_bsde_auto(&chain, &problem, &rule).unwrap();
        assert_eq!(a.y0(), b.y0());
        assert_eq!(a.z0(), b.z0());
        assert_eq!(a.value_surface(2), b.value_surface(2));
    }

    #[test]
    fn comparison_principle_smoke() {
        let model = builtin_model("black_scholes", &params(&[("mu", 0.1), ("sigma", 0.3)])).unwrap();
        let tg = TimeGrid::new(0.5, 5).unwrap();
        let levels = LevelSchedule::uniform(5, 1, 12).unwrap();
        let rule = CubatureRule::gauss_hermite(1, 8).unwrap();
        let chain = build_chain(&model, &tg, &levels, &rule, &ChainOptions::default()).unwrap();
        let lower = BsdeProblem {
            driver: Arc::new(ZeroDriver),
            terminal: Terminal::Call { strike: 110.0 },
        };
        let higher = BsdeProblem {
            driver: Arc::new(ZeroDriver),
            terminal: Terminal::Call { strike: 90.0 },
        };
        let a = solve_bsde_auto(&chain, &lower, &rule).unwrap();
        let b = solve_bsde_auto(&chain, &higher, &rule).unwrap();
        assert!(a.y0() <= b.y0());
    }

    #[test]
    fn driver_registry() {
        assert!(builtin_driver("zero", &params(&[])).is_ok());
        assert!(builtin_driver("bs_hedge", &params(&[("r", 0.1), ("mu", 0.2), ("sigma", 0.3)]))
            .is_ok());
        assert!(matches!(
            builtin_driver("bs_hedge", &params(&[("r", 0.1)])),
            Err(BsdeError::DriverParameter { .. })
        ));
        assert!(matches!(
            builtin_driver("nope", &params(&[])),
            Err(BsdeError::UnknownDriver(_))
        ));
        let d = builtin_driver("chassagneux", &params(&[("d", 2.0)])).unwrap();
        assert!((d.evaluate(0.0, &[0.0, 0.0], 1.0, &[0.25, 0.25]) - 0.5 * 0.0).abs() < 1e-15);
    }

    #[test]
    fn terminal_shapes() {
        assert_eq!(Terminal::Call { strike: 100.0 }.evaluate(&[110.0, 5.0]), 10.0);
        assert_eq!(Terminal::Put { strike: 100.0 }.evaluate(&[110.0]), 0.0);
        let w = Terminal::WeightedCall { weights: vec![0.5, 0.5], strike: 100.0 };
        assert_eq!(w.evaluate(&[120.0, 100.0]), 10.0);
        let s = Terminal::SigmoidSum { shift: 0.0 };
        assert!((s.evaluate(&[0.0, 0.0]) - 0.5).abs() < 1e-15);
    }
}
