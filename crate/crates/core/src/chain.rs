//! Recursive construction of the quantized Markov chain: per-step marginal
//! grid optimization, product grids, and transition matrices from the
//! semi-closed Gaussian formulas.
//!
//! Transition computation sits behind the [`TransitionKernel`] trait. The
//! diagonal kernel is exact (a product of 1D CDF differences) and applies
//! when the volatility matrix is diagonal with positive diagonal at every
//! source point; the general kernel conditions on the first Brownian
//! coordinate and integrates the remaining q-1 coordinates with a cubature
//! rule. `auto` selection walks the registry and takes the first applicable
//! kernel.

use rayon::prelude::*;
use thiserror::Error;

use crate::gaussian::{normal_cdf, CubatureRule};
use crate::model::{euler_rows, DiffusionModel, EulerRow, ModelError, TimeGrid};
use crate::quantizer::{
    optimize, MarginalQuantizer, MixtureComponent, MixtureSource, OptimizerOptions, QuantizerError,
};

/// Entries of sigma's first column within this of zero are treated as zero
/// when partitioning components by sign.
const SIGN_EPS: f64 = 1e-14;

#[derive(Debug, Error)]
pub enum ChainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("step {step}, component {component}: {source}")]
    Quantizer { step: usize, component: usize, source: QuantizerError },
    #[error("step {step}: product grid holds {cells} cells, cap is {cap}")]
    CapacityExceeded { step: usize, cells: u128, cap: usize },
    #[error("{what}: expected dimension {expected}, found {found}")]
    DimensionMismatch { what: &'static str, expected: usize, found: usize },
    #[error("step {step}: volatility is not diagonal with positive diagonal ({reason})")]
    NotDiagonal { step: usize, reason: String },
    #[error("step {step}, row {row}: transition row has no mass")]
    EmptyTransitionRow { step: usize, row: usize },
    #[error("invalid level schedule: {0}")]
    InvalidLevels(String),
    #[error("step {step}: conditioning component {component} cell {index} carries no mass")]
    ZeroConditioningMass { step: usize, component: usize, index: usize },
    #[error("unknown transition kernel '{0}'")]
    UnknownKernel(String),
}

/// Cartesian product of per-component 1D grids with flat row-major indexing
/// (last component fastest).
#[derive(Debug, Clone)]
pub struct ProductGrid {
    marginals: Vec<MarginalQuantizer>,
    strides: Vec<usize>,
    len: usize,
}

impl ProductGrid {
    pub fn new(marginals: Vec<MarginalQuantizer>) -> Self {
        assert!(!marginals.is_empty(), "product grid needs at least one component");
        let d = marginals.len();
        let mut strides = vec![1usize; d];
        for l in (0..d - 1).rev() {
            strides[l] = strides[l + 1] * marginals[l + 1].len();
        }
        let len = strides[0] * marginals[0].len();
        Self { marginals, strides, len }
    }

    pub fn dim(&self) -> usize {
        self.marginals.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn marginal(&self, l: usize) -> &MarginalQuantizer {
        &self.marginals[l]
    }

    pub fn marginals(&self) -> &[MarginalQuantizer] {
        &self.marginals
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        multi.iter().zip(self.strides.iter()).map(|(i, s)| i * s).sum()
    }

    pub fn multi_index(&self, flat: usize) -> Vec<usize> {
        let mut rem = flat;
        self.strides
            .iter()
            .map(|s| {
                let i = rem / s;
                rem %= s;
                i
            })
            .collect()
    }

    pub fn point_into(&self, flat: usize, out: &mut [f64]) {
        let mut rem = flat;
        for (l, s) in self.strides.iter().enumerate() {
            out[l] = self.marginals[l].point(rem / s);
            rem %= s;
        }
    }

    pub fn point(&self, flat: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.point_into(flat, &mut out);
        out
    }
}

/// Row-stochastic transition matrix between two consecutive product grids.
#[derive(Debug, Clone)]
pub struct TransitionMatrix {
    step: usize,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    max_row_defect: f64,
}

impl TransitionMatrix {
    fn from_raw_rows(step: usize, cols: usize, raw: Vec<Vec<f64>>) -> Result<Self, ChainError> {
        let rows = raw.len();
        let mut data = Vec::with_capacity(rows * cols);
        let mut max_defect = 0.0f64;
        for (i, mut row) in raw.into_iter().enumerate() {
            debug_assert_eq!(row.len(), cols);
            let sum: f64 = row.iter().sum();
            if !(sum.is_finite() && sum > 0.0) {
                return Err(ChainError::EmptyTransitionRow { step, row: i });
            }
            max_defect = max_defect.max((sum - 1.0).abs());
            for v in row.iter_mut() {
                *v = v.max(0.0) / sum;
            }
            data.extend_from_slice(&row);
        }
        Ok(Self { step, rows, cols, data, max_row_defect: max_defect })
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

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// Largest pre-normalization row-sum deviation from one.
    pub fn max_row_defect(&self) -> f64 {
        self.max_row_defect
    }

    /// `weights * P`, the forward weight recursion; fixed accumulation order
    /// so the propagated law is reproducible bit for bit.
    pub fn propagate(&self, weights: &[f64]) -> Vec<f64> {
        assert_eq!(weights.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (i, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (o, &p) in out.iter_mut().zip(self.row(i)) {
                *o += w * p;
            }
        }
        out
    }
}

/// Half-open cell lookup: the index j with `boundary(j) <= v < boundary(j+1)`,
/// so mass sitting exactly on a boundary goes to the right cell. Used for the
/// indicator factors of degenerate components.
pub(crate) fn halfopen_cell(marginal: &MarginalQuantizer, v: f64) -> usize {
    let n = marginal.len();
    let mut lo = 0usize;
    let mut hi = n - 1;
    while lo < hi {
        let mid = (lo + hi) / 2;
        if v < marginal.boundary(mid + 1) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    lo
}

/// Strategy interface for one-step transition computation.
pub trait TransitionKernel: Send + Sync {
    fn name(&self) -> &'static str;
    /// Whether this kernel's preconditions hold for the given step.
    fn applicable(
        &self,
        model: &DiffusionModel,
        grid: &TimeGrid,
        k: usize,
        source: &ProductGrid,
    ) -> bool;
    fn transition(
        &self,
        model: &DiffusionModel,
        grid: &TimeGrid,
        k: usize,
        source: &ProductGrid,
        target: &ProductGrid,
    ) -> Result<TransitionMatrix, ChainError>;
}

/// Exact product-of-CDF-differences kernel for diagonal volatility with
/// positive diagonal entries.
pub struct DiagonalKernel;

/// Checks sigma(t_k, x) at a single point: square, off-diagonal zero,
/// positive diagonal.
fn diagonal_at(model: &DiffusionModel, t: f64, x: &[f64]) -> Result<(), String> {
    let (d, q) = (model.state_dim(), model.brownian_dim());
    if d != q {
        return Err(format!("matrix is {d}x{q}, not square"));
    }
    let mut s = vec![0.0; d * q];
    model.diffusion(t, x, &mut s);
    for l in 0..d {
        for p in 0..q {
            let v = s[l * q + p];
            if l == p {
                if !(v > 0.0) {
                    return Err(format!("diagonal entry ({l},{l}) = {v} at {x:?}"));
                }
            } else if v.abs() > SIGN_EPS {
                return Err(format!("off-diagonal entry ({l},{p}) = {v} at {x:?}"));
            }
        }
    }
    Ok(())
}

fn validate_diagonal(
    model: &DiffusionModel,
    grid: &TimeGrid,
    k: usize,
    source: &ProductGrid,
) -> Result<(), String> {
    let mut x = vec![0.0; source.dim()];
    for i in 0..source.len() {
        source.point_into(i, &mut x);
        diagonal_at(model, grid.time(k), &x)?;
    }
    Ok(())
}

impl TransitionKernel for DiagonalKernel {
    fn name(&self) -> &'static str {
        "diagonal"
    }

    fn applicable(
        &self,
        model: &DiffusionModel,
        grid: &TimeGrid,
        k: usize,
        source: &ProductGrid,
    ) -> bool {
        validate_diagonal(model, grid, k, source).is_ok()
    }

    fn transition(
        &self,
        model: &DiffusionModel,
        grid: &TimeGrid,
        k: usize,
        source: &ProductGrid,
        target: &ProductGrid,
    ) -> Result<TransitionMatrix, ChainError> {
        validate_diagonal(model, grid, k, source)
            .map_err(|reason| ChainError::NotDiagonal { step: k, reason })?;
        let d = source.dim();
        let raw: Vec<Vec<f64>> = (0..source.len())
            .into_par_iter()
            .map(|i| -> Result<Vec<f64>, ChainError> {
                let x = source.point(i);
                let rows = euler_rows(model, grid, k, &x)?;
                // per component: cell masses of N(mean, std^2) on the target marginal
                let cell_mass: Vec<Vec<f64>> = (0..d)
                    .map(|l| {
                        let marg = target.marginal(l);
                        let cdfs: Vec<f64> = (0..=marg.len())
                            .map(|b| normal_cdf((marg.boundary(b) - rows[l].mean) / rows[l].std_dev))
                            .collect();
                        (0..marg.len()).map(|j| cdfs[j + 1] - cdfs[j]).collect()
                    })
                    .collect();
                let mut row = vec![0.0; target.len()];
                let mut multi = vec![0usize; d];
                for entry in row.iter_mut() {
                    let mut v = 1.0;
                    for l in 0..d {
                        v *= cell_mass[l][multi[l]];
                    }
                    *entry = v;
                    for l in (0..d).rev() {
                        multi[l] += 1;
                        if multi[l] < target.marginal(l).len() {
                            break;
                        }
                        multi[l] = 0;
                    }
                }
                Ok(row)
            })
            .collect::<Result<_, _>>()?;
        TransitionMatrix::from_raw_rows(k, target.len(), raw)
    }
}

/// Cubature kernel for general volatility: the first Brownian coordinate is
/// integrated in closed form (interval masses between the tightest cell
/// bounds), the remaining q-1 coordinates by the rule.
pub struct GeneralKernel {
    cubature: CubatureRule,
}

impl GeneralKernel {
    pub fn new(cubature: CubatureRule) -> Self {
        Self { cubature }
    }

    fn check_dimension(&self, model: &DiffusionModel) -> Result<(), ChainError> {
        let q = model.brownian_dim();
        if q > 1 && self.cubature.dimension() != q - 1 {
            return Err(ChainError::DimensionMismatch {
                what: "cubature rule for the general transition kernel",
                expected: q - 1,
                found: self.cubature.dimension(),
            });
        }
        Ok(())
    }

    fn row(
        &self,
        model: &DiffusionModel,
        grid: &TimeGrid,
        k: usize,
        x: &[f64],
        target: &ProductGrid,
    ) -> Result<Vec<f64>, ChainError> {
        let rows = euler_rows(model, grid, k, x)?;
        let sqrt_delta = grid.delta().sqrt();
        // when every component is driven by at most one Brownian coordinate
        // the entry factorizes into exact per-coordinate interval masses and
        // no cubature is needed
        let decoupled = rows
            .iter()
            .all(|r| r.vol_row.iter().filter(|v| v.abs() > SIGN_EPS).count() <= 1);
        if decoupled {
            Ok(decoupled_row(&rows, sqrt_delta, target))
        } else if rows.len() == 2 {
            // a genuinely coupled pair is exactly bivariate normal; rectangle
            // masses through the bivariate CDF avoid the kinked cubature
            // integrand entirely
            Ok(bivariate_row(&rows, target))
        } else {
            Ok(self.cubature_row(&rows, sqrt_delta, model.brownian_dim(), target))
        }
    }

    fn cubature_row(
        &self,
        rows: &[EulerRow],
        sqrt_delta: f64,
        q: usize,
        target: &ProductGrid,
    ) -> Vec<f64> {
        let d = rows.len();
        let signs: Vec<Sign> = rows.iter().map(|r| Sign::of(r.vol_row[0])).collect();
        let node_count = if q == 1 { 1 } else { self.cubature.len() };
        let mut out = vec![0.0; target.len()];
        // per component, CDF values of the standardized cell bounds in
        // Phi-space: lower[l][j], upper[l][j]
        let mut lower: Vec<Vec<f64>> = (0..d).map(|l| vec![0.0; target.marginal(l).len()]).collect();
        let mut upper: Vec<Vec<f64>> = (0..d).map(|l| vec![0.0; target.marginal(l).len()]).collect();
        let mut owner = vec![usize::MAX; d];

        for m in 0..node_count {
            let (z, w): (&[f64], f64) =
                if q == 1 { (&[], 1.0) } else { (self.cubature.node(m), self.cubature.weight(m)) };
            for l in 0..d {
                let marg = target.marginal(l);
                let dot: f64 = sqrt_delta
                    * rows[l].vol_row[1..].iter().zip(z.iter()).map(|(a, b)| a * b).sum::<f64>();
                match signs[l] {
                    Sign::Zero => {
                        owner[l] = halfopen_cell(marg, rows[l].mean + dot);
                    }
                    Sign::Plus | Sign::Minus => {
                        let scale = sqrt_delta * rows[l].vol_row[0];
                        phi_bounds(
                            marg,
                            rows[l].mean + dot,
                            scale,
                            &mut lower[l],
                            &mut upper[l],
                        );
                    }
                }
            }

            let mut multi = vec![0usize; d];
            for entry in out.iter_mut() {
                let mut keep = true;
                let mut phi_alpha = 0.0f64;
                let mut phi_beta = 1.0f64;
                for l in 0..d {
                    match signs[l] {
                        Sign::Zero => {
                            if multi[l] != owner[l] {
                                keep = false;
                                break;
                            }
                        }
                        _ => {
                            phi_alpha = phi_alpha.max(lower[l][multi[l]]);
                            phi_beta = phi_beta.min(upper[l][multi[l]]);
                        }
                    }
                }
                if keep {
                    *entry += w * (phi_beta - phi_alpha).max(0.0);
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
        out
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Sign {
    Zero,
    Plus,
    Minus,
}

impl Sign {
    fn of(v: f64) -> Self {
        if v.abs() <= SIGN_EPS {
            Sign::Zero
        } else if v > 0.0 {
            Sign::Plus
        } else {
            Sign::Minus
        }
    }
}

/// Fills per-cell standardized bounds in Phi-space for the event
/// `mean + scale * Z in cell`; a negative `scale` reverses the interval.
pub(crate) fn phi_bounds(
    marg: &MarginalQuantizer,
    mean: f64,
    scale: f64,
    lower: &mut [f64],
    upper: &mut [f64],
) {
    let n = marg.len();
    let mut prev = normal_cdf((marg.boundary(0) - mean) / scale);
    for j in 0..n {
        let cur = normal_cdf((marg.boundary(j + 1) - mean) / scale);
        if scale > 0.0 {
            lower[j] = prev;
            upper[j] = cur;
        } else {
            lower[j] = cur;
            upper[j] = prev;
        }
        prev = cur;
    }
}

/// Exact transition row for a coupled two-component state: cell masses are
/// rectangle probabilities of the bivariate normal one-step law, assembled
/// from a corner CDF table by inclusion-exclusion.
fn bivariate_row(rows: &[EulerRow], target: &ProductGrid) -> Vec<f64> {
    debug_assert_eq!(rows.len(), 2);
    // both rows carry volatility here: a degenerate row would have made the
    // source point decoupled
    let dot: f64 = rows[0].vol_row.iter().zip(rows[1].vol_row.iter()).map(|(a, b)| a * b).sum();
    let norm0: f64 = rows[0].vol_row.iter().map(|v| v * v).sum::<f64>().sqrt();
    let norm1: f64 = rows[1].vol_row.iter().map(|v| v * v).sum::<f64>().sqrt();
    let rho = (dot / (norm0 * norm1)).clamp(-1.0, 1.0);
    let m0 = target.marginal(0);
    let m1 = target.marginal(1);
    let t0: Vec<f64> =
        (0..=m0.len()).map(|b| (m0.boundary(b) - rows[0].mean) / rows[0].std_dev).collect();
    let t1: Vec<f64> =
        (0..=m1.len()).map(|b| (m1.boundary(b) - rows[1].mean) / rows[1].std_dev).collect();
    let mut corner = vec![0.0; t0.len() * t1.len()];
    for (b0, u) in t0.iter().enumerate() {
        for (b1, v) in t1.iter().enumerate() {
            corner[b0 * t1.len() + b1] = crate::gaussian::bivariate_normal_cdf(*u, *v, rho);
        }
    }
    let mut out = vec![0.0; target.len()];
    for j0 in 0..m0.len() {
        for j1 in 0..m1.len() {
            let c = |a: usize, b: usize| corner[a * t1.len() + b];
            let mass = c(j0 + 1, j1 + 1) - c(j0, j1 + 1) - c(j0 + 1, j1) + c(j0, j1);
            out[j0 * m1.len() + j1] = mass.max(0.0);
        }
    }
    out
}

/// Exact transition row when each component is driven by at most one
/// Brownian coordinate: coordinates are independent, so the entry is the
/// product over coordinates of the interval-intersection masses, times the
/// indicator cells of fully degenerate components.
fn decoupled_row(rows: &[EulerRow], sqrt_delta: f64, target: &ProductGrid) -> Vec<f64> {
    let d = rows.len();
    // driver[l]: the single Brownian coordinate moving component l, if any
    let drivers: Vec<Option<usize>> = rows
        .iter()
        .map(|r| r.vol_row.iter().position(|v| v.abs() > SIGN_EPS))
        .collect();
    let q = rows.first().map_or(0, |r| r.vol_row.len());
    let mut lower: Vec<Vec<f64>> = (0..d).map(|l| vec![0.0; target.marginal(l).len()]).collect();
    let mut upper: Vec<Vec<f64>> = (0..d).map(|l| vec![0.0; target.marginal(l).len()]).collect();
    let mut owner = vec![usize::MAX; d];
    for l in 0..d {
        let marg = target.marginal(l);
        match drivers[l] {
            Some(p) => {
                let scale = sqrt_delta * rows[l].vol_row[p];
                phi_bounds(marg, rows[l].mean, scale, &mut lower[l], &mut upper[l]);
            }
            None => owner[l] = halfopen_cell(marg, rows[l].mean),
        }
    }

    let mut out = vec![0.0; target.len()];
    let mut multi = vec![0usize; d];
    let mut alpha = vec![0.0f64; q];
    let mut beta = vec![1.0f64; q];
    for entry in out.iter_mut() {
        alpha.fill(0.0);
        beta.fill(1.0);
        let mut keep = true;
        for l in 0..d {
            match drivers[l] {
                Some(p) => {
                    alpha[p] = alpha[p].max(lower[l][multi[l]]);
                    beta[p] = beta[p].min(upper[l][multi[l]]);
                }
                None => {
                    if multi[l] != owner[l] {
                        keep = false;
                        break;
                    }
                }
            }
        }
        if keep {
            let mut v = 1.0;
            for p in 0..q {
                v *= (beta[p] - alpha[p]).max(0.0);
            }
            *entry = v;
        }
        for l in (0..d).rev() {
            multi[l] += 1;
            if multi[l] < target.marginal(l).len() {
                break;
            }
            multi[l] = 0;
        }
    }
    out
}

impl TransitionKernel for GeneralKernel {
    fn name(&self) -> &'static str {
        "general"
    }

    fn applicable(
        &self,
        model: &DiffusionModel,
        _grid: &TimeGrid,
        _k: usize,
        _source: &ProductGrid,
    ) -> bool {
        self.check_dimension(model).is_ok()
    }

    fn transition(
        &self,
        model: &DiffusionModel,
        grid: &TimeGrid,
        k: usize,
        source: &ProductGrid,
        target: &ProductGrid,
    ) -> Result<TransitionMatrix, ChainError> {
        self.check_dimension(model)?;
        let raw: Vec<Vec<f64>> = (0..source.len())
            .into_par_iter()
            .map(|i| self.row(model, grid, k, &source.point(i), target))
            .collect::<Result<_, _>>()?;
        TransitionMatrix::from_raw_rows(k, target.len(), raw)
    }
}

/// Transition probabilities between product grids via the cubature kernel
/// (exact closed form when q = 1).
pub fn transition_general(
    model: &DiffusionModel,
    grid: &TimeGrid,
    k: usize,
    source: &ProductGrid,
    target: &ProductGrid,
    cubature: &CubatureRule,
) -> Result<TransitionMatrix, ChainError> {
    GeneralKernel::new(cubature.clone()).transition(model, grid, k, source, target)
}

/// Transition probabilities for diagonal volatility, exact.
pub fn transition_diagonal(
    model: &DiffusionModel,
    grid: &TimeGrid,
    k: usize,
    source: &ProductGrid,
    target: &ProductGrid,
) -> Result<TransitionMatrix, ChainError> {
    DiagonalKernel.transition(model, grid, k, source, target)
}

/// One component's conditional cell masses: entry `(i, j)` is the probability
/// that component `l` of the Euler step from source point `i` lands in cell
/// `j` of `target_marginal`. Rows sum to one up to CDF rounding.
pub fn transition_component(
    model: &DiffusionModel,
    grid: &TimeGrid,
    k: usize,
    source: &ProductGrid,
    l: usize,
    target_marginal: &MarginalQuantizer,
) -> Result<Vec<Vec<f64>>, ChainError> {
    if l >= model.state_dim() {
        return Err(ChainError::DimensionMismatch {
            what: "component index",
            expected: model.state_dim(),
            found: l,
        });
    }
    (0..source.len())
        .into_par_iter()
        .map(|i| -> Result<Vec<f64>, ChainError> {
            let x = source.point(i);
            let rows = euler_rows(model, grid, k, &x)?;
            let row = &rows[l];
            let n = target_marginal.len();
            let mut out = vec![0.0; n];
            if row.std_dev == 0.0 {
                out[target_marginal.cell_of(row.mean)] = 1.0;
            } else {
                let mut prev = normal_cdf((target_marginal.boundary(0) - row.mean) / row.std_dev);
                for (j, entry) in out.iter_mut().enumerate() {
                    let cur =
                        normal_cdf((target_marginal.boundary(j + 1) - row.mean) / row.std_dev);
                    *entry = cur - prev;
                    prev = cur;
                }
            }
            Ok(out)
        })
        .collect()
}

/// Per-step per-component grid sizes; step 0 always holds a single point per
/// component (the initial state is deterministic).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelSchedule {
    sizes: Vec<Vec<usize>>,
}

impl LevelSchedule {
    /// Same size for every component and every step k >= 1.
    pub fn uniform(steps: usize, dim: usize, size: usize) -> Result<Self, ChainError> {
        Self::per_component(steps, &vec![size; dim])
    }

    /// Per-component sizes shared by every step k >= 1.
    pub fn per_component(steps: usize, sizes: &[usize]) -> Result<Self, ChainError> {
        let mut table = vec![vec![1usize; sizes.len()]];
        table.extend(std::iter::repeat_with(|| sizes.to_vec()).take(steps));
        Self::from_table(table)
    }

    /// Full table: row k holds the component sizes of step k, row 0 must be
    /// all ones.
    pub fn from_table(sizes: Vec<Vec<usize>>) -> Result<Self, ChainError> {
        if sizes.len() < 2 {
            return Err(ChainError::InvalidLevels("need at least one time step".into()));
        }
        let dim = sizes[0].len();
        if dim == 0 {
            return Err(ChainError::InvalidLevels("empty component list".into()));
        }
        if sizes.iter().any(|row| row.len() != dim) {
            return Err(ChainError::InvalidLevels("ragged table".into()));
        }
        if sizes[0].iter().any(|&n| n != 1) {
            return Err(ChainError::InvalidLevels(
                "step 0 sizes must all be 1 (deterministic start)".into(),
            ));
        }
        if sizes.iter().flatten().any(|&n| n == 0) {
            return Err(ChainError::InvalidLevels("sizes must be positive".into()));
        }
        Ok(Self { sizes })
    }

    pub fn steps(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.sizes[0].len()
    }

    pub fn size(&self, step: usize, component: usize) -> usize {
        self.sizes[step][component]
    }

    pub fn step_sizes(&self, step: usize) -> &[usize] {
        &self.sizes[step]
    }

    pub fn cells(&self, step: usize) -> u128 {
        self.sizes[step].iter().map(|&n| n as u128).product()
    }
}

/// Transition kernel selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KernelChoice {
    /// First applicable kernel in registry order (diagonal before general).
    #[default]
    Auto,
    General,
    Diagonal,
}

impl KernelChoice {
    pub fn parse(name: &str) -> Result<Self, ChainError> {
        match name {
            "auto" => Ok(Self::Auto),
            "general" => Ok(Self::General),
            "diagonal" => Ok(Self::Diagonal),
            other => Err(ChainError::UnknownKernel(other.to_string())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ChainOptions {
    pub optimizer: OptimizerOptions,
    pub kernel: KernelChoice,
    /// Largest admissible product-grid size per step.
    pub cell_cap: usize,
    /// Best-effort acceptance for marginal grids: when the optimizer exhausts
    /// its iterations, its best grid is still taken if the stationarity
    /// residual is below `accept_residual * max(1, mixture std)`. Mixtures
    /// with point masses (e.g. a truncated variance at zero) have kinked
    /// distortions whose residual cannot reach the Newton tolerance.
    pub accept_residual: f64,
}

impl Default for ChainOptions {
    fn default() -> Self {
        Self {
            optimizer: OptimizerOptions::default(),
            kernel: KernelChoice::Auto,
            cell_cap: 1_000_000,
            accept_residual: 1e-5,
        }
    }
}

/// The quantized chain: product grids, weights, transition matrices and the
/// per-component conditional transition cache for every step.
#[derive(Debug)]
pub struct QuantizedChain {
    model: DiffusionModel,
    time_grid: TimeGrid,
    grids: Vec<ProductGrid>,
    weights: Vec<Vec<f64>>,
    transitions: Vec<TransitionMatrix>,
    /// `component_transitions[k][l][i][j]`: cell masses of component l's move
    /// from source point i of step k into the marginal cells of step k+1.
    component_transitions: Vec<Vec<Vec<Vec<f64>>>>,
    /// `component_weights[k][l][j]` from the one-step marginal formula.
    component_weights: Vec<Vec<Vec<f64>>>,
    kernel_names: Vec<&'static str>,
}

impl QuantizedChain {
    pub fn model(&self) -> &DiffusionModel {
        &self.model
    }

    pub fn time_grid(&self) -> &TimeGrid {
        &self.time_grid
    }

    pub fn steps(&self) -> usize {
        self.time_grid.steps()
    }

    pub fn grid(&self, k: usize) -> &ProductGrid {
        &self.grids[k]
    }

    pub fn weights(&self, k: usize) -> &[f64] {
        &self.weights[k]
    }

    pub fn transition(&self, k: usize) -> &TransitionMatrix {
        &self.transitions[k]
    }

    pub fn component_transition(&self, k: usize, l: usize) -> &[Vec<f64>] {
        &self.component_transitions[k][l]
    }

    /// Marginal weights of component `l` at step `k` from the one-step
    /// component transition formula (not a marginalization of the joint law).
    pub fn component_weights(&self, k: usize, l: usize) -> &[f64] {
        &self.component_weights[k][l]
    }

    pub fn kernel_name(&self, k: usize) -> &'static str {
        self.kernel_names[k]
    }

    /// Chain expectation `E[f(X_k)]` against the step-k weights.
    pub fn expectation(&self, k: usize, f: impl Fn(&[f64]) -> f64) -> f64 {
        let grid = &self.grids[k];
        let mut x = vec![0.0; grid.dim()];
        self.weights[k]
            .iter()
            .enumerate()
            .map(|(i, w)| {
                grid.point_into(i, &mut x);
                w * f(&x)
            })
            .sum()
    }
}

/// Conditional transition between single components across one step,
/// `P(component l lands in target cell j_l | component l' sat in source cell
/// j_lp)`, by Bayes' formula against the step-k joint weights.
pub fn cross_component_transition(
    chain: &QuantizedChain,
    k: usize,
    l: usize,
    l_prime: usize,
    j_l: usize,
    j_lp: usize,
) -> Result<f64, ChainError> {
    let grid = chain.grid(k);
    let comp = chain.component_transition(k, l);
    let weights = chain.weights(k);
    let stride = grid.strides()[l_prime];
    let size = grid.marginal(l_prime).len();
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        if (i / stride) % size == j_lp {
            den += w;
            num += comp[i][j_l] * w;
        }
    }
    if den <= 0.0 {
        return Err(ChainError::ZeroConditioningMass { step: k, component: l_prime, index: j_lp });
    }
    Ok(num / den)
}

fn select_kernel<'a>(
    registry: &'a [Box<dyn TransitionKernel>],
    choice: KernelChoice,
    model: &DiffusionModel,
    grid: &TimeGrid,
    k: usize,
    source: &ProductGrid,
) -> Result<&'a dyn TransitionKernel, ChainError> {
    let by_name = |name: &str| registry.iter().find(|kn| kn.name() == name).map(|b| b.as_ref());
    match choice {
        KernelChoice::Auto => registry
            .iter()
            .map(|b| b.as_ref())
            .find(|kn| kn.applicable(model, grid, k, source))
            .ok_or(ChainError::DimensionMismatch {
                what: "no applicable transition kernel",
                expected: model.brownian_dim().saturating_sub(1),
                found: 0,
            }),
        KernelChoice::General => Ok(by_name("general").expect("registered")),
        KernelChoice::Diagonal => Ok(by_name("diagonal").expect("registered")),
    }
}

/// Runs the full recursion: optimizes every marginal grid step by step,
/// assembles product grids, computes transitions and propagates the weights.
pub fn build_chain(
    model: &DiffusionModel,
    time_grid: &TimeGrid,
    levels: &LevelSchedule,
    cubature: &CubatureRule,
    opts: &ChainOptions,
) -> Result<QuantizedChain, ChainError> {
    let d = model.state_dim();
    if levels.dim() != d {
        return Err(ChainError::DimensionMismatch {
            what: "level schedule components",
            expected: d,
            found: levels.dim(),
        });
    }
    if levels.steps() != time_grid.steps() {
        return Err(ChainError::DimensionMismatch {
            what: "level schedule steps",
            expected: time_grid.steps(),
            found: levels.steps(),
        });
    }
    for k in 0..=time_grid.steps() {
        let cells = levels.cells(k);
        if cells > opts.cell_cap as u128 {
            return Err(ChainError::CapacityExceeded { step: k, cells, cap: opts.cell_cap });
        }
    }

    let registry: Vec<Box<dyn TransitionKernel>> =
        vec![Box::new(DiagonalKernel), Box::new(GeneralKernel::new(cubature.clone()))];

    let x0 = model.initial_state();
    let start = ProductGrid::new(
        x0.iter()
            .enumerate()
            .map(|(l, &v)| MarginalQuantizer::new(l, vec![v]).expect("single point"))
            .collect(),
    );
    let mut grids = vec![start];
    let mut weights = vec![vec![1.0f64]];
    let mut transitions = Vec::new();
    let mut component_transitions = Vec::new();
    let mut component_weights = vec![vec![vec![1.0f64]; d]];
    let mut kernel_names = Vec::new();

    for k in 0..time_grid.steps() {
        let source = &grids[k];
        let w = &weights[k];

        // one-step Euler data at every source point, shared by the d
        // marginal optimizations
        let row_data: Vec<Vec<EulerRow>> = (0..source.len())
            .into_par_iter()
            .map(|i| euler_rows(model, time_grid, k, &source.point(i)))
            .collect::<Result<_, _>>()?;

        let mut marginals = Vec::with_capacity(d);
        for l in 0..d {
            let mixture = MixtureSource::new(
                row_data
                    .iter()
                    .zip(w.iter())
                    .map(|(rows, &p)| MixtureComponent {
                        mean: rows[l].mean,
                        std_dev: rows[l].std_dev,
                        weight: p,
                    })
                    .collect(),
            )
            .map_err(|source| ChainError::Quantizer { step: k + 1, component: l, source })?;
            let marg = match optimize(&mixture, levels.size(k + 1, l), &opts.optimizer) {
                Ok(m) => m,
                Err(QuantizerError::NonConvergence { best, residual })
                    if residual <= opts.accept_residual * mixture.std_dev().max(1.0) =>
                {
                    best
                }
                Err(source) => {
                    return Err(ChainError::Quantizer { step: k + 1, component: l, source })
                }
            };
            marginals.push(marg.with_component(l));
        }
        let target = ProductGrid::new(marginals);

        let kernel = select_kernel(&registry, opts.kernel, model, time_grid, k, source)?;
        kernel_names.push(kernel.name());
        let matrix = kernel.transition(model, time_grid, k, source, &target)?;
        let next_weights = matrix.propagate(&weights[k]);

        let mut comp_trans = Vec::with_capacity(d);
        let mut comp_weights = Vec::with_capacity(d);
        for l in 0..d {
            let tc = transition_component(model, time_grid, k, source, l, target.marginal(l))?;
            let mut cw = vec![0.0; target.marginal(l).len()];
            for (i, &wi) in weights[k].iter().enumerate() {
                for (o, &v) in cw.iter_mut().zip(tc[i].iter()) {
                    *o += wi * v;
                }
            }
            comp_trans.push(tc);
            comp_weights.push(cw);
        }

        grids.push(target);
        weights.push(next_weights);
        transitions.push(matrix);
        component_transitions.push(comp_trans);
        component_weights.push(comp_weights);
    }

    Ok(QuantizedChain {
        model: model.clone(),
        time_grid: *time_grid,
        grids,
        weights,
        transitions,
        component_transitions,
        component_weights,
        kernel_names,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin_model;
    use std::collections::BTreeMap;

    fn params(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn basket() -> DiffusionModel {
        builtin_model(
            "basket2d",
            &params(&[("r", 0.04), ("sigma1", 0.3), ("sigma2", 0.4), ("rho", 0.5)]),
        )
        .unwrap()
    }

    #[test]
    fn product_grid_indexing() {
        let g = ProductGrid::new(vec![
            MarginalQuantizer::new(0, vec![1.0, 2.0, 3.0]).unwrap(),
            MarginalQuantizer::new(1, vec![10.0, 20.0]).unwrap(),
        ]);
        assert_eq!(g.len(), 6);
        assert_eq!(g.strides(), &[2, 1]);
        assert_eq!(g.flat_index(&[2, 1]), 5);
        assert_eq!(g.multi_index(5), vec![2, 1]);
        assert_eq!(g.point(3), vec![2.0, 20.0]);
    }

    #[test]
    fn one_cell_chain_is_trivial() {
        let model = builtin_model("unit_brownian", &params(&[("d", 1.0)])).unwrap();
        let tg = TimeGrid::new(1.0, 1).unwrap();
        let levels = LevelSchedule::uniform(1, 1, 1).unwrap();
        let rule = CubatureRule::gauss_hermite(1, 4).unwrap();
        let chain = build_chain(&model, &tg, &levels, &rule, &ChainOptions::default()).unwrap();
        assert_eq!(chain.grid(1).len(), 1);
        assert!((chain.grid(1).point(0)[0] - 0.0).abs() < 1e-12);
        assert_eq!(chain.weights(1), &[1.0]);
        assert_eq!(chain.transition(0).entry(0, 0), 1.0);
    }

    #[test]
    fn diagonal_matches_general_on_unit_brownian() {
        let model = builtin_model("unit_brownian", &params(&[("d", 2.0)])).unwrap();
        let tg = TimeGrid::new(1.0, 4).unwrap();
        let levels = LevelSchedule::uniform(4, 2, 4).unwrap();
        let rule = CubatureRule::gauss_hermite(1, 32).unwrap();
        let chain = build_chain(&model, &tg, &levels, &rule, &ChainOptions::default()).unwrap();
        assert_eq!(chain.kernel_name(1), "diagonal");
        let k = 1;
        let dia = transition_diagonal(&model, &tg, k, chain.grid(k), chain.grid(k + 1)).unwrap();
        let gen = transition_general(&model, &tg, k, chain.grid(k), chain.grid(k + 1), &rule).unwrap();
        for i in 0..dia.rows() {
            for j in 0..dia.cols() {
                assert!(
                    (dia.entry(i, j) - gen.entry(i, j)).abs() < 1e-10,
                    "entry ({i},{j}): {} vs {}",
                    dia.entry(i, j),
                    gen.entry(i, j)
                );
            }
        }
    }

    #[test]
    fn one_dimensional_general_matches_component_formula() {
        let model = builtin_model("black_scholes", &params(&[("mu", 0.2), ("sigma", 0.3)])).unwrap();
        let tg = TimeGrid::new(1.0, 5).unwrap();
        let levels = LevelSchedule::uniform(5, 1, 8).unwrap();
        let rule = CubatureRule::gauss_hermite(1, 2).unwrap(); // unused for q = 1
        let chain = build_chain(&model, &tg, &levels, &rule, &ChainOptions::default()).unwrap();
        let k = 2;
        let gen =
            transition_general(&model, &tg, k, chain.grid(k), chain.grid(k + 1), &rule).unwrap();
        let comp =
            transition_component(&model, &tg, k, chain.grid(k), 0, chain.grid(k + 1).marginal(0))
                .unwrap();
        for i in 0..gen.rows() {
            let comp_sum: f64 = comp[i].iter().sum();
            for j in 0..gen.cols() {
                assert!((gen.entry(i, j) - comp[i][j] / comp_sum).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn single_cell_target_gets_total_mass() {
        let model = builtin_model("unit_brownian", &params(&[("d", 2.0)])).unwrap();
        let tg = TimeGrid::new(1.0, 2).unwrap();
        let source = ProductGrid::new(vec![
            MarginalQuantizer::new(0, vec![0.3]).unwrap(),
            MarginalQuantizer::new(1, vec![-0.2]).unwrap(),
        ]);
        let target = source.clone();
        let m = transition_diagonal(&model, &tg, 0, &source, &target).unwrap();
        assert_eq!(m.entry(0, 0), 1.0);
    }

    #[test]
    fn rows_are_stochastic_with_tiny_defect() {
        let model = basket();
        let tg = TimeGrid::new(1.0, 3).unwrap();
        let levels = LevelSchedule::uniform(3, 2, 6).unwrap();
        let rule = CubatureRule::gauss_hermite(1, 64).unwrap();
        let chain = build_chain(&model, &tg, &levels, &rule, &ChainOptions::default()).unwrap();
        for k in 0..3 {
            assert_eq!(chain.kernel_name(k), "general");
            let t = chain.transition(k);
            assert!(t.max_row_defect() < 1e-8, "step {k} defect {}", t.max_row_defect());
            for i in 0..t.rows() {
                let s: f64 = t.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(t.row(i).iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
            let w: f64 = chain.weights(k + 1).iter().sum();
            assert!((w - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_recursion_is_reproducible() {
        let model = basket();
        let tg = TimeGrid::new(1.0, 3).unwrap();
        let levels = LevelSchedule::uniform(3, 2, 5).unwrap();
        let rule = CubatureRule::gauss_hermite(1, 16).unwrap();
        let chain = build_chain(&model, &tg, &levels, &rule, &ChainOptions::default()).unwrap();
        // two-step propagation factors through the stored one-step laws, bit for bit
        let two_step = chain.transition(1).propagate(&chain.transition(0).propagate(chain.weights(0)));
        assert_eq!(two_step, chain.weights(2));
    }

    #[test]
    fn joint_marginalization_matches_component_transition() {
        let model = basket();
        let tg = TimeGrid::new(1.0, 2).unwrap();
        let levels = LevelSchedule::uniform(2, 2, 5).unwrap();
        let rule = CubatureRule::gauss_hermite(1, 64).unwrap();
        let chain = build_chain(&model, &tg, &levels, &rule, &ChainOptions::default()).unwrap();
        let k = 1;
        let joint = transition_general(&model, &tg, k, chain.grid(k), chain.grid(k + 1), &rule).unwrap();
        for l in 0..2 {
            let comp = chain.component_transition(k, l);
            let stride = chain.grid(k + 1).strides()[l];
            let size = chain.grid(k + 1).marginal(l).len();
            for i in 0..joint.rows() {
                for jl in 0..size {
                    let summed: f64 = (0..joint.cols())
                        .filter(|j| (j / stride) % size == jl)
                        .map(|j| joint.entry(i, j))
                        .sum();
                    assert!(
                        (summed - comp[i][jl]).abs() < 1e-6,
                        "component {l}, row {i}, cell {jl}: {summed} vs {}",
                        comp[i][jl]
                    );
                }
            }
        }
    }

    #[test]
    fn black_scholes_chain_mean_tracks_gbm() {
        let model =
            builtin_model("black_scholes", &params(&[("mu", 0.2), ("sigma", 0.3), ("x0", 100.0)]))
                .unwrap();
        let tg = TimeGrid::new(1.0, 20).unwrap();
        let levels = LevelSchedule::uniform(20, 1, 40).unwrap();
        let rule = CubatureRule::gauss_hermite(1, 2).unwrap();
        let chain = build_chain(&model, &tg, &levels, &rule, &ChainOptions::default()).unwrap();
        let mean = chain.expectation(20, |x| x[0]);
        let exact = 100.0 * (0.2f64).exp();
        assert!((mean - exact).abs() / exact < 2e-3, "chain mean {mean} vs {exact}");
    }

    #[test]
    fn marginal_grids_are_stationary_for_their_mixtures() {
        let model = basket();
        let tg = TimeGrid::new(1.0, 3).unwrap();
        let levels = LevelSchedule::uniform(3, 2, 6).unwrap();
        let rule = CubatureRule::gauss_hermite(1, 32).unwrap();
        let opts = ChainOptions::default();
        let chain = build_chain(&model, &tg, &levels, &rule, &opts).unwrap();
        for k in 0..3 {
            let source = chain.grid(k);
            for l in 0..2 {
                let mixture = MixtureSource::new(
                    (0..source.len())
                        .map(|i| {
                            let rows = euler_rows(&model, &tg, k, &source.point(i)).unwrap();
                            MixtureComponent {
                                mean: rows[l].mean,
                                std_dev: rows[l].std_dev,
                                weight: chain.weights(k)[i],
                            }
                        })
                        .collect(),
                )
                .unwrap();
                let marg = chain.grid(k + 1).marginal(l);
                let moved = crate::quantizer::lloyd_step(&mixture, marg);
                let tol = 10.0 * opts.optimizer.tolerance * mixture.std_dev().max(1.0);
                for j in 0..marg.len() {
                    assert!(
                        (moved.point(j) - marg.point(j)).abs() <= tol.max(1e-9 * marg.point(j).abs()),
                        "step {k} component {l} cell {j} moved by {}",
                        (moved.point(j) - marg.point(j)).abs()
                    );
                }
            }
        }
    }

    #[test]
    fn cross_component_rows_are_stochastic() {
        let model = basket();
        let tg = TimeGrid::new(1.0, 2).unwrap();
        let levels = LevelSchedule::uniform(2, 2, 5).unwrap();
        let rule = CubatureRule::gauss_hermite(1, 32).unwrap();
        let chain = build_chain(&model, &tg, &levels, &rule, &ChainOptions::default()).unwrap();
        let k = 1;
        for l in 0..2 {
            for lp in 0..2 {
                for jlp in 0..5 {
                    let total: f64 = (0..5)
                        .map(|jl| cross_component_transition(&chain, k, l, lp, jl, jlp).unwrap())
                        .sum();
                    assert!((total - 1.0).abs() < 1e-10, "l={l} l'={lp} cell {jlp}: {total}");
                }
            }
        }
    }

    #[test]
    fn single_cell_component_transition_is_all_ones() {
        let model = basket();
        let tg = TimeGrid::new(1.0, 2).unwrap();
        let source = ProductGrid::new(vec![
            MarginalQuantizer::new(0, vec![90.0, 110.0]).unwrap(),
            MarginalQuantizer::new(1, vec![100.0]).unwrap(),
        ]);
        let single = MarginalQuantizer::new(1, vec![100.0]).unwrap();
        let t = transition_component(&model, &tg, 0, &source, 1, &single).unwrap();
        for row in &t {
            assert_eq!(row, &vec![1.0]);
        }
    }

    #[test]
    fn cross_component_transition_matches_conditional_monte_carlo() {
        let model = basket();
        let tg = TimeGrid::new(1.0, 3).unwrap();
        let levels = LevelSchedule::uniform(3, 2, 4).unwrap();
        let rule = CubatureRule::gauss_hermite(1, 32).unwrap();
        let chain = build_chain(&model, &tg, &levels, &rule, &ChainOptions::default()).unwrap();
        let (k, l, lp, jlp) = (1usize, 0usize, 1usize, 2usize);
        let grid = chain.grid(k);
        let stride = grid.strides()[lp];
        let size = grid.marginal(lp).len();
        let tsize = chain.grid(k + 1).marginal(l).len();
        let tstride = chain.grid(k + 1).strides()[l];
        let tother = chain.grid(k + 1).marginal(1 - l).len();
        // combine per-source-cell Monte Carlo frequencies with the exact
        // conditioning weights
        let mut den = 0.0;
        let mut mean = vec![0.0; tsize];
        let mut var = vec![0.0; tsize];
        let samples = 400_000u64;
        for i in 0..grid.len() {
            if (i / stride) % size != jlp {
                continue;
            }
            den += chain.weights(k)[i];
        }
        for i in 0..grid.len() {
            if (i / stride) % size != jlp {
                continue;
            }
            let w = chain.weights(k)[i] / den;
            let est = crate::oracle::mc_transition_row(
                &model,
                &tg,
                k,
                &grid.point(i),
                chain.grid(k + 1),
                samples,
                crate::oracle::derive_seed(31, k as u64, i as u64),
            )
            .unwrap();
            for jl in 0..tsize {
                // marginalize the joint frequencies onto component l
                let mut freq = 0.0;
                let mut se_sq = 0.0;
                for jo in 0..tother {
                    let flat = jl * tstride + jo * chain.grid(k + 1).strides()[1 - l];
                    freq += est[flat].value;
                    se_sq += est[flat].std_error * est[flat].std_error;
                }
                mean[jl] += w * freq;
                var[jl] += w * w * se_sq;
            }
        }
        for jl in 0..tsize {
            let closed = cross_component_transition(&chain, k, l, lp, jl, jlp).unwrap();
            let tol = 3.0 * var[jl].sqrt() + 3.0 / samples as f64;
            assert!(
                (closed - mean[jl]).abs() <= tol,
                "cell {jl}: closed {closed} vs mc {} (tol {tol})",
                mean[jl]
            );
        }
    }

    #[test]
    fn cross_component_conditioning_on_own_component_diagonal_model() {
        let model = builtin_model("unit_brownian", &params(&[("d", 2.0)])).unwrap();
        let tg = TimeGrid::new(1.0, 2).unwrap();
        let levels = LevelSchedule::uniform(2, 2, 3).unwrap();
        let rule = CubatureRule::gauss_hermite(1, 16).unwrap();
        let chain = build_chain(&model, &tg, &levels, &rule, &ChainOptions::default()).unwrap();
        let k = 1;
        // independence: conditioning on the other component changes nothing,
        // and conditioning on the own component picks its transition row;
        // component 0's rows only depend on the source cell of component 0
        let comp = chain.component_transition(k, 0);
        for j0 in 0..3 {
            for jl in 0..3 {
                let got = cross_component_transition(&chain, k, 0, 0, jl, j0).unwrap();
                let source_flat = chain.grid(k).flat_index(&[j0, 0]);
                assert!((got - comp[source_flat][jl]).abs() < 1e-12);
            }
        }
    }

    /// Three components driven by two Brownian coordinates: the first column
    /// of the volatility mixes signs and one row is orthogonal to it, so the
    /// cubature path with its sign partition and indicator factors is the
    /// one exercised.
    struct ThreeByTwo;

    impl crate::model::Sde for ThreeByTwo {
        fn name(&self) -> &str {
            "three_by_two"
        }
        fn state_dim(&self) -> usize {
            3
        }
        fn brownian_dim(&self) -> usize {
            2
        }
        fn initial_state(&self) -> Vec<f64> {
            vec![0.0, 0.0, 0.0]
        }
        fn drift(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
            out.fill(0.0);
        }
        fn diffusion(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
            out.copy_from_slice(&[1.0, 0.5, -0.7, 0.8, 0.0, 1.2]);
        }
    }

    #[test]
    fn cubature_path_rows_are_stochastic_and_near_the_law() {
        let model = DiffusionModel::new(ThreeByTwo);
        let tg = TimeGrid::new(1.0, 2).unwrap();
        let source = ProductGrid::new(vec![
            MarginalQuantizer::new(0, vec![0.1]).unwrap(),
            MarginalQuantizer::new(1, vec![-0.2]).unwrap(),
            MarginalQuantizer::new(2, vec![0.0]).unwrap(),
        ]);
        let target = ProductGrid::new(vec![
            MarginalQuantizer::new(0, vec![-0.6, 0.1, 0.8]).unwrap(),
            MarginalQuantizer::new(1, vec![-0.9, -0.2, 0.5]).unwrap(),
            MarginalQuantizer::new(2, vec![-0.8, 0.0, 0.8]).unwrap(),
        ]);
        let rule = CubatureRule::gauss_hermite(1, 64).unwrap();
        let m = transition_general(&model, &tg, 0, &source, &target, &rule).unwrap();
        let sum: f64 = m.row(0).iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(m.max_row_defect() < 1e-12, "defect {}", m.max_row_defect());
        // the node sum discretizes the indicator factors, so the comparison
        // band carries the rule's resolution error on top of sampling noise
        let est = crate::oracle::mc_transition_row(&model, &tg, 0, &[0.1, -0.2, 0.0], &target, 400_000, 5)
            .unwrap();
        for (j, e) in est.iter().enumerate() {
            let tol = 3.0 * e.std_error + 0.02;
            assert!(
                (m.entry(0, j) - e.value).abs() <= tol,
                "cell {j}: formula {} vs mc {}",
                m.entry(0, j),
                e.value
            );
        }
    }

    #[test]
    fn capacity_cap_is_enforced() {
        let model = basket();
        let tg = TimeGrid::new(1.0, 2).unwrap();
        let levels = LevelSchedule::uniform(2, 2, 40).unwrap();
        let rule = CubatureRule::gauss_hermite(1, 8).unwrap();
        let opts = ChainOptions { cell_cap: 100, ..ChainOptions::default() };
        assert!(matches!(
            build_chain(&model, &tg, &levels, &rule, &opts),
            Err(ChainError::CapacityExceeded { .. })
        ));
    }

    #[test]
    fn forced_diagonal_kernel_rejects_correlated_model() {
        let model = basket();
        let tg = TimeGrid::new(1.0, 1).unwrap();
        let levels = LevelSchedule::uniform(1, 2, 3).unwrap();
        let rule = CubatureRule::gauss_hermite(1, 8).unwrap();
        let opts = ChainOptions { kernel: KernelChoice::Diagonal, ..ChainOptions::default() };
        assert!(matches!(
            build_chain(&model, &tg, &levels, &rule, &opts),
            Err(ChainError::NotDiagonal { .. })
        ));
    }

    #[test]
    fn general_kernel_checks_cubature_dimension() {
        let model = basket();
        let tg = TimeGrid::new(1.0, 1).unwrap();
        let grid0 = ProductGrid::new(vec![
            MarginalQuantizer::new(0, vec![100.0]).unwrap(),
            MarginalQuantizer::new(1, vec![100.0]).unwrap(),
        ]);
        let rule = CubatureRule::gauss_hermite(2, 4).unwrap();
        assert!(matches!(
            transition_general(&model, &tg, 0, &grid0, &grid0, &rule),
            Err(ChainError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn level_schedule_validation() {
        assert!(LevelSchedule::uniform(0, 2, 5).is_err());
        assert!(LevelSchedule::from_table(vec![vec![2, 2], vec![5, 5]]).is_err());
        assert!(LevelSchedule::from_table(vec![vec![1, 1], vec![5, 0]]).is_err());
        let s = LevelSchedule::per_component(3, &[20, 10]).unwrap();
        assert_eq!(s.steps(), 3);
        assert_eq!(s.size(0, 0), 1);
        assert_eq!(s.size(2, 1), 10);
        assert_eq!(s.cells(1), 200);
    }
}
