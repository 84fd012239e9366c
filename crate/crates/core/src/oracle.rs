//! Independent ground truth for tests and the `verify` command: Monte Carlo
//! one-step Euler draws binned into product cells, conditional-increment
//! sample means, and closed-form lognormal references.
//!
//! Randomness comes from ChaCha8 streams: the generator is seeded with the
//! caller's seed and the stream id is the step index plus one, so estimates
//! are reproducible bit for bit and independent runs (e.g. one per source
//! cell, seeds derived via [`derive_seed`]) parallelize deterministically.
//! Normal draws invert the library CDF, keeping a single normal
//! implementation in the codebase.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::chain::ProductGrid;
use crate::gaussian::{normal_cdf, normal_quantile};
use crate::model::{euler_rows, DiffusionModel, ModelError, TimeGrid};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{name} = {value} outside the admissible domain ({reason})")]
    DomainError { name: &'static str, value: f64, reason: &'static str },
    #[error("need at least {min} samples, got {got}")]
    TooFewSamples { min: u64, got: u64 },
}

/// A Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub value: f64,
    pub std_error: f64,
    pub samples: u64,
    pub seed: u64,
}

/// SplitMix64 mixing of (seed, step, cell) into a per-run seed.
pub fn derive_seed(seed: u64, step: u64, cell: u64) -> u64 {
    let mut z = seed ^ step.wrapping_mul(0x9e3779b97f4a7c15) ^ cell.wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn stream_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

/// Standard normal draw by inverse-CDF of a uniform strictly inside (0, 1).
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u = ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / 9007199254740992.0);
    normal_quantile(u).expect("u in (0,1)")
}

/// Nearest-point cell of `y` in the product grid.
fn bin(target: &ProductGrid, y: &[f64]) -> usize {
    let mut flat = 0;
    for (l, stride) in target.strides().iter().enumerate() {
        flat += target.marginal(l).cell_of(y[l]) * stride;
    }
    flat
}

const MIN_SAMPLES: u64 = 10_000;

/// Binomial frequencies of one-step Euler draws from `x` into the target
/// product cells.
pub fn mc_transition_row(
    model: &DiffusionModel,
    grid: &TimeGrid,
    k: usize,
    x: &[f64],
    target: &ProductGrid,
    samples: u64,
    seed: u64,
) -> Result<Vec<McEstimate>, OracleError> {
    if samples < MIN_SAMPLES {
        return Err(OracleError::TooFewSamples { min: MIN_SAMPLES, got: samples });
    }
    let rows = euler_rows(model, grid, k, x)?;
    let (d, q) = (model.state_dim(), model.brownian_dim());
    let sqrt_delta = grid.delta().sqrt();
    let mut rng = stream_rng(seed, k);
    let mut counts = vec![0u64; target.len()];
    let mut z = vec![0.0; q];
    let mut y = vec![0.0; d];
    for _ in 0..samples {
        for zp in z.iter_mut() {
            *zp = standard_normal(&mut rng);
        }
        for l in 0..d {
            let dot: f64 = rows[l].vol_row.iter().zip(z.iter()).map(|(a, b)| a * b).sum();
            y[l] = rows[l].mean + sqrt_delta * dot;
        }
        counts[bin(target, &y)] += 1;
    }
    let m = samples as f64;
    Ok(counts
        .into_iter()
        .map(|c| {
            let p = c as f64 / m;
            let var = p * (1.0 - p) * m / (m - 1.0);
            McEstimate { value: p, std_error: (var / m).sqrt(), samples, seed }
        })
        .collect())
}

/// Sample means of `Z_p 1{cell j}` for every Brownian coordinate p: the
/// Monte Carlo view of the conditional-increment weights. Returned as
/// `out[p][j]`.
pub fn mc_lambda_row(
    model: &DiffusionModel,
    grid: &TimeGrid,
    k: usize,
    x: &[f64],
    target: &ProductGrid,
    samples: u64,
    seed: u64,
) -> Result<Vec<Vec<McEstimate>>, OracleError> {
    if samples < MIN_SAMPLES {
        return Err(OracleError::TooFewSamples { min: MIN_SAMPLES, got: samples });
    }
    let rows = euler_rows(model, grid, k, x)?;
    let (d, q) = (model.state_dim(), model.brownian_dim());
    let sqrt_delta = grid.delta().sqrt();
    let mut rng = stream_rng(seed, k);
    let cols = target.len();
    let mut sums = vec![0.0f64; q * cols];
    let mut sq_sums = vec![0.0f64; q * cols];
    let mut z = vec![0.0; q];
    let mut y = vec![0.0; d];
    for _ in 0..samples {
        for zp in z.iter_mut() {
            *zp = standard_normal(&mut rng);
        }
        for l in 0..d {
            let dot: f64 = rows[l].vol_row.iter().zip(z.iter()).map(|(a, b)| a * b).sum();
            y[l] = rows[l].mean + sqrt_delta * dot;
        }
        let j = bin(target, &y);
        for p in 0..q {
            sums[p * cols + j] += z[p];
            sq_sums[p * cols + j] += z[p] * z[p];
        }
    }
    let m = samples as f64;
    Ok((0..q)
        .map(|p| {
            (0..cols)
                .map(|j| {
                    let s = sums[p * cols + j];
                    let mean = s / m;
                    let var = (sq_sums[p * cols + j] - m * mean * mean) / (m - 1.0);
                    McEstimate {
                        value: mean,
                        std_error: (var.max(0.0) / m).sqrt(),
                        samples,
                        seed,
                    }
                })
                .collect()
        })
        .collect())
}

/// `E[X_t] = x0 exp(mu t)` for geometric Brownian motion.
pub fn gbm_exact_mean(x0: f64, mu: f64, t: f64) -> f64 {
    x0 * (mu * t).exp()
}

fn d1(s0: f64, r: f64, sigma: f64, strike: f64, t: f64) -> f64 {
    ((s0 / strike).ln() + (r + 0.5 * sigma * sigma) * t) / (sigma * t.sqrt())
}

/// Black-Scholes European call price.
pub fn bs_call_price(s0: f64, r: f64, sigma: f64, strike: f64, t: f64) -> Result<f64, OracleError> {
    if !(sigma > 0.0) {
        return Err(OracleError::DomainError { name: "sigma", value: sigma, reason: "must be positive" });
    }
    if !(t > 0.0) {
        return Err(OracleError::DomainError { name: "t", value: t, reason: "must be positive" });
    }
    if !(s0 > 0.0) {
        return Err(OracleError::DomainError { name: "s0", value: s0, reason: "must be positive" });
    }
    if !(strike > 0.0) {
        return Err(OracleError::DomainError { name: "strike", value: strike, reason: "must be positive" });
    }
    let d1 = d1(s0, r, sigma, strike, t);
    let d2 = d1 - sigma * t.sqrt();
    Ok(s0 * normal_cdf(d1) - strike * (-r * t).exp() * normal_cdf(d2))
}

/// Black-Scholes call delta `Phi(d1)`.
pub fn bs_call_delta(s0: f64, r: f64, sigma: f64, strike: f64, t: f64) -> Result<f64, OracleError> {
    bs_call_price(s0, r, sigma, strike, t)?;
    Ok(normal_cdf(d1(s0, r, sigma, strike, t)))
}
