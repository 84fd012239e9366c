//! Markovian product quantization of Euler schemes.
//!
//! Quantizes a d-dimensional diffusion's Euler scheme one component at a
//! time, producing a finite Markov chain with semi-closed Gaussian transition
//! formulas, and uses that chain for cubature pricing of European payoffs and
//! for explicit quantized BSDE schemes.

pub mod bsde;
pub mod chain;
pub mod gaussian;
pub mod model;
pub mod oracle;
pub mod pricing;
pub mod quantizer;

/// Configures the global worker pool; `0` keeps the library default
/// (one worker per logical core). Call at most once, before any parallel
/// computation.
pub fn configure_threads(threads: usize) -> Result<(), String> {
    if threads == 0 {
        return Ok(());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| e.to_string())
}
