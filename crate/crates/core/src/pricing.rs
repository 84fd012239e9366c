//! Cubature pricing of European payoffs against the chain's terminal law:
//! full-vector payoffs summed over the product grid and single-component
//! payoffs summed over the cached marginal weights.

use thiserror::Error;

use crate::chain::QuantizedChain;

#[derive(Debug, Error)]
pub enum PricingError {
    #[error("invalid payoff: {0}")]
    InvalidPayoff(String),
    #[error("payoff maturity {payoff} does not match the chain horizon {chain}")]
    MaturityMismatch { payoff: f64, chain: f64 },
    #[error("payoff dimension {expected} does not match the chain dimension {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptionSide {
    Call,
    Put,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PayoffKind {
    /// `F(x) = (w . x - K)+` (call) on the whole state vector.
    Vector { weights: Vec<f64> },
    /// `H(x) = (x^l - K)+` (call) on a single component.
    Component { index: usize },
}

/// European payoff with a flat discount rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Payoff {
    pub kind: PayoffKind,
    pub side: OptionSide,
    pub strike: f64,
    pub rate: f64,
    pub maturity: f64,
}

impl Payoff {
    pub fn validate(&self) -> Result<(), PricingError> {
        if !(self.strike >= 0.0 && self.strike.is_finite()) {
            return Err(PricingError::InvalidPayoff(format!(
                "strike {} must be a nonnegative real",
                self.strike
            )));
        }
        if !(self.maturity > 0.0 && self.maturity.is_finite()) {
            return Err(PricingError::InvalidPayoff(format!(
                "maturity {} must be positive",
                self.maturity
            )));
        }
        if !self.rate.is_finite() {
            return Err(PricingError::InvalidPayoff("non-finite rate".into()));
        }
        if let PayoffKind::Vector { weights } = &self.kind {
            if weights.is_empty() {
                return Err(PricingError::InvalidPayoff("empty weight vector".into()));
            }
            let sum: f64 = weights.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(PricingError::InvalidPayoff(format!(
                    "basket weights sum to {sum}, expected 1"
                )));
            }
        }
        Ok(())
    }

    fn intrinsic(&self, value: f64) -> f64 {
        match self.side {
            OptionSide::Call => (value - self.strike).max(0.0),
            OptionSide::Put => (self.strike - value).max(0.0),
        }
    }

    fn discount(&self) -> f64 {
        (-self.rate * self.maturity).exp()
    }

    fn check_horizon(&self, chain: &QuantizedChain) -> Result<(), PricingError> {
        let horizon = chain.time_grid().horizon();
        if (self.maturity - horizon).abs() > 1e-9 * horizon.max(1.0) {
            return Err(PricingError::MaturityMismatch { payoff: self.maturity, chain: horizon });
        }
        Ok(())
    }
}

/// `e^{-rT} sum_j F(x_n^j) P(X_n = x_n^j)` over the terminal product grid.
pub fn price_vector_payoff(chain: &QuantizedChain, payoff: &Payoff) -> Result<f64, PricingError> {
    payoff.validate()?;
    payoff.check_horizon(chain)?;
    let weights = match &payoff.kind {
        PayoffKind::Vector { weights } => weights,
        PayoffKind::Component { .. } => {
            return Err(PricingError::InvalidPayoff(
                "vector pricing needs a vector payoff".into(),
            ))
        }
    };
    let n = chain.steps();
    if weights.len() != chain.grid(n).dim() {
        return Err(PricingError::DimensionMismatch {
            expected: chain.grid(n).dim(),
            found: weights.len(),
        });
    }
    let value = chain.expectation(n, |x| {
        payoff.intrinsic(weights.iter().zip(x.iter()).map(|(w, v)| w * v).sum())
    });
    Ok(payoff.discount() * value)
}

/// `e^{-rT} sum_j H(x_n^{l,j}) P(X_n^l = x_n^{l,j})` over the cached
/// component-l marginal weights of the terminal step.
pub fn price_component_payoff(
    chain: &QuantizedChain,
    payoff: &Payoff,
    component: usize,
) -> Result<f64, PricingError> {
    payoff.validate()?;
    payoff.check_horizon(chain)?;
    let n = chain.steps();
    if component >= chain.grid(n).dim() {
        return Err(PricingError::DimensionMismatch {
            expected: chain.grid(n).dim(),
            found: component,
        });
    }
    let marginal = chain.grid(n).marginal(component);
    let weights = chain.component_weights(n, component);
    let value: f64 = weights
        .iter()
        .enumerate()
        .map(|(j, w)| w * payoff.intrinsic(marginal.point(j)))
        .sum();
    Ok(payoff.discount() * value)
}
