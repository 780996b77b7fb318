//! Deep hedging: near-optimal hedging strategies and indifference prices for
//! derivative portfolios in discrete-time markets with transaction costs and
//! trading constraints.
//!
//! A hedging policy is a chain of small feed-forward networks, one per
//! rebalance date, taking the current market features and the previous
//! position. The policy is trained by minibatch gradient descent (Adam) to
//! minimize a convex risk measure of the terminal portfolio value
//!
//! ```text
//! PL_T = -Z + p0 + sum_k delta_k . (S_{k+1} - S_k) - C_T(delta)
//! ```
//!
//! All gradients are computed by an exact reverse-mode sweep through the
//! per-step networks, the position recurrence, the constraint maps and the
//! cost functions — no autodiff framework involved.

pub mod benchmark;
pub mod config;
pub mod experiments;
pub mod frictions;
pub mod hedger;
pub mod instruments;
pub mod market;
pub mod net;
pub mod report;
pub mod risk;
pub mod rng;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    #[error("parameter out of domain: {0}")]
    Domain(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("quadrature did not converge: {0}")]
    Quadrature(String),
    #[error("training aborted: {0}")]
    Training(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
