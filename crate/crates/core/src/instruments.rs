//! Liability payoffs Z, evaluated per scenario path.
//!
//! Payoffs are the only place the hedger learns about the liability: training
//! consumes the per-path payoff vector, never the payoff definition, so an
//! externally supplied table (`CustomTable`) hedges a book without any model
//! knowledge.

use serde::{Deserialize, Serialize};

use crate::market::PathBatch;
use crate::{Error, Result};

/// Liability payoff on the terminal prices of a batch.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payoff {
    /// European call (S_T - K)^+ on one instrument.
    Call { strike: f64, underlying: usize },
    /// Normalized call spread [(S_T - K1)^+ - (S_T - K2)^+] / (K2 - K1).
    CallSpread {
        lower_strike: f64,
        upper_strike: f64,
        underlying: usize,
    },
    /// Sum of calls, one per (strike, underlying) pair.
    BasketOfCalls {
        strikes: Vec<f64>,
        underlyings: Vec<usize>,
    },
    /// Externally supplied per-path payoffs, aligned to path index.
    CustomTable { values: Vec<f64> },
}

impl Payoff {
    pub fn validate(&self, n_instruments: usize, n_paths: usize) -> Result<()> {
        let check_idx = |i: usize| {
            if i >= n_instruments {
                Err(Error::Domain(format!(
                    "payoff underlying {i} out of range (d = {n_instruments})"
                )))
            } else {
                Ok(())
            }
        };
        match self {
            Payoff::Call { strike, underlying } => {
                if !strike.is_finite() {
                    return Err(Error::Domain("strike must be finite".into()));
                }
                check_idx(*underlying)
            }
            Payoff::CallSpread {
                lower_strike,
                upper_strike,
                underlying,
            } => {
                if !(lower_strike < upper_strike) {
                    return Err(Error::Domain(format!(
                        "call spread needs K1 < K2, got {lower_strike}, {upper_strike}"
                    )));
                }
                check_idx(*underlying)
            }
            Payoff::BasketOfCalls {
                strikes,
                underlyings,
            } => {
                if strikes.len() != underlyings.len() {
                    return Err(Error::Shape(
                        "basket strikes and underlyings must have equal length".into(),
                    ));
                }
                underlyings.iter().try_for_each(|&i| check_idx(i))
            }
            Payoff::CustomTable { values } => {
                if values.len() != n_paths {
                    return Err(Error::Shape(format!(
                        "custom payoff table has {} rows, batch has {n_paths} paths",
                        values.len()
                    )));
                }
                Ok(())
            }
        }
    }

    /// Z(omega_m) for every path of the batch.
    pub fn evaluate(&self, batch: &PathBatch) -> Result<Vec<f64>> {
        self.validate(batch.n_instruments(), batch.n_paths())?;
        let last = batch.grid.n_steps;
        let n_paths = batch.n_paths();
        let z = match self {
            Payoff::Call { strike, underlying } => (0..n_paths)
                .map(|m| (batch.prices[[m, last, *underlying]] - strike).max(0.0))
                .collect(),
            Payoff::CallSpread {
                lower_strike,
                upper_strike,
                underlying,
            } => {
                let width = upper_strike - lower_strike;
                (0..n_paths)
                    .map(|m| {
                        let s = batch.prices[[m, last, *underlying]];
                        ((s - lower_strike).max(0.0) - (s - upper_strike).max(0.0)) / width
                    })
                    .collect()
            }
            Payoff::BasketOfCalls {
                strikes,
                underlyings,
            } => (0..n_paths)
                .map(|m| {
                    strikes
                        .iter()
                        .zip(underlyings)
                        .map(|(&k, &i)| (batch.prices[[m, last, i]] - k).max(0.0))
                        .sum()
                })
                .collect(),
            Payoff::CustomTable { values } => values.clone(),
        };
        Ok(z)
    }

    /// Load a custom payoff table from CSV ("path,value" rows, `#` comments
    /// and an optional header allowed).
    pub fn custom_from_csv(text: &str, n_paths: usize) -> Result<Payoff> {
        let mut values = vec![f64::NAN; n_paths];
        let mut seen = 0usize;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split(',');
            let a = parts.next().unwrap_or_default().trim();
            let b = parts.next().unwrap_or_default().trim();
            let Ok(idx) = a.parse::<usize>() else {
                continue; // header row
            };
            let v: f64 = b
                .parse()
                .map_err(|_| Error::Domain(format!("bad payoff value '{b}'")))?;
            if idx >= n_paths {
                return Err(Error::Shape(format!(
                    "payoff row {idx} out of range for {n_paths} paths"
                )));
            }
            values[idx] = v;
            seen += 1;
        }
        if seen != n_paths {
            return Err(Error::Shape(format!(
                "payoff table covers {seen} of {n_paths} paths"
            )));
        }
        Ok(Payoff::CustomTable { values })
    }
}
