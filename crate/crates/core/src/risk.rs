//! Convex risk measures on finite weighted sample vectors.
//!
//! A risk measure maps a position X (samples of terminal wealth) to the
//! least cash that makes it acceptable. Everything here is monotone
//! decreasing, cash-invariant and convex; the axioms are enforced by the
//! property suite rather than trusted.
//!
//! CVaR is computed two independent ways — exactly by sorting with
//! fractional tail atoms, and through its optimized-certainty-equivalent
//! form by one-dimensional convex minimization — and the two must agree to
//! 1e-8. Training uses the OCE route (the scalar w joins the gradient
//! loop); reports use the sorting route.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Risk measure selector, as it appears in JSON configs.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RiskMeasure {
    /// (1/lambda) log E[exp(-lambda X)]
    Entropic { lambda: f64 },
    /// Expected loss over the worst (1 - alpha) tail.
    Cvar { alpha: f64 },
    /// -E[X]
    Mean,
    /// -essinf X
    WorstCase,
}

impl RiskMeasure {
    pub fn validate(&self) -> Result<()> {
        match self {
            RiskMeasure::Entropic { lambda } if !(*lambda > 0.0) => Err(Error::Domain(format!(
                "entropic risk aversion {lambda} must be > 0"
            ))),
            RiskMeasure::Cvar { alpha } if !(0.0..1.0).contains(alpha) => Err(Error::Domain(
                format!("cvar level {alpha} must be in [0, 1)"),
            )),
            _ => Ok(()),
        }
    }

    /// Risk of a weighted sample vector (weights sum to 1).
    pub fn evaluate(&self, samples: &[f64], weights: &[f64]) -> Result<f64> {
        self.validate()?;
        check_samples(samples, weights)?;
        Ok(match self {
            RiskMeasure::Entropic { lambda } => entropic(samples, weights, *lambda)?,
            RiskMeasure::Cvar { alpha } => cvar(samples, weights, *alpha)?,
            RiskMeasure::Mean => -dot(samples, weights),
            RiskMeasure::WorstCase => -samples.iter().copied().fold(f64::INFINITY, f64::min),
        })
    }

    /// Subgradient g with rho(X + eps e_m) ~= rho(X) + eps g_m.
    ///
    /// Sums to -1 for the cash-invariant measures (all of them).
    pub fn subgradient(&self, samples: &[f64], weights: &[f64]) -> Result<Vec<f64>> {
        self.validate()?;
        check_samples(samples, weights)?;
        let n = samples.len();
        Ok(match self {
            RiskMeasure::Entropic { lambda } => {
                // softmax of -lambda X, with max shift
                let m = samples
                    .iter()
                    .map(|&x| -lambda * x)
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut g: Vec<f64> = samples
                    .iter()
                    .zip(weights)
                    .map(|(&x, &w)| w * (-lambda * x - m).exp())
                    .collect();
                let total: f64 = g.iter().sum();
                g.iter_mut().for_each(|x| *x = -*x / total);
                g
            }
            RiskMeasure::Cvar { alpha } => {
                let mut g = vec![0.0; n];
                let tail = 1.0 - alpha;
                let mut order: Vec<usize> = (0..n).collect();
                // worst samples first
                order.sort_by(|&i, &j| samples[i].partial_cmp(&samples[j]).unwrap());
                let mut remaining = tail;
                for &i in &order {
                    let used = weights[i].min(remaining);
                    g[i] = -used / tail;
                    remaining -= used;
                    if remaining <= 0.0 {
                        break;
                    }
                }
                g
            }
            RiskMeasure::Mean => weights.iter().map(|&w| -w).collect(),
            RiskMeasure::WorstCase => {
                let (argmin, _) = samples
                    .iter()
                    .enumerate()
                    .fold((0, f64::INFINITY), |(ai, av), (i, &v)| {
                        if v < av {
                            (i, v)
                        } else {
                            (ai, av)
                        }
                    });
                let mut g = vec![0.0; n];
                g[argmin] = -1.0;
                g
            }
        })
    }
}

fn check_samples(samples: &[f64], weights: &[f64]) -> Result<()> {
    if samples.is_empty() || samples.len() != weights.len() {
        return Err(Error::Shape(format!(
            "samples ({}) and weights ({}) must be non-empty and equal length",
            samples.len(),
            weights.len()
        )));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain("non-finite sample".into()));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Entropic risk (1/lambda) log sum_m w_m exp(-lambda X_m), computed with a
/// max shift so large risk aversions cannot overflow.
pub fn entropic(samples: &[f64], weights: &[f64], lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::Domain(format!("lambda {lambda} must be > 0")));
    }
    check_samples(samples, weights)?;
    let m = samples
        .iter()
        .map(|&x| -lambda * x)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = samples
        .iter()
        .zip(weights)
        .map(|(&x, &w)| w * (-lambda * x - m).exp())
        .sum();
    Ok((m + sum.ln()) / lambda)
}

/// CVaR at level alpha, exactly, by sorting: the expected loss of the worst
/// (1 - alpha) probability mass, with fractional handling of the boundary
/// atom so the value is exact for discrete laws.
pub fn cvar(samples: &[f64], weights: &[f64], alpha: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Domain(format!("alpha {alpha} must be in [0, 1)")));
    }
    check_samples(samples, weights)?;
    let tail = 1.0 - alpha;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&i, &j| samples[i].partial_cmp(&samples[j]).unwrap());
    let mut remaining = tail;
    let mut acc = 0.0;
    for &i in &order {
        let used = weights[i].min(remaining);
        acc += used * (-samples[i]);
        remaining -= used;
        if remaining <= 0.0 {
            break;
        }
    }
    Ok(acc / tail)
}

/// Loss functions for the optimized certainty equivalent
/// `rho(X) = inf_w { w + E[loss(-X - w)] }`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OceLoss {
    /// max(x, 0)/(1 - alpha): reproduces CVaR at level alpha.
    CvarTail { alpha: f64 },
    /// exp(lambda x) - (1 + log lambda)/lambda: reproduces the entropic
    /// risk measure; the minimizer satisfies e^{lambda w*} = lambda E[e^{-lambda X}].
    Exponential { lambda: f64 },
}

impl OceLoss {
    pub fn validate(&self) -> Result<()> {
        match self {
            OceLoss::CvarTail { alpha } if !(0.0..1.0).contains(alpha) => Err(Error::Domain(
                format!("cvar loss level {alpha} must be in [0, 1)"),
            )),
            OceLoss::Exponential { lambda } if !(*lambda > 0.0) => Err(Error::Domain(format!(
                "exponential loss lambda {lambda} must be > 0"
            ))),
            _ => Ok(()),
        }
    }

    pub fn value(&self, x: f64) -> f64 {
        match self {
            OceLoss::CvarTail { alpha } => x.max(0.0) / (1.0 - alpha),
            OceLoss::Exponential { lambda } => {
                (lambda * x).exp() - (1.0 + lambda.ln()) / lambda
            }
        }
    }

    /// Non-decreasing derivative (subgradient at the CVaR kink taken as 0).
    pub fn deriv(&self, x: f64) -> f64 {
        match self {
            OceLoss::CvarTail { alpha } => {
                if x > 0.0 {
                    1.0 / (1.0 - alpha)
                } else {
                    0.0
                }
            }
            OceLoss::Exponential { lambda } => lambda * (lambda * x).exp(),
        }
    }
}

/// Solve the one-dimensional OCE problem, returning `(value, w*)`.
///
/// The objective g(w) = w + sum w_m loss(-X_m - w) is convex with
/// non-decreasing subderivative g'(w) = 1 - E[loss'(-X - w)]; the bracket is
/// expanded until the subderivative straddles zero, then bisected.
pub fn oce_value_and_w(samples: &[f64], weights: &[f64], loss: &OceLoss) -> Result<(f64, f64)> {
    loss.validate()?;
    check_samples(samples, weights)?;

    let g = |w: f64| -> f64 {
        w + samples
            .iter()
            .zip(weights)
            .map(|(&x, &wt)| wt * loss.value(-x - w))
            .sum::<f64>()
    };
    let gprime = |w: f64| -> f64 {
        1.0 - samples
            .iter()
            .zip(weights)
            .map(|(&x, &wt)| wt * loss.deriv(-x - w))
            .sum::<f64>()
    };

    let neg_min = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let neg_max = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut lo, mut hi) = (-neg_max, -neg_min); // range of -X
    let span = (hi - lo).max(1.0);
    let mut k = 0;
    while gprime(lo) > 0.0 {
        lo -= span * (1 << k) as f64;
        k += 1;
        if k > 60 {
            // flat objective (e.g. CVaR at alpha = 0): any w is optimal
            return Ok((g(hi), hi));
        }
    }
    k = 0;
    while gprime(hi) < 0.0 {
        hi += span * (1 << k) as f64;
        k += 1;
        if k > 60 {
            return Err(Error::Domain("OCE objective has no minimizer".into()));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if gprime(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-14 * (1.0 + hi.abs()) {
            break;
        }
    }
    let w = 0.5 * (lo + hi);
    Ok((g(w), w))
}
