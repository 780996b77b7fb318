//! Market frictions: transaction-cost functions c_k and trading-constraint
//! maps H_k.
//!
//! Costs are normalized to c_k(0) = 0 and are non-negative. Constraints are
//! continuous maps applied position-by-position along the path,
//! `h_k = H_k(h_{k-1}, proposal_k)`, so the constrained strategy is itself
//! adapted. Both expose exact reverse-mode derivatives for the training
//! sweep; the fixed-cost indicator additionally has a smoothed (sigmoid
//! ramp) training variant because its exact derivative is zero almost
//! everywhere.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Per-rebalance transaction cost c_k(trade).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CostKind {
    Zero,
    /// sum_i rate_i |n_i| S_k^i
    Proportional { rate: Vec<f64> },
    /// sum_i fee 1{|n_i| >= threshold}
    Fixed { fee: f64, threshold: f64 },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CostModel {
    #[serde(flatten)]
    pub kind: CostKind,
    /// Charge the implicit liquidation trade -delta_{n-1} at maturity.
    /// Off by default: the experiments assume zero transaction costs at T.
    #[serde(default)]
    pub charge_at_maturity: bool,
}

impl CostModel {
    pub fn zero() -> Self {
        Self {
            kind: CostKind::Zero,
            charge_at_maturity: false,
        }
    }

    /// Uniform proportional rate across d instruments.
    pub fn proportional(rate: f64, d: usize) -> Self {
        Self {
            kind: CostKind::Proportional {
                rate: vec![rate; d],
            },
            charge_at_maturity: false,
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        match &self.kind {
            CostKind::Zero => Ok(()),
            CostKind::Proportional { rate } => {
                if rate.len() != d {
                    return Err(Error::Shape(format!(
                        "proportional cost has {} rates for d = {d}",
                        rate.len()
                    )));
                }
                if rate.iter().any(|&r| !(r >= 0.0)) {
                    return Err(Error::Domain("cost rates must be >= 0".into()));
                }
                Ok(())
            }
            CostKind::Fixed { fee, threshold } => {
                if !(*fee >= 0.0) || !(*threshold > 0.0) {
                    return Err(Error::Domain(
                        "fixed cost needs fee >= 0 and threshold > 0".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.kind, CostKind::Zero)
    }

    /// Exact cost of one rebalance trade at the given prices.
    pub fn step_cost(&self, trade: &[f64], prices: &[f64]) -> f64 {
        match &self.kind {
            CostKind::Zero => 0.0,
            CostKind::Proportional { rate } => trade
                .iter()
                .zip(prices)
                .zip(rate)
                .map(|((&n, &s), &r)| r * n.abs() * s)
                .sum(),
            CostKind::Fixed { fee, threshold } => {
                fee * trade.iter().filter(|n| n.abs() >= *threshold).count() as f64
            }
        }
    }

    /// Training-mode cost: the fixed-cost indicator is replaced by a sigmoid
    /// ramp of width threshold/10 so a gradient exists. Proportional and
    /// zero costs are already a.e. differentiable and stay exact.
    pub fn step_cost_smoothed(&self, trade: &[f64], prices: &[f64]) -> f64 {
        match &self.kind {
            CostKind::Fixed { fee, threshold } => {
                let width = threshold / 10.0;
                trade
                    .iter()
                    .map(|n| fee * sigmoid((n.abs() - threshold) / width))
                    .sum()
            }
            _ => self.step_cost(trade, prices),
        }
    }

    /// Accumulate d(step_cost_smoothed)/d(trade) into `grad`, scaled by
    /// `scale`. The |n| subgradient at 0 is taken as 0.
    pub fn step_cost_grad(&self, trade: &[f64], prices: &[f64], scale: f64, grad: &mut [f64]) {
        match &self.kind {
            CostKind::Zero => {}
            CostKind::Proportional { rate } => {
                for i in 0..trade.len() {
                    grad[i] += scale * rate[i] * prices[i] * sign0(trade[i]);
                }
            }
            CostKind::Fixed { fee, threshold } => {
                let width = threshold / 10.0;
                for i in 0..trade.len() {
                    let s = sigmoid((trade[i].abs() - threshold) / width);
                    grad[i] += scale * fee * s * (1.0 - s) / width * sign0(trade[i]);
                }
            }
        }
    }

    /// Total cost of a strategy along one path:
    /// `sum_k c_k(delta_k - delta_{k-1})` with delta_{-1} = 0, plus the
    /// liquidation trade -delta_{n-1} at maturity when enabled.
    ///
    /// `positions` has one row per rebalance date (n rows), `prices` one row
    /// per date including maturity (n + 1 rows).
    pub fn total_cost(&self, positions: &[Vec<f64>], prices: ArrayView2<'_, f64>) -> f64 {
        let n = positions.len();
        if n == 0 {
            return 0.0;
        }
        let d = positions[0].len();
        let mut prev = vec![0.0; d];
        let mut trade = vec![0.0; d];
        let mut total = 0.0;
        for (k, pos) in positions.iter().enumerate() {
            for i in 0..d {
                trade[i] = pos[i] - prev[i];
            }
            total += self.step_cost(&trade, prices.row(k).to_slice().expect("contiguous"));
            prev.copy_from_slice(pos);
        }
        if self.charge_at_maturity {
            for t in prev.iter_mut() {
                *t = -*t;
            }
            total += self.step_cost(&prev, prices.row(n).to_slice().expect("contiguous"));
        }
        total
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Trading-constraint map H_k. All variants satisfy H_k(0) = 0 and are
/// continuous in the proposal.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConstraintMap {
    Unconstrained,
    /// Instrument i cannot be traded before step `steps[i]`; the previous
    /// position (zero, inductively) rolls forward instead.
    NoTradeBefore { steps: Vec<usize> },
    /// Liquidity limit on the traded vega: the trade is scaled by
    /// `cap / max(V, cap)` with `V = |sum_i weights_i (prop_i - prev_i)|`.
    VegaCap { weights: Vec<f64>, cap: f64 },
    /// Componentwise position bounds; must contain 0.
    Box { lower: Vec<f64>, upper: Vec<f64> },
}

impl ConstraintMap {
    pub fn validate(&self, d: usize) -> Result<()> {
        match self {
            ConstraintMap::Unconstrained => Ok(()),
            ConstraintMap::NoTradeBefore { steps } => {
                if steps.len() != d {
                    return Err(Error::Shape(format!(
                        "no_trade_before has {} entries for d = {d}",
                        steps.len()
                    )));
                }
                Ok(())
            }
            ConstraintMap::VegaCap { weights, cap } => {
                if weights.len() != d {
                    return Err(Error::Shape(format!(
                        "vega_cap has {} weights for d = {d}",
                        weights.len()
                    )));
                }
                if !(*cap > 0.0) {
                    return Err(Error::Domain("vega cap must be > 0".into()));
                }
                Ok(())
            }
            ConstraintMap::Box { lower, upper } => {
                if lower.len() != d || upper.len() != d {
                    return Err(Error::Shape("box bounds must have length d".into()));
                }
                for i in 0..d {
                    if !(lower[i] <= 0.0 && 0.0 <= upper[i]) {
                        return Err(Error::Domain(
                            "box constraint must contain the zero position".into(),
                        ));
                    }
                }
                Ok(())
            }
        }
    }

    pub fn is_unconstrained(&self) -> bool {
        matches!(self, ConstraintMap::Unconstrained)
    }

    /// Constrained position at `step` given the previous constrained
    /// position and the network proposal.
    pub fn apply(&self, step: usize, prev: &[f64], proposal: &[f64], out: &mut [f64]) {
        match self {
            ConstraintMap::Unconstrained => out.copy_from_slice(proposal),
            ConstraintMap::NoTradeBefore { steps } => {
                for i in 0..proposal.len() {
                    out[i] = if step < steps[i] { prev[i] } else { proposal[i] };
                }
            }
            ConstraintMap::VegaCap { weights, cap } => {
                let scale = self.vega_scale(prev, proposal, weights, *cap);
                for i in 0..proposal.len() {
                    out[i] = prev[i] + (proposal[i] - prev[i]) * scale;
                }
            }
            ConstraintMap::Box { lower, upper } => {
                for i in 0..proposal.len() {
                    out[i] = proposal[i].clamp(lower[i], upper[i]);
                }
            }
        }
    }

    fn vega_scale(&self, prev: &[f64], proposal: &[f64], weights: &[f64], cap: f64) -> f64 {
        let v: f64 = weights
            .iter()
            .zip(proposal.iter().zip(prev))
            .map(|(&w, (&p, &q))| w * (p - q))
            .sum::<f64>()
            .abs();
        cap / v.max(cap)
    }

    /// Spec-shaped entry point: the prior constrained positions are passed
    /// as a history of length `step`; only the last one enters any of the
    /// implemented maps.
    pub fn apply_with_history(&self, history: &[Vec<f64>], proposal: &[f64], step: usize) -> Vec<f64> {
        let d = proposal.len();
        let zeros = vec![0.0; d];
        let prev = history.last().map(|v| v.as_slice()).unwrap_or(&zeros);
        let mut out = vec![0.0; d];
        self.apply(step, prev, proposal, &mut out);
        out
    }

    /// Constrained projection H o delta of a whole unconstrained strategy.
    pub fn apply_chain(&self, proposals: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(proposals.len());
        for (k, prop) in proposals.iter().enumerate() {
            let h = self.apply_with_history(&out, prop, k);
            out.push(h);
        }
        out
    }

    /// Reverse-mode derivative: given the cotangent `u` on the constrained
    /// output, write the cotangents on the proposal and on the previous
    /// constrained position. The vega scaling is differentiated exactly
    /// (it is differentiable except where V = cap); box clamps and
    /// inactive trading windows pass zero gradient by construction.
    pub fn backward(
        &self,
        step: usize,
        prev: &[f64],
        proposal: &[f64],
        u: &[f64],
        d_prop: &mut [f64],
        d_prev: &mut [f64],
    ) {
        match self {
            ConstraintMap::Unconstrained => {
                d_prop.copy_from_slice(u);
                d_prev.iter_mut().for_each(|x| *x = 0.0);
            }
            ConstraintMap::NoTradeBefore { steps } => {
                for i in 0..u.len() {
                    if step < steps[i] {
                        d_prop[i] = 0.0;
                        d_prev[i] = u[i];
                    } else {
                        d_prop[i] = u[i];
                        d_prev[i] = 0.0;
                    }
                }
            }
            ConstraintMap::VegaCap { weights, cap } => {
                let inner: f64 = weights
                    .iter()
                    .zip(proposal.iter().zip(prev))
                    .map(|(&w, (&p, &q))| w * (p - q))
                    .sum();
                let v = inner.abs();
                if v <= *cap {
                    d_prop.copy_from_slice(u);
                    d_prev.iter_mut().for_each(|x| *x = 0.0);
                    return;
                }
                let scale = cap / v;
                // d scale / d trade_j = -cap sgn(inner) w_j / v^2
                let u_dot_trade: f64 = u
                    .iter()
                    .zip(proposal.iter().zip(prev))
                    .map(|(&ui, (&p, &q))| ui * (p - q))
                    .sum();
                let t = u_dot_trade * (-cap * inner.signum() / (v * v));
                for j in 0..u.len() {
                    d_prop[j] = u[j] * scale + t * weights[j];
                    d_prev[j] = u[j] * (1.0 - scale) - t * weights[j];
                }
            }
            ConstraintMap::Box { lower, upper } => {
                for i in 0..u.len() {
                    let clamped = proposal[i] < lower[i] || proposal[i] > upper[i];
                    d_prop[i] = if clamped { 0.0 } else { u[i] };
                    d_prev[i] = 0.0;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use ndarray::Array2;

    #[test]
    fn proportional_cost_arithmetic() {
        let c = CostModel::proportional(0.01, 1);
        assert!((c.step_cost(&[2.0], &[100.0]) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn zero_trade_costs_nothing() {
        let models = [
            CostModel::zero(),
            CostModel::proportional(0.05, 2),
            CostModel {
                kind: CostKind::Fixed {
                    fee: 1.0,
                    threshold: 0.01,
                },
                charge_at_maturity: false,
            },
        ];
        for c in &models {
            assert_eq!(c.step_cost(&[0.0, 0.0], &[100.0, 3.0]), 0.0);
        }
    }

    #[test]
    fn fixed_cost_indicator() {
        let c = CostModel {
            kind: CostKind::Fixed {
                fee: 1.0,
                threshold: 0.01,
            },
            charge_at_maturity: false,
        };
        assert_eq!(c.step_cost(&[0.005, 0.02], &[1.0, 1.0]), 1.0);
    }

    fn flat_prices(n: usize, d: usize, level: f64) -> Array2<f64> {
        Array2::from_elem((n + 1, d), level)
    }

    #[test]
    fn total_cost_zero_model_and_zero_strategy() {
        let prices = flat_prices(5, 1, 100.0);
        let strat = vec![vec![0.7]; 5];
        assert_eq!(CostModel::zero().total_cost(&strat, prices.view()), 0.0);
        let c = CostModel::proportional(0.01, 1);
        assert_eq!(c.total_cost(&vec![vec![0.0]; 5], prices.view()), 0.0);
    }

    #[test]
    fn total_cost_constant_position_telescopes() {
        // entering x and holding costs eps|x|S once, plus once more if the
        // liquidation at maturity is charged
        let prices = flat_prices(5, 1, 100.0);
        let strat = vec![vec![0.7]; 5];
        let mut c = CostModel::proportional(0.01, 1);
        let entry = 0.01 * 0.7 * 100.0;
        assert!((c.total_cost(&strat, prices.view()) - entry).abs() < 1e-12);
        c.charge_at_maturity = true;
        assert!((c.total_cost(&strat, prices.view()) - 2.0 * entry).abs() < 1e-12);
    }

    #[test]
    fn total_cost_nonnegative_and_monotone_in_rate() {
        let mut rng = RngStream::new(77, 0);
        let prices = flat_prices(6, 2, 50.0);
        for _ in 0..50 {
            let strat: Vec<Vec<f64>> = (0..6)
                .map(|_| (0..2).map(|_| rng.standard_normal()).collect())
                .collect();
            let lo = CostModel::proportional(0.005, 2).total_cost(&strat, prices.view());
            let hi = CostModel::proportional(0.01, 2).total_cost(&strat, prices.view());
            assert!(lo >= 0.0);
            assert!(hi >= lo - 1e-12);
        }
    }

    #[test]
    fn total_cost_convex_in_strategy_for_proportional() {
        let mut rng = RngStream::new(78, 0);
        let prices = flat_prices(6, 2, 50.0);
        let c = CostModel::proportional(0.01, 2);
        for _ in 0..200 {
            let a: Vec<Vec<f64>> = (0..6)
                .map(|_| (0..2).map(|_| rng.standard_normal()).collect())
                .collect();
            let b: Vec<Vec<f64>> = (0..6)
                .map(|_| (0..2).map(|_| rng.standard_normal()).collect())
                .collect();
            let theta = rng.uniform();
            let mix: Vec<Vec<f64>> = a
                .iter()
                .zip(&b)
                .map(|(ra, rb)| {
                    ra.iter()
                        .zip(rb)
                        .map(|(&x, &y)| theta * x + (1.0 - theta) * y)
                        .collect()
                })
                .collect();
            let lhs = c.total_cost(&mix, prices.view());
            let rhs = theta * c.total_cost(&a, prices.view())
                + (1.0 - theta) * c.total_cost(&b, prices.view());
            assert!(lhs <= rhs + 1e-10, "{lhs} > {rhs}");
        }
    }

    #[test]
    fn unconstrained_is_identity() {
        let c = ConstraintMap::Unconstrained;
        let mut out = [0.0; 2];
        c.apply(3, &[0.1, 0.2], &[5.0, -1.0], &mut out);
        assert_eq!(out, [5.0, -1.0]);
    }

    #[test]
    fn vega_cap_inactive_within_limit() {
        let c = ConstraintMap::VegaCap {
            weights: vec![1.0, 2.0],
            cap: 10.0,
        };
        let mut out = [0.0; 2];
        c.apply(0, &[0.0, 0.0], &[1.0, 2.0], &mut out); // V = 5 <= 10
        assert_eq!(out, [1.0, 2.0]);
    }

    #[test]
    fn vega_cap_halves_a_double_trade() {
        // V(trade) = 2 cap => trade scaled by 1/2
        let c = ConstraintMap::VegaCap {
            weights: vec![1.0],
            cap: 2.0,
        };
        let mut out = [0.0; 1];
        c.apply(0, &[1.0], &[5.0], &mut out); // trade 4, V = 4 = 2 cap
        assert!((out[0] - 3.0).abs() < 1e-15); // 1 + 4/2
    }

    #[test]
    fn no_trade_before_rolls_previous_position() {
        let c = ConstraintMap::NoTradeBefore { steps: vec![3] };
        let mut out = [0.0; 1];
        c.apply(2, &[0.0], &[7.0], &mut out);
        assert_eq!(out[0], 0.0);
        c.apply(3, &[0.0], &[7.0], &mut out);
        assert_eq!(out[0], 7.0);
    }

    #[test]
    fn constraint_chain_is_idempotent() {
        let maps = [
            ConstraintMap::Unconstrained,
            ConstraintMap::NoTradeBefore { steps: vec![2, 4] },
            ConstraintMap::VegaCap {
                weights: vec![1.0, 0.5],
                cap: 0.7,
            },
            ConstraintMap::Box {
                lower: vec![-0.5, -0.1],
                upper: vec![0.5, 0.1],
            },
        ];
        let mut rng = RngStream::new(79, 0);
        for map in &maps {
            for _ in 0..50 {
                let raw: Vec<Vec<f64>> = (0..6)
                    .map(|_| (0..2).map(|_| rng.standard_normal()).collect())
                    .collect();
                let once = map.apply_chain(&raw);
                let twice = map.apply_chain(&once);
                for (a, b) in once.iter().zip(&twice) {
                    for (x, y) in a.iter().zip(b) {
                        assert!((x - y).abs() < 1e-12, "{map:?} not idempotent");
                    }
                }
            }
        }
    }

    #[test]
    fn constraint_backward_matches_finite_differences() {
        let maps = [
            ConstraintMap::VegaCap {
                weights: vec![1.0, 0.5],
                cap: 0.7,
            },
            ConstraintMap::Box {
                lower: vec![-0.5, -0.3],
                upper: vec![0.5, 0.3],
            },
            ConstraintMap::NoTradeBefore { steps: vec![2, 0] },
        ];
        let mut rng = RngStream::new(80, 0);
        for map in &maps {
            for _ in 0..50 {
                let prev: Vec<f64> = (0..2).map(|_| 0.3 * rng.standard_normal()).collect();
                let prop: Vec<f64> = (0..2).map(|_| rng.standard_normal()).collect();
                let u: Vec<f64> = (0..2).map(|_| rng.standard_normal()).collect();
                let mut d_prop = vec![0.0; 2];
                let mut d_prev = vec![0.0; 2];
                map.backward(1, &prev, &prop, &u, &mut d_prop, &mut d_prev);

                let f = |prev: &[f64], prop: &[f64]| {
                    let mut out = vec![0.0; 2];
                    map.apply(1, prev, prop, &mut out);
                    out.iter().zip(&u).map(|(o, ui)| o * ui).sum::<f64>()
                };
                let h = 1e-6;
                for j in 0..2 {
                    let mut pp = prop.clone();
                    pp[j] += h;
                    let mut pm = prop.clone();
                    pm[j] -= h;
                    let fd = (f(&prev, &pp) - f(&prev, &pm)) / (2.0 * h);
                    assert!(
                        (fd - d_prop[j]).abs() < 1e-5 * (1.0 + fd.abs()),
                        "{map:?} d_prop[{j}]: fd {fd} vs {x}",
                        x = d_prop[j]
                    );
                    let mut qp = prev.clone();
                    qp[j] += h;
                    let mut qm = prev.clone();
                    qm[j] -= h;
                    let fd = (f(&qp, &prop) - f(&qm, &prop)) / (2.0 * h);
                    assert!(
                        (fd - d_prev[j]).abs() < 1e-5 * (1.0 + fd.abs()),
                        "{map:?} d_prev[{j}]: fd {fd} vs {x}",
                        x = d_prev[j]
                    );
                }
            }
        }
    }

    #[test]
    fn cost_grad_matches_finite_differences() {
        let models = [
            CostModel::proportional(0.01, 2),
            CostModel {
                kind: CostKind::Fixed {
                    fee: 0.3,
                    threshold: 0.05,
                },
                charge_at_maturity: false,
            },
        ];
        let prices = [100.0, 7.0];
        let mut rng = RngStream::new(81, 0);
        for c in &models {
            for _ in 0..100 {
                let trade: Vec<f64> = (0..2).map(|_| 0.3 * rng.standard_normal()).collect();
                let mut grad = vec![0.0; 2];
                c.step_cost_grad(&trade, &prices, 1.0, &mut grad);
                let h = 1e-7;
                for j in 0..2 {
                    let mut tp = trade.clone();
                    tp[j] += h;
                    let mut tm = trade.clone();
                    tm[j] -= h;
                    let fd = (c.step_cost_smoothed(&tp, &prices)
                        - c.step_cost_smoothed(&tm, &prices))
                        / (2.0 * h);
                    assert!(
                        (fd - grad[j]).abs() < 1e-4 * (1.0 + fd.abs()),
                        "{c:?}: fd {fd} vs {g}",
                        g = grad[j]
                    );
                }
            }
        }
    }

    #[test]
    fn box_must_contain_zero() {
        let c = ConstraintMap::Box {
            lower: vec![0.5],
            upper: vec![1.0],
        };
        assert!(c.validate(1).is_err());
    }
}
