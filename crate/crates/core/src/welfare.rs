//! Welfare objectives, duality-gap decomposition, suboptimality bounds and
//! the Lyapunov function `f` used by the pricing mechanisms.

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::clearing::{Adjustments, MarketOutcome};
use crate::economy::{Economy, EconomyError, Outcome, PhantomDemand};

/// Prices this far below zero are treated as zero.
const PRICE_SLACK: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WelfareError {
    #[error(transparent)]
    Economy(#[from] EconomyError),
    #[error("price p[{i},{j}] = {price} is negative")]
    NegativePrice { i: usize, j: usize, price: f64 },
}

/// Total rider value minus trip costs, `sum S_ij(x_ij) - c_ij y_ij`.
pub fn primal_welfare(outcome: &Outcome, economy: &Economy) -> Result<f64, WelfareError> {
    let mut total = 0.0;
    for (i, j, curve) in economy.demand().iter_indexed() {
        total += curve.surplus_integral(outcome.x[(i, j)])? - economy.c()[(i, j)] * outcome.y[(i, j)];
    }
    Ok(total)
}

pub fn omega(pi: &[f64]) -> f64 {
    pi.iter().cloned().fold(0.0, f64::max)
}

/// `m max{max pi, 0} + sum_ij int_{p_ij}^inf q_ij(r) dr`, rider demand only.
pub fn dual_objective(economy: &Economy, phi: &Adjustments, pi: &[f64]) -> Result<f64, WelfareError> {
    let prices = economy.prices(pi, phi.as_slice());
    let mut tails = 0.0;
    for (i, j, &p) in prices.iter_indexed() {
        if !(p >= -PRICE_SLACK) {
            return Err(WelfareError::NegativePrice { i, j, price: p });
        }
        tails += economy.demand()[(i, j)].tail_integral(p.max(0.0));
    }
    Ok(economy.m() * omega(pi) + tails)
}

/// The four nonnegative terms whose sum is `dual - primal` at a balanced
/// outcome: rider best-response violation, paid relocation, on-trip surplus
/// shortfall and idle supply.
pub fn duality_gap_decomposition(outcome: &MarketOutcome, economy: &Economy) -> Result<[f64; 4], WelfareError> {
    let Outcome { x, y, p } = &outcome.outcome;
    let w = omega(&outcome.pi);
    let mut rider = 0.0;
    let mut relocation = 0.0;
    for (i, j, curve) in economy.demand().iter_indexed() {
        let price = p[(i, j)].max(0.0);
        let xi = x[(i, j)];
        let best = curve.value(price);
        rider += curve.surplus_integral(best)? - curve.surplus_integral(xi)? - price * (best - xi);
        relocation += price * (y[(i, j)] - xi);
    }
    let shortfall: f64 = outcome.z.iter().zip(&outcome.pi).map(|(z, pi)| z * (w - pi)).sum();
    let idle = w * (economy.m() - outcome.z.iter().sum::<f64>());
    Ok([rider, relocation, shortfall, idle])
}

/// Suboptimality bounds computed from observables only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Bounds {
    /// `sum d_ij y_ij (omega - pi_i) + sum p_ij (y_ij - x_ij)`.
    pub detailed: f64,
    /// `m (omega - min pi) + sum e_ij`.
    pub coarse: f64,
}

pub fn suboptimality_bounds(outcome: &MarketOutcome, economy: &Economy, phantom: &PhantomDemand) -> Bounds {
    let Outcome { x, y, p } = &outcome.outcome;
    let w = omega(&outcome.pi);
    let d = economy.d();
    let mut detailed = 0.0;
    for (i, j, &yij) in y.iter_indexed() {
        detailed += d[(i, j)] * yij * (w - outcome.pi[i]) + p[(i, j)] * (yij - x[(i, j)]);
    }
    let min_pi = outcome.pi.iter().cloned().fold(f64::INFINITY, f64::min);
    let coarse = economy.m() * (w - min_pi) + phantom.total_slack();
    Bounds { detailed, coarse }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WelfareReport {
    pub primal: f64,
    pub dual: f64,
    pub omega: f64,
    pub gap_terms: [f64; 4],
    pub bound_detailed: f64,
    pub bound_coarse: f64,
}

pub fn welfare_report(
    outcome: &MarketOutcome,
    economy: &Economy,
    phantom: &PhantomDemand,
) -> Result<WelfareReport, WelfareError> {
    let bounds = suboptimality_bounds(outcome, economy, phantom);
    Ok(WelfareReport {
        primal: primal_welfare(&outcome.outcome, economy)?,
        dual: dual_objective(economy, &outcome.phi, &outcome.pi)?,
        omega: omega(&outcome.pi),
        gap_terms: duality_gap_decomposition(outcome, economy)?,
        bound_detailed: bounds.detailed,
        bound_coarse: bounds.coarse,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LyapunovValue {
    pub f: f64,
    pub grad_f: Vec<f64>,
}

/// Sum of squared deviations of the multipliers from their mean.
pub fn lyapunov_f(pi: &[f64]) -> f64 {
    let mean = pi.iter().sum::<f64>() / pi.len() as f64;
    pi.iter().map(|p| (p - mean).powi(2)).sum()
}

/// `grad f = 2 D_Pi^T (pi - mean(pi) 1)` with respect to the free adjustments.
pub fn grad_f(pi: &[f64], d_pi: &DMatrix<f64>) -> Vec<f64> {
    let mean = pi.iter().sum::<f64>() / pi.len() as f64;
    let centered = nalgebra::DVector::from_iterator(pi.len(), pi.iter().map(|p| 2.0 * (p - mean)));
    (d_pi.transpose() * centered).iter().cloned().collect()
}

pub fn lyapunov(pi: &[f64], d_pi: &DMatrix<f64>) -> LyapunovValue {
    LyapunovValue { f: lyapunov_f(pi), grad_f: grad_f(pi, d_pi) }
}
