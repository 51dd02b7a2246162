//! Jacobians of the clearing system and of the multiplier map `Pi(phi)`.
//!
//! Every entry depends only on the durations `d_ij` and the augmented demand
//! slopes `q^'_ij(p_ij)` at the current prices.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::clearing::{Adjustments, ClearingError, ClearingOptions, Evaluation, MarketOutcome};
use crate::economy::{Economy, PhantomDemand};
use crate::grid::Grid;
use crate::linalg;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SensitivityError {
    #[error(transparent)]
    Clearing(#[from] ClearingError),
    #[error("linear system is singular")]
    SingularSystem,
}

/// `D_pi g` (n x n) and `D_phi g` (n x (n-1)) at one point.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClearingJacobians {
    pub d_pi_g: DMatrix<f64>,
    pub d_phi_g: DMatrix<f64>,
    /// Some flow row has no price response, so `D_pi g` is structurally singular.
    pub degenerate: bool,
}

impl ClearingJacobians {
    pub fn n(&self) -> usize {
        self.d_pi_g.nrows()
    }

    /// Upper-left `(n-1) x (n-1)` block of `D_pi g`.
    pub fn a(&self) -> DMatrix<f64> {
        let k = self.n() - 1;
        self.d_pi_g.view((0, 0), (k, k)).into_owned()
    }

    /// Last column of `D_pi g` restricted to the flow rows.
    pub fn beta(&self) -> DVector<f64> {
        let k = self.n() - 1;
        self.d_pi_g.view((0, k), (k, 1)).column(0).into_owned()
    }

    /// Supply row of `D_pi g` over the first `n-1` multipliers.
    pub fn gamma(&self) -> DVector<f64> {
        let k = self.n() - 1;
        self.d_pi_g.view((k, 0), (1, k)).transpose().column(0).into_owned()
    }

    pub fn lambda(&self) -> f64 {
        let k = self.n() - 1;
        self.d_pi_g[(k, k)]
    }

    /// Flow rows of `D_phi g`.
    pub fn b(&self) -> DMatrix<f64> {
        let k = self.n() - 1;
        self.d_phi_g.view((0, 0), (k, k)).into_owned()
    }

    /// Supply row of `D_phi g`.
    pub fn theta(&self) -> DVector<f64> {
        let k = self.n() - 1;
        self.d_phi_g.view((k, 0), (1, k)).transpose().column(0).into_owned()
    }
}

/// `D_pi g` from a grid of augmented slopes `h_ij = q^'_ij(p_ij)`.
pub(crate) fn d_pi_g_from(economy: &Economy, h: &Grid<f64>) -> DMatrix<f64> {
    let n = economy.n();
    let d = economy.d();
    let mut jac = DMatrix::zeros(n, n);
    for k in 0..n - 1 {
        for l in 0..n {
            jac[(k, l)] = d[(l, k)] * h[(l, k)];
        }
        let out: f64 = (0..n).map(|j| d[(k, j)] * h[(k, j)]).sum();
        jac[(k, k)] -= out;
    }
    for l in 0..n {
        jac[(n - 1, l)] = -(0..n).map(|j| d[(l, j)] * d[(l, j)] * h[(l, j)]).sum::<f64>();
    }
    jac
}

pub(crate) fn d_phi_g_from(economy: &Economy, h: &Grid<f64>) -> DMatrix<f64> {
    let n = economy.n();
    let d = economy.d();
    let mut jac = DMatrix::zeros(n, n - 1);
    for k in 0..n - 1 {
        for l in 0..n - 1 {
            jac[(k, l)] = h[(l, k)] + h[(k, l)];
        }
        let total = h.col_sum(k) + h.row_sum(k);
        jac[(k, k)] -= total;
    }
    for l in 0..n - 1 {
        let out: f64 = (0..n).map(|j| d[(l, j)] * h[(l, j)]).sum();
        let inc: f64 = (0..n).map(|i| d[(i, l)] * h[(i, l)]).sum();
        jac[(n - 1, l)] = -out + inc;
    }
    jac
}

/// Jacobians at an arbitrary in-domain point.
pub fn assemble_jacobians_at(
    economy: &Economy,
    phantom: &PhantomDemand,
    pi: &[f64],
    phi: &Adjustments,
) -> Result<ClearingJacobians, SensitivityError> {
    let ev = Evaluation::at(economy, phantom, pi, phi.as_slice(), ClearingOptions::default().tol_price)?;
    let d_pi_g = d_pi_g_from(economy, &ev.slope);
    let d_phi_g = d_phi_g_from(economy, &ev.slope);
    let n = economy.n();
    let degenerate = (0..n).any(|k| (0..n).all(|j| ev.slope[(k, j)] == 0.0));
    Ok(ClearingJacobians { d_pi_g, d_phi_g, degenerate })
}

pub fn assemble_jacobians(
    economy: &Economy,
    phantom: &PhantomDemand,
    outcome: &MarketOutcome,
) -> Result<ClearingJacobians, SensitivityError> {
    assemble_jacobians_at(economy, phantom, &outcome.pi, &outcome.phi)
}

/// `D Pi = -(D_pi g)^{-1} D_phi g`, an n x (n-1) matrix.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MultiplierSensitivity {
    pub d_pi: DMatrix<f64>,
    pub ridge: bool,
}

pub fn jacobian_pi(jacobians: &ClearingJacobians) -> Result<MultiplierSensitivity, SensitivityError> {
    let (sol, ridge) =
        linalg::solve_with_ridge(&jacobians.d_pi_g, &jacobians.d_phi_g).ok_or(SensitivityError::SingularSystem)?;
    Ok(MultiplierSensitivity { d_pi: -sol, ridge })
}
