//! Welfare-optimal reference: the dual minimizer `(omega*, phi*)`, the induced
//! competitive-equilibrium outcome, and equilibrium verification.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::clearing::Adjustments;
use crate::economy::{Economy, Outcome};
use crate::grid::Grid;
use crate::linalg;
use crate::network::{self, Cycle, CycleDecomposition, NetworkError};
use crate::welfare::{self, WelfareError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BenchmarkError {
    #[error("starting point is not strictly feasible: {0}")]
    Infeasible(String),
    #[error("dual solver stalled (gap {gap:e})")]
    NoConvergence { gap: f64 },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Welfare(#[from] WelfareError),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DualSolution {
    pub omega_star: f64,
    pub phi_star: Adjustments,
    pub prices: Grid<f64>,
    pub welfare_star: f64,
    /// Dual objective minus `welfare_star`.
    pub gap: f64,
    /// Rider flow `q(p*)` completed to a balanced driver flow.
    pub outcome: Outcome,
    pub newton_steps: usize,
}

/// Barrier objective over `u = (omega, phi_1 .. phi_{n-1})`.
struct Barrier<'a> {
    economy: &'a Economy,
}

impl Barrier<'_> {
    fn prices(&self, u: &[f64]) -> Grid<f64> {
        let e = self.economy;
        let n = e.n();
        let phi = |k: usize| if k + 1 < n { u[1 + k] } else { 0.0 };
        Grid::from_fn(n, |i, j| e.c()[(i, j)] + e.d()[(i, j)] * u[0] + phi(i) - phi(j))
    }

    fn interior(&self, u: &[f64]) -> bool {
        u[0] > 0.0 && self.prices(u).as_slice().iter().all(|&p| p > 0.0)
    }

    fn value(&self, u: &[f64], mu: f64) -> f64 {
        let e = self.economy;
        let prices = self.prices(u);
        let mut v = e.m() * u[0] - mu * u[0].ln();
        for (i, j, &p) in prices.iter_indexed() {
            v += e.demand()[(i, j)].tail_integral(p) - mu * p.ln();
        }
        v
    }

    fn gradient_hessian(&self, u: &[f64], mu: f64) -> (DVector<f64>, DMatrix<f64>) {
        let e = self.economy;
        let n = e.n();
        let dim = n;
        let prices = self.prices(u);
        let mut g = DVector::zeros(dim);
        let mut h = DMatrix::zeros(dim, dim);
        g[0] = e.m() - mu / u[0];
        h[(0, 0)] = mu / (u[0] * u[0]);
        for (i, j, &p) in prices.iter_indexed() {
            let curve = &e.demand()[(i, j)];
            let first = -curve.value(p) - mu / p;
            let second = -curve.slope(p) + mu / (p * p);
            let mut idx = [(0usize, e.d()[(i, j)]); 3];
            let mut len = 1;
            if i != j {
                if i + 1 < n {
                    idx[len] = (1 + i, 1.0);
                    len += 1;
                }
                if j + 1 < n {
                    idx[len] = (1 + j, -1.0);
                    len += 1;
                }
            }
            for &(a, va) in &idx[..len] {
                g[a] += va * first;
                for &(b, vb) in &idx[..len] {
                    h[(a, b)] += va * vb * second;
                }
            }
        }
        (g, h)
    }
}

/// Omega at which riders alone use all `m` driver-units at `phi = 0`.
fn supply_matching_omega(economy: &Economy) -> f64 {
    let used = |w: f64| -> f64 {
        economy
            .demand()
            .iter_indexed()
            .map(|(i, j, q)| economy.d()[(i, j)] * q.value(economy.c()[(i, j)] + economy.d()[(i, j)] * w))
            .sum()
    };
    if used(0.0) <= economy.m() {
        return 0.0;
    }
    let mut hi = 1.0;
    while used(hi) > economy.m() && hi < 1e12 {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if used(mid) > economy.m() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Solves the welfare dual from the default interior start.
pub fn solve_optimal_dual(economy: &Economy, tol: Option<f64>) -> Result<DualSolution, BenchmarkError> {
    let omega0 = supply_matching_omega(economy).max(1e-3);
    solve_optimal_dual_from(economy, tol, omega0, &Adjustments::zero(economy.n()))
}

/// Log-barrier Newton on the welfare dual. `tol` defaults to `1e-6 m`.
pub fn solve_optimal_dual_from(
    economy: &Economy,
    tol: Option<f64>,
    omega0: f64,
    phi0: &Adjustments,
) -> Result<DualSolution, BenchmarkError> {
    let n = economy.n();
    let tol = tol.unwrap_or(1e-6 * economy.m());
    let barrier = Barrier { economy };
    let mut u: Vec<f64> = std::iter::once(omega0).chain(phi0.free().iter().cloned()).collect();
    if !barrier.interior(&u) {
        return Err(BenchmarkError::Infeasible(format!("omega = {omega0} with the given adjustments")));
    }
    let constraints = (n * n + 1) as f64;
    let mut mu = 0.1 * economy.m() * omega0.max(1.0) / constraints;
    let target_mu = 1e-3 * tol / constraints;
    let mut steps = 0;
    loop {
        for _ in 0..200 {
            let (g, h) = barrier.gradient_hessian(&u, mu);
            let rhs = DMatrix::from_column_slice(n, 1, (-&g).as_slice());
            // barrier terms on nearly active prices make h badly scaled but still positive definite
            let step = match h.clone().cholesky() {
                Some(ch) => ch.solve(&rhs),
                None => match linalg::solve(&h, &rhs) {
                    Some(s) => s,
                    None => break,
                },
            };
            let slope = g.dot(&step.column(0));
            if -slope <= 1e-24 * (1.0 + mu) {
                break;
            }
            steps += 1;
            let f0 = barrier.value(&u, mu);
            let g0 = g.norm();
            let mut t = 1.0;
            let mut moved = false;
            for _ in 0..60 {
                let cand: Vec<f64> = u.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
                if barrier.interior(&cand) {
                    let f1 = barrier.value(&cand, mu);
                    // near the minimizer values agree to rounding; fall back to the gradient
                    let flat = (f1 - f0).abs() <= 1e-13 * (1.0 + f0.abs());
                    if f1 <= f0 + 0.25 * t * slope || (flat && barrier.gradient_hessian(&cand, mu).0.norm() < g0) {
                        u = cand;
                        moved = true;
                        break;
                    }
                }
                t *= 0.5;
            }
            if !moved {
                break;
            }
        }
        if mu <= target_mu {
            let sol = finish(economy, &u, steps)?;
            if sol.gap <= tol {
                return Ok(sol);
            }
            if mu < 1e-16 {
                return Err(BenchmarkError::NoConvergence { gap: sol.gap });
            }
        }
        mu *= 0.1;
    }
}

fn finish(economy: &Economy, u: &[f64], steps: usize) -> Result<DualSolution, BenchmarkError> {
    let n = economy.n();
    let omega = u[0];
    let phi = Adjustments::from_free(&u[1..]);
    let prices = economy.prices(&vec![omega; n], phi.as_slice());
    let x = prices.map(|i, j, &p| economy.demand()[(i, j)].value(p));
    let routing = Grid::from_fn(n, |i, j| economy.c()[(i, j)] + omega * economy.d()[(i, j)]);
    let excess: Vec<f64> = (0..n).map(|k| x.col_sum(k) - x.row_sum(k)).collect();
    let (z, _) = network::min_cost_rebalance(&excess, &routing)?;
    let y = Grid::from_fn(n, |i, j| x[(i, j)] + z[(i, j)]);
    let outcome = Outcome { x, y, p: prices.clone() };
    let welfare_star = welfare::primal_welfare(&outcome, economy)?;
    let dual = welfare::dual_objective(economy, &phi, &vec![omega; n])?;
    Ok(DualSolution { omega_star: omega, phi_star: phi, prices, welfare_star, gap: dual - welfare_star, outcome, newton_steps: steps })
}

pub fn cycle_decompose(y: &Grid<f64>) -> Result<CycleDecomposition, NetworkError> {
    network::cycle_decompose(y)
}

pub fn cycle_surplus(cycle: &Cycle, p: &Grid<f64>, c: &Grid<f64>, d: &Grid<f64>) -> f64 {
    cycle.surplus_rate(p, c, d)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CeCheck {
    pub name: &'static str,
    pub pass: bool,
    pub worst: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CeReport {
    pub checks: Vec<CeCheck>,
    /// Highest surplus rate over all cycles and a cycle attaining it.
    pub max_mu: f64,
    pub best_cycle: Cycle,
    pub decomposition: Option<CycleDecomposition>,
}

impl CeReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn get(&self, name: &str) -> Option<&CeCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Checks rider best response (R1) and the driver conditions D1 to D4.
///
/// `tol` is an absolute tolerance on prices and surplus rates; flow
/// comparisons use `tol (1 + total flow)`.
pub fn verify_ce(outcome: &Outcome, economy: &Economy, tol: f64) -> CeReport {
    let Outcome { x, y, p } = outcome;
    let flow_tol = tol * (1.0 + y.sum());
    let margin = p.map(|i, j, &v| v - economy.c()[(i, j)]);
    let (best_cycle, max_mu) = network::max_ratio_cycle(&margin, economy.d());
    let mut checks = Vec::new();

    let r1 = p
        .iter_indexed()
        .map(|(i, j, &pr)| (x[(i, j)] - economy.demand()[(i, j)].value(pr.max(0.0))).abs())
        .fold(0.0, f64::max);
    checks.push(CeCheck { name: "R1", pass: r1 <= flow_tol, worst: r1 });

    let d1 = y
        .iter_indexed()
        .filter(|&(i, j, &v)| v - x[(i, j)] > flow_tol)
        .map(|(i, j, _)| p[(i, j)].abs())
        .fold(0.0, f64::max);
    checks.push(CeCheck { name: "D1", pass: d1 <= tol, worst: d1 });

    let on_trip: f64 = economy.d().iter_indexed().map(|(i, j, &d)| d * y[(i, j)]).sum();
    let d2 = if max_mu > tol { (on_trip - economy.m()).abs() } else { 0.0 };
    checks.push(CeCheck { name: "D2", pass: d2 <= tol * economy.m().max(1.0), worst: d2 });

    let d3 = if max_mu < -tol { y.as_slice().iter().cloned().fold(0.0, f64::max) } else { 0.0 };
    checks.push(CeCheck { name: "D3", pass: d3 <= flow_tol, worst: d3 });

    let decomposition = network::cycle_decompose(y).ok();
    let d4 = match &decomposition {
        Some(dec) => dec
            .cycles
            .iter()
            .filter(|(_, w)| *w > flow_tol)
            .map(|(c, _)| max_mu - c.surplus_rate(p, economy.c(), economy.d()))
            .fold(0.0, f64::max),
        None => f64::INFINITY,
    };
    checks.push(CeCheck { name: "D4", pass: d4 <= tol, worst: d4 });

    CeReport { checks, max_mu, best_cycle, decomposition }
}
