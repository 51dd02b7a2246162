//! Origin-based market clearing: given OD adjustments `phi`, find the
//! multipliers `pi` that balance driver flow at every location and dispatch
//! exactly `m` driver-units.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::economy::{validate_economy, AugmentedDemand, Economy, Outcome, PhantomDemand};
use crate::grid::Grid;
use crate::{linalg, sensitivity};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClearingError {
    #[error("invalid economy: {0}")]
    InvalidEconomy(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("price p[{i},{j}] = {price} is negative")]
    Domain { i: usize, j: usize, price: f64 },
    #[error("clearing Jacobian is singular")]
    SingularSystem,
    #[error("no convergence after {iterations} iterations (best residual {residual:e})")]
    NoConvergence { residual: f64, iterations: usize, best_pi: Vec<f64> },
    #[error("no clearing point with nonnegative prices found (residual {residual:e})")]
    DomainStuck { residual: f64 },
}

/// OD adjustments with the last location pinned to zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Adjustments(Vec<f64>);

impl Adjustments {
    pub fn zero(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    /// Builds from the `n - 1` free entries.
    pub fn from_free(free: &[f64]) -> Self {
        let mut v = free.to_vec();
        v.push(0.0);
        Self(v)
    }

    pub fn n(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn free(&self) -> &[f64] {
        &self.0[..self.0.len() - 1]
    }

    /// `self + step * delta` on the free entries.
    pub fn stepped(&self, step: f64, delta: &[f64]) -> Self {
        let free: Vec<f64> = self.free().iter().zip(delta).map(|(p, d)| p + step * d).collect();
        Self::from_free(&free)
    }
}

impl TryFrom<Vec<f64>> for Adjustments {
    type Error = String;

    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        match v.last() {
            None => Err("empty adjustment vector".into()),
            Some(&last) if last != 0.0 => Err(format!("last adjustment must be 0, got {last}")),
            _ if v.iter().any(|x| !x.is_finite()) => Err("non-finite adjustment".into()),
            _ => Ok(Self(v)),
        }
    }
}

impl From<Adjustments> for Vec<f64> {
    fn from(a: Adjustments) -> Self {
        a.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClearingOptions {
    /// Residual tolerance relative to `max(1, m)`.
    pub tol_supply: f64,
    /// Flow tolerance relative to `1 + total flow`.
    pub tol_flow: f64,
    pub tol_price: f64,
    pub max_iter: usize,
}

impl Default for ClearingOptions {
    fn default() -> Self {
        Self { tol_supply: 1e-9, tol_flow: 1e-8, tol_price: 1e-10, max_iter: 200 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketOutcome {
    pub phi: Adjustments,
    pub pi: Vec<f64>,
    #[serde(flatten)]
    pub outcome: Outcome,
    /// On-trip supply by origin, `z_i = sum_j d_ij y_ij`.
    pub z: Vec<f64>,
    pub residual_inf: f64,
    pub iterations: usize,
    /// Set when the Newton system needed a ridge shift.
    pub ridge: bool,
}

/// Prices, augmented flows and their slopes at one `(pi, phi)`.
pub(crate) struct Evaluation {
    pub prices: Grid<f64>,
    pub flow: Grid<f64>,
    pub slope: Grid<f64>,
}

impl Evaluation {
    /// Demand is evaluated at `max(p, 0)`; prices below `-tol_price` are an error.
    pub fn at(
        economy: &Economy,
        phantom: &PhantomDemand,
        pi: &[f64],
        phi: &[f64],
        tol_price: f64,
    ) -> Result<Self, ClearingError> {
        let n = economy.n();
        let aug = AugmentedDemand::new(economy, phantom);
        let prices = economy.prices(pi, phi);
        for (i, j, &p) in prices.iter_indexed() {
            if !(p >= -tol_price) {
                return Err(ClearingError::Domain { i, j, price: p });
            }
        }
        let flow = Grid::from_fn(n, |i, j| aug.value(i, j, prices[(i, j)].max(0.0)));
        let slope = Grid::from_fn(n, |i, j| aug.slope(i, j, prices[(i, j)].max(0.0)));
        Ok(Self { prices, flow, slope })
    }

    pub fn residual(&self, economy: &Economy) -> Vec<f64> {
        let n = economy.n();
        let mut g: Vec<f64> = (0..n - 1).map(|k| self.flow.col_sum(k) - self.flow.row_sum(k)).collect();
        let on_trip: f64 = economy.d().as_slice().iter().zip(self.flow.as_slice()).map(|(d, y)| d * y).sum();
        g.push(economy.m() - on_trip);
        g
    }
}

fn check_dims(economy: &Economy, phantom: &PhantomDemand, pi: Option<&[f64]>, phi: &Adjustments) -> Result<(), ClearingError> {
    let n = economy.n();
    if phantom.n() != n || phi.n() != n || pi.is_some_and(|p| p.len() != n) {
        return Err(ClearingError::Dimension(format!("economy has n = {n}")));
    }
    Ok(())
}

/// The clearing system `g(pi, phi)`: inflow minus outflow of augmented flow at
/// locations `1..n-1`, then `m` minus the on-trip supply.
pub fn residual_g(
    economy: &Economy,
    phantom: &PhantomDemand,
    pi: &[f64],
    phi: &Adjustments,
) -> Result<Vec<f64>, ClearingError> {
    check_dims(economy, phantom, Some(pi), phi)?;
    let ev = Evaluation::at(economy, phantom, pi, phi.as_slice(), ClearingOptions::default().tol_price)?;
    Ok(ev.residual(economy))
}

/// Smallest multipliers keeping every price from each origin nonnegative.
pub fn lowest_multipliers(economy: &Economy, phi: &Adjustments) -> Vec<f64> {
    let phi = phi.as_slice();
    (0..economy.n())
        .map(|i| {
            (0..economy.n())
                .map(|j| (phi[j] - phi[i] - economy.c()[(i, j)]) / economy.d()[(i, j)])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

fn total_supply(economy: &Economy, phantom: &PhantomDemand, pi: &[f64], phi: &[f64]) -> f64 {
    let aug = AugmentedDemand::new(economy, phantom);
    economy
        .d()
        .iter_indexed()
        .map(|(i, j, &d)| d * aug.value(i, j, economy.price(i, j, pi[i], phi).max(0.0)))
        .sum()
}

/// Lowest multipliers shifted uniformly so that total supply matches `m`.
fn cold_start(economy: &Economy, phantom: &PhantomDemand, lo: &[f64], phi: &[f64]) -> Vec<f64> {
    let shifted = |s: f64| lo.iter().map(|l| l + s).collect::<Vec<_>>();
    let m = economy.m();
    if total_supply(economy, phantom, lo, phi) <= m {
        return lo.to_vec();
    }
    let mut hi = 1.0;
    while total_supply(economy, phantom, &shifted(hi), phi) > m && hi < 1e12 {
        hi *= 2.0;
    }
    let mut a = 0.0;
    let mut b = hi;
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if total_supply(economy, phantom, &shifted(mid), phi) > m {
            a = mid;
        } else {
            b = mid;
        }
        if b - a <= 1e-13 * (1.0 + b) {
            break;
        }
    }
    shifted(0.5 * (a + b))
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

fn merit(g: &[f64]) -> f64 {
    0.5 * g.iter().map(|x| x * x).sum::<f64>()
}

/// Clears the market with default options.
pub fn clear_market(
    economy: &Economy,
    phantom: &PhantomDemand,
    phi: &Adjustments,
    warm_start: Option<&[f64]>,
) -> Result<MarketOutcome, ClearingError> {
    clear_market_with(economy, phantom, phi, warm_start, &ClearingOptions::default())
}

/// Damped Newton on `g(., phi) = 0` with iterates projected onto the
/// nonnegative-price domain. If Newton stalls, restarts from a point found by
/// nested bisection that already balances every location.
pub fn clear_market_with(
    economy: &Economy,
    phantom: &PhantomDemand,
    phi: &Adjustments,
    warm_start: Option<&[f64]>,
    opts: &ClearingOptions,
) -> Result<MarketOutcome, ClearingError> {
    check_dims(economy, phantom, warm_start, phi)?;
    let report = validate_economy(economy, None);
    if !report.is_valid() {
        return Err(ClearingError::InvalidEconomy(report.violations.join("; ")));
    }
    let phis = phi.as_slice();
    let lo = lowest_multipliers(economy, phi);
    let fatal = |err: &ClearingError| {
        matches!(err, ClearingError::Domain { .. } | ClearingError::Dimension(_) | ClearingError::InvalidEconomy(_))
    };
    let mut attempt = match warm_start {
        Some(w) if w.iter().all(|v| v.is_finite()) => {
            newton(economy, phantom, phis, &lo, w.iter().zip(&lo).map(|(p, l)| p.max(*l)).collect(), opts)
        }
        _ => Err(ClearingError::SingularSystem),
    };
    if matches!(&attempt, Err(err) if !fatal(err)) {
        if warm_start.is_some() {
            log::debug!("warm start failed; trying a cold start");
        }
        attempt = newton(economy, phantom, phis, &lo, cold_start(economy, phantom, &lo, phis), opts);
    }
    let solved = match attempt {
        Ok(s) => s,
        Err(err) if fatal(&err) => return Err(err),
        Err(err) => {
            log::debug!("newton failed ({err}); restarting from a balanced point");
            let guess = match &err {
                ClearingError::NoConvergence { best_pi, .. } => best_pi[economy.n() - 1],
                _ => lo[economy.n() - 1],
            };
            let (start, pinned) = balanced_start(economy, phantom, &lo, phis, guess);
            if pinned {
                // some origin cannot shed its inflow without a negative price
                let residual = inf_norm(&Evaluation::at(economy, phantom, &start, phis, opts.tol_price)?.residual(economy));
                return Err(ClearingError::DomainStuck { residual });
            }
            newton(economy, phantom, phis, &lo, start, opts)?
        }
    };
    let Solved { pi, ev, g, iterations, ridge } = solved;
    Ok(assemble_outcome(economy, phantom, phi.clone(), pi, &ev, inf_norm(&g), iterations, ridge))
}

struct Solved {
    pi: Vec<f64>,
    ev: Evaluation,
    g: Vec<f64>,
    iterations: usize,
    ridge: bool,
}

fn newton(
    economy: &Economy,
    phantom: &PhantomDemand,
    phis: &[f64],
    lo: &[f64],
    start: Vec<f64>,
    opts: &ClearingOptions,
) -> Result<Solved, ClearingError> {
    let n = economy.n();
    let project = |pi: Vec<f64>| -> Vec<f64> { pi.iter().zip(lo).map(|(p, l)| p.max(*l)).collect() };
    let tol = opts.tol_supply * economy.m().max(1.0);
    let eval = |pi: &[f64]| -> Result<(Evaluation, Vec<f64>), ClearingError> {
        let ev = Evaluation::at(economy, phantom, pi, phis, opts.tol_price)?;
        let g = ev.residual(economy);
        Ok((ev, g))
    };

    let mut pi = project(start);
    let (mut ev, mut g) = eval(&pi)?;
    let mut ridge = false;
    let mut polish = 0;
    let mut iterations = 0;
    let mut checkpoint = merit(&g);
    loop {
        let r = inf_norm(&g);
        if iterations > 0 && iterations % 25 == 0 && r > tol {
            // creeping along a clamped face; a fresh start does better
            if merit(&g) > 0.25 * checkpoint {
                return Err(ClearingError::NoConvergence { residual: r, iterations, best_pi: pi });
            }
            checkpoint = merit(&g);
        }
        if r <= tol {
            polish += 1;
            if polish > 2 || r == 0.0 {
                break;
            }
        }
        if iterations >= opts.max_iter {
            if r <= tol {
                break;
            }
            return Err(ClearingError::NoConvergence { residual: r, iterations, best_pi: pi });
        }
        iterations += 1;
        let jac = sensitivity::d_pi_g_from(economy, &ev.slope);
        let rhs = DMatrix::from_iterator(n, 1, g.iter().map(|v| -v));
        let (step, used_ridge) = linalg::solve_with_ridge(&jac, &rhs).ok_or(ClearingError::SingularSystem)?;
        ridge |= used_ridge;

        let m0 = merit(&g);
        let mut lambda = 1.0;
        let mut accepted = None;
        let mut clipped = false;
        for _ in 0..60 {
            let raw: Vec<f64> = pi.iter().zip(step.iter()).map(|(p, s)| p + lambda * s).collect();
            clipped = raw.iter().zip(lo).any(|(p, l)| p < l);
            let cand = project(raw);
            let (cev, cg) = eval(&cand)?;
            let m1 = merit(&cg);
            if m1 <= (1.0 - 1e-4 * lambda) * m0 || (r <= tol && m1 < m0) {
                accepted = Some((cand, cev, cg));
                break;
            }
            lambda *= 0.5;
        }
        match accepted {
            Some((cand, cev, cg)) => {
                pi = cand;
                ev = cev;
                g = cg;
            }
            None if r <= tol => break,
            None if clipped => return Err(ClearingError::DomainStuck { residual: r }),
            None => return Err(ClearingError::NoConvergence { residual: r, iterations, best_pi: pi }),
        }
    }
    Ok(Solved { pi, ev, g, iterations, ridge })
}

/// Root of a decreasing function on `[a, ...)` by Newton steps safeguarded
/// with a bracket; returns `a` when `f(a) <= 0`. `f` returns value and slope.
fn decreasing_root(a: f64, guess: f64, f: impl Fn(f64) -> (f64, f64)) -> f64 {
    if f(a).0 <= 0.0 {
        return a;
    }
    let (mut lo, mut hi) = (a, guess.max(a));
    let mut width = 1.0;
    while f(hi).0 > 0.0 {
        lo = hi;
        hi += width;
        width *= 2.0;
        if width > 1e12 {
            return hi;
        }
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..100 {
        let (v, slope) = f(x);
        if v > 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        if hi - lo <= 1e-13 * (1.0 + hi.abs()) || v == 0.0 {
            break;
        }
        let newton = x - v / slope;
        x = if slope < 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if (x - lo).min(hi - x) <= 1e-13 * (1.0 + x.abs()) {
            break;
        }
    }
    x
}

/// Multipliers with `pi_n = s` and locations `1..n-1` balanced by nonlinear
/// Gauss-Seidel: each location's outflow depends only on its own multiplier.
/// Returns whether some origin stays at its lowest multiplier with more
/// inflow than it can send out.
fn balance_given_last(economy: &Economy, phantom: &PhantomDemand, lo: &[f64], phi: &[f64], s: f64, pi: &mut [f64]) -> bool {
    let n = economy.n();
    let aug = AugmentedDemand::new(economy, phantom);
    let flow = |i: usize, j: usize, pi_i: f64| aug.value(i, j, economy.price(i, j, pi_i, phi).max(0.0));
    let outflow = |k: usize, p: f64| {
        (0..n).filter(|j| *j != k).fold((0.0, 0.0), |(v, dv), j| {
            let r = economy.price(k, j, p, phi);
            let dr = if r > 0.0 { economy.d()[(k, j)] * aug.slope(k, j, r) } else { 0.0 };
            (v + aug.value(k, j, r.max(0.0)), dv + dr)
        })
    };
    let inflow = |k: usize, pi: &[f64]| (0..n).filter(|i| *i != k).map(|i| flow(i, k, pi[i])).sum::<f64>();
    pi[n - 1] = s.max(lo[n - 1]);
    for _ in 0..2000 {
        let mut change = 0.0f64;
        for k in 0..n - 1 {
            let into = inflow(k, pi);
            let next = decreasing_root(lo[k], pi[k], |p| {
                let (v, dv) = outflow(k, p);
                (v - into, dv)
            });
            change = change.max((next - pi[k]).abs());
            pi[k] = next;
        }
        if change <= 1e-9 * (1.0 + inf_norm(pi)) {
            break;
        }
    }
    let tol = 1e-6 * economy.m().max(1.0);
    (0..n - 1).any(|k| pi[k] <= lo[k] && inflow(k, pi) - outflow(k, lo[k]).0 > tol)
}

/// Regula falsi on `pi_n` so that the balanced point dispatches `m`; the
/// bracket grows outward from `guess`. The flag reports an origin that
/// stays pinned at the root, in which case no clearing point exists.
fn balanced_start(economy: &Economy, phantom: &PhantomDemand, lo: &[f64], phi: &[f64], guess: f64) -> (Vec<f64>, bool) {
    let n = economy.n();
    let m = economy.m();
    let floor = lo[n - 1];
    let mut pi = lo.to_vec();
    let excess = |s: f64, pi: &mut Vec<f64>| {
        let pinned = balance_given_last(economy, phantom, lo, phi, s, pi);
        (total_supply(economy, phantom, pi, phi) - m, pinned)
    };
    // excess decreases in s and a pinned origin stays pinned as s falls, so
    // one pinned point with excess <= 0 settles infeasibility
    let g = guess.max(floor);
    let (eg, pinned) = excess(g, &mut pi);
    if eg <= 0.0 && pinned {
        return (pi, true);
    }
    let ((mut l, mut fl), (mut h, mut fh)) = if eg > 0.0 {
        let mut lo_end = (g, eg);
        let mut width = 1.0;
        loop {
            let h = g + width;
            let (fh, pinned) = excess(h, &mut pi);
            if fh <= 0.0 && pinned {
                return (pi, true);
            }
            if fh <= 0.0 || width > 1e9 {
                break (lo_end, (h, fh));
            }
            lo_end = (h, fh);
            width *= 2.0;
        }
    } else {
        let mut hi_end = (g, eg);
        let mut width = 1.0;
        loop {
            if hi_end.0 <= floor {
                return (pi, true);
            }
            let l = (g - width).max(floor);
            let (fl, pinned) = excess(l, &mut pi);
            if fl > 0.0 {
                break ((l, fl), hi_end);
            }
            if pinned {
                return (pi, true);
            }
            hi_end = (l, fl);
            width *= 2.0;
        }
    };
    let mut side = 0;
    let mut pinned = false;
    for _ in 0..200 {
        if h - l <= 1e-12 * (1.0 + h.abs()) {
            break;
        }
        let s = (l * fh - h * fl) / (fh - fl);
        let s = if s > l && s < h { s } else { 0.5 * (l + h) };
        let (fs, p) = excess(s, &mut pi);
        pinned = p;
        if fs.abs() <= 1e-12 * m {
            break;
        }
        if fs <= 0.0 && pinned {
            return (pi, true);
        }
        // Illinois: halve the stale end so both ends keep moving
        if fs > 0.0 {
            (l, fl) = (s, fs);
            if side == 1 {
                fh *= 0.5;
            }
            side = 1;
        } else {
            (h, fh) = (s, fs);
            if side == -1 {
                fl *= 0.5;
            }
            side = -1;
        }
    }
    (pi, pinned)
}

#[allow(clippy::too_many_arguments)]
fn assemble_outcome(
    economy: &Economy,
    phantom: &PhantomDemand,
    phi: Adjustments,
    pi: Vec<f64>,
    ev: &Evaluation,
    residual_inf: f64,
    iterations: usize,
    ridge: bool,
) -> MarketOutcome {
    let n = economy.n();
    let x = ev.prices.map(|i, j, p| economy.demand()[(i, j)].value(p.max(0.0)));
    let y = Grid::from_fn(n, |i, j| x[(i, j)] + phantom.curve(i, j).value(ev.prices[(i, j)].max(0.0)));
    let z = (0..n).map(|i| (0..n).map(|j| economy.d()[(i, j)] * y[(i, j)]).sum()).collect();
    MarketOutcome {
        phi,
        pi,
        outcome: Outcome { x, y, p: ev.prices.clone() },
        z,
        residual_inf,
        iterations,
        ridge,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConditionCheck {
    pub name: &'static str,
    pub pass: bool,
    /// Worst violation magnitude (0 when satisfied exactly).
    pub worst: f64,
    /// Location or OD pair of the worst violation.
    pub at: Option<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OutcomeReport {
    pub checks: Vec<ConditionCheck>,
}

impl OutcomeReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn get(&self, name: &str) -> Option<&ConditionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn worst_of(items: impl Iterator<Item = ((usize, usize), f64)>) -> (f64, Option<(usize, usize)>) {
    items.fold((0.0, None), |(w, at), (ij, v)| if v > w { (v, Some(ij)) } else { (w, at) })
}

/// Checks feasibility (F1 to F4) and the clearing conditions (MC1, MC2).
pub fn verify_outcome(
    outcome: &MarketOutcome,
    economy: &Economy,
    phantom: &PhantomDemand,
    opts: &ClearingOptions,
) -> OutcomeReport {
    let Outcome { x, y, p } = &outcome.outcome;
    let n = economy.n();
    let tol_flow = opts.tol_flow * (1.0 + y.sum());
    let m = economy.m();
    let tol_supply = opts.tol_supply * m.max(1.0);
    let mut checks = Vec::new();
    let mut push = |name, tol: f64, (worst, at): (f64, Option<(usize, usize)>)| {
        checks.push(ConditionCheck { name, pass: worst <= tol, worst, at });
    };

    push("F1", opts.tol_price, worst_of(p.iter_indexed().map(|(i, j, &v)| ((i, j), -v))));
    push("F2", tol_flow, worst_of(x.iter_indexed().map(|(i, j, &v)| ((i, j), v - y[(i, j)]))));
    let on_trip: f64 = economy.d().iter_indexed().map(|(i, j, &d)| d * y[(i, j)]).sum();
    push("F3", tol_supply, (on_trip - m, None));
    push("F4", tol_flow, worst_of((0..n).map(|k| ((k, k), (y.row_sum(k) - y.col_sum(k)).abs()))));
    let mc1 = worst_of(p.iter_indexed().map(|(i, j, &pr)| {
        let pr = pr.max(0.0);
        let rider = (x[(i, j)] - economy.demand()[(i, j)].value(pr)).abs();
        let reloc = (y[(i, j)] - x[(i, j)] - phantom.curve(i, j).value(pr)).abs();
        ((i, j), rider.max(reloc))
    }));
    push("MC1", tol_flow, mc1);
    push("MC2", tol_supply, ((on_trip - m).abs(), None));
    OutcomeReport { checks }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::economy::{DemandCurve, PhantomCurve, TimeUnit};

    fn example1() -> (Economy, PhantomDemand) {
        let d = Grid::from_row_major(vec![10.0, 20.0, 20.0, 10.0]).unwrap();
        let mut demand = Grid::filled(2, DemandCurve::Zero);
        demand[(0, 1)] = DemandCurve::exponential(10.0, 40.0).unwrap();
        demand[(1, 1)] = DemandCurve::exponential(20.0, 10.0).unwrap();
        let e = Economy::new(240.0, d, Grid::zeros(2), demand, TimeUnit::Minutes).unwrap();
        (e, PhantomDemand::uniform(2, PhantomCurve::bump(24.0, 5.0, 4).unwrap()))
    }

    #[test]
    fn residual_at_origin_example1() {
        let (e, ph) = example1();
        let g = residual_g(&e, &ph, &[0.0, 0.0], &Adjustments::zero(2)).unwrap();
        assert!((g[0] + 10.0).abs() < 1e-12 && (g[1] + 1600.0).abs() < 1e-9, "{g:?}");
    }

    #[test]
    fn residual_rejects_negative_price() {
        let (e, ph) = example1();
        let err = residual_g(&e, &ph, &[-1.0, 0.0], &Adjustments::zero(2)).unwrap_err();
        assert!(matches!(err, ClearingError::Domain { i: 0, .. }));
    }

    #[test]
    fn adjustments_require_pinned_last() {
        assert!(serde_json::from_str::<Adjustments>("[1.0, 2.0]").is_err());
        let a: Adjustments = serde_json::from_str("[1.0, 0.0]").unwrap();
        assert_eq!(a.free(), &[1.0]);
    }

    #[test]
    fn example1_clears_and_verifies() {
        let (e, ph) = example1();
        let out = clear_market(&e, &ph, &Adjustments::zero(2), None).unwrap();
        assert!(out.pi[0] > 4.0 && out.pi[0] < 6.5, "{:?}", out.pi);
        assert!(out.residual_inf <= 1e-9 * 240.0);
        let rep = verify_outcome(&out, &e, &ph, &ClearingOptions::default());
        assert!(rep.all_pass(), "{rep:?}");
    }

    #[test]
    fn verify_flags_constructed_breaches() {
        let (e, ph) = example1();
        let out = clear_market(&e, &ph, &Adjustments::zero(2), None).unwrap();
        let mut broken = out.clone();
        broken.outcome.y[(0, 1)] -= 1.0;
        let rep = verify_outcome(&broken, &e, &ph, &ClearingOptions::default());
        let f4 = rep.get("F4").unwrap();
        assert!(!f4.pass && (f4.worst - 1.0).abs() < 1e-9);

        let shifted = e.with_supply(240.0 * 1.05);
        let rep = verify_outcome(&out, &shifted, &ph, &ClearingOptions::default());
        let mc2 = rep.get("MC2").unwrap();
        assert!(!mc2.pass && (mc2.worst - 12.0).abs() < 1e-6);
    }
}
