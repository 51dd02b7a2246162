//! Spatial economy model: demand curves, relocation (phantom) curves, trip
//! durations and costs.
//!
//! Prices are in dollars. The time unit (minutes or hours) is carried on the
//! [`Economy`] and applies to flows, durations and driver supply alike.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Grid;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EconomyError {
    #[error("negative price {0}")]
    NegativePrice(f64),
    #[error("flow {x} exceeds zero-price demand {q0}")]
    FlowAboveDemand { x: f64, q0: f64 },
    #[error("negative flow {0}")]
    NegativeFlow(f64),
    #[error("invalid curve parameters: {0}")]
    InvalidCurve(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Value and slope of a demand curve at a price.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DemandPoint {
    pub q: f64,
    pub q_prime: f64,
}

/// Rider demand `q(r)`: riders per unit time willing to pay at least `r`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DemandCurve {
    /// `q(r) = Q exp(-r / theta)`, riders' values exponential with mean `theta`.
    Exponential {
        #[serde(rename = "Q")]
        q0: f64,
        theta: f64,
    },
    Zero,
}

impl DemandCurve {
    pub fn exponential(q0: f64, theta: f64) -> Result<Self, EconomyError> {
        if !(q0 >= 0.0 && q0.is_finite()) || !(theta > 0.0 && theta.is_finite()) {
            return Err(EconomyError::InvalidCurve(format!("exponential Q={q0} theta={theta}")));
        }
        Ok(DemandCurve::Exponential { q0, theta })
    }

    pub fn is_zero(&self) -> bool {
        match *self {
            DemandCurve::Zero => true,
            DemandCurve::Exponential { q0, .. } => q0 == 0.0,
        }
    }

    /// Value and derivative at `r >= 0`.
    pub fn eval(&self, r: f64) -> Result<DemandPoint, EconomyError> {
        if r < 0.0 || r.is_nan() {
            return Err(EconomyError::NegativePrice(r));
        }
        Ok(DemandPoint { q: self.value(r), q_prime: self.slope(r) })
    }

    /// Unchecked `q(r)`; callers guarantee `r >= 0`.
    pub fn value(&self, r: f64) -> f64 {
        match *self {
            DemandCurve::Exponential { q0, theta } => q0 * (-r / theta).exp(),
            DemandCurve::Zero => 0.0,
        }
    }

    /// Unchecked `q'(r)`.
    pub fn slope(&self, r: f64) -> f64 {
        match *self {
            DemandCurve::Exponential { q0, theta } => -q0 / theta * (-r / theta).exp(),
            DemandCurve::Zero => 0.0,
        }
    }

    pub fn at_zero(&self) -> f64 {
        self.value(0.0)
    }

    /// Value of the `s`-th rider, `v(s) = q^{-1}(s)`.
    ///
    /// Returns `+inf` for `s <= 0` and `-inf` for `s > q(0)`.
    pub fn inverse(&self, s: f64) -> f64 {
        if s <= 0.0 {
            return f64::INFINITY;
        }
        match *self {
            DemandCurve::Exponential { q0, theta } if s <= q0 => theta * (q0 / s).ln(),
            _ => f64::NEG_INFINITY,
        }
    }

    /// `int_p^inf q(r) dr`, the rider surplus at price `p`.
    pub fn tail_integral(&self, p: f64) -> f64 {
        match *self {
            DemandCurve::Exponential { q0, theta } => q0 * theta * (-p.max(0.0) / theta).exp(),
            DemandCurve::Zero => 0.0,
        }
    }

    /// `int_0^x v(s) ds`, total value of the `x` highest-value riders.
    pub fn surplus_integral(&self, x: f64) -> Result<f64, EconomyError> {
        if x < 0.0 {
            return Err(EconomyError::NegativeFlow(x));
        }
        if x == 0.0 {
            return Ok(0.0);
        }
        let q0 = self.at_zero();
        if x > q0 * (1.0 + 1e-12) {
            return Err(EconomyError::FlowAboveDemand { x, q0 });
        }
        match *self {
            DemandCurve::Exponential { q0, theta } => {
                let x = x.min(q0);
                Ok(theta * x * ((q0 / x).ln() + 1.0))
            }
            DemandCurve::Zero => unreachable!("zero demand admits only zero flow"),
        }
    }
}

/// Platform-chosen relocation curve `q~(r)`: empty-car flow dispatched on a
/// trip priced at `r`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PhantomCurve {
    /// `K (max{0, 1 - r / r_max})^power`.
    Bump {
        #[serde(rename = "K")]
        k: f64,
        r_max: f64,
        #[serde(default = "default_power")]
        power: u32,
    },
    Zero,
}

fn default_power() -> u32 {
    4
}

impl PhantomCurve {
    pub fn bump(k: f64, r_max: f64, power: u32) -> Result<Self, EconomyError> {
        if !(k >= 0.0 && k.is_finite()) || !(r_max > 0.0 && r_max.is_finite()) || power == 0 {
            return Err(EconomyError::InvalidCurve(format!("bump K={k} r_max={r_max} power={power}")));
        }
        Ok(PhantomCurve::Bump { k, r_max, power })
    }

    pub fn value(&self, r: f64) -> f64 {
        match *self {
            PhantomCurve::Bump { k, r_max, power } => {
                let s = (1.0 - r / r_max).max(0.0);
                k * s.powi(power as i32)
            }
            PhantomCurve::Zero => 0.0,
        }
    }

    pub fn slope(&self, r: f64) -> f64 {
        match *self {
            PhantomCurve::Bump { k, r_max, power } => {
                let s = (1.0 - r / r_max).max(0.0);
                -k * power as f64 / r_max * s.powi(power as i32 - 1)
            }
            PhantomCurve::Zero => 0.0,
        }
    }

    /// `sup_{r >= 0} r q~(r)`, attained at `r = r_max / (power + 1)`.
    pub fn slack(&self) -> f64 {
        match *self {
            PhantomCurve::Bump { k, r_max, power } => {
                let p = power as f64;
                k * r_max * p.powf(p) / (p + 1.0).powf(p + 1.0)
            }
            PhantomCurve::Zero => 0.0,
        }
    }
}

/// Relocation curves for every OD pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PhantomDemand(pub Grid<PhantomCurve>);

impl PhantomDemand {
    pub fn uniform(n: usize, curve: PhantomCurve) -> Self {
        Self(Grid::filled(n, curve))
    }

    pub fn none(n: usize) -> Self {
        Self::uniform(n, PhantomCurve::Zero)
    }

    pub fn n(&self) -> usize {
        self.0.n()
    }

    pub fn curve(&self, i: usize, j: usize) -> &PhantomCurve {
        &self.0[(i, j)]
    }

    pub fn slack(&self) -> Grid<f64> {
        self.0.map(|_, _, c| c.slack())
    }

    pub fn total_slack(&self) -> f64 {
        self.0.as_slice().iter().map(PhantomCurve::slack).sum()
    }
}

/// An economy with its relocation curves, as stored in economy files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EconomyDocument {
    #[serde(flatten)]
    pub economy: Economy,
    pub phantom: PhantomDemand,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeUnit {
    Minutes,
    #[default]
    Hours,
}

#[derive(Deserialize)]
struct RawEconomy {
    n: usize,
    m: f64,
    #[serde(default)]
    time_unit: TimeUnit,
    d: Grid<f64>,
    c: Grid<f64>,
    demand: Grid<DemandCurve>,
}

impl TryFrom<RawEconomy> for Economy {
    type Error = EconomyError;

    fn try_from(raw: RawEconomy) -> Result<Self, Self::Error> {
        if raw.d.n() != raw.n {
            return Err(EconomyError::Shape(format!("d has side {} but n = {}", raw.d.n(), raw.n)));
        }
        Economy::new(raw.m, raw.d, raw.c, raw.demand, raw.time_unit)
    }
}

/// The tuple `(m, d, c, q)` describing one focal time window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawEconomy")]
pub struct Economy {
    n: usize,
    m: f64,
    time_unit: TimeUnit,
    d: Grid<f64>,
    c: Grid<f64>,
    demand: Grid<DemandCurve>,
}

impl Economy {
    /// Checks shapes only; see [`validate_economy`] for the value invariants.
    pub fn new(
        m: f64,
        d: Grid<f64>,
        c: Grid<f64>,
        demand: Grid<DemandCurve>,
        time_unit: TimeUnit,
    ) -> Result<Self, EconomyError> {
        let n = d.n();
        if n < 2 {
            return Err(EconomyError::Shape(format!("need at least two locations, got {n}")));
        }
        if c.n() != n || demand.n() != n {
            return Err(EconomyError::Shape(format!(
                "d is {n}x{n}, c is {0}x{0}, demand is {1}x{1}",
                c.n(),
                demand.n()
            )));
        }
        Ok(Self { n, m, time_unit, d, c, demand })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> f64 {
        self.m
    }

    pub fn time_unit(&self) -> TimeUnit {
        self.time_unit
    }

    pub fn d(&self) -> &Grid<f64> {
        &self.d
    }

    pub fn c(&self) -> &Grid<f64> {
        &self.c
    }

    pub fn demand(&self) -> &Grid<DemandCurve> {
        &self.demand
    }

    pub fn with_supply(&self, m: f64) -> Self {
        Self { m, ..self.clone() }
    }

    /// Trip prices `c_ij + d_ij pi_i + phi_i - phi_j`.
    pub fn prices(&self, pi: &[f64], phi: &[f64]) -> Grid<f64> {
        Grid::from_fn(self.n, |i, j| self.price(i, j, pi[i], phi))
    }

    pub(crate) fn price(&self, i: usize, j: usize, pi_i: f64, phi: &[f64]) -> f64 {
        self.c[(i, j)] + self.d[(i, j)] * pi_i + phi[i] - phi[j]
    }
}

/// `q^(r) = q(r) + q~(r)`: drivers needed on a trip for riders plus relocation.
#[derive(Clone, Copy, Debug)]
pub struct AugmentedDemand<'a> {
    demand: &'a Grid<DemandCurve>,
    phantom: &'a PhantomDemand,
}

impl<'a> AugmentedDemand<'a> {
    pub fn new(economy: &'a Economy, phantom: &'a PhantomDemand) -> Self {
        Self { demand: economy.demand(), phantom }
    }

    pub fn value(&self, i: usize, j: usize, r: f64) -> f64 {
        self.demand[(i, j)].value(r) + self.phantom.curve(i, j).value(r)
    }

    pub fn slope(&self, i: usize, j: usize, r: f64) -> f64 {
        self.demand[(i, j)].slope(r) + self.phantom.curve(i, j).slope(r)
    }
}

/// Rider flow, driver flow and trip prices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub x: Grid<f64>,
    pub y: Grid<f64>,
    pub p: Grid<f64>,
}

impl Outcome {
    pub fn zero(n: usize) -> Self {
        Self { x: Grid::zeros(n), y: Grid::zeros(n), p: Grid::zeros(n) }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<String>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Reports breaches of the economy invariants and, when a relocation curve
/// set is supplied, OD pairs whose zero-price relocation capacity
/// `d_ij q~_ij(0)` does not exceed the supply `m`.
pub fn validate_economy(economy: &Economy, phantom: Option<&PhantomDemand>) -> ValidationReport {
    let mut report = ValidationReport::default();
    let n = economy.n();
    if !(economy.m() > 0.0 && economy.m().is_finite()) {
        report.violations.push(format!("nonpositive driver supply m = {}", economy.m()));
    }
    for (i, j, &d) in economy.d().iter_indexed() {
        if !(d > 0.0 && d.is_finite()) {
            report.violations.push(format!("nonpositive duration d[{i},{j}] = {d}"));
        }
    }
    for (i, j, &c) in economy.c().iter_indexed() {
        if !(c >= 0.0 && c.is_finite()) {
            report.violations.push(format!("negative cost c[{i},{j}] = {c}"));
        }
    }
    for (i, j, curve) in economy.demand().iter_indexed() {
        if let DemandCurve::Exponential { q0, theta } = *curve {
            if !(q0 >= 0.0 && q0.is_finite() && theta > 0.0 && theta.is_finite()) {
                report.violations.push(format!("bad demand curve at [{i},{j}]: Q={q0} theta={theta}"));
            }
        }
    }
    if economy.demand().as_slice().iter().all(DemandCurve::is_zero) {
        report.violations.push("no OD pair has positive demand".to_string());
    }
    if let Some(phantom) = phantom {
        if phantom.n() != n {
            report.violations.push(format!("phantom demand is {0}x{0}, economy has n = {n}", phantom.n()));
        } else {
            let short = economy
                .d()
                .iter_indexed()
                .filter(|&(i, j, &d)| d * phantom.curve(i, j).value(0.0) <= economy.m())
                .count();
            if short > 0 {
                report.warnings.push(format!(
                    "zero-price relocation capacity d*q~(0) does not exceed m on {short} OD pairs; \
                     clearing existence is not guaranteed"
                ));
            }
        }
    }
    report
}
