//! Origin-destination iterative pricing for spatial ridesharing markets.

pub mod benchmark;
pub mod clearing;
pub mod data;
pub mod economy;
pub mod grid;
pub mod mechanism;
mod linalg;
pub mod network;
pub mod sensitivity;
pub mod synthetic;
pub mod welfare;

pub use clearing::{clear_market, Adjustments, MarketOutcome};
pub use economy::{DemandCurve, Economy, EconomyDocument, Outcome, PhantomCurve, PhantomDemand, TimeUnit};
pub use grid::Grid;
