//! Week-over-week pricing mechanisms that update the OD adjustments `phi`
//! from observed clearing outcomes: iterative network pricing (damped Newton
//! on the multiplier gap with Armijo backtracking) and comparison variants.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clearing::{clear_market, Adjustments, ClearingError, MarketOutcome};
use crate::economy::{Economy, PhantomDemand};
use crate::linalg;
use crate::sensitivity::{assemble_jacobians, jacobian_pi, SensitivityError};
use crate::welfare::{self, WelfareError};

/// Directions below this max-norm count as a fixed point.
const NULL_DIRECTION: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MechanismError {
    #[error("clearing failed at step {t}: {source}")]
    Clearing { t: usize, source: ClearingError },
    #[error("sensitivity failed at step {t}: {source}")]
    Sensitivity { t: usize, source: SensitivityError },
    #[error(transparent)]
    Welfare(#[from] WelfareError),
    #[error("direction system is singular")]
    SingularSystem,
    #[error("invalid parameters: {0}")]
    Params(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Variant {
    Inp,
    /// Full Newton steps, `alpha = 1` before backtracking.
    PureNewton,
    /// `-grad f` with the same step cap and Armijo rule.
    GradientDescent,
    /// `phi += gamma (pi_i - pi_n)`, no line search.
    Simple { gamma: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InpParams {
    pub tau: f64,
    pub beta: f64,
    pub sigma: f64,
    pub max_steps: usize,
    /// Stop once `f` falls to this level; `None` means `1e-10 m^2`.
    pub f_tol: Option<f64>,
    pub backtracking: bool,
}

impl Default for InpParams {
    fn default() -> Self {
        Self { tau: 10.0, beta: 0.5, sigma: 1e-3, max_steps: 500, f_tol: None, backtracking: true }
    }
}

impl InpParams {
    pub fn validate(&self) -> Result<(), MechanismError> {
        let ok = self.tau > 0.0 && self.beta > 0.0 && self.beta < 1.0 && self.sigma > 0.0 && self.sigma < 1.0;
        if ok {
            Ok(())
        } else {
            Err(MechanismError::Params(format!("tau={} beta={} sigma={}", self.tau, self.beta, self.sigma)))
        }
    }
}

/// What the platform observes after one clearing, plus the derived `f` data.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub phi: Adjustments,
    pub pi: Vec<f64>,
    pub f: f64,
    pub d_pi: DMatrix<f64>,
    pub grad_f: Vec<f64>,
}

impl Observation {
    pub fn from_outcome(
        economy: &Economy,
        phantom: &PhantomDemand,
        outcome: &MarketOutcome,
    ) -> Result<Self, SensitivityError> {
        let sens = jacobian_pi(&assemble_jacobians(economy, phantom, outcome)?)?;
        let grad_f = welfare::grad_f(&outcome.pi, &sens.d_pi);
        Ok(Self {
            phi: outcome.phi.clone(),
            pi: outcome.pi.clone(),
            f: welfare::lyapunov_f(&outcome.pi),
            d_pi: sens.d_pi,
            grad_f,
        })
    }
}

/// Solves `[-D_Pi | 1] [delta; xi] = pi`, returning `(delta, xi)`.
pub fn newton_direction(pi: &[f64], d_pi: &DMatrix<f64>) -> Result<(Vec<f64>, f64), MechanismError> {
    let n = pi.len();
    let mut lhs = DMatrix::from_element(n, n, 1.0);
    lhs.view_mut((0, 0), (n, n - 1)).copy_from(&(-d_pi));
    let rhs = DMatrix::from_column_slice(n, 1, pi);
    let sol = linalg::solve(&lhs, &rhs).ok_or(MechanismError::SingularSystem)?;
    Ok((sol.as_slice()[..n - 1].to_vec(), sol[n - 1]))
}

/// `min{1, tau / ||D_Pi delta||_inf}`; 1 for a null direction.
pub fn stepsize(delta: &[f64], d_pi: &DMatrix<f64>, tau: f64) -> f64 {
    let predicted = d_pi * DVector::from_column_slice(delta);
    let change = predicted.amax();
    if change == 0.0 {
        1.0
    } else {
        (tau / change).min(1.0)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MechanismState {
    /// Timestep whose adjustments `phi` are priced next.
    pub t: usize,
    pub phi: Adjustments,
    pub delta: Vec<f64>,
    pub alpha: f64,
    pub t_prime: usize,
    /// Observation at `t_prime`.
    pub anchor: Option<Observation>,
    /// `grad f(phi^(t'))^T alpha delta`.
    pub grad_dot_step: f64,
    pub backtrack_count: usize,
    /// Whether the step producing `phi` was a backtrack.
    pub backtracked: bool,
}

impl MechanismState {
    pub fn initial(n: usize) -> Self {
        Self {
            t: 0,
            phi: Adjustments::zero(n),
            delta: vec![0.0; n - 1],
            alpha: 1.0,
            t_prime: 0,
            anchor: None,
            grad_dot_step: 0.0,
            backtrack_count: 0,
            backtracked: false,
        }
    }

    /// Armijo test of a new observation against the current anchor.
    pub fn sufficient_progress(&self, latest: &Observation, sigma: f64) -> bool {
        match &self.anchor {
            Some(a) => latest.f < a.f + sigma * self.grad_dot_step,
            None => true,
        }
    }
}

/// Fresh direction and stepsize for a variant at an observation.
fn fresh_direction(obs: &Observation, variant: Variant, tau: f64) -> Result<(Vec<f64>, f64), MechanismError> {
    let n = obs.pi.len();
    Ok(match variant {
        Variant::Inp => {
            let (delta, _) = newton_direction(&obs.pi, &obs.d_pi)?;
            let alpha = stepsize(&delta, &obs.d_pi, tau);
            (delta, alpha)
        }
        Variant::PureNewton => (newton_direction(&obs.pi, &obs.d_pi)?.0, 1.0),
        Variant::GradientDescent => {
            let delta: Vec<f64> = obs.grad_f.iter().map(|g| -g).collect();
            let alpha = stepsize(&delta, &obs.d_pi, tau);
            (delta, alpha)
        }
        Variant::Simple { gamma } => {
            let delta = (0..n - 1).map(|i| obs.pi[i] - obs.pi[n - 1]).collect();
            (delta, gamma)
        }
    })
}

/// One update of the adjustments. `latest` is the observation at `state.t`,
/// or `None` if that clearing failed, which is handled like a failed Armijo test.
pub fn inp_step(
    state: &MechanismState,
    latest: Option<&Observation>,
    params: &InpParams,
    variant: Variant,
) -> Result<MechanismState, MechanismError> {
    let t = state.t + 1;
    let line_search = params.backtracking && !matches!(variant, Variant::Simple { .. });
    let fresh = match latest {
        Some(obs) => t == 1 || !line_search || state.sufficient_progress(obs, params.sigma),
        None => false,
    };
    let mut next = state.clone();
    next.t = t;
    if fresh {
        let obs = latest.expect("fresh branch requires an observation");
        let (delta, alpha) = fresh_direction(obs, variant, params.tau)?;
        next.grad_dot_step = alpha * dot(&obs.grad_f, &delta);
        next.delta = delta;
        next.alpha = alpha;
        next.t_prime = state.t;
        next.anchor = Some(obs.clone());
        next.backtracked = false;
    } else {
        next.alpha = state.alpha * params.beta;
        next.grad_dot_step = state.grad_dot_step * params.beta;
        next.backtrack_count += 1;
        next.backtracked = true;
    }
    let base = next.anchor.as_ref().map(|a| a.phi.clone()).unwrap_or_else(|| state.phi.clone());
    next.phi = base.stepped(next.alpha, &next.delta);
    Ok(next)
}

/// Economies faced over time.
#[derive(Clone, Copy, Debug)]
pub enum EconomyStream<'a> {
    Stationary(&'a Economy),
    Sequence(&'a [Economy]),
}

impl<'a> EconomyStream<'a> {
    pub fn at(&self, t: usize) -> &'a Economy {
        match self {
            EconomyStream::Stationary(e) => e,
            EconomyStream::Sequence(s) => &s[t.min(s.len() - 1)],
        }
    }

    pub fn horizon(&self) -> Option<usize> {
        match self {
            EconomyStream::Stationary(_) => None,
            EconomyStream::Sequence(s) => Some(s.len()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrajectoryEntry {
    pub t: usize,
    pub phi: Vec<f64>,
    pub pi: Vec<f64>,
    pub f: f64,
    pub primal: f64,
    pub dual: f64,
    pub bound_detailed: f64,
    pub backtracked: bool,
    pub alpha: f64,
    /// Served as the anchor `phi^(t')` of a fresh direction, or is the
    /// accepted final point.
    pub anchor: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepFailure {
    pub t: usize,
    pub phi: Vec<f64>,
    pub error: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    FTol,
    NullDirection,
    MaxSteps,
    Horizon,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Trajectory {
    pub entries: Vec<TrajectoryEntry>,
    #[serde(skip)]
    pub outcomes: Vec<MarketOutcome>,
    pub failures: Vec<StepFailure>,
    pub backtracks: usize,
    pub stop: StopReason,
}

impl Trajectory {
    pub fn last(&self) -> &TrajectoryEntry {
        self.entries.last().expect("trajectory has the initial entry")
    }

    /// `f` at the anchored iterates, in order.
    pub fn anchored_f(&self) -> Vec<f64> {
        self.entries.iter().filter(|e| e.anchor).map(|e| e.f).collect()
    }

    /// Largest single-step change of any multiplier.
    pub fn max_pi_change(&self) -> f64 {
        self.entries
            .windows(2)
            .flat_map(|w| w[0].pi.iter().zip(&w[1].pi).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max)
    }

    /// Writes `t, phi_1.., pi_1.., f, primal, dual, bound_detailed, backtracked`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let n = self.entries.first().map_or(0, |e| e.pi.len());
        let mut header = vec!["t".to_string()];
        header.extend((1..n).map(|i| format!("phi_{i}")));
        header.extend((1..=n).map(|i| format!("pi_{i}")));
        header.extend(["f", "primal", "dual", "bound_detailed", "backtracked"].map(String::from));
        w.write_record(&header)?;
        for e in &self.entries {
            let mut row = vec![e.t.to_string()];
            row.extend(e.phi.iter().map(|v| v.to_string()));
            row.extend(e.pi.iter().map(|v| v.to_string()));
            row.extend([e.f, e.primal, e.dual, e.bound_detailed].map(|v| v.to_string()));
            row.push(e.backtracked.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs clear, observe, update until `f <= f_tol`, a null direction, the
/// step limit or the end of the stream.
pub fn run_mechanism(
    stream: EconomyStream<'_>,
    phantom: &PhantomDemand,
    variant: Variant,
    params: &InpParams,
    fail_fast: bool,
) -> Result<Trajectory, MechanismError> {
    run_mechanism_from(stream, phantom, variant, params, fail_fast, None)
}

pub fn run_mechanism_from(
    stream: EconomyStream<'_>,
    phantom: &PhantomDemand,
    variant: Variant,
    params: &InpParams,
    fail_fast: bool,
    start: Option<&Adjustments>,
) -> Result<Trajectory, MechanismError> {
    params.validate()?;
    let first = stream.at(0);
    let n = first.n();
    let f_tol = params.f_tol.unwrap_or(1e-10 * first.m() * first.m());
    let last_t = match stream.horizon() {
        Some(h) => params.max_steps.min(h.saturating_sub(1)),
        None => params.max_steps,
    };

    let mut state = MechanismState::initial(n);
    if let Some(phi) = start {
        state.phi = phi.clone();
    }
    let mut entries: Vec<TrajectoryEntry> = Vec::new();
    let mut outcomes: Vec<MarketOutcome> = Vec::new();
    let mut failures = Vec::new();
    let mut warm: Option<Vec<f64>> = None;

    let stop = loop {
        let t = state.t;
        let economy = stream.at(t);
        let observed = clear_market(economy, phantom, &state.phi, warm.as_deref())
            .map_err(|source| MechanismError::Clearing { t, source })
            .and_then(|out| {
                let obs = Observation::from_outcome(economy, phantom, &out)
                    .map_err(|source| MechanismError::Sensitivity { t, source })?;
                Ok((out, obs))
            });
        let latest = match observed {
            Ok((out, obs)) => {
                let report = welfare::welfare_report(&out, economy, phantom)?;
                entries.push(TrajectoryEntry {
                    t,
                    phi: out.phi.free().to_vec(),
                    pi: out.pi.clone(),
                    f: obs.f,
                    primal: report.primal,
                    dual: report.dual,
                    bound_detailed: report.bound_detailed,
                    backtracked: state.backtracked,
                    alpha: state.alpha,
                    anchor: false,
                });
                warm = Some(out.pi.clone());
                outcomes.push(out);
                Some(obs)
            }
            Err(err) => {
                if fail_fast || t == 0 {
                    return Err(err);
                }
                log::warn!("step {t}: {err}; keeping the anchored adjustments");
                failures.push(StepFailure { t, phi: state.phi.free().to_vec(), error: err.to_string() });
                None
            }
        };

        if let Some(obs) = &latest {
            if obs.f <= f_tol {
                mark_final(&mut entries, &state, obs, params);
                break StopReason::FTol;
            }
        }
        if t >= last_t {
            if let Some(obs) = &latest {
                mark_final(&mut entries, &state, obs, params);
            }
            break if stream.horizon().is_some_and(|h| t + 1 >= h) { StopReason::Horizon } else { StopReason::MaxSteps };
        }
        let next = inp_step(&state, latest.as_ref(), params, variant)?;
        if !next.backtracked && latest.is_some() {
            if let Some(e) = entries.last_mut() {
                e.anchor = true;
            }
        }
        if !next.backtracked && next.delta.iter().all(|d| d.abs() <= NULL_DIRECTION) {
            break StopReason::NullDirection;
        }
        state = next;
    };

    let backtracks = entries.iter().filter(|e| e.backtracked).count();
    Ok(Trajectory { entries, outcomes, failures, backtracks, stop })
}

/// The final iterate counts as anchored when it passes the Armijo test.
fn mark_final(entries: &mut [TrajectoryEntry], state: &MechanismState, obs: &Observation, params: &InpParams) {
    if state.t == 0 || state.sufficient_progress(obs, params.sigma) {
        if let Some(e) = entries.last_mut() {
            e.anchor = true;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stepsize_examples() {
        let d_pi = DMatrix::from_row_slice(2, 1, &[1.0, -0.5]);
        assert_eq!(stepsize(&[5.0], &d_pi, 10.0), 1.0);
        assert_eq!(stepsize(&[20.0], &d_pi, 10.0), 0.5);
        assert_eq!(stepsize(&[0.0], &d_pi, 10.0), 1.0);
    }

    #[test]
    fn uniform_pi_gives_null_direction() {
        let d_pi = DMatrix::from_row_slice(3, 2, &[-1.0, 0.2, 0.5, -0.8, 0.3, 0.4]);
        let (delta, xi) = newton_direction(&[2.0, 2.0, 2.0], &d_pi).unwrap();
        assert!(delta.iter().all(|d| d.abs() < 1e-14));
        assert!((xi - 2.0).abs() < 1e-14);
    }

    fn obs(phi: &[f64], f: f64, grad: &[f64]) -> Observation {
        Observation {
            phi: Adjustments::from_free(phi),
            pi: vec![1.0, 0.0],
            f,
            d_pi: DMatrix::from_row_slice(2, 1, &[-0.1, 0.1]),
            grad_f: grad.to_vec(),
        }
    }

    #[test]
    fn failed_armijo_backtracks_from_anchor() {
        let params = InpParams { tau: 1.0, ..InpParams::default() };
        let s0 = MechanismState::initial(2);
        let o0 = obs(&[0.0], 0.5, &[-0.2]);
        let s1 = inp_step(&s0, Some(&o0), &params, Variant::Inp).unwrap();
        assert!(!s1.backtracked);
        assert_eq!(s1.t_prime, 0);
        // f went up: must backtrack
        let o1 = obs(s1.phi.free(), 0.9, &[0.3]);
        let s2 = inp_step(&s1, Some(&o1), &params, Variant::Inp).unwrap();
        assert!(s2.backtracked);
        assert_eq!(s2.delta, s1.delta);
        assert_eq!(s2.alpha, s1.alpha * 0.5);
        assert_eq!(s2.phi.free()[0], 0.0 + s2.alpha * s1.delta[0]);
        assert_eq!(s2.t_prime, 0);
    }
}
