//! Reference and seeded synthetic economies.

use crate::economy::{DemandCurve, Economy, Outcome, PhantomCurve, PhantomDemand, TimeUnit};
use crate::grid::Grid;

fn exp(q0: f64, theta: f64) -> DemandCurve {
    DemandCurve::Exponential { q0, theta }
}

/// Two locations (residential, downtown), durations in minutes, 240 drivers.
pub fn example1() -> Economy {
    let d = Grid::from_row_major(vec![10.0, 20.0, 20.0, 10.0]).unwrap();
    let mut demand = Grid::filled(2, DemandCurve::Zero);
    demand[(0, 1)] = exp(10.0, 40.0);
    demand[(1, 1)] = exp(20.0, 10.0);
    Economy::new(240.0, d, Grid::zeros(2), demand, TimeUnit::Minutes).unwrap()
}

pub fn example1_phantom() -> PhantomDemand {
    PhantomDemand::uniform(2, PhantomCurve::Bump { k: 24.0, r_max: 5.0, power: 4 })
}

/// Origin-surge outcome where each origin's price clears its own supply.
pub fn example1_naive_outcome() -> Outcome {
    Outcome {
        x: Grid::from_row_major(vec![0.0, 1.0, 0.0, 20.0]).unwrap(),
        y: Grid::from_row_major(vec![0.0, 1.0, 1.0, 20.0]).unwrap(),
        p: Grid::from_row_major(vec![46.05, 92.10, 0.0, 0.0]).unwrap(),
    }
}

/// Three locations with unit durations, zero costs and 8.6 drivers.
pub fn example2() -> Economy {
    let slow = exp(1.0, 30.0);
    let fast = exp(4.0, 1.0);
    let demand = Grid::from_row_major(vec![slow, slow, fast, fast, fast, slow, slow, slow, slow]).unwrap();
    Economy::new(8.6, Grid::filled(3, 1.0), Grid::zeros(3), demand, TimeUnit::Hours).unwrap()
}

/// Relocation curves for [`example2`]; `d K = 10 > m` on every pair.
pub fn example2_phantom() -> PhantomDemand {
    PhantomDemand::uniform(3, PhantomCurve::Bump { k: 10.0, r_max: 1.0, power: 4 })
}

/// A calibrated synthetic city and the observations it was fitted to.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCity {
    pub economy: Economy,
    pub phantom: PhantomDemand,
    pub x_obs: Grid<f64>,
    pub p_obs: Grid<Option<f64>>,
    /// Locations in the central cluster.
    pub downtown: Vec<usize>,
}

/// Morning-rush city on a 10 x 10 mile square: a central cluster that
/// attracts trips and residential areas that emit them. `imbalance` in
/// `[0, 1)` skews trip origins toward residential areas and destinations
/// toward the centre. Calibrated exactly like recorded trip data.
pub fn random_city(n: usize, seed: u64, imbalance: f64) -> SyntheticCity {
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, LogNormal, Poisson};

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n_down = (n / 10).max(1);
    let pts: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            if k < n_down {
                (5.0 + rng.random_range(-1.0..1.0), 5.0 + rng.random_range(-1.0..1.0))
            } else {
                (rng.random_range(0.0..10.0), rng.random_range(0.0..10.0))
            }
        })
        .collect();
    let miles = Grid::from_fn(n, |i, j| {
        let (dx, dy) = (pts[i].0 - pts[j].0, pts[i].1 - pts[j].1);
        1.3 * (dx * dx + dy * dy).sqrt() + 0.5
    });
    let d = miles.map(|_, _, &mi| (0.05 + mi / 15.0) * rng.random_range(0.95..1.05));

    let size = LogNormal::new(0.0, 0.5).unwrap();
    let base: Vec<f64> = (0..n).map(|k| size.sample(&mut rng) * if k < n_down { 3.0 } else { 1.0 }).collect();
    let side = |k: usize| if k < n_down { -1.0 } else { 1.0 };
    let origin: Vec<f64> = (0..n).map(|k| base[k] * (1.0 + imbalance * side(k))).collect();
    let dest: Vec<f64> = (0..n).map(|k| base[k] * (1.0 - imbalance * side(k))).collect();
    let raw = Grid::from_fn(n, |i, j| origin[i] * dest[j] * (-miles[(i, j)] / 4.0).exp());
    let scale = 150.0 * n as f64 / raw.sum();

    let mut x_obs = Grid::zeros(n);
    let mut p_obs = Grid::filled(n, None);
    for i in 0..n {
        for j in 0..n {
            let lambda = scale * raw[(i, j)];
            let count = Poisson::new(lambda).unwrap().sample(&mut rng);
            // unsampled pairs keep their expected rate so every curve is strictly decreasing
            x_obs[(i, j)] = if count > 0.0 { count } else { lambda };
            let surge = 1.0 + 0.6 * imbalance * (side(i) + 1.0) / 2.0;
            let fare = (2.5 + 1.2 * miles[(i, j)] + 0.3 * 60.0 * d[(i, j)]) * surge;
            p_obs[(i, j)] = Some(fare * rng.random_range(0.9..1.1));
        }
    }
    let (economy, _) = crate::data::calibrate_economy(&x_obs, &p_obs, &d, &crate::data::Calibration::default())
        .expect("synthetic durations are complete");
    let phantom = crate::data::relocation_phantom(n);
    SyntheticCity { economy, phantom, x_obs, p_obs, downtown: (0..n_down).collect() }
}

/// `weeks` seeded perturbations of `base`: every demand scale gets an
/// independent lognormal factor with log-sd `spread`, and supply moves with
/// the mean factor.
pub fn weekly_variation(base: &Economy, weeks: usize, seed: u64, spread: f64) -> Vec<Economy> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, LogNormal};

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let noise = LogNormal::new(0.0, spread.max(0.0)).unwrap();
    let n = base.n();
    (0..weeks)
        .map(|_| {
            let factors: Vec<f64> = (0..n * n).map(|_| noise.sample(&mut rng)).collect();
            let demand = base.demand().map(|i, j, curve| match *curve {
                DemandCurve::Exponential { q0, theta } => exp(q0 * factors[i * n + j], theta),
                DemandCurve::Zero => DemandCurve::Zero,
            });
            let mean = factors.iter().sum::<f64>() / factors.len() as f64;
            Economy::new(base.m() * mean, base.d().clone(), base.c().clone(), demand, base.time_unit())
                .expect("shapes are unchanged")
        })
        .collect()
}
