#![allow(dead_code)]

use netprice::grid::Grid;
use netprice::{Adjustments, DemandCurve, Economy, PhantomCurve, PhantomDemand, TimeUnit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Small random economy in hours with `c = 20 d`, a few zero-demand pairs
/// and relocation capacity `d K > m` on every pair.
pub fn random_economy(n: usize, seed: u64) -> (Economy, PhantomDemand) {
    random_economy_with(n, seed, 0.1)
}

pub fn random_economy_with(n: usize, seed: u64, zero_prob: f64) -> (Economy, PhantomDemand) {
    let mut rng = rng(seed);
    let d = Grid::from_fn(n, |_, _| rng.random_range(0.1..0.6));
    let c = d.map(|_, _, &v| 20.0 * v);
    let demand = Grid::from_fn(n, |i, j| {
        if i != j && rng.random_bool(zero_prob) {
            DemandCurve::Zero
        } else {
            let q0 = rng.random_range(1.0..15.0);
            let theta = 60.0 * d[(i, j)] * rng.random_range(0.5..1.5);
            DemandCurve::exponential(q0, theta).unwrap()
        }
    });
    let capacity: f64 = d.iter_indexed().map(|(i, j, &dij)| dij * demand[(i, j)].at_zero()).sum();
    let m = capacity * rng.random_range(0.3..0.8);
    let d_min = d.as_slice().iter().cloned().fold(f64::INFINITY, f64::min);
    let k = 1.2 * m / d_min;
    let r_max = rng.random_range(2.0..5.0);
    let economy = Economy::new(m, d, c, demand, TimeUnit::Hours).unwrap();
    (economy, PhantomDemand::uniform(n, PhantomCurve::bump(k, r_max, 4).unwrap()))
}

pub fn random_phi(n: usize, rng: &mut ChaCha8Rng, scale: f64) -> Adjustments {
    let free: Vec<f64> = (0..n - 1).map(|_| rng.random_range(-scale..scale)).collect();
    Adjustments::from_free(&free)
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Simpson's rule on `[a, b]` with `k` (even) panels.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, k: usize) -> f64 {
    let h = (b - a) / k as f64;
    let mut s = f(a) + f(b);
    for i in 1..k {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}
