mod common;

use nalgebra::DMatrix;
use netprice::clearing::{clear_market_with, residual_g, ClearingOptions};
use netprice::mechanism::newton_direction;
use netprice::sensitivity::{assemble_jacobians, jacobian_pi};
use netprice::{clear_market, Adjustments, Economy, MarketOutcome, PhantomDemand};

fn rel_err(approx: &DMatrix<f64>, exact: &DMatrix<f64>) -> f64 {
    (approx - exact).norm() / exact.norm().max(1e-300)
}

/// Random cleared instances whose prices stay clear of the zero kink.
fn instances(count: usize, seed0: u64, zero_prob: f64) -> Vec<(Economy, PhantomDemand, MarketOutcome)> {
    let mut found = Vec::new();
    let mut seed = seed0;
    while found.len() < count {
        seed += 1;
        let n = 3 + (seed % 4) as usize;
        let (e, ph) = common::random_economy_with(n, seed, zero_prob);
        let mut rng = common::rng(seed);
        let phi = common::random_phi(n, &mut rng, 3.0);
        let out = clear_market(&e, &ph, &phi, None).unwrap();
        if out.outcome.p.as_slice().iter().all(|p| *p > 1e-3) {
            found.push((e, ph, out));
        }
    }
    found
}

#[test]
fn clearing_jacobians_match_finite_differences() {
    for (e, ph, out) in instances(20, 1000, 0.1) {
        let n = e.n();
        let jac = assemble_jacobians(&e, &ph, &out).unwrap();
        let mut fd_pi = DMatrix::zeros(n, n);
        for l in 0..n {
            let h = 1e-6 * (1.0 + out.pi[l].abs());
            let mut up = out.pi.clone();
            let mut dn = out.pi.clone();
            up[l] += h;
            dn[l] -= h;
            let gu = residual_g(&e, &ph, &up, &out.phi).unwrap();
            let gd = residual_g(&e, &ph, &dn, &out.phi).unwrap();
            for k in 0..n {
                fd_pi[(k, l)] = (gu[k] - gd[k]) / (2.0 * h);
            }
        }
        let mut fd_phi = DMatrix::zeros(n, n - 1);
        for l in 0..n - 1 {
            let h = 1e-6 * (1.0 + out.phi.as_slice()[l].abs());
            let mut step = vec![0.0; n - 1];
            step[l] = 1.0;
            let gu = residual_g(&e, &ph, &out.pi, &out.phi.stepped(h, &step)).unwrap();
            let gd = residual_g(&e, &ph, &out.pi, &out.phi.stepped(-h, &step)).unwrap();
            for k in 0..n {
                fd_phi[(k, l)] = (gu[k] - gd[k]) / (2.0 * h);
            }
        }
        assert!(rel_err(&fd_pi, &jac.d_pi_g) <= 1e-5, "D_pi g: {}", rel_err(&fd_pi, &jac.d_pi_g));
        assert!(rel_err(&fd_phi, &jac.d_phi_g) <= 1e-5, "D_phi g: {}", rel_err(&fd_phi, &jac.d_phi_g));
    }
}

#[test]
fn multiplier_jacobian_matches_reclearing() {
    let opts = ClearingOptions { tol_supply: 1e-13, ..ClearingOptions::default() };
    for (e, ph, out) in instances(20, 2000, 0.1) {
        let n = e.n();
        let sens = jacobian_pi(&assemble_jacobians(&e, &ph, &out).unwrap()).unwrap();
        let mut fd = DMatrix::zeros(n, n - 1);
        for l in 0..n - 1 {
            let h = 1e-4 * (1.0 + out.phi.as_slice()[l].abs());
            let mut step = vec![0.0; n - 1];
            step[l] = 1.0;
            let up = clear_market_with(&e, &ph, &out.phi.stepped(h, &step), Some(&out.pi), &opts).unwrap();
            let dn = clear_market_with(&e, &ph, &out.phi.stepped(-h, &step), Some(&out.pi), &opts).unwrap();
            for k in 0..n {
                fd[(k, l)] = (up.pi[k] - dn.pi[k]) / (2.0 * h);
            }
        }
        let err = rel_err(&fd, &sens.d_pi);
        assert!(err <= 1e-4, "D Pi relative error {err}");
    }
}

#[test]
fn block_identities_hold() {
    for (e, ph, out) in instances(20, 3000, 0.1) {
        let jac = assemble_jacobians(&e, &ph, &out).unwrap();
        let b = jac.b();
        assert_eq!(b, b.transpose(), "B must be symmetric bitwise");
        let k = e.n() - 1;
        let theta = jac.theta();
        for row in 0..k {
            let sum: f64 = jac.a().row(row).sum() + jac.beta()[row];
            assert!((sum - theta[row]).abs() <= 1e-12 * (1.0 + theta[row].abs()), "row {row}: {sum} vs {}", theta[row]);
        }
    }
}

#[test]
fn a_block_is_column_dominant_with_positive_inverse() {
    for (e, ph, out) in instances(20, 4000, 0.0) {
        let a = jac_a(&e, &ph, &out);
        let k = a.nrows();
        for col in 0..k {
            assert!(a[(col, col)] > 0.0);
            let off: f64 = (0..k).filter(|r| *r != col).map(|r| a[(r, col)]).inspect(|v| assert!(*v < 0.0)).map(f64::abs).sum();
            assert!(a[(col, col)] > off, "column {col}");
        }
        let inv = a.try_inverse().unwrap();
        assert!(inv.iter().all(|v| *v > 0.0));
    }
}

fn jac_a(e: &Economy, ph: &PhantomDemand, out: &MarketOutcome) -> DMatrix<f64> {
    assemble_jacobians(e, ph, out).unwrap().a()
}

#[test]
fn newton_system_has_full_rank() {
    for (e, ph, out) in instances(20, 5000, 0.1) {
        let n = e.n();
        let d_pi = jacobian_pi(&assemble_jacobians(&e, &ph, &out).unwrap()).unwrap().d_pi;
        let mut lhs = DMatrix::from_element(n, n, 1.0);
        lhs.view_mut((0, 0), (n, n - 1)).copy_from(&(-&d_pi));
        let sv = lhs.singular_values();
        assert!(sv.min() > 1e-10 * sv.max(), "{sv:?}");
    }
}

#[test]
fn uniform_multipliers_give_null_direction() {
    let (e, ph) = common::random_economy(4, 6001);
    let out = clear_market(&e, &ph, &Adjustments::zero(4), None).unwrap();
    let d_pi = jacobian_pi(&assemble_jacobians(&e, &ph, &out).unwrap()).unwrap().d_pi;
    let (delta, xi) = newton_direction(&[3.0; 4], &d_pi).unwrap();
    assert!(delta.iter().all(|d| d.abs() < 1e-12));
    assert!((xi - 3.0).abs() < 1e-12);
}
