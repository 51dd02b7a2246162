mod common;

use netprice::mechanism::{
    newton_direction, run_mechanism, EconomyStream, InpParams, Observation, StopReason, Variant,
};
use netprice::synthetic::{example1, example1_phantom, example2, example2_phantom};
use netprice::welfare::lyapunov_f;
use netprice::{clear_market, Adjustments};

#[test]
fn newton_direction_descends_at_rate_two_f() {
    for seed in 0..20u64 {
        let n = 2 + (seed % 5) as usize;
        let (e, ph) = common::random_economy(n, 1100 + seed);
        let mut rng = common::rng(seed);
        let phi = common::random_phi(n, &mut rng, 4.0);
        let out = clear_market(&e, &ph, &phi, None).unwrap();
        let obs = Observation::from_outcome(&e, &ph, &out).unwrap();
        let (delta, _) = newton_direction(&obs.pi, &obs.d_pi).unwrap();
        let slope: f64 = obs.grad_f.iter().zip(&delta).map(|(g, d)| g * d).sum();
        assert!(slope <= 0.0, "seed {seed}: {slope}");
        assert!((slope + 2.0 * obs.f).abs() <= 1e-8 * (1.0 + obs.f), "seed {seed}: {slope} vs {}", -2.0 * obs.f);
    }
}

#[test]
fn anchored_f_never_increases() {
    let params = InpParams { tau: 1.0, f_tol: Some(1e-20), max_steps: 60, ..InpParams::default() };
    let e = example1();
    let tr = run_mechanism(EconomyStream::Stationary(&e), &example1_phantom(), Variant::Inp, &params, true).unwrap();
    let f = tr.anchored_f();
    assert!(f.len() >= 4);
    assert!(f.windows(2).all(|w| w[1] <= w[0]), "{f:?}");

    for seed in 0..6u64 {
        let (e, ph) = common::random_economy(4, 1200 + seed);
        let params = InpParams { tau: 2.0, max_steps: 40, ..InpParams::default() };
        for variant in [Variant::Inp, Variant::PureNewton, Variant::GradientDescent] {
            let tr = run_mechanism(EconomyStream::Stationary(&e), &ph, variant, &params, true).unwrap();
            let f = tr.anchored_f();
            assert!(f.windows(2).all(|w| w[1] <= w[0]), "seed {seed} {variant:?}: {f:?}");
        }
    }
}

#[test]
fn inp_limit_respects_the_slack_bound() {
    let e = example1();
    let ph = example1_phantom();
    let params = InpParams { tau: 1.0, f_tol: Some(1e-20), max_steps: 60, ..InpParams::default() };
    let tr = run_mechanism(EconomyStream::Stationary(&e), &ph, Variant::Inp, &params, true).unwrap();
    let last = tr.last();
    assert!(last.f <= 1e-8 * last.pi.iter().map(|p| p * p).sum::<f64>().max(1.0));
    assert!(last.bound_detailed <= e.m() * 1e-6 + ph.total_slack(), "{}", last.bound_detailed);
}

#[test]
fn simple_variant_never_backtracks() {
    let (e, ph) = common::random_economy(4, 1300);
    let params = InpParams { max_steps: 30, ..InpParams::default() };
    let tr = run_mechanism(EconomyStream::Stationary(&e), &ph, Variant::Simple { gamma: 0.05 }, &params, true).unwrap();
    assert_eq!(tr.backtracks, 0);
    assert!(tr.entries.iter().all(|en| !en.backtracked));
}

#[test]
fn uniform_multipliers_stop_immediately() {
    // symmetric two-location economy: phi = 0 already equalizes the multipliers
    let (e, ph) = {
        use netprice::grid::Grid;
        use netprice::{DemandCurve, Economy, PhantomCurve, PhantomDemand, TimeUnit};
        let curve = DemandCurve::exponential(5.0, 10.0).unwrap();
        let e = Economy::new(2.0, Grid::filled(2, 0.5), Grid::filled(2, 10.0), Grid::filled(2, curve), TimeUnit::Hours).unwrap();
        (e, PhantomDemand::uniform(2, PhantomCurve::bump(10.0, 2.0, 4).unwrap()))
    };
    let params = InpParams { f_tol: Some(0.0), ..InpParams::default() };
    let tr = run_mechanism(EconomyStream::Stationary(&e), &ph, Variant::Inp, &params, true).unwrap();
    assert!(matches!(tr.stop, StopReason::NullDirection | StopReason::FTol), "{:?}", tr.stop);
    assert_eq!(tr.entries.len(), 1);
}

#[test]
fn nonstationary_stream_ends_at_horizon() {
    let base = example2();
    let weeks: Vec<_> = (0..6).map(|k| base.with_supply(8.6 * (1.0 + 0.02 * k as f64))).collect();
    let params = InpParams { tau: 1.0, f_tol: Some(0.0), ..InpParams::default() };
    let tr = run_mechanism(EconomyStream::Sequence(&weeks), &example2_phantom(), Variant::Inp, &params, false).unwrap();
    assert_eq!(tr.stop, StopReason::Horizon);
    assert_eq!(tr.entries.len() + tr.failures.len(), 6);
    assert_eq!(tr.entries.last().unwrap().t, 5);
}

#[test]
fn trajectory_csv_has_fixed_columns() {
    let e = example1();
    let params = InpParams { tau: 1.0, max_steps: 3, ..InpParams::default() };
    let tr = run_mechanism(EconomyStream::Stationary(&e), &example1_phantom(), Variant::Inp, &params, true).unwrap();
    let mut buf = Vec::new();
    tr.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "t,phi_1,pi_1,pi_2,f,primal,dual,bound_detailed,backtracked");
    assert_eq!(lines.count(), tr.entries.len());
    for en in &tr.entries {
        assert_eq!(en.f, lyapunov_f(&en.pi));
    }
}

#[test]
fn bad_parameters_are_rejected() {
    let e = example1();
    for params in [
        InpParams { beta: 1.0, ..InpParams::default() },
        InpParams { sigma: 0.0, ..InpParams::default() },
        InpParams { tau: -1.0, ..InpParams::default() },
    ] {
        assert!(run_mechanism(EconomyStream::Stationary(&e), &example1_phantom(), Variant::Inp, &params, true).is_err());
    }
}

#[test]
fn example2_lyapunov_is_not_quasi_convex() {
    let e = example2();
    let ph = example2_phantom();
    let f = |b: f64| lyapunov_f(&clear_market(&e, &ph, &Adjustments::from_free(&[4.0, b]), None).unwrap().pi);
    let (f0, f1) = (f(4.0), f(6.0));
    let interior = (1..20).map(|k| f(4.0 + 0.1 * k as f64)).fold(f64::NEG_INFINITY, f64::max);
    assert!(interior > f0.max(f1) + 1.0, "{f0} {interior} {f1}");
}
