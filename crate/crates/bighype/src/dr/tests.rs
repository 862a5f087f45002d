use super::*;
use crate::equilibrium::GameContext;
use crate::model::sample_leader_point;
use crate::polyproj::Projector;
use crate::sensitivity::{
    aggregative_blocks, aggregative_sensitivity_step, ppg_jacobian_blocks, sensitivity_step,
    SensitivityState,
};
use approx::assert_relative_eq;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn desk_instance_validates_with_positive_mu() {
    let cfg = DRConfig::desk(2);
    let spec = build(&cfg).unwrap();
    let report = spec.validate().unwrap();
    assert!(report.mu > 0.0);
    assert!(report.moduli_from_hint);
    assert!(report.aggregative);
    assert!(!report.pg_affine, "price-anticipating costs depend on x");
    assert_eq!(report.m, 2 * cfg.lambda + cfg.n);
    assert_eq!(report.n, cfg.n * 4 * cfg.lambda);
}

#[test]
fn single_building_capacity_reduces_to_grid() {
    let mut cfg = DRConfig::desk(3);
    cfg.n = 1;
    let spec = build(&cfg).unwrap();
    let layout = DrLayout { n: 1, lambda: cfg.lambda };
    // With theta_1 = 1 the capacity rows read p_tau <= g_tau.
    let mut x = default_leader_point(&cfg, &layout);
    x[layout.theta(0)] = 1.0;
    let (bb, _) = spec.followers[0].poly.rhs(&x);
    let grid = cfg.grid();
    for tau in 0..cfg.lambda {
        // Row order within a period: p >= 0 first, then the capacity row.
        let cap_row = 8 * tau + 1;
        assert_relative_eq!(bb[cap_row], grid[tau], epsilon = 1e-12);
    }
}

#[test]
fn builder_rejects_infeasible_demand() {
    let mut cfg = DRConfig::desk(4);
    // Demand that exceeds any capacity share.
    cfg.demand = Some(vec![vec![10.0; cfg.lambda]; cfg.n]);
    match build(&cfg) {
        Err(crate::error::Error::ConfigInvalid(msg)) => {
            assert!(msg.contains("infeasible"), "message: {msg}")
        }
        other => panic!("expected ConfigInvalid, got {other:?}"),
    }
}

#[test]
fn config_field_errors_are_specific() {
    let mut cfg = DRConfig::desk(1);
    cfg.c1_min = 0.0;
    match build(&cfg) {
        Err(crate::error::Error::ConfigInvalid(msg)) => assert!(msg.contains("c1")),
        other => panic!("{other:?}"),
    }
    let mut cfg2 = DRConfig::desk(1);
    cfg2.battery.soc0 = 5.0;
    match build(&cfg2) {
        Err(crate::error::Error::ConfigInvalid(msg)) => assert!(msg.contains("soc0")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn demand_generation_reproducible_and_bounded() {
    let cfg = DRConfig::desk(11);
    let a = generate_demand(&cfg);
    let b = generate_demand(&cfg);
    assert_eq!(a, b, "profiles must be config-reproducible");
    let grid = cfg.grid();
    for row in &a {
        for (tau, d) in row.iter().enumerate() {
            assert!(*d >= 0.0 && *d <= 0.45 * grid[tau] / cfg.n as f64 + 1e-12);
        }
    }
}

#[test]
fn revenue_identity_against_scalar_evaluation() {
    let cfg = DRConfig::desk(5);
    let spec = build(&cfg).unwrap();
    let layout = DrLayout { n: cfg.n, lambda: cfg.lambda };
    let dims = spec.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let x = sample_leader_point(&spec.leader_set, &mut rng, 1.0);
        let y = DVector::from_fn(dims.n, |_, _| rng.gen_range(0.0..1.0));
        let phi = spec.leader_cost(&x, &y).unwrap();
        // Direct scalar evaluation of -(c1 .* pbar + c0)' pbar.
        let mut direct = 0.0;
        for tau in 0..cfg.lambda {
            let mut p_bar = 0.0;
            for i in 0..cfg.n {
                p_bar += y[dims.offsets[i] + layout.p(tau)];
            }
            direct -= (x[layout.c1(tau)] * p_bar + x[layout.c0(tau)]) * p_bar;
        }
        assert!((phi - direct).abs() <= 1e-12 * (1.0 + direct.abs()));
    }
}

#[test]
fn battery_dynamics_rows_exact() {
    let cfg = DRConfig::desk(6);
    let spec = build(&cfg).unwrap();
    let layout = DrLayout { n: cfg.n, lambda: cfg.lambda };
    let poly = &spec.followers[0].poly;
    // Exactly representable rates keep the row arithmetic exact.
    let lam = cfg.lambda;
    let mut y = DVector::zeros(layout.agent_dim());
    let mut soc_prev = cfg.battery.soc0;
    for tau in 0..lam {
        let pc = 0.125 * ((tau % 3) as f64);
        let pdc = 0.25 * ((tau % 2) as f64);
        y[layout.p_charge(tau)] = pc;
        y[layout.p_discharge(tau)] = pdc;
        let soc = soc_prev + cfg.delta_tau * (pc - pdc);
        y[layout.soc(tau)] = soc;
        soc_prev = soc;
    }
    // Dynamics rows are lam..2*lam in the equality block.
    let cy = &poly.c * &y;
    for tau in 0..lam {
        let row = lam + tau;
        let rhs = if tau == 0 { cfg.battery.soc0 } else { 0.0 };
        assert_eq!(cy[row], rhs, "dynamics row {tau} not exact");
    }
}

#[test]
fn capacity_decomposition_tight_at_shares() {
    let cfg = DRConfig::desk(7);
    let spec = build(&cfg).unwrap();
    let layout = DrLayout { n: cfg.n, lambda: cfg.lambda };
    let dims = spec.dims();
    let grid = cfg.grid();
    let x = default_leader_point(&cfg, &layout);
    // Every building exactly at its cap: the aggregate meets g exactly.
    let mut y = DVector::zeros(dims.n);
    for i in 0..cfg.n {
        for tau in 0..cfg.lambda {
            y[dims.offsets[i] + layout.p(tau)] = x[layout.theta(i)] * grid[tau];
        }
    }
    let report = capacity_decomposition_check(&cfg, &spec, &x, &y).unwrap();
    assert!(report.worst_period_slack.abs() <= 1e-12);
    assert!(report.implied);
}

#[test]
fn capacity_decomposition_randomized_samples() {
    let cfg = DRConfig::desk(9);
    let spec = build(&cfg).unwrap();
    let dims = spec.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let projectors: Vec<Projector> =
        spec.followers.iter().map(|f| Projector::new(&f.poly)).collect();
    let layout = DrLayout { n: cfg.n, lambda: cfg.lambda };
    for _ in 0..100 {
        let mut x = sample_leader_point(&spec.leader_set, &mut rng, 1.0);
        // Keep capacity shares away from the simplex boundary: a building
        // with a nearly-zero share has an empty feasible set.
        for i in 0..cfg.n {
            let th = x[layout.theta(i)];
            x[layout.theta(i)] = 0.5 * th + 0.5 / cfg.n as f64;
        }
        // Feasible y by projecting random points onto each Y_i(x).
        let mut y = DVector::zeros(dims.n);
        for i in 0..cfg.n {
            let raw = DVector::from_fn(dims.sizes[i], |_, _| rng.gen_range(-0.5..1.5));
            let z = projectors[i].project(&x, &raw).unwrap().z_star;
            y.rows_mut(dims.offsets[i], dims.sizes[i]).copy_from(&z);
        }
        let report = capacity_decomposition_check(&cfg, &spec, &x, &y).unwrap();
        assert!(
            report.worst_period_slack >= -1e-8,
            "implied coupling violated: slack {}",
            report.worst_period_slack
        );
        assert!(report.implied);
    }
}

#[test]
fn aggregative_path_matches_dense_on_built_instance() {
    let mut cfg = DRConfig::desk(10);
    cfg.n = 3;
    cfg.lambda = 4;
    cfg.delta_tau = 6.0;
    let spec = build(&cfg).unwrap();
    let ctx = GameContext::new(spec).unwrap();
    let layout = DrLayout { n: cfg.n, lambda: cfg.lambda };
    let x = default_leader_point(&cfg, &layout);
    let y = crate::oracles::oracle_ne(&ctx, &x, 1e-9).unwrap();

    let dense = ppg_jacobian_blocks(&ctx, &x, &y).unwrap();
    let agg = aggregative_blocks(&ctx, &x, &y).unwrap();
    let s0 = DMatrix::from_fn(ctx.dims.n, ctx.dims.m, |i, j| ((i + j) as f64 * 0.17).sin() * 0.1);
    let mut a = SensitivityState::with_initial(s0.clone());
    let mut b = SensitivityState::with_initial(s0);
    for _ in 0..3 {
        sensitivity_step(&ctx, &mut a, &dense.s1, &dense.s2);
        aggregative_sensitivity_step(&ctx, &agg, &mut b);
        assert!((&a.s - &b.s).norm() <= 1e-9, "aggregative path mismatch");
    }
}

#[test]
fn config_json_round_trip() {
    let cfg = DRConfig::desk(12);
    let text = serde_json::to_string_pretty(&cfg).unwrap();
    let back: DRConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(cfg, back);
}
