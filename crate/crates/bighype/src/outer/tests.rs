use super::*;
use crate::model::LeaderSet;
use crate::testutil::fitted_rate;
use crate::{gen, oracles};
use approx::assert_relative_eq;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn hypergradient_clamp_identity_sensitivity() {
    let ctx = GameContext::new(oracles::example1(1.0, [(0.0, 0.6), (0.0, 0.6)])).unwrap();
    let x = DVector::from_vec(vec![0.3, 0.4]);
    let y = DVector::from_vec(vec![0.3, 0.4]);
    let g = hypergradient(&ctx, &x, &y, &DMatrix::identity(2, 2)).unwrap();
    assert_eq!(g, DVector::from_vec(vec![-1.0, -1.0]));
}

#[test]
fn hypergradient_zero_sensitivity_is_explicit_part() {
    let ctx = GameContext::new(gen::lqg(2, 2, 3, 1)).unwrap();
    let x = DVector::from_vec(vec![0.2, -0.1, 0.3]);
    let y = DVector::from_fn(4, |i, _| 0.1 * i as f64);
    let g = hypergradient(&ctx, &x, &y, &DMatrix::zeros(4, 3)).unwrap();
    let (g1, _) = ctx.spec.leader_cost_grads(&x, &y).unwrap();
    assert_eq!(g, g1);
}

#[test]
fn hypergradient_matches_reduced_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    let mut attempt = 0;
    while checked < 3 && attempt < 40 {
        attempt += 1;
        let ctx = GameContext::new(gen::lqg(2, 2, 2, 100 + attempt)).unwrap();
        let Some(x) = oracles::sample_smooth_point(&ctx, &mut rng).unwrap() else { continue };
        checked += 1;
        let y = oracles::oracle_ne(&ctx, &x, 1e-12).unwrap();
        let s = oracles::oracle_sensitivity(&ctx, &x, &y).unwrap();
        let g = hypergradient(&ctx, &x, &y, &s).unwrap();
        let fd = oracles::fd_gradient(|xq| oracles::phi_e(&ctx, xq, 1e-12), &x, 1e-5).unwrap();
        let rel = (&g - fd).norm() / (1.0 + g.norm());
        assert!(rel <= 1e-3, "hypergradient mismatch {rel}");
    }
    assert_eq!(checked, 3);
}

#[test]
fn hypergradient_aggregative_form_consistent() {
    // The aggregative leader cost routes the implicit term through K_i s_i;
    // check against densely chaining grads.
    let ctx = GameContext::new(gen::aggregative(3, 2, 2, 2, 9)).unwrap();
    let x = DVector::from_vec(vec![0.3, -0.2]);
    let y = DVector::from_fn(ctx.dims.n, |i, _| 0.2 - 0.05 * i as f64);
    let s = DMatrix::from_fn(ctx.dims.n, 2, |i, j| ((i * 3 + j) as f64 * 0.21).cos());
    let g = hypergradient(&ctx, &x, &y, &s).unwrap();
    let (g1, g2) = ctx.spec.leader_cost_grads(&x, &y).unwrap();
    let dense = g1 + s.transpose() * g2;
    assert!((g - dense).norm() <= 1e-12);
}

#[test]
fn outer_step_examples() {
    let big_box = LeaderSet::Box {
        lo: DVector::from_element(1, -1e9),
        hi: DVector::from_element(1, 1e9),
    };
    // Zero gradient: fixed point.
    let x = DVector::from_element(1, 0.4);
    assert_eq!(outer_step(&x, &DVector::zeros(1), 0.1, 1.0, &big_box), x);
    // beta = 0.5, alpha*grad = -2 from x = 0: x+ = 1.
    let x0 = DVector::zeros(1);
    let step = outer_step(&x0, &DVector::from_element(1, -2.0), 1.0, 0.5, &big_box);
    assert_relative_eq!(step[0], 1.0, epsilon = 1e-14);
    // Outward normal on the ball boundary: projection cancels the step.
    let ball = LeaderSet::Ball { center: DVector::zeros(2), radius: 1.0 };
    let xb = DVector::from_vec(vec![1.0, 0.0]);
    let out = outer_step(&xb, &DVector::from_vec(vec![-3.0, 0.0]), 0.5, 1.0, &ball);
    assert!((out - xb).norm() <= 1e-12);
}

#[test]
fn schedule_contract_boundaries() {
    let mk = |exp: f64| Schedules {
        alpha: Schedule::Power { coeff: 1e-3, exponent: exp },
        beta: Schedule::Const(1.0),
        sigma_y: Schedule::Power { coeff: 0.1, exponent: 0.51 },
        sigma_s: Schedule::Power { coeff: 500.0, exponent: 0.51 },
    };
    assert!(mk(0.4).validate_for(Variant::Lqg).is_err());
    assert!(mk(0.51).validate_for(Variant::Lqg).is_ok());
    assert!(mk(1.0).validate_for(Variant::General).is_ok());
    assert!(mk(1.01).validate_for(Variant::General).is_err());

    // beta must be exactly 1 for the double-loop variants.
    let mut s = mk(0.51);
    s.beta = Schedule::Const(0.5);
    assert!(s.validate_for(Variant::Lqg).is_err());

    // Sigma exponent too slow: alpha*sigma not summable.
    let mut s2 = mk(0.51);
    s2.sigma_y = Schedule::Power { coeff: 0.1, exponent: 0.4 };
    assert!(s2.validate_for(Variant::Lqg).is_err());

    // Single-loop contracts.
    let lqsg_strong = Schedules {
        alpha: Schedule::Const(1e-2),
        beta: Schedule::Const(0.5),
        sigma_y: Schedule::Const(1.0),
        sigma_s: Schedule::Const(1.0),
    };
    assert!(lqsg_strong.validate_for(Variant::Lqsg).is_ok());
    let lqsg_convex = Schedules {
        alpha: Schedule::Const(1e-2),
        beta: Schedule::Power { coeff: 1.0, exponent: 0.6 },
        sigma_y: Schedule::Const(1.0),
        sigma_s: Schedule::Const(1.0),
    };
    assert!(lqsg_convex.validate_for(Variant::Lqsg).is_ok());
    let mut bad = lqsg_strong;
    bad.beta = Schedule::Const(1.5);
    assert!(bad.validate_for(Variant::Lqsg).is_err());
    let mut bad2 = lqsg_convex;
    bad2.alpha = Schedule::Power { coeff: 1e-2, exponent: 0.6 };
    assert!(bad2.validate_for(Variant::Lqsg).is_err());

    for variant in [Variant::General, Variant::Lqg, Variant::Lqsg] {
        for preset in [Preset::Small, Preset::Medium, Preset::Large] {
            Schedules::defaults(variant, preset).validate_for(variant).unwrap();
        }
    }
}

#[test]
fn schedule_parse_round_trip() {
    for text in ["const:0.001", "power:3e-6:0.51"] {
        let s = Schedule::parse(text).unwrap();
        assert_eq!(Schedule::parse(&s.to_string()).unwrap(), s);
    }
    assert!(Schedule::parse("linear:1").is_err());
}

fn clamp_schedules() -> Schedules {
    Schedules {
        alpha: Schedule::Power { coeff: 0.1, exponent: 0.51 },
        beta: Schedule::Const(1.0),
        sigma_y: Schedule::Power { coeff: 0.1, exponent: 0.51 },
        sigma_s: Schedule::Power { coeff: 500.0, exponent: 0.51 },
    }
}

#[test]
fn run_drives_clamp_instance_to_bound_corner() {
    let ctx = GameContext::new(oracles::example1(1.0, [(0.0, 0.6), (0.0, 0.6)])).unwrap();
    // Interior start: the origin itself sits on the clamp kink, where the
    // zero Clarke selection stalls the hypergradient (and is flagged).
    let opts = RunOptions {
        max_outer: 2000,
        record_x: true,
        x0: Some(DVector::from_vec(vec![0.3, 0.3])),
        ..RunOptions::default()
    };
    let trace = run(&ctx, &clamp_schedules(), &opts).unwrap();
    assert!(matches!(trace.summary.termination, Termination::RelTol));
    assert!((trace.summary.final_phi_e - (-1.2)).abs() <= 1e-3, "phi_e = {}", trace.summary.final_phi_e);
    let x = DVector::from_vec(trace.summary.final_x.clone());
    let clamp = DVector::from_vec(vec![x[0].clamp(0.0, 0.6), x[1].clamp(0.0, 0.6)]);
    assert!((clamp - DVector::from_vec(vec![0.6, 0.6])).norm() <= 1e-3);
}

#[test]
fn run_keeps_iterates_feasible() {
    let ctx = GameContext::new(oracles::example1(1.0, [(0.0, 0.6), (0.0, 0.6)])).unwrap();
    let opts = RunOptions {
        max_outer: 300,
        record_x: true,
        x0: Some(DVector::from_vec(vec![0.3, 0.3])),
        ..RunOptions::default()
    };
    let trace = run(&ctx, &clamp_schedules(), &opts).unwrap();
    for rec in &trace.records {
        let x = DVector::from_vec(rec.x.clone().unwrap());
        let proj = crate::polyproj::project_leader_set(&ctx.spec.leader_set, &x);
        assert!((proj - x).norm() <= 1e-9, "iterate left the leader set");
    }
}

#[test]
fn run_zero_gradient_start_terminates_fast() {
    // Unconstrained-in-x quadratic leader already at its minimizer, exact
    // (y, s) supplied: phi stalls immediately and the run stops in <= 2 outer
    // iterations.
    let spec = gen::lqsg(2, 2, 2, true, 70);
    let ctx = GameContext::new(spec).unwrap();
    // Find the reduced minimizer by a long reference run.
    let sched = Schedules {
        alpha: Schedule::Const(0.05),
        beta: Schedule::Const(0.5),
        sigma_y: Schedule::Const(1.0),
        sigma_s: Schedule::Const(1.0),
    };
    let pre = run(&ctx, &sched, &RunOptions { max_outer: 20000, rel_tol: 0.0, ..Default::default() });
    let x_star = DVector::from_vec(pre.unwrap().summary.final_x);
    let y_star = oracles::oracle_ne(&ctx, &x_star, 1e-12).unwrap();
    let s_star = oracles::oracle_sensitivity(&ctx, &x_star, &y_star).unwrap();
    let opts = RunOptions {
        max_outer: 50,
        x0: Some(x_star),
        y0: Some(y_star),
        s0: Some(s_star),
        ..RunOptions::default()
    };
    let trace = run(&ctx, &sched, &opts).unwrap();
    assert!(matches!(trace.summary.termination, Termination::RelTol));
    assert!(trace.summary.outer_iterations <= 2, "took {}", trace.summary.outer_iterations);
}

#[test]
fn run_single_loop_inner_count() {
    let ctx = GameContext::new(gen::lqsg(2, 2, 2, true, 72)).unwrap();
    let sched = Schedules {
        alpha: Schedule::Const(0.02),
        beta: Schedule::Const(0.5),
        sigma_y: Schedule::Const(1.0),
        sigma_s: Schedule::Const(1.0),
    };
    let trace = run(&ctx, &sched, &RunOptions { max_outer: 200, ..Default::default() }).unwrap();
    assert!(trace.records.iter().all(|r| r.inner_iterations == 1));
}

#[test]
fn run_single_loop_linear_rate() {
    let ctx = GameContext::new(gen::lqsg(2, 2, 2, true, 74)).unwrap();
    let sched = Schedules {
        alpha: Schedule::Const(0.05),
        beta: Schedule::Const(0.5),
        sigma_y: Schedule::Const(1.0),
        sigma_s: Schedule::Const(1.0),
    };
    // Reference minimizer from a long run.
    let pre = run(&ctx, &sched, &RunOptions { max_outer: 30000, rel_tol: 0.0, ..Default::default() }).unwrap();
    let x_star = DVector::from_vec(pre.summary.final_x);
    let opts = RunOptions { max_outer: 400, rel_tol: 0.0, record_x: true, ..Default::default() };
    let trace = run(&ctx, &sched, &opts).unwrap();
    let errors: Vec<f64> = trace
        .records
        .iter()
        .skip(30)
        .map(|r| (DVector::from_vec(r.x.clone().unwrap()) - &x_star).norm())
        .collect();
    let rate = fitted_rate(&errors);
    assert!(rate < 1.0, "no linear decay: fitted rate {rate}");
}

#[test]
fn run_rejects_contract_violations_unless_forced() {
    let ctx = GameContext::new(oracles::example1(1.0, [(0.0, 0.6), (0.0, 0.6)])).unwrap();
    let mut sched = clamp_schedules();
    sched.alpha = Schedule::Const(0.1);
    match run(&ctx, &sched, &RunOptions::default()) {
        Err(crate::error::Error::ScheduleContractViolation(_)) => {}
        other => panic!("expected contract violation, got {other:?}"),
    }
    let forced = RunOptions { force_schedules: true, max_outer: 5, ..Default::default() };
    run(&ctx, &sched, &forced).unwrap();
}

#[test]
fn run_general_variant_converges_on_clamp_instance() {
    let mut spec = oracles::example1(1.0, [(0.0, 0.6), (0.0, 0.6)]);
    spec.variant = Variant::General;
    let ctx = GameContext::new(spec).unwrap();
    let sched = Schedules {
        alpha: Schedule::Power { coeff: 0.1, exponent: 0.51 },
        beta: Schedule::Const(1.0),
        sigma_y: Schedule::Power { coeff: 0.05, exponent: 0.51 },
        sigma_s: Schedule::Power { coeff: 10.0, exponent: 0.51 },
    };
    let opts = RunOptions {
        max_outer: 2000,
        x0: Some(DVector::from_vec(vec![0.3, 0.3])),
        ..Default::default()
    };
    let trace = run(&ctx, &sched, &opts).unwrap();
    assert!(matches!(trace.summary.termination, Termination::RelTol));
    assert!((trace.summary.final_phi_e - (-1.2)).abs() <= 2e-3);
}

#[test]
fn trace_bounds_are_finite_and_populated() {
    let ctx = GameContext::new(gen::lqg(2, 2, 2, 76)).unwrap();
    let sched = Schedules::defaults(Variant::Lqg, Preset::Large);
    let trace = run(&ctx, &sched, &RunOptions { max_outer: 20, ..Default::default() }).unwrap();
    assert!(!trace.records.is_empty());
    for r in &trace.records {
        assert!(r.phi_e.is_finite());
        assert!(r.eq_bound.is_finite() && r.eq_bound >= 0.0);
        assert!(r.sens_bound.is_finite() && r.sens_bound >= 0.0);
        assert_eq!(r.wall_ms, 0.0, "timing must be off by default");
    }
}
