//! Whole-run contracts of the outer loop checked a posteriori against the
//! oracle suite: per-iteration inner tolerances, objective-tail stability,
//! and per-sweep step-norm contraction.

use bighype::equilibrium::{self, GameContext, InnerState};
use bighype::model::sample_leader_point;
use bighype::outer::{run, Preset, RunOptions, Schedule, Schedules, Termination};
use bighype::{gen, oracles, Variant};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The inner-loop output contract at every outer iteration: with the
/// a-posteriori termination test, ‖ȳ − y*(x)‖ ≤ σ_y/(1−η) and
/// ‖s̄ − J y*(x)‖ ≤ σ_s/(1−η) at smooth iterates.
#[test]
fn lqg_inner_tolerances_enforced_each_iteration() {
    let ctx = GameContext::new(gen::lqg(3, 2, 3, 81)).unwrap();
    let schedules = Schedules {
        alpha: Schedule::Power { coeff: 0.02, exponent: 0.51 },
        ..Schedules::defaults(Variant::Lqg, Preset::Medium)
    };
    let opts = RunOptions {
        max_outer: 60,
        rel_tol: 0.0,
        record_x: true,
        record_state: true,
        ..RunOptions::default()
    };
    let trace = run(&ctx, &schedules, &opts).unwrap();
    assert!(trace.records.len() >= 50);
    let eta = ctx.constants.eta;
    let mut smooth_checked = 0;
    for rec in &trace.records {
        let x = DVector::from_vec(rec.x.clone().unwrap());
        let y = DVector::from_vec(rec.y.clone().unwrap());
        let y_star = oracles::oracle_ne(&ctx, &x, 1e-12).unwrap();
        let sigma_y = schedules.sigma_y.value(rec.k);
        assert!(
            (&y - &y_star).norm() <= sigma_y / (1.0 - eta) + 1e-9,
            "equilibrium tolerance violated at k = {}",
            rec.k
        );
        // The sensitivity part is only oracle-checkable at smooth iterates.
        if let Ok(j_star) = oracles::oracle_sensitivity(&ctx, &x, &y_star) {
            let s = DMatrix::from_vec(ctx.dims.n, ctx.dims.m, rec.s.clone().unwrap());
            let sigma_s = schedules.sigma_s.value(rec.k);
            assert!(
                (&s - &j_star).norm() <= sigma_s / (1.0 - eta) + 1e-9,
                "sensitivity tolerance violated at k = {}",
                rec.k
            );
            smooth_checked += 1;
        }
    }
    assert!(smooth_checked >= 40, "too few smooth iterates to be meaningful");
}

/// Objective-value convergence: the tail of the φ_e trace stops oscillating.
#[test]
fn phi_tail_oscillation_is_negligible() {
    for (spec, alpha) in [
        (
            oracles::example1(1.0, [(0.0, 0.6), (0.0, 0.6)]),
            Schedule::Power { coeff: 0.1, exponent: 0.51 },
        ),
        (gen::lqg(3, 2, 3, 83), Schedule::Power { coeff: 0.02, exponent: 0.51 }),
    ] {
        let ctx = GameContext::new(spec).unwrap();
        let schedules = Schedules { alpha, ..Schedules::defaults(Variant::Lqg, Preset::Large) };
        let opts = RunOptions {
            max_outer: 800,
            rel_tol: 0.0,
            x0: Some(sample_leader_point(
                &ctx.spec.leader_set,
                &mut ChaCha8Rng::seed_from_u64(7),
                0.4,
            )),
            ..RunOptions::default()
        };
        let trace = run(&ctx, &schedules, &opts).unwrap();
        let phis: Vec<f64> = trace.records.iter().map(|r| r.phi_e).collect();
        // Oscillation = upward excursions above the running minimum; a still
        // descending tail does not count against convergence.
        let mut running_min = f64::INFINITY;
        let mut osc: f64 = 0.0;
        for (k, &phi) in phis.iter().enumerate() {
            running_min = running_min.min(phi);
            if k >= phis.len() - phis.len() / 10 {
                osc = osc.max(phi - running_min);
            }
        }
        let scale = phis.last().unwrap().abs().max(1e-6);
        assert!(
            osc <= 1e-4 * scale,
            "tail oscillation {osc:.3e} above 1e-4 x |phi| = {:.3e}",
            1e-4 * scale
        );
    }
}

/// Per-sweep contraction of the equilibrium step norms on 20 random
/// instances: ‖Δỹ^{ℓ+1}‖ ≤ η‖Δỹ^ℓ‖ + 1e-9, and the a-posteriori bound holds
/// at every iteration.
#[test]
fn step_norms_contract_and_bound_holds_on_twenty_instances() {
    for seed in 0..20u64 {
        let ctx = GameContext::new(gen::lqg(2 + (seed % 3) as usize, 2, 2, 300 + seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let x = sample_leader_point(&ctx.spec.leader_set, &mut rng, 0.8);
        let y_star = oracles::oracle_ne(&ctx, &x, 1e-13).unwrap();
        let mut state = InnerState::new(DVector::from_element(ctx.dims.n, 1.0), false);
        let mut prev_step = None;
        for _ in 0..40 {
            let y_before = state.y_tilde.clone();
            equilibrium::ppg_sweep(&ctx, &x, &mut state).unwrap();
            if let Some(p) = prev_step {
                assert!(
                    state.step_norm <= ctx.constants.eta * p + 1e-9,
                    "step norms failed to contract (seed {seed})"
                );
            }
            prev_step = Some(state.step_norm);
            let bound = equilibrium::aposteriori_eq_bound(&state, ctx.constants.eta);
            assert!(
                (&y_before - &y_star).norm() <= bound + 1e-9,
                "a-posteriori bound violated (seed {seed})"
            );
        }
    }
}

/// The run loop terminates by the relative-change rule and reports it.
#[test]
fn termination_reason_is_reported() {
    let ctx = GameContext::new(gen::lqg(2, 2, 2, 85)).unwrap();
    let schedules = Schedules {
        alpha: Schedule::Power { coeff: 0.05, exponent: 0.51 },
        ..Schedules::defaults(Variant::Lqg, Preset::Large)
    };
    let trace = run(&ctx, &schedules, &RunOptions { max_outer: 3000, ..RunOptions::default() }).unwrap();
    assert!(matches!(trace.summary.termination, Termination::RelTol));
    let short = run(&ctx, &schedules, &RunOptions { max_outer: 3, ..RunOptions::default() }).unwrap();
    assert!(matches!(short.summary.termination, Termination::MaxOuter));
    assert_eq!(short.summary.outer_iterations, 3);
}
