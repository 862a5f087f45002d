use super::*;
use crate::error::Error;
use crate::{gen, oracles};
use approx::assert_relative_eq;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn scalar_spec(q: f64) -> GameSpec {
    // One follower, f(x, y) = ½qy² − qxy: pseudo-gradient q(y − x).
    let cost = QuadCostSpec::lq(
        DMatrix::from_element(1, 1, q),
        DMatrix::from_element(1, 1, -q),
        DVector::zeros(1),
    );
    GameSpec {
        schema: 1,
        m: 1,
        variant: Variant::Lqg,
        followers: vec![FollowerSpec { cost, poly: PolyhedronSpec::free(1, 1) }],
        leader_cost: LeaderCost::linear_in_y(1, DVector::from_element(1, -1.0)),
        leader_set: LeaderSet::Box {
            lo: DVector::from_element(1, -10.0),
            hi: DVector::from_element(1, 10.0),
        },
        aggregation: None,
        pg_constants: None,
        gamma: None,
    }
}

fn two_agent_cross() -> GameSpec {
    // Q_i = I₂, E_12 = E_21 = 0.5·I₂.
    let eye = DMatrix::identity(2, 2);
    let half = &eye * 0.5;
    let mk = |other: usize| {
        QuadCostSpec::lq(eye.clone(), DMatrix::zeros(2, 2), DVector::zeros(2))
            .with_coupling(other, half.clone())
    };
    GameSpec {
        schema: 1,
        m: 2,
        variant: Variant::Lqg,
        followers: vec![
            FollowerSpec { cost: mk(1), poly: PolyhedronSpec::free(2, 2) },
            FollowerSpec { cost: mk(0), poly: PolyhedronSpec::free(2, 2) },
        ],
        leader_cost: LeaderCost::linear_in_y(2, DVector::from_element(4, -1.0)),
        leader_set: LeaderSet::Box {
            lo: DVector::from_element(2, -1.0),
            hi: DVector::from_element(2, 1.0),
        },
        aggregation: None,
        pg_constants: None,
        gamma: None,
    }
}

#[test]
fn validate_single_block_moduli() {
    let report = scalar_spec(2.0).validate().unwrap();
    assert_relative_eq!(report.mu, 2.0, epsilon = 1e-12);
    assert_relative_eq!(report.l_f, 2.0, epsilon = 1e-12);
    assert!(report.pg_affine);
}

#[test]
fn validate_cross_coupled_moduli_match_eigensolver() {
    let spec = two_agent_cross();
    let report = spec.validate().unwrap();
    // Independent oracle: eigendecompose the assembled 4x4 block matrix.
    let mut mat = DMatrix::identity(4, 4);
    for i in 0..2 {
        mat[(i, 2 + i)] = 0.5;
        mat[(2 + i, i)] = 0.5;
    }
    let eigs = mat.clone().symmetric_eigen().eigenvalues;
    let mu_oracle = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
    let lf_oracle = mat.singular_values().iter().cloned().fold(0.0, f64::max);
    assert_relative_eq!(report.mu, mu_oracle, epsilon = 1e-12);
    assert_relative_eq!(report.l_f, lf_oracle, epsilon = 1e-12);
    assert_relative_eq!(report.mu, 0.5, epsilon = 1e-12);
    assert_relative_eq!(report.l_f, 1.5, epsilon = 1e-12);
}

#[test]
fn validate_rejects_negative_definite_block() {
    match scalar_spec(-1.0).validate() {
        Err(Error::NotStronglyMonotone { .. }) => {}
        other => panic!("expected NotStronglyMonotone, got {other:?}"),
    }
}

#[test]
fn validate_rejects_rank_deficient_equalities() {
    let mut spec = two_agent_cross();
    // Duplicate equality rows are rank deficient.
    spec.followers[0].poly = PolyhedronSpec::equality(
        DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]),
        DVector::from_vec(vec![1.0, 1.0]),
        DMatrix::zeros(2, 2),
        2,
    );
    match spec.validate() {
        Err(Error::RankDeficientConstraint { agent: 0, which: "C" }) => {}
        other => panic!("expected RankDeficientConstraint, got {other:?}"),
    }
}

#[test]
fn pseudo_gradient_vanishes_at_tracked_point() {
    let spec = scalar_spec(2.0);
    let f = spec
        .pseudo_gradient(&DVector::from_element(1, 1.0), &DVector::from_element(1, 1.0))
        .unwrap();
    assert_relative_eq!(f[0], 0.0, epsilon = 1e-15);
}

#[test]
fn pseudo_gradient_clamp_instance() {
    let spec = oracles::example1(1.0, [(0.0, 0.6), (0.0, 0.6)]);
    let f = spec
        .pseudo_gradient(&DVector::from_vec(vec![0.3, 0.4]), &DVector::zeros(2))
        .unwrap();
    assert_relative_eq!(f[0], -0.6, epsilon = 1e-14);
    assert_relative_eq!(f[1], -0.8, epsilon = 1e-14);
}

#[test]
fn pseudo_gradient_is_matrix_apply_at_zero_offset() {
    let spec = two_agent_cross();
    let y = DVector::from_element(4, 1.0);
    let f = spec.pseudo_gradient(&DVector::zeros(2), &y).unwrap();
    let mat = spec.assemble_pg_matrix(None);
    assert_relative_eq!((f - mat * y).norm(), 0.0, epsilon = 1e-14);
}

#[test]
fn pg_jacobians_scalar() {
    let spec = scalar_spec(2.0);
    let (j1, j2) = spec
        .pg_jacobians(&DVector::from_element(1, 0.3), &DVector::from_element(1, -0.7))
        .unwrap();
    assert_relative_eq!(j1[(0, 0)], -2.0, epsilon = 1e-15);
    assert_relative_eq!(j2[(0, 0)], 2.0, epsilon = 1e-15);
}

#[test]
fn pg_jacobians_constant_for_affine_pg() {
    let spec = gen::lqg(3, 2, 2, 7);
    let x1 = DVector::from_vec(vec![0.3, -0.8]);
    let y1 = DVector::from_fn(6, |i, _| i as f64 * 0.1 - 0.2);
    let x2 = DVector::from_vec(vec![-0.5, 0.2]);
    let y2 = DVector::from_fn(6, |i, _| 0.5 - i as f64 * 0.3);
    let (j1a, j2a) = spec.pg_jacobians(&x1, &y1).unwrap();
    let (j1b, j2b) = spec.pg_jacobians(&x2, &y2).unwrap();
    assert_eq!(j1a, j1b);
    assert_eq!(j2a, j2b);
}

#[test]
fn pg_jacobian_symmetric_part_matches_validated_mu() {
    let spec = gen::lqg(3, 2, 2, 11);
    let report = spec.validate().unwrap();
    let (_, j2) = spec.pg_jacobians(&DVector::zeros(2), &DVector::zeros(6)).unwrap();
    let sym = (&j2 + j2.transpose()) * 0.5;
    let mu_oracle = sym.symmetric_eigen().eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    assert_relative_eq!(report.mu, mu_oracle, epsilon = 1e-10);
}

#[test]
fn pg_jacobians_match_finite_differences() {
    for seed in [1u64, 2, 3] {
        let spec = gen::lqg(2, 2, 3, seed);
        let x = DVector::from_vec(vec![0.2, -0.1, 0.4]);
        let y = DVector::from_fn(4, |i, _| 0.3 - 0.2 * i as f64);
        let (j1, j2) = spec.pg_jacobians(&x, &y).unwrap();
        let fd_x = oracles::fd_jacobian(|xq| spec.pseudo_gradient(xq, &y), &x, 1e-6).unwrap();
        let fd_y = oracles::fd_jacobian(|yq| spec.pseudo_gradient(&x, yq), &y, 1e-6).unwrap();
        let rel1 = (&j1 - &fd_x).norm() / (1.0 + j1.norm());
        let rel2 = (&j2 - &fd_y).norm() / (1.0 + j2.norm());
        assert!(rel1 <= 1e-6, "J1F finite-difference mismatch: {rel1}");
        assert!(rel2 <= 1e-6, "J2F finite-difference mismatch: {rel2}");
    }
}

#[test]
fn monotonicity_and_lipschitz_sampled() {
    use rand::Rng;
    use rand::SeedableRng;
    let spec = gen::lqg(3, 3, 2, 5);
    let report = spec.validate().unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    let x = DVector::zeros(2);
    for _ in 0..1000 {
        let y1 = DVector::from_fn(9, |_, _| rng.gen_range(-3.0..3.0));
        let y2 = DVector::from_fn(9, |_, _| rng.gen_range(-3.0..3.0));
        let delta = &y1 - &y2;
        let df = spec.pseudo_gradient(&x, &y1).unwrap() - spec.pseudo_gradient(&x, &y2).unwrap();
        assert!(df.dot(&delta) >= (report.mu - 1e-9) * delta.norm_squared());
        assert!(df.norm() <= (report.l_f + 1e-9) * delta.norm());
    }
}

#[test]
fn leader_cost_linear_form() {
    let spec = oracles::example1(1.0, [(0.0, 0.6), (0.0, 0.6)]);
    let x = DVector::from_vec(vec![0.1, 0.2]);
    let y = DVector::from_vec(vec![0.5, 0.7]);
    assert_relative_eq!(spec.leader_cost(&x, &y).unwrap(), -1.2, epsilon = 1e-14);
    let (g1, g2) = spec.leader_cost_grads(&x, &y).unwrap();
    assert_eq!(g1, DVector::zeros(2));
    assert_eq!(g2, DVector::from_vec(vec![-1.0, -1.0]));
}

/// Minimal revenue-form instance: one follower whose decision is the
/// aggregate itself, x = (c₀, c₁).
fn revenue_spec(lam: usize) -> GameSpec {
    let m = 2 * lam;
    let cost = QuadCostSpec::lq(
        DMatrix::identity(lam, lam),
        DMatrix::zeros(lam, m),
        DVector::zeros(lam),
    );
    let mut sxs = DMatrix::zeros(m, lam);
    for tau in 0..lam {
        sxs[(tau, tau)] = -1.0;
    }
    let mut pss_x = Vec::new();
    for tau in 0..lam {
        let mut pk = DMatrix::zeros(lam, lam);
        pk[(tau, tau)] = -2.0;
        pss_x.push(XLinearPart { k: lam + tau, mat: pk });
    }
    GameSpec {
        schema: 1,
        m,
        variant: Variant::Lqg,
        followers: vec![FollowerSpec {
            cost,
            poly: PolyhedronSpec::free(lam, m),
        }],
        leader_cost: LeaderCost::QuadAggregate {
            rxx: DMatrix::zeros(m, m),
            sxs,
            pss: XAffineMat { mat: DMatrix::zeros(lam, lam), mat_x: pss_x },
            rx: DVector::zeros(m),
            rs: DVector::zeros(lam),
            c: 0.0,
        },
        leader_set: LeaderSet::Box {
            lo: DVector::from_element(m, 0.0),
            hi: DVector::from_element(m, 2.0),
        },
        aggregation: Some(vec![AggregationMat(DMatrix::identity(lam, lam))]),
        pg_constants: None,
        gamma: None,
    }
}

#[test]
fn leader_cost_revenue_form() {
    // φ = −(C₁p̄ + c₀)ᵀp̄ with c₁ = 0, c₀ = 1 per period, p̄ = (2, 3) → −5.
    let spec = revenue_spec(2);
    let x = DVector::from_vec(vec![1.0, 1.0, 0.0, 0.0]);
    let y = DVector::from_vec(vec![2.0, 3.0]);
    assert_relative_eq!(spec.leader_cost(&x, &y).unwrap(), -5.0, epsilon = 1e-14);
    // Nonzero marginal price: φ = −(c₁⊙p̄ + c₀)ᵀp̄.
    let x2 = DVector::from_vec(vec![1.0, 0.5, 0.2, 0.1]);
    let expected = -((0.2f64 * 2.0 + 1.0) * 2.0 + (0.1 * 3.0 + 0.5) * 3.0);
    assert_relative_eq!(spec.leader_cost(&x2, &y).unwrap(), expected, epsilon = 1e-13);
}

#[test]
fn aggregative_leader_grads_match_finite_differences() {
    let spec = revenue_spec(3);
    let x = DVector::from_vec(vec![0.8, 1.1, 0.4, 0.3, 0.2, 0.15]);
    let y = DVector::from_vec(vec![1.5, 2.5, 0.5]);
    let (g1, g2) = spec.leader_cost_grads(&x, &y).unwrap();
    let fd1 = oracles::fd_gradient(|xq| spec.leader_cost(xq, &y), &x, 1e-6).unwrap();
    let fd2 = oracles::fd_gradient(|yq| spec.leader_cost(&x, yq), &y, 1e-6).unwrap();
    assert!((&g1 - fd1).norm() / (1.0 + g1.norm()) <= 1e-6);
    assert!((&g2 - fd2).norm() / (1.0 + g2.norm()) <= 1e-6);
}

#[test]
fn aggregative_coupling_recovery() {
    let spec = gen::aggregative(3, 2, 2, 2, 13);
    spec.validate().unwrap();
    let ds = spec.aggregative_coupling().unwrap();
    let ks = spec.aggregation.as_ref().unwrap();
    let zero_x = DVector::zeros(2);
    for (i, f) in spec.followers.iter().enumerate() {
        for cb in &f.cost.coupling {
            let expect = ds[i].eval(&zero_x) * &ks[cb.other].0;
            assert!((&cb.block.mat - expect).norm() <= 1e-9);
        }
    }
}

#[test]
fn constants_formula_and_defaults() {
    let c = Constants::from_moduli(2.0, 2.0).unwrap();
    assert_relative_eq!(c.gamma, 0.9 * 2.0 / 4.0, epsilon = 1e-15);
    let c2 = Constants::with_gamma(2.0, 2.0, 0.25).unwrap();
    assert_relative_eq!(c2.eta, 0.5, epsilon = 1e-15);
    assert!(Constants::with_gamma(2.0, 2.0, 1.1).is_err());
}

#[test]
fn gamespec_json_round_trip() {
    let spec = gen::aggregative(2, 2, 3, 2, 21);
    let text = spec.to_json();
    let back = GameSpec::from_json(&text).unwrap();
    assert_eq!(spec, back);
    // Schema field serialized per the documented format.
    let value: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(value["schema"], 1);
    assert_eq!(value["variant"], "lqg");
}

#[test]
fn dimension_mismatch_reported() {
    let spec = scalar_spec(2.0);
    match spec.pseudo_gradient(&DVector::zeros(2), &DVector::zeros(1)) {
        Err(Error::DimensionMismatch(_)) => {}
        other => panic!("expected DimensionMismatch, got {other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// η = √(1 − γ(2μ − γL²)) lies in (0, 1) for every γ in the window.
    #[test]
    fn eta_inside_unit_interval(mu in 0.05f64..2.0, ratio in 1.0f64..4.0, t in 0.01f64..0.99) {
        let l_f = mu * ratio;
        let gamma = t * 2.0 * mu / (l_f * l_f);
        let c = Constants::with_gamma(mu, l_f, gamma).unwrap();
        prop_assert!(c.eta > 0.0 && c.eta < 1.0);
        let formula = (1.0 - gamma * (2.0 * mu - gamma * l_f * l_f)).sqrt();
        prop_assert!((c.eta - formula).abs() <= 1e-12);
    }
}
