//! Shared fixtures for the unit-test modules.

use nalgebra::{DMatrix, DVector};

use crate::model::{
    FollowerSpec, GameSpec, LeaderCost, LeaderSet, PolyhedronSpec, QuadCostSpec, Variant,
};

/// One scalar follower with pseudo-gradient q(y − x) and a generous box.
pub fn scalar_game(q: f64, gamma: Option<f64>) -> GameSpec {
    let cost = QuadCostSpec::lq(
        DMatrix::from_element(1, 1, q),
        DMatrix::from_element(1, 1, -q),
        DVector::zeros(1),
    );
    GameSpec {
        schema: 1,
        m: 1,
        variant: Variant::Lqg,
        followers: vec![FollowerSpec {
            cost,
            poly: PolyhedronSpec::fixed_box(
                &DVector::from_element(1, -1e9),
                &DVector::from_element(1, 1e9),
                1,
            ),
        }],
        leader_cost: LeaderCost::linear_in_y(1, DVector::from_element(1, -1.0)),
        leader_set: LeaderSet::Box {
            lo: DVector::from_element(1, -10.0),
            hi: DVector::from_element(1, 10.0),
        },
        aggregation: None,
        pg_constants: None,
        gamma,
    }
}

/// Fit the geometric decay rate of a positive sequence by least squares on
/// log-values (slope of log e_k against k).
pub fn fitted_rate(errors: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = errors
        .iter()
        .enumerate()
        .filter(|(_, &e)| e > 1e-300)
        .map(|(k, &e)| (k as f64, e.ln()))
        .collect();
    assert!(pts.len() >= 3, "need at least three positive errors to fit a rate");
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    slope.exp()
}
