//! Independent ground-truth generators for tests and the check command:
//! brute-force equilibrium, the explicit sensitivity solve, finite
//! differences, and the closed-form two-follower clamp instance.
//!
//! These deliberately avoid the iteration machinery in [`crate::equilibrium`]
//! and [`crate::sensitivity`]: the equilibrium oracle is a plain
//! single-threaded fixed-point loop with no early exit, and the sensitivity
//! oracle is the dense implicit-function solve (I − J₂h)⁻¹J₁h.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;

use crate::equilibrium::GameContext;
use crate::error::{Error, Result};
use crate::model::{
    sample_leader_point, GameSpec, LeaderCost, LeaderSet, PolyhedronSpec, QuadCostSpec, Variant,
};

/// Brute-force Nash equilibrium: fixed-point iteration run to `tol`.
pub fn oracle_ne(ctx: &GameContext, x: &DVector<f64>, tol: f64) -> Result<DVector<f64>> {
    oracle_ne_from(ctx, x, &DVector::zeros(ctx.dims.n), tol)
}

pub fn oracle_ne_from(
    ctx: &GameContext,
    x: &DVector<f64>,
    y0: &DVector<f64>,
    tol: f64,
) -> Result<DVector<f64>> {
    let mut y = y0.clone();
    let cap = 2_000_000usize;
    let mut step = f64::INFINITY;
    for _ in 0..cap {
        let mut y_next = DVector::zeros(ctx.dims.n);
        for i in 0..ctx.n_agents() {
            let omega = ctx.ppg_point(i, x, &y);
            let res = ctx.projector(i).project(x, &omega).map_err(|e| e.for_agent(i))?;
            y_next
                .rows_mut(ctx.dims.offsets[i], ctx.dims.sizes[i])
                .copy_from(&res.z_star);
        }
        step = (&y_next - &y).norm();
        y = y_next;
        if step <= tol {
            return Ok(y);
        }
    }
    Err(Error::MaxIterExceeded { context: "oracle NE", iters: cap, residual: step })
}

/// Explicit sensitivity solve J y*(x) = (I − J₂h(x, y*))⁻¹ J₁h(x, y*).
///
/// Requires strict complementarity at every agent's projection (the smooth
/// case); fails with `DegeneratePoint` otherwise so callers can resample.
pub fn oracle_sensitivity(ctx: &GameContext, x: &DVector<f64>, y_star: &DVector<f64>) -> Result<DMatrix<f64>> {
    let gamma = ctx.constants.gamma;
    let dims = &ctx.dims;
    let mut j1h = DMatrix::zeros(dims.n, dims.m);
    let mut j2h = DMatrix::zeros(dims.n, dims.n);
    for i in 0..ctx.n_agents() {
        let omega = ctx.ppg_point(i, x, y_star);
        let res = ctx.projector(i).project(x, &omega).map_err(|e| e.for_agent(i))?;
        let pj = ctx.projector(i).jacobians(x, &res).map_err(|e| e.for_agent(i))?;
        if !pj.strict_complementarity {
            return Err(Error::DegeneratePoint);
        }
        let (j1f, j2f) = ctx.spec.pg_jac_block(i, dims, x, y_star);
        let row = dims.offsets[i];
        let n_i = dims.sizes[i];
        j1h.view_mut((row, 0), (n_i, dims.m))
            .copy_from(&(&pj.j_x - (&pj.j_y * j1f) * gamma));
        let mut inner = -j2f * gamma;
        for k in 0..n_i {
            inner[(k, row + k)] += 1.0;
        }
        j2h.view_mut((row, 0), (n_i, dims.n)).copy_from(&(&pj.j_y * inner));
    }
    let sys = DMatrix::identity(dims.n, dims.n) - j2h;
    sys.lu()
        .solve(&j1h)
        .ok_or(Error::SingularSystem { context: "implicit sensitivity solve", agent: usize::MAX })
}

/// Reduced leader objective φ_e(x) = φ(x, y*(x)) with the oracle equilibrium.
pub fn phi_e(ctx: &GameContext, x: &DVector<f64>, tol: f64) -> Result<f64> {
    let y = oracle_ne(ctx, x, tol)?;
    ctx.spec.leader_cost(x, &y)
}

/// Central finite differences of a scalar function, per coordinate.
pub fn fd_gradient<F>(f: F, x: &DVector<f64>, step: f64) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> Result<f64>,
{
    let mut g = DVector::zeros(x.len());
    for j in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += step;
        xm[j] -= step;
        let d = (f(&xp)? - f(&xm)?) / (2.0 * step);
        if !d.is_finite() {
            return Err(Error::NonFiniteValue("finite-difference gradient"));
        }
        g[j] = d;
    }
    Ok(g)
}

/// Central finite differences of a vector map, column per coordinate.
pub fn fd_jacobian<F>(f: F, x: &DVector<f64>, step: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let probe = f(x)?;
    let mut jac = DMatrix::zeros(probe.len(), x.len());
    for j in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += step;
        xm[j] -= step;
        let col = (f(&xp)? - f(&xm)?) / (2.0 * step);
        if col.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue("finite-difference jacobian"));
        }
        jac.column_mut(j).copy_from(&col);
    }
    Ok(jac)
}

/// Two-follower clamp instance: f_i(x, y_i) = (y_i − x_i)², Y_i = [lo_i, hi_i],
/// X the ball of radius r, leader cost −(y₁ + y₂). The solution map is the
/// coordinatewise clamp of x onto the bounds, which makes it the workhorse
/// ground-truth model across the test suite.
pub fn example1(r: f64, bounds: [(f64, f64); 2]) -> GameSpec {
    let m = 2;
    let followers = (0..2)
        .map(|i| {
            let q = DMatrix::from_element(1, 1, 2.0);
            let mut param = DMatrix::zeros(1, m);
            param[(0, i)] = -2.0;
            let cost = QuadCostSpec::lq(q, param, DVector::zeros(1));
            let (lo, hi) = bounds[i];
            let poly = PolyhedronSpec::fixed_box(
                &DVector::from_element(1, lo),
                &DVector::from_element(1, hi),
                m,
            );
            crate::model::FollowerSpec { cost, poly }
        })
        .collect();
    GameSpec {
        schema: 1,
        m,
        variant: Variant::Lqg,
        followers,
        leader_cost: LeaderCost::linear_in_y(m, DVector::from_vec(vec![-1.0, -1.0])),
        leader_set: LeaderSet::Ball { center: DVector::zeros(2), radius: r },
        aggregation: None,
        pg_constants: None,
        gamma: None,
    }
}

/// Active-set signature of the projections at ω(x, y*(x)).
fn active_signature(ctx: &GameContext, x: &DVector<f64>) -> Result<(Vec<Vec<usize>>, bool)> {
    let y = oracle_ne(ctx, x, 1e-12)?;
    let mut sig = Vec::with_capacity(ctx.n_agents());
    let mut strict = true;
    for i in 0..ctx.n_agents() {
        let omega = ctx.ppg_point(i, x, &y);
        let res = ctx.projector(i).project(x, &omega)?;
        let pj = ctx.projector(i).jacobians(x, &res)?;
        strict &= pj.strict_complementarity;
        sig.push(res.active_set);
    }
    Ok((sig, strict))
}

/// Draw a leader point whose active partition is stable: strict
/// complementarity holds and the active sets are invariant under 13
/// perturbations of radius 1e-6 (axis-aligned ± and random fill). Returns
/// `None` when the candidate fails, so callers resample.
pub fn sample_smooth_point(ctx: &GameContext, rng: &mut ChaCha8Rng) -> Result<Option<DVector<f64>>> {
    use rand::Rng;
    let x = sample_leader_point(&ctx.spec.leader_set, rng, 2.0);
    let (base_sig, strict) = active_signature(ctx, &x)?;
    if !strict {
        return Ok(None);
    }
    let m = ctx.dims.m;
    let mut perturbations: Vec<DVector<f64>> = Vec::with_capacity(13);
    for j in 0..m.min(4) {
        let mut e = DVector::zeros(m);
        e[j] = 1e-6;
        perturbations.push(e.clone());
        perturbations.push(-e);
    }
    while perturbations.len() < 13 {
        let mut d = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0));
        let norm = d.norm();
        if norm < 1e-12 {
            continue;
        }
        d *= 1e-6 / norm;
        perturbations.push(d);
    }
    for dx in &perturbations {
        let (sig, strict) = active_signature(ctx, &(&x + dx))?;
        if !strict || sig != base_sig {
            return Ok(None);
        }
    }
    Ok(Some(x))
}
