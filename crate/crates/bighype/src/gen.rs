//! Seeded random instance generators with strong monotonicity guaranteed by
//! construction (diagonally dominant pseudo-gradient matrices).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::{
    AggregationMat, FollowerSpec, GameSpec, LeaderCost, LeaderSet, PolyhedronSpec, QuadCostSpec,
    Variant, XAffineMat,
};

fn rand_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0) * scale)
}

fn rand_vec(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.gen_range(-1.0..1.0) * scale)
}

/// Random symmetric matrix with eigenvalues ≥ `floor`.
fn rand_spd(rng: &mut ChaCha8Rng, dim: usize, floor: f64) -> DMatrix<f64> {
    let b = rand_mat(rng, dim, dim, 1.0);
    let mut q = &b * b.transpose() / dim as f64;
    for i in 0..dim {
        q[(i, i)] += floor + rng.gen_range(0.0..0.5);
    }
    q
}

/// Box feasible set with a mild leader shift; nonempty for ‖x‖_∞ within
/// `x_extent` because the shift rows have 1-norm well under the box width.
fn shifted_box(rng: &mut ChaCha8Rng, dim: usize, m: usize, x_extent: f64) -> PolyhedronSpec {
    let half = 1.0 + rng.gen_range(0.0..0.5);
    let lo = DVector::from_element(dim, -half);
    let hi = DVector::from_element(dim, half);
    let mut poly = PolyhedronSpec::fixed_box(&lo, &hi, m);
    let row_budget = 0.3 * half / (x_extent * m as f64);
    poly.g = rand_mat(rng, 2 * dim, m, row_budget);
    poly
}

/// Random linear-quadratic game with polyhedral (box) constraints.
pub fn lqg(n_agents: usize, dim: usize, m: usize, seed: u64) -> GameSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coupling_scale = 0.3 / ((n_agents.max(2) - 1) as f64 * dim as f64);
    let followers: Vec<FollowerSpec> = (0..n_agents)
        .map(|i| {
            let q = rand_spd(&mut rng, dim, 1.0);
            let mut cost = QuadCostSpec::lq(q, rand_mat(&mut rng, dim, m, 1.0), rand_vec(&mut rng, dim, 0.5));
            for j in 0..n_agents {
                if j != i {
                    cost = cost.with_coupling(j, rand_mat(&mut rng, dim, dim, coupling_scale));
                }
            }
            FollowerSpec { cost, poly: shifted_box(&mut rng, dim, m, 1.0) }
        })
        .collect();
    let n = n_agents * dim;
    let leader_cost = LeaderCost::QuadXy {
        rxx: rand_spd(&mut rng, m, 0.2),
        sxy: rand_mat(&mut rng, m, n, 1.0 / n as f64),
        pyy: rand_spd(&mut rng, n, 0.0) * 0.1,
        rx: rand_vec(&mut rng, m, 0.5),
        ry: rand_vec(&mut rng, n, 1.0),
        c: 0.0,
    };
    GameSpec {
        schema: 1,
        m,
        variant: Variant::Lqg,
        followers,
        leader_cost,
        leader_set: LeaderSet::Box {
            lo: DVector::from_element(m, -1.0),
            hi: DVector::from_element(m, 1.0),
        },
        aggregation: None,
        pg_constants: None,
        gamma: None,
    }
}

/// Random equality-constrained linear-quadratic game. With
/// `strongly_convex_leader` the leader cost has a positive-definite joint
/// Hessian (the single-loop linear-rate setting).
pub fn lqsg(n_agents: usize, dim: usize, m: usize, strongly_convex_leader: bool, seed: u64) -> GameSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coupling_scale = 0.3 / ((n_agents.max(2) - 1) as f64 * dim as f64);
    let followers: Vec<FollowerSpec> = (0..n_agents)
        .map(|i| {
            let q = rand_spd(&mut rng, dim, 1.0);
            let mut cost = QuadCostSpec::lq(q, rand_mat(&mut rng, dim, m, 1.0), rand_vec(&mut rng, dim, 0.5));
            for j in 0..n_agents {
                if j != i {
                    cost = cost.with_coupling(j, rand_mat(&mut rng, dim, dim, coupling_scale));
                }
            }
            let r_i = dim / 2;
            let poly = if r_i == 0 {
                PolyhedronSpec::free(dim, m)
            } else {
                // Random C is full row rank with probability one; d, H mild.
                PolyhedronSpec::equality(
                    rand_mat(&mut rng, r_i, dim, 1.0),
                    rand_vec(&mut rng, r_i, 0.5),
                    rand_mat(&mut rng, r_i, m, 0.5),
                    m,
                )
            };
            FollowerSpec { cost, poly }
        })
        .collect();
    let n = n_agents * dim;
    let leader_cost = if strongly_convex_leader {
        LeaderCost::QuadXy {
            rxx: rand_spd(&mut rng, m, 1.0),
            sxy: rand_mat(&mut rng, m, n, 0.2 / n as f64),
            pyy: rand_spd(&mut rng, n, 0.5),
            rx: rand_vec(&mut rng, m, 1.0),
            ry: rand_vec(&mut rng, n, 1.0),
            c: 0.0,
        }
    } else {
        LeaderCost::QuadXy {
            rxx: DMatrix::zeros(m, m),
            sxy: rand_mat(&mut rng, m, n, 1.0 / n as f64),
            pyy: DMatrix::zeros(n, n),
            rx: rand_vec(&mut rng, m, 0.5),
            ry: rand_vec(&mut rng, n, 1.0),
            c: 0.0,
        }
    };
    GameSpec {
        schema: 1,
        m,
        variant: Variant::Lqsg,
        followers,
        leader_cost,
        leader_set: LeaderSet::Box {
            lo: DVector::from_element(m, -1.0),
            hi: DVector::from_element(m, 1.0),
        },
        aggregation: None,
        pg_constants: None,
        gamma: None,
    }
}

/// Random aggregative linear-quadratic game: interactions factor through
/// σ(y) = Σ K_j y_j via E_ij = D_i K_j, and the leader cost is a quadratic
/// in (x, σ).
pub fn aggregative(n_agents: usize, dim: usize, m: usize, n_bar: usize, seed: u64) -> GameSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ks: Vec<DMatrix<f64>> = (0..n_agents).map(|_| rand_mat(&mut rng, n_bar, dim, 1.0)).collect();
    let d_scale = 0.25 / (n_agents as f64 * (dim as f64 * n_bar as f64).sqrt());
    let ds: Vec<DMatrix<f64>> = (0..n_agents).map(|_| rand_mat(&mut rng, dim, n_bar, d_scale)).collect();

    let followers: Vec<FollowerSpec> = (0..n_agents)
        .map(|i| {
            // Own quadratic absorbs the self-interaction D_i K_i + (D_i K_i)ᵀ.
            let self_term = &ds[i] * &ks[i];
            let q = rand_spd(&mut rng, dim, 1.0) + &self_term + self_term.transpose();
            let mut cost = QuadCostSpec::lq(q, rand_mat(&mut rng, dim, m, 1.0), rand_vec(&mut rng, dim, 0.5));
            for j in 0..n_agents {
                if j != i {
                    cost = cost.with_coupling(j, &ds[i] * &ks[j]);
                }
            }
            FollowerSpec { cost, poly: shifted_box(&mut rng, dim, m, 1.0) }
        })
        .collect();
    let leader_cost = LeaderCost::QuadAggregate {
        rxx: rand_spd(&mut rng, m, 0.2),
        sxs: rand_mat(&mut rng, m, n_bar, 0.5),
        pss: XAffineMat::constant(rand_spd(&mut rng, n_bar, 0.0) * 0.1),
        rx: rand_vec(&mut rng, m, 0.5),
        rs: rand_vec(&mut rng, n_bar, 1.0),
        c: 0.0,
    };
    GameSpec {
        schema: 1,
        m,
        variant: Variant::Lqg,
        followers,
        leader_cost,
        leader_set: LeaderSet::Box {
            lo: DVector::from_element(m, -1.0),
            hi: DVector::from_element(m, 1.0),
        },
        aggregation: Some(ks.into_iter().map(AggregationMat).collect()),
        pg_constants: None,
        gamma: None,
    }
}
