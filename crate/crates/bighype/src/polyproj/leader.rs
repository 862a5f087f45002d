//! Exact Euclidean projections onto the leader strategy sets.

use nalgebra::DVector;

use crate::model::LeaderSet;

/// Exact projection onto a leader-set descriptor. Total on valid descriptors.
///
/// The simplex uses the sort-based O(d log d) algorithm; product sets are
/// projected blockwise; the sum-capped box combines a clamp with a scalar
/// root-find on the cap multiplier.
pub fn project_leader_set(set: &LeaderSet, v: &DVector<f64>) -> DVector<f64> {
    assert_eq!(v.len(), set.dim(), "leader-set projection: dimension mismatch");
    match set {
        LeaderSet::Box { lo, hi } => {
            DVector::from_fn(v.len(), |i, _| v[i].clamp(lo[i], hi[i]))
        }
        LeaderSet::Ball { center, radius } => {
            let delta = v - center;
            let norm = delta.norm();
            if norm <= *radius {
                v.clone()
            } else {
                center + delta * (*radius / norm)
            }
        }
        LeaderSet::Simplex { dim } => project_simplex(v, *dim),
        LeaderSet::SumCappedBox { lo, hi, cap } => project_sum_capped_box(v, lo, hi, *cap),
        LeaderSet::Product(parts) => {
            let mut out = DVector::zeros(v.len());
            let mut off = 0;
            for part in parts {
                let d = part.dim();
                let block = DVector::from_iterator(d, v.rows(off, d).iter().cloned());
                out.rows_mut(off, d).copy_from(&project_leader_set(part, &block));
                off += d;
            }
            out
        }
    }
}

/// Projection onto the unit simplex { z ≥ 0, 1ᵀz = 1 }.
fn project_simplex(v: &DVector<f64>, dim: usize) -> DVector<f64> {
    debug_assert_eq!(v.len(), dim);
    let mut sorted: Vec<f64> = v.iter().cloned().collect();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite simplex input"));
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (j, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - 1.0) / (j as f64 + 1.0);
        if u - t > 0.0 {
            tau = t;
        } else {
            break;
        }
    }
    DVector::from_fn(dim, |i, _| (v[i] - tau).max(0.0))
}

/// Projection onto { lo ≤ z ≤ hi, 1ᵀz ≤ cap }.
///
/// If the clamp already satisfies the cap it is the projection. Otherwise the
/// KKT conditions give z(t) = clamp(v − t·1) with the multiplier t ≥ 0 solving
/// 1ᵀz(t) = cap; the sum is piecewise linear and nonincreasing in t, solved by
/// bisection to machine precision.
fn project_sum_capped_box(v: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>, cap: f64) -> DVector<f64> {
    let clamp_at = |t: f64| DVector::from_fn(v.len(), |i, _| (v[i] - t).clamp(lo[i], hi[i]));
    let z0 = clamp_at(0.0);
    if z0.sum() <= cap {
        return z0;
    }
    let mut t_lo = 0.0f64;
    let mut t_hi = (0..v.len())
        .map(|i| v[i] - lo[i])
        .fold(0.0f64, f64::max)
        .max(1e-12);
    for _ in 0..200 {
        let mid = 0.5 * (t_lo + t_hi);
        if clamp_at(mid).sum() > cap {
            t_lo = mid;
        } else {
            t_hi = mid;
        }
        if t_hi - t_lo <= f64::EPSILON * (1.0 + t_hi) {
            break;
        }
    }
    clamp_at(t_hi)
}
