//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{DMatrix, DVector};

/// Minimum eigenvalue of the symmetric part (M + Mᵀ)/2.
pub fn sym_min_eig(m: &DMatrix<f64>) -> f64 {
    assert_eq!(m.nrows(), m.ncols());
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Spectral norm (largest singular value).
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.singular_values().iter().cloned().fold(0.0, f64::max)
}

/// Numerical row rank with tolerance `tol_rel` times the largest singular value.
pub fn rank(m: &DMatrix<f64>, tol_rel: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.singular_values();
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > tol_rel * smax).count()
}

/// Minimum-norm least-squares solve of `M · X = B` via SVD.
///
/// Returns `None` when the SVD fails to converge. Singular values below
/// `tol_rel`·σ_max are treated as zero.
pub fn lstsq(m: &DMatrix<f64>, b: &DMatrix<f64>, tol_rel: f64) -> Option<DMatrix<f64>> {
    if m.nrows() == 0 {
        return Some(DMatrix::zeros(m.ncols(), b.ncols()));
    }
    let svd = nalgebra::SVD::try_new(m.clone(), true, true, f64::EPSILON, 0)?;
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let eps = if smax > 0.0 { tol_rel * smax } else { tol_rel };
    svd.solve(b, eps).ok()
}

/// Projector onto the null space of `M`: I − M⁺M, plus the pseudo-inverse
/// applied to `B`: M⁺·B. Both come from one SVD so repeated calls with the
/// same reduced system are bit-for-bit identical.
pub fn null_projector_and_solve(
    m: &DMatrix<f64>,
    b: &DMatrix<f64>,
    tol_rel: f64,
) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
    let n = m.ncols();
    if m.nrows() == 0 {
        return Some((DMatrix::identity(n, n), DMatrix::zeros(n, b.ncols())));
    }
    let svd = nalgebra::SVD::try_new(m.clone(), true, true, f64::EPSILON, 0)?;
    let u = svd.u.as_ref()?;
    let v_t = svd.v_t.as_ref()?;
    let sv = &svd.singular_values;
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let eps = if smax > 0.0 { tol_rel * smax } else { tol_rel };

    // I − Σ_r v_r v_rᵀ over singular values above tolerance.
    let mut null_proj = DMatrix::identity(n, n);
    let mut pinv_b = DMatrix::zeros(n, b.ncols());
    for (r, &s) in sv.iter().enumerate() {
        if s > eps {
            let vr = v_t.row(r).transpose(); // n × 1
            null_proj -= &vr * vr.transpose();
            let ur = u.column(r);
            // v_r (u_rᵀ B) / s
            let coeff = (ur.transpose() * b) / s; // 1 × k
            pinv_b += &vr * coeff;
        }
    }
    Some((null_proj, pinv_b))
}

pub fn is_finite_vec(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

pub fn is_finite_mat(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}
