//! Projection onto parametric polyhedra and differentiation of the projection
//! through its KKT system.
//!
//! For g(x, y) = proj_{Y(x)}[y] with Y(x) = { z | Az ≤ b + Gx, Cz = d + Hx },
//! the primal-dual solution (z*, λ*, ν*) satisfies
//!
//! ```text
//! z* − y + Aᵀλ* + Cᵀν* = 0
//! 0 ≤ λ* ⊥ (b + Gx − Az*) ≥ 0
//! Cz* = d + Hx
//! ```
//!
//! Differentiating this system on the active rows yields the partial
//! Jacobians J_y = ∂z*/∂y and J_x = ∂z*/∂x; when strict complementarity holds
//! the reduced system is square and the Jacobian unique, otherwise a
//! minimum-norm least-squares solve selects one generalized-Jacobian element
//! and flags it.

mod leader;
mod qp;

pub use leader::project_leader_set;
pub use qp::{QpOptions, WarmStart};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::PolyhedronSpec;

/// Active-set detection tolerance on the slack.
pub const TOL_ACT: f64 = 1e-7;
/// Multiplier threshold for strict-complementarity classification.
pub const TOL_MULT: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residuals {
    pub primal_ineq: f64,
    pub primal_eq: f64,
    pub stationarity: f64,
    pub complementarity: f64,
}

/// Projection output with its KKT certificate.
#[derive(Debug, Clone)]
pub struct ProjectionResult {
    pub z_star: DVector<f64>,
    pub lambda_star: DVector<f64>,
    pub nu_star: DVector<f64>,
    /// Inequality rows with slack ≤ `TOL_ACT`.
    pub active_set: Vec<usize>,
    pub residuals: Residuals,
}

#[derive(Debug, Clone)]
pub struct ProjJacobians {
    /// ∂z*/∂y, n × n. Spectral norm ≤ 1 (the projection is nonexpansive).
    pub j_y: DMatrix<f64>,
    /// ∂z*/∂x, n × m.
    pub j_x: DMatrix<f64>,
    pub strict_complementarity: bool,
}

struct EqCache {
    /// I − Cᵀ(CCᵀ)⁻¹C
    null_proj: DMatrix<f64>,
    /// Cᵀ(CCᵀ)⁻¹
    pinv_c: DMatrix<f64>,
    /// Cᵀ(CCᵀ)⁻¹H
    jac_x: DMatrix<f64>,
    chol_cct: Cholesky<f64, Dyn>,
}

/// Per-agent projector with cached factorizations. Immutable after
/// construction; safe to call concurrently.
pub struct Projector {
    pub poly: PolyhedronSpec,
    engine: qp::QpEngine,
    eq_cache: Option<EqCache>,
}

impl Projector {
    pub fn new(poly: &PolyhedronSpec) -> Self {
        Self::with_options(poly, QpOptions::default())
    }

    pub fn with_options(poly: &PolyhedronSpec, opts: QpOptions) -> Self {
        let engine = qp::QpEngine::new(&poly.a, &poly.c, opts);
        let eq_cache = if poly.is_equality_only() && poly.n_eq() > 0 {
            let c = &poly.c;
            Cholesky::new(c * c.transpose()).map(|chol_cct| {
                // (CCᵀ)⁻¹C, row-solved through the factorization.
                let w = chol_cct.solve(c);
                let pinv_c = w.transpose();
                let null_proj = DMatrix::identity(poly.n(), poly.n()) - &pinv_c * c;
                let jac_x = &pinv_c * &poly.h;
                EqCache { null_proj, pinv_c, jac_x, chol_cct }
            })
        } else {
            None
        };
        Self { poly: poly.clone(), engine, eq_cache }
    }

    pub fn n(&self) -> usize {
        self.poly.n()
    }

    /// Euclidean projection of `v` onto Y(x) with KKT certificate.
    pub fn project(&self, x: &DVector<f64>, v: &DVector<f64>) -> Result<ProjectionResult> {
        self.project_with(x, v, None)
    }

    /// Projection with an optional ADMM warm start (ignored on the
    /// closed-form equality path).
    pub fn project_with(
        &self,
        x: &DVector<f64>,
        v: &DVector<f64>,
        warm: Option<&mut WarmStart>,
    ) -> Result<ProjectionResult> {
        let (bb, dd) = self.poly.rhs(x);
        let (z, lambda, nu) = if let Some(eq) = &self.eq_cache {
            let z = &eq.null_proj * v + &eq.pinv_c * &dd;
            let nu = eq.chol_cct.solve(&(&self.poly.c * v - &dd));
            (z, DVector::zeros(0), nu)
        } else {
            let sol = self.engine.solve(v, &bb, &dd, warm)?;
            (sol.z, sol.lambda, sol.nu)
        };
        self.certify(v, &bb, &dd, z, lambda, nu)
    }

    fn certify(
        &self,
        v: &DVector<f64>,
        bb: &DVector<f64>,
        dd: &DVector<f64>,
        z: DVector<f64>,
        lambda: DVector<f64>,
        nu: DVector<f64>,
    ) -> Result<ProjectionResult> {
        let p = self.poly.n_ineq();
        let r = self.poly.n_eq();
        let mut stat = &z - v;
        if p > 0 {
            stat += self.poly.a.transpose() * &lambda;
        }
        if r > 0 {
            stat += self.poly.c.transpose() * &nu;
        }
        let stationarity = stat.norm();
        let (primal_ineq, complementarity, active_set) = if p > 0 {
            let slack = bb - &self.poly.a * &z;
            let primal = (0..p).map(|j| -slack[j]).fold(f64::MIN, f64::max);
            let compl = (0..p).map(|j| (lambda[j] * slack[j]).abs()).fold(0.0, f64::max);
            let active = (0..p).filter(|&j| slack[j] <= TOL_ACT).collect();
            (primal, compl, active)
        } else {
            (0.0, 0.0, Vec::new())
        };
        let primal_eq = if r > 0 { (&self.poly.c * &z - dd).norm() } else { 0.0 };

        let scale = 1.0 + v.norm();
        if stationarity > 1e-8 * scale
            || primal_ineq > 1e-8 * scale
            || primal_eq > 1e-8 * scale
            || complementarity > 1e-8 * scale
        {
            return Err(Error::MaxIterExceeded {
                context: "projection certificate",
                iters: self.engine.opts.max_iter,
                residual: stationarity.max(primal_ineq).max(primal_eq).max(complementarity),
            });
        }
        Ok(ProjectionResult {
            z_star: z,
            lambda_star: lambda,
            nu_star: nu,
            active_set,
            residuals: Residuals { primal_ineq, primal_eq, stationarity, complementarity },
        })
    }

    /// Differentiate the projection at a certified solution.
    ///
    /// J_y solves the KKT-differentiated system with dx = 0, dy = I; J_x with
    /// dx = I, dy = 0. Both come from one SVD of the active-row reduced
    /// system, so identical active sets give bit-identical Jacobians.
    pub fn jacobians(&self, x: &DVector<f64>, res: &ProjectionResult) -> Result<ProjJacobians> {
        if let Some(eq) = &self.eq_cache {
            let _ = x;
            return Ok(ProjJacobians {
                j_y: eq.null_proj.clone(),
                j_x: eq.jac_x.clone(),
                strict_complementarity: true,
            });
        }
        let p = self.poly.n_ineq();
        let r = self.poly.n_eq();
        let n = self.poly.n();
        let m = self.poly.g.ncols();

        let active = &res.active_set;
        let na = active.len();
        let mut m_red = DMatrix::zeros(na + r, n);
        let mut rhs = DMatrix::zeros(na + r, m);
        for (idx, &j) in active.iter().enumerate() {
            m_red.row_mut(idx).copy_from(&self.poly.a.row(j));
            rhs.row_mut(idx).copy_from(&self.poly.g.row(j));
        }
        if r > 0 {
            m_red.view_mut((na, 0), (r, n)).copy_from(&self.poly.c);
            rhs.view_mut((na, 0), (r, m)).copy_from(&self.poly.h);
        }

        let (j_y, j_x) = linalg::null_projector_and_solve(&m_red, &rhs, 1e-10)
            .ok_or(Error::SingularSystem { context: "projection KKT differentiation", agent: usize::MAX })?;

        // Strict complementarity: every active row has a clearly positive
        // multiplier and no inactive row carries one.
        let mut strict = true;
        for j in 0..p {
            let is_active = active.binary_search(&j).is_ok();
            let lam = res.lambda_star[j];
            if is_active && lam <= TOL_MULT {
                strict = false;
            }
            if !is_active && lam > TOL_MULT {
                strict = false;
            }
        }
        // Rank-deficient active systems make the selection non-unique too.
        if na + r > 0 && linalg::rank(&m_red, 1e-10) < na + r {
            strict = false;
        }
        Ok(ProjJacobians { j_y, j_x, strict_complementarity: strict })
    }
}

/// One-shot projection (constructs a throwaway [`Projector`]).
pub fn project(poly: &PolyhedronSpec, x: &DVector<f64>, y: &DVector<f64>) -> Result<ProjectionResult> {
    Projector::new(poly).project(x, y)
}

/// One-shot KKT differentiation at a certified projection result.
pub fn kkt_jacobians(
    poly: &PolyhedronSpec,
    x: &DVector<f64>,
    res: &ProjectionResult,
) -> Result<ProjJacobians> {
    Projector::new(poly).jacobians(x, res)
}
