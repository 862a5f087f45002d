//! Least-distance QP engine backing the polyhedral projections.
//!
//! Solves  min ½‖z − v‖²  s.t.  A z ≤ bb,  C z = dd  by operator splitting
//! (over-relaxed ADMM on the constraint split w = [A; C]·z, one cached
//! Cholesky factorization of I + ρKᵀK per polyhedron) followed by a direct
//! active-set refinement pass that re-solves the KKT equality system on the
//! detected active rows. The polish step is what makes the multipliers clean
//! enough for the downstream KKT differentiation: its complementarity error
//! is exact zero on inactive rows and rounding-level on active ones.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone, Copy)]
pub struct QpOptions {
    pub rho: f64,
    pub over_relax: f64,
    pub max_iter: usize,
    pub check_every: usize,
    /// Residual level at which polishing is attempted.
    pub polish_at: f64,
    /// Acceptable raw-ADMM residual when polishing never verifies.
    pub fallback_tol: f64,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self {
            rho: 1.0,
            over_relax: 1.6,
            max_iter: 50_000,
            check_every: 25,
            // The polish pass verifies the KKT system itself, so it can be
            // attempted as soon as the active set is plausibly identified.
            polish_at: 1e-4,
            fallback_tol: 1e-9,
        }
    }
}

/// Reusable ADMM state for warm starts across repeated projections onto the
/// same (slowly moving) polyhedron.
#[derive(Debug, Clone, Default)]
pub struct WarmStart {
    pub w: DVector<f64>,
    pub u: DVector<f64>,
}

pub struct QpEngine {
    /// K = [A; C], q × n.
    pub k_mat: DMatrix<f64>,
    pub n: usize,
    pub p: usize,
    pub r: usize,
    chol: Option<Cholesky<f64, Dyn>>,
    pub opts: QpOptions,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub z: DVector<f64>,
    /// Inequality multipliers (≥ 0) and equality multipliers.
    pub lambda: DVector<f64>,
    pub nu: DVector<f64>,
}

impl QpEngine {
    pub fn new(a: &DMatrix<f64>, c: &DMatrix<f64>, opts: QpOptions) -> Self {
        let p = a.nrows();
        let r = c.nrows();
        let n = a.ncols().max(c.ncols());
        let mut k_mat = DMatrix::zeros(p + r, n);
        if p > 0 {
            k_mat.view_mut((0, 0), (p, n)).copy_from(a);
        }
        if r > 0 {
            k_mat.view_mut((p, 0), (r, n)).copy_from(c);
        }
        let chol = if p + r > 0 {
            let kkt = DMatrix::identity(n, n) + k_mat.transpose() * &k_mat * opts.rho;
            Some(Cholesky::new(kkt).expect("I + rho KtK is positive definite"))
        } else {
            None
        };
        Self { k_mat, n, p, r, chol, opts }
    }

    /// Solve the projection of `v` with right-hand sides `bb` (inequalities)
    /// and `dd` (equalities).
    pub fn solve(
        &self,
        v: &DVector<f64>,
        bb: &DVector<f64>,
        dd: &DVector<f64>,
        warm: Option<&mut WarmStart>,
    ) -> Result<QpSolution> {
        let q = self.p + self.r;
        if q == 0 {
            return Ok(QpSolution {
                z: v.clone(),
                lambda: DVector::zeros(0),
                nu: DVector::zeros(0),
            });
        }
        let rho = self.opts.rho;
        let theta = self.opts.over_relax;
        let scale = 1.0 + v.norm() + bb.norm() + dd.norm();

        let (mut w, mut u) = match &warm {
            Some(ws) if ws.w.len() == q => (ws.w.clone(), ws.u.clone()),
            _ => (DVector::zeros(q), DVector::zeros(q)),
        };

        let chol = self.chol.as_ref().unwrap();
        let mut kz = DVector::zeros(q);
        let mut best_fallback: Option<(f64, QpSolution)> = None;

        let mut iter = 0;
        while iter < self.opts.max_iter {
            iter += 1;
            // z-step: (I + ρKᵀK) z = v + ρKᵀ(w − u)
            let rhs = v + self.k_mat.transpose() * ((&w - &u) * rho);
            let z = chol.solve(&rhs);
            kz = &self.k_mat * &z;
            // relaxation
            let kz_hat = &kz * theta + &w * (1.0 - theta);
            // w-step: projection onto { w_ineq ≤ bb, w_eq = dd }
            let w_prev = w.clone();
            for j in 0..self.p {
                w[j] = (kz_hat[j] + u[j]).min(bb[j]);
            }
            for j in 0..self.r {
                w[self.p + j] = dd[j];
            }
            // u-step
            u += &kz_hat - &w;

            if iter % self.opts.check_every == 0 || iter == self.opts.max_iter {
                let primal = (&kz - &w).norm();
                let dual = rho * (self.k_mat.transpose() * (&w - &w_prev)).norm();
                let res = primal.max(dual);
                if res <= self.opts.polish_at * scale {
                    if let Some(sol) = self.polish(v, bb, dd, &u, &kz) {
                        if let Some(ws) = warm {
                            ws.w = w;
                            ws.u = u;
                        }
                        return Ok(sol);
                    }
                    // Track the best raw iterate in case polish never lands.
                    if res <= self.opts.fallback_tol * scale {
                        let mut lambda = DVector::zeros(self.p);
                        for j in 0..self.p {
                            lambda[j] = (rho * u[j]).max(0.0);
                        }
                        let nu = DVector::from_fn(self.r, |j, _| rho * u[self.p + j]);
                        let cand = QpSolution { z: z.clone(), lambda, nu };
                        if best_fallback.as_ref().map_or(true, |(r0, _)| res < *r0) {
                            best_fallback = Some((res, cand));
                        }
                        if res <= 1e-12 * scale {
                            break;
                        }
                    }
                }
            }
        }

        if let Some(ws) = warm {
            ws.w = w.clone();
            ws.u = u.clone();
        }
        if let Some((_, sol)) = best_fallback {
            return Ok(sol);
        }
        let primal = (&kz - &w).norm();
        if primal > 1e-6 * scale {
            Err(Error::Infeasible { agent: usize::MAX, residual: primal })
        } else {
            Err(Error::MaxIterExceeded {
                context: "projection QP",
                iters: iter,
                residual: primal,
            })
        }
    }

    /// Active-set refinement. Solves the equality-restricted KKT system for a
    /// candidate active set, then repairs the set by dropping the most
    /// negative multiplier / adding the most violated row until the KKT
    /// conditions verify. Returns `None` when no consistent set is found.
    fn polish(
        &self,
        v: &DVector<f64>,
        bb: &DVector<f64>,
        dd: &DVector<f64>,
        u: &DVector<f64>,
        kz: &DVector<f64>,
    ) -> Option<QpSolution> {
        let rho = self.opts.rho;
        let mut active: Vec<usize> = (0..self.p)
            .filter(|&j| rho * u[j] > 1e-9 || bb[j] - kz[j] < 1e-7)
            .collect();

        for _round in 0..(3 * self.p + 10) {
            let na = active.len();
            let rows = na + self.r;
            let mut m_red = DMatrix::zeros(rows, self.n);
            let mut rhs = DVector::zeros(rows);
            for (idx, &j) in active.iter().enumerate() {
                m_red.row_mut(idx).copy_from(&self.k_mat.row(j));
                rhs[idx] = bb[j];
            }
            for j in 0..self.r {
                m_red.row_mut(na + j).copy_from(&self.k_mat.row(self.p + j));
                rhs[na + j] = dd[j];
            }

            // z = v − Mᵀμ with (MMᵀ)μ = Mv − rhs.
            let mv_rhs = &m_red * v - &rhs;
            let mu = if rows == 0 {
                DVector::zeros(0)
            } else {
                let mmt = &m_red * m_red.transpose();
                match Cholesky::new(mmt.clone()) {
                    Some(ch) => ch.solve(&mv_rhs),
                    None => {
                        let sol = linalg::lstsq(
                            &mmt,
                            &DMatrix::from_column_slice(rows, 1, mv_rhs.as_slice()),
                            1e-12,
                        )?;
                        DVector::from_column_slice(sol.as_slice())
                    }
                }
            };
            let z = v - m_red.transpose() * &mu;

            // Active rows must actually hold (catches inconsistent redundancy).
            let act_resid = (&m_red * &z - &rhs).amax();
            if rows > 0 && act_resid > 1e-8 * (1.0 + rhs.amax()) {
                // Drop the worst row among the inequalities; give up if none.
                let mr = &m_red * &z - &rhs;
                let worst = (0..na).max_by(|&a, &b| {
                    mr[a].abs().partial_cmp(&mr[b].abs()).unwrap()
                })?;
                active.remove(worst);
                continue;
            }

            // Dual feasibility on the active inequalities.
            if let Some((idx, _)) = (0..na)
                .map(|i| (i, mu[i]))
                .filter(|&(_, l)| l < -1e-11)
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            {
                active.remove(idx);
                continue;
            }

            // Primal feasibility on the inactive inequalities.
            let kz_new = &self.k_mat * &z;
            let mut worst: Option<(usize, f64)> = None;
            for j in 0..self.p {
                if active.contains(&j) {
                    continue;
                }
                let viol = kz_new[j] - bb[j];
                if viol > 1e-10 * (1.0 + bb[j].abs())
                    && worst.map_or(true, |(_, wv)| viol > wv)
                {
                    worst = Some((j, viol));
                }
            }
            if let Some((j, _)) = worst {
                active.push(j);
                active.sort_unstable();
                continue;
            }

            let mut lambda = DVector::zeros(self.p);
            for (idx, &j) in active.iter().enumerate() {
                lambda[j] = mu[idx].max(0.0);
            }
            let nu = DVector::from_fn(self.r, |j, _| mu[na + j]);
            return Some(QpSolution { z, lambda, nu });
        }
        None
    }
}
