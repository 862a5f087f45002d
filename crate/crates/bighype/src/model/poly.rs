//! Parametric polyhedral feasible sets.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::serde_support;

/// One agent's feasible set `Y(x) = { z | A z ≤ b + G x,  C z = d + H x }`.
///
/// `A` is `p × n`, `C` is `r × n`; both must have full row rank. `G` (`p × m`)
/// and `H` (`r × m`) carry the dependence on the leader variable.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PolyhedronSpec {
    #[serde(with = "serde_support::mat")]
    pub a: DMatrix<f64>,
    #[serde(with = "serde_support::vec")]
    pub b: DVector<f64>,
    #[serde(with = "serde_support::mat")]
    pub g: DMatrix<f64>,
    #[serde(with = "serde_support::mat")]
    pub c: DMatrix<f64>,
    #[serde(with = "serde_support::vec")]
    pub d: DVector<f64>,
    #[serde(with = "serde_support::mat")]
    pub h: DMatrix<f64>,
}

impl PolyhedronSpec {
    /// Unconstrained set in `n` dimensions (`p = r = 0`).
    pub fn free(n: usize, m: usize) -> Self {
        Self {
            a: DMatrix::zeros(0, n),
            b: DVector::zeros(0),
            g: DMatrix::zeros(0, m),
            c: DMatrix::zeros(0, n),
            d: DVector::zeros(0),
            h: DMatrix::zeros(0, m),
        }
    }

    /// Box `lo ≤ z ≤ hi` with no dependence on `x`.
    pub fn fixed_box(lo: &DVector<f64>, hi: &DVector<f64>, m: usize) -> Self {
        let n = lo.len();
        assert_eq!(hi.len(), n);
        let mut a = DMatrix::zeros(2 * n, n);
        let mut b = DVector::zeros(2 * n);
        for i in 0..n {
            a[(i, i)] = 1.0;
            b[i] = hi[i];
            a[(n + i, i)] = -1.0;
            b[n + i] = -lo[i];
        }
        Self {
            a,
            b,
            g: DMatrix::zeros(2 * n, m),
            c: DMatrix::zeros(0, n),
            d: DVector::zeros(0),
            h: DMatrix::zeros(0, m),
        }
    }

    /// Equality-only set `C z = d + H x`.
    pub fn equality(c: DMatrix<f64>, d: DVector<f64>, h: DMatrix<f64>, m: usize) -> Self {
        let n = c.ncols();
        Self {
            a: DMatrix::zeros(0, n),
            b: DVector::zeros(0),
            g: DMatrix::zeros(0, m),
            c,
            d,
            h,
        }
    }

    pub fn n(&self) -> usize {
        self.a.ncols().max(self.c.ncols())
    }

    pub fn n_ineq(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_eq(&self) -> usize {
        self.c.nrows()
    }

    pub fn is_equality_only(&self) -> bool {
        self.n_ineq() == 0
    }

    /// Right-hand sides at a given leader point: (b + Gx, d + Hx).
    pub fn rhs(&self, x: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let bi = if self.n_ineq() > 0 { &self.b + &self.g * x } else { DVector::zeros(0) };
        let di = if self.n_eq() > 0 { &self.d + &self.h * x } else { DVector::zeros(0) };
        (bi, di)
    }

    /// Re-shapes zero-row matrices that lost their column counts in JSON.
    pub(crate) fn normalize(&mut self, n: usize, m: usize) {
        if self.a.nrows() == 0 {
            self.a = DMatrix::zeros(0, n);
        }
        if self.g.nrows() == 0 {
            self.g = DMatrix::zeros(0, m);
        }
        if self.c.nrows() == 0 {
            self.c = DMatrix::zeros(0, n);
        }
        if self.h.nrows() == 0 {
            self.h = DMatrix::zeros(0, m);
        }
    }

    /// Dimension and rank checks (rank tolerance 1e-10 · σ_max).
    pub fn check(&self, agent: usize, n: usize, m: usize) -> Result<()> {
        let p = self.n_ineq();
        let r = self.n_eq();
        if self.a.ncols() != n || self.c.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "agent {agent}: constraint matrices expect n = {n}, got A: {}x{}, C: {}x{}",
                self.a.nrows(),
                self.a.ncols(),
                self.c.nrows(),
                self.c.ncols()
            )));
        }
        if self.b.len() != p || self.g.nrows() != p || self.g.ncols() != m {
            return Err(Error::DimensionMismatch(format!(
                "agent {agent}: inequality data inconsistent (p = {p}, m = {m})"
            )));
        }
        if self.d.len() != r || self.h.nrows() != r || self.h.ncols() != m {
            return Err(Error::DimensionMismatch(format!(
                "agent {agent}: equality data inconsistent (r = {r}, m = {m})"
            )));
        }
        // Boxes and other two-sided descriptions put more rows than columns
        // into A, so the rank requirement there is min(p, n); the equality
        // matrix must have full row rank outright.
        if p > 0 && linalg::rank(&self.a, 1e-10) < p.min(n) {
            return Err(Error::RankDeficientConstraint { agent, which: "A" });
        }
        if r > 0 && (r > n || linalg::rank(&self.c, 1e-10) < r) {
            return Err(Error::RankDeficientConstraint { agent, which: "C" });
        }
        Ok(())
    }
}
