//! Follower and leader cost descriptions.
//!
//! Follower costs are quadratic with coefficients affine in the leader
//! variable:
//!
//! ```text
//! f_i(x, y) = ½ y_iᵀ Q_i(x) y_i + ( Σ_{j≠i} E_ij(x) y_j + E_i0 x + e_i )ᵀ y_i
//! Q_i(x)  = Q_i  + Σ_k x_k Q_{i,k}          (all symmetric)
//! E_ij(x) = E_ij + Σ_k x_k E_{ij,k}
//! ```
//!
//! With all x-linear parts empty this is the plain linear-quadratic game and
//! the pseudo-gradient is affine in (x, y). The x-linear parts cover
//! price-anticipating followers whose quadratic coefficients are set by the
//! leader (the demand-response builder emits them).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::model::serde_support;

/// A matrix-valued coefficient affine in the leader variable.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct XAffineMat {
    #[serde(with = "serde_support::mat")]
    pub mat: DMatrix<f64>,
    /// Sparse x-linear parts: (leader coordinate k, matrix).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mat_x: Vec<XLinearPart>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct XLinearPart {
    pub k: usize,
    #[serde(with = "serde_support::mat")]
    pub mat: DMatrix<f64>,
}

impl XAffineMat {
    pub fn constant(mat: DMatrix<f64>) -> Self {
        Self { mat, mat_x: Vec::new() }
    }

    pub fn is_const(&self) -> bool {
        self.mat_x.is_empty()
    }

    pub fn nrows(&self) -> usize {
        self.mat.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.mat.ncols()
    }

    pub fn eval(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut out = self.mat.clone();
        for part in &self.mat_x {
            out += &part.mat * x[part.k];
        }
        out
    }

    /// out += A(x) · v
    pub fn accum_mul(&self, x: &DVector<f64>, v: &nalgebra::DVectorView<f64>, out: &mut DVector<f64>) {
        *out += &self.mat * v;
        for part in &self.mat_x {
            *out += (&part.mat * v) * x[part.k];
        }
    }

    pub fn shape_ok(&self, nrows: usize, ncols: usize, m: usize) -> bool {
        self.mat.nrows() == nrows
            && self.mat.ncols() == ncols
            && self
                .mat_x
                .iter()
                .all(|p| p.k < m && p.mat.nrows() == nrows && p.mat.ncols() == ncols)
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        let sym = |m: &DMatrix<f64>| (m - m.transpose()).norm() <= tol;
        sym(&self.mat) && self.mat_x.iter().all(|p| sym(&p.mat))
    }
}

/// One follower's quadratic cost data.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct QuadCostSpec {
    /// Own quadratic block Q_i(x), n_i × n_i, symmetric positive definite.
    pub q: XAffineMat,
    /// Interaction blocks E_ij(x) for j ≠ i.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub coupling: Vec<CouplingBlock>,
    /// E_i0: n_i × m.
    #[serde(with = "serde_support::mat")]
    pub param: DMatrix<f64>,
    /// e_i.
    #[serde(with = "serde_support::vec")]
    pub lin: DVector<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CouplingBlock {
    /// Index j of the other follower.
    pub other: usize,
    pub block: XAffineMat,
}

impl QuadCostSpec {
    /// Constant-coefficient cost (plain linear-quadratic game).
    pub fn lq(q: DMatrix<f64>, param: DMatrix<f64>, lin: DVector<f64>) -> Self {
        Self {
            q: XAffineMat::constant(q),
            coupling: Vec::new(),
            param,
            lin,
        }
    }

    pub fn with_coupling(mut self, other: usize, block: DMatrix<f64>) -> Self {
        self.coupling.push(CouplingBlock {
            other,
            block: XAffineMat::constant(block),
        });
        self
    }

    pub fn n(&self) -> usize {
        self.q.nrows()
    }

    /// True when the pseudo-gradient contribution is affine in (x, y).
    pub fn is_affine_pg(&self) -> bool {
        self.q.is_const() && self.coupling.iter().all(|c| c.block.is_const())
    }
}

/// Leader objective. Either a quadratic-plus-bilinear form in (x, y) or the
/// aggregative analogue in (x, σ(y)) with σ = Σ K_i y_i; the aggregative
/// quadratic coefficient may be affine in x (the demand-response revenue
/// −(C₁p̄ + c₀)ᵀp̄ needs exactly that).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum LeaderCost {
    /// φ = ½ xᵀR x + xᵀS y + ½ yᵀP y + r_xᵀ x + r_yᵀ y + c
    QuadXy {
        #[serde(with = "serde_support::mat")]
        rxx: DMatrix<f64>,
        #[serde(with = "serde_support::mat")]
        sxy: DMatrix<f64>,
        #[serde(with = "serde_support::mat")]
        pyy: DMatrix<f64>,
        #[serde(with = "serde_support::vec")]
        rx: DVector<f64>,
        #[serde(with = "serde_support::vec")]
        ry: DVector<f64>,
        c: f64,
    },
    /// φ = ½ xᵀR x + xᵀS σ + ½ σᵀP(x) σ + r_xᵀ x + r_σᵀ σ + c
    QuadAggregate {
        #[serde(with = "serde_support::mat")]
        rxx: DMatrix<f64>,
        #[serde(with = "serde_support::mat")]
        sxs: DMatrix<f64>,
        pss: XAffineMat,
        #[serde(with = "serde_support::vec")]
        rx: DVector<f64>,
        #[serde(with = "serde_support::vec")]
        rs: DVector<f64>,
        c: f64,
    },
}

impl LeaderCost {
    /// Pure-bilinear leader cost φ = r_yᵀ y (no quadratic terms).
    pub fn linear_in_y(m: usize, ry: DVector<f64>) -> Self {
        let n = ry.len();
        LeaderCost::QuadXy {
            rxx: DMatrix::zeros(m, m),
            sxy: DMatrix::zeros(m, n),
            pyy: DMatrix::zeros(n, n),
            rx: DVector::zeros(m),
            ry,
            c: 0.0,
        }
    }

    pub fn is_aggregative(&self) -> bool {
        matches!(self, LeaderCost::QuadAggregate { .. })
    }
}

/// Leader strategy set descriptors with cheap exact projections.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum LeaderSet {
    Box {
        #[serde(with = "serde_support::vec")]
        lo: DVector<f64>,
        #[serde(with = "serde_support::vec")]
        hi: DVector<f64>,
    },
    Ball {
        #[serde(with = "serde_support::vec")]
        center: DVector<f64>,
        radius: f64,
    },
    /// Unit simplex { v ≥ 0, 1ᵀv = 1 } in `dim` coordinates.
    Simplex { dim: usize },
    /// Box with an additional cap on the coordinate sum: { lo ≤ v ≤ hi, 1ᵀv ≤ cap }.
    SumCappedBox {
        #[serde(with = "serde_support::vec")]
        lo: DVector<f64>,
        #[serde(with = "serde_support::vec")]
        hi: DVector<f64>,
        cap: f64,
    },
    Product(Vec<LeaderSet>),
}

impl LeaderSet {
    pub fn dim(&self) -> usize {
        match self {
            LeaderSet::Box { lo, .. } => lo.len(),
            LeaderSet::Ball { center, .. } => center.len(),
            LeaderSet::Simplex { dim } => *dim,
            LeaderSet::SumCappedBox { lo, .. } => lo.len(),
            LeaderSet::Product(parts) => parts.iter().map(|p| p.dim()).sum(),
        }
    }

    /// Validity: nonempty, convex, compact with finite description.
    pub fn check(&self) -> Result<(), String> {
        match self {
            LeaderSet::Box { lo, hi } => {
                if lo.len() != hi.len() {
                    return Err("box bounds length mismatch".into());
                }
                for i in 0..lo.len() {
                    if !lo[i].is_finite() || !hi[i].is_finite() || lo[i] > hi[i] {
                        return Err(format!("box bounds invalid at coordinate {i}"));
                    }
                }
                Ok(())
            }
            LeaderSet::Ball { center, radius } => {
                if !radius.is_finite() || *radius <= 0.0 || !center.iter().all(|c| c.is_finite()) {
                    return Err("ball requires finite center and radius > 0".into());
                }
                Ok(())
            }
            LeaderSet::Simplex { dim } => {
                if *dim == 0 {
                    return Err("simplex dimension must be positive".into());
                }
                Ok(())
            }
            LeaderSet::SumCappedBox { lo, hi, cap } => {
                LeaderSet::Box {
                    lo: lo.clone(),
                    hi: hi.clone(),
                }
                .check()?;
                if !cap.is_finite() || lo.sum() > *cap {
                    return Err("sum cap excludes the whole box".into());
                }
                Ok(())
            }
            LeaderSet::Product(parts) => {
                if parts.is_empty() {
                    return Err("empty product set".into());
                }
                parts.iter().try_for_each(|p| p.check())
            }
        }
    }
}
