//! Bilevel game instances: follower costs, parametric feasible sets, the
//! leader objective, and the pseudo-gradient with its exact partial Jacobians.
//!
//! The lower level is a game among N followers; follower i minimizes
//! `f_i(x, y_i, y_-i)` over `y_i ∈ Y_i(x)`. Stacking the partial gradients
//! `∇_{y_i} f_i` gives the pseudo-gradient `F(x, y)`, whose strong-monotonicity
//! modulus μ and Lipschitz constant L_F drive every step size and error bound
//! downstream.

mod cost;
mod poly;
pub(crate) mod serde_support;

pub use cost::{CouplingBlock, LeaderCost, LeaderSet, QuadCostSpec, XAffineMat, XLinearPart};
pub use poly::PolyhedronSpec;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Smooth definable pseudo-gradient; double loop with warmstart and the
    /// a-priori inner termination surrogate.
    General,
    /// Affine pseudo-gradient, polyhedral constraints; double loop with the
    /// a-posteriori termination test and the conditional Jacobian update.
    Lqg,
    /// Affine pseudo-gradient, equality-only constraints; single-loop with a
    /// constant projection Jacobian.
    Lqsg,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::General => write!(f, "general"),
            Variant::Lqg => write!(f, "lqg"),
            Variant::Lqsg => write!(f, "lqsg"),
        }
    }
}

/// Strong-monotonicity / Lipschitz constants supplied by the user when the
/// pseudo-gradient is not affine (global constants are then not computable).
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct PgConstants {
    pub mu: f64,
    pub l_f: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FollowerSpec {
    pub cost: QuadCostSpec,
    pub poly: PolyhedronSpec,
}

fn default_schema() -> u32 {
    1
}

/// A full bilevel instance.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GameSpec {
    #[serde(default = "default_schema")]
    pub schema: u32,
    /// Leader dimension.
    pub m: usize,
    pub variant: Variant,
    pub followers: Vec<FollowerSpec>,
    pub leader_cost: LeaderCost,
    pub leader_set: LeaderSet,
    /// Aggregation matrices K_i (n̄ × n_i); present for aggregative games.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregation: Option<Vec<AggregationMat>>,
    /// Required when the pseudo-gradient has x-dependent coefficients.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pg_constants: Option<PgConstants>,
    /// Optional override of the projected-pseudo-gradient step γ.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AggregationMat(#[serde(with = "serde_support::mat")] pub DMatrix<f64>);

/// Block layout of the stacked follower variable.
#[derive(Debug, Clone)]
pub struct Dims {
    pub sizes: Vec<usize>,
    pub offsets: Vec<usize>,
    pub n: usize,
    pub m: usize,
}

impl Dims {
    pub fn n_agents(&self) -> usize {
        self.sizes.len()
    }

    pub fn block<'a>(&self, y: &'a DVector<f64>, i: usize) -> nalgebra::DVectorView<'a, f64> {
        y.rows(self.offsets[i], self.sizes[i])
    }
}

/// Step-size and contraction constants of the projected pseudo-gradient map.
///
/// For γ < 2μ/L_F² the map is a contraction with constant
/// η = √(1 − γ(2μ − γL_F²)) < 1.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Constants {
    pub mu: f64,
    pub l_f: f64,
    pub gamma: f64,
    pub eta: f64,
}

impl Constants {
    /// Default step γ = 0.9·μ/L_F², half-way into the contraction window.
    pub fn from_moduli(mu: f64, l_f: f64) -> Result<Self> {
        let gamma = 0.9 * mu / (l_f * l_f);
        Self::with_gamma(mu, l_f, gamma)
    }

    pub fn with_gamma(mu: f64, l_f: f64, gamma: f64) -> Result<Self> {
        if !(mu > 0.0 && l_f > 0.0 && mu.is_finite() && l_f.is_finite()) {
            return Err(Error::NotStronglyMonotone { mu });
        }
        if !(gamma > 0.0 && gamma < 2.0 * mu / (l_f * l_f)) {
            return Err(Error::ConfigInvalid(format!(
                "gamma = {gamma:.6e} outside the contraction window (0, {:.6e})",
                2.0 * mu / (l_f * l_f)
            )));
        }
        let eta = Self::eta_for(mu, l_f, gamma);
        if !(eta < 1.0) {
            return Err(Error::ConfigInvalid(format!(
                "contraction constant eta = {eta} not below 1"
            )));
        }
        Ok(Self { mu, l_f, gamma, eta })
    }

    pub fn eta_for(mu: f64, l_f: f64, gamma: f64) -> f64 {
        (1.0 - gamma * (2.0 * mu - gamma * l_f * l_f)).max(0.0).sqrt()
    }
}

/// Output of [`GameSpec::validate`].
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub n_agents: usize,
    pub n: usize,
    pub m: usize,
    pub mu: f64,
    pub l_f: f64,
    pub constants: Constants,
    /// True when the pseudo-gradient is affine in (x, y); required to hold
    /// exactly for the theory behind the LQG/LQSG inner loops, reported (not
    /// fatal) when the LQG policy is applied to an x-dependent instance.
    pub pg_affine: bool,
    /// μ and L_F came from user-supplied constants spot-checked by sampling.
    pub moduli_from_hint: bool,
    /// Aggregation structure present and consistent with the coupling blocks.
    pub aggregative: bool,
}

impl GameSpec {
    pub fn n_agents(&self) -> usize {
        self.followers.len()
    }

    pub fn dims(&self) -> Dims {
        let sizes: Vec<usize> = self.followers.iter().map(|f| f.cost.n()).collect();
        let mut offsets = Vec::with_capacity(sizes.len());
        let mut acc = 0;
        for &s in &sizes {
            offsets.push(acc);
            acc += s;
        }
        Dims {
            sizes,
            offsets,
            n: acc,
            m: self.m,
        }
    }

    /// Fix up zero-row matrix shapes after JSON deserialization.
    pub fn normalize(&mut self) {
        let m = self.m;
        for f in &mut self.followers {
            let n_i = f.cost.n();
            f.poly.normalize(n_i, m);
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut spec: GameSpec = serde_json::from_str(text)
            .map_err(|e| Error::ConfigInvalid(format!("GameSpec JSON: {e}")))?;
        spec.normalize();
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("GameSpec serialization cannot fail")
    }

    pub fn is_affine_pg(&self) -> bool {
        self.followers.iter().all(|f| f.cost.is_affine_pg())
    }

    fn check_dims(&self) -> Result<Dims> {
        let dims = self.dims();
        if self.followers.is_empty() {
            return Err(Error::ConfigInvalid("no followers".into()));
        }
        if self.leader_set.dim() != self.m {
            return Err(Error::DimensionMismatch(format!(
                "leader set dimension {} != m = {}",
                self.leader_set.dim(),
                self.m
            )));
        }
        for (i, f) in self.followers.iter().enumerate() {
            let n_i = dims.sizes[i];
            if !f.cost.q.shape_ok(n_i, n_i, self.m) {
                return Err(Error::DimensionMismatch(format!("agent {i}: Q shape")));
            }
            if f.cost.param.nrows() != n_i || f.cost.param.ncols() != self.m {
                return Err(Error::DimensionMismatch(format!("agent {i}: E_i0 shape")));
            }
            if f.cost.lin.len() != n_i {
                return Err(Error::DimensionMismatch(format!("agent {i}: e_i length")));
            }
            for cb in &f.cost.coupling {
                if cb.other == i || cb.other >= dims.n_agents() {
                    return Err(Error::ConfigInvalid(format!(
                        "agent {i}: coupling index {} invalid",
                        cb.other
                    )));
                }
                if !cb.block.shape_ok(n_i, dims.sizes[cb.other], self.m) {
                    return Err(Error::DimensionMismatch(format!(
                        "agent {i}: E_i{} shape",
                        cb.other
                    )));
                }
            }
            f.poly.check(i, n_i, self.m)?;
        }
        if let Some(ks) = &self.aggregation {
            if ks.len() != dims.n_agents() {
                return Err(Error::DimensionMismatch("aggregation: one K_i per agent".into()));
            }
            let n_bar = ks[0].0.nrows();
            for (i, k) in ks.iter().enumerate() {
                if k.0.nrows() != n_bar || k.0.ncols() != dims.sizes[i] {
                    return Err(Error::DimensionMismatch(format!("aggregation: K_{i} shape")));
                }
            }
        }
        if self.leader_cost.is_aggregative() && self.aggregation.is_none() {
            return Err(Error::ConfigInvalid(
                "aggregative leader cost requires aggregation matrices".into(),
            ));
        }
        Ok(dims)
    }

    /// Validate the instance and compute the pseudo-gradient moduli.
    ///
    /// Fails with `NotStronglyMonotone` when μ ≤ 1e-12, and with
    /// `RankDeficientConstraint`/`DimensionMismatch` on structural defects.
    pub fn validate(&self) -> Result<ValidationReport> {
        let dims = self.check_dims()?;

        for (i, f) in self.followers.iter().enumerate() {
            if !f.cost.q.is_symmetric(1e-12 * (1.0 + f.cost.q.mat.norm())) {
                return Err(Error::ConfigInvalid(format!("agent {i}: Q not symmetric")));
            }
        }
        if self.variant == Variant::Lqsg {
            for (i, f) in self.followers.iter().enumerate() {
                if !f.poly.is_equality_only() {
                    return Err(Error::ConfigInvalid(format!(
                        "lqsg variant requires equality-only constraints (agent {i} has p = {})",
                        f.poly.n_ineq()
                    )));
                }
            }
        }
        self.leader_set.check().map_err(Error::ConfigInvalid)?;

        let pg_affine = self.is_affine_pg();
        let (mu, l_f, from_hint) = if pg_affine {
            let mat = self.assemble_pg_matrix(None);
            (linalg::sym_min_eig(&mat), linalg::spectral_norm(&mat), false)
        } else {
            let hint = self.pg_constants.ok_or_else(|| {
                Error::ConfigInvalid(
                    "x-dependent pseudo-gradient requires pg_constants (mu, l_f)".into(),
                )
            })?;
            self.spot_check_moduli(&dims, hint)?;
            (hint.mu, hint.l_f, true)
        };
        if mu <= 1e-12 {
            return Err(Error::NotStronglyMonotone { mu });
        }

        let constants = match self.gamma {
            Some(g) => Constants::with_gamma(mu, l_f, g)?,
            None => Constants::from_moduli(mu, l_f)?,
        };

        let aggregative = if self.aggregation.is_some() {
            self.aggregative_coupling()?;
            true
        } else {
            false
        };

        Ok(ValidationReport {
            n_agents: dims.n_agents(),
            n: dims.n,
            m: dims.m,
            mu,
            l_f,
            constants,
            pg_affine,
            moduli_from_hint: from_hint,
            aggregative,
        })
    }

    /// Sampled monotonicity/Lipschitz check of user-supplied moduli.
    fn spot_check_moduli(&self, dims: &Dims, hint: PgConstants) -> Result<()> {
        if !(hint.mu > 0.0 && hint.l_f >= hint.mu) {
            return Err(Error::ConfigInvalid("pg_constants must satisfy 0 < mu <= l_f".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0xb1_90_77);
        for _ in 0..16 {
            let raw = DVector::from_fn(self.m, |_, _| rng.gen_range(-1.0..1.0) * 10.0);
            let x = crate::polyproj::project_leader_set(&self.leader_set, &raw);
            for _ in 0..8 {
                let y1 = DVector::from_fn(dims.n, |_, _| rng.gen_range(-1.0..1.0) * 5.0);
                let y2 = DVector::from_fn(dims.n, |_, _| rng.gen_range(-1.0..1.0) * 5.0);
                let delta = &y1 - &y2;
                let norm2 = delta.norm_squared();
                if norm2 < 1e-16 {
                    continue;
                }
                let df = self.pseudo_gradient(&x, &y1)? - self.pseudo_gradient(&x, &y2)?;
                let inner = df.dot(&delta);
                if inner < (hint.mu - 1e-7 * (1.0 + hint.mu)) * norm2 {
                    return Err(Error::NotStronglyMonotone {
                        mu: inner / norm2,
                    });
                }
                if df.norm() > (hint.l_f + 1e-7 * (1.0 + hint.l_f)) * norm2.sqrt() {
                    return Err(Error::ConfigInvalid(format!(
                        "supplied l_f = {} violated: observed ratio {}",
                        hint.l_f,
                        df.norm() / norm2.sqrt()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Pseudo-gradient block F_i(x, y). No dimension checks; hot path.
    pub(crate) fn pg_block(&self, i: usize, dims: &Dims, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        let f = &self.followers[i];
        let mut out = &f.cost.param * x + &f.cost.lin;
        f.cost.q.accum_mul(x, &dims.block(y, i), &mut out);
        for cb in &f.cost.coupling {
            cb.block.accum_mul(x, &dims.block(y, cb.other), &mut out);
        }
        out
    }

    /// Stacked pseudo-gradient F(x, y) = (∇_{y_i} f_i(x, y))_i.
    pub fn pseudo_gradient(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
        let dims = self.dims();
        self.check_xy(&dims, x, y)?;
        let mut out = DVector::zeros(dims.n);
        for i in 0..dims.n_agents() {
            out.rows_mut(dims.offsets[i], dims.sizes[i])
                .copy_from(&self.pg_block(i, &dims, x, y));
        }
        Ok(out)
    }

    fn check_xy(&self, dims: &Dims, x: &DVector<f64>, y: &DVector<f64>) -> Result<()> {
        if x.len() != dims.m {
            return Err(Error::DimensionMismatch(format!(
                "x has length {}, expected m = {}",
                x.len(),
                dims.m
            )));
        }
        if y.len() != dims.n {
            return Err(Error::DimensionMismatch(format!(
                "y has length {}, expected n = {}",
                y.len(),
                dims.n
            )));
        }
        Ok(())
    }

    /// Per-agent partial Jacobians (J₁F_i: n_i × m, J₂F_i: n_i × n), exact.
    pub(crate) fn pg_jac_block(
        &self,
        i: usize,
        dims: &Dims,
        x: &DVector<f64>,
        y: &DVector<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let f = &self.followers[i];
        let n_i = dims.sizes[i];

        let mut j2 = DMatrix::zeros(n_i, dims.n);
        j2.view_mut((0, dims.offsets[i]), (n_i, n_i))
            .copy_from(&f.cost.q.eval(x));
        for cb in &f.cost.coupling {
            j2.view_mut((0, dims.offsets[cb.other]), (n_i, dims.sizes[cb.other]))
                .copy_from(&cb.block.eval(x));
        }

        let mut j1 = f.cost.param.clone();
        for part in &f.cost.q.mat_x {
            let col = &part.mat * dims.block(y, i);
            j1.column_mut(part.k).iter_mut().zip(col.iter()).for_each(|(a, b)| *a += *b);
        }
        for cb in &f.cost.coupling {
            for part in &cb.block.mat_x {
                let col = &part.mat * dims.block(y, cb.other);
                j1.column_mut(part.k).iter_mut().zip(col.iter()).for_each(|(a, b)| *a += *b);
            }
        }
        (j1, j2)
    }

    /// Stacked partial Jacobians (J₁F: n × m, J₂F: n × n), exact (no
    /// finite differencing). Constant in (x, y) for affine pseudo-gradients.
    pub fn pg_jacobians(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let dims = self.dims();
        self.check_xy(&dims, x, y)?;
        let mut j1 = DMatrix::zeros(dims.n, dims.m);
        let mut j2 = DMatrix::zeros(dims.n, dims.n);
        for i in 0..dims.n_agents() {
            let (j1i, j2i) = self.pg_jac_block(i, &dims, x, y);
            j1.view_mut((dims.offsets[i], 0), (dims.sizes[i], dims.m)).copy_from(&j1i);
            j2.view_mut((dims.offsets[i], 0), (dims.sizes[i], dims.n)).copy_from(&j2i);
        }
        Ok((j1, j2))
    }

    /// Assembled pseudo-gradient matrix M(x) (block row i: [E_i1 … Q_i … E_iN]).
    /// With `x = None` only the constant parts are used (exact for affine PG).
    pub fn assemble_pg_matrix(&self, x: Option<&DVector<f64>>) -> DMatrix<f64> {
        let dims = self.dims();
        let zero;
        let x = match x {
            Some(x) => x,
            None => {
                zero = DVector::zeros(dims.m);
                &zero
            }
        };
        let mut mat = DMatrix::zeros(dims.n, dims.n);
        for i in 0..dims.n_agents() {
            let f = &self.followers[i];
            let n_i = dims.sizes[i];
            mat.view_mut((dims.offsets[i], dims.offsets[i]), (n_i, n_i))
                .copy_from(&f.cost.q.eval(x));
            for cb in &f.cost.coupling {
                mat.view_mut(
                    (dims.offsets[i], dims.offsets[cb.other]),
                    (n_i, dims.sizes[cb.other]),
                )
                .copy_from(&cb.block.eval(x));
            }
        }
        mat
    }

    /// Aggregate σ(y) = Σ K_i y_i.
    pub fn aggregate(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        let ks = self
            .aggregation
            .as_ref()
            .ok_or_else(|| Error::ConfigInvalid("instance has no aggregation matrices".into()))?;
        let dims = self.dims();
        let n_bar = ks[0].0.nrows();
        let mut sigma = DVector::zeros(n_bar);
        for i in 0..dims.n_agents() {
            sigma += &ks[i].0 * dims.block(y, i);
        }
        Ok(sigma)
    }

    /// Leader objective φ(x, y).
    pub fn leader_cost(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
        let dims = self.dims();
        self.check_xy(&dims, x, y)?;
        match &self.leader_cost {
            LeaderCost::QuadXy { rxx, sxy, pyy, rx, ry, c } => {
                Ok(0.5 * x.dot(&(rxx * x))
                    + x.dot(&(sxy * y))
                    + 0.5 * y.dot(&(pyy * y))
                    + rx.dot(x)
                    + ry.dot(y)
                    + c)
            }
            LeaderCost::QuadAggregate { rxx, sxs, pss, rx, rs, c } => {
                let sigma = self.aggregate(y)?;
                let p = pss.eval(x);
                Ok(0.5 * x.dot(&(rxx * x))
                    + x.dot(&(sxs * &sigma))
                    + 0.5 * sigma.dot(&(&p * &sigma))
                    + rx.dot(x)
                    + rs.dot(&sigma)
                    + c)
            }
        }
    }

    /// Exact partial gradients (∇₁φ: m, ∇₂φ: n) of the leader objective.
    /// For the aggregative form ∇₂φ = Kᵀ∇_σφ by the chain rule.
    pub fn leader_cost_grads(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let dims = self.dims();
        self.check_xy(&dims, x, y)?;
        match &self.leader_cost {
            LeaderCost::QuadXy { rxx, sxy, pyy, rx, ry, .. } => {
                let g1 = rxx * x + sxy * y + rx;
                let g2 = pyy * y + sxy.transpose() * x + ry;
                Ok((g1, g2))
            }
            LeaderCost::QuadAggregate { .. } => {
                let sigma = self.aggregate(y)?;
                let (g1, gs) = self.leader_cost_grads_sigma(x, &sigma)?;
                let ks = self.aggregation.as_ref().unwrap();
                let mut g2 = DVector::zeros(dims.n);
                for i in 0..dims.n_agents() {
                    g2.rows_mut(dims.offsets[i], dims.sizes[i])
                        .copy_from(&(ks[i].0.transpose() * &gs));
                }
                Ok((g1, g2))
            }
        }
    }

    /// (∇₁φ, ∇_σφ) of the aggregative leader cost at (x, σ).
    pub fn leader_cost_grads_sigma(
        &self,
        x: &DVector<f64>,
        sigma: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        match &self.leader_cost {
            LeaderCost::QuadAggregate { rxx, sxs, pss, rx, rs, .. } => {
                let mut g1 = rxx * x + sxs * sigma + rx;
                for part in &pss.mat_x {
                    g1[part.k] += 0.5 * sigma.dot(&(&part.mat * sigma));
                }
                let gs = pss.eval(x) * sigma + sxs.transpose() * x + rs;
                Ok((g1, gs))
            }
            LeaderCost::QuadXy { .. } => Err(Error::ConfigInvalid(
                "leader cost is not aggregative".into(),
            )),
        }
    }

    /// Recover the aggregative coupling maps D_i(x) with E_ij(x) = D_i(x) K_j
    /// for all j ≠ i. Errors when the coupling blocks are inconsistent with
    /// the aggregation structure.
    pub fn aggregative_coupling(&self) -> Result<Vec<XAffineMat>> {
        let ks = self
            .aggregation
            .as_ref()
            .ok_or_else(|| Error::ConfigInvalid("instance has no aggregation matrices".into()))?;
        let dims = self.dims();
        let n_bar = ks[0].0.nrows();
        let mut out = Vec::with_capacity(dims.n_agents());
        for i in 0..dims.n_agents() {
            let f = &self.followers[i];
            let n_i = dims.sizes[i];
            let others: Vec<usize> = (0..dims.n_agents()).filter(|&j| j != i).collect();
            if others.is_empty() {
                out.push(XAffineMat::constant(DMatrix::zeros(n_i, n_bar)));
                continue;
            }
            let total: usize = others.iter().map(|&j| dims.sizes[j]).sum();
            // K_cat: n̄ × Σ n_j,   E_cat: n_i × Σ n_j
            let mut k_cat = DMatrix::zeros(n_bar, total);
            let mut col = 0;
            let mut col_of = vec![0usize; dims.n_agents()];
            for &j in &others {
                k_cat.view_mut((0, col), (n_bar, dims.sizes[j])).copy_from(&ks[j].0);
                col_of[j] = col;
                col += dims.sizes[j];
            }
            let fill_e = |select: &dyn Fn(&XAffineMat) -> Option<&DMatrix<f64>>| {
                let mut e_cat = DMatrix::zeros(n_i, total);
                for cb in &f.cost.coupling {
                    if let Some(mat) = select(&cb.block) {
                        e_cat
                            .view_mut((0, col_of[cb.other]), (n_i, dims.sizes[cb.other]))
                            .copy_from(mat);
                    }
                }
                e_cat
            };
            let solve_d = |e_cat: &DMatrix<f64>| -> Result<DMatrix<f64>> {
                // D Kcat = Ecat  ⇔  Kcatᵀ Dᵀ = Ecatᵀ
                let dt = linalg::lstsq(&k_cat.transpose(), &e_cat.transpose(), 1e-12)
                    .ok_or(Error::SingularSystem { context: "aggregative coupling", agent: i })?;
                let d = dt.transpose();
                let resid = (&d * &k_cat - e_cat).norm();
                if resid > 1e-8 * (1.0 + e_cat.norm()) {
                    return Err(Error::ConfigInvalid(format!(
                        "agent {i}: coupling blocks inconsistent with aggregation (residual {resid:.3e})"
                    )));
                }
                Ok(d)
            };

            let d0 = solve_d(&fill_e(&|b| Some(&b.mat)))?;
            let mut xs: Vec<usize> = f
                .cost
                .coupling
                .iter()
                .flat_map(|cb| cb.block.mat_x.iter().map(|p| p.k))
                .collect();
            xs.sort_unstable();
            xs.dedup();
            let mut mat_x = Vec::with_capacity(xs.len());
            for k in xs {
                let e_k = fill_e(&|b| b.mat_x.iter().find(|p| p.k == k).map(|p| &p.mat));
                mat_x.push(XLinearPart { k, mat: solve_d(&e_k)? });
            }
            out.push(XAffineMat { mat: d0, mat_x });
        }
        Ok(out)
    }
}

/// Deterministic in-set sampler used by tests and the check command.
pub fn sample_leader_point(set: &LeaderSet, rng: &mut ChaCha8Rng, scale: f64) -> DVector<f64> {
    let raw = DVector::from_fn(set.dim(), |_, _| rng.gen_range(-1.0..1.0) * scale);
    crate::polyproj::project_leader_set(set, &raw)
}

#[cfg(test)]
mod tests;
