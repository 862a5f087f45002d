//! Online learning of the equilibrium sensitivity J y*(x).
//!
//! Differentiating the projected pseudo-gradient map h through the projection
//! gives per-agent blocks
//!
//! ```text
//! S1_i = J₁g_i(x, ω_i) − γ · J₂g_i(x, ω_i) · J₁F_i(x, y)
//! S2_i = J₂g_i(x, ω_i) · (P_i − γ · J₂F_i(x, y)),     ω_i = y_i − γF_i(x, y)
//! ```
//!
//! (P_i selects agent i's rows). The Jacobi recursion s_i ← S2_i·s + S1_i then
//! converges to J y*(x) at the same rate η as the equilibrium sweep; at
//! nondifferentiable points the blocks are generalized-Jacobian selections and
//! the recursion still contracts to ψ = (I − S2)⁻¹S1. Matrix step norms are
//! Frobenius throughout, which keeps every 1/(1−η) bound valid since ‖S2‖₂ ≤ η.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::equilibrium::GameContext;
use crate::error::{Error, Result};
use crate::linalg;
use crate::polyproj::ProjectionResult;

/// Stacked sensitivity iterate with the conditional-update caches.
#[derive(Debug, Clone)]
pub struct SensitivityState {
    /// Current estimate of J y*(x), n × m, stored as N row blocks.
    pub s: DMatrix<f64>,
    pub s_prev: DMatrix<f64>,
    /// Conditional-update latch: once set, the cached blocks are reused
    /// verbatim and the recursion is an exact linear contraction.
    pub frozen: bool,
    pub s1_cache: Option<DMatrix<f64>>,
    pub s2_cache: Option<Vec<DMatrix<f64>>>,
    /// Strictness of the cached selection; false means a least-squares
    /// generalized-Jacobian element was latched.
    pub cache_strict: bool,
    /// Number of block recomputations (KKT differentiations) performed.
    pub recompute_count: usize,
    /// Set when the latch froze on a non-strict selection.
    pub degenerate_freeze: bool,
}

impl SensitivityState {
    /// Default start s⁰ = 0 (bounded and variant-independent).
    pub fn zero(n: usize, m: usize) -> Self {
        Self::with_initial(DMatrix::zeros(n, m))
    }

    pub fn with_initial(s0: DMatrix<f64>) -> Self {
        Self {
            s_prev: s0.clone(),
            s: s0,
            frozen: false,
            s1_cache: None,
            s2_cache: None,
            cache_strict: true,
            recompute_count: 0,
            degenerate_freeze: false,
        }
    }

    /// Frobenius norm of the last sensitivity step.
    pub fn step_norm(&self) -> f64 {
        (&self.s - &self.s_prev).norm()
    }
}

/// Per-agent PPG Jacobian blocks (dense path).
#[derive(Debug, Clone)]
pub struct PpgBlocks {
    /// Stacked S1, n × m.
    pub s1: DMatrix<f64>,
    /// Per-agent S2_i row blocks, n_i × n.
    pub s2: Vec<DMatrix<f64>>,
    /// Strict complementarity held for every agent's projection.
    pub strict: bool,
}

fn agent_blocks(
    ctx: &GameContext,
    i: usize,
    x: &DVector<f64>,
    y: &DVector<f64>,
    res: &ProjectionResult,
) -> Result<(DMatrix<f64>, DMatrix<f64>, bool)> {
    let gamma = ctx.constants.gamma;
    let pj = ctx.projector(i).jacobians(x, res).map_err(|e| e.for_agent(i))?;
    let (j1f, j2f) = ctx.spec.pg_jac_block(i, &ctx.dims, x, y);
    let s1 = &pj.j_x - (&pj.j_y * &j1f) * gamma;
    // P_i − γ·J₂F_i
    let mut inner = -j2f * gamma;
    let n_i = ctx.dims.sizes[i];
    let off = ctx.dims.offsets[i];
    for k in 0..n_i {
        inner[(k, off + k)] += 1.0;
    }
    let s2 = &pj.j_y * inner;
    Ok((s1, s2, pj.strict_complementarity))
}

/// Blocks evaluated from already-computed projections of ω(x, y).
pub fn blocks_from_results(
    ctx: &GameContext,
    x: &DVector<f64>,
    y: &DVector<f64>,
    results: &[ProjectionResult],
) -> Result<PpgBlocks> {
    let per: Vec<(DMatrix<f64>, DMatrix<f64>, bool)> = (0..ctx.n_agents())
        .into_par_iter()
        .map(|i| agent_blocks(ctx, i, x, y, &results[i]))
        .collect::<Result<_>>()?;
    let mut s1 = DMatrix::zeros(ctx.dims.n, ctx.dims.m);
    let mut s2 = Vec::with_capacity(per.len());
    let mut strict = true;
    for (i, (s1i, s2i, st)) in per.into_iter().enumerate() {
        s1.view_mut((ctx.dims.offsets[i], 0), (ctx.dims.sizes[i], ctx.dims.m))
            .copy_from(&s1i);
        s2.push(s2i);
        strict &= st;
    }
    Ok(PpgBlocks { s1, s2, strict })
}

/// PPG Jacobian blocks at the freshest inner iterate (projects ω itself).
pub fn ppg_jacobian_blocks(ctx: &GameContext, x: &DVector<f64>, y: &DVector<f64>) -> Result<PpgBlocks> {
    let results = ctx.project_all(x, y, None)?;
    blocks_from_results(ctx, x, y, &results)
}

/// Jacobi sensitivity sweep: s_i ← S2_i·s + S1_i, all agents reading the same s.
pub fn sensitivity_step(ctx: &GameContext, state: &mut SensitivityState, s1: &DMatrix<f64>, s2: &[DMatrix<f64>]) {
    let dims = &ctx.dims;
    debug_assert_eq!(s2.len(), dims.n_agents());
    let s_old = state.s.clone();
    let new_blocks: Vec<DMatrix<f64>> = (0..dims.n_agents())
        .into_par_iter()
        .map(|i| {
            &s2[i] * &s_old
                + s1.view((dims.offsets[i], 0), (dims.sizes[i], dims.m))
        })
        .collect();
    let mut s_new = DMatrix::zeros(dims.n, dims.m);
    for (i, b) in new_blocks.into_iter().enumerate() {
        s_new.view_mut((dims.offsets[i], 0), (dims.sizes[i], dims.m)).copy_from(&b);
    }
    state.s_prev = std::mem::replace(&mut state.s, s_new);
}

/// Conditional Jacobian update: recompute the blocks while the equilibrium
/// step norm is at least σ, then latch and reuse the cached selection.
/// Returns references to the blocks to apply this sweep.
pub fn lqg_conditional_blocks<'a>(
    state: &'a mut SensitivityState,
    ctx: &GameContext,
    x: &DVector<f64>,
    y: &DVector<f64>,
    step_norm: f64,
    sigma: f64,
) -> Result<(&'a DMatrix<f64>, &'a [DMatrix<f64>])> {
    if !state.frozen {
        if state.s1_cache.is_none() || step_norm >= sigma {
            let blocks = ppg_jacobian_blocks(ctx, x, y)?;
            store_blocks(state, blocks);
        } else {
            freeze(state);
        }
    }
    Ok((state.s1_cache.as_ref().unwrap(), state.s2_cache.as_ref().unwrap()))
}

/// Same latch semantics, reusing projections already available.
pub fn lqg_conditional_from_results<'a>(
    state: &'a mut SensitivityState,
    ctx: &GameContext,
    x: &DVector<f64>,
    y: &DVector<f64>,
    results: &[ProjectionResult],
    step_norm: f64,
    sigma: f64,
) -> Result<(&'a DMatrix<f64>, &'a [DMatrix<f64>])> {
    if !state.frozen {
        if state.s1_cache.is_none() || step_norm >= sigma {
            let blocks = blocks_from_results(ctx, x, y, results)?;
            store_blocks(state, blocks);
        } else {
            freeze(state);
        }
    }
    Ok((state.s1_cache.as_ref().unwrap(), state.s2_cache.as_ref().unwrap()))
}

/// Apply one sensitivity sweep using the blocks cached in the state
/// (the conditional-update path).
pub fn sensitivity_step_cached(ctx: &GameContext, state: &mut SensitivityState) {
    let s1 = state.s1_cache.take().expect("cached blocks required");
    let s2 = state.s2_cache.take().expect("cached blocks required");
    sensitivity_step(ctx, state, &s1, &s2);
    state.s1_cache = Some(s1);
    state.s2_cache = Some(s2);
}

fn store_blocks(state: &mut SensitivityState, blocks: PpgBlocks) {
    state.s1_cache = Some(blocks.s1);
    state.s2_cache = Some(blocks.s2);
    state.cache_strict = blocks.strict;
    state.recompute_count += 1;
}

fn freeze(state: &mut SensitivityState) {
    state.frozen = true;
    if !state.cache_strict {
        state.degenerate_freeze = true;
    }
}

/// Constant blocks for equality-only instances, computed once per run.
#[derive(Debug, Clone)]
pub struct LqsgConstants {
    pub s1: DMatrix<f64>,
    pub s2: Vec<DMatrix<f64>>,
    /// W = (I − S2)⁻¹S1: the (constant) sensitivity of the affine solution map.
    pub w: DMatrix<f64>,
    /// Affine offset of the solution map y*(x) = W x + w_off.
    pub w_off: DVector<f64>,
}

/// Precompute the constant PPG Jacobian blocks of an equality-only instance
/// together with the implied affine solution map.
pub fn lqsg_jacobian(ctx: &GameContext) -> Result<LqsgConstants> {
    if !ctx.spec.is_affine_pg() {
        return Err(Error::ConfigInvalid(
            "constant-Jacobian path requires an affine pseudo-gradient".into(),
        ));
    }
    let x0 = DVector::zeros(ctx.dims.m);
    let y0 = DVector::zeros(ctx.dims.n);
    let results = ctx.project_all(&x0, &y0, None)?;
    let blocks = blocks_from_results(ctx, &x0, &y0, &results)?;

    let n = ctx.dims.n;
    // I − S2 (stacked)
    let mut i_minus_s2 = DMatrix::identity(n, n);
    for (i, s2i) in blocks.s2.iter().enumerate() {
        let mut view = i_minus_s2.view_mut((ctx.dims.offsets[i], 0), (ctx.dims.sizes[i], n));
        view -= s2i;
    }
    let sv = i_minus_s2.singular_values();
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(smin > 0.0) || smax / smin > 1e12 {
        return Err(Error::SingularSystem { context: "I - S2 in constant-Jacobian solve", agent: usize::MAX });
    }
    let lu = i_minus_s2.clone().lu();
    let w = lu
        .solve(&blocks.s1)
        .ok_or(Error::SingularSystem { context: "I - S2 in constant-Jacobian solve", agent: usize::MAX })?;
    // Offset: h(0, 0) = S2·0 + S1·0 + c  ⇒  c is the projected PG step at 0.
    let c = ctx.stack(&results);
    let w_off = lu
        .solve(&c)
        .ok_or(Error::SingularSystem { context: "I - S2 in constant-Jacobian solve", agent: usize::MAX })?;
    Ok(LqsgConstants { s1: blocks.s1, s2: blocks.s2, w, w_off })
}

/// Per-agent multiply-accumulate counts of one aggregative sensitivity step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AgentFlops {
    pub macs: u64,
}

/// Per-agent blocks of the aggregative sensitivity update
/// s̃_i ← J₂h̃_i s̃_i + J₃h̃_i Σ_j K_j s̃_j + J₁h̃_i.
#[derive(Debug, Clone)]
pub struct AggBlocks {
    /// J₂h̃_i: n_i × n_i (own-decision map).
    pub own: Vec<DMatrix<f64>>,
    /// J₃h̃_i: n_i × n̄ (aggregate map).
    pub agg: Vec<DMatrix<f64>>,
    /// Stacked J₁h̃ = S1, n × m.
    pub s1: DMatrix<f64>,
    pub strict: bool,
}

/// Evaluate the aggregative blocks at (x, y). The follower interactions must
/// be consistent with the aggregation structure (E_ij(x) = D_i(x)K_j).
pub fn aggregative_blocks(ctx: &GameContext, x: &DVector<f64>, y: &DVector<f64>) -> Result<AggBlocks> {
    let d_maps = ctx
        .agg_coupling
        .as_ref()
        .ok_or_else(|| Error::ConfigInvalid("instance has no aggregation matrices".into()))?;
    let ks = ctx.spec.aggregation.as_ref().unwrap();
    let gamma = ctx.constants.gamma;
    let dims = &ctx.dims;
    let sigma = ctx.spec.aggregate(y)?;

    let results = ctx.project_all(x, y, None)?;
    let mut own = Vec::with_capacity(ctx.n_agents());
    let mut agg = Vec::with_capacity(ctx.n_agents());
    let mut s1 = DMatrix::zeros(dims.n, dims.m);
    let mut strict = true;
    for i in 0..ctx.n_agents() {
        let pj = ctx.projector(i).jacobians(x, &results[i]).map_err(|e| e.for_agent(i))?;
        strict &= pj.strict_complementarity;
        let d_i = d_maps[i].eval(x);
        let q_i = ctx.spec.followers[i].cost.q.eval(x);
        // J_{y_i}F̃_i = Q_i(x) − D_i(x)K_i
        let jyf = &q_i - &d_i * &ks[i].0;
        let n_i = dims.sizes[i];
        let own_i = &pj.j_y * (DMatrix::identity(n_i, n_i) - jyf * gamma);
        let agg_i = -(&pj.j_y * &d_i) * gamma;

        // J₁F̃_i via the aggregate: E_i0 + Σ_k e_k(Q_{i,k}y_i + D_{i,k}(σ − K_i y_i))
        let y_i = dims.block(y, i).clone_owned();
        let sigma_others = &sigma - &ks[i].0 * &y_i;
        let mut j1f = ctx.spec.followers[i].cost.param.clone();
        for part in &ctx.spec.followers[i].cost.q.mat_x {
            let col = &part.mat * &y_i;
            j1f.column_mut(part.k).iter_mut().zip(col.iter()).for_each(|(a, b)| *a += *b);
        }
        for part in &d_maps[i].mat_x {
            let col = &part.mat * &sigma_others;
            j1f.column_mut(part.k).iter_mut().zip(col.iter()).for_each(|(a, b)| *a += *b);
        }
        let s1_i = &pj.j_x - (&pj.j_y * j1f) * gamma;
        s1.view_mut((dims.offsets[i], 0), (n_i, dims.m)).copy_from(&s1_i);
        own.push(own_i);
        agg.push(agg_i);
    }
    Ok(AggBlocks { own, agg, s1, strict })
}

/// Aggregative sensitivity sweep. The leader-side reduce Σ_j K_j s̃_j is a
/// deterministic ordered sum; each agent then works only with its own block
/// and the broadcast aggregate, so its cost is independent of N. Returns the
/// per-agent multiply-accumulate counts.
pub fn aggregative_sensitivity_step(
    ctx: &GameContext,
    blocks: &AggBlocks,
    state: &mut SensitivityState,
) -> Vec<AgentFlops> {
    let dims = &ctx.dims;
    let ks = ctx.spec.aggregation.as_ref().expect("aggregative step needs K_i");
    let n_bar = ks[0].0.nrows();
    let m = dims.m;

    // Agent-side: contributions K_i s̃_i (counted per agent).
    let mut flops = vec![AgentFlops { macs: 0 }; dims.n_agents()];
    let mut reduce = DMatrix::zeros(n_bar, m);
    let mut contribs = Vec::with_capacity(dims.n_agents());
    for i in 0..dims.n_agents() {
        let s_i = state.s.view((dims.offsets[i], 0), (dims.sizes[i], m));
        let contrib = &ks[i].0 * s_i;
        flops[i].macs += (n_bar * dims.sizes[i] * m) as u64;
        contribs.push(contrib);
    }
    // Leader-side ordered reduce (fixed agent order keeps runs reproducible).
    for c in &contribs {
        reduce += c;
    }

    // Agent-side updates from the broadcast aggregate.
    let s_old = state.s.clone();
    let mut s_new = DMatrix::zeros(dims.n, m);
    for i in 0..dims.n_agents() {
        let n_i = dims.sizes[i];
        let s_i = s_old.view((dims.offsets[i], 0), (n_i, m));
        let mut block = &blocks.own[i] * s_i;
        block += &blocks.agg[i] * &reduce;
        block += blocks.s1.view((dims.offsets[i], 0), (n_i, m));
        flops[i].macs += (n_i * n_i * m + n_i * n_bar * m + 2 * n_i * m) as u64;
        s_new.view_mut((dims.offsets[i], 0), (n_i, m)).copy_from(&block);
    }
    state.s_prev = std::mem::replace(&mut state.s, s_new);
    flops
}

/// A-priori sensitivity bound surrogate for the general variant after `ell`
/// joint sweeps: max{η^ell, Σ_j η^{ell−1−j}‖Δỹ^j‖} over the recorded history.
pub fn apriori_sens_bound(history: &[f64], eta: f64, ell: usize) -> f64 {
    let mut weighted = 0.0;
    for &d in history {
        weighted = eta * weighted + d;
    }
    eta.powi(ell as i32).max(weighted)
}

/// A-posteriori sensitivity bound: dist(s̃^ℓ, 𝒥y*(x)) ≤ ‖s̃^{ℓ+1} − s̃^ℓ‖/(1 − η)
/// (Frobenius step norm).
pub fn aposteriori_sens_bound(state: &SensitivityState, eta: f64) -> f64 {
    debug_assert!(eta < 1.0);
    state.step_norm() / (1.0 - eta)
}

/// ψ = (I − S2)⁻¹S1 for a fixed block selection: the exact fixed point of the
/// frozen sensitivity recursion.
pub fn fixed_point_of_blocks(ctx: &GameContext, s1: &DMatrix<f64>, s2: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let n = ctx.dims.n;
    let mut i_minus_s2 = DMatrix::identity(n, n);
    for (i, s2i) in s2.iter().enumerate() {
        let mut view = i_minus_s2.view_mut((ctx.dims.offsets[i], 0), (ctx.dims.sizes[i], n));
        view -= s2i;
    }
    linalg::lstsq(&i_minus_s2, s1, 1e-14)
        .ok_or(Error::SingularSystem { context: "I - S2 fixed point solve", agent: usize::MAX })
}
