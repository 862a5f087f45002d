//! Projected pseudo-gradient equilibrium seeking.
//!
//! The map h(x, ·) = proj_{Y(x)}[· − γF(x, ·)] has the lower-level Nash
//! equilibrium as its unique fixed point; for γ inside the contraction window
//! the synchronous Jacobi sweep y ← h(x, y) converges linearly with rate η.
//! All agents read the same iterate within a sweep, so results are bitwise
//! independent of the worker count.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Constants, Dims, GameSpec, ValidationReport, XAffineMat};
use crate::polyproj::{ProjectionResult, Projector, WarmStart};

/// Validated instance plus per-agent projector caches. Immutable after
/// construction; all per-agent operations may run concurrently.
pub struct GameContext {
    pub spec: GameSpec,
    pub dims: Dims,
    pub report: ValidationReport,
    pub constants: Constants,
    projectors: Vec<Projector>,
    /// Aggregative coupling maps D_i(x) with E_ij(x) = D_i(x) K_j, when the
    /// instance carries aggregation matrices.
    pub agg_coupling: Option<Vec<XAffineMat>>,
}

impl GameContext {
    pub fn new(spec: GameSpec) -> Result<Self> {
        let report = spec.validate()?;
        let dims = spec.dims();
        let constants = report.constants;
        let projectors = spec.followers.iter().map(|f| Projector::new(&f.poly)).collect();
        let agg_coupling = if spec.aggregation.is_some() {
            Some(spec.aggregative_coupling()?)
        } else {
            None
        };
        Ok(Self { spec, dims, report, constants, projectors, agg_coupling })
    }

    pub fn n_agents(&self) -> usize {
        self.dims.n_agents()
    }

    pub fn projector(&self, i: usize) -> &Projector {
        &self.projectors[i]
    }

    /// Pseudo-gradient step point ω_i(x, y) = y_i − γ F_i(x, y).
    pub fn ppg_point(&self, i: usize, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        let fi = self.spec.pg_block(i, &self.dims, x, y);
        let yi = self.dims.block(y, i);
        DVector::from_fn(fi.len(), |k, _| yi[k] - self.constants.gamma * fi[k])
    }

    /// Project every agent's PG-step point (one Jacobi half-sweep). With
    /// `warms` the per-agent ADMM states are reused across calls.
    pub fn project_all(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        warms: Option<&mut [WarmStart]>,
    ) -> Result<Vec<ProjectionResult>> {
        let run = |i: usize, warm: Option<&mut WarmStart>| -> Result<ProjectionResult> {
            let omega = self.ppg_point(i, x, y);
            self.projectors[i]
                .project_with(x, &omega, warm)
                .map_err(|e| e.for_agent(i))
        };
        match warms {
            Some(bank) => bank
                .par_iter_mut()
                .enumerate()
                .map(|(i, w)| run(i, Some(w)))
                .collect(),
            None => (0..self.n_agents()).into_par_iter().map(|i| run(i, None)).collect(),
        }
    }

    pub fn stack(&self, results: &[ProjectionResult]) -> DVector<f64> {
        let mut y = DVector::zeros(self.dims.n);
        for (i, r) in results.iter().enumerate() {
            y.rows_mut(self.dims.offsets[i], self.dims.sizes[i]).copy_from(&r.z_star);
        }
        y
    }

    pub fn fresh_warm_bank(&self) -> Vec<WarmStart> {
        (0..self.n_agents()).map(|_| WarmStart::default()).collect()
    }
}

/// Inner-loop iterate bookkeeping.
#[derive(Debug, Clone)]
pub struct InnerState {
    pub y_tilde: DVector<f64>,
    pub y_prev: DVector<f64>,
    /// ‖y_tilde − y_prev‖ exactly as computed by the last sweep.
    pub step_norm: f64,
    pub ell: usize,
    /// Per-sweep step norms; kept for the general-variant a-priori bound.
    pub step_norm_history: Vec<f64>,
    pub track_history: bool,
}

impl InnerState {
    pub fn new(y0: DVector<f64>, track_history: bool) -> Self {
        Self {
            y_prev: y0.clone(),
            y_tilde: y0,
            step_norm: f64::INFINITY,
            ell: 0,
            step_norm_history: Vec::new(),
            track_history,
        }
    }

    pub(crate) fn advance(&mut self, y_next: DVector<f64>) {
        self.y_prev = std::mem::replace(&mut self.y_tilde, y_next);
        self.step_norm = (&self.y_tilde - &self.y_prev).norm();
        self.ell += 1;
        if self.track_history {
            self.step_norm_history.push(self.step_norm);
        }
    }
}

/// One agent's projected pseudo-gradient step h_i(x, y).
pub fn ppg_step_agent(
    ctx: &GameContext,
    i: usize,
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<DVector<f64>> {
    let omega = ctx.ppg_point(i, x, y);
    let res = ctx.projector(i).project(x, &omega).map_err(|e| e.for_agent(i))?;
    Ok(res.z_star)
}

/// Synchronous Jacobi sweep: every agent i updates to h_i(x, ỹ^ℓ) reading the
/// same ỹ^ℓ; `step_norm` and the history are refreshed.
pub fn ppg_sweep(ctx: &GameContext, x: &DVector<f64>, state: &mut InnerState) -> Result<()> {
    let results = ctx.project_all(x, &state.y_tilde, None)?;
    state.advance(ctx.stack(&results));
    Ok(())
}

#[derive(Debug, Clone)]
pub struct WarmstartOutcome {
    pub y: DVector<f64>,
    pub sweeps: usize,
    /// False when the iteration cap was hit before reaching the tolerance;
    /// the best (latest) iterate is still returned.
    pub converged: bool,
}

/// PPG-only pre-phase: sweep until ‖ỹ^{j+1} − ỹ^j‖ ≤ σ.
pub fn warmstart(
    ctx: &GameContext,
    x: &DVector<f64>,
    y0: &DVector<f64>,
    sigma: f64,
    cap: usize,
) -> Result<WarmstartOutcome> {
    if sigma <= 0.0 {
        return Err(Error::ConfigInvalid("warmstart tolerance must be positive".into()));
    }
    let mut state = InnerState::new(y0.clone(), false);
    let mut warms = ctx.fresh_warm_bank();
    for sweep in 1..=cap {
        let results = ctx.project_all(x, &state.y_tilde, Some(&mut warms))?;
        state.advance(ctx.stack(&results));
        if state.step_norm <= sigma {
            return Ok(WarmstartOutcome { y: state.y_tilde, sweeps: sweep, converged: true });
        }
    }
    Ok(WarmstartOutcome { y: state.y_tilde, sweeps: cap, converged: false })
}

/// A-posteriori equilibrium error bound ‖ỹ^ℓ − y*(x)‖ ≤ step_norm / (1 − η).
pub fn aposteriori_eq_bound(state: &InnerState, eta: f64) -> f64 {
    debug_assert!(eta < 1.0);
    if state.ell == 0 {
        return f64::INFINITY;
    }
    state.step_norm / (1.0 - eta)
}
