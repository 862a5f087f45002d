//! The hypergradient outer loop.
//!
//! Each outer iteration performs the leader's relaxed projected step
//!
//! ```text
//! ∇̂φ_e = ∇₁φ(x, y) + sᵀ∇₂φ(x, y)
//! x⁺   = x + β ( proj_X[x − α ∇̂φ_e] − x )
//! ```
//!
//! with (y, s) the latest inner-loop output, then refreshes (y, s) by the
//! variant-specific inner loop at x⁺: warmstart plus a-priori-terminated joint
//! sweeps (general), conditionally-updated joint sweeps with the a-posteriori
//! test (lqg), or exactly one sweep with constant Jacobian blocks (lqsg). The
//! run terminates when the relative change of the leader objective drops
//! below `rel_tol` or at `max_outer`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::equilibrium::{GameContext, InnerState};
use crate::error::{Error, Result};
use crate::model::{Constants, LeaderSet, Variant};
use crate::polyproj::{project_leader_set, WarmStart};
use crate::sensitivity::{
    apriori_sens_bound, blocks_from_results, lqg_conditional_from_results, lqsg_jacobian,
    sensitivity_step, sensitivity_step_cached, LqsgConstants, SensitivityState,
};

/// Step-size / tolerance schedule: a constant or c·(k+1)^(−p).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Const(f64),
    Power { coeff: f64, exponent: f64 },
}

impl Schedule {
    pub fn value(&self, k: usize) -> f64 {
        match self {
            Schedule::Const(c) => *c,
            Schedule::Power { coeff, exponent } => coeff * ((k + 1) as f64).powf(-exponent),
        }
    }

    /// Parse the CLI form `const:<c>` or `power:<c>:<p>`.
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split(':').collect();
        let bad = || Error::ConfigInvalid(format!("schedule '{text}' (expected const:<c> or power:<c>:<p>)"));
        match parts.as_slice() {
            ["const", c] => Ok(Schedule::Const(c.parse().map_err(|_| bad())?)),
            ["power", c, p] => Ok(Schedule::Power {
                coeff: c.parse().map_err(|_| bad())?,
                exponent: p.parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }
}

impl std::fmt::Display for Schedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Schedule::Const(c) => write!(f, "const:{c}"),
            Schedule::Power { coeff, exponent } => write!(f, "power:{coeff}:{exponent}"),
        }
    }
}

/// Tolerance presets (a_y, a_s) for σ_y^k = a_y(k+1)^{−0.51}, σ_s^k likewise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Small,
    Medium,
    Large,
}

impl Preset {
    pub fn tolerances(self) -> (f64, f64) {
        match self {
            Preset::Small => (0.002, 25.0),
            Preset::Medium => (0.02, 50.0),
            Preset::Large => (0.1, 500.0),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "small" => Ok(Preset::Small),
            "medium" => Ok(Preset::Medium),
            "large" => Ok(Preset::Large),
            other => Err(Error::ConfigInvalid(format!("unknown preset '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedules {
    pub alpha: Schedule,
    pub beta: Schedule,
    pub sigma_y: Schedule,
    pub sigma_s: Schedule,
}

impl Schedules {
    /// Defaults: α = 3e-6(k+1)^{−0.51} with β ≡ 1 for the double-loop
    /// variants; constant (α, β) for the single-loop variant. Tolerances from
    /// the preset.
    pub fn defaults(variant: Variant, preset: Preset) -> Self {
        let (a_y, a_s) = preset.tolerances();
        let sigma_y = Schedule::Power { coeff: a_y, exponent: 0.51 };
        let sigma_s = Schedule::Power { coeff: a_s, exponent: 0.51 };
        match variant {
            Variant::General | Variant::Lqg => Schedules {
                alpha: Schedule::Power { coeff: 3e-6, exponent: 0.51 },
                beta: Schedule::Const(1.0),
                sigma_y,
                sigma_s,
            },
            Variant::Lqsg => Schedules {
                alpha: Schedule::Const(1e-3),
                beta: Schedule::Const(0.5),
                sigma_y,
                sigma_s,
            },
        }
    }

    /// Enforce the per-variant configuration contract:
    /// - general/lqg: α = c(k+1)^{−p} with p ∈ (0.5, 1], β ≡ 1, and both
    ///   tolerance schedules vanish fast enough that Σ α^k σ^k < ∞
    ///   (symbolically: p_α + p_σ > 1);
    /// - lqsg: constant α; β either constant in (0, 1] (strongly convex
    ///   leader) or nonincreasing power with values in (0, 1] and
    ///   p ∈ (0.5, 1] (convex leader).
    pub fn validate_for(&self, variant: Variant) -> Result<()> {
        let fail = |msg: String| Err(Error::ScheduleContractViolation(msg));
        match variant {
            Variant::General | Variant::Lqg => {
                let p_alpha = match self.alpha {
                    Schedule::Power { coeff, exponent } if coeff > 0.0 => {
                        if !(exponent > 0.5 && exponent <= 1.0) {
                            return fail(format!(
                                "alpha exponent {exponent} outside (0.5, 1] (nonsummable + square-summable)"
                            ));
                        }
                        exponent
                    }
                    _ => return fail("alpha must be a vanishing power schedule".into()),
                };
                match self.beta {
                    Schedule::Const(1.0) => {}
                    _ => return fail("beta must be the constant 1".into()),
                }
                for (name, s) in [("sigma_y", self.sigma_y), ("sigma_s", self.sigma_s)] {
                    match s {
                        Schedule::Power { coeff, exponent } if coeff > 0.0 => {
                            if p_alpha + exponent <= 1.0 {
                                return fail(format!(
                                    "{name}: alpha and tolerance exponents sum to {} ≤ 1, so Σ α^k σ^k diverges",
                                    p_alpha + exponent
                                ));
                            }
                        }
                        _ => return fail(format!("{name} must be a vanishing power schedule")),
                    }
                }
                Ok(())
            }
            Variant::Lqsg => {
                match self.alpha {
                    Schedule::Const(a) if a > 0.0 => {}
                    _ => return fail("alpha must be a positive constant".into()),
                }
                match self.beta {
                    Schedule::Const(b) if b > 0.0 && b <= 1.0 => Ok(()),
                    Schedule::Power { coeff, exponent }
                        if coeff > 0.0 && coeff <= 1.0 && exponent > 0.5 && exponent <= 1.0 =>
                    {
                        Ok(())
                    }
                    _ => fail("beta must be constant in (0,1] or a power schedule with coeff in (0,1], exponent in (0.5,1]".into()),
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub max_outer: usize,
    pub rel_tol: f64,
    pub inner_cap: usize,
    pub warmstart_cap: usize,
    pub x0: Option<DVector<f64>>,
    pub y0: Option<DVector<f64>>,
    pub s0: Option<DMatrix<f64>>,
    /// Skip the schedule contract check.
    pub force_schedules: bool,
    /// Record the leader iterate in every trace row.
    pub record_x: bool,
    /// Record the follower iterate and sensitivity in every trace row
    /// (desk-scale diagnostics; used by the contract tests).
    pub record_state: bool,
    /// Measure wall time per outer iteration. Off by default so that traces
    /// are byte-reproducible.
    pub timing: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            max_outer: 1000,
            rel_tol: 1e-5,
            inner_cap: 100_000,
            warmstart_cap: 100_000,
            x0: None,
            y0: None,
            s0: None,
            force_schedules: false,
            record_x: false,
            record_state: false,
            timing: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    RelTol,
    MaxOuter,
    Failed(String),
}

impl Termination {
    pub fn as_str(&self) -> &str {
        match self {
            Termination::RelTol => "rel_tol",
            Termination::MaxOuter => "max_outer",
            Termination::Failed(_) => "failed",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceRecord {
    pub k: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x: Option<Vec<f64>>,
    /// Follower iterate after the inner loop (with `record_state`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y: Option<Vec<f64>>,
    /// Sensitivity estimate after the inner loop, column-major (with
    /// `record_state`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s: Option<Vec<f64>>,
    pub phi_e: f64,
    pub grad_norm: f64,
    pub inner_iterations: usize,
    pub eq_bound: f64,
    pub sens_bound: f64,
    pub x_step_norm: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub termination: Termination,
    pub outer_iterations: usize,
    pub total_inner_iterations: usize,
    pub final_phi_e: f64,
    pub final_x: Vec<f64>,
    pub constants: Constants,
    /// Conditional-update freezes that latched a non-strict selection.
    pub degenerate_freezes: usize,
    /// Warmstart loops that hit their iteration cap.
    pub warmstart_warnings: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunTrace {
    pub records: Vec<TraceRecord>,
    pub summary: RunSummary,
}

/// Approximate hypergradient ∇̂φ_e = ∇₁φ(x, y) + sᵀ∇₂φ(x, y). With an
/// aggregative leader cost the implicit term is (Σ K_i s_i)ᵀ∇_σφ.
pub fn hypergradient(
    ctx: &GameContext,
    x: &DVector<f64>,
    y: &DVector<f64>,
    s: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    if s.nrows() != ctx.dims.n || s.ncols() != ctx.dims.m {
        return Err(Error::DimensionMismatch(format!(
            "sensitivity is {}x{}, expected {}x{}",
            s.nrows(),
            s.ncols(),
            ctx.dims.n,
            ctx.dims.m
        )));
    }
    if ctx.spec.leader_cost.is_aggregative() {
        let sigma = ctx.spec.aggregate(y)?;
        let (g1, gs) = ctx.spec.leader_cost_grads_sigma(x, &sigma)?;
        let ks = ctx.spec.aggregation.as_ref().unwrap();
        let n_bar = ks[0].0.nrows();
        let mut agg_s = DMatrix::zeros(n_bar, ctx.dims.m);
        for i in 0..ctx.n_agents() {
            agg_s += &ks[i].0 * s.view((ctx.dims.offsets[i], 0), (ctx.dims.sizes[i], ctx.dims.m));
        }
        Ok(g1 + agg_s.transpose() * gs)
    } else {
        let (g1, g2) = ctx.spec.leader_cost_grads(x, y)?;
        Ok(g1 + s.transpose() * g2)
    }
}

/// Relaxed projected step x⁺ = x + β(proj_X[x − α·grad] − x).
pub fn outer_step(
    x: &DVector<f64>,
    grad: &DVector<f64>,
    alpha: f64,
    beta: f64,
    leader_set: &LeaderSet,
) -> DVector<f64> {
    let projected = project_leader_set(leader_set, &(x - grad * alpha));
    x + (projected - x) * beta
}

struct InnerOutcome {
    sweeps: usize,
    eq_bound: f64,
    sens_bound: f64,
    warm_capped: bool,
}

/// Variant-dispatched inner loop, fused so each joint iteration performs one
/// projection per agent (the projection at the fresh iterate both advances
/// the equilibrium and anchors the Jacobian blocks).
fn inner_loop(
    ctx: &GameContext,
    x: &DVector<f64>,
    y: &mut DVector<f64>,
    sens: &mut SensitivityState,
    sigma_y: f64,
    sigma_s: f64,
    opts: &RunOptions,
    warms: &mut [WarmStart],
    lqsg: Option<&LqsgConstants>,
) -> Result<InnerOutcome> {
    let eta = ctx.constants.eta;
    // Blocks were computed at the previous leader iterate; invalidate.
    sens.frozen = false;
    sens.s1_cache = None;
    sens.s2_cache = None;
    sens.cache_strict = true;

    if let Some(consts) = lqsg {
        let results = ctx.project_all(x, y, Some(warms))?;
        let y_next = ctx.stack(&results);
        let dy = (&y_next - &*y).norm();
        *y = y_next;
        sensitivity_step(ctx, sens, &consts.s1, &consts.s2);
        return Ok(InnerOutcome {
            sweeps: 1,
            eq_bound: dy / (1.0 - eta),
            sens_bound: sens.step_norm() / (1.0 - eta),
            warm_capped: false,
        });
    }

    let mut sweeps = 0usize;
    let mut warm_capped = false;
    if ctx.spec.variant == Variant::General {
        let mut state = InnerState::new(y.clone(), false);
        loop {
            let results = ctx.project_all(x, &state.y_tilde, Some(warms))?;
            state.advance(ctx.stack(&results));
            sweeps += 1;
            if state.step_norm <= sigma_y {
                break;
            }
            if sweeps >= opts.warmstart_cap {
                warm_capped = true;
                break;
            }
        }
        *y = state.y_tilde;
    }

    // Joint equilibrium + sensitivity sweeps.
    let mut history: Vec<f64> = Vec::new();
    let mut results = ctx.project_all(x, y, Some(warms))?;
    let mut ell = 0usize;
    let mut eq_bound;
    let mut sens_bound;
    loop {
        let y_next = ctx.stack(&results);
        let dy = (&y_next - &*y).norm();
        *y = y_next;
        // Projections at the fresh iterate: the next equilibrium step and the
        // anchor for this sweep's Jacobian blocks.
        results = ctx.project_all(x, y, Some(warms))?;
        match ctx.spec.variant {
            Variant::General => {
                let blocks = blocks_from_results(ctx, x, y, &results)?;
                sensitivity_step(ctx, sens, &blocks.s1, &blocks.s2);
            }
            Variant::Lqg => {
                lqg_conditional_from_results(sens, ctx, x, y, &results, dy, sigma_y)?;
                sensitivity_step_cached(ctx, sens);
            }
            Variant::Lqsg => unreachable!(),
        }
        ell += 1;
        sweeps += 1;
        history.push(dy);
        eq_bound = dy / (1.0 - eta);
        let ds = sens.step_norm();
        let done = match ctx.spec.variant {
            Variant::General => {
                sens_bound = apriori_sens_bound(&history, eta, ell);
                sens_bound <= sigma_s
            }
            Variant::Lqg => {
                sens_bound = ds / (1.0 - eta);
                dy <= sigma_y && ds <= sigma_s
            }
            Variant::Lqsg => unreachable!(),
        };
        if done {
            break;
        }
        if sweeps >= opts.inner_cap {
            return Err(Error::MaxIterExceeded {
                context: "inner loop",
                iters: sweeps,
                residual: dy.max(ds),
            });
        }
    }
    Ok(InnerOutcome { sweeps, eq_bound, sens_bound, warm_capped })
}

/// Run the full solver. Mid-run solver failures are reported in the returned
/// trace (`Termination::Failed`) with all records up to the failure;
/// configuration errors fail fast.
pub fn run(ctx: &GameContext, schedules: &Schedules, opts: &RunOptions) -> Result<RunTrace> {
    if !opts.force_schedules {
        schedules.validate_for(ctx.spec.variant)?;
    }
    let dims = &ctx.dims;
    let set = &ctx.spec.leader_set;
    let mut x = match &opts.x0 {
        Some(x0) => {
            if x0.len() != dims.m {
                return Err(Error::DimensionMismatch("x0 length".into()));
            }
            project_leader_set(set, x0)
        }
        None => project_leader_set(set, &DVector::zeros(dims.m)),
    };
    let mut y = match &opts.y0 {
        Some(y0) => {
            if y0.len() != dims.n {
                return Err(Error::DimensionMismatch("y0 length".into()));
            }
            y0.clone()
        }
        None => DVector::zeros(dims.n),
    };
    let mut sens = match &opts.s0 {
        Some(s0) => {
            if s0.nrows() != dims.n || s0.ncols() != dims.m {
                return Err(Error::DimensionMismatch("s0 shape".into()));
            }
            SensitivityState::with_initial(s0.clone())
        }
        None => SensitivityState::zero(dims.n, dims.m),
    };
    let lqsg_const = if ctx.spec.variant == Variant::Lqsg {
        Some(lqsg_jacobian(ctx)?)
    } else {
        None
    };

    let mut warms = ctx.fresh_warm_bank();
    let mut records: Vec<TraceRecord> = Vec::new();
    let mut phi_prev: Option<f64> = None;
    let mut termination = Termination::MaxOuter;
    let mut total_inner = 0usize;
    let mut degenerate_freezes = 0usize;
    let mut warm_warnings = 0usize;
    let started = Instant::now();
    let mut last_ms = 0.0f64;

    for k in 0..opts.max_outer {
        let step_result = (|| -> Result<(f64, f64, InnerOutcome)> {
            let grad = hypergradient(ctx, &x, &y, &sens.s)?;
            let grad_norm = grad.norm();
            if !grad_norm.is_finite() {
                return Err(Error::NonFiniteValue("hypergradient"));
            }
            let x_next = outer_step(&x, &grad, schedules.alpha.value(k), schedules.beta.value(k), set);
            let x_step = (&x_next - &x).norm();
            x = x_next;
            let out = inner_loop(
                ctx,
                &x,
                &mut y,
                &mut sens,
                schedules.sigma_y.value(k),
                schedules.sigma_s.value(k),
                opts,
                &mut warms,
                lqsg_const.as_ref(),
            )?;
            if sens.degenerate_freeze {
                degenerate_freezes += 1;
                sens.degenerate_freeze = false;
            }
            if out.warm_capped {
                warm_warnings += 1;
            }
            if !crate::linalg::is_finite_vec(&y) || !crate::linalg::is_finite_mat(&sens.s) {
                return Err(Error::NonFiniteValue("inner iterates"));
            }
            Ok((grad_norm, x_step, out))
        })();

        let (grad_norm, x_step, inner) = match step_result {
            Ok(v) => v,
            Err(e) => {
                termination = Termination::Failed(e.to_string());
                break;
            }
        };
        total_inner += inner.sweeps;

        let phi = match ctx.spec.leader_cost(&x, &y) {
            Ok(v) if v.is_finite() => v,
            Ok(_) => {
                termination = Termination::Failed("non-finite leader objective".into());
                break;
            }
            Err(e) => {
                termination = Termination::Failed(e.to_string());
                break;
            }
        };

        let wall_ms = if opts.timing {
            let now = started.elapsed().as_secs_f64() * 1e3;
            let dt = now - last_ms;
            last_ms = now;
            dt
        } else {
            0.0
        };
        records.push(TraceRecord {
            k,
            x: opts.record_x.then(|| x.iter().cloned().collect()),
            y: opts.record_state.then(|| y.iter().cloned().collect()),
            s: opts.record_state.then(|| sens.s.iter().cloned().collect()),
            phi_e: phi,
            grad_norm,
            inner_iterations: inner.sweeps,
            eq_bound: inner.eq_bound,
            sens_bound: inner.sens_bound,
            x_step_norm: x_step,
            wall_ms,
        });

        if let Some(prev) = phi_prev {
            if (phi - prev).abs() <= opts.rel_tol * prev.abs() {
                termination = Termination::RelTol;
                break;
            }
        }
        phi_prev = Some(phi);
    }

    let final_phi = records.last().map_or(f64::NAN, |r| r.phi_e);
    Ok(RunTrace {
        summary: RunSummary {
            termination,
            outer_iterations: records.len(),
            total_inner_iterations: total_inner,
            final_phi_e: final_phi,
            final_x: x.iter().cloned().collect(),
            constants: ctx.constants,
            degenerate_freezes,
            warmstart_warnings: warm_warnings,
        },
        records,
    })
}

#[cfg(test)]
mod tests;
