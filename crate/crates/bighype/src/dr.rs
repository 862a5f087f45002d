//! Hierarchical demand-response instance builder.
//!
//! A distribution system operator (the leader) sells energy to N smart
//! buildings over Λ periods. The leader variable is x = (c₀, c₁, θ̂): the
//! baseline price, the marginal price, and the grid-capacity shares. Each
//! building buys p, charges/discharges a battery (p^C, p^DC) and tracks its
//! state of charge, minimizing procurement plus battery wear:
//!
//! ```text
//! f_i = (C₁p̄ + c₀)ᵀ p_i + λ_b(‖p^C‖² + ‖p^DC‖²) + λ_s‖soc − soc₀·1‖²
//! ```
//!
//! with p̄ = Σ_i p_i the aggregate purchase and C₁ = diag(c₁). The DSO
//! maximizes revenue: φ = −(C₁p̄ + c₀)ᵀp̄.
//!
//! Battery model (a modeling choice, fixed here): lossless dynamics
//! soc_τ = soc_{τ−1} + Δτ(p^C_τ − p^DC_τ), soc ∈ [0, capacity], charge and
//! discharge rates in [0, max], cyclic end-of-day state soc_Λ = soc₀. The
//! `λ_s` term is a small state-of-charge reference regularization (defaults
//! to λ_b); it keeps the follower game strongly monotone in every coordinate,
//! which the zero-cost soc variable would otherwise break.
//!
//! The shared grid constraint p̄ ≤ g is decomposed into the local caps
//! p_i ≤ θ̂_i·g plus the leader-side simplex constraint 1ᵀθ̂ = 1, so each
//! agent's feasible set stays local. Average-price caps mean(c₀) ≤
//! (c̲₀+c̄₀)/2 (and likewise c₁) enter the leader set as sum-cap rows.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    AggregationMat, FollowerSpec, GameSpec, LeaderCost, LeaderSet, PgConstants, PolyhedronSpec,
    QuadCostSpec, Variant, XAffineMat, XLinearPart,
};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BatteryConfig {
    pub capacity: f64,
    pub charge_max: f64,
    pub discharge_max: f64,
    /// Initial (and cyclic final) state of charge.
    pub soc0: f64,
}

impl Default for BatteryConfig {
    fn default() -> Self {
        Self { capacity: 2.0, charge_max: 0.5, discharge_max: 0.5, soc0: 1.0 }
    }
}

fn default_schema() -> u32 {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DRConfig {
    #[serde(default = "default_schema")]
    pub schema: u32,
    /// Number of buildings.
    pub n: usize,
    /// Periods per day Λ.
    pub lambda: usize,
    /// Period length in hours.
    pub delta_tau: f64,
    pub c0_min: f64,
    pub c0_max: f64,
    pub c1_min: f64,
    pub c1_max: f64,
    /// Battery degradation weight (> 0).
    pub lambda_b: f64,
    /// State-of-charge reference weight; defaults to `lambda_b`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_s: Option<f64>,
    /// Grid capacity per period; scalar value expanded when length 1.
    pub grid_capacity: Vec<f64>,
    /// Per-building demand profiles (n × Λ). Generated from `seed` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demand: Option<Vec<Vec<f64>>>,
    pub battery: BatteryConfig,
    pub seed: u64,
}

impl DRConfig {
    /// Desk-scale default: N = 3 buildings, Λ = 8 periods.
    pub fn desk(seed: u64) -> Self {
        Self {
            schema: 1,
            n: 3,
            lambda: 8,
            delta_tau: 24.0 / 8.0,
            c0_min: 0.05,
            c0_max: 0.25,
            c1_min: 0.01,
            c1_max: 0.08,
            lambda_b: 0.05,
            lambda_s: None,
            grid_capacity: vec![3.0],
            demand: None,
            battery: BatteryConfig::default(),
            seed,
        }
    }

    pub fn lambda_s(&self) -> f64 {
        self.lambda_s.unwrap_or(self.lambda_b)
    }

    fn check(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::ConfigInvalid(msg));
        if self.n == 0 {
            return bad("n: need at least one building".into());
        }
        if self.lambda == 0 {
            return bad("lambda: need at least one period".into());
        }
        if !(self.delta_tau > 0.0) {
            return bad("delta_tau: must be positive".into());
        }
        if !(self.c0_min >= 0.0 && self.c0_max > self.c0_min) {
            return bad("c0 bounds: need 0 <= c0_min < c0_max".into());
        }
        if !(self.c1_min > 0.0 && self.c1_max > self.c1_min) {
            return bad("c1 bounds: need 0 < c1_min < c1_max (strong monotonicity needs c1_min > 0)".into());
        }
        if !(self.lambda_b > 0.0) {
            return bad("lambda_b: must be positive".into());
        }
        if !(self.lambda_s() > 0.0) {
            return bad("lambda_s: must be positive".into());
        }
        if self.grid_capacity.is_empty()
            || self.grid_capacity.iter().any(|g| !(*g > 0.0))
            || (self.grid_capacity.len() != 1 && self.grid_capacity.len() != self.lambda)
        {
            return bad("grid_capacity: positive, length 1 or lambda".into());
        }
        let b = &self.battery;
        if !(b.capacity >= 0.0 && b.charge_max >= 0.0 && b.discharge_max >= 0.0) {
            return bad("battery: capacity and limits must be nonnegative".into());
        }
        if !(b.soc0 >= 0.0 && b.soc0 <= b.capacity) {
            return bad("battery.soc0: must lie in [0, capacity]".into());
        }
        if let Some(d) = &self.demand {
            if d.len() != self.n || d.iter().any(|row| row.len() != self.lambda) {
                return bad("demand: need n rows of lambda periods".into());
            }
            if d.iter().flatten().any(|v| !(*v >= 0.0)) {
                return bad("demand: entries must be nonnegative".into());
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> Vec<f64> {
        if self.grid_capacity.len() == 1 {
            vec![self.grid_capacity[0]; self.lambda]
        } else {
            self.grid_capacity.clone()
        }
    }
}

/// Index layout of the built instance.
#[derive(Debug, Clone, Copy)]
pub struct DrLayout {
    pub n: usize,
    pub lambda: usize,
}

impl DrLayout {
    pub fn m(&self) -> usize {
        2 * self.lambda + self.n
    }

    pub fn agent_dim(&self) -> usize {
        4 * self.lambda
    }

    pub fn c0(&self, tau: usize) -> usize {
        tau
    }

    pub fn c1(&self, tau: usize) -> usize {
        self.lambda + tau
    }

    pub fn theta(&self, i: usize) -> usize {
        2 * self.lambda + i
    }

    // Offsets within one agent's block.
    pub fn p(&self, tau: usize) -> usize {
        tau
    }

    pub fn p_charge(&self, tau: usize) -> usize {
        self.lambda + tau
    }

    pub fn p_discharge(&self, tau: usize) -> usize {
        2 * self.lambda + tau
    }

    pub fn soc(&self, tau: usize) -> usize {
        3 * self.lambda + tau
    }
}

/// Seeded double-peak daily demand profiles with per-building scaling,
/// capped so that every building fits under an equal capacity share with
/// headroom (keeps the decomposed capacity constraint strictly feasible
/// around θ̂ = 1/N).
pub fn generate_demand(cfg: &DRConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let grid = cfg.grid();
    let lam = cfg.lambda;
    let mut profiles = Vec::with_capacity(cfg.n);
    for _ in 0..cfg.n {
        let scale = 0.8 + 0.4 * rng.gen::<f64>();
        let jitter: Vec<f64> = (0..lam).map(|_| 0.9 + 0.2 * rng.gen::<f64>()).collect();
        let row: Vec<f64> = (0..lam)
            .map(|tau| {
                let hour = (tau as f64 + 0.5) / lam as f64 * 24.0;
                let peak = |center: f64, width: f64| (-((hour - center) / width).powi(2)).exp();
                scale * jitter[tau] * (0.35 + 0.75 * peak(8.0, 2.5) + 1.0 * peak(19.0, 2.5))
            })
            .collect();
        profiles.push(row);
    }
    // Rescale so d_{i,τ} ≤ 0.45·g_τ/N for every building and period.
    let mut worst: f64 = 0.0;
    for row in &profiles {
        for (tau, &d) in row.iter().enumerate() {
            worst = worst.max(d * cfg.n as f64 / (0.45 * grid[tau]));
        }
    }
    if worst > 1.0 {
        for row in &mut profiles {
            for d in row.iter_mut() {
                *d /= worst;
            }
        }
    }
    profiles
}

/// Build the bilevel instance from a demand-response configuration.
pub fn build(cfg: &DRConfig) -> Result<GameSpec> {
    cfg.check()?;
    let layout = DrLayout { n: cfg.n, lambda: cfg.lambda };
    let lam = cfg.lambda;
    let n_i = layout.agent_dim();
    let m = layout.m();
    let grid = cfg.grid();
    let demand = match &cfg.demand {
        Some(d) => d.clone(),
        None => generate_demand(cfg),
    };
    let lambda_s = cfg.lambda_s();

    let mut followers = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        followers.push(FollowerSpec {
            cost: building_cost(cfg, &layout, i, lambda_s),
            poly: building_poly(cfg, &layout, i, &grid, &demand[i])?,
        });
    }

    // σ(y) = p̄: each K_i selects the purchase block.
    let mut k_sel = DMatrix::zeros(lam, n_i);
    for tau in 0..lam {
        k_sel[(tau, layout.p(tau))] = 1.0;
    }
    let aggregation = Some(vec![AggregationMat(k_sel); cfg.n]);

    // φ = −c₀ᵀp̄ − c₁ᵀ(p̄ ⊙ p̄) as a quadratic-in-σ form with x-affine weight.
    let mut sxs = DMatrix::zeros(m, lam);
    for tau in 0..lam {
        sxs[(layout.c0(tau), tau)] = -1.0;
    }
    let mut pss_x = Vec::with_capacity(lam);
    for tau in 0..lam {
        let mut p_k = DMatrix::zeros(lam, lam);
        p_k[(tau, tau)] = -2.0;
        pss_x.push(XLinearPart { k: layout.c1(tau), mat: p_k });
    }
    let leader_cost = LeaderCost::QuadAggregate {
        rxx: DMatrix::zeros(m, m),
        sxs,
        pss: XAffineMat { mat: DMatrix::zeros(lam, lam), mat_x: pss_x },
        rx: DVector::zeros(m),
        rs: DVector::zeros(lam),
        c: 0.0,
    };

    // Average-price caps as sum caps: mean(c₀) ≤ (c̲₀+c̄₀)/2 ⇔ 1ᵀc₀ ≤ Λ(c̲₀+c̄₀)/2.
    let cap = |lo: f64, hi: f64| lam as f64 * 0.5 * (lo + hi);
    let price_box = |lo: f64, hi: f64| LeaderSet::SumCappedBox {
        lo: DVector::from_element(lam, lo),
        hi: DVector::from_element(lam, hi),
        cap: cap(lo, hi),
    };
    let leader_set = LeaderSet::Product(vec![
        price_box(cfg.c0_min, cfg.c0_max),
        price_box(cfg.c1_min, cfg.c1_max),
        LeaderSet::Simplex { dim: cfg.n },
    ]);

    // Worst-case moduli over X: the pseudo-gradient matrix is block diagonal
    // by variable type, so μ = min eigenvalue at c₁ = c̲₁·1 and L_F = norm at
    // c₁ = c̄₁·1 are exact.
    let mu = cfg.c1_min.min(2.0 * cfg.lambda_b).min(2.0 * lambda_s);
    let l_f = ((cfg.n as f64 + 1.0) * cfg.c1_max)
        .max(2.0 * cfg.lambda_b)
        .max(2.0 * lambda_s);

    let spec = GameSpec {
        schema: 1,
        m,
        variant: Variant::Lqg,
        followers,
        leader_cost,
        leader_set,
        aggregation,
        pg_constants: Some(PgConstants { mu, l_f }),
        gamma: None,
    };

    // Builder self-check: the no-battery schedule p = demand is feasible at
    // equal capacity shares.
    let x0 = default_leader_point(cfg, &layout);
    for i in 0..cfg.n {
        let y_i = feasible_point(&layout, &demand[i], cfg.battery.soc0);
        let (bb, dd) = spec.followers[i].poly.rhs(&x0);
        let ineq = &spec.followers[i].poly.a * &y_i - bb;
        let eq = (&spec.followers[i].poly.c * &y_i - dd).norm();
        let worst = ineq.iter().cloned().fold(f64::MIN, f64::max);
        if worst > 1e-9 || eq > 1e-9 {
            return Err(Error::ConfigInvalid(format!(
                "building {i}: demand profile infeasible under equal capacity shares \
                 (worst inequality slack {worst:.3e}, equality residual {eq:.3e}); \
                 lower demand or raise grid_capacity"
            )));
        }
    }
    Ok(spec)
}

fn building_cost(cfg: &DRConfig, layout: &DrLayout, i: usize, lambda_s: f64) -> QuadCostSpec {
    let lam = cfg.lambda;
    let n_i = layout.agent_dim();
    let m = layout.m();

    // Constant quadratic part: battery wear and soc regularization.
    let mut q0 = DMatrix::zeros(n_i, n_i);
    for tau in 0..lam {
        q0[(layout.p_charge(tau), layout.p_charge(tau))] = 2.0 * cfg.lambda_b;
        q0[(layout.p_discharge(tau), layout.p_discharge(tau))] = 2.0 * cfg.lambda_b;
        q0[(layout.soc(tau), layout.soc(tau))] = 2.0 * lambda_s;
    }
    // Price-anticipating part: Q gets 2·c₁τ on own purchases, couplings get c₁τ.
    let mut q_x = Vec::with_capacity(lam);
    for tau in 0..lam {
        let mut qk = DMatrix::zeros(n_i, n_i);
        qk[(layout.p(tau), layout.p(tau))] = 2.0;
        q_x.push(XLinearPart { k: layout.c1(tau), mat: qk });
    }
    let mut coupling = Vec::with_capacity(cfg.n - 1);
    for j in 0..cfg.n {
        if j == i {
            continue;
        }
        let mut mat_x = Vec::with_capacity(lam);
        for tau in 0..lam {
            let mut ek = DMatrix::zeros(n_i, n_i);
            ek[(layout.p(tau), layout.p(tau))] = 1.0;
            mat_x.push(XLinearPart { k: layout.c1(tau), mat: ek });
        }
        coupling.push(crate::model::CouplingBlock {
            other: j,
            block: XAffineMat { mat: DMatrix::zeros(n_i, n_i), mat_x },
        });
    }
    // Linear terms: baseline price on purchases, soc reference pull.
    let mut param = DMatrix::zeros(n_i, m);
    for tau in 0..lam {
        param[(layout.p(tau), layout.c0(tau))] = 1.0;
    }
    let mut lin = DVector::zeros(n_i);
    for tau in 0..lam {
        lin[layout.soc(tau)] = -2.0 * lambda_s * cfg.battery.soc0;
    }
    QuadCostSpec {
        q: XAffineMat { mat: q0, mat_x: q_x },
        coupling,
        param,
        lin,
    }
}

fn building_poly(
    cfg: &DRConfig,
    layout: &DrLayout,
    i: usize,
    grid: &[f64],
    demand: &[f64],
) -> Result<PolyhedronSpec> {
    let lam = cfg.lambda;
    let n_i = layout.agent_dim();
    let m = layout.m();
    let dt = cfg.delta_tau;
    let b = &cfg.battery;

    // Equalities: demand balance, battery dynamics, cyclic end-of-day soc.
    let r = 2 * lam + 1;
    let mut c = DMatrix::zeros(r, n_i);
    let mut d = DVector::zeros(r);
    let h = DMatrix::zeros(r, m);
    for tau in 0..lam {
        // p_τ + p^DC_τ − p^C_τ = demand_τ
        c[(tau, layout.p(tau))] = 1.0;
        c[(tau, layout.p_discharge(tau))] = 1.0;
        c[(tau, layout.p_charge(tau))] = -1.0;
        d[tau] = demand[tau];
    }
    for tau in 0..lam {
        // soc_τ − soc_{τ−1} − Δτ·p^C_τ + Δτ·p^DC_τ = 0   (soc_{-1} := soc0)
        let row = lam + tau;
        c[(row, layout.soc(tau))] = 1.0;
        c[(row, layout.p_charge(tau))] = -dt;
        c[(row, layout.p_discharge(tau))] = dt;
        if tau == 0 {
            d[row] = b.soc0;
        } else {
            c[(row, layout.soc(tau - 1))] = -1.0;
        }
    }
    // soc_Λ = soc0
    c[(2 * lam, layout.soc(lam - 1))] = 1.0;
    d[2 * lam] = b.soc0;

    // Inequalities: p ≥ 0, capacity share, battery rate and soc limits.
    let p_rows = 8 * lam;
    let mut a = DMatrix::zeros(p_rows, n_i);
    let mut bv = DVector::zeros(p_rows);
    let mut g = DMatrix::zeros(p_rows, m);
    let mut row = 0;
    for tau in 0..lam {
        a[(row, layout.p(tau))] = -1.0; // p ≥ 0
        row += 1;
        a[(row, layout.p(tau))] = 1.0; // p ≤ θ̂_i·g
        g[(row, layout.theta(i))] = grid[tau];
        row += 1;
        a[(row, layout.p_charge(tau))] = -1.0;
        row += 1;
        a[(row, layout.p_charge(tau))] = 1.0;
        bv[row] = b.charge_max;
        row += 1;
        a[(row, layout.p_discharge(tau))] = -1.0;
        row += 1;
        a[(row, layout.p_discharge(tau))] = 1.0;
        bv[row] = b.discharge_max;
        row += 1;
        a[(row, layout.soc(tau))] = -1.0;
        row += 1;
        a[(row, layout.soc(tau))] = 1.0;
        bv[row] = b.capacity;
        row += 1;
    }
    debug_assert_eq!(row, p_rows);
    Ok(PolyhedronSpec { a, b: bv, g, c, d, h })
}

/// Mid-box prices with equal capacity shares; a sensible solver start.
pub fn default_leader_point(cfg: &DRConfig, layout: &DrLayout) -> DVector<f64> {
    let mut x = DVector::zeros(layout.m());
    for tau in 0..cfg.lambda {
        x[layout.c0(tau)] = 0.5 * (cfg.c0_min + cfg.c0_max);
        x[layout.c1(tau)] = 0.5 * (cfg.c1_min + cfg.c1_max);
    }
    for i in 0..cfg.n {
        x[layout.theta(i)] = 1.0 / cfg.n as f64;
    }
    x
}

fn feasible_point(layout: &DrLayout, demand: &[f64], soc0: f64) -> DVector<f64> {
    let mut y = DVector::zeros(layout.agent_dim());
    for tau in 0..layout.lambda {
        y[layout.p(tau)] = demand[tau];
        y[layout.soc(tau)] = soc0;
    }
    y
}

#[derive(Debug, Clone, Serialize)]
pub struct CapacityReport {
    /// Worst slack of the implied coupling constraint: min_τ (g_τ − p̄_τ).
    pub worst_period_slack: f64,
    /// Worst violation of the local caps p_i ≤ θ̂_i·g (positive = violated).
    pub worst_local_violation: f64,
    pub theta_sum: f64,
    /// Local caps plus the simplex imply Σ p_i ≤ g within tolerance.
    pub implied: bool,
}

/// Verify the capacity decomposition: local caps plus 1ᵀθ̂ = 1 must imply the
/// original coupling constraint Σ p_i ≤ g.
pub fn capacity_decomposition_check(
    cfg: &DRConfig,
    spec: &GameSpec,
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<CapacityReport> {
    let layout = DrLayout { n: cfg.n, lambda: cfg.lambda };
    let grid = cfg.grid();
    let dims = spec.dims();
    if x.len() != layout.m() || y.len() != dims.n {
        return Err(Error::DimensionMismatch("capacity check inputs".into()));
    }
    let mut worst_local: f64 = f64::MIN;
    let mut p_bar = vec![0.0f64; layout.lambda];
    for i in 0..cfg.n {
        let y_i = dims.block(y, i);
        for tau in 0..layout.lambda {
            let p = y_i[layout.p(tau)];
            p_bar[tau] += p;
            worst_local = worst_local.max(p - x[layout.theta(i)] * grid[tau]);
        }
    }
    let worst_slack = (0..layout.lambda)
        .map(|tau| grid[tau] - p_bar[tau])
        .fold(f64::INFINITY, f64::min);
    let theta_sum: f64 = (0..cfg.n).map(|i| x[layout.theta(i)]).sum();
    let implied = worst_local <= 1e-8 && theta_sum <= 1.0 + 1e-9 && worst_slack >= -1e-8;
    Ok(CapacityReport {
        worst_period_slack: worst_slack,
        worst_local_violation: worst_local,
        theta_sum,
        implied,
    })
}

#[cfg(test)]
mod tests;
