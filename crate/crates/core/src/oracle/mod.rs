//! Centralized reference solutions and analytic constants.
//!
//! Everything in this module sees the whole network at once; it exists to
//! certify what the distributed controller computes with only local data.
//! The voltage-regulation problem (minimize total generation cost subject to
//! per-bus voltage bands under the linearized grid model) is solved here by
//! projected gradient ascent on its Lagrange dual, and the result is checked
//! independently through KKT residuals.  The same pieces — dual value, dual
//! gradient, the curvature constant of the dual — feed the step-size bound
//! used by the simulator and the inequality checks in [`verify`].

pub mod verify;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::agent::{self, CostParams, Limits};
use crate::net::{RadialNetwork, SensitivityMatrices};

/// A pair of nonnegative price vectors: `lam_lo` prices the lower voltage
/// band, `lam_hi` the upper band.  Entry `k` belongs to bus `k + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualPoint {
    pub lam_lo: DVector<f64>,
    pub lam_hi: DVector<f64>,
}

impl DualPoint {
    /// Zero prices for `n` controllable buses.
    pub fn zeros(n: usize) -> Self {
        DualPoint {
            lam_lo: DVector::zeros(n),
            lam_hi: DVector::zeros(n),
        }
    }

    /// Number of controllable buses.
    pub fn n(&self) -> usize {
        self.lam_lo.len()
    }

    /// Net price `lam_lo - lam_hi`, the signed quantity the controller
    /// actually responds to.
    pub fn net(&self) -> DVector<f64> {
        &self.lam_lo - &self.lam_hi
    }

    /// Both blocks stacked into one vector, `[lam_lo; lam_hi]`.
    pub fn stacked(&self) -> DVector<f64> {
        let n = self.n();
        let mut out = DVector::zeros(2 * n);
        out.rows_mut(0, n).copy_from(&self.lam_lo);
        out.rows_mut(n, n).copy_from(&self.lam_hi);
        out
    }

    /// Inverse of [`stacked`](Self::stacked).
    pub fn from_stacked(v: &DVector<f64>) -> Self {
        assert!(
            v.len().is_multiple_of(2),
            "stacked dual must have even length"
        );
        let n = v.len() / 2;
        DualPoint {
            lam_lo: v.rows(0, n).into_owned(),
            lam_hi: v.rows(n, n).into_owned(),
        }
    }
}

/// Largest eigenvalue of a symmetric positive-semidefinite matrix by power
/// iteration.  Stops once the eigenpair residual certifies about eleven
/// significant digits, which is far below every tolerance built on top of it.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "spectral_norm needs a square matrix");
    if n == 0 {
        return 0.0;
    }
    let mut v = DVector::from_element(n, (n as f64).sqrt().recip());
    let mut lam = 0.0;
    for _ in 0..200_000 {
        let w = m * &v;
        lam = v.dot(&w);
        let residual = (&w - &v * lam).norm();
        if residual <= 1e-11 * lam.abs().max(f64::MIN_POSITIVE) {
            break;
        }
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        v = w / norm;
    }
    lam
}

/// Network-wide constants that govern convergence of the distributed
/// controller: the curvature of the dual function and the step sizes it
/// admits under a given worst-case message delay.
#[derive(Debug, Clone)]
pub struct Constants {
    /// Number of controllable buses.
    pub n: usize,
    /// Longest hop distance between two controllable buses.
    pub diameter: usize,
    /// Worst-case message delay in iterations.
    pub tau_max: u32,
    /// Spectral norm of the active-power sensitivity matrix.
    pub norm_r: f64,
    /// Spectral norm of the reactive-power sensitivity matrix.
    pub norm_x: f64,
    /// Smallest cost curvature over all buses and both injection axes.
    pub a_min: f64,
    /// Smoothness constant of the dual gradient:
    /// `2 (norm_r^2 + norm_x^2) / a_min`.
    pub lipschitz: f64,
    /// Number of past iterations that can still influence a bus's
    /// accumulator: `diameter * (tau_max + 1)`.
    pub history_window: usize,
    /// Step-size ceiling `2 / ((1 + ((tau_max+1)*d + 1) sqrt(N)) * L)`.
    pub gamma_max: f64,
    /// Companion ceiling with the staleness count `tau_max*(d+1) + 1`, used
    /// by the descent-margin check; `gamma_auto` respects both.
    pub gamma_max_alt: f64,
}

/// Step-size ceiling `2 / ((1 + coeff * sqrt(n)) * lipschitz)` for a given
/// staleness coefficient.
pub fn gamma_bound(lipschitz: f64, n: usize, coeff: f64) -> f64 {
    2.0 / ((1.0 + coeff * (n as f64).sqrt()) * lipschitz)
}

impl Constants {
    /// Measure every constant off a concrete network and cost family.
    pub fn compute(
        net: &RadialNetwork,
        sens: &SensitivityMatrices,
        costs: &CostParams,
        tau_max: u32,
    ) -> Constants {
        let n = net.num_buses();
        let diameter = net.diameter();
        let norm_r = spectral_norm(&sens.r);
        let norm_x = spectral_norm(&sens.x);
        let a_min = costs.a_min();
        let lipschitz = 2.0 * (norm_r * norm_r + norm_x * norm_x) / a_min;
        let d = diameter as f64;
        let tau = tau_max as f64;
        let coeff = (tau + 1.0) * d + 1.0;
        let coeff_alt = tau * (d + 1.0) + 1.0;
        Constants {
            n,
            diameter,
            tau_max,
            norm_r,
            norm_x,
            a_min,
            lipschitz,
            history_window: diameter * (tau_max as usize + 1),
            gamma_max: gamma_bound(lipschitz, n, coeff),
            gamma_max_alt: gamma_bound(lipschitz, n, coeff_alt),
        }
    }

    /// Default step size: 90% of the tightest of the three ceilings
    /// ([`gamma_max`](Constants::gamma_max),
    /// [`gamma_max_alt`](Constants::gamma_max_alt),
    /// [`gamma_max_window`](Constants::gamma_max_window)).
    pub fn gamma_auto(&self) -> f64 {
        0.9 * self
            .gamma_max
            .min(self.gamma_max_alt)
            .min(self.gamma_max_window())
    }

    /// Third ceiling variant, derived from the history window:
    /// `2 / ((1 + (history_window + 1) sqrt(N)) * L)`.  Numerically equal to
    /// [`gamma_max`](Constants::gamma_max) because `history_window + 1 =
    /// (tau_max+1)*d + 1`, but computed independently so all three published
    /// staleness counts can be inspected side by side.
    pub fn gamma_max_window(&self) -> f64 {
        gamma_bound(self.lipschitz, self.n, self.history_window as f64 + 1.0)
    }

    /// Staleness coefficient used by one form of the descent-margin lower
    /// bound, `tau_max*(diameter+1) + 1`.
    pub fn descent_staleness(&self) -> f64 {
        self.tau_max as f64 * (self.diameter as f64 + 1.0) + 1.0
    }

    /// Staleness coefficient the descent derivation actually telescopes to,
    /// `history_window + 1`.
    pub fn window_staleness(&self) -> f64 {
        self.history_window as f64 + 1.0
    }
}

/// Squared voltage profile with all controllable injections at zero:
/// `v0 * 1 + R p_load + X q_load`.  Uncontrolled (load) injections are folded
/// in here once so that both the controller and the oracle optimize relative
/// to the same operating point.
pub fn base_voltage(
    sens: &SensitivityMatrices,
    v0: f64,
    p_load: &DVector<f64>,
    q_load: &DVector<f64>,
) -> DVector<f64> {
    let mut v = DVector::from_element(sens.n(), v0);
    v.gemv(1.0, &sens.r, p_load, 1.0);
    v.gemv(1.0, &sens.x, q_load, 1.0);
    v
}

/// Injections that minimize the price-adjusted cost at the given prices:
/// bus `i` solves its local problem with targets `[R lam]_i`, `[X lam]_i`.
pub fn primal_from_dual(
    dual: &DualPoint,
    sens: &SensitivityMatrices,
    costs: &CostParams,
    limits: &Limits,
) -> (DVector<f64>, DVector<f64>) {
    let n = dual.n();
    let lam = dual.net();
    let zp = &sens.r * &lam;
    let zq = &sens.x * &lam;
    let mut p = DVector::zeros(n);
    let mut q = DVector::zeros(n);
    for k in 0..n {
        let bus = k + 1;
        let cost = costs.row(bus);
        let bx = limits.bus_box(bus);
        let (pi, qi) = if bx.s_bar.is_some() {
            agent::local_control_general(zp[k], zq[k], cost, bx)
                .expect("local feasible sets are validated non-empty at construction")
        } else {
            agent::local_control(zp[k], zq[k], cost, bx)
        };
        p[k] = pi;
        q[k] = qi;
    }
    (p, q)
}

/// Value of the dual function at `dual`: the Lagrangian minimized over the
/// local feasible sets, with voltage-band multipliers fixed at the given
/// prices.
pub fn dual_value(
    dual: &DualPoint,
    sens: &SensitivityMatrices,
    costs: &CostParams,
    limits: &Limits,
    v_base: &DVector<f64>,
) -> f64 {
    let (p, q) = primal_from_dual(dual, sens, costs, limits);
    let v = voltage_at(sens, &p, &q, v_base);
    let mut val = costs.total(&p, &q);
    for k in 0..dual.n() {
        val += dual.lam_lo[k] * (limits.v_lo[k] - v[k]);
        val += dual.lam_hi[k] * (v[k] - limits.v_hi[k]);
    }
    val
}

/// Gradient of the dual function, stacked `[d/d lam_lo; d/d lam_hi]`:
/// the band violations `[v_lo - v; v - v_hi]` at the prices' own minimizer.
pub fn dual_grad(
    dual: &DualPoint,
    sens: &SensitivityMatrices,
    costs: &CostParams,
    limits: &Limits,
    v_base: &DVector<f64>,
) -> DVector<f64> {
    let (p, q) = primal_from_dual(dual, sens, costs, limits);
    let v = voltage_at(sens, &p, &q, v_base);
    let n = dual.n();
    let mut g = DVector::zeros(2 * n);
    for k in 0..n {
        g[k] = limits.v_lo[k] - v[k];
        g[n + k] = v[k] - limits.v_hi[k];
    }
    g
}

/// Squared voltages under the linear model relative to a precomputed base
/// profile.
pub fn voltage_at(
    sens: &SensitivityMatrices,
    p: &DVector<f64>,
    q: &DVector<f64>,
    v_base: &DVector<f64>,
) -> DVector<f64> {
    let mut v = v_base.clone();
    v.gemv(1.0, &sens.r, p, 1.0);
    v.gemv(1.0, &sens.x, q, 1.0);
    v
}

/// Output of [`centralized_solve`].
#[derive(Debug, Clone)]
pub struct CentralSolution {
    pub p: DVector<f64>,
    pub q: DVector<f64>,
    pub dual: DualPoint,
    /// Ascent iterations actually performed.
    pub iterations: usize,
    /// Infinity norm of the final price update.
    pub last_step: f64,
}

/// The centralized ascent ran out of iterations before the price updates
/// settled.
#[derive(Debug, Clone, Error)]
#[error(
    "centralized dual ascent did not converge within {iterations} iterations \
     (last price step {last_step:.3e}, tolerance {tol:.3e})"
)]
pub struct NoConvergence {
    pub iterations: usize,
    pub last_step: f64,
    pub tol: f64,
}

/// Solve the voltage-regulation problem by projected gradient ascent on the
/// dual, stopping when the infinity norm of a price update drops to `tol`.
pub fn centralized_solve(
    sens: &SensitivityMatrices,
    costs: &CostParams,
    limits: &Limits,
    v_base: &DVector<f64>,
    gamma: f64,
    tol: f64,
    max_iter: usize,
) -> Result<CentralSolution, NoConvergence> {
    let n = sens.n();
    let mut dual = DualPoint::zeros(n);
    let mut last_step = f64::INFINITY;
    for it in 1..=max_iter {
        let g = dual_grad(&dual, sens, costs, limits, v_base);
        let mut step = 0.0f64;
        for k in 0..n {
            let lo = (dual.lam_lo[k] + gamma * g[k]).max(0.0);
            let hi = (dual.lam_hi[k] + gamma * g[n + k]).max(0.0);
            step = step.max((lo - dual.lam_lo[k]).abs());
            step = step.max((hi - dual.lam_hi[k]).abs());
            dual.lam_lo[k] = lo;
            dual.lam_hi[k] = hi;
        }
        last_step = step;
        if step <= tol {
            let (p, q) = primal_from_dual(&dual, sens, costs, limits);
            return Ok(CentralSolution {
                p,
                q,
                dual,
                iterations: it,
                last_step,
            });
        }
    }
    Err(NoConvergence {
        iterations: max_iter,
        last_step,
        tol,
    })
}

/// First-order optimality residuals for a candidate primal/dual pair,
/// measured without reusing any of the ascent machinery that produced it.
#[derive(Debug, Clone)]
pub struct KktReport {
    /// Distance from each bus's injection to the projection of its own
    /// gradient step onto its feasible set (infinity norm over buses).
    pub stationarity: f64,
    /// Worst violation of voltage bands, injection boxes, and apparent-power
    /// caps.
    pub primal_feasibility: f64,
    /// Worst negative part of any price.
    pub dual_feasibility: f64,
    /// Worst product of a price and its band slack.
    pub complementarity: f64,
}

impl KktReport {
    /// Largest of the four residuals.
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal_feasibility)
            .max(self.dual_feasibility)
            .max(self.complementarity)
    }
}

/// Evaluate KKT residuals for `(p, q)` with prices `dual`.
///
/// Stationarity is measured as `max_i |(p_i, q_i) - P_i[(p_i, q_i) -
/// grad_i]|` where `P_i` projects onto bus `i`'s feasible set; at an exact
/// saddle point this is zero.
pub fn kkt_residual(
    p: &DVector<f64>,
    q: &DVector<f64>,
    dual: &DualPoint,
    sens: &SensitivityMatrices,
    costs: &CostParams,
    limits: &Limits,
    v_base: &DVector<f64>,
) -> KktReport {
    let n = sens.n();
    let lam = dual.net();
    let rl = &sens.r * &lam;
    let xl = &sens.x * &lam;
    let v = voltage_at(sens, p, q, v_base);

    let unit = crate::agent::BusCost::curvature(1.0, 1.0);
    let mut stationarity = 0.0f64;
    let mut primal = 0.0f64;
    for k in 0..n {
        let bus = k + 1;
        let cost = costs.row(bus);
        let bx = limits.bus_box(bus);
        // Lagrangian gradient in (p_i, q_i); the voltage term contributes
        // -[R lam]_i because raising p_i raises v_i, which relaxes the lower
        // band priced by lam_lo and tightens the upper band priced by lam_hi.
        let gp = cost.a_p * p[k] + cost.b_p - rl[k];
        let gq = cost.a_q * q[k] + cost.b_q - xl[k];
        let (pp, pq) = if bx.s_bar.is_some() {
            agent::local_control_general(p[k] - gp, q[k] - gq, &unit, bx)
                .expect("local feasible sets are validated non-empty at construction")
        } else {
            agent::local_control(p[k] - gp, q[k] - gq, &unit, bx)
        };
        stationarity = stationarity.max((p[k] - pp).abs()).max((q[k] - pq).abs());

        primal = primal
            .max(limits.v_lo[k] - v[k])
            .max(v[k] - limits.v_hi[k])
            .max(bx.p_lo - p[k])
            .max(p[k] - bx.p_hi)
            .max(bx.q_lo - q[k])
            .max(q[k] - bx.q_hi);
        if let Some(s) = bx.s_bar {
            primal = primal.max(p[k] * p[k] + q[k] * q[k] - s * s);
        }
    }
    primal = primal.max(0.0);

    let mut dualf = 0.0f64;
    let mut comp = 0.0f64;
    for k in 0..n {
        dualf = dualf.max(-dual.lam_lo[k]).max(-dual.lam_hi[k]);
        comp = comp
            .max((dual.lam_lo[k] * (limits.v_lo[k] - v[k])).abs())
            .max((dual.lam_hi[k] * (v[k] - limits.v_hi[k])).abs());
    }

    KktReport {
        stationarity,
        primal_feasibility: primal,
        dual_feasibility: dualf,
        complementarity: comp,
    }
}
