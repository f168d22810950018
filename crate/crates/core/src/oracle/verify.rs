//! Replay checks that confirm a recorded trajectory behaves exactly as the
//! analysis of the distributed controller says it must.
//!
//! Three families of checks live here:
//!
//! * **Accumulator closed forms** — the neighbor-message recursion is
//!   supposed to make each bus's accumulator a sensitivity-weighted sum of
//!   *lagged* network prices.  With no delays the lags are fixed by topology
//!   ([`check_zero_delay_recursion`]); with bounded delays the recursion's
//!   own provenance certificate pins each contribution to a price index, and
//!   the lag of every contribution must stay within `(tau_max + 1) * d`
//!   ([`check_bounded_delay_recursion`]).
//! * **Price replay** — the distributed price update must coincide with a
//!   projected gradient step driven by measured voltages
//!   ([`check_dual_ascent_replay`]).
//! * **Ascent quality** — the gap between the stale gradient the controller
//!   used and the true dual gradient is bounded by recent price movement,
//!   and the dual value obeys a cumulative descent-margin lower bound
//!   ([`check_descent`]).
//! * **Analytic soundness** — the closed-form dual gradient matches central
//!   finite differences at interior sample points
//!   ([`check_gradient_fd`]), and random gradient pairs respect the
//!   closed-form smoothness constant ([`check_lipschitz_pairs`]).
//!
//! All checks expect runs with linear physics, zero measurement noise, and
//! no model error: they compare against the same linear model the controller
//! is analyzed under.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::agent::{CostParams, Limits};
use crate::net::{RadialNetwork, SensitivityMatrices};
use crate::oracle::{dual_grad, dual_value, primal_from_dual, Constants, DualPoint};
use crate::sim::messages::ProvMap;

/// Outcome of replaying the accumulator recursion against a closed form.
#[derive(Debug, Clone)]
pub struct RecursionCheck {
    /// Worst absolute difference between a recursion accumulator and its
    /// closed-form reconstruction.
    pub max_abs_err: f64,
    /// Largest price-index lag used by any reconstructed contribution.
    pub max_lag: u64,
    /// Ceiling the lags must respect.
    pub lag_bound: u64,
    /// Accumulator entries examined (iterations × buses × two axes).
    pub points: usize,
    /// Reconstruction tolerance.
    pub tol: f64,
}

impl RecursionCheck {
    pub fn passed(&self) -> bool {
        self.max_abs_err <= self.tol && self.max_lag <= self.lag_bound
    }
}

/// Structural lag between buses `i` and `j` under instant delivery: adjacent
/// buses and self-contributions are fresh; everything else arrives
/// `dist - 1` iterations late.
pub fn structural_lag(net: &RadialNetwork, i: usize, j: usize) -> u64 {
    net.dist(i, j).saturating_sub(1) as u64
}

/// Checks that with *no* communication delay every accumulator equals the
/// sensitivity-weighted price sum with purely topological lags:
/// `z_i(t) = sum_j S_ij * lam_j(t - lag(i,j))`, prices before the start of
/// the run reading as zero.
///
/// `lam_net` holds net prices for indices `0..=T`; `z_p`/`z_q` hold
/// accumulators for the same indices (entry 0 is the all-zero initial
/// state).
pub fn check_zero_delay_recursion(
    net: &RadialNetwork,
    sens: &SensitivityMatrices,
    lam_net: &[DVector<f64>],
    z_p: &[DVector<f64>],
    z_q: &[DVector<f64>],
) -> RecursionCheck {
    let n = net.num_buses();
    assert_eq!(lam_net.len(), z_p.len());
    assert_eq!(lam_net.len(), z_q.len());
    let mut max_abs_err = 0.0f64;
    let mut max_lag = 0u64;
    let mut points = 0usize;
    for (t, (zp_t, zq_t)) in z_p.iter().zip(z_q).enumerate() {
        for i in 1..=n {
            let mut rp = 0.0;
            let mut rq = 0.0;
            for j in 1..=n {
                let w_r = sens.r_at(i, j);
                let w_x = sens.x_at(i, j);
                if w_r == 0.0 && w_x == 0.0 {
                    continue;
                }
                let lag = structural_lag(net, i, j);
                let lam_j = if (lag as usize) <= t {
                    lam_net[t - lag as usize][j - 1]
                } else {
                    0.0
                };
                if lam_j != 0.0 {
                    max_lag = max_lag.max(lag);
                }
                rp += w_r * lam_j;
                rq += w_x * lam_j;
            }
            max_abs_err = max_abs_err
                .max((rp - zp_t[i - 1]).abs())
                .max((rq - zq_t[i - 1]).abs());
            points += 2;
        }
    }
    RecursionCheck {
        max_abs_err,
        max_lag,
        lag_bound: net.diameter() as u64,
        points,
        tol: 1e-12,
    }
}

/// Checks that under bounded delays every accumulator is still a
/// sensitivity-weighted sum of lagged prices, using the recursion's
/// provenance certificate: `prov[t][bus-1]` maps each contributing source to
/// the price index it carried.  Sources with nonzero weight that have not
/// contributed yet count as lag `t` (their slot still holds the initial
/// zero), so the lag bound also proves every bus eventually hears its whole
/// branch.
pub fn check_bounded_delay_recursion(
    net: &RadialNetwork,
    sens: &SensitivityMatrices,
    lam_net: &[DVector<f64>],
    z_p: &[DVector<f64>],
    z_q: &[DVector<f64>],
    prov: &[Vec<ProvMap>],
    tau_max: u32,
) -> RecursionCheck {
    let n = net.num_buses();
    assert_eq!(lam_net.len(), z_p.len());
    assert_eq!(lam_net.len(), prov.len());
    let lag_bound = (tau_max as u64 + 1) * net.diameter() as u64;
    let mut max_abs_err = 0.0f64;
    let mut max_lag = 0u64;
    let mut points = 0usize;
    for (t, (zp_t, zq_t)) in z_p.iter().zip(z_q).enumerate() {
        for i in 1..=n {
            let map = &prov[t][i - 1];
            let mut rp = 0.0;
            let mut rq = 0.0;
            for j in 1..=n {
                let w_r = sens.r_at(i, j);
                let w_x = sens.x_at(i, j);
                if w_r == 0.0 && w_x == 0.0 {
                    continue;
                }
                match map.get(&j) {
                    Some(&g) => {
                        debug_assert!(g as usize <= t, "future price in provenance");
                        rp += w_r * lam_net[g as usize][j - 1];
                        rq += w_x * lam_net[g as usize][j - 1];
                        max_lag = max_lag.max(t as u64 - g);
                    }
                    // Never-heard source: the slot still holds its initial
                    // zero, equivalent to reading the price at index 0.
                    None => max_lag = max_lag.max(t as u64),
                }
            }
            max_abs_err = max_abs_err
                .max((rp - zp_t[i - 1]).abs())
                .max((rq - zq_t[i - 1]).abs());
            points += 2;
        }
    }
    RecursionCheck {
        max_abs_err,
        max_lag,
        lag_bound,
        points,
        tol: 1e-12,
    }
}

/// Checks that the recorded stacked prices follow the projected ascent
/// recursion `lam(t+1) = max(0, lam(t) + gamma * [v_lo - v(t); v(t) -
/// v_hi])` driven by the recorded voltages.  Returns the worst absolute
/// deviation; a faithful noise-free run reproduces the update bit for bit.
pub fn check_dual_ascent_replay(
    limits: &Limits,
    gamma: f64,
    lam_stacked: &[DVector<f64>],
    v: &[DVector<f64>],
) -> f64 {
    assert_eq!(
        lam_stacked.len(),
        v.len() + 1,
        "need prices for 0..=T and voltages for 0..T"
    );
    let mut worst = 0.0f64;
    for (t, v_t) in v.iter().enumerate() {
        let n = v_t.len();
        let cur = &lam_stacked[t];
        let next = &lam_stacked[t + 1];
        for k in 0..n {
            let lo = (cur[k] + gamma * (limits.v_lo[k] - v_t[k])).max(0.0);
            let hi = (cur[n + k] + gamma * (v_t[k] - limits.v_hi[k])).max(0.0);
            worst = worst
                .max((lo - next[k]).abs())
                .max((hi - next[n + k]).abs());
        }
    }
    worst
}

/// Outcome of [`check_gradient_fd`].
#[derive(Debug, Clone, Copy)]
pub struct GradientFdCheck {
    /// Worst per-coordinate error between central finite differences of the
    /// dual value and the analytic gradient, relative to the gradient norm.
    pub worst_rel: f64,
    /// Points that were interior enough to difference safely.
    pub checked: usize,
}

fn strictly_interior(p: &DVector<f64>, q: &DVector<f64>, limits: &Limits, margin: f64) -> bool {
    (0..p.len()).all(|k| {
        let bx = limits.bus_box(k + 1);
        let in_box = p[k] > bx.p_lo + margin
            && p[k] < bx.p_hi - margin
            && q[k] > bx.q_lo + margin
            && q[k] < bx.q_hi - margin;
        let off_cap = match bx.s_bar {
            Some(s) => p[k] * p[k] + q[k] * q[k] < (s - margin) * (s - margin),
            None => true,
        };
        in_box && off_cap
    })
}

/// Compares the analytic dual gradient with central finite differences of
/// the dual value at `count` random nonnegative price vectors.
///
/// Differencing is only trustworthy where the induced injections sit
/// strictly inside every box and cap (elsewhere the dual value has curvature
/// kinks), so samples whose injections touch a limit are discarded and the
/// sampling scale is halved until enough interior points turn up.
pub fn check_gradient_fd(
    sens: &SensitivityMatrices,
    costs: &CostParams,
    limits: &Limits,
    v_base: &DVector<f64>,
    count: usize,
    seed: u64,
) -> GradientFdCheck {
    let n = costs.n();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let h = 1e-6;
    let margin = 1e-4;
    let mut worst_rel = 0.0f64;
    let mut checked = 0usize;
    let mut scale = 1.0f64;
    for _round in 0..60 {
        let mut accepted = 0usize;
        for _ in 0..count {
            let stacked = DVector::from_fn(2 * n, |_, _| rng.gen_range(0.0..scale));
            let dual = DualPoint::from_stacked(&stacked);
            let (p, q) = primal_from_dual(&dual, sens, costs, limits);
            if !strictly_interior(&p, &q, limits, margin) {
                continue;
            }
            let grad = dual_grad(&dual, sens, costs, limits, v_base);
            let denom = grad.norm().max(1e-9);
            for k in 0..2 * n {
                let mut up = stacked.clone();
                up[k] += h;
                let mut dn = stacked.clone();
                dn[k] -= h;
                let fd = (dual_value(&DualPoint::from_stacked(&up), sens, costs, limits, v_base)
                    - dual_value(&DualPoint::from_stacked(&dn), sens, costs, limits, v_base))
                    / (2.0 * h);
                worst_rel = worst_rel.max((fd - grad[k]).abs() / denom);
            }
            checked += 1;
            accepted += 1;
            if checked >= count {
                return GradientFdCheck { worst_rel, checked };
            }
        }
        if accepted == 0 {
            scale *= 0.5;
        }
    }
    GradientFdCheck { worst_rel, checked }
}

/// Worst ratio `‖∇D(λ) − ∇D(μ)‖ / (L·‖λ − μ‖)` over random nonnegative
/// price pairs; at most 1 when the closed-form smoothness constant `L` is
/// sound.
pub fn check_lipschitz_pairs(
    sens: &SensitivityMatrices,
    costs: &CostParams,
    limits: &Limits,
    v_base: &DVector<f64>,
    lipschitz: f64,
    pairs: usize,
    seed: u64,
) -> f64 {
    let n = costs.n();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..pairs {
        let a = DVector::from_fn(2 * n, |_, _| rng.gen_range(0.0..1.0));
        let b = DVector::from_fn(2 * n, |_, _| rng.gen_range(0.0..1.0));
        let dist = (&a - &b).norm();
        if dist < 1e-9 {
            continue;
        }
        let ga = dual_grad(&DualPoint::from_stacked(&a), sens, costs, limits, v_base);
        let gb = dual_grad(&DualPoint::from_stacked(&b), sens, costs, limits, v_base);
        worst = worst.max((ga - gb).norm() / (lipschitz * dist));
    }
    worst
}

/// Outcome of [`check_descent`].
#[derive(Debug, Clone)]
pub struct DescentCheck {
    /// Worst value of `‖∇D(lam(t)) - g(t)‖ - L√N · (recent price movement)`
    /// over all iterations; nonpositive (up to slack) when the staleness
    /// bound holds.
    pub staleness_gap_max: f64,
    /// Worst margin of the cumulative lower bound
    /// `D(lam(t+1)) - D(lam(0)) - coeff · Σ ‖Δlam‖²` using the coefficient
    /// the telescoped derivation yields (`window_staleness`).
    pub margin_window_min: f64,
    /// Same margin using the alternative staleness count
    /// (`descent_staleness`).
    pub margin_alt_min: f64,
    /// The two cumulative-bound coefficients, window form and alternative
    /// form.
    pub coeff_window: f64,
    pub coeff_alt: f64,
    /// Total squared price movement `Σ ‖Δlam‖²`.
    pub sum_sq_steps: f64,
    /// Largest single-step price movement over the final stretch of the run
    /// (the longer of 100 iterations or 1% of the horizon).
    pub tail_max_step: f64,
    /// Whether the step size respects the primary theoretical ceiling.
    pub gamma_within_bound: bool,
    /// Iterations examined.
    pub checks: usize,
}

impl DescentCheck {
    /// True when the staleness bound and both cumulative lower bounds hold
    /// at every iteration (up to the floating-point slack baked into the
    /// margins) and the total squared movement is finite.
    pub fn passed(&self) -> bool {
        self.staleness_gap_max <= 0.0
            && self.margin_window_min >= 0.0
            && self.margin_alt_min >= 0.0
            && self.sum_sq_steps.is_finite()
    }
}

/// Verifies the two ascent-quality inequalities on a recorded noise-free
/// linear-physics run.
///
/// For every iteration `t`:
///
/// * the distance between the true dual gradient at the current prices and
///   the stale gradient the controller actually used (band violations of the
///   recorded voltages) is at most `L√N` times the sum of price-step norms
///   over the last `history_window` iterations, and
/// * the dual value sits above its starting value by at least
///   `(1/gamma - L/2 - c·L√N) · Σ ‖Δlam‖²` cumulated so far, for both
///   published staleness counts `c`.
///
/// Margins are reported with a small relative slack already subtracted
/// (gap) or added (margins), so `passed` is a plain sign test.
#[allow(clippy::too_many_arguments)]
pub fn check_descent(
    consts: &Constants,
    sens: &SensitivityMatrices,
    costs: &CostParams,
    limits: &Limits,
    v_base: &DVector<f64>,
    gamma: f64,
    lam_stacked: &[DVector<f64>],
    v: &[DVector<f64>],
) -> DescentCheck {
    let horizon = v.len();
    assert_eq!(lam_stacked.len(), horizon + 1);
    let n = consts.n;
    let sqrt_n = (n as f64).sqrt();
    let l = consts.lipschitz;

    // Price-step norms and their prefix sums for O(1) window sums.
    let step: Vec<f64> = (0..horizon)
        .map(|t| (&lam_stacked[t + 1] - &lam_stacked[t]).norm())
        .collect();
    let mut prefix = vec![0.0f64; horizon + 1];
    for t in 0..horizon {
        prefix[t + 1] = prefix[t] + step[t];
    }

    let mut staleness_gap_max = f64::NEG_INFINITY;
    for (t, v_t) in v.iter().enumerate() {
        let dual = DualPoint::from_stacked(&lam_stacked[t]);
        let grad = dual_grad(&dual, sens, costs, limits, v_base);
        let mut g = DVector::zeros(2 * n);
        for k in 0..n {
            g[k] = limits.v_lo[k] - v_t[k];
            g[n + k] = v_t[k] - limits.v_hi[k];
        }
        let lhs = (grad - g).norm();
        let window_start = t.saturating_sub(consts.history_window);
        let rhs = l * sqrt_n * (prefix[t] - prefix[window_start]);
        staleness_gap_max = staleness_gap_max.max(lhs - rhs - 1e-9 * (1.0 + rhs));
    }

    let coeff_window = 1.0 / gamma - l / 2.0 - consts.window_staleness() * l * sqrt_n;
    let coeff_alt = 1.0 / gamma - l / 2.0 - consts.descent_staleness() * l * sqrt_n;
    let d0 = dual_value(
        &DualPoint::from_stacked(&lam_stacked[0]),
        sens,
        costs,
        limits,
        v_base,
    );
    let mut margin_window_min = f64::INFINITY;
    let mut margin_alt_min = f64::INFINITY;
    let mut cum = 0.0f64;
    for t in 0..horizon {
        cum += step[t] * step[t];
        let d_next = dual_value(
            &DualPoint::from_stacked(&lam_stacked[t + 1]),
            sens,
            costs,
            limits,
            v_base,
        );
        let slack = |coeff: f64| 1e-9 * (1.0 + d0.abs() + (coeff * cum).abs());
        margin_window_min =
            margin_window_min.min(d_next - d0 - coeff_window * cum + slack(coeff_window));
        margin_alt_min = margin_alt_min.min(d_next - d0 - coeff_alt * cum + slack(coeff_alt));
    }

    let tail_len = (horizon / 100).max(100).min(horizon);
    let tail_max_step = step[horizon - tail_len..]
        .iter()
        .cloned()
        .fold(0.0f64, f64::max);

    DescentCheck {
        staleness_gap_max,
        margin_window_min,
        margin_alt_min,
        coeff_window,
        coeff_alt,
        sum_sq_steps: cum,
        tail_max_step,
        gamma_within_bound: gamma < consts.gamma_max,
        checks: horizon,
    }
}
