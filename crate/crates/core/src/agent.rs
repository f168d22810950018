//! Per-bus controller: local control laws, dual (price) updates, and the
//! quantities each bus exchanges with its tree neighbors.
//!
//! Every non-root bus runs the same loop. It keeps a pair of non-negative
//! prices for its lower and upper voltage limits, folds prices received from
//! its subtree and its parent into a local accumulator `z`, and picks its
//! injection by minimizing its quadratic cost minus `z`-weighted power over
//! its feasible set. All functions here are pure; the simulation engine owns
//! ordering and message delivery.

use std::collections::BTreeMap;

use nalgebra::DVector;
use thiserror::Error;

use crate::net::BusId;

/// Quadratic cost coefficients for one bus:
/// `C(p, q) = a_p/2·p² + b_p·p + c_p + a_q/2·q² + b_q·q + c_q`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BusCost {
    pub a_p: f64,
    pub b_p: f64,
    pub c_p: f64,
    pub a_q: f64,
    pub b_q: f64,
    pub c_q: f64,
}

impl BusCost {
    /// Uniform curvature with zero linear and constant terms.
    pub fn curvature(a_p: f64, a_q: f64) -> Self {
        BusCost {
            a_p,
            b_p: 0.0,
            c_p: 0.0,
            a_q,
            b_q: 0.0,
            c_q: 0.0,
        }
    }

    pub fn eval(&self, p: f64, q: f64) -> f64 {
        0.5 * self.a_p * p * p
            + self.b_p * p
            + self.c_p
            + 0.5 * self.a_q * q * q
            + self.b_q * q
            + self.c_q
    }
}

/// Cost table over the non-root buses; row `k` is bus `k + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostParams {
    rows: Vec<BusCost>,
}

/// Errors raised when validating cost or limit tables.
#[derive(Debug, Error, PartialEq)]
pub enum ParamError {
    #[error("bus {0}: cost curvatures must be finite and strictly positive")]
    BadCurvature(BusId),
    #[error("bus {0}: box limits must be finite with lo <= hi")]
    BadBox(BusId),
    #[error("bus {0}: apparent-power cap must be finite and positive")]
    BadCap(BusId),
    #[error("bus {0}: box and apparent-power cap have empty intersection")]
    EmptyLocalSet(BusId),
    #[error("bus {0}: voltage limits must satisfy 0 < lo < hi")]
    BadVoltageBand(BusId),
}

impl CostParams {
    pub fn new(rows: Vec<BusCost>) -> Result<Self, ParamError> {
        for (k, r) in rows.iter().enumerate() {
            let ok = r.a_p.is_finite()
                && r.a_q.is_finite()
                && r.a_p > 0.0
                && r.a_q > 0.0
                && r.b_p.is_finite()
                && r.b_q.is_finite()
                && r.c_p.is_finite()
                && r.c_q.is_finite();
            if !ok {
                return Err(ParamError::BadCurvature(k + 1));
            }
        }
        Ok(CostParams { rows })
    }

    pub fn uniform(n: usize, row: BusCost) -> Self {
        Self::new(vec![row; n]).expect("uniform rows validated by caller")
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, bus: BusId) -> &BusCost {
        &self.rows[bus - 1]
    }

    /// Smallest curvature over all buses and both axes.
    pub fn a_min(&self) -> f64 {
        self.rows
            .iter()
            .flat_map(|r| [r.a_p, r.a_q])
            .fold(f64::INFINITY, f64::min)
    }

    /// Total cost of an injection profile.
    pub fn total(&self, p: &DVector<f64>, q: &DVector<f64>) -> f64 {
        self.rows
            .iter()
            .zip(p.iter().zip(q.iter()))
            .map(|(r, (&pi, &qi))| r.eval(pi, qi))
            .sum()
    }
}

/// Injection limits for one bus: a box, plus an optional apparent-power cap
/// `p² + q² ≤ s̄²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BusBox {
    pub p_lo: f64,
    pub p_hi: f64,
    pub q_lo: f64,
    pub q_hi: f64,
    pub s_bar: Option<f64>,
}

impl BusBox {
    pub fn symmetric(p: f64, q: f64) -> Self {
        BusBox {
            p_lo: -p,
            p_hi: p,
            q_lo: -q,
            q_hi: q,
            s_bar: None,
        }
    }

    pub fn with_cap(mut self, s_bar: f64) -> Self {
        self.s_bar = Some(s_bar);
        self
    }

    /// Whether `(p, q)` lies inside the box and cap, with `slack` tolerance
    /// on the squared cap.
    pub fn contains(&self, p: f64, q: f64, slack: f64) -> bool {
        let boxed = p >= self.p_lo && p <= self.p_hi && q >= self.q_lo && q <= self.q_hi;
        match self.s_bar {
            None => boxed,
            Some(s) => boxed && p * p + q * q <= s * s + slack,
        }
    }
}

/// Injection and voltage limits over the non-root buses. Voltage limits are
/// squared magnitudes (per-unit²), one pair per bus.
#[derive(Debug, Clone, PartialEq)]
pub struct Limits {
    boxes: Vec<BusBox>,
    pub v_lo: DVector<f64>,
    pub v_hi: DVector<f64>,
}

impl Limits {
    pub fn new(
        boxes: Vec<BusBox>,
        v_lo: DVector<f64>,
        v_hi: DVector<f64>,
    ) -> Result<Self, ParamError> {
        assert_eq!(boxes.len(), v_lo.len());
        assert_eq!(boxes.len(), v_hi.len());
        for (k, b) in boxes.iter().enumerate() {
            let bus = k + 1;
            let finite = b.p_lo.is_finite()
                && b.p_hi.is_finite()
                && b.q_lo.is_finite()
                && b.q_hi.is_finite();
            if !finite || b.p_lo > b.p_hi || b.q_lo > b.q_hi {
                return Err(ParamError::BadBox(bus));
            }
            if let Some(s) = b.s_bar {
                if !s.is_finite() || s <= 0.0 {
                    return Err(ParamError::BadCap(bus));
                }
                // The box point nearest the origin must respect the cap.
                let pc = clamp(0.0, b.p_lo, b.p_hi);
                let qc = clamp(0.0, b.q_lo, b.q_hi);
                if pc * pc + qc * qc > s * s {
                    return Err(ParamError::EmptyLocalSet(bus));
                }
            }
            if !(v_lo[k] > 0.0 && v_hi[k] > v_lo[k] && v_hi[k].is_finite()) {
                return Err(ParamError::BadVoltageBand(bus));
            }
        }
        Ok(Limits { boxes, v_lo, v_hi })
    }

    /// Same box at every bus and a uniform voltage band given as squared
    /// magnitudes.
    pub fn uniform(n: usize, bx: BusBox, v_lo: f64, v_hi: f64) -> Result<Self, ParamError> {
        Self::new(
            vec![bx; n],
            DVector::from_element(n, v_lo),
            DVector::from_element(n, v_hi),
        )
    }

    pub fn n(&self) -> usize {
        self.boxes.len()
    }

    pub fn bus_box(&self, bus: BusId) -> &BusBox {
        &self.boxes[bus - 1]
    }

    pub fn has_caps(&self) -> bool {
        self.boxes.iter().any(|b| b.s_bar.is_some())
    }

    /// Largest voltage-limit violation of a squared-voltage profile,
    /// measured in magnitude (per-unit) terms.
    pub fn magnitude_violation(&self, v: &DVector<f64>) -> f64 {
        let mut worst: f64 = 0.0;
        for k in 0..self.boxes.len() {
            let mag = v[k].max(0.0).sqrt();
            worst = worst.max(self.v_lo[k].sqrt() - mag);
            worst = worst.max(mag - self.v_hi[k].sqrt());
        }
        worst.max(0.0)
    }
}

fn clamp(x: f64, lo: f64, hi: f64) -> f64 {
    x.max(lo).min(hi)
}

/// Box-constrained local control: the minimizer of
/// `a/2·u² + b·u − z·u` over `[lo, hi]`, independently per axis.
pub fn local_control(z_p: f64, z_q: f64, cost: &BusCost, bx: &BusBox) -> (f64, f64) {
    (
        clamp((z_p - cost.b_p) / cost.a_p, bx.p_lo, bx.p_hi),
        clamp((z_q - cost.b_q) / cost.a_q, bx.q_lo, bx.q_hi),
    )
}

/// The local feasible set (box ∩ apparent-power cap) is empty, so no
/// injection can be chosen.
#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("local feasible set is empty")]
pub struct InfeasibleLocalSet;

/// Local control over the box intersected with an apparent-power cap.
///
/// If the box-clamped point respects the cap it is returned unchanged.
/// Otherwise the cap is active at the optimum and the minimizer is found by
/// bisecting on the cap multiplier `μ`: for fixed `μ` the problem separates
/// into per-axis clamps with stiffened curvature `a + 2μ`, and the squared
/// radius of that point is non-increasing in `μ`. The returned point always
/// satisfies the cap (we keep the feasible end of the bracket).
pub fn local_control_general(
    z_p: f64,
    z_q: f64,
    cost: &BusCost,
    bx: &BusBox,
) -> Result<(f64, f64), InfeasibleLocalSet> {
    let free = local_control(z_p, z_q, cost, bx);
    let Some(s) = bx.s_bar else { return Ok(free) };
    let s2 = s * s;
    if free.0 * free.0 + free.1 * free.1 <= s2 {
        return Ok(free);
    }
    // Feasibility: the box point nearest the origin must be inside the cap.
    let pc = clamp(0.0, bx.p_lo, bx.p_hi);
    let qc = clamp(0.0, bx.q_lo, bx.q_hi);
    let nearest = pc * pc + qc * qc;
    if nearest > s2 {
        return Err(InfeasibleLocalSet);
    }
    if nearest == s2 {
        // The cap touches the box in exactly one point.
        return Ok((pc, qc));
    }

    let point = |mu: f64| -> (f64, f64) {
        (
            clamp((z_p - cost.b_p) / (cost.a_p + 2.0 * mu), bx.p_lo, bx.p_hi),
            clamp((z_q - cost.b_q) / (cost.a_q + 2.0 * mu), bx.q_lo, bx.q_hi),
        )
    };
    let excess = |mu: f64| -> f64 {
        let (p, q) = point(mu);
        p * p + q * q - s2
    };

    // Bracket the root: excess(0) > 0, and excess tends to nearest − s² < 0.
    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut grow = 0;
    while excess(hi) > 0.0 {
        lo = hi;
        hi *= 4.0;
        grow += 1;
        if grow > 200 {
            // Only reachable through floating-point degeneracy; the nearest
            // box point is the limit and it is feasible.
            return Ok((pc, qc));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if excess(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if excess(hi) >= -1e-10 && hi - lo <= 1e-12 * (1.0 + hi) {
            break;
        }
    }
    Ok(point(hi))
}

/// One bus's dual state after a price update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualPair {
    pub lam_lo: f64,
    pub lam_hi: f64,
}

impl DualPair {
    /// Net price `λ = λ_lo − λ_hi` entering the accumulator updates.
    pub fn net(&self) -> f64 {
        self.lam_lo - self.lam_hi
    }
}

/// Projected subgradient step on both voltage prices:
/// rise when the measured squared voltage sits outside its band, decay
/// toward zero otherwise, never below zero.
pub fn dual_update(
    lam_lo: f64,
    lam_hi: f64,
    v_meas: f64,
    v_lo: f64,
    v_hi: f64,
    gamma: f64,
) -> DualPair {
    DualPair {
        lam_lo: (lam_lo + gamma * (v_lo - v_meas)).max(0.0),
        lam_hi: (lam_hi + gamma * (v_meas - v_hi)).max(0.0),
    }
}

/// Aggregate a bus sends to its parent: its own fresh net price plus the
/// last aggregates heard from each child.
pub fn make_alpha(lam_net: f64, stale_child_sum: f64) -> f64 {
    lam_net + stale_child_sum
}

/// Pair a bus sends to one child `j`: its diagonal sensitivities times the
/// subtree price mass excluding `j`'s own branch, plus the pair last heard
/// from its parent (zero when the parent is the substation).
pub fn make_beta(
    lam_net: f64,
    stale_child_sum_excl: f64,
    stale_beta_in: (f64, f64),
    r_diag: f64,
    x_diag: f64,
) -> (f64, f64) {
    let mass = lam_net + stale_child_sum_excl;
    (
        r_diag * mass + stale_beta_in.0,
        x_diag * mass + stale_beta_in.1,
    )
}

/// Refresh of the local accumulators from the newest inbox contents.
pub fn update_z(
    lam_net: f64,
    fresh_child_sum: f64,
    fresh_beta_in: (f64, f64),
    r_diag: f64,
    x_diag: f64,
) -> (f64, f64) {
    let mass = lam_net + fresh_child_sum;
    (
        r_diag * mass + fresh_beta_in.0,
        x_diag * mass + fresh_beta_in.1,
    )
}

/// A value last received from a neighbor, stamped with the price-update
/// index it was generated at. Newer stamps overwrite older ones; late
/// arrivals that are older than the stored value are dropped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stamped<T> {
    pub value: T,
    pub gen: u64,
}

impl<T: Default> Default for Stamped<T> {
    fn default() -> Self {
        Stamped {
            value: T::default(),
            gen: 0,
        }
    }
}

/// Full per-bus controller state.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub lam_lo: f64,
    pub lam_hi: f64,
    pub z_p: f64,
    pub z_q: f64,
    pub p: f64,
    pub q: f64,
    /// Latest aggregate heard from each child, keyed by child id.
    pub alpha_in: BTreeMap<BusId, Stamped<f64>>,
    /// Latest pair heard from the parent; stays zero for buses fed directly
    /// by the substation.
    pub beta_in: Stamped<(f64, f64)>,
}

impl AgentState {
    /// Fresh state with zero prices, accumulators, and inbox.
    pub fn new(children: &[BusId]) -> Self {
        AgentState {
            lam_lo: 0.0,
            lam_hi: 0.0,
            z_p: 0.0,
            z_q: 0.0,
            p: 0.0,
            q: 0.0,
            alpha_in: children.iter().map(|&c| (c, Stamped::default())).collect(),
            beta_in: Stamped::default(),
        }
    }

    pub fn lam_net(&self) -> f64 {
        self.lam_lo - self.lam_hi
    }

    /// Sum of the stored child aggregates.
    pub fn child_alpha_sum(&self) -> f64 {
        self.alpha_in.values().map(|s| s.value).sum()
    }
}

/// Payload of one neighbor-to-neighbor message.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// Child → parent subtree aggregate.
    Alpha(f64),
    /// Parent → child pair of path-weighted price masses.
    Beta(f64, f64),
}

/// A message in flight between tree neighbors.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub from: BusId,
    pub to: BusId,
    /// Price-update index the payload was generated from.
    pub gen: u64,
    pub payload: Payload,
    /// Source bus → price index, tracked only when provenance recording is
    /// enabled on the engine.
    pub prov: Option<BTreeMap<BusId, u64>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_cost() -> BusCost {
        BusCost::curvature(1.0, 1.0)
    }

    #[test]
    fn local_control_clamps_to_box() {
        let c = BusCost::curvature(2.0, 2.0);
        let bx = BusBox::symmetric(0.1, 0.1);
        let (p, q) = local_control(0.5, 0.0, &c, &bx);
        assert_eq!(p, 0.1);
        assert_eq!(q, 0.0);
        let (p, _) = local_control(-0.5, 0.0, &c, &bx);
        assert_eq!(p, -0.1);
        let (p, q) = local_control(0.1, -0.06, &c, &bx);
        assert!((p - 0.05).abs() < 1e-15);
        assert!((q + 0.03).abs() < 1e-15);
    }

    #[test]
    fn general_control_matches_box_when_cap_slack() {
        let c = BusCost::curvature(1.0, 2.0);
        let bx = BusBox::symmetric(0.1, 0.1).with_cap(1.0);
        for z in [(-0.3, 0.2), (0.05, -0.02), (0.0, 0.0)] {
            let a = local_control(z.0, z.1, &c, &bx);
            let b = local_control_general(z.0, z.1, &c, &bx).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn general_control_lands_on_cap_boundary() {
        let c = unit_cost();
        let bx = BusBox::symmetric(0.1, 0.1).with_cap(0.12);
        let (p, q) = local_control_general(0.5, 0.5, &c, &bx).unwrap();
        let s2 = p * p + q * q;
        assert!(s2 <= 0.12 * 0.12 + 1e-15);
        assert!(0.12 * 0.12 - s2 <= 1e-10, "cap should be active: {s2}");
        assert!((p - q).abs() < 1e-9, "symmetric pull gives symmetric point");
    }

    /// Two-stage grid search oracle over the feasible set.
    fn grid_argmin(z_p: f64, z_q: f64, c: &BusCost, bx: &BusBox) -> (f64, f64) {
        let objective = |p: f64, q: f64| c.eval(p, q) - z_p * p - z_q * q;
        let feasible = |p: f64, q: f64| bx.contains(p, q, 1e-15);
        let mut best = (f64::NAN, f64::NAN);
        let mut best_val = f64::INFINITY;
        let scan = |p_lo: f64,
                    p_hi: f64,
                    q_lo: f64,
                    q_hi: f64,
                    steps: usize,
                    best: &mut (f64, f64),
                    best_val: &mut f64| {
            for i in 0..=steps {
                let p = p_lo + (p_hi - p_lo) * i as f64 / steps as f64;
                for j in 0..=steps {
                    let q = q_lo + (q_hi - q_lo) * j as f64 / steps as f64;
                    if feasible(p, q) {
                        let v = objective(p, q);
                        if v < *best_val {
                            *best_val = v;
                            *best = (p, q);
                        }
                    }
                }
            }
        };
        scan(
            bx.p_lo,
            bx.p_hi,
            bx.q_lo,
            bx.q_hi,
            400,
            &mut best,
            &mut best_val,
        );
        let w_p = (bx.p_hi - bx.p_lo) / 400.0;
        let w_q = (bx.q_hi - bx.q_lo) / 400.0;
        let (bp, bq) = best;
        scan(
            (bp - w_p).max(bx.p_lo),
            (bp + w_p).min(bx.p_hi),
            (bq - w_q).max(bx.q_lo),
            (bq + w_q).min(bx.q_hi),
            400,
            &mut best,
            &mut best_val,
        );
        best
    }

    #[test]
    fn general_control_matches_grid_search() {
        let cases = [
            (0.5, 0.5, BusCost::curvature(1.0, 1.0)),
            (0.4, -0.3, BusCost::curvature(1.0, 2.0)),
            (-0.2, -0.5, BusCost::curvature(1.5, 1.0)),
            (
                0.3,
                0.1,
                BusCost {
                    a_p: 1.2,
                    b_p: 0.05,
                    c_p: 0.0,
                    a_q: 1.8,
                    b_q: -0.02,
                    c_q: 0.0,
                },
            ),
        ];
        let bx = BusBox::symmetric(0.1, 0.1).with_cap(0.12);
        for (z_p, z_q, c) in cases {
            let (p, q) = local_control_general(z_p, z_q, &c, &bx).unwrap();
            let (gp, gq) = grid_argmin(z_p, z_q, &c, &bx);
            let ours = c.eval(p, q) - z_p * p - z_q * q;
            let grid = c.eval(gp, gq) - z_p * gp - z_q * gq;
            assert!(
                ours <= grid + 1e-6,
                "objective {ours} worse than grid {grid} for z=({z_p},{z_q})"
            );
            assert!((p - gp).abs() < 1e-3 && (q - gq).abs() < 1e-3);
        }
    }

    #[test]
    fn infeasible_local_set_is_reported() {
        let bx = BusBox {
            p_lo: 0.5,
            p_hi: 1.0,
            q_lo: 0.5,
            q_hi: 1.0,
            s_bar: Some(0.1),
        };
        assert_eq!(
            local_control_general(0.0, 0.0, &unit_cost(), &bx),
            Err(InfeasibleLocalSet)
        );
        // The same geometry is rejected when building a limits table.
        let e = Limits::new(
            vec![bx],
            DVector::from_element(1, 0.9),
            DVector::from_element(1, 1.1),
        )
        .unwrap_err();
        assert_eq!(e, ParamError::EmptyLocalSet(1));
    }

    #[test]
    fn dual_update_examples() {
        // Under-voltage raises the lower price.
        let d = dual_update(0.2, 0.0, 0.8825, 0.9025, 1.1025, 0.5);
        assert!((d.lam_lo - 0.21).abs() < 1e-15);
        assert_eq!(d.lam_hi, 0.0);
        // Prices never go negative.
        let d = dual_update(0.01, 0.0, 1.0, 0.9025, 1.1025, 0.5);
        assert_eq!(d.lam_lo, 0.0);
        // Sitting exactly on the upper limit leaves the price unchanged.
        let d = dual_update(0.0, 0.3, 1.1025, 0.9025, 1.1025, 0.5);
        assert_eq!(d.lam_hi, 0.3);
        assert!((d.net() + 0.3).abs() < 1e-15);
    }

    #[test]
    fn message_quantity_examples() {
        // Bus fed by the substation, one other child branch with aggregate 0.2.
        let (bp, bq) = make_beta(0.1, 0.2, (0.0, 0.0), 0.4, 0.8);
        assert!((bp - 0.12).abs() < 1e-15);
        assert!((bq - 0.24).abs() < 1e-15);
        // Leaf refreshing its accumulators from that pair.
        let (zp, zq) = update_z(0.05, 0.0, (0.12, 0.24), 0.4, 0.8);
        assert!((zp - 0.14).abs() < 1e-15);
        assert!((zq - 0.28).abs() < 1e-15);
        assert_eq!(make_alpha(0.05, 0.3), 0.35);
    }

    #[test]
    fn a_min_scans_both_axes() {
        let costs = CostParams::new(vec![
            BusCost::curvature(2.0, 1.5),
            BusCost::curvature(3.0, 0.7),
        ])
        .unwrap();
        assert_eq!(costs.a_min(), 0.7);
    }

    #[test]
    fn cost_table_rejects_bad_curvature() {
        let e = CostParams::new(vec![BusCost::curvature(0.0, 1.0)]).unwrap_err();
        assert_eq!(e, ParamError::BadCurvature(1));
    }
}
