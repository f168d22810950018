//! Discrete-time simulation of the distributed voltage controller.
//!
//! Each iteration runs seven phases in a fixed order:
//!
//! 1. physics — solve for squared voltages at the currently applied
//!    injections plus this iteration's loads;
//! 2. measurement — add sensor noise;
//! 3. price update — every bus adjusts its voltage prices locally;
//! 4. production — every bus forms outgoing aggregates from the values
//!    already in its inbox and hands them to the delay model;
//! 5. delivery — messages due now land in inboxes (zero delay lands in the
//!    same iteration it was produced);
//! 6. accumulator refresh — every bus recomputes its price-weighted
//!    accumulators from the refreshed inbox;
//! 7. control — every bus picks next iteration's injection from its
//!    accumulators.
//!
//! The price a bus folds into phases 4–6 is always the one it just computed;
//! everything it hears from neighbors is whatever the delay model has
//! delivered so far. Identical scenarios and seeds reproduce identical
//! trajectories bit for bit.

pub mod delay;
pub mod messages;

use std::time::Instant;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::agent::{local_control, local_control_general, AgentState, CostParams, Limits};
use crate::flow::{linear_voltage, measure, solve_branch_flow, PowerFlowError};
use crate::net::{BusId, RadialNetwork, SensitivityMatrices};
use delay::{DelayModel, DelaySampler};
use messages::{MessagePass, ProvMap};

/// Which physical model produces the voltages the controller reacts to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Physics {
    /// Lossless linearized map; exactly the model the controller's theory
    /// assumes.
    Linear,
    /// Full branch-flow equations solved by sweeps each iteration.
    Nonlinear,
}

/// Fixed (p, q) load per bus, possibly varying over time. Loads add to the
/// controlled injections inside the physics step; iterations past the end
/// of a series see zero load.
#[derive(Debug, Clone, PartialEq)]
pub enum LoadProfile {
    None,
    Static {
        p: DVector<f64>,
        q: DVector<f64>,
    },
    Series {
        p: Vec<DVector<f64>>,
        q: Vec<DVector<f64>>,
    },
}

impl LoadProfile {
    fn at(&self, t: usize) -> Option<(&DVector<f64>, &DVector<f64>)> {
        match self {
            LoadProfile::None => None,
            LoadProfile::Static { p, q } => Some((p, q)),
            LoadProfile::Series { p, q } => {
                if t < p.len() {
                    Some((&p[t], &q[t]))
                } else {
                    None
                }
            }
        }
    }

    fn check_dims(&self, n: usize) -> bool {
        match self {
            LoadProfile::None => true,
            LoadProfile::Static { p, q } => p.len() == n && q.len() == n,
            LoadProfile::Series { p, q } => {
                p.len() == q.len()
                    && p.iter().all(|v| v.len() == n)
                    && q.iter().all(|v| v.len() == n)
            }
        }
    }
}

/// A complete, resolved simulation setup.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub net: RadialNetwork,
    pub costs: CostParams,
    pub limits: Limits,
    /// Substation squared voltage (per-unit²).
    pub v0: f64,
    /// Price step size (already resolved; never "auto" here).
    pub gamma: f64,
    pub horizon: usize,
    pub delay: DelayModel,
    /// Standard deviation of the squared-voltage measurement noise.
    pub noise_std: f64,
    /// When set, each bus's own diagonal sensitivities are scaled by
    /// independent uniform draws from this range; the physics always uses
    /// the true values.
    pub model_error: Option<(f64, f64)>,
    pub physics: Physics,
    pub loads: LoadProfile,
    pub seed: u64,
}

/// Scenario-level validation failures.
#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("cost table covers {got} buses but the network has {want}")]
    CostDimension { got: usize, want: usize },
    #[error("limit table covers {got} buses but the network has {want}")]
    LimitDimension { got: usize, want: usize },
    #[error("load profile dimensions do not match the network")]
    LoadDimension,
    #[error("step size must be finite and positive, got {0}")]
    BadGamma(f64),
    #[error("substation squared voltage must be finite and positive, got {0}")]
    BadBaseVoltage(f64),
    #[error("horizon must be at least 1")]
    BadHorizon,
    #[error("noise std must be finite and non-negative, got {0}")]
    BadNoise(f64),
    #[error("model error range must satisfy 0 < lo <= hi, got ({0}, {1})")]
    BadModelError(f64, f64),
    #[error("intermittent period must be at least 1")]
    BadDelay,
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let n = self.net.num_buses();
        if self.costs.n() != n {
            return Err(ScenarioError::CostDimension {
                got: self.costs.n(),
                want: n,
            });
        }
        if self.limits.n() != n {
            return Err(ScenarioError::LimitDimension {
                got: self.limits.n(),
                want: n,
            });
        }
        if !self.loads.check_dims(n) {
            return Err(ScenarioError::LoadDimension);
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(ScenarioError::BadGamma(self.gamma));
        }
        if !(self.v0.is_finite() && self.v0 > 0.0) {
            return Err(ScenarioError::BadBaseVoltage(self.v0));
        }
        if self.horizon == 0 {
            return Err(ScenarioError::BadHorizon);
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(ScenarioError::BadNoise(self.noise_std));
        }
        if let Some((lo, hi)) = self.model_error {
            if !(lo.is_finite() && hi.is_finite() && 0.0 < lo && lo <= hi) {
                return Err(ScenarioError::BadModelError(lo, hi));
            }
        }
        if let DelayModel::Intermittent(0) = self.delay {
            return Err(ScenarioError::BadDelay);
        }
        Ok(())
    }
}

/// Simulation failures.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Config(#[from] ScenarioError),
    #[error("physics diverged at iteration {tick}: {source}")]
    PhysicsDiverged { tick: u64, source: PowerFlowError },
    #[error("local feasible set empty at bus {bus}")]
    InfeasibleLocalSet { bus: BusId },
}

/// What to keep while running.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordMode {
    /// Keep every iteration's state (needed by the verifier and the CSV
    /// writers).
    Full,
    /// Keep only aggregates, the violation series, and the final state.
    Summary,
}

/// State observed at one iteration: the applied injections and the prices
/// and accumulators that produced them, plus the resulting voltages.
#[derive(Debug, Clone, PartialEq)]
pub struct TickRecord {
    pub p: DVector<f64>,
    pub q: DVector<f64>,
    /// True squared voltages (before measurement noise).
    pub v: DVector<f64>,
    pub lam_lo: DVector<f64>,
    pub lam_hi: DVector<f64>,
    pub z_p: DVector<f64>,
    pub z_q: DVector<f64>,
    /// Controller cost of the applied injections.
    pub cost: f64,
    /// Messages sent during this iteration.
    pub messages: u64,
}

/// State after the last iteration: the injections and prices that would
/// drive iteration `horizon`.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalState {
    pub p: DVector<f64>,
    pub q: DVector<f64>,
    pub lam_lo: DVector<f64>,
    pub lam_hi: DVector<f64>,
    pub z_p: DVector<f64>,
    pub z_q: DVector<f64>,
}

/// Aggregates accumulated over a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunStats {
    pub horizon: usize,
    pub total_messages: u64,
    /// Extremes of voltage magnitude (per-unit) over all buses and
    /// iterations.
    pub max_v_mag: f64,
    pub min_v_mag: f64,
    /// First iteration from which the voltage profile stays within limits
    /// through the end of the run; `None` if it is violated at the end.
    pub feasibility_tick: Option<usize>,
    /// Cost of the last applied injections.
    pub final_cost: f64,
    /// Largest excursion of any applied injection outside its box (exactly
    /// zero for a correct controller).
    pub box_violation_max: f64,
    /// Largest excess of `p² + q²` over `s̄²` at capped buses.
    pub s_cap_violation_max: f64,
    /// Largest inbox staleness observed (iterations).
    pub max_staleness: u64,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// Per-iteration records (empty in `Summary` mode).
    pub rows: Vec<TickRecord>,
    /// Per-iteration voltage-limit violation in magnitude units (always
    /// recorded).
    pub violation_mag: Vec<f64>,
    /// Per-iteration wall time in seconds (empty in `Summary` mode).
    pub wall_s: Vec<f64>,
    pub final_state: FinalState,
    pub stats: RunStats,
    /// Accumulator provenance per iteration index `0..=horizon` when
    /// tracking was enabled: `prov[t][bus-1]` maps source bus → price index
    /// folded into that bus's accumulators at index `t`.
    pub z_provenance: Option<Vec<Vec<ProvMap>>>,
    /// The step size the run actually used.
    pub gamma: f64,
}

impl Trajectory {
    /// Stacked price history `[λ_lo; λ_hi]` (length 2N) for indices
    /// `0..=horizon`. Requires `Full` recording.
    pub fn lam_stacked_history(&self) -> Vec<DVector<f64>> {
        assert!(
            self.rows.len() == self.stats.horizon,
            "price history requires RecordMode::Full"
        );
        let n = self.final_state.p.len();
        let stack = |lo: &DVector<f64>, hi: &DVector<f64>| {
            DVector::from_fn(2 * n, |k, _| if k < n { lo[k] } else { hi[k - n] })
        };
        self.rows
            .iter()
            .map(|r| stack(&r.lam_lo, &r.lam_hi))
            .chain(std::iter::once(stack(
                &self.final_state.lam_lo,
                &self.final_state.lam_hi,
            )))
            .collect()
    }

    /// Net price history `λ_lo − λ_hi` for indices `0..=horizon`.
    pub fn lam_net_history(&self) -> Vec<DVector<f64>> {
        assert!(
            self.rows.len() == self.stats.horizon,
            "price history requires RecordMode::Full"
        );
        self.rows
            .iter()
            .map(|r| &r.lam_lo - &r.lam_hi)
            .chain(std::iter::once(
                &self.final_state.lam_lo - &self.final_state.lam_hi,
            ))
            .collect()
    }

    /// Accumulator history for indices `0..=horizon`.
    pub fn z_history(&self) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        assert!(
            self.rows.len() == self.stats.horizon,
            "accumulator history requires RecordMode::Full"
        );
        let zp = self
            .rows
            .iter()
            .map(|r| r.z_p.clone())
            .chain(std::iter::once(self.final_state.z_p.clone()))
            .collect();
        let zq = self
            .rows
            .iter()
            .map(|r| r.z_q.clone())
            .chain(std::iter::once(self.final_state.z_q.clone()))
            .collect();
        (zp, zq)
    }
}

/// The stepping simulator. Most callers use [`run_scenario`]; the engine is
/// public so tests and the verifier can drive iterations directly.
pub struct Engine {
    net: RadialNetwork,
    sens: SensitivityMatrices,
    /// Diagonal sensitivities as the agents believe them (scaled when model
    /// error is enabled); the physics uses `sens` unchanged.
    diag_r: Vec<f64>,
    diag_x: Vec<f64>,
    costs: CostParams,
    limits: Limits,
    v0: f64,
    gamma: f64,
    physics: Physics,
    noise_std: f64,
    loads: LoadProfile,
    delays: DelaySampler,
    noise_rng: ChaCha20Rng,
    pass: MessagePass,
    agents: Vec<AgentState>,
    t: u64,
    zeros: DVector<f64>,
}

/// Seed-stream tags, one per randomness purpose, so enabling one source
/// never perturbs another.
const STREAM_DELAY: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_MODEL_ERROR: u64 = 3;

fn stream_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl Engine {
    pub fn new(scn: &Scenario, track_provenance: bool) -> Result<Self, SimError> {
        scn.validate()?;
        let n = scn.net.num_buses();
        let sens = scn.net.sensitivity();
        let mut diag_r: Vec<f64> = (1..=n).map(|i| sens.diag_r(i)).collect();
        let mut diag_x: Vec<f64> = (1..=n).map(|i| sens.diag_x(i)).collect();
        if let Some((lo, hi)) = scn.model_error {
            use rand::Rng;
            let mut rng = stream_rng(scn.seed, STREAM_MODEL_ERROR);
            for k in 0..n {
                // One independent factor per quantity, in bus order.
                diag_r[k] *= lo + rng.gen::<f64>() * (hi - lo);
                diag_x[k] *= lo + rng.gen::<f64>() * (hi - lo);
            }
        }
        let mut agents: Vec<AgentState> = (1..=n)
            .map(|i| AgentState::new(scn.net.children(i)))
            .collect();
        // Initial controls from zero accumulators.
        for i in 1..=n {
            let (p, q) = control_step(&scn.costs, &scn.limits, i, 0.0, 0.0)?;
            agents[i - 1].p = p;
            agents[i - 1].q = q;
        }
        Ok(Engine {
            net: scn.net.clone(),
            sens,
            diag_r,
            diag_x,
            costs: scn.costs.clone(),
            limits: scn.limits.clone(),
            v0: scn.v0,
            gamma: scn.gamma,
            physics: scn.physics,
            noise_std: scn.noise_std,
            loads: scn.loads.clone(),
            delays: DelaySampler::new(scn.delay, stream_rng(scn.seed, STREAM_DELAY)),
            noise_rng: stream_rng(scn.seed, STREAM_NOISE),
            pass: MessagePass::new(n, track_provenance),
            agents,
            t: 0,
            zeros: DVector::zeros(n),
        })
    }

    pub fn iteration(&self) -> u64 {
        self.t
    }

    pub fn agents(&self) -> &[AgentState] {
        &self.agents
    }

    pub fn message_pass(&self) -> &MessagePass {
        &self.pass
    }

    /// Snapshot of the state that will drive the next iteration.
    pub fn final_state(&self) -> FinalState {
        let n = self.agents.len();
        let take = |f: fn(&AgentState) -> f64| DVector::from_fn(n, |k, _| f(&self.agents[k]));
        FinalState {
            p: take(|a| a.p),
            q: take(|a| a.q),
            lam_lo: take(|a| a.lam_lo),
            lam_hi: take(|a| a.lam_hi),
            z_p: take(|a| a.z_p),
            z_q: take(|a| a.z_q),
        }
    }

    /// Runs one full iteration and reports the state it applied.
    pub fn tick(&mut self) -> Result<TickRecord, SimError> {
        let t = self.t;
        let n = self.net.num_buses();

        // Snapshot of the state entering this iteration.
        let p_used = DVector::from_fn(n, |k, _| self.agents[k].p);
        let q_used = DVector::from_fn(n, |k, _| self.agents[k].q);
        let lam_lo = DVector::from_fn(n, |k, _| self.agents[k].lam_lo);
        let lam_hi = DVector::from_fn(n, |k, _| self.agents[k].lam_hi);
        let z_p = DVector::from_fn(n, |k, _| self.agents[k].z_p);
        let z_q = DVector::from_fn(n, |k, _| self.agents[k].z_q);

        // Phase 1: physics at applied injections plus loads.
        let (load_p, load_q) = self
            .loads
            .at(t as usize)
            .unwrap_or((&self.zeros, &self.zeros));
        let inj_p = &p_used + load_p;
        let inj_q = &q_used + load_q;
        let v_true = match self.physics {
            Physics::Linear => linear_voltage(&self.sens, &inj_p, &inj_q, self.v0),
            Physics::Nonlinear => {
                solve_branch_flow(&self.net, &inj_p, &inj_q, self.v0, 1e-10, 100)
                    .map_err(|source| SimError::PhysicsDiverged { tick: t, source })?
                    .v
            }
        };

        // Phase 2: measurement.
        let v_meas = measure(&v_true, self.noise_std, &mut self.noise_rng);

        // Phase 3: local price updates.
        let mut lam_new = vec![0.0; n];
        for k in 0..n {
            let d = crate::agent::dual_update(
                self.agents[k].lam_lo,
                self.agents[k].lam_hi,
                v_meas[k],
                self.limits.v_lo[k],
                self.limits.v_hi[k],
                self.gamma,
            );
            self.agents[k].lam_lo = d.lam_lo;
            self.agents[k].lam_hi = d.lam_hi;
            lam_new[k] = d.net();
        }

        // Phases 4–6: production, delivery, accumulator refresh.
        let messages = self.pass.step(
            &self.net,
            &self.diag_r,
            &self.diag_x,
            &mut self.agents,
            &lam_new,
            t,
            &mut self.delays,
        );

        // Phase 7: next controls.
        for i in 1..=n {
            let (zp, zq) = (self.agents[i - 1].z_p, self.agents[i - 1].z_q);
            let (p, q) = control_step(&self.costs, &self.limits, i, zp, zq)?;
            self.agents[i - 1].p = p;
            self.agents[i - 1].q = q;
        }

        self.t += 1;
        let cost = self.costs.total(&p_used, &q_used);
        Ok(TickRecord {
            p: p_used,
            q: q_used,
            v: v_true,
            lam_lo,
            lam_hi,
            z_p,
            z_q,
            cost,
            messages,
        })
    }
}

fn control_step(
    costs: &CostParams,
    limits: &Limits,
    bus: BusId,
    z_p: f64,
    z_q: f64,
) -> Result<(f64, f64), SimError> {
    let c = costs.row(bus);
    let bx = limits.bus_box(bus);
    if bx.s_bar.is_some() {
        local_control_general(z_p, z_q, c, bx).map_err(|_| SimError::InfeasibleLocalSet { bus })
    } else {
        Ok(local_control(z_p, z_q, c, bx))
    }
}

/// Runs a scenario for its full horizon.
pub fn run_scenario(
    scn: &Scenario,
    mode: RecordMode,
    track_provenance: bool,
) -> Result<Trajectory, SimError> {
    let mut eng = Engine::new(scn, track_provenance)?;
    let n = scn.net.num_buses();
    let mut rows = Vec::new();
    let mut wall_s = Vec::new();
    if mode == RecordMode::Full {
        rows.reserve(scn.horizon);
        wall_s.reserve(scn.horizon);
    }
    let mut violation_mag = Vec::with_capacity(scn.horizon);
    let mut prov_hist = track_provenance.then(|| {
        let mut h = Vec::with_capacity(scn.horizon + 1);
        h.push(vec![ProvMap::new(); n]); // accumulators start at zero
        h
    });
    let mut stats = RunStats {
        horizon: scn.horizon,
        total_messages: 0,
        max_v_mag: f64::NEG_INFINITY,
        min_v_mag: f64::INFINITY,
        feasibility_tick: None,
        final_cost: 0.0,
        box_violation_max: 0.0,
        s_cap_violation_max: 0.0,
        max_staleness: 0,
    };
    let mut last_violation: Option<usize> = None;

    for t in 0..scn.horizon {
        let started = Instant::now();
        let rec = eng.tick()?;
        let elapsed = started.elapsed().as_secs_f64();

        for k in 0..n {
            let mag = rec.v[k].max(0.0).sqrt();
            stats.max_v_mag = stats.max_v_mag.max(mag);
            stats.min_v_mag = stats.min_v_mag.min(mag);
            let bx = scn.limits.bus_box(k + 1);
            let bv = (rec.p[k] - bx.p_hi)
                .max(bx.p_lo - rec.p[k])
                .max(rec.q[k] - bx.q_hi)
                .max(bx.q_lo - rec.q[k]);
            stats.box_violation_max = stats.box_violation_max.max(bv);
            if let Some(s) = bx.s_bar {
                let excess = rec.p[k] * rec.p[k] + rec.q[k] * rec.q[k] - s * s;
                stats.s_cap_violation_max = stats.s_cap_violation_max.max(excess);
            }
        }
        let viol = scn.limits.magnitude_violation(&rec.v);
        if viol > 0.0 {
            last_violation = Some(t);
        }
        violation_mag.push(viol);
        stats.total_messages += rec.messages;
        stats.final_cost = rec.cost;
        stats.max_staleness =
            stats
                .max_staleness
                .max(eng.pass.max_staleness(&eng.net, &eng.agents, t as u64 + 1));

        if let Some(h) = prov_hist.as_mut() {
            h.push(eng.pass.z_provenance().to_vec());
        }
        if mode == RecordMode::Full {
            rows.push(rec);
            wall_s.push(elapsed);
        }
    }
    stats.feasibility_tick = match last_violation {
        None => Some(0),
        Some(t) if t + 1 == scn.horizon => None,
        Some(t) => Some(t + 1),
    };

    Ok(Trajectory {
        rows,
        violation_mag,
        wall_s,
        final_state: eng.final_state(),
        stats,
        z_provenance: prov_hist,
        gamma: scn.gamma,
    })
}
