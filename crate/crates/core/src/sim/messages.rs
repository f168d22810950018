//! The neighbor message pass executed once per iteration.
//!
//! Within one iteration the order is strict: every bus first *produces* its
//! outgoing aggregates from the values already in its inbox, then due
//! messages are *delivered*, then every bus *refreshes* its accumulators
//! from the (possibly just-updated) inbox. Zero-delay messages are produced
//! and consumed in the same iteration; delayed ones sit in a queue keyed by
//! their delivery index.

use std::collections::BTreeMap;

use crate::agent::{make_alpha, make_beta, update_z, AgentState, Message, Payload};
use crate::net::{BusId, RadialNetwork};
use crate::sim::delay::DelaySampler;

/// Source bus → price-update index its contribution was generated at.
pub type ProvMap = BTreeMap<BusId, u64>;

/// In-flight messages plus optional provenance bookkeeping.
#[derive(Debug, Clone)]
pub struct MessagePass {
    /// Delivery index → messages applied at that index, in enqueue order.
    queue: BTreeMap<u64, Vec<Message>>,
    track_provenance: bool,
    /// Provenance of each stored child aggregate, per bus.
    alpha_prov: Vec<BTreeMap<BusId, ProvMap>>,
    /// Provenance of the stored parent pair, per bus.
    beta_prov: Vec<ProvMap>,
    /// Provenance of the current accumulators, per bus.
    z_prov: Vec<ProvMap>,
    pub sent_total: u64,
}

impl MessagePass {
    pub fn new(n: usize, track_provenance: bool) -> Self {
        MessagePass {
            queue: BTreeMap::new(),
            track_provenance,
            alpha_prov: vec![BTreeMap::new(); n],
            beta_prov: vec![ProvMap::new(); n],
            z_prov: vec![ProvMap::new(); n],
            sent_total: 0,
        }
    }

    pub fn tracks_provenance(&self) -> bool {
        self.track_provenance
    }

    /// Provenance of each bus's current accumulators (empty maps when
    /// tracking is off).
    pub fn z_provenance(&self) -> &[ProvMap] {
        &self.z_prov
    }

    /// Runs production, delivery, and accumulator refresh for iteration `t`.
    /// `lam_new` holds each bus's net price from this iteration's update.
    /// Returns the number of messages sent (every produced message counts,
    /// including aggregates addressed to the substation).
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &mut self,
        net: &RadialNetwork,
        diag_r: &[f64],
        diag_x: &[f64],
        agents: &mut [AgentState],
        lam_new: &[f64],
        t: u64,
        delays: &mut DelaySampler,
    ) -> u64 {
        let n = net.num_buses();
        debug_assert_eq!(agents.len(), n);
        debug_assert_eq!(lam_new.len(), n);
        let gen = t + 1;
        let mut sent = 0u64;

        if delays.tick_sends(t) {
            for i in 1..=n {
                let st = &agents[i - 1];
                let stale_sum = st.child_alpha_sum();

                // Aggregate up to the parent. Buses fed by the substation
                // still transmit (and are counted), but nothing listens.
                let alpha = make_alpha(lam_new[i - 1], stale_sum);
                let prov = self
                    .track_provenance
                    .then(|| merge_prov((i, gen), self.alpha_prov[i - 1].values()));
                let delay = delays.sample();
                sent += 1;
                let parent = net.parent(i).expect("non-root bus has a parent");
                if parent != 0 {
                    self.queue.entry(gen + delay).or_default().push(Message {
                        from: i,
                        to: parent,
                        gen,
                        payload: Payload::Alpha(alpha),
                        prov,
                    });
                }

                // One pair per child, excluding that child's own branch.
                for &j in net.children(i) {
                    let excl = stale_sum - st.alpha_in[&j].value;
                    let (bp, bq) = make_beta(
                        lam_new[i - 1],
                        excl,
                        st.beta_in.value,
                        diag_r[i - 1],
                        diag_x[i - 1],
                    );
                    let prov = self.track_provenance.then(|| {
                        let parts = self.alpha_prov[i - 1]
                            .iter()
                            .filter(|(&c, _)| c != j)
                            .map(|(_, p)| p)
                            .chain(std::iter::once(&self.beta_prov[i - 1]));
                        merge_prov((i, gen), parts)
                    });
                    let delay = delays.sample();
                    sent += 1;
                    self.queue.entry(gen + delay).or_default().push(Message {
                        from: i,
                        to: j,
                        gen,
                        payload: Payload::Beta(bp, bq),
                        prov,
                    });
                }
            }
        }

        // Delivery of everything due at this iteration's refresh. Stale
        // arrivals (older generation than the stored value) are dropped.
        if let Some(batch) = self.queue.remove(&gen) {
            for m in batch {
                let st = &mut agents[m.to - 1];
                match m.payload {
                    Payload::Alpha(a) => {
                        let slot = st
                            .alpha_in
                            .get_mut(&m.from)
                            .expect("aggregate arrives from a known child");
                        if m.gen > slot.gen {
                            slot.value = a;
                            slot.gen = m.gen;
                            if let Some(p) = m.prov {
                                self.alpha_prov[m.to - 1].insert(m.from, p);
                            }
                        }
                    }
                    Payload::Beta(bp, bq) => {
                        if m.gen > st.beta_in.gen {
                            st.beta_in.value = (bp, bq);
                            st.beta_in.gen = m.gen;
                            if let Some(p) = m.prov {
                                self.beta_prov[m.to - 1] = p;
                            }
                        }
                    }
                }
            }
        }
        debug_assert!(self.queue.keys().next().is_none_or(|&k| k > gen));

        // Accumulator refresh from the freshest inbox contents.
        for i in 1..=n {
            let st = &mut agents[i - 1];
            let fresh_sum = st.child_alpha_sum();
            let (zp, zq) = update_z(
                lam_new[i - 1],
                fresh_sum,
                st.beta_in.value,
                diag_r[i - 1],
                diag_x[i - 1],
            );
            st.z_p = zp;
            st.z_q = zq;
            if self.track_provenance {
                let parts = self.alpha_prov[i - 1]
                    .values()
                    .chain(std::iter::once(&self.beta_prov[i - 1]));
                self.z_prov[i - 1] = merge_prov((i, gen), parts);
            }
        }

        self.sent_total += sent;
        sent
    }

    /// Largest staleness (current index minus stored generation) across all
    /// inbox slots, after the refresh at index `t_next`. Parent pairs of
    /// substation-fed buses never receive and are skipped.
    pub fn max_staleness(&self, net: &RadialNetwork, agents: &[AgentState], t_next: u64) -> u64 {
        let mut worst = 0;
        for i in 1..=net.num_buses() {
            let st = &agents[i - 1];
            for s in st.alpha_in.values() {
                worst = worst.max(t_next - s.gen);
            }
            if net.parent(i) != Some(0) {
                worst = worst.max(t_next - st.beta_in.gen);
            }
        }
        worst
    }
}

/// Merges a bus's own stamp with neighbor provenance maps. Sources are
/// disjoint by construction (each descends through a different branch).
fn merge_prov<'a>(own: (BusId, u64), parts: impl Iterator<Item = &'a ProvMap>) -> ProvMap {
    let mut out = ProvMap::new();
    out.insert(own.0, own.1);
    for part in parts {
        for (&bus, &gen) in part {
            let prev = out.insert(bus, gen);
            debug_assert!(prev.is_none(), "provenance branches must be disjoint");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Line;
    use crate::sim::delay::DelayModel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn sampler(model: DelayModel) -> DelaySampler {
        DelaySampler::new(model, ChaCha20Rng::seed_from_u64(0))
    }

    /// Message accounting: every bus sends one aggregate, and every bus with
    /// an in-tree parent receives one pair, so per full iteration the count
    /// is 2·N minus the substation's degree.
    #[test]
    fn per_tick_message_count() {
        let net = RadialNetwork::new(
            5,
            &[
                Line::new(0, 1, 0.1, 0.1),
                Line::new(0, 2, 0.1, 0.1),
                Line::new(1, 3, 0.1, 0.1),
                Line::new(1, 4, 0.1, 0.1),
            ],
        )
        .unwrap();
        let s = net.sensitivity();
        let diag_r: Vec<f64> = (1..=4).map(|i| s.diag_r(i)).collect();
        let diag_x: Vec<f64> = (1..=4).map(|i| s.diag_x(i)).collect();
        let mut agents: Vec<AgentState> =
            (1..=4).map(|i| AgentState::new(net.children(i))).collect();
        let mut pass = MessagePass::new(4, false);
        let mut d = sampler(DelayModel::None);
        let sent = pass.step(&net, &diag_r, &diag_x, &mut agents, &[0.0; 4], 0, &mut d);
        assert_eq!(sent, 2 * 4 - net.substation_degree() as u64);
    }

    #[test]
    fn zero_delay_propagates_within_iteration() {
        // Chain 0–1–2 with unit-ish impedances; check the two-iteration
        // recursion against hand algebra.
        let net =
            RadialNetwork::new(3, &[Line::new(0, 1, 0.1, 0.1), Line::new(1, 2, 0.2, 0.2)]).unwrap();
        let s = net.sensitivity();
        let (r1, r2) = (s.diag_r(1), s.diag_r(2)); // 0.2, 0.6
        let diag_r = [r1, r2];
        let diag_x = [s.diag_x(1), s.diag_x(2)];
        let mut agents = vec![
            AgentState::new(net.children(1)),
            AgentState::new(net.children(2)),
        ];
        let mut pass = MessagePass::new(2, false);
        let mut d = sampler(DelayModel::None);

        let lam1 = [0.5, -0.25];
        pass.step(&net, &diag_r, &diag_x, &mut agents, &lam1, 0, &mut d);
        // Both aggregates arrive immediately: z₁ = R₁₁(λ₁+λ₂), z₂ = R₂₂λ₂ + R₁₁λ₁.
        assert!((agents[0].z_p - r1 * (lam1[0] + lam1[1])).abs() < 1e-15);
        assert!((agents[1].z_p - (r2 * lam1[1] + r1 * lam1[0])).abs() < 1e-15);

        let lam2 = [0.1, 0.3];
        pass.step(&net, &diag_r, &diag_x, &mut agents, &lam2, 1, &mut d);
        // With only two buses no sibling branches exist, so even the pair
        // bus 2 receives is built entirely from bus 1's fresh price and both
        // accumulators stay lag-free.
        assert!((agents[1].z_p - (r2 * lam2[1] + r1 * lam2[0])).abs() < 1e-15);
        assert!((agents[0].z_p - r1 * (lam2[0] + lam2[1])).abs() < 1e-15);
    }

    #[test]
    fn fixed_delay_bounds_staleness() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let net = RadialNetwork::random(&mut rng, 10, (0.01, 0.05), (0.02, 0.1));
        let n = net.num_buses();
        let s = net.sensitivity();
        let diag_r: Vec<f64> = (1..=n).map(|i| s.diag_r(i)).collect();
        let diag_x: Vec<f64> = (1..=n).map(|i| s.diag_x(i)).collect();
        for (model, bound) in [
            (DelayModel::Fixed(3), 3),
            (DelayModel::UniformRandom(4), 4),
            (DelayModel::None, 0),
        ] {
            let mut agents: Vec<AgentState> =
                (1..=n).map(|i| AgentState::new(net.children(i))).collect();
            let mut pass = MessagePass::new(n, false);
            let mut d = sampler(model);
            let mut worst = 0;
            for t in 0..50u64 {
                let lam: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                pass.step(&net, &diag_r, &diag_x, &mut agents, &lam, t, &mut d);
                worst = worst.max(pass.max_staleness(&net, &agents, t + 1));
            }
            assert!(worst <= bound, "{model:?}: staleness {worst} > {bound}");
        }
    }

    #[test]
    fn provenance_is_disjoint_and_complete() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let net = RadialNetwork::random(&mut rng, 12, (0.01, 0.05), (0.02, 0.1));
        let n = net.num_buses();
        let s = net.sensitivity();
        let diag_r: Vec<f64> = (1..=n).map(|i| s.diag_r(i)).collect();
        let diag_x: Vec<f64> = (1..=n).map(|i| s.diag_x(i)).collect();
        let mut agents: Vec<AgentState> =
            (1..=n).map(|i| AgentState::new(net.children(i))).collect();
        let mut pass = MessagePass::new(n, true);
        let mut d = sampler(DelayModel::UniformRandom(2));
        let horizon = 40u64;
        for t in 0..horizon {
            let lam: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            pass.step(&net, &diag_r, &diag_x, &mut agents, &lam, t, &mut d);
        }
        // After plenty of iterations a bus's accumulators carry exactly one
        // contribution from every bus in the same substation branch; buses
        // in other branches share no path and have zero weight, so they
        // never appear.
        let branch_root = |i: usize| {
            let path = net.path_to_root(i);
            path[path.len() - 2]
        };
        for i in 1..=n {
            let expected: Vec<usize> = (1..=n)
                .filter(|&j| branch_root(j) == branch_root(i))
                .collect();
            let prov = &pass.z_provenance()[i - 1];
            let got: Vec<usize> = prov.keys().cloned().collect();
            assert_eq!(got, expected, "bus {i} hears its whole branch");
            assert_eq!(prov[&i], horizon, "own contribution is always fresh");
            for (&j, &g) in prov {
                assert!(g >= 1 && g <= horizon, "bus {j} stamp {g} out of range");
            }
        }
    }
}
