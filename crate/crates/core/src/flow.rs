//! Power-flow models over a radial network.
//!
//! Two physics models share the same squared-voltage convention:
//!
//! * [`linear_voltage`] — the linearized map `v = R p + X q + v0·1`, exact
//!   when line losses are neglected;
//! * [`solve_branch_flow`] — a backward/forward sweep on the full branch-flow
//!   equations, which keeps the quadratic loss terms.
//!
//! All voltages are squared magnitudes in per-unit²; injections are net
//! per-bus powers in per-unit (positive injects into the network).

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::net::{BusId, RadialNetwork, SensitivityMatrices};

/// Errors from the nonlinear branch-flow solver.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum PowerFlowError {
    #[error("sweep residual {residual:.3e} above tolerance after {iterations} iterations")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("non-physical squared voltage {v:.3e} at bus {bus}")]
    NonPhysicalVoltage { bus: BusId, v: f64 },
}

/// Linearized squared voltages `v = R p + X q + v0·1`.
pub fn linear_voltage(
    sens: &SensitivityMatrices,
    p: &DVector<f64>,
    q: &DVector<f64>,
    v0: f64,
) -> DVector<f64> {
    let mut v = &sens.r * p;
    v.gemv(1.0, &sens.x, q, 1.0);
    v.add_scalar_mut(v0);
    v
}

/// Linearized squared voltages about an arbitrary base profile:
/// `v = R p + X q + v_base`. Useful when fixed loads are folded into the
/// base so that only the controlled injections appear explicitly.
pub fn linear_voltage_about(
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

/// Converged state of the branch-flow sweep.
///
/// Flow quantities are indexed by the child endpoint of each line: entry
/// `i - 1` refers to the line from `parent(i)` into bus `i`.
#[derive(Debug, Clone)]
pub struct SweepSolution {
    /// Squared voltage per non-root bus.
    pub v: DVector<f64>,
    /// Sending-end active power flow per line.
    pub p_flow: DVector<f64>,
    /// Sending-end reactive power flow per line.
    pub q_flow: DVector<f64>,
    /// Squared current magnitude per line.
    pub ell: DVector<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// Solves the branch-flow equations by alternating backward (flow) and
/// forward (voltage) sweeps, starting from the lossless state `ℓ = 0`,
/// `v = v0·1`. The residual is the largest absolute violation of the power
/// balance, voltage drop, and current definition equations.
pub fn solve_branch_flow(
    net: &RadialNetwork,
    p: &DVector<f64>,
    q: &DVector<f64>,
    v0: f64,
    tol: f64,
    max_iter: usize,
) -> Result<SweepSolution, PowerFlowError> {
    let n = net.num_buses();
    assert_eq!(p.len(), n, "injection length must match bus count");
    assert_eq!(q.len(), n, "injection length must match bus count");
    let mut v = DVector::from_element(n, v0);
    let mut ell: DVector<f64> = DVector::zeros(n);
    let mut pf: DVector<f64> = DVector::zeros(n);
    let mut qf: DVector<f64> = DVector::zeros(n);
    // Squared voltage at the sending end of the line into bus i.
    let v_up = |v: &DVector<f64>, i: BusId| -> f64 {
        match net.parent(i).unwrap() {
            0 => v0,
            k => v[k - 1],
        }
    };

    let mut residual: f64 = f64::INFINITY;
    for it in 1..=max_iter {
        // Backward sweep: sending-end flows from the leaves toward the root,
        // using the current loss estimates.
        for &i in net.bus_order().iter().rev() {
            let (r, x) = net.line_impedance(i);
            let mut sp = -p[i - 1] + r * ell[i - 1];
            let mut sq = -q[i - 1] + x * ell[i - 1];
            for &c in net.children(i) {
                sp += pf[c - 1];
                sq += qf[c - 1];
            }
            pf[i - 1] = sp;
            qf[i - 1] = sq;
        }
        // Forward sweep: voltages from the root toward the leaves.
        for &i in net.bus_order() {
            let (r, x) = net.line_impedance(i);
            let vi =
                v_up(&v, i) - 2.0 * (r * pf[i - 1] + x * qf[i - 1]) + (r * r + x * x) * ell[i - 1];
            if vi <= 0.0 || !vi.is_finite() {
                return Err(PowerFlowError::NonPhysicalVoltage { bus: i, v: vi });
            }
            v[i - 1] = vi;
        }
        // Refresh the squared currents from the new flows and voltages.
        for &i in net.bus_order() {
            let num = pf[i - 1] * pf[i - 1] + qf[i - 1] * qf[i - 1];
            ell[i - 1] = num / v_up(&v, i);
        }

        residual = sweep_residual(net, p, q, v0, &v, &pf, &qf, &ell);
        if residual <= tol {
            return Ok(SweepSolution {
                v,
                p_flow: pf,
                q_flow: qf,
                ell,
                iterations: it,
                residual,
            });
        }
    }
    Err(PowerFlowError::NoConvergence {
        iterations: max_iter,
        residual,
    })
}

/// Largest absolute violation of the branch-flow equations for a candidate
/// state. Exposed so tests and the verifier can score solutions directly.
#[allow(clippy::too_many_arguments)]
pub fn sweep_residual(
    net: &RadialNetwork,
    p: &DVector<f64>,
    q: &DVector<f64>,
    v0: f64,
    v: &DVector<f64>,
    pf: &DVector<f64>,
    qf: &DVector<f64>,
    ell: &DVector<f64>,
) -> f64 {
    let v_up = |i: BusId| -> f64 {
        match net.parent(i).unwrap() {
            0 => v0,
            k => v[k - 1],
        }
    };
    let mut worst: f64 = 0.0;
    for &i in net.bus_order() {
        let (r, x) = net.line_impedance(i);
        let mut sp = 0.0;
        let mut sq = 0.0;
        for &c in net.children(i) {
            sp += pf[c - 1];
            sq += qf[c - 1];
        }
        // Power balance at bus i (active and reactive).
        worst = worst.max((pf[i - 1] - r * ell[i - 1] - sp + p[i - 1]).abs());
        worst = worst.max((qf[i - 1] - x * ell[i - 1] - sq + q[i - 1]).abs());
        // Voltage drop along the line into i.
        let drop = v[i - 1] - v_up(i) + 2.0 * (r * pf[i - 1] + x * qf[i - 1])
            - (r * r + x * x) * ell[i - 1];
        worst = worst.max(drop.abs());
        // Definition of the squared current.
        let cur = ell[i - 1] - (pf[i - 1] * pf[i - 1] + qf[i - 1] * qf[i - 1]) / v_up(i);
        worst = worst.max(cur.abs());
    }
    worst
}

/// Adds zero-mean Gaussian noise to a squared-voltage profile; `std == 0`
/// returns the profile unchanged.
pub fn measure<R: Rng>(v: &DVector<f64>, noise_std: f64, rng: &mut R) -> DVector<f64> {
    if noise_std == 0.0 {
        return v.clone();
    }
    let dist = Normal::new(0.0, noise_std).expect("finite non-negative std");
    DVector::from_iterator(v.len(), v.iter().map(|&vi| vi + dist.sample(rng)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Line;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn chain(n: usize, r: f64, x: f64) -> RadialNetwork {
        let lines: Vec<Line> = (1..n).map(|i| Line::new(i - 1, i, r, x)).collect();
        RadialNetwork::new(n, &lines).unwrap()
    }

    #[test]
    fn linear_voltage_single_bus() {
        let net = RadialNetwork::new(2, &[Line::new(0, 1, 0.1, 0.2)]).unwrap();
        let s = net.sensitivity();
        let v = linear_voltage(
            &s,
            &DVector::from_vec(vec![0.5]),
            &DVector::from_vec(vec![0.25]),
            1.0,
        );
        assert!((v[0] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn zero_injection_is_a_fixed_point() {
        let net = chain(4, 0.03, 0.06);
        let z = DVector::zeros(3);
        let sol = solve_branch_flow(&net, &z, &z, 1.0, 1e-10, 100).unwrap();
        for i in 0..3 {
            assert_eq!(sol.v[i], 1.0);
            assert_eq!(sol.ell[i], 0.0);
        }
        assert_eq!(sol.iterations, 1);
    }

    #[test]
    fn sweep_close_to_linear_for_small_injections() {
        let net = chain(3, 0.01, 0.02);
        let s = net.sensitivity();
        let p = DVector::from_vec(vec![0.01, -0.01]);
        let q = DVector::from_vec(vec![-0.01, 0.01]);
        let nl = solve_branch_flow(&net, &p, &q, 1.0, 1e-10, 100).unwrap();
        let lin = linear_voltage(&s, &p, &q, 1.0);
        let gap = (&nl.v - &lin).abs().max();
        assert!(gap <= 1e-4, "gap {gap} too large");
    }

    #[test]
    fn linearization_gap_is_second_order() {
        let net = chain(5, 0.02, 0.05);
        let s = net.sensitivity();
        let base_p = DVector::from_vec(vec![1.0, -0.5, 0.8, -0.2]);
        let base_q = DVector::from_vec(vec![-0.6, 0.4, -0.9, 0.3]);
        let mut ratios = Vec::new();
        for scale in [1e-1, 1e-2, 1e-3] {
            let p = &base_p * scale;
            let q = &base_q * scale;
            let nl = solve_branch_flow(&net, &p, &q, 1.0, 1e-12, 200).unwrap();
            let lin = linear_voltage(&s, &p, &q, 1.0);
            ratios.push((&nl.v - &lin).abs().max() / (scale * scale));
        }
        let max = ratios.iter().cloned().fold(0.0, f64::max);
        let min = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(max.is_finite() && max > 0.0);
        // The ratio approaches a constant; allow generous slack for the
        // higher-order terms at the largest scale.
        assert!(max / min < 3.0, "ratios {ratios:?} not second-order");
    }

    #[test]
    fn sweep_converges_on_random_trees() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        for _ in 0..20 {
            let nb = rng.gen_range(2..=25);
            let net = RadialNetwork::random(&mut rng, nb, (0.005, 0.05), (0.01, 0.1));
            let n = net.num_buses();
            let p = DVector::from_iterator(n, (0..n).map(|_| rng.gen_range(-0.08..0.08)));
            let q = DVector::from_iterator(n, (0..n).map(|_| rng.gen_range(-0.08..0.08)));
            let sol = solve_branch_flow(&net, &p, &q, 1.0, 1e-10, 100).unwrap();
            assert!(sol.residual <= 1e-10);
            assert!(sol.iterations < 100);
            let check = sweep_residual(
                &net,
                &p,
                &q,
                1.0,
                &sol.v,
                &sol.p_flow,
                &sol.q_flow,
                &sol.ell,
            );
            assert!(check <= 1e-10);
        }
    }

    #[test]
    fn heavy_load_collapses_voltage() {
        let net = RadialNetwork::new(2, &[Line::new(0, 1, 0.05, 0.1)]).unwrap();
        let p = DVector::from_vec(vec![-12.0]);
        let q = DVector::zeros(1);
        let err = solve_branch_flow(&net, &p, &q, 1.0, 1e-10, 100).unwrap_err();
        assert!(matches!(
            err,
            PowerFlowError::NonPhysicalVoltage { bus: 1, .. }
        ));
    }

    #[test]
    fn measurement_noise_statistics() {
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        let v = DVector::from_element(100_000, 1.0);
        let noisy = measure(&v, 0.01, &mut rng);
        let errs: Vec<f64> = (&noisy - &v).iter().cloned().collect();
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        let var =
            errs.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (errs.len() - 1) as f64;
        let std = var.sqrt();
        assert!((std - 0.01).abs() / 0.01 < 0.02, "sample std {std}");
        assert!(mean.abs() < 1e-4);
    }

    #[test]
    fn zero_noise_is_exact() {
        let mut rng = ChaCha20Rng::seed_from_u64(29);
        let v = DVector::from_vec(vec![1.0, 0.98, 1.02]);
        assert_eq!(measure(&v, 0.0, &mut rng), v);
    }
}
