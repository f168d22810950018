//! Command-line front end: simulate scenarios, verify recorded runs against
//! the controller's analytic guarantees, and print centralized reference
//! solutions.
//!
//! Exit codes: `0` success, `1` configuration problems, `2` numerical
//! failure (diverged physics or a centralized solve that ran out of
//! iterations), `3` a verification check failed.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::DVector;

use distvolt::oracle::verify::{
    check_bounded_delay_recursion, check_descent, check_dual_ascent_replay, check_gradient_fd,
    check_lipschitz_pairs, check_zero_delay_recursion, RecursionCheck,
};
use distvolt::oracle::{base_voltage, centralized_solve, dual_value, kkt_residual};
use distvolt::output::{write_run_artifacts, write_summary};
use distvolt::report::{Check, Report};
use distvolt::scenario::load_scenario;
use distvolt::sim::{LoadProfile, Physics, Scenario, SimError};
use distvolt::{DelayModel, RecordMode, Trajectory};

const EXIT_CONFIG: u8 = 1;
const EXIT_NUMERIC: u8 = 2;
const EXIT_CHECK_FAILED: u8 = 3;

#[derive(Parser)]
#[command(
    name = "distvolt",
    version,
    about = "Distributed voltage control on radial distribution feeders"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a scenario and write run artifacts to a directory.
    Run {
        scenario: PathBuf,
        /// Directory for trajectory/summary files (created if needed).
        #[arg(long)]
        out: PathBuf,
        /// Keep only aggregates and the violation series, not per-iteration
        /// tables (much smaller for long runs).
        #[arg(long)]
        summary: bool,
    },
    /// Re-run a scenario with full recording and check everything the
    /// convergence analysis promises about it.
    Verify {
        scenario: PathBuf,
        /// Also write the check table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Corrupt one recorded accumulator entry before checking; the
        /// closed-form check must then fail (negative control).
        #[arg(long, hide = true)]
        corrupt_z: bool,
    },
    /// Solve the scenario's problem centrally and print the optimum along
    /// with the analytic constants.
    Oracle { scenario: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().cmd {
        Cmd::Run {
            scenario,
            out,
            summary,
        } => cmd_run(&scenario, &out, summary),
        Cmd::Verify {
            scenario,
            csv,
            corrupt_z,
        } => cmd_verify(&scenario, csv.as_deref(), corrupt_z),
        Cmd::Oracle { scenario } => cmd_oracle(&scenario),
    }
}

fn fail(code: u8, err: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(code)
}

fn sim_exit(err: SimError) -> ExitCode {
    let code = match err {
        SimError::PhysicsDiverged { .. } => EXIT_NUMERIC,
        _ => EXIT_CONFIG,
    };
    fail(code, err)
}

/// Constant per-bus loads, or `None` for time-varying profiles.
fn static_loads(scn: &Scenario) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = scn.net.num_buses();
    match &scn.loads {
        LoadProfile::None => Some((DVector::zeros(n), DVector::zeros(n))),
        LoadProfile::Static { p, q } => Some((p.clone(), q.clone())),
        LoadProfile::Series { .. } => None,
    }
}

fn warn_if_gamma_excessive(gamma: f64, gamma_max: f64) {
    if gamma >= gamma_max {
        log::warn!(
            "step size {gamma:.6e} is at or above the analytic ceiling {gamma_max:.6e}; \
             convergence is no longer guaranteed"
        );
    }
}

fn cmd_run(path: &Path, out: &Path, summary: bool) -> ExitCode {
    let loaded = match load_scenario(path) {
        Ok(l) => l,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    if !loaded.gamma_was_auto {
        warn_if_gamma_excessive(loaded.scenario.gamma, loaded.constants.gamma_max);
    }
    let mode = if summary {
        RecordMode::Summary
    } else {
        RecordMode::Full
    };
    let traj = match distvolt::run_scenario(&loaded.scenario, mode, false) {
        Ok(t) => t,
        Err(e) => return sim_exit(e),
    };
    if let Err(e) = write_run_artifacts(out, &traj) {
        return fail(EXIT_CONFIG, format!("writing {}: {e}", out.display()));
    }
    let mut stdout = std::io::stdout().lock();
    if write_summary(&mut stdout, &traj)
        .and_then(|_| stdout.flush())
        .is_err()
    {
        return ExitCode::from(EXIT_CONFIG);
    }
    ExitCode::SUCCESS
}

fn recursion_checks(report: &mut Report, rc: &RecursionCheck) {
    report.push(Check::upper(
        "accumulator-closed-form",
        rc.max_abs_err,
        rc.tol,
    ));
    report.push(Check::upper(
        "accumulator-lag-bound",
        rc.max_lag as f64,
        rc.lag_bound as f64,
    ));
}

fn cmd_verify(path: &Path, csv: Option<&Path>, corrupt_z: bool) -> ExitCode {
    let loaded = match load_scenario(path) {
        Ok(l) => l,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    let scn = &loaded.scenario;
    let consts = &loaded.constants;

    // The checks compare the run against the linear model the controller is
    // analyzed under, so every modeled disturbance must be off.
    if scn.physics != Physics::Linear {
        return fail(EXIT_CONFIG, "verification requires `physics = linear`");
    }
    if scn.noise_std != 0.0 {
        return fail(EXIT_CONFIG, "verification requires `noise_std = 0`");
    }
    if scn.model_error.is_some() {
        return fail(EXIT_CONFIG, "verification requires no `model_error`");
    }
    let Some((p_load, q_load)) = static_loads(scn) else {
        return fail(
            EXIT_CONFIG,
            "verification requires a constant load ([load] section or none), not a profile",
        );
    };
    warn_if_gamma_excessive(scn.gamma, consts.gamma_max);

    let track = scn.delay != DelayModel::None;
    let traj: Trajectory = match distvolt::run_scenario(scn, RecordMode::Full, track) {
        Ok(t) => t,
        Err(e) => return sim_exit(e),
    };

    let sens = scn.net.sensitivity();
    let lam_stacked = traj.lam_stacked_history();
    let lam_net = traj.lam_net_history();
    let (mut z_p, z_q) = traj.z_history();
    let v_hist: Vec<DVector<f64>> = traj.rows.iter().map(|r| r.v.clone()).collect();
    if corrupt_z {
        let mid = z_p.len() / 2;
        z_p[mid][0] += 1e-6;
        log::warn!("negative control: corrupted one accumulator entry at index {mid}");
    }

    let mut report = Report::default();

    let replay = check_dual_ascent_replay(&scn.limits, scn.gamma, &lam_stacked, &v_hist);
    report.push(Check::upper("price-ascent-replay", replay, 1e-15));

    match scn.delay {
        DelayModel::None => {
            let rc = check_zero_delay_recursion(&scn.net, &sens, &lam_net, &z_p, &z_q);
            recursion_checks(&mut report, &rc);
        }
        _ => {
            let prov = traj
                .z_provenance
                .as_ref()
                .expect("provenance was tracked for a delayed run");
            let rc = check_bounded_delay_recursion(
                &scn.net,
                &sens,
                &lam_net,
                &z_p,
                &z_q,
                prov,
                scn.delay.tau_max(),
            );
            recursion_checks(&mut report, &rc);
        }
    }

    let v_base = base_voltage(&sens, scn.v0, &p_load, &q_load);
    let dc = check_descent(
        consts,
        &sens,
        &scn.costs,
        &scn.limits,
        &v_base,
        scn.gamma,
        &lam_stacked,
        &v_hist,
    );
    report.push(Check::upper("staleness-gap", dc.staleness_gap_max, 0.0));
    report.push(Check::lower(
        "descent-margin-window",
        dc.margin_window_min,
        0.0,
    ));
    report.push(Check::lower("descent-margin-alt", dc.margin_alt_min, 0.0));
    let movement_ok = if dc.sum_sq_steps.is_finite() {
        0.0
    } else {
        f64::INFINITY
    };
    report.push(Check::upper("price-movement-finite", movement_ok, 0.0));

    report.push(Check::upper(
        "injection-box-violation",
        traj.stats.box_violation_max,
        0.0,
    ));
    report.push(Check::upper(
        "apparent-power-cap-violation",
        traj.stats.s_cap_violation_max,
        1e-9,
    ));

    let fd = check_gradient_fd(&sens, &scn.costs, &scn.limits, &v_base, 25, scn.seed ^ 0xfd);
    report.push(Check::upper("gradient-fd-error", fd.worst_rel, 1e-5));
    report.push(Check::lower("gradient-fd-points", fd.checked as f64, 25.0));
    let lip = check_lipschitz_pairs(
        &sens,
        &scn.costs,
        &scn.limits,
        &v_base,
        consts.lipschitz,
        200,
        scn.seed ^ 0x11b,
    );
    report.push(Check::upper("lipschitz-ratio", lip, 1.0));

    match centralized_solve(
        &sens,
        &scn.costs,
        &scn.limits,
        &v_base,
        1.0 / consts.lipschitz,
        1e-10,
        2_000_000,
    ) {
        Ok(sol) => {
            let kkt = kkt_residual(
                &sol.p,
                &sol.q,
                &sol.dual,
                &sens,
                &scn.costs,
                &scn.limits,
                &v_base,
            );
            report.push(Check::upper("centralized-kkt-residual", kkt.max(), 1e-8));
            let gap = (dual_value(&sol.dual, &sens, &scn.costs, &scn.limits, &v_base)
                - scn.costs.total(&sol.p, &sol.q))
            .abs();
            report.push(Check::upper("strong-duality-gap", gap, 1e-6));
            let endpoint_gap = (&traj.final_state.p - &sol.p)
                .amax()
                .max((&traj.final_state.q - &sol.q).amax());
            log::info!(
                "distributed endpoint is {endpoint_gap:.3e} from the centralized optimum \
                 (informative; shrink it by raising the horizon)"
            );
        }
        Err(e) => {
            log::warn!("{e}");
            report.push(Check::upper("centralized-kkt-residual", f64::NAN, 1e-8));
        }
    }

    print!("{report}");
    if let Some(csv_path) = csv {
        if let Err(e) = std::fs::write(csv_path, report.to_csv()) {
            return fail(EXIT_CONFIG, format!("writing {}: {e}", csv_path.display()));
        }
    }
    if report.all_passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_CHECK_FAILED)
    }
}

fn cmd_oracle(path: &Path) -> ExitCode {
    let loaded = match load_scenario(path) {
        Ok(l) => l,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    let scn = &loaded.scenario;
    let consts = &loaded.constants;
    let Some((p_load, q_load)) = static_loads(scn) else {
        return fail(
            EXIT_CONFIG,
            "the centralized oracle needs a constant load ([load] section or none), not a profile",
        );
    };
    let sens = scn.net.sensitivity();
    let v_base = base_voltage(&sens, scn.v0, &p_load, &q_load);

    println!("buses            = {}", consts.n);
    println!("diameter         = {}", consts.diameter);
    println!("tau_max          = {}", consts.tau_max);
    println!("norm_r           = {:.9e}", consts.norm_r);
    println!("norm_x           = {:.9e}", consts.norm_x);
    println!("a_min            = {:.9e}", consts.a_min);
    println!("lipschitz        = {:.9e}", consts.lipschitz);
    println!("gamma_max        = {:.9e}", consts.gamma_max);
    println!("gamma_max_alt    = {:.9e}", consts.gamma_max_alt);
    println!("gamma_max_window = {:.9e}", consts.gamma_max_window());
    println!("gamma_auto       = {:.9e}", consts.gamma_auto());
    println!("scenario_gamma   = {:.9e}", scn.gamma);

    let sol = match centralized_solve(
        &sens,
        &scn.costs,
        &scn.limits,
        &v_base,
        1.0 / consts.lipschitz,
        1e-10,
        2_000_000,
    ) {
        Ok(s) => s,
        Err(e) => return fail(EXIT_NUMERIC, e),
    };
    let kkt = kkt_residual(
        &sol.p,
        &sol.q,
        &sol.dual,
        &sens,
        &scn.costs,
        &scn.limits,
        &v_base,
    );
    let cost = scn.costs.total(&sol.p, &sol.q);
    let dual_at_opt = dual_value(&sol.dual, &sens, &scn.costs, &scn.limits, &v_base);

    println!("iterations       = {}", sol.iterations);
    println!("last_step        = {:.9e}", sol.last_step);
    println!("optimal_cost     = {:.12e}", cost);
    println!("dual_value       = {:.12e}", dual_at_opt);
    println!("duality_gap      = {:.3e}", (cost - dual_at_opt).abs());
    println!("kkt_residual     = {:.3e}", kkt.max());
    for k in 0..consts.n {
        println!(
            "bus {:>3}: p = {:+.9e}  q = {:+.9e}  lam_lo = {:.9e}  lam_hi = {:.9e}",
            k + 1,
            sol.p[k],
            sol.q[k],
            sol.dual.lam_lo[k],
            sol.dual.lam_hi[k],
        );
    }
    ExitCode::SUCCESS
}
