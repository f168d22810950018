//! Deterministic artifact writers for simulation runs.
//!
//! A run directory contains:
//!
//! * `trajectory.csv` — one row per (iteration, bus):
//!   `t,bus,p,q,v,lam_lo,lam_hi,cost,msgs` (per-iteration cost and message
//!   count repeated on each bus row; `v` is the true squared voltage);
//! * `violation.csv` — per-iteration voltage-limit violation in magnitude
//!   units;
//! * `summary.txt` —`key = value` aggregates;
//! * `bus_NN.csv` — per-bus series `t,p,q,v,v_mag`.
//!
//! Values are written with round-trip-exact float formatting and `\n` line
//! endings, so identical runs produce byte-identical files.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::Path;

use crate::sim::Trajectory;

/// Writes the per-(iteration, bus) table. Requires a fully recorded run.
pub fn write_trajectory_csv<W: Write>(w: &mut W, traj: &Trajectory) -> io::Result<()> {
    writeln!(w, "t,bus,p,q,v,lam_lo,lam_hi,cost,msgs")?;
    for (t, row) in traj.rows.iter().enumerate() {
        for bus in 0..row.p.len() {
            writeln!(
                w,
                "{t},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}",
                bus + 1,
                row.p[bus],
                row.q[bus],
                row.v[bus],
                row.lam_lo[bus],
                row.lam_hi[bus],
                row.cost,
                row.messages,
            )?;
        }
    }
    Ok(())
}

/// Writes the voltage-violation series (available in every record mode).
pub fn write_violation_csv<W: Write>(w: &mut W, traj: &Trajectory) -> io::Result<()> {
    writeln!(w, "t,violation_mag")?;
    for (t, viol) in traj.violation_mag.iter().enumerate() {
        writeln!(w, "{t},{:.16e}", viol)?;
    }
    Ok(())
}

/// Writes one bus's series. `bus` is 1-based. Requires a fully recorded run.
pub fn write_bus_csv<W: Write>(w: &mut W, traj: &Trajectory, bus: usize) -> io::Result<()> {
    writeln!(w, "t,p,q,v,v_mag")?;
    let k = bus - 1;
    for (t, row) in traj.rows.iter().enumerate() {
        writeln!(
            w,
            "{t},{:.16e},{:.16e},{:.16e},{:.16e}",
            row.p[k],
            row.q[k],
            row.v[k],
            row.v[k].max(0.0).sqrt(),
        )?;
    }
    Ok(())
}

/// Writes the aggregate summary. Contains no wall-clock data, so repeated
/// identical runs serialize identically.
pub fn write_summary<W: Write>(w: &mut W, traj: &Trajectory) -> io::Result<()> {
    let s = &traj.stats;
    writeln!(w, "horizon = {}", s.horizon)?;
    writeln!(w, "gamma = {}", traj.gamma)?;
    writeln!(w, "total_messages = {}", s.total_messages)?;
    writeln!(w, "final_cost = {}", s.final_cost)?;
    writeln!(w, "min_v_mag = {}", s.min_v_mag)?;
    writeln!(w, "max_v_mag = {}", s.max_v_mag)?;
    match s.feasibility_tick {
        Some(t) => writeln!(w, "feasible_from_iteration = {t}")?,
        None => writeln!(w, "feasible_from_iteration = never")?,
    }
    let last = traj.violation_mag.last().copied().unwrap_or(0.0);
    writeln!(w, "final_violation_mag = {last}")?;
    writeln!(w, "box_violation_max = {}", s.box_violation_max)?;
    writeln!(w, "s_cap_violation_max = {}", s.s_cap_violation_max)?;
    writeln!(w, "max_staleness = {}", s.max_staleness)?;
    Ok(())
}

/// Populates `dir` with every artifact the recording mode allows.
///
/// Fully recorded runs get `trajectory.csv` and the per-bus files; summary
/// runs get only `summary.txt` and `violation.csv`.
pub fn write_run_artifacts(dir: &Path, traj: &Trajectory) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    let file = |name: &str| -> io::Result<BufWriter<File>> {
        Ok(BufWriter::new(File::create(dir.join(name))?))
    };

    write_summary(&mut file("summary.txt")?, traj)?;
    write_violation_csv(&mut file("violation.csv")?, traj)?;

    if !traj.rows.is_empty() {
        write_trajectory_csv(&mut file("trajectory.csv")?, traj)?;
        let n = traj.final_state.p.len();
        let width = n.to_string().len().max(2);
        for bus in 1..=n {
            write_bus_csv(&mut file(&format!("bus_{bus:0width$}.csv"))?, traj, bus)?;
        }
    }
    Ok(())
}
