//! Plain-text file formats: network descriptions, load profiles, and
//! scenario files, plus the loader that resolves them into a runnable
//! [`sim::Scenario`].
//!
//! # Network files
//!
//! One branch per line, `line,<from>,<to>,<r>,<x>` with bus indices counted
//! from 0 (the substation).  `#` starts a comment.  The bus count is one
//! more than the largest index mentioned.
//!
//! # Load profiles
//!
//! CSV with header `t,bus,p_load,q_load`; any (iteration, bus) pair not
//! listed has zero load.  Iterations past the last listed one also read as
//! zero.
//!
//! # Scenario files
//!
//! `key = value` lines followed by `[costs]`, `[limits]`, and optionally
//! `[load]` sections; `#` starts a comment anywhere.  Keys:
//!
//! | key           | meaning                                              | default |
//! |---------------|------------------------------------------------------|---------|
//! | `network`     | network file, relative to the scenario file          | required|
//! | `profile`     | load-profile file                                    | none    |
//! | `physics`     | `linear` or `nonlinear`                              | `linear`|
//! | `gamma`       | price step size, a number or `auto`                  | required|
//! | `horizon`     | iterations to run                                    | required|
//! | `delay`       | `none`, `fixed:T`, `uniform:T`, `intermittent:K`     | `none`  |
//! | `noise_std`   | measurement noise std (squared-voltage units)        | `0`     |
//! | `model_error` | `lo,hi` factors on each agent's own sensitivities    | none    |
//! | `v0`          | substation voltage magnitude (p.u.)                  | `1`     |
//! | `v_limits`    | `lo,hi` voltage magnitude band (p.u.)                | `0.95,1.05` |
//! | `seed`        | root RNG seed                                        | `0`     |
//!
//! `[costs]` rows are `<bus>,a_p,b_p,c_p,a_q,b_q,c_q`; `[limits]` rows are
//! `<bus>,p_lo,p_hi,q_lo,q_hi[,s_bar]`.  In both, `*` as the bus supplies a
//! default for every bus not listed explicitly.  `[load]` rows are
//! `<bus>,p_load,q_load` and define a constant load (mutually exclusive
//! with `profile`).  Voltage quantities in scenario files are magnitudes;
//! the loader squares them before anything touches the controller.
//!
//! `gamma = auto` resolves to 90% of the tightest analytic step-size
//! ceiling for the network, costs, and delay model at hand.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DVector;
use thiserror::Error;

use crate::agent::{BusBox, BusCost, CostParams, Limits, ParamError};
use crate::net::{Line, NetworkError, RadialNetwork};
use crate::oracle::Constants;
use crate::sim::delay::DelayModel;
use crate::sim::{LoadProfile, Physics, Scenario, ScenarioError};

/// Problems turning files into a runnable scenario.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Syntax {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{path}: missing required {what}")]
    Missing { path: PathBuf, what: String },
    #[error("{path}: {msg}")]
    Invalid { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Network { path: PathBuf, source: NetworkError },
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

fn syntax(path: &Path, line: usize, msg: impl Into<String>) -> ConfigError {
    ConfigError::Syntax {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_num<T: FromStr>(
    raw: &str,
    what: &str,
    path: &Path,
    line: usize,
) -> Result<T, ConfigError> {
    raw.trim().parse().map_err(|_| {
        syntax(
            path,
            line,
            format!("cannot parse `{}` as {what}", raw.trim()),
        )
    })
}

/// Parses a network file into validated topology.
pub fn parse_network(text: &str, path: &Path) -> Result<RadialNetwork, ConfigError> {
    let mut lines_spec = Vec::new();
    let mut max_bus = 0usize;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let fields: Vec<&str> = body.split(',').map(str::trim).collect();
        if fields.len() != 5 || fields[0] != "line" {
            return Err(syntax(path, line_no, "expected `line,<from>,<to>,<r>,<x>`"));
        }
        let from: usize = parse_num(fields[1], "a bus index", path, line_no)?;
        let to: usize = parse_num(fields[2], "a bus index", path, line_no)?;
        let r: f64 = parse_num(fields[3], "a resistance", path, line_no)?;
        let x: f64 = parse_num(fields[4], "a reactance", path, line_no)?;
        max_bus = max_bus.max(from).max(to);
        lines_spec.push(Line::new(from, to, r, x));
    }
    RadialNetwork::new(max_bus + 1, &lines_spec).map_err(|source| ConfigError::Network {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads and parses a network file.
pub fn read_network(path: &Path) -> Result<RadialNetwork, ConfigError> {
    parse_network(&read(path)?, path)
}

/// Parses a load-profile CSV for a network with `n` controllable buses.
pub fn parse_profile(text: &str, n: usize, path: &Path) -> Result<LoadProfile, ConfigError> {
    const HEADER: &str = "t,bus,p_load,q_load";
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == HEADER => {}
        _ => {
            return Err(syntax(path, 1, format!("expected header `{HEADER}`")));
        }
    }
    let mut rows: Vec<(usize, usize, f64, f64)> = Vec::new();
    let mut max_t = 0usize;
    for (idx, raw) in lines {
        let line_no = idx + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let fields: Vec<&str> = body.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(syntax(path, line_no, "expected `t,bus,p_load,q_load`"));
        }
        let t: usize = parse_num(fields[0], "an iteration index", path, line_no)?;
        let bus: usize = parse_num(fields[1], "a bus index", path, line_no)?;
        if bus == 0 || bus > n {
            return Err(syntax(path, line_no, format!("bus {bus} outside 1..={n}")));
        }
        let p: f64 = parse_num(fields[2], "a load", path, line_no)?;
        let q: f64 = parse_num(fields[3], "a load", path, line_no)?;
        max_t = max_t.max(t);
        rows.push((t, bus, p, q));
    }
    if rows.is_empty() {
        return Ok(LoadProfile::None);
    }
    let len = max_t + 1;
    let mut p = vec![DVector::zeros(n); len];
    let mut q = vec![DVector::zeros(n); len];
    for (t, bus, pl, ql) in rows {
        p[t][bus - 1] += pl;
        q[t][bus - 1] += ql;
    }
    Ok(LoadProfile::Series { p, q })
}

/// Step size as written in a scenario file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GammaSpec {
    /// Resolve from the analytic ceilings at load time.
    Auto,
    Fixed(f64),
}

/// A per-bus table with an optional wildcard default, as written in the
/// `[costs]` and `[limits]` sections.
#[derive(Debug, Clone, PartialEq)]
pub struct BusTable<T> {
    pub default: Option<T>,
    pub rows: BTreeMap<usize, T>,
}

impl<T: Clone> BusTable<T> {
    fn empty() -> Self {
        BusTable {
            default: None,
            rows: BTreeMap::new(),
        }
    }

    /// Resolves one value per bus `1..=n`, requiring full coverage.
    fn resolve(&self, n: usize, section: &str, path: &Path) -> Result<Vec<T>, ConfigError> {
        if let Some(&bus) = self.rows.keys().find(|&&b| b == 0 || b > n) {
            return Err(ConfigError::Invalid {
                path: path.to_path_buf(),
                msg: format!("[{section}] row for bus {bus} outside 1..={n}"),
            });
        }
        (1..=n)
            .map(|bus| {
                self.rows
                    .get(&bus)
                    .or(self.default.as_ref())
                    .cloned()
                    .ok_or_else(|| ConfigError::Missing {
                        path: path.to_path_buf(),
                        what: format!("[{section}] row for bus {bus} (or a `*` default)"),
                    })
            })
            .collect()
    }
}

/// One `[limits]` row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LimitRow {
    pub p_lo: f64,
    pub p_hi: f64,
    pub q_lo: f64,
    pub q_hi: f64,
    pub s_bar: Option<f64>,
}

impl LimitRow {
    fn to_box(self) -> BusBox {
        let mut bx = BusBox {
            p_lo: self.p_lo,
            p_hi: self.p_hi,
            q_lo: self.q_lo,
            q_hi: self.q_hi,
            s_bar: None,
        };
        if let Some(s) = self.s_bar {
            bx = bx.with_cap(s);
        }
        bx
    }
}

/// A scenario file, faithfully enough that parsing a serialization yields
/// an equal value.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub network: PathBuf,
    pub profile: Option<PathBuf>,
    pub physics: Physics,
    pub gamma: GammaSpec,
    pub horizon: usize,
    pub delay: DelayModel,
    pub noise_std: f64,
    pub model_error: Option<(f64, f64)>,
    /// Substation voltage magnitude (p.u.).
    pub v0_mag: f64,
    /// Voltage band magnitudes (p.u.).
    pub v_limits_mag: (f64, f64),
    pub seed: u64,
    pub costs: BusTable<BusCost>,
    pub limits: BusTable<LimitRow>,
    /// Constant per-bus loads from a `[load]` section.
    pub static_load: BTreeMap<usize, (f64, f64)>,
}

fn parse_pair(raw: &str, what: &str, path: &Path, line: usize) -> Result<(f64, f64), ConfigError> {
    let parts: Vec<&str> = raw.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        return Err(syntax(path, line, format!("{what} needs `lo,hi`")));
    }
    Ok((
        parse_num(parts[0], what, path, line)?,
        parse_num(parts[1], what, path, line)?,
    ))
}

impl ScenarioSpec {
    /// Parses scenario text; `path` is only used in error messages.
    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        #[derive(PartialEq, Clone, Copy)]
        enum Section {
            Top,
            Costs,
            Limits,
            Load,
        }

        let mut keys: BTreeMap<&str, (usize, String)> = BTreeMap::new();
        let mut costs = BusTable::empty();
        let mut limits = BusTable::empty();
        let mut static_load = BTreeMap::new();
        let mut section = Section::Top;

        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            if let Some(name) = body.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = match name.trim() {
                    "costs" => Section::Costs,
                    "limits" => Section::Limits,
                    "load" => Section::Load,
                    other => {
                        return Err(syntax(path, line_no, format!("unknown section [{other}]")))
                    }
                };
                continue;
            }
            match section {
                Section::Top => {
                    let (key, value) = body.split_once('=').ok_or_else(|| {
                        syntax(path, line_no, "expected `key = value` or a section header")
                    })?;
                    let key = key.trim();
                    let known = [
                        "network",
                        "profile",
                        "physics",
                        "gamma",
                        "horizon",
                        "delay",
                        "noise_std",
                        "model_error",
                        "v0",
                        "v_limits",
                        "seed",
                    ];
                    if !known.contains(&key) {
                        return Err(syntax(path, line_no, format!("unknown key `{key}`")));
                    }
                    if keys
                        .insert(
                            known.iter().find(|&&k| k == key).unwrap(),
                            (line_no, value.trim().to_string()),
                        )
                        .is_some()
                    {
                        return Err(syntax(path, line_no, format!("duplicate key `{key}`")));
                    }
                }
                Section::Costs => {
                    let fields: Vec<&str> = body.split(',').map(str::trim).collect();
                    if fields.len() != 7 {
                        return Err(syntax(
                            path,
                            line_no,
                            "expected `<bus|*>,a_p,b_p,c_p,a_q,b_q,c_q`",
                        ));
                    }
                    let row = BusCost {
                        a_p: parse_num(fields[1], "a cost coefficient", path, line_no)?,
                        b_p: parse_num(fields[2], "a cost coefficient", path, line_no)?,
                        c_p: parse_num(fields[3], "a cost coefficient", path, line_no)?,
                        a_q: parse_num(fields[4], "a cost coefficient", path, line_no)?,
                        b_q: parse_num(fields[5], "a cost coefficient", path, line_no)?,
                        c_q: parse_num(fields[6], "a cost coefficient", path, line_no)?,
                    };
                    insert_row(&mut costs, fields[0], row, "costs", path, line_no)?;
                }
                Section::Limits => {
                    let fields: Vec<&str> = body.split(',').map(str::trim).collect();
                    if fields.len() != 5 && fields.len() != 6 {
                        return Err(syntax(
                            path,
                            line_no,
                            "expected `<bus|*>,p_lo,p_hi,q_lo,q_hi[,s_bar]`",
                        ));
                    }
                    let row = LimitRow {
                        p_lo: parse_num(fields[1], "a limit", path, line_no)?,
                        p_hi: parse_num(fields[2], "a limit", path, line_no)?,
                        q_lo: parse_num(fields[3], "a limit", path, line_no)?,
                        q_hi: parse_num(fields[4], "a limit", path, line_no)?,
                        s_bar: match fields.get(5) {
                            Some(s) => Some(parse_num(s, "an apparent-power cap", path, line_no)?),
                            None => None,
                        },
                    };
                    insert_row(&mut limits, fields[0], row, "limits", path, line_no)?;
                }
                Section::Load => {
                    let fields: Vec<&str> = body.split(',').map(str::trim).collect();
                    if fields.len() != 3 {
                        return Err(syntax(path, line_no, "expected `<bus>,p_load,q_load`"));
                    }
                    let bus: usize = parse_num(fields[0], "a bus index", path, line_no)?;
                    let p: f64 = parse_num(fields[1], "a load", path, line_no)?;
                    let q: f64 = parse_num(fields[2], "a load", path, line_no)?;
                    if static_load.insert(bus, (p, q)).is_some() {
                        return Err(syntax(
                            path,
                            line_no,
                            format!("duplicate [load] row for bus {bus}"),
                        ));
                    }
                }
            }
        }

        let mut take = |key: &str| keys.remove(key);
        let require = |field: Option<(usize, String)>, key: &str| {
            field.ok_or_else(|| ConfigError::Missing {
                path: path.to_path_buf(),
                what: format!("key `{key}`"),
            })
        };

        let (_, network) = require(take("network"), "network")?;
        let profile = take("profile").map(|(_, v)| PathBuf::from(v));
        let physics = match take("physics") {
            None => Physics::Linear,
            Some((line, v)) => match v.as_str() {
                "linear" => Physics::Linear,
                "nonlinear" => Physics::Nonlinear,
                other => {
                    return Err(syntax(
                        path,
                        line,
                        format!("physics must be `linear` or `nonlinear`, got `{other}`"),
                    ))
                }
            },
        };
        let gamma = {
            let (line, v) = require(take("gamma"), "gamma")?;
            if v == "auto" {
                GammaSpec::Auto
            } else {
                GammaSpec::Fixed(parse_num(&v, "a step size", path, line)?)
            }
        };
        let horizon = {
            let (line, v) = require(take("horizon"), "horizon")?;
            parse_num(&v, "an iteration count", path, line)?
        };
        let delay = match take("delay") {
            None => DelayModel::None,
            Some((line, v)) => {
                DelayModel::parse(&v).map_err(|e| syntax(path, line, e.to_string()))?
            }
        };
        let noise_std = match take("noise_std") {
            None => 0.0,
            Some((line, v)) => parse_num(&v, "a noise level", path, line)?,
        };
        let model_error = match take("model_error") {
            None => None,
            Some((line, v)) => Some(parse_pair(&v, "model_error", path, line)?),
        };
        let v0_mag = match take("v0") {
            None => 1.0,
            Some((line, v)) => parse_num(&v, "a voltage magnitude", path, line)?,
        };
        let v_limits_mag = match take("v_limits") {
            None => (0.95, 1.05),
            Some((line, v)) => parse_pair(&v, "v_limits", path, line)?,
        };
        let seed = match take("seed") {
            None => 0,
            Some((line, v)) => parse_num(&v, "a seed", path, line)?,
        };

        Ok(ScenarioSpec {
            network: PathBuf::from(network),
            profile,
            physics,
            gamma,
            horizon,
            delay,
            noise_std,
            model_error,
            v0_mag,
            v_limits_mag,
            seed,
            costs,
            limits,
            static_load,
        })
    }

    /// Canonical text form; `parse` of the result equals `self`.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "network = {}", self.network.display());
        if let Some(p) = &self.profile {
            let _ = writeln!(out, "profile = {}", p.display());
        }
        let _ = writeln!(
            out,
            "physics = {}",
            match self.physics {
                Physics::Linear => "linear",
                Physics::Nonlinear => "nonlinear",
            }
        );
        match self.gamma {
            GammaSpec::Auto => {
                let _ = writeln!(out, "gamma = auto");
            }
            GammaSpec::Fixed(g) => {
                let _ = writeln!(out, "gamma = {g}");
            }
        }
        let _ = writeln!(out, "horizon = {}", self.horizon);
        let _ = writeln!(out, "delay = {}", self.delay);
        let _ = writeln!(out, "noise_std = {}", self.noise_std);
        if let Some((lo, hi)) = self.model_error {
            let _ = writeln!(out, "model_error = {lo},{hi}");
        }
        let _ = writeln!(out, "v0 = {}", self.v0_mag);
        let _ = writeln!(
            out,
            "v_limits = {},{}",
            self.v_limits_mag.0, self.v_limits_mag.1
        );
        let _ = writeln!(out, "seed = {}", self.seed);

        let _ = writeln!(out, "\n[costs]");
        let cost_row = |out: &mut String, bus: &str, r: &BusCost| {
            let _ = writeln!(
                out,
                "{bus},{},{},{},{},{},{}",
                r.a_p, r.b_p, r.c_p, r.a_q, r.b_q, r.c_q
            );
        };
        if let Some(d) = &self.costs.default {
            cost_row(&mut out, "*", d);
        }
        for (bus, r) in &self.costs.rows {
            cost_row(&mut out, &bus.to_string(), r);
        }

        let _ = writeln!(out, "\n[limits]");
        let limit_row = |out: &mut String, bus: &str, r: &LimitRow| {
            match r.s_bar {
                Some(s) => {
                    let _ = writeln!(out, "{bus},{},{},{},{},{s}", r.p_lo, r.p_hi, r.q_lo, r.q_hi);
                }
                None => {
                    let _ = writeln!(out, "{bus},{},{},{},{}", r.p_lo, r.p_hi, r.q_lo, r.q_hi);
                }
            };
        };
        if let Some(d) = &self.limits.default {
            limit_row(&mut out, "*", d);
        }
        for (bus, r) in &self.limits.rows {
            limit_row(&mut out, &bus.to_string(), r);
        }

        if !self.static_load.is_empty() {
            let _ = writeln!(out, "\n[load]");
            for (bus, (p, q)) in &self.static_load {
                let _ = writeln!(out, "{bus},{p},{q}");
            }
        }
        out
    }
}

fn insert_row<T>(
    table: &mut BusTable<T>,
    bus_field: &str,
    row: T,
    section: &str,
    path: &Path,
    line_no: usize,
) -> Result<(), ConfigError> {
    if bus_field == "*" {
        if table.default.replace(row).is_some() {
            return Err(syntax(
                path,
                line_no,
                format!("duplicate `*` row in [{section}]"),
            ));
        }
        return Ok(());
    }
    let bus: usize = parse_num(bus_field, "a bus index", path, line_no)?;
    if table.rows.insert(bus, row).is_some() {
        return Err(syntax(
            path,
            line_no,
            format!("duplicate row for bus {bus} in [{section}]"),
        ));
    }
    Ok(())
}

/// A scenario resolved against its referenced files, ready to run.
#[derive(Debug, Clone)]
pub struct LoadedScenario {
    pub spec: ScenarioSpec,
    pub scenario: Scenario,
    /// Analytic constants at this scenario's delay bound.
    pub constants: Constants,
    /// Whether the step size came from `gamma = auto`.
    pub gamma_was_auto: bool,
}

/// Reads a scenario file and everything it references.
pub fn load_scenario(path: &Path) -> Result<LoadedScenario, ConfigError> {
    let spec = ScenarioSpec::parse(&read(path)?, path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));

    let net = read_network(&base.join(&spec.network))?;
    let n = net.num_buses();

    let cost_rows = spec.costs.resolve(n, "costs", path)?;
    let costs = CostParams::new(cost_rows)?;

    let limit_rows = spec.limits.resolve(n, "limits", path)?;
    let (v_lo_mag, v_hi_mag) = spec.v_limits_mag;
    if !(v_lo_mag > 0.0 && v_hi_mag > v_lo_mag) {
        return Err(ConfigError::Invalid {
            path: path.to_path_buf(),
            msg: format!("v_limits must satisfy 0 < lo < hi, got {v_lo_mag},{v_hi_mag}"),
        });
    }
    let limits = Limits::new(
        limit_rows.into_iter().map(LimitRow::to_box).collect(),
        DVector::from_element(n, v_lo_mag * v_lo_mag),
        DVector::from_element(n, v_hi_mag * v_hi_mag),
    )?;

    let loads = match (&spec.profile, spec.static_load.is_empty()) {
        (Some(_), false) => {
            return Err(ConfigError::Invalid {
                path: path.to_path_buf(),
                msg: "`profile` and a [load] section are mutually exclusive".into(),
            })
        }
        (Some(p), true) => {
            let p_path = base.join(p);
            parse_profile(&read(&p_path)?, n, &p_path)?
        }
        (None, false) => {
            if let Some(&bus) = spec.static_load.keys().find(|&&b| b == 0 || b > n) {
                return Err(ConfigError::Invalid {
                    path: path.to_path_buf(),
                    msg: format!("[load] row for bus {bus} outside 1..={n}"),
                });
            }
            let mut p = DVector::zeros(n);
            let mut q = DVector::zeros(n);
            for (&bus, &(pl, ql)) in &spec.static_load {
                p[bus - 1] = pl;
                q[bus - 1] = ql;
            }
            LoadProfile::Static { p, q }
        }
        (None, true) => LoadProfile::None,
    };

    let constants = Constants::compute(&net, &net.sensitivity(), &costs, spec.delay.tau_max());
    let (gamma, gamma_was_auto) = match spec.gamma {
        GammaSpec::Auto => (constants.gamma_auto(), true),
        GammaSpec::Fixed(g) => (g, false),
    };

    let scenario = Scenario {
        net,
        costs,
        limits,
        v0: spec.v0_mag * spec.v0_mag,
        gamma,
        horizon: spec.horizon,
        delay: spec.delay,
        noise_std: spec.noise_std,
        model_error: spec.model_error,
        physics: spec.physics,
        loads,
        seed: spec.seed,
    };
    scenario.validate()?;

    Ok(LoadedScenario {
        spec,
        scenario,
        constants,
        gamma_was_auto,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str) -> &Path {
        Path::new(s)
    }

    const NET8: &str = "\
# eight controllable buses hanging off the substation
line,0,1,0.05,0.04
line,1,2,0.04,0.03
line,1,3,0.05,0.05
line,2,4,0.03,0.02
line,2,5,0.04,0.04
line,3,6,0.05,0.03
line,3,7,0.04,0.05
line,2,8,0.03,0.03
";

    #[test]
    fn network_parses_with_comments_and_whitespace() {
        let net = parse_network(NET8, p("test.net")).unwrap();
        assert_eq!(net.num_buses(), 8);
        assert_eq!(net.children(2), &[4, 5, 8]);
    }

    #[test]
    fn network_syntax_errors_carry_location() {
        let err = parse_network("line,0,1,0.05\n", p("bad.net")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bad.net:1"), "{msg}");
        let err = parse_network("edge,0,1,0.05,0.04\n", p("bad.net")).unwrap_err();
        assert!(err.to_string().contains("expected `line,"));
        let err = parse_network("line,0,one,0.05,0.04\n", p("bad.net")).unwrap_err();
        assert!(err.to_string().contains("cannot parse `one`"));
    }

    #[test]
    fn network_validation_errors_are_wrapped() {
        let cyclic = "line,0,1,0.1,0.1\nline,1,2,0.1,0.1\nline,2,0,0.1,0.1\n";
        let err = parse_network(cyclic, p("cycle.net")).unwrap_err();
        assert!(matches!(
            err,
            ConfigError::Network {
                source: NetworkError::CycleDetected(_, _),
                ..
            }
        ));
    }

    #[test]
    fn profile_fills_absent_pairs_with_zero() {
        let text = "t,bus,p_load,q_load\n0,1,-0.3,-0.1\n2,2,0.5,0\n";
        let prof = parse_profile(text, 3, p("day.csv")).unwrap();
        match prof {
            LoadProfile::Series { p, q } => {
                assert_eq!(p.len(), 3);
                assert_eq!(p[0][0], -0.3);
                assert_eq!(q[0][0], -0.1);
                assert_eq!(p[1].amax(), 0.0);
                assert_eq!(p[2][1], 0.5);
            }
            other => panic!("expected a series, got {other:?}"),
        }
    }

    #[test]
    fn profile_rejects_bad_header_and_buses() {
        assert!(parse_profile("time,bus,p,q\n", 3, p("x.csv")).is_err());
        let err = parse_profile("t,bus,p_load,q_load\n0,9,0.1,0.1\n", 3, p("x.csv")).unwrap_err();
        assert!(err.to_string().contains("bus 9 outside 1..=3"));
    }

    const SCENARIO: &str = "\
# demo scenario
network = feeder.net
physics = nonlinear
gamma = auto
horizon = 1200
delay = uniform:15
noise_std = 0.01
model_error = 0.8,1.2
v0 = 1
v_limits = 0.95,1.05
seed = 42

[costs]
*,1,0,0,1,0,0
3,2,0.1,0,2,0.1,0

[limits]
*,-0.1,0.1,-0.1,0.1
5,-0.1,0.1,-0.1,0.1,0.12

[load]
2,-0.3,-0.1
";

    #[test]
    fn scenario_parse_reads_every_field() {
        let spec = ScenarioSpec::parse(SCENARIO, p("demo.sc")).unwrap();
        assert_eq!(spec.network, PathBuf::from("feeder.net"));
        assert_eq!(spec.physics, Physics::Nonlinear);
        assert_eq!(spec.gamma, GammaSpec::Auto);
        assert_eq!(spec.horizon, 1200);
        assert_eq!(spec.delay, DelayModel::UniformRandom(15));
        assert_eq!(spec.noise_std, 0.01);
        assert_eq!(spec.model_error, Some((0.8, 1.2)));
        assert_eq!(spec.v_limits_mag, (0.95, 1.05));
        assert_eq!(spec.seed, 42);
        assert_eq!(spec.costs.rows[&3].a_p, 2.0);
        assert_eq!(spec.limits.rows[&5].s_bar, Some(0.12));
        assert_eq!(spec.static_load[&2], (-0.3, -0.1));
    }

    #[test]
    fn scenario_round_trips_through_serialize() {
        let spec = ScenarioSpec::parse(SCENARIO, p("demo.sc")).unwrap();
        let text = spec.serialize();
        let again = ScenarioSpec::parse(&text, p("demo.sc")).unwrap();
        assert_eq!(spec, again);
    }

    #[test]
    fn scenario_defaults_apply_and_round_trip() {
        let minimal = "\
network = n.net
gamma = 0.05
horizon = 10

[costs]
*,1,0,0,1,0,0

[limits]
*,-0.1,0.1,-0.1,0.1
";
        let spec = ScenarioSpec::parse(minimal, p("m.sc")).unwrap();
        assert_eq!(spec.physics, Physics::Linear);
        assert_eq!(spec.delay, DelayModel::None);
        assert_eq!(spec.noise_std, 0.0);
        assert_eq!(spec.v0_mag, 1.0);
        assert_eq!(spec.v_limits_mag, (0.95, 1.05));
        assert_eq!(spec.seed, 0);
        assert_eq!(spec.gamma, GammaSpec::Fixed(0.05));
        let again = ScenarioSpec::parse(&spec.serialize(), p("m.sc")).unwrap();
        assert_eq!(spec, again);
    }

    #[test]
    fn scenario_rejects_unknown_and_duplicate_keys() {
        let err = ScenarioSpec::parse("nettwork = x.net\n", p("t.sc")).unwrap_err();
        assert!(err.to_string().contains("unknown key `nettwork`"));
        let err = ScenarioSpec::parse("gamma = 0.1\ngamma = 0.2\n", p("t.sc")).unwrap_err();
        assert!(err.to_string().contains("duplicate key `gamma`"));
        let err = ScenarioSpec::parse("network = x\n[prices]\n", p("t.sc")).unwrap_err();
        assert!(err.to_string().contains("unknown section [prices]"));
        let err = ScenarioSpec::parse(
            "network = x\ngamma = auto\nhorizon = 5\n[costs]\n*,1,0,0\n",
            p("t.sc"),
        )
        .unwrap_err();
        assert!(err.to_string().contains("expected `<bus|*>,a_p"));
    }

    #[test]
    fn scenario_requires_mandatory_keys() {
        let err = ScenarioSpec::parse("gamma = 0.1\nhorizon = 5\n", p("t.sc")).unwrap_err();
        assert!(err.to_string().contains("missing required key `network`"));
    }

    fn write_files(dir: &Path, scenario: &str) -> PathBuf {
        std::fs::write(dir.join("feeder.net"), NET8).unwrap();
        let sc = dir.join("demo.sc");
        std::fs::write(&sc, scenario).unwrap();
        sc
    }

    #[test]
    fn load_scenario_resolves_paths_and_squares_voltages() {
        let dir = tempfile::tempdir().unwrap();
        let sc = write_files(
            dir.path(),
            "\
network = feeder.net
gamma = auto
horizon = 50
delay = fixed:2
v0 = 1.01

[costs]
*,1,0,0,1,0,0

[limits]
*,-0.1,0.1,-0.1,0.1

[load]
4,-0.2,-0.05
",
        );
        let loaded = load_scenario(&sc).unwrap();
        assert!(loaded.gamma_was_auto);
        assert_eq!(loaded.scenario.net.num_buses(), 8);
        assert!((loaded.scenario.v0 - 1.01f64 * 1.01).abs() < 1e-15);
        assert!((loaded.scenario.limits.v_lo[0] - 0.9025).abs() < 1e-12);
        assert!((loaded.scenario.limits.v_hi[0] - 1.1025).abs() < 1e-12);
        assert_eq!(loaded.scenario.gamma, loaded.constants.gamma_auto());
        assert_eq!(loaded.constants.tau_max, 2);
        match &loaded.scenario.loads {
            LoadProfile::Static { p, q } => {
                assert_eq!(p[3], -0.2);
                assert_eq!(q[3], -0.05);
                assert_eq!(p[0], 0.0);
            }
            other => panic!("expected static loads, got {other:?}"),
        }
    }

    #[test]
    fn load_scenario_requires_full_bus_coverage() {
        let dir = tempfile::tempdir().unwrap();
        let sc = write_files(
            dir.path(),
            "\
network = feeder.net
gamma = 0.1
horizon = 5

[costs]
1,1,0,0,1,0,0

[limits]
*,-0.1,0.1,-0.1,0.1
",
        );
        let err = load_scenario(&sc).unwrap_err();
        assert!(err.to_string().contains("[costs] row for bus 2"), "{err}");
    }

    #[test]
    fn load_scenario_rejects_profile_plus_static_load() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("day.csv"), "t,bus,p_load,q_load\n").unwrap();
        let sc = write_files(
            dir.path(),
            "\
network = feeder.net
profile = day.csv
gamma = 0.1
horizon = 5

[costs]
*,1,0,0,1,0,0

[limits]
*,-0.1,0.1,-0.1,0.1

[load]
1,-0.1,0
",
        );
        let err = load_scenario(&sc).unwrap_err();
        assert!(err.to_string().contains("mutually exclusive"));
    }

    #[test]
    fn load_scenario_surfaces_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let sc = dir.path().join("demo.sc");
        std::fs::write(
            &sc,
            "network = nope.net\ngamma = 0.1\nhorizon = 5\n\n[costs]\n*,1,0,0,1,0,0\n\n[limits]\n*,-0.1,0.1,-0.1,0.1\n",
        )
        .unwrap();
        let err = load_scenario(&sc).unwrap_err();
        assert!(matches!(err, ConfigError::Io { .. }));
        assert!(err.to_string().contains("nope.net"));
    }
}
