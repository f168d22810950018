//! Pass/fail reporting for verification runs.
//!
//! A [`Report`] is an ordered list of named [`Check`]s, each carrying the
//! measured value, the threshold it was held against, and the signed margin
//! in the passing direction.  The same data renders as a human-readable
//! table ([`std::fmt::Display`]) and serializes to CSV
//! ([`Report::to_csv`]/[`Report::parse_csv`]); both views are generated from
//! one struct so they cannot disagree.

use std::fmt;

use thiserror::Error;

/// One named verification result.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub measured: f64,
    pub threshold: f64,
    /// Signed distance to the threshold, positive when passing:
    /// `threshold - measured` for upper bounds, `measured - threshold` for
    /// lower bounds.
    pub margin: f64,
}

impl Check {
    /// A check that passes when `measured <= threshold`.
    pub fn upper(name: impl Into<String>, measured: f64, threshold: f64) -> Self {
        let name = name.into();
        debug_assert!(!name.contains([',', '\n']), "check names must be CSV-safe");
        Check {
            name,
            pass: measured <= threshold,
            measured,
            threshold,
            margin: threshold - measured,
        }
    }

    /// A check that passes when `measured >= threshold`.
    pub fn lower(name: impl Into<String>, measured: f64, threshold: f64) -> Self {
        let name = name.into();
        debug_assert!(!name.contains([',', '\n']), "check names must be CSV-safe");
        Check {
            name,
            pass: measured >= threshold,
            measured,
            threshold,
            margin: measured - threshold,
        }
    }
}

/// An ordered collection of checks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub checks: Vec<Check>,
}

/// The CSV form of a report could not be parsed back.
#[derive(Debug, Error, PartialEq)]
pub enum ReportParseError {
    #[error("missing or malformed header line, expected `{expected}`")]
    BadHeader { expected: &'static str },
    #[error("line {line}: expected 5 comma-separated fields, got {got}")]
    FieldCount { line: usize, got: usize },
    #[error("line {line}: could not parse `{value}` as {what}")]
    BadValue {
        line: usize,
        value: String,
        what: &'static str,
    },
}

const CSV_HEADER: &str = "check,pass,measured,threshold,margin";

impl Report {
    pub fn new() -> Self {
        Report::default()
    }

    pub fn push(&mut self, check: Check) {
        self.checks.push(check);
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    /// First failing check, if any.
    pub fn first_failure(&self) -> Option<&Check> {
        self.checks.iter().find(|c| !c.pass)
    }

    /// Machine-readable form; floats carry 17 significant digits so they
    /// round-trip exactly.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for c in &self.checks {
            out.push_str(&format!(
                "{},{},{:.16e},{:.16e},{:.16e}\n",
                c.name, c.pass, c.measured, c.threshold, c.margin
            ));
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self, ReportParseError> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(CSV_HEADER) {
            return Err(ReportParseError::BadHeader {
                expected: CSV_HEADER,
            });
        }
        let mut checks = Vec::new();
        for (idx, line) in lines.enumerate() {
            let line_no = idx + 2;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(ReportParseError::FieldCount {
                    line: line_no,
                    got: fields.len(),
                });
            }
            let parse_f64 = |value: &str, what: &'static str| {
                value
                    .parse::<f64>()
                    .map_err(|_| ReportParseError::BadValue {
                        line: line_no,
                        value: value.to_string(),
                        what,
                    })
            };
            let pass = match fields[1] {
                "true" => true,
                "false" => false,
                other => {
                    return Err(ReportParseError::BadValue {
                        line: line_no,
                        value: other.to_string(),
                        what: "bool",
                    })
                }
            };
            checks.push(Check {
                name: fields[0].to_string(),
                pass,
                measured: parse_f64(fields[2], "measured")?,
                threshold: parse_f64(fields[3], "threshold")?,
                margin: parse_f64(fields[4], "margin")?,
            });
        }
        Ok(Report { checks })
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name_w = self
            .checks
            .iter()
            .map(|c| c.name.len())
            .max()
            .unwrap_or(5)
            .max(5);
        writeln!(
            f,
            "{:name_w$}  {:6}  {:>13}  {:>13}  {:>13}",
            "check", "status", "measured", "threshold", "margin"
        )?;
        for c in &self.checks {
            writeln!(
                f,
                "{:name_w$}  {:6}  {:>13.6e}  {:>13.6e}  {:>13.6e}",
                c.name,
                if c.pass { "pass" } else { "FAIL" },
                c.measured,
                c.threshold,
                c.margin
            )?;
        }
        let failed = self.checks.iter().filter(|c| !c.pass).count();
        if failed == 0 {
            write!(f, "all {} checks passed", self.checks.len())
        } else {
            write!(f, "{failed} of {} checks FAILED", self.checks.len())
        }
    }
}
