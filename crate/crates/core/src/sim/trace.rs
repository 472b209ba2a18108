//! Per-tick simulation record and its CSV form.

use std::io::Write;

use serde::Serialize;

use crate::centroidal::CentroidalState;
use crate::error::{Error, Result};

/// Contact state of a tick: double support or the stance side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Contact {
    Double,
    Left,
    Right,
}

impl Contact {
    pub fn as_str(self) -> &'static str {
        match self {
            Contact::Double => "double",
            Contact::Left => "left",
            Contact::Right => "right",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub time: f64,
    pub contact: Contact,
    pub reference: [CentroidalState; 2],
    pub actual: [CentroidalState; 2],
    pub estimate: [CentroidalState; 2],
    /// Reference CoP, `V x_ref + n`.
    pub cop_ref: [f64; 2],
    /// True CoP.
    pub cop: [f64; 2],
    /// True VRP, `V x`.
    pub vrp: [f64; 2],
    pub bias: [f64; 2],
    pub jerk: [f64; 2],
    pub disturbance: [f64; 2],
    /// True deflections `[left x, left y, right x, right y]`.
    pub theta: [f64; 4],
    pub theta_est: [f64; 4],
    /// Share of the weight on the left foot.
    pub left_load: f64,
    /// True when the robust saturation interval was empty and the nominal
    /// one was used.
    pub saturation_fallback: bool,
    pub fell: bool,
}

impl TraceRow {
    pub fn cop_error(&self) -> [f64; 2] {
        [self.cop[0] - self.cop_ref[0], self.cop[1] - self.cop_ref[1]]
    }

    pub fn cop_error_norm(&self) -> f64 {
        let e = self.cop_error();
        e[0].hypot(e[1])
    }

    /// VRP tracking error `V (x - x_ref)` per axis.
    pub fn vrp_error(&self, omega_sq: f64) -> [f64; 2] {
        let v = |x: &CentroidalState| x.c - x.c_ddot / omega_sq;
        [v(&self.actual[0]) - v(&self.reference[0]), v(&self.actual[1]) - v(&self.reference[1])]
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimTrace {
    pub rows: Vec<TraceRow>,
}

const AXES: [&str; 2] = ["x", "y"];

fn columns() -> Vec<(String, &'static str)> {
    let mut cols = vec![("time".to_string(), "s"), ("contact".to_string(), "-")];
    for who in ["ref", "true", "est"] {
        for a in AXES {
            cols.push((format!("{who}_c_{a}"), "m"));
            cols.push((format!("{who}_cd_{a}"), "m/s"));
            cols.push((format!("{who}_cdd_{a}"), "m/s^2"));
        }
    }
    for (name, unit) in [
        ("cop_ref", "m"),
        ("cop", "m"),
        ("cop_err", "m"),
        ("vrp", "m"),
        ("bias", "m"),
        ("jerk", "m/s^3"),
        ("dist", "m/s^3"),
    ] {
        for a in AXES {
            cols.push((format!("{name}_{a}"), unit));
        }
    }
    for who in ["theta", "theta_est"] {
        for leg in ["left", "right"] {
            for a in AXES {
                cols.push((format!("{who}_{leg}_{a}"), "rad"));
            }
        }
    }
    cols.push(("left_load".to_string(), "-"));
    cols.push(("sat_fallback".to_string(), "-"));
    cols.push(("fell".to_string(), "-"));
    cols
}

fn num(v: f64) -> String {
    // Shortest round-trip form; deterministic across runs.
    format!("{v}")
}

impl SimTrace {
    pub fn column_names() -> Vec<String> {
        columns().into_iter().map(|(n, _)| n).collect()
    }

    pub fn cop_errors(&self) -> Vec<f64> {
        self.rows.iter().map(TraceRow::cop_error_norm).collect()
    }

    /// Header comment, column names, units, then one line per tick.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let io = |e: csv::Error| Error::Domain(format!("writing trace: {e}"));
        let mut out = out;
        writeln!(out, "# flexwalk {}", env!("CARGO_PKG_VERSION")).map_err(|e| Error::Domain(format!("writing trace: {e}")))?;
        let mut w = csv::WriterBuilder::new().from_writer(out);
        let cols = columns();
        w.write_record(cols.iter().map(|(n, _)| n.as_str())).map_err(io)?;
        w.write_record(cols.iter().map(|(_, u)| *u)).map_err(io)?;
        for r in &self.rows {
            let mut rec = vec![num(r.time), r.contact.as_str().to_string()];
            for s in [&r.reference, &r.actual, &r.estimate] {
                for x in s.iter() {
                    rec.extend([num(x.c), num(x.c_dot), num(x.c_ddot)]);
                }
            }
            for pair in [r.cop_ref, r.cop, r.cop_error(), r.vrp, r.bias, r.jerk, r.disturbance] {
                rec.extend(pair.iter().map(|v| num(*v)));
            }
            rec.extend(r.theta.iter().chain(r.theta_est.iter()).map(|v| num(*v)));
            rec.push(num(r.left_load));
            rec.push(u8::from(r.saturation_fallback).to_string());
            rec.push(u8::from(r.fell).to_string());
            w.write_record(&rec).map_err(io)?;
        }
        w.flush().map_err(|e| Error::Domain(format!("writing trace: {e}")))?;
        Ok(())
    }
}

/// Read one numeric column back from a trace CSV written by [`SimTrace::write_csv`].
pub fn read_column(text: &str, name: &str) -> Result<Vec<f64>> {
    let body: String = text.lines().filter(|l| !l.starts_with('#')).collect::<Vec<_>>().join("\n");
    let mut r = csv::ReaderBuilder::new().from_reader(body.as_bytes());
    let headers = r.headers().map_err(|e| Error::Domain(format!("reading trace: {e}")))?.clone();
    let idx = headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Domain(format!("trace has no column {name}")))?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::Domain(format!("reading trace: {e}")))?;
        if i == 0 {
            continue; // units
        }
        let v = rec[idx].parse::<f64>().map_err(|e| Error::Domain(format!("trace row {}: {e}", i + 1)))?;
        out.push(v);
    }
    Ok(out)
}
