//! CSV traces and plain-text run summaries.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::harness::{Metrics, Scenario, SimTrace};

/// 17 significant digits: enough for every f64 to survive a text round trip.
fn fmt_value(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

pub fn write_trace_csv<W: Write>(trace: &SimTrace, mut out: W) -> Result<()> {
    writeln!(out, "{}", trace.layout.header().join(","))?;
    let mut line = String::new();
    for k in 0..trace.len() {
        line.clear();
        line.push_str(&fmt_value(trace.times[k]));
        for v in trace.row(k) {
            line.push(',');
            line.push_str(&fmt_value(*v));
        }
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

/// A parsed CSV trace: column names and numeric rows (time first).
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl CsvTable {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let idx = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[idx]).collect())
    }
}

pub fn read_trace_csv<R: BufRead>(input: R) -> Result<CsvTable> {
    let mut lines = input.lines();
    let header: Vec<String> = match lines.next() {
        Some(line) => line?.split(',').map(|s| s.trim().to_string()).collect(),
        None => return Err(Error::Parse {
            line: 1,
            message: "empty trace file".into(),
        }),
    };
    let mut rows = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        let line_no = idx + 2;
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|s| {
                s.trim().parse::<f64>().map_err(|_| Error::Parse {
                    line: line_no,
                    message: format!("'{s}' is not a number"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if row.len() != header.len() {
            return Err(Error::Parse {
                line: line_no,
                message: format!("{} fields, header has {}", row.len(), header.len()),
            });
        }
        rows.push(row);
    }
    Ok(CsvTable { header, rows })
}

/// `key: value` lines describing a finished run.
pub fn summary_text(scenario: &Scenario, trace: &SimTrace, metrics: &Metrics) -> String {
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(s, "{k}: {v}");
    };
    kv("scenario", scenario.name.clone());
    kv("agents", scenario.fleet.len().to_string());
    kv("tau_x", scenario.tau_x.to_string());
    kv("tau_u", scenario.tau_u.to_string());
    kv("step", scenario.step.to_string());
    kv("duration", scenario.duration.to_string());
    kv("reference", scenario.reference.kind.name().to_string());
    kv("rows", trace.len().to_string());
    kv("peak_error", metrics.peak_error.to_string());
    kv("final_mean_error", metrics.final_mean_error.to_string());
    kv("final_window", metrics.final_window.to_string());
    kv("settling_time", metrics.settling_time.to_string());
    kv("max_vd_slope", metrics.max_vd_slope.to_string());
    kv("transient_window", metrics.transient_window.to_string());
    kv("max_gain_range_ratio", metrics.max_gain_range_ratio.to_string());
    let header = trace.layout.header();
    let gain_names = header
        .iter()
        .filter(|h| h.starts_with("theta_") || h.starts_with("phi_phi_"));
    for (name, v) in gain_names.zip(&metrics.final_gains) {
        kv(&format!("final_{name}"), v.to_string());
    }
    s
}
