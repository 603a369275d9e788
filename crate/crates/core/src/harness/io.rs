//! Result emission: the per-cycle CSV, the full-fidelity records JSON that
//! `evaluate` consumes, and report serialization.
//!
//! The CSV uses `.` decimals, `,` delimiters, a header row and LF line
//! endings; identical runs produce byte-identical files.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::harness::cycling::CycleRecord;

fn fmt(v: f64) -> String {
    // Shortest round-trip decimal form; deterministic for a given value.
    format!("{v}")
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => fmt(x),
        None => "NaN".to_string(),
    }
}

/// Write `cycles.csv`: one row per cycle with the analysis error, forecast
/// errors per lead, mean diagnosed standard deviation, solver iterations
/// and flags.
pub fn write_cycles_csv<W: Write>(
    writer: &mut W,
    records: &[CycleRecord],
    horizon: usize,
) -> Result<()> {
    let mut header = String::from("cycle,analysis_wrmse");
    for lead in 1..=horizon {
        header.push_str(&format!(",fc_err_lead_{lead}"));
    }
    header.push_str(",mean_diag_std,solver_iters,flags");
    writeln!(writer, "{header}")?;

    for r in records {
        if r.forecast_wrmse.len() != horizon {
            return Err(Error::Contract(format!(
                "record {} has {} forecast leads, expected {horizon}",
                r.cycle,
                r.forecast_wrmse.len()
            )));
        }
        let mut row = format!("{},{}", r.cycle, fmt(r.analysis_wrmse));
        for v in &r.forecast_wrmse {
            row.push(',');
            row.push_str(&fmt(*v));
        }
        row.push(',');
        row.push_str(&fmt_opt(r.mean_diag_std));
        row.push_str(&format!(",{}", r.solver_iterations));
        row.push(',');
        row.push_str(&r.flags.join(";"));
        writeln!(writer, "{row}")?;
    }
    Ok(())
}

pub fn write_records_json<W: Write>(writer: &mut W, records: &[CycleRecord]) -> Result<()> {
    serde_json::to_writer(writer, records)?;
    Ok(())
}

pub fn read_records_json<R: Read>(reader: &mut R) -> Result<Vec<CycleRecord>> {
    Ok(serde_json::from_reader(reader)?)
}
