// SPDX-License-Identifier: Apache-2.0

//! Provision and deprovision timing: records, summary tables and CSV export.

use std::collections::BTreeMap;
use std::fmt;
use std::io;

use serde::{Deserialize, Serialize};

/// Histogram bin width in simulated seconds.
pub const BIN_WIDTH_S: f64 = 5.0;
/// Upper edge of the histogram range.
pub const HISTOGRAM_MAX_S: f64 = 180.0;
pub const BIN_COUNT: usize = (HISTOGRAM_MAX_S / BIN_WIDTH_S) as usize;

pub const CSV_HEADER: [&str; 6] = ["slice_id", "use_case", "operation", "start_s", "end_s", "duration_s"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operation {
    Provision,
    Deprovision,
}

impl fmt::Display for Operation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Operation::Provision => "provision",
            Operation::Deprovision => "deprovision",
        })
    }
}

/// One row of the timing CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub slice_id: String,
    pub use_case: String,
    pub operation: Operation,
    pub start_s: f64,
    pub end_s: f64,
    pub duration_s: f64,
}

/// Bin index of a duration: `[k*5, (k+1)*5)` for k < 35, the last bin closed
/// at 180, `None` beyond the range or for negative values.
pub fn bin_index(duration_s: f64) -> Option<usize> {
    if !(0.0..=HISTOGRAM_MAX_S).contains(&duration_s) {
        return None;
    }
    Some(((duration_s / BIN_WIDTH_S).floor() as usize).min(BIN_COUNT - 1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub use_case: String,
    pub operation: Operation,
    pub count: usize,
    pub mean_s: f64,
    pub min_s: f64,
    pub max_s: f64,
    /// Counts per 5 s bin over [0, 180].
    pub bins: Vec<u32>,
    /// Samples outside [0, 180].
    pub out_of_range: u32,
}

impl TimingSummary {
    /// Lower edge of bin `k`.
    pub fn bin_start(k: usize) -> f64 {
        k as f64 * BIN_WIDTH_S
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingTable {
    pub summaries: Vec<TimingSummary>,
}

#[derive(Debug, thiserror::Error)]
pub enum TimingError {
    #[error("no timing records")]
    Empty,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Summaries per `(use_case, operation)`, in that order.
pub fn timing_report(records: &[TimingRecord]) -> Result<TimingTable, TimingError> {
    if records.is_empty() {
        return Err(TimingError::Empty);
    }
    let mut groups: BTreeMap<(&str, Operation), Vec<f64>> = BTreeMap::new();
    for r in records {
        groups.entry((r.use_case.as_str(), r.operation)).or_default().push(r.duration_s);
    }
    let summaries = groups
        .into_iter()
        .map(|((use_case, operation), xs)| {
            let mut bins = vec![0u32; BIN_COUNT];
            let mut out_of_range = 0;
            for x in &xs {
                match bin_index(*x) {
                    Some(k) => bins[k] += 1,
                    None => out_of_range += 1,
                }
            }
            TimingSummary {
                use_case: use_case.to_string(),
                operation,
                count: xs.len(),
                mean_s: xs.iter().sum::<f64>() / xs.len() as f64,
                min_s: xs.iter().copied().fold(f64::INFINITY, f64::min),
                max_s: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                bins,
                out_of_range,
            }
        })
        .collect();
    Ok(TimingTable { summaries })
}

impl TimingTable {
    pub fn get(&self, use_case: &str, operation: Operation) -> Option<&TimingSummary> {
        self.summaries.iter().find(|s| s.use_case == use_case && s.operation == operation)
    }
}

/// Writes the header and one row per record.
pub fn write_csv<W: io::Write>(records: &[TimingRecord], out: W) -> Result<(), TimingError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.write_record([
            r.slice_id.clone(),
            r.use_case.clone(),
            r.operation.to_string(),
            format!("{:.6}", r.start_s),
            format!("{:.6}", r.end_s),
            format!("{:.6}", r.duration_s),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn to_csv_string(records: &[TimingRecord]) -> String {
    let mut buf = Vec::new();
    write_csv(records, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("csv is utf-8")
}

pub fn read_csv<R: io::Read>(input: R) -> Result<Vec<TimingRecord>, TimingError> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}
