//! Report rows: CSV for plotting, JSON mirror for machine consumption.
//!
//! CSV columns, in order: `method,direction,rank1,rank10,rank20,mAP,epsilon,seed,config_hash`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EvalReport;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    /// `v2i` or `i2v`.
    pub direction: String,
    pub rank1: f64,
    pub rank10: f64,
    pub rank20: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    /// Zero for clean rows.
    pub epsilon: f64,
    pub seed: u64,
    pub config_hash: String,
}

impl ReportRow {
    pub fn from_report(
        method: &str,
        report: &EvalReport,
        epsilon: f64,
        seed: u64,
        config_hash: &str,
    ) -> Self {
        Self {
            method: method.into(),
            direction: report.direction.tag().into(),
            rank1: report.rank1,
            rank10: report.rank10,
            rank20: report.rank20,
            map: report.map,
            epsilon,
            seed,
            config_hash: config_hash.into(),
        }
    }
}

pub fn write_report_csv(rows: &[ReportRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::Argument(format!("cannot serialize report row: {e}")))?;
    }
    if rows.is_empty() {
        w.write_record([
            "method",
            "direction",
            "rank1",
            "rank10",
            "rank20",
            "mAP",
            "epsilon",
            "seed",
            "config_hash",
        ])
        .map_err(|e| Error::Argument(e.to_string()))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Argument(format!("csv buffer: {e}")))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_report_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    r.deserialize()
        .map(|row| {
            row.map_err(|e| Error::Format {
                path: path.to_path_buf(),
                offset: e.position().map_or(0, |p| p.byte()),
                reason: e.to_string(),
            })
        })
        .collect()
}

pub fn write_report_json(rows: &[ReportRow], path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(rows)
        .map_err(|e| Error::Argument(format!("cannot serialize report: {e}")))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
