//! CSV outputs: loss traces and metric tables.

use std::io::Write;
use std::path::Path;

use vidgs_core::train::TraceRow;

use crate::error::{Error, IoContext, Result};

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["iteration", "l1", "dssim", "total"]).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record([r.iteration.to_string(), format!("{:?}", r.l1), format!("{:?}", r.dssim), format!("{:?}", r.total)])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().at(path)
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let bad = || Error::format(path, format!("row {}: malformed trace record", i + 2));
        let num = |k: usize| rec.get(k).and_then(|s| s.parse::<f64>().ok()).ok_or_else(bad);
        let iteration = rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        rows.push(TraceRow { iteration, l1: num(1)?, dssim: num(2)?, total: num(3)? });
    }
    Ok(rows)
}

/// Whether a metric is reported per frame or once for the video.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Frame(usize),
    Video,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub scope: Scope,
    pub metric: &'static str,
    pub value: f64,
    pub unit: &'static str,
}

/// Infinite PSNR (identical images) is written as `inf`.
pub fn format_value(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

pub fn write_metrics(out: impl Write, rows: &[MetricRow]) -> std::result::Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["scope", "frame", "metric", "value", "unit"])?;
    for r in rows {
        let (scope, frame) = match r.scope {
            Scope::Frame(i) => ("frame", i.to_string()),
            Scope::Video => ("video", String::new()),
        };
        w.write_record([scope, &frame, r.metric, &format_value(r.value), r.unit])?;
    }
    w.flush()?;
    Ok(())
}
