//! CSV and JSON serialization of change-rate reports, calibration traces and
//! training histories.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use super::write_atomic;
use crate::calibrate::CalibrationTrace;
use crate::error::{Error, Result};
use crate::stats::ChangeRateReport;
use crate::train::TrainHistory;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::Config(format!(
                "unknown report format `{other}` (expected csv or json)"
            ))),
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        })
    }
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

fn json_bytes<S: Serialize>(value: &S) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("reports serialize");
    out.push(b'\n');
    out
}

fn num(v: f64) -> String {
    format!("{v:e}")
}

/// Columns `layer, mean_rate, cv, geo_mean`, one row per affine layer.
pub fn report_to_csv(report: &ChangeRateReport) -> Vec<u8> {
    csv_bytes(
        &["layer", "mean_rate", "cv", "geo_mean"],
        report
            .layers
            .iter()
            .map(|l| vec![l.layer.clone(), num(l.mean_rate), num(l.cv), num(report.geo_mean)]),
    )
}

/// Columns `layer, mean_rate, cv, geo_mean, iteration`, one row per layer and
/// iteration.
pub fn trace_to_csv(trace: &CalibrationTrace) -> Vec<u8> {
    csv_bytes(
        &["layer", "mean_rate", "cv", "geo_mean", "iteration"],
        trace.iterations.iter().flat_map(|it| {
            it.layers.iter().enumerate().map(move |(i, l)| {
                vec![
                    l.clone(),
                    num(it.rates[i]),
                    num(it.cvs[i]),
                    num(it.geo_mean),
                    it.iteration.to_string(),
                ]
            })
        }),
    )
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

pub fn history_to_csv(history: &TrainHistory) -> Vec<u8> {
    csv_bytes(
        &["iteration", "loss", "eval_loss", "eval_accuracy"],
        history.records.iter().map(|r| {
            vec![
                r.iteration.to_string(),
                num(r.loss),
                opt(r.eval_loss),
                opt(r.eval_accuracy),
            ]
        }),
    )
}

/// One `iteration` column followed by one loss column per named run; runs
/// must share their logging iterations.
pub fn loss_curves_to_csv(runs: &[(String, TrainHistory)]) -> Result<Vec<u8>> {
    let Some((_, first)) = runs.first() else {
        return Err(Error::Config("no runs to combine".into()));
    };
    let iterations: Vec<usize> = first.records.iter().map(|r| r.iteration).collect();
    for (name, h) in runs {
        if h.records.iter().map(|r| r.iteration).ne(iterations.iter().copied()) {
            return Err(Error::Config(format!("run `{name}` logged different iterations")));
        }
    }
    let mut header = vec!["iteration"];
    header.extend(runs.iter().map(|(n, _)| n.as_str()));
    Ok(csv_bytes(
        &header,
        iterations.iter().enumerate().map(|(i, it)| {
            let mut row = vec![it.to_string()];
            row.extend(runs.iter().map(|(_, h)| num(h.records[i].loss)));
            row
        }),
    ))
}

pub fn write_report(report: &ChangeRateReport, path: &Path, format: ReportFormat) -> Result<()> {
    match format {
        ReportFormat::Csv => write_atomic(path, &report_to_csv(report)),
        ReportFormat::Json => write_atomic(path, &json_bytes(report)),
    }
}

pub fn write_trace(trace: &CalibrationTrace, path: &Path, format: ReportFormat) -> Result<()> {
    match format {
        ReportFormat::Csv => write_atomic(path, &trace_to_csv(trace)),
        ReportFormat::Json => write_atomic(path, &json_bytes(trace)),
    }
}

pub fn write_history(history: &TrainHistory, path: &Path, format: ReportFormat) -> Result<()> {
    match format {
        ReportFormat::Csv => write_atomic(path, &history_to_csv(history)),
        ReportFormat::Json => write_atomic(path, &json_bytes(history)),
    }
}

pub fn write_loss_curves(runs: &[(String, TrainHistory)], path: &Path) -> Result<()> {
    write_atomic(path, &loss_curves_to_csv(runs)?)
}
