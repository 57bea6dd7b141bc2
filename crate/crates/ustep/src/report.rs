//! CSV and JSON serialisation of metric reports.
//!
//! CSV columns are `frame_index,mse,mae,ssim,psnr`; one row per predicted
//! frame (indexed from 0) followed by a row whose index is `aggregate`.
//! Numbers use the shortest representation that parses back to the same
//! `f64`.

use serde::{Deserialize, Serialize};
use ustep_core::metrics::{FrameMetrics, MetricsReport, ReportMeta};

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "frame_index,mse,mae,ssim,psnr";
pub const COMPARE_HEADER: &str = "model,frame_index,mse,mae,ssim,psnr";

fn row(m: &FrameMetrics) -> String {
    format!("{},{},{},{}", m.mse, m.mae, m.ssim, m.psnr)
}

pub fn to_csv(report: &MetricsReport) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for (i, m) in report.per_frame.iter().enumerate() {
        out.push_str(&format!("{i},{}\n", row(m)));
    }
    out.push_str(&format!("aggregate,{}\n", row(&report.aggregate)));
    out
}

/// Rows of a report CSV: the per-frame metrics and the aggregate row.
pub fn parse_csv(text: &str) -> Result<(Vec<FrameMetrics>, FrameMetrics)> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Data(format!("report CSV must start with `{CSV_HEADER}`")));
    }
    let mut frames = Vec::new();
    let mut aggregate = None;
    for (n, line) in lines.enumerate() {
        let line_no = n + 2;
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 {
            return Err(Error::Data(format!("line {line_no}: expected 5 columns, found {}", cols.len())));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::Data(format!("line {line_no}: `{s}` is not a number")))
        };
        let m = FrameMetrics {
            mse: num(cols[1])?,
            mae: num(cols[2])?,
            ssim: num(cols[3])?,
            psnr: num(cols[4])?,
        };
        if aggregate.is_some() {
            return Err(Error::Data(format!("line {line_no}: rows after the aggregate row")));
        }
        if cols[0] == "aggregate" {
            aggregate = Some(m);
        } else if cols[0].parse::<usize>().ok() == Some(frames.len()) {
            frames.push(m);
        } else {
            return Err(Error::Data(format!(
                "line {line_no}: frame index `{}`, expected {}",
                cols[0],
                frames.len()
            )));
        }
    }
    let aggregate = aggregate.ok_or_else(|| Error::Data("report CSV has no aggregate row".into()))?;
    Ok((frames, aggregate))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsonMeta {
    pub model: String,
    pub dataset_hash: String,
    pub delta_t: Option<usize>,
    pub delta_big: Option<usize>,
    pub observed: usize,
    pub predicted: usize,
    pub samples: usize,
    pub pixels_per_frame: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JsonRow {
    pub frame_index: usize,
    pub mse: f64,
    pub mae: f64,
    pub ssim: f64,
    pub psnr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JsonMetrics {
    pub mse: f64,
    pub mae: f64,
    pub ssim: f64,
    pub psnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsonReport {
    pub metadata: JsonMeta,
    pub per_frame: Vec<JsonRow>,
    pub aggregate: JsonMetrics,
}

impl From<&MetricsReport> for JsonReport {
    fn from(r: &MetricsReport) -> Self {
        let m = &r.meta;
        JsonReport {
            metadata: JsonMeta {
                model: m.model.clone(),
                dataset_hash: m.dataset_hash.clone(),
                delta_t: m.delta_t,
                delta_big: m.delta_big,
                observed: m.observed,
                predicted: r.per_frame.len(),
                samples: m.samples,
                pixels_per_frame: m.pixels_per_frame,
            },
            per_frame: r
                .per_frame
                .iter()
                .enumerate()
                .map(|(frame_index, f)| JsonRow {
                    frame_index,
                    mse: f.mse,
                    mae: f.mae,
                    ssim: f.ssim,
                    psnr: f.psnr,
                })
                .collect(),
            aggregate: JsonMetrics {
                mse: r.aggregate.mse,
                mae: r.aggregate.mae,
                ssim: r.aggregate.ssim,
                psnr: r.aggregate.psnr,
            },
        }
    }
}

impl JsonReport {
    pub fn into_report(self) -> Result<MetricsReport> {
        let meta = ReportMeta {
            model: self.metadata.model,
            dataset_hash: self.metadata.dataset_hash,
            delta_t: self.metadata.delta_t,
            delta_big: self.metadata.delta_big,
            observed: self.metadata.observed,
            samples: self.metadata.samples,
            pixels_per_frame: self.metadata.pixels_per_frame,
        };
        let frames = self
            .per_frame
            .iter()
            .map(|r| FrameMetrics {
                mse: r.mse,
                mae: r.mae,
                ssim: r.ssim,
                psnr: r.psnr,
            })
            .collect();
        Ok(MetricsReport::from_per_frame(frames, meta)?)
    }
}

pub fn to_json(report: &MetricsReport) -> String {
    let mut s = serde_json::to_string_pretty(&JsonReport::from(report)).expect("report serialises");
    s.push('\n');
    s
}

pub fn parse_json(text: &str) -> Result<JsonReport> {
    serde_json::from_str(text).map_err(|e| Error::Data(format!("report JSON: {e}")))
}

/// Merged frame-wise CSV of several reports, rows ordered by model name and
/// then frame index, each model closing with its aggregate row.
pub fn compare_csv(reports: &[MetricsReport]) -> String {
    let mut sorted: Vec<&MetricsReport> = reports.iter().collect();
    sorted.sort_by(|a, b| a.meta.model.cmp(&b.meta.model));
    let mut out = String::from(COMPARE_HEADER);
    out.push('\n');
    for r in sorted {
        for (i, m) in r.per_frame.iter().enumerate() {
            out.push_str(&format!("{},{i},{}\n", r.meta.model, row(m)));
        }
        out.push_str(&format!("{},aggregate,{}\n", r.meta.model, row(&r.aggregate)));
    }
    out
}
