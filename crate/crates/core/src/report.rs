//! Line-oriented `key: value` reports with a stable key order, so repeated
//! runs with the same seed produce byte-identical output.

use std::fmt::Write as _;

use crate::error::{CoreError, Result};
use crate::loss::LossReport;
use crate::metrics::MetricReport;

/// Semantic class names for ids 1..=19; id 0 is `empty`.
pub const CLASS_NAMES: [&str; 19] = [
    "road",
    "sidewalk",
    "parking",
    "otherground",
    "building",
    "car",
    "truck",
    "bicycle",
    "motorcycle",
    "othervehicle",
    "vegetation",
    "trunk",
    "terrain",
    "person",
    "bicyclist",
    "motorcyclist",
    "fence",
    "pole",
    "trafficsign",
];

/// Reported relative class frequencies (percent) used for loss weighting when
/// a run has no ground-truth statistics of its own.
pub const CLASS_FREQUENCIES_PCT: [f64; 19] = [
    15.30, 11.13, 1.12, 0.56, 14.1, 3.92, 0.16, 0.03, 0.03, 0.20, 39.3, 0.51, 9.17, 0.07, 0.07,
    0.05, 3.90, 0.29, 0.08,
];

/// Name for a class id, falling back to `class_<id>` outside the named set.
pub fn class_name(id: usize) -> String {
    if id == 0 {
        "empty".to_string()
    } else if id <= CLASS_NAMES.len() {
        CLASS_NAMES[id - 1].to_string()
    } else {
        format!("class_{id}")
    }
}

fn fmt_value(v: f64) -> String {
    format!("{v:.9}")
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => fmt_value(v),
        None => "undefined".to_string(),
    }
}

/// Render the run report. Key order is fixed: seed, loss components, aux
/// terms, occupancy IoU, mIoU, then one `iou_<class>` line per semantic class
/// in id order.
pub fn emit_report(seed: u64, loss: &LossReport, metrics: &MetricReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "seed: {seed}");
    let _ = writeln!(out, "loss_total: {}", fmt_value(loss.total));
    let _ = writeln!(out, "loss_geo: {}", fmt_value(loss.scal_geo));
    let _ = writeln!(out, "loss_sem: {}", fmt_value(loss.scal_sem));
    let _ = writeln!(out, "loss_ce: {}", fmt_value(loss.ce));
    for (i, a) in loss.aux.iter().enumerate() {
        let _ = writeln!(out, "loss_aux_{i}: {}", fmt_value(*a));
    }
    let _ = writeln!(out, "occupancy_iou: {}", fmt_opt(metrics.occupancy_iou));
    let _ = writeln!(out, "miou: {}", fmt_opt(metrics.miou));
    for (i, iou) in metrics.per_class_iou.iter().enumerate() {
        let _ = writeln!(out, "iou_{}: {}", class_name(i + 1), fmt_opt(*iou));
    }
    out
}

/// Parse a report back into `(key, value)` pairs in file order. Values are
/// kept as strings; `undefined` stays literal.
pub fn parse_report(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once(':').ok_or_else(|| {
            CoreError::config(format!("report line {} has no `:`", lineno + 1))
        })?;
        out.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

/// Look up a numeric value in a parsed report.
pub fn report_value(pairs: &[(String, String)], key: &str) -> Result<f64> {
    let raw = pairs
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| CoreError::config(format!("report key `{key}` missing")))?;
    raw.parse()
        .map_err(|_| CoreError::config(format!("report key `{key}` is not numeric: {raw}")))
}
