//! Report emission: canonical JSON, CSV and SVG line plots.
//!
//! JSON output has sorted keys and every float rounded to six significant
//! digits, so identical inputs give identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::eval::{trajectory_variants, CurveBundle, CurveSeries, EvalReport};
use crate::world::TaskId;
use crate::{Error, Result};

/// Rounds to six significant digits.
pub fn round_sig6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().expect("formatted float parses")
}

fn round_value(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            let r = round_sig6(n.as_f64().expect("f64 number"));
            *v = serde_json::Number::from_f64(r).map(Value::Number).unwrap_or(Value::Null);
        }
        Value::Array(a) => a.iter_mut().for_each(round_value),
        Value::Object(o) => o.values_mut().for_each(round_value),
        _ => {}
    }
}

/// Canonical JSON text of any report type.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let mut v = serde_json::to_value(value)?;
    round_value(&mut v);
    Ok(serde_json::to_string_pretty(&v)? + "\n")
}

pub fn from_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    Ok(serde_json::from_str(text)?)
}

/// The value a report takes after a JSON round trip.
pub fn canonicalize<T: Serialize + DeserializeOwned>(value: &T) -> Result<T> {
    from_json(&to_canonical_json(value)?)
}

/// One CSV row per cell: task, variant, mean, stddev, n.
pub fn report_csv(r: &EvalReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::FormatError(e.to_string());
    w.write_record(["task", "variant", "normalization", "mean", "stddev", "n"]).map_err(csv_err)?;
    for row in &r.rows {
        for (variant, c) in &row.cells {
            w.write_record([
                row.task.to_string(),
                variant.clone(),
                r.normalization.to_string(),
                round_sig6(c.mean).to_string(),
                round_sig6(c.stddev).to_string(),
                c.n.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::FormatError(e.to_string()))?).map_err(|e| Error::FormatError(e.to_string()))
}

/// One CSV row per curve step: task, variant, length, t, mean, stddev, n.
pub fn curves_csv(b: &CurveBundle) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::FormatError(e.to_string());
    w.write_record(["task", "variant", "length", "t", "mean", "stddev", "n"]).map_err(csv_err)?;
    for s in &b.series {
        for t in 0..s.length {
            w.write_record([
                s.task.to_string(),
                s.variant.clone(),
                s.length.to_string(),
                (t + 1).to_string(),
                round_sig6(s.mean[t]).to_string(),
                round_sig6(s.stddev[t]).to_string(),
                s.n.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::FormatError(e.to_string()))?).map_err(|e| Error::FormatError(e.to_string()))
}

const COLORS: [&str; 5] = ["#1b7837", "#762a83", "#e08214", "#2166ac", "#b2182b"];

/// For each variant of `task`, the length bucket holding the most curves.
fn plotted_series(b: &CurveBundle, task: TaskId) -> Vec<&CurveSeries> {
    let mut best: BTreeMap<&str, &CurveSeries> = BTreeMap::new();
    for s in b.series.iter().filter(|s| s.task == task) {
        let e = best.entry(s.variant.as_str()).or_insert(s);
        if s.n > e.n || (s.n == e.n && s.length < e.length) {
            *e = s;
        }
    }
    let order = trajectory_variants();
    let mut out: Vec<&CurveSeries> = best.into_values().collect();
    out.sort_by_key(|s| order.iter().position(|v| *v == s.variant).unwrap_or(usize::MAX));
    out
}

/// Line plot of the mean curves of one task, one polyline per variant.
pub fn curves_svg(b: &CurveBundle, task: TaskId) -> String {
    let series = plotted_series(b, task);
    let (w, h, pad) = (480.0, 320.0, 48.0);
    let max_len = series.iter().map(|s| s.length).max().unwrap_or(1).max(2);
    let vals = series.iter().flat_map(|s| s.mean.iter().copied());
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (lo.min(0.0) - 1.0, hi.max(0.0) + 1.0) };
    let x = |t: usize| pad + (w - 2.0 * pad) * t as f64 / (max_len - 1) as f64;
    let y = |v: f64| h - pad - (h - 2.0 * pad) * (v - lo) / (hi - lo);
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{pad}" y="24" font-family="sans-serif" font-size="14">{task}: log-likelihood by step ({})</text>"#, b.normalization);
    let _ = writeln!(
        svg,
        r#"<path d="M{pad} {pad} V{} H{}" stroke="black" fill="none"/>"#,
        h - pad,
        w - pad
    );
    let _ = writeln!(svg, r#"<text x="4" y="{:.1}" font-family="sans-serif" font-size="10">{:.3}</text>"#, y(hi) + 4.0, hi);
    let _ = writeln!(svg, r#"<text x="4" y="{:.1}" font-family="sans-serif" font-size="10">{:.3}</text>"#, y(lo) + 4.0, lo);
    for (k, s) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = s.mean.iter().enumerate().map(|(t, &v)| format!("{:.2},{:.2}", x(t), y(v))).collect();
        let _ = writeln!(svg, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" "));
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" fill="{color}">{} (T={}, n={})</text>"#,
            w - pad - 120.0,
            pad + 14.0 * k as f64,
            s.variant,
            s.length,
            s.n
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
    Svg,
}

impl std::str::FromStr for Format {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            "svg" => Ok(Self::Svg),
            _ => Err(Error::BadConfig(format!("unknown report format `{s}`"))),
        }
    }
}

fn write(path: PathBuf, text: &str) -> Result<PathBuf> {
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes `<stem>.json` and/or `<stem>.csv`. Tables have no SVG form.
pub fn emit_report(r: &EvalReport, dir: &Path, stem: &str, formats: &[Format]) -> Result<Vec<PathBuf>> {
    ensure_dir(dir)?;
    let mut out = Vec::new();
    for f in formats {
        match f {
            Format::Json => out.push(write(dir.join(format!("{stem}.json")), &to_canonical_json(r)?)?),
            Format::Csv => out.push(write(dir.join(format!("{stem}.csv")), &report_csv(r)?)?),
            Format::Svg => {}
        }
    }
    Ok(out)
}

/// Writes `<stem>.json`, `<stem>.csv` and one `<stem>_<task>.svg` per task.
pub fn emit_curves(b: &CurveBundle, dir: &Path, stem: &str, formats: &[Format]) -> Result<Vec<PathBuf>> {
    ensure_dir(dir)?;
    let mut out = Vec::new();
    for f in formats {
        match f {
            Format::Json => out.push(write(dir.join(format!("{stem}.json")), &to_canonical_json(b)?)?),
            Format::Csv => out.push(write(dir.join(format!("{stem}.csv")), &curves_csv(b)?)?),
            Format::Svg => {
                let tasks: std::collections::BTreeSet<TaskId> = b.series.iter().map(|s| s.task).collect();
                for t in tasks {
                    out.push(write(dir.join(format!("{stem}_{t}.svg")), &curves_svg(b, t))?);
                }
            }
        }
    }
    Ok(out)
}
