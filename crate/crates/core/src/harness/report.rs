//! Result rows, CSV files and SVG line charts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "run_id,method,scope,ratio,reload,seed,epoch,split,accuracy,loss,param_count,padded_weight_bytes,padded_total_bytes,est_step_ms,measured_step_ms_median";

/// `method` value of baseline rows.
pub const BASELINE: &str = "none";
/// `split` value of rows whose run point failed.
pub const FAILED: &str = "failed";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub method: String,
    pub scope: String,
    pub ratio: f64,
    pub reload: bool,
    pub seed: u64,
    pub epoch: usize,
    pub split: String,
    pub accuracy: f64,
    pub loss: f64,
    pub param_count: u64,
    pub padded_weight_bytes: u64,
    pub padded_total_bytes: u64,
    pub est_step_ms: f64,
    pub measured_step_ms_median: f64,
}

impl RunRecord {
    pub fn is_baseline(&self) -> bool {
        self.method == BASELINE
    }

    pub fn is_failed(&self) -> bool {
        self.split == FAILED
    }
}

pub fn emit_csv(records: &[RunRecord], path: impl AsRef<Path>) -> Result<()> {
    if records.is_empty() {
        return Err(Error::invalid("no records to write"));
    }
    let mut writer = csv::Writer::from_path(path)?;
    for r in records {
        writer.serialize(r)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<RunRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header = reader.headers()?.iter().collect::<Vec<_>>().join(",");
    if header != CSV_HEADER {
        return Err(Error::invalid(format!("unexpected CSV header `{header}`")));
    }
    reader.deserialize().map(|r| r.map_err(Error::from)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Accuracy,
    ParamCount,
    PaddedTotalBytes,
    PaddedWeightBytes,
    EstStepMs,
    MeasuredStepMs,
}

impl Metric {
    fn value(self, r: &RunRecord) -> f64 {
        match self {
            Metric::Accuracy => r.accuracy,
            Metric::ParamCount => r.param_count as f64,
            Metric::PaddedTotalBytes => r.padded_total_bytes as f64,
            Metric::PaddedWeightBytes => r.padded_weight_bytes as f64,
            Metric::EstStepMs => r.est_step_ms,
            Metric::MeasuredStepMs => r.measured_step_ms_median,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::ParamCount => "parameters",
            Metric::PaddedTotalBytes => "padded memory (bytes)",
            Metric::PaddedWeightBytes => "padded weight memory (bytes)",
            Metric::EstStepMs => "estimated step time (ms)",
            Metric::MeasuredStepMs => "measured step time (ms)",
        }
    }
}

/// Mean of `metric` over seeds at each ratio, one series per
/// `(method, reload)`. Baseline rows seed the ratio-0 point of every series.
pub fn series(records: &[RunRecord], metric: Metric) -> BTreeMap<String, Vec<(f64, f64)>> {
    let ok: Vec<&RunRecord> = records.iter().filter(|r| !r.is_failed()).collect();
    let mut groups: BTreeMap<String, BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    let mut baseline: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for r in &ok {
        let key = r.ratio.to_bits();
        if r.is_baseline() {
            baseline.entry(key).or_default().push(metric.value(r));
        } else {
            let name = format!("{} {}", r.method, if r.reload { "reload" } else { "reinit" });
            groups.entry(name).or_default().entry(key).or_default().push(metric.value(r));
        }
    }
    if groups.is_empty() && !baseline.is_empty() {
        groups.insert("baseline".into(), BTreeMap::new());
    }
    let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    groups
        .into_iter()
        .map(|(name, points)| {
            let mut merged = baseline.clone();
            for (k, v) in points {
                merged.entry(k).or_default().extend(v);
            }
            let mut pts: Vec<(f64, f64)> = merged.iter().map(|(k, v)| (f64::from_bits(*k), mean(v))).collect();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            (name, pts)
        })
        .collect()
}

const PALETTE: [&str; 6] = ["#000000", "#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e"];

/// Line chart of `metric` against pruned ratio with one polyline per series.
pub fn emit_svg(records: &[RunRecord], metric: Metric, path: impl AsRef<Path>) -> Result<()> {
    if records.is_empty() {
        return Err(Error::invalid("no records to plot"));
    }
    fs::write(path, render_svg(records, metric))?;
    Ok(())
}

pub fn render_svg(records: &[RunRecord], metric: Metric) -> String {
    let (width, height) = (640.0, 420.0);
    let (left, right, top, bottom) = (80.0, 170.0, 30.0, 50.0);
    let plot_w = width - left - right;
    let plot_h = height - top - bottom;
    let data = series(records, metric);

    let ys: Vec<f64> = data.values().flatten().map(|p| p.1).collect();
    let (mut y_min, mut y_max) = ys
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &y| (lo.min(y), hi.max(y)));
    if !y_min.is_finite() {
        (y_min, y_max) = (0.0, 1.0);
    }
    if metric == Metric::Accuracy {
        y_min = y_min.min(0.0).max(0.0);
        y_max = y_max.max(1.0).min(1.0);
    }
    if (y_max - y_min).abs() < 1e-12 {
        y_max = y_min + 1.0;
    }
    let sx = |x: f64| left + x * plot_w;
    let sy = |y: f64| top + (1.0 - (y - y_min) / (y_max - y_min)) * plot_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r##"<rect x="{left}" y="{top}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#444"/>"##
    );
    for i in 0..=5 {
        let fx = i as f64 / 5.0;
        let fy = y_min + (y_max - y_min) * fx;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{:.1}</text>"#,
            sx(fx),
            top + plot_h + 18.0,
            fx
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            left - 6.0,
            sy(fy) + 4.0,
            tick_label(fy)
        );
        let _ = writeln!(
            svg,
            r##"<line x1="{left}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="#ddd"/>"##,
            left + plot_w,
            sy(fy),
            sy(fy)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">pruned ratio of channels</text>"#,
        left + plot_w / 2.0,
        height - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        top + plot_h / 2.0,
        top + plot_h / 2.0,
        metric.label()
    );
    for (i, (name, points)) in data.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = points.iter().map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline data-series="{name}" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            coords.join(" ")
        );
        let ly = top + 14.0 + 18.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{:.1}" x2="{:.1}" y1="{ly:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{name}</text>"#,
            left + plot_w + 12.0,
            left + plot_w + 32.0,
            left + plot_w + 38.0,
            ly + 4.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn tick_label(v: f64) -> String {
    let a = v.abs();
    if a >= 1e6 {
        format!("{:.2}M", v / 1e6)
    } else if a >= 1e3 {
        format!("{:.1}k", v / 1e3)
    } else {
        format!("{v:.2}")
    }
}
