//! Writing experiment reports as JSON, CSV and SVG line plots.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::harness::experiments::{ExperimentReport, Series};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
    Svg,
}

impl Format {
    /// Parses a comma-separated list such as `json,csv,svg`.
    pub fn parse_list(s: &str) -> Result<Vec<Format>> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let f = match part {
                "json" => Format::Json,
                "csv" => Format::Csv,
                "svg" => Format::Svg,
                other => {
                    return Err(Error::Usage(format!(
                        "unknown format {other:?}; expected json, csv or svg"
                    )));
                }
            };
            if !out.contains(&f) {
                out.push(f);
            }
        }
        if out.is_empty() {
            return Err(Error::Usage("no output format given".into()));
        }
        Ok(out)
    }

    fn extension(self) -> &'static str {
        match self {
            Format::Json => "json",
            Format::Csv => "csv",
            Format::Svg => "svg",
        }
    }
}

/// Experiments whose report carries a plot.
pub fn has_plot(report: &ExperimentReport) -> bool {
    matches!(report.experiment.as_str(), "epoch_curve" | "duration_sweep") && !report.series.is_empty()
}

pub fn to_json(report: &ExperimentReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}

pub const CSV_HEADER: &str =
    "experiment,condition,split,recording,repeat,seed,wer,substitutions,insertions,deletions,reference_len,blank_ratio,skips";

/// One line per condition, recording and repeat.
pub fn to_csv(report: &ExperimentReport) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for row in &report.rows {
        for r in &row.recordings {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                report.experiment,
                row.condition,
                row.split,
                r.recording_id,
                r.repeat,
                r.seed,
                r.wer.wer,
                r.wer.substitutions,
                r.wer.insertions,
                r.wer.deletions,
                r.wer.reference_len,
                r.blank_ratio,
                r.skips
            );
        }
    }
    out
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// A line plot with one polyline per series; stdev bars are drawn as plain
/// line segments.
pub fn to_svg(title: &str, x_label: &str, series: &[Series]) -> String {
    let (w, h, m) = (640.0, 400.0, 56.0);
    let (x0, x1) = bounds(series.iter().flat_map(|s| s.x.iter().copied()));
    let spread = |s: &Series, i: usize| s.stdev.as_ref().map_or(0.0, |v| v[i]);
    let (y0, y1) = bounds(
        series
            .iter()
            .flat_map(|s| (0..s.y.len()).flat_map(move |i| [s.y[i] - spread(s, i), s.y[i] + spread(s, i)])),
    );
    let px = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let py = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>"#,
        w / 2.0
    );
    let _ = writeln!(
        out,
        r#"<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{m}" y1="{m}" x2="{m}" y2="{b}" stroke="black"/>"#,
        b = h - m,
        r = w - m
    );
    for (v, anchor) in [(x0, "start"), (x1, "end")] {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="{anchor}">{v:.3}</text>"#,
            px(v),
            h - m + 16.0
        );
    }
    for v in [y0, y1] {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"#,
            m - 4.0,
            py(v) + 4.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#,
        w / 2.0,
        h - 12.0
    );
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let points: Vec<String> =
            s.x.iter()
                .zip(&s.y)
                .map(|(&x, &y)| format!("{:.2},{:.2}", px(x), py(y)))
                .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"><title>{}</title></polyline>"#,
            points.join(" "),
            s.name
        );
        if let Some(sd) = &s.stdev {
            for ((&x, &y), &d) in s.x.iter().zip(&s.y).zip(sd) {
                let _ = writeln!(
                    out,
                    r#"<line x1="{0:.2}" y1="{1:.2}" x2="{0:.2}" y2="{2:.2}" stroke="{color}"/>"#,
                    px(x),
                    py(y - d),
                    py(y + d)
                );
            }
        }
        let ly = m + 16.0 * k as f64;
        let _ = writeln!(
            out,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            w - m - 110.0,
            w - m - 90.0,
            w - m - 84.0,
            ly + 4.0,
            s.name
        );
    }
    out.push_str("</svg>\n");
    out
}

/// File names `emit` would write for `formats`.
pub fn artifact_names(report: &ExperimentReport, formats: &[Format]) -> Vec<String> {
    let mut names: Vec<String> = formats
        .iter()
        .filter(|&&f| f != Format::Svg || has_plot(report))
        .map(|f| format!("{}.{}", report.experiment, f.extension()))
        .collect();
    if !report.timing.is_empty() {
        names.push(format!("{}.timing.json", report.experiment));
    }
    names
}

/// Writes the requested formats (plus the timing sidecar) into `dir` and
/// records their names in the report. SVG is skipped for experiments
/// without a plot.
pub fn emit(report: &mut ExperimentReport, dir: &Path, formats: &[Format]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    report.artifacts = artifact_names(report, formats);
    let mut written = Vec::new();
    for &f in formats {
        let body = match f {
            Format::Json => to_json(report)?,
            Format::Csv => to_csv(report),
            Format::Svg if has_plot(report) => {
                let x_label = if report.experiment == "epoch_curve" {
                    "epoch"
                } else {
                    "duration (windows)"
                };
                to_svg(&report.experiment, x_label, &report.series)
            }
            Format::Svg => continue,
        };
        let path = dir.join(format!("{}.{}", report.experiment, f.extension()));
        fs::write(&path, body)?;
        written.push(path);
    }
    if !report.timing.is_empty() {
        let path = dir.join(format!("{}.timing.json", report.experiment));
        fs::write(&path, serde_json::to_string_pretty(&report.timing)? + "\n")?;
        written.push(path);
    }
    Ok(written)
}
