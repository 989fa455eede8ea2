//! Static run reports: `report.svg` with two stacked charts and a plain
//! `summary.txt`. Output bytes depend only on the rows of `metrics.csv`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use bootseg::selfloop::{read_metrics_csv, MetricsRow, METRICS_FILE};
use thiserror::Error;

pub const REPORT_SVG: &str = "report.svg";
pub const SUMMARY_TXT: &str = "summary.txt";

const WIDTH: f64 = 720.0;
const CHART_HEIGHT: f64 = 300.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 24.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 44.0;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no metric rows in {}", .0.display())]
    MissingMetrics(PathBuf),
    #[error("cannot read metrics: {0}")]
    Metrics(String),
    #[error("cannot write {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Files written by [`render_report`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportFiles {
    pub svg: PathBuf,
    pub summary: PathBuf,
}

/// A row that carries all plotted metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub iteration: u32,
    pub ap75: f64,
    pub ar75: f64,
    pub n_detected: usize,
    pub n_gt: usize,
}

/// Rows without metrics (runs lacking a testing partition) are skipped.
pub fn points(rows: &[MetricsRow]) -> Vec<Point> {
    rows.iter()
        .filter_map(|r| {
            Some(Point {
                iteration: r.iteration,
                ap75: r.ap75?,
                ar75: r.ar75?,
                n_detected: r.n_detected?,
                n_gt: r.n_gt?,
            })
        })
        .collect()
}

/// Reads `run_dir/metrics.csv` and writes `report.svg` and `summary.txt`
/// next to it.
pub fn render_report(run_dir: &Path) -> Result<ReportFiles, ReportError> {
    let csv_path = run_dir.join(METRICS_FILE);
    if !csv_path.is_file() {
        return Err(ReportError::MissingMetrics(csv_path));
    }
    let rows = read_metrics_csv(&csv_path).map_err(|e| ReportError::Metrics(e.to_string()))?;
    let pts = points(&rows);
    if pts.is_empty() {
        return Err(ReportError::MissingMetrics(csv_path));
    }
    let files = ReportFiles {
        svg: run_dir.join(REPORT_SVG),
        summary: run_dir.join(SUMMARY_TXT),
    };
    let write = |path: &PathBuf, text: String| {
        fs::write(path, text).map_err(|source| ReportError::Io {
            path: path.clone(),
            source,
        })
    };
    write(&files.svg, render_svg(&pts))?;
    write(&files.summary, render_summary(&pts, rows.len()))?;
    Ok(files)
}

/// Highest AP75, earliest iteration on ties.
pub fn best_point(points: &[Point]) -> Option<&Point> {
    points.iter().fold(None, |best: Option<&Point>, p| match best {
        Some(b) if b.ap75 >= p.ap75 => Some(b),
        _ => Some(p),
    })
}

pub fn render_summary(points: &[Point], n_rows: usize) -> String {
    let best = best_point(points).expect("at least one point");
    let last = points.last().expect("at least one point");
    format!(
        "best_iteration: {}\nbest_ap75: {:.4}\nbest_ar75: {:.4}\nbest_n_detected: {}\nfinal_n_detected: {}\nn_gt: {}\niterations: {}\n",
        best.iteration,
        best.ap75,
        best.ar75,
        best.n_detected,
        last.n_detected,
        last.n_gt,
        n_rows.saturating_sub(1),
    )
}

/// Linear map from data to pixel coordinates.
#[derive(Debug, Clone, Copy)]
struct Axis {
    lo: f64,
    hi: f64,
    px_lo: f64,
    px_hi: f64,
}

impl Axis {
    fn map(&self, v: f64) -> f64 {
        self.px_lo + (v - self.lo) / (self.hi - self.lo) * (self.px_hi - self.px_lo)
    }
}

/// Smallest 1, 2 or 5 times a power of ten that is at least `raw`.
fn nice_step(raw: f64) -> f64 {
    let mag = 10f64.powf(raw.log10().floor());
    [1.0, 2.0, 5.0, 10.0]
        .into_iter()
        .map(|m| m * mag)
        .find(|&s| s >= raw)
        .unwrap_or(10.0 * mag)
}

pub fn render_svg(points: &[Point]) -> String {
    assert!(!points.is_empty(), "report needs at least one point");
    let height = 2.0 * CHART_HEIGHT;
    let first = points[0].iteration as f64;
    let last = points[points.len() - 1].iteration as f64;
    let x_hi = if last > first { last } else { first + 1.0 };
    let x_axis = Axis {
        lo: first,
        hi: x_hi,
        px_lo: LEFT,
        px_hi: WIDTH - RIGHT,
    };
    let n_gt = points[points.len() - 1].n_gt as f64;
    let count_max = points.iter().map(|p| p.n_detected as f64).fold(n_gt, f64::max).max(1.0);
    let count_step = nice_step(count_max * 1.1 / 5.0);
    let count_hi = (count_max * 1.1 / count_step).ceil() * count_step;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{height}" fill="white"/>"#);

    let a_axis = chart_frame(&mut s, "a", "(a) AP75 and AR75 (%)", 0.0, 100.0, 20.0, &x_axis, points);
    series(
        &mut s,
        "ap75",
        "#1f77b4",
        "none",
        points.iter().map(|p| (p.iteration, 100.0 * p.ap75)),
        &x_axis,
        &a_axis,
    );
    series(
        &mut s,
        "ar75",
        "#ff7f0e",
        "4 2",
        points.iter().map(|p| (p.iteration, 100.0 * p.ar75)),
        &x_axis,
        &a_axis,
    );
    legend(&mut s, 0.0, &[("AP75", "#1f77b4"), ("AR75", "#ff7f0e")]);

    let b_axis = chart_frame(
        &mut s,
        "b",
        "(b) Detected instances",
        CHART_HEIGHT,
        count_hi,
        count_step,
        &x_axis,
        points,
    );
    series(
        &mut s,
        "detected",
        "#2ca02c",
        "none",
        points.iter().map(|p| (p.iteration, p.n_detected as f64)),
        &x_axis,
        &b_axis,
    );
    let gt_y = b_axis.map(n_gt);
    let _ = writeln!(
        s,
        r#"<line id="gt-line" data-value="{}" x1="{:.2}" y1="{gt_y:.2}" x2="{:.2}" y2="{gt_y:.2}" stroke="black" stroke-width="1.5" stroke-dasharray="6 4"/>"#,
        n_gt as u64, x_axis.px_lo, x_axis.px_hi,
    );
    legend(
        &mut s,
        CHART_HEIGHT,
        &[("detected", "#2ca02c"), ("ground truth", "black")],
    );
    s.push_str("</svg>\n");
    s
}

#[allow(clippy::too_many_arguments)]
fn chart_frame(
    s: &mut String,
    id: &str,
    title: &str,
    y0: f64,
    y_hi: f64,
    step: f64,
    x_axis: &Axis,
    points: &[Point],
) -> Axis {
    let y_axis = Axis {
        lo: 0.0,
        hi: y_hi,
        px_lo: y0 + CHART_HEIGHT - BOTTOM,
        px_hi: y0 + TOP,
    };
    let _ = writeln!(s, r#"<g id="chart-{id}">"#);
    let _ = writeln!(
        s,
        r#"<text x="{LEFT}" y="{:.2}" font-size="14">{title}</text>"#,
        y0 + TOP - 14.0
    );
    let n_ticks = (y_hi / step).round() as u64;
    for i in 0..=n_ticks {
        let v = i as f64 * step;
        let y = y_axis.map(v);
        let _ = writeln!(
            s,
            r##"<line class="tick" data-chart="{id}" data-value="{v}" x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#dddddd"/>"##,
            x_axis.px_lo, x_axis.px_hi
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v}</text>"#,
            LEFT - 6.0,
            y + 4.0
        );
    }
    for p in points {
        let x = x_axis.map(p.iteration as f64);
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            y_axis.px_lo + 16.0,
            p.iteration
        );
    }
    let _ = writeln!(
        s,
        r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/>"#,
        x_axis.px_lo, y_axis.px_lo, x_axis.px_hi, y_axis.px_lo
    );
    let _ = writeln!(
        s,
        r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/>"#,
        x_axis.px_lo, y_axis.px_lo, x_axis.px_lo, y_axis.px_hi
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">iteration</text>"#,
        (x_axis.px_lo + x_axis.px_hi) / 2.0,
        y_axis.px_lo + 34.0
    );
    s.push_str("</g>\n");
    y_axis
}

fn series(
    s: &mut String,
    id: &str,
    color: &str,
    dash: &str,
    values: impl Iterator<Item = (u32, f64)>,
    x_axis: &Axis,
    y_axis: &Axis,
) {
    let coords: Vec<(f64, f64)> = values.map(|(i, v)| (x_axis.map(i as f64), y_axis.map(v))).collect();
    let pts: Vec<String> = coords.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    let _ = writeln!(
        s,
        r#"<polyline id="{id}" points="{}" fill="none" stroke="{color}" stroke-width="2" stroke-dasharray="{dash}"/>"#,
        pts.join(" ")
    );
    for (x, y) in coords {
        let _ = writeln!(
            s,
            r#"<circle class="{id}" cx="{x:.2}" cy="{y:.2}" r="3" fill="{color}"/>"#
        );
    }
}

fn legend(s: &mut String, y0: f64, entries: &[(&str, &str)]) {
    let mut x = WIDTH - RIGHT - 220.0;
    for (label, color) in entries {
        let y = y0 + TOP - 18.0;
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="{color}" stroke-width="2"/>"#,
            x + 18.0
        );
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{label}</text>"#, x + 22.0, y + 4.0);
        x += 110.0;
    }
}
