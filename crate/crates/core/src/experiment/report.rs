//! Self-contained SVG charts of a results table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::run::ResultRow;
use crate::error::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 55.0;
/// Values at or below zero are drawn at this floor on log axes.
const LOG_FLOOR: f64 = 1e-12;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    MeanRmse,
    StdRmse,
}

impl Metric {
    fn name(self) -> &'static str {
        match self {
            Metric::MeanRmse => "mean_rmse",
            Metric::StdRmse => "std_rmse",
        }
    }

    fn of(self, r: &ResultRow) -> f64 {
        match self {
            Metric::MeanRmse => r.mean_rmse,
            Metric::StdRmse => r.std_rmse,
        }
    }
}

/// Median, minimum and maximum of a non-empty sample.
fn summarize(mut v: Vec<f64>) -> (f64, f64, f64) {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let med = if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    };
    (med, v[0], v[n - 1])
}

/// Per-method series `(M, median, min, max)`, methods in first-seen order.
pub fn series(rows: &[ResultRow], metric: Metric) -> Vec<(String, Vec<(usize, f64, f64, f64)>)> {
    let mut order: Vec<String> = Vec::new();
    let mut by: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.is_ok()) {
        let k = match order.iter().position(|m| *m == r.method) {
            Some(k) => k,
            None => {
                order.push(r.method.clone());
                order.len() - 1
            }
        };
        by.entry((k, r.m)).or_default().push(metric.of(r));
    }
    order
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let pts = by
                .iter()
                .filter(|((kk, _), _)| *kk == k)
                .map(|((_, m), v)| {
                    let (med, lo, hi) = summarize(v.clone());
                    (*m, med, lo, hi)
                })
                .collect();
            (name.clone(), pts)
        })
        .collect()
}

struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn new(values: impl Iterator<Item = f64>, log: bool) -> Self {
        let t = |v: f64| if log { v.max(LOG_FLOOR).log10() } else { v };
        let (mut lo, mut hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
            let v = t(v);
            (a.min(v), b.max(v))
        });
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        let pad = if hi - lo > 1e-12 { 0.05 * (hi - lo) } else { 0.5 };
        Self {
            lo: lo - pad,
            hi: hi + pad,
            log,
        }
    }

    fn frac(&self, v: f64) -> f64 {
        let v = if self.log { v.max(LOG_FLOOR).log10() } else { v };
        (v - self.lo) / (self.hi - self.lo)
    }

    /// Tick positions in data units.
    fn ticks(&self) -> Vec<f64> {
        if self.log {
            let (a, b) = (self.lo.ceil() as i32, self.hi.floor() as i32);
            let decades: Vec<f64> = (a..=b).map(|e| 10f64.powi(e)).collect();
            if decades.len() >= 2 {
                return decades;
            }
            return vec![10f64.powf(self.lo + 0.05 * (self.hi - self.lo)), 10f64.powf(self.hi - 0.05 * (self.hi - self.lo))];
        }
        (0..=4).map(|i| self.lo + (self.hi - self.lo) * i as f64 / 4.0).collect()
    }
}

struct Frame {
    x: Axis,
    y: Axis,
}

impl Frame {
    fn px(&self, v: f64) -> f64 {
        LEFT + self.x.frac(v) * (WIDTH - LEFT - RIGHT)
    }

    fn py(&self, v: f64) -> f64 {
        HEIGHT - BOTTOM - self.y.frac(v) * (HEIGHT - TOP - BOTTOM)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn tick_label(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.0e}")
    } else {
        format!("{}", (v * 1000.0).round() / 1000.0)
    }
}

fn open_svg(out: &mut String, title: &str, frame: &Frame, x_label: &str, y_label: &str) {
    let _ = writeln!(
        out,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">
<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>
<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        (LEFT + WIDTH - RIGHT) / 2.0,
        escape(title)
    );
    let (x0, x1) = (LEFT, WIDTH - RIGHT);
    let (y0, y1) = (HEIGHT - BOTTOM, TOP);
    let _ = writeln!(
        out,
        r##"<g class="axes" stroke="#333" fill="none"><line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}"/><line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}"/></g>"##
    );
    for t in frame.x.ticks() {
        let x = frame.px(t);
        let _ = writeln!(
            out,
            r##"<line class="tick" x1="{x:.2}" y1="{y0}" x2="{x:.2}" y2="{:.2}" stroke="#333"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
            y0 + 5.0,
            y0 + 18.0,
            tick_label(t)
        );
    }
    for t in frame.y.ticks() {
        let y = frame.py(t);
        let _ = writeln!(
            out,
            r##"<line class="tick" x1="{:.2}" y1="{y:.2}" x2="{x0}" y2="{y:.2}" stroke="#333"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
            x0 - 5.0,
            x0 - 8.0,
            y + 4.0,
            tick_label(t)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>
<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 12.0,
        escape(x_label),
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
}

fn legend(out: &mut String, k: usize, name: &str) {
    let y = TOP + 10.0 + 18.0 * k as f64;
    let x = WIDTH - RIGHT + 15.0;
    let c = PALETTE[k % PALETTE.len()];
    let _ = writeln!(
        out,
        r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{c}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
        x + 20.0,
        x + 26.0,
        y + 4.0,
        escape(name)
    );
}

/// Metric against M on log-log axes: one median polyline per method over a
/// shaded min/max band across seeds.
pub fn metric_chart(dataset: &str, rows: &[ResultRow], metric: Metric) -> String {
    let s = series(rows, metric);
    let all = s.iter().flat_map(|(_, p)| p.iter());
    let frame = Frame {
        x: Axis::new(all.clone().map(|p| p.0 as f64), true),
        y: Axis::new(all.flat_map(|p| [p.2, p.3]), true),
    };
    let mut out = String::new();
    open_svg(&mut out, &format!("{dataset}: {} vs M", metric.name()), &frame, "M", metric.name());
    for (k, (name, pts)) in s.iter().enumerate() {
        let c = PALETTE[k % PALETTE.len()];
        if pts.len() > 1 {
            let upper = pts.iter().map(|p| format!("{:.2},{:.2}", frame.px(p.0 as f64), frame.py(p.3)));
            let lower = pts.iter().rev().map(|p| format!("{:.2},{:.2}", frame.px(p.0 as f64), frame.py(p.2)));
            let _ = writeln!(
                out,
                r#"<polygon class="band" data-method="{}" points="{}" fill="{c}" fill-opacity="0.15" stroke="none"/>"#,
                escape(name),
                upper.chain(lower).collect::<Vec<_>>().join(" ")
            );
        }
        let line: Vec<String> = pts
            .iter()
            .map(|p| format!("{:.2},{:.2}", frame.px(p.0 as f64), frame.py(p.1)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline class="median" data-method="{}" points="{}" fill="none" stroke="{c}" stroke-width="2"/>"#,
            escape(name),
            line.join(" ")
        );
        for p in pts {
            let _ = writeln!(
                out,
                r#"<circle class="point" cx="{:.2}" cy="{:.2}" r="3" fill="{c}"/>"#,
                frame.px(p.0 as f64),
                frame.py(p.1)
            );
        }
        legend(&mut out, k, name);
    }
    out.push_str("</svg>\n");
    out
}

/// Final objective against an error metric, one colour per method.
pub fn objective_scatter(dataset: &str, rows: &[ResultRow], metric: Metric) -> Option<String> {
    let pts: Vec<&ResultRow> = rows
        .iter()
        .filter(|r| r.is_ok() && r.objective_final.is_some_and(f64::is_finite))
        .collect();
    if pts.is_empty() {
        return None;
    }
    let mut methods: Vec<&str> = Vec::new();
    for r in &pts {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let obj = |r: &ResultRow| r.objective_final.unwrap_or(f64::NAN);
    let frame = Frame {
        x: Axis::new(pts.iter().map(|r| obj(r)), false),
        y: Axis::new(pts.iter().map(|r| metric.of(r)), true),
    };
    let mut out = String::new();
    open_svg(
        &mut out,
        &format!("{dataset}: final objective vs {}", metric.name()),
        &frame,
        "final objective",
        metric.name(),
    );
    for r in &pts {
        let k = methods.iter().position(|m| *m == r.method).unwrap_or(0);
        let _ = writeln!(
            out,
            r#"<circle class="scatter" data-method="{}" cx="{:.2}" cy="{:.2}" r="3" fill="{}" fill-opacity="0.8"/>"#,
            escape(&r.method),
            frame.px(obj(r)),
            frame.py(metric.of(r)),
            PALETTE[k % PALETTE.len()]
        );
    }
    for (k, m) in methods.iter().enumerate() {
        legend(&mut out, k, m);
    }
    out.push_str("</svg>\n");
    Some(out)
}

fn safe_name(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes, per dataset, one chart per metric and objective scatters.
/// Failed rows are skipped.
pub fn emit_report(rows: &[ResultRow], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if rows.is_empty() {
        return Err(Error::EmptyTable);
    }
    fs::create_dir_all(out_dir)?;
    let mut datasets: Vec<&str> = rows.iter().map(|r| r.dataset.as_str()).collect();
    datasets.sort_unstable();
    datasets.dedup();
    let mut written = Vec::new();
    for ds in datasets {
        let sub: Vec<ResultRow> = rows.iter().filter(|r| r.dataset == ds).cloned().collect();
        let stem = safe_name(ds);
        for metric in [Metric::MeanRmse, Metric::StdRmse] {
            let path = out_dir.join(format!("{stem}_{}.svg", metric.name()));
            fs::write(&path, metric_chart(ds, &sub, metric))?;
            written.push(path);
            if let Some(svg) = objective_scatter(ds, &sub, metric) {
                let path = out_dir.join(format!("{stem}_objective_vs_{}.svg", metric.name()));
                fs::write(&path, svg)?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: &str, m: usize, seed: u64, v: f64) -> ResultRow {
        ResultRow {
            dataset: "toy".into(),
            method: method.into(),
            m,
            seed,
            mean_rmse: v,
            std_rmse: 2.0 * v,
            pred_rmse: 1.0,
            kl_to_exact: v,
            objective_final: Some(-v),
            eps_bound: None,
            wall_time_seconds: 0.1,
            status: "ok".into(),
        }
    }

    fn points_in(svg: &str, class: &str) -> Vec<usize> {
        svg.lines()
            .filter(|l| l.starts_with(&format!("<polyline class=\"{class}\"")))
            .map(|l| {
                let pts = l.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
                pts.split_whitespace().count()
            })
            .collect()
    }

    #[test]
    fn two_methods_three_sizes() {
        let mut rows = Vec::new();
        for (mi, method) in ["pf-dtc", "vfe"].iter().enumerate() {
            for m in [10, 20, 50] {
                for seed in 0..3 {
                    rows.push(row(method, m, seed, 0.1 * (mi + 1) as f64 / m as f64 * (1.0 + seed as f64)));
                }
            }
        }
        let svg = metric_chart("toy", &rows, Metric::MeanRmse);
        assert_eq!(points_in(&svg, "median"), vec![3, 3]);
        assert_eq!(svg.matches("<polygon class=\"band\"").count(), 2);
        assert_eq!(svg.matches("<circle class=\"point\"").count(), 6);
        assert!(svg.starts_with("<?xml") && svg.trim_end().ends_with("</svg>"));
        let sc = objective_scatter("toy", &rows, Metric::StdRmse).unwrap();
        assert_eq!(sc.matches("<circle class=\"scatter\"").count(), 18);
    }

    #[test]
    fn median_and_band() {
        let rows = vec![row("a", 5, 0, 1.0), row("a", 5, 1, 3.0), row("a", 5, 2, 10.0)];
        let s = series(&rows, Metric::MeanRmse);
        assert_eq!(s[0].1, vec![(5, 3.0, 1.0, 10.0)]);
    }

    #[test]
    fn single_row_renders() {
        let dir = tempfile::tempdir().unwrap();
        let files = emit_report(&[row("pf-dtc", 9, 0, 0.01)], dir.path()).unwrap();
        assert_eq!(files.len(), 4);
        let svg = fs::read_to_string(&files[0]).unwrap();
        assert_eq!(points_in(&svg, "median"), vec![1]);
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
    }

    #[test]
    fn zero_errors_stay_on_canvas() {
        let rows = vec![row("subsample", 5, 0, 0.0), row("subsample", 10, 0, 0.0)];
        let svg = metric_chart("toy", &rows, Metric::MeanRmse);
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
    }

    #[test]
    fn empty_table_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(emit_report(&[], dir.path()), Err(Error::EmptyTable)));
    }

    #[test]
    fn failed_rows_skipped() {
        let mut bad = row("vfe", 5, 0, 0.1);
        bad.status = "error: x".into();
        bad.mean_rmse = f64::NAN;
        let svg = metric_chart("toy", &[row("pf-dtc", 5, 0, 0.1), bad], Metric::MeanRmse);
        assert_eq!(points_in(&svg, "median"), vec![1]);
        assert!(!svg.contains("NaN"));
    }
}
