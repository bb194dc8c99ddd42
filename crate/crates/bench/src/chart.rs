//! SVG charts: test accuracy per round with ±1 std bands for every method,
//! and ε̂ per round for the private methods.

use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{BenchError, Result};
use crate::metrics::{read_metrics_dir, summarize, SummaryRow};

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

pub struct ChartFiles {
    pub accuracy: PathBuf,
    pub epsilon: PathBuf,
    /// Methods drawn in each chart, in legend order.
    pub accuracy_methods: Vec<String>,
    pub epsilon_methods: Vec<String>,
}

fn chart_err<E: std::fmt::Display>(e: E) -> BenchError {
    BenchError::Chart(e.to_string())
}

fn methods_of(rows: &[SummaryRow]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for r in rows {
        if !out.contains(&r.method) {
            out.push(r.method.clone());
        }
    }
    out
}

/// Reads the metrics CSVs in `metrics_dir` and writes `accuracy.svg` and
/// `epsilon.svg` to `out_dir`.
pub fn render_charts(metrics_dir: &Path, out_dir: &Path) -> Result<ChartFiles> {
    let records = read_metrics_dir(metrics_dir)?;
    let rows = summarize(&records);
    let delta = records.iter().find_map(|r| r.delta);
    std::fs::create_dir_all(out_dir).map_err(crate::error::io_err(out_dir))?;
    let accuracy = out_dir.join("accuracy.svg");
    let epsilon = out_dir.join("epsilon.svg");
    let accuracy_methods = methods_of(&rows);
    let private: Vec<SummaryRow> = rows.iter().filter(|r| r.epsilon_mean.is_some()).cloned().collect();
    let epsilon_methods = methods_of(&private);
    let caption = match delta {
        Some(d) => format!("For all DP methods, δ = {d:e}"),
        None => String::from("No DP methods present"),
    };
    draw(
        &accuracy,
        "Test accuracy vs round",
        "accuracy",
        &caption,
        &rows,
        &accuracy_methods,
        |r| Some((r.accuracy_mean, r.accuracy_std)),
    )?;
    draw(
        &epsilon,
        "Privacy loss ε̂ vs round",
        "ε̂",
        &caption,
        &private,
        &epsilon_methods,
        |r| r.epsilon_mean.map(|m| (m, 0.0)),
    )?;
    Ok(ChartFiles {
        accuracy,
        epsilon,
        accuracy_methods,
        epsilon_methods,
    })
}

fn draw(
    path: &Path,
    title: &str,
    y_label: &str,
    caption: &str,
    rows: &[SummaryRow],
    methods: &[String],
    value: impl Fn(&SummaryRow) -> Option<(f64, f64)>,
) -> Result<()> {
    let max_round = rows.iter().map(|r| r.round).max().unwrap_or(1).max(1);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in rows {
        if let Some((m, s)) = value(r) {
            lo = lo.min(m - s);
            hi = hi.max(m + s);
        }
    }
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        hi = lo + 1.0;
    }
    let pad = 0.05 * (hi - lo);
    let root = SVGBackend::new(path, (800, 520)).into_drawing_area();
    root.fill(&WHITE).map_err(chart_err)?;
    let (plot, footer) = root.split_vertically(490);
    let mut chart = ChartBuilder::on(&plot)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(0f64..max_round as f64, (lo - pad)..(hi + pad))
        .map_err(chart_err)?;
    chart
        .configure_mesh()
        .x_desc("round")
        .y_desc(y_label)
        .draw()
        .map_err(chart_err)?;
    for (i, method) in methods.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<(f64, f64, f64)> = rows
            .iter()
            .filter(|r| &r.method == method)
            .filter_map(|r| value(r).map(|(m, s)| (r.round as f64, m, s)))
            .collect();
        if pts.iter().any(|p| p.2 > 0.0) {
            let band: Vec<(f64, f64)> = pts
                .iter()
                .map(|p| (p.0, p.1 + p.2))
                .chain(pts.iter().rev().map(|p| (p.0, p.1 - p.2)))
                .collect();
            chart
                .draw_series(std::iter::once(Polygon::new(band, color.mix(0.15))))
                .map_err(chart_err)?;
        }
        chart
            .draw_series(LineSeries::new(pts.iter().map(|p| (p.0, p.1)), color.stroke_width(2)))
            .map_err(chart_err)?
            .label(method.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    if !methods.is_empty() {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(chart_err)?;
    }
    footer
        .draw(&Text::new(caption.to_string(), (20, 8), ("sans-serif", 15)))
        .map_err(chart_err)?;
    root.present().map_err(chart_err)?;
    Ok(())
}
