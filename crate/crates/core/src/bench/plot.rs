//! Standalone SVG plots of benchmark results.
//!
//! One polyline per (loss, schedule) group: the median across seeds at
//! each annotation fraction, with min/max whiskers. The raw series data
//! is embedded as JSON in the `<desc>` element so the numbers behind a
//! plot stay machine-readable.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bench::{load_results, BenchRow, BenchScores};
use crate::error::{Error, Result};
use crate::losses::LossVariant;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotMetric {
    Dice,
    F1,
    ExclusiveRecall,
}

impl PlotMetric {
    pub fn name(self) -> &'static str {
        match self {
            PlotMetric::Dice => "dice",
            PlotMetric::F1 => "f1",
            PlotMetric::ExclusiveRecall => "exclusive_recall",
        }
    }

    fn pick(self, scores: &BenchScores) -> f64 {
        match self {
            PlotMetric::Dice => scores.dice,
            PlotMetric::F1 => scores.f1,
            PlotMetric::ExclusiveRecall => scores.exclusive_recall,
        }
    }
}

impl fmt::Display for PlotMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PlotMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dice" => Ok(PlotMetric::Dice),
            "f1" => Ok(PlotMetric::F1),
            "exclusive_recall" => Ok(PlotMetric::ExclusiveRecall),
            other => Err(Error::InvalidConfig(format!(
                "unknown metric {other:?}, expected dice, f1, or exclusive_recall"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub fraction: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub label: String,
    pub points: Vec<SeriesPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub metric: String,
    pub series: Vec<Series>,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn series_label(loss: &str, schedule: &str) -> String {
    let annealed = loss
        .parse::<LossVariant>()
        .map(|v| v.uses_exclusion())
        .unwrap_or(false);
    if annealed {
        format!("{loss} ({schedule})")
    } else {
        loss.to_string()
    }
}

/// Groups rows by (loss, schedule) in first-appearance order and reduces
/// each (group, fraction) to median/min/max across seeds. Error rows
/// carry no scores and are skipped; a fraction whose every seed failed
/// yields no point.
pub fn collect_series(rows: &[BenchRow], metric: PlotMetric) -> Vec<Series> {
    let mut order: Vec<(String, String)> = Vec::new();
    for row in rows {
        let key = (row.loss.clone(), row.schedule.clone());
        if !order.contains(&key) {
            order.push(key);
        }
    }

    let mut out = Vec::new();
    for (loss, schedule) in order {
        let mut fractions: Vec<f64> = Vec::new();
        let mut buckets: Vec<Vec<f64>> = Vec::new();
        for row in rows {
            if row.loss != loss || row.schedule != schedule {
                continue;
            }
            let Some(scores) = &row.scores else { continue };
            let value = metric.pick(scores);
            match fractions.iter().position(|&f| f == row.fraction) {
                Some(i) => buckets[i].push(value),
                None => {
                    fractions.push(row.fraction);
                    buckets.push(vec![value]);
                }
            }
        }
        let mut points: Vec<SeriesPoint> = fractions
            .iter()
            .zip(buckets.iter_mut())
            .map(|(&fraction, values)| {
                let min = values.iter().copied().fold(f64::INFINITY, f64::min);
                let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                SeriesPoint { fraction, median: median(values), min, max }
            })
            .collect();
        points.sort_by(|a, b| a.fraction.partial_cmp(&b.fraction).unwrap());
        out.push(Series { label: series_label(&loss, &schedule), points });
    }
    out
}

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 520.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 770.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 460.0;

fn x_pos(fraction: f64) -> f64 {
    LEFT + fraction.clamp(0.0, 1.0) * (RIGHT - LEFT)
}

fn y_pos(value: f64) -> f64 {
    BOTTOM - value.clamp(0.0, 1.0) * (BOTTOM - TOP)
}

/// Renders the series to a self-contained SVG document. The y axis is
/// pinned to [0, 1]; the x axis is the annotated fraction in percent.
pub fn render_svg(series: &[Series], metric: PlotMetric) -> String {
    let data = PlotData {
        metric: metric.name().to_string(),
        series: series.to_vec(),
    };
    let island = serde_json::to_string(&data).expect("plot data serializes");

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" \
         font-family=\"sans-serif\" font-size=\"14\">\n"
    ));
    svg.push_str(&format!("<desc>{}</desc>\n", escape_xml(&island)));
    svg.push_str(&format!(
        "<rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    ));

    // Axes and grid.
    for i in 0..=4 {
        let v = i as f64 / 4.0;
        let y = y_pos(v);
        svg.push_str(&format!(
            "<line x1=\"{LEFT}\" y1=\"{y}\" x2=\"{RIGHT}\" y2=\"{y}\" stroke=\"#ddd\"/>\n"
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{v:.2}</text>\n",
            LEFT - 8.0,
            y + 5.0
        ));
    }
    for i in 0..=5 {
        let f = i as f64 / 5.0;
        let x = x_pos(f);
        svg.push_str(&format!(
            "<line x1=\"{x}\" y1=\"{BOTTOM}\" x2=\"{x}\" y2=\"{}\" stroke=\"#ddd\"/>\n",
            BOTTOM + 6.0
        ));
        svg.push_str(&format!(
            "<text x=\"{x}\" y=\"{}\" text-anchor=\"middle\">{:.0}</text>\n",
            BOTTOM + 24.0,
            f * 100.0
        ));
    }
    svg.push_str(&format!(
        "<line x1=\"{LEFT}\" y1=\"{TOP}\" x2=\"{LEFT}\" y2=\"{BOTTOM}\" stroke=\"black\"/>\n"
    ));
    svg.push_str(&format!(
        "<line x1=\"{LEFT}\" y1=\"{BOTTOM}\" x2=\"{RIGHT}\" y2=\"{BOTTOM}\" stroke=\"black\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">annotated fraction (%)</text>\n",
        (LEFT + RIGHT) / 2.0,
        HEIGHT - 10.0
    ));
    svg.push_str(&format!(
        "<text x=\"18\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">{}</text>\n",
        (TOP + BOTTOM) / 2.0,
        (TOP + BOTTOM) / 2.0,
        escape_xml(metric.name())
    ));

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for p in &s.points {
            let x = x_pos(p.fraction);
            svg.push_str(&format!(
                "<line x1=\"{x}\" y1=\"{}\" x2=\"{x}\" y2=\"{}\" stroke=\"{color}\" \
                 stroke-width=\"1\" opacity=\"0.6\"/>\n",
                y_pos(p.min),
                y_pos(p.max)
            ));
        }
        let path: Vec<String> = s
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", x_pos(p.fraction), y_pos(p.median)))
            .collect();
        if !path.is_empty() {
            svg.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
                path.join(" ")
            ));
        }
        for p in &s.points {
            svg.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3.5\" fill=\"{color}\"/>\n",
                x_pos(p.fraction),
                y_pos(p.median)
            ));
        }
        let ly = TOP + 18.0 + i as f64 * 20.0;
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            LEFT + 12.0,
            ly - 4.0,
            LEFT + 40.0,
            ly - 4.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\">{}</text>\n",
            LEFT + 48.0,
            ly,
            escape_xml(&s.label)
        ));
    }

    svg.push_str("</svg>\n");
    svg
}

/// Convenience wrapper: results CSV in, SVG file out.
pub fn plot_file(csv: impl AsRef<Path>, svg: impl AsRef<Path>, metric: PlotMetric) -> Result<()> {
    let rows = load_results(csv)?;
    let series = collect_series(&rows, metric);
    std::fs::write(svg, render_svg(&series, metric))?;
    Ok(())
}

/// Extracts the embedded data island from a rendered plot.
pub fn parse_data_island(svg: &str) -> Result<PlotData> {
    let start = svg
        .find("<desc>")
        .ok_or_else(|| Error::InvalidConfig("svg has no desc element".into()))?;
    let end = svg
        .find("</desc>")
        .ok_or_else(|| Error::InvalidConfig("svg has an unterminated desc".into()))?;
    let body = &svg[start + "<desc>".len()..end];
    let unescaped = body.replace("&lt;", "<").replace("&gt;", ">").replace("&amp;", "&");
    Ok(serde_json::from_str(&unescaped)?)
}
