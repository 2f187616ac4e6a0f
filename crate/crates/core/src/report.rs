//! Report artifacts: metric tables as JSON and CSV, loss/metric curves as
//! standalone SVG line plots.
//!
//! Every artifact embeds the run configuration hash. Aggregation across
//! files refuses to mix hashes unless explicitly forced, so numbers from
//! different configurations cannot silently end up in one table.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub scenario_id: String,
    pub metric: String,
    /// Horizon in seconds; 0 for horizon-free metrics.
    pub horizon: f64,
    pub value: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Report {
    pub config_hash: String,
    pub rows: Vec<MetricRow>,
}

impl Report {
    pub fn new(config_hash: &str) -> Self {
        Report {
            config_hash: config_hash.to_string(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, scenario_id: &str, metric: &str, horizon: f64, value: f64) {
        self.rows.push(MetricRow {
            scenario_id: scenario_id.to_string(),
            metric: metric.to_string(),
            horizon,
            value,
        });
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Report> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// CSV with the config hash in a leading comment line.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(&format!("# config_hash={}\n", self.config_hash));
        out.push_str("scenario_id,metric,horizon,value\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.scenario_id, r.metric, r.horizon, r.value
            ));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Report> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let hash_line = lines
            .next()
            .ok_or_else(|| Error::Evaluation("empty report".to_string()))?;
        let config_hash = hash_line
            .strip_prefix("# config_hash=")
            .ok_or_else(|| Error::Evaluation("missing config hash line".to_string()))?
            .to_string();
        let header = lines.next();
        if header != Some("scenario_id,metric,horizon,value") {
            return Err(Error::Evaluation("unexpected csv header".to_string()));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 4 {
                return Err(Error::Evaluation(format!("bad csv row {}", i + 3)));
            }
            rows.push(MetricRow {
                scenario_id: parts[0].to_string(),
                metric: parts[1].to_string(),
                horizon: parts[2]
                    .parse()
                    .map_err(|e| Error::Evaluation(format!("row {}: {e}", i + 3)))?,
                value: parts[3]
                    .parse()
                    .map_err(|e| Error::Evaluation(format!("row {}: {e}", i + 3)))?,
            });
        }
        Ok(Report { config_hash, rows })
    }
}

/// Concatenate reports. Mixed config hashes are refused unless `force`.
pub fn merge(reports: &[Report], force: bool) -> Result<Report> {
    let Some(first) = reports.first() else {
        return Err(Error::Evaluation("no reports to merge".to_string()));
    };
    if !force {
        for r in reports {
            if r.config_hash != first.config_hash {
                return Err(Error::Evaluation(format!(
                    "config hash mismatch: {} vs {} (pass force to override)",
                    first.config_hash, r.config_hash
                )));
            }
        }
    }
    let mut out = Report::new(&first.config_hash);
    for r in reports {
        out.rows.extend(r.rows.iter().cloned());
    }
    Ok(out)
}

/// One named curve for the SVG plot.
pub struct Series<'a> {
    pub name: &'a str,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Minimal standalone SVG line plot, one polyline per series.
pub fn line_plot_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (640.0, 400.0);
    let (ml, mr, mt, mb) = (60.0, 20.0, 40.0, 50.0);
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        x0 = 0.0;
        x1 = 1.0;
        y0 = 0.0;
        y1 = 1.0;
    }
    if (x1 - x0).abs() < 1e-12 {
        x1 = x0 + 1.0;
    }
    if (y1 - y0).abs() < 1e-12 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| ml + (x - x0) / (x1 - x0) * (w - ml - mr);
    let sy = |y: f64| h - mb - (y - y0) / (y1 - y0) * (h - mt - mb);
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{}</text>\n",
        w / 2.0,
        xml_escape(title)
    ));
    // axes
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - mb,
        w - mr,
        h - mb
    ));
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - mb
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">{}</text>\n",
        (ml + w - mr) / 2.0,
        h - 12.0,
        xml_escape(x_label)
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        (mt + h - mb) / 2.0,
        (mt + h - mb) / 2.0,
        xml_escape(y_label)
    ));
    // tick labels at the extremes
    for (x, anchor) in [(x0, "start"), (x1, "end")] {
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"{anchor}\" font-size=\"10\">{:.3}</text>\n",
            sx(x),
            h - mb + 16.0,
            x
        ));
    }
    for y in [y0, y1] {
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-size=\"10\">{:.3}</text>\n",
            ml - 6.0,
            sy(y) + 4.0,
            y
        ));
    }
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            path.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{color}\">{}</text>\n",
            w - mr - 120.0,
            mt + 14.0 * (i as f64 + 1.0),
            xml_escape(s.name)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn save_plot(path: &Path, svg: &str) -> Result<()> {
    std::fs::write(path, svg)?;
    Ok(())
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
