//! Curves with ±1σ bands, rendered as a standalone SVG and projected to CSV.

use std::fmt::Write as _;

use serde_json::Value;

use crate::CliError;

/// One named curve: `mean ± std` at each `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub x: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Series {
    pub fn new(name: &str) -> Self {
        Self {
            name: name.into(),
            x: Vec::new(),
            mean: Vec::new(),
            std: Vec::new(),
        }
    }

    pub fn push(&mut self, x: f64, mean: f64, std: f64) {
        self.x.push(x);
        self.mean.push(mean);
        self.std.push(std);
    }
}

const EVAL_METRICS: [&str; 5] = [
    "bad_layers",
    "distrib",
    "layer0_quality",
    "ssim",
    "oracle_reward",
];

fn field(v: &Value, key: &str, line: usize) -> Result<f64, CliError> {
    v.get(key)
        .and_then(Value::as_f64)
        .ok_or_else(|| CliError::Input(format!("line {line}: missing numeric field {key}")))
}

/// Series from a training log: per-round `reward_mean ± reward_std`, and for
/// every eval row the aggregate `mean ± std` of each eval metric.
pub fn series_from_log(text: &str) -> Result<Vec<Series>, CliError> {
    let mut reward = Series::new("reward");
    let mut evals: Vec<Series> = EVAL_METRICS.iter().map(|m| Series::new(m)).collect();
    for (i, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let v: Value = serde_json::from_str(line)
            .map_err(|e| CliError::Input(format!("line {}: {e}", i + 1)))?;
        let round = field(&v, "round", i + 1)?;
        match v.get("kind").and_then(Value::as_str) {
            Some("eval") => {
                for s in &mut evals {
                    let agg = v
                        .pointer(&format!("/aggregate/{}", s.name))
                        .ok_or_else(|| {
                            CliError::Input(format!("line {}: eval row lacks {}", i + 1, s.name))
                        })?;
                    s.push(round, field(agg, "mean", i + 1)?, field(agg, "std", i + 1)?);
                }
            }
            _ => reward.push(
                round,
                field(&v, "reward_mean", i + 1)?,
                field(&v, "reward_std", i + 1)?,
            ),
        }
    }
    let out: Vec<Series> = std::iter::once(reward)
        .chain(evals)
        .filter(|s| !s.x.is_empty())
        .collect();
    if out.is_empty() {
        return Err(CliError::Input("log holds no rows".into()));
    }
    Ok(out)
}

pub fn to_csv(series: &[Series]) -> String {
    let mut out = String::from("series,x,mean,std\n");
    for s in series {
        for i in 0..s.x.len() {
            let _ = writeln!(out, "{},{},{},{}", s.name, s.x[i], s.mean[i], s.std[i]);
        }
    }
    out
}

pub fn from_csv(text: &str) -> Result<Vec<Series>, CliError> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("series,x,mean,std") {
        return Err(CliError::Input(
            "CSV header must be series,x,mean,std".into(),
        ));
    }
    let mut out: Vec<Series> = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(CliError::Input(format!(
                "CSV row {}: expected 4 columns",
                i + 2
            )));
        }
        let num = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| CliError::Input(format!("CSV row {}: {e}", i + 2)))
        };
        let (x, mean, std) = (num(cols[1])?, num(cols[2])?, num(cols[3])?);
        match out.iter_mut().find(|s| s.name == cols[0]) {
            Some(s) => s.push(x, mean, std),
            None => {
                let mut s = Series::new(cols[0]);
                s.push(x, mean, std);
                out.push(s);
            }
        }
    }
    if out.is_empty() {
        return Err(CliError::Input("CSV holds no rows".into()));
    }
    Ok(out)
}

const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 220.0;
const PAD: f64 = 40.0;
const COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// One panel per series, stacked vertically. Each panel draws the mean as a
/// polyline with a `mean ± std` band polygon behind it.
pub fn to_svg(series: &[Series]) -> String {
    let height = series.len() as f64 * (PANEL_H + PAD) + PAD;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{height}\" viewBox=\"0 0 {w} {height}\" font-family=\"sans-serif\" font-size=\"11\">\n",
        w = PANEL_W + 2.0 * PAD
    );
    for (k, s) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let top = PAD + k as f64 * (PANEL_H + PAD);
        let (x0, x1) = range(s.x.iter().copied());
        let (y0, y1) = range(s.mean.iter().zip(&s.std).flat_map(|(m, d)| [m - d, m + d]));
        let px = |x: f64| PAD + (x - x0) / (x1 - x0) * PANEL_W;
        let py = |y: f64| top + PANEL_H - (y - y0) / (y1 - y0) * PANEL_H;

        let _ = writeln!(svg, "<g class=\"panel\" data-series=\"{}\">", s.name);
        let _ = writeln!(
            svg,
            "<rect x=\"{PAD}\" y=\"{top}\" width=\"{PANEL_W}\" height=\"{PANEL_H}\" fill=\"none\" stroke=\"#999\"/>"
        );
        let _ = writeln!(
            svg,
            "<text x=\"{PAD}\" y=\"{}\">{} (±1σ)</text>",
            top - 6.0,
            s.name
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{y1:.3}</text>",
            PAD - 4.0,
            top + 10.0
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{y0:.3}</text>",
            PAD - 4.0,
            top + PANEL_H
        );
        let _ = writeln!(
            svg,
            "<text x=\"{PAD}\" y=\"{}\">{x0}</text>",
            top + PANEL_H + 14.0
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{x1}</text>",
            PAD + PANEL_W,
            top + PANEL_H + 14.0
        );

        let upper =
            (0..s.x.len()).map(|i| format!("{:.2},{:.2}", px(s.x[i]), py(s.mean[i] + s.std[i])));
        let lower = (0..s.x.len())
            .rev()
            .map(|i| format!("{:.2},{:.2}", px(s.x[i]), py(s.mean[i] - s.std[i])));
        let band: Vec<String> = upper.chain(lower).collect();
        let _ = writeln!(svg, "<polygon class=\"band\" points=\"{}\" fill=\"{color}\" fill-opacity=\"0.2\" stroke=\"none\"/>", band.join(" "));
        let line: Vec<String> = (0..s.x.len())
            .map(|i| format!("{:.2},{:.2}", px(s.x[i]), py(s.mean[i])))
            .collect();
        let _ = writeln!(svg, "<polyline class=\"mean\" points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>", line.join(" "));
        svg.push_str("</g>\n");
    }
    svg.push_str("</svg>\n");
    svg
}
