//! Minimal SVG charts. Every function is a pure function of its input rows,
//! so regenerating a plot from the same CSV yields identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::EvalReport;

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD_L: f64 = 64.0;
const PAD_R: f64 = 150.0;
const PAD_T: f64 = 40.0;
const PAD_B: f64 = 48.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn header(out: &mut String, title: &str) {
    let _ = write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        W / 2.0,
        escape(title)
    );
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

fn axes(out: &mut String, (x0, x1): (f64, f64), (y0, y1): (f64, f64), xlabel: &str, ylabel: &str) {
    let (left, right, top, bottom) = (PAD_L, W - PAD_R, PAD_T, H - PAD_B);
    let _ = writeln!(
        out,
        "<line x1=\"{left}\" y1=\"{bottom}\" x2=\"{right}\" y2=\"{bottom}\" stroke=\"black\"/>\n\
         <line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{bottom}\" stroke=\"black\"/>"
    );
    for i in 0..=4 {
        let t = f64::from(i) / 4.0;
        let y = bottom - t * (bottom - top);
        let x = left + t * (right - left);
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{:.3}</text>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            left - 6.0,
            y + 4.0,
            y0 + t * (y1 - y0),
            x,
            bottom + 16.0,
            tick(x0 + t * (x1 - x0))
        );
    }
    let _ = writeln!(
        out,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">{}</text>",
        (left + right) / 2.0,
        H - 10.0,
        escape(xlabel),
        (top + bottom) / 2.0,
        (top + bottom) / 2.0,
        escape(ylabel)
    );
}

fn tick(v: f64) -> String {
    if (v - v.round()).abs() < 1e-9 {
        format!("{}", v.round() as i64)
    } else {
        format!("{v:.2}")
    }
}

fn legend(out: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = PAD_T + 18.0 * i as f64;
        let x = W - PAD_R + 12.0;
        let _ = writeln!(
            out,
            "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"12\" height=\"12\" fill=\"{}\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\">{}</text>",
            y,
            COLORS[i % COLORS.len()],
            x + 18.0,
            y + 10.0,
            escape(name)
        );
    }
}

/// Polyline chart, one series per name.
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let xr = range(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)));
    let yr = range(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)));
    axes(&mut out, xr, yr, xlabel, ylabel);
    let sx = |x: f64| PAD_L + (x - xr.0) / (xr.1 - xr.0) * (W - PAD_R - PAD_L);
    let sy = |y: f64| H - PAD_B - (y - yr.0) / (yr.1 - yr.0) * (H - PAD_B - PAD_T);
    for (i, (_, pts)) in series.iter().enumerate() {
        let coords: Vec<String> = pts
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let color = COLORS[i % COLORS.len()];
        let _ = writeln!(
            out,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            coords.join(" ")
        );
        if coords.len() <= 16 {
            for c in &coords {
                let (x, y) = c.split_once(',').expect("formatted pair");
                let _ = writeln!(out, "<circle cx=\"{x}\" cy=\"{y}\" r=\"3\" fill=\"{color}\"/>");
            }
        }
    }
    let names: Vec<&str> = series.iter().map(|(n, _)| n.as_str()).collect();
    legend(&mut out, &names);
    out.push_str("</svg>\n");
    out
}

/// Bars with ±std whiskers.
pub fn bar_chart(title: &str, ylabel: &str, bars: &[(String, f64, f64)]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let hi = bars
        .iter()
        .map(|b| b.1 + b.2)
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let yr = (0.0, hi * 1.1);
    let (left, right, top, bottom) = (PAD_L, W - PAD_R, PAD_T, H - PAD_B);
    let _ = writeln!(
        out,
        "<line x1=\"{left}\" y1=\"{bottom}\" x2=\"{right}\" y2=\"{bottom}\" stroke=\"black\"/>\n\
         <line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{bottom}\" stroke=\"black\"/>"
    );
    let sy = |y: f64| bottom - (y - yr.0) / (yr.1 - yr.0) * (bottom - top);
    for i in 0..=4 {
        let v = yr.1 * f64::from(i) / 4.0;
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.3}</text>",
            left - 6.0,
            sy(v) + 4.0
        );
    }
    let _ = writeln!(
        out,
        "<text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">{}</text>",
        (top + bottom) / 2.0,
        (top + bottom) / 2.0,
        escape(ylabel)
    );
    let slot = (right - left) / bars.len().max(1) as f64;
    for (i, (label, mean, std)) in bars.iter().enumerate() {
        let x = left + slot * i as f64 + slot * 0.2;
        let w = slot * 0.6;
        let color = COLORS[i % COLORS.len()];
        let _ = writeln!(
            out,
            "<rect x=\"{x:.2}\" y=\"{:.2}\" width=\"{w:.2}\" height=\"{:.2}\" fill=\"{color}\"/>\n\
             <line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n\
             <text x=\"{:.2}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n\
             <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{mean:.3}</text>",
            sy(*mean),
            sy(0.0) - sy(*mean),
            x + w / 2.0,
            sy(mean + std),
            x + w / 2.0,
            sy((mean - std).max(0.0)),
            x + w / 2.0,
            bottom + 16.0,
            escape(label),
            x + w / 2.0,
            sy(mean + std) - 6.0
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Loss curves (one series per loss name) from a metrics CSV. Long series
/// are averaged over windows so the chart stays small.
pub fn loss_curves_from_csv(path: &Path) -> Result<String> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("{}: missing column `{name}`", path.display())))
    };
    let (c_step, c_name, c_value) = (col("step")?, col("loss_name")?, col("value")?);
    let mut by_loss: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec?;
        let parse = |i: usize| -> Result<f64> {
            rec[i]
                .parse::<f64>()
                .map_err(|e| Error::Data(format!("{}: bad number `{}`: {e}", path.display(), &rec[i])))
        };
        by_loss
            .entry(rec[c_name].to_string())
            .or_default()
            .push((parse(c_step)?, parse(c_value)?));
    }
    let series: Vec<(String, Vec<(f64, f64)>)> = by_loss
        .into_iter()
        .map(|(name, pts)| (name, downsample(&pts, 200)))
        .collect();
    Ok(line_chart("Training losses", "optimizer step", "loss", &series))
}

fn downsample(pts: &[(f64, f64)], max: usize) -> Vec<(f64, f64)> {
    if pts.len() <= max {
        return pts.to_vec();
    }
    let win = pts.len().div_ceil(max);
    pts.chunks(win)
        .map(|c| {
            let n = c.len() as f64;
            (
                c.iter().map(|p| p.0).sum::<f64>() / n,
                c.iter().map(|p| p.1).sum::<f64>() / n,
            )
        })
        .collect()
}

/// Labeling-accuracy bars per variant.
pub fn ablation_bars(report: &EvalReport) -> String {
    let bars: Vec<(String, f64, f64)> = report
        .table
        .iter()
        .map(|r| (r.variant.clone(), r.labeling_accuracy.0, r.labeling_accuracy.1))
        .collect();
    bar_chart("Ablation: labeling accuracy", "labeling accuracy", &bars)
}

/// Labeling accuracy and policy success against the shift distance.
pub fn sweep_curve(report: &EvalReport) -> String {
    let mut acc = Vec::new();
    let mut succ = Vec::new();
    for r in &report.table {
        let shift = report
            .per_seed
            .iter()
            .find(|s| s.variant == r.variant)
            .map_or(f64::NAN, |s| s.shift as f64);
        acc.push((shift, r.labeling_accuracy.0));
        succ.push((shift, r.policy_success.0));
    }
    line_chart(
        "Shift-distance sweep",
        "max shift s",
        "mean over seeds",
        &[("labeling accuracy".into(), acc), ("policy success".into(), succ)],
    )
}
