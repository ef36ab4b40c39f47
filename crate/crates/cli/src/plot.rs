//! Deterministic SVG line plots of training logs and eval sweeps.

use std::collections::BTreeMap;
use std::fmt::Write;

use unidiff_core::{Error, Result};

use crate::commands::EVAL_HEADER;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

pub type Series = (String, Vec<(f64, f64)>);

#[derive(Debug, Clone, PartialEq)]
pub struct Figure {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

fn field<'a>(cols: &[&'a str], header: &[&str], name: &str, line: usize) -> Result<&'a str> {
    let i = header
        .iter()
        .position(|h| *h == name)
        .ok_or_else(|| Error::Format(format!("CSV has no '{name}' column")))?;
    cols.get(i)
        .copied()
        .ok_or_else(|| Error::Format(format!("line {line}: missing '{name}' field")))
}

fn number(text: &str, line: usize) -> Result<f64> {
    text.parse()
        .map_err(|_| Error::Format(format!("line {line}: '{text}' is not a number")))
}

/// Builds a figure from a training log (loss against step, one series per
/// task) or an eval CSV (value against guidance, one series per metric).
pub fn figure_from_csv(text: &str, metric: Option<&str>) -> Result<Figure> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, header)) = lines.next() else {
        return Ok(Figure {
            title: "empty input".into(),
            x_label: String::new(),
            y_label: String::new(),
            series: Vec::new(),
        });
    };
    let header: Vec<&str> = header.split(',').collect();
    let is_log = header.starts_with(&["step", "task", "loss"]);
    let is_eval = header == EVAL_HEADER.split(',').collect::<Vec<_>>();
    if !is_log && !is_eval {
        return Err(Error::Format(format!("unrecognised CSV header '{}'", header.join(","))));
    }
    let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for (i, line) in lines {
        let n = i + 1;
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != header.len() {
            return Err(Error::Format(format!("line {n}: expected {} fields, found {}", header.len(), cols.len())));
        }
        if is_log {
            let x = number(field(&cols, &header, "step", n)?, n)?;
            let y = number(field(&cols, &header, "loss", n)?, n)?;
            groups.entry(field(&cols, &header, "task", n)?.to_string()).or_default().push((x, y));
        } else {
            let name = field(&cols, &header, "metric", n)?;
            let g = field(&cols, &header, "guidance", n)?;
            if g.is_empty() || metric.is_some_and(|m| m != name) {
                continue;
            }
            let y = number(field(&cols, &header, "value", n)?, n)?;
            groups.entry(name.to_string()).or_default().push((number(g, n)?, y));
        }
    }
    let series = groups
        .into_iter()
        .map(|(name, mut pts)| {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
            (name, pts)
        })
        .collect();
    Ok(if is_log {
        Figure { title: "training loss".into(), x_label: "step".into(), y_label: "loss".into(), series }
    } else {
        Figure {
            title: metric.map_or_else(|| "metrics".to_string(), |m| m.to_string()),
            x_label: "guidance".into(),
            y_label: "value".into(),
            series,
        }
    })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

pub fn render(fig: &Figure) -> String {
    let mut s = String::new();
    let (x0, x1, y0, y1) = (MARGIN, WIDTH - MARGIN, HEIGHT - MARGIN, MARGIN);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, WIDTH / 2.0, escape(&fig.title));
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, WIDTH / 2.0, HEIGHT - 14.0, escape(&fig.x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(&fig.y_label)
    );

    let points = || fig.series.iter().flat_map(|(_, p)| p.iter().copied()).filter(|(x, y)| x.is_finite() && y.is_finite());
    if points().next().is_none() {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" fill="gray">no data</text>"#, WIDTH / 2.0, HEIGHT / 2.0);
        s.push_str("</svg>\n");
        return s;
    }
    let (xmin, xmax) = range(points().map(|p| p.0));
    let (ymin, ymax) = range(points().map(|p| p.1));
    let px = |x: f64| x0 + (x - xmin) / (xmax - xmin) * (x1 - x0);
    let py = |y: f64| y0 - (y - ymin) / (ymax - ymin) * (y0 - y1);
    for (v, anchor) in [(xmin, "start"), (xmax, "end")] {
        let _ = writeln!(s, r#"<text x="{:.2}" y="{}" text-anchor="{anchor}">{}</text>"#, px(v), y0 + 16.0, tick(v));
    }
    for v in [ymin, ymax] {
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#, x0 - 4.0, py(v) + 4.0, tick(v));
    }
    for (i, (name, pts)) in fig.series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<_> = pts.iter().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
        let path: Vec<String> = pts.iter().map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" points="{}"/>"#, path.join(" "));
        for (x, y) in &pts {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}"/>"#, px(*x), py(*y));
        }
        let ly = MARGIN + 14.0 * i as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{ly}" fill="{color}" text-anchor="end">{}</text>"#, x1, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}
