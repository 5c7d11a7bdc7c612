//! Minimal SVG line and scatter plots.

use std::fmt::Write;

use crate::error::{LabError, LabResult};
use crate::output::NumericCsv;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    /// First column on x, every other column a series.
    Line,
    /// First two columns as (x, y) points, with the `y = x` line.
    Scatter,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn new(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let span = |it: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = it.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            if lo == hi {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        };
        Self {
            x: span(&mut xs.clone()),
            y: span(&mut ys.clone()),
        }
    }

    fn px(&self, v: f64) -> f64 {
        MARGIN + (v - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, v: f64) -> f64 {
        HEIGHT - MARGIN - (v - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - 2.0 * MARGIN)
    }
}

fn header(out: &mut String, title: &str, frame: &Frame, x_label: &str, y_label: &str) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = write!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = write!(
        out,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let (l, r, t, b) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = write!(
        out,
        r#"<path class="axes" d="M{l} {t} L{l} {b} L{r} {b}" stroke="black" fill="none"/>"#
    );
    for (v, anchor) in [(frame.x.0, "start"), (frame.x.1, "end")] {
        let _ = write!(
            out,
            r#"<text x="{}" y="{}" text-anchor="{anchor}" font-size="11">{}</text>"#,
            frame.px(v),
            b + 16.0,
            fmt_tick(v)
        );
    }
    for v in [frame.y.0, frame.y.1] {
        let _ = write!(
            out,
            r#"<text x="{}" y="{}" text-anchor="end" font-size="11">{}</text>"#,
            l - 6.0,
            frame.py(v) + 4.0,
            fmt_tick(v)
        );
    }
    let _ = write!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 18.0,
        escape(x_label)
    );
    let _ = write!(
        out,
        r#"<text x="18" y="{}" text-anchor="middle" font-size="13" transform="rotate(-90 18 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    );
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-3 || v.abs() >= 1e5) {
        format!("{v:.2e}")
    } else {
        format!("{}", (v * 1e4).round() / 1e4)
    }
}

pub fn render(data: &NumericCsv, kind: PlotKind, title: &str) -> LabResult<String> {
    if data.is_empty() {
        return Err(LabError::Validation("nothing to plot: no data rows".into()));
    }
    match kind {
        PlotKind::Line => line_plot(data, title),
        PlotKind::Scatter => scatter_plot(data, title),
    }
}

fn finite_pairs<'a>(xs: &'a [f64], ys: &'a [f64]) -> impl Iterator<Item = (f64, f64)> + Clone + 'a {
    xs.iter()
        .zip(ys)
        .map(|(&x, &y)| (x, y))
        .filter(|(x, y)| x.is_finite() && y.is_finite())
}

fn line_plot(data: &NumericCsv, title: &str) -> LabResult<String> {
    if data.columns.len() < 2 {
        return Err(LabError::Validation("a line plot needs at least two columns".into()));
    }
    let xs = &data.columns[0];
    let series = &data.columns[1..];
    let all = series.iter().flat_map(|s| finite_pairs(xs, s));
    let frame = Frame::new(all.clone().map(|p| p.0), all.map(|p| p.1));
    let mut out = String::new();
    let y_label = if series.len() == 1 { data.header[1].as_str() } else { "" };
    header(&mut out, title, &frame, &data.header[0], y_label);
    for (k, ys) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let mut d = String::new();
        for (i, (x, y)) in finite_pairs(xs, ys).enumerate() {
            let _ = write!(d, "{}{:.2} {:.2} ", if i == 0 { "M" } else { "L" }, frame.px(x), frame.py(y));
        }
        let _ = write!(
            out,
            r#"<path class="series" d="{}" stroke="{color}" fill="none" stroke-width="1.5"/>"#,
            d.trim_end()
        );
        let _ = write!(
            out,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">{}</text>"#,
            WIDTH - MARGIN + 4.0,
            MARGIN + 14.0 * k as f64,
            escape(&data.header[k + 1])
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

fn scatter_plot(data: &NumericCsv, title: &str) -> LabResult<String> {
    if data.columns.len() < 2 {
        return Err(LabError::Validation("a scatter plot needs two columns".into()));
    }
    let (xs, ys) = (&data.columns[0], &data.columns[1]);
    // square frame so that y = x is the diagonal
    let pts = finite_pairs(xs, ys);
    let both = pts.clone().flat_map(|(x, y)| [x, y]);
    let frame = Frame::new(both.clone(), both);
    let mut out = String::new();
    header(&mut out, title, &frame, &data.header[0], &data.header[1]);
    let (lo, hi) = frame.x;
    let _ = write!(
        out,
        r##"<line class="reference" x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#888" stroke-dasharray="4 4"/>"##,
        frame.px(lo),
        frame.py(lo),
        frame.px(hi),
        frame.py(hi)
    );
    for (x, y) in pts {
        let _ = write!(
            out,
            r#"<circle class="point" cx="{:.2}" cy="{:.2}" r="2.5" fill="{}" fill-opacity="0.6"/>"#,
            frame.px(x),
            frame.py(y),
            COLORS[0]
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}
