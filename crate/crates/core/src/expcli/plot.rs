use std::fmt::Write;

use super::aggregate::AggregateResult;
use crate::odelab::FlowTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("nothing to plot")]
pub struct EmptyInput;

pub enum PlotInput<'a> {
    /// Percentile bands of a metric against `n`.
    Aggregate(&'a AggregateResult),
    /// `‖f̄(w_t)‖` against `t`.
    Flow(&'a FlowTrace),
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn new(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Frame {
        Frame { x: padded_range(xs), y: padded_range(ys) }
    }

    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - BOTTOM - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - TOP - BOTTOM)
    }

    fn point(&self, x: f64, y: f64) -> String {
        format!("{:.2},{:.2}", self.px(x), self.py(y))
    }
}

fn padded_range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo <= f64::EPSILON * lo.abs().max(1.0) {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn header(svg: &mut String, title: &str, frame: &Frame, x_label: &str, y_label: &str) {
    let _ = write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">
<rect width="100%" height="100%" fill="white"/>
<text x="{tx}" y="24" text-anchor="middle" font-family="sans-serif" font-size="15">{title}</text>
<line x1="{LEFT}" y1="{by}" x2="{rx}" y2="{by}" stroke="black"/>
<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{by}" stroke="black"/>
<text x="{tx}" y="{xl}" text-anchor="middle" font-family="sans-serif" font-size="13">{x_label}</text>
<text x="18" y="{ym}" text-anchor="middle" font-family="sans-serif" font-size="13" transform="rotate(-90 18 {ym})">{y_label}</text>
"#,
        tx = WIDTH / 2.0,
        by = HEIGHT - BOTTOM,
        rx = WIDTH - RIGHT,
        xl = HEIGHT - 12.0,
        ym = HEIGHT / 2.0,
    );
    for (v, anchor, x, y) in [
        (frame.x.0, "start", LEFT, HEIGHT - BOTTOM + 16.0),
        (frame.x.1, "end", WIDTH - RIGHT, HEIGHT - BOTTOM + 16.0),
        (frame.y.0, "end", LEFT - 6.0, HEIGHT - BOTTOM),
        (frame.y.1, "end", LEFT - 6.0, TOP + 4.0),
    ] {
        let _ = writeln!(
            svg,
            r#"<text x="{x}" y="{y}" text-anchor="{anchor}" font-family="sans-serif" font-size="11">{}</text>"#,
            tick(v)
        );
    }
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn band(svg: &mut String, frame: &Frame, xs: &[f64], lo: &[f64], hi: &[f64], fill: &str) {
    let mut pts: Vec<String> = xs.iter().zip(hi).map(|(x, y)| frame.point(*x, *y)).collect();
    pts.extend(xs.iter().zip(lo).rev().map(|(x, y)| frame.point(*x, *y)));
    let _ = writeln!(svg, r#"<polygon points="{}" fill="{fill}" stroke="none"/>"#, pts.join(" "));
}

fn line(svg: &mut String, frame: &Frame, xs: &[f64], ys: &[f64], stroke: &str) {
    if xs.len() == 1 {
        let _ = writeln!(svg, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{stroke}"/>"#, frame.px(xs[0]), frame.py(ys[0]));
        return;
    }
    let pts: Vec<String> = xs.iter().zip(ys).map(|(x, y)| frame.point(*x, *y)).collect();
    let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="1.5"/>"#, pts.join(" "));
}

/// Renders a deterministic SVG document.
pub fn emit_plot(input: PlotInput<'_>) -> Result<String, EmptyInput> {
    let mut svg = String::new();
    match input {
        PlotInput::Aggregate(agg) => {
            if agg.is_empty() {
                return Err(EmptyInput);
            }
            let xs: Vec<f64> = agg.rows.iter().map(|r| r.0 as f64).collect();
            let col = |k: usize| -> Vec<f64> { agg.rows.iter().map(|r| r.1[k]).collect() };
            let frame = Frame::new(xs.iter().copied(), agg.rows.iter().flat_map(|r| r.1));
            header(&mut svg, agg.metric.name(), &frame, "n", agg.metric.name());
            band(&mut svg, &frame, &xs, &col(0), &col(4), "#c6dbef");
            band(&mut svg, &frame, &xs, &col(1), &col(3), "#6baed6");
            line(&mut svg, &frame, &xs, &col(2), "#08306b");
        }
        PlotInput::Flow(trace) => {
            if trace.is_empty() {
                return Err(EmptyInput);
            }
            let frame = Frame::new(trace.times.iter().copied(), trace.f_norms.iter().copied());
            header(&mut svg, "flow", &frame, "t", "|f(w_t)|");
            line(&mut svg, &frame, &trace.times, &trace.f_norms, "#08306b");
        }
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
