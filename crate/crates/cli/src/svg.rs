//! Minimal deterministic SVG output. Numbers are printed with fixed
//! precision so identical inputs give byte-identical files.

use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const PAD: f64 = 48.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Data range padded by 5% on each side; a degenerate range widens to ±0.5.
fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if !(hi > lo) {
        return (lo - 0.5, hi + 0.5);
    }
    let m = 0.05 * (hi - lo);
    (lo - m, hi + m)
}

fn extent(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        PAD + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - 2.0 * PAD)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - PAD - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - 2.0 * PAD)
    }
}

fn open(out: &mut String, title: &str, x: (f64, f64), y: (f64, f64), xlabel: &str, ylabel: &str) -> Frame {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" data-x-min="{:.6}" data-x-max="{:.6}" data-y-min="{:.6}" data-y-max="{:.6}">"#,
        x.0, x.1, y.0, y.1
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="24" font-size="15" text-anchor="middle" font-family="sans-serif">{}</text>"#, WIDTH / 2.0, escape(title));
    let frame = Frame { x: padded(x.0, x.1), y: padded(y.0, y.1) };
    let (l, r, t, b) = (PAD, WIDTH - PAD, PAD, HEIGHT - PAD);
    let _ = writeln!(out, r#"<path d="M{l} {t}V{b}H{r}" fill="none" stroke="black"/>"#);
    for (i, (vx, vy)) in [(x.0, y.0), (x.1, y.1)].into_iter().enumerate() {
        let anchor = if i == 0 { "start" } else { "end" };
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="{anchor}" font-family="sans-serif">{}</text>"#,
            frame.px(vx),
            b + 16.0,
            fmt_tick(vx)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="end" font-family="sans-serif">{}</text>"#,
            l - 4.0,
            frame.py(vy) + 4.0,
            fmt_tick(vy)
        );
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle" font-family="sans-serif">{}</text>"#, WIDTH / 2.0, HEIGHT - 10.0, escape(xlabel));
    let _ = writeln!(
        out,
        r#"<text x="14" y="{}" font-size="12" text-anchor="middle" font-family="sans-serif" transform="rotate(-90 14 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(ylabel)
    );
    frame
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn polyline(out: &mut String, frame: &Frame, points: &[(f64, f64)], color: &str, width: f64, name: &str) {
    let d: Vec<String> = points.iter().map(|&(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y))).collect();
    let _ = writeln!(
        out,
        r#"<polyline data-series="{}" points="{}" fill="none" stroke="{color}" stroke-width="{width}"/>"#,
        escape(name),
        d.join(" ")
    );
}

/// Line chart of one or more series sharing axes.
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let all = || series.iter().flat_map(|s| s.points.iter().copied());
    let x = extent(all().map(|p| p.0));
    let y = extent(all().map(|p| p.1));
    let (x, y) = if x.0.is_finite() { (x, y) } else { ((0.0, 1.0), (0.0, 1.0)) };
    let mut out = String::new();
    let frame = open(&mut out, title, x, y, xlabel, ylabel);
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        polyline(&mut out, &frame, &s.points, color, 1.5, &s.name);
        for &(px, py) in &s.points {
            let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}"/>"#, frame.px(px), frame.py(py));
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" fill="{color}" font-family="sans-serif">{}</text>"#,
            WIDTH - PAD - 120.0,
            PAD + 14.0 * i as f64,
            escape(&s.name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Channel traces over frames with keyframes marked as vertical rules.
pub fn keyframe_chart(title: &str, channels: &[Vec<f64>], keyframes: &[usize]) -> String {
    let n = channels.first().map_or(0, Vec::len);
    let x = (0.0, n.saturating_sub(1) as f64);
    let y = extent(channels.iter().flatten().copied());
    let y = if y.0.is_finite() { y } else { (0.0, 1.0) };
    let mut out = String::new();
    let frame = open(&mut out, title, x, y, "frame", "normalized value");
    for &k in keyframes {
        let px = frame.px(k as f64);
        let _ = writeln!(
            out,
            r##"<line data-keyframe="{k}" x1="{px:.2}" y1="{PAD}" x2="{px:.2}" y2="{}" stroke="#bbbbbb" stroke-dasharray="3 3"/>"##,
            HEIGHT - PAD
        );
    }
    for (c, values) in channels.iter().enumerate() {
        let pts: Vec<(f64, f64)> = values.iter().enumerate().map(|(i, &v)| (i as f64, v)).collect();
        polyline(&mut out, &frame, &pts, PALETTE[c % PALETTE.len()], 1.0, &format!("channel {c}"));
        for &k in keyframes {
            let _ = writeln!(
                out,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{}"/>"#,
                frame.px(k as f64),
                frame.py(values[k]),
                PALETTE[c % PALETTE.len()]
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_is_deterministic_and_records_ranges() {
        let s = vec![Series { name: "a<b".into(), points: vec![(0.0, 1.0), (10.0, 3.0)] }];
        let a = line_chart("t", "x", "y", &s);
        assert_eq!(a, line_chart("t", "x", "y", &s));
        assert!(a.contains(r#"data-x-min="0.000000" data-x-max="10.000000""#));
        assert!(a.contains("a&lt;b"));
    }

    #[test]
    fn margins_keep_points_inside() {
        let f = Frame { x: padded(0.0, 10.0), y: padded(-1.0, 1.0) };
        assert!(f.px(0.0) > PAD && f.px(10.0) < WIDTH - PAD);
        assert!(f.py(-1.0) < HEIGHT - PAD && f.py(1.0) > PAD);
        assert_eq!(padded(2.0, 2.0), (1.5, 2.5));
    }
}
