//! Bare-bones SVG plots: axes, series, error bars, boxes and arrows.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// One plotted point with an optional symmetric error bar.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<Point>,
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(xs: impl Iterator<Item = f64>, ys: impl Iterator<Item = f64>) -> Frame {
        let (x0, x1) = span(xs);
        let (y0, y1) = span(ys);
        Frame { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x0) / (self.x1 - self.x0) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (H - TOP - BOTTOM)
    }
}

fn span(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { lo.abs().max(1e-12) * 0.1 };
    (lo - pad, hi + pad)
}

fn header(out: &mut String, title: &str, xlabel: &str, ylabel: &str, f: &Frame) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">
<rect width="100%" height="100%" fill="white"/>
<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>
<line x1="{LEFT}" y1="{}" x2="{}" y2="{}" stroke="black"/>
<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}" stroke="black"/>
<text x="{}" y="{}" text-anchor="middle">{}</text>
<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>
"#,
        W / 2.0,
        esc(title),
        H - BOTTOM,
        W - RIGHT,
        H - BOTTOM,
        H - BOTTOM,
        (LEFT + W - RIGHT) / 2.0,
        H - 12.0,
        esc(xlabel),
        H / 2.0,
        H / 2.0,
        esc(ylabel)
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let xv = f.x0 + t * (f.x1 - f.x0);
        let yv = f.y0 + t * (f.y1 - f.y0);
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text><text x="{}" y="{:.1}" text-anchor="end">{}</text>"#,
            f.px(xv),
            H - BOTTOM + 15.0,
            tick(xv),
            LEFT - 5.0,
            f.py(yv) + 4.0,
            tick(yv)
        );
    }
}

fn legend(out: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = TOP + 16.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<rect x="{}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            W - RIGHT + 10.0,
            y,
            COLORS[i % COLORS.len()],
            W - RIGHT + 25.0,
            y + 9.0,
            esc(name)
        );
    }
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Lines through each series with error bars; `connect = false` draws a
/// scatter.
pub fn plot(title: &str, xlabel: &str, ylabel: &str, series: &[Series], connect: bool) -> String {
    let pts = || series.iter().flat_map(|s| s.points.iter());
    let f = Frame::fit(pts().map(|p| p.x), pts().flat_map(|p| [p.y - p.err, p.y + p.err]));
    let mut out = String::new();
    header(&mut out, title, xlabel, ylabel, &f);
    for (i, s) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let finite: Vec<&Point> = s.points.iter().filter(|p| p.x.is_finite() && p.y.is_finite()).collect();
        if connect && finite.len() > 1 {
            let path: Vec<String> = finite.iter().map(|p| format!("{:.1},{:.1}", f.px(p.x), f.py(p.y))).collect();
            let _ = writeln!(out, r#"<polyline fill="none" stroke="{c}" points="{}"/>"#, path.join(" "));
        }
        for p in finite {
            let (x, y) = (f.px(p.x), f.py(p.y));
            if p.err > 0.0 && p.err.is_finite() {
                let _ = writeln!(
                    out,
                    r#"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="{c}"/>"#,
                    f.py(p.y - p.err),
                    f.py(p.y + p.err)
                );
            }
            let _ = writeln!(out, r#"<circle cx="{x:.1}" cy="{y:.1}" r="3" fill="{c}"/>"#);
        }
    }
    legend(&mut out, &series.iter().map(|s| s.name.as_str()).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}

/// Box per group: quartiles, median and whiskers at the extremes.
pub fn box_plot(title: &str, ylabel: &str, groups: &[(String, Vec<f64>)]) -> String {
    let f = Frame::fit(
        [0.0, groups.len() as f64 + 1.0].into_iter(),
        groups.iter().flat_map(|g| g.1.iter().copied()),
    );
    let mut out = String::new();
    header(&mut out, title, "", ylabel, &f);
    for (i, (_, vals)) in groups.iter().enumerate() {
        let mut v: Vec<f64> = vals.iter().copied().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            continue;
        }
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        let c = COLORS[i % COLORS.len()];
        let cx = f.px(i as f64 + 1.0);
        let (q1, med, q3) = (f.py(q(0.25)), f.py(q(0.5)), f.py(q(0.75)));
        let _ = writeln!(
            out,
            r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="{c}"/>
<rect x="{:.1}" y="{q3:.1}" width="30" height="{:.1}" fill="white" stroke="{c}"/>
<line x1="{:.1}" y1="{med:.1}" x2="{:.1}" y2="{med:.1}" stroke="{c}" stroke-width="2"/>"#,
            f.py(v[0]),
            f.py(v[v.len() - 1]),
            cx - 15.0,
            (q1 - q3).max(0.5),
            cx - 15.0,
            cx + 15.0
        );
    }
    legend(&mut out, &groups.iter().map(|g| g.0.as_str()).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}

/// Arrows from each `(from, to)` pair.
pub fn arrow_plot(title: &str, xlabel: &str, ylabel: &str, arrows: &[((f64, f64), (f64, f64))]) -> String {
    let f = Frame::fit(
        arrows.iter().flat_map(|a| [a.0 .0, a.1 .0]),
        arrows.iter().flat_map(|a| [a.0 .1, a.1 .1]),
    );
    let mut out = String::new();
    header(&mut out, title, xlabel, ylabel, &f);
    out.push_str(
        r##"<defs><marker id="head" markerWidth="8" markerHeight="6" refX="8" refY="3" orient="auto"><path d="M0,0 L8,3 L0,6 z" fill="#555"/></marker></defs>
"##,
    );
    for &((x0, y0), (x1, y1)) in arrows {
        if ![x0, y0, x1, y1].iter().all(|v| v.is_finite()) {
            continue;
        }
        let _ = writeln!(
            out,
            r##"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="{}"/><line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#555" marker-end="url(#head)"/>"##,
            f.px(x0),
            f.py(y0),
            COLORS[0],
            f.px(x0),
            f.py(y0),
            f.px(x1),
            f.py(y1)
        );
    }
    legend(&mut out, &["baseline", "regularized (arrow head)"]);
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plots_are_well_formed_even_when_degenerate() {
        let s = Series { name: "a<b".into(), points: vec![Point { x: 1.0, y: 2.0, err: 0.1 }, Point { x: 2.0, y: f64::NAN, err: 0.0 }] };
        let svg = plot("t", "x", "y", &[s], true);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert!(svg.contains("a&lt;b"));
        assert!(!svg.contains("NaN"));
        let b = box_plot("t", "y", &[("g".into(), vec![1.0, 1.0]), ("h".into(), vec![])]);
        assert!(b.contains("<rect x"));
        let a = arrow_plot("t", "x", "y", &[((0.0, 0.0), (1.0, 1.0))]);
        assert!(a.contains("marker-end"));
        assert!(plot("t", "x", "y", &[], true).ends_with("</svg>\n"));
    }
}
