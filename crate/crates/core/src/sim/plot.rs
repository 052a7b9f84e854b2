//! CSV and SVG renderings of a captured window.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use crate::ml::SampleWindow;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 320.0;
const MARGIN: f64 = 40.0;
const COLORS: [&str; 3] = ["#d62728", "#2ca02c", "#1f77b4"];
const AXES: [&str; 3] = ["x", "y", "z"];

pub fn window_csv(window: &SampleWindow) -> String {
    let dt = 1.0 / window.rate_hz.max(1) as f64;
    let mut out = String::from("i,t,x,y,z\n");
    for (i, s) in window.samples.iter().enumerate() {
        let _ = writeln!(out, "{i},{:.3},{},{},{}", i as f64 * dt, s[0], s[1], s[2]);
    }
    out
}

pub fn window_svg(window: &SampleWindow, title: &str) -> String {
    let n = window.samples.len().max(2);
    let (lo, hi) = window
        .samples
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (-1.0, 1.0) };
    let x = |i: usize| MARGIN + i as f64 * (WIDTH - 2.0 * MARGIN) / (n - 1) as f64;
    let y = |v: f64| HEIGHT - MARGIN - (v - lo) / (hi - lo) * (HEIGHT - 2.0 * MARGIN);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{MARGIN}" y="20" font-family="sans-serif" font-size="14">{}</text>"#,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<line x1="{MARGIN}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{b}" stroke="black"/>"#,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN
    );
    for (v, anchor) in [(lo, HEIGHT - MARGIN), (hi, MARGIN)] {
        let _ = writeln!(
            svg,
            r#"<text x="4" y="{anchor}" font-family="sans-serif" font-size="10">{v:.1}</text>"#
        );
    }
    for axis in 0..3 {
        let points: Vec<String> = window
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| format!("{:.1},{:.1}", x(i), y(s[axis])))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            COLORS[axis],
            points.join(" ")
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" fill="{}">{}</text>"#,
            WIDTH - MARGIN + 6.0,
            MARGIN + 16.0 * axis as f64,
            COLORS[axis],
            AXES[axis]
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Write `<stem>.csv` and `<stem>.svg` under `dir`; returns both paths.
pub fn write_plot(dir: &Path, stem: &str, window: &SampleWindow, title: &str) -> io::Result<[String; 2]> {
    fs::create_dir_all(dir)?;
    let csv = dir.join(format!("{stem}.csv"));
    let svg = dir.join(format!("{stem}.svg"));
    fs::write(&csv, window_csv(window))?;
    fs::write(&svg, window_svg(window, title))?;
    Ok([csv.display().to_string(), svg.display().to_string()])
}
