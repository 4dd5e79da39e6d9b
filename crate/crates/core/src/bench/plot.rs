//! Minimal SVG charts for experiment summaries.

use std::fmt::Write;

use super::experiment::SummaryRow;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;

fn header(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, escape(title));
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Vertical accuracy range with a little padding, clamped to [0, 1].
fn y_range(rows: &[SummaryRow]) -> (f64, f64) {
    let lo = rows.iter().map(|r| r.mean_accuracy - r.std_accuracy).fold(1.0, f64::min);
    let hi = rows.iter().map(|r| r.mean_accuracy + r.std_accuracy).fold(0.0, f64::max);
    let lo = ((lo - 0.05) * 10.0).floor() / 10.0;
    let hi = ((hi + 0.05) * 10.0).ceil() / 10.0;
    (lo.max(0.0), hi.min(1.0).max(lo.max(0.0) + 0.1))
}

fn y_axis(s: &mut String, lo: f64, hi: f64, label: &str) -> impl Fn(f64) -> f64 {
    let plot_h = H - TOP - BOTTOM;
    let to_y = move |v: f64| TOP + plot_h * (1.0 - (v - lo) / (hi - lo));
    let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}" stroke="black"/>"#, H - BOTTOM);
    let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, H - BOTTOM, W - RIGHT, H - BOTTOM);
    let ticks = 5;
    for i in 0..=ticks {
        let v = lo + (hi - lo) * i as f64 / ticks as f64;
        let y = to_y(v);
        let _ = writeln!(s, r##"<line x1="{}" y1="{y:.1}" x2="{}" y2="{y:.1}" stroke="#ddd"/>"##, LEFT, W - RIGHT);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.2}</text>"#, LEFT - 6.0, y + 4.0);
    }
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.1}" transform="rotate(-90 18 {:.1})" text-anchor="middle">{label}</text>"#,
        H / 2.0,
        H / 2.0
    );
    to_y
}

/// Bars of mean accuracy with ±1 std whiskers, one per row.
pub fn bar_chart(rows: &[SummaryRow], title: &str) -> String {
    let mut s = header(title);
    if rows.is_empty() {
        s.push_str("</svg>\n");
        return s;
    }
    let (lo, hi) = y_range(rows);
    let to_y = y_axis(&mut s, lo, hi, "test accuracy");
    let slot = (W - LEFT - RIGHT) / rows.len() as f64;
    for (i, r) in rows.iter().enumerate() {
        let cx = LEFT + slot * (i as f64 + 0.5);
        let bw = slot * 0.6;
        let y = to_y(r.mean_accuracy);
        let _ = writeln!(
            s,
            r##"<rect x="{:.1}" y="{y:.1}" width="{bw:.1}" height="{:.1}" fill="#4878a8"/>"##,
            cx - bw / 2.0,
            (H - BOTTOM - y).max(0.0)
        );
        whisker(&mut s, cx, to_y(r.mean_accuracy - r.std_accuracy), to_y(r.mean_accuracy + r.std_accuracy));
        let _ = writeln!(s, r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, H - BOTTOM + 18.0, escape(&r.name));
        let _ = writeln!(s, r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{:.3}</text>"#, y - 6.0, r.mean_accuracy);
    }
    s.push_str("</svg>\n");
    s
}

fn whisker(s: &mut String, x: f64, y0: f64, y1: f64) {
    let _ = writeln!(s, r#"<line x1="{x:.1}" y1="{y0:.1}" x2="{x:.1}" y2="{y1:.1}" stroke="black"/>"#);
    for y in [y0, y1] {
        let _ = writeln!(s, r#"<line x1="{:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="black"/>"#, x - 5.0, x + 5.0);
    }
}

/// Mean accuracy against alpha, with ±1 std whiskers.
pub fn alpha_curve(rows: &[SummaryRow], title: &str) -> String {
    let mut s = header(title);
    if rows.is_empty() {
        s.push_str("</svg>\n");
        return s;
    }
    let (lo, hi) = y_range(rows);
    let to_y = y_axis(&mut s, lo, hi, "test accuracy");
    let to_x = |a: f64| LEFT + 20.0 + (W - LEFT - RIGHT - 40.0) * a;
    let mut sorted: Vec<&SummaryRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.alpha.total_cmp(&b.alpha));
    let points: Vec<String> =
        sorted.iter().map(|r| format!("{:.1},{:.1}", to_x(r.alpha), to_y(r.mean_accuracy))).collect();
    let _ = writeln!(s, r##"<polyline points="{}" fill="none" stroke="#c44e52" stroke-width="2"/>"##, points.join(" "));
    for r in sorted {
        let (x, y) = (to_x(r.alpha), to_y(r.mean_accuracy));
        whisker(&mut s, x, to_y(r.mean_accuracy - r.std_accuracy), to_y(r.mean_accuracy + r.std_accuracy));
        let _ = writeln!(s, r##"<circle cx="{x:.1}" cy="{y:.1}" r="4" fill="#c44e52"/>"##);
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, H - BOTTOM + 18.0, r.alpha);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">alpha</text>"#, W / 2.0, H - 15.0);
    s.push_str("</svg>\n");
    s
}
