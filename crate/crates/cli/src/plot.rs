//! SVG rendering of miss-rate (log-log) and precision/recall (linear) curves.

use std::fmt::Write;

use samhead_core::eval::{interpolated_ap, log_average_from_curve, ApInterpolation, CurveData};

const W: f64 = 520.0;
const H: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 16.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 52.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// FPPI axis spans 10^-4 .. 10^1, miss rate 10^-2 .. 1.
const FPPI_DECADES: (i32, i32) = (-4, 1);
const MISS_DECADES: (i32, i32) = (-2, 0);

type Ticks = Vec<(f64, String)>;

struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn frac(&self, v: f64) -> f64 {
        let (v, lo, hi) = if self.log { (v.max(10f64.powf(self.lo)).log10(), self.lo, self.hi) } else { (v, self.lo, self.hi) };
        ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
    }
}

fn px(a: &Axis, v: f64) -> f64 {
    LEFT + a.frac(v) * (W - LEFT - RIGHT)
}

fn py(a: &Axis, v: f64) -> f64 {
    H - BOTTOM - a.frac(v) * (H - TOP - BOTTOM)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Renders named curves of one kind into a standalone SVG document.
pub fn render(curves: &[(String, CurveData)], title: Option<&str>) -> Result<String, String> {
    let miss = !matches!(curves.first(), Some((_, CurveData::PrecisionRecall(_))));
    if curves.iter().any(|(_, c)| matches!(c, CurveData::MissRate(_)) != miss) {
        return Err("cannot mix miss-rate and precision/recall curves in one plot".into());
    }
    let (xa, ya) = if miss {
        (Axis { lo: FPPI_DECADES.0 as f64, hi: FPPI_DECADES.1 as f64, log: true }, Axis { lo: MISS_DECADES.0 as f64, hi: MISS_DECADES.1 as f64, log: true })
    } else {
        (Axis { lo: 0.0, hi: 1.0, log: false }, Axis { lo: 0.0, hi: 1.0, log: false })
    };
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    if let Some(t) = title {
        let _ = writeln!(s, r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, escape(t));
    }
    // frame
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
    let _ = writeln!(s, r#"<rect x="{x0}" y="{y0}" width="{:.1}" height="{:.1}" fill="none" stroke="black"/>"#, x1 - x0, y1 - y0);
    // ticks and grid
    let (xt, yt): (Ticks, Ticks) = if miss {
        (
            (FPPI_DECADES.0..=FPPI_DECADES.1).map(|e| (10f64.powi(e), format!("1e{e}"))).collect(),
            [0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.5, 0.8, 1.0].iter().map(|&v| (v, format!("{v}"))).collect(),
        )
    } else {
        let t: Vec<(f64, String)> = (0..=5).map(|k| (k as f64 / 5.0, format!("{:.1}", k as f64 / 5.0))).collect();
        (t.clone(), t)
    };
    for (v, label) in &xt {
        let x = px(&xa, *v);
        let _ = writeln!(s, r##"<line x1="{x:.2}" y1="{y0}" x2="{x:.2}" y2="{y1}" stroke="#dddddd"/>"##);
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.1}" text-anchor="middle">{label}</text>"#, y1 + 16.0);
    }
    for (v, label) in &yt {
        let y = py(&ya, *v);
        let _ = writeln!(s, r##"<line x1="{x0}" y1="{y:.2}" x2="{x1}" y2="{y:.2}" stroke="#dddddd"/>"##);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.2}" text-anchor="end">{label}</text>"#, x0 - 6.0, y + 4.0);
    }
    let (xl, yl) = if miss { ("false positives per image", "miss rate") } else { ("recall", "precision") };
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{xl}</text>"#, (x0 + x1) / 2.0, H - 12.0);
    let _ = writeln!(s, r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{yl}</text>"#, (y0 + y1) / 2.0, (y0 + y1) / 2.0);

    for (k, (name, curve)) in curves.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let (pts, label): (Vec<(f64, f64)>, String) = match curve {
            CurveData::MissRate(p) => {
                let mr = log_average_from_curve(p, -2.0, 0.0, 9).mr;
                (p.iter().map(|q| (q.fppi, q.miss_rate)).collect(), format!("{:.2}% {}", 100.0 * mr, name))
            }
            CurveData::PrecisionRecall(p) => {
                let ap = interpolated_ap(p, ApInterpolation::Eleven);
                (p.iter().map(|q| (q.recall, q.precision)).collect(), format!("{:.2}% {}", 100.0 * ap, name))
            }
        };
        if !pts.is_empty() {
            let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(&xa, x), py(&ya, y))).collect();
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
        }
        let ly = y0 + 14.0 + 14.0 * k as f64;
        let _ = writeln!(s, r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{color}" stroke-width="2"/>"#, x1 - 150.0, ly - 4.0, x1 - 134.0, ly - 4.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{ly:.1}">{}</text>"#, x1 - 130.0, escape(&label));
    }
    s.push_str("</svg>\n");
    Ok(s)
}
