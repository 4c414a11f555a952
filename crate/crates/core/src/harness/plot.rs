//! SVG rendering of the privacy-utility curve stored in `tradeoff.csv`.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub alpha: f64,
    pub x: f64,
    pub x_se: f64,
    pub y: f64,
    pub y_se: f64,
}

/// Reads `<x_column>_mean/_se` and `utility_mean/_se` per alpha.
pub fn read_curve(path: &Path, x_column: &str) -> Result<Vec<CurvePoint>> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("tradeoff file lacks column `{name}`")))
    };
    let cols = [
        col("alpha")?,
        col(&format!("{x_column}_mean"))?,
        col(&format!("{x_column}_se"))?,
        col("utility_mean")?,
        col("utility_se")?,
    ];
    let mut points = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let v = cols
            .iter()
            .map(|&i| {
                rec[i]
                    .parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad number `{}`", &rec[i])))
            })
            .collect::<Result<Vec<_>>>()?;
        points.push(CurvePoint {
            alpha: v[0],
            x: v[1],
            x_se: v[2],
            y: v[3],
            y_se: v[4],
        });
    }
    if points.is_empty() {
        return Err(Error::data("tradeoff file has no rows"));
    }
    Ok(points)
}

fn span(lo: f64, hi: f64) -> (f64, f64) {
    let pad = ((hi - lo) * 0.1).max(1e-3);
    (lo - pad, hi + pad)
}

/// Utility against `x_label`, one marker per alpha with standard-error bars.
pub fn render_svg(points: &[CurvePoint], x_label: &str) -> String {
    const W: f64 = 640.0;
    const H: f64 = 440.0;
    const L: f64 = 70.0;
    const R: f64 = 20.0;
    const T: f64 = 30.0;
    const B: f64 = 60.0;

    let (x0, x1) = span(
        points.iter().map(|p| p.x - p.x_se).fold(f64::INFINITY, f64::min),
        points.iter().map(|p| p.x + p.x_se).fold(f64::NEG_INFINITY, f64::max),
    );
    let (y0, y1) = span(
        points.iter().map(|p| p.y - p.y_se).fold(f64::INFINITY, f64::min),
        points.iter().map(|p| p.y + p.y_se).fold(f64::NEG_INFINITY, f64::max),
    );
    let px = |x: f64| L + (x - x0) / (x1 - x0) * (W - L - R);
    let py = |y: f64| H - B - (y - y0) / (y1 - y0) * (H - T - B);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{L} {T} V{} H{}" fill="none" stroke="black"/>"#,
        H - B,
        W - R
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{xv:.3}</text>"#,
            px(xv),
            H - B + 18.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{yv:.3}</text>"#,
            L - 6.0,
            py(yv) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#,
        (L + W - R) / 2.0,
        H - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">held-out utility</text>"#,
        (T + H - B) / 2.0,
        (T + H - B) / 2.0
    );

    let path: Vec<String> = points
        .iter()
        .map(|p| format!("{:.2},{:.2}", px(p.x), py(p.y)))
        .collect();
    let _ = writeln!(
        s,
        r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="1.5"/>"##,
        path.join(" ")
    );
    for p in points {
        let (cx, cy) = (px(p.x), py(p.y));
        let _ = writeln!(
            s,
            r##"<path d="M{:.2} {cy:.2} H{:.2} M{cx:.2} {:.2} V{:.2}" stroke="#555"/>"##,
            px(p.x - p.x_se),
            px(p.x + p.x_se),
            py(p.y - p.y_se),
            py(p.y + p.y_se)
        );
        let _ = writeln!(s, r##"<circle cx="{cx:.2}" cy="{cy:.2}" r="4" fill="#1f77b4"/>"##);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}">α={}</text>"#,
            cx + 6.0,
            cy - 6.0,
            p.alpha
        );
    }
    s.push_str("</svg>\n");
    s
}
