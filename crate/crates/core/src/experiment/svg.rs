use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 420.0;
const PAD: f64 = 50.0;

pub struct Series<'a> {
    pub label: &'a str,
    pub color: &'a str,
    pub dashed: bool,
    pub points: &'a [(f64, f64)],
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn bounds(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in vals.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

/// Line chart with a legend and axis ranges annotated.
pub fn line_chart(title: &str, x_label: &str, series: &[Series<'_>]) -> String {
    let (x0, x1) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#).unwrap();
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, escape(title)).unwrap();
    writeln!(
        s,
        r#"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    )
    .unwrap();
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#, W / 2.0, H - 12.0, escape(x_label)).unwrap();
    for (v, y) in [(y0, H - PAD), (y1, PAD)] {
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="end" font-size="10">{v:.3}</text>"#, PAD - 4.0, y + 4.0).unwrap();
    }
    for (v, x) in [(x0, PAD), (x1, W - PAD)] {
        writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle" font-size="10">{v:.3}</text>"#, H - PAD + 14.0).unwrap();
    }
    for (k, ser) in series.iter().enumerate() {
        let pts: Vec<String> = ser
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let dash = if ser.dashed { r#" stroke-dasharray="5,4""# } else { "" };
        writeln!(
            s,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5"{dash} points="{}"/>"#,
            ser.color,
            pts.join(" ")
        )
        .unwrap();
        let ly = PAD + 14.0 + 14.0 * k as f64;
        writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{}"{dash}/>"#, W - PAD - 140.0, W - PAD - 120.0, ser.color).unwrap();
        writeln!(s, r#"<text x="{}" y="{}" font-size="10">{}</text>"#, W - PAD - 115.0, ly + 3.0, escape(ser.label)).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Colored squares at scattered points in the unit square.
pub fn node_map(title: &str, points: &[(f64, f64, f64)], cells_per_side: usize) -> String {
    let (v0, v1) = bounds(points.iter().map(|p| p.2));
    let side = H - 2.0 * PAD;
    let cell = side / (cells_per_side.max(1) as f64 + 1.0);
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#).unwrap();
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, escape(title)).unwrap();
    for &(x, y, v) in points {
        let t = if v.is_finite() { (v - v0) / (v1 - v0) } else { 0.0 };
        let (r, g, b) = (255.0 * t, 64.0 + 96.0 * (1.0 - (2.0 * t - 1.0).abs()), 255.0 * (1.0 - t));
        writeln!(
            s,
            r#"<rect x="{:.2}" y="{:.2}" width="{cell:.2}" height="{cell:.2}" fill="rgb({:.0},{:.0},{:.0})"/>"#,
            PAD + x * (side - cell),
            PAD + (1.0 - y) * (side - cell),
            r,
            g,
            b
        )
        .unwrap();
    }
    writeln!(s, r#"<text x="{}" y="{}" font-size="11">min {v0:.4e}</text>"#, PAD + side + 20.0, PAD + 20.0).unwrap();
    writeln!(s, r#"<text x="{}" y="{}" font-size="11">max {v1:.4e}</text>"#, PAD + side + 20.0, PAD + 40.0).unwrap();
    s.push_str("</svg>\n");
    s
}
