use std::fmt::Write;

const W: f64 = 480.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;

fn extent(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| {
        (l.min(v), h.max(v))
    });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let margin = ((hi - lo) * 0.1).max(0.005);
    (lo - margin, hi + margin)
}

/// ID accuracy (x) against OOD accuracy (y), one labelled circle per
/// `(alpha, id, ood)` point, joined in input order.
pub fn scatter_svg(points: &[(f64, f64, f64)]) -> String {
    let (x0, x1) = extent(points.iter().map(|p| p.1));
    let (y0, y1) = extent(points.iter().map(|p| p.2));
    let sx = |v: f64| PAD + (v - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |v: f64| H - PAD - (v - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{PAD} {PAD} V{} H{}" fill="none" stroke="black"/>"#,
        H - PAD,
        W - PAD
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">ID accuracy ({x0:.3} to {x1:.3})</text>"#,
        W / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {})">OOD accuracy ({y0:.3} to {y1:.3})</text>"#,
        H / 2.0,
        H / 2.0
    );
    if points.len() > 1 {
        let path: Vec<String> = points
            .iter()
            .map(|p| format!("{:.2},{:.2}", sx(p.1), sy(p.2)))
            .collect();
        let _ = writeln!(
            s,
            r##"<polyline points="{}" fill="none" stroke="#999"/>"##,
            path.join(" ")
        );
    }
    for &(alpha, id, ood) in points {
        let _ = writeln!(
            s,
            r##"<circle cx="{:.2}" cy="{:.2}" r="4" fill="#1f5fa8"><title>alpha={alpha} id={id:.4} ood={ood:.4}</title></circle>"##,
            sx(id),
            sy(ood)
        );
    }
    s.push_str("</svg>\n");
    s
}
