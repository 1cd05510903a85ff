//! Minimal SVG box plots.

use std::fmt::Write as _;

/// Five-number summary with Tukey whiskers (1.5 IQR, clipped to the data).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxStats {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub low: f64,
    pub high: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (i, f) = (pos.floor() as usize, pos.fract());
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - f) + sorted[i + 1] * f
    } else {
        sorted[i]
    }
}

impl BoxStats {
    pub fn of(values: &[f64]) -> Option<BoxStats> {
        if values.is_empty() {
            return None;
        }
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        let (q1, median, q3) = (quantile(&s, 0.25), quantile(&s, 0.5), quantile(&s, 0.75));
        let iqr = q3 - q1;
        let low = s.iter().copied().find(|&v| v >= q1 - 1.5 * iqr).unwrap_or(s[0]);
        let high = s.iter().rev().copied().find(|&v| v <= q3 + 1.5 * iqr).unwrap_or(s[s.len() - 1]);
        Some(BoxStats { q1, median, q3, low, high })
    }
}

/// A labelled group of values drawn as one box.
pub struct BoxGroup<'a> {
    pub label: String,
    pub values: &'a [f64],
}

/// Box plot on a fixed [0, 1] axis, one box per group; outliers drawn as dots.
pub fn box_plot_svg(title: &str, groups: &[BoxGroup<'_>]) -> String {
    let (w, h, left, top, bottom) = (120.0 + 90.0 * groups.len() as f64, 360.0, 60.0, 40.0, 60.0);
    let plot_h = h - top - bottom;
    let y = |v: f64| top + (1.0 - v.clamp(0.0, 1.0)) * plot_h;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title));
    for tick in 0..=5 {
        let v = tick as f64 / 5.0;
        let (x2, yv, xl, yl) = (w - 20.0, y(v), left - 6.0, y(v) + 4.0);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" x2="{x2}" y1="{yv:.1}" y2="{yv:.1}" stroke="#ddd"/><text x="{xl}" y="{yl:.1}" text-anchor="end">{v:.1}</text>"##
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" transform="rotate(-90 16 {:.1})" text-anchor="middle">Dice</text>"#,
        top + plot_h / 2.0,
        top + plot_h / 2.0
    );
    for (i, g) in groups.iter().enumerate() {
        let cx = left + 50.0 + 90.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{cx}" y="{:.1}" text-anchor="middle">{}</text>"#,
            h - bottom + 18.0,
            escape(&g.label)
        );
        let _ = writeln!(
            s,
            r##"<text x="{cx}" y="{:.1}" text-anchor="middle" fill="#666">n={}</text>"##,
            h - bottom + 34.0,
            g.values.len()
        );
        let Some(b) = BoxStats::of(g.values) else { continue };
        let _ = writeln!(
            s,
            r#"<line x1="{cx}" x2="{cx}" y1="{:.1}" y2="{:.1}" stroke="black"/>"#,
            y(b.high),
            y(b.low)
        );
        let _ = writeln!(
            s,
            r##"<rect x="{}" y="{:.1}" width="40" height="{:.1}" fill="#9ecae1" stroke="black"/>"##,
            cx - 20.0,
            y(b.q3),
            (y(b.q1) - y(b.q3)).max(0.5)
        );
        let _ = writeln!(
            s,
            r#"<line x1="{}" x2="{}" y1="{:.1}" y2="{:.1}" stroke="black" stroke-width="2"/>"#,
            cx - 20.0,
            cx + 20.0,
            y(b.median),
            y(b.median)
        );
        for &v in g.values.iter().filter(|&&v| v < b.low || v > b.high) {
            let _ = writeln!(s, r#"<circle cx="{cx}" cy="{:.1}" r="2.5"/>"#, y(v));
        }
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quartiles() {
        let b = BoxStats::of(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!((b.q1, b.median, b.q3), (2.0, 3.0, 4.0));
        let out = BoxStats::of(&[0.5, 0.5, 0.5, 0.5, 0.0]).unwrap();
        assert_eq!(out.low, 0.5);
        assert!(BoxStats::of(&[]).is_none());
    }

    #[test]
    fn svg_is_well_formed_enough() {
        let v = [0.8, 0.9, 0.85];
        let svg = box_plot_svg("a < b", &[BoxGroup { label: "with".into(), values: &v }]);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("a &lt; b"));
    }
}
