//! Minimal self-contained SVG figures.

use std::fmt::Write;

pub const COLORS: [&str; 3] = ["#1f77b4", "#d62728", "#2ca02c"];

const PANEL_W: f64 = 320.0;
const PANEL_H: f64 = 220.0;
const MARGIN: f64 = 30.0;

fn bounds<'a>(values: impl Iterator<Item = &'a f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (-1.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 1.0, hi + 1.0)
    } else {
        (lo, hi)
    }
}

fn header(out: &mut String, w: f64, h: f64, comments: &[String]) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    for c in comments {
        let _ = writeln!(out, "<!-- {} -->", c.replace("--", "- -"));
    }
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
}

/// One panel per group, each overlaying its series with translucent lines.
/// All panels share the y range.
pub fn overlay(groups: &[(&str, Vec<Vec<f64>>)], comments: &[String]) -> String {
    let (lo, hi) = bounds(groups.iter().flat_map(|g| g.1.iter().flatten()));
    let w = PANEL_W * groups.len() as f64;
    let mut out = String::new();
    header(&mut out, w, PANEL_H, comments);
    for (p, (title, series)) in groups.iter().enumerate() {
        let x0 = PANEL_W * p as f64 + MARGIN;
        let (pw, ph) = (PANEL_W - 2.0 * MARGIN, PANEL_H - 2.0 * MARGIN);
        let _ = writeln!(
            out,
            r#"<rect x="{x0}" y="{MARGIN}" width="{pw}" height="{ph}" fill="none" stroke="black" stroke-width="0.5"/>"#
        );
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{title} (n={})</text>"#, x0 + pw / 2.0, MARGIN - 8.0, series.len());
        let color = COLORS[p % COLORS.len()];
        for s in series {
            let len = s.len().max(2) - 1;
            let pts: Vec<String> = s
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let x = x0 + pw * i as f64 / len as f64;
                    let y = MARGIN + ph * (1.0 - (v - lo) / (hi - lo));
                    format!("{x:.2},{y:.2}")
                })
                .collect();
            let _ = writeln!(
                out,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-opacity="0.15" stroke-width="0.8"/>"#,
                pts.join(" ")
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Scatter of labelled point groups on shared axes, with a legend.
pub fn scatter(groups: &[(&str, Vec<(f64, f64)>)], comments: &[String]) -> String {
    let (xlo, xhi) = bounds(groups.iter().flat_map(|g| g.1.iter().map(|p| &p.0)));
    let (ylo, yhi) = bounds(groups.iter().flat_map(|g| g.1.iter().map(|p| &p.1)));
    let (w, h) = (480.0, 400.0);
    let (pw, ph) = (w - 2.0 * MARGIN - 100.0, h - 2.0 * MARGIN);
    let mut out = String::new();
    header(&mut out, w, h, comments);
    let _ = writeln!(
        out,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{pw}" height="{ph}" fill="none" stroke="black" stroke-width="0.5"/>"#
    );
    for (g, (name, pts)) in groups.iter().enumerate() {
        let color = COLORS[g % COLORS.len()];
        for (x, y) in pts {
            let cx = MARGIN + pw * (x - xlo) / (xhi - xlo);
            let cy = MARGIN + ph * (1.0 - (y - ylo) / (yhi - ylo));
            let _ = writeln!(out, r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="2" fill="{color}" fill-opacity="0.5"/>"#);
        }
        let ly = MARGIN + 16.0 * g as f64 + 8.0;
        let lx = MARGIN + pw + 12.0;
        let _ = writeln!(out, r#"<circle cx="{lx}" cy="{ly}" r="4" fill="{color}"/>"#);
        let _ = writeln!(out, r#"<text x="{}" y="{}">{name}</text>"#, lx + 8.0, ly + 4.0);
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">PC1</text>"#, MARGIN + pw / 2.0, h - 8.0);
    let _ = writeln!(
        out,
        r#"<text x="12" y="{}" text-anchor="middle" transform="rotate(-90 12 {})">PC2</text>"#,
        MARGIN + ph / 2.0,
        MARGIN + ph / 2.0
    );
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlay_has_one_polyline_per_series() {
        let svg = overlay(&[("X", vec![vec![0.0, 1.0], vec![1.0, 0.0]]), ("Y", vec![vec![2.0, 2.0]])], &["h=1".into()]);
        assert_eq!(svg.matches("<polyline").count(), 3);
        assert!(svg.contains("<!-- h=1 -->"));
        assert!(svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn scatter_handles_degenerate_ranges() {
        let svg = scatter(&[("U", vec![(1.0, 1.0), (1.0, 1.0)])], &[]);
        assert_eq!(svg.matches("<circle").count(), 3);
        assert!(!svg.contains("NaN"));
    }
}
