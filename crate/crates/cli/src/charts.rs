//! Static SVG charts: a line chart for β sweeps and grouped bars for ablations.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use dda_core::eval::{MetricRow, SweepCurve};
use dda_core::{Error, Result};

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn range(values: impl Iterator<Item = f64>, include_zero: bool) -> Result<(f64, f64)> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values {
        if !v.is_finite() {
            return Err(Error::InvalidInput("chart values must be finite".into()));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if include_zero {
        lo = lo.min(0.0);
        hi = hi.max(0.0);
    }
    if hi - lo < 1e-12 {
        lo -= 0.5;
        hi += 0.5;
    }
    Ok((lo, hi))
}

fn open(s: &mut String, title: &str, x_label: &str, y_label: &str) {
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, esc(title));
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        LEFT + (W - LEFT - RIGHT) / 2.0,
        H - 12.0,
        esc(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
        TOP + (H - TOP - BOTTOM) / 2.0,
        esc(y_label)
    );
}

fn y_axis(s: &mut String, lo: f64, hi: f64, y: &dyn Fn(f64) -> f64) {
    let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}" stroke="black"/>"#, H - BOTTOM);
    let _ = writeln!(
        s,
        r#"<line x1="{LEFT}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#,
        H - BOTTOM,
        W - RIGHT
    );
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.2}</text>"#,
            LEFT - 6.0,
            y(v) + 4.0
        );
    }
}

/// AUC against β, one marker per grid point.
pub fn sweep_svg(curve: &SweepCurve) -> Result<String> {
    let n = curve.beta_grid.len();
    if n == 0 || curve.auc.len() != n {
        return Err(Error::InvalidInput("sweep chart needs one AUC per grid point".into()));
    }
    let (x_lo, x_hi) = range(curve.beta_grid.iter().copied(), false)?;
    let (y_lo, y_hi) = range(curve.auc.iter().copied().chain([0.0, 1.0]), false)?;
    let x = |v: f64| LEFT + (v - x_lo) / (x_hi - x_lo) * (W - LEFT - RIGHT);
    let y = |v: f64| H - BOTTOM - (v - y_lo) / (y_hi - y_lo) * (H - TOP - BOTTOM);
    let mut s = String::new();
    open(&mut s, "AUC across the debias weight", "beta", "AUC");
    y_axis(&mut s, y_lo, y_hi, &y);
    let pts: Vec<String> = curve
        .beta_grid
        .iter()
        .zip(&curve.auc)
        .map(|(&b, &a)| format!("{:.2},{:.2}", x(b), y(a)))
        .collect();
    let _ = writeln!(s, r#"<polyline fill="none" stroke="{}" stroke-width="2" points="{}"/>"#, COLORS[0], pts.join(" "));
    for (&b, &a) in curve.beta_grid.iter().zip(&curve.auc) {
        let _ = writeln!(
            s,
            r#"<circle class="point" cx="{:.2}" cy="{:.2}" r="3" fill="{}"><title>beta {b:.2}: {a:.4}</title></circle>"#,
            x(b),
            y(a),
            COLORS[0]
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle" font-size="10">{b:.1}</text>"#,
            x(b),
            H - BOTTOM + 16.0
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// AUC per hallucination type, one bar per method within each group.
pub fn ablation_svg(rows: &[MetricRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::InvalidInput("ablation chart needs at least one row".into()));
    }
    let mut methods: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<(&str, f64)>> = BTreeMap::new();
    for r in rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
        groups.entry(&r.halluc_type).or_default().push((&r.method, r.auc));
    }
    let (lo, hi) = range(rows.iter().map(|r| r.auc).chain([1.0]), true)?;
    let y = |v: f64| H - BOTTOM - (v - lo) / (hi - lo) * (H - TOP - BOTTOM);
    let mut s = String::new();
    open(&mut s, "Ablation AUC by hallucination type", "hallucination type", "AUC");
    y_axis(&mut s, lo, hi, &y);
    let group_w = (W - LEFT - RIGHT) / groups.len() as f64;
    let bar_w = group_w * 0.8 / methods.len() as f64;
    for (gi, (label, bars)) in groups.iter().enumerate() {
        let gx = LEFT + gi as f64 * group_w + group_w * 0.1;
        for &(m, v) in bars {
            let mi = methods.iter().position(|x| *x == m).unwrap();
            let (top, bottom) = (y(v.max(0.0)), y(v.min(0.0)));
            let _ = writeln!(
                s,
                r#"<rect class="bar" x="{:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="{}"><title>{}: {v:.4}</title></rect>"#,
                gx + mi as f64 * bar_w,
                bar_w * 0.9,
                bottom - top,
                COLORS[mi % COLORS.len()],
                esc(m)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
            gx + group_w * 0.4,
            H - BOTTOM + 16.0,
            esc(label)
        );
    }
    for (mi, m) in methods.iter().enumerate() {
        let lx = LEFT + 10.0 + mi as f64 * 130.0;
        let _ = writeln!(
            s,
            r#"<rect x="{lx}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            H - BOTTOM + 26.0,
            COLORS[mi % COLORS.len()],
            lx + 14.0,
            H - BOTTOM + 35.0,
            esc(m)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(t: &str, m: &str, auc: f64) -> MetricRow {
        MetricRow {
            model_config: "m".into(),
            halluc_type: t.into(),
            method: m.into(),
            r_at_500: 0.0,
            r_at_1000: 0.0,
            auc,
        }
    }

    #[test]
    fn sweep_chart_is_one_svg_with_a_marker_per_point() {
        let grid = dda_core::eval::beta_grid(0.0, 1.5, 0.1).unwrap();
        let curve = SweepCurve {
            auc: grid.iter().map(|b| 0.5 + b / 4.0).collect(),
            r_at_500: vec![0.0; grid.len()],
            r_at_1000: vec![0.0; grid.len()],
            beta_grid: grid,
        };
        let svg = sweep_svg(&curve).unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        assert_eq!(doc.root().children().filter(|n| n.is_element()).count(), 1);
        let points = doc
            .descendants()
            .filter(|n| n.has_tag_name("circle") && n.attribute("class") == Some("point"))
            .count();
        assert_eq!(points, 16);
    }

    #[test]
    fn ablation_chart_escapes_labels() {
        let rows = vec![row("A&B→C", "dda", 0.9), row("A&B→C", "dda-no-debias", -0.1)];
        let svg = ablation_svg(&rows).unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        assert_eq!(doc.descendants().filter(|n| n.attribute("class") == Some("bar")).count(), 2);
        assert!(doc.descendants().any(|n| n.text() == Some("A&B→C")));
    }

    #[test]
    fn empty_data_is_rejected() {
        assert!(matches!(ablation_svg(&[]), Err(Error::InvalidInput(_))));
        let empty = SweepCurve {
            beta_grid: vec![],
            auc: vec![],
            r_at_500: vec![],
            r_at_1000: vec![],
        };
        assert!(matches!(sweep_svg(&empty), Err(Error::InvalidInput(_))));
    }
}
