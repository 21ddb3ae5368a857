//! Minimal SVG charts for evaluation reports: precision-recall curves and
//! grouped bar charts. Output is plain text with fixed number formatting, so
//! identical reports give byte-identical files.

use std::fmt::Write;

use crate::eval::{ClassReport, EvalReport};

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 360.0;
const LEFT: f64 = 56.0;
const RIGHT: f64 = 16.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 48.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Thresholds drawn on precision-recall plots.
pub const PR_THRESHOLDS: [f64; 3] = [0.25, 0.5, 0.75];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Frame {
    out: String,
}

impl Frame {
    fn new(title: &str, x_label: &str, y_label: &str) -> Self {
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
            WIDTH / 2.0,
            escape(title)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            LEFT + plot_w() / 2.0,
            HEIGHT - 10.0,
            escape(x_label)
        );
        let _ = writeln!(
            out,
            r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{}</text>"#,
            TOP + plot_h() / 2.0,
            TOP + plot_h() / 2.0,
            escape(y_label)
        );
        // Unit y axis with gridlines every 0.2.
        for k in 0..=5 {
            let v = k as f64 / 5.0;
            let y = y_px(v);
            let _ = writeln!(
                out,
                r##"<line x1="{LEFT:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#dddddd"/>"##,
                LEFT + plot_w()
            );
            let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"#, LEFT - 6.0, y + 4.0);
        }
        let _ = writeln!(
            out,
            r#"<rect x="{LEFT:.1}" y="{TOP:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="black"/>"#,
            plot_w(),
            plot_h()
        );
        Frame { out }
    }

    fn legend(&mut self, entries: &[(String, &str)]) {
        for (i, (label, color)) in entries.iter().enumerate() {
            let y = TOP + 14.0 + 16.0 * i as f64;
            let x = LEFT + plot_w() - 120.0;
            let _ = writeln!(self.out, r#"<rect x="{x:.1}" y="{:.1}" width="10" height="10" fill="{color}"/>"#, y - 9.0);
            let _ = writeln!(self.out, r#"<text x="{:.1}" y="{y:.1}">{}</text>"#, x + 14.0, escape(label));
        }
    }

    fn finish(mut self) -> String {
        self.out.push_str("</svg>\n");
        self.out
    }
}

fn plot_w() -> f64 {
    WIDTH - LEFT - RIGHT
}

fn plot_h() -> f64 {
    HEIGHT - TOP - BOTTOM
}

fn x_px(v: f64) -> f64 {
    LEFT + v.clamp(0.0, 1.0) * plot_w()
}

fn y_px(v: f64) -> f64 {
    TOP + (1.0 - v.clamp(0.0, 1.0)) * plot_h()
}

/// Precision-recall curves of one class at [`PR_THRESHOLDS`], drawn as the
/// precision envelope the AP integrates.
pub fn pr_curve_svg(class: &ClassReport, report: &EvalReport) -> String {
    let mut f = Frame::new(&format!("{} precision-recall ({})", class.name, report.dataset), "recall", "precision");
    for k in 0..=5 {
        let v = k as f64 / 5.0;
        let _ = writeln!(f.out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{v:.1}</text>"#, x_px(v), TOP + plot_h() + 16.0);
    }
    let mut legend = Vec::new();
    for (i, &t) in PR_THRESHOLDS.iter().enumerate() {
        let Some(curve) = class.pr_curves.iter().find(|c| (c.threshold - t).abs() < 1e-12) else { continue };
        let color = PALETTE[i % PALETTE.len()];
        let ap = report.ap(&class.name, t).unwrap_or(0.0);
        legend.push((format!("IoU {t:.2}  AP {ap:.3}"), color));
        // Envelope: running max of precision from the right, drawn as steps.
        let mut env: Vec<[f64; 2]> = curve.points.clone();
        for j in (0..env.len().saturating_sub(1)).rev() {
            env[j][1] = env[j][1].max(env[j + 1][1]);
        }
        let mut path = String::new();
        let mut prev_r = 0.0;
        for (j, p) in env.iter().enumerate() {
            let cmd = if j == 0 { 'M' } else { 'L' };
            let _ = write!(path, "{cmd}{:.2},{:.2} L{:.2},{:.2} ", x_px(prev_r), y_px(p[1]), x_px(p[0]), y_px(p[1]));
            prev_r = p[0];
        }
        if !path.is_empty() {
            let _ = writeln!(f.out, r#"<path d="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, path.trim_end());
        }
    }
    f.legend(&legend);
    f.finish()
}

/// One group of bars per category, one bar per series. Values are in [0, 1].
pub fn bar_chart_svg(title: &str, y_label: &str, categories: &[String], series: &[(String, Vec<f64>)]) -> String {
    let mut f = Frame::new(title, "", y_label);
    let groups = categories.len().max(1) as f64;
    let group_w = plot_w() / groups;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;
    for (g, name) in categories.iter().enumerate() {
        let gx = LEFT + group_w * g as f64;
        let _ = writeln!(
            f.out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            gx + group_w / 2.0,
            TOP + plot_h() + 16.0,
            escape(name)
        );
        for (s, (_, values)) in series.iter().enumerate() {
            let v = values.get(g).copied().unwrap_or(0.0);
            let x = gx + group_w * 0.1 + bar_w * s as f64;
            let y = y_px(v);
            let _ = writeln!(
                f.out,
                r#"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{}"><title>{v:.4}</title></rect>"#,
                bar_w,
                TOP + plot_h() - y,
                PALETTE[s % PALETTE.len()]
            );
        }
    }
    let legend: Vec<(String, &str)> =
        series.iter().enumerate().map(|(s, (label, _))| (label.clone(), PALETTE[s % PALETTE.len()])).collect();
    f.legend(&legend);
    f.finish()
}

/// Per-class AP at IoU 0.25 and 0.5 for one report.
pub fn class_ap_svg(report: &EvalReport) -> String {
    let categories: Vec<String> = report.classes.iter().map(|c| c.name.clone()).collect();
    let series: Vec<(String, Vec<f64>)> = [0.25f64, 0.5]
        .iter()
        .map(|&t| {
            let label = format!("AP{}", (t * 100.0).round() as u32);
            (label, report.classes.iter().map(|c| report.ap(&c.name, t).unwrap_or(0.0)).collect())
        })
        .collect();
    bar_chart_svg(&format!("per-class AP ({})", report.dataset), "AP", &categories, &series)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::evaluate;
    use crate::geometry::BBox;
    use crate::synthdata::{LabeledBox, NDBE, POLYP};

    fn report() -> EvalReport {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let gt = vec![vec![LabeledBox { bbox: b, class: POLYP }]];
        let preds = vec![vec![crate::eval::Prediction { bbox: b, class: POLYP, score: 0.9 }]];
        let classes = vec![("ndbe".to_string(), NDBE), ("polyp".to_string(), POLYP)];
        evaluate("toy <set>", &preds, &gt, &classes).unwrap()
    }

    #[test]
    fn svgs_are_well_formed_and_escaped() {
        let r = report();
        for svg in [pr_curve_svg(&r.classes[1], &r), class_ap_svg(&r)] {
            assert!(svg.starts_with("<svg"));
            assert!(svg.ends_with("</svg>\n"));
            assert!(svg.contains("toy &lt;set&gt;"));
            assert!(!svg.contains("NaN"));
        }
    }

    #[test]
    fn bar_heights_follow_values() {
        let svg = bar_chart_svg("t", "v", &["a".into()], &[("s".into(), vec![0.5])]);
        let expected = format!(r#"height="{:.2}""#, plot_h() * 0.5);
        assert!(svg.contains(&expected), "{svg}");
    }

    #[test]
    fn output_is_deterministic() {
        let r = report();
        assert_eq!(pr_curve_svg(&r.classes[1], &r), pr_curve_svg(&r.classes[1], &r));
    }
}
