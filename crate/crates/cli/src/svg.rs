//! Training curves as a standalone SVG: loss on the left panel, mAP@0.5 and
//! firing rate on the right.

use std::fmt::Write;

use ems_core::train::EpochMetrics;

const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 220.0;
const MARGIN: f64 = 40.0;

fn polyline(out: &mut String, xs: &[f64], ys: &[f64], x0: f64, y_max: f64, color: &str) {
    let n = xs.len().max(2) as f64 - 1.0;
    let pts: Vec<String> = xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| {
            let px = x0 + MARGIN + (x - 1.0) / n * (PANEL_W - 2.0 * MARGIN);
            let py = PANEL_H - MARGIN - (y / y_max).clamp(0.0, 1.0) * (PANEL_H - 2.0 * MARGIN);
            format!("{px:.1},{py:.1}")
        })
        .collect();
    let _ = writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" "));
}

fn frame(out: &mut String, x0: f64, title: &str, y_max: f64) {
    let (l, r, t, b) = (x0 + MARGIN, x0 + PANEL_W - MARGIN, MARGIN, PANEL_H - MARGIN);
    let _ = writeln!(out, r#"<rect x="{l}" y="{t}" width="{}" height="{}" fill="none" stroke="gray"/>"#, r - l, b - t);
    let _ = writeln!(out, r#"<text x="{l}" y="{}" font-size="13">{title}</text>"#, t - 8.0);
    let _ = writeln!(out, r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{y_max:.3}</text>"#, l - 4.0, t + 4.0);
    let _ = writeln!(out, r#"<text x="{}" y="{b}" font-size="10" text-anchor="end">0</text>"#, l - 4.0);
    let _ = writeln!(out, r#"<text x="{}" y="{}" font-size="10" text-anchor="middle">epoch</text>"#, (l + r) / 2.0, b + 16.0);
}

pub fn curves(rows: &[EpochMetrics]) -> String {
    let xs: Vec<f64> = rows.iter().map(|r| r.epoch as f64).collect();
    let loss: Vec<f64> = rows.iter().map(|r| r.loss).collect();
    let map: Vec<f64> = rows.iter().map(|r| r.map50).collect();
    let fr: Vec<f64> = rows.iter().map(|r| r.firing_rate).collect();
    let loss_max = loss.iter().copied().fold(f64::MIN_POSITIVE, f64::max);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{PANEL_H}" font-family="sans-serif">"#,
        2.0 * PANEL_W
    );
    frame(&mut out, 0.0, "training loss", loss_max);
    polyline(&mut out, &xs, &loss, 0.0, loss_max, "firebrick");
    frame(&mut out, PANEL_W, "mAP@0.5 (blue), firing rate (green)", 1.0);
    polyline(&mut out, &xs, &map, PANEL_W, 1.0, "steelblue");
    polyline(&mut out, &xs, &fr, PANEL_W, 1.0, "seagreen");
    out.push_str("</svg>\n");
    out
}
