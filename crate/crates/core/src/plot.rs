//! Phase-plane plots as standalone SVG.

use std::fmt::Write;

use crate::ocp::OcpSpec;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 560.0;
const MARGIN: f64 = 60.0;
const PALETTE: [&str; 6] = ["#222222", "#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e"];

pub struct Series<'a> {
    pub label: &'a str,
    pub trajectories: Vec<&'a [Vec<f64>]>,
}

/// Trajectories in the `(x1, x2)` plane with the state box and setpoint.
/// `note` is embedded as an XML comment.
pub fn phase_svg(spec: &OcpSpec, series: &[Series], note: &str) -> String {
    let pad_x = 0.05 * (spec.x_hi[0] - spec.x_lo[0]);
    let pad_y = 0.05 * (spec.x_hi[1] - spec.x_lo[1]);
    let (x0, x1) = (spec.x_lo[0] - pad_x, spec.x_hi[0] + pad_x);
    let (y0, y1) = (spec.x_lo[1] - pad_y, spec.x_hi[1] + pad_y);
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let py = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, "<!-- {} -->", note.replace("--", "- -"));
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (bx, by) = (px(spec.x_lo[0]), py(spec.x_hi[1]));
    let _ = writeln!(
        s,
        r##"<rect x="{bx:.2}" y="{by:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#888888" stroke-dasharray="6 4"/>"##,
        px(spec.x_hi[0]) - bx,
        py(spec.x_lo[1]) - by
    );
    for (k, ser) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        for traj in &ser.trajectories {
            let pts: Vec<String> = traj.iter().map(|x| format!("{:.2},{:.2}", px(x[0]), py(x[1]))).collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.2" stroke-opacity="0.8"/>"#,
                pts.join(" ")
            );
        }
        let ly = MARGIN + 18.0 * k as f64;
        let lx = WIDTH - MARGIN - 110.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(ser.label)
        );
    }
    let _ = writeln!(
        s,
        r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="black"/>"#,
        px(spec.x_sp[0]),
        py(spec.x_sp[1])
    );
    // axes
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="14" text-anchor="middle">x1</text>"#,
        WIDTH / 2.0,
        HEIGHT - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text x="15" y="{:.2}" font-family="sans-serif" font-size="14" text-anchor="middle" transform="rotate(-90 15 {:.2})">x2</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );
    for v in [spec.x_lo[0], spec.x_hi[0]] {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="middle">{v}</text>"#,
            px(v),
            HEIGHT - MARGIN + 16.0
        );
    }
    for v in [spec.x_lo[1], spec.x_hi[1]] {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="end">{v}</text>"#,
            MARGIN - 6.0,
            py(v) + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
