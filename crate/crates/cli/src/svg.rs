//! Minimal SVG plots of a decoded motion: the root path seen from above and
//! the height of every joint over time.

use std::fmt::Write;

use latmo::motion::{RawMotion, Skeleton};

const PANEL: f64 = 320.0;
const PAD: f64 = 24.0;
const COLORS: [&str; 8] = [
    "#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666",
];

fn bounds(points: impl Iterator<Item = (f64, f64)>) -> (f64, f64, f64, f64) {
    let mut b = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (x, y) in points {
        b = (b.0.min(x), b.1.min(y), b.2.max(x), b.3.max(y));
    }
    if !b.0.is_finite() {
        return (0.0, 0.0, 1.0, 1.0);
    }
    let span = |lo: f64, hi: f64| if hi - lo < 1e-9 { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
    let (x0, x1) = span(b.0, b.2);
    let (y0, y1) = span(b.1, b.3);
    (x0, y0, x1, y1)
}

fn polyline(out: &mut String, pts: &[(f64, f64)], b: (f64, f64, f64, f64), x_off: f64, color: &str) {
    let sx = (PANEL - 2.0 * PAD) / (b.2 - b.0);
    let sy = (PANEL - 2.0 * PAD) / (b.3 - b.1);
    let coords: Vec<String> = pts
        .iter()
        .map(|(x, y)| format!("{:.2},{:.2}", x_off + PAD + (x - b.0) * sx, PANEL - PAD - (y - b.1) * sy))
        .collect();
    let _ = writeln!(
        out,
        r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
        coords.join(" ")
    );
}

pub fn render(motion: &RawMotion, skeleton: &Skeleton, title: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="11">"#,
        2.0 * PANEL,
        PANEL + 20.0
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let esc = title.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
    let _ = writeln!(out, r#"<text x="{PAD}" y="14">{esc}</text>"#);
    let _ = writeln!(out, r#"<g transform="translate(0,20)">"#);

    let path: Vec<(f64, f64)> = motion.root_position.iter().map(|p| (p[0], p[2])).collect();
    polyline(&mut out, &path, bounds(path.iter().copied()), 0.0, "#222222");
    let _ = writeln!(out, r#"<text x="{PAD}" y="{}">root path (x, z)</text>"#, PANEL - 4.0);

    let frames = motion.frames();
    let heights: Vec<Vec<(f64, f64)>> = (0..skeleton.joint_count())
        .map(|j| {
            (0..frames)
                .map(|t| (t as f64 / motion.fps, motion.global_pose(t)[j][1]))
                .collect()
        })
        .collect();
    let b = bounds(heights.iter().flatten().copied());
    for (j, h) in heights.iter().enumerate() {
        polyline(&mut out, h, b, PANEL, COLORS[j % COLORS.len()]);
    }
    let names: Vec<String> = (0..skeleton.joint_count()).map(|j| skeleton.name(j).to_string()).collect();
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}">joint heights over time: {}</text>"#,
        PANEL + PAD,
        PANEL - 4.0,
        names.join(", ")
    );
    out.push_str("</g>\n</svg>\n");
    out
}
