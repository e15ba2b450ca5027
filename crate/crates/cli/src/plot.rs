//! Two orthographic views of points on S² as a standalone SVG: the polar
//! view looks down the +z axis, the side view looks down the -y axis.
//! Points on the far hemisphere of a view are drawn faded.

use std::fmt::Write;

pub fn render(points: &[[f64; 3]], size: u32) -> String {
    let s = size as f64;
    let r = 0.42 * s;
    let title_h = 24.0;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
        w = 2 * size,
        h = size + title_h as u32
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    // (title, horizontal axis, vertical axis, depth axis toward the viewer)
    let views: [(&str, usize, usize, usize, f64); 2] = [("polar view (+z)", 0, 1, 2, 1.0), ("side view (-y)", 0, 2, 1, -1.0)];
    for (k, (title, h_ax, v_ax, d_ax, d_sign)) in views.iter().enumerate() {
        let cx = s * (k as f64 + 0.5);
        let cy = title_h + s / 2.0;
        let _ = writeln!(
            svg,
            r#"<text x="{cx:.2}" y="16" font-family="sans-serif" font-size="13" text-anchor="middle">{title}</text>"#
        );
        let _ = writeln!(
            svg,
            r##"<circle cx="{cx:.2}" cy="{cy:.2}" r="{r:.2}" fill="none" stroke="#444" stroke-width="1"/>"##
        );
        let _ = writeln!(
            svg,
            r##"<line x1="{:.2}" y1="{cy:.2}" x2="{:.2}" y2="{cy:.2}" stroke="#bbb" stroke-width="0.5"/>"##,
            cx - r,
            cx + r
        );
        let _ = writeln!(
            svg,
            r##"<line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="#bbb" stroke-width="0.5"/>"##,
            cy - r,
            cy + r
        );
        for p in points {
            let px = cx + r * p[*h_ax];
            let py = cy - r * p[*v_ax];
            let near = d_sign * p[*d_ax] >= 0.0;
            let (fill, opacity) = if near { ("#1f5fa8", 0.8) } else { ("#c0392b", 0.25) };
            let _ = writeln!(
                svg,
                r#"<circle cx="{px:.2}" cy="{py:.2}" r="1.5" fill="{fill}" fill-opacity="{opacity}"/>"#
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}
