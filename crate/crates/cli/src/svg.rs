//! Minimal SVG output: line charts and heatmaps.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 48.0;
const COLOURS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn finite_range(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo > hi {
        return None;
    }
    if lo == hi {
        Some((lo - 0.5, hi + 0.5))
    } else {
        Some((lo, hi))
    }
}

fn header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">{}</text>\n",
        W / 2.0,
        escape(title)
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axes(out: &mut String, x: (f64, f64), y: (f64, f64)) {
    let _ = writeln!(
        out,
        "<rect x=\"{PAD}\" y=\"{PAD}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>",
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    let labels = [
        (PAD, H - PAD + 16.0, "start", x.0),
        (W - PAD, H - PAD + 16.0, "end", x.1),
        (PAD - 4.0, H - PAD, "end", y.0),
        (PAD - 4.0, PAD + 4.0, "end", y.1),
    ];
    for (lx, ly, anchor, v) in labels {
        let _ = writeln!(
            out,
            "<text x=\"{lx}\" y=\"{ly}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"{anchor}\">{v:.3}</text>"
        );
    }
}

/// Line chart of named series; non-finite points break the line.
pub fn line_chart(title: &str, series: &[(&str, Vec<(f64, f64)>)]) -> String {
    let mut out = header(title);
    let all = || series.iter().flat_map(|(_, pts)| pts.iter());
    let (Some(xr), Some(yr)) = (finite_range(all().map(|p| p.0)), finite_range(all().map(|p| p.1))) else {
        out.push_str("</svg>\n");
        return out;
    };
    axes(&mut out, xr, yr);
    let sx = |x: f64| PAD + (x - xr.0) / (xr.1 - xr.0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - yr.0) / (yr.1 - yr.0) * (H - 2.0 * PAD);
    for (i, (name, pts)) in series.iter().enumerate() {
        let colour = COLOURS[i % COLOURS.len()];
        let mut segment = Vec::new();
        let flush = |segment: &mut Vec<String>, out: &mut String| {
            if segment.len() > 1 {
                let _ = writeln!(
                    out,
                    "<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"1.5\" points=\"{}\"/>",
                    segment.join(" ")
                );
            }
            segment.clear();
        };
        for &(x, y) in pts {
            if x.is_finite() && y.is_finite() {
                segment.push(format!("{:.2},{:.2}", sx(x), sy(y)));
            } else {
                flush(&mut segment, &mut out);
            }
        }
        flush(&mut segment, &mut out);
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{colour}\">{}</text>",
            W - PAD - 120.0,
            PAD + 16.0 + 14.0 * i as f64,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Heatmap of `values[row][col]`, rows drawn bottom-up; non-finite cells
/// are left grey.
pub fn heatmap(title: &str, values: &[Vec<f64>]) -> String {
    let mut out = header(title);
    let rows = values.len();
    let cols = values.first().map_or(0, Vec::len);
    let Some((lo, hi)) = finite_range(values.iter().flatten().copied()) else {
        out.push_str("</svg>\n");
        return out;
    };
    axes(&mut out, (0.0, cols as f64), (0.0, rows as f64));
    let cw = (W - 2.0 * PAD) / cols.max(1) as f64;
    let ch = (H - 2.0 * PAD) / rows.max(1) as f64;
    for (r, row) in values.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let fill = if v.is_finite() {
                let t = (v - lo) / (hi - lo);
                format!("rgb({},{},{})", (255.0 * t) as u8, (80.0 + 100.0 * (1.0 - (2.0 * t - 1.0).abs())) as u8, (255.0 * (1.0 - t)) as u8)
            } else {
                "#cccccc".into()
            };
            let _ = writeln!(
                out,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{fill}\"/>",
                PAD + c as f64 * cw,
                H - PAD - (r + 1) as f64 * ch,
                cw + 0.05,
                ch + 0.05
            );
        }
    }
    out.push_str("</svg>\n");
    out
}
