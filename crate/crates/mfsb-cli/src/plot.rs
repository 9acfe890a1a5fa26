//! Plot data as CSV columns and minimal static SVG line charts.

use std::fmt::Write;

/// A named column sharing the x axis of its table.
#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub values: Vec<f64>,
}

impl Series {
    pub fn new(name: &str, values: Vec<f64>) -> Self {
        Self { name: name.into(), values }
    }
}

pub fn csv_table(x_name: &str, x: &[f64], series: &[Series]) -> String {
    let mut s = String::from(x_name);
    for c in series {
        s.push(',');
        s.push_str(&c.name);
    }
    s.push('\n');
    for (i, xi) in x.iter().enumerate() {
        write!(s, "{xi:.17e}").unwrap();
        for c in series {
            write!(s, ",{:.17e}", c.values[i]).unwrap();
        }
        s.push('\n');
    }
    s
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line chart of every series against `x`; non-finite points break the line.
pub fn svg_chart(title: &str, x_name: &str, x: &[f64], series: &[Series]) -> String {
    let finite = |v: &&f64| v.is_finite();
    let (x0, x1) = x.iter().filter(finite).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let (mut y0, mut y1) = series
        .iter()
        .flat_map(|c| c.values.iter().filter(finite))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    if !(y0.is_finite() && y1.is_finite()) {
        (y0, y1) = (0.0, 1.0);
    }
    if y1 - y0 < 1e-300 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let span_x = if x1 > x0 { x1 - x0 } else { 1.0 };
    let px = |v: f64| MARGIN + (v - x0) / span_x * (WIDTH - 2.0 * MARGIN);
    let py = |v: f64| HEIGHT - MARGIN - (v - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title)).unwrap();
    let (l, r, t, b) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    writeln!(s, r#"<path d="M{l} {t} L{l} {b} L{r} {b}" fill="none" stroke="black"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, WIDTH / 2.0, HEIGHT - 16.0, escape(x_name)).unwrap();
    for (v, anchor_y) in [(y0, b), (y1, t)] {
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.3e}</text>"#, l - 4.0, anchor_y + 4.0).unwrap();
    }
    for (v, anchor_x) in [(x0, l), (x1, r)] {
        writeln!(s, r#"<text x="{anchor_x}" y="{}" text-anchor="middle">{v:.3}</text>"#, b + 16.0).unwrap();
    }
    for (j, c) in series.iter().enumerate() {
        let color = COLORS[j % COLORS.len()];
        let mut d = String::new();
        let mut pen_down = false;
        for (xi, yi) in x.iter().zip(&c.values) {
            if xi.is_finite() && yi.is_finite() {
                write!(d, "{}{:.2} {:.2} ", if pen_down { "L" } else { "M" }, px(*xi), py(*yi)).unwrap();
                pen_down = true;
            } else {
                pen_down = false;
            }
        }
        writeln!(s, r#"<path d="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, d.trim_end()).unwrap();
        let ly = t + 4.0 + 16.0 * j as f64;
        writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, r - 150.0, r - 130.0).unwrap();
        writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, r - 124.0, ly + 4.0, escape(&c.name)).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_header_and_rows() {
        let t = csv_table("t", &[0.0, 1.0], &[Series::new("a", vec![1.0, 2.0])]);
        let lines: Vec<_> = t.lines().collect();
        assert_eq!(lines[0], "t,a");
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[2].split(',').nth(1).unwrap().parse::<f64>().unwrap(), 2.0);
    }

    #[test]
    fn svg_skips_non_finite_points() {
        let s = svg_chart("x<y", "t", &[0.0, 1.0, 2.0], &[Series::new("f", vec![1.0, f64::NAN, 3.0])]);
        assert!(s.starts_with("<svg"));
        assert!(s.contains("x&lt;y"));
        assert_eq!(s.matches("M").count() - s.matches("M56 ").count(), 2);
    }
}
