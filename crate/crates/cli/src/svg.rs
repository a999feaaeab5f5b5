//! Minimal SVG line charts. Output is plain text with fixed number
//! formatting so identical data gives byte-identical files.

use std::fmt::Write;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 360.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 16.0;
const TOP: f64 = 44.0;
const BOTTOM: f64 = 44.0;

pub struct Series<'a> {
    pub label: &'a str,
    pub color: &'a str,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

pub struct Chart<'a> {
    pub title: &'a str,
    pub x_label: &'a str,
    pub y_label: &'a str,
    pub series: Vec<Series<'a>>,
    /// Vertical guide lines at these x values.
    pub markers: Vec<f64>,
    /// Keep one unit the same length on both axes.
    pub equal_aspect: bool,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

/// Round tick step giving roughly `n` intervals.
fn tick_step(span: f64, n: f64) -> f64 {
    let raw = span / n;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let nice = if norm < 1.5 {
        1.0
    } else if norm < 3.0 {
        2.0
    } else if norm < 7.0 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

fn fmt_tick(v: f64, step: f64) -> String {
    let decimals = if step >= 1.0 { 0 } else { (-step.log10().floor()) as usize };
    let s = format!("{v:.decimals$}");
    if s == "-0" || s.chars().all(|c| c == '-' || c == '0' || c == '.') && s.starts_with('-') {
        s[1..].to_string()
    } else {
        s
    }
}

impl Chart<'_> {
    pub fn render(&self) -> String {
        let (mut x0, mut x1) = bounds(self.series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
        let (mut y0, mut y1) = bounds(self.series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
        let pw = WIDTH - LEFT - RIGHT;
        let ph = HEIGHT - TOP - BOTTOM;
        if self.equal_aspect {
            let scale = ((x1 - x0) / pw).max((y1 - y0) / ph);
            let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
            x0 = cx - scale * pw / 2.0;
            x1 = cx + scale * pw / 2.0;
            y0 = cy - scale * ph / 2.0;
            y1 = cy + scale * ph / 2.0;
        }
        let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="18" text-anchor="middle" font-size="13">{}</text>"#,
            WIDTH / 2.0,
            escape(self.title)
        );

        for (lo, hi, vertical) in [(x0, x1, true), (y0, y1, false)] {
            let step = tick_step(hi - lo, 6.0);
            let mut v = (lo / step).ceil() * step;
            while v <= hi + 1e-9 * step {
                if vertical {
                    let x = sx(v);
                    let _ = writeln!(
                        out,
                        r##"<line x1="{x:.2}" y1="{TOP}" x2="{x:.2}" y2="{:.2}" stroke="#e4e4e4"/>"##,
                        TOP + ph
                    );
                    let _ = writeln!(
                        out,
                        r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
                        TOP + ph + 14.0,
                        fmt_tick(v, step)
                    );
                } else {
                    let y = sy(v);
                    let _ = writeln!(
                        out,
                        r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#e4e4e4"/>"##,
                        LEFT + pw
                    );
                    let _ = writeln!(
                        out,
                        r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
                        LEFT - 6.0,
                        y + 4.0,
                        fmt_tick(v, step)
                    );
                }
                v += step;
            }
        }
        let _ = writeln!(
            out,
            r##"<rect x="{LEFT}" y="{TOP}" width="{pw:.2}" height="{ph:.2}" fill="none" stroke="#333"/>"##
        );
        for &m in &self.markers {
            if m >= x0 && m <= x1 {
                let x = sx(m);
                let _ = writeln!(
                    out,
                    r##"<line x1="{x:.2}" y1="{TOP}" x2="{x:.2}" y2="{:.2}" stroke="#999" stroke-dasharray="2 3"/>"##,
                    TOP + ph
                );
            }
        }
        for s in &self.series {
            if s.points.is_empty() {
                continue;
            }
            let mut d = String::new();
            for (i, (x, y)) in s.points.iter().enumerate() {
                let _ = write!(d, "{}{:.2},{:.2}", if i == 0 { "M" } else { " L" }, sx(*x), sy(*y));
            }
            let dash = if s.dashed { r#" stroke-dasharray="5 3""# } else { "" };
            let _ = writeln!(
                out,
                r#"<path d="{d}" fill="none" stroke="{}" stroke-width="1.4"{dash}/>"#,
                s.color
            );
        }
        // Legend in one row above the plot, right-aligned.
        let widths: Vec<f64> = self.series.iter().map(|s| 34.0 + 6.5 * s.label.chars().count() as f64).collect();
        let mut x = LEFT + pw - widths.iter().sum::<f64>();
        let y = TOP - 10.0;
        for (s, w) in self.series.iter().zip(&widths) {
            let dash = if s.dashed { r#" stroke-dasharray="5 3""# } else { "" };
            let _ = writeln!(
                out,
                r#"<line x1="{x:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="{}" stroke-width="1.4"{dash}/>"#,
                x + 20.0,
                s.color
            );
            let _ = writeln!(
                out,
                r#"<text x="{:.2}" y="{:.2}">{}</text>"#,
                x + 26.0,
                y + 4.0,
                escape(s.label)
            );
            x += w;
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            LEFT + pw / 2.0,
            HEIGHT - 8.0,
            escape(self.x_label)
        );
        let _ = writeln!(
            out,
            r#"<text x="14" y="{:.2}" text-anchor="middle" transform="rotate(-90 14 {:.2})">{}</text>"#,
            TOP + ph / 2.0,
            TOP + ph / 2.0,
            escape(self.y_label)
        );
        out.push_str("</svg>\n");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_paths_and_legend() {
        let chart = Chart {
            title: "a < b",
            x_label: "t",
            y_label: "v",
            series: vec![Series {
                label: "measured",
                color: "black",
                points: vec![(0.0, 0.0), (1.0, 2.0), (2.0, 1.0)],
                dashed: false,
            }],
            markers: vec![1.0],
            equal_aspect: false,
        };
        let svg = chart.render();
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("a &lt; b"));
        assert_eq!(svg.matches("<path").count(), 1);
        assert_eq!(svg, chart.render());
    }

    #[test]
    fn constant_series_does_not_divide_by_zero() {
        let chart = Chart {
            title: "",
            x_label: "",
            y_label: "",
            series: vec![Series {
                label: "c",
                color: "red",
                points: vec![(0.0, 3.0), (1.0, 3.0)],
                dashed: true,
            }],
            markers: vec![],
            equal_aspect: true,
        };
        assert!(!chart.render().contains("NaN"));
    }

    #[test]
    fn tick_steps_are_round() {
        assert_eq!(tick_step(10.0, 5.0), 2.0);
        assert_eq!(tick_step(1.0, 6.0), 0.2);
        assert_eq!(fmt_tick(-0.0, 0.5), "0.0");
    }
}
