//! Minimal SVG line plots: stacked panels of time series.

use std::fmt::Write;

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

pub struct Panel {
    pub title: String,
    pub series: Vec<Series>,
}

const WIDTH: f64 = 720.0;
const PANEL_H: f64 = 240.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 28.0;
const MARGIN_B: f64 = 30.0;
const COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];

fn bounds(p: &Panel) -> (f64, f64, f64, f64) {
    let pts = p
        .series
        .iter()
        .flat_map(|s| s.points.iter())
        .filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return (0.0, 1.0, -1.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        let pad = y0.abs().max(1.0) * 0.5;
        y0 -= pad;
        y1 += pad;
    }
    (x0, x1, y0, y1)
}

/// Numbers in plots get 4 significant digits so that output is stable.
fn tick(v: f64) -> String {
    format!("{v:.3e}")
}

pub fn render(panels: &[Panel]) -> String {
    let height = PANEL_H * panels.len().max(1) as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (k, p) in panels.iter().enumerate() {
        let top = k as f64 * PANEL_H;
        let (x0, x1, y0, y1) = bounds(p);
        let pw = WIDTH - MARGIN_L - MARGIN_R;
        let ph = PANEL_H - MARGIN_T - MARGIN_B;
        let sx = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| top + MARGIN_T + (y1 - y) / (y1 - y0) * ph;
        let _ = writeln!(
            s,
            r#"<text x="{MARGIN_L}" y="{:.1}" font-size="13">{}</text>"#,
            top + 18.0,
            escape(&p.title)
        );
        let _ = writeln!(
            s,
            r##"<rect x="{MARGIN_L}" y="{:.1}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##,
            top + MARGIN_T
        );
        for (v, y) in [(y1, sy(y1)), (y0, sy(y0))] {
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
                MARGIN_L - 4.0,
                y + 4.0,
                tick(v)
            );
        }
        if y0 < 0.0 && y1 > 0.0 {
            let _ = writeln!(
                s,
                r##"<line x1="{MARGIN_L}" y1="{0:.2}" x2="{1:.2}" y2="{0:.2}" stroke="#bbb" stroke-dasharray="4 3"/>"##,
                sy(0.0),
                MARGIN_L + pw
            );
        }
        let base = top + PANEL_H - 10.0;
        let _ = writeln!(
            s,
            r#"<text x="{MARGIN_L}" y="{base:.1}">{}</text>"#,
            tick(x0)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{base:.1}" text-anchor="end">{}</text>"#,
            MARGIN_L + pw,
            tick(x1)
        );
        for (i, series) in p.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let mut d = String::new();
            for &(x, y) in series
                .points
                .iter()
                .filter(|(x, y)| x.is_finite() && y.is_finite())
            {
                let _ = write!(
                    d,
                    "{}{:.2},{:.2}",
                    if d.is_empty() { "M" } else { " L" },
                    sx(x),
                    sy(y)
                );
            }
            let _ = writeln!(
                s,
                r#"<path d="{d}" fill="none" stroke="{color}" stroke-width="1.2"/>"#
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" fill="{color}" text-anchor="end">{}</text>"#,
                WIDTH - MARGIN_R - 4.0,
                top + MARGIN_T + 14.0 * (i + 1) as f64,
                escape(&series.label)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_one_path_per_series() {
        let panel = Panel {
            title: "e & f".into(),
            series: vec![
                Series {
                    label: "a".into(),
                    points: vec![(0.0, 1.0), (1.0, -1.0)],
                },
                Series {
                    label: "b".into(),
                    points: vec![(0.0, 0.0), (1.0, f64::NAN)],
                },
            ],
        };
        let svg = render(&[panel]);
        assert_eq!(svg.matches("<path").count(), 2);
        assert!(svg.contains("e &amp; f"));
        assert!(svg.ends_with("</svg>\n"));
    }
}
