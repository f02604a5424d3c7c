//! Minimal deterministic SVG line charts: fixed canvas, fixed palette,
//! every coordinate printed with three decimals so identical inputs yield
//! identical bytes.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::dataset::write_atomic;

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 500.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 30.0;
const MARGIN_T: f64 = 45.0;
const MARGIN_B: f64 = 55.0;
const N_TICKS: usize = 5;
const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#7f7f7f",
];

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("chart has no drawable points")]
    NoData,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// One polyline.
#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self {
            name: name.into(),
            points,
        }
    }

    /// Convenience for y-values plotted against 1-based indices.
    pub fn from_values(name: impl Into<String>, values: &[f64]) -> Self {
        Self::new(
            name,
            values
                .iter()
                .enumerate()
                .map(|(i, &v)| ((i + 1) as f64, v))
                .collect(),
        )
    }
}

fn finite_points(s: &Series) -> impl Iterator<Item = (f64, f64)> + '_ {
    s.points
        .iter()
        .copied()
        .filter(|(x, y)| x.is_finite() && y.is_finite())
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders a line chart. Non-finite points are dropped; a chart with no
/// finite point at all is an error.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> Result<String, PlotError> {
    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in series {
        for (x, y) in finite_points(s) {
            x_min = x_min.min(x);
            x_max = x_max.max(x);
            y_min = y_min.min(y);
            y_max = y_max.max(y);
        }
    }
    if !x_min.is_finite() || !y_min.is_finite() {
        return Err(PlotError::NoData);
    }
    // Degenerate ranges get a unit of slack so single points stay visible.
    if x_max - x_min < f64::EPSILON {
        x_min -= 0.5;
        x_max += 0.5;
    }
    if y_max - y_min < f64::EPSILON {
        y_min -= 0.5;
        y_max += 0.5;
    }
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let sx = |x: f64| MARGIN_L + (x - x_min) / (x_max - x_min) * plot_w;
    let sy = |y: f64| HEIGHT - MARGIN_B - (y - y_min) / (y_max - y_min) * plot_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="monospace" font-size="12">"#
    );
    let _ = writeln!(
        svg,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.3}" y="25" text-anchor="middle" font-size="15">{}</text>"#,
        WIDTH / 2.0,
        esc(title)
    );

    for i in 0..=N_TICKS {
        let f = i as f64 / N_TICKS as f64;
        let xv = x_min + f * (x_max - x_min);
        let yv = y_min + f * (y_max - y_min);
        let xp = sx(xv);
        let yp = sy(yv);
        let _ = writeln!(
            svg,
            r##"<line x1="{xp:.3}" y1="{top:.3}" x2="{xp:.3}" y2="{bot:.3}" stroke="#dddddd"/>"##,
            top = MARGIN_T,
            bot = HEIGHT - MARGIN_B
        );
        let _ = writeln!(
            svg,
            r##"<line x1="{l:.3}" y1="{yp:.3}" x2="{r:.3}" y2="{yp:.3}" stroke="#dddddd"/>"##,
            l = MARGIN_L,
            r = WIDTH - MARGIN_R
        );
        let _ = writeln!(
            svg,
            r#"<text x="{xp:.3}" y="{:.3}" text-anchor="middle">{xv:.3}</text>"#,
            HEIGHT - MARGIN_B + 18.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.3}" y="{:.3}" text-anchor="end">{yv:.3}</text>"#,
            MARGIN_L - 6.0,
            yp + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<rect x="{MARGIN_L:.3}" y="{MARGIN_T:.3}" width="{plot_w:.3}" height="{plot_h:.3}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.3}" y="{:.3}" text-anchor="middle">{}</text>"#,
        MARGIN_L + plot_w / 2.0,
        HEIGHT - 12.0,
        esc(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{:.3}" text-anchor="middle" transform="rotate(-90 16 {:.3})">{}</text>"#,
        MARGIN_T + plot_h / 2.0,
        MARGIN_T + plot_h / 2.0,
        esc(y_label)
    );

    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let mut pts = String::new();
        for (x, y) in finite_points(s) {
            let _ = write!(pts, "{:.3},{:.3} ", sx(x), sy(y));
        }
        if pts.is_empty() {
            continue;
        }
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            pts.trim_end()
        );
        let ly = MARGIN_T + 14.0 + 16.0 * si as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{:.3}" y1="{ly:.3}" x2="{:.3}" y2="{ly:.3}" stroke="{color}" stroke-width="1.5"/>"#,
            MARGIN_L + plot_w - 150.0,
            MARGIN_L + plot_w - 126.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.3}" y="{:.3}">{}</text>"#,
            MARGIN_L + plot_w - 120.0,
            ly + 4.0,
            esc(&s.name)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Renders and writes atomically.
pub fn write_line_chart(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> Result<(), PlotError> {
    let svg = line_chart(title, x_label, y_label, series)?;
    write_atomic(path, svg.as_bytes())?;
    Ok(())
}
