//! Minimal hand-written SVG: scatter points, arrows and weighted segments.

use std::fmt::Write as _;

pub const SOURCE_COLOR: &str = "#1f77b4";
pub const TARGET_COLOR: &str = "#d62728";
pub const MAPPED_COLOR: &str = "#2ca02c";
pub const LINK_COLOR: &str = "#555555";

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Points {
        points: Vec<[f64; 2]>,
        color: String,
        radius: f64,
    },
    /// Displacement arrows `from -> to`.
    Arrows {
        pairs: Vec<([f64; 2], [f64; 2])>,
        color: String,
    },
    /// Segments whose opacity is proportional to their weight.
    Segments {
        pairs: Vec<([f64; 2], [f64; 2])>,
        weights: Vec<f64>,
        color: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plot {
    pub title: String,
    pub width: f64,
    pub height: f64,
    pub layers: Vec<Layer>,
    /// `[xmin, xmax, ymin, ymax]`; derived from the data when absent.
    pub bounds: Option<[f64; 4]>,
}

const MARGIN: f64 = 24.0;

impl Plot {
    pub fn new(title: impl Into<String>) -> Self {
        Self { title: title.into(), width: 320.0, height: 240.0, layers: Vec::new(), bounds: None }
    }

    pub fn with_bounds(mut self, bounds: [f64; 4]) -> Self {
        self.bounds = Some(bounds);
        self
    }

    pub fn points(mut self, points: Vec<[f64; 2]>, color: &str) -> Self {
        self.layers.push(Layer::Points { points, color: color.into(), radius: 2.0 });
        self
    }

    pub fn arrows(mut self, pairs: Vec<([f64; 2], [f64; 2])>, color: &str) -> Self {
        self.layers.push(Layer::Arrows { pairs, color: color.into() });
        self
    }

    pub fn segments(mut self, pairs: Vec<([f64; 2], [f64; 2])>, weights: Vec<f64>, color: &str) -> Self {
        self.layers.push(Layer::Segments { pairs, weights, color: color.into() });
        self
    }

    /// Padded bounding box of every drawn coordinate.
    pub fn data_bounds(&self) -> [f64; 4] {
        let mut b = [f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY];
        let mut add = |p: &[f64; 2]| {
            b[0] = b[0].min(p[0]);
            b[1] = b[1].max(p[0]);
            b[2] = b[2].min(p[1]);
            b[3] = b[3].max(p[1]);
        };
        for layer in &self.layers {
            match layer {
                Layer::Points { points, .. } => points.iter().for_each(&mut add),
                Layer::Arrows { pairs, .. } | Layer::Segments { pairs, .. } => pairs.iter().for_each(|(a, c)| {
                    add(a);
                    add(c);
                }),
            }
        }
        if !b[0].is_finite() {
            return [0.0, 1.0, 0.0, 1.0];
        }
        let pad_x = 0.05 * (b[1] - b[0]).max(1e-9);
        let pad_y = 0.05 * (b[3] - b[2]).max(1e-9);
        [b[0] - pad_x, b[1] + pad_x, b[2] - pad_y, b[3] + pad_y]
    }

    fn body(&self, out: &mut String) {
        let [x0, x1, y0, y1] = self.bounds.unwrap_or_else(|| self.data_bounds());
        let (w, h) = (self.width - 2.0 * MARGIN, self.height - 2.0 * MARGIN);
        let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * w;
        let sy = |y: f64| MARGIN + (1.0 - (y - y0) / (y1 - y0)) * h;
        let _ = writeln!(out, r##"<rect x="0" y="0" width="{:.0}" height="{:.0}" fill="white" stroke="#cccccc"/>"##, self.width, self.height);
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="16" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#,
            self.width / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(out, r##"<rect x="{MARGIN:.1}" y="{MARGIN:.1}" width="{w:.1}" height="{h:.1}" fill="none" stroke="#999999" stroke-width="0.5"/>"##);
        for layer in &self.layers {
            match layer {
                Layer::Points { points, color, radius } => {
                    for p in points {
                        let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="{radius:.1}" fill="{color}" fill-opacity="0.7"/>"#, sx(p[0]), sy(p[1]));
                    }
                }
                Layer::Arrows { pairs, color } => {
                    for (a, b) in pairs {
                        let _ = writeln!(
                            out,
                            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{color}" stroke-width="0.6" stroke-opacity="0.6" marker-end="url(#arrow)"/>"#,
                            sx(a[0]),
                            sy(a[1]),
                            sx(b[0]),
                            sy(b[1])
                        );
                    }
                }
                Layer::Segments { pairs, weights, color } => {
                    let top = weights.iter().copied().fold(0.0, f64::max);
                    for ((a, b), &wt) in pairs.iter().zip(weights) {
                        let alpha = if top > 0.0 { wt / top } else { 0.0 };
                        if alpha < 0.02 {
                            continue;
                        }
                        let _ = writeln!(
                            out,
                            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{color}" stroke-width="0.5" stroke-opacity="{alpha:.3}"/>"#,
                            sx(a[0]),
                            sy(a[1]),
                            sx(b[0]),
                            sy(b[1])
                        );
                    }
                }
            }
        }
    }

    pub fn render(&self) -> String {
        let mut out = header(self.width, self.height);
        self.body(&mut out);
        out.push_str("</svg>\n");
        out
    }
}

fn header(width: f64, height: f64) -> String {
    format!(
        concat!(
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}">"#,
            "\n",
            r#"<defs><marker id="arrow" viewBox="0 0 10 10" refX="9" refY="5" markerWidth="4" markerHeight="4" orient="auto"><path d="M0,0 L10,5 L0,10 z" fill="context-stroke"/></marker></defs>"#,
            "\n"
        ),
        w = width,
        h = height
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Lays plots out row by row, `columns` per row, in one document.
pub fn grid(plots: &[Plot], columns: usize) -> String {
    let columns = columns.max(1);
    let cell_w = plots.iter().map(|p| p.width).fold(0.0, f64::max);
    let cell_h = plots.iter().map(|p| p.height).fold(0.0, f64::max);
    let rows = plots.len().div_ceil(columns);
    let mut out = header(cell_w * columns.min(plots.len().max(1)) as f64, cell_h * rows as f64);
    for (k, plot) in plots.iter().enumerate() {
        let (col, row) = (k % columns, k / columns);
        let _ = writeln!(out, r#"<g transform="translate({:.0},{:.0})">"#, col as f64 * cell_w, row as f64 * cell_h);
        plot.body(&mut out);
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    out
}
