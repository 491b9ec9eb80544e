//! Minimal deterministic figure output.
//!
//! A [`Canvas`] is a display list of primitives. The same list is written as
//! SVG text and rasterised to PNG, so both files are pure functions of the
//! data that produced them and regenerate byte-for-byte.

pub mod charts;
mod font;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

pub use charts::{bar_chart, line_chart, BarGroup, LineChart, Series};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Color(pub u8, pub u8, pub u8);

impl Color {
    pub const BLACK: Color = Color(0, 0, 0);
    pub const WHITE: Color = Color(255, 255, 255);
    pub const GRID: Color = Color(225, 225, 225);
    pub const GREY: Color = Color(120, 120, 120);

    fn hex(self) -> String {
        format!("#{:02x}{:02x}{:02x}", self.0, self.1, self.2)
    }
}

/// Categorical palette (colour-blind friendly).
pub const PALETTE: [Color; 6] = [
    Color(0, 114, 178),
    Color(213, 94, 0),
    Color(0, 158, 115),
    Color(204, 121, 167),
    Color(230, 159, 0),
    Color(86, 180, 233),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Anchor {
    Start,
    Middle,
    End,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Item {
    Rect { x: f64, y: f64, w: f64, h: f64, fill: Color },
    Line { x1: f64, y1: f64, x2: f64, y2: f64, color: Color, width: f64, dashed: bool },
    Polyline { points: Vec<(f64, f64)>, color: Color, width: f64, dashed: bool },
    /// `scale` multiplies the 7×12 glyph cell; `vertical` reads bottom to top.
    Text { x: f64, y: f64, text: String, color: Color, scale: u32, anchor: Anchor, vertical: bool },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Canvas {
    pub width: u32,
    pub height: u32,
    pub items: Vec<Item>,
}

const DASH: f64 = 6.0;

impl Canvas {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height, items: vec![Item::Rect { x: 0.0, y: 0.0, w: width as f64, h: height as f64, fill: Color::WHITE }] }
    }

    pub fn push(&mut self, item: Item) {
        self.items.push(item);
    }

    pub fn text(&mut self, x: f64, y: f64, text: impl Into<String>, scale: u32, anchor: Anchor) {
        self.push(Item::Text { x, y, text: text.into(), color: Color::BLACK, scale, anchor, vertical: false });
    }

    pub fn line(&mut self, p: (f64, f64), q: (f64, f64), color: Color, width: f64) {
        self.push(Item::Line { x1: p.0, y1: p.1, x2: q.0, y2: q.1, color, width, dashed: false });
    }

    pub fn to_svg(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
            w = self.width,
            h = self.height
        );
        for item in &self.items {
            match item {
                Item::Rect { x, y, w, h, fill } => {
                    let _ = writeln!(s, r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="{}"/>"#, fill.hex());
                }
                Item::Line { x1, y1, x2, y2, color, width, dashed } => {
                    let _ = writeln!(
                        s,
                        r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="{}" stroke-width="{width:.2}"{}/>"#,
                        color.hex(),
                        dash_attr(*dashed)
                    );
                }
                Item::Polyline { points, color, width, dashed } => {
                    let pts: Vec<String> = points.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
                    let _ = writeln!(
                        s,
                        r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="{width:.2}" stroke-linejoin="round"{}/>"#,
                        pts.join(" "),
                        color.hex(),
                        dash_attr(*dashed)
                    );
                }
                Item::Text { x, y, text, color, scale, anchor, vertical } => {
                    let anchor = match anchor {
                        Anchor::Start => "start",
                        Anchor::Middle => "middle",
                        Anchor::End => "end",
                    };
                    let rotate = if *vertical { format!(r#" transform="rotate(-90 {x:.2} {y:.2})""#) } else { String::new() };
                    let _ = writeln!(
                        s,
                        r#"<text x="{x:.2}" y="{y:.2}" font-family="monospace" font-size="{}" fill="{}" text-anchor="{anchor}" dominant-baseline="middle"{rotate}>{}</text>"#,
                        11 * scale,
                        color.hex(),
                        escape(text)
                    );
                }
            }
        }
        s.push_str("</svg>\n");
        s
    }

    pub fn rasterize(&self) -> RgbImage {
        let mut r = Raster { img: RgbImage::from_pixel(self.width, self.height, Rgb([255, 255, 255])) };
        for item in &self.items {
            match item {
                Item::Rect { x, y, w, h, fill } => r.fill_rect(*x, *y, *w, *h, *fill),
                Item::Line { x1, y1, x2, y2, color, width, dashed } => {
                    r.polyline(&[(*x1, *y1), (*x2, *y2)], *color, *width, *dashed)
                }
                Item::Polyline { points, color, width, dashed } => r.polyline(points, *color, *width, *dashed),
                Item::Text { x, y, text, color, scale, anchor, vertical } => {
                    r.text(*x, *y, text, *color, *scale, *anchor, *vertical)
                }
            }
        }
        r.img
    }

    /// Writes `<stem>.svg` and `<stem>.png` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let svg = dir.join(format!("{stem}.svg"));
        std::fs::write(&svg, self.to_svg()).map_err(|e| Error::io(&svg, e))?;
        let png = dir.join(format!("{stem}.png"));
        self.rasterize()
            .save(&png)
            .map_err(|e| Error::Image { path: png.clone(), message: e.to_string() })?;
        Ok(vec![svg, png])
    }
}

fn dash_attr(dashed: bool) -> &'static str {
    if dashed {
        r#" stroke-dasharray="6,6""#
    } else {
        ""
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn text_width(text: &str, scale: u32) -> f64 {
    (text.chars().count() * font::GLYPH_W) as f64 * scale as f64
}

struct Raster {
    img: RgbImage,
}

impl Raster {
    fn put(&mut self, x: i64, y: i64, c: Color) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, Rgb([c.0, c.1, c.2]));
        }
    }

    fn fill_rect(&mut self, x: f64, y: f64, w: f64, h: f64, c: Color) {
        let (x0, y0) = (x.round() as i64, y.round() as i64);
        let (x1, y1) = ((x + w).round() as i64, (y + h).round() as i64);
        for yy in y0..y1 {
            for xx in x0..x1 {
                self.put(xx, yy, c);
            }
        }
    }

    fn stamp(&mut self, x: f64, y: f64, width: f64, c: Color) {
        let r = ((width - 1.0) / 2.0).max(0.0);
        let (x0, x1) = ((x - r).round() as i64, (x + r).round() as i64);
        let (y0, y1) = ((y - r).round() as i64, (y + r).round() as i64);
        for yy in y0..=y1 {
            for xx in x0..=x1 {
                self.put(xx, yy, c);
            }
        }
    }

    fn polyline(&mut self, pts: &[(f64, f64)], c: Color, width: f64, dashed: bool) {
        let mut travelled = 0.0;
        for w in pts.windows(2) {
            let (dx, dy) = (w[1].0 - w[0].0, w[1].1 - w[0].1);
            let len = (dx * dx + dy * dy).sqrt();
            let steps = (len * 2.0).ceil().max(1.0) as usize;
            for i in 0..=steps {
                let t = i as f64 / steps as f64;
                let along = travelled + t * len;
                if dashed && (along / DASH).floor() as i64 % 2 == 1 {
                    continue;
                }
                self.stamp(w[0].0 + t * dx, w[0].1 + t * dy, width, c);
            }
            travelled += len;
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn text(&mut self, x: f64, y: f64, text: &str, c: Color, scale: u32, anchor: Anchor, vertical: bool) {
        let s = scale as i64;
        let total = text_width(text, scale);
        let offset = match anchor {
            Anchor::Start => 0.0,
            Anchor::Middle => total / 2.0,
            Anchor::End => total,
        };
        let half_h = (font::GLYPH_H as i64 * s) / 2;
        for (ci, ch) in text.chars().enumerate() {
            let g = font::glyph(ch);
            for (row, bits) in g.iter().enumerate() {
                for col in 0..font::GLYPH_W {
                    if bits >> (font::GLYPH_W - 1 - col) & 1 == 0 {
                        continue;
                    }
                    // Pixel position along the text direction and across it.
                    let along = (ci * font::GLYPH_W + col) as i64 * s - offset.round() as i64;
                    let across = row as i64 * s - half_h;
                    for dy in 0..s {
                        for dx in 0..s {
                            let (px, py) = if vertical {
                                (x.round() as i64 + across + dy, y.round() as i64 - along - dx)
                            } else {
                                (x.round() as i64 + along + dx, y.round() as i64 + across + dy)
                            };
                            self.put(px, py, c);
                        }
                    }
                }
            }
        }
    }
}
