//! Minimal self-contained line-chart renderer.
//!
//! Draws loss curves into an RGB buffer with an embedded 5x7 bitmap font
//! (text renders uppercase) and writes PNG files. No styling knobs beyond
//! what the comparison plots need: titled axes with ticks, one polyline
//! per series, dashed horizontal reference lines, and a legend.

use std::path::Path;

use anyhow::Context;

pub const WIDTH: usize = 720;
pub const HEIGHT: usize = 480;

const MARGIN_LEFT: usize = 72;
const MARGIN_RIGHT: usize = 18;
const MARGIN_TOP: usize = 42;
const MARGIN_BOTTOM: usize = 48;

pub type Color = [u8; 3];

pub const BLACK: Color = [32, 32, 32];
const GRID: Color = [224, 224, 224];
const WHITE: Color = [255, 255, 255];

/// One curve: points in data coordinates, drawn as a connected polyline.
pub struct Series {
    pub name: String,
    pub color: Color,
    pub points: Vec<(f64, f64)>,
}

/// A dashed horizontal reference line (used for epoch-independent
/// baseline scores).
pub struct HLine {
    pub name: String,
    pub color: Color,
    pub y: f64,
}

struct Canvas {
    px: Vec<u8>,
}

impl Canvas {
    fn new() -> Canvas {
        Canvas { px: vec![255; WIDTH * HEIGHT * 3] }
    }

    fn set(&mut self, x: i64, y: i64, c: Color) {
        if (0..WIDTH as i64).contains(&x) && (0..HEIGHT as i64).contains(&y) {
            let at = (y as usize * WIDTH + x as usize) * 3;
            self.px[at..at + 3].copy_from_slice(&c);
        }
    }

    fn fill_rect(&mut self, x: i64, y: i64, w: i64, h: i64, c: Color) {
        for yy in y..y + h {
            for xx in x..x + w {
                self.set(xx, yy, c);
            }
        }
    }

    /// Bresenham segment; `dash` of 0 draws solid, otherwise alternates
    /// `dash` pixels on / `dash` pixels off.
    fn line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Color, dash: usize) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        let mut step = 0usize;
        loop {
            if dash == 0 || (step / dash) % 2 == 0 {
                self.set(x, y, c);
            }
            step += 1;
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    fn text(&mut self, x: i64, y: i64, s: &str, c: Color, scale: i64) {
        let mut cx = x;
        for ch in s.chars() {
            let glyph = glyph_for(ch);
            for (row, bits) in glyph.iter().enumerate() {
                for col in 0..5 {
                    if bits & (1 << (4 - col)) != 0 {
                        self.fill_rect(
                            cx + col as i64 * scale,
                            y + row as i64 * scale,
                            scale,
                            scale,
                            c,
                        );
                    }
                }
            }
            cx += 6 * scale;
        }
    }

    fn save(&self, path: &Path) -> anyhow::Result<()> {
        let img = image::RgbImage::from_raw(WIDTH as u32, HEIGHT as u32, self.px.clone())
            .expect("buffer sized to WIDTH*HEIGHT*3");
        img.save(path).with_context(|| format!("cannot write plot {}", path.display()))
    }
}

fn text_width(s: &str, scale: i64) -> i64 {
    s.chars().count() as i64 * 6 * scale
}

/// 5x7 glyphs, one byte per row, low 5 bits used (bit 4 = left column).
/// Lowercase input maps onto these uppercase shapes.
fn glyph_for(ch: char) -> [u8; 7] {
    match ch.to_ascii_uppercase() {
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        ',' => [0x00, 0x00, 0x00, 0x00, 0x0C, 0x04, 0x08],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        '+' => [0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        '/' => [0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        '=' => [0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00],
        ' ' => [0; 7],
        // Unknown characters render as a hollow box.
        _ => [0x1F, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1F],
    }
}

/// Compact tick/legend number: plain decimal in a readable range,
/// scientific outside it.
pub fn fmt_num(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if !(0.001..10_000.0).contains(&a) {
        return format!("{v:.1e}");
    }
    let mut s = format!("{v:.3}");
    while s.ends_with('0') {
        s.pop();
    }
    if s.ends_with('.') {
        s.pop();
    }
    s
}

fn nice_range(lo: f64, hi: f64) -> (f64, f64) {
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if lo == hi {
        let pad = if lo == 0.0 { 0.5 } else { lo.abs() * 0.1 };
        return (lo - pad, hi + pad);
    }
    let pad = (hi - lo) * 0.06;
    (lo - pad, hi + pad)
}

/// Renders a line chart to `path` (PNG). Series points are (x, y) in data
/// coordinates; `hlines` draw as dashed horizontals spanning the plot.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    hlines: &[HLine],
    path: &Path,
) -> anyhow::Result<()> {
    let mut canvas = Canvas::new();

    let xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    let ys: Vec<f64> = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.1))
        .chain(hlines.iter().map(|h| h.y))
        .collect();
    let fold = |v: &[f64], init: f64, f: fn(f64, f64) -> f64| v.iter().copied().fold(init, f);
    let (x_lo, x_hi) =
        nice_range(fold(&xs, f64::INFINITY, f64::min), fold(&xs, f64::NEG_INFINITY, f64::max));
    let (y_lo, y_hi) =
        nice_range(fold(&ys, f64::INFINITY, f64::min), fold(&ys, f64::NEG_INFINITY, f64::max));

    let plot_w = (WIDTH - MARGIN_LEFT - MARGIN_RIGHT) as f64;
    let plot_h = (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM) as f64;
    let to_px = |x: f64, y: f64| -> (i64, i64) {
        let fx = (x - x_lo) / (x_hi - x_lo);
        let fy = (y - y_lo) / (y_hi - y_lo);
        (
            (MARGIN_LEFT as f64 + fx * plot_w).round() as i64,
            (MARGIN_TOP as f64 + (1.0 - fy) * plot_h).round() as i64,
        )
    };

    let (left, right) = (MARGIN_LEFT as i64, (WIDTH - MARGIN_RIGHT) as i64);
    let (top, bottom) = (MARGIN_TOP as i64, (HEIGHT - MARGIN_BOTTOM) as i64);

    // Grid and ticks.
    const TICKS: usize = 5;
    for i in 0..=TICKS {
        let f = i as f64 / TICKS as f64;
        let xv = x_lo + f * (x_hi - x_lo);
        let yv = y_lo + f * (y_hi - y_lo);
        let (tx, _) = to_px(xv, y_lo);
        let (_, ty) = to_px(x_lo, yv);
        canvas.line(tx, top, tx, bottom, GRID, 0);
        canvas.line(left, ty, right, ty, GRID, 0);
        let xs_label = fmt_num(xv);
        canvas.text(tx - text_width(&xs_label, 1) / 2, bottom + 6, &xs_label, BLACK, 1);
        let ys_label = fmt_num(yv);
        canvas.text(left - 6 - text_width(&ys_label, 1), ty - 3, &ys_label, BLACK, 1);
    }

    // Axes on top of the grid.
    canvas.line(left, top, left, bottom, BLACK, 0);
    canvas.line(left, bottom, right, bottom, BLACK, 0);

    // Reference lines and curves.
    for h in hlines {
        let (_, y) = to_px(x_lo, h.y);
        canvas.line(left, y, right, y, h.color, 4);
    }
    for s in series {
        let mut prev: Option<(i64, i64)> = None;
        let markers = s.points.len() <= 60;
        for &(x, y) in &s.points {
            let p = to_px(x, y);
            if let Some(q) = prev {
                canvas.line(q.0, q.1, p.0, p.1, s.color, 0);
            }
            if markers {
                canvas.fill_rect(p.0 - 1, p.1 - 1, 3, 3, s.color);
            }
            prev = Some(p);
        }
    }

    // Title and axis labels.
    canvas.text(left, 12, title, BLACK, 2);
    canvas.text(
        left + (plot_w as i64 - text_width(x_label, 1)) / 2,
        HEIGHT as i64 - 20,
        x_label,
        BLACK,
        1,
    );
    canvas.text(4, top - 14, y_label, BLACK, 1);

    // Legend, top-right inside the plot area.
    let entries: Vec<(&str, Color, bool)> = series
        .iter()
        .map(|s| (s.name.as_str(), s.color, false))
        .chain(hlines.iter().map(|h| (h.name.as_str(), h.color, true)))
        .collect();
    let legend_w = entries
        .iter()
        .map(|(name, _, _)| 22 + text_width(name, 1))
        .fold(0, i64::max);
    let lx = right - legend_w - 8;
    let mut ly = top + 8;
    for (name, color, dashed) in entries {
        if dashed {
            canvas.line(lx, ly + 3, lx + 14, ly + 3, color, 3);
        } else {
            canvas.fill_rect(lx, ly + 1, 14, 5, color);
        }
        canvas.text(lx + 22, ly, name, BLACK, 1);
        ly += 13;
    }
    let _ = WHITE;

    canvas.save(path)
}

/// Stable series color per source name (variants and baselines).
pub fn color_for(name: &str) -> Color {
    match name {
        "rgb" => [214, 69, 65],
        "lidar" => [31, 119, 180],
        "multimodal" => [44, 160, 44],
        "straight_pursuit" => [148, 103, 189],
        "dwa_lite" => [255, 127, 14],
        other => {
            // Deterministic fallback hue from the name.
            let h: u32 = other.bytes().fold(2166136261u32, |a, b| {
                (a ^ b as u32).wrapping_mul(16777619)
            });
            [96 + (h % 128) as u8, 96 + ((h >> 8) % 128) as u8, 96 + ((h >> 16) % 128) as u8]
        }
    }
}
