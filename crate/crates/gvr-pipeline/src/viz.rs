//! Rendering of rationale overlays, image grids, and metric curves.
//!
//! Difference maps are scaled with the signed-extremes rule (both extremes
//! reach +/-1, zeros stay zero), then blended over the grayscale base:
//! purple where evidence was removed, orange where it was added, with
//! per-pixel opacity alpha * |value| so zero differences stay transparent.

use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder};
use ndarray::Array2;
use std::fmt::Write as _;

use crate::error::{PipelineError, Result};

/// Color and opacity convention for rationale overlays.
#[derive(Debug, Clone)]
pub struct OverlaySpec {
    pub positive_color: [u8; 3],
    pub negative_color: [u8; 3],
    pub alpha: f32,
}

impl Default for OverlaySpec {
    fn default() -> Self {
        OverlaySpec {
            positive_color: [128, 0, 160],
            negative_color: [255, 140, 0],
            alpha: 0.5,
        }
    }
}

/// Two-sided normalization: positive values are divided by the maximum
/// positive value, negatives by the magnitude of the minimum, so both
/// extremes reach +/-1 while zeros and signs are preserved. An all-zero
/// (or one-sided) map leaves the absent side untouched.
pub fn scale_difference_map(diff: &Array2<f32>) -> Array2<f32> {
    let max_pos = diff.iter().copied().filter(|&v| v > 0.0).fold(0.0f32, f32::max);
    let min_neg = diff.iter().copied().filter(|&v| v < 0.0).fold(0.0f32, f32::min);
    diff.mapv(|v| {
        if v > 0.0 {
            v / max_pos
        } else if v < 0.0 {
            v / -min_neg
        } else {
            v
        }
    })
}

/// Symmetric alternative: everything divided by max |value|, preserving
/// relative magnitudes across signs. All-zero maps stay all-zero.
pub fn scale_difference_map_symmetric(diff: &Array2<f32>) -> Array2<f32> {
    let max_abs = diff.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
    if max_abs == 0.0 {
        return diff.clone();
    }
    diff.mapv(|v| v / max_abs)
}

/// Tanh-range pixel to display byte.
fn gray_byte(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Blend a scaled difference map over a grayscale base image into RGBA
/// rows (row-major, 4 bytes per pixel).
pub fn overlay_rgba(
    base: &Array2<f32>,
    scaled: &Array2<f32>,
    spec: &OverlaySpec,
) -> Result<Vec<u8>> {
    if base.dim() != scaled.dim() {
        return Err(PipelineError::contract(format!(
            "overlay base {:?} and difference map {:?} shapes differ",
            base.dim(),
            scaled.dim()
        )));
    }
    let mut rgba = Vec::with_capacity(base.len() * 4);
    for (b, m) in base.iter().zip(scaled.iter()) {
        let gray = gray_byte(*b) as f32;
        let m = m.clamp(-1.0, 1.0);
        let a = spec.alpha * m.abs();
        let color = if m > 0.0 {
            spec.positive_color
        } else {
            spec.negative_color
        };
        for c in 0..3 {
            rgba.push(((1.0 - a) * gray + a * color[c] as f32).round() as u8);
        }
        rgba.push(255);
    }
    Ok(rgba)
}

/// PNG bytes of an overlay; deterministic for identical inputs.
pub fn render_overlay(
    base: &Array2<f32>,
    scaled: &Array2<f32>,
    spec: &OverlaySpec,
) -> Result<Vec<u8>> {
    let rgba = overlay_rgba(base, scaled, spec)?;
    encode_png(&rgba, base.ncols() as u32, base.nrows() as u32)
}

fn encode_png(rgba: &[u8], width: u32, height: u32) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    PngEncoder::new(&mut out)
        .write_image(rgba, width, height, ExtendedColorType::Rgba8)
        .map_err(|e| PipelineError::contract(format!("png encoding failed: {e}")))?;
    Ok(out)
}

/// Lay out equally sized grayscale panels in a grid with `columns` columns
/// and a 2-pixel white gutter, returned as PNG bytes.
pub fn render_grid(panels: &[Array2<f32>], columns: usize) -> Result<Vec<u8>> {
    if panels.is_empty() {
        return Err(PipelineError::contract("grid needs at least one panel"));
    }
    if columns == 0 {
        return Err(PipelineError::contract("grid needs at least one column"));
    }
    let dim = panels[0].dim();
    if panels.iter().any(|p| p.dim() != dim) {
        return Err(PipelineError::contract("grid panels must share one shape"));
    }
    let (ph, pw) = dim;
    let columns = columns.min(panels.len());
    let rows = panels.len().div_ceil(columns);
    const GAP: usize = 2;
    let width = columns * pw + (columns - 1) * GAP;
    let height = rows * ph + (rows - 1) * GAP;

    let mut canvas = vec![255u8; width * height];
    for (idx, panel) in panels.iter().enumerate() {
        let r0 = (idx / columns) * (ph + GAP);
        let c0 = (idx % columns) * (pw + GAP);
        for i in 0..ph {
            for j in 0..pw {
                canvas[(r0 + i) * width + c0 + j] = gray_byte(panel[[i, j]]);
            }
        }
    }

    let rgba: Vec<u8> = canvas
        .iter()
        .flat_map(|&g| [g, g, g, 255])
        .collect();
    encode_png(&rgba, width as u32, height as u32)
}

/// One labeled line of a curve plot.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [[u8; 3]; 4] = [[31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40]];

/// Render line series into a labeled plot. Returns PNG bytes plus the same
/// data as CSV (`series,x,y`) for external plotting.
pub fn render_curve(
    series: &[Series],
    x_label: &str,
    y_label: &str,
) -> Result<(Vec<u8>, String)> {
    if series.is_empty() || series.iter().all(|s| s.points.is_empty()) {
        return Err(PipelineError::contract("curve rendering needs data points"));
    }
    for s in series {
        if s.points.iter().any(|p| !p.0.is_finite() || !p.1.is_finite()) {
            return Err(PipelineError::contract(format!(
                "series {} contains non-finite points",
                s.label
            )));
        }
    }

    let mut csv = String::from("series,x,y\n");
    for s in series {
        for &(x, y) in &s.points {
            writeln!(csv, "{},{x},{y}", s.label).unwrap();
        }
    }

    const W: usize = 640;
    const H: usize = 480;
    const ML: usize = 70; // left margin
    const MR: usize = 20;
    const MT: usize = 40;
    const MB: usize = 50;

    let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in series {
        for &(x, y) in &s.points {
            xmin = xmin.min(x);
            xmax = xmax.max(x);
            ymin = ymin.min(y);
            ymax = ymax.max(y);
        }
    }
    if xmin == xmax {
        xmin -= 0.5;
        xmax += 0.5;
    }
    if ymin == ymax {
        ymin -= 0.5;
        ymax += 0.5;
    }

    let mut canvas = Canvas::new(W, H);
    let to_px = |x: f64| ML as f64 + (x - xmin) / (xmax - xmin) * (W - ML - MR) as f64;
    let to_py = |y: f64| (H - MB) as f64 - (y - ymin) / (ymax - ymin) * (H - MB - MT) as f64;

    // Axes.
    canvas.line(ML, MT, ML, H - MB, [0, 0, 0]);
    canvas.line(ML, H - MB, W - MR, H - MB, [0, 0, 0]);

    // Tick labels at both extremes of each axis.
    for (value, frac) in [(xmin, 0.0), ((xmin + xmax) / 2.0, 0.5), (xmax, 1.0)] {
        let px = ML + (frac * (W - ML - MR) as f64) as usize;
        canvas.line(px, H - MB, px, H - MB + 4, [0, 0, 0]);
        let text = format_tick(value);
        canvas.text(px.saturating_sub(text.len() * 3), H - MB + 8, &text, [0, 0, 0]);
    }
    for (value, frac) in [(ymin, 0.0), ((ymin + ymax) / 2.0, 0.5), (ymax, 1.0)] {
        let py = (H - MB) - (frac * (H - MB - MT) as f64) as usize;
        canvas.line(ML - 4, py, ML, py, [0, 0, 0]);
        let text = format_tick(value);
        canvas.text(ML.saturating_sub(6 * text.len() + 8), py.saturating_sub(3), &text, [0, 0, 0]);
    }

    // Axis names and legend.
    canvas.text(ML + (W - ML - MR) / 2 - x_label.len() * 3, H - MB + 24, x_label, [0, 0, 0]);
    canvas.text(8, MT.saturating_sub(20), y_label, [0, 0, 0]);
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let ly = MT + i * 12;
        canvas.line(W - MR - 90, ly + 3, W - MR - 74, ly + 3, color);
        canvas.text(W - MR - 70, ly, &s.label, [0, 0, 0]);
    }

    // Data polylines.
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for pair in s.points.windows(2) {
            canvas.line(
                to_px(pair[0].0).round() as usize,
                to_py(pair[0].1).round() as usize,
                to_px(pair[1].0).round() as usize,
                to_py(pair[1].1).round() as usize,
                color,
            );
        }
        if s.points.len() == 1 {
            let px = to_px(s.points[0].0).round() as usize;
            let py = to_py(s.points[0].1).round() as usize;
            canvas.line(px.saturating_sub(2), py, px + 2, py, color);
            canvas.line(px, py.saturating_sub(2), px, py + 2, color);
        }
    }

    let png = encode_png(&canvas.rgba, W as u32, H as u32)?;
    Ok((png, csv))
}

/// One image cell of a comparison page: RGBA bytes, row-major.
#[derive(Debug, Clone)]
pub struct RgbaCell {
    pub width: usize,
    pub height: usize,
    pub rgba: Vec<u8>,
}

impl RgbaCell {
    /// Grayscale panel as an opaque cell.
    pub fn from_gray(panel: &Array2<f32>) -> RgbaCell {
        let rgba = panel
            .iter()
            .flat_map(|&v| {
                let g = gray_byte(v);
                [g, g, g, 255]
            })
            .collect();
        RgbaCell {
            width: panel.ncols(),
            height: panel.nrows(),
            rgba,
        }
    }
}

/// Assemble equally sized RGBA cells into a captioned page: one header row
/// of column labels, then one row per entry, 2-pixel white gutters.
pub fn compose_page(rows: &[Vec<RgbaCell>], col_labels: &[String]) -> Result<Vec<u8>> {
    if rows.is_empty() {
        return Err(PipelineError::contract("comparison page needs rows"));
    }
    let columns = col_labels.len();
    if columns == 0 || rows.iter().any(|r| r.len() != columns) {
        return Err(PipelineError::contract(
            "every page row must match the label count",
        ));
    }
    let cw = rows[0][0].width;
    let ch = rows[0][0].height;
    for row in rows {
        for cell in row {
            if cell.width != cw || cell.height != ch || cell.rgba.len() != cw * ch * 4 {
                return Err(PipelineError::contract("page cells must share one size"));
            }
        }
    }

    const GAP: usize = 2;
    const HEADER: usize = 12;
    let width = columns * cw + (columns - 1) * GAP;
    let height = HEADER + rows.len() * (ch + GAP);

    let mut canvas = Canvas::new(width, height);
    for (c, label) in col_labels.iter().enumerate() {
        let x = c * (cw + GAP) + cw.saturating_sub(label.len() * 6) / 2;
        canvas.text(x, 2, label, [0, 0, 0]);
    }
    for (r, row) in rows.iter().enumerate() {
        let y0 = HEADER + r * (ch + GAP);
        for (c, cell) in row.iter().enumerate() {
            let x0 = c * (cw + GAP);
            for i in 0..ch {
                for j in 0..cw {
                    let src = (i * cw + j) * 4;
                    let dst = ((y0 + i) * width + x0 + j) * 4;
                    canvas.rgba[dst..dst + 4].copy_from_slice(&cell.rgba[src..src + 4]);
                }
            }
        }
    }
    encode_png(&canvas.rgba, width as u32, height as u32)
}

fn format_tick(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 0.001 && v.abs() < 100000.0 {
        let s = format!("{v:.3}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        s.to_string()
    } else {
        format!("{v:.1e}")
    }
}

/// Fixed-size RGBA raster with line and text primitives.
struct Canvas {
    w: usize,
    h: usize,
    rgba: Vec<u8>,
}

impl Canvas {
    fn new(w: usize, h: usize) -> Canvas {
        Canvas {
            w,
            h,
            rgba: vec![255u8; w * h * 4],
        }
    }

    fn set(&mut self, x: usize, y: usize, color: [u8; 3]) {
        if x >= self.w || y >= self.h {
            return;
        }
        let i = (y * self.w + x) * 4;
        self.rgba[i..i + 3].copy_from_slice(&color);
    }

    /// Bresenham segment between two raster points.
    fn line(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, color: [u8; 3]) {
        let (mut x0, mut y0) = (x0 as i64, y0 as i64);
        let (x1, y1) = (x1 as i64, y1 as i64);
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            if x0 >= 0 && y0 >= 0 {
                self.set(x0 as usize, y0 as usize, color);
            }
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    /// 5x7 bitmap text; lowercase folds to uppercase, unknown glyphs skip.
    fn text(&mut self, x: usize, y: usize, s: &str, color: [u8; 3]) {
        let mut cx = x;
        for ch in s.chars() {
            if let Some(rows) = glyph(ch.to_ascii_uppercase()) {
                for (dy, row) in rows.iter().enumerate() {
                    for dx in 0..5 {
                        if row & (0b10000 >> dx) != 0 {
                            self.set(cx + dx, y + dy, color);
                        }
                    }
                }
            }
            cx += 6;
        }
    }
}

/// 5x7 glyphs, one byte per row, bit 4 = leftmost column.
fn glyph(c: char) -> Option<[u8; 7]> {
    Some(match c {
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
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C],
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
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x1B, 0x11],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        ',' => [0x00, 0x00, 0x00, 0x00, 0x0C, 0x04, 0x08],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '+' => [0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        '%' => [0x19, 0x19, 0x02, 0x04, 0x08, 0x13, 0x13],
        '/' => [0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        '=' => [0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00],
        ' ' => [0x00; 7],
        _ => return None,
    })
}
