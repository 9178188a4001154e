//! Rendering: grayscale and diverging-colormap rasters, a small bitmap font
//! for in-image annotations, explanation panels, sensitivity-grid panels, and
//! PNG export.
//!
//! Attribution maps render on a symmetric diverging scale normalized per
//! panel by the maximum absolute value, with the scale annotated under the
//! map. Negative attribution is blue, positive is red, zero is white.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::ArrayD;
use thiserror::Error;

use crate::grad::Scalar;

#[derive(Debug, Error)]
pub enum VizError {
    #[error("writing {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("encoding {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("bad shape: {0}")]
    BadShape(String),
}

// ---------------------------------------------------------------------------
// Color scales
// ---------------------------------------------------------------------------

/// Endpoint of the negative (blue) side of the diverging scale.
const NEG_END: [f64; 3] = [59.0, 76.0, 192.0];
/// Endpoint of the positive (red) side of the diverging scale.
const POS_END: [f64; 3] = [180.0, 4.0, 38.0];

/// Symmetric diverging colormap on `t` in [-1, 1]: blue for negative, white
/// at zero, red for positive. Values outside the range clamp.
pub fn diverging_rgb(t: f64) -> [u8; 3] {
    let t = t.clamp(-1.0, 1.0);
    let end = if t >= 0.0 { POS_END } else { NEG_END };
    let a = t.abs();
    let mut out = [0u8; 3];
    for ch in 0..3 {
        let v = 255.0 + (end[ch] - 255.0) * a;
        out[ch] = v.round().clamp(0.0, 255.0) as u8;
    }
    out
}

/// Grayscale mapping for image values in [-1, 1].
pub fn gray_rgb(v: f64) -> [u8; 3] {
    let g = ((v.clamp(-1.0, 1.0) + 1.0) / 2.0 * 255.0).round() as u8;
    [g, g, g]
}

fn expect_2d<F: Scalar>(a: &ArrayD<F>, what: &str) -> Result<(usize, usize), VizError> {
    if a.ndim() != 2 {
        return Err(VizError::BadShape(format!("{what} must be 2-d, got {:?}", a.shape())));
    }
    Ok((a.shape()[0], a.shape()[1]))
}

/// Render a [-1, 1] grayscale image to RGB.
pub fn render_gray<F: Scalar>(img: &ArrayD<F>) -> Result<RgbImage, VizError> {
    let (h, w) = expect_2d(img, "image")?;
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            out.put_pixel(x as u32, y as u32, Rgb(gray_rgb(img[[y, x]].to_f64())));
        }
    }
    Ok(out)
}

/// Render an attribution map on the diverging scale, normalized by its own
/// maximum absolute value. Returns the raster and the normalizer that was
/// used (0 for an all-zero map, which renders plain white).
pub fn render_map<F: Scalar>(map: &ArrayD<F>) -> Result<(RgbImage, f64), VizError> {
    let (h, w) = expect_2d(map, "map")?;
    let maxabs = map.iter().fold(0.0f64, |m, &v| m.max(v.to_f64().abs()));
    let scale = if maxabs > 0.0 { 1.0 / maxabs } else { 0.0 };
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let t = map[[y, x]].to_f64() * scale;
            out.put_pixel(x as u32, y as u32, Rgb(diverging_rgb(t)));
        }
    }
    Ok((out, maxabs))
}

/// Nearest-neighbour integer upscale.
pub fn upscale(img: &RgbImage, k: u32) -> RgbImage {
    let k = k.max(1);
    let (w, h) = img.dimensions();
    let mut out = RgbImage::new(w * k, h * k);
    for y in 0..h * k {
        for x in 0..w * k {
            out.put_pixel(x, y, *img.get_pixel(x / k, y / k));
        }
    }
    out
}

/// Encode as PNG at `path`.
pub fn save_png(img: &RgbImage, path: &Path) -> Result<(), VizError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)
                .map_err(|e| VizError::Io { path: path.into(), source: e })?;
        }
    }
    img.save(path).map_err(|e| VizError::Image { path: path.into(), source: e })
}

/// Write a map's raw signed values as CSV (one row per image row).
pub fn save_map_values<F: Scalar>(map: &ArrayD<F>, path: &Path) -> Result<(), VizError> {
    let (h, w) = expect_2d(map, "map")?;
    let mut text = String::new();
    for y in 0..h {
        for x in 0..w {
            if x > 0 {
                text.push(',');
            }
            text.push_str(&format!("{}", map[[y, x]].to_f64()));
        }
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| VizError::Io { path: path.into(), source: e })
}

// ---------------------------------------------------------------------------
// Bitmap font
// ---------------------------------------------------------------------------

/// 5x7 glyph bitmaps, one byte per row, low 5 bits used, MSB of the 5 on the
/// left. Covers digits, punctuation used in annotations, and the few letters
/// that appear in probability/scale labels.
fn glyph(ch: char) -> [u8; 7] {
    match ch {
        '0' => [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110],
        '1' => [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
        '2' => [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111],
        '3' => [0b01110, 0b10001, 0b00001, 0b00110, 0b00001, 0b10001, 0b01110],
        '4' => [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010],
        '5' => [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110],
        '6' => [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110],
        '7' => [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000],
        '8' => [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110],
        '9' => [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100],
        '.' => [0b00000, 0b00000, 0b00000, 0b00000, 0b00000, 0b00110, 0b00110],
        '-' => [0b00000, 0b00000, 0b00000, 0b01110, 0b00000, 0b00000, 0b00000],
        '+' => [0b00000, 0b00100, 0b00100, 0b11111, 0b00100, 0b00100, 0b00000],
        '(' => [0b00010, 0b00100, 0b01000, 0b01000, 0b01000, 0b00100, 0b00010],
        ')' => [0b01000, 0b00100, 0b00010, 0b00010, 0b00010, 0b00100, 0b01000],
        '=' => [0b00000, 0b00000, 0b11111, 0b00000, 0b11111, 0b00000, 0b00000],
        ' ' => [0; 7],
        'p' => [0b00000, 0b11110, 0b10001, 0b10001, 0b11110, 0b10000, 0b10000],
        'i' => [0b00100, 0b00000, 0b01100, 0b00100, 0b00100, 0b00100, 0b01110],
        'n' => [0b00000, 0b00000, 0b11110, 0b10001, 0b10001, 0b10001, 0b10001],
        'f' => [0b00110, 0b01000, 0b11110, 0b01000, 0b01000, 0b01000, 0b01000],
        'a' => [0b00000, 0b00000, 0b01110, 0b00001, 0b01111, 0b10001, 0b01111],
        'm' => [0b00000, 0b00000, 0b11010, 0b10101, 0b10101, 0b10101, 0b10101],
        'x' => [0b00000, 0b00000, 0b10001, 0b01010, 0b00100, 0b01010, 0b10001],
        'c' => [0b00000, 0b00000, 0b01110, 0b10000, 0b10000, 0b10001, 0b01110],
        'l' => [0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
        's' => [0b00000, 0b00000, 0b01111, 0b10000, 0b01110, 0b00001, 0b11110],
        // Unknown characters render as a filled box so missing glyphs are
        // visible rather than silently blank.
        _ => [0b11111, 0b11111, 0b11111, 0b11111, 0b11111, 0b11111, 0b11111],
    }
}

/// Pixel width of `text` at integer `scale` (glyphs advance 6 columns).
pub fn text_width(text: &str, scale: u32) -> u32 {
    let n = text.chars().count() as u32;
    if n == 0 {
        0
    } else {
        (n * 6 - 1) * scale
    }
}

/// Height of one text line at integer `scale`.
pub fn text_height(scale: u32) -> u32 {
    7 * scale
}

/// Draw `text` with its top-left corner at (x, y). Out-of-bounds pixels clip.
pub fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, scale: u32, color: [u8; 3]) {
    let k = scale.max(1) as i64;
    let (w, h) = img.dimensions();
    let mut cx = x;
    for ch in text.chars() {
        let rows = glyph(ch);
        for (ry, row) in rows.iter().enumerate() {
            for rx in 0..5i64 {
                if row & (0b10000 >> rx) == 0 {
                    continue;
                }
                for dy in 0..k {
                    for dx in 0..k {
                        let px = cx + rx * k + dx;
                        let py = y + ry as i64 * k + dy;
                        if px >= 0 && py >= 0 && (px as u32) < w && (py as u32) < h {
                            img.put_pixel(px as u32, py as u32, Rgb(color));
                        }
                    }
                }
            }
        }
        cx += 6 * k;
    }
}

// ---------------------------------------------------------------------------
// Panels
// ---------------------------------------------------------------------------

const PANEL_BG: [u8; 3] = [235, 235, 235];
const PANEL_FG: [u8; 3] = [20, 20, 20];

fn blit(dst: &mut RgbImage, src: &RgbImage, x0: u32, y0: u32) {
    for (x, y, px) in src.enumerate_pixels() {
        if x0 + x < dst.width() && y0 + y < dst.height() {
            dst.put_pixel(x0 + x, y0 + y, *px);
        }
    }
}

/// Explanation panel: input, attribution map (diverging colormap), and
/// counterfactual side by side, with the annotation text above and a scale
/// bar for the map's normalizer below. `scale` is a nearest-neighbour
/// upscaling factor for the three sub-images.
pub fn explanation_panel<F: Scalar>(
    input: &ArrayD<F>,
    map: &ArrayD<F>,
    counterfactual: &ArrayD<F>,
    annotation: &str,
    scale: u32,
) -> Result<RgbImage, VizError> {
    let (h, w) = expect_2d(input, "input")?;
    for (a, what) in [(map, "map"), (counterfactual, "counterfactual")] {
        if expect_2d(a, what)? != (h, w) {
            return Err(VizError::BadShape(format!(
                "{what} shape {:?} does not match input {h}x{w}",
                a.shape()
            )));
        }
    }
    let k = scale.max(1);
    let (pw, ph) = (w as u32 * k, h as u32 * k);
    let margin = 2 * k;
    let band = 9 * k; // text strip above, scale-bar strip below
    let total_w = 4 * margin + 3 * pw;
    let total_h = 2 * band + ph;

    let mut out = RgbImage::from_pixel(total_w, total_h, Rgb(PANEL_BG));

    let input_img = upscale(&render_gray(input)?, k);
    let (map_small, maxabs) = render_map(map)?;
    let map_img = upscale(&map_small, k);
    let cf_img = upscale(&render_gray(counterfactual)?, k);

    let y0 = band;
    let xs = [margin, 2 * margin + pw, 3 * margin + 2 * pw];
    blit(&mut out, &input_img, xs[0], y0);
    blit(&mut out, &map_img, xs[1], y0);
    blit(&mut out, &cf_img, xs[2], y0);

    // Annotation, top-left above the input panel.
    draw_text(&mut out, margin as i64, k as i64, annotation, k, PANEL_FG);

    // Scale bar under the attribution panel: full diverging ramp with the
    // normalizer annotated at both ends.
    let bar_h = 3 * k;
    let bar_y = y0 + ph + 2 * k;
    for bx in 0..pw {
        let t = if pw > 1 { 2.0 * bx as f64 / (pw - 1) as f64 - 1.0 } else { 0.0 };
        let col = Rgb(diverging_rgb(t));
        for by in 0..bar_h {
            if xs[1] + bx < total_w && bar_y + by < total_h {
                out.put_pixel(xs[1] + bx, bar_y + by, col);
            }
        }
    }
    let neg_label = format!("-{maxabs:.2}");
    let pos_label = format!("+{maxabs:.2}");
    let ty = (bar_y + bar_h) as i64 - 7 * k as i64 + 9 * k as i64 / 2;
    let ty = ty.min((total_h - text_height(k)) as i64).max(0);
    draw_text(
        &mut out,
        xs[1] as i64 - text_width(&neg_label, k) as i64 - k as i64,
        ty,
        &neg_label,
        k,
        PANEL_FG,
    );
    draw_text(&mut out, (xs[1] + pw) as i64 + k as i64, ty, &pos_label, k, PANEL_FG);
    Ok(out)
}

/// Sensitivity-grid panel: the 2x2 composite (grayscale) and its attribution
/// map (diverging) side by side, tile boundaries ruled, and the positive
/// tile outlined in red on the composite.
pub fn grid_panel<F: Scalar>(
    composite: &ArrayD<F>,
    map: &ArrayD<F>,
    positive_slot: usize,
    scale: u32,
) -> Result<RgbImage, VizError> {
    let (h, w) = expect_2d(composite, "composite")?;
    if expect_2d(map, "map")? != (h, w) {
        return Err(VizError::BadShape(format!(
            "map shape {:?} does not match composite {h}x{w}",
            map.shape()
        )));
    }
    if positive_slot >= 4 {
        return Err(VizError::BadShape(format!("positive_slot {positive_slot} out of range")));
    }
    let k = scale.max(1);
    let (pw, ph) = (w as u32 * k, h as u32 * k);
    let margin = 2 * k;
    let total_w = 3 * margin + 2 * pw;
    let total_h = 2 * margin + ph;
    let mut out = RgbImage::from_pixel(total_w, total_h, Rgb(PANEL_BG));

    let comp_img = upscale(&render_gray(composite)?, k);
    let (map_small, _) = render_map(map)?;
    let map_img = upscale(&map_small, k);
    let xs = [margin, 2 * margin + pw];
    blit(&mut out, &comp_img, xs[0], margin);
    blit(&mut out, &map_img, xs[1], margin);

    // Tile boundaries on both panels.
    let rule = Rgb([90, 90, 90]);
    for &x0 in &xs {
        for dy in 0..ph {
            out.put_pixel(x0 + pw / 2, margin + dy, rule);
        }
        for dx in 0..pw {
            out.put_pixel(x0 + dx, margin + ph / 2, rule);
        }
    }

    // Positive tile outline on the composite (slots are row-major).
    let red = Rgb([220, 30, 30]);
    let (ty, tx) = (positive_slot / 2, positive_slot % 2);
    let (ox, oy) = (xs[0] + tx as u32 * pw / 2, margin + ty as u32 * ph / 2);
    let (tw, th) = (pw / 2, ph / 2);
    for dx in 0..tw {
        out.put_pixel(ox + dx, oy, red);
        out.put_pixel(ox + dx, oy + th - 1, red);
    }
    for dy in 0..th {
        out.put_pixel(ox, oy + dy, red);
        out.put_pixel(ox + tw - 1, oy + dy, red);
    }
    Ok(out)
}
