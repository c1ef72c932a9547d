//! Static overlay rendering: the heatmap colormap, alpha blending, panel
//! strips, and correspondence-line figures.

use std::io::Cursor;
use std::path::Path;

use anyhow::Context;
use image::{ImageFormat, Rgb, RgbImage};
use ndarray::Array2;

use diffmatch::types::ImageRecord;
use diffmatch::util::{bilinear_resize, write_atomic};

/// Correspondence-line colors: blue when the match is within the PCK
/// threshold, orange when it is not.
pub const CORRECT_COLOR: Rgb<u8> = Rgb([51, 102, 229]);
pub const WRONG_COLOR: Rgb<u8> = Rgb([229, 127, 26]);

/// Gutter between side-by-side images and strip panels, in pixels.
pub const GUTTER: u32 = 4;

/// Overlay opacity where the map reaches 1; lower values fade toward the
/// underlying image everywhere.
const BLEND: f64 = 0.85;

/// Anchor colors of the heatmap ramp at nine evenly spaced stops
/// (perceptually uniform, dark blue through teal to yellow); lookups
/// interpolate linearly between neighbors.
const RAMP: [[f64; 3]; 9] = [
    [68.0, 1.0, 84.0],
    [72.0, 40.0, 120.0],
    [62.0, 74.0, 137.0],
    [49.0, 104.0, 142.0],
    [38.0, 130.0, 142.0],
    [31.0, 158.0, 137.0],
    [53.0, 183.0, 121.0],
    [109.0, 205.0, 89.0],
    [253.0, 231.0, 37.0],
];

/// Ramp color for a value in [0,1]; out-of-range and non-finite values
/// clamp to the ends.
pub fn colormap(v: f64) -> Rgb<u8> {
    let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    let pos = v * (RAMP.len() - 1) as f64;
    let i = (pos.floor() as usize).min(RAMP.len() - 2);
    let t = pos - i as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (RAMP[i][c] + t * (RAMP[i + 1][c] - RAMP[i][c])).round() as u8;
    }
    Rgb(out)
}

/// A record's [0,1] pixels as an 8-bit RGB image.
pub fn to_rgb(record: &ImageRecord) -> RgbImage {
    let (h, w) = (record.pixels.shape()[0], record.pixels.shape()[1]);
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c| byte(record.pixels[[y as usize, x as usize, c]] * 255.0);
        Rgb([at(0), at(1), at(2)])
    })
}

/// Alpha-blend an attention map over its image. The map is resampled to
/// the image resolution first; blend weight scales with the map value, so
/// cells at 0 keep the image pixel exactly and an all-zero map reproduces
/// the source image byte for byte.
pub fn blend_heatmap(record: &ImageRecord, map: &Array2<f64>) -> RgbImage {
    let (h, w) = (record.pixels.shape()[0], record.pixels.shape()[1]);
    let resized;
    let values = if map.dim() == (h, w) {
        map
    } else {
        resized = bilinear_resize(map, h, w);
        &resized
    };
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = values[[y as usize, x as usize]].clamp(0.0, 1.0);
        let weight = BLEND * v;
        let tint = colormap(v);
        let mut out = [0u8; 3];
        for c in 0..3 {
            let base = record.pixels[[y as usize, x as usize, c]] * 255.0;
            out[c] = byte((1.0 - weight) * base + weight * tint[c] as f64);
        }
        Rgb(out)
    })
}

/// Two images left and right of a white gutter, top-aligned.
pub fn side_by_side(left: &RgbImage, right: &RgbImage) -> RgbImage {
    panel_strip(&[left.clone(), right.clone()])
}

/// Horizontal strip of panels separated by white gutters, top-aligned.
pub fn panel_strip(panels: &[RgbImage]) -> RgbImage {
    let height = panels.iter().map(|p| p.height()).max().unwrap_or(1).max(1);
    let width = panels.iter().map(|p| p.width()).sum::<u32>()
        + GUTTER * panels.len().saturating_sub(1) as u32;
    let mut out = RgbImage::from_pixel(width.max(1), height, Rgb([255, 255, 255]));
    let mut ox = 0;
    for panel in panels {
        for (x, y, px) in panel.enumerate_pixels() {
            out.put_pixel(ox + x, y, *px);
        }
        ox += panel.width() + GUTTER;
    }
    out
}

/// Straight line from `from` to `to`, clipped to the image bounds.
pub fn draw_line(img: &mut RgbImage, from: (i64, i64), to: (i64, i64), color: Rgb<u8>) {
    let (mut x0, mut y0) = from;
    let (x1, y1) = to;
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        put_clipped(img, x0, y0, color);
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

/// Filled square of the given radius centered at `center`, clipped to the
/// image bounds.
pub fn draw_marker(img: &mut RgbImage, center: (i64, i64), radius: i64, color: Rgb<u8>) {
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            put_clipped(img, center.0 + dx, center.1 + dy, color);
        }
    }
}

/// Encode as PNG and write atomically.
pub fn save_png(img: &RgbImage, path: &Path) -> anyhow::Result<()> {
    let mut bytes = Vec::new();
    img.write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)
        .with_context(|| format!("encoding {}", path.display()))?;
    write_atomic(path, &bytes)?;
    Ok(())
}

fn byte(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn put_clipped(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}
