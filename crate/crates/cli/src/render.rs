//! PNG input and output: ground-truth masks, binarized predictions and
//! heat-map overlays.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, Rgb, RgbImage};
use ndarray::Array2;
use superad::write_atomic;

use crate::error::{CliError, Result};

fn image_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

/// Any non-zero pixel is anomalous.
pub fn read_mask(path: &Path) -> Result<Array2<bool>> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
        img.get_pixel(j as u32, i as u32)[0] != 0
    }))
}

fn encode_png(img: DynamicImage, path: &Path) -> Result<()> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| image_err(path, e))?;
    write_atomic(path, buf.get_ref())?;
    Ok(())
}

/// 8-bit mask, 255 for anomalous pixels.
pub fn write_mask_png(mask: &Array2<bool>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if mask[[y as usize, x as usize]] { 255 } else { 0 }])
    });
    encode_png(DynamicImage::ImageLuma8(img), path)
}

/// Blue, cyan, green, yellow, red at `t` = 0, 0.25, 0.5, 0.75, 1.
pub fn ramp(t: f64) -> [f64; 3] {
    const STOPS: [[f64; 3]; 5] = [
        [0.0, 0.0, 255.0],
        [0.0, 255.0, 255.0],
        [0.0, 255.0, 0.0],
        [255.0, 255.0, 0.0],
        [255.0, 0.0, 0.0],
    ];
    let x = t.clamp(0.0, 1.0) * 4.0;
    let i = (x.floor() as usize).min(3);
    let f = x - i as f64;
    std::array::from_fn(|c| STOPS[i][c] * (1.0 - f) + STOPS[i + 1][c] * f)
}

/// Heat-map overlay next to the thresholded mask. Scores are normalized by
/// the map maximum; each pixel is blended with its ramp color at opacity
/// half the normalized score, so a zero map leaves the image untouched.
pub fn overlay(map: &Array2<f32>, image: &RgbImage, threshold: f32) -> Result<RgbImage> {
    let (h, w) = map.dim();
    if (image.height() as usize, image.width() as usize) != (h, w) {
        return Err(CliError::Data(format!(
            "map is {h}x{w} but the image is {}x{}",
            image.height(),
            image.width()
        )));
    }
    let max = map.iter().copied().fold(0.0f32, f32::max);
    let mut out = RgbImage::new(2 * w as u32, h as u32);
    for ((i, j), &v) in map.indexed_iter() {
        let src = image.get_pixel(j as u32, i as u32);
        let n = if max > 0.0 { (v.max(0.0) / max) as f64 } else { 0.0 };
        let alpha = 0.5 * n;
        let color = ramp(n);
        let px = std::array::from_fn(|c| {
            if alpha == 0.0 {
                src[c]
            } else {
                ((1.0 - alpha) * src[c] as f64 + alpha * color[c]).round().clamp(0.0, 255.0) as u8
            }
        });
        out.put_pixel(j as u32, i as u32, Rgb(px));
        let m = if v > threshold { 255 } else { 0 };
        out.put_pixel((w + j) as u32, i as u32, Rgb([m, m, m]));
    }
    Ok(out)
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path).map_err(|e| image_err(path, e))?.to_rgb8())
}

pub fn write_rgb_png(img: &RgbImage, path: &Path) -> Result<()> {
    encode_png(DynamicImage::ImageRgb8(img.clone()), path)
}
