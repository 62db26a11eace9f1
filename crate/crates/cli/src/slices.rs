//! 8-bit renderings of volume slices.

use std::io::Cursor;

use anyhow::Result;
use image::{ExtendedColorType, ImageEncoder};

/// Min-max window of one slice mapped onto 0..=255. A constant slice renders
/// mid-gray (128). Returns the pixels and the window.
pub fn gray8(values: &[f64]) -> (Vec<u8>, [f64; 2]) {
    let (lo, hi) = values
        .iter()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if hi <= lo {
        let w = if lo.is_finite() { [lo, lo] } else { [0.0, 0.0] };
        return (vec![128; values.len()], w);
    }
    let scale = 255.0 / (hi - lo);
    let px = values
        .iter()
        .map(|&v| {
            if v.is_finite() {
                ((v - lo) * scale).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect();
    (px, [lo, hi])
}

pub fn png_gray(pixels: &[u8], width: usize, height: usize) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    image::codecs::png::PngEncoder::new(&mut buf).write_image(
        pixels,
        width as u32,
        height as u32,
        ExtendedColorType::L8,
    )?;
    Ok(buf.into_inner())
}
