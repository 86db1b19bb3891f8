use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};
use ndarray::Array3;

use super::ImageInput;
use crate::error::{Result, SculptError};

/// Loads any PNG as 8-bit RGB; alpha is composited over white.
pub fn load_png(path: &Path) -> Result<ImageInput> {
    let decoded = image::open(path).map_err(|source| SculptError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let rgba = decoded.to_rgba8();
    let (w, h) = rgba.dimensions();
    let pixels = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        let p = rgba.get_pixel(x as u32, y as u32);
        let alpha = p[3] as f64 / 255.0;
        alpha * (p[c] as f64 / 255.0) + (1.0 - alpha)
    });
    ImageInput::new(pixels, path.display().to_string())
}

pub fn save_png(image: &ImageInput, path: &Path) -> Result<()> {
    let px = image.pixels();
    let (h, w, _) = px.dim();
    let buf: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let q = |c: usize| (px[[y as usize, x as usize, c]] * 255.0).round().clamp(0.0, 255.0) as u8;
        Rgb([q(0), q(1), q(2)])
    });
    buf.save(path).map_err(|source| SculptError::Image {
        path: path.to_path_buf(),
        source,
    })
}
