//! 8-bit RGB PNG input and output.

use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

/// Interleaved 8-bit RGB → `[3, H, W]` in `[0, 1]`.
pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Tensor> {
    ensure!(
        bytes.len() == width * height * 3,
        Shape,
        "{} bytes for a {}x{} RGB image",
        bytes.len(),
        width,
        height
    );
    let hw = width * height;
    let mut data = vec![0.0; 3 * hw];
    for (p, px) in bytes.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * hw + p] = px[c] as f64 / 255.0;
        }
    }
    Tensor::from_vec(&[3, height, width], data)
}

/// `[3, H, W]` → interleaved 8-bit RGB, clamped to `[0, 1]` and rounded.
pub fn to_rgb8(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image.chw()?;
    ensure!(c == 3, Shape, "expected 3 channels, got {}", c);
    let hw = h * w;
    let d = image.data();
    let mut out = Vec::with_capacity(3 * hw);
    for p in 0..hw {
        for ch in 0..3 {
            let v = d[ch * hw + p];
            let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

/// The image as it would be after an 8-bit save and load.
pub fn quantize(image: &Tensor) -> Result<Tensor> {
    let (_, h, w) = image.chw()?;
    from_rgb8(w, h, &to_rgb8(image)?)
}

pub fn load_rgb(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    from_rgb8(w as usize, h as usize, img.as_raw())
}

pub fn save_rgb(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let (_, h, w) = image.chw()?;
    let buf = image::RgbImage::from_raw(w as u32, h as u32, to_rgb8(image)?)
        .ok_or_else(|| Error::Shape("image buffer size".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}
