use std::path::Path;

use ndarray::{concatenate, Array3, ArrayView3, Axis};

use crate::error::{Error, Result};

/// 8-bit RGB PNG bytes for an `[H, W, 3]` image in `[0, 1]`.
pub fn encode_png(img: &ArrayView3<f64>) -> Result<Vec<u8>> {
    let (h, w, c) = img.dim();
    if c != 3 {
        return Err(Error::Invalid(format!("PNG output needs 3 channels, got {c}")));
    }
    let bytes: Vec<u8> = img.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(png_err)?;
        writer.write_image_data(&bytes).map_err(png_err)?;
    }
    Ok(out)
}

fn png_err(e: png::EncodingError) -> Error {
    match e {
        png::EncodingError::IoError(e) => Error::Io(e),
        other => Error::Invalid(other.to_string()),
    }
}

pub fn write_png(img: &ArrayView3<f64>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_png(img)?)?;
    Ok(())
}

/// Frames placed side by side.
pub fn horizontal_panel(frames: &[Array3<f64>]) -> Result<Array3<f64>> {
    let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
    concatenate(Axis(1), &views).map_err(|e| Error::Invalid(format!("panel frames disagree: {e}")))
}
