use image::RgbImage;

use super::CurationError;
use crate::geometry::{BoundingBox, GeometryError, PixelRect};

/// Pixel rectangle for `bbox` grown by `pad_frac` of its own size on every
/// side and clamped to the frame.
pub fn crop_rect(bbox: &BoundingBox, width: u32, height: u32, pad_frac: f64) -> Result<PixelRect, CurationError> {
    if !(pad_frac >= 0.0 && pad_frac.is_finite()) {
        return Err(CurationError::BadPadding(pad_frac));
    }
    let (w, h) = (f64::from(width), f64::from(height));
    let pad_x = pad_frac * bbox.width() * w;
    let pad_y = pad_frac * bbox.height() * h;
    let rect = PixelRect {
        x0: (bbox.x_min() * w - pad_x).clamp(0.0, w).round() as u32,
        y0: (bbox.y_min() * h - pad_y).clamp(0.0, h).round() as u32,
        x1: (bbox.x_max() * w + pad_x).clamp(0.0, w).round() as u32,
        y1: (bbox.y_max() * h + pad_y).clamp(0.0, h).round() as u32,
    };
    if rect.width() == 0 || rect.height() == 0 {
        return Err(GeometryError::Degenerate { width, height }.into());
    }
    Ok(rect)
}

pub fn crop_to_box(pixels: &RgbImage, bbox: &BoundingBox, pad_frac: f64) -> Result<RgbImage, CurationError> {
    let rect = crop_rect(bbox, pixels.width(), pixels.height(), pad_frac)?;
    Ok(image::imageops::crop_imm(pixels, rect.x0, rect.y0, rect.width(), rect.height()).to_image())
}
