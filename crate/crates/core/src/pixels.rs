//! Where frame pixels come from: image files, nowhere (metadata-only runs),
//! or a deterministic generator used for load testing.

use std::path::PathBuf;
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::CameraTrapImage;
use crate::seed::derive_seed;

#[derive(Debug, Error)]
pub enum PixelError {
    #[error("cannot decode {path}: {message}")]
    Decode { path: String, message: String },
    #[error("{image_id}: file is {got_w}x{got_h} but the manifest says {want_w}x{want_h}")]
    SizeMismatch { image_id: String, got_w: u32, got_h: u32, want_w: u32, want_h: u32 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelSourceKind {
    #[default]
    Files,
    None,
    Synthetic,
}

impl FromStr for PixelSourceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "files" => Ok(Self::Files),
            "none" => Ok(Self::None),
            "synthetic" => Ok(Self::Synthetic),
            other => Err(format!("unknown pixel source {other:?} (expected files, none or synthetic)")),
        }
    }
}

pub trait PixelSource: Send + Sync {
    /// Decoded RGB pixels, or `None` when this source provides none.
    fn load(&self, image: &CameraTrapImage) -> Result<Option<RgbImage>, PixelError>;
}

pub fn pixel_source(kind: PixelSourceKind, root: PathBuf) -> Box<dyn PixelSource> {
    match kind {
        PixelSourceKind::Files => Box::new(FilePixels { root }),
        PixelSourceKind::None => Box::new(NoPixels),
        PixelSourceKind::Synthetic => Box::new(SyntheticPixels),
    }
}

pub struct FilePixels {
    pub root: PathBuf,
}

impl PixelSource for FilePixels {
    fn load(&self, image: &CameraTrapImage) -> Result<Option<RgbImage>, PixelError> {
        let path = self.root.join(&image.file_ref);
        let img = image::open(&path)
            .map_err(|e| PixelError::Decode { path: path.display().to_string(), message: e.to_string() })?
            .to_rgb8();
        if img.dimensions() != (image.width_px, image.height_px) {
            return Err(PixelError::SizeMismatch {
                image_id: image.image_id.clone(),
                got_w: img.width(),
                got_h: img.height(),
                want_w: image.width_px,
                want_h: image.height_px,
            });
        }
        Ok(Some(img))
    }
}

pub struct NoPixels;

impl PixelSource for NoPixels {
    fn load(&self, _image: &CameraTrapImage) -> Result<Option<RgbImage>, PixelError> {
        Ok(None)
    }
}

/// Frames generated from the image id at the manifest's size: a vertical
/// gradient with one flat rectangular "animal" patch, either darker or
/// brighter than its surroundings.
pub struct SyntheticPixels;

impl SyntheticPixels {
    pub fn render(image: &CameraTrapImage) -> RgbImage {
        let (w, h) = (image.width_px as usize, image.height_px as usize);
        let bits = derive_seed(0, &image.image_id);
        let pick = |shift: u32, span: u64| ((bits >> shift) % span) as usize;
        let base = 70 + pick(0, 120) as u8;
        let patch_w = w * (15 + pick(8, 20)) / 100;
        let patch_h = h * (15 + pick(16, 20)) / 100;
        let px0 = pick(24, (w - patch_w).max(1) as u64);
        let py0 = pick(40, (h - patch_h).max(1) as u64);
        let dark = bits >> 63 == 1;
        let patch = if dark { [base / 4, base / 3, base / 4] } else { [base.saturating_add(60); 3] };

        let mut raw = vec![0u8; w * h * 3];
        for (y, row) in raw.chunks_exact_mut(w * 3).enumerate() {
            let v = base.saturating_add((y * 24 / h.max(1)) as u8);
            let tint = [v, v, v.saturating_sub(8)];
            for px in row.chunks_exact_mut(3) {
                px.copy_from_slice(&tint);
            }
            if (py0..py0 + patch_h).contains(&y) {
                for px in row[px0 * 3..(px0 + patch_w) * 3].chunks_exact_mut(3) {
                    px.copy_from_slice(&patch);
                }
            }
        }
        RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized for frame")
    }
}

impl PixelSource for SyntheticPixels {
    fn load(&self, image: &CameraTrapImage) -> Result<Option<RgbImage>, PixelError> {
        Ok(Some(Self::render(image)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::ImageSource;

    fn meta(id: &str, w: u32, h: u32) -> CameraTrapImage {
        CameraTrapImage {
            image_id: id.into(),
            camera_id: "c".into(),
            captured_at: None,
            file_ref: format!("{id}.png"),
            width_px: w,
            height_px: h,
            source: ImageSource::Wild,
            is_infrared: false,
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_sized() {
        let a = SyntheticPixels::render(&meta("x1", 120, 80));
        assert_eq!(a.dimensions(), (120, 80));
        assert_eq!(a, SyntheticPixels::render(&meta("x1", 120, 80)));
        assert_ne!(a, SyntheticPixels::render(&meta("x2", 120, 80)));
    }

    #[test]
    fn files_checked_against_manifest_size() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::from_pixel(10, 6, image::Rgb([1, 2, 3]));
        img.save(dir.path().join("a.png")).unwrap();
        let src = FilePixels { root: dir.path().to_path_buf() };
        assert_eq!(src.load(&meta("a", 10, 6)).unwrap().unwrap(), img);
        assert!(matches!(src.load(&meta("a", 10, 7)), Err(PixelError::SizeMismatch { .. })));
        assert!(matches!(src.load(&meta("missing", 10, 6)), Err(PixelError::Decode { .. })));
    }
}
