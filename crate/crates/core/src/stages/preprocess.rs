use image::imageops::{self, FilterType};
use image::{DynamicImage, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

pub const DEFAULT_INPUT_SIZE: u32 = 224;

/// RGB value painted outside masks and around letterboxed inputs.
/// Accepts `"gray"`, `"black"` or an `[r, g, b]` triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "FillRepr", into = "[u8; 3]")]
pub struct Fill(pub [u8; 3]);

#[derive(Deserialize)]
#[serde(untagged)]
enum FillRepr {
    Named(String),
    Rgb([u8; 3]),
}

impl TryFrom<FillRepr> for Fill {
    type Error = String;

    fn try_from(r: FillRepr) -> Result<Self, Self::Error> {
        match r {
            FillRepr::Rgb(c) => Ok(Fill(c)),
            FillRepr::Named(n) => n.parse(),
        }
    }
}

impl From<Fill> for [u8; 3] {
    fn from(f: Fill) -> Self {
        f.0
    }
}

impl std::str::FromStr for Fill {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gray" | "grey" => Ok(Fill::GRAY),
            "black" => Ok(Fill::BLACK),
            other => Err(format!("unknown fill {other:?} (expected gray, black or [r, g, b])")),
        }
    }
}

impl Fill {
    pub const GRAY: Fill = Fill([128, 128, 128]);
    pub const BLACK: Fill = Fill([0, 0, 0]);
}

impl Default for Fill {
    fn default() -> Self {
        Fill::GRAY
    }
}

/// Aspect-preserving resize into a `size`x`size` square, centred on `fill`.
pub fn letterbox(img: &RgbImage, size: u32, fill: Fill) -> RgbImage {
    let (w, h) = img.dimensions();
    if w == size && h == size {
        return img.clone();
    }
    let scale = f64::from(size) / f64::from(w.max(h));
    let nw = ((f64::from(w) * scale).round() as u32).clamp(1, size);
    let nh = ((f64::from(h) * scale).round() as u32).clamp(1, size);
    // Through DynamicImage so the resampler is compiled in the image crate.
    let resized = DynamicImage::ImageRgb8(img.clone()).resize_exact(nw, nh, FilterType::Triangle).into_rgb8();
    let mut canvas = RgbImage::from_pixel(size, size, Rgb(fill.0));
    imageops::replace(&mut canvas, &resized, i64::from((size - nw) / 2), i64::from((size - nh) / 2));
    canvas
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wide_input_gets_bands_top_and_bottom() {
        let img = RgbImage::from_pixel(200, 100, Rgb([10, 20, 30]));
        let out = letterbox(&img, 224, Fill::GRAY);
        assert_eq!(out.dimensions(), (224, 224));
        assert_eq!(out.get_pixel(112, 0).0, [128, 128, 128]);
        assert_eq!(out.get_pixel(112, 112).0, [10, 20, 30]);
        assert_eq!(out.get_pixel(0, 112).0, [10, 20, 30]);
    }

    #[test]
    fn square_of_target_size_untouched() {
        let img = RgbImage::from_fn(8, 8, |x, y| Rgb([x as u8, y as u8, 0]));
        assert_eq!(letterbox(&img, 8, Fill::BLACK), img);
    }
}
