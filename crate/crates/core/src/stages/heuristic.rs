//! Cheap pixel heuristics standing in for trained networks. They exercise
//! the full pixel path (decode, crop, mask, resize) at realistic cost
//! without model weights.

use image::RgbImage;

use super::{
    BackendDescriptor, Classifier, ClassifierInput, Detector, FrameInput, Mask, RegionProposal, SegmentInput,
    Segmenter, StageError,
};
use crate::geometry::BoundingBox;

/// Mean over all channels of all pixels, in 8-bit units.
pub fn mean_intensity(img: &RgbImage) -> f64 {
    let raw = img.as_raw();
    if raw.is_empty() {
        return 0.0;
    }
    let sum: u64 = raw.iter().map(|&v| u64::from(v)).sum();
    sum as f64 / raw.len() as f64
}

fn need_pixels<'a>(backend: &str, image_id: &str, px: Option<&'a RgbImage>) -> Result<&'a RgbImage, StageError> {
    px.ok_or_else(|| StageError::MissingPixels { backend: backend.to_owned(), image_id: image_id.to_owned() })
}

/// Flags grid cells whose brightness departs from the frame's median cell
/// and proposes the box around them.
pub struct StubDetector {
    id: String,
    grid: u32,
    stride: u32,
    threshold: f64,
}

impl StubDetector {
    pub fn from_descriptor(desc: &BackendDescriptor) -> Result<Self, StageError> {
        Ok(Self {
            id: desc.id.clone(),
            grid: desc.get_parsed("grid")?.unwrap_or(32).max(1),
            stride: desc.get_parsed("stride")?.unwrap_or(4).max(1),
            threshold: desc.get_parsed("threshold")?.unwrap_or(30.0),
        })
    }
}

impl Detector for StubDetector {
    fn id(&self) -> &str {
        &self.id
    }

    fn version(&self) -> String {
        format!("heuristic_stub:grid={},stride={},threshold={}", self.grid, self.stride, self.threshold)
    }

    fn needs_pixels(&self) -> bool {
        true
    }

    fn propose(&self, input: &FrameInput<'_>, _min_confidence: f64) -> Result<Vec<RegionProposal>, StageError> {
        let img = need_pixels(&self.id, &input.image.image_id, input.pixels)?;
        let (w, h) = img.dimensions();
        let g = self.grid.min(w).min(h).max(1) as usize;
        let mut sums = vec![0u64; g * g];
        let mut counts = vec![0u32; g * g];
        let raw = img.as_raw();
        let row_len = (w as usize) * 3;
        for y in (0..h as usize).step_by(self.stride as usize) {
            let cy = y * g / h as usize;
            let row = &raw[y * row_len..(y + 1) * row_len];
            for x in (0..w as usize).step_by(self.stride as usize) {
                let cx = x * g / w as usize;
                let p = &row[x * 3..x * 3 + 3];
                sums[cy * g + cx] += u64::from(p[0]) + u64::from(p[1]) + u64::from(p[2]);
                counts[cy * g + cx] += 3;
            }
        }
        let means: Vec<f64> = sums
            .iter()
            .zip(&counts)
            .map(|(&s, &c)| if c == 0 { f64::NAN } else { s as f64 / f64::from(c) })
            .collect();
        let mut sorted: Vec<f64> = means.iter().copied().filter(|m| !m.is_nan()).collect();
        if sorted.is_empty() {
            return Ok(Vec::new());
        }
        sorted.sort_by(f64::total_cmp);
        let median = sorted[sorted.len() / 2];

        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let mut max_dev = 0.0f64;
        for cy in 0..g {
            for cx in 0..g {
                let dev = (means[cy * g + cx] - median).abs();
                if dev > self.threshold {
                    x0 = x0.min(cx);
                    y0 = y0.min(cy);
                    x1 = x1.max(cx + 1);
                    y1 = y1.max(cy + 1);
                    max_dev = max_dev.max(dev);
                }
            }
        }
        if x0 == usize::MAX {
            return Ok(Vec::new());
        }
        let gf = g as f64;
        let bbox = BoundingBox::new(x0 as f64 / gf, y0 as f64 / gf, x1 as f64 / gf, y1 as f64 / gf)
            .map_err(|e| StageError::Backend { backend: self.id.clone(), message: e.to_string(), diagnostics: String::new() })?;
        Ok(vec![RegionProposal { bbox, confidence: (max_dev / 128.0).min(1.0), detector_class: "animal".into() }])
    }
}

/// Foreground = pixels whose brightness differs from the crop border's mean.
pub struct StubSegmenter {
    id: String,
    tolerance: f64,
}

impl StubSegmenter {
    pub fn from_descriptor(desc: &BackendDescriptor) -> Result<Self, StageError> {
        Ok(Self { id: desc.id.clone(), tolerance: desc.get_parsed("tolerance")?.unwrap_or(24.0) })
    }
}

fn luma(p: &image::Rgb<u8>) -> f64 {
    (f64::from(p[0]) + f64::from(p[1]) + f64::from(p[2])) / 3.0
}

impl Segmenter for StubSegmenter {
    fn id(&self) -> &str {
        &self.id
    }

    fn version(&self) -> String {
        format!("heuristic_stub:tolerance={}", self.tolerance)
    }

    fn needs_pixels(&self) -> bool {
        true
    }

    fn segment(&self, input: &SegmentInput<'_>) -> Result<Mask, StageError> {
        let crop = need_pixels(&self.id, &input.image.image_id, input.crop)?;
        let (w, h) = crop.dimensions();
        let mut border = 0.0;
        let mut n = 0.0;
        for x in 0..w {
            border += luma(crop.get_pixel(x, 0)) + luma(crop.get_pixel(x, h - 1));
            n += 2.0;
        }
        for y in 0..h {
            border += luma(crop.get_pixel(0, y)) + luma(crop.get_pixel(w - 1, y));
            n += 2.0;
        }
        let border = border / n;
        let bits = crop.pixels().map(|p| (luma(p) - border).abs() > self.tolerance).collect();
        Ok(Mask::new(w, h, bits).expect("one bit per pixel"))
    }
}

/// Darker than `threshold` → first (highest-priority) class, otherwise the
/// last class. The winner gets `winner_score`, the rest share the remainder.
pub struct StubClassifier {
    id: String,
    threshold: f64,
    classes: Option<usize>,
    winner_score: f64,
}

impl StubClassifier {
    pub const DEFAULT_THRESHOLD: f64 = 127.5;

    pub fn from_descriptor(desc: &BackendDescriptor) -> Result<Self, StageError> {
        let winner_score: f64 = desc.get_parsed("winner_score")?.unwrap_or(0.8);
        if !(0.0..=1.0).contains(&winner_score) {
            return Err(StageError::Config(format!("backend {}: winner_score {winner_score} outside [0, 1]", desc.id)));
        }
        Ok(Self {
            id: desc.id.clone(),
            threshold: desc.get_parsed("threshold")?.unwrap_or(Self::DEFAULT_THRESHOLD),
            classes: desc.get_parsed("classes")?,
            winner_score,
        })
    }
}

impl Classifier for StubClassifier {
    fn id(&self) -> &str {
        &self.id
    }

    fn version(&self) -> String {
        format!("heuristic_stub:threshold={},winner={}", self.threshold, self.winner_score)
    }

    fn needs_pixels(&self) -> bool {
        true
    }

    fn declared_classes(&self) -> Option<usize> {
        self.classes
    }

    fn score(&self, input: &ClassifierInput<'_>, n: usize) -> Result<Vec<f64>, StageError> {
        let px = need_pixels(&self.id, input.image_id, input.pixels)?;
        if n == 1 {
            return Ok(vec![1.0]);
        }
        let winner = if mean_intensity(px) < self.threshold { 0 } else { n - 1 };
        let rest = (1.0 - self.winner_score) / (n - 1) as f64;
        Ok((0..n).map(|i| if i == winner { self.winner_score } else { rest }).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{CameraTrapImage, ImageSource};
    use crate::stages::{classify, BackendKind, BackendRole, Scale};
    use crate::taxonomy::TaxonomyRegistry;
    use image::Rgb;

    fn frame(w: u32, h: u32) -> CameraTrapImage {
        CameraTrapImage {
            image_id: "f".into(),
            camera_id: "c".into(),
            captured_at: None,
            file_ref: String::new(),
            width_px: w,
            height_px: h,
            source: ImageSource::Wild,
            is_infrared: false,
        }
    }

    #[test]
    fn classifier_follows_intensity_rule() {
        let desc = BackendDescriptor::new("stub", BackendKind::HeuristicStub, BackendRole::Classifier);
        let c = StubClassifier::from_descriptor(&desc).unwrap();
        let reg = TaxonomyRegistry::builtin();
        let four = reg.get("four_class").unwrap();
        let dark = RgbImage::from_pixel(16, 16, Rgb([30, 40, 50]));
        let bright = RgbImage::from_pixel(16, 16, Rgb([200, 190, 180]));
        // Independent restatement: average of channel means against 127.5.
        let rule = |img: &RgbImage| {
            let m: f64 = img.pixels().map(|p| p.0.iter().map(|&c| c as f64).sum::<f64>()).sum::<f64>()
                / (img.width() * img.height() * 3) as f64;
            if m < 127.5 { 0 } else { 3 }
        };
        for img in [&dark, &bright] {
            let input = ClassifierInput { image_id: "x", scale: Scale::Global, masked: false, pixels: Some(img) };
            assert_eq!(classify(&c, &input, four).unwrap().argmax(), rule(img));
        }
        let none = ClassifierInput { image_id: "x", scale: Scale::Global, masked: false, pixels: None };
        assert!(matches!(c.score(&none, 4), Err(StageError::MissingPixels { .. })));
    }

    #[test]
    fn detector_finds_dark_patch() {
        let mut img = RgbImage::from_pixel(400, 300, Rgb([180, 180, 170]));
        for y in 150..250 {
            for x in 100..200 {
                img.put_pixel(x, y, Rgb([20, 25, 20]));
            }
        }
        let desc = BackendDescriptor::new("det", BackendKind::HeuristicStub, BackendRole::Detector);
        let d = StubDetector::from_descriptor(&desc).unwrap();
        let f = frame(400, 300);
        let props = d.propose(&FrameInput { image: &f, pixels: Some(&img), file: None }, 0.1).unwrap();
        assert_eq!(props.len(), 1);
        let b = props[0].bbox;
        assert!(b.x_min() <= 0.25 + 1e-9 && b.x_max() >= 0.5 - 0.04, "{b:?}");
        assert!(b.y_min() <= 0.5 + 1e-9 && b.y_max() >= 0.8, "{b:?}");
        let flat = RgbImage::from_pixel(400, 300, Rgb([100, 100, 100]));
        assert!(d.propose(&FrameInput { image: &f, pixels: Some(&flat), file: None }, 0.1).unwrap().is_empty());
    }

    #[test]
    fn segmenter_separates_centre_from_border() {
        let mut crop = RgbImage::from_pixel(20, 20, Rgb([200, 200, 200]));
        for y in 5..15 {
            for x in 5..15 {
                crop.put_pixel(x, y, Rgb([10, 10, 10]));
            }
        }
        let desc = BackendDescriptor::new("seg", BackendKind::HeuristicStub, BackendRole::Segmenter);
        let s = StubSegmenter::from_descriptor(&desc).unwrap();
        let f = frame(20, 20);
        let rect = crate::geometry::PixelRect { x0: 0, y0: 0, x1: 20, y1: 20 };
        let m = s.segment(&SegmentInput { image: &f, box_index: 0, rect, crop: Some(&crop) }).unwrap();
        assert_eq!(m.foreground_count(), 100);
        assert!(m.get(10, 10) && !m.get(1, 1));
    }
}
