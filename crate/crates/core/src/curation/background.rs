use rand::Rng;
use serde::{Deserialize, Serialize};

use super::CurationError;
use crate::catalog::CameraTrapImage;
use crate::geometry::{BoundingBox, PixelRect};
use crate::seed::rng_for;

/// Per-side size range as a fraction of the image dimension.
pub const DEFAULT_BACKGROUND_SIZE_RANGE: (f64, f64) = (0.1, 0.5);
/// Rejection-sampling attempts allowed per requested box.
pub const DEFAULT_RETRY_BUDGET: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundSample {
    pub image_id: String,
    pub boxes: Vec<BoundingBox>,
    /// Set when fewer than the requested boxes were found.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exhausted: Option<String>,
}

/// Draws `n` random boxes that share no pixel with any ground-truth box.
///
/// Sampling happens on the integer pixel grid. Ground-truth boxes are widened
/// to the pixels they touch, so a sampled box never overlaps one even
/// partially. The stream is seeded from `(seed, image_id)`.
pub fn sample_background_boxes(
    image: &CameraTrapImage,
    gt_boxes: &[BoundingBox],
    n: usize,
    size_range: (f64, f64),
    seed: u64,
    retry_budget: usize,
) -> Result<BackgroundSample, CurationError> {
    let (lo, hi) = size_range;
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(CurationError::BadSizeRange(lo, hi));
    }
    let (w, h) = (image.width_px, image.height_px);
    let side = |dim: u32| {
        let min = ((lo * f64::from(dim)).ceil() as u32).max(1);
        let max = ((hi * f64::from(dim)).floor() as u32).min(dim);
        (min, max)
    };
    let (min_w, max_w) = side(w);
    let (min_h, max_h) = side(h);
    let occupied: Vec<PixelRect> = gt_boxes.iter().map(|b| b.covering_pixels(w, h)).collect();

    let mut rng = rng_for(seed, &image.image_id);
    let mut boxes = Vec::with_capacity(n);
    let mut exhausted = None;
    'outer: for _ in 0..n {
        if min_w > max_w || min_h > max_h {
            exhausted = Some(format!("size range ({lo}, {hi}) admits no whole-pixel box on {w}x{h}"));
            break;
        }
        for _ in 0..retry_budget {
            let bw = rng.gen_range(min_w..=max_w);
            let bh = rng.gen_range(min_h..=max_h);
            let x0 = rng.gen_range(0..=w - bw);
            let y0 = rng.gen_range(0..=h - bh);
            let rect = PixelRect { x0, y0, x1: x0 + bw, y1: y0 + bh };
            if occupied.iter().all(|o| o.intersection_area(&rect) == 0) {
                boxes.push(BoundingBox::from_pixels(rect, w, h)?);
                continue 'outer;
            }
        }
        exhausted = Some(format!(
            "found {} of {n} background boxes for {} within {retry_budget} attempts",
            boxes.len(),
            image.image_id
        ));
        break;
    }
    if let Some(msg) = &exhausted {
        tracing::warn!("{msg}");
    }
    Ok(BackgroundSample { image_id: image.image_id.clone(), boxes, exhausted })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::ImageSource;

    fn image(w: u32, h: u32) -> CameraTrapImage {
        CameraTrapImage {
            image_id: "C2_0042".into(),
            camera_id: "C2".into(),
            captured_at: None,
            file_ref: String::new(),
            width_px: w,
            height_px: h,
            source: ImageSource::Captivity,
            is_infrared: false,
        }
    }

    #[test]
    fn full_frame_ground_truth_leaves_no_room() {
        let s = sample_background_boxes(&image(640, 480), &[BoundingBox::full()], 1, (0.1, 0.5), 1, 1000).unwrap();
        assert!(s.boxes.is_empty());
        assert!(s.exhausted.is_some());
    }

    #[test]
    fn no_ground_truth_gives_n_boxes_in_range() {
        let s = sample_background_boxes(&image(640, 480), &[], 3, (0.1, 0.5), 1, 1000).unwrap();
        assert_eq!(s.boxes.len(), 3);
        assert!(s.exhausted.is_none());
        for b in &s.boxes {
            assert!(b.width() >= 0.1 - 1e-12 && b.width() <= 0.5 + 1e-12);
            assert!(b.height() >= 0.1 - 1e-12 && b.height() <= 0.5 + 1e-12);
        }
    }

    #[test]
    fn thousand_boxes_avoid_central_ground_truth() {
        let gt = BoundingBox::new(0.4, 0.4, 0.6, 0.6).unwrap();
        let img = image(1000, 800);
        let s = sample_background_boxes(&img, &[gt], 1000, (0.05, 0.3), 11, 1000).unwrap();
        assert_eq!(s.boxes.len(), 1000);
        // Oracle: 1-D interval intersection on each axis in pixel units.
        let gx = (400i64, 600i64);
        let gy = (320i64, 480i64);
        for b in &s.boxes {
            let bx = ((b.x_min() * 1000.0).round() as i64, (b.x_max() * 1000.0).round() as i64);
            let by = ((b.y_min() * 800.0).round() as i64, (b.y_max() * 800.0).round() as i64);
            let ox = (bx.1.min(gx.1) - bx.0.max(gx.0)).max(0);
            let oy = (by.1.min(gy.1) - by.0.max(gy.0)).max(0);
            assert_eq!(ox * oy, 0, "{b:?}");
        }
    }

    #[test]
    fn deterministic_per_seed_and_image() {
        let a = sample_background_boxes(&image(300, 200), &[], 5, (0.1, 0.5), 3, 1000).unwrap();
        let b = sample_background_boxes(&image(300, 200), &[], 5, (0.1, 0.5), 3, 1000).unwrap();
        let c = sample_background_boxes(&image(300, 200), &[], 5, (0.1, 0.5), 4, 1000).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_range() {
        assert!(sample_background_boxes(&image(10, 10), &[], 1, (0.0, 0.5), 0, 10).is_err());
        assert!(sample_background_boxes(&image(10, 10), &[], 1, (0.6, 0.5), 0, 10).is_err());
    }
}
