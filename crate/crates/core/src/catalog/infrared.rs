use image::RgbImage;

/// Max per-channel spread, in 8-bit units, for a pixel to count as gray.
pub const INFRARED_CHANNEL_TOLERANCE: u8 = 2;
/// Fraction of sampled pixels that must be gray.
pub const INFRARED_PIXEL_FRACTION: f64 = 0.99;

const MAX_SAMPLES: u32 = 10_000;

/// Night-time IR frames come out of the camera as grayscale stored in RGB.
pub fn looks_infrared(img: &RgbImage) -> bool {
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 {
        return false;
    }
    let total = u64::from(w) * u64::from(h);
    let step = ((total as f64 / f64::from(MAX_SAMPLES)).sqrt().floor() as u32).max(1);

    let mut sampled = 0u64;
    let mut gray = 0u64;
    for y in (0..h).step_by(step as usize) {
        for x in (0..w).step_by(step as usize) {
            let [r, g, b] = img.get_pixel(x, y).0;
            let spread = r.max(g).max(b) - r.min(g).min(b);
            sampled += 1;
            if spread <= INFRARED_CHANNEL_TOLERANCE {
                gray += 1;
            }
        }
    }
    gray as f64 >= INFRARED_PIXEL_FRACTION * sampled as f64
}
