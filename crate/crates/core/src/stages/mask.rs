use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::{Fill, StageError};

/// Per-pixel foreground flags for a crop, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "MaskRle", into = "MaskRle")]
pub struct Mask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: u32, height: u32, bits: Vec<bool>) -> Result<Self, String> {
        if bits.len() as u64 != u64::from(width) * u64::from(height) {
            return Err(format!("{} bits for a {width}x{height} mask", bits.len()));
        }
        Ok(Self { width, height, bits })
    }

    pub fn filled(width: u32, height: u32, value: bool) -> Self {
        Self { width, height, bits: vec![value; (width as usize) * (height as usize)] }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut bits = Vec::with_capacity((width as usize) * (height as usize));
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self { width, height, bits }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[(y as usize) * (self.width as usize) + x as usize]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn foreground_count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn to_rle(&self) -> MaskRle {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &b in &self.bits {
            if b == current {
                run += 1;
            } else {
                counts.push(run);
                current = b;
                run = 1;
            }
        }
        counts.push(run);
        MaskRle { width: self.width, height: self.height, counts }
    }
}

/// Run-length encoding used on the wire: row-major, alternating runs that
/// start with background (`false`). A mask starting with foreground has a
/// leading zero-length run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRle {
    pub width: u32,
    pub height: u32,
    pub counts: Vec<u32>,
}

impl TryFrom<MaskRle> for Mask {
    type Error = String;

    fn try_from(rle: MaskRle) -> Result<Self, Self::Error> {
        let total = u64::from(rle.width) * u64::from(rle.height);
        let sum: u64 = rle.counts.iter().map(|&c| u64::from(c)).sum();
        if sum != total {
            return Err(format!("run lengths sum to {sum}, expected {total}"));
        }
        let mut bits = Vec::with_capacity(total as usize);
        let mut value = false;
        for &c in &rle.counts {
            bits.extend(std::iter::repeat_n(value, c as usize));
            value = !value;
        }
        Mask::new(rle.width, rle.height, bits)
    }
}

impl From<Mask> for MaskRle {
    fn from(m: Mask) -> Self {
        m.to_rle()
    }
}

/// Keeps crop pixels where the mask is set and paints `fill` elsewhere.
pub fn composite_mask(crop: &RgbImage, mask: &Mask, fill: Fill) -> Result<RgbImage, StageError> {
    if crop.dimensions() != (mask.width, mask.height) {
        return Err(StageError::MaskDimensions {
            mask_w: mask.width,
            mask_h: mask.height,
            crop_w: crop.width(),
            crop_h: crop.height(),
        });
    }
    let mut out = crop.clone();
    for (px, &keep) in out.pixels_mut().zip(mask.bits.iter()) {
        if !keep {
            *px = Rgb(fill.0);
        }
    }
    Ok(out)
}
