//! Plain image and mask containers (row-major, RGB interleaved).

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    pub width: usize,
    pub height: usize,
    /// `height × width × 3`, row-major.
    pub data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::InvalidArgument(format!(
                "image {width}×{height} needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [T; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self { width, height, data }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [T; 3] {
        let i = 3 * (row * self.width + col);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [T; 3]) {
        let i = 3 * (row * self.width + col);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_size(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    /// Zeroes every pixel whose mask entry is false.
    pub fn masked(&self, mask: &Mask) -> Image<T> {
        let mut out = self.clone();
        for (i, &keep) in mask.data.iter().enumerate() {
            if !keep {
                out.data[3 * i..3 * i + 3].iter_mut().for_each(|v| *v = T::zero());
            }
        }
        out
    }

    /// Snaps every value to the nearest multiple of 1/65535 in [0, 1].
    pub fn quantize16(&mut self) {
        for v in &mut self.data {
            *v = dequant16(quant16(*v));
        }
    }
}

pub(crate) fn quant16<T: Scalar>(v: T) -> u16 {
    (v.f64().clamp(0.0, 1.0) * 65535.0).round() as u16
}

pub(crate) fn dequant16<T: Scalar>(q: u16) -> T {
    T::of(q as f64 / 65535.0)
}

/// Binary per-pixel mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![false; width * height] }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.data[row * self.width + col] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Intersection over union; two empty masks score 1.
    pub fn iou(&self, other: &Mask) -> f64 {
        assert_eq!(self.data.len(), other.data.len(), "mask size mismatch");
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 { 1.0 } else { inter as f64 / union as f64 }
    }
}
