use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major binary segmentation mask.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape(format!(
                "mask {height}×{width} needs {} pixels, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height)
            .flat_map(|y| (0..width).map(move |x| (y, x)))
            .map(|(y, x)| f(y, x))
            .collect();
        Self {
            height,
            width,
            bits,
        }
    }

    /// Thresholds `logits[1×H×W]` (or `[H×W]`) at zero.
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        let s = logits.shape();
        let (h, w) = match s {
            [1, h, w] | [h, w] => (*h, *w),
            _ => return Err(Error::shape(format!("logits {s:?} are not 1×H×W"))),
        };
        Ok(Self {
            height: h,
            width: w,
            bits: logits.data().iter().map(|&v| v > 0.0).collect(),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn inverted(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    /// `(|a ∩ b|, |a ∪ b|)` pixel counts.
    pub fn overlap(&self, other: &BinaryMask) -> Result<(u64, u64)> {
        if self.dims() != other.dims() {
            return Err(Error::Contract(format!(
                "mask shapes differ: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        let (mut inter, mut union) = (0u64, 0u64);
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += u64::from(a && b);
            union += u64::from(a || b);
        }
        Ok((inter, union))
    }

    pub fn iou(&self, other: &BinaryMask) -> Result<Option<f64>> {
        let (i, u) = self.overlap(other)?;
        Ok((u > 0).then(|| i as f64 / u as f64))
    }

    /// `[1×H×W]` tensor with values in `{0, 1}`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self
            .bits
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(vec![1, self.height, self.width], data).expect("mask dims are positive")
    }
}
