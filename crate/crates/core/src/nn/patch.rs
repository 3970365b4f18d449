use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Cuts `image[C×H×W]` into non-overlapping `patch×patch` tiles, one row per
/// tile in row-major tile order, each row laid out as `(c, dy, dx)`.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || patch == 0 || s[1] % patch != 0 || s[2] % patch != 0 {
        return Err(Error::shape(format!(
            "image {s:?} not divisible into {patch}×{patch} patches"
        )));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let (gh, gw) = (h / patch, w / patch);
    let src = image.data();
    let mut data = Vec::with_capacity(src.len());
    for ty in 0..gh {
        for tx in 0..gw {
            for ch in 0..c {
                for dy in 0..patch {
                    let row = (ch * h + ty * patch + dy) * w + tx * patch;
                    data.extend_from_slice(&src[row..row + patch]);
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, c * patch * patch], data)
}
