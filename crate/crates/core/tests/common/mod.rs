#![allow(dead_code)]

use fssam2::{BinaryMask, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(seed: u64, shape: &[usize]) -> Tensor {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| r.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

pub fn random_image(seed: u64, size: usize) -> Tensor {
    random_tensor(seed, &[3, size, size])
}

/// Axis-aligned box covering roughly a quarter of the image.
pub fn box_mask(seed: u64, size: usize) -> BinaryMask {
    let mut r = rng(seed);
    let (y0, x0) = (r.gen_range(0..size / 2), r.gen_range(0..size / 2));
    BinaryMask::from_fn(size, size, |y, x| {
        y >= y0 && y < y0 + size / 2 && x >= x0 && x < x0 + size / 2
    })
}

pub fn support(seed: u64, size: usize, k: usize) -> Vec<(Tensor, BinaryMask)> {
    (0..k as u64)
        .map(|i| {
            (
                random_image(seed * 100 + i, size),
                box_mask(seed * 100 + i, size),
            )
        })
        .collect()
}

/// Adds noise of magnitude `amp` to every parameter.
pub fn jitter(model: &mut fssam2::FsSam2, seed: u64, amp: f64) {
    let mut r = rng(seed);
    let ids: Vec<_> = model.store().ids().collect();
    for id in ids {
        let p = model.store_mut().get_mut(id);
        for v in p.value.data_mut() {
            *v += amp * r.gen_range(-1.0..1.0);
        }
    }
}
