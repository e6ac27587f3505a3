//! Synthetic digit-like images for tests that should not depend on the MNIST files.

#![allow(dead_code)]

use cceplus::data::{ImageInstance, InstancePool};
use cceplus::models::InputShape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FONT: [[u8; 5]; 10] = [
    [7, 5, 5, 5, 7],
    [2, 6, 2, 2, 7],
    [7, 1, 7, 4, 7],
    [7, 1, 7, 1, 7],
    [5, 5, 7, 1, 1],
    [7, 4, 7, 1, 7],
    [7, 4, 7, 5, 7],
    [7, 1, 2, 2, 2],
    [7, 5, 7, 5, 7],
    [7, 5, 7, 1, 7],
];

/// `n` 28×28 images of class `id % 10`: a 12×20 block glyph at a jittered position with
/// background noise. Ids run from 0.
pub fn glyphs(n: usize, seed: u64) -> Vec<ImageInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|id| {
            let class = id % 10;
            let mut pixels: Vec<f32> = (0..784).map(|_| rng.random_range(0.0..0.1)).collect();
            let (y0, x0) = (rng.random_range(2..7), rng.random_range(5..12));
            let ink: f32 = rng.random_range(0.7..1.0);
            for (r, bits) in FONT[class].iter().enumerate() {
                for c in 0..3 {
                    if bits & (4 >> c) == 0 {
                        continue;
                    }
                    for dy in 0..4 {
                        for dx in 0..4 {
                            pixels[(y0 + r * 4 + dy) * 28 + x0 + c * 4 + dx] = ink;
                        }
                    }
                }
            }
            ImageInstance {
                id,
                height: 28,
                width: 28,
                channels: 1,
                pixels,
                true_label: Some(class),
            }
        })
        .collect()
}

pub fn glyph_pool(n: usize, seed: u64) -> InstancePool {
    InstancePool::new(InputShape::MNIST, glyphs(n, seed)).unwrap()
}
