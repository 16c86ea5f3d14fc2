//! Shared fixtures for integration tests.
#![allow(dead_code)]

use manysr::image::ImageTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Textured synthetic image: colour gradient, oriented stripes and a few discs.
pub fn synthetic_image(size: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [f32; 3] = [
        rng.random_range(0.2..0.8),
        rng.random_range(0.2..0.8),
        rng.random_range(0.2..0.8),
    ];
    let grad: [f32; 3] = [
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.3..0.3),
    ];
    let theta: f32 = rng.random_range(0.0..std::f32::consts::PI);
    let period: f32 = rng.random_range(5.0..14.0);
    let amp: f32 = rng.random_range(0.12..0.25);
    let discs: Vec<(f32, f32, f32, [f32; 3])> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.0..size as f32),
                rng.random_range(0.0..size as f32),
                rng.random_range(6.0..size as f32 / 4.0),
                [
                    rng.random_range(0.0..1.0),
                    rng.random_range(0.0..1.0),
                    rng.random_range(0.0..1.0),
                ],
            )
        })
        .collect();
    let (c, s) = (theta.cos(), theta.sin());
    ImageTensor::from_fn(size, size, 3, |y, x, ch| {
        let (fy, fx) = (y as f32, x as f32);
        let mut v = base[ch] + grad[ch] * (fx / size as f32 - 0.5);
        v += amp * ((fx * c + fy * s) * std::f32::consts::TAU / period).sin();
        for (cy, cx, r, col) in &discs {
            if (fy - cy).powi(2) + (fx - cx).powi(2) < r * r {
                v = 0.5 * v + 0.5 * col[ch];
            }
        }
        v.clamp(0.0, 1.0)
    })
    .unwrap()
}

pub fn synthetic_corpus(n: usize, size: usize, seed: u64) -> Vec<(String, ImageTensor)> {
    (0..n)
        .map(|i| {
            (
                format!("img{i:02}"),
                synthetic_image(size, seed.wrapping_mul(1000) + i as u64),
            )
        })
        .collect()
}

/// Mean of consecutive `window`-sized chunks.
pub fn windowed(values: &[f64], window: usize) -> Vec<f64> {
    values
        .chunks(window)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}
