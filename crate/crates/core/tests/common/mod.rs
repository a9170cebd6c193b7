#![allow(dead_code)]

use gilab_core::{ImageBatch, ImageShape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_batch(shape: ImageShape, batch: usize, seed: u64) -> ImageBatch {
    let mut r = rng(seed);
    ImageBatch::new(shape, (0..batch * shape.len()).map(|_| r.random::<f64>()).collect()).unwrap()
}

/// Soft disks and ramps on a coloured background.
pub fn toy_images(n: usize, shape: ImageShape, seed: u64) -> ImageBatch {
    let mut r = rng(seed);
    let mut data = Vec::with_capacity(n * shape.len());
    for i in 0..n {
        let (cy, cx) = (r.random_range(0.25..0.75), r.random_range(0.25..0.75));
        let radius = r.random_range(0.2..0.4);
        let fg: Vec<f64> = (0..shape.channels).map(|_| r.random_range(0.5..0.95)).collect();
        let bg: Vec<f64> = (0..shape.channels).map(|_| r.random_range(0.05..0.4)).collect();
        for c in 0..shape.channels {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    let fy = y as f64 / (shape.height - 1).max(1) as f64;
                    let fx = x as f64 / (shape.width - 1).max(1) as f64;
                    let v = if i % 2 == 0 {
                        let d = ((fy - cy).powi(2) + (fx - cx).powi(2)).sqrt();
                        if d < radius { fg[c] } else { bg[c] }
                    } else {
                        bg[c] + (fg[c] - bg[c]) * (fx * cx + fy * (1.0 - cx))
                    };
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
    }
    ImageBatch::new(shape, data).unwrap()
}

/// `‖a − b‖ / max(‖b‖, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(floor)
}

/// Central differences of `f` at `x` with step `h`.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}
