//! Stochastic view augmentation for image-level contrastive training:
//! small edge-clamped translations plus brightness jitter and pixel noise.

use firm_core::image::{dims, Image};
use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
pub struct AugmentParams {
    /// Maximum translation as a fraction of the image side.
    pub max_shift: f64,
    /// Uniform brightness offset bound.
    pub jitter: f64,
    /// Per-pixel uniform noise bound.
    pub noise: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            max_shift: 0.1,
            jitter: 0.1,
            noise: 0.02,
        }
    }
}

/// Apply one random view transform.
pub fn augment_view(img: &Image<f32>, params: &AugmentParams, rng: &mut ChaCha8Rng) -> Image<f32> {
    let (h, w) = dims(img);
    let c = img.shape()[2];
    let max_dy = (params.max_shift * h as f64).round() as i64;
    let max_dx = (params.max_shift * w as f64).round() as i64;
    let dy = rng.random_range(-max_dy..=max_dy) as isize;
    let dx = rng.random_range(-max_dx..=max_dx) as isize;
    let jitter = rng.random_range(-params.jitter..=params.jitter) as f32;
    let mut out = Array3::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            // edge-clamped source position
            let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
            let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
            for ch in 0..c {
                let noise = rng.random_range(-params.noise..=params.noise) as f32;
                out[[y, x, ch]] = (img[[sy, sx, ch]] + jitter + noise).clamp(0.0, 1.0);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn deterministic_under_seed() {
        let img: Image<f32> =
            Array3::from_shape_fn((10, 10, 1), |(y, x, _)| ((y * 7 + x) % 9) as f32 / 9.0);
        let params = AugmentParams::default();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            augment_view(&img, &params, &mut rng)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn output_stays_in_range() {
        let img: Image<f32> = Array3::from_elem((6, 6, 1), 0.95);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let out = augment_view(&img, &AugmentParams::default(), &mut rng);
            for &v in out.iter() {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
