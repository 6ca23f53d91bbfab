//! Synthetic cross-pattern dataset used by the end-to-end tests and the
//! README walkthrough.
//!
//! Inliers are noisy grayscale crosses whose horizontal arm is brighter
//! than the vertical arm, at a uniformly random center. Right-angle
//! rotations are the natural synthetic-outlier family: 90/270 degrees swap
//! the bright arm to vertical (detectable), while the 180-degree group
//! lands back inside the inlier distribution, giving training the same
//! collision pressure real rotation-based outliers have. The test split
//! holds inliers, the detectable rotation groups, and X-shaped patterns as
//! anomalies of a structure never seen in training; the tree uses the
//! MVTec-style layout under `train/good`, `test/good`,
//! `test/rot{90,270}`, and `test/xshape`.

use std::path::Path;

use anyhow::Result;
use firm_core::image::Image;
use firm_core::synth::{rotate_image, RotationTag};
use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::io::save_png;

#[derive(Debug, Clone)]
pub struct ToyParams {
    pub resolution: usize,
    pub train_inliers: usize,
    pub test_inliers: usize,
    /// Per-rotation test anomalies (90 and 270 degrees only; 180 falls
    /// back inside the inlier distribution and is not a usable anomaly).
    pub test_outliers_per_rotation: usize,
    /// Novel-structure anomalies (X shapes) in the test split.
    pub test_novel: usize,
    /// Bright-arm contrast above the background level.
    pub contrast: f64,
    /// Dim-arm contrast above the background level.
    pub dim_contrast: f64,
    /// Per-pixel uniform noise amplitude.
    pub noise: f64,
    pub seed: u64,
}

impl Default for ToyParams {
    fn default() -> Self {
        Self {
            resolution: 16,
            train_inliers: 32,
            test_inliers: 16,
            test_outliers_per_rotation: 7,
            test_novel: 10,
            contrast: 0.3,
            dim_contrast: 0.12,
            noise: 0.3,
            seed: 7,
        }
    }
}

/// One inlier: a cross at a random center whose horizontal arm is
/// brighter than the vertical arm, buried in pixel noise.
fn cross_image(params: &ToyParams, rng: &mut ChaCha8Rng) -> Image<f32> {
    let n = params.resolution;
    let cy = rng.random_range(2..n - 3);
    let cx = rng.random_range(2..n - 3);
    let background = rng.random_range(0.2..0.3);
    let h_arm = background + params.contrast;
    let v_arm = background + params.dim_contrast;
    let noise = params.noise;
    Array3::from_shape_fn((n, n, 1), |(y, x, _)| {
        let on_h = y == cy || y == cy + 1;
        let on_v = x == cx || x == cx + 1;
        let base = if on_h {
            h_arm
        } else if on_v {
            v_arm
        } else {
            background
        };
        (base + rng.random_range(-noise..noise)).clamp(0.0, 1.0) as f32
    })
}

/// A novel anomaly: an X of two diagonal strokes with the bright/dim split
/// of the inlier crosses.
fn x_image(params: &ToyParams, rng: &mut ChaCha8Rng) -> Image<f32> {
    let n = params.resolution;
    let offset = rng.random_range(-(n as i64) / 6..=(n as i64) / 6);
    let background = rng.random_range(0.2..0.3);
    let main = background + params.contrast;
    let anti = background + params.dim_contrast;
    let noise = params.noise;
    Array3::from_shape_fn((n, n, 1), |(y, x, _)| {
        let d_main = y as i64 - x as i64 - offset;
        let d_anti = y as i64 + x as i64 - (n as i64 - 1) - offset;
        let base = if d_main == 0 || d_main == 1 {
            main
        } else if d_anti == 0 || d_anti == 1 {
            anti
        } else {
            background
        };
        (base + rng.random_range(-noise..noise)).clamp(0.0, 1.0) as f32
    })
}

/// Write the toy tree; returns (train count, test count).
pub fn write_toy_dataset(root: &Path, params: &ToyParams) -> Result<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    for sub in ["train/good", "test/good", "test/rot90", "test/rot270", "test/xshape"] {
        std::fs::create_dir_all(root.join(sub))?;
    }
    for i in 0..params.train_inliers {
        let img = cross_image(params, &mut rng);
        save_png(&root.join(format!("train/good/{i:04}.png")), &img)?;
    }
    for i in 0..params.test_inliers {
        let img = cross_image(params, &mut rng);
        save_png(&root.join(format!("test/good/{i:04}.png")), &img)?;
    }
    let mut test = params.test_inliers;
    for tag in [RotationTag::R90, RotationTag::R270] {
        for i in 0..params.test_outliers_per_rotation {
            let img = cross_image(params, &mut rng);
            let rotated = rotate_image(&img, tag).expect("square toy image");
            save_png(
                &root.join(format!("test/rot{}/{i:04}.png", tag.degrees())),
                &rotated,
            )?;
            test += 1;
        }
    }
    for i in 0..params.test_novel {
        let img = x_image(params, &mut rng);
        save_png(&root.join(format!("test/xshape/{i:04}.png")), &img)?;
        test += 1;
    }
    Ok((params.train_inliers, test))
}
