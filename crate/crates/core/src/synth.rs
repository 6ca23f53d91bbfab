//! Synthetic-outlier generation.
//!
//! Four sources: deterministic right-angle rotations, cut-paste local
//! perturbation, Perlin-mask anomaly injection, and draws from an external
//! image pool. Every generator is a deterministic function of
//! (input, params, seed); parallel generation needs independent generator
//! streams.

use ndarray::{Array2, Array3};
use rand::Rng;

use crate::batch::LabeledSample;
use crate::error::{Error, Result};
use crate::image::{dims, Image, Mask};
use crate::scalar::Scalar;
use crate::OUTLIER_LABEL;

/// Right-angle rotation, the deterministic transformation family used for
/// semantic synthetic outliers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum RotationTag {
    R0,
    R90,
    R180,
    R270,
}

impl RotationTag {
    pub const ALL: [RotationTag; 4] = [Self::R0, Self::R90, Self::R180, Self::R270];

    /// The three non-identity rotations used as outlier generators.
    pub const OUTLIERS: [RotationTag; 3] = [Self::R90, Self::R180, Self::R270];

    pub fn degrees(self) -> u32 {
        match self {
            Self::R0 => 0,
            Self::R90 => 90,
            Self::R180 => 180,
            Self::R270 => 270,
        }
    }

    /// Group label: inlier tag for the identity, 2/3/4 for 90/180/270.
    pub fn group_label(self) -> u32 {
        match self {
            Self::R0 => crate::INLIER_LABEL,
            Self::R90 => 2,
            Self::R180 => 3,
            Self::R270 => 4,
        }
    }

    /// Composition in the cyclic group C4: `a.compose(b)` rotates by a then b.
    pub fn compose(self, other: RotationTag) -> RotationTag {
        let deg = (self.degrees() + other.degrees()) % 360;
        match deg {
            0 => Self::R0,
            90 => Self::R90,
            180 => Self::R180,
            _ => Self::R270,
        }
    }
}

/// Rotate a square image counter-clockwise by the tagged angle.
///
/// Pure pixel permutation: `rotate(90) . rotate(90) = rotate(180)`.
pub fn rotate_image<F: Scalar>(img: &Image<F>, tag: RotationTag) -> Result<Image<F>> {
    let (h, w) = dims(img);
    if h != w {
        return Err(Error::NonSquareRotation { h, w });
    }
    let n = h;
    let c = img.shape()[2];
    let out = match tag {
        RotationTag::R0 => img.clone(),
        RotationTag::R90 => {
            Array3::from_shape_fn((n, n, c), |(r, col, ch)| img[[col, n - 1 - r, ch]])
        }
        RotationTag::R180 => {
            Array3::from_shape_fn((n, n, c), |(r, col, ch)| img[[n - 1 - r, n - 1 - col, ch]])
        }
        RotationTag::R270 => {
            Array3::from_shape_fn((n, n, c), |(r, col, ch)| img[[n - 1 - col, r, ch]])
        }
    };
    Ok(out)
}

/// Blending mode for pasted or injected content.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Blend {
    Hard,
    LinearFeather,
}

/// Cut-paste perturbation parameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CutPasteParams {
    /// Rectangle area as a fraction of image area.
    pub area_ratio: (f64, f64),
    /// Width/height ratio of the rectangle.
    pub aspect: (f64, f64),
    pub blend: Blend,
}

impl Default for CutPasteParams {
    fn default() -> Self {
        Self {
            area_ratio: (0.02, 0.15),
            aspect: (0.3, 3.3),
            blend: Blend::Hard,
        }
    }
}

impl CutPasteParams {
    pub fn validate(&self) -> Result<()> {
        let (alo, ahi) = self.area_ratio;
        let (rlo, rhi) = self.aspect;
        if !(0.0 < alo && alo <= ahi && ahi < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "area_ratio ({alo}, {ahi}) outside (0, 1)"
            )));
        }
        if !(0.0 < rlo && rlo <= rhi) {
            return Err(Error::InvalidConfig(format!(
                "aspect ({rlo}, {rhi}) must be positive"
            )));
        }
        Ok(())
    }
}

const MAX_ATTEMPTS: usize = 100;

/// Cut a random rectangle and paste it elsewhere in the same image.
///
/// Returns the perturbed image and the destination mask; pixels outside the
/// mask are untouched. The mask-to-image area ratio stays within
/// `params.area_ratio`.
pub fn cutpaste_perturb<F: Scalar, R: Rng + ?Sized>(
    img: &Image<F>,
    params: &CutPasteParams,
    rng: &mut R,
) -> Result<(Image<F>, Mask)> {
    params.validate()?;
    let (h, w) = dims(img);
    let area = (h * w) as f64;
    for _ in 0..MAX_ATTEMPTS {
        let a = rng.random_range(params.area_ratio.0..=params.area_ratio.1);
        let r = rng.random_range(params.aspect.0..=params.aspect.1);
        let rect_h = ((a * area / r).sqrt().round() as usize).max(1);
        let rect_w = ((a * area * r).sqrt().round() as usize).max(1);
        if rect_h >= h || rect_w >= w {
            continue;
        }
        let ratio = (rect_h * rect_w) as f64 / area;
        if ratio < params.area_ratio.0 || ratio > params.area_ratio.1 {
            continue; // rounding pushed the rectangle out of range
        }
        let src = (
            rng.random_range(0..=h - rect_h),
            rng.random_range(0..=w - rect_w),
        );
        let dst = (
            rng.random_range(0..=h - rect_h),
            rng.random_range(0..=w - rect_w),
        );
        if src == dst {
            continue;
        }
        let mut out = img.clone();
        let channels = img.shape()[2];
        let feather = feather_width(rect_h, rect_w);
        for dy in 0..rect_h {
            for dx in 0..rect_w {
                let alpha = match params.blend {
                    Blend::Hard => F::one(),
                    Blend::LinearFeather => {
                        let edge = dy.min(rect_h - 1 - dy).min(dx).min(rect_w - 1 - dx);
                        F::from_f64_lossy(((edge + 1) as f64 / feather as f64).min(1.0))
                    }
                };
                for ch in 0..channels {
                    let pasted = img[[src.0 + dy, src.1 + dx, ch]];
                    let base = img[[dst.0 + dy, dst.1 + dx, ch]];
                    out[[dst.0 + dy, dst.1 + dx, ch]] =
                        pasted * alpha + base * (F::one() - alpha);
                }
            }
        }
        let mut mask = Array2::from_elem((h, w), false);
        mask.slice_mut(ndarray::s![dst.0..dst.0 + rect_h, dst.1..dst.1 + rect_w])
            .fill(true);
        return Ok((out, mask));
    }
    Err(Error::CutPasteSamplingFailed {
        attempts: MAX_ATTEMPTS,
    })
}

fn feather_width(rect_h: usize, rect_w: usize) -> usize {
    ((rect_h.min(rect_w) as f64 * 0.2).round() as usize).max(1)
}

/// Perlin-field parameters for anomaly-mask generation.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerlinParams {
    /// Number of octaves summed (lattice frequency doubles per octave).
    pub grid_octaves: u32,
    /// Threshold on the [0, 1]-rescaled field.
    pub threshold: f64,
    /// Seed recorded in configs; callers derive the generator from it.
    pub seed: u64,
}

impl Default for PerlinParams {
    fn default() -> Self {
        Self {
            grid_octaves: 2,
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl PerlinParams {
    pub fn validate(&self) -> Result<()> {
        if self.grid_octaves < 1 {
            return Err(Error::InvalidConfig("grid_octaves must be >= 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "threshold {} outside (0, 1)",
                self.threshold
            )));
        }
        Ok(())
    }
}

const PERLIN_BASE_CELLS: usize = 4;

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// Classic lattice-gradient noise over a (cells x cells) grid, one octave.
fn perlin_octave<R: Rng + ?Sized>(h: usize, w: usize, cells: usize, rng: &mut R) -> Array2<f64> {
    let mut gradients = Array2::from_elem((cells + 1, cells + 1), (0.0f64, 0.0f64));
    for g in gradients.iter_mut() {
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        *g = (angle.cos(), angle.sin());
    }
    let mut field = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let u = x as f64 / w as f64 * cells as f64;
            let v = y as f64 / h as f64 * cells as f64;
            let i = (u.floor() as usize).min(cells - 1);
            let j = (v.floor() as usize).min(cells - 1);
            let fu = u - i as f64;
            let fv = v - j as f64;
            let dot = |gi: usize, gj: usize, dx: f64, dy: f64| {
                let (gx, gy) = gradients[[gj, gi]];
                gx * dx + gy * dy
            };
            let n00 = dot(i, j, fu, fv);
            let n10 = dot(i + 1, j, fu - 1.0, fv);
            let n01 = dot(i, j + 1, fu, fv - 1.0);
            let n11 = dot(i + 1, j + 1, fu - 1.0, fv - 1.0);
            let su = fade(fu);
            let sv = fade(fv);
            let nx0 = n00 + su * (n10 - n00);
            let nx1 = n01 + su * (n11 - n01);
            field[[y, x]] = nx0 + sv * (nx1 - nx0);
        }
    }
    field
}

/// Binarized multi-octave Perlin field intersected with the foreground mask.
///
/// The summed field is min-max rescaled to [0, 1] before thresholding, so a
/// non-degenerate field always yields a proper split. An empty foreground
/// yields an empty mask (valid; callers must check).
pub fn perlin_anomaly_mask<R: Rng + ?Sized>(
    foreground: &Mask,
    params: &PerlinParams,
    rng: &mut R,
) -> Result<Mask> {
    params.validate()?;
    let (h, w) = foreground.dim();
    if h == 0 || w == 0 {
        return Ok(foreground.clone());
    }
    let mut field = Array2::<f64>::zeros((h, w));
    let mut amp = 1.0;
    for octave in 0..params.grid_octaves {
        let cells = PERLIN_BASE_CELLS << octave;
        let layer = perlin_octave(h, w, cells, rng);
        field.zip_mut_with(&layer, |f, &l| *f += amp * l);
        amp *= 0.5;
    }
    let min = field.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = field.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (max - min).max(f64::MIN_POSITIVE);
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        foreground[[y, x]] && (field[[y, x]] - min) / span >= params.threshold
    }))
}

/// Replace pixels inside `m_anomaly` with donor content.
///
/// Hard blending copies the donor; linear feathering ramps the donor in over
/// the distance to the mask boundary (3 px), staying strictly inside the
/// mask either way.
pub fn inject_anomaly<F: Scalar>(
    img: &Image<F>,
    donor: &Image<F>,
    m_anomaly: &Mask,
    blend: Blend,
) -> Result<Image<F>> {
    if img.shape() != donor.shape() {
        return Err(Error::DimMismatch {
            context: "inject donor",
            expected: format!("{:?}", img.shape()),
            got: format!("{:?}", donor.shape()),
        });
    }
    let (h, w) = dims(img);
    if m_anomaly.dim() != (h, w) {
        return Err(Error::DimMismatch {
            context: "inject mask",
            expected: format!("{h}x{w}"),
            got: format!("{:?}", m_anomaly.dim()),
        });
    }
    let c = img.shape()[2];
    let mut out = img.clone();
    let depth = match blend {
        Blend::Hard => None,
        Blend::LinearFeather => Some(interior_depth(m_anomaly)),
    };
    const FEATHER: f64 = 3.0;
    for y in 0..h {
        for x in 0..w {
            if !m_anomaly[[y, x]] {
                continue;
            }
            let alpha = match &depth {
                None => F::one(),
                Some(d) => F::from_f64_lossy((d[[y, x]] as f64 / FEATHER).min(1.0)),
            };
            for ch in 0..c {
                out[[y, x, ch]] =
                    donor[[y, x, ch]] * alpha + img[[y, x, ch]] * (F::one() - alpha);
            }
        }
    }
    Ok(out)
}

/// 4-neighbor distance (in pixels) from each set pixel to the nearest unset
/// pixel; 0 outside the mask, >= 1 inside.
fn interior_depth(mask: &Mask) -> Array2<u32> {
    let (h, w) = mask.dim();
    let mut depth = Array2::from_elem((h, w), u32::MAX);
    let mut queue = std::collections::VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] {
                depth[[y, x]] = 0;
                queue.push_back((y, x));
            }
        }
    }
    if queue.is_empty() {
        // all-set mask: depth measured from the image border
        for y in 0..h {
            for x in 0..w {
                depth[[y, x]] = 1 + y.min(x).min(h - 1 - y).min(w - 1 - x) as u32;
            }
        }
        return depth;
    }
    while let Some((y, x)) = queue.pop_front() {
        let d = depth[[y, x]];
        let visit = |depth: &mut Array2<u32>, queue: &mut std::collections::VecDeque<(usize, usize)>, ny: usize, nx: usize| {
            if depth[[ny, nx]] == u32::MAX {
                depth[[ny, nx]] = d + 1;
                queue.push_back((ny, nx));
            }
        };
        if y > 0 {
            visit(&mut depth, &mut queue, y - 1, x);
        }
        if y + 1 < h {
            visit(&mut depth, &mut queue, y + 1, x);
        }
        if x > 0 {
            visit(&mut depth, &mut queue, y, x - 1);
        }
        if x + 1 < w {
            visit(&mut depth, &mut queue, y, x + 1);
        }
    }
    depth
}

/// Fixed-resolution pool of external images used for outlier exposure.
#[derive(Debug, Clone)]
pub struct ExternalPool<F: Scalar> {
    images: Vec<Image<F>>,
}

impl<F: Scalar> ExternalPool<F> {
    pub fn new(images: Vec<Image<F>>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::EmptyPool);
        }
        let shape = images[0].shape().to_vec();
        for (i, img) in images.iter().enumerate() {
            if img.shape() != shape.as_slice() {
                return Err(Error::DimMismatch {
                    context: "pool image resolution",
                    expected: format!("{shape:?}"),
                    got: format!("{:?} (image {i})", img.shape()),
                });
            }
        }
        Ok(Self { images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Image<F> {
        &self.images[idx]
    }
}

/// Uniform draw from the pool, labeled as a synthetic outlier.
pub fn sample_external_outlier<F: Scalar, R: Rng + ?Sized>(
    pool: &ExternalPool<F>,
    rng: &mut R,
) -> Result<LabeledSample<F>> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    let idx = rng.random_range(0..pool.len());
    Ok(LabeledSample {
        image: pool.images[idx].clone(),
        label: OUTLIER_LABEL,
        source_id: format!("pool/{idx}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn checker(n: usize) -> Image<f64> {
        Array3::from_shape_fn((n, n, 1), |(y, x, _)| ((y * 31 + x * 7) % 10) as f64 / 10.0)
    }

    #[test]
    fn rotation_2x2_index_map() {
        // [[a, b], [c, d]] rotated 90 degrees CCW -> [[b, d], [a, c]]
        let mut img: Image<f64> = Array3::zeros((2, 2, 1));
        let (a, b, c, d) = (0.1, 0.2, 0.3, 0.4);
        img[[0, 0, 0]] = a;
        img[[0, 1, 0]] = b;
        img[[1, 0, 0]] = c;
        img[[1, 1, 0]] = d;
        let r = rotate_image(&img, RotationTag::R90).unwrap();
        assert_eq!(
            [r[[0, 0, 0]], r[[0, 1, 0]], r[[1, 0, 0]], r[[1, 1, 0]]],
            [b, d, a, c]
        );
    }

    #[test]
    fn rotation_identity_and_period() {
        let img = checker(6);
        assert_eq!(rotate_image(&img, RotationTag::R0).unwrap(), img);
        let mut four = img.clone();
        for _ in 0..4 {
            four = rotate_image(&four, RotationTag::R90).unwrap();
        }
        assert_eq!(four, img);
    }

    #[test]
    fn rotations_form_c4_group() {
        let img = checker(5);
        for a in RotationTag::ALL {
            for b in RotationTag::ALL {
                let sequential = rotate_image(&rotate_image(&img, a).unwrap(), b).unwrap();
                let composed = rotate_image(&img, a.compose(b)).unwrap();
                assert_eq!(sequential, composed, "{a:?} then {b:?}");
            }
        }
    }

    #[test]
    fn rotation_rejects_non_square() {
        let img: Image<f64> = Array3::zeros((2, 3, 1));
        assert!(matches!(
            rotate_image(&img, RotationTag::R90),
            Err(Error::NonSquareRotation { .. })
        ));
    }

    #[test]
    fn cutpaste_locality_and_area() {
        let img = checker(32);
        let params = CutPasteParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let (out, mask) = cutpaste_perturb(&img, &params, &mut rng).unwrap();
            for y in 0..32 {
                for x in 0..32 {
                    if !mask[[y, x]] {
                        assert_eq!(out[[y, x, 0]], img[[y, x, 0]]);
                    }
                }
            }
            let ratio = crate::image::mask_fraction(&mask);
            assert!((0.02..=0.15).contains(&ratio), "ratio {ratio}");
        }
    }

    #[test]
    fn cutpaste_deterministic_under_seed() {
        let img = checker(24);
        let params = CutPasteParams {
            blend: Blend::LinearFeather,
            ..Default::default()
        };
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            cutpaste_perturb(&img, &params, &mut rng).unwrap()
        };
        let (img_a, mask_a) = run();
        let (img_b, mask_b) = run();
        assert_eq!(img_a, img_b);
        assert_eq!(mask_a, mask_b);
    }

    #[test]
    fn perlin_mask_subset_of_foreground() {
        let mut fg = Array2::from_elem((48, 48), false);
        fg.slice_mut(ndarray::s![10..40, 5..30]).fill(true);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mask = perlin_anomaly_mask(&fg, &PerlinParams::default(), &mut rng).unwrap();
        for y in 0..48 {
            for x in 0..48 {
                assert!(!mask[[y, x]] || fg[[y, x]]);
            }
        }
    }

    #[test]
    fn perlin_empty_foreground_gives_empty_mask() {
        let fg = Array2::from_elem((16, 16), false);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mask = perlin_anomaly_mask(&fg, &PerlinParams::default(), &mut rng).unwrap();
        assert!(mask.iter().all(|&b| !b));
    }

    #[test]
    fn perlin_full_foreground_fraction_and_determinism() {
        let fg = Array2::from_elem((64, 64), true);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            perlin_anomaly_mask(&fg, &PerlinParams::default(), &mut rng).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        let frac = crate::image::mask_fraction(&a);
        assert!(frac > 0.0 && frac < 1.0, "fraction {frac}");
    }

    #[test]
    fn inject_empty_and_full_masks() {
        let img = checker(8);
        let donor = checker(8).mapv(|v| 1.0 - v);
        let empty = Array2::from_elem((8, 8), false);
        assert_eq!(
            inject_anomaly(&img, &donor, &empty, Blend::Hard).unwrap(),
            img
        );
        let full = Array2::from_elem((8, 8), true);
        assert_eq!(
            inject_anomaly(&img, &donor, &full, Blend::Hard).unwrap(),
            donor
        );
    }

    #[test]
    fn inject_half_mask_elementwise() {
        let img = checker(8);
        let donor = checker(8).mapv(|v| (v + 0.35) % 1.0);
        let mut mask = Array2::from_elem((8, 8), false);
        mask.slice_mut(ndarray::s![..4, ..]).fill(true);
        let out = inject_anomaly(&img, &donor, &mask, Blend::Hard).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let expected = if mask[[y, x]] { &donor } else { &img };
                assert_eq!(out[[y, x, 0]], expected[[y, x, 0]]);
            }
        }
    }

    #[test]
    fn inject_feather_stays_inside_mask() {
        let img = checker(16);
        let donor = checker(16).mapv(|v| 1.0 - v);
        let mut mask = Array2::from_elem((16, 16), false);
        mask.slice_mut(ndarray::s![4..12, 4..12]).fill(true);
        let out = inject_anomaly(&img, &donor, &mask, Blend::LinearFeather).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                if !mask[[y, x]] {
                    assert_eq!(out[[y, x, 0]], img[[y, x, 0]]);
                }
            }
        }
        // deep interior is pure donor
        assert_eq!(out[[8, 8, 0]], donor[[8, 8, 0]]);
    }

    #[test]
    fn pool_draws_are_roughly_uniform() {
        let images: Vec<Image<f64>> = (0..10)
            .map(|i| Array3::from_elem((2, 2, 1), i as f64 / 10.0))
            .collect();
        let pool = ExternalPool::new(images).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut counts = [0usize; 10];
        for _ in 0..1000 {
            let s = sample_external_outlier(&pool, &mut rng).unwrap();
            assert_ne!(s.label, crate::INLIER_LABEL);
            let idx: usize = s.source_id.strip_prefix("pool/").unwrap().parse().unwrap();
            counts[idx] += 1;
        }
        for &c in &counts {
            let freq = c as f64 / 1000.0;
            assert!((freq - 0.1).abs() <= 0.05, "freq {freq}");
        }
    }

    #[test]
    fn pool_of_one_always_returns_it() {
        let pool = ExternalPool::new(vec![Array3::from_elem((2, 2, 1), 0.5f64)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let s = sample_external_outlier(&pool, &mut rng).unwrap();
            assert_eq!(s.source_id, "pool/0");
        }
    }

    #[test]
    fn pool_rejects_mixed_resolutions() {
        let images: Vec<Image<f64>> = vec![Array3::zeros((2, 2, 1)), Array3::zeros((3, 2, 1))];
        assert!(ExternalPool::new(images).is_err());
    }
}
