//! Foreground masks, foreground-aware patch-pair sampling, and dense patch
//! grids for inference.
//!
//! Training pairs are fixed-size square crops taken in pixel space. A normal
//! pair anchors its first patch on the object foreground (coverage at least
//! `tau_fore`) and requires the second to overlap it by `tau_over` of the
//! patch area; an outlier pair must touch the synthetic anomaly mask instead.

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::image::{dims, to_gray, Image, Mask};
use crate::scalar::Scalar;

/// Foreground mask `m` with the synthetic anomaly mask `m_anomaly` nested
/// inside it.
#[derive(Debug, Clone)]
pub struct MaskPair {
    foreground: Mask,
    anomaly: Mask,
}

impl MaskPair {
    /// Checks `anomaly` is an elementwise subset of `foreground`.
    pub fn new(foreground: Mask, anomaly: Mask) -> Result<Self> {
        if foreground.dim() != anomaly.dim() {
            return Err(Error::DimMismatch {
                context: "mask pair",
                expected: format!("{:?}", foreground.dim()),
                got: format!("{:?}", anomaly.dim()),
            });
        }
        for (f, a) in foreground.iter().zip(anomaly.iter()) {
            if *a && !*f {
                return Err(Error::InvalidConfig(
                    "anomaly mask escapes the foreground mask".into(),
                ));
            }
        }
        Ok(Self {
            foreground,
            anomaly,
        })
    }

    pub fn foreground(&self) -> &Mask {
        &self.foreground
    }

    pub fn anomaly(&self) -> &Mask {
        &self.anomaly
    }
}

/// How threshold selection works in [`foreground_mask`].
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdMode {
    /// Otsu's method on a 256-bin grayscale histogram.
    Otsu,
    /// Fixed grayscale threshold in [0, 1].
    Fixed(f64),
}

/// Which ratio the foreground-coverage constraint uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoverageRule {
    /// |patch n m| / |patch|: fraction of the patch covered by foreground.
    PatchFraction,
    /// |patch n m| / |m|: fraction of the whole mask inside the patch.
    MaskFraction,
}

/// Patch geometry and sampling thresholds.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchConfig {
    /// Patch side in pixels.
    pub patch: usize,
    /// Grid stride in pixels.
    pub stride: usize,
    pub tau_fore: f64,
    pub tau_over: f64,
    #[serde(default = "default_coverage")]
    pub coverage: CoverageRule,
}

fn default_coverage() -> CoverageRule {
    CoverageRule::PatchFraction
}

impl PatchConfig {
    pub fn new(patch: usize, stride: usize) -> Self {
        Self {
            patch,
            stride,
            tau_fore: 0.9,
            tau_over: 0.15,
            coverage: CoverageRule::PatchFraction,
        }
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if !(0 < self.stride && self.stride < self.patch && self.patch <= h.min(w)) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < stride < patch <= min(H, W); got stride {}, patch {}, image {h}x{w}",
                self.stride, self.patch
            )));
        }
        for (name, t) in [("tau_fore", self.tau_fore), ("tau_over", self.tau_over)] {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::InvalidConfig(format!("{name} {t} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

/// A square crop and where it came from.
#[derive(Debug, Clone)]
pub struct Patch<F: Scalar> {
    pub pixels: Image<F>,
    /// (row, col) of the top-left corner in the source image.
    pub origin: (usize, usize),
}

impl<F: Scalar> Patch<F> {
    pub fn side(&self) -> usize {
        self.pixels.shape()[0]
    }
}

/// Threshold + morphological open-then-close foreground extraction.
///
/// Returns the mask and whether it came out empty (all-background images are
/// valid input; the flag lets callers decide).
pub fn foreground_mask<F: Scalar>(
    img: &Image<F>,
    mode: ThresholdMode,
    morph_radius: usize,
) -> (Mask, bool) {
    let gray = to_gray(img);
    let threshold = match mode {
        ThresholdMode::Fixed(t) => t,
        ThresholdMode::Otsu => otsu_threshold(&gray),
    };
    let raw = gray.mapv(|v| v.to_f64_lossy() >= threshold);
    let mask = open_close(&raw, morph_radius);
    let empty = !mask.iter().any(|&b| b);
    (mask, empty)
}

/// Otsu's threshold over a 256-bin histogram of values in [0, 1].
fn otsu_threshold<F: Scalar>(gray: &Array2<F>) -> f64 {
    const BINS: usize = 256;
    let mut hist = [0u64; BINS];
    for &v in gray.iter() {
        let bin = ((v.to_f64_lossy() * (BINS as f64 - 1.0)).round() as i64)
            .clamp(0, BINS as i64 - 1) as usize;
        hist[bin] += 1;
    }
    let total: u64 = hist.iter().sum();
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum();
    let mut weight_bg = 0.0;
    let mut sum_bg = 0.0;
    let mut best = (0usize, -1.0f64);
    for (bin, &count) in hist.iter().enumerate().take(BINS - 1) {
        weight_bg += count as f64;
        if weight_bg == 0.0 {
            continue;
        }
        let weight_fg = total as f64 - weight_bg;
        if weight_fg == 0.0 {
            break;
        }
        sum_bg += bin as f64 * count as f64;
        let mean_bg = sum_bg / weight_bg;
        let mean_fg = (sum_all - sum_bg) / weight_fg;
        let between = weight_bg * weight_fg * (mean_bg - mean_fg).powi(2);
        if between > best.1 {
            best = (bin, between);
        }
    }
    // foreground = strictly above the chosen bin
    (best.0 as f64 + 0.5) / (BINS as f64 - 1.0)
}

fn disk_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut offsets = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                offsets.push((dy, dx));
            }
        }
    }
    offsets
}

// Out-of-bounds neighbors are ignored in both operations, so erosion and
// dilation stay an adjoint pair on the bounded grid and open-then-close is
// exactly idempotent.
fn erode(mask: &Mask, offsets: &[(isize, isize)]) -> Mask {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        offsets.iter().all(|&(dy, dx)| {
            let ny = y as isize + dy;
            let nx = x as isize + dx;
            ny < 0
                || nx < 0
                || ny >= h as isize
                || nx >= w as isize
                || mask[[ny as usize, nx as usize]]
        })
    })
}

fn dilate(mask: &Mask, offsets: &[(isize, isize)]) -> Mask {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        offsets.iter().any(|&(dy, dx)| {
            let ny = y as isize + dy;
            let nx = x as isize + dx;
            ny >= 0
                && nx >= 0
                && ny < h as isize
                && nx < w as isize
                && mask[[ny as usize, nx as usize]]
        })
    })
}

/// Morphological opening followed by closing with a disk element.
pub fn open_close(mask: &Mask, radius: usize) -> Mask {
    if radius == 0 {
        return mask.clone();
    }
    let offsets = disk_offsets(radius);
    let opened = dilate(&erode(mask, &offsets), &offsets);
    erode(&dilate(&opened, &offsets), &offsets)
}

/// Summed-area table for O(1) rectangle population counts.
struct IntegralMask {
    table: Array2<u64>,
}

impl IntegralMask {
    fn new(mask: &Mask) -> Self {
        let (h, w) = mask.dim();
        let mut table = Array2::<u64>::zeros((h + 1, w + 1));
        for y in 0..h {
            for x in 0..w {
                table[[y + 1, x + 1]] = mask[[y, x]] as u64 + table[[y, x + 1]]
                    + table[[y + 1, x]]
                    - table[[y, x]];
            }
        }
        Self { table }
    }

    /// Set-pixel count in `[y, y+side) x [x, x+side)`.
    fn rect(&self, y: usize, x: usize, side: usize) -> u64 {
        self.table[[y + side, x + side]] + self.table[[y, x]]
            - self.table[[y, x + side]]
            - self.table[[y + side, x]]
    }
}

fn extract<F: Scalar>(img: &Image<F>, y: usize, x: usize, side: usize) -> Patch<F> {
    Patch {
        pixels: img
            .slice(ndarray::s![y..y + side, x..x + side, ..])
            .to_owned(),
        origin: (y, x),
    }
}

/// Pair kind for [`sample_positive_patch_pair`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchKind {
    Normal,
    Outlier,
}

/// Overlap (in pixels) of two equal-side square patches.
pub fn patch_overlap(a: (usize, usize), b: (usize, usize), side: usize) -> usize {
    let dy = a.0.abs_diff(b.0);
    let dx = a.1.abs_diff(b.1);
    side.saturating_sub(dy) * side.saturating_sub(dx)
}

/// Exact feasible set of first-patch origins for the given mask and kind.
fn feasible_first_origins(
    relevant: &Mask,
    kind: PatchKind,
    cfg: &PatchConfig,
) -> Vec<(usize, usize)> {
    let (h, w) = relevant.dim();
    let side = cfg.patch;
    let patch_area = (side * side) as f64;
    let integral = IntegralMask::new(relevant);
    let mask_total: u64 = relevant.iter().filter(|&&b| b).count() as u64;
    (0..=h - side)
        .flat_map(|y| (0..=w - side).map(move |x| (y, x)))
        .filter(|&(y, x)| {
            let hit = integral.rect(y, x, side);
            match kind {
                PatchKind::Outlier => hit > 0,
                PatchKind::Normal => {
                    let denom = match cfg.coverage {
                        CoverageRule::PatchFraction => patch_area,
                        CoverageRule::MaskFraction => mask_total as f64,
                    };
                    denom > 0.0 && hit as f64 / denom >= cfg.tau_fore
                }
            }
        })
        .collect()
}

/// Whether the first-patch constraint admits any origin at all.
pub fn first_patch_feasible(relevant: &Mask, kind: PatchKind, cfg: &PatchConfig) -> bool {
    let (h, w) = relevant.dim();
    if cfg.patch > h.min(w) {
        return false;
    }
    !feasible_first_origins(relevant, kind, cfg).is_empty()
}

/// Draw a positive patch pair satisfying the foreground/overlap constraints.
///
/// The first origin is drawn uniformly from the exact feasible set (computed
/// with an integral image over the relevant mask); the second is rejection
/// sampled inside the overlap window until the `tau_over` constraint holds.
pub fn sample_positive_patch_pair<F: Scalar, R: Rng + ?Sized>(
    img: &Image<F>,
    masks: &MaskPair,
    kind: PatchKind,
    cfg: &PatchConfig,
    rng: &mut R,
) -> Result<(Patch<F>, Patch<F>)> {
    let (h, w) = dims(img);
    cfg.validate(h, w)?;
    if masks.foreground().dim() != (h, w) {
        return Err(Error::DimMismatch {
            context: "patch masks",
            expected: format!("{h}x{w}"),
            got: format!("{:?}", masks.foreground().dim()),
        });
    }
    let side = cfg.patch;
    let patch_area = (side * side) as f64;

    let relevant = match kind {
        PatchKind::Normal => masks.foreground(),
        PatchKind::Outlier => masks.anomaly(),
    };
    let feasible = feasible_first_origins(relevant, kind, cfg);
    if feasible.is_empty() {
        let mask_total: usize = relevant.iter().filter(|&&b| b).count();
        return Err(Error::PatchSamplingFailed {
            reason: format!(
                "no feasible first-patch origin ({kind:?}, patch {side}, mask pixels {mask_total})"
            ),
        });
    }
    let first = feasible[rng.random_range(0..feasible.len())];

    // second patch: any origin in the overlap window meeting tau_over
    let y_lo = first.0.saturating_sub(side - 1);
    let y_hi = (first.0 + side - 1).min(h - side);
    let x_lo = first.1.saturating_sub(side - 1);
    let x_hi = (first.1 + side - 1).min(w - side);
    for _ in 0..100 {
        let second = (
            rng.random_range(y_lo..=y_hi),
            rng.random_range(x_lo..=x_hi),
        );
        let overlap = patch_overlap(first, second, side) as f64 / patch_area;
        if overlap >= cfg.tau_over {
            return Ok((
                extract(img, first.0, first.1, side),
                extract(img, second.0, second.1, side),
            ));
        }
    }
    Err(Error::PatchSamplingFailed {
        reason: format!(
            "no overlapping second patch after 100 attempts (first {:?}, tau_over {})",
            first, cfg.tau_over
        ),
    })
}

/// Row-major dense grid of overlapping patches with origins 0, S, 2S, ...
///
/// Grid shape is `(floor((H-P)/S)+1, floor((W-P)/S)+1)`; no snapped-to-edge
/// row or column is added when the stride does not divide evenly.
pub fn extract_patch_grid<F: Scalar>(
    img: &Image<F>,
    patch: usize,
    stride: usize,
) -> Result<Vec<Patch<F>>> {
    let (h, w) = dims(img);
    if patch == 0 || patch > h.min(w) {
        return Err(Error::InvalidConfig(format!(
            "patch {patch} exceeds image {h}x{w}"
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidConfig("stride must be positive".into()));
    }
    let (rows, cols) = grid_shape(h, w, patch, stride);
    let mut patches = Vec::with_capacity(rows * cols);
    for gy in 0..rows {
        for gx in 0..cols {
            patches.push(extract(img, gy * stride, gx * stride, patch));
        }
    }
    Ok(patches)
}

/// (rows, cols) of the dense patch grid.
pub fn grid_shape(h: usize, w: usize, patch: usize, stride: usize) -> (usize, usize) {
    ((h - patch) / stride + 1, (w - patch) / stride + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bright_square(image_side: usize, top: usize, left: usize, side: usize) -> Image<f64> {
        let mut img = Array3::zeros((image_side, image_side, 1));
        img.slice_mut(ndarray::s![top..top + side, left..left + side, ..])
            .fill(0.9);
        img
    }

    #[test]
    fn fixed_threshold_recovers_square() {
        let img = bright_square(128, 40, 30, 40);
        let (mask, empty) = foreground_mask(&img, ThresholdMode::Fixed(0.5), 1);
        assert!(!empty);
        for y in 0..128 {
            for x in 0..128 {
                let inside = (40..80).contains(&y) && (30..70).contains(&x);
                if inside && (41..79).contains(&y) && (31..69).contains(&x) {
                    assert!(mask[[y, x]], "interior pixel ({y},{x}) lost");
                }
                let near = (39..81).contains(&y) && (29..71).contains(&x);
                if !near {
                    assert!(!mask[[y, x]], "background pixel ({y},{x}) set");
                }
            }
        }
    }

    #[test]
    fn all_black_image_flagged_empty() {
        let img: Image<f64> = Array3::zeros((32, 32, 1));
        let (mask, empty) = foreground_mask(&img, ThresholdMode::Fixed(0.5), 1);
        assert!(empty);
        assert!(mask.iter().all(|&b| !b));
    }

    #[test]
    fn otsu_separates_bimodal_image() {
        let mut img: Image<f64> = Array3::from_elem((64, 64, 1), 0.1);
        img.slice_mut(ndarray::s![16..48, 16..48, ..]).fill(0.8);
        let (mask, empty) = foreground_mask(&img, ThresholdMode::Otsu, 0);
        assert!(!empty);
        assert!(mask[[32, 32]]);
        assert!(!mask[[0, 0]]);
    }

    #[test]
    fn open_close_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..5 {
            let raw: Mask =
                Array2::from_shape_fn((48, 48), |_| rand::Rng::random_bool(&mut rng, 0.55));
            let once = open_close(&raw, 2);
            let twice = open_close(&once, 2);
            assert_eq!(once, twice);
        }
    }

    #[test]
    fn grid_counts_match_closed_form() {
        let img: Image<f64> = Array3::zeros((256, 256, 1));
        let grid = extract_patch_grid(&img, 32, 16).unwrap();
        assert_eq!(grid.len(), 225);
        let img: Image<f64> = Array3::zeros((64, 64, 1));
        assert_eq!(extract_patch_grid(&img, 32, 16).unwrap().len(), 9);
        let img: Image<f64> = Array3::zeros((32, 32, 1));
        let whole = extract_patch_grid(&img, 32, 16).unwrap();
        assert_eq!(whole.len(), 1);
        assert_eq!(whole[0].origin, (0, 0));
    }

    #[test]
    fn grid_rejects_oversized_patch() {
        let img: Image<f64> = Array3::zeros((16, 16, 1));
        assert!(extract_patch_grid(&img, 17, 4).is_err());
    }

    #[test]
    fn grid_patches_stay_in_bounds_and_cover() {
        let img: Image<f64> =
            Array3::from_shape_fn((50, 70, 1), |(y, x, _)| ((y + x) % 7) as f64 / 7.0);
        let (p, s) = (16, 8);
        let grid = extract_patch_grid(&img, p, s).unwrap();
        let (rows, cols) = grid_shape(50, 70, p, s);
        assert_eq!(grid.len(), rows * cols);
        let mut covered = Array2::from_elem((50, 70), false);
        for patch in &grid {
            let (y, x) = patch.origin;
            assert!(y + p <= 50 && x + p <= 70);
            covered
                .slice_mut(ndarray::s![y..y + p, x..x + p])
                .fill(true);
            // pixels are a faithful crop
            assert_eq!(patch.pixels[[0, 0, 0]], img[[y, x, 0]]);
        }
        let last_y = (rows - 1) * s + p;
        let last_x = (cols - 1) * s + p;
        for y in 0..last_y {
            for x in 0..last_x {
                assert!(covered[[y, x]], "uncovered pixel ({y},{x})");
            }
        }
    }

    fn mvtec_like_masks(n: usize) -> MaskPair {
        let mut fg = Array2::from_elem((n, n), false);
        fg.slice_mut(ndarray::s![n / 8..n - n / 8, n / 6..n - n / 6])
            .fill(true);
        let mut anomaly = Array2::from_elem((n, n), false);
        anomaly
            .slice_mut(ndarray::s![n / 3..n / 2, n / 3..n / 2])
            .fill(true);
        MaskPair::new(fg, anomaly).unwrap()
    }

    /// Brute-force recheck of the pair constraints from raw masks.
    fn recheck(
        masks: &MaskPair,
        kind: PatchKind,
        cfg: &PatchConfig,
        a: &Patch<f64>,
        b: &Patch<f64>,
    ) -> bool {
        let side = cfg.patch;
        let count = |mask: &Mask, origin: (usize, usize)| -> usize {
            let mut c = 0;
            for y in origin.0..origin.0 + side {
                for x in origin.1..origin.1 + side {
                    c += mask[[y, x]] as usize;
                }
            }
            c
        };
        let overlap_ok =
            patch_overlap(a.origin, b.origin, side) as f64 / (side * side) as f64 >= cfg.tau_over;
        match kind {
            PatchKind::Normal => {
                let cov = count(masks.foreground(), a.origin) as f64 / (side * side) as f64;
                overlap_ok && cov >= cfg.tau_fore
            }
            PatchKind::Outlier => {
                let touches =
                    count(masks.anomaly(), a.origin) > 0 || count(masks.anomaly(), b.origin) > 0;
                overlap_ok && touches
            }
        }
    }

    #[test]
    fn sampled_pairs_pass_independent_recheck() {
        let n = 96;
        let img: Image<f64> =
            Array3::from_shape_fn((n, n, 1), |(y, x, _)| ((y * x) % 11) as f64 / 11.0);
        let masks = mvtec_like_masks(n);
        let cfg = PatchConfig::new(24, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in [PatchKind::Normal, PatchKind::Outlier] {
            for _ in 0..200 {
                let (a, b) =
                    sample_positive_patch_pair(&img, &masks, kind, &cfg, &mut rng).unwrap();
                assert!(recheck(&masks, kind, &cfg, &a, &b));
                assert!(a.origin.0 + cfg.patch <= n && a.origin.1 + cfg.patch <= n);
                assert!(b.origin.0 + cfg.patch <= n && b.origin.1 + cfg.patch <= n);
            }
        }
    }

    #[test]
    fn full_foreground_whole_image_patch() {
        let n = 32;
        let img: Image<f64> = Array3::from_elem((n, n, 1), 0.6);
        let fg = Array2::from_elem((n, n), true);
        let masks = MaskPair::new(fg.clone(), fg).unwrap();
        let cfg = PatchConfig::new(n, n / 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) =
            sample_positive_patch_pair(&img, &masks, PatchKind::Normal, &cfg, &mut rng).unwrap();
        assert_eq!(a.origin, (0, 0));
        assert_eq!(b.origin, (0, 0));
        assert_eq!(patch_overlap(a.origin, b.origin, n), n * n);
    }

    #[test]
    fn empty_anomaly_mask_fails_outlier_sampling() {
        let n = 32;
        let img: Image<f64> = Array3::from_elem((n, n, 1), 0.6);
        let fg = Array2::from_elem((n, n), true);
        let masks = MaskPair::new(fg, Array2::from_elem((n, n), false)).unwrap();
        let cfg = PatchConfig::new(16, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = sample_positive_patch_pair(&img, &masks, PatchKind::Outlier, &cfg, &mut rng)
            .unwrap_err();
        assert!(matches!(err, Error::PatchSamplingFailed { .. }));
    }

    #[test]
    fn sampling_deterministic_under_seed() {
        let n = 64;
        let img: Image<f64> =
            Array3::from_shape_fn((n, n, 1), |(y, x, _)| ((y + 3 * x) % 13) as f64 / 13.0);
        let masks = mvtec_like_masks(n);
        let cfg = PatchConfig::new(16, 8);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(31);
            (0..10)
                .map(|_| {
                    let (a, b) = sample_positive_patch_pair(
                        &img,
                        &masks,
                        PatchKind::Normal,
                        &cfg,
                        &mut rng,
                    )
                    .unwrap();
                    (a.origin, b.origin)
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn mask_pair_rejects_escaping_anomaly() {
        let fg = Array2::from_elem((4, 4), false);
        let mut anomaly = Array2::from_elem((4, 4), false);
        anomaly[[1, 1]] = true;
        assert!(MaskPair::new(fg, anomaly).is_err());
    }
}
