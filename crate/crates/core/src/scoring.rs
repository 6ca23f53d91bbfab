//! Non-parametric detection scores over a memory bank of reference
//! embeddings, plus patch-level image scoring and localization.
//!
//! Raw scores keep the orientation they are defined with: the cosine-kNN
//! family returns similarities (higher = more normal), while the prototype
//! and KDE scores are already anomaly-oriented. The experiment harness
//! flips similarity scores according to [`Polarity`] before computing
//! metrics, so AUROC always sees anomaly-high numbers.

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::batch::{normalize_embedding, Embedding};
use crate::error::{Error, Result};
use crate::image::{dims, resize_bilinear, Image};
use crate::patch::extract_patch_grid;
use crate::scalar::Scalar;
use crate::synth::{rotate_image, RotationTag};

/// Whether a bank stores whole-image or patch embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BankLevel {
    Image,
    Patch,
}

/// Where a bank row came from.
#[derive(Debug, Clone)]
pub struct Provenance {
    pub source_id: String,
    /// Patch origin for patch-level banks.
    pub origin: Option<(usize, usize)>,
}

/// Immutable store of unit-normalized reference embeddings.
#[derive(Debug, Clone)]
pub struct MemoryBank<F: Scalar> {
    embeddings: Array2<F>,
    level: BankLevel,
    provenance: Vec<Provenance>,
}

impl<F: Scalar> MemoryBank<F> {
    pub fn new(
        embeddings: Vec<Embedding<F>>,
        level: BankLevel,
        provenance: Vec<Provenance>,
    ) -> Result<Self> {
        if embeddings.is_empty() {
            return Err(Error::EmptyBank);
        }
        if provenance.len() != embeddings.len() {
            return Err(Error::DimMismatch {
                context: "bank provenance",
                expected: embeddings.len().to_string(),
                got: provenance.len().to_string(),
            });
        }
        let dim = embeddings[0].dim();
        let mut rows = Array2::zeros((embeddings.len(), dim));
        for (i, e) in embeddings.iter().enumerate() {
            e.check_unit(i)?;
            if e.dim() != dim {
                return Err(Error::DimMismatch {
                    context: "bank embedding dim",
                    expected: dim.to_string(),
                    got: e.dim().to_string(),
                });
            }
            rows.row_mut(i).assign(&e.values);
        }
        Ok(Self {
            embeddings: rows,
            level,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn level(&self) -> BankLevel {
        self.level
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn rows(&self) -> &Array2<F> {
        &self.embeddings
    }
}

/// Score orientation for harness-facing aggregates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Polarity {
    /// Higher = more anomalous (similarities are negated).
    AnomalyHigh,
    /// Scores as written in their defining formulas.
    SimilarityRaw,
}

/// Scoring hyperparameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreConfig {
    pub k: usize,
    pub polarity: Polarity,
    /// RBF bandwidth; `None` uses 1 / median pairwise squared distance.
    pub kde_gamma: Option<f64>,
    pub crops_per_rotation: usize,
    pub crop_scale: (f64, f64),
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            k: 1,
            polarity: Polarity::AnomalyHigh,
            kde_gamma: None,
            crops_per_rotation: 10,
            crop_scale: (0.5, 1.0),
        }
    }
}

/// Sum of cosine similarities to the k nearest bank rows.
///
/// Ties are broken toward the lowest bank index. Exact: matches a
/// full-sort oracle.
pub fn s_con<F: Scalar>(query: &Embedding<F>, bank: &MemoryBank<F>, k: usize) -> Result<F> {
    query.check_unit(0)?;
    if query.dim() != bank.dim() {
        return Err(Error::DimMismatch {
            context: "query dim",
            expected: bank.dim().to_string(),
            got: query.dim().to_string(),
        });
    }
    if k == 0 || k > bank.len() {
        return Err(Error::KTooLarge { k, bank: bank.len() });
    }
    let sims = bank.rows().dot(&query.values);
    Ok(top_k_sum(sims.as_slice().expect("owned layout"), k))
}

fn top_k_sum<F: Scalar>(sims: &[F], k: usize) -> F {
    let mut order: Vec<usize> = (0..sims.len()).collect();
    let better = |a: &usize, b: &usize| {
        sims[*b]
            .partial_cmp(&sims[*a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(b))
    };
    if k < sims.len() {
        order.select_nth_unstable_by(k - 1, better);
    }
    order[..k].iter().map(|&i| sims[i]).sum()
}

/// Cosine-kNN score scaled by the raw representation norm.
pub fn s_con_norm<F: Scalar>(
    raw_feature: &Array1<F>,
    bank: &MemoryBank<F>,
    k: usize,
) -> Result<F> {
    let normalized = normalize_embedding(raw_feature)?;
    let norm = raw_feature.iter().map(|&v| v * v).sum::<F>().sqrt();
    Ok(s_con(&normalized, bank, k)? * norm)
}

/// One memory bank per right-angle rotation of the reference set.
pub struct RotationBanks<F: Scalar> {
    banks: [MemoryBank<F>; 4],
}

impl<F: Scalar> RotationBanks<F> {
    /// Embed every rotated copy of the memory images; rotation order is
    /// 0, 90, 180, 270.
    pub fn build<E>(memory: &[Image<F>], mut embed: E) -> Result<Self>
    where
        E: FnMut(&Image<F>) -> Result<Embedding<F>>,
    {
        if memory.is_empty() {
            return Err(Error::EmptyBank);
        }
        let mut banks = Vec::with_capacity(4);
        for tag in RotationTag::ALL {
            let mut embeddings = Vec::with_capacity(memory.len());
            let mut provenance = Vec::with_capacity(memory.len());
            for (i, img) in memory.iter().enumerate() {
                let rotated = rotate_image(img, tag)?;
                embeddings.push(embed(&rotated)?);
                provenance.push(Provenance {
                    source_id: format!("rot{}/{}", tag.degrees(), i),
                    origin: None,
                });
            }
            banks.push(MemoryBank::new(embeddings, BankLevel::Image, provenance)?);
        }
        let banks: [MemoryBank<F>; 4] = banks.try_into().map_err(|_| Error::EmptyBank)?;
        Ok(Self { banks })
    }

    pub fn bank(&self, tag: RotationTag) -> &MemoryBank<F> {
        &self.banks[match tag {
            RotationTag::R0 => 0,
            RotationTag::R90 => 1,
            RotationTag::R180 => 2,
            RotationTag::R270 => 3,
        }]
    }
}

/// Shifting-transformation score: mean cosine-kNN score over the four
/// rotations, each matched against the correspondingly rotated bank.
pub fn s_shift<F: Scalar, E>(
    img: &Image<F>,
    banks: &RotationBanks<F>,
    mut embed: E,
    k: usize,
) -> Result<F>
where
    E: FnMut(&Image<F>) -> Result<Embedding<F>>,
{
    let mut total = F::zero();
    for tag in RotationTag::ALL {
        let rotated = rotate_image(img, tag)?;
        total += s_con(&embed(&rotated)?, banks.bank(tag), k)?;
    }
    Ok(total / F::from_f64_lossy(4.0))
}

/// Ensemble score: rotations times random resized crops.
///
/// Each crop takes a square of side `scale * min(H, W)` (scale drawn from
/// `cfg.crop_scale`) at a uniform position, resized back to the input size.
pub fn s_ens<F: Scalar, E, R>(
    img: &Image<F>,
    banks: &RotationBanks<F>,
    mut embed: E,
    cfg: &ScoreConfig,
    rng: &mut R,
) -> Result<F>
where
    E: FnMut(&Image<F>) -> Result<Embedding<F>>,
    R: Rng + ?Sized,
{
    if cfg.crops_per_rotation == 0 {
        return Err(Error::InvalidConfig("crops_per_rotation must be >= 1".into()));
    }
    let (lo, hi) = cfg.crop_scale;
    if !(0.0 < lo && lo <= hi && hi <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "crop_scale ({lo}, {hi}) outside (0, 1]"
        )));
    }
    let mut total = F::zero();
    for tag in RotationTag::ALL {
        let rotated = rotate_image(img, tag)?;
        let (h, w) = dims(&rotated);
        let mut per_rotation = F::zero();
        for _ in 0..cfg.crops_per_rotation {
            let scale = rng.random_range(lo..=hi);
            let side = ((scale * h.min(w) as f64).round() as usize).clamp(1, h.min(w));
            let y = rng.random_range(0..=h - side);
            let x = rng.random_range(0..=w - side);
            let crop = rotated
                .slice(ndarray::s![y..y + side, x..x + side, ..])
                .to_owned();
            let restored = resize_bilinear(&crop, h, w);
            per_rotation += s_con(&embed(&restored)?, banks.bank(tag), cfg.k)?;
        }
        total += per_rotation / F::from_usize(cfg.crops_per_rotation).unwrap();
    }
    Ok(total / F::from_f64_lossy(4.0))
}

/// Unit-norm center of the reference embeddings.
#[derive(Debug, Clone)]
pub struct Prototype<F: Scalar> {
    pub c: Array1<F>,
}

/// Normalized mean of the bank rows; errors when the mean degenerates
/// (for example an antipodal pair).
pub fn build_prototype<F: Scalar>(bank: &MemoryBank<F>) -> Result<Prototype<F>> {
    let mean = bank.rows().sum_axis(ndarray::Axis(0))
        / F::from_usize(bank.len()).unwrap();
    let normalized = normalize_embedding(&mean)?;
    Ok(Prototype {
        c: normalized.values,
    })
}

/// `1 - cos(query, prototype)`: 0 at the prototype, 2 at its antipode.
/// Already anomaly-oriented.
pub fn s_proto<F: Scalar>(query: &Embedding<F>, proto: &Prototype<F>) -> Result<F> {
    query.check_unit(0)?;
    Ok(F::one() - query.values.dot(&proto.c))
}

/// RBF kernel-density score: `-(1/gamma) * log sum_y exp(-gamma |x - y|^2)`.
///
/// Higher = lower estimated density (anomaly-oriented). Evaluated with a
/// max-subtracted log-sum-exp.
pub fn kde_score<F: Scalar>(
    query: &Array1<F>,
    bank_features: &Array2<F>,
    gamma: f64,
) -> Result<F> {
    if bank_features.nrows() == 0 {
        return Err(Error::EmptyBank);
    }
    if !(gamma > 0.0) {
        return Err(Error::InvalidConfig(format!("gamma {gamma} must be positive")));
    }
    if bank_features.ncols() != query.len() {
        return Err(Error::DimMismatch {
            context: "kde feature dim",
            expected: bank_features.ncols().to_string(),
            got: query.len().to_string(),
        });
    }
    let g = F::from_f64_lossy(gamma);
    let exponents: Vec<F> = bank_features
        .rows()
        .into_iter()
        .map(|row| {
            let mut d2 = F::zero();
            for (&a, &b) in query.iter().zip(row.iter()) {
                let d = a - b;
                d2 += d * d;
            }
            -g * d2
        })
        .collect();
    let max = exponents
        .iter()
        .cloned()
        .fold(F::neg_infinity(), F::max);
    let sum: F = exponents.iter().map(|&e| (e - max).exp()).sum();
    Ok(-(max + sum.ln()) / g)
}

/// Bandwidth heuristic: 1 / median pairwise squared distance of the bank.
pub fn median_gamma<F: Scalar>(bank_features: &Array2<F>) -> Result<f64> {
    let n = bank_features.nrows();
    if n < 2 {
        return Err(Error::InvalidConfig(
            "median bandwidth needs at least two bank rows".into(),
        ));
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let mut d2 = 0.0f64;
            for (&a, &b) in bank_features.row(i).iter().zip(bank_features.row(j).iter()) {
                let d = a.to_f64_lossy() - b.to_f64_lossy();
                d2 += d * d;
            }
            dists.push(d2);
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = dists[dists.len() / 2];
    if median <= 0.0 {
        return Err(Error::Numerical(
            "degenerate bank: median pairwise distance is zero".into(),
        ));
    }
    Ok(1.0 / median)
}

/// Patch-level image score: cosine similarity of every grid patch to its
/// nearest memory patch (k = 1).
///
/// Returns the aggregate plus the raw per-patch similarities in row-major
/// grid order. With [`Polarity::AnomalyHigh`] the aggregate is
/// `max_p (1 - sim_p)` (the most anomalous patch); with
/// [`Polarity::SimilarityRaw`] it is `max_p sim_p` as literally defined.
pub fn image_score<F: Scalar, E>(
    img: &Image<F>,
    bank: &MemoryBank<F>,
    mut embed: E,
    patch: usize,
    stride: usize,
    polarity: Polarity,
) -> Result<(F, Vec<F>)>
where
    E: FnMut(&Image<F>) -> Result<Embedding<F>>,
{
    if bank.level() != BankLevel::Patch {
        return Err(Error::InvalidConfig(
            "image_score needs a patch-level bank".into(),
        ));
    }
    let grid = extract_patch_grid(img, patch, stride)?;
    let mut sims = Vec::with_capacity(grid.len());
    for p in &grid {
        sims.push(s_con(&embed(&p.pixels)?, bank, 1)?);
    }
    let aggregate = match polarity {
        Polarity::AnomalyHigh => sims
            .iter()
            .map(|&s| F::one() - s)
            .fold(F::neg_infinity(), F::max),
        Polarity::SimilarityRaw => sims.iter().cloned().fold(F::neg_infinity(), F::max),
    };
    Ok((aggregate, sims))
}

const BLUR_KERNEL: usize = 15;
const BLUR_SIGMA: f64 = 4.0;

/// Upsample a row-major patch-score grid to image resolution and smooth it.
///
/// Bilinear interpolation is aligned so grid node (i, j) lands on the center
/// of patch (i, j); values beyond the outer centers clamp. Smoothing is a
/// 15x15 Gaussian (sigma 4) normalized to unit sum with reflected borders,
/// so a constant grid maps to the same constant.
pub fn localization_map<F: Scalar>(
    scores: &[F],
    grid: (usize, usize),
    image: (usize, usize),
    patch: usize,
    stride: usize,
) -> Result<Array2<F>> {
    let (rows, cols) = grid;
    if scores.len() != rows * cols {
        return Err(Error::DimMismatch {
            context: "score grid",
            expected: (rows * cols).to_string(),
            got: scores.len().to_string(),
        });
    }
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidConfig("empty score grid".into()));
    }
    let (h, w) = image;
    let center = (patch as f64 - 1.0) / 2.0;
    let upsampled = Array2::from_shape_fn((h, w), |(y, x)| {
        let gy = ((y as f64 - center) / stride as f64).clamp(0.0, (rows - 1) as f64);
        let gx = ((x as f64 - center) / stride as f64).clamp(0.0, (cols - 1) as f64);
        let y0 = gy.floor() as usize;
        let x0 = gx.floor() as usize;
        let y1 = (y0 + 1).min(rows - 1);
        let x1 = (x0 + 1).min(cols - 1);
        let wy = F::from_f64_lossy(gy - y0 as f64);
        let wx = F::from_f64_lossy(gx - x0 as f64);
        let one = F::one();
        let at = |r: usize, c: usize| scores[r * cols + c];
        let top = at(y0, x0) * (one - wx) + at(y0, x1) * wx;
        let bot = at(y1, x0) * (one - wx) + at(y1, x1) * wx;
        top * (one - wy) + bot * wy
    });
    Ok(gaussian_blur(&upsampled))
}

/// Normalized 1-D Gaussian taps for the 15-tap sigma-4 kernel.
pub fn blur_kernel<F: Scalar>() -> Vec<F> {
    let radius = (BLUR_KERNEL / 2) as isize;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * BLUR_SIGMA * BLUR_SIGMA)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    for t in taps.iter_mut() {
        *t /= total;
    }
    taps.into_iter().map(F::from_f64_lossy).collect()
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

fn gaussian_blur<F: Scalar>(map: &Array2<F>) -> Array2<F> {
    let taps = blur_kernel::<F>();
    let radius = (taps.len() / 2) as isize;
    let (h, w) = map.dim();
    let mut horizontal = Array2::<F>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = F::zero();
            for (t, &tap) in taps.iter().enumerate() {
                let sx = reflect(x as isize + t as isize - radius, w);
                acc += tap * map[[y, sx]];
            }
            horizontal[[y, x]] = acc;
        }
    }
    let mut out = Array2::<F>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = F::zero();
            for (t, &tap) in taps.iter().enumerate() {
                let sy = reflect(y as isize + t as isize - radius, h);
                acc += tap * horizontal[[sy, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit(v: Array1<f64>) -> Embedding<f64> {
        normalize_embedding(&v).unwrap()
    }

    fn bank_from(rows: Vec<Array1<f64>>) -> MemoryBank<f64> {
        let provenance = (0..rows.len())
            .map(|i| Provenance {
                source_id: format!("m{i}"),
                origin: None,
            })
            .collect();
        MemoryBank::new(
            rows.into_iter().map(unit).collect(),
            BankLevel::Image,
            provenance,
        )
        .unwrap()
    }

    #[test]
    fn s_con_hand_examples() {
        let bank = bank_from(vec![
            array![1.0, 0.0],
            array![0.0, 1.0],
            array![1.0, 1.0],
        ]);
        let q = unit(array![1.0, 0.0]);
        assert!((s_con(&q, &bank, 1).unwrap() - 1.0).abs() < 1e-12);
        let expected = 1.0 + std::f64::consts::FRAC_1_SQRT_2;
        assert!((s_con(&q, &bank, 2).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 1.70711).abs() < 1e-5);

        let orth = bank_from(vec![array![1.0, 0.0, 0.0], array![0.0, 1.0, 0.0]]);
        let q = unit(array![0.0, 0.0, 1.0]);
        assert!(s_con(&q, &orth, 2).unwrap().abs() < 1e-12);
    }

    #[test]
    fn s_con_rejects_large_k() {
        let bank = bank_from(vec![array![1.0, 0.0]]);
        let q = unit(array![1.0, 0.0]);
        assert!(matches!(
            s_con(&q, &bank, 2),
            Err(Error::KTooLarge { .. })
        ));
    }

    /// Full-sort oracle (tie-break on lowest index).
    fn brute_force_topk(query: &Array1<f64>, bank: &MemoryBank<f64>, k: usize) -> f64 {
        let mut sims: Vec<(usize, f64)> = bank
            .rows()
            .rows()
            .into_iter()
            .enumerate()
            .map(|(i, row)| (i, row.dot(query)))
            .collect();
        sims.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        sims[..k].iter().map(|&(_, s)| s).sum()
    }

    #[test]
    fn s_con_matches_brute_force_on_random_banks() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for _ in 0..30 {
            let m = rng.random_range(2..200);
            let d = rng.random_range(2..16);
            let rows: Vec<Array1<f64>> = (0..m)
                .map(|_| Array1::from_shape_fn(d, |_| rng.random_range(-1.0..1.0)))
                .collect();
            let bank = bank_from(rows);
            let q = unit(Array1::from_shape_fn(d, |_| rng.random_range(-1.0..1.0)));
            let k = rng.random_range(1..=bank.len().min(10));
            let fast = s_con(&q, &bank, k).unwrap();
            let slow = brute_force_topk(&q.values, &bank, k);
            assert_eq!(fast, slow);
        }
    }

    #[test]
    fn ties_break_to_lowest_index() {
        // duplicate rows: both tie at similarity 1
        let bank = bank_from(vec![
            array![0.0, 1.0],
            array![1.0, 0.0],
            array![1.0, 0.0],
        ]);
        let q = unit(array![1.0, 0.0]);
        // k=2 picks indices 1 and 2 (the duplicates), not index 0
        assert!((s_con(&q, &bank, 2).unwrap() - 2.0).abs() < 1e-12);
        // oracle agreement on the tie case
        assert_eq!(
            s_con(&q, &bank, 2).unwrap(),
            brute_force_topk(&q.values, &bank, 2)
        );
    }

    #[test]
    fn s_con_norm_examples() {
        let bank = bank_from(vec![array![1.0, 0.0]]);
        let raw = array![3.0, 4.0];
        assert!((s_con_norm(&raw, &bank, 1).unwrap() - 3.0).abs() < 1e-12);
        // unit-norm input reduces to s_con
        let u = array![0.6, 0.8];
        let direct = s_con(&unit(u.clone()), &bank, 1).unwrap();
        assert!((s_con_norm(&u, &bank, 1).unwrap() - direct).abs() < 1e-12);
        // homogeneity
        let doubled = raw.mapv(|v| 2.0 * v);
        assert!(
            (s_con_norm(&doubled, &bank, 1).unwrap() - 2.0 * s_con_norm(&raw, &bank, 1).unwrap())
                .abs()
                < 1e-12
        );
    }

    fn flat_embed(img: &Image<f64>) -> Result<Embedding<f64>> {
        let v = Array1::from_iter(img.iter().cloned());
        normalize_embedding(&v)
    }

    #[test]
    fn s_shift_constant_encoder_reduces_to_s_con() {
        let memory: Vec<Image<f64>> = (0..3)
            .map(|i| Array3::from_elem((4, 4, 1), 0.2 + 0.1 * i as f64))
            .collect();
        let constant = |_: &Image<f64>| -> Result<Embedding<f64>> {
            Ok(unit(array![0.6, 0.8]))
        };
        let banks = RotationBanks::build(&memory, constant).unwrap();
        let img = Array3::from_elem((4, 4, 1), 0.5);
        let shift = s_shift(&img, &banks, constant, 2).unwrap();
        let plain = s_con(&unit(array![0.6, 0.8]), banks.bank(RotationTag::R0), 2).unwrap();
        assert!((shift - plain).abs() < 1e-12);
    }

    #[test]
    fn s_shift_averages_per_rotation_values() {
        // encoder reads the top-left pixel, which the rotations permute;
        // per-rotation similarities come out 0.2 / 0.4 / 0.6 / 0.8
        let mut img: Image<f64> = Array3::zeros((2, 2, 1));
        img[[0, 0, 0]] = 0.1; // R0 sees 0.1
        img[[1, 0, 0]] = 0.2; // R90 moves (1,0) to (0,0)
        img[[1, 1, 0]] = 0.3; // R180 moves (1,1) to (0,0)
        img[[0, 1, 0]] = 0.4; // R270 moves (0,1) to (0,0)
        let planted = |img: &Image<f64>| -> Result<Embedding<f64>> {
            let c = match (img[[0, 0, 0]] * 10.0).round() as usize {
                1 => 0.2,
                2 => 0.4,
                3 => 0.6,
                _ => 0.8,
            };
            Ok(unit(array![c, (1.0f64 - c * c).sqrt()]))
        };
        // memory bank rows are all (1, 0), so similarity = first coordinate
        let memory = vec![Array3::from_elem((2, 2, 1), 1.0f64)];
        let e1 = |_: &Image<f64>| -> Result<Embedding<f64>> { Ok(unit(array![1.0, 0.0])) };
        let banks = RotationBanks::build(&memory, e1).unwrap();
        let got = s_shift(&img, &banks, planted, 1).unwrap();
        assert!((got - 0.5).abs() < 1e-12);
    }

    #[test]
    fn s_ens_identity_crop_reduces_to_s_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let memory: Vec<Image<f64>> = (0..4)
            .map(|_| Array3::from_shape_fn((6, 6, 1), |_| rng.random_range(0.0..1.0)))
            .collect();
        let banks = RotationBanks::build(&memory, flat_embed).unwrap();
        let img: Image<f64> = Array3::from_shape_fn((6, 6, 1), |_| rng.random_range(0.0..1.0));
        let cfg = ScoreConfig {
            k: 2,
            crops_per_rotation: 1,
            crop_scale: (1.0, 1.0),
            ..Default::default()
        };
        let mut rng2 = ChaCha8Rng::seed_from_u64(3);
        let ens = s_ens(&img, &banks, flat_embed, &cfg, &mut rng2).unwrap();
        let shift = s_shift(&img, &banks, flat_embed, 2).unwrap();
        assert!((ens - shift).abs() < 1e-12);
    }

    #[test]
    fn s_ens_deterministic_under_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let memory: Vec<Image<f64>> = (0..3)
            .map(|_| Array3::from_shape_fn((8, 8, 1), |_| rng.random_range(0.0..1.0)))
            .collect();
        let banks = RotationBanks::build(&memory, flat_embed).unwrap();
        let img: Image<f64> = Array3::from_shape_fn((8, 8, 1), |_| rng.random_range(0.0..1.0));
        let cfg = ScoreConfig {
            k: 1,
            crops_per_rotation: 5,
            ..Default::default()
        };
        let run = || {
            let mut r = ChaCha8Rng::seed_from_u64(123);
            s_ens(&img, &banks, flat_embed, &cfg, &mut r).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn prototype_construction_and_score() {
        let single = bank_from(vec![array![0.0, 3.0]]);
        let proto = build_prototype(&single).unwrap();
        assert!((proto.c[1] - 1.0).abs() < 1e-12);

        let pair = bank_from(vec![array![1.0, 0.0], array![0.0, 1.0]]);
        let proto = build_prototype(&pair).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((proto.c[0] - s).abs() < 1e-12 && (proto.c[1] - s).abs() < 1e-12);

        let antipodal = bank_from(vec![array![1.0, 0.0], array![-1.0, 0.0]]);
        assert!(matches!(
            build_prototype(&antipodal),
            Err(Error::DegenerateEmbedding { .. })
        ));

        // s_proto: 0 at the prototype, 1 orthogonal, 2 antipodal
        let p = Prototype { c: array![1.0, 0.0] };
        assert!((s_proto(&unit(array![1.0, 0.0]), &p).unwrap()).abs() < 1e-12);
        assert!((s_proto(&unit(array![0.0, 1.0]), &p).unwrap() - 1.0).abs() < 1e-12);
        assert!((s_proto(&unit(array![-1.0, 0.0]), &p).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn kde_closed_forms() {
        // one memory point: score = squared distance
        let bank = ndarray::arr2(&[[0.0f64, 0.0]]);
        let q = array![3.0, 4.0];
        assert!((kde_score(&q, &bank, 1.0).unwrap() - 25.0).abs() < 1e-10);

        // two points at equal distance d: d^2 - ln 2
        let bank = ndarray::arr2(&[[1.0, 0.0], [-1.0, 0.0]]);
        let q = array![0.0, 0.0];
        let expected = 1.0 - 2.0f64.ln();
        assert!((kde_score(&q, &bank, 1.0).unwrap() - expected).abs() < 1e-10);

        // coincident with one of two points, other at distance 2
        let bank = ndarray::arr2(&[[0.0], [2.0]]);
        let q = array![0.0];
        let expected = -(1.0 + (-4.0f64).exp()).ln();
        assert!((kde_score(&q, &bank, 1.0).unwrap() - expected).abs() < 1e-10);
        assert!((expected - (-0.01815)).abs() < 1e-5);
    }

    #[test]
    fn kde_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bank: Array2<f64> = Array2::from_shape_fn((12, 5), |_| rng.random_range(-1.0..1.0));
        let q = Array1::from_shape_fn(5, |_| rng.random_range(-1.0..1.0));
        let t = Array1::from_shape_fn(5, |_| rng.random_range(-3.0..3.0));
        let mut shifted_bank = bank.clone();
        for mut row in shifted_bank.rows_mut() {
            row += &t;
        }
        let a = kde_score(&q, &bank, 0.7).unwrap();
        let b = kde_score(&(&q + &t), &shifted_bank, 0.7).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn median_gamma_simple() {
        // two rows at distance 2 -> median squared distance 4
        let bank = ndarray::arr2(&[[0.0], [2.0]]);
        assert!((median_gamma(&bank).unwrap() - 0.25).abs() < 1e-12);
    }

    fn patch_bank_of(img: &Image<f64>, patch: usize, stride: usize) -> MemoryBank<f64> {
        let grid = extract_patch_grid(img, patch, stride).unwrap();
        let embeddings: Vec<Embedding<f64>> =
            grid.iter().map(|p| flat_embed(&p.pixels).unwrap()).collect();
        let provenance = grid
            .iter()
            .map(|p| Provenance {
                source_id: "train".into(),
                origin: Some(p.origin),
            })
            .collect();
        MemoryBank::new(embeddings, BankLevel::Patch, provenance).unwrap()
    }

    #[test]
    fn image_score_verbatim_patches() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let img: Image<f64> = Array3::from_shape_fn((16, 16, 1), |_| rng.random_range(0.1..0.9));
        let bank = patch_bank_of(&img, 8, 4);
        let (agg, sims) = image_score(&img, &bank, flat_embed, 8, 4, Polarity::AnomalyHigh)
            .unwrap();
        let (rows, cols) = grid_shape(16, 16, 8, 4);
        assert_eq!(sims.len(), rows * cols);
        assert!(agg.abs() < 1e-9, "aggregate {agg}");
        for &s in &sims {
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn image_score_one_orthogonal_patch() {
        // embedding keyed on the patch mean: bright patches map orthogonally
        // to dark ones
        let keyed = |img: &Image<f64>| -> Result<Embedding<f64>> {
            let mean: f64 = img.iter().sum::<f64>() / img.len() as f64;
            if mean > 0.5 {
                Ok(unit(array![0.0, 1.0]))
            } else {
                Ok(unit(array![1.0, 0.0]))
            }
        };
        let dark: Image<f64> = Array3::from_elem((16, 16, 1), 0.1);
        let bank = {
            let grid = extract_patch_grid(&dark, 8, 8).unwrap();
            let embeddings = grid
                .iter()
                .map(|p| keyed(&p.pixels).unwrap())
                .collect::<Vec<_>>();
            let provenance = grid
                .iter()
                .map(|p| Provenance {
                    source_id: "train".into(),
                    origin: Some(p.origin),
                })
                .collect();
            MemoryBank::new(embeddings, BankLevel::Patch, provenance).unwrap()
        };
        let mut test = dark.clone();
        test.slice_mut(ndarray::s![8..16, 8..16, ..]).fill(0.9);
        let (agg, sims) =
            image_score(&test, &bank, keyed, 8, 8, Polarity::AnomalyHigh).unwrap();
        assert!((agg - 1.0).abs() < 1e-12);
        assert_eq!(sims.len(), 4);
        // literal mode keeps the similarity orientation
        let (raw_agg, _) =
            image_score(&test, &bank, keyed, 8, 8, Polarity::SimilarityRaw).unwrap();
        assert!((raw_agg - 1.0).abs() < 1e-12);
    }

    #[test]
    fn blur_kernel_sums_to_one() {
        let taps = blur_kernel::<f64>();
        assert_eq!(taps.len(), 15);
        let total: f64 = taps.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn localization_constant_grid_stays_constant() {
        let scores = vec![0.37f64; 9];
        let map = localization_map(&scores, (3, 3), (40, 40), 16, 12).unwrap();
        assert_eq!(map.dim(), (40, 40));
        for &v in map.iter() {
            assert!((v - 0.37).abs() < 1e-6);
        }
    }

    #[test]
    fn localization_hot_patch_argmax_near_center() {
        // 3x3 grid over a 64x64 image, patch 32 stride 16:
        // patch (1,1) center falls at (16 + 15.5, 16 + 15.5)
        let mut scores = vec![0.0f64; 9];
        scores[4] = 1.0;
        let map = localization_map(&scores, (3, 3), (64, 64), 32, 16).unwrap();
        let mut best = (0usize, 0usize);
        let mut best_v = f64::MIN;
        for y in 0..64 {
            for x in 0..64 {
                if map[[y, x]] > best_v {
                    best_v = map[[y, x]];
                    best = (y, x);
                }
            }
        }
        let center = 16.0 + 15.5;
        assert!((best.0 as f64 - center).abs() <= 1.0, "argmax row {best:?}");
        assert!((best.1 as f64 - center).abs() <= 1.0, "argmax col {best:?}");
    }

    #[test]
    fn localization_monotone_in_patch_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let base: Vec<f64> = (0..12).map(|_| rng.random_range(0.0..1.0)).collect();
        let map0 = localization_map(&base, (3, 4), (30, 36), 12, 8).unwrap();
        for raised_idx in 0..base.len() {
            let mut raised = base.clone();
            raised[raised_idx] += 0.5;
            let map1 = localization_map(&raised, (3, 4), (30, 36), 12, 8).unwrap();
            for (a, b) in map0.iter().zip(map1.iter()) {
                assert!(b >= a, "pixel decreased after raising patch {raised_idx}");
            }
        }
    }

    #[test]
    fn localization_rejects_bad_length() {
        let scores = vec![0.0f64; 8];
        assert!(localization_map(&scores, (3, 3), (32, 32), 16, 8).is_err());
    }
}
