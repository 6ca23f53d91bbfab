//! Multiview batches, label conventions, and positive-set policies.
//!
//! Labels are small integers with `1` reserved for inliers; anything above 1
//! tags a synthetic-outlier group (rotation groups use 2/3/4 for
//! 90/180/270 degrees). The binary inlier/outlier view is recovered as
//! `label == 1` versus `label != 1`.

use ndarray::Array1;
use rand::Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scalar::Scalar;
use crate::INLIER_LABEL;

/// A single input image with its label and provenance.
#[derive(Debug, Clone)]
pub struct LabeledSample<F: Scalar> {
    pub image: Image<F>,
    /// 1 = inlier; values > 1 tag synthetic-outlier groups.
    pub label: u32,
    pub source_id: String,
}

impl<F: Scalar> LabeledSample<F> {
    pub fn new(image: Image<F>, label: u32, source_id: impl Into<String>) -> Result<Self> {
        if label < 1 {
            return Err(Error::InvalidConfig(format!("label {label} < 1")));
        }
        crate::image::validate_pixels(&image)?;
        Ok(Self {
            image,
            label,
            source_id: source_id.into(),
        })
    }

    pub fn is_inlier(&self) -> bool {
        self.label == INLIER_LABEL
    }
}

/// The rule mapping an anchor to its positive indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositiveSetPolicy {
    /// Only the augmented counterpart: `P(i) = {i+}`.
    SinglePositive,
    /// All same-label indices excluding the anchor. With binary labels this
    /// is SupCon; with per-transformation group tags it is Rot-SupCon.
    SameLabel,
    /// `{i+}` plus every other inlier. Outlier anchors keep only their own
    /// augmented view, so distinct outliers repel each other.
    Firm,
}

/// 2n augmented instances with labels and explicit pair links.
///
/// `pair_of` is stored rather than implied by adjacency so shuffled batches
/// stay valid.
#[derive(Debug, Clone)]
pub struct MultiviewBatch<F: Scalar> {
    instances: Vec<Image<F>>,
    labels: Vec<u32>,
    pair_of: Vec<usize>,
    n: usize,
}

impl<F: Scalar> MultiviewBatch<F> {
    /// Assemble a batch from parts, checking the pairing invariants.
    pub fn from_parts(
        instances: Vec<Image<F>>,
        labels: Vec<u32>,
        pair_of: Vec<usize>,
    ) -> Result<Self> {
        let len = instances.len();
        if len == 0 || len % 2 != 0 {
            return Err(Error::EmptyBatch);
        }
        if labels.len() != len || pair_of.len() != len {
            return Err(Error::DimMismatch {
                context: "batch labels/pair_of",
                expected: len.to_string(),
                got: format!("{}/{}", labels.len(), pair_of.len()),
            });
        }
        for i in 0..len {
            let j = pair_of[i];
            if j >= len || j == i || pair_of[j] != i {
                return Err(Error::InvalidConfig(format!(
                    "pair_of is not an involution at index {i}"
                )));
            }
            if labels[i] != labels[j] {
                return Err(Error::InvalidConfig(format!(
                    "paired views {i} and {j} carry different labels"
                )));
            }
        }
        Ok(Self {
            instances,
            labels,
            pair_of,
            n: len / 2,
        })
    }

    pub fn len(&self) -> usize {
        2 * self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Pair count n (batch holds 2n instances).
    pub fn pairs(&self) -> usize {
        self.n
    }

    pub fn instance(&self, i: usize) -> &Image<F> {
        &self.instances[i]
    }

    pub fn instances(&self) -> &[Image<F>] {
        &self.instances
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn pair_of(&self, i: usize) -> usize {
        self.pair_of[i]
    }

    pub fn pair_map(&self) -> &[usize] {
        &self.pair_of
    }

    /// Batch with instance order permuted by `perm` (new index `k` holds the
    /// old instance `perm[k]`); pair links are remapped consistently.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let len = self.len();
        if perm.len() != len {
            return Err(Error::DimMismatch {
                context: "permutation length",
                expected: len.to_string(),
                got: perm.len().to_string(),
            });
        }
        let mut inverse = vec![usize::MAX; len];
        for (new_idx, &old_idx) in perm.iter().enumerate() {
            if old_idx >= len || inverse[old_idx] != usize::MAX {
                return Err(Error::InvalidConfig("not a permutation".into()));
            }
            inverse[old_idx] = new_idx;
        }
        let instances = perm.iter().map(|&o| self.instances[o].clone()).collect();
        let labels = perm.iter().map(|&o| self.labels[o]).collect();
        let pair_of = perm.iter().map(|&o| inverse[self.pair_of[o]]).collect();
        Self::from_parts(instances, labels, pair_of)
    }
}

/// Build a multiview batch: each sample contributes two independent
/// augmentations at indices `2k` and `2k+1`, paired with each other.
pub fn build_multiview_batch<F, A, R>(
    samples: &[LabeledSample<F>],
    mut augmenter: A,
    rng: &mut R,
) -> Result<MultiviewBatch<F>>
where
    F: Scalar,
    A: FnMut(&Image<F>, &mut R) -> Image<F>,
    R: Rng + ?Sized,
{
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut instances = Vec::with_capacity(2 * samples.len());
    let mut labels = Vec::with_capacity(2 * samples.len());
    let mut pair_of = Vec::with_capacity(2 * samples.len());
    for (k, sample) in samples.iter().enumerate() {
        instances.push(augmenter(&sample.image, rng));
        instances.push(augmenter(&sample.image, rng));
        labels.push(sample.label);
        labels.push(sample.label);
        pair_of.push(2 * k + 1);
        pair_of.push(2 * k);
    }
    MultiviewBatch::from_parts(instances, labels, pair_of)
}

/// Positive indices of `anchor` under `policy`, from raw label/pair data.
///
/// Never contains the anchor itself. May be empty only under `SameLabel`
/// when the anchor's label occurs nowhere else in the batch.
pub fn positive_indices(
    policy: PositiveSetPolicy,
    labels: &[u32],
    pair_of: &[usize],
    anchor: usize,
) -> Vec<usize> {
    debug_assert!(anchor < labels.len());
    match policy {
        PositiveSetPolicy::SinglePositive => vec![pair_of[anchor]],
        PositiveSetPolicy::SameLabel => (0..labels.len())
            .filter(|&j| j != anchor && labels[j] == labels[anchor])
            .collect(),
        PositiveSetPolicy::Firm => {
            // Inlier anchors are pulled toward every other inlier; outlier
            // anchors keep only their augmented view, so distinct outliers
            // stay mutual negatives.
            let partner = pair_of[anchor];
            if labels[anchor] != INLIER_LABEL {
                return vec![partner];
            }
            (0..labels.len())
                .filter(|&j| j != anchor && (j == partner || labels[j] == INLIER_LABEL))
                .collect()
        }
    }
}

/// Positive set of `anchor` in `batch` under `policy`.
pub fn positive_set<F: Scalar>(
    policy: PositiveSetPolicy,
    batch: &MultiviewBatch<F>,
    anchor: usize,
) -> Vec<usize> {
    positive_indices(policy, batch.labels(), batch.pair_map(), anchor)
}

/// A projection- or feature-space vector, optionally unit-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<F: Scalar> {
    pub values: Array1<F>,
    pub normalized: bool,
}

impl<F: Scalar> Embedding<F> {
    /// Wrap a raw (not yet normalized) vector.
    pub fn raw(values: Array1<F>) -> Self {
        Self {
            values,
            normalized: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> F {
        self.values.iter().map(|&v| v * v).sum::<F>().sqrt()
    }

    /// Verify the unit-norm invariant within 1e-6.
    pub fn check_unit(&self, index: usize) -> Result<()> {
        let norm = self.norm().to_f64_lossy();
        if !self.normalized || (norm - 1.0).abs() >= 1e-6 {
            return Err(Error::NotUnitNorm { index, norm });
        }
        Ok(())
    }
}

/// Project a vector onto the unit sphere. Idempotent; errors on vectors with
/// norm below 1e-12 (in f64 terms) rather than emitting NaN.
pub fn normalize_embedding<F: Scalar>(v: &Array1<F>) -> Result<Embedding<F>> {
    for &x in v.iter() {
        if !x.is_finite() {
            return Err(Error::Numerical("non-finite embedding entry".into()));
        }
    }
    let norm = v.iter().map(|&x| x * x).sum::<F>().sqrt();
    if norm.to_f64_lossy() < 1e-12 {
        return Err(Error::DegenerateEmbedding {
            norm: norm.to_f64_lossy(),
        });
    }
    Ok(Embedding {
        values: v.mapv(|x| x / norm),
        normalized: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(label: u32, fill: f64) -> LabeledSample<f64> {
        LabeledSample::new(Array3::from_elem((2, 2, 1), fill), label, format!("s{fill}"))
            .unwrap()
    }

    fn identity_aug(img: &Image<f64>, _rng: &mut ChaCha8Rng) -> Image<f64> {
        img.clone()
    }

    #[test]
    fn identity_augmenter_duplicates_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = build_multiview_batch(&[sample(1, 0.5)], identity_aug, &mut rng).unwrap();
        assert_eq!(batch.len(), 2);
        assert_eq!(batch.instance(0), batch.instance(1));
        assert_eq!(batch.pair_of(0), 1);
        assert_eq!(batch.pair_of(1), 0);
    }

    #[test]
    fn labels_copied_to_both_views() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let samples = [sample(1, 0.1), sample(3, 0.2), sample(1, 0.3)];
        let batch = build_multiview_batch(&samples, identity_aug, &mut rng).unwrap();
        assert_eq!(batch.len(), 6);
        assert_eq!(batch.labels(), &[1, 1, 3, 3, 1, 1]);
    }

    #[test]
    fn empty_sample_list_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = build_multiview_batch::<f64, _, _>(&[], identity_aug, &mut rng).unwrap_err();
        assert!(matches!(err, Error::EmptyBatch));
    }

    #[test]
    fn jitter_augmenter_is_deterministic_under_seed() {
        let jitter = |img: &Image<f64>, rng: &mut ChaCha8Rng| {
            let delta: f64 = rand::Rng::random_range(rng, -0.05..0.05);
            img.mapv(|v| (v + delta).clamp(0.0, 1.0))
        };
        let samples = [sample(1, 0.4), sample(2, 0.6)];
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            build_multiview_batch(&samples, jitter, &mut rng).unwrap()
        };
        let a = run(42);
        let b = run(42);
        for i in 0..a.len() {
            assert_eq!(a.instance(i), b.instance(i));
        }
        // and the two views of one sample differ (independent draws)
        assert_ne!(a.instance(0), a.instance(1));
    }

    #[test]
    fn firm_positive_sets_match_eq4() {
        // [inlier pair, outlier pair]
        let labels = [1, 1, 2, 2];
        let pair_of = [1, 0, 3, 2];
        assert_eq!(
            positive_indices(PositiveSetPolicy::Firm, &labels, &pair_of, 0),
            vec![1]
        );
        assert_eq!(
            positive_indices(PositiveSetPolicy::Firm, &labels, &pair_of, 2),
            vec![3]
        );
    }

    #[test]
    fn same_label_all_inliers() {
        let labels = [1, 1, 1, 1, 1, 1];
        let pair_of = [1, 0, 3, 2, 5, 4];
        assert_eq!(
            positive_indices(PositiveSetPolicy::SameLabel, &labels, &pair_of, 0),
            vec![1, 2, 3, 4, 5]
        );
    }

    #[test]
    fn normalize_345_triangle() {
        let e = normalize_embedding(&array![3.0_f64, 4.0]).unwrap();
        assert!((e.values[0] - 0.6).abs() < 1e-12);
        assert!((e.values[1] - 0.8).abs() < 1e-12);
        assert!(e.normalized);
    }

    #[test]
    fn normalize_zero_vector_errors() {
        let err = normalize_embedding(&array![0.0_f64, 0.0]).unwrap_err();
        assert!(matches!(err, Error::DegenerateEmbedding { .. }));
    }

    #[test]
    fn normalize_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let v: Array1<f64> =
                Array1::from_shape_fn(6, |_| rand::Rng::random_range(&mut rng, -1.0..1.0));
            if v.iter().map(|x| x * x).sum::<f64>().sqrt() < 1e-6 {
                continue;
            }
            let c: f64 = rand::Rng::random_range(&mut rng, 0.1..10.0);
            let a = normalize_embedding(&v).unwrap();
            let b = normalize_embedding(&v.mapv(|x| x * c)).unwrap();
            for (x, y) in a.values.iter().zip(b.values.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
