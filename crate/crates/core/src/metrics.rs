//! Detection metrics: AUROC and the epoch-normalized area under the
//! learning curve.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::image::Mask;
use crate::scalar::Scalar;

/// Anomaly-high scores with binary labels.
#[derive(Debug, Clone)]
pub struct ScoredSet<F: Scalar> {
    pub scores: Vec<F>,
    /// true = anomaly (the positive class).
    pub labels: Vec<bool>,
    pub ids: Vec<String>,
}

impl<F: Scalar> ScoredSet<F> {
    pub fn new(scores: Vec<F>, labels: Vec<bool>, ids: Vec<String>) -> Result<Self> {
        if scores.len() != labels.len() || scores.len() != ids.len() {
            return Err(Error::DimMismatch {
                context: "scored set lengths",
                expected: scores.len().to_string(),
                got: format!("{}/{}", labels.len(), ids.len()),
            });
        }
        Ok(Self { scores, labels, ids })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Probability that a random anomaly outscores a random inlier, ties
/// counted half. Midrank-based, exactly matching the O(P*N) pair-counting
/// definition.
pub fn auroc<F: Scalar>(set: &ScoredSet<F>) -> Result<f64> {
    auroc_slices(&set.scores, &set.labels)
}

fn auroc_slices<F: Scalar>(scores: &[F], labels: &[bool]) -> Result<f64> {
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass);
    }
    for &s in scores {
        if !s.is_finite() {
            return Err(Error::Numerical("non-finite score".into()));
        }
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .expect("finite scores")
    });
    // midranks over tied groups
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let p = positives as f64;
    let n = negatives as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// AUROC of a per-pixel anomaly map against a ground-truth mask.
pub fn pixel_auroc<F: Scalar>(map: &Array2<F>, mask: &Mask) -> Result<f64> {
    if map.dim() != mask.dim() {
        return Err(Error::DimMismatch {
            context: "pixel auroc",
            expected: format!("{:?}", map.dim()),
            got: format!("{:?}", mask.dim()),
        });
    }
    let scores: Vec<F> = map.iter().cloned().collect();
    let labels: Vec<bool> = mask.iter().cloned().collect();
    auroc_slices(&scores, &labels)
}

/// AUROC evaluations over training epochs.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LearningCurve {
    pub epochs: Vec<usize>,
    pub aurocs: Vec<f64>,
}

impl LearningCurve {
    pub fn new(epochs: Vec<usize>, aurocs: Vec<f64>) -> Result<Self> {
        if epochs.len() != aurocs.len() {
            return Err(Error::DimMismatch {
                context: "curve lengths",
                expected: epochs.len().to_string(),
                got: aurocs.len().to_string(),
            });
        }
        if !epochs.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidConfig(
                "curve epochs must be strictly increasing".into(),
            ));
        }
        if aurocs.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
            return Err(Error::InvalidConfig("aurocs must lie in [0, 1]".into()));
        }
        Ok(Self { epochs, aurocs })
    }
}

/// Trapezoidal integral of the curve divided by the epoch span; lands in
/// [0, 1] and equals the constant for flat curves.
pub fn aulc(curve: &LearningCurve) -> Result<f64> {
    if curve.epochs.len() < 2 {
        return Err(Error::InvalidConfig(
            "aulc needs at least two curve points".into(),
        ));
    }
    let mut area = 0.0;
    for i in 1..curve.epochs.len() {
        let dx = (curve.epochs[i] - curve.epochs[i - 1]) as f64;
        area += dx * (curve.aurocs[i] + curve.aurocs[i - 1]) / 2.0;
    }
    let span = (curve.epochs[curve.epochs.len() - 1] - curve.epochs[0]) as f64;
    Ok(area / span)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(scores: Vec<f64>, labels: Vec<bool>) -> ScoredSet<f64> {
        let ids = (0..scores.len()).map(|i| format!("s{i}")).collect();
        ScoredSet::new(scores, labels, ids).unwrap()
    }

    #[test]
    fn perfect_separation_scores_one() {
        let s = set(vec![0.9, 0.8, 0.2, 0.1], vec![true, true, false, false]);
        assert_eq!(auroc(&s).unwrap(), 1.0);
    }

    #[test]
    fn all_ties_score_half() {
        let s = set(vec![0.5; 6], vec![true, false, true, false, true, false]);
        assert_eq!(auroc(&s).unwrap(), 0.5);
    }

    #[test]
    fn pair_counting_example() {
        let s = set(vec![0.8, 0.3, 0.5, 0.1], vec![true, true, false, false]);
        assert_eq!(auroc(&s).unwrap(), 0.75);
    }

    #[test]
    fn single_class_rejected() {
        let s = set(vec![0.1, 0.2], vec![true, true]);
        assert!(matches!(auroc(&s), Err(Error::SingleClass)));
    }

    /// O(P*N) oracle with half credit for ties.
    fn pair_count_auroc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut correct = 0.0;
        let mut total = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            if !labels[i] {
                continue;
            }
            for (j, &sj) in scores.iter().enumerate() {
                if labels[j] {
                    continue;
                }
                total += 1.0;
                if si > sj {
                    correct += 1.0;
                } else if si == sj {
                    correct += 0.5;
                }
            }
        }
        correct / total
    }

    #[test]
    fn matches_pair_counting_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let n = rng.random_range(2..40);
            // coarse quantization forces plenty of ties
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.random_range(0.0..1.0f64) * 8.0).round() / 8.0)
                .collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            if labels.iter().all(|&l| l) {
                labels[0] = false;
            }
            if labels.iter().all(|&l| !l) {
                labels[0] = true;
            }
            let s = set(scores.clone(), labels.clone());
            let fast = auroc(&s).unwrap();
            let slow = pair_count_auroc(&scores, &labels);
            assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
        }
    }

    #[test]
    fn invariant_under_increasing_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let scores: Vec<f64> = (0..30).map(|_| rng.random_range(-2.0..2.0)).collect();
        let labels: Vec<bool> = (0..30).map(|i| i % 3 == 0).collect();
        let a = auroc(&set(scores.clone(), labels.clone())).unwrap();
        let transformed: Vec<f64> = scores.iter().map(|&s| (2.0 * s).exp() + 7.0).collect();
        let b = auroc(&set(transformed, labels)).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn negation_complements_for_tie_free_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let scores: Vec<f64> = (0..25).map(|_| rng.random_range(0.0..1.0)).collect();
        let labels: Vec<bool> = (0..25).map(|i| i % 4 == 0).collect();
        let a = auroc(&set(scores.clone(), labels.clone())).unwrap();
        let b = auroc(&set(scores.iter().map(|s| -s).collect(), labels)).unwrap();
        assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn aulc_examples() {
        let flat = LearningCurve::new(vec![0, 10, 20], vec![0.9, 0.9, 0.9]).unwrap();
        assert!((aulc(&flat).unwrap() - 0.9).abs() < 1e-12);

        let linear = LearningCurve::new(vec![5, 105], vec![0.0, 1.0]).unwrap();
        assert!((aulc(&linear).unwrap() - 0.5).abs() < 1e-12);

        let spec = LearningCurve::new(vec![0, 1, 2], vec![0.5, 0.9, 0.9]).unwrap();
        assert!((aulc(&spec).unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn aulc_monotone_in_dominating_curves() {
        let lo = LearningCurve::new(vec![0, 5, 10], vec![0.5, 0.6, 0.7]).unwrap();
        let hi = LearningCurve::new(vec![0, 5, 10], vec![0.6, 0.8, 0.7]).unwrap();
        assert!(aulc(&hi).unwrap() >= aulc(&lo).unwrap());
    }

    #[test]
    fn curve_validation() {
        assert!(LearningCurve::new(vec![0, 0, 2], vec![0.5, 0.6, 0.7]).is_err());
        assert!(LearningCurve::new(vec![0, 1], vec![0.5, 1.2]).is_err());
        let two = LearningCurve::new(vec![3], vec![0.5]).unwrap();
        assert!(aulc(&two).is_err());
    }

    #[test]
    fn pixel_auroc_examples() {
        let mask = ndarray::arr2(&[[true, false], [true, false]]);
        let perfect = ndarray::arr2(&[[1.0, 0.0], [1.0, 0.0]]);
        assert_eq!(pixel_auroc(&perfect, &mask).unwrap(), 1.0);

        let constant = ndarray::arr2(&[[0.3, 0.3], [0.3, 0.3]]);
        assert_eq!(pixel_auroc(&constant, &mask).unwrap(), 0.5);

        let example = ndarray::arr2(&[[0.9, 0.1], [0.4, 0.2]]);
        assert_eq!(pixel_auroc(&example, &mask).unwrap(), 1.0);
    }
}
