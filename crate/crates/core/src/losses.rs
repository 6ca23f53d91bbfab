//! Temperature-scaled contrastive objectives and their analytic gradients.
//!
//! Both losses share one kernel. For an anchor `i` with positive set `P(i)`
//! and unit embeddings `z`:
//!
//! ```text
//! l_i = (1/|P(i)|) * sum_{p in P(i)} -log( exp(z_i.z_p / t) / sum_{a != i} exp(z_i.z_a / t) )
//! ```
//!
//! The single-positive case `P(i) = {i+}` is NT-Xent. Log-sum-exp terms are
//! evaluated with max subtraction so small temperatures stay finite.
//!
//! Gradients are taken with respect to the embeddings as free vectors (no
//! unit-sphere constraint); the training loop folds in the normalization
//! Jacobian when it backpropagates into the raw projections. This is the
//! quantity a central-finite-difference oracle reproduces.

use ndarray::Array1;

use crate::batch::{positive_indices, Embedding, PositiveSetPolicy};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Loss hyperparameters.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { temperature: 0.2 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Value, per-anchor terms, and optional free-vector gradients of a loss.
#[derive(Debug, Clone)]
pub struct LossReport<F: Scalar> {
    /// Total loss: the sum of `per_anchor`.
    pub value: F,
    pub per_anchor: Vec<F>,
    /// dL/dz_i treating each z_i as a free vector; present when requested.
    pub gradients: Option<Vec<Array1<F>>>,
    /// Anchors whose positive set was empty; they contribute zero.
    pub skipped_anchors: Vec<usize>,
}

impl<F: Scalar> LossReport<F> {
    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self.per_anchor.iter().all(|v| v.is_finite())
            && self
                .gradients
                .as_ref()
                .map(|gs| gs.iter().all(|g| g.iter().all(|v| v.is_finite())))
                .unwrap_or(true)
    }
}

fn check_inputs<F: Scalar>(z: &[Embedding<F>], pair_of: &[usize], tau: F) -> Result<()> {
    if z.len() < 2 || z.len() % 2 != 0 {
        return Err(Error::EmptyBatch);
    }
    if pair_of.len() != z.len() {
        return Err(Error::DimMismatch {
            context: "pair_of length",
            expected: z.len().to_string(),
            got: pair_of.len().to_string(),
        });
    }
    if !(tau > F::zero()) {
        return Err(Error::InvalidConfig("temperature must be positive".into()));
    }
    for (i, e) in z.iter().enumerate() {
        e.check_unit(i)?;
    }
    Ok(())
}

/// Eq.-style objective on raw vectors, no unit-norm checks.
///
/// This is the function a finite-difference oracle probes: perturbed inputs
/// leave the unit sphere and must still evaluate. Anchors with an empty
/// positive set contribute zero.
pub fn objective_free<F: Scalar>(
    z: &[Array1<F>],
    positive_sets: &[Vec<usize>],
    tau: F,
) -> F {
    evaluate(z, positive_sets, tau, false).0
}

/// Positive sets for every anchor under `policy`.
pub fn positive_sets(
    policy: PositiveSetPolicy,
    labels: &[u32],
    pair_of: &[usize],
) -> Vec<Vec<usize>> {
    (0..labels.len())
        .map(|i| positive_indices(policy, labels, pair_of, i))
        .collect()
}

/// Shared kernel: loss value, per-anchor terms, and optionally gradients.
fn evaluate<F: Scalar>(
    z: &[Array1<F>],
    positive_sets: &[Vec<usize>],
    tau: F,
    want_grad: bool,
) -> (F, Vec<F>, Option<Vec<Array1<F>>>, Vec<usize>) {
    let count = z.len();
    let dim = z[0].len();
    let inv_tau = F::one() / tau;
    let mut per_anchor = vec![F::zero(); count];
    let mut skipped = Vec::new();
    let mut grads = if want_grad {
        Some(vec![Array1::<F>::zeros(dim); count])
    } else {
        None
    };
    let mut sims = vec![F::zero(); count];
    let mut weights = vec![F::zero(); count];

    for anchor in 0..count {
        let positives = &positive_sets[anchor];
        if positives.is_empty() {
            skipped.push(anchor);
            continue;
        }
        // scaled similarities to every other instance
        let mut max_sim = F::neg_infinity();
        for a in 0..count {
            if a == anchor {
                continue;
            }
            let s = z[anchor].dot(&z[a]) * inv_tau;
            sims[a] = s;
            if s > max_sim {
                max_sim = s;
            }
        }
        let mut sum_exp = F::zero();
        for a in 0..count {
            if a == anchor {
                continue;
            }
            sum_exp += (sims[a] - max_sim).exp();
        }
        let lse = max_sim + sum_exp.ln();
        let inv_p = F::one() / F::from_usize(positives.len()).unwrap();
        let mut mean_pos = F::zero();
        for &p in positives {
            mean_pos += sims[p];
        }
        mean_pos = mean_pos * inv_p;
        per_anchor[anchor] = lse - mean_pos;

        if let Some(grads) = grads.as_mut() {
            // softmax weights over a != anchor
            for a in 0..count {
                if a == anchor {
                    continue;
                }
                weights[a] = (sims[a] - lse).exp();
            }
            // d l_anchor / d z_anchor = (1/t) (sum_a w_a z_a - mean_p z_p)
            let mut self_grad = Array1::<F>::zeros(dim);
            for a in 0..count {
                if a == anchor {
                    continue;
                }
                self_grad.scaled_add(weights[a], &z[a]);
            }
            for &p in positives {
                self_grad.scaled_add(-inv_p, &z[p]);
            }
            grads[anchor].scaled_add(inv_tau, &self_grad);
            // d l_anchor / d z_a = (1/t) (w_a - [a in P]/|P|) z_anchor
            for a in 0..count {
                if a == anchor {
                    continue;
                }
                grads[a].scaled_add(inv_tau * weights[a], &z[anchor]);
            }
            for &p in positives {
                grads[p].scaled_add(-inv_tau * inv_p, &z[anchor]);
            }
        }
    }

    let value = per_anchor.iter().copied().sum();
    (value, per_anchor, grads, skipped)
}

fn values_of<F: Scalar>(z: &[Embedding<F>]) -> Vec<Array1<F>> {
    z.iter().map(|e| e.values.clone()).collect()
}

/// NT-Xent: every anchor is pulled toward its augmented counterpart only.
pub fn ntxent_loss<F: Scalar>(
    z: &[Embedding<F>],
    pair_of: &[usize],
    tau: F,
) -> Result<LossReport<F>> {
    check_inputs(z, pair_of, tau)?;
    let sets: Vec<Vec<usize>> = pair_of.iter().map(|&p| vec![p]).collect();
    let (value, per_anchor, _, skipped) = evaluate(&values_of(z), &sets, tau, false);
    Ok(LossReport {
        value,
        per_anchor,
        gradients: None,
        skipped_anchors: skipped,
    })
}

/// Multi-positive contrastive loss under a positive-set policy.
///
/// With `SinglePositive` this reduces to [`ntxent_loss`]. Anchors with an
/// empty positive set (possible only under `SameLabel` with a singleton
/// label) contribute zero and are listed in the report.
pub fn contrastive_loss<F: Scalar>(
    z: &[Embedding<F>],
    labels: &[u32],
    pair_of: &[usize],
    policy: PositiveSetPolicy,
    tau: F,
) -> Result<LossReport<F>> {
    check_inputs(z, pair_of, tau)?;
    check_labels(z.len(), labels)?;
    let sets = positive_sets(policy, labels, pair_of);
    let (value, per_anchor, _, skipped) = evaluate(&values_of(z), &sets, tau, false);
    Ok(LossReport {
        value,
        per_anchor,
        gradients: None,
        skipped_anchors: skipped,
    })
}

/// Loss plus analytic gradients with respect to the embeddings as free
/// vectors. Matches central finite differences of [`objective_free`].
pub fn loss_gradient<F: Scalar>(
    z: &[Embedding<F>],
    labels: &[u32],
    pair_of: &[usize],
    policy: PositiveSetPolicy,
    tau: F,
) -> Result<LossReport<F>> {
    check_inputs(z, pair_of, tau)?;
    check_labels(z.len(), labels)?;
    let sets = positive_sets(policy, labels, pair_of);
    let (value, per_anchor, grads, skipped) = evaluate(&values_of(z), &sets, tau, true);
    Ok(LossReport {
        value,
        per_anchor,
        gradients: grads,
        skipped_anchors: skipped,
    })
}

/// Gradient entry point used by the trainer: positive sets precomputed,
/// vectors raw.
pub(crate) fn gradient_free<F: Scalar>(
    z: &[Array1<F>],
    positive_sets: &[Vec<usize>],
    tau: F,
) -> (F, Vec<Array1<F>>) {
    let (value, _, grads, _) = evaluate(z, positive_sets, tau, true);
    (value, grads.expect("gradients requested"))
}

fn check_labels(len: usize, labels: &[u32]) -> Result<()> {
    if labels.len() != len {
        return Err(Error::DimMismatch {
            context: "labels length",
            expected: len.to_string(),
            got: labels.len().to_string(),
        });
    }
    Ok(())
}
