//! The four loss terms of the training objective and their combination,
//! each with a forward value and an analytic gradient for every tensor it
//! updates.
//!
//! The prototype loss and the cross-domain invariance loss take the log of a
//! raw similarity, which can be non-positive; those similarities are clamped
//! to [`SIM_LOG_FLOOR`] before the log and the gradient is zero in the
//! clamped region. The class-specificity loss softmax-normalizes its
//! similarities across the queue, so the resulting soft label is a proper
//! distribution.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{DicsError, Result};
use crate::model::{ClassifierGrads, ClassifierParams, DomainPrototypeSet};
use crate::queue::InvariantMemoryQueue;
use crate::tensor::{
    cross_entropy, similarity_with_grads, softmax, FeatureVector, ProbVector, PROB_FLOOR,
};

/// Raw similarities are clamped to at least this before a `log`.
pub const SIM_LOG_FLOOR: f64 = 1e-8;

/// A batch of features with domain ids and one-hot labels, holding exactly
/// `per_domain_count` samples from each of its domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledBatch {
    features: Vec<FeatureVector>,
    domain_ids: Vec<usize>,
    labels: Vec<ProbVector>,
    per_domain_count: usize,
}

impl LabeledBatch {
    pub fn new(
        features: Vec<FeatureVector>,
        domain_ids: Vec<usize>,
        labels: Vec<ProbVector>,
    ) -> Result<Self> {
        if features.is_empty() {
            return Err(DicsError::EmptyInput("batch"));
        }
        if features.len() != domain_ids.len() {
            return Err(DicsError::LengthMismatch {
                context: "batch domain ids",
                left: features.len(),
                right: domain_ids.len(),
            });
        }
        if features.len() != labels.len() {
            return Err(DicsError::LengthMismatch {
                context: "batch labels",
                left: features.len(),
                right: labels.len(),
            });
        }
        let dim = features[0].dim();
        if features.iter().any(|f| f.dim() != dim) {
            return Err(DicsError::InvalidBatch(
                "all batch features must share one dimension".into(),
            ));
        }
        let num_classes = labels[0].len();
        if labels
            .iter()
            .any(|l| l.len() != num_classes || !l.is_one_hot())
        {
            return Err(DicsError::InvalidBatch(
                "all batch labels must be one-hot with one class count".into(),
            ));
        }
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for d in &domain_ids {
            *counts.entry(*d).or_insert(0) += 1;
        }
        let per_domain_count = *counts.values().next().expect("batch is non-empty");
        if counts.values().any(|c| *c != per_domain_count) {
            return Err(DicsError::InvalidBatch(format!(
                "unbalanced domain counts: {counts:?}"
            )));
        }
        Ok(Self {
            features,
            domain_ids,
            labels,
            per_domain_count,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn features(&self) -> &[FeatureVector] {
        &self.features
    }

    pub fn domain_ids(&self) -> &[usize] {
        &self.domain_ids
    }

    pub fn labels(&self) -> &[ProbVector] {
        &self.labels
    }

    pub fn per_domain_count(&self) -> usize {
        self.per_domain_count
    }

    pub fn num_classes(&self) -> usize {
        self.labels[0].len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features[0].dim()
    }

    /// Sorted distinct domain ids present in the batch.
    pub fn domains(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.domain_ids.clone();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Same ids and labels over a new feature set (e.g. after encoding).
    pub fn with_features(&self, features: Vec<FeatureVector>) -> Result<Self> {
        Self::new(features, self.domain_ids.clone(), self.labels.clone())
    }
}

/// The combined objective value and its components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_c: f64,
    pub l_di: f64,
    pub l_cs: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// `total = l_c + alpha * l_di + beta * l_cs`.
pub fn loss_total(l_c: f64, l_di: f64, l_cs: f64, alpha: f64, beta: f64) -> Result<LossBreakdown> {
    if alpha < 0.0 || beta < 0.0 {
        return Err(DicsError::InvalidConfig(format!(
            "loss coefficients must be non-negative, got alpha={alpha} beta={beta}"
        )));
    }
    Ok(LossBreakdown {
        l_c,
        l_di,
        l_cs,
        total: l_c + alpha * l_di + beta * l_cs,
        alpha,
        beta,
    })
}

/// Mean cross-entropy between predictions and true labels.
pub fn loss_classification(predictions: &[ProbVector], labels: &[ProbVector]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(DicsError::LengthMismatch {
            context: "classification batch",
            left: predictions.len(),
            right: labels.len(),
        });
    }
    if predictions.is_empty() {
        return Err(DicsError::EmptyInput("classification batch"));
    }
    let mut total = 0.0;
    for (p, y) in predictions.iter().zip(labels) {
        total += cross_entropy(y, p)?;
    }
    Ok(total / predictions.len() as f64)
}

pub struct ClassificationLoss {
    pub value: f64,
    pub predictions: Vec<ProbVector>,
    pub classifier_grads: ClassifierGrads,
    /// `dL/dz` per input feature.
    pub feature_grads: Vec<Vec<f64>>,
}

/// Fused classifier head + mean cross-entropy, with gradients for the
/// classifier parameters and the input features.
///
/// Per sample, `dL/d(logits) = (p - y) / N`; the clamp inside
/// [`cross_entropy`] is inactive whenever the true-class probability stays
/// above the floor.
pub fn loss_classification_with_grads(
    classifier: &ClassifierParams,
    features: &[FeatureVector],
    labels: &[ProbVector],
) -> Result<ClassificationLoss> {
    if features.len() != labels.len() {
        return Err(DicsError::LengthMismatch {
            context: "classification batch",
            left: features.len(),
            right: labels.len(),
        });
    }
    if features.is_empty() {
        return Err(DicsError::EmptyInput("classification batch"));
    }
    let n = features.len() as f64;
    let mut value = 0.0;
    let mut predictions = Vec::with_capacity(features.len());
    let mut classifier_grads = ClassifierGrads::zeros_like(classifier);
    let mut feature_grads = Vec::with_capacity(features.len());
    for (z, y) in features.iter().zip(labels) {
        let p = softmax(&classifier.logits(z)?)?;
        value += cross_entropy(y, &p)?;
        let dlogits: Vec<f64> = p
            .values()
            .iter()
            .zip(y.values())
            .map(|(pi, yi)| (pi - yi) / n)
            .collect();
        let mut dz = vec![0.0; z.dim()];
        for (r, dl) in dlogits.iter().enumerate() {
            classifier_grads.bias[r] += dl;
            for (c, x) in z.values().iter().enumerate() {
                classifier_grads.weights[r][c] += dl * x;
                dz[c] += classifier.weights[r][c] * dl;
            }
        }
        feature_grads.push(dz);
        predictions.push(p);
    }
    Ok(ClassificationLoss {
        value: value / n,
        predictions,
        classifier_grads,
        feature_grads,
    })
}

pub struct DomainLoss {
    pub value: f64,
    /// `dL/d(prototype)` per domain; batch features are constants here.
    pub prototype_grads: BTreeMap<usize, Vec<f64>>,
}

/// Mean over domains (then samples) of `-log(clamp(sim(prototype, feature)))`.
pub fn loss_domain_with_grads(
    prototypes: &DomainPrototypeSet,
    batch: &LabeledBatch,
    temperature: f64,
) -> Result<DomainLoss> {
    let domains = batch.domains();
    let weight = 1.0 / (domains.len() as f64 * batch.per_domain_count() as f64);
    let dim = batch.feature_dim();
    let mut value = 0.0;
    let mut prototype_grads: BTreeMap<usize, Vec<f64>> =
        domains.iter().map(|d| (*d, vec![0.0; dim])).collect();
    for (feature, domain) in batch.features().iter().zip(batch.domain_ids()) {
        let proto = prototypes
            .get(*domain)
            .ok_or(DicsError::MissingPrototype(*domain))?;
        let parts = similarity_with_grads(proto, feature, temperature)?;
        if parts.value > SIM_LOG_FLOOR {
            value -= weight * parts.value.ln();
            let grad = prototype_grads.get_mut(domain).expect("domain present");
            let coef = -weight / parts.value;
            for (g, d) in grad.iter_mut().zip(&parts.grad_a) {
                *g += coef * d;
            }
        } else {
            value -= weight * SIM_LOG_FLOOR.ln();
        }
    }
    Ok(DomainLoss {
        value,
        prototype_grads,
    })
}

/// Forward-only variant of [`loss_domain_with_grads`].
pub fn loss_domain(
    prototypes: &DomainPrototypeSet,
    batch: &LabeledBatch,
    temperature: f64,
) -> Result<f64> {
    loss_domain_with_grads(prototypes, batch, temperature).map(|l| l.value)
}

/// Subtract each sample's domain prototype from its feature, isolating
/// class-related features. Prototypes are treated as constants.
pub fn remove_domain_features(
    batch: &LabeledBatch,
    prototypes: &DomainPrototypeSet,
) -> Result<Vec<FeatureVector>> {
    batch
        .features()
        .iter()
        .zip(batch.domain_ids())
        .map(|(feature, domain)| {
            let proto = prototypes
                .get(*domain)
                .ok_or(DicsError::MissingPrototype(*domain))?;
            feature.sub(proto)
        })
        .collect()
}

pub struct InvarianceLoss {
    pub value: f64,
    /// `dL/d(feature)` per batch position.
    pub feature_grads: Vec<Vec<f64>>,
    /// True when no class contributed a cross-domain pair; the value is then 0.
    pub no_pairs: bool,
}

/// Mean over classes (then over that class's unordered cross-domain pairs)
/// of `-log(clamp(sim(z_i, z_j)))`.
///
/// Only same-class pairs whose two samples come from different domains
/// participate; each contributing class is normalized by its actual pair
/// count, and classes with no such pair contribute nothing.
pub fn loss_domain_invariance_with_grads(
    features: &[FeatureVector],
    labels: &[ProbVector],
    domain_ids: &[usize],
    temperature: f64,
) -> Result<InvarianceLoss> {
    if features.len() != labels.len() || features.len() != domain_ids.len() {
        return Err(DicsError::LengthMismatch {
            context: "invariance loss inputs",
            left: features.len(),
            right: labels.len().max(domain_ids.len()),
        });
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, label) in labels.iter().enumerate() {
        let class = label.hot_index().ok_or_else(|| {
            DicsError::InvalidBatch("invariance loss labels must be one-hot".into())
        })?;
        by_class.entry(class).or_default().push(i);
    }
    let mut class_pairs: Vec<Vec<(usize, usize)>> = Vec::new();
    for members in by_class.values() {
        let mut pairs = Vec::new();
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                if domain_ids[i] != domain_ids[j] {
                    pairs.push((i, j));
                }
            }
        }
        if !pairs.is_empty() {
            class_pairs.push(pairs);
        }
    }
    let mut feature_grads: Vec<Vec<f64>> =
        features.iter().map(|f| vec![0.0; f.dim()]).collect();
    if class_pairs.is_empty() {
        return Ok(InvarianceLoss {
            value: 0.0,
            feature_grads,
            no_pairs: true,
        });
    }
    let class_count = class_pairs.len() as f64;
    let mut value = 0.0;
    for pairs in &class_pairs {
        let weight = 1.0 / (class_count * pairs.len() as f64);
        for &(i, j) in pairs {
            let parts = similarity_with_grads(&features[i], &features[j], temperature)?;
            if parts.value > SIM_LOG_FLOOR {
                value -= weight * parts.value.ln();
                let coef = -weight / parts.value;
                for (g, d) in feature_grads[i].iter_mut().zip(&parts.grad_a) {
                    *g += coef * d;
                }
                for (g, d) in feature_grads[j].iter_mut().zip(&parts.grad_b) {
                    *g += coef * d;
                }
            } else {
                value -= weight * SIM_LOG_FLOOR.ln();
            }
        }
    }
    Ok(InvarianceLoss {
        value,
        feature_grads,
        no_pairs: false,
    })
}

/// Forward-only variant of [`loss_domain_invariance_with_grads`];
/// the flag is true when no class had a cross-domain pair.
pub fn loss_domain_invariance(
    features: &[FeatureVector],
    labels: &[ProbVector],
    domain_ids: &[usize],
    temperature: f64,
) -> Result<(f64, bool)> {
    loss_domain_invariance_with_grads(features, labels, domain_ids, temperature)
        .map(|l| (l.value, l.no_pairs))
}

/// Per-entry softmax weights over the queue and the per-class mass they
/// induce. The per-class mass sums raw exponentials before the single
/// division, so a queue holding only one class yields mass exactly 1.
struct QueueWeighting {
    /// Softmax weight per queue entry.
    weights: Vec<f64>,
    /// Summed weight per class: the soft label.
    class_mass: Vec<f64>,
}

fn queue_weighting(
    sims: &[f64],
    queue_classes: &[usize],
    num_classes: usize,
) -> QueueWeighting {
    let m = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = sims.iter().map(|s| (s - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut class_sums = vec![0.0; num_classes];
    for (e, c) in exps.iter().zip(queue_classes) {
        class_sums[*c] += e;
    }
    QueueWeighting {
        weights: exps.iter().map(|e| e / total).collect(),
        class_mass: class_sums.into_iter().map(|s| s / total).collect(),
    }
}

fn queue_classes(queue: &InvariantMemoryQueue) -> Result<Vec<usize>> {
    queue
        .entries()
        .map(|(_, label)| {
            label.hot_index().ok_or_else(|| {
                DicsError::InvalidBatch("queue labels must be one-hot".into())
            })
        })
        .collect()
}

/// Soft label for one feature: similarity-softmax-weighted sum of the
/// queue's one-hot labels.
pub fn soft_label(
    feature: &FeatureVector,
    queue: &InvariantMemoryQueue,
    temperature: f64,
) -> Result<ProbVector> {
    if queue.is_empty() {
        return Err(DicsError::QueueNotWarmedUp);
    }
    let classes = queue_classes(queue)?;
    let sims: Vec<f64> = queue
        .entries()
        .map(|(q, _)| similarity_with_grads(feature, q, temperature).map(|p| p.value))
        .collect::<Result<_>>()?;
    let weighting = queue_weighting(&sims, &classes, queue.num_classes());
    ProbVector::new(weighting.class_mass)
}

pub struct SpecificityLoss {
    pub value: f64,
    /// `dL/d(feature)` per batch position; queue entries are constants.
    pub feature_grads: Vec<Vec<f64>>,
}

/// Mean over the batch of the cross-entropy between each sample's true label
/// and its queue-derived soft label.
///
/// For a one-hot true label the contribution is `-log(W)` where `W` is the
/// soft-label mass on the true class, so
/// `dL/d(sim_j) = w_j * (1 - [class_j == true] / W) / N`.
pub fn loss_class_specificity_with_grads(
    features: &[FeatureVector],
    labels: &[ProbVector],
    queue: &InvariantMemoryQueue,
    temperature: f64,
) -> Result<SpecificityLoss> {
    if queue.is_empty() {
        return Err(DicsError::QueueNotWarmedUp);
    }
    if features.len() != labels.len() {
        return Err(DicsError::LengthMismatch {
            context: "specificity loss inputs",
            left: features.len(),
            right: labels.len(),
        });
    }
    if features.is_empty() {
        return Err(DicsError::EmptyInput("specificity loss batch"));
    }
    let classes = queue_classes(queue)?;
    let queue_features: Vec<&FeatureVector> = queue.entries().map(|(f, _)| f).collect();
    let n = features.len() as f64;
    let mut value = 0.0;
    let mut feature_grads = Vec::with_capacity(features.len());
    for (feature, label) in features.iter().zip(labels) {
        let true_class = label.hot_index().ok_or_else(|| {
            DicsError::InvalidBatch("specificity loss labels must be one-hot".into())
        })?;
        if true_class >= queue.num_classes() {
            return Err(DicsError::InvalidBatch(
                "label class count exceeds queue class count".into(),
            ));
        }
        let mut sims = Vec::with_capacity(queue_features.len());
        let mut sim_grads = Vec::with_capacity(queue_features.len());
        for q in &queue_features {
            let parts = similarity_with_grads(feature, q, temperature)?;
            sims.push(parts.value);
            sim_grads.push(parts.grad_a);
        }
        let weighting = queue_weighting(&sims, &classes, queue.num_classes());
        let mass = weighting.class_mass[true_class];
        let mut dz = vec![0.0; feature.dim()];
        if mass <= PROB_FLOOR {
            // Clamped region: flat value, zero gradient.
            value -= PROB_FLOOR.ln();
        } else {
            value -= mass.min(1.0).ln();
            for ((w, c), grad) in weighting.weights.iter().zip(&classes).zip(&sim_grads) {
                let coef = w * (1.0 - if *c == true_class { 1.0 / mass } else { 0.0 }) / n;
                for (g, d) in dz.iter_mut().zip(grad) {
                    *g += coef * d;
                }
            }
        }
        feature_grads.push(dz);
    }
    Ok(SpecificityLoss {
        value: value / n,
        feature_grads,
    })
}

/// Forward-only variant of [`loss_class_specificity_with_grads`].
pub fn loss_class_specificity(
    features: &[FeatureVector],
    labels: &[ProbVector],
    queue: &InvariantMemoryQueue,
    temperature: f64,
) -> Result<f64> {
    loss_class_specificity_with_grads(features, labels, queue, temperature).map(|l| l.value)
}
