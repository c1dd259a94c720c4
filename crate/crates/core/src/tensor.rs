//! Numeric substrate: feature and probability vectors, the temperature-scaled
//! similarity kernel, softmax, cross-entropy, and a central-difference
//! gradient checker used by every other module's tests.
//!
//! All math runs at 64-bit precision so that finite-difference checks are
//! meaningful.

use serde::{Deserialize, Serialize};

use crate::error::{DicsError, Result};

/// Euclidean norms below this are treated as degenerate (zero) features.
pub const NORM_EPS: f64 = 1e-12;

/// Probabilities are clamped to `[PROB_FLOOR, 1]` before any `log`.
pub const PROB_FLOOR: f64 = 1e-12;

/// Step size for central finite differences.
pub const FD_STEP: f64 = 1e-5;

/// A fixed-dimension real vector. Encoder outputs, domain prototypes, and
/// queue entries all share this representation; within one run they share
/// one dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    /// Validates that the vector is non-empty and every entry is finite.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(DicsError::EmptyInput("feature vector"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DicsError::NonFinite("feature vector"));
        }
        Ok(Self(values))
    }

    /// Constructor for values already known to be finite and non-empty.
    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        debug_assert!(!values.is_empty());
        debug_assert!(values.iter().all(|v| v.is_finite()));
        Self(values)
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 1, "feature dimension must be at least 1");
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Elementwise `self - other`.
    pub fn sub(&self, other: &FeatureVector) -> Result<FeatureVector> {
        if self.dim() != other.dim() {
            return Err(DicsError::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        Ok(Self(
            self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect(),
        ))
    }

    pub fn scale(&self, k: f64) -> FeatureVector {
        Self(self.0.iter().map(|v| v * k).collect())
    }

    /// In-place `self += k * delta`; lengths must already match.
    pub(crate) fn add_scaled(&mut self, delta: &[f64], k: f64) {
        debug_assert_eq!(self.0.len(), delta.len());
        for (v, d) in self.0.iter_mut().zip(delta) {
            *v += k * d;
        }
    }
}

/// A probability vector: entries in `[0, 1]` summing to 1 within 1e-9.
/// Houses both one-hot true labels and soft labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(DicsError::EmptyInput("probability vector"));
        }
        if values
            .iter()
            .any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0)
        {
            return Err(DicsError::InvalidProbability(
                "entries must lie in [0, 1]",
            ));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DicsError::InvalidProbability("entries must sum to 1"));
        }
        Ok(Self(values))
    }

    pub fn one_hot(class: usize, num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(DicsError::EmptyInput("probability vector"));
        }
        if class >= num_classes {
            return Err(DicsError::InvalidProbability("one-hot index out of range"));
        }
        let mut values = vec![0.0; num_classes];
        values[class] = 1.0;
        Ok(Self(values))
    }

    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        debug_assert!(ProbVector::new(values.clone()).is_ok());
        Self(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// Index of the first maximal entry.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.0.iter().enumerate() {
            if *v > self.0[best] {
                best = i;
            }
        }
        best
    }

    /// True when exactly one entry is 1.0 and the rest are 0.0.
    pub fn is_one_hot(&self) -> bool {
        self.hot_index().is_some()
    }

    /// The hot index of a one-hot vector, if it is one.
    pub fn hot_index(&self) -> Option<usize> {
        let mut hot = None;
        for (i, v) in self.0.iter().enumerate() {
            if *v == 1.0 {
                if hot.is_some() {
                    return None;
                }
                hot = Some(i);
            } else if *v != 0.0 {
                return None;
            }
        }
        hot
    }
}

/// Rescale to unit Euclidean norm, preserving direction.
///
/// Errors with "degenerate feature" when the norm is below [`NORM_EPS`].
pub fn l2_normalize(v: &FeatureVector) -> Result<FeatureVector> {
    let n = v.norm();
    if n < NORM_EPS {
        return Err(DicsError::DegenerateFeature);
    }
    Ok(FeatureVector::from_raw(
        v.values().iter().map(|x| x / n).collect(),
    ))
}

/// Cosine of the two directions divided by `temperature * sqrt(dim)`.
///
/// Bounded in `[-1/(t*sqrt(d)), +1/(t*sqrt(d))]`; symmetric and invariant to
/// positive rescaling of either argument.
pub fn similarity(a: &FeatureVector, b: &FeatureVector, temperature: f64) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(DicsError::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    if !temperature.is_finite() || temperature <= 0.0 {
        return Err(DicsError::InvalidConfig(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let na = l2_normalize(a)?;
    let nb = l2_normalize(b)?;
    let dot: f64 = na
        .values()
        .iter()
        .zip(nb.values())
        .map(|(x, y)| x * y)
        .sum();
    Ok(dot / (temperature * (a.dim() as f64).sqrt()))
}

/// Similarity value plus its gradient with respect to both raw inputs.
pub(crate) struct SimilarityGrads {
    pub value: f64,
    pub grad_a: Vec<f64>,
    pub grad_b: Vec<f64>,
}

/// Forward/backward pair for [`similarity`].
///
/// With unit directions `u = a/|a|`, `w = b/|b|` and `cos = u.w`, the
/// gradient wrt `a` is `(w - cos*u) / (|a| * t * sqrt(d))`, symmetrically
/// for `b`.
pub(crate) fn similarity_with_grads(
    a: &FeatureVector,
    b: &FeatureVector,
    temperature: f64,
) -> Result<SimilarityGrads> {
    if a.dim() != b.dim() {
        return Err(DicsError::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    if !temperature.is_finite() || temperature <= 0.0 {
        return Err(DicsError::InvalidConfig(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let ra = a.norm();
    let rb = b.norm();
    if ra < NORM_EPS || rb < NORM_EPS {
        return Err(DicsError::DegenerateFeature);
    }
    let dim = a.dim();
    let ua: Vec<f64> = a.values().iter().map(|x| x / ra).collect();
    let ub: Vec<f64> = b.values().iter().map(|x| x / rb).collect();
    let cos: f64 = ua.iter().zip(&ub).map(|(x, y)| x * y).sum();
    let scale = temperature * (dim as f64).sqrt();
    let grad_a = (0..dim)
        .map(|k| (ub[k] - cos * ua[k]) / (ra * scale))
        .collect();
    let grad_b = (0..dim)
        .map(|k| (ua[k] - cos * ub[k]) / (rb * scale))
        .collect();
    Ok(SimilarityGrads {
        value: cos / scale,
        grad_a,
        grad_b,
    })
}

/// Numerically stable softmax (max-subtraction). Shift-invariant.
pub fn softmax(logits: &[f64]) -> Result<ProbVector> {
    if logits.is_empty() {
        return Err(DicsError::EmptyInput("softmax logits"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(DicsError::NonFinite("softmax logits"));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(ProbVector::from_raw(
        exps.into_iter().map(|e| e / sum).collect(),
    ))
}

/// `-sum(y * log(p))` with `p` clamped to `[PROB_FLOOR, 1]` before the log.
///
/// Zero exactly when the prediction puts mass 1 on the true class.
pub fn cross_entropy(true_label: &ProbVector, predicted: &ProbVector) -> Result<f64> {
    if true_label.len() != predicted.len() {
        return Err(DicsError::LengthMismatch {
            context: "cross-entropy",
            left: true_label.len(),
            right: predicted.len(),
        });
    }
    let mut total = 0.0;
    for (y, p) in true_label.values().iter().zip(predicted.values()) {
        if *y != 0.0 {
            total -= y * p.clamp(PROB_FLOOR, 1.0).ln();
        }
    }
    Ok(total)
}

/// Compare an analytic gradient against central finite differences.
///
/// Returns the max over coordinates of
/// `|g_fd - g_an| / max(1, |g_fd|, |g_an|)` with step [`FD_STEP`].
pub fn check_gradient<F>(f: F, x: &[f64], analytic_grad: &[f64]) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if x.len() != analytic_grad.len() {
        return Err(DicsError::LengthMismatch {
            context: "gradient check",
            left: x.len(),
            right: analytic_grad.len(),
        });
    }
    let mut probe = x.to_vec();
    let mut max_err = 0.0f64;
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + FD_STEP;
        let f_plus = f(&probe)?;
        probe[i] = orig - FD_STEP;
        let f_minus = f(&probe)?;
        probe[i] = orig;
        if !f_plus.is_finite() || !f_minus.is_finite() {
            return Err(DicsError::NonFinite("objective during gradient check"));
        }
        let fd = (f_plus - f_minus) / (2.0 * FD_STEP);
        let an = analytic_grad[i];
        let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
