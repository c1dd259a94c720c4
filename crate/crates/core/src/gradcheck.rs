//! Randomized gradient suite: every analytic gradient in the crate checked
//! against 64-bit central finite differences on small random instances.
//!
//! Instances are redrawn when a participating similarity (or soft-label
//! mass) sits close enough to a clamp boundary that the finite-difference
//! probe would straddle the kink; the comparison is only meaningful where
//! the objective is differentiable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::TrainConfig;
use crate::error::{DicsError, Result};
use crate::losses::{
    loss_class_specificity, loss_class_specificity_with_grads, loss_classification_with_grads,
    loss_domain, loss_domain_invariance, loss_domain_invariance_with_grads,
    loss_domain_with_grads, LabeledBatch,
};
use crate::model::{Activation, ClassifierParams, DomainPrototypeSet, EncoderParams};
use crate::queue::InvariantMemoryQueue;
use crate::seeding::mix64;
use crate::tensor::{check_gradient, similarity, FeatureVector, ProbVector};
use crate::train::objective_with_grads;

/// Pass threshold for every check in the suite.
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Similarities closer than this to the log-clamp floor disqualify an
/// instance (finite differences would cross the kink).
const KINK_MARGIN: f64 = 1e-3;

const REDRAW_LIMIT: usize = 200;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn random_feature(rng: &mut ChaCha8Rng, dim: usize) -> FeatureVector {
    FeatureVector::new(
        (0..dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect(),
    )
    .expect("gaussian draw is finite")
}

fn one_hot(class: usize, num_classes: usize) -> ProbVector {
    ProbVector::one_hot(class, num_classes).expect("class in range")
}

struct BatchInstance {
    features: Vec<FeatureVector>,
    labels: Vec<ProbVector>,
    domain_ids: Vec<usize>,
    num_classes: usize,
}

/// Balanced random batch: 2-3 domains, 2-3 classes, N <= 12.
fn random_batch(rng: &mut ChaCha8Rng, dim: usize) -> BatchInstance {
    let num_domains = rng.gen_range(2..=3);
    let per_domain = rng.gen_range(2..=4);
    let num_classes = rng.gen_range(2..=3);
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut domain_ids = Vec::new();
    let mut counter = 0usize;
    for d in 0..num_domains {
        for _ in 0..per_domain {
            features.push(random_feature(rng, dim));
            labels.push(one_hot(counter % num_classes, num_classes));
            domain_ids.push(d);
            counter += 1;
        }
    }
    BatchInstance {
        features,
        labels,
        domain_ids,
        num_classes,
    }
}

fn random_queue(
    rng: &mut ChaCha8Rng,
    dim: usize,
    num_classes: usize,
    len: usize,
) -> InvariantMemoryQueue {
    let mut queue = InvariantMemoryQueue::new(len, dim, num_classes).expect("valid queue");
    let features: Vec<FeatureVector> = (0..len).map(|_| random_feature(rng, dim)).collect();
    let labels: Vec<ProbVector> = (0..len).map(|i| one_hot(i % num_classes, num_classes)).collect();
    queue.push_batch(&features, &labels).expect("fits");
    queue
}

/// All pairwise similarities stay clear of the clamp kink.
fn sims_clear_of_kink(
    pairs: &[(&FeatureVector, &FeatureVector)],
    temperature: f64,
) -> Result<bool> {
    for (a, b) in pairs {
        let s = similarity(a, b, temperature)?;
        if s.abs() < KINK_MARGIN {
            return Ok(false);
        }
    }
    Ok(true)
}

fn check_classification(rng: &mut ChaCha8Rng) -> Result<f64> {
    let dim = rng.gen_range(3..=16);
    let batch = random_batch(rng, dim);
    let mut classifier_rng = ChaCha8Rng::seed_from_u64(rng.gen());
    let classifier = ClassifierParams::init(batch.num_classes, dim, &mut classifier_rng);

    let loss = loss_classification_with_grads(&classifier, &batch.features, &batch.labels)?;
    let mut flat = classifier.flatten();
    let split = flat.len();
    for f in &batch.features {
        flat.extend_from_slice(f.values());
    }
    let mut analytic = loss.classifier_grads.flatten();
    analytic.extend(loss.feature_grads.concat());

    let labels = batch.labels.clone();
    let template = classifier.clone();
    let f = move |x: &[f64]| -> Result<f64> {
        let mut c = template.clone();
        c.set_from_flat(&x[..split])?;
        let features: Vec<FeatureVector> = x[split..]
            .chunks(dim)
            .map(|chunk| FeatureVector::new(chunk.to_vec()))
            .collect::<Result<_>>()?;
        loss_classification_with_grads(&c, &features, &labels).map(|l| l.value)
    };
    check_gradient(f, &flat, &analytic)
}

fn check_domain(rng: &mut ChaCha8Rng, temperature: f64) -> Result<f64> {
    for _ in 0..REDRAW_LIMIT {
        let dim = rng.gen_range(3..=16);
        let batch = random_batch(rng, dim);
        let labeled = LabeledBatch::new(
            batch.features.clone(),
            batch.domain_ids.clone(),
            batch.labels.clone(),
        )?;
        let mut prototypes = DomainPrototypeSet::empty(0.1);
        for d in labeled.domains() {
            prototypes.insert(d, random_feature(rng, dim));
        }
        let pairs: Vec<(&FeatureVector, &FeatureVector)> = labeled
            .features()
            .iter()
            .zip(labeled.domain_ids())
            .map(|(f, d)| (prototypes.get(*d).expect("prototype exists"), f))
            .collect();
        if !sims_clear_of_kink(&pairs, temperature)? {
            continue;
        }
        let loss = loss_domain_with_grads(&prototypes, &labeled, temperature)?;
        let domains = labeled.domains();
        let flat: Vec<f64> = domains
            .iter()
            .flat_map(|d| prototypes.get(*d).expect("present").values().to_vec())
            .collect();
        let analytic: Vec<f64> = domains
            .iter()
            .flat_map(|d| loss.prototype_grads[d].clone())
            .collect();
        let f = move |x: &[f64]| -> Result<f64> {
            let mut p = DomainPrototypeSet::empty(0.1);
            for (k, d) in domains.iter().enumerate() {
                p.insert(*d, FeatureVector::new(x[k * dim..(k + 1) * dim].to_vec())?);
            }
            loss_domain(&p, &labeled, temperature)
        };
        return check_gradient(f, &flat, &analytic);
    }
    Err(DicsError::Data(
        "could not draw a kink-free domain-loss instance".into(),
    ))
}

fn check_invariance(rng: &mut ChaCha8Rng, temperature: f64) -> Result<f64> {
    for _ in 0..REDRAW_LIMIT {
        let dim = rng.gen_range(3..=16);
        let batch = random_batch(rng, dim);
        let mut pairs = Vec::new();
        for i in 0..batch.features.len() {
            for j in i + 1..batch.features.len() {
                if batch.labels[i] == batch.labels[j] && batch.domain_ids[i] != batch.domain_ids[j]
                {
                    pairs.push((&batch.features[i], &batch.features[j]));
                }
            }
        }
        if pairs.is_empty() || !sims_clear_of_kink(&pairs, temperature)? {
            continue;
        }
        let loss = loss_domain_invariance_with_grads(
            &batch.features,
            &batch.labels,
            &batch.domain_ids,
            temperature,
        )?;
        let flat: Vec<f64> = batch
            .features
            .iter()
            .flat_map(|f| f.values().to_vec())
            .collect();
        let analytic = loss.feature_grads.concat();
        let labels = batch.labels.clone();
        let domains = batch.domain_ids.clone();
        let f = move |x: &[f64]| -> Result<f64> {
            let features: Vec<FeatureVector> = x
                .chunks(dim)
                .map(|c| FeatureVector::new(c.to_vec()))
                .collect::<Result<_>>()?;
            loss_domain_invariance(&features, &labels, &domains, temperature).map(|(v, _)| v)
        };
        return check_gradient(f, &flat, &analytic);
    }
    Err(DicsError::Data(
        "could not draw a kink-free invariance instance".into(),
    ))
}

fn check_specificity(rng: &mut ChaCha8Rng, temperature: f64) -> Result<f64> {
    for _ in 0..REDRAW_LIMIT {
        let dim = rng.gen_range(3..=16);
        let batch = random_batch(rng, dim);
        let queue_len = rng.gen_range(4..=32);
        let queue = random_queue(rng, dim, batch.num_classes, queue_len);
        // Soft-label mass on each sample's true class must sit inside the
        // differentiable region.
        let mut ok = true;
        for (feature, label) in batch.features.iter().zip(&batch.labels) {
            let mass = crate::losses::soft_label(feature, &queue, temperature)?
                .values()[label.hot_index().expect("one-hot")];
            if !(1e-6..=1.0 - 1e-9).contains(&mass) {
                ok = false;
                break;
            }
        }
        if !ok {
            continue;
        }
        let loss = loss_class_specificity_with_grads(
            &batch.features,
            &batch.labels,
            &queue,
            temperature,
        )?;
        let flat: Vec<f64> = batch
            .features
            .iter()
            .flat_map(|f| f.values().to_vec())
            .collect();
        let analytic = loss.feature_grads.concat();
        let labels = batch.labels.clone();
        let f = move |x: &[f64]| -> Result<f64> {
            let features: Vec<FeatureVector> = x
                .chunks(dim)
                .map(|c| FeatureVector::new(c.to_vec()))
                .collect::<Result<_>>()?;
            loss_class_specificity(&features, &labels, &queue, temperature)
        };
        return check_gradient(f, &flat, &analytic);
    }
    Err(DicsError::Data(
        "could not draw a kink-free specificity instance".into(),
    ))
}

/// End-to-end combined objective: gradients with respect to every encoder
/// and classifier parameter, through encoding, prototype subtraction, and
/// all three loss terms.
fn check_objective(rng: &mut ChaCha8Rng, temperature: f64) -> Result<f64> {
    'instance: for _ in 0..REDRAW_LIMIT {
        let input_dim = rng.gen_range(3..=6);
        let feature_dim = rng.gen_range(3..=8);
        let batch = random_batch(rng, input_dim);
        let labeled = LabeledBatch::new(
            batch.features.clone(),
            batch.domain_ids.clone(),
            batch.labels.clone(),
        )?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(rng.gen());
        let online = EncoderParams::init(
            input_dim,
            &[rng.gen_range(4..=8)],
            feature_dim,
            Activation::Tanh,
            &mut init_rng,
        );
        let classifier = ClassifierParams::init(batch.num_classes, feature_dim, &mut init_rng);
        let mut prototypes = DomainPrototypeSet::empty(0.1);
        for d in labeled.domains() {
            // Small prototypes keep the class features clearly non-zero.
            prototypes.insert(d, random_feature(rng, feature_dim).scale(0.1));
        }
        let queue_len = rng.gen_range(4..=32);
        let queue = random_queue(rng, feature_dim, batch.num_classes, queue_len);
        let config = TrainConfig {
            alpha: rng.gen_range(0.3..1.5),
            beta: rng.gen_range(0.3..1.5),
            temperature,
            ..TrainConfig::default()
        };

        // Reject instances whose class features sit near a clamp kink for
        // either similarity-log term or the soft-label floor.
        let class_features: Vec<FeatureVector> = labeled
            .features()
            .iter()
            .zip(labeled.domain_ids())
            .map(|(x, d)| {
                let z = crate::model::encode(&online, x.values())?;
                z.sub(prototypes.get(*d).expect("prototype exists"))
            })
            .collect::<Result<_>>()?;
        for i in 0..class_features.len() {
            for j in i + 1..class_features.len() {
                if labeled.labels()[i] == labeled.labels()[j]
                    && labeled.domain_ids()[i] != labeled.domain_ids()[j]
                {
                    let s = similarity(&class_features[i], &class_features[j], temperature)?;
                    if s.abs() < KINK_MARGIN {
                        continue 'instance;
                    }
                }
            }
        }
        for (feature, label) in class_features.iter().zip(labeled.labels()) {
            let mass = crate::losses::soft_label(feature, &queue, temperature)?
                .values()[label.hot_index().expect("one-hot")];
            if !(1e-6..=1.0 - 1e-9).contains(&mass) {
                continue 'instance;
            }
        }

        let objective =
            objective_with_grads(&online, &classifier, &prototypes, &labeled, &queue, &config)?;
        let mut flat = online.flatten();
        let split = flat.len();
        flat.extend(classifier.flatten());
        let mut analytic = objective.encoder_grads.flatten();
        analytic.extend(objective.classifier_grads.flatten());

        let f = move |x: &[f64]| -> Result<f64> {
            let mut enc = online.clone();
            enc.set_from_flat(&x[..split])?;
            let mut cls = classifier.clone();
            cls.set_from_flat(&x[split..])?;
            objective_with_grads(&enc, &cls, &prototypes, &labeled, &queue, &config)
                .map(|o| o.breakdown.total)
        };
        return check_gradient(f, &flat, &analytic);
    }
    Err(DicsError::Data(
        "could not draw a kink-free objective instance".into(),
    ))
}

type InstanceCheck = Box<dyn Fn(&mut ChaCha8Rng, f64) -> Result<f64>>;

/// Run the whole suite; one report per loss, each the max error over
/// `instances_per_loss` random instances.
pub fn run_gradient_suite(seed: u64, instances_per_loss: usize) -> Result<Vec<GradCheckReport>> {
    let temperatures = [0.07, 0.5, 1.0];
    let mut reports = Vec::new();
    let checks: Vec<(&'static str, InstanceCheck)> = vec![
        (
            "loss_classification",
            Box::new(|rng, _| check_classification(rng)),
        ),
        ("loss_domain", Box::new(check_domain)),
        ("loss_domain_invariance", Box::new(check_invariance)),
        ("loss_class_specificity", Box::new(check_specificity)),
        ("combined_objective", Box::new(check_objective)),
    ];
    for (idx, (name, check)) in checks.iter().enumerate() {
        let mut max_err = 0.0f64;
        for i in 0..instances_per_loss {
            let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed, (idx * 10_000 + i) as u64));
            let temperature = temperatures[i % temperatures.len()];
            let err = check(&mut rng, temperature)?;
            max_err = max_err.max(err);
        }
        reports.push(GradCheckReport {
            name,
            instances: instances_per_loss,
            max_rel_error: max_err,
            tolerance: GRAD_TOLERANCE,
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_default_seed() {
        let reports = run_gradient_suite(0, 5).unwrap();
        assert_eq!(reports.len(), 5);
        for r in &reports {
            assert!(
                r.passed(),
                "{} failed: max error {}",
                r.name,
                r.max_rel_error
            );
        }
    }
}
