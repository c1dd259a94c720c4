//! Synthetic multi-domain dataset generation with controllable confounders,
//! CSV ingestion/dump, and the per-domain batch sampler.
//!
//! Each input vector is three concatenated blocks:
//!
//! * causal dims — class-specific Gaussian means; the only signal that stays
//!   valid in every domain,
//! * style dims — a per-domain offset shared by all classes of that domain,
//! * confounder dims — a class signature that tracks the true class with
//!   probability `confounder_correlation` in source domains but is flipped
//!   to another class (or resampled independently) in the target domain.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{DicsError, Result};
use crate::losses::LabeledBatch;
use crate::seeding::{content_hash, mix64};
use crate::tensor::{FeatureVector, ProbVector};

/// Confounder signatures are scaled by this multiple of `class_separation`:
/// the confounder is deliberately the louder, easier signal, the causal
/// block the subtler one a robust model must find.
pub const CONFOUNDER_SIGNATURE_GAIN: f64 = 3.0;

/// How the target domain's confounder block is generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfounderMode {
    /// Confounder points to the next class, `(c + 1) mod C`. Punishes
    /// confounder-reliant models hardest.
    Flip,
    /// Confounder signature drawn uniformly at random, independent of class.
    Resample,
}

/// Generative spec for one synthetic multi-domain dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_domains: usize,
    pub num_classes: usize,
    pub samples_per_domain_class: usize,
    pub causal_dims: usize,
    pub style_dims: usize,
    pub confounder_dims: usize,
    /// Scale of the class means in the causal block and of the class
    /// signatures in the confounder block.
    pub class_separation: f64,
    /// Scale of the per-domain style offset.
    pub style_offset_scale: f64,
    /// Probability that a source-domain confounder tracks the true class.
    pub confounder_correlation: f64,
    pub noise_std: f64,
    /// Domain whose confounder block is decorrelated or flipped.
    pub target_domain: usize,
    pub confounder_mode: ConfounderMode,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn input_dim(&self) -> usize {
        self.causal_dims + self.style_dims + self.confounder_dims
    }

    pub fn causal_range(&self) -> std::ops::Range<usize> {
        0..self.causal_dims
    }

    pub fn style_range(&self) -> std::ops::Range<usize> {
        self.causal_dims..self.causal_dims + self.style_dims
    }

    pub fn confounder_range(&self) -> std::ops::Range<usize> {
        self.causal_dims + self.style_dims..self.input_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim() == 0 {
            return Err(DicsError::InvalidConfig(
                "input dimension split must be non-empty".into(),
            ));
        }
        if self.num_domains < 2 {
            return Err(DicsError::InvalidConfig(
                "need at least two domains (one source, one target)".into(),
            ));
        }
        if self.num_classes < 2 {
            return Err(DicsError::InvalidConfig("need at least two classes".into()));
        }
        if self.samples_per_domain_class == 0 {
            return Err(DicsError::InvalidConfig(
                "samples_per_domain_class must be at least 1".into(),
            ));
        }
        if self.target_domain >= self.num_domains {
            return Err(DicsError::InvalidConfig(format!(
                "target domain {} out of range (have {} domains)",
                self.target_domain, self.num_domains
            )));
        }
        if !(0.0..=1.0).contains(&self.confounder_correlation) {
            return Err(DicsError::InvalidConfig(
                "confounder_correlation must lie in [0, 1]".into(),
            ));
        }
        if self.noise_std < 0.0 || self.class_separation < 0.0 || self.style_offset_scale < 0.0 {
            return Err(DicsError::InvalidConfig(
                "scales must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_domains: 4,
            num_classes: 3,
            samples_per_domain_class: 80,
            causal_dims: 4,
            style_dims: 4,
            confounder_dims: 4,
            class_separation: 1.2,
            style_offset_scale: 1.0,
            confounder_correlation: 0.97,
            noise_std: 0.3,
            target_domain: 3,
            confounder_mode: ConfounderMode::Flip,
            seed: 0,
        }
    }
}

/// Where a dataset came from; synthetic datasets carry the generative
/// vectors so tests can measure confounder/label agreement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DatasetOrigin {
    Synthetic {
        spec: SyntheticSpec,
        domain_offsets: Vec<Vec<f64>>,
        class_means: Vec<Vec<f64>>,
        confounder_signatures: Vec<Vec<f64>>,
    },
    Csv {
        path: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub spec_hash: String,
    pub seed: Option<u64>,
    pub origin: DatasetOrigin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub domain_ids: Vec<usize>,
    pub num_classes: usize,
    pub num_domains: usize,
    pub metadata: DatasetMetadata,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    /// Sorted distinct domain ids that actually have samples.
    pub fn present_domains(&self) -> Vec<usize> {
        let mut out = self.domain_ids.clone();
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn domain_indices(&self, domain: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|i| self.domain_ids[*i] == domain)
            .collect()
    }

    /// Row counts per (domain, class).
    pub fn counts_per_domain_class(&self) -> BTreeMap<(usize, usize), usize> {
        let mut counts = BTreeMap::new();
        for (d, c) in self.domain_ids.iter().zip(&self.labels) {
            *counts.entry((*d, *c)).or_insert(0) += 1;
        }
        counts
    }

    /// Deterministic hash of the full content, for reproducibility checks.
    pub fn content_hash(&self) -> String {
        let mut text = String::new();
        for ((input, label), domain) in self.inputs.iter().zip(&self.labels).zip(&self.domain_ids)
        {
            let _ = write!(text, "{label},{domain}");
            for v in input {
                let _ = write!(text, ",{}", v.to_bits());
            }
            text.push('\n');
        }
        content_hash(text.as_bytes())
    }
}

fn gaussian_vec<R: Rng>(rng: &mut R, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
        .collect()
}

/// `count` pairwise-orthogonal directions of length `scale` (a random
/// orthonormal frame, Gram-Schmidt on Gaussian draws). Keeps class
/// separations identical across seeds instead of leaving them to the luck
/// of random angles. Falls back to independent normalized draws when the
/// dimension cannot hold an orthogonal frame.
fn scaled_frame<R: Rng>(rng: &mut R, count: usize, dim: usize, scale: f64) -> Vec<Vec<f64>> {
    let mut frame: Vec<Vec<f64>> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut v = gaussian_vec(rng, dim, 1.0);
        if count <= dim {
            for prev in &frame {
                let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
                for (x, p) in v.iter_mut().zip(prev) {
                    *x -= dot * p;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-9 {
            let mut unit = vec![0.0; dim];
            if dim > 0 {
                unit[frame.len() % dim.max(1)] = 1.0;
            }
            frame.push(unit);
        } else {
            frame.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    frame
        .into_iter()
        .map(|v| v.into_iter().map(|x| x * scale).collect())
        .collect()
}

/// Generate a dataset; fully deterministic given the spec (including seed).
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let class_means = scaled_frame(
        &mut rng,
        spec.num_classes,
        spec.causal_dims,
        spec.class_separation,
    );
    let domain_offsets: Vec<Vec<f64>> = (0..spec.num_domains)
        .map(|_| gaussian_vec(&mut rng, spec.style_dims, spec.style_offset_scale))
        .collect();
    let confounder_signatures = scaled_frame(
        &mut rng,
        spec.num_classes,
        spec.confounder_dims,
        CONFOUNDER_SIGNATURE_GAIN * spec.class_separation,
    );

    let n = spec.num_domains * spec.num_classes * spec.samples_per_domain_class;
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut domain_ids = Vec::with_capacity(n);
    for (domain, offsets) in domain_offsets.iter().enumerate() {
        for (class, means) in class_means.iter().enumerate() {
            for _ in 0..spec.samples_per_domain_class {
                let mut row = Vec::with_capacity(spec.input_dim());
                for mean in means {
                    row.push(mean + rng.sample::<f64, _>(StandardNormal) * spec.noise_std);
                }
                for offset in offsets {
                    row.push(offset + rng.sample::<f64, _>(StandardNormal) * spec.noise_std);
                }
                let signature_class = if domain == spec.target_domain {
                    match spec.confounder_mode {
                        ConfounderMode::Flip => (class + 1) % spec.num_classes,
                        ConfounderMode::Resample => rng.gen_range(0..spec.num_classes),
                    }
                } else if rng.gen::<f64>() < spec.confounder_correlation {
                    class
                } else {
                    rng.gen_range(0..spec.num_classes)
                };
                for sig in &confounder_signatures[signature_class] {
                    row.push(sig + rng.sample::<f64, _>(StandardNormal) * spec.noise_std);
                }
                inputs.push(row);
                labels.push(class);
                domain_ids.push(domain);
            }
        }
    }

    let spec_hash = content_hash(serde_json::to_string(spec)?.as_bytes());
    Ok(Dataset {
        inputs,
        labels,
        domain_ids,
        num_classes: spec.num_classes,
        num_domains: spec.num_domains,
        metadata: DatasetMetadata {
            spec_hash,
            seed: Some(spec.seed),
            origin: DatasetOrigin::Synthetic {
                spec: spec.clone(),
                domain_offsets,
                class_means,
                confounder_signatures,
            },
        },
    })
}

/// Normalized agreement between a domain's confounder blocks and its labels:
/// 0 means chance-level, 1 means the nearest signature always matches the
/// label. Requires synthetic metadata.
pub fn confounder_label_correlation(dataset: &Dataset, domain: usize) -> Result<f64> {
    let (spec, signatures) = match &dataset.metadata.origin {
        DatasetOrigin::Synthetic {
            spec,
            confounder_signatures,
            ..
        } => (spec, confounder_signatures),
        DatasetOrigin::Csv { .. } => {
            return Err(DicsError::Data(
                "confounder correlation requires synthetic metadata".into(),
            ))
        }
    };
    let indices = dataset.domain_indices(domain);
    if indices.is_empty() {
        return Err(DicsError::Data(format!("domain {domain} has no samples")));
    }
    let range = spec.confounder_range();
    let mut agree = 0usize;
    for &i in &indices {
        let block = &dataset.inputs[i][range.clone()];
        let mut best = 0usize;
        let mut best_dist = f64::INFINITY;
        for (k, sig) in signatures.iter().enumerate() {
            let dist: f64 = block
                .iter()
                .zip(sig)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if dist < best_dist {
                best_dist = dist;
                best = k;
            }
        }
        if best == dataset.labels[i] {
            agree += 1;
        }
    }
    let agreement = agree as f64 / indices.len() as f64;
    let chance = 1.0 / dataset.num_classes as f64;
    Ok((agreement - chance) / (1.0 - chance))
}

/// Write `label,domain,f0..` CSV plus a `<path>.meta.json` sidecar.
pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut text = String::from("label,domain");
    for k in 0..dataset.input_dim() {
        let _ = write!(text, ",f{k}");
    }
    text.push('\n');
    for ((input, label), domain) in dataset
        .inputs
        .iter()
        .zip(&dataset.labels)
        .zip(&dataset.domain_ids)
    {
        let _ = write!(text, "{label},{domain}");
        for v in input {
            let _ = write!(text, ",{v}");
        }
        text.push('\n');
    }
    std::fs::write(path, text)?;
    let sidecar = path.with_file_name(format!(
        "{}.meta.json",
        path.file_name().map_or_else(String::new, |n| n
            .to_string_lossy()
            .into_owned())
    ));
    std::fs::write(sidecar, serde_json::to_string_pretty(&dataset.metadata)?)?;
    Ok(())
}

/// Parse a CSV with a header row naming `label` and `domain`; every other
/// column is a numeric feature. Malformed rows are reported with their line
/// number; NaN/Inf features are rejected.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| DicsError::Data("no data".into()))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    let label_col = columns
        .iter()
        .position(|c| *c == "label")
        .ok_or_else(|| DicsError::Data("missing required column `label`".into()))?;
    let domain_col = columns
        .iter()
        .position(|c| *c == "domain")
        .ok_or_else(|| DicsError::Data("missing required column `domain`".into()))?;
    let feature_cols: Vec<usize> = (0..columns.len())
        .filter(|i| *i != label_col && *i != domain_col)
        .collect();

    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    let mut domain_ids = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != columns.len() {
            return Err(DicsError::Data(format!(
                "line {line_no}: expected {} columns, got {}",
                columns.len(),
                cells.len()
            )));
        }
        let label: usize = cells[label_col].parse().map_err(|_| {
            DicsError::Data(format!(
                "line {line_no}: unknown label `{}`",
                cells[label_col]
            ))
        })?;
        let domain: usize = cells[domain_col].parse().map_err(|_| {
            DicsError::Data(format!(
                "line {line_no}: invalid domain `{}`",
                cells[domain_col]
            ))
        })?;
        let mut row = Vec::with_capacity(feature_cols.len());
        for &col in &feature_cols {
            let v: f64 = cells[col].parse().map_err(|_| {
                DicsError::Data(format!(
                    "line {line_no}: non-numeric feature `{}` in column `{}`",
                    cells[col], columns[col]
                ))
            })?;
            if !v.is_finite() {
                return Err(DicsError::Data(format!(
                    "line {line_no}: non-finite feature in column `{}`",
                    columns[col]
                )));
            }
            row.push(v);
        }
        inputs.push(row);
        labels.push(label);
        domain_ids.push(domain);
    }
    if inputs.is_empty() {
        return Err(DicsError::Data("no data".into()));
    }
    let num_classes = labels.iter().max().copied().unwrap_or(0) + 1;
    let num_domains = domain_ids.iter().max().copied().unwrap_or(0) + 1;
    let spec_hash = content_hash(text.as_bytes());
    Ok(Dataset {
        inputs,
        labels,
        domain_ids,
        num_classes,
        num_domains,
        metadata: DatasetMetadata {
            spec_hash,
            seed: None,
            origin: DatasetOrigin::Csv {
                path: path.to_string_lossy().into_owned(),
            },
        },
    })
}

/// Per-epoch stream of balanced batches: each batch holds exactly
/// `batch_per_domain` samples from every included domain, sampled without
/// replacement within an epoch and reshuffled per epoch.
pub struct BatchSampler<'a> {
    dataset: &'a Dataset,
    per_domain: BTreeMap<usize, Vec<usize>>,
    batch_per_domain: usize,
    seed: u64,
}

impl<'a> BatchSampler<'a> {
    /// Sample from the whole dataset, optionally excluding one domain.
    pub fn new(
        dataset: &'a Dataset,
        batch_per_domain: usize,
        seed: u64,
        exclude_domain: Option<usize>,
    ) -> Result<Self> {
        let mut per_domain: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for d in dataset.present_domains() {
            if Some(d) == exclude_domain {
                continue;
            }
            per_domain.insert(d, dataset.domain_indices(d));
        }
        Self::with_indices(dataset, per_domain, batch_per_domain, seed)
    }

    /// Sample from an explicit per-domain index subset (e.g. a train split).
    pub fn with_indices(
        dataset: &'a Dataset,
        per_domain: BTreeMap<usize, Vec<usize>>,
        batch_per_domain: usize,
        seed: u64,
    ) -> Result<Self> {
        if batch_per_domain == 0 {
            return Err(DicsError::InvalidConfig(
                "batch_per_domain must be at least 1".into(),
            ));
        }
        if per_domain.is_empty() {
            return Err(DicsError::Data("no domains to sample from".into()));
        }
        for (d, idxs) in &per_domain {
            if idxs.len() < batch_per_domain {
                return Err(DicsError::Data(format!(
                    "domain {d} has {} samples, need at least {batch_per_domain}",
                    idxs.len()
                )));
            }
        }
        Ok(Self {
            dataset,
            per_domain,
            batch_per_domain,
            seed,
        })
    }

    pub fn included_domains(&self) -> Vec<usize> {
        self.per_domain.keys().copied().collect()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.per_domain
            .values()
            .map(|idxs| idxs.len() / self.batch_per_domain)
            .min()
            .unwrap_or(0)
    }

    /// The batch sequence for one epoch; a pure function of (seed, epoch).
    pub fn epoch(&self, epoch: usize) -> Vec<LabeledBatch> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(self.seed, epoch as u64));
        let shuffled: BTreeMap<usize, Vec<usize>> = self
            .per_domain
            .iter()
            .map(|(d, idxs)| {
                let mut copy = idxs.clone();
                copy.shuffle(&mut rng);
                (*d, copy)
            })
            .collect();
        let count = self.batches_per_epoch();
        let mut batches = Vec::with_capacity(count);
        for b in 0..count {
            let mut features = Vec::new();
            let mut domains = Vec::new();
            let mut labels = Vec::new();
            for (d, idxs) in &shuffled {
                for &i in &idxs[b * self.batch_per_domain..(b + 1) * self.batch_per_domain] {
                    features.push(FeatureVector::from_raw(self.dataset.inputs[i].clone()));
                    domains.push(*d);
                    labels.push(
                        ProbVector::one_hot(self.dataset.labels[i], self.dataset.num_classes)
                            .expect("dataset labels are in range"),
                    );
                }
            }
            batches.push(
                LabeledBatch::new(features, domains, labels)
                    .expect("sampler emits balanced batches"),
            );
        }
        batches
    }
}
