//! Per-domain class prototypes: thresholded initialization and the
//! cosine-weighted moving-average update.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_len, PacfError, Result};
use crate::mathcore::{cosine_similarity, l2_normalize, FeatureVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::Source => f.write_str("source"),
            Domain::Target => f.write_str("target"),
        }
    }
}

/// Features with class labels and per-instance confidence scores.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredFeatureBatch {
    features: Vec<FeatureVector>,
    labels: Vec<usize>,
    scores: Vec<f64>,
}

impl ScoredFeatureBatch {
    pub fn new(features: Vec<FeatureVector>, labels: Vec<usize>, scores: Vec<f64>) -> Result<Self> {
        ensure_same_len(features.len(), labels.len())?;
        ensure_same_len(features.len(), scores.len())?;
        if let Some(first) = features.first() {
            for f in &features {
                ensure_same_len(first.dim(), f.dim())?;
            }
        }
        if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(PacfError::InvalidSpec(format!("score {s} outside [0, 1]")));
        }
        Ok(ScoredFeatureBatch {
            features,
            labels,
            scores,
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

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }
}

/// Unit-norm prototypes for classes `0..class_count` of one domain.
///
/// A class stays uninitialized until it receives its first qualifying feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PrototypeSetDoc", into = "PrototypeSetDoc")]
pub struct PrototypeSet {
    domain: Domain,
    dim: usize,
    prototypes: Vec<Option<Vec<f64>>>,
}

/// On-disk layout: `{domain, dim, class_count, prototypes: {class_id: [floats]}}`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PrototypeSetDoc {
    domain: Domain,
    dim: usize,
    class_count: usize,
    prototypes: BTreeMap<usize, Vec<f64>>,
}

impl From<PrototypeSet> for PrototypeSetDoc {
    fn from(set: PrototypeSet) -> Self {
        PrototypeSetDoc {
            domain: set.domain,
            dim: set.dim,
            class_count: set.prototypes.len(),
            prototypes: set
                .prototypes
                .into_iter()
                .enumerate()
                .filter_map(|(k, p)| p.map(|p| (k, p)))
                .collect(),
        }
    }
}

impl TryFrom<PrototypeSetDoc> for PrototypeSet {
    type Error = PacfError;

    fn try_from(doc: PrototypeSetDoc) -> Result<Self> {
        let mut set = PrototypeSet::new(doc.domain, doc.class_count, doc.dim);
        for (k, p) in doc.prototypes {
            set.check_class(k)?;
            ensure_same_len(doc.dim, p.len())?;
            let n = crate::mathcore::norm(&p);
            if (n - 1.0).abs() > 1e-9 {
                return Err(PacfError::InvalidSpec(format!(
                    "prototype {k} has norm {n}, expected 1"
                )));
            }
            set.prototypes[k] = Some(p);
        }
        Ok(set)
    }
}

impl PrototypeSet {
    pub fn new(domain: Domain, class_count: usize, dim: usize) -> Self {
        PrototypeSet {
            domain,
            dim,
            prototypes: vec![None; class_count],
        }
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_count(&self) -> usize {
        self.prototypes.len()
    }

    pub fn get(&self, class: usize) -> Result<&[f64]> {
        self.check_class(class)?;
        self.prototypes[class]
            .as_deref()
            .ok_or(PacfError::UninitializedPrototype(class))
    }

    pub fn is_initialized(&self, class: usize) -> bool {
        self.prototypes.get(class).is_some_and(Option::is_some)
    }

    pub fn is_fully_initialized(&self) -> bool {
        self.prototypes.iter().all(Option::is_some)
    }

    /// Stores `l2_normalize(vector)` as the prototype of `class`.
    pub fn set(&mut self, class: usize, vector: &[f64]) -> Result<()> {
        self.check_class(class)?;
        ensure_same_len(self.dim, vector.len())?;
        self.prototypes[class] = Some(l2_normalize(vector)?);
        Ok(())
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.prototypes.len() {
            return Err(PacfError::ClassOutOfRange {
                class,
                class_count: self.prototypes.len(),
            });
        }
        Ok(())
    }

    /// Applies one moving-average update per class present in the batch.
    ///
    /// Absent classes are left untouched. Uninitialized classes take the
    /// normalized minibatch mean directly.
    pub fn update_all<F: AsRef<[f64]>>(&mut self, features: &[F], labels: &[usize]) -> Result<()> {
        if features.is_empty() {
            ensure_same_len(0, labels.len())?;
            return Ok(());
        }
        for &k in labels {
            self.check_class(k)?;
        }
        let means = minibatch_prototypes(features, labels)?;
        for (k, mean) in means {
            ensure_same_len(self.dim, mean.len())?;
            let next = match &self.prototypes[k] {
                Some(prev) => update_prototype(prev, &mean)?,
                None => l2_normalize(&mean)?,
            };
            self.prototypes[k] = Some(next);
        }
        Ok(())
    }
}

/// Per-class normalized mean of the features scoring at least `threshold`.
pub fn initialize_prototypes(
    batch: &ScoredFeatureBatch,
    threshold: f64,
    domain: Domain,
    class_count: usize,
) -> Result<PrototypeSet> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(PacfError::InvalidThreshold(threshold));
    }
    if batch.is_empty() {
        return Err(PacfError::EmptyBatch);
    }
    let dim = batch.features[0].dim();
    let mut sums = vec![vec![0.0; dim]; class_count];
    let mut counts = vec![0usize; class_count];
    for ((x, &k), &score) in batch.features.iter().zip(&batch.labels).zip(&batch.scores) {
        if k >= class_count {
            return Err(PacfError::ClassOutOfRange {
                class: k,
                class_count,
            });
        }
        if score >= threshold {
            for (s, v) in sums[k].iter_mut().zip(x.iter()) {
                *s += v;
            }
            counts[k] += 1;
        }
    }
    let mut set = PrototypeSet::new(domain, class_count, dim);
    for (k, (sum, n)) in sums.iter().zip(&counts).enumerate() {
        if *n > 0 {
            let mean: Vec<f64> = sum.iter().map(|s| s / *n as f64).collect();
            set.set(k, &mean)?;
        }
    }
    Ok(set)
}

/// Arithmetic mean of the features of each class present in the batch.
pub fn minibatch_prototypes<F: AsRef<[f64]>>(
    features: &[F],
    labels: &[usize],
) -> Result<BTreeMap<usize, Vec<f64>>> {
    ensure_same_len(features.len(), labels.len())?;
    if features.is_empty() {
        return Err(PacfError::EmptyBatch);
    }
    let dim = features[0].as_ref().len();
    let mut acc: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (x, &k) in features.iter().zip(labels) {
        let x = x.as_ref();
        ensure_same_len(dim, x.len())?;
        let entry = acc.entry(k).or_insert_with(|| (vec![0.0; dim], 0));
        for (s, v) in entry.0.iter_mut().zip(x) {
            *s += v;
        }
        entry.1 += 1;
    }
    Ok(acc
        .into_iter()
        .map(|(k, (sum, n))| (k, sum.into_iter().map(|s| s / n as f64).collect()))
        .collect())
}

/// Blend weight `(cos(prev, mean) + 1) / 2`.
pub fn blend_weight(prev: &[f64], minibatch_mean: &[f64]) -> Result<f64> {
    Ok((cosine_similarity(prev, minibatch_mean)? + 1.0) / 2.0)
}

/// `normalize((1 − α) prev + α mean)` with `α` from [`blend_weight`].
///
/// The minibatch mean is blended unnormalized.
pub fn update_prototype(prev: &[f64], minibatch_mean: &[f64]) -> Result<Vec<f64>> {
    let alpha = blend_weight(prev, minibatch_mean)?;
    let blended: Vec<f64> = prev
        .iter()
        .zip(minibatch_mean)
        .map(|(p, m)| (1.0 - alpha) * p + alpha * m)
        .collect();
    l2_normalize(&blended)
}
