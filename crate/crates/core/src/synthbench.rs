//! Synthetic domain-shift benchmark and the CSV feature-dump format.
//!
//! Source classes are isotropic Gaussians; the target copy of each class is
//! shifted in mean and inflated in spread. Target labels are generated but
//! only reachable through [`DatasetPair::hidden_labels`], which the trainer
//! never receives.
//!
//! Dump format (UTF-8 CSV): header `label,score,f0,…,f{d-1}`, `-1` for a
//! missing label or score, floats written in shortest round-trip form.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{PacfError, Result};
use crate::mathcore::{l2_normalize, FeatureVector};
use crate::rng::{self, stream};

/// Per-class target mean shift: one magnitude along a seeded random
/// direction per class, or explicit vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanShift {
    Magnitude(f64),
    Vectors(Vec<Vec<f64>>),
}

/// Source class means: drawn as `N(0, scale² I)` per class, or explicit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceMeans {
    Random { scale: f64 },
    Explicit(Vec<Vec<f64>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainShiftSpec {
    pub class_count: usize,
    pub dim: usize,
    pub source_means: SourceMeans,
    pub source_std: f64,
    pub target_mean_shift: MeanShift,
    pub target_std_multiplier: f64,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl Default for DomainShiftSpec {
    /// Eight classes in 32 dimensions, 200 samples per class and domain,
    /// shift `1.5 · source_std`, spread multiplier 1.8.
    fn default() -> Self {
        DomainShiftSpec {
            class_count: 8,
            dim: 32,
            source_means: SourceMeans::Random { scale: 1.0 },
            source_std: 1.0,
            target_mean_shift: MeanShift::Magnitude(1.5),
            target_std_multiplier: 1.8,
            samples_per_class: 200,
            seed: 0,
        }
    }
}

impl DomainShiftSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PacfError::InvalidSpec(m));
        if self.class_count < 1 {
            return bad("class_count must be >= 1".into());
        }
        if self.dim < 2 {
            return bad("dim must be >= 2".into());
        }
        if !(self.source_std.is_finite() && self.source_std > 0.0) {
            return bad(format!("source_std {} must be > 0", self.source_std));
        }
        if !(self.target_std_multiplier.is_finite() && self.target_std_multiplier >= 1.0) {
            return bad(format!(
                "target_std_multiplier {} must be >= 1",
                self.target_std_multiplier
            ));
        }
        if self.samples_per_class < 1 {
            return bad("samples_per_class must be >= 1".into());
        }
        let check_vectors = |name: &str, vs: &[Vec<f64>]| -> Result<()> {
            if vs.len() != self.class_count || vs.iter().any(|v| v.len() != self.dim) {
                return Err(PacfError::InvalidSpec(format!(
                    "{name} must hold {} vectors of dimension {}",
                    self.class_count, self.dim
                )));
            }
            if vs.iter().flatten().any(|v| !v.is_finite()) {
                return Err(PacfError::InvalidSpec(format!(
                    "{name} has non-finite entries"
                )));
            }
            Ok(())
        };
        match &self.source_means {
            SourceMeans::Random { scale } if !(scale.is_finite() && *scale >= 0.0) => {
                return bad(format!("source mean scale {scale} must be >= 0"));
            }
            SourceMeans::Explicit(vs) => check_vectors("source_means", vs)?,
            _ => {}
        }
        match &self.target_mean_shift {
            MeanShift::Magnitude(m) if !m.is_finite() => {
                return bad("shift magnitude must be finite".into());
            }
            MeanShift::Vectors(vs) => check_vectors("target_mean_shift", vs)?,
            _ => {}
        }
        Ok(())
    }

    /// Class means of the source domain.
    pub fn resolved_source_means(&self) -> Vec<Vec<f64>> {
        match &self.source_means {
            SourceMeans::Explicit(vs) => vs.clone(),
            SourceMeans::Random { scale } => {
                let mut r = rng::derive(self.seed, stream::SOURCE_MEANS, 0);
                (0..self.class_count)
                    .map(|_| gaussian_vec(&mut r, self.dim, *scale))
                    .collect()
            }
        }
    }

    /// Per-class target shift vectors.
    pub fn resolved_shifts(&self) -> Result<Vec<Vec<f64>>> {
        match &self.target_mean_shift {
            MeanShift::Vectors(vs) => Ok(vs.clone()),
            MeanShift::Magnitude(m) => {
                let mut r = rng::derive(self.seed, stream::TARGET_SHIFT, 0);
                (0..self.class_count)
                    .map(|_| {
                        let dir = l2_normalize(&gaussian_vec(&mut r, self.dim, 1.0))?;
                        Ok(dir.into_iter().map(|v| v * m).collect())
                    })
                    .collect()
            }
        }
    }
}

fn gaussian_vec(r: &mut rng::Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| scale * r.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Feature vectors with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub features: Vec<FeatureVector>,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// What the trainer sees: labeled source, unlabeled target.
#[derive(Clone, Copy, Debug)]
pub struct TrainingView<'a> {
    pub source: &'a LabeledBatch,
    pub target: &'a [FeatureVector],
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetPair {
    source: LabeledBatch,
    target_features: Vec<FeatureVector>,
    target_hidden_labels: Vec<usize>,
}

impl DatasetPair {
    pub fn new(
        source: LabeledBatch,
        target_features: Vec<FeatureVector>,
        target_hidden_labels: Vec<usize>,
    ) -> Result<Self> {
        crate::error::ensure_same_len(source.features.len(), source.labels.len())?;
        crate::error::ensure_same_len(target_features.len(), target_hidden_labels.len())?;
        Ok(DatasetPair {
            source,
            target_features,
            target_hidden_labels,
        })
    }

    pub fn training_view(&self) -> TrainingView<'_> {
        TrainingView {
            source: &self.source,
            target: &self.target_features,
        }
    }

    pub fn source(&self) -> &LabeledBatch {
        &self.source
    }

    pub fn target_features(&self) -> &[FeatureVector] {
        &self.target_features
    }

    /// Ground-truth target labels, for evaluation only.
    pub fn hidden_labels(&self) -> &[usize] {
        &self.target_hidden_labels
    }
}

/// Draws a dataset pair. Pure in `spec`, seed included.
pub fn generate(spec: &DomainShiftSpec) -> Result<DatasetPair> {
    spec.validate()?;
    let means = spec.resolved_source_means();
    let shifts = spec.resolved_shifts()?;
    let n = spec.samples_per_class;
    let target_std = spec.source_std * spec.target_std_multiplier;

    let mut src_rng = rng::derive(spec.seed, stream::SOURCE_SAMPLES, 0);
    let mut tgt_rng = rng::derive(spec.seed, stream::TARGET_SAMPLES, 0);
    let mut src_features = Vec::with_capacity(n * spec.class_count);
    let mut src_labels = Vec::with_capacity(n * spec.class_count);
    let mut tgt_features = Vec::with_capacity(n * spec.class_count);
    let mut tgt_labels = Vec::with_capacity(n * spec.class_count);
    // interleave classes so that contiguous slices are class-balanced
    for _ in 0..n {
        for k in 0..spec.class_count {
            let s: Vec<f64> = means[k]
                .iter()
                .map(|m| m + spec.source_std * src_rng.sample::<f64, _>(StandardNormal))
                .collect();
            src_features.push(FeatureVector::new(s)?);
            src_labels.push(k);

            let t: Vec<f64> = means[k]
                .iter()
                .zip(&shifts[k])
                .map(|(m, d)| m + d + target_std * tgt_rng.sample::<f64, _>(StandardNormal))
                .collect();
            tgt_features.push(FeatureVector::new(t)?);
            tgt_labels.push(k);
        }
    }
    DatasetPair::new(
        LabeledBatch {
            features: src_features,
            labels: src_labels,
        },
        tgt_features,
        tgt_labels,
    )
}

/// One row of a feature dump.
#[derive(Clone, Debug, PartialEq)]
pub struct DumpRow {
    pub label: Option<usize>,
    pub score: Option<f64>,
    pub features: FeatureVector,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureDump {
    pub rows: Vec<DumpRow>,
}

impl FeatureDump {
    pub fn labeled(batch: &LabeledBatch) -> Self {
        FeatureDump {
            rows: batch
                .features
                .iter()
                .zip(&batch.labels)
                .map(|(f, &l)| DumpRow {
                    label: Some(l),
                    score: None,
                    features: f.clone(),
                })
                .collect(),
        }
    }

    pub fn unlabeled(features: &[FeatureVector]) -> Self {
        FeatureDump {
            rows: features
                .iter()
                .map(|f| DumpRow {
                    label: None,
                    score: None,
                    features: f.clone(),
                })
                .collect(),
        }
    }

    pub fn dim(&self) -> Option<usize> {
        self.rows.first().map(|r| r.features.dim())
    }

    pub fn features(&self) -> Vec<FeatureVector> {
        self.rows.iter().map(|r| r.features.clone()).collect()
    }

    /// Labels of every row, failing on the first unlabeled one.
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                r.label
                    .ok_or_else(|| PacfError::InvalidSpec(format!("row {i} has no label")))
            })
            .collect()
    }

    pub fn to_labeled(&self) -> Result<LabeledBatch> {
        Ok(LabeledBatch {
            features: self.features(),
            labels: self.labels()?,
        })
    }

    pub fn write_to<W: Write>(&self, writer: W) -> Result<()> {
        let dim = self.dim().unwrap_or(0);
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["label".to_string(), "score".to_string()];
        header.extend((0..dim).map(|i| format!("f{i}")));
        w.write_record(&header).map_err(csv_io)?;
        for row in &self.rows {
            crate::error::ensure_same_len(dim, row.features.dim())?;
            let mut rec = Vec::with_capacity(dim + 2);
            rec.push(row.label.map_or("-1".to_string(), |l| l.to_string()));
            rec.push(row.score.map_or("-1".to_string(), format_float));
            rec.extend(row.features.iter().map(|v| format_float(*v)));
            w.write_record(&rec).map_err(csv_io)?;
        }
        w.flush().map_err(|e| PacfError::io("<writer>", e))?;
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> PacfError {
    PacfError::io("<csv>", std::io::Error::other(e.to_string()))
}

/// Shortest decimal form that parses back to the same `f64`.
pub fn format_float(v: f64) -> String {
    format!("{v:?}")
}

pub fn save_dump(dump: &FeatureDump, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| PacfError::io(path, e))?;
    let mut buf = BufWriter::new(file);
    dump.write_to(&mut buf).map_err(|e| match e {
        PacfError::Io { source, .. } => PacfError::io(path, source),
        other => other,
    })?;
    buf.flush().map_err(|e| PacfError::io(path, e))
}

pub fn load_dump(path: &Path) -> Result<FeatureDump> {
    let file = File::open(path).map_err(|e| PacfError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(file);
    let parse_err = |line: u64, reason: String| PacfError::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };

    let mut records = reader.records();
    let header = match records.next() {
        None => return Err(PacfError::EmptyBatch),
        Some(h) => h.map_err(|e| parse_err(1, e.to_string()))?,
    };
    if header.len() < 3 || &header[0] != "label" || &header[1] != "score" {
        return Err(parse_err(1, "header must start with label,score,f0".into()));
    }
    for (i, name) in header.iter().skip(2).enumerate() {
        if name != format!("f{i}") {
            return Err(parse_err(1, format!("unexpected column name {name:?}")));
        }
    }
    let width = header.len();

    let mut rows = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != width {
            return Err(parse_err(
                line,
                format!("expected {width} columns, found {}", rec.len()),
            ));
        }
        let label: i64 = rec[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("bad label {:?}", &rec[0])))?;
        let label = match label {
            -1 => None,
            l if l >= 0 => Some(l as usize),
            l => return Err(parse_err(line, format!("bad label {l}"))),
        };
        let score: f64 = rec[1]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("bad score {:?}", &rec[1])))?;
        let score = if score == -1.0 {
            None
        } else if (0.0..=1.0).contains(&score) {
            Some(score)
        } else {
            return Err(parse_err(line, format!("score {score} outside [0, 1]")));
        };
        let values = rec
            .iter()
            .skip(2)
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| parse_err(line, e.to_string()))?;
        let features = FeatureVector::new(values).map_err(|e| parse_err(line, e.to_string()))?;
        rows.push(DumpRow {
            label,
            score,
            features,
        });
    }
    if rows.is_empty() {
        return Err(PacfError::EmptyBatch);
    }
    Ok(FeatureDump { rows })
}
