//! Distribution diagnostics: per-class spread and mean shift, proxy
//! A-distance, rank agreement, pseudo-label precision and a PCA projection.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_len, PacfError, Result};
use crate::mathcore::sigmoid;
use crate::rng::{self, stream};

fn group_by_class<'a, F: AsRef<[f64]>>(
    features: &'a [F],
    labels: &[usize],
) -> Result<BTreeMap<usize, Vec<&'a [f64]>>> {
    ensure_same_len(features.len(), labels.len())?;
    let mut groups: BTreeMap<usize, Vec<&[f64]>> = BTreeMap::new();
    for (f, &k) in features.iter().zip(labels) {
        groups.entry(k).or_default().push(f.as_ref());
    }
    Ok(groups)
}

fn mean_of(rows: &[&[f64]]) -> Vec<f64> {
    let dim = rows[0].len();
    let mut m = vec![0.0; dim];
    for r in rows {
        for (a, v) in m.iter_mut().zip(r.iter()) {
            *a += v;
        }
    }
    let n = rows.len() as f64;
    m.iter_mut().for_each(|a| *a /= n);
    m
}

/// Trace of the unbiased sample covariance per class.
///
/// Classes with fewer than two samples are omitted.
pub fn intra_class_variance<F: AsRef<[f64]> + Sync>(
    features: &[F],
    labels: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    let groups = group_by_class(features, labels)?;
    Ok(groups
        .into_par_iter()
        .filter(|(_, rows)| rows.len() >= 2)
        .map(|(k, rows)| {
            let m = mean_of(&rows);
            let ss: f64 = rows
                .iter()
                .map(|r| {
                    r.iter()
                        .zip(&m)
                        .map(|(v, mu)| (v - mu) * (v - mu))
                        .sum::<f64>()
                })
                .sum();
            (k, ss / (rows.len() - 1) as f64)
        })
        .collect())
}

/// Euclidean distance between the source and target mean of each class
/// present in both domains.
pub fn mean_shift<F: AsRef<[f64]> + Sync>(
    source: &[F],
    source_labels: &[usize],
    target: &[F],
    target_labels: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    let src = group_by_class(source, source_labels)?;
    let tgt = group_by_class(target, target_labels)?;
    src.into_par_iter()
        .filter_map(|(k, rows)| tgt.get(&k).map(|t| (k, rows, t)))
        .map(|(k, rows, t)| {
            let ms = mean_of(&rows);
            let mt = mean_of(t);
            ensure_same_len(ms.len(), mt.len())?;
            let d = ms
                .iter()
                .zip(&mt)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
            Ok((k, d.sqrt()))
        })
        .collect()
}

/// Unweighted mean of the per-class values, `None` when empty.
pub fn class_average(values: &BTreeMap<usize, f64>) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.values().sum::<f64>() / values.len() as f64)
    }
}

/// Minimum number of samples per domain for [`proxy_a_distance`].
pub const PAD_MIN_SAMPLES: usize = 20;

const PAD_L2: f64 = 1e-2;
const PAD_NEWTON_STEPS: usize = 50;

/// Proxy A-distance `2 (1 − ε)` of a logistic domain classifier.
///
/// Each domain is shuffled with `seed` and split in halves; the classifier is
/// fit on the first halves (standardized features, ridge-regularized Newton
/// iterations) and `ε` is its error on the second halves.
pub fn proxy_a_distance<F: AsRef<[f64]>>(source: &[F], target: &[F], seed: u64) -> Result<f64> {
    for n in [source.len(), target.len()] {
        if n < PAD_MIN_SAMPLES {
            return Err(PacfError::InsufficientSamples {
                needed: PAD_MIN_SAMPLES,
                got: n,
            });
        }
    }
    let dim = source[0].as_ref().len();
    for f in source.iter().chain(target) {
        ensure_same_len(dim, f.as_ref().len())?;
    }

    let split = |n: usize, index: u64| {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng::derive(seed, stream::DOMAIN_SPLIT, index));
        let half = n / 2;
        let test = idx.split_off(half);
        (idx, test)
    };
    let (src_train, src_test) = split(source.len(), 0);
    let (tgt_train, tgt_test) = split(target.len(), 1);

    let train: Vec<(&[f64], f64)> = src_train
        .iter()
        .map(|&i| (source[i].as_ref(), 0.0))
        .chain(tgt_train.iter().map(|&i| (target[i].as_ref(), 1.0)))
        .collect();
    let test: Vec<(&[f64], f64)> = src_test
        .iter()
        .map(|&i| (source[i].as_ref(), 0.0))
        .chain(tgt_test.iter().map(|&i| (target[i].as_ref(), 1.0)))
        .collect();

    let mut mean = vec![0.0; dim];
    for (x, _) in &train {
        for (m, v) in mean.iter_mut().zip(x.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    let mut scale = vec![0.0; dim];
    for (x, _) in &train {
        for ((s, v), m) in scale.iter_mut().zip(x.iter()).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    scale
        .iter_mut()
        .for_each(|s| *s = (*s / train.len() as f64).sqrt().max(1e-12));
    let standardize = |x: &[f64]| -> DVector<f64> {
        let mut v = DVector::from_element(dim + 1, 1.0);
        for j in 0..dim {
            v[j] = (x[j] - mean[j]) / scale[j];
        }
        v
    };
    let train_x: Vec<DVector<f64>> = train.iter().map(|(x, _)| standardize(x)).collect();

    let p = dim + 1;
    let mut w = DVector::<f64>::zeros(p);
    for _ in 0..PAD_NEWTON_STEPS {
        let mut grad = DVector::<f64>::zeros(p);
        let mut hess = DMatrix::<f64>::zeros(p, p);
        for (x, (_, y)) in train_x.iter().zip(&train) {
            let s = sigmoid(w.dot(x));
            grad.axpy(s - y, x, 1.0);
            hess.ger(s * (1.0 - s), x, x, 1.0);
        }
        let n = train_x.len() as f64;
        grad /= n;
        hess /= n;
        for j in 0..dim {
            grad[j] += PAD_L2 * w[j];
            hess[(j, j)] += PAD_L2;
        }
        hess[(dim, dim)] += 1e-9;
        let step = match hess.cholesky() {
            Some(ch) => ch.solve(&grad),
            None => break,
        };
        w -= &step;
        if step.amax() < 1e-10 {
            break;
        }
    }

    let errors = test
        .iter()
        .filter(|(x, y)| {
            let predicted = if w.dot(&standardize(x)) > 0.0 {
                1.0
            } else {
                0.0
            };
            predicted != *y
        })
        .count();
    let eps = errors as f64 / test.len() as f64;
    Ok(proxy_a_distance_from_error(eps))
}

/// `2 (1 − ε)` clamped to `[0, 2]`.
pub fn proxy_a_distance_from_error(eps: f64) -> f64 {
    (2.0 * (1.0 - eps)).clamp(0.0, 2.0)
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn check_pair(xs: &[f64], ys: &[f64]) -> Result<()> {
    ensure_same_len(xs.len(), ys.len())?;
    if xs.len() < 2 {
        return Err(PacfError::InsufficientSamples {
            needed: 2,
            got: xs.len(),
        });
    }
    Ok(())
}

/// Spearman's ρ: Pearson correlation of the average ranks.
///
/// Zero when either input is constant.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

fn sign(d: f64) -> i64 {
    if d > 0.0 {
        1
    } else if d < 0.0 {
        -1
    } else {
        0
    }
}

/// Kendall's τ-b over all pairs.
///
/// Zero when either input is constant.
pub fn kendall_tau(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    let n = xs.len();
    // (concordant − discordant, pairs untied in x, pairs untied in y)
    let (net, untied_x, untied_y) = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut acc = (0i64, 0i64, 0i64);
            for j in (i + 1)..n {
                let dx = sign(xs[j] - xs[i]);
                let dy = sign(ys[j] - ys[i]);
                acc.0 += dx * dy;
                acc.1 += dx.abs();
                acc.2 += dy.abs();
            }
            acc
        })
        .reduce(|| (0, 0, 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
    if untied_x == 0 || untied_y == 0 {
        return Ok(0.0);
    }
    Ok((net as f64 / ((untied_x as f64) * (untied_y as f64)).sqrt()).clamp(-1.0, 1.0))
}

/// Pseudo-label precision per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TpRatio {
    /// class → (correct, total)
    pub counts: BTreeMap<usize, (usize, usize)>,
    pub per_class: BTreeMap<usize, f64>,
    pub average: Option<f64>,
}

/// Fraction of the instances pseudo-labeled `k` whose hidden label is `k`.
///
/// `pseudo` holds `(instance index, pseudo label)` pairs.
pub fn tp_ratio(pseudo: &[(usize, usize)], hidden: &[usize]) -> Result<TpRatio> {
    let mut counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for &(i, label) in pseudo {
        let truth = *hidden.get(i).ok_or(PacfError::ClassOutOfRange {
            class: i,
            class_count: hidden.len(),
        })?;
        let e = counts.entry(label).or_default();
        e.1 += 1;
        if truth == label {
            e.0 += 1;
        }
    }
    let per_class: BTreeMap<usize, f64> = counts
        .iter()
        .map(|(&k, &(c, t))| (k, c as f64 / t as f64))
        .collect();
    let average = class_average(&per_class);
    Ok(TpRatio {
        counts,
        per_class,
        average,
    })
}

/// Projection of the centered data onto its top two principal axes.
///
/// Each axis is oriented so its largest-magnitude loading is positive.
pub fn pca_project_2d<F: AsRef<[f64]>>(features: &[F]) -> Result<Vec<[f64; 2]>> {
    if features.len() < 3 {
        return Err(PacfError::InsufficientSamples {
            needed: 3,
            got: features.len(),
        });
    }
    let d = features[0].as_ref().len();
    if d < 2 {
        return Err(PacfError::DimensionMismatch {
            expected: 2,
            got: d,
        });
    }
    let (axes, centered) = principal_axes(features, 2)?;
    Ok(centered
        .iter()
        .map(|x| [axes[0].dot(x), axes[1].dot(x)])
        .collect())
}

/// Leading unit axes and the centered rows.
type Axes = (Vec<DVector<f64>>, Vec<DVector<f64>>);

fn principal_axes<F: AsRef<[f64]>>(features: &[F], count: usize) -> Result<Axes> {
    let d = features[0].as_ref().len();
    let n = features.len();
    let mut mean = DVector::<f64>::zeros(d);
    for f in features {
        ensure_same_len(d, f.as_ref().len())?;
        mean += DVector::from_column_slice(f.as_ref());
    }
    mean /= n as f64;
    let centered: Vec<DVector<f64>> = features
        .iter()
        .map(|f| DVector::from_column_slice(f.as_ref()) - &mean)
        .collect();
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for x in &centered {
        cov.ger(1.0, x, x, 1.0);
    }
    cov /= (n - 1) as f64;
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axes = order
        .iter()
        .take(count)
        .map(|&i| {
            let mut v = eig.eigenvectors.column(i).clone_owned();
            let (mut best, mut mag) = (0, -1.0);
            for (j, x) in v.iter().enumerate() {
                if x.abs() > mag + 1e-12 {
                    best = j;
                    mag = x.abs();
                }
            }
            if v[best] < 0.0 {
                v.neg_mut();
            }
            v
        })
        .collect();
    Ok((axes, centered))
}

/// Per-class spread of both domains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceTable {
    pub source: BTreeMap<usize, f64>,
    pub target: BTreeMap<usize, f64>,
    pub source_avg: Option<f64>,
    pub target_avg: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanShiftTable {
    pub per_class: BTreeMap<usize, f64>,
    pub average: Option<f64>,
}

/// All diagnostics of one model on one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variance: VarianceTable,
    pub mean_shift: MeanShiftTable,
    pub proxy_a_distance: f64,
    pub spearman_rho: f64,
    pub kendall_tau: f64,
    pub pseudo_count: usize,
    pub tp_ratio: Option<TpRatio>,
    pub config_hash: String,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, crate::synthbench::format_float)
}

impl MetricsReport {
    pub fn variance_csv(&self) -> String {
        let mut out = String::from("class,source,target\n");
        let classes: std::collections::BTreeSet<usize> = self
            .variance
            .source
            .keys()
            .chain(self.variance.target.keys())
            .copied()
            .collect();
        for k in classes {
            out.push_str(&format!(
                "{k},{},{}\n",
                fmt_opt(self.variance.source.get(&k).copied()),
                fmt_opt(self.variance.target.get(&k).copied())
            ));
        }
        out.push_str(&format!(
            "avg.,{},{}\n",
            fmt_opt(self.variance.source_avg),
            fmt_opt(self.variance.target_avg)
        ));
        out
    }

    pub fn mean_shift_csv(&self) -> String {
        let mut out = String::from("class,mean_shift\n");
        for (k, v) in &self.mean_shift.per_class {
            out.push_str(&format!("{k},{}\n", fmt_opt(Some(*v))));
        }
        out.push_str(&format!("avg.,{}\n", fmt_opt(self.mean_shift.average)));
        out
    }

    pub fn tp_ratio_csv(&self) -> String {
        let mut out = String::from("class,tp_ratio,correct,total\n");
        if let Some(tp) = &self.tp_ratio {
            for (k, (c, t)) in &tp.counts {
                out.push_str(&format!(
                    "{k},{},{c},{t}\n",
                    fmt_opt(tp.per_class.get(k).copied())
                ));
            }
            out.push_str(&format!("avg.,{},,\n", fmt_opt(tp.average)));
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        format!(
            "metric,value\nproxy_a_distance,{}\nspearman_rho,{}\nkendall_tau,{}\npseudo_count,{}\nconfig_hash,{}\n",
            fmt_opt(Some(self.proxy_a_distance)),
            fmt_opt(Some(self.spearman_rho)),
            fmt_opt(Some(self.kendall_tau)),
            self.pseudo_count,
            self.config_hash
        )
    }
}
