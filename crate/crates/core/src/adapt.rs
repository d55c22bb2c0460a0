//! Mean-teacher adaptation over feature vectors.
//!
//! The student and teacher share one architecture: an affine extractor
//! mapping raw inputs to embeddings, a linear classifier over embeddings and
//! a logistic domain discriminator. The teacher labels clean target inputs;
//! the student trains on noise-augmented source and target inputs against
//!
//! ```text
//! L = L_sup + λ_unsup L_unsup + λ_dis L_dis + λ1 L_pce + λ2 L_mut
//! ```
//!
//! with every term averaged over the instances it covers. Prototypes are
//! refreshed after each gradient step (source from ground truth, target from
//! pseudo labels) and the teacher follows the student by EMA.
//!
//! All randomness of step `t` is drawn from streams derived from
//! `(seed, stream, t)`, so a run is a pure function of its inputs.

use rand::seq::index;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_len, PacfError, Result};
use crate::losses::{
    classification_loss, domain_adversarial_loss, linear_posterior, linear_posterior_backward,
    prototype_cross_entropy, regularizer_variant, total_loss, Discriminator, LossComponents,
    LossValue, LossWeights, PrototypePosterior, RegularizerKind,
};
use crate::mathcore::{argmax, cosine_similarity, FeatureVector, ProbabilityVector};
use crate::metrics::{self, MeanShiftTable, MetricsReport, VarianceTable};
use crate::prototypes::{initialize_prototypes, Domain, PrototypeSet, ScoredFeatureBatch};
use crate::rng::{self, stream};
use crate::synthbench::{LabeledBatch, TrainingView};

/// Stream index offset for warm-up steps, keeping them apart from adaptation steps.
pub const WARMUP_STEP_OFFSET: u64 = 1 << 62;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub input_dim: usize,
    pub feature_dim: usize,
    pub class_count: usize,
    /// `feature_dim × input_dim`, row-major.
    pub extractor: Vec<f64>,
    pub extractor_bias: Vec<f64>,
    /// `logit_count × feature_dim`, row-major.
    pub classifier: Vec<f64>,
    pub classifier_bias: Vec<f64>,
    pub discriminator: Discriminator,
}

impl ModelParams {
    /// Gaussian extractor with variance `1 / input_dim`, small random
    /// classifier, zero biases and discriminator.
    pub fn init(
        input_dim: usize,
        feature_dim: usize,
        class_count: usize,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 || feature_dim == 0 || class_count == 0 {
            return Err(PacfError::InvalidConfig(
                "model dimensions must be positive".into(),
            ));
        }
        let mut r = rng::derive(seed, stream::PARAM_INIT, 0);
        let scale = 1.0 / (input_dim as f64).sqrt();
        let extractor = (0..feature_dim * input_dim)
            .map(|_| scale * r.sample::<f64, _>(StandardNormal))
            .collect();
        let logits = class_count;
        let classifier = (0..logits * feature_dim)
            .map(|_| 0.01 * r.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(ModelParams {
            input_dim,
            feature_dim,
            class_count,
            extractor,
            extractor_bias: vec![0.0; feature_dim],
            classifier,
            classifier_bias: vec![0.0; logits],
            discriminator: Discriminator::zeros(feature_dim),
        })
    }

    pub fn logit_count(&self) -> usize {
        self.classifier_bias.len()
    }

    pub fn validate(&self) -> Result<()> {
        ensure_same_len(self.feature_dim * self.input_dim, self.extractor.len())?;
        ensure_same_len(self.feature_dim, self.extractor_bias.len())?;
        ensure_same_len(self.class_count, self.classifier_bias.len())?;
        ensure_same_len(self.class_count * self.feature_dim, self.classifier.len())?;
        ensure_same_len(self.feature_dim, self.discriminator.weights.len())?;
        let all_finite = self
            .extractor
            .iter()
            .chain(&self.extractor_bias)
            .chain(&self.classifier)
            .chain(&self.classifier_bias)
            .chain(&self.discriminator.weights)
            .all(|v| v.is_finite())
            && self.discriminator.bias.is_finite();
        if !all_finite {
            return Err(PacfError::NonFinite("model parameters"));
        }
        Ok(())
    }

    /// All parameters in one vector: extractor, extractor bias, classifier,
    /// classifier bias, discriminator weights, discriminator bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v =
            Vec::with_capacity(self.extractor.len() + self.extractor_bias.len() + self.head_len());
        v.extend(&self.extractor);
        v.extend(&self.extractor_bias);
        v.extend(&self.classifier);
        v.extend(&self.classifier_bias);
        v.extend(&self.discriminator.weights);
        v.push(self.discriminator.bias);
        v
    }

    /// Inverse of [`ModelParams::to_flat`] for a model shaped like `self`.
    pub fn with_flat(&self, flat: &[f64]) -> Result<ModelParams> {
        ensure_same_len(self.to_flat().len(), flat.len())?;
        let mut rest = flat;
        let mut take = |n: usize| {
            let (a, b) = rest.split_at(n);
            rest = b;
            a.to_vec()
        };
        let next = ModelParams {
            input_dim: self.input_dim,
            feature_dim: self.feature_dim,
            class_count: self.class_count,
            extractor: take(self.extractor.len()),
            extractor_bias: take(self.extractor_bias.len()),
            classifier: take(self.classifier.len()),
            classifier_bias: take(self.classifier_bias.len()),
            discriminator: Discriminator {
                weights: take(self.feature_dim),
                bias: take(1)[0],
            },
        };
        next.validate()?;
        Ok(next)
    }

    fn check_same_shape(&self, other: &ModelParams) -> Result<()> {
        ensure_same_len(self.input_dim, other.input_dim)?;
        ensure_same_len(self.feature_dim, other.feature_dim)?;
        ensure_same_len(self.class_count, other.class_count)
    }

    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        ensure_same_len(self.input_dim, x.len())?;
        Ok(affine(&self.extractor, &self.extractor_bias, x))
    }

    pub fn logits(&self, embedding: &[f64]) -> Vec<f64> {
        affine(&self.classifier, &self.classifier_bias, embedding)
    }

    /// Length of the flat head gradient: classifier, classifier bias,
    /// discriminator weights, discriminator bias.
    fn head_len(&self) -> usize {
        self.classifier.len() + self.classifier_bias.len() + self.feature_dim + 1
    }
}

fn affine(matrix: &[f64], bias: &[f64], x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    bias.iter()
        .enumerate()
        .map(|(r, b)| {
            b + matrix[r * cols..(r + 1) * cols]
                .iter()
                .zip(x)
                .map(|(w, v)| w * v)
                .sum::<f64>()
        })
        .collect()
}

/// Embedding and linear-head class posterior of one raw input.
pub fn forward(params: &ModelParams, x_raw: &[f64]) -> Result<(Vec<f64>, ProbabilityVector)> {
    let e = params.embed(x_raw)?;
    let p = linear_posterior(&params.logits(&e))?;
    Ok((e, p))
}

/// Index and probability of the most likely class; ties go to the lowest index.
fn top_class(p: &ProbabilityVector, class_count: usize) -> (usize, f64) {
    argmax(&p[..class_count.min(p.len())])
}

/// Linear-head prediction. Prototypes play no part at inference.
pub fn predict(params: &ModelParams, x_raw: &[f64]) -> Result<usize> {
    let (_, p) = forward(params, x_raw)?;
    Ok(top_class(&p, params.class_count).0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub index: usize,
    pub label: usize,
    pub score: f64,
}

/// Teacher predictions on clean inputs whose top probability reaches `threshold`.
///
/// A threshold above one keeps nothing.
pub fn generate_pseudo_labels<F: AsRef<[f64]>>(
    teacher: &ModelParams,
    target: &[F],
    threshold: f64,
) -> Result<Vec<PseudoLabel>> {
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(PacfError::InvalidThreshold(threshold));
    }
    let mut out = Vec::new();
    for (i, x) in target.iter().enumerate() {
        let (_, p) = forward(teacher, x.as_ref())?;
        let (label, score) = top_class(&p, teacher.class_count);
        if score >= threshold {
            out.push(PseudoLabel {
                index: i,
                label,
                score,
            });
        }
    }
    Ok(out)
}

/// `θ_t ← rate · θ_t + (1 − rate) · θ_s` for every parameter.
pub fn ema_update(teacher: &ModelParams, student: &ModelParams, rate: f64) -> Result<ModelParams> {
    if !(0.0..1.0).contains(&rate) {
        return Err(PacfError::InvalidConfig(format!(
            "ema rate {rate} outside [0, 1)"
        )));
    }
    teacher.check_same_shape(student)?;
    let mix = |t: &[f64], s: &[f64]| -> Vec<f64> {
        t.iter()
            .zip(s)
            .map(|(a, b)| rate * a + (1.0 - rate) * b)
            .collect()
    };
    Ok(ModelParams {
        input_dim: teacher.input_dim,
        feature_dim: teacher.feature_dim,
        class_count: teacher.class_count,
        extractor: mix(&teacher.extractor, &student.extractor),
        extractor_bias: mix(&teacher.extractor_bias, &student.extractor_bias),
        classifier: mix(&teacher.classifier, &student.classifier),
        classifier_bias: mix(&teacher.classifier_bias, &student.classifier_bias),
        discriminator: Discriminator {
            weights: mix(
                &teacher.discriminator.weights,
                &student.discriminator.weights,
            ),
            bias: rate * teacher.discriminator.bias + (1.0 - rate) * student.discriminator.bias,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    /// Temperature of the prototype posteriors.
    pub tau: f64,
    /// Score threshold for prototype initialization.
    pub init_threshold: f64,
    /// Teacher confidence needed to keep a pseudo label; above one disables pseudo labels.
    pub pseudo_threshold: f64,
    pub weights: LossWeights,
    pub regularizer: RegularizerKind,
    pub ema_rate: f64,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub augment_noise_std: f64,
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            tau: 0.05,
            init_threshold: 0.8,
            pseudo_threshold: 0.8,
            weights: LossWeights::default(),
            regularizer: RegularizerKind::Jsd,
            ema_rate: 0.9996,
            learning_rate: 0.05,
            warmup_steps: 200,
            steps: 1500,
            batch_size: 64,
            augment_noise_std: 0.3,
            feature_dim: 32,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    /// Settings for the desk-scale benchmark: the default with a faster EMA,
    /// so the teacher actually tracks the student within 1500 steps.
    pub fn desk() -> Self {
        TrainerConfig {
            ema_rate: 0.99,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PacfError::InvalidConfig(m));
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(PacfError::InvalidTemperature(self.tau));
        }
        if !(self.init_threshold > 0.0 && self.init_threshold <= 1.0) {
            return Err(PacfError::InvalidThreshold(self.init_threshold));
        }
        if !(self.pseudo_threshold.is_finite() && self.pseudo_threshold > 0.0) {
            return Err(PacfError::InvalidThreshold(self.pseudo_threshold));
        }
        self.weights.validate()?;
        if !(0.0..1.0).contains(&self.ema_rate) {
            return bad(format!("ema_rate {} outside [0, 1)", self.ema_rate));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning_rate {} must be >= 0", self.learning_rate));
        }
        if self.steps < 1 || self.batch_size < 1 {
            return bad("steps and batch_size must be >= 1".into());
        }
        if !(self.augment_noise_std.is_finite() && self.augment_noise_std >= 0.0) {
            return bad(format!(
                "augment_noise_std {} must be >= 0",
                self.augment_noise_std
            ));
        }
        if self.feature_dim < 1 {
            return bad("feature_dim must be >= 1".into());
        }
        Ok(())
    }
}

/// Everything the adaptation loop owns between steps.
///
/// The random state is `(seed, step)`: step `t` draws from streams derived
/// from both.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptationState {
    pub student: ModelParams,
    pub teacher: ModelParams,
    pub src_protos: PrototypeSet,
    pub tgt_protos: PrototypeSet,
    pub step: u64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub sup: f64,
    pub unsup: f64,
    pub dis: f64,
    pub pce: f64,
    pub mutual: f64,
    pub total: f64,
    pub pseudo_count: usize,
}

impl StepRecord {
    pub const CSV_HEADER: &'static str = "step,L_sup,L_unsup,L_dis,L_pce,L_mut,total,pseudo_count";

    pub fn csv_row(&self) -> String {
        use crate::synthbench::format_float as f;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            f(self.sup),
            f(self.unsup),
            f(self.dis),
            f(self.pce),
            f(self.mutual),
            f(self.total),
            self.pseudo_count
        )
    }

    pub fn is_finite(&self) -> bool {
        [
            self.sup,
            self.unsup,
            self.dis,
            self.pce,
            self.mutual,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

pub fn history_csv(history: &[StepRecord]) -> String {
    let mut out = String::from(StepRecord::CSV_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Indices of the minibatch drawn at `step` from `n` items, without replacement.
pub fn batch_indices(seed: u64, stream: u64, step: u64, n: usize, batch_size: usize) -> Vec<usize> {
    let mut r = rng::derive(seed, stream, step);
    index::sample(&mut r, n, batch_size.min(n)).into_vec()
}

/// Copies of the selected inputs with additive `N(0, std²)` noise.
pub fn augment<F: AsRef<[f64]>>(
    inputs: &[F],
    indices: &[usize],
    std: f64,
    seed: u64,
    stream: u64,
    step: u64,
) -> Vec<Vec<f64>> {
    let mut r = rng::derive(seed, stream, step);
    indices
        .iter()
        .map(|&i| {
            inputs[i]
                .as_ref()
                .iter()
                .map(|v| v + std * r.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

/// Student activations for one minibatch: source rows first, then target rows.
struct BatchActivations {
    inputs: Vec<Vec<f64>>,
    embeddings: Vec<Vec<f64>>,
    probs: Vec<ProbabilityVector>,
    source_count: usize,
}

impl BatchActivations {
    fn new(params: &ModelParams, source: Vec<Vec<f64>>, target: Vec<Vec<f64>>) -> Result<Self> {
        let source_count = source.len();
        let inputs: Vec<Vec<f64>> = source.into_iter().chain(target).collect();
        let mut embeddings = Vec::with_capacity(inputs.len());
        let mut probs = Vec::with_capacity(inputs.len());
        for x in &inputs {
            let (e, p) = forward(params, x)?;
            embeddings.push(e);
            probs.push(p);
        }
        Ok(BatchActivations {
            inputs,
            embeddings,
            probs,
            source_count,
        })
    }

    fn len(&self) -> usize {
        self.inputs.len()
    }
}

struct StepComputation {
    pseudo: Vec<PseudoLabel>,
    src_labels: Vec<usize>,
    acts: BatchActivations,
    components: LossComponents,
    total: LossValue,
}

/// Accumulator for one averaged loss term over a minibatch.
struct TermAccumulator<'a> {
    params: &'a ModelParams,
    loss: LossValue,
    count: usize,
}

impl<'a> TermAccumulator<'a> {
    fn new(params: &'a ModelParams, rows: usize) -> Self {
        TermAccumulator {
            params,
            loss: LossValue {
                value: 0.0,
                grad_features: vec![vec![0.0; params.feature_dim]; rows],
                grad_params: vec![0.0; params.head_len()],
            },
            count: 0,
        }
    }

    /// Adds a gradient on the logits of row `i` (embedding `e`).
    fn add_logit_grad(&mut self, i: usize, e: &[f64], g_logits: &[f64]) {
        let f = self.params.feature_dim;
        let c = self.params.logit_count();
        let head = &mut self.loss.grad_params;
        let feat = &mut self.loss.grad_features[i];
        for (k, g) in g_logits.iter().enumerate() {
            let row = &self.params.classifier[k * f..(k + 1) * f];
            for j in 0..f {
                head[k * f + j] += g * e[j];
                feat[j] += g * row[j];
            }
            head[c * f + k] += g;
        }
    }

    fn add_feature_grad(&mut self, i: usize, g: &[f64]) {
        for (a, v) in self.loss.grad_features[i].iter_mut().zip(g) {
            *a += v;
        }
    }

    fn add_discriminator_grad(&mut self, g: &[f64]) {
        let offset = self.params.classifier.len() + self.params.classifier_bias.len();
        for (a, v) in self.loss.grad_params[offset..].iter_mut().zip(g) {
            *a += v;
        }
    }

    /// Averages over the instances seen; an empty term becomes [`LossValue::zero`].
    fn finish(mut self) -> LossValue {
        if self.count == 0 {
            return LossValue::zero();
        }
        let inv = 1.0 / self.count as f64;
        self.loss.value *= inv;
        for g in &mut self.loss.grad_features {
            g.iter_mut().for_each(|v| *v *= inv);
        }
        self.loss.grad_params.iter_mut().for_each(|v| *v *= inv);
        self.loss
    }
}

/// Gradient of the total loss on every student parameter, in parameter
/// layout, given per-row embedding gradients and the flat head gradient.
fn parameter_gradient(
    params: &ModelParams,
    inputs: &[Vec<f64>],
    total: &LossValue,
) -> Result<ModelParams> {
    let f = params.feature_dim;
    let d = params.input_dim;
    let mut g_extractor = vec![0.0; f * d];
    let mut g_extractor_bias = vec![0.0; f];
    for (x, g) in inputs.iter().zip(&total.grad_features) {
        for r in 0..f {
            let gr = g[r];
            for j in 0..d {
                g_extractor[r * d + j] += gr * x[j];
            }
            g_extractor_bias[r] += gr;
        }
    }
    let head = &total.grad_params;
    ensure_same_len(params.head_len(), head.len())?;
    let n_cls = params.classifier.len();
    let n_bias = params.classifier_bias.len();
    Ok(ModelParams {
        input_dim: d,
        feature_dim: f,
        class_count: params.class_count,
        extractor: g_extractor,
        extractor_bias: g_extractor_bias,
        classifier: head[..n_cls].to_vec(),
        classifier_bias: head[n_cls..n_cls + n_bias].to_vec(),
        discriminator: Discriminator {
            weights: head[n_cls + n_bias..n_cls + n_bias + f].to_vec(),
            bias: head[n_cls + n_bias + f],
        },
    })
}

/// `θ ← θ − lr · g` for every parameter.
fn descend(params: &ModelParams, grad: &ModelParams, learning_rate: f64) -> Result<ModelParams> {
    let step = |p: &[f64], g: &[f64]| -> Vec<f64> {
        p.iter()
            .zip(g)
            .map(|(a, b)| a - learning_rate * b)
            .collect()
    };
    let next = ModelParams {
        input_dim: params.input_dim,
        feature_dim: params.feature_dim,
        class_count: params.class_count,
        extractor: step(&params.extractor, &grad.extractor),
        extractor_bias: step(&params.extractor_bias, &grad.extractor_bias),
        classifier: step(&params.classifier, &grad.classifier),
        classifier_bias: step(&params.classifier_bias, &grad.classifier_bias),
        discriminator: Discriminator {
            weights: step(&params.discriminator.weights, &grad.discriminator.weights),
            bias: params.discriminator.bias - learning_rate * grad.discriminator.bias,
        },
    };
    next.validate()?;
    Ok(next)
}

/// Mean cross-entropy of the source rows; the supervised term of every step.
fn supervised_term(
    params: &ModelParams,
    acts: &BatchActivations,
    labels: &[usize],
) -> Result<LossValue> {
    let mut acc = TermAccumulator::new(params, acts.len());
    for (i, &label) in labels.iter().enumerate().take(acts.source_count) {
        let l = classification_loss(&acts.probs[i], label, params.logit_count())?;
        acc.loss.value += l.value;
        acc.add_logit_grad(i, &acts.embeddings[i], &l.grad_params);
        acc.count += 1;
    }
    Ok(acc.finish())
}

/// One supervised-only gradient step on the source domain.
pub fn supervised_step(
    params: &ModelParams,
    source: &LabeledBatch,
    config: &TrainerConfig,
    step: u64,
) -> Result<(ModelParams, f64)> {
    let idx = batch_indices(
        config.seed,
        stream::SOURCE_BATCH,
        step,
        source.len(),
        config.batch_size,
    );
    let inputs = augment(
        &source.features,
        &idx,
        config.augment_noise_std,
        config.seed,
        stream::SOURCE_NOISE,
        step,
    );
    let labels: Vec<usize> = idx.iter().map(|&i| source.labels[i]).collect();
    let acts = BatchActivations::new(params, inputs, Vec::new())?;
    let sup = supervised_term(params, &acts, &labels)?;
    let grad = parameter_gradient(params, &acts.inputs, &sup)?;
    let next = descend(params, &grad, config.learning_rate)?;
    Ok((next, sup.value))
}

fn check_view(view: &TrainingView<'_>, input_dim: usize, class_count: usize) -> Result<()> {
    if view.source.is_empty() || view.target.is_empty() {
        return Err(PacfError::EmptyBatch);
    }
    ensure_same_len(view.source.features.len(), view.source.labels.len())?;
    for x in view.source.features.iter().chain(view.target) {
        ensure_same_len(input_dim, x.dim())?;
    }
    if let Some(&k) = view.source.labels.iter().find(|&&k| k >= class_count) {
        return Err(PacfError::ClassOutOfRange {
            class: k,
            class_count,
        });
    }
    Ok(())
}

/// Scores every input with `params` (top class and its probability) and
/// builds prototypes from the embeddings scoring at least `threshold`.
pub fn prototypes_from_model<F: AsRef<[f64]>>(
    params: &ModelParams,
    inputs: &[F],
    threshold: f64,
    domain: Domain,
) -> Result<PrototypeSet> {
    let mut features = Vec::with_capacity(inputs.len());
    let mut labels = Vec::with_capacity(inputs.len());
    let mut scores = Vec::with_capacity(inputs.len());
    for x in inputs {
        let (e, p) = forward(params, x.as_ref())?;
        let (k, s) = top_class(&p, params.class_count);
        features.push(FeatureVector::new(e)?);
        labels.push(k);
        scores.push(s);
    }
    let batch = ScoredFeatureBatch::new(features, labels, scores)?;
    initialize_prototypes(&batch, threshold, domain, params.class_count)
}

impl AdaptationState {
    /// Fresh student, supervised warm-up on the source, prototype
    /// initialization from the warmed-up student, teacher copied from it.
    pub fn prepare(
        view: TrainingView<'_>,
        class_count: usize,
        config: &TrainerConfig,
    ) -> Result<Self> {
        config.validate()?;
        let input_dim = view
            .source
            .features
            .first()
            .ok_or(PacfError::EmptyBatch)?
            .dim();
        check_view(&view, input_dim, class_count)?;
        let mut student =
            ModelParams::init(input_dim, config.feature_dim, class_count, config.seed)?;
        for w in 0..config.warmup_steps as u64 {
            student = supervised_step(&student, view.source, config, WARMUP_STEP_OFFSET + w)?.0;
        }
        let src_protos = prototypes_from_model(
            &student,
            &view.source.features,
            config.init_threshold,
            Domain::Source,
        )?;
        let tgt_protos =
            prototypes_from_model(&student, view.target, config.init_threshold, Domain::Target)?;
        Ok(AdaptationState {
            teacher: student.clone(),
            student,
            src_protos,
            tgt_protos,
            step: 0,
            seed: config.seed,
        })
    }

    /// Pseudo labels, activations and loss terms of the current step's minibatch.
    fn compute_step(
        &self,
        view: TrainingView<'_>,
        config: &TrainerConfig,
    ) -> Result<StepComputation> {
        let student = &self.student;
        let c = student.class_count;
        check_view(&view, student.input_dim, c)?;
        let (seed, t) = (self.seed, self.step);

        // teacher pseudo labels on clean target inputs
        let tgt_idx = batch_indices(
            seed,
            stream::TARGET_BATCH,
            t,
            view.target.len(),
            config.batch_size,
        );
        let clean: Vec<&[f64]> = tgt_idx.iter().map(|&i| view.target[i].as_slice()).collect();
        let pseudo = generate_pseudo_labels(&self.teacher, &clean, config.pseudo_threshold)?;

        // student on strongly augmented inputs
        let src_idx = batch_indices(
            seed,
            stream::SOURCE_BATCH,
            t,
            view.source.len(),
            config.batch_size,
        );
        let src_labels: Vec<usize> = src_idx.iter().map(|&i| view.source.labels[i]).collect();
        let noise = config.augment_noise_std;
        let src_in = augment(
            &view.source.features,
            &src_idx,
            noise,
            seed,
            stream::SOURCE_NOISE,
            t,
        );
        let tgt_in = augment(view.target, &tgt_idx, noise, seed, stream::TARGET_NOISE, t);
        let acts = BatchActivations::new(student, src_in, tgt_in)?;
        let ns = acts.source_count;
        let w = &config.weights;

        let sup = supervised_term(student, &acts, &src_labels)?;

        let mut unsup = TermAccumulator::new(student, acts.len());
        if w.unsup != 0.0 {
            for pl in &pseudo {
                let i = ns + pl.index;
                let l = classification_loss(&acts.probs[i], pl.label, student.logit_count())?;
                unsup.loss.value += l.value;
                unsup.add_logit_grad(i, &acts.embeddings[i], &l.grad_params);
                unsup.count += 1;
            }
        }

        let mut dis = TermAccumulator::new(student, acts.len());
        if w.dis != 0.0 {
            for (i, e) in acts.embeddings.iter().enumerate() {
                let domain = if i < ns {
                    Domain::Source
                } else {
                    Domain::Target
                };
                let l = domain_adversarial_loss(e, domain, &student.discriminator)?;
                dis.loss.value += l.value;
                dis.add_feature_grad(i, &l.grad_features[0]);
                dis.add_discriminator_grad(&l.grad_params);
                dis.count += 1;
            }
        }

        let protos_ready =
            self.src_protos.is_fully_initialized() && self.tgt_protos.is_fully_initialized();
        let mut pce = TermAccumulator::new(student, acts.len());
        let mut mutual = TermAccumulator::new(student, acts.len());
        if protos_ready && (w.pce != 0.0 || w.mutual != 0.0) {
            for pl in &pseudo {
                let i = ns + pl.index;
                let e = &acts.embeddings[i];
                if w.pce != 0.0 {
                    let l = prototype_cross_entropy(
                        e,
                        pl.label,
                        &self.src_protos,
                        &self.tgt_protos,
                        config.tau,
                    )?;
                    pce.loss.value += l.value;
                    pce.add_feature_grad(i, &l.grad_features[0]);
                    pce.count += 1;
                }
                if w.mutual != 0.0 {
                    let post_s = PrototypePosterior::new(e, &self.src_protos, config.tau)?;
                    let post_t = PrototypePosterior::new(e, &self.tgt_protos, config.tau)?;
                    let p_lin = &acts.probs[i];
                    let l = regularizer_variant(
                        p_lin,
                        &post_s.probs,
                        &post_t.probs,
                        config.regularizer,
                    )?;
                    mutual.loss.value += l.value;
                    let g_logits =
                        linear_posterior_backward(p_lin, &l.grad_lin, student.logit_count());
                    mutual.add_logit_grad(i, e, &g_logits);
                    mutual.add_feature_grad(i, &post_s.backward(&l.grad_src));
                    mutual.add_feature_grad(i, &post_t.backward(&l.grad_tgt));
                    mutual.count += 1;
                }
            }
        }

        let components = LossComponents {
            sup,
            unsup: unsup.finish(),
            dis: dis.finish(),
            pce: pce.finish(),
            mutual: mutual.finish(),
        };
        let total = total_loss(&components, w)?;
        Ok(StepComputation {
            pseudo,
            src_labels,
            acts,
            components,
            total,
        })
    }

    /// Total loss of the current step's minibatch and its gradient on every
    /// student parameter. Teacher, prototypes and state are not touched.
    pub fn objective(
        &self,
        view: TrainingView<'_>,
        config: &TrainerConfig,
    ) -> Result<(f64, ModelParams)> {
        let comp = self.compute_step(view, config)?;
        let grad = parameter_gradient(&self.student, &comp.acts.inputs, &comp.total)?;
        Ok((comp.total.value, grad))
    }

    /// One adaptation step; the state is left untouched on error.
    pub fn train_step(
        &mut self,
        view: TrainingView<'_>,
        config: &TrainerConfig,
    ) -> Result<StepRecord> {
        config.validate()?;
        let StepComputation {
            pseudo,
            src_labels,
            acts,
            components,
            total,
        } = self.compute_step(view, config)?;
        let ns = acts.source_count;
        let grad = parameter_gradient(&self.student, &acts.inputs, &total)?;
        let next_student = descend(&self.student, &grad, config.learning_rate)?;

        let mut src_protos = self.src_protos.clone();
        src_protos.update_all(&acts.embeddings[..ns], &src_labels)?;
        let mut tgt_protos = self.tgt_protos.clone();
        let pl_embeddings: Vec<&[f64]> = pseudo
            .iter()
            .map(|p| acts.embeddings[ns + p.index].as_slice())
            .collect();
        let pl_labels: Vec<usize> = pseudo.iter().map(|p| p.label).collect();
        tgt_protos.update_all(&pl_embeddings, &pl_labels)?;

        let next_teacher = ema_update(&self.teacher, &next_student, config.ema_rate)?;

        let record = StepRecord {
            step: self.step,
            sup: components.sup.value,
            unsup: components.unsup.value,
            dis: components.dis.value,
            pce: components.pce.value,
            mutual: components.mutual.value,
            total: total.value,
            pseudo_count: pseudo.len(),
        };
        self.student = next_student;
        self.teacher = next_teacher;
        self.src_protos = src_protos;
        self.tgt_protos = tgt_protos;
        self.step += 1;
        Ok(record)
    }

    /// Runs `config.steps` adaptation steps.
    pub fn train_run(
        &mut self,
        view: TrainingView<'_>,
        config: &TrainerConfig,
    ) -> Result<Vec<StepRecord>> {
        config.validate()?;
        (0..config.steps)
            .map(|_| self.train_step(view, config))
            .collect()
    }
}

/// Which parameters an evaluation reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalModel {
    Student,
    Teacher,
}

/// Per-instance inputs of the rank-agreement scatter: top linear-head
/// probability and cosine to the target prototype of that class.
pub fn rank_pairs<F: AsRef<[f64]>>(
    params: &ModelParams,
    tgt_protos: &PrototypeSet,
    target: &[F],
) -> Result<Vec<(f64, f64)>> {
    let mut pairs = Vec::with_capacity(target.len());
    for x in target {
        let (e, p) = forward(params, x.as_ref())?;
        let (k, score) = top_class(&p, params.class_count);
        if let Ok(mu) = tgt_protos.get(k) {
            pairs.push((score, cosine_similarity(mu, &e)?));
        }
    }
    Ok(pairs)
}

/// Labeled data for evaluation: source with labels, target with hidden labels.
#[derive(Clone, Copy, Debug)]
pub struct EvalData<'a> {
    pub source: &'a LabeledBatch,
    pub target: &'a [FeatureVector],
    pub target_labels: Option<&'a [usize]>,
}

/// Computes every diagnostic for one model.
///
/// Embeddings are taken on clean inputs. Per-class target statistics need
/// target labels; without them the target variance table and mean shift are
/// empty and no TP ratio is reported.
pub fn evaluate(
    state: &AdaptationState,
    which: EvalModel,
    data: EvalData<'_>,
    pseudo_threshold: f64,
    config_hash: &str,
) -> Result<MetricsReport> {
    let params = match which {
        EvalModel::Student => &state.student,
        EvalModel::Teacher => &state.teacher,
    };
    let embed_all = |xs: &[FeatureVector]| -> Result<Vec<Vec<f64>>> {
        xs.iter().map(|x| params.embed(x)).collect()
    };
    let src_e = embed_all(&data.source.features)?;
    let tgt_e = embed_all(data.target)?;

    let src_var = metrics::intra_class_variance(&src_e, &data.source.labels)?;
    let (tgt_var, shift) = match data.target_labels {
        Some(labels) => (
            metrics::intra_class_variance(&tgt_e, labels)?,
            metrics::mean_shift(&src_e, &data.source.labels, &tgt_e, labels)?,
        ),
        None => Default::default(),
    };

    let pad = metrics::proxy_a_distance(&src_e, &tgt_e, state.seed)?;
    let pairs = rank_pairs(params, &state.tgt_protos, data.target)?;
    let (xs, ys): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let (rho, tau) = if xs.len() >= 2 {
        (
            metrics::spearman_rho(&xs, &ys)?,
            metrics::kendall_tau(&xs, &ys)?,
        )
    } else {
        (0.0, 0.0)
    };

    let pseudo = generate_pseudo_labels(&state.teacher, data.target, pseudo_threshold)?;
    let tp = match data.target_labels {
        Some(labels) => {
            let pairs: Vec<(usize, usize)> = pseudo.iter().map(|p| (p.index, p.label)).collect();
            Some(metrics::tp_ratio(&pairs, labels)?)
        }
        None => None,
    };

    Ok(MetricsReport {
        variance: VarianceTable {
            source_avg: metrics::class_average(&src_var),
            target_avg: metrics::class_average(&tgt_var),
            source: src_var,
            target: tgt_var,
        },
        mean_shift: MeanShiftTable {
            average: metrics::class_average(&shift),
            per_class: shift,
        },
        proxy_a_distance: pad,
        spearman_rho: rho,
        kendall_tau: tau,
        pseudo_count: pseudo.len(),
        tp_ratio: tp,
        config_hash: config_hash.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_params(dim: usize, classes: usize) -> ModelParams {
        let mut extractor = vec![0.0; dim * dim];
        for i in 0..dim {
            extractor[i * dim + i] = 1.0;
        }
        ModelParams {
            input_dim: dim,
            feature_dim: dim,
            class_count: classes,
            extractor,
            extractor_bias: vec![0.0; dim],
            classifier: vec![0.0; classes * dim],
            classifier_bias: vec![0.0; classes],
            discriminator: Discriminator::zeros(dim),
        }
    }

    #[test]
    fn forward_examples() {
        let p = identity_params(3, 4);
        let (e, probs) = forward(&p, &[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(e, vec![1.0, -2.0, 0.5]);
        assert_eq!(probs.as_slice(), &[0.25; 4]);
        let (e, _) = forward(&p, &[0.0; 3]).unwrap();
        assert_eq!(e, vec![0.0; 3]);
        let r = ModelParams::init(5, 4, 3, 11).unwrap();
        let (_, probs) = forward(&r, &[0.3, 1.0, -0.2, 2.0, 0.1]).unwrap();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(matches!(
            forward(&r, &[1.0]),
            Err(PacfError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn pseudo_label_thresholds() {
        let mut p = identity_params(2, 2);
        p.classifier = vec![10.0, 0.0, 0.0, 10.0];
        // logits [3, 0] → max prob σ(3) ≈ 0.95
        let kept = generate_pseudo_labels(&p, &[vec![0.3, 0.0]], 0.8).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].label, 0);
        assert!((kept[0].score - 0.952_574_126_822_433_4).abs() < 1e-12);
        let dropped = generate_pseudo_labels(&p, &[vec![0.0, 0.0]], 0.8).unwrap();
        assert!(dropped.is_empty());
        let uniform = identity_params(2, 8);
        let xs = vec![vec![0.5, -0.5]; 10];
        assert!(generate_pseudo_labels(&uniform, &xs, 0.8)
            .unwrap()
            .is_empty());
        assert!(generate_pseudo_labels(&uniform, &xs, 0.0).is_err());
    }

    #[test]
    fn ema_examples() {
        let s = ModelParams::init(3, 2, 2, 1).unwrap();
        let t = ModelParams::init(3, 2, 2, 2).unwrap();
        assert_eq!(ema_update(&t, &s, 0.0).unwrap(), s);
        assert_eq!(ema_update(&s, &s, 0.7).unwrap(), s);
        let mut a = identity_params(1, 2);
        let mut b = identity_params(1, 2);
        a.extractor[0] = 2.0;
        b.extractor[0] = 0.0;
        assert_eq!(ema_update(&a, &b, 0.5).unwrap().extractor[0], 1.0);
        assert!(ema_update(&a, &b, 1.0).is_err());
        assert!(ema_update(&a, &identity_params(2, 2), 0.5).is_err());
    }

    #[test]
    fn predict_examples() {
        let mut p = identity_params(2, 3);
        p.classifier_bias = vec![0.0, 5.0, 0.0];
        assert_eq!(predict(&p, &[0.1, 0.1]).unwrap(), 1);
        let base = predict(&p, &[0.4, -0.3]).unwrap();
        p.classifier_bias.iter_mut().for_each(|b| *b += 100.0);
        assert_eq!(predict(&p, &[0.4, -0.3]).unwrap(), base);
    }

    #[test]
    fn config_validation() {
        assert!(TrainerConfig::default().validate().is_ok());
        let bad = [
            TrainerConfig {
                tau: 0.0,
                ..Default::default()
            },
            TrainerConfig {
                ema_rate: 1.0,
                ..Default::default()
            },
            TrainerConfig {
                steps: 0,
                ..Default::default()
            },
            TrainerConfig {
                batch_size: 0,
                ..Default::default()
            },
            TrainerConfig {
                init_threshold: 1.5,
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err());
        }
        // pseudo thresholds above one are allowed and disable pseudo labels
        assert!(TrainerConfig {
            pseudo_threshold: 1.01,
            ..Default::default()
        }
        .validate()
        .is_ok());
    }

    #[test]
    fn batch_helpers_are_deterministic() {
        let a = batch_indices(3, stream::SOURCE_BATCH, 7, 100, 10);
        assert_eq!(a, batch_indices(3, stream::SOURCE_BATCH, 7, 100, 10));
        assert_eq!(a.len(), 10);
        assert_eq!(batch_indices(3, stream::SOURCE_BATCH, 7, 4, 10).len(), 4);
        let xs = vec![vec![1.0, 2.0]; 3];
        assert_eq!(augment(&xs, &[0, 2], 0.0, 1, 2, 3), vec![vec![1.0, 2.0]; 2]);
    }
}
