//! Objective terms and their analytic gradients.
//!
//! Prototypes enter every loss as constants: no function here produces a
//! gradient with respect to a prototype entry.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_len, PacfError, Result};
use crate::mathcore::{
    clamped_ln, cosine_gradient, cosine_similarity, js_divergence, js_divergence_grad,
    kl_divergence, kl_divergence_grad, sigmoid, sigmoid_backward, sigmoid_probability,
    softmax_backward, temperature_softmax, ProbabilityVector,
};
use crate::prototypes::{Domain, PrototypeSet};

/// A loss value with gradients.
///
/// `grad_features` holds one gradient per feature vector the loss consumed;
/// `grad_params` is a flat gradient over whatever parameters the loss touches
/// directly. Either may be empty when the loss has no such dependency.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad_features: Vec<Vec<f64>>,
    pub grad_params: Vec<f64>,
}

impl LossValue {
    pub fn zero() -> Self {
        LossValue::default()
    }
}

/// Weights of the composed objective. The supervised term always has weight one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub unsup: f64,
    pub dis: f64,
    pub pce: f64,
    pub mutual: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            unsup: 1.0,
            dis: 0.1,
            pce: 1.0,
            mutual: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("unsup", self.unsup),
            ("dis", self.dis),
            ("pce", self.pce),
            ("mutual", self.mutual),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(PacfError::InvalidConfig(format!(
                    "loss weight {name} = {w} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }
}

/// Cosine-softmax posterior of a feature over one prototype set, kept together
/// with what the backward pass needs.
#[derive(Clone, Debug)]
pub struct PrototypePosterior {
    pub probs: ProbabilityVector,
    pub cosines: Vec<f64>,
    cos_grads: Vec<Vec<f64>>,
    tau: f64,
}

impl PrototypePosterior {
    pub fn new(x: &[f64], set: &PrototypeSet, tau: f64) -> Result<Self> {
        ensure_same_len(set.dim(), x.len())?;
        let c = set.class_count();
        let mut cosines = Vec::with_capacity(c);
        let mut cos_grads = Vec::with_capacity(c);
        for k in 0..c {
            let mu = set.get(k)?;
            cosines.push(cosine_similarity(mu, x)?);
            cos_grads.push(cosine_gradient(mu, x)?);
        }
        let probs = if c == 1 {
            sigmoid_probability(cosines[0], tau)?
        } else {
            temperature_softmax(&cosines, tau)?
        };
        Ok(PrototypePosterior {
            probs,
            cosines,
            cos_grads,
            tau,
        })
    }

    /// Gradient on the feature given a gradient on `probs`.
    pub fn backward(&self, grad_probs: &[f64]) -> Vec<f64> {
        let grad_scores = if self.cosines.len() == 1 {
            vec![sigmoid_backward(&self.probs, grad_probs, self.tau)]
        } else {
            softmax_backward(&self.probs, grad_probs, self.tau)
        };
        self.backward_scores(&grad_scores)
    }

    fn backward_scores(&self, grad_scores: &[f64]) -> Vec<f64> {
        let dim = self.cos_grads[0].len();
        let mut grad = vec![0.0; dim];
        for (g, dcos) in grad_scores.iter().zip(&self.cos_grads) {
            for (acc, d) in grad.iter_mut().zip(dcos) {
                *acc += g * d;
            }
        }
        grad
    }

    /// `−ln probs[label]` (computed in log space) and its feature gradient.
    pub fn neg_log_likelihood(&self, label: usize) -> Result<(f64, Vec<f64>)> {
        let c = self.cosines.len();
        if label >= c {
            return Err(PacfError::ClassOutOfRange {
                class: label,
                class_count: c,
            });
        }
        if c == 1 {
            let z = self.cosines[0] / self.tau;
            // −ln σ(z) = softplus(−z)
            let value = softplus(-z);
            let grad_score = -sigmoid(-z) / self.tau;
            return Ok((value, self.backward_scores(&[grad_score])));
        }
        let scaled: Vec<f64> = self.cosines.iter().map(|s| s / self.tau).collect();
        let (top, max) = crate::mathcore::argmax(&scaled);
        let rest: f64 = scaled
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != top)
            .map(|(_, s)| (s - max).exp())
            .sum();
        let value = (max - scaled[label]) + rest.ln_1p();
        let grad_scores: Vec<f64> = self
            .probs
            .iter()
            .enumerate()
            .map(|(k, p)| (p - if k == label { 1.0 } else { 0.0 }) / self.tau)
            .collect();
        Ok((value, self.backward_scores(&grad_scores)))
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Softmax over `cos(μ_k, x) / τ`; sigmoid pair for a single class.
pub fn prototype_posterior(x: &[f64], set: &PrototypeSet, tau: f64) -> Result<ProbabilityVector> {
    Ok(PrototypePosterior::new(x, set, tau)?.probs)
}

/// `−ln p_src(ỹ | x) − ln p_tgt(ỹ | x)` with its gradient on `x`.
pub fn prototype_cross_entropy(
    x: &[f64],
    pseudo_label: usize,
    src: &PrototypeSet,
    tgt: &PrototypeSet,
    tau: f64,
) -> Result<LossValue> {
    let (vs, gs) = PrototypePosterior::new(x, src, tau)?.neg_log_likelihood(pseudo_label)?;
    let (vt, gt) = PrototypePosterior::new(x, tgt, tau)?.neg_log_likelihood(pseudo_label)?;
    Ok(LossValue {
        value: vs + vt,
        grad_features: vec![gs.iter().zip(&gt).map(|(a, b)| a + b).collect()],
        grad_params: Vec::new(),
    })
}

/// A loss over three distributions with gradients on each of them.
#[derive(Clone, Debug, PartialEq)]
pub struct DistributionLoss {
    pub value: f64,
    pub grad_lin: Vec<f64>,
    pub grad_src: Vec<f64>,
    pub grad_tgt: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegularizerKind {
    L2,
    Kl,
    Jsd,
}

/// `JS(p_lin ‖ p_src) + JS(p_lin ‖ p_tgt)`.
pub fn mutual_regularization(
    p_lin: &[f64],
    p_src: &[f64],
    p_tgt: &[f64],
) -> Result<DistributionLoss> {
    regularizer_variant(p_lin, p_src, p_tgt, RegularizerKind::Jsd)
}

pub fn regularizer_variant(
    p_lin: &[f64],
    p_src: &[f64],
    p_tgt: &[f64],
    kind: RegularizerKind,
) -> Result<DistributionLoss> {
    ensure_same_len(p_lin.len(), p_src.len())?;
    ensure_same_len(p_lin.len(), p_tgt.len())?;
    let pair = |other: &[f64]| -> Result<(f64, Vec<f64>, Vec<f64>)> {
        match kind {
            RegularizerKind::L2 => {
                let diff: Vec<f64> = p_lin.iter().zip(other).map(|(a, b)| a - b).collect();
                let value = diff.iter().map(|d| d * d).sum();
                let g_lin: Vec<f64> = diff.iter().map(|d| 2.0 * d).collect();
                let g_other = g_lin.iter().map(|g| -g).collect();
                Ok((value, g_lin, g_other))
            }
            RegularizerKind::Kl => {
                let (g_lin, g_other) = kl_divergence_grad(p_lin, other)?;
                Ok((kl_divergence(p_lin, other)?, g_lin, g_other))
            }
            RegularizerKind::Jsd => {
                let (g_lin, g_other) = js_divergence_grad(p_lin, other)?;
                Ok((js_divergence(p_lin, other)?, g_lin, g_other))
            }
        }
    };
    let (vs, gl_s, grad_src) = pair(p_src)?;
    let (vt, gl_t, grad_tgt) = pair(p_tgt)?;
    Ok(DistributionLoss {
        value: vs + vt,
        grad_lin: gl_s.iter().zip(&gl_t).map(|(a, b)| a + b).collect(),
        grad_src,
        grad_tgt,
    })
}

/// Class posterior of the linear head: softmax of the logits, or the sigmoid
/// pair `[σ(z), 1 − σ(z)]` when there is a single logit.
pub fn linear_posterior(logits: &[f64]) -> Result<ProbabilityVector> {
    if logits.len() == 1 {
        sigmoid_probability(logits[0], 1.0)
    } else {
        temperature_softmax(logits, 1.0)
    }
}

/// Pulls a gradient on [`linear_posterior`] back onto the logits.
pub fn linear_posterior_backward(
    probs: &[f64],
    grad_probs: &[f64],
    logit_count: usize,
) -> Vec<f64> {
    if logit_count == 1 {
        vec![sigmoid_backward(probs, grad_probs, 1.0)]
    } else {
        softmax_backward(probs, grad_probs, 1.0)
    }
}

/// `−ln p_lin[label]`; `grad_params` is the gradient on the logits that produced `p_lin`.
pub fn classification_loss(
    p_lin: &ProbabilityVector,
    label: usize,
    logit_count: usize,
) -> Result<LossValue> {
    if label >= p_lin.len() || label >= logit_count.max(1) {
        return Err(PacfError::ClassOutOfRange {
            class: label,
            class_count: logit_count,
        });
    }
    let grad_logits: Vec<f64> = if logit_count == 1 {
        // d(−ln σ(z))/dz = −(1 − σ(z))
        vec![-p_lin[1]]
    } else {
        p_lin
            .iter()
            .enumerate()
            .map(|(k, p)| p - if k == label { 1.0 } else { 0.0 })
            .collect()
    };
    Ok(LossValue {
        value: -clamped_ln(p_lin[label]),
        grad_features: Vec::new(),
        grad_params: grad_logits,
    })
}

/// Logistic domain classifier over features: `P(target | x) = σ(w·x + b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl Discriminator {
    pub fn zeros(dim: usize) -> Self {
        Discriminator {
            weights: vec![0.0; dim],
            bias: 0.0,
        }
    }

    pub fn logit(&self, x: &[f64]) -> f64 {
        crate::mathcore::dot(&self.weights, x) + self.bias
    }
}

fn domain_target(domain: Domain) -> f64 {
    match domain {
        Domain::Source => 0.0,
        Domain::Target => 1.0,
    }
}

/// Binary cross-entropy of the discriminator without gradient reversal.
///
/// `grad_params` is laid out as `[weights..., bias]`.
pub fn discriminator_loss(x: &[f64], domain: Domain, disc: &Discriminator) -> Result<LossValue> {
    ensure_same_len(disc.weights.len(), x.len())?;
    let z = disc.logit(x);
    let y = domain_target(domain);
    let value = softplus(z) - y * z;
    let dz = sigmoid(z) - y;
    let grad_x = disc.weights.iter().map(|w| dz * w).collect();
    let mut grad_params: Vec<f64> = x.iter().map(|v| dz * v).collect();
    grad_params.push(dz);
    Ok(LossValue {
        value,
        grad_features: vec![grad_x],
        grad_params,
    })
}

/// [`discriminator_loss`] with the feature gradient sign-flipped; the
/// discriminator's own gradient is untouched.
pub fn domain_adversarial_loss(
    x: &[f64],
    domain: Domain,
    disc: &Discriminator,
) -> Result<LossValue> {
    let mut loss = discriminator_loss(x, domain, disc)?;
    for g in &mut loss.grad_features {
        for v in g.iter_mut() {
            *v = -*v;
        }
    }
    Ok(loss)
}

/// The five terms of the composed objective, all shaped alike.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub sup: LossValue,
    pub unsup: LossValue,
    pub dis: LossValue,
    pub pce: LossValue,
    pub mutual: LossValue,
}

fn accumulate(total: &mut LossValue, part: &LossValue, weight: f64) -> Result<()> {
    total.value += weight * part.value;
    if !part.grad_features.is_empty() {
        if total.grad_features.is_empty() {
            total.grad_features = part
                .grad_features
                .iter()
                .map(|g| vec![0.0; g.len()])
                .collect();
        }
        ensure_same_len(total.grad_features.len(), part.grad_features.len())?;
        for (acc, g) in total.grad_features.iter_mut().zip(&part.grad_features) {
            ensure_same_len(acc.len(), g.len())?;
            for (a, v) in acc.iter_mut().zip(g) {
                *a += weight * v;
            }
        }
    }
    if !part.grad_params.is_empty() {
        if total.grad_params.is_empty() {
            total.grad_params = vec![0.0; part.grad_params.len()];
        }
        ensure_same_len(total.grad_params.len(), part.grad_params.len())?;
        for (a, v) in total.grad_params.iter_mut().zip(&part.grad_params) {
            *a += weight * v;
        }
    }
    Ok(())
}

/// `sup + λ_unsup·unsup + λ_dis·dis + λ1·pce + λ2·mut`, values and gradients alike.
///
/// Terms with zero weight are skipped, so they cannot perturb the sum.
pub fn total_loss(components: &LossComponents, weights: &LossWeights) -> Result<LossValue> {
    weights.validate()?;
    let mut total = components.sup.clone();
    for (part, w) in [
        (&components.unsup, weights.unsup),
        (&components.dis, weights.dis),
        (&components.pce, weights.pce),
        (&components.mutual, weights.mutual),
    ] {
        if w != 0.0 {
            accumulate(&mut total, part, w)?;
        }
    }
    Ok(total)
}
