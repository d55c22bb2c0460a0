//! Vector geometry and probability primitives.
//!
//! Everything here is a pure `f64` function over slices. Divergences use the
//! natural logarithm and clamp probabilities to `[PROB_EPS, 1]` inside logs.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_len, PacfError, Result};

/// Norms at or below this are rejected as zero vectors.
pub const NORM_EPS: f64 = 1e-12;

/// Lower clamp applied to probabilities inside logarithms.
pub const PROB_EPS: f64 = 1e-12;

/// A finite, non-empty feature vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(PacfError::DimensionMismatch {
                expected: 1,
                got: 0,
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(PacfError::NonFinite("feature vector"));
        }
        Ok(FeatureVector(values))
    }

    pub fn zeros(dim: usize) -> Self {
        FeatureVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for FeatureVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for FeatureVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for FeatureVector {
    type Error = PacfError;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        FeatureVector::new(values)
    }
}

impl From<FeatureVector> for Vec<f64> {
    fn from(v: FeatureVector) -> Vec<f64> {
        v.0
    }
}

/// A categorical distribution over classes.
///
/// The single-class sigmoid variant is stored as the pair `[p, 1 - p]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    /// Validates entries in `[0, 1]` summing to one within `1e-9`.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(PacfError::DimensionMismatch {
                expected: 1,
                got: 0,
            });
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
            return Err(PacfError::NonFinite("probability vector"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(PacfError::InvalidSpec(format!(
                "probabilities sum to {total}, not 1"
            )));
        }
        Ok(ProbabilityVector(probs))
    }

    pub fn uniform(n: usize) -> Self {
        ProbabilityVector(vec![1.0 / n as f64; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Index and value of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> (usize, f64) {
        argmax(&self.0)
    }
}

impl Deref for ProbabilityVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// First index of the maximum value.
pub fn argmax(values: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    (best, values[best])
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n.is_nan() || n <= NORM_EPS {
        return Err(PacfError::ZeroVector { norm: n });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    ensure_same_len(a.len(), b.len())?;
    let na = norm(a);
    let nb = norm(b);
    if na.is_nan() || na <= NORM_EPS {
        return Err(PacfError::ZeroVector { norm: na });
    }
    if nb.is_nan() || nb <= NORM_EPS {
        return Err(PacfError::ZeroVector { norm: nb });
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Gradient of `cos(anchor, x)` with respect to `x`.
///
/// `anchor` is treated as a constant.
pub fn cosine_gradient(anchor: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    ensure_same_len(anchor.len(), x.len())?;
    let na = norm(anchor);
    let nx = norm(x);
    if na.is_nan() || na <= NORM_EPS {
        return Err(PacfError::ZeroVector { norm: na });
    }
    if nx.is_nan() || nx <= NORM_EPS {
        return Err(PacfError::ZeroVector { norm: nx });
    }
    let cos = dot(anchor, x) / (na * nx);
    Ok(anchor
        .iter()
        .zip(x)
        .map(|(a, xi)| a / (na * nx) - cos * xi / (nx * nx))
        .collect())
}

fn check_temperature(tau: f64) -> Result<()> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(PacfError::InvalidTemperature(tau));
    }
    Ok(())
}

/// `softmax(scores / tau)` with max-subtraction.
pub fn temperature_softmax(scores: &[f64], tau: f64) -> Result<ProbabilityVector> {
    check_temperature(tau)?;
    if scores.is_empty() {
        return Err(PacfError::EmptyBatch);
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(PacfError::NonFinite("scores"));
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| ((s - max) / tau).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(ProbabilityVector(
        exps.into_iter().map(|e| e / total).collect(),
    ))
}

/// Pulls a gradient on `softmax(scores / tau)` back onto `scores`.
pub fn softmax_backward(probs: &[f64], grad_probs: &[f64], tau: f64) -> Vec<f64> {
    let inner = dot(probs, grad_probs);
    probs
        .iter()
        .zip(grad_probs)
        .map(|(p, g)| p * (g - inner) / tau)
        .collect()
}

/// Logistic function, branch-stable for large `|z|`.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `[σ(score / tau), 1 − σ(score / tau)]`.
pub fn sigmoid_probability(score: f64, tau: f64) -> Result<ProbabilityVector> {
    check_temperature(tau)?;
    if !score.is_finite() {
        return Err(PacfError::NonFinite("score"));
    }
    let z = score / tau;
    Ok(ProbabilityVector(vec![sigmoid(z), sigmoid(-z)]))
}

/// Backward of [`sigmoid_probability`]: gradient on the score.
pub fn sigmoid_backward(probs: &[f64], grad_probs: &[f64], tau: f64) -> f64 {
    // d p0 / d score = p0 p1 / tau and p1 = 1 - p0
    probs[0] * probs[1] * (grad_probs[0] - grad_probs[1]) / tau
}

pub fn clamped_ln(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0).ln()
}

/// `KL(q ‖ p)` in nats.
pub fn kl_divergence(q: &[f64], p: &[f64]) -> Result<f64> {
    ensure_same_len(q.len(), p.len())?;
    let v: f64 = q
        .iter()
        .zip(p)
        .filter(|(qi, _)| **qi > 0.0)
        .map(|(qi, pi)| qi * (clamped_ln(*qi) - clamped_ln(*pi)))
        .sum();
    Ok(v.max(0.0))
}

/// Gradients of `KL(q ‖ p)` with respect to `q` and `p`, exact for the
/// ε-clamped logs: entries below ε carry no gradient through their log.
pub fn kl_divergence_grad(q: &[f64], p: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    ensure_same_len(q.len(), p.len())?;
    let unclamped = |v: f64| if v >= PROB_EPS { 1.0 } else { 0.0 };
    let gq = q
        .iter()
        .zip(p)
        .map(|(qi, pi)| clamped_ln(*qi) - clamped_ln(*pi) + unclamped(*qi))
        .collect();
    let gp = q
        .iter()
        .zip(p)
        .map(|(qi, pi)| if *pi >= PROB_EPS { -qi / pi } else { 0.0 })
        .collect();
    Ok((gq, gp))
}

fn kl_to_mixture(p: &[f64], m: &[f64]) -> f64 {
    p.iter()
        .zip(m)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, mi)| pi * (clamped_ln(*pi) - clamped_ln(*mi)))
        .sum()
}

/// Jensen-Shannon divergence in nats; bounded by `ln 2`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    ensure_same_len(p.len(), q.len())?;
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let v = 0.5 * (kl_to_mixture(p, &m) + kl_to_mixture(q, &m));
    Ok(v.clamp(0.0, std::f64::consts::LN_2))
}

/// Gradients of `JS(p, q)` with respect to `p` and `q`: `½ ln(p / m)` and
/// `½ ln(q / m)`, plus the indicator terms the ε-clamp leaves behind.
pub fn js_divergence_grad(p: &[f64], q: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    ensure_same_len(p.len(), q.len())?;
    let unclamped = |v: f64| if v >= PROB_EPS { 1.0 } else { 0.0 };
    let mut gp = Vec::with_capacity(p.len());
    let mut gq = Vec::with_capacity(p.len());
    for (a, b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        let ln_m = clamped_ln(m);
        // a zero entry drops out of its own KL term
        let log_term = |v: f64| if v > 0.0 { clamped_ln(v) - ln_m } else { 0.0 };
        gp.push(0.5 * (log_term(*a) + unclamped(*a) - unclamped(m)));
        gq.push(0.5 * (log_term(*b) + unclamped(*b) - unclamped(m)));
    }
    Ok((gp, gq))
}

/// Central-difference gradient `(f(x + h e_i) − f(x − h e_i)) / 2h`.
pub fn finite_difference_gradient<F, E>(
    mut f: F,
    x: &[f64],
    h: f64,
) -> std::result::Result<Vec<f64>, E>
where
    F: FnMut(&[f64]) -> std::result::Result<f64, E>,
{
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe)?;
        probe[i] = x[i] - h;
        let minus = f(&probe)?;
        probe[i] = x[i];
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// `max_i |a_i − b_i| / max(1, max_i |b_i|)`: relative error against a reference gradient.
pub fn relative_gradient_error(analytic: &[f64], reference: &[f64]) -> f64 {
    let scale = reference.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    let diff = analytic
        .iter()
        .zip(reference)
        .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
    diff / scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::convert::Infallible;
    use std::f64::consts::LN_2;

    #[test]
    fn normalize_examples() {
        let v = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        assert_eq!(l2_normalize(&[1.0, 0.0, 0.0]).unwrap(), vec![1.0, 0.0, 0.0]);
        assert!(matches!(
            l2_normalize(&[0.0, 0.0]),
            Err(PacfError::ZeroVector { .. })
        ));
    }

    #[test]
    fn cosine_examples() {
        let v = [0.3, -1.2, 2.0];
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        // 1 / sqrt(2)
        assert!((c - 0.5f64.sqrt()).abs() < 1e-12);
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 0.0]),
            Err(PacfError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(PacfError::ZeroVector { .. })
        ));
    }

    #[test]
    fn softmax_examples() {
        let p = temperature_softmax(&[0.7, 0.7, 0.7], 0.3).unwrap();
        for v in p.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let e = 1f64.exp();
        let p = temperature_softmax(&[1.0, 0.0], 1.0).unwrap();
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((p[0] - 0.73106).abs() < 1e-5 && (p[1] - 0.26894).abs() < 1e-5);

        let p = temperature_softmax(&[0.9, 0.1], 0.05).unwrap();
        let small = 1.0 / (1.0 + 16f64.exp());
        assert!((p[1] - small).abs() < 1e-20);
        assert!((p[1] - 1.1254e-7).abs() < 1e-11);
        assert!(matches!(
            temperature_softmax(&[1.0], 0.0),
            Err(PacfError::InvalidTemperature(_))
        ));
        assert!(temperature_softmax(&[1.0], -1.0).is_err());
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(
            sigmoid_probability(0.0, 1.0).unwrap().as_slice(),
            &[0.5, 0.5]
        );
        let p = sigmoid_probability(800.0, 1.0).unwrap();
        assert_eq!(p[0], 1.0);
        assert!(p[1] < 1e-300);
        let p = sigmoid_probability(0.5, 0.05).unwrap();
        let s10 = 1.0 / (1.0 + (-10f64).exp());
        assert!((p[0] - s10).abs() < 1e-15);
        assert!((p[0] - 0.999_954_6).abs() < 1e-7);
        assert!((p[1] - 4.54e-5).abs() < 1e-7);
        assert!(sigmoid_probability(1.0, 0.0).is_err());
        // stable branch: no overflow for large negative inputs
        assert!(sigmoid(-1000.0) >= 0.0);
    }

    #[test]
    fn kl_examples() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        assert!((kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - LN_2).abs() < 1e-12);
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        let got = kl_divergence(&[0.5, 0.5], &[0.9, 0.1]).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.510_826).abs() < 1e-6);
        assert!(kl_divergence(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn js_examples() {
        let p = [0.25, 0.75];
        assert_eq!(js_divergence(&p, &p).unwrap(), 0.0);
        assert!((js_divergence(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - LN_2).abs() < 1e-12);
        // direct formula: m = [0.5, 0.5], both halves equal KL([0.8,0.2] ‖ m)
        let direct = 0.8 * (0.8f64 / 0.5).ln() + 0.2 * (0.2f64 / 0.5).ln();
        let a = js_divergence(&[0.8, 0.2], &[0.2, 0.8]).unwrap();
        let b = js_divergence(&[0.2, 0.8], &[0.8, 0.2]).unwrap();
        assert!((a - direct).abs() < 1e-12);
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn finite_difference_examples() {
        let sq = |x: &[f64]| Ok::<_, Infallible>(dot(x, x));
        let g = finite_difference_gradient(sq, &[1.0, 2.0], 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);

        let g = finite_difference_gradient(|_| Ok::<_, Infallible>(3.5), &[1.0, -2.0, 0.1], 1e-5)
            .unwrap();
        assert_eq!(g, vec![0.0, 0.0, 0.0]);

        let err = finite_difference_gradient(|_| Err::<f64, _>("boom"), &[1.0], 1e-5);
        assert_eq!(err, Err("boom"));
    }

    #[test]
    fn cosine_gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let mu: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = l2_normalize(
                &(0..6)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect::<Vec<_>>(),
            )
            .unwrap();
            let analytic = cosine_gradient(&mu, &x).unwrap();
            let numeric =
                finite_difference_gradient(|v| cosine_similarity(&mu, v), &x, 1e-5).unwrap();
            for (a, n) in analytic.iter().zip(&numeric) {
                assert!((a - n).abs() < 1e-6, "{a} vs {n}");
            }
        }
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let scores = [0.3, -0.2, 0.9, 0.05];
        let weights = [1.0, -2.0, 0.5, 3.0];
        let tau = 0.7;
        let p = temperature_softmax(&scores, tau).unwrap();
        let analytic = softmax_backward(&p, &weights, tau);
        let numeric = finite_difference_gradient(
            |s| temperature_softmax(s, tau).map(|p| dot(&p, &weights)),
            &scores,
            1e-5,
        )
        .unwrap();
        assert!(relative_gradient_error(&analytic, &numeric) < 1e-8);
    }

    #[test]
    fn feature_vector_rejects_non_finite() {
        assert!(FeatureVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(FeatureVector::new(vec![]).is_err());
        let v: FeatureVector = serde_json::from_str("[1.0, 2.0]").unwrap();
        assert_eq!(v.dim(), 2);
        assert!(ProbabilityVector::new(vec![0.6, 0.6]).is_err());
        assert_eq!(
            ProbabilityVector::new(vec![0.2, 0.5, 0.3])
                .unwrap()
                .argmax(),
            (1, 0.5)
        );
        assert_eq!(argmax(&[1.0, 1.0]).0, 0);
    }
}
