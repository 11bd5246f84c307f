//! Probability transforms, losses and their gradients, plus a central
//! finite-difference harness used to validate every hand-derived gradient.
//!
//! All arithmetic is `f64`. Reduced precision only appears at the index and
//! checkpoint boundaries.

use crate::error::{Error, Result};

/// Default probing step for [`finite_difference_check`].
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Step for checks that run through a whole encoder. At smaller steps the rounding
/// noise of the loss sum exceeds the 1e-8 floor on directions whose true
/// gradient is exactly zero.
pub const MODEL_FD_STEP: f64 = 1e-3;

/// Guard added to the relative-error denominator so exact-zero gradients
/// compare cleanly.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// A probability vector produced by [`softmax`].
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    /// Wraps an explicit probability vector, checking that it lies on the simplex.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("empty distribution"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invalid(
                "distribution entries must be finite and non-negative",
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("distribution sums to {total}")));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.is_empty() {
        return Err(Error::invalid(format!("{what} is empty")));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{what}[{i}] = {}", values[i])));
    }
    Ok(())
}

/// Index of the largest entry; the first one wins on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Temperature softmax, stabilised by subtracting the maximum logit.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<Distribution> {
    check_finite(logits, "logits")?;
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    Ok(Distribution {
        probs: softmax_unchecked(logits, temperature),
    })
}

pub(crate) fn softmax_unchecked(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .map(|l| ((l - max) / temperature).exp())
        .collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// `ln softmax(logits / temperature)`.
pub fn log_softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    check_finite(logits, "logits")?;
    if !(temperature > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    Ok(log_softmax_unchecked(logits, temperature))
}

pub(crate) fn log_softmax_unchecked(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = logits.iter().map(|l| (l - max) / temperature).collect();
    let lse = scaled.iter().map(|s| s.exp()).sum::<f64>().ln();
    scaled.into_iter().map(|s| s - lse).collect()
}

/// `KL(p || q) = sum_i p_i ln(p_i / q_i)` with `0 ln 0 = 0`.
///
/// The first argument is the teacher/reference distribution.
pub fn kl_divergence(p: &Distribution, q: &Distribution) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::invalid(format!(
            "kl_divergence length mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let mut total = 0.0;
    for (pi, qi) in p.probs.iter().zip(&q.probs) {
        if *pi > 0.0 {
            if *qi <= 0.0 {
                return Err(Error::invalid("q has a zero entry where p is positive"));
            }
            total += pi * (pi / qi).ln();
        }
    }
    Ok(total.max(0.0))
}

/// KL between temperature-softened teacher and student logits, with the
/// gradient of the loss with respect to the student logits.
///
/// `d/ds KL(softmax(t/τ) || softmax(s/τ)) = (softmax(s/τ) - softmax(t/τ)) / τ`.
pub fn softened_kl_with_grad(
    teacher: &[f64],
    student: &[f64],
    temperature: f64,
) -> Result<(f64, Vec<f64>)> {
    if teacher.len() != student.len() {
        return Err(Error::invalid("softened_kl length mismatch"));
    }
    // Both sides go through the same log-softmax so identical logits give an
    // exactly zero loss and gradient.
    let log_p = log_softmax(teacher, temperature)?;
    let log_q = log_softmax(student, temperature)?;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(log_p.len());
    for (lp, lq) in log_p.iter().zip(&log_q) {
        let p = lp.exp();
        if p > 0.0 {
            loss += p * (lp - lq);
        }
        grad.push((lq.exp() - p) / temperature);
    }
    Ok((loss.max(0.0), grad))
}

/// Logistic function without overflow for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` computed stably.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Mean binary cross-entropy: `-[sum_pos ln σ(s) + sum_neg ln(1 - σ(s))] / n`.
pub fn bce_loss(scores: &[f64], labels: &[f64]) -> Result<f64> {
    Ok(bce_loss_with_grad(scores, labels)?.0)
}

/// [`bce_loss`] plus `d loss / d scores`.
pub fn bce_loss_with_grad(scores: &[f64], labels: &[f64]) -> Result<(f64, Vec<f64>)> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!(
            "bce_loss length mismatch: {} scores, {} labels",
            scores.len(),
            labels.len()
        )));
    }
    check_finite(scores, "scores")?;
    if labels.iter().any(|y| *y != 0.0 && *y != 1.0) {
        return Err(Error::invalid("labels must be 0 or 1"));
    }
    let n = scores.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(scores.len());
    for (s, y) in scores.iter().zip(labels) {
        // -ln σ(s) = softplus(-s); -ln(1-σ(s)) = softplus(s)
        loss += if *y == 1.0 {
            softplus(-s)
        } else {
            softplus(*s)
        };
        grad.push((sigmoid(*s) - y) / n);
    }
    Ok((loss / n, grad))
}

/// `-ln softmax(logits)[target]`.
pub fn nll_of_index(logits: &[f64], target: usize) -> Result<f64> {
    Ok(nll_of_index_with_grad(logits, target)?.0)
}

/// [`nll_of_index`] plus `softmax(logits) - onehot(target)`.
pub fn nll_of_index_with_grad(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    check_finite(logits, "logits")?;
    if target >= logits.len() {
        return Err(Error::invalid(format!(
            "target index {target} out of range for {} logits",
            logits.len()
        )));
    }
    let log_p = log_softmax_unchecked(logits, 1.0);
    let mut grad: Vec<f64> = log_p.iter().map(|l| l.exp()).collect();
    grad[target] -= 1.0;
    Ok((-log_p[target], grad))
}

/// Outcome of [`finite_difference_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub parameter_count: usize,
    pub errors: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheckReport {
    pub fn worst_parameter(&self) -> usize {
        argmax(&self.errors)
    }
}

/// Relative error with a `max(|a|, |b|, 1e-8)` denominator.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Compares `analytic_grad` against central differences of `loss_fn` around `params`.
pub fn finite_difference_check<F>(
    mut loss_fn: F,
    params: &[f64],
    analytic_grad: &[f64],
    step: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if params.len() != analytic_grad.len() {
        return Err(Error::invalid(format!(
            "{} params but {} gradient entries",
            params.len(),
            analytic_grad.len()
        )));
    }
    if !(step > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut probe = params.to_vec();
    let mut errors = Vec::with_capacity(params.len());
    let mut numeric = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = loss_fn(&probe);
        probe[i] = orig - step;
        let down = loss_fn(&probe);
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::invalid(format!(
                "non-finite loss while probing parameter {i}"
            )));
        }
        let fd = (up - down) / (2.0 * step);
        errors.push(relative_error(analytic_grad[i], fd));
        numeric.push(fd);
    }
    let max_relative_error = errors.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_relative_error,
        parameter_count: params.len(),
        errors,
        numeric,
    })
}
