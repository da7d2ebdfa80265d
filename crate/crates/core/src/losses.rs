//! Training objectives and their gradients with respect to the logits.
//!
//! Softmax losses take the class probabilities produced by the network and
//! return `d loss / d logits`. The evidential loss works on the non-negative
//! evidence `softplus(logits)`; [`LossSpec::evaluate`] applies the chain rule.

use crate::special::{digamma, ln_gamma, trigamma};
use crate::{Error, Result};

/// Probabilities are floored here before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    LabelSmoothing,
    ConfidencePenalty,
    Conflictual,
    Edl,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossSpec {
    pub kind: LossKind,
    pub epsilon_ls: f64,
    pub beta_cp: f64,
    pub lambda_conflict: f64,
    pub lambda_edl: f64,
    pub favored_class: Option<usize>,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec {
            kind: LossKind::CrossEntropy,
            epsilon_ls: 0.1,
            beta_cp: 0.1,
            lambda_conflict: 0.05,
            lambda_edl: 0.01,
            favored_class: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    pub grad_logits: Vec<f64>,
    /// Set when a probability had to be floored at [`PROB_FLOOR`].
    pub clamped: bool,
}

impl LossSpec {
    pub fn with_kind(kind: LossKind) -> Self {
        LossSpec {
            kind,
            ..LossSpec::default()
        }
    }

    pub fn conflictual(favored_class: usize, lambda: f64) -> Self {
        LossSpec {
            kind: LossKind::Conflictual,
            lambda_conflict: lambda,
            favored_class: Some(favored_class),
            ..LossSpec::default()
        }
    }

    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if !(0.0..1.0).contains(&self.epsilon_ls) {
            return Err(Error::input("epsilon_ls must lie in [0, 1)"));
        }
        if !(self.beta_cp >= 0.0) || !(self.lambda_conflict >= 0.0) || !(self.lambda_edl >= 0.0) {
            return Err(Error::input("loss coefficients must be non-negative"));
        }
        match (self.kind, self.favored_class) {
            (LossKind::Conflictual, Some(c)) if c < n_classes => Ok(()),
            (LossKind::Conflictual, Some(c)) => {
                Err(Error::input(format!("favored class {c} out of range for {n_classes} classes")))
            }
            (LossKind::Conflictual, None) => Err(Error::input("conflictual loss needs a favored class")),
            (_, Some(_)) => Err(Error::input("favored class is only valid for the conflictual loss")),
            (_, None) => Ok(()),
        }
    }

    /// Per-sample loss and logit gradient for one network output row.
    pub fn evaluate(&self, logits: &[f64], probs: &[f64], y: usize) -> Result<LossValue> {
        match self.kind {
            LossKind::CrossEntropy => cross_entropy(probs, y),
            LossKind::LabelSmoothing => label_smoothing_ce(probs, y, self.epsilon_ls),
            LossKind::ConfidencePenalty => confidence_penalty_ce(probs, y, self.beta_cp),
            LossKind::Conflictual => {
                let c = self
                    .favored_class
                    .ok_or_else(|| Error::input("conflictual loss needs a favored class"))?;
                conflictual_loss(probs, y, c, self.lambda_conflict)
            }
            LossKind::Edl => {
                let evidence: Vec<f64> = logits.iter().map(|&z| softplus(z)).collect();
                let v = edl_loss(&evidence, y, self.lambda_edl)?;
                let grad_logits = v
                    .grad_evidence
                    .iter()
                    .zip(logits)
                    .map(|(g, &z)| g * sigmoid(z))
                    .collect();
                Ok(LossValue {
                    loss: v.loss,
                    grad_logits,
                    clamped: false,
                })
            }
        }
    }
}

fn check(probs: &[f64], y: usize) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::input("empty probability vector"));
    }
    if y >= probs.len() {
        return Err(Error::input(format!("label {y} out of range for {} classes", probs.len())));
    }
    Ok(())
}

fn floored_ln(p: f64, clamped: &mut bool) -> f64 {
    if p < PROB_FLOOR {
        *clamped = true;
        PROB_FLOOR.ln()
    } else {
        p.ln()
    }
}

/// `-ln p_y`, gradient `p - onehot(y)`.
pub fn cross_entropy(probs: &[f64], y: usize) -> Result<LossValue> {
    check(probs, y)?;
    let mut clamped = false;
    let loss = -floored_ln(probs[y], &mut clamped);
    let mut grad = probs.to_vec();
    grad[y] -= 1.0;
    Ok(LossValue {
        loss,
        grad_logits: grad,
        clamped,
    })
}

/// Smoothed target `q = (1-eps) onehot(y) + eps/C`.
pub fn smoothed_target(n_classes: usize, y: usize, eps: f64) -> Vec<f64> {
    let mut q = vec![eps / n_classes as f64; n_classes];
    q[y] += 1.0 - eps;
    q
}

/// Cross-entropy against the smoothed target; gradient `p - q`.
pub fn label_smoothing_ce(probs: &[f64], y: usize, eps: f64) -> Result<LossValue> {
    check(probs, y)?;
    let q = smoothed_target(probs.len(), y, eps);
    let mut clamped = false;
    let mut loss = 0.0;
    for (&qc, &pc) in q.iter().zip(probs) {
        if qc > 0.0 {
            loss -= qc * floored_ln(pc, &mut clamped);
        }
    }
    let grad = probs.iter().zip(&q).map(|(p, q)| p - q).collect();
    Ok(LossValue {
        loss,
        grad_logits: grad,
        clamped,
    })
}

/// `-ln p_y - beta * H(p)`.
///
/// Since `dH/dz_j = -p_j (ln p_j + H)`, the logit gradient is
/// `p - onehot(y) + beta * p_j (ln p_j + H)`.
pub fn confidence_penalty_ce(probs: &[f64], y: usize, beta: f64) -> Result<LossValue> {
    check(probs, y)?;
    let mut clamped = false;
    let logs: Vec<f64> = probs.iter().map(|&p| floored_ln(p, &mut clamped)).collect();
    let entropy: f64 = -probs.iter().zip(&logs).map(|(p, l)| p * l).sum::<f64>();
    let loss = -logs[y] - beta * entropy;
    let mut grad: Vec<f64> = probs
        .iter()
        .zip(&logs)
        .map(|(&p, &l)| p + beta * p * (l + entropy))
        .collect();
    grad[y] -= 1.0;
    Ok(LossValue {
        loss,
        grad_logits: grad,
        clamped,
    })
}

/// Class-biased likelihood `-(ln p_y + lambda ln p_c)`.
///
/// Gradient `(1+lambda) p - onehot(y) - lambda onehot(c)`. With `lambda = 0`
/// the result is bit-identical to [`cross_entropy`].
pub fn conflictual_loss(probs: &[f64], y: usize, c: usize, lambda: f64) -> Result<LossValue> {
    check(probs, y)?;
    if c >= probs.len() {
        return Err(Error::input(format!("favored class {c} out of range for {} classes", probs.len())));
    }
    let mut clamped = false;
    let loss = -(floored_ln(probs[y], &mut clamped) + lambda * floored_ln(probs[c], &mut clamped));
    let mut grad: Vec<f64> = probs.iter().map(|&p| (1.0 + lambda) * p).collect();
    grad[y] -= 1.0;
    grad[c] -= lambda;
    Ok(LossValue {
        loss,
        grad_logits: grad,
        clamped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdlValue {
    pub loss: f64,
    pub bayes_risk: f64,
    pub kl: f64,
    /// Gradient with respect to the evidence (equivalently the concentrations).
    pub grad_evidence: Vec<f64>,
}

/// Expected squared error under `Dir(alpha)`, `alpha = evidence + 1`, plus
/// `lambda * KL(Dir(alpha_tilde) || Dir(1))` where `alpha_tilde` replaces the
/// true-class concentration by 1.
pub fn edl_loss(evidence: &[f64], y: usize, lambda: f64) -> Result<EdlValue> {
    if evidence.is_empty() || y >= evidence.len() {
        return Err(Error::input(format!("label {y} out of range for {} classes", evidence.len())));
    }
    if evidence.iter().any(|e| !e.is_finite() || *e < 0.0) {
        return Err(Error::input("evidence must be finite and non-negative"));
    }
    let k = evidence.len();
    let alpha: Vec<f64> = evidence.iter().map(|e| e + 1.0).collect();
    let s: f64 = alpha.iter().sum();
    let p: Vec<f64> = alpha.iter().map(|a| a / s).collect();
    let sum_p2: f64 = p.iter().map(|v| v * v).sum();

    let mut risk = 0.0;
    for (c, &pc) in p.iter().enumerate() {
        let yc = if c == y { 1.0 } else { 0.0 };
        risk += (yc - pc).powi(2) + pc * (1.0 - pc) / (s + 1.0);
    }
    // d(sum_c (y_c - p_c)^2)/d alpha_j = -2/S [(y_j - p_j) - sum_c (y_c - p_c) p_c]
    let resid_dot: f64 = p
        .iter()
        .enumerate()
        .map(|(c, &pc)| (if c == y { 1.0 } else { 0.0 } - pc) * pc)
        .sum();
    let mut grad: Vec<f64> = (0..k)
        .map(|j| {
            let yj = if j == y { 1.0 } else { 0.0 };
            let d_sq = -2.0 / s * ((yj - p[j]) - resid_dot);
            let d_var = -2.0 * (p[j] - sum_p2) / (s * (s + 1.0)) - (1.0 - sum_p2) / (s + 1.0).powi(2);
            d_sq + d_var
        })
        .collect();

    let tilde: Vec<f64> = alpha
        .iter()
        .enumerate()
        .map(|(c, &a)| if c == y { 1.0 } else { a })
        .collect();
    let s_t: f64 = tilde.iter().sum();
    let psi_s = digamma(s_t);
    let kl = ln_gamma(s_t) - ln_gamma(k as f64) - tilde.iter().map(|&a| ln_gamma(a)).sum::<f64>()
        + tilde.iter().map(|&a| (a - 1.0) * (digamma(a) - psi_s)).sum::<f64>();
    let tri_s = trigamma(s_t);
    for (j, g) in grad.iter_mut().enumerate() {
        if j != y {
            *g += lambda * ((tilde[j] - 1.0) * trigamma(tilde[j]) - (s_t - k as f64) * tri_s);
        }
    }
    Ok(EdlValue {
        loss: risk + lambda * kl,
        bayes_risk: risk,
        kl,
        grad_evidence: grad,
    })
}

pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::softmax_in_place;
    use proptest::prelude::*;

    fn softmax(z: &[f64]) -> Vec<f64> {
        let mut p = z.to_vec();
        softmax_in_place(&mut p);
        p
    }

    /// Central differences of `spec` through softmax (or softplus for EDL).
    fn fd_check(spec: &LossSpec, logits: &[f64], y: usize) {
        let value = spec.evaluate(logits, &softmax(logits), y).unwrap();
        let h = 1e-5;
        for j in 0..logits.len() {
            let mut up = logits.to_vec();
            up[j] += h;
            let mut dn = logits.to_vec();
            dn[j] -= h;
            let lu = spec.evaluate(&up, &softmax(&up), y).unwrap().loss;
            let ld = spec.evaluate(&dn, &softmax(&dn), y).unwrap().loss;
            let fd = (lu - ld) / (2.0 * h);
            let a = value.grad_logits[j];
            let denom = a.abs().max(fd.abs()).max(1e-7);
            assert!((a - fd).abs() / denom < 1e-4, "{:?} logit {j}: {a} vs {fd}", spec.kind);
        }
    }

    #[test]
    fn cross_entropy_values() {
        assert_eq!(cross_entropy(&[0.0, 1.0], 1).unwrap().loss, 0.0);
        assert!((cross_entropy(&[0.8, 0.2], 0).unwrap().loss - 0.223_144).abs() < 1e-6);
        let uni = vec![0.1; 10];
        assert!((cross_entropy(&uni, 3).unwrap().loss - 2.302_585).abs() < 1e-6);
        let g = cross_entropy(&[0.5, 0.5], 0).unwrap().grad_logits;
        assert_eq!(g, vec![-0.5, 0.5]);
    }

    #[test]
    fn zero_probability_is_clamped() {
        let v = cross_entropy(&[1.0, 0.0], 1).unwrap();
        assert!(v.clamped);
        assert!((v.loss + PROB_FLOOR.ln()).abs() < 1e-12);
        assert!(cross_entropy(&[1.0, 0.0], 2).is_err());
    }

    #[test]
    fn label_smoothing_values() {
        let p = [0.7, 0.2, 0.1];
        let a = label_smoothing_ce(&p, 1, 0.0).unwrap();
        let b = cross_entropy(&p, 1).unwrap();
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.grad_logits, b.grad_logits);
        let uni = vec![0.1; 10];
        for eps in [0.0, 0.1, 0.5, 0.9] {
            assert!((label_smoothing_ce(&uni, 4, eps).unwrap().loss - 10f64.ln()).abs() < 1e-12);
        }
        assert!((label_smoothing_ce(&[0.5, 0.5], 0, 0.999_999_999).unwrap().loss - 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn confidence_penalty_values() {
        let p = [0.6, 0.3, 0.1];
        assert_eq!(confidence_penalty_ce(&p, 0, 0.0).unwrap().loss, cross_entropy(&p, 0).unwrap().loss);
        let uni = vec![0.1; 10];
        let v = confidence_penalty_ce(&uni, 0, 0.1).unwrap();
        assert!((v.loss - 2.072_327).abs() < 1e-6);
    }

    #[test]
    fn conflictual_values() {
        let p = [0.8, 0.1, 0.1];
        let v = conflictual_loss(&p, 0, 1, 0.05).unwrap();
        assert!((v.loss - 0.338_273).abs() < 1e-6);
        let z = conflictual_loss(&p, 0, 2, 0.0).unwrap();
        let ce = cross_entropy(&p, 0).unwrap();
        assert_eq!(z.loss, ce.loss);
        assert_eq!(z.grad_logits, ce.grad_logits);
    }

    #[test]
    fn conflictual_lambda_counts_faked_examples() {
        // Summing the biased loss over 20 samples equals 20 real samples plus
        // one faked example of class c.
        let rows: Vec<[f64; 3]> = (0..20)
            .map(|i| {
                let a = 0.2 + 0.03 * i as f64;
                let b = (1.0 - a) * 0.6;
                [a, b, 1.0 - a - b]
            })
            .collect();
        let c = 2;
        let biased: f64 = rows.iter().map(|r| conflictual_loss(r, 0, c, 0.05).unwrap().loss).sum();
        let real: f64 = rows.iter().map(|r| cross_entropy(r, 0).unwrap().loss).sum();
        let faked: f64 = rows.iter().map(|r| cross_entropy(r, c).unwrap().loss).sum::<f64>() / 20.0;
        assert!((biased - (real + faked)).abs() < 1e-12);
    }

    #[test]
    fn edl_values() {
        let v = edl_loss(&[0.0, 0.0], 0, 0.01).unwrap();
        assert!((v.bayes_risk - (0.5 + 1.0 / 6.0)).abs() < 1e-12);
        assert!(v.kl.abs() < 1e-12);
        assert!((v.loss - 0.666_667).abs() < 1e-6);
        let big = edl_loss(&[1e9, 0.0, 0.0], 0, 0.01).unwrap();
        assert!(big.loss < 1e-8);
        assert!(edl_loss(&[f64::NAN, 0.0], 0, 0.01).is_err());
        assert!(edl_loss(&[-1.0, 0.0], 0, 0.01).is_err());
    }

    #[test]
    fn edl_kl_matches_reference_formula() {
        // KL(Dir(2,3) || Dir(1,1)) = lnG(5) - lnG(2) - lnG(2) - lnG(3)
        //   + 1*(psi(2)-psi(5)) + 2*(psi(3)-psi(5))  with y = class 2 held at 1.
        let v = edl_loss(&[1.0, 2.0, 7.0], 2, 1.0).unwrap();
        let psi = digamma;
        let expect = ln_gamma(6.0) - ln_gamma(3.0) - ln_gamma(2.0) - ln_gamma(3.0) - ln_gamma(1.0)
            + 1.0 * (psi(2.0) - psi(6.0))
            + 2.0 * (psi(3.0) - psi(6.0));
        assert!((v.kl - expect).abs() < 1e-12, "{} vs {expect}", v.kl);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let logits = [0.3, -1.2, 2.1, 0.4];
        for y in 0..4 {
            fd_check(&LossSpec::with_kind(LossKind::CrossEntropy), &logits, y);
            fd_check(&LossSpec::with_kind(LossKind::LabelSmoothing), &logits, y);
            fd_check(&LossSpec::with_kind(LossKind::ConfidencePenalty), &logits, y);
            fd_check(&LossSpec::conflictual((y + 1) % 4, 0.05), &logits, y);
            fd_check(&LossSpec::conflictual(y, 0.3), &logits, y);
            fd_check(&LossSpec::with_kind(LossKind::Edl), &logits, y);
        }
    }

    #[test]
    fn spec_validation() {
        assert!(LossSpec::conflictual(3, 0.05).validate(3).is_err());
        assert!(LossSpec::with_kind(LossKind::Conflictual).validate(3).is_err());
        assert!(LossSpec::conflictual(2, 0.05).validate(3).is_ok());
        let mut s = LossSpec::with_kind(LossKind::LabelSmoothing);
        s.epsilon_ls = 1.0;
        assert!(s.validate(3).is_err());
    }

    proptest! {
        #[test]
        fn losses_respect_lower_bounds(
            logits in proptest::collection::vec(-6.0f64..6.0, 2..8),
            ysel in 0usize..100,
            beta in 0.0f64..2.0,
        ) {
            let c = logits.len();
            let y = ysel % c;
            let p = softmax(&logits);
            prop_assert!(cross_entropy(&p, y).unwrap().loss >= 0.0);
            prop_assert!(label_smoothing_ce(&p, y, 0.1).unwrap().loss >= 0.0);
            prop_assert!(conflictual_loss(&p, y, (y + 1) % c, 0.05).unwrap().loss >= 0.0);
            let cp = confidence_penalty_ce(&p, y, beta).unwrap().loss;
            prop_assert!(cp >= -beta * (c as f64).ln() - 1e-12);
            let ev: Vec<f64> = logits.iter().map(|&z| softplus(z)).collect();
            prop_assert!(edl_loss(&ev, y, 0.01).unwrap().loss >= 0.0);
        }

        #[test]
        fn conflictual_without_bias_is_cross_entropy(
            logits in proptest::collection::vec(-6.0f64..6.0, 2..8),
            ysel in 0usize..100,
            csel in 0usize..100,
        ) {
            let c = logits.len();
            let p = softmax(&logits);
            let a = conflictual_loss(&p, ysel % c, csel % c, 0.0).unwrap();
            let b = cross_entropy(&p, ysel % c).unwrap();
            prop_assert_eq!(a.loss, b.loss);
            prop_assert_eq!(a.grad_logits, b.grad_logits);
        }

        #[test]
        fn smoothed_target_is_a_distribution(c in 2usize..20, ysel in 0usize..100, eps in 0.0f64..=1.0) {
            let q = smoothed_target(c, ysel % c, eps);
            prop_assert!(q.iter().all(|&v| v >= 0.0));
            prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
