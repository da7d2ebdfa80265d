//! Entropy-based and variance-based uncertainty decompositions.
//!
//! All entropies are in nats.

use crate::special::digamma;
use crate::{Error, Result};

/// Tolerance inside which a negative mutual information is treated as
/// floating-point cancellation and clamped to zero.
pub const MI_CLAMP_TOL: f64 = 1e-9;

/// `S x C` matrix of class distributions, one row per ensemble member or
/// stochastic forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct MemberProbs {
    n_classes: usize,
    rows: Vec<f64>,
}

impl MemberProbs {
    pub fn new(n_classes: usize, rows: Vec<f64>) -> Result<Self> {
        if n_classes == 0 || rows.is_empty() || rows.len() % n_classes != 0 {
            return Err(Error::input(format!(
                "{} values do not form rows of {} classes",
                rows.len(),
                n_classes
            )));
        }
        for row in rows.chunks(n_classes) {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::input(format!("row {row:?} is not a probability vector")));
            }
        }
        Ok(MemberProbs { n_classes, rows })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let c = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::input("rows have different lengths"));
        }
        Self::new(c, rows.concat())
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_samples(&self) -> usize {
        self.rows.len() / self.n_classes
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.rows.chunks(self.n_classes)
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.rows[s * self.n_classes..(s + 1) * self.n_classes]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UncertaintyTriple {
    pub total_entropy: f64,
    pub expected_entropy: f64,
    pub mutual_information: f64,
}

/// Column-wise mean of the member distributions.
///
/// Accumulated as offsets from the first row so identical rows reproduce that
/// row bit-for-bit.
pub fn predictive_mean(mp: &MemberProbs) -> Vec<f64> {
    let first = mp.row(0);
    let mut offset = vec![0.0; mp.n_classes()];
    for row in mp.rows().skip(1) {
        for ((o, v), f) in offset.iter_mut().zip(row).zip(first) {
            *o += v - f;
        }
    }
    let s = mp.n_samples() as f64;
    first.iter().zip(&offset).map(|(f, o)| f + o / s).collect()
}

fn shifted_mean(values: &[f64]) -> f64 {
    let first = values[0];
    first + values[1..].iter().map(|v| v - first).sum::<f64>() / values.len() as f64
}

/// `-sum p ln p` with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// Builds the triple with `total_entropy` stored as `expected + mi`, so the
/// decomposition identity holds bit-exactly.
fn triple(total: f64, expected: f64) -> Result<UncertaintyTriple> {
    let mut mi = total - expected;
    if mi < 0.0 {
        if mi < -MI_CLAMP_TOL {
            return Err(Error::input(format!("negative mutual information {mi}")));
        }
        mi = 0.0;
    }
    Ok(UncertaintyTriple {
        total_entropy: expected + mi,
        expected_entropy: expected,
        mutual_information: mi,
    })
}

/// Total entropy of the predictive mean, expected member entropy, and their
/// difference (the mutual information between label and parameters).
pub fn mutual_information(mp: &MemberProbs) -> UncertaintyTriple {
    let total = entropy(&predictive_mean(mp));
    let row_entropies: Vec<f64> = mp.rows().map(entropy).collect();
    let expected = shifted_mean(&row_entropies);
    // Jensen guarantees total >= expected; any deficit is rounding.
    triple(total, expected).unwrap_or(UncertaintyTriple {
        total_entropy: expected,
        expected_entropy: expected,
        mutual_information: 0.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceDecomposition {
    pub total: f64,
    pub aleatoric: f64,
    pub epistemic: f64,
}

/// Moment decomposition of a uniform mixture of members with the given means
/// and variances: total = mean(vars) + Var(means) (population form).
pub fn variance_decomposition(means: &[f64], vars: &[f64]) -> Result<VarianceDecomposition> {
    if means.is_empty() || means.len() != vars.len() {
        return Err(Error::input("means and variances must be non-empty and equally long"));
    }
    if vars.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::input("member variances must be non-negative"));
    }
    let n = means.len() as f64;
    // Offsets from the first mean make equal means give exactly zero spread.
    let offsets: Vec<f64> = means.iter().map(|m| m - means[0]).collect();
    let mu = offsets.iter().sum::<f64>() / n;
    let epistemic = offsets.iter().map(|d| (d - mu).powi(2)).sum::<f64>() / n;
    let aleatoric = vars.iter().sum::<f64>() / n;
    Ok(VarianceDecomposition {
        total: aleatoric + epistemic,
        aleatoric,
        epistemic,
    })
}

/// Closed-form decomposition for a Dirichlet over class distributions.
///
/// Expected entropy `sum_c (a_c/S) (psi(S+1) - psi(a_c+1))`.
pub fn dirichlet_mutual_information(alpha: &[f64]) -> Result<UncertaintyTriple> {
    if alpha.is_empty() || alpha.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
        return Err(Error::input("Dirichlet concentrations must be positive and finite"));
    }
    let s: f64 = alpha.iter().sum();
    let mean: Vec<f64> = alpha.iter().map(|a| a / s).collect();
    let psi_s1 = digamma(s + 1.0);
    let expected: f64 = alpha
        .iter()
        .zip(&mean)
        .map(|(&a, &m)| m * (psi_s1 - digamma(a + 1.0)))
        .sum();
    let total = entropy(&mean);
    // The closed form loses relative accuracy as S grows; the true MI is
    // always >= 0, so small negative values are rounding.
    let mi = (total - expected).max(0.0);
    Ok(UncertaintyTriple {
        total_entropy: expected + mi,
        expected_entropy: expected,
        mutual_information: mi,
    })
}
