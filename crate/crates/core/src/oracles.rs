//! Closed-form ground truth for the epistemic-uncertainty metrics.
//!
//! Bayesian linear regression with decorrelated unit regressors has an
//! epistemic variance of `|I'| / (σ₀⁻² + |D| σ⁻²)`. The Dirichlet-categorical
//! model has an exact posterior, so the expected drop in mutual information
//! after one more observation can be evaluated without approximation.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::seed;
use crate::uncertainty::dirichlet_mutual_information;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlrConfig {
    /// Number of regressors `|I'|`.
    pub n_regressors: usize,
    /// Number of observations `|D|`.
    pub n_data: usize,
    pub prior_std: f64,
    pub noise_std: f64,
}

impl BlrConfig {
    pub fn new(n_regressors: usize, n_data: usize, prior_std: f64, noise_std: f64) -> Result<Self> {
        let cfg = BlrConfig {
            n_regressors,
            n_data,
            prior_std,
            noise_std,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_regressors == 0 {
            return Err(Error::input("BLR needs at least one regressor"));
        }
        if !(self.prior_std > 0.0 && self.prior_std.is_finite()) {
            return Err(Error::input("prior std must be positive"));
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return Err(Error::input("noise std must be positive"));
        }
        Ok(())
    }
}

/// Expected epistemic variance over test inputs with identity regressor
/// covariance.
pub fn blr_epistemic_variance(cfg: &BlrConfig) -> f64 {
    let precision = cfg.prior_std.powi(-2) + cfg.n_data as f64 * cfg.noise_std.powi(-2);
    cfg.n_regressors as f64 / precision
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
}

/// Orthogonal `n × k` design with `ΨᵀΨ = n I`.
fn decorrelated_design(n: usize, k: usize, rng: &mut seed::Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = g.qr().q();
    q * (n as f64).sqrt()
}

/// Monte Carlo estimate of the difference of variances
/// `Var[Y | x, D] − E_θ[Var[Y | θ, x, D]]`, averaged over test inputs.
///
/// A dataset is simulated from a prior draw of the true weights, the exact
/// Gaussian posterior is formed, and each sample draws a test input, two
/// independent posterior weights and two noise terms. `½(Y − Y')²` is an
/// unbiased estimate of the predictive variance; subtracting the known noise
/// variance leaves the epistemic part.
///
/// The design is exactly decorrelated, which requires `|D| = 0` or
/// `|D| ≥ |I'|`.
pub fn blr_posterior_mc(cfg: &BlrConfig, n_samples: usize, seed: u64) -> Result<McEstimate> {
    cfg.validate()?;
    let (n, k) = (cfg.n_data, cfg.n_regressors);
    if n > 0 && n < k {
        return Err(Error::input(format!(
            "a decorrelated design needs |D| >= |I'| ({n} < {k})"
        )));
    }
    if n_samples < 2 {
        return Err(Error::input("at least two Monte Carlo samples are required"));
    }
    let mut rng = seed::rng(seed);
    let (s0, s) = (cfg.prior_std, cfg.noise_std);
    let normal = |rng: &mut seed::Rng| -> f64 { rng.sample(StandardNormal) };

    let mut precision = DMatrix::<f64>::identity(k, k) / (s0 * s0);
    let mut rhs = DVector::<f64>::zeros(k);
    if n > 0 {
        let design = decorrelated_design(n, k, &mut rng);
        let theta_true = DVector::from_fn(k, |_, _| s0 * normal(&mut rng));
        let noise = DVector::from_fn(n, |_, _| s * normal(&mut rng));
        let y = &design * theta_true + noise;
        precision += design.transpose() * &design / (s * s);
        rhs = design.transpose() * y / (s * s);
    }
    let chol_prec = precision
        .cholesky()
        .ok_or_else(|| Error::input("posterior precision is not positive definite"))?;
    let cov = chol_prec.inverse();
    let mean = chol_prec.solve(&rhs);
    let l = cov
        .cholesky()
        .ok_or_else(|| Error::input("posterior covariance is not positive definite"))?
        .l();

    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut z = DVector::<f64>::zeros(k);
    for _ in 0..n_samples {
        let psi = DVector::from_fn(k, |_, _| normal(&mut rng));
        let mut draw = || {
            z.iter_mut().for_each(|v| *v = normal(&mut rng));
            let theta = &mean + &l * &z;
            psi.dot(&theta) + s * normal(&mut rng)
        };
        let (y1, y2) = (draw(), draw());
        let term = 0.5 * (y1 - y2).powi(2) - s * s;
        sum += term;
        sum_sq += term * term;
    }
    let m = n_samples as f64;
    let mean_est = sum / m;
    let var = (sum_sq / m - mean_est * mean_est).max(0.0) * m / (m - 1.0);
    Ok(McEstimate {
        mean: mean_est,
        std_error: (var / m).sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirichletState {
    pub alpha: Vec<f64>,
}

impl DirichletState {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() < 2 {
            return Err(Error::input("a Dirichlet state needs at least two classes"));
        }
        if alpha.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return Err(Error::input("Dirichlet concentrations must be positive and finite"));
        }
        Ok(DirichletState { alpha })
    }

    /// Posterior after observing class `c`.
    pub fn observe(&self, c: usize) -> DirichletState {
        let mut alpha = self.alpha.clone();
        alpha[c] += 1.0;
        DirichletState { alpha }
    }
}

/// Current mutual information minus its expectation after one more draw from
/// the predictive: `MI(α) − Σ_c (α_c/S) MI(α + e_c)`.
pub fn dirichlet_theorem1_check(state: &DirichletState) -> Result<f64> {
    let s: f64 = state.alpha.iter().sum();
    let now = dirichlet_mutual_information(&state.alpha)?.mutual_information;
    let mut after = 0.0;
    for (c, a) in state.alpha.iter().enumerate() {
        after += a / s * dirichlet_mutual_information(&state.observe(c).alpha)?.mutual_information;
    }
    Ok(now - after)
}

/// One line of the oracle pass/fail table.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// `n` seeded Dirichlet states with 2 to 10 classes and concentrations
/// log-uniform in [0.1, 100].
pub fn random_dirichlet_states(n: usize, seed: u64) -> Vec<DirichletState> {
    let mut rng = seed::rng(seed);
    (0..n)
        .map(|_| {
            let c = rng.random_range(2..=10);
            let alpha = (0..c).map(|_| 10f64.powf(rng.random_range(-1.0..2.0))).collect();
            DirichletState { alpha }
        })
        .collect()
}

/// BLR Monte Carlo agreement and monotonicity on a 3x3x3 grid, plus the
/// Dirichlet expected-decrease sweep.
pub fn oracle_suite(seed: u64) -> Result<Vec<OracleCheck>> {
    let mut out = Vec::new();
    let regs = [1, 3, 5];
    let data = [0, 10, 50];
    let priors = [0.5, 1.0, 2.0];
    let mut worst_z: f64 = 0.0;
    let mut cases = 0;
    for &k in &regs {
        for &n in &data {
            for &s0 in &priors {
                let cfg = BlrConfig::new(k, n, s0, 1.0)?;
                let cell = seed::derive(seed, (k * 10_000 + n * 10) as u64 + (s0 * 2.0) as u64);
                let est = blr_posterior_mc(&cfg, 100_000, cell)?;
                worst_z = worst_z.max((est.mean - blr_epistemic_variance(&cfg)).abs() / est.std_error);
                cases += 1;
            }
        }
    }
    out.push(OracleCheck {
        name: "blr_mc_agreement".into(),
        passed: worst_z < 3.0,
        detail: format!("{cases} cases, worst |z| = {worst_z:.3}"),
    });
    let mut monotone = true;
    for &s0 in &priors {
        for w in regs.windows(2) {
            for &n in &data {
                monotone &= blr_epistemic_variance(&BlrConfig::new(w[1], n, s0, 1.0)?)
                    > blr_epistemic_variance(&BlrConfig::new(w[0], n, s0, 1.0)?);
            }
        }
        for w in data.windows(2) {
            for &k in &regs {
                monotone &= blr_epistemic_variance(&BlrConfig::new(k, w[1], s0, 1.0)?)
                    < blr_epistemic_variance(&BlrConfig::new(k, w[0], s0, 1.0)?);
            }
        }
    }
    out.push(OracleCheck {
        name: "blr_monotonicity".into(),
        passed: monotone,
        detail: "increasing in |I'|, decreasing in |D|".into(),
    });
    let states = random_dirichlet_states(1000, seed::derive_tag(seed, "dirichlet"));
    let mut min_delta = f64::INFINITY;
    for st in &states {
        min_delta = min_delta.min(dirichlet_theorem1_check(st)?);
    }
    out.push(OracleCheck {
        name: "dirichlet_expected_mi_decrease".into(),
        passed: min_delta >= -1e-12,
        detail: format!("{} states, min delta = {min_delta:.3e}", states.len()),
    });
    Ok(out)
}
