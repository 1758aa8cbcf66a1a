//! Gaussian measurement prior `y ~ N(mu, Sigma)` and its confidence ellipsoid.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_lr, ln_gamma};

use crate::error::{Error, Result};
use crate::model::{matrix_from_rows, matrix_to_rows};

pub const DEFAULT_TAU: f64 = 0.99;
const QUANTILE_TOL: f64 = 1e-12;

/// `P(X <= q)` for `X ~ chi2(m)`.
pub fn chi2_cdf(m: usize, q: f64) -> f64 {
    if q <= 0.0 {
        0.0
    } else if q.is_infinite() {
        1.0
    } else {
        gamma_lr(m as f64 / 2.0, q / 2.0)
    }
}

fn chi2_pdf(m: usize, q: f64) -> f64 {
    if q <= 0.0 {
        return 0.0;
    }
    let k = m as f64 / 2.0;
    ((k - 1.0) * q.ln() - q / 2.0 - k * std::f64::consts::LN_2 - ln_gamma(k)).exp()
}

/// Quantile of the chi-squared distribution with `m` degrees of freedom.
pub fn chi2_quantile(m: usize, tau: f64) -> Result<f64> {
    if m == 0 {
        return Err(Error::Domain("chi-squared degrees of freedom must be at least 1".into()));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Domain(format!("probability {tau} is outside (0, 1)")));
    }
    let mut lo = 0.0_f64;
    let mut hi = (m as f64).max(1.0);
    while chi2_cdf(m, hi) < tau {
        lo = hi;
        hi *= 2.0;
    }
    // Newton steps safeguarded by the bracket [lo, hi].
    let mut q = 0.5 * (lo + hi);
    for _ in 0..200 {
        let g = chi2_cdf(m, q) - tau;
        if g > 0.0 {
            hi = q;
        } else {
            lo = q;
        }
        let d = chi2_pdf(m, q);
        let newton = q - g / d;
        let next = if d > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (next - q).abs() <= QUANTILE_TOL * next.max(1.0) {
            return Ok(next);
        }
        q = next;
    }
    Ok(q)
}

/// Measurement prior with cached Cholesky factor and confidence radius.
#[derive(Debug, Clone)]
pub struct AuxiliaryPrior {
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
    tau: f64,
    radius: f64,
    chol: Cholesky<f64, Dyn>,
}

impl AuxiliaryPrior {
    /// `tau = 1` yields an unbounded radius (the constraint is inactive).
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>, tau: f64) -> Result<Self> {
        let m = mu.len();
        if m == 0 {
            return Err(Error::PriorDegenerate("empty prior".into()));
        }
        if sigma.nrows() != m || sigma.ncols() != m {
            return Err(Error::DimensionMismatch(format!(
                "covariance is {}x{}, mean has length {m}",
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        if !mu.iter().chain(sigma.iter()).all(|v| v.is_finite()) {
            return Err(Error::PriorDegenerate("non-finite mean or covariance".into()));
        }
        let asym = (&sigma - sigma.transpose()).amax();
        if asym > 1e-12 * sigma.amax().max(1.0) {
            return Err(Error::PriorDegenerate("covariance is not symmetric".into()));
        }
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(Error::Domain(format!("confidence level {tau} is outside (0, 1]")));
        }
        let chol = sigma
            .clone()
            .cholesky()
            .ok_or_else(|| Error::PriorDegenerate("covariance is not positive definite".into()))?;
        let radius = if tau == 1.0 {
            f64::INFINITY
        } else {
            chi2_quantile(m, tau)?
        };
        Ok(Self {
            mu,
            sigma,
            tau,
            radius,
            chol,
        })
    }

    pub fn diagonal(mu: DVector<f64>, sigma_scale: &[f64], tau: f64) -> Result<Self> {
        if sigma_scale.len() != mu.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} scales for {} channels",
                sigma_scale.len(),
                mu.len()
            )));
        }
        if !sigma_scale.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return Err(Error::PriorDegenerate("per-channel scales must be positive".into()));
        }
        let var = DVector::from_iterator(sigma_scale.len(), sigma_scale.iter().map(|s| s * s));
        Self::new(mu, DMatrix::from_diagonal(&var), tau)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: PriorDocument = serde_json::from_str(text)?;
        doc.into_prior()
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Squared Mahalanobis radius `chi2_m(tau)`; infinite when `tau = 1`.
    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Lower Cholesky factor `L` with `Sigma = L L^T`.
    pub fn cholesky_factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// `L^{-1} v`.
    pub fn whiten(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(v)
            .expect("Cholesky factor has a positive diagonal")
    }

    /// `L^{-1} M` applied column-wise.
    pub fn whiten_matrix(&self, mat: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(mat)
            .expect("Cholesky factor has a positive diagonal")
    }

    pub fn mahalanobis_sq(&self, y: &DVector<f64>) -> Result<f64> {
        if y.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "measurement has length {}, prior has {}",
                y.len(),
                self.dim()
            )));
        }
        Ok(self.whiten(&(y - &self.mu)).norm_squared())
    }

    pub fn is_feasible(&self, y: &DVector<f64>) -> Result<bool> {
        Ok(self.mahalanobis_sq(y)? <= self.radius)
    }

    /// Largest singular value of `Sigma`.
    pub fn max_singular_value(&self) -> f64 {
        self.sigma.clone().symmetric_eigen().eigenvalues.max()
    }

    pub fn to_document(&self) -> PriorDocument {
        PriorDocument {
            mu: self.mu.iter().copied().collect(),
            sigma: Some(matrix_to_rows(&self.sigma)),
            sigma_scale: None,
            tau: self.tau,
        }
    }
}

pub fn max_singular_value(prior: &AuxiliaryPrior) -> f64 {
    prior.max_singular_value()
}

pub fn mahalanobis_sq(y: &DVector<f64>, prior: &AuxiliaryPrior) -> Result<f64> {
    prior.mahalanobis_sq(y)
}

/// JSON form of a prior: `mu`, either a full `sigma` or per-channel
/// `sigma_scale` standard deviations, and `tau`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorDocument {
    pub mu: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_scale: Option<Vec<f64>>,
    #[serde(default = "default_tau")]
    pub tau: f64,
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

impl PriorDocument {
    pub fn into_prior(self) -> Result<AuxiliaryPrior> {
        let mu = DVector::from_vec(self.mu);
        match (self.sigma, self.sigma_scale) {
            (Some(rows), None) => AuxiliaryPrior::new(mu, matrix_from_rows("sigma", &rows, 0)?, self.tau),
            (None, Some(scale)) => AuxiliaryPrior::diagonal(mu, &scale, self.tau),
            (Some(_), Some(_)) => Err(Error::config("sigma", "give either `sigma` or `sigma_scale`, not both")),
            (None, None) => Err(Error::config("sigma", "one of `sigma` or `sigma_scale` is required")),
        }
    }
}

/// Parameters of the synthetic prior generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub sigma_scale: Vec<f64>,
    /// Mean offset from the truth as a fraction of three standard deviations,
    /// measured in whitened units.
    pub offset_fraction: f64,
    pub seed: u64,
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigma_scale.is_empty() || !self.sigma_scale.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return Err(Error::config("sigma_scale", "entries must be positive and finite"));
        }
        if !(0.0..=1.0).contains(&self.offset_fraction) {
            return Err(Error::config("offset_fraction", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Seeded stream of synthetic priors around successive true measurements.
///
/// Each prior has `Sigma = diag(sigma_scale^2)` and
/// `mu = y_true + 3 * offset_fraction * L w` with `w` a uniformly random unit
/// vector, so the truth sits at Mahalanobis distance exactly
/// `3 * offset_fraction` and every channel is within
/// `3 * offset_fraction * sigma_i` of its true value.
#[derive(Debug, Clone)]
pub struct PriorSynthesizer {
    cfg: PriorConfig,
    tau: f64,
    radius: f64,
    rng: ChaCha8Rng,
}

impl PriorSynthesizer {
    pub fn new(cfg: PriorConfig, tau: f64) -> Result<Self> {
        cfg.validate()?;
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(Error::config("tau", "must lie in (0, 1]"));
        }
        let m = cfg.sigma_scale.len();
        let radius = if tau == 1.0 {
            f64::INFINITY
        } else {
            chi2_quantile(m, tau)?
        };
        let dist_sq = 9.0 * cfg.offset_fraction * cfg.offset_fraction;
        if dist_sq > radius {
            return Err(Error::config(
                "offset_fraction",
                format!(
                    "offset places the truth at squared Mahalanobis distance {dist_sq}, outside the radius {radius}"
                ),
            ));
        }
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self { cfg, tau, radius, rng })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn next_prior(&mut self, y_true: &DVector<f64>) -> Result<AuxiliaryPrior> {
        let m = self.cfg.sigma_scale.len();
        if y_true.len() != m {
            return Err(Error::DimensionMismatch(format!(
                "measurement has length {}, prior config has {m} scales",
                y_true.len()
            )));
        }
        let dir = if self.cfg.offset_fraction > 0.0 {
            random_unit(&mut self.rng, m)
        } else {
            DVector::zeros(m)
        };
        let scale = 3.0 * self.cfg.offset_fraction;
        let mu = DVector::from_fn(m, |i, _| y_true[i] + scale * self.cfg.sigma_scale[i] * dir[i]);
        AuxiliaryPrior::diagonal(mu, &self.cfg.sigma_scale, self.tau)
    }
}

fn random_unit(rng: &mut ChaCha8Rng, m: usize) -> DVector<f64> {
    loop {
        let w = DVector::from_fn(m, |_, _| StandardNormal.sample(rng));
        let n: f64 = w.norm();
        if n > 1e-12 {
            return w / n;
        }
    }
}

/// One synthetic prior around `y_true`, drawn from `cfg.seed`.
pub fn synth_prior(y_true: &DVector<f64>, cfg: &PriorConfig, tau: f64) -> Result<AuxiliaryPrior> {
    PriorSynthesizer::new(cfg.clone(), tau)?.next_prior(y_true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chi2_closed_form_two_dof() {
        let q = chi2_quantile(2, 1.0 - (-1.0_f64).exp()).unwrap();
        assert!((q - 2.0).abs() < 1e-9);
    }

    #[test]
    fn chi2_reference_values() {
        // Values from quadrature of the density.
        assert!((chi2_quantile(1, 0.95).unwrap() - 3.841458820694124).abs() < 1e-8);
        assert!((chi2_quantile(19, 0.95).unwrap() - 30.14352720564616).abs() < 1e-8);
        assert!((chi2_quantile(19, 0.99).unwrap() - 36.19086912927004).abs() < 1e-8);
        assert!((chi2_quantile(4, 0.95).unwrap() - 9.487729036781154).abs() < 1e-8);
    }

    #[test]
    fn chi2_domain() {
        assert!(matches!(chi2_quantile(3, 0.0), Err(Error::Domain(_))));
        assert!(matches!(chi2_quantile(3, 1.0), Err(Error::Domain(_))));
        assert!(matches!(chi2_quantile(0, 0.5), Err(Error::Domain(_))));
    }

    #[test]
    fn chi2_round_trip_and_monotone() {
        for m in [1, 2, 5, 19] {
            let mut prev = 0.0;
            for tau in [0.5, 0.9, 0.95, 0.99] {
                let q = chi2_quantile(m, tau).unwrap();
                assert!((chi2_cdf(m, q) - tau).abs() < 1e-8);
                assert!(q > prev);
                prev = q;
            }
        }
        assert!(chi2_quantile(5, 0.9).unwrap() > chi2_quantile(4, 0.9).unwrap());
    }

    #[test]
    fn mahalanobis_examples() {
        let p = AuxiliaryPrior::new(DVector::zeros(2), DMatrix::identity(2, 2), 0.95).unwrap();
        assert_eq!(p.mahalanobis_sq(&DVector::zeros(2)).unwrap(), 0.0);
        assert!((p.mahalanobis_sq(&DVector::from_vec(vec![3.0, 4.0])).unwrap() - 25.0).abs() < 1e-12);
        let q = AuxiliaryPrior::diagonal(DVector::zeros(2), &[2.0, 1.0], 0.95).unwrap();
        assert!((q.mahalanobis_sq(&DVector::from_vec(vec![2.0, 1.0])).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn max_singular_value_examples() {
        let eye = AuxiliaryPrior::new(DVector::zeros(3), DMatrix::identity(3, 3), 0.9).unwrap();
        assert!((eye.max_singular_value() - 1.0).abs() < 1e-12);
        let diag = AuxiliaryPrior::diagonal(DVector::zeros(2), &[2.0, 1.0], 0.9).unwrap();
        assert!((diag.max_singular_value() - 4.0).abs() < 1e-10);
        let full =
            AuxiliaryPrior::new(DVector::zeros(2), DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]), 0.9).unwrap();
        assert!((full.max_singular_value() - 3.0).abs() < 1e-10);
    }

    #[test]
    fn degenerate_covariance_rejected() {
        let sing = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(
            AuxiliaryPrior::new(DVector::zeros(2), sing, 0.9),
            Err(Error::PriorDegenerate(_))
        ));
        assert!(AuxiliaryPrior::new(DVector::zeros(1), DMatrix::identity(1, 1), 1.5).is_err());
        let inf = AuxiliaryPrior::new(DVector::zeros(1), DMatrix::identity(1, 1), 1.0).unwrap();
        assert!(inf.radius().is_infinite());
    }

    #[test]
    fn synthetic_prior_examples() {
        let y = DVector::from_vec(vec![1.0, -2.0, 3.0]);
        let cfg = PriorConfig {
            sigma_scale: vec![0.1, 0.2, 0.3],
            offset_fraction: 0.0,
            seed: 7,
        };
        let p = synth_prior(&y, &cfg, 0.99).unwrap();
        assert_eq!(p.mu(), &y);
        assert_eq!(p.mahalanobis_sq(&y).unwrap(), 0.0);

        let one = PriorConfig {
            sigma_scale: vec![1.0],
            offset_fraction: 1.0,
            seed: 3,
        };
        let y1 = DVector::from_element(1, 0.5);
        let p1 = synth_prior(&y1, &one, 0.999).unwrap();
        assert!(((p1.mu()[0] - 0.5).abs() - 3.0).abs() < 1e-12);
        assert!((p1.mahalanobis_sq(&y1).unwrap() - 9.0).abs() < 1e-12);
        assert!(synth_prior(&y1, &one, 0.95).is_err());
    }

    #[test]
    fn synthetic_prior_defaults_stay_feasible() {
        let m = 19;
        let cfg = PriorConfig {
            sigma_scale: (0..m).map(|i| 0.01 + 0.01 * i as f64).collect(),
            offset_fraction: 0.5,
            seed: 11,
        };
        let mut gen = PriorSynthesizer::new(cfg.clone(), DEFAULT_TAU).unwrap();
        let radius = chi2_quantile(m, DEFAULT_TAU).unwrap();
        for k in 0..200 {
            let y = DVector::from_fn(m, |i, _| (k as f64 * 0.1 + i as f64).sin());
            let p = gen.next_prior(&y).unwrap();
            let d = p.mahalanobis_sq(&y).unwrap();
            assert!((d - 2.25).abs() < 1e-9 && d <= radius);
            for i in 0..m {
                assert!((p.mu()[i] - y[i]).abs() <= 1.5 * cfg.sigma_scale[i] + 1e-12);
            }
        }
        let a = synth_prior(&DVector::zeros(m), &cfg, 0.99).unwrap();
        let b = synth_prior(&DVector::zeros(m), &cfg, 0.99).unwrap();
        assert_eq!(a.mu(), b.mu());
    }

    #[test]
    fn prior_json() {
        let p = AuxiliaryPrior::from_json(r#"{"mu": [0, 1], "sigma_scale": [2, 1], "tau": 0.95}"#).unwrap();
        assert!((p.mahalanobis_sq(&DVector::from_vec(vec![2.0, 2.0])).unwrap() - 2.0).abs() < 1e-12);
        let full = AuxiliaryPrior::from_json(r#"{"mu": [0], "sigma": [[4]], "tau": 0.5}"#).unwrap();
        assert!((full.max_singular_value() - 4.0).abs() < 1e-12);
        assert!(AuxiliaryPrior::from_json(r#"{"mu": [0], "tau": 0.5}"#).is_err());
        assert!(AuxiliaryPrior::from_json(r#"{"mu": [0], "sigma": [[1]], "sigma_scale": [1]}"#).is_err());
        let back = AuxiliaryPrior::from_json(&serde_json::to_string(&p.to_document()).unwrap()).unwrap();
        assert_eq!(back.sigma(), p.sigma());
    }
}
