//! Likelihood families, their densities and conditional moments, noise
//! covariance estimation, and the conjugate closed-form denoisers.
//!
//! Observations enter the denoising pipeline in *standardized* form: Gaussian
//! observations are used as-is, while Poisson counts are divided by their
//! exposure so that the conditional mean of a standardized observation equals
//! the latent parameter for every family.

use crate::bures::SpdMatrix;
use crate::gmodel::DiscreteDistribution;
use crate::linalg::{self, Matrix};
use crate::rng::SeedStream;
use thiserror::Error;

/// Latent parameters below this are clamped when evaluating Poisson
/// densities, keeping log-densities finite at positive counts.
pub const POISSON_THETA_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("parameter outside the likelihood domain: {0}")]
    DomainError(String),
    #[error("noise covariance is singular{}", row.map(|r| format!(" at row {r}")).unwrap_or_default())]
    SingularCovariance { row: Option<usize> },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionError { expected: usize, got: usize },
    #[error("sample is degenerate (zero variance)")]
    DegenerateSample,
    #[error("model carries {got} per-row parameters but the dataset has {expected} rows")]
    MismatchedRows { expected: usize, got: usize },
}

/// Observations: n stacked m-vectors. Poisson data are raw counts; the
/// exposure needed to standardize them lives on the model.
#[derive(Debug, Clone)]
pub struct Dataset {
    n: usize,
    m: usize,
    values: Vec<f64>,
}

impl Dataset {
    pub fn new(n: usize, m: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), n * m, "dataset buffer length mismatch");
        Dataset { n, m, values }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let m = if n == 0 { 0 } else { rows[0].len() };
        let mut values = Vec::with_capacity(n * m);
        for r in rows {
            assert_eq!(r.len(), m, "ragged dataset rows");
            values.extend_from_slice(r);
        }
        Dataset { n, m, values }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.m..(i + 1) * self.m]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Per-observation heterogeneity value.
#[derive(Debug, Clone, PartialEq)]
pub enum Heterogeneity {
    None,
    GaussianCov(SpdMatrix),
    Exposure(Vec<f64>),
}

#[derive(Debug, Clone)]
pub enum LikelihoodModel {
    GaussianHomoscedastic {
        noise_cov: SpdMatrix,
    },
    GaussianHeteroscedastic {
        noise_covs: Vec<SpdMatrix>,
    },
    /// Componentwise-independent Poisson counts with per-row exposures
    /// (n x m, strictly positive, stored row-major).
    PoissonExposure {
        m: usize,
        exposures: Vec<f64>,
    },
}

impl LikelihoodModel {
    pub fn gaussian(noise_cov: SpdMatrix) -> Self {
        LikelihoodModel::GaussianHomoscedastic { noise_cov }
    }

    pub fn gaussian_scalar(sigma2: f64) -> Self {
        LikelihoodModel::GaussianHomoscedastic {
            noise_cov: SpdMatrix::scalar(sigma2),
        }
    }

    pub fn dim(&self) -> Option<usize> {
        match self {
            LikelihoodModel::GaussianHomoscedastic { noise_cov } => Some(noise_cov.dim()),
            LikelihoodModel::GaussianHeteroscedastic { noise_covs } => {
                noise_covs.first().map(|c| c.dim())
            }
            LikelihoodModel::PoissonExposure { m, .. } => Some(*m),
        }
    }

    pub fn is_heterogeneous(&self) -> bool {
        !matches!(self, LikelihoodModel::GaussianHomoscedastic { .. })
    }

    pub fn is_gaussian(&self) -> bool {
        !matches!(self, LikelihoodModel::PoissonExposure { .. })
    }

    pub fn validate(&self, data: &Dataset) -> Result<(), ModelError> {
        match self {
            LikelihoodModel::GaussianHomoscedastic { noise_cov } => {
                if noise_cov.dim() != data.m() {
                    return Err(ModelError::DimensionError {
                        expected: data.m(),
                        got: noise_cov.dim(),
                    });
                }
            }
            LikelihoodModel::GaussianHeteroscedastic { noise_covs } => {
                if noise_covs.len() != data.n() {
                    return Err(ModelError::MismatchedRows {
                        expected: data.n(),
                        got: noise_covs.len(),
                    });
                }
                for c in noise_covs {
                    if c.dim() != data.m() {
                        return Err(ModelError::DimensionError {
                            expected: data.m(),
                            got: c.dim(),
                        });
                    }
                }
            }
            LikelihoodModel::PoissonExposure { m, exposures } => {
                if *m != data.m() {
                    return Err(ModelError::DimensionError {
                        expected: data.m(),
                        got: *m,
                    });
                }
                if exposures.len() != data.n() * data.m() {
                    return Err(ModelError::MismatchedRows {
                        expected: data.n(),
                        got: exposures.len() / m.max(&1),
                    });
                }
                if exposures.iter().any(|&l| !(l > 0.0)) {
                    return Err(ModelError::DomainError(
                        "Poisson exposures must be strictly positive".into(),
                    ));
                }
                for (idx, &z) in data.values().iter().enumerate() {
                    if z < 0.0 || z.fract() != 0.0 {
                        return Err(ModelError::DomainError(format!(
                            "Poisson observations must be nonnegative integers (entry {idx} = {z})"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// The heterogeneity value attached to row i.
    pub fn row_heterogeneity(&self, i: usize) -> Heterogeneity {
        match self {
            LikelihoodModel::GaussianHomoscedastic { .. } => Heterogeneity::None,
            LikelihoodModel::GaussianHeteroscedastic { noise_covs } => {
                Heterogeneity::GaussianCov(noise_covs[i].clone())
            }
            LikelihoodModel::PoissonExposure { m, exposures } => {
                Heterogeneity::Exposure(exposures[i * m..(i + 1) * m].to_vec())
            }
        }
    }
}

/// Standardized observations: identity for Gaussian rows, counts divided by
/// exposure for Poisson rows.
pub fn standardize(data: &Dataset, model: &LikelihoodModel) -> Vec<f64> {
    match model {
        LikelihoodModel::PoissonExposure { m, exposures } => {
            let mut out = data.values().to_vec();
            for i in 0..data.n() {
                for d in 0..*m {
                    out[i * m + d] /= exposures[i * m + d];
                }
            }
            out
        }
        _ => data.values().to_vec(),
    }
}

// ---------------------------------------------------------------------------
// Density evaluation

pub(crate) struct GaussianParams {
    dim: usize,
    inv: Vec<f64>,
    logdet: f64,
    chol: Vec<f64>,
}

impl GaussianParams {
    pub(crate) fn new(cov: &SpdMatrix, row: Option<usize>) -> Result<Self, ModelError> {
        let dim = cov.dim();
        let chol = linalg::cholesky(dim, cov.as_slice())
            .ok_or(ModelError::SingularCovariance { row })?;
        let logdet = linalg::cholesky_logdet(dim, &chol);
        // Explicit inverse keeps the per-evaluation cost to a dot product.
        let mut inv = vec![0.0; dim * dim];
        for j in 0..dim {
            let mut e = vec![0.0; dim];
            e[j] = 1.0;
            let col = linalg::cholesky_solve(dim, &chol, &e);
            for i in 0..dim {
                inv[i * dim + j] = col[i];
            }
        }
        Ok(GaussianParams {
            dim,
            inv,
            logdet,
            chol,
        })
    }

    #[inline]
    pub(crate) fn log_density(&self, z: &[f64], theta: &[f64]) -> f64 {
        let m = self.dim;
        let mut quad = 0.0;
        for i in 0..m {
            let di = z[i] - theta[i];
            for j in 0..m {
                quad += di * self.inv[i * m + j] * (z[j] - theta[j]);
            }
        }
        -0.5 * (quad + self.logdet + m as f64 * (2.0 * std::f64::consts::PI).ln())
    }

    pub(crate) fn sample(&self, rng: &mut SeedStream, theta: &[f64], out: &mut [f64]) {
        let m = self.dim;
        let mut g = vec![0.0; m];
        for gi in g.iter_mut() {
            *gi = rng.normal();
        }
        for i in 0..m {
            let mut v = theta[i];
            for k in 0..=i {
                v += self.chol[i * m + k] * g[k];
            }
            out[i] = v;
        }
    }
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos approximation (g = 7, n = 9), accurate to ~1e-13 for x > 0.
    const COEFFS: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return pi.ln() - (pi * x).sin().ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEFFS[0];
    let t = x + 7.5;
    for (i, &c) in COEFFS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

#[inline]
pub(crate) fn poisson_log_density(exposure: &[f64], z: &[f64], theta: &[f64]) -> f64 {
    let mut ll = 0.0;
    for d in 0..z.len() {
        let rate = exposure[d] * theta[d].max(POISSON_THETA_FLOOR);
        ll += z[d] * rate.ln() - rate - ln_gamma(z[d] + 1.0);
    }
    ll
}

/// Precomputed per-row densities for a model (optionally convolved with an
/// extra Gaussian kernel covariance, which the smooth NPMLE needs).
pub(crate) enum DensityCache {
    GaussianShared(GaussianParams),
    GaussianPerRow(Vec<GaussianParams>),
    Poisson { m: usize, exposures: Vec<f64> },
}

impl DensityCache {
    pub(crate) fn new(
        model: &LikelihoodModel,
        inflate: Option<&SpdMatrix>,
    ) -> Result<Self, ModelError> {
        match model {
            LikelihoodModel::GaussianHomoscedastic { noise_cov } => {
                let cov = match inflate {
                    Some(k) => noise_cov.add(k),
                    None => noise_cov.clone(),
                };
                Ok(DensityCache::GaussianShared(GaussianParams::new(
                    &cov, None,
                )?))
            }
            LikelihoodModel::GaussianHeteroscedastic { noise_covs } => {
                let mut params = Vec::with_capacity(noise_covs.len());
                for (i, c) in noise_covs.iter().enumerate() {
                    let cov = match inflate {
                        Some(k) => c.add(k),
                        None => c.clone(),
                    };
                    params.push(GaussianParams::new(&cov, Some(i))?);
                }
                Ok(DensityCache::GaussianPerRow(params))
            }
            LikelihoodModel::PoissonExposure { m, exposures } => {
                if inflate.is_some() {
                    return Err(ModelError::DomainError(
                        "smooth priors require a Gaussian likelihood".into(),
                    ));
                }
                Ok(DensityCache::Poisson {
                    m: *m,
                    exposures: exposures.clone(),
                })
            }
        }
    }

    #[inline]
    pub(crate) fn log_density(&self, i: usize, z: &[f64], theta: &[f64]) -> f64 {
        match self {
            DensityCache::GaussianShared(p) => p.log_density(z, theta),
            DensityCache::GaussianPerRow(ps) => ps[i].log_density(z, theta),
            DensityCache::Poisson { m, exposures } => {
                poisson_log_density(&exposures[i * m..(i + 1) * m], z, theta)
            }
        }
    }
}

/// Log-density of the row's likelihood at observation `z` (raw scale) and
/// latent parameter `theta` (standardized scale).
pub fn log_density(
    model: &LikelihoodModel,
    row_index: usize,
    z: &[f64],
    theta: &[f64],
) -> Result<f64, ModelError> {
    match model {
        LikelihoodModel::GaussianHomoscedastic { noise_cov } => {
            Ok(GaussianParams::new(noise_cov, None)?.log_density(z, theta))
        }
        LikelihoodModel::GaussianHeteroscedastic { noise_covs } => Ok(GaussianParams::new(
            &noise_covs[row_index],
            Some(row_index),
        )?
        .log_density(z, theta)),
        LikelihoodModel::PoissonExposure { m, exposures } => {
            if theta.iter().any(|&t| t < 0.0) {
                return Err(ModelError::DomainError(
                    "Poisson latent parameters must be nonnegative".into(),
                ));
            }
            Ok(poisson_log_density(
                &exposures[row_index * m..(row_index + 1) * m],
                z,
                theta,
            ))
        }
    }
}

/// Estimate of the average conditional noise covariance of the standardized
/// observations.
///
/// - Gaussian, homoscedastic: the known covariance.
/// - Gaussian, heteroscedastic: the arithmetic mean of the per-row
///   covariances.
/// - Poisson with exposure: Var(Z/lambda | Theta) = Theta/lambda per
///   component, estimated by the plug-in diag((1/n) sum_i Z_ij / lambda_ij^2).
pub fn estimate_noise_cov(
    model: &LikelihoodModel,
    data: &Dataset,
) -> Result<SpdMatrix, ModelError> {
    match model {
        LikelihoodModel::GaussianHomoscedastic { noise_cov } => Ok(noise_cov.clone()),
        LikelihoodModel::GaussianHeteroscedastic { noise_covs } => {
            if noise_covs.is_empty() {
                return Err(ModelError::EmptyDataset);
            }
            let dim = noise_covs[0].dim();
            let n = noise_covs.len();
            let mut acc = vec![0.0; dim * dim];
            let mut scratch = vec![0.0; n];
            for e in 0..dim * dim {
                for (i, c) in noise_covs.iter().enumerate() {
                    scratch[i] = c.as_slice()[e];
                }
                acc[e] = linalg::pairwise_sum(&scratch) / n as f64;
            }
            SpdMatrix::new(dim, acc).map_err(|_| ModelError::SingularCovariance { row: None })
        }
        LikelihoodModel::PoissonExposure { m, exposures } => {
            let n = data.n();
            if n == 0 {
                return Err(ModelError::EmptyDataset);
            }
            let mut diag = vec![0.0; *m];
            let mut scratch = vec![0.0; n];
            for d in 0..*m {
                for i in 0..n {
                    let lambda = exposures[i * m + d];
                    scratch[i] = data.row(i)[d] / (lambda * lambda);
                }
                diag[d] = linalg::pairwise_sum(&scratch) / n as f64;
            }
            Ok(SpdMatrix::diag(&diag))
        }
    }
}

/// Draw one observation (raw scale) from the likelihood at `theta` given a
/// heterogeneity value resolved against the model kind.
pub fn sample_observation(
    rng: &mut SeedStream,
    model: &LikelihoodModel,
    xi: &Heterogeneity,
    theta: &[f64],
    out: &mut [f64],
) -> Result<(), ModelError> {
    match (model, xi) {
        (LikelihoodModel::GaussianHomoscedastic { noise_cov }, Heterogeneity::None) => {
            GaussianParams::new(noise_cov, None)?.sample(rng, theta, out);
            Ok(())
        }
        (_, Heterogeneity::GaussianCov(cov)) if model.is_gaussian() => {
            GaussianParams::new(cov, None)?.sample(rng, theta, out);
            Ok(())
        }
        (LikelihoodModel::PoissonExposure { .. }, Heterogeneity::Exposure(exposure)) => {
            for d in 0..theta.len() {
                out[d] = rng.poisson(exposure[d] * theta[d].max(0.0)) as f64;
            }
            Ok(())
        }
        _ => Err(ModelError::DomainError(
            "heterogeneity value does not match the likelihood kind".into(),
        )),
    }
}

// ---------------------------------------------------------------------------
// Conjugate parametric closed forms (univariate)

/// Exact affine map z -> slope * z + intercept.
#[derive(Debug, Clone)]
pub struct AffineDenoiser {
    pub slope: Matrix,
    pub intercept: Vec<f64>,
}

impl AffineDenoiser {
    pub fn new(slope: Matrix, intercept: Vec<f64>) -> Self {
        assert_eq!(slope.rows(), intercept.len());
        AffineDenoiser { slope, intercept }
    }

    pub fn scalar(slope: f64, intercept: f64) -> Self {
        AffineDenoiser {
            slope: Matrix::from_vec(1, 1, vec![slope]),
            intercept: vec![intercept],
        }
    }

    pub fn dim(&self) -> usize {
        self.intercept.len()
    }

    pub fn eval(&self, z: &[f64]) -> Vec<f64> {
        let mut out = self.slope.matvec(z);
        for (o, b) in out.iter_mut().zip(&self.intercept) {
            *o += b;
        }
        out
    }

    /// Apply to n stacked m-vectors.
    pub fn apply_rows(&self, values: &[f64], n: usize, m: usize) -> Vec<f64> {
        assert_eq!(values.len(), n * m);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let v = self.eval(&values[i * m..(i + 1) * m]);
            out[i * m..(i + 1) * m].copy_from_slice(&v);
        }
        out
    }
}

/// Mean-parameterized exponential families with quadratic variance function,
/// paired with their conjugate priors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConjugateFamily {
    GaussianKnownVar { sigma2: f64 },
    PoissonGamma,
    ExponentialInvGamma,
    GeometricConjugate,
}

impl ConjugateFamily {
    /// Variance function V evaluated at the mean.
    fn variance_at(&self, mu: f64) -> f64 {
        match self {
            ConjugateFamily::GaussianKnownVar { sigma2 } => *sigma2,
            ConjugateFamily::PoissonGamma => mu,
            ConjugateFamily::ExponentialInvGamma => mu * mu,
            ConjugateFamily::GeometricConjugate => mu + mu * mu,
        }
    }

    /// V''(0) / 2.
    fn half_vpp(&self) -> f64 {
        match self {
            ConjugateFamily::GaussianKnownVar { .. } | ConjugateFamily::PoissonGamma => 0.0,
            ConjugateFamily::ExponentialInvGamma | ConjugateFamily::GeometricConjugate => 1.0,
        }
    }
}

fn scalar_sample_moments(data: &Dataset) -> Result<(f64, f64), ModelError> {
    if data.m() != 1 {
        return Err(ModelError::DimensionError {
            expected: 1,
            got: data.m(),
        });
    }
    if data.n() < 2 {
        return Err(ModelError::DegenerateSample);
    }
    let mu = linalg::sample_mean(data.values(), data.n(), 1)[0];
    let s2 = linalg::sample_cov(data.values(), data.n(), 1)[0];
    if s2 == 0.0 {
        return Err(ModelError::DegenerateSample);
    }
    Ok((mu, s2))
}

/// Conjugate-family plug-in estimate of the unconstrained Bayes rule:
/// slope (1 - V(mu)/s^2)_+ / (1 + V''(0)/2), shrinking toward the sample
/// mean.
pub fn conjugate_bayes(
    family: ConjugateFamily,
    data: &Dataset,
) -> Result<AffineDenoiser, ModelError> {
    let (mu, s2) = scalar_sample_moments(data)?;
    let slope = (1.0 - family.variance_at(mu) / s2).max(0.0) / (1.0 + family.half_vpp());
    Ok(AffineDenoiser::scalar(slope, (1.0 - slope) * mu))
}

/// Conjugate-family plug-in estimate of the variance-constrained rule: same
/// shrinkage direction as `conjugate_bayes` but with the square root of the
/// shrinkage factor, which restores the latent second moment.
pub fn conjugate_vcb(
    family: ConjugateFamily,
    data: &Dataset,
) -> Result<AffineDenoiser, ModelError> {
    let (mu, s2) = scalar_sample_moments(data)?;
    let slope = ((1.0 - family.variance_at(mu) / s2).max(0.0) / (1.0 + family.half_vpp())).sqrt();
    Ok(AffineDenoiser::scalar(slope, (1.0 - slope) * mu))
}

// ---------------------------------------------------------------------------
// Conditional covariance of the Bayes denoiser (Monte Carlo)

/// Monte-Carlo estimate of Cov(posterior mean | heterogeneity = xi) around
/// `center`, under a finitely supported prior: for each prior atom, draws
/// `mc_samples` observations, evaluates the posterior-mean denoiser, and
/// accumulates the weighted average of outer products. Deterministic given
/// the seed (atom j uses ChaCha stream j).
pub fn conditional_cov_of_bayes(
    model: &LikelihoodModel,
    prior: &DiscreteDistribution,
    xi: &Heterogeneity,
    center: &[f64],
    mc_samples: usize,
    seed: u64,
) -> Result<SpdMatrix, ModelError> {
    let m = prior.m();
    assert_eq!(center.len(), m);
    assert!(mc_samples > 0);
    let r = prior.len();

    // Resolve the row density once; all draws share it.
    enum RowDensity {
        Gaussian(GaussianParams),
        Poisson(Vec<f64>),
    }
    let density = match (model, xi) {
        (LikelihoodModel::GaussianHomoscedastic { noise_cov }, Heterogeneity::None) => {
            RowDensity::Gaussian(GaussianParams::new(noise_cov, None)?)
        }
        (_, Heterogeneity::GaussianCov(cov)) if model.is_gaussian() => {
            RowDensity::Gaussian(GaussianParams::new(cov, None)?)
        }
        (LikelihoodModel::PoissonExposure { .. }, Heterogeneity::Exposure(e)) => {
            RowDensity::Poisson(e.clone())
        }
        _ => {
            return Err(ModelError::DomainError(
                "heterogeneity value does not match the likelihood kind".into(),
            ))
        }
    };

    let log_weights: Vec<f64> = prior.weights().iter().map(|w| w.max(1e-300).ln()).collect();
    let mut log_post = vec![0.0; r];
    let mut bayes = vec![0.0; m];
    let mut acc = vec![0.0; m * m];
    let mut z = vec![0.0; m];
    let base = SeedStream::new(seed);

    for j in 0..r {
        if prior.weights()[j] == 0.0 {
            continue;
        }
        let mut rng = base.substream(j as u64);
        let theta_j = prior.atom(j);
        let mut atom_acc = vec![0.0; m * m];
        for _ in 0..mc_samples {
            match &density {
                RowDensity::Gaussian(p) => p.sample(&mut rng, theta_j, &mut z),
                RowDensity::Poisson(exposure) => {
                    for d in 0..m {
                        z[d] = rng.poisson(exposure[d] * theta_j[d].max(0.0)) as f64;
                    }
                }
            }
            // Posterior mean under the prior at this draw.
            let mut max_lp = f64::NEG_INFINITY;
            for (k, lp) in log_post.iter_mut().enumerate() {
                let ld = match &density {
                    RowDensity::Gaussian(p) => p.log_density(&z, prior.atom(k)),
                    RowDensity::Poisson(exposure) => {
                        poisson_log_density(exposure, &z, prior.atom(k))
                    }
                };
                *lp = log_weights[k] + ld;
                max_lp = max_lp.max(*lp);
            }
            let mut total = 0.0;
            bayes.iter_mut().for_each(|b| *b = 0.0);
            for k in 0..r {
                let w = (log_post[k] - max_lp).exp();
                total += w;
                for d in 0..m {
                    bayes[d] += w * prior.atom(k)[d];
                }
            }
            for d in 0..m {
                bayes[d] = bayes[d] / total - center[d];
            }
            for a in 0..m {
                for b in a..m {
                    atom_acc[a * m + b] += bayes[a] * bayes[b];
                }
            }
        }
        let scale = prior.weights()[j] / mc_samples as f64;
        for e in 0..m * m {
            acc[e] += scale * atom_acc[e];
        }
    }
    for a in 0..m {
        for b in (a + 1)..m {
            acc[b * m + a] = acc[a * m + b];
        }
    }
    SpdMatrix::new(m, acc).map_err(|_| ModelError::SingularCovariance { row: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn gaussian_log_density_values() {
        let model = LikelihoodModel::gaussian_scalar(1.0);
        let ld = log_density(&model, 0, &[0.0], &[0.0]).unwrap();
        assert_close(ld, -0.5 * (2.0 * std::f64::consts::PI).ln(), 1e-14);

        let model = LikelihoodModel::gaussian(SpdMatrix::identity(2));
        let ld = log_density(&model, 0, &[1.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_close(ld, -(2.0 * std::f64::consts::PI).ln() - 0.5, 1e-14);
    }

    #[test]
    fn poisson_log_density_values() {
        let model = LikelihoodModel::PoissonExposure {
            m: 1,
            exposures: vec![1.0],
        };
        // P(Z = 2) under rate 2: e^{-2} 2^2 / 2! => log = log 2 - 2.
        let ld = log_density(&model, 0, &[2.0], &[2.0]).unwrap();
        assert_close(ld, 2.0f64.ln() - 2.0, 1e-12);
        assert!(matches!(
            log_density(&model, 0, &[2.0], &[-1.0]),
            Err(ModelError::DomainError(_))
        ));
    }

    #[test]
    fn ln_gamma_matches_factorials() {
        for n in 1..15u64 {
            let lf: f64 = (1..=n).map(|k| (k as f64).ln()).sum();
            assert_close(ln_gamma(n as f64 + 1.0), lf, 1e-10 * (1.0 + lf.abs()));
        }
    }

    #[test]
    fn noise_cov_estimates() {
        // Known-covariance pass-through.
        let model = LikelihoodModel::gaussian_scalar(2.5);
        let data = Dataset::from_rows(&[vec![0.0], vec![1.0]]);
        assert_close(estimate_noise_cov(&model, &data).unwrap().get(0, 0), 2.5, 0.0);

        // Poisson plug-in: (1/2) (2/1 + 4/4) = 1.5.
        let model = LikelihoodModel::PoissonExposure {
            m: 1,
            exposures: vec![1.0, 2.0],
        };
        let data = Dataset::from_rows(&[vec![2.0], vec![4.0]]);
        assert_close(estimate_noise_cov(&model, &data).unwrap().get(0, 0), 1.5, 1e-14);

        // Heteroscedastic mean.
        let model = LikelihoodModel::GaussianHeteroscedastic {
            noise_covs: vec![SpdMatrix::diag(&[1.0, 1.0]), SpdMatrix::diag(&[3.0, 1.0])],
        };
        let data = Dataset::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0]]);
        let est = estimate_noise_cov(&model, &data).unwrap();
        assert_close(est.get(0, 0), 2.0, 1e-14);
        assert_close(est.get(1, 1), 1.0, 1e-14);
    }

    #[test]
    fn conjugate_closed_forms() {
        // Gaussian with sigma^2 = 1, sample variance 2: slope sqrt(1/2).
        let data = Dataset::from_rows(&[vec![1.0], vec![-1.0], vec![2.0], vec![-2.0]]);
        let (mu, s2) = scalar_sample_moments(&data).unwrap();
        assert_close(mu, 0.0, 1e-15);
        assert_close(s2, 10.0 / 3.0, 1e-14);
        let d = conjugate_vcb(ConjugateFamily::GaussianKnownVar { sigma2: 1.0 }, &data).unwrap();
        let want = ((s2 - 1.0) / s2).sqrt();
        assert_close(d.slope.get(0, 0), want, 1e-14);
        assert_close(d.intercept[0], 0.0, 1e-14);

        // Full shrinkage when s^2 <= sigma^2.
        let tight = Dataset::from_rows(&[vec![0.9], vec![1.1]]);
        let d = conjugate_vcb(ConjugateFamily::GaussianKnownVar { sigma2: 1.0 }, &tight).unwrap();
        assert_close(d.slope.get(0, 0), 0.0, 0.0);
        assert_close(d.intercept[0], 1.0, 1e-14);
    }

    #[test]
    fn conjugate_poisson_example() {
        // mu = 3, s^2 = 4 => slope sqrt(1)/2 = 0.5, intercept 1.5.
        // Build a sample with exactly those moments: mean 3, var 4 on 3 points.
        let data = Dataset::from_rows(&[vec![1.0], vec![3.0], vec![5.0]]);
        let (mu, s2) = scalar_sample_moments(&data).unwrap();
        assert_close(mu, 3.0, 1e-15);
        assert_close(s2, 4.0, 1e-15);
        let d = conjugate_vcb(ConjugateFamily::PoissonGamma, &data).unwrap();
        assert_close(d.slope.get(0, 0), 0.5, 1e-14);
        assert_close(d.intercept[0], 1.5, 1e-14);
    }

    #[test]
    fn conjugate_errors() {
        let wide = Dataset::from_rows(&[vec![0.0, 1.0]]);
        assert!(matches!(
            conjugate_vcb(ConjugateFamily::PoissonGamma, &wide),
            Err(ModelError::DimensionError { .. })
        ));
        let flat = Dataset::from_rows(&[vec![1.0], vec![1.0]]);
        assert!(matches!(
            conjugate_vcb(ConjugateFamily::PoissonGamma, &flat),
            Err(ModelError::DegenerateSample)
        ));
    }

    #[test]
    fn mean_parameterization_holds() {
        // Standardized observations have conditional mean theta for every
        // model kind; checked by Monte Carlo at 3 sigma.
        let mut rng = SeedStream::new(123);
        let n_draws = 100_000;

        let theta = [0.7];
        let model = LikelihoodModel::gaussian_scalar(2.0);
        let mut sum = 0.0;
        let mut out = [0.0];
        for _ in 0..n_draws {
            sample_observation(&mut rng, &model, &Heterogeneity::None, &theta, &mut out).unwrap();
            sum += out[0];
        }
        let se = (2.0f64 / n_draws as f64).sqrt();
        assert!((sum / n_draws as f64 - theta[0]).abs() < 3.0 * se);

        let exposure = vec![3.0];
        let model = LikelihoodModel::PoissonExposure {
            m: 1,
            exposures: exposure.clone(),
        };
        let mut sum = 0.0;
        for _ in 0..n_draws {
            sample_observation(
                &mut rng,
                &model,
                &Heterogeneity::Exposure(exposure.clone()),
                &theta,
                &mut out,
            )
            .unwrap();
            sum += out[0] / exposure[0];
        }
        let se = (theta[0] / exposure[0] / n_draws as f64).sqrt();
        assert!((sum / n_draws as f64 - theta[0]).abs() < 3.0 * se);
    }

    #[test]
    fn law_of_total_covariance() {
        // Cov(Z) = E[Cov(Z|Theta)] + Cov(Theta) on synthetic data with a
        // known two-atom prior.
        let mut rng = SeedStream::new(4);
        let sigma2 = 0.5;
        let model = LikelihoodModel::gaussian_scalar(sigma2);
        let n = 50_000;
        let mut values = Vec::with_capacity(n);
        let mut out = [0.0];
        for _ in 0..n {
            let theta = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
            sample_observation(&mut rng, &model, &Heterogeneity::None, &[theta], &mut out)
                .unwrap();
            values.push(out[0]);
        }
        let cov_z = linalg::sample_cov(&values, n, 1)[0];
        // Var(Theta) = 1 for the Rademacher prior.
        assert!((cov_z - (sigma2 + 1.0)).abs() < 0.05, "cov {cov_z}");
    }

    #[test]
    fn conditional_cov_point_mass_is_zero() {
        let prior = DiscreteDistribution::new(1, vec![2.0], vec![1.0]).unwrap();
        let model = LikelihoodModel::gaussian_scalar(1.0);
        let cov = conditional_cov_of_bayes(&model, &prior, &Heterogeneity::None, &[2.0], 50, 9)
            .unwrap();
        assert_close(cov.get(0, 0), 0.0, 1e-20);
    }

    #[test]
    fn conditional_cov_two_atoms_matches_oracle() {
        // Well-separated atoms at +-a: the denoiser is close to a sign
        // classifier, so the conditional covariance approaches a^2. Compare
        // the default-size MC estimate against a large-sample oracle.
        let a = 4.0;
        let prior =
            DiscreteDistribution::new(1, vec![-a, a], vec![0.5, 0.5]).unwrap();
        let model = LikelihoodModel::gaussian_scalar(1.0);
        let est = conditional_cov_of_bayes(&model, &prior, &Heterogeneity::None, &[0.0], 100, 21)
            .unwrap()
            .get(0, 0);
        let oracle = conditional_cov_of_bayes(
            &model,
            &prior,
            &Heterogeneity::None,
            &[0.0],
            500_000,
            22,
        )
        .unwrap()
        .get(0, 0);
        assert!((oracle - a * a).abs() < 0.05, "oracle {oracle}");
        // Per-draw variance of the squared denoiser is below a^4; three
        // standard errors of the 2x100-draw estimate.
        let se = a * a / (200.0f64).sqrt();
        assert!((est - oracle).abs() < 3.0 * se, "est {est} oracle {oracle}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn prop_conjugate_slope_in_unit_interval(seed in 0u64..500) {
            let mut rng = SeedStream::new(seed);
            let n = 20;
            let rows: Vec<Vec<f64>> =
                (0..n).map(|_| vec![(rng.poisson(3.0) as f64)]).collect();
            let data = Dataset::from_rows(&rows);
            if let Ok(d) = conjugate_vcb(ConjugateFamily::PoissonGamma, &data) {
                let s = d.slope.get(0, 0);
                prop_assert!((0.0..=1.0).contains(&s));
                if s > 0.0 {
                    // Denoised sample variance equals (s^2 - V(mu))_+ exactly.
                    let denoised = d.apply_rows(data.values(), n, 1);
                    let dv = linalg::sample_cov(&denoised, n, 1)[0];
                    let (mu, s2) = scalar_sample_moments(&data).unwrap();
                    prop_assert!((dv - (s2 - mu).max(0.0)).abs() <= 1e-10 * (1.0 + dv));
                }
            }
        }
    }
}
