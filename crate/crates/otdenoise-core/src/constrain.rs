//! Constrained denoisers: variance-, distribution-, and general-constrained
//! post-processing of a Bayes denoiser, their heterogeneous variants, and
//! report diagnostics.
//!
//! The variance-constrained family recenters the Bayes values at their own
//! sample mean before applying the transport map, then shifts to the target
//! mean; this makes the mean constraint hold exactly in-sample, and the
//! covariance constraint holds exactly whenever the map exists untruncated.

use crate::bures::{self, BuresError, SpdMatrix};
use crate::gmodel::{
    self, DiscreteDistribution, GmodelError, Prior,
};
use crate::linalg::{self, Matrix};
use crate::models::{
    self, AffineDenoiser, Dataset, Heterogeneity, LikelihoodModel, ModelError,
};
use crate::rng::derive_seed;
use crate::transport::{
    self, ConstraintFn, ConstraintSpec, CostMatrix, Coupling, TransportError,
};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConstrainError {
    #[error(
        "sample covariance of the Bayes values is not strictly positive definite; \
         rerun with a positive pd_ridge to regularize"
    )]
    BayesCovarianceSingular,
    #[error(transparent)]
    Bures(#[from] BuresError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Gmodel(#[from] GmodelError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("invalid denoiser input: {0}")]
    BadInput(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Bayes,
    Vcb,
    Dcb,
    Gcb,
    Mvcb,
    Cvcb,
    Mdcb,
    Mgcb,
    Conjugate,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct SolverDiagnostics {
    pub iterations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mc_samples: Option<usize>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Denoised values plus the constraint bookkeeping of the method that
/// produced them.
#[derive(Debug, Clone)]
pub struct DenoiseReport {
    pub method: Method,
    pub m: usize,
    /// n stacked m-vectors.
    pub values: Vec<f64>,
    /// For the affine (variance-constrained) family: the map applied to the
    /// Bayes values.
    pub affine: Option<AffineDenoiser>,
    /// LP objective for the coupling-based methods.
    pub objective: Option<f64>,
    pub target_mean: Option<Vec<f64>>,
    pub target_cov: Option<SpdMatrix>,
    /// Coupling-level residuals (meaning depends on the method; see each
    /// constructor).
    pub constraint_residuals: Vec<f64>,
    /// Residuals of the same constraints evaluated on the barycentric
    /// projection (general-constrained only; the projection can split rows).
    pub projection_residuals: Vec<f64>,
    /// Column marginal of the optimal coupling (general-constrained only):
    /// the projected latent distribution.
    pub projected_latent: Option<DiscreteDistribution>,
    pub coupling: Option<Coupling>,
    pub prior_used: Option<DiscreteDistribution>,
    pub diagnostics: SolverDiagnostics,
}

impl DenoiseReport {
    fn bare(method: Method, m: usize, values: Vec<f64>) -> Self {
        DenoiseReport {
            method,
            m,
            values,
            affine: None,
            objective: None,
            target_mean: None,
            target_cov: None,
            constraint_residuals: Vec::new(),
            projection_residuals: Vec::new(),
            projected_latent: None,
            coupling: None,
            prior_used: None,
            diagnostics: SolverDiagnostics::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct VcbOptions {
    /// Ridge added to the Bayes covariance when it is not strictly positive
    /// definite. Zero means refuse instead of regularize.
    pub pd_ridge: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct CvcbOptions {
    pub mc_samples: usize,
    pub seed: u64,
    pub pd_ridge: f64,
}

impl Default for CvcbOptions {
    fn default() -> Self {
        CvcbOptions {
            mc_samples: 100,
            seed: 0,
            pd_ridge: 0.0,
        }
    }
}

fn check_bayes(data: &Dataset, bayes: &[f64]) -> Result<(), ConstrainError> {
    if bayes.len() != data.n() * data.m() {
        return Err(ConstrainError::BadInput(format!(
            "bayes buffer of {} entries does not match {} rows of dimension {}",
            bayes.len(),
            data.n(),
            data.m()
        )));
    }
    Ok(())
}

/// Shared core of the variance-constrained family: moment-match the Bayes
/// values to (target_mean, target_cov).
fn moment_match(
    bayes: &[f64],
    n: usize,
    m: usize,
    target_mean: &[f64],
    target_cov: &SpdMatrix,
    pd_ridge: f64,
) -> Result<(Vec<f64>, AffineDenoiser), ConstrainError> {
    let bayes_mean = linalg::sample_mean(bayes, n, m);
    let bayes_cov = linalg::sample_cov(bayes, n, m);
    let m_hat = SpdMatrix::new(m, bayes_cov).map_err(|_| ConstrainError::BayesCovarianceSingular)?;
    let m_hat = if pd_ridge > 0.0 {
        m_hat.add_ridge(pd_ridge)
    } else {
        m_hat
    };
    let tmap = match bures::transport_map(&m_hat, target_cov) {
        Ok(t) => t,
        Err(BuresError::FromNotPositiveDefinite { .. }) => {
            return Err(ConstrainError::BayesCovarianceSingular)
        }
        Err(e) => return Err(e.into()),
    };
    let mut intercept = target_mean.to_vec();
    let shift = tmap.matvec(&bayes_mean);
    for d in 0..m {
        intercept[d] -= shift[d];
    }
    let affine = AffineDenoiser::new(tmap, intercept);
    let values = affine.apply_rows(bayes, n, m);
    Ok((values, affine))
}

fn moment_residuals(
    values: &[f64],
    n: usize,
    m: usize,
    target_mean: &[f64],
    target_cov: &SpdMatrix,
) -> Vec<f64> {
    let mean = linalg::sample_mean(values, n, m);
    let mean_resid = mean
        .iter()
        .zip(target_mean)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    let cov = linalg::sample_cov(values, n, m);
    let diff = Matrix::from_vec(m, m, cov).sub(&target_cov.to_matrix());
    let cov_resid = diff.frob_norm() / (1.0 + target_cov.frob_norm());
    vec![mean_resid, cov_resid]
}

/// Variance-constrained denoiser for the homogeneous setting: the target
/// moments are the sample mean of the standardized observations and
/// (S - Sigma)_+ .
pub fn variance_constrained(
    data: &Dataset,
    model: &LikelihoodModel,
    bayes: &[f64],
    opts: &VcbOptions,
) -> Result<DenoiseReport, ConstrainError> {
    model.validate(data)?;
    check_bayes(data, bayes)?;
    let (n, m) = (data.n(), data.m());
    if n < 2 {
        return Err(ConstrainError::BadInput(
            "variance-constrained denoising needs at least two observations".into(),
        ));
    }
    let std = models::standardize(data, model);
    let mu_hat = linalg::sample_mean(&std, n, m);
    let s_hat = linalg::sample_cov(&std, n, m);
    let sigma_hat = models::estimate_noise_cov(model, data)?;
    let mut raw = s_hat;
    for (v, s) in raw.iter_mut().zip(sigma_hat.as_slice()) {
        *v -= s;
    }
    let a_hat = bures::psd_truncate(m, &raw)?;
    let (values, affine) = moment_match(bayes, n, m, &mu_hat, &a_hat, opts.pd_ridge)?;
    let residuals = moment_residuals(&values, n, m, &mu_hat, &a_hat);
    let mut report = DenoiseReport::bare(Method::Vcb, m, values);
    report.affine = Some(affine);
    report.target_mean = Some(mu_hat);
    report.target_cov = Some(a_hat);
    report.constraint_residuals = residuals;
    Ok(report)
}

/// Marginal variance-constrained denoiser: identical to
/// `variance_constrained` except the target moments come from the fitted
/// prior rather than from the observations.
pub fn marginal_variance_constrained(
    data: &Dataset,
    model: &LikelihoodModel,
    bayes: &[f64],
    prior: &Prior,
    opts: &VcbOptions,
) -> Result<DenoiseReport, ConstrainError> {
    model.validate(data)?;
    check_bayes(data, bayes)?;
    let (n, m) = (data.n(), data.m());
    let (mu_hat, a_hat) = gmodel::prior_moments(prior);
    let (values, affine) = moment_match(bayes, n, m, &mu_hat, &a_hat, opts.pd_ridge)?;
    let residuals = moment_residuals(&values, n, m, &mu_hat, &a_hat);
    let mut report = DenoiseReport::bare(Method::Mvcb, m, values);
    report.affine = Some(affine);
    report.target_mean = Some(mu_hat);
    report.target_cov = Some(a_hat);
    report.constraint_residuals = residuals;
    report.prior_used = Some(prior.base().clone());
    Ok(report)
}

/// Conditional variance-constrained denoiser: observations are grouped by
/// exact equality of their heterogeneity value, and each group gets its own
/// transport map from the Monte-Carlo conditional covariance of the Bayes
/// denoiser to the prior covariance. Assumes the latent variable is
/// independent of the heterogeneity.
pub fn conditional_variance_constrained(
    data: &Dataset,
    model: &LikelihoodModel,
    prior: &DiscreteDistribution,
    opts: &CvcbOptions,
) -> Result<DenoiseReport, ConstrainError> {
    model.validate(data)?;
    let (n, m) = (data.n(), data.m());
    let prior_ref = Prior::Discrete(prior.clone());
    let table = gmodel::posterior_table(&prior_ref, data, model)?;
    let bayes = gmodel::bayes_denoise(&table);
    let (mu_hat, a_hat) = gmodel::prior_moments(&prior_ref);

    // Group rows by exact heterogeneity value, in order of first occurrence.
    let mut keys: Vec<Vec<u64>> = Vec::new();
    let mut group_of = vec![0usize; n];
    let mut group_xi: Vec<Heterogeneity> = Vec::new();
    for i in 0..n {
        let xi = model.row_heterogeneity(i);
        let key: Vec<u64> = match &xi {
            Heterogeneity::None => Vec::new(),
            Heterogeneity::GaussianCov(c) => c.as_slice().iter().map(|v| v.to_bits()).collect(),
            Heterogeneity::Exposure(e) => e.iter().map(|v| v.to_bits()).collect(),
        };
        match keys.iter().position(|k| *k == key) {
            Some(g) => group_of[i] = g,
            None => {
                group_of[i] = keys.len();
                keys.push(key);
                group_xi.push(xi);
            }
        }
    }

    let mut values = vec![0.0; n * m];
    let mut warnings = Vec::new();
    for (g, xi) in group_xi.iter().enumerate() {
        let members: Vec<usize> = (0..n).filter(|&i| group_of[i] == g).collect();
        if members.len() < 2 {
            warnings.push(format!(
                "heterogeneity group {g} has only {} observation(s); its map is still exact in the model",
                members.len()
            ));
        }
        let group_seed = derive_seed(opts.seed, g as u64);
        let cond_cov = models::conditional_cov_of_bayes(
            model,
            prior,
            xi,
            &mu_hat,
            opts.mc_samples,
            group_seed,
        )?;
        let cond_cov = if opts.pd_ridge > 0.0 {
            cond_cov.add_ridge(opts.pd_ridge)
        } else {
            cond_cov
        };
        let tmap = match bures::transport_map(&cond_cov, &a_hat) {
            Ok(t) => t,
            Err(BuresError::FromNotPositiveDefinite { .. }) => {
                return Err(ConstrainError::BayesCovarianceSingular)
            }
            Err(e) => return Err(e.into()),
        };
        for &i in &members {
            let centered: Vec<f64> = (0..m).map(|d| bayes[i * m + d] - mu_hat[d]).collect();
            let mapped = tmap.matvec(&centered);
            for d in 0..m {
                values[i * m + d] = mapped[d] + mu_hat[d];
            }
        }
    }

    let mut report = DenoiseReport::bare(Method::Cvcb, m, values);
    report.target_mean = Some(mu_hat);
    report.target_cov = Some(a_hat);
    report.prior_used = Some(prior.clone());
    report.diagnostics = SolverDiagnostics {
        iterations: group_xi.len(),
        seed: Some(opts.seed),
        mc_samples: Some(opts.mc_samples),
        warnings,
    };
    Ok(report)
}

/// Distribution-constrained denoiser: optimal transport from the empirical
/// distribution of the Bayes values onto the fitted prior, then barycentric
/// projection. The heterogeneous variant differs only in how `bayes` was
/// computed, and is tagged accordingly.
pub fn distribution_constrained(
    data: &Dataset,
    model: &LikelihoodModel,
    bayes: &[f64],
    prior: &DiscreteDistribution,
    cap: usize,
) -> Result<DenoiseReport, ConstrainError> {
    model.validate(data)?;
    check_bayes(data, bayes)?;
    let (n, m) = (data.n(), data.m());
    if prior.is_empty() {
        return Err(ConstrainError::BadInput("prior has no atoms".into()));
    }
    let cost = CostMatrix::squared_distances(bayes, prior.atoms(), m);
    let row_w = vec![1.0 / n as f64; n];
    let coupling = transport::solve_ot_capped(&cost, &row_w, prior.weights(), cap)?;
    let values = transport::barycentric_projection(&coupling, prior.atoms(), m)?;
    let col_resid = coupling
        .column_sums()
        .iter()
        .zip(prior.weights())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    let method = if model.is_heterogeneous() {
        Method::Mdcb
    } else {
        Method::Dcb
    };
    let mut report = DenoiseReport::bare(method, m, values);
    report.objective = Some(coupling.objective);
    report.constraint_residuals = vec![col_resid];
    report.diagnostics.iterations = coupling.iterations;
    report.coupling = Some(coupling);
    report.prior_used = Some(prior.clone());
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct GcbGridOptions {
    /// Lattice resolution per axis; defaults to 200 in one dimension and 50
    /// per axis otherwise.
    pub points_per_axis: Option<usize>,
    /// Bounding-box expansion per side, as a fraction of the data range.
    pub expand: f64,
}

impl Default for GcbGridOptions {
    fn default() -> Self {
        GcbGridOptions {
            points_per_axis: None,
            expand: 0.1,
        }
    }
}

impl GcbGridOptions {
    fn resolve_points(&self, m: usize) -> usize {
        self.points_per_axis.unwrap_or(match m {
            1 => 200,
            2 => 50,
            _ => 12,
        })
    }
}

/// Lattice over the expanded bounding box of the standardized data,
/// augmented with the prior atoms (which guarantee feasibility of the
/// moment constraints on the grid).
pub fn gcb_grid(
    data: &Dataset,
    model: &LikelihoodModel,
    prior: &DiscreteDistribution,
    opts: &GcbGridOptions,
) -> Vec<f64> {
    let m = data.m();
    let std = models::standardize(data, model);
    let mut lo = vec![f64::INFINITY; m];
    let mut hi = vec![f64::NEG_INFINITY; m];
    for i in 0..data.n() {
        for d in 0..m {
            lo[d] = lo[d].min(std[i * m + d]);
            hi[d] = hi[d].max(std[i * m + d]);
        }
    }
    for d in 0..m {
        let range = hi[d] - lo[d];
        let pad = if range > 0.0 { opts.expand * range } else { 1.0 };
        lo[d] -= pad;
        hi[d] += pad;
        if !model.is_gaussian() {
            lo[d] = lo[d].max(0.0);
        }
    }
    let k = opts.resolve_points(m);
    let mut grid = Vec::with_capacity(k.pow(m as u32) * m + prior.atoms().len());
    let mut index = vec![0usize; m];
    'fill: loop {
        for d in 0..m {
            let frac = if k == 1 {
                0.5
            } else {
                index[d] as f64 / (k - 1) as f64
            };
            grid.push(lo[d] + frac * (hi[d] - lo[d]));
        }
        let mut d = m;
        loop {
            if d == 0 {
                break 'fill;
            }
            d -= 1;
            index[d] += 1;
            if index[d] < k {
                break;
            }
            index[d] = 0;
        }
    }
    // Append prior atoms not already on the lattice.
    let mut seen: std::collections::HashSet<Vec<u64>> = grid
        .chunks(m)
        .map(|a| a.iter().map(|v| v.to_bits()).collect())
        .collect();
    for j in 0..prior.len() {
        let atom = prior.atom(j);
        let key: Vec<u64> = atom.iter().map(|v| v.to_bits()).collect();
        if seen.insert(key) {
            grid.extend_from_slice(atom);
        }
    }
    grid
}

/// General-constrained denoiser: a moment-constrained coupling between the
/// empirical distribution of the Bayes values and a compact grid, followed
/// by barycentric projection. Targets are the prior expectations of the
/// constraint functions.
pub fn general_constrained(
    data: &Dataset,
    model: &LikelihoodModel,
    bayes: &[f64],
    prior: &DiscreteDistribution,
    functions: Vec<ConstraintFn>,
    grid_opts: &GcbGridOptions,
    cap: usize,
) -> Result<DenoiseReport, ConstrainError> {
    model.validate(data)?;
    check_bayes(data, bayes)?;
    let (n, m) = (data.n(), data.m());
    let spec = ConstraintSpec::with_targets_from(functions, prior)?;
    let grid = gcb_grid(data, model, prior, grid_opts);
    let cost = CostMatrix::squared_distances(bayes, &grid, m);
    let row_w = vec![1.0 / n as f64; n];
    let coupling =
        transport::solve_constrained_coupling_capped(&cost, &row_w, &spec, &grid, m, cap)?;
    let values = transport::barycentric_projection(&coupling, &grid, m)?;

    // Column marginal of the optimal coupling: the projected latent
    // distribution.
    let col_sums = coupling.column_sums();
    let mut h_atoms = Vec::new();
    let mut h_weights = Vec::new();
    for (j, &w) in col_sums.iter().enumerate() {
        if w > 0.0 {
            h_atoms.extend_from_slice(&grid[j * m..(j + 1) * m]);
            h_weights.push(w);
        }
    }
    let total = linalg::pairwise_sum(&h_weights);
    for w in h_weights.iter_mut() {
        *w /= total;
    }
    let projected = DiscreteDistribution::new(m, h_atoms, h_weights)?;

    let projection_residuals: Vec<f64> = spec
        .functions
        .iter()
        .zip(&spec.targets)
        .map(|(f, t)| {
            let terms: Vec<f64> = (0..n).map(|i| f.eval(&values[i * m..(i + 1) * m])).collect();
            (linalg::pairwise_sum(&terms) / n as f64 - t).abs()
        })
        .collect();

    let method = if model.is_heterogeneous() {
        Method::Mgcb
    } else {
        Method::Gcb
    };
    let mut report = DenoiseReport::bare(method, m, values);
    report.objective = Some(coupling.objective);
    report.constraint_residuals = coupling
        .constraint_residuals
        .iter()
        .map(|r| r.abs())
        .collect();
    report.projection_residuals = projection_residuals;
    report.projected_latent = Some(projected);
    report.diagnostics.iterations = coupling.iterations;
    report.coupling = Some(coupling);
    report.prior_used = Some(prior.clone());
    Ok(report)
}

/// Evaluation metrics for a denoising report.
#[derive(Debug, Clone, Serialize)]
pub struct Metrics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub empirical_risk: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_residual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cov_residual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w2_to_prior: Option<f64>,
    pub constraint_residuals: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub projection_residuals: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub objective: Option<f64>,
}

/// Mean squared distance between stacked vectors.
pub fn empirical_risk(values: &[f64], latents: &[f64], n: usize, m: usize) -> f64 {
    assert_eq!(values.len(), n * m);
    assert_eq!(latents.len(), n * m);
    let terms: Vec<f64> = (0..n)
        .map(|i| {
            (0..m)
                .map(|d| (values[i * m + d] - latents[i * m + d]).powi(2))
                .sum::<f64>()
        })
        .collect();
    linalg::pairwise_sum(&terms) / n as f64
}

pub fn diagnostics(
    report: &DenoiseReport,
    data: &Dataset,
    prior: Option<&DiscreteDistribution>,
    latents: Option<&[f64]>,
) -> Metrics {
    let (n, m) = (data.n(), report.m);
    let empirical_risk = latents.map(|l| empirical_risk(&report.values, l, n, m));
    let (mean_residual, cov_residual) = match (&report.target_mean, &report.target_cov) {
        (Some(mu), Some(cov)) => {
            let r = moment_residuals(&report.values, n, m, mu, cov);
            (Some(r[0]), Some(r[1]))
        }
        _ => (None, None),
    };
    let w2_to_prior = prior.and_then(|p| {
        let empirical = DiscreteDistribution::new(
            m,
            report.values.clone(),
            vec![1.0 / n as f64; n],
        )
        .ok()?;
        transport::w2_sq(&empirical, p).ok()
    });
    Metrics {
        empirical_risk,
        mean_residual,
        cov_residual,
        w2_to_prior,
        constraint_residuals: report.constraint_residuals.clone(),
        projection_residuals: report.projection_residuals.clone(),
        objective: report.objective,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmodel::{build_grid, fit_weights, posterior_table, FitOptions, GridOptions};
    use crate::rng::SeedStream;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    fn scalar_data(values: &[f64]) -> Dataset {
        Dataset::new(values.len(), 1, values.to_vec())
    }

    #[test]
    fn vcb_fixed_point_when_moments_already_match() {
        // Noiseless model: A = S, and bayes = data, so M = S and t = I.
        let data = scalar_data(&[0.0, 1.0, 2.0, 5.0]);
        let model = LikelihoodModel::gaussian_scalar(0.0);
        let report =
            variance_constrained(&data, &model, data.values(), &VcbOptions::default()).unwrap();
        for (v, z) in report.values.iter().zip(data.values()) {
            assert_close(*v, *z, 1e-10);
        }
        assert!(report.constraint_residuals[0] <= 1e-8);
        assert!(report.constraint_residuals[1] <= 1e-6);
    }

    #[test]
    fn vcb_total_shrinkage_when_a_is_zero() {
        // Pure-noise data: S` <= Sigma, so A = 0 and all outputs equal the
        // sample mean.
        let data = scalar_data(&[-0.1, 0.1, -0.05, 0.05]);
        let model = LikelihoodModel::gaussian_scalar(10.0);
        let bayes = vec![0.0, 0.02, -0.01, 0.01];
        let report = variance_constrained(&data, &model, &bayes, &VcbOptions::default()).unwrap();
        let mu = linalg::sample_mean(data.values(), 4, 1)[0];
        for v in &report.values {
            assert_close(*v, mu, 1e-12);
        }
    }

    #[test]
    fn vcb_moment_matching_is_exact() {
        let mut rng = SeedStream::new(31);
        let n = 500;
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            let theta = 2.0 * rng.normal();
            values.push(theta + rng.normal());
        }
        let data = scalar_data(&values);
        let model = LikelihoodModel::gaussian_scalar(1.0);
        // Convenient stand-in Bayes rule: linear shrinkage.
        let bayes: Vec<f64> = values.iter().map(|z| 0.7 * z + 0.1).collect();
        let report = variance_constrained(&data, &model, &bayes, &VcbOptions::default()).unwrap();
        assert!(report.constraint_residuals[0] <= 1e-8);
        assert!(report.constraint_residuals[1] <= 1e-6);

        // The output is exactly affine in the bayes input.
        let affine = report.affine.as_ref().unwrap();
        for i in 0..n {
            let want = affine.eval(&bayes[i..=i]);
            assert_close(report.values[i], want[0], 1e-12);
        }
    }

    #[test]
    fn vcb_rejects_singular_bayes_covariance_without_ridge() {
        let data = scalar_data(&[0.0, 1.0, 2.0, 3.0]);
        let model = LikelihoodModel::gaussian_scalar(0.5);
        let bayes = vec![1.0; 4];
        let err = variance_constrained(&data, &model, &bayes, &VcbOptions::default());
        assert!(matches!(err, Err(ConstrainError::BayesCovarianceSingular)));
        let ok = variance_constrained(&data, &model, &bayes, &VcbOptions { pd_ridge: 1e-6 });
        assert!(ok.is_ok());
    }

    #[test]
    fn mvcb_matches_vcb_when_prior_moments_equal_sample_moments() {
        let mut rng = SeedStream::new(5);
        let n = 200;
        let values: Vec<f64> = (0..n).map(|_| rng.normal() * 2.0).collect();
        let data = scalar_data(&values);
        let model = LikelihoodModel::gaussian_scalar(1.0);
        let bayes: Vec<f64> = values.iter().map(|z| 0.6 * z).collect();

        let vcb = variance_constrained(&data, &model, &bayes, &VcbOptions::default()).unwrap();
        // Two-atom prior with exactly the VCB target moments.
        let mu = vcb.target_mean.as_ref().unwrap()[0];
        let a = vcb.target_cov.as_ref().unwrap().get(0, 0);
        let prior = Prior::Discrete(
            DiscreteDistribution::new(
                1,
                vec![mu - a.sqrt(), mu + a.sqrt()],
                vec![0.5, 0.5],
            )
            .unwrap(),
        );
        let mvcb =
            marginal_variance_constrained(&data, &model, &bayes, &prior, &VcbOptions::default())
                .unwrap();
        for (x, y) in vcb.values.iter().zip(&mvcb.values) {
            assert_close(*x, *y, 1e-10);
        }
    }

    #[test]
    fn mvcb_point_mass_prior_collapses_output() {
        let data = scalar_data(&[0.0, 1.0, 2.0]);
        let model = LikelihoodModel::gaussian_scalar(1.0);
        let bayes = vec![0.4, 0.9, 1.4];
        let prior = Prior::Discrete(DiscreteDistribution::point_mass(vec![0.7]));
        let report =
            marginal_variance_constrained(&data, &model, &bayes, &prior, &VcbOptions::default())
                .unwrap();
        for v in &report.values {
            assert_close(*v, 0.7, 1e-12);
        }
    }

    #[test]
    fn cvcb_single_group_close_to_mvcb() {
        // With one heterogeneity value the conditional covariance targets the
        // same quantity as the sample covariance of the Bayes values; the two
        // outputs agree up to Monte-Carlo error.
        let mut rng = SeedStream::new(17);
        let n = 800;
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            let theta = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
            values.push(theta + rng.normal());
        }
        let data = scalar_data(&values);
        let model = LikelihoodModel::gaussian_scalar(1.0);
        let prior = DiscreteDistribution::new(1, vec![-1.0, 1.0], vec![0.5, 0.5]).unwrap();
        let prior_ref = Prior::Discrete(prior.clone());
        let table = posterior_table(&prior_ref, &data, &model).unwrap();
        let bayes = gmodel::bayes_denoise(&table);

        let mvcb =
            marginal_variance_constrained(&data, &model, &bayes, &prior_ref, &VcbOptions::default())
                .unwrap();
        let cvcb = conditional_variance_constrained(
            &data,
            &model,
            &prior,
            &CvcbOptions {
                mc_samples: 4000,
                seed: 3,
                pd_ridge: 0.0,
            },
        )
        .unwrap();
        // Compare the per-group scale: both maps shrink toward the same mean.
        let v1 = linalg::sample_cov(&mvcb.values, n, 1)[0];
        let v2 = linalg::sample_cov(&cvcb.values, n, 1)[0];
        let rel = (v1 - v2).abs() / v1;
        assert!(rel < 0.1, "MVCB var {v1}, CVCB var {v2}");
    }

    #[test]
    fn cvcb_noiseless_group_passes_through() {
        // A vanishing-noise group identifies the latent atom exactly, so
        // its conditional map is the identity and the outputs equal the
        // Bayes values.
        let prior = DiscreteDistribution::new(1, vec![-1.0, 1.0], vec![0.5, 0.5]).unwrap();
        let noiseless = 1e-10;
        let values = vec![-1.0, 1.0, 1.0, -1.0, 0.4, -0.9, 1.7];
        let vars = vec![noiseless, noiseless, noiseless, noiseless, 1.0, 1.0, 1.0];
        let data = scalar_data(&values);
        let model = LikelihoodModel::GaussianHeteroscedastic {
            noise_covs: vars.iter().map(|&v| SpdMatrix::scalar(v)).collect(),
        };
        let prior_ref = Prior::Discrete(prior.clone());
        let table = posterior_table(&prior_ref, &data, &model).unwrap();
        let bayes = gmodel::bayes_denoise(&table);
        let report = conditional_variance_constrained(
            &data,
            &model,
            &prior,
            &CvcbOptions {
                mc_samples: 200,
                seed: 8,
                pd_ridge: 0.0,
            },
        )
        .unwrap();
        for i in 0..4 {
            assert_close(report.values[i], bayes[i], 1e-6);
            assert_close(report.values[i], values[i], 1e-6);
        }
    }

    #[test]
    fn dcb_self_coupling_is_identity() {
        let bayes = vec![0.0, 1.0, 2.0, 3.0];
        let data = scalar_data(&bayes);
        let model = LikelihoodModel::gaussian_scalar(1.0);
        let prior = DiscreteDistribution::new(1, bayes.clone(), vec![0.25; 4]).unwrap();
        let report = distribution_constrained(
            &data,
            &model,
            &bayes,
            &prior,
            transport::MAX_DENSE_ENTRIES,
        )
        .unwrap();
        assert_close(report.objective.unwrap(), 0.0, 1e-15);
        for (v, b) in report.values.iter().zip(&bayes) {
            assert_close(*v, *b, 1e-12);
        }
        assert!(report.constraint_residuals[0] <= 1e-9);
    }

    #[test]
    fn dcb_point_mass_prior() {
        let bayes = vec![0.0, 1.0];
        let data = scalar_data(&bayes);
        let model = LikelihoodModel::gaussian_scalar(1.0);
        let prior = DiscreteDistribution::point_mass(vec![5.0]);
        let report = distribution_constrained(
            &data,
            &model,
            &bayes,
            &prior,
            transport::MAX_DENSE_ENTRIES,
        )
        .unwrap();
        for v in &report.values {
            assert_close(*v, 5.0, 1e-12);
        }
    }

    #[test]
    fn dcb_monotone_two_point_matching() {
        let bayes = vec![0.0, 1.0];
        let data = scalar_data(&bayes);
        let model = LikelihoodModel::gaussian_scalar(1.0);
        let prior = DiscreteDistribution::new(1, vec![0.0, 1.0], vec![0.5, 0.5]).unwrap();
        let report = distribution_constrained(
            &data,
            &model,
            &bayes,
            &prior,
            transport::MAX_DENSE_ENTRIES,
        )
        .unwrap();
        assert_close(report.objective.unwrap(), 0.0, 1e-15);
        assert_close(report.values[0], 0.0, 1e-12);
        assert_close(report.values[1], 1.0, 1e-12);
    }

    #[test]
    fn gcb_vacuous_constraint_is_nearest_grid_atom() {
        let bayes = vec![0.31, 0.77];
        let data = scalar_data(&[0.0, 1.0]);
        let model = LikelihoodModel::gaussian_scalar(1.0);
        let prior = DiscreteDistribution::new(1, vec![0.0, 1.0], vec![0.5, 0.5]).unwrap();
        let report = general_constrained(
            &data,
            &model,
            &bayes,
            &prior,
            vec![ConstraintFn::Monomial { powers: vec![0] }],
            &GcbGridOptions {
                points_per_axis: Some(21),
                expand: 0.0,
            },
            transport::MAX_DENSE_ENTRIES,
        )
        .unwrap();
        // Grid is {0, 0.05, ..., 1}: nearest atoms are 0.3 and 0.75.
        assert_close(report.values[0], 0.3, 1e-9);
        assert_close(report.values[1], 0.75, 1e-9);
    }

    #[test]
    fn gcb_with_moment_constraints_tracks_vcb() {
        let mut rng = SeedStream::new(2);
        let n = 120;
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            let theta = 1.5 * rng.normal();
            values.push(theta + rng.normal());
        }
        let data = scalar_data(&values);
        let model = LikelihoodModel::gaussian_scalar(1.0);
        let atoms = build_grid(&data, &model, &GridOptions::lattice(80)).unwrap();
        let fit = fit_weights(&atoms, &data, &model, &FitOptions::default()).unwrap();
        let prior_ref = Prior::Discrete(fit.prior.clone());
        let table = posterior_table(&prior_ref, &data, &model).unwrap();
        let bayes = gmodel::bayes_denoise(&table);

        let vcb = variance_constrained(&data, &model, &bayes, &VcbOptions::default()).unwrap();
        // To make GCB target the same moments as VCB, hand it a two-atom
        // prior carrying exactly those target moments.
        let mu = vcb.target_mean.as_ref().unwrap()[0];
        let a = vcb.target_cov.as_ref().unwrap().get(0, 0);
        let moment_prior = DiscreteDistribution::new(
            1,
            vec![mu - a.sqrt(), mu + a.sqrt()],
            vec![0.5, 0.5],
        )
        .unwrap();
        let gcb = general_constrained(
            &data,
            &model,
            &bayes,
            &moment_prior,
            vec![
                ConstraintFn::Monomial { powers: vec![1] },
                ConstraintFn::Monomial { powers: vec![2] },
            ],
            &GcbGridOptions::default(),
            transport::MAX_DENSE_ENTRIES,
        )
        .unwrap();
        // Outputs agree within two grid spacings.
        let std = models::standardize(&data, &model);
        let lo = std.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = std.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let spacing = 1.2 * (hi - lo) / 199.0;
        let mut max_gap = 0.0f64;
        for (g, v) in gcb.values.iter().zip(&vcb.values) {
            max_gap = max_gap.max((g - v).abs());
        }
        assert!(
            max_gap <= 2.0 * spacing,
            "max gap {max_gap}, spacing {spacing}"
        );
        for r in &gcb.constraint_residuals {
            assert!(*r <= 1e-8);
        }
    }

    #[test]
    fn diagnostics_values() {
        let data = scalar_data(&[0.0, 1.0]);
        let report = DenoiseReport::bare(Method::Bayes, 1, vec![0.0, 1.0]);
        let metrics = diagnostics(&report, &data, None, Some(&[0.0, 1.0]));
        assert_close(metrics.empirical_risk.unwrap(), 0.0, 0.0);

        let metrics = diagnostics(&report, &data, None, Some(&[1.0, 1.0]));
        assert_close(metrics.empirical_risk.unwrap(), 0.5, 1e-15);
    }
}
