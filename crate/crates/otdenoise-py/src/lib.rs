//! Python bindings for otdenoise: model construction, NPMLE fitting, the
//! Bayes denoiser, and the constrained denoisers.
//!
//! Data crosses the boundary as plain lists of rows (`list[list[float]]`);
//! everything heavy stays in Rust.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use otdenoise_core::bures::{self, SpdMatrix};
use otdenoise_core::constrain::{self, CvcbOptions, DenoiseReport, GcbGridOptions, VcbOptions};
use otdenoise_core::gmodel::{
    self, build_grid, em_refine, fit_weights, smooth_npmle, DiscreteDistribution, FitOptions,
    GridOptions, Prior as CorePrior,
};
use otdenoise_core::models::{Dataset, LikelihoodModel};
use otdenoise_core::transport::{self, ConstraintFn, CostMatrix};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn flat_rows(rows: &[Vec<f64>], what: &str) -> PyResult<(usize, usize, Vec<f64>)> {
    let n = rows.len();
    if n == 0 {
        return Err(PyValueError::new_err(format!("{what} must be non-empty")));
    }
    let m = rows[0].len();
    if m == 0 || rows.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err(format!(
            "{what} must be rectangular with positive row length"
        )));
    }
    let mut flat = Vec::with_capacity(n * m);
    for r in rows {
        flat.extend_from_slice(r);
    }
    Ok((n, m, flat))
}

fn spd_from_rows(rows: &[Vec<f64>], what: &str) -> PyResult<SpdMatrix> {
    let (n, m, flat) = flat_rows(rows, what)?;
    if n != m {
        return Err(PyValueError::new_err(format!("{what} must be square")));
    }
    SpdMatrix::new(m, flat).map_err(value_err)
}

fn rows_from_flat(values: &[f64], m: usize) -> Vec<Vec<f64>> {
    values.chunks(m).map(|c| c.to_vec()).collect()
}

/// Likelihood model attached to a dataset.
#[pyclass(skip_from_py_object)]
#[derive(Clone)]
struct Model {
    inner: LikelihoodModel,
}

#[pymethods]
impl Model {
    /// Homoscedastic Gaussian with known covariance.
    #[staticmethod]
    fn gaussian(noise_cov: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(Model {
            inner: LikelihoodModel::GaussianHomoscedastic {
                noise_cov: spd_from_rows(&noise_cov, "noise_cov")?,
            },
        })
    }

    /// Univariate Gaussian with known variance.
    #[staticmethod]
    fn gaussian_scalar(sigma2: f64) -> Self {
        Model {
            inner: LikelihoodModel::gaussian_scalar(sigma2),
        }
    }

    /// Heteroscedastic Gaussian: one covariance per observation.
    #[staticmethod]
    fn gaussian_rows(noise_covs: Vec<Vec<Vec<f64>>>) -> PyResult<Self> {
        let covs = noise_covs
            .iter()
            .map(|c| spd_from_rows(c, "noise covariance"))
            .collect::<PyResult<Vec<_>>>()?;
        Ok(Model {
            inner: LikelihoodModel::GaussianHeteroscedastic { noise_covs: covs },
        })
    }

    /// Poisson counts with per-observation exposures (n x m).
    #[staticmethod]
    fn poisson(exposures: Vec<Vec<f64>>) -> PyResult<Self> {
        let (_, m, flat) = flat_rows(&exposures, "exposures")?;
        Ok(Model {
            inner: LikelihoodModel::PoissonExposure { m, exposures: flat },
        })
    }

    fn is_heterogeneous(&self) -> bool {
        self.inner.is_heterogeneous()
    }

    fn __repr__(&self) -> String {
        match &self.inner {
            LikelihoodModel::GaussianHomoscedastic { noise_cov } => {
                format!("Model.gaussian(dim={})", noise_cov.dim())
            }
            LikelihoodModel::GaussianHeteroscedastic { noise_covs } => {
                format!("Model.gaussian_rows(n={})", noise_covs.len())
            }
            LikelihoodModel::PoissonExposure { m, exposures } => {
                format!("Model.poisson(n={}, m={m})", exposures.len() / m)
            }
        }
    }
}

/// Fitted prior: weighted atoms, optionally convolved with a Gaussian kernel.
#[pyclass(skip_from_py_object)]
#[derive(Clone)]
struct Prior {
    inner: CorePrior,
}

#[pymethods]
impl Prior {
    #[staticmethod]
    fn discrete(atoms: Vec<Vec<f64>>, weights: Vec<f64>) -> PyResult<Self> {
        let (_, m, flat) = flat_rows(&atoms, "atoms")?;
        let dist = DiscreteDistribution::new(m, flat, weights).map_err(value_err)?;
        Ok(Prior {
            inner: CorePrior::Discrete(dist),
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let parsed: gmodel::PriorJson = serde_json::from_str(text).map_err(value_err)?;
        Ok(Prior {
            inner: CorePrior::from_json(parsed).map_err(value_err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner.to_json()).map_err(runtime_err)
    }

    fn atoms(&self) -> Vec<Vec<f64>> {
        let base = self.inner.base();
        (0..base.len()).map(|j| base.atom(j).to_vec()).collect()
    }

    fn weights(&self) -> Vec<f64> {
        self.inner.base().weights().to_vec()
    }

    fn kernel_cov(&self) -> Option<Vec<Vec<f64>>> {
        self.inner.kernel_cov().map(|k| {
            (0..k.dim())
                .map(|i| (0..k.dim()).map(|j| k.get(i, j)).collect())
                .collect()
        })
    }

    /// (mean, covariance) of the prior.
    fn moments(&self) -> (Vec<f64>, Vec<Vec<f64>>) {
        let (mean, cov) = gmodel::prior_moments(&self.inner);
        let m = mean.len();
        (mean, rows_from_flat(cov.as_slice(), m))
    }

    fn __len__(&self) -> usize {
        self.inner.base().len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Prior(atoms={}, smooth={})",
            self.inner.base().len(),
            self.inner.kernel_cov().is_some()
        )
    }
}

fn grid_options(lattice: Option<usize>) -> GridOptions {
    match lattice {
        Some(k) => GridOptions::lattice(k),
        None => GridOptions::default(),
    }
}

fn report_dict(py: Python<'_>, report: &DenoiseReport) -> PyResult<Py<PyDict>> {
    let d = PyDict::new(py);
    d.set_item("method", format!("{:?}", report.method).to_lowercase())?;
    d.set_item("values", rows_from_flat(&report.values, report.m))?;
    if let Some(obj) = report.objective {
        d.set_item("objective", obj)?;
    }
    if let Some(affine) = &report.affine {
        d.set_item(
            "slope",
            rows_from_flat(affine.slope.as_slice(), affine.dim()),
        )?;
        d.set_item("intercept", affine.intercept.clone())?;
    }
    d.set_item(
        "constraint_residuals",
        report.constraint_residuals.clone(),
    )?;
    if !report.projection_residuals.is_empty() {
        d.set_item(
            "projection_residuals",
            report.projection_residuals.clone(),
        )?;
    }
    if let Some(mean) = &report.target_mean {
        d.set_item("target_mean", mean.clone())?;
    }
    Ok(d.into())
}

/// Fit the NPMLE prior over an exemplar or lattice grid.
#[pyfunction]
#[pyo3(signature = (observations, model, lattice=None, refine=false, tol=1e-9, max_iter=5000, kkt_tol=1e-4))]
fn fit_npmle(
    py: Python<'_>,
    observations: Vec<Vec<f64>>,
    model: &Model,
    lattice: Option<usize>,
    refine: bool,
    tol: f64,
    max_iter: usize,
    kkt_tol: f64,
) -> PyResult<(Prior, Py<PyDict>)> {
    let (n, m, flat) = flat_rows(&observations, "observations")?;
    let data = Dataset::new(n, m, flat);
    let opts = FitOptions {
        tol,
        max_iter,
        kkt_tol,
    };
    let atoms = build_grid(&data, &model.inner, &grid_options(lattice)).map_err(value_err)?;
    let mut fit = fit_weights(&atoms, &data, &model.inner, &opts).map_err(runtime_err)?;
    if refine {
        fit = em_refine(&fit.prior, &data, &model.inner, &opts).map_err(runtime_err)?;
    }
    let d = PyDict::new(py);
    d.set_item("log_likelihood", fit.diagnostics.log_likelihood)?;
    d.set_item("kkt_gap", fit.diagnostics.kkt_gap)?;
    d.set_item("iterations", fit.diagnostics.iterations)?;
    Ok((
        Prior {
            inner: CorePrior::Discrete(fit.prior),
        },
        d.into(),
    ))
}

/// Fit the smooth (Gaussian-mixture) NPMLE with component covariance
/// `kernel_cov`.
#[pyfunction]
#[pyo3(signature = (observations, model, kernel_cov, lattice=None, tol=1e-9, max_iter=5000, kkt_tol=1e-4))]
fn fit_smooth_npmle(
    py: Python<'_>,
    observations: Vec<Vec<f64>>,
    model: &Model,
    kernel_cov: Vec<Vec<f64>>,
    lattice: Option<usize>,
    tol: f64,
    max_iter: usize,
    kkt_tol: f64,
) -> PyResult<(Prior, Py<PyDict>)> {
    let (n, m, flat) = flat_rows(&observations, "observations")?;
    let data = Dataset::new(n, m, flat);
    let kernel = spd_from_rows(&kernel_cov, "kernel_cov")?;
    let opts = FitOptions {
        tol,
        max_iter,
        kkt_tol,
    };
    let (prior, diag) = smooth_npmle(&data, &model.inner, kernel, &grid_options(lattice), &opts)
        .map_err(runtime_err)?;
    let d = PyDict::new(py);
    d.set_item("log_likelihood", diag.log_likelihood)?;
    d.set_item("kkt_gap", diag.kkt_gap)?;
    d.set_item("iterations", diag.iterations)?;
    Ok((
        Prior {
            inner: CorePrior::Smooth(prior),
        },
        d.into(),
    ))
}

/// Posterior means under the prior, one row per observation.
#[pyfunction]
fn bayes_denoise(
    observations: Vec<Vec<f64>>,
    model: &Model,
    prior: &Prior,
) -> PyResult<Vec<Vec<f64>>> {
    let (n, m, flat) = flat_rows(&observations, "observations")?;
    let data = Dataset::new(n, m, flat);
    let table = gmodel::posterior_table(&prior.inner, &data, &model.inner).map_err(runtime_err)?;
    Ok(rows_from_flat(&gmodel::bayes_denoise(&table), m))
}

/// Variance-constrained denoiser (moments estimated from the data).
#[pyfunction]
#[pyo3(signature = (observations, model, bayes, pd_ridge=0.0))]
fn denoise_vcb(
    py: Python<'_>,
    observations: Vec<Vec<f64>>,
    model: &Model,
    bayes: Vec<Vec<f64>>,
    pd_ridge: f64,
) -> PyResult<Py<PyDict>> {
    let (n, m, flat) = flat_rows(&observations, "observations")?;
    let data = Dataset::new(n, m, flat);
    let (_, _, bayes_flat) = flat_rows(&bayes, "bayes")?;
    let report =
        constrain::variance_constrained(&data, &model.inner, &bayes_flat, &VcbOptions { pd_ridge })
            .map_err(runtime_err)?;
    report_dict(py, &report)
}

/// Marginal variance-constrained denoiser (moments from the prior).
#[pyfunction]
#[pyo3(signature = (observations, model, bayes, prior, pd_ridge=0.0))]
fn denoise_mvcb(
    py: Python<'_>,
    observations: Vec<Vec<f64>>,
    model: &Model,
    bayes: Vec<Vec<f64>>,
    prior: &Prior,
    pd_ridge: f64,
) -> PyResult<Py<PyDict>> {
    let (n, m, flat) = flat_rows(&observations, "observations")?;
    let data = Dataset::new(n, m, flat);
    let (_, _, bayes_flat) = flat_rows(&bayes, "bayes")?;
    let report = constrain::marginal_variance_constrained(
        &data,
        &model.inner,
        &bayes_flat,
        &prior.inner,
        &VcbOptions { pd_ridge },
    )
    .map_err(runtime_err)?;
    report_dict(py, &report)
}

/// Conditional variance-constrained denoiser for heterogeneous models.
#[pyfunction]
#[pyo3(signature = (observations, model, prior, mc_samples=100, seed=0, pd_ridge=0.0))]
fn denoise_cvcb(
    py: Python<'_>,
    observations: Vec<Vec<f64>>,
    model: &Model,
    prior: &Prior,
    mc_samples: usize,
    seed: u64,
    pd_ridge: f64,
) -> PyResult<Py<PyDict>> {
    let (n, m, flat) = flat_rows(&observations, "observations")?;
    let data = Dataset::new(n, m, flat);
    let CorePrior::Discrete(dist) = &prior.inner else {
        return Err(PyValueError::new_err("cvcb needs a discrete prior"));
    };
    let report = constrain::conditional_variance_constrained(
        &data,
        &model.inner,
        dist,
        &CvcbOptions {
            mc_samples,
            seed,
            pd_ridge,
        },
    )
    .map_err(runtime_err)?;
    report_dict(py, &report)
}

/// Distribution-constrained denoiser: transport onto the prior, then
/// barycentric projection.
#[pyfunction]
fn denoise_dcb(
    py: Python<'_>,
    observations: Vec<Vec<f64>>,
    model: &Model,
    bayes: Vec<Vec<f64>>,
    prior: &Prior,
) -> PyResult<Py<PyDict>> {
    let (n, m, flat) = flat_rows(&observations, "observations")?;
    let data = Dataset::new(n, m, flat);
    let (_, _, bayes_flat) = flat_rows(&bayes, "bayes")?;
    let CorePrior::Discrete(dist) = &prior.inner else {
        return Err(PyValueError::new_err("dcb needs a discrete prior"));
    };
    let report = constrain::distribution_constrained(
        &data,
        &model.inner,
        &bayes_flat,
        dist,
        transport::MAX_DENSE_ENTRIES,
    )
    .map_err(runtime_err)?;
    report_dict(py, &report)
}

/// General-constrained denoiser; constraints are given as a JSON list, e.g.
/// `[{"kind":"monomial","powers":[1]},{"kind":"support-box","lower":[0.0],"upper":[null]}]`.
#[pyfunction]
#[pyo3(signature = (observations, model, bayes, prior, constraints_json, points_per_axis=None, expand=0.1))]
#[allow(clippy::too_many_arguments)]
fn denoise_gcb(
    py: Python<'_>,
    observations: Vec<Vec<f64>>,
    model: &Model,
    bayes: Vec<Vec<f64>>,
    prior: &Prior,
    constraints_json: &str,
    points_per_axis: Option<usize>,
    expand: f64,
) -> PyResult<Py<PyDict>> {
    let (n, m, flat) = flat_rows(&observations, "observations")?;
    let data = Dataset::new(n, m, flat);
    let (_, _, bayes_flat) = flat_rows(&bayes, "bayes")?;
    let CorePrior::Discrete(dist) = &prior.inner else {
        return Err(PyValueError::new_err("gcb needs a discrete prior"));
    };
    let functions: Vec<ConstraintFn> = serde_json::from_str(constraints_json).map_err(value_err)?;
    let report = constrain::general_constrained(
        &data,
        &model.inner,
        &bayes_flat,
        dist,
        functions,
        &GcbGridOptions {
            points_per_axis,
            expand,
        },
        transport::MAX_DENSE_ENTRIES,
    )
    .map_err(runtime_err)?;
    report_dict(py, &report)
}

/// Squared 2-Wasserstein distance between weighted atom sets.
#[pyfunction]
fn w2_sq(
    atoms_a: Vec<Vec<f64>>,
    weights_a: Vec<f64>,
    atoms_b: Vec<Vec<f64>>,
    weights_b: Vec<f64>,
) -> PyResult<f64> {
    let (_, m, flat_a) = flat_rows(&atoms_a, "atoms_a")?;
    let (_, mb, flat_b) = flat_rows(&atoms_b, "atoms_b")?;
    if m != mb {
        return Err(PyValueError::new_err("atom dimensions differ"));
    }
    let a = DiscreteDistribution::new(m, flat_a, weights_a).map_err(value_err)?;
    let b = DiscreteDistribution::new(m, flat_b, weights_b).map_err(value_err)?;
    transport::w2_sq(&a, &b).map_err(runtime_err)
}

/// Optimal transport plan between prescribed marginals under a dense cost.
/// Returns (entries, objective) with entries as (row, col, mass) triplets.
#[pyfunction]
fn solve_ot(
    cost: Vec<Vec<f64>>,
    row_weights: Vec<f64>,
    col_weights: Vec<f64>,
) -> PyResult<(Vec<(usize, usize, f64)>, f64)> {
    let (n, r, flat) = flat_rows(&cost, "cost")?;
    let cost = CostMatrix::new(n, r, flat).map_err(value_err)?;
    let coupling = transport::solve_ot(&cost, &row_weights, &col_weights).map_err(runtime_err)?;
    Ok((coupling.entries.clone(), coupling.objective))
}

/// Bures-Wasserstein transport map between PSD matrices.
#[pyfunction]
fn transport_map(from: Vec<Vec<f64>>, to: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let a = spd_from_rows(&from, "from")?;
    let b = spd_from_rows(&to, "to")?;
    let t = bures::transport_map(&a, &b).map_err(runtime_err)?;
    Ok(rows_from_flat(t.as_slice(), a.dim()))
}

/// Squared Bures-Wasserstein distance between PSD matrices.
#[pyfunction]
fn bures_distance_sq(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    let a = spd_from_rows(&a, "a")?;
    let b = spd_from_rows(&b, "b")?;
    Ok(bures::bures_distance_sq(&a, &b))
}

#[pymodule]
fn otdenoise(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_class::<Prior>()?;
    m.add_function(wrap_pyfunction!(fit_npmle, m)?)?;
    m.add_function(wrap_pyfunction!(fit_smooth_npmle, m)?)?;
    m.add_function(wrap_pyfunction!(bayes_denoise, m)?)?;
    m.add_function(wrap_pyfunction!(denoise_vcb, m)?)?;
    m.add_function(wrap_pyfunction!(denoise_mvcb, m)?)?;
    m.add_function(wrap_pyfunction!(denoise_cvcb, m)?)?;
    m.add_function(wrap_pyfunction!(denoise_dcb, m)?)?;
    m.add_function(wrap_pyfunction!(denoise_gcb, m)?)?;
    m.add_function(wrap_pyfunction!(w2_sq, m)?)?;
    m.add_function(wrap_pyfunction!(solve_ot, m)?)?;
    m.add_function(wrap_pyfunction!(transport_map, m)?)?;
    m.add_function(wrap_pyfunction!(bures_distance_sq, m)?)?;
    Ok(())
}
