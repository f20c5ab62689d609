//! Subcommand implementations.

use super::config::{
    CustomLikelihoodConfig, CustomPriorConfig, ModelConfig, PriorConfig, RunConfig, ScenarioConfig,
};
use super::csvio::{self, fmt_float, CsvTable, CsvWriter};
use super::CliError;
use crate::constrain::{self, CvcbOptions, DenoiseReport, GcbGridOptions, Method, VcbOptions};
use crate::gmodel::{
    self, build_grid, em_refine, fit_weights, posterior_table, smooth_npmle, DiscreteDistribution,
    FitDiagnostics, Prior,
};
use crate::linalg;
use crate::models::{self, ConjugateFamily, Dataset, LikelihoodModel};
use crate::rng::derive_seed;
use crate::sim::{self, SimDraw};
use crate::transport;
use rayon::prelude::*;
use serde_json::{json, Map, Value};

fn build_model(cfg: &RunConfig, table: &CsvTable) -> Result<(Dataset, LikelihoodModel), CliError> {
    if table.n == 0 {
        return Err(CliError::Data("input has no data rows".into()));
    }
    let data = Dataset::new(table.n, table.m, table.z.clone());
    let model = match &cfg.model {
        ModelConfig::Gaussian { sigma } => LikelihoodModel::GaussianHomoscedastic {
            noise_cov: sigma.to_spd(table.m)?,
        },
        ModelConfig::GaussianRows => {
            let covs = table.sigmas.clone().ok_or_else(|| {
                CliError::Data(
                    "model gaussian-rows needs sigma11..sigmaMM columns in the CSV".into(),
                )
            })?;
            LikelihoodModel::GaussianHeteroscedastic { noise_covs: covs }
        }
        ModelConfig::Poisson => {
            let exposures = table
                .lambdas
                .clone()
                .unwrap_or_else(|| vec![1.0; table.n * table.m]);
            LikelihoodModel::PoissonExposure {
                m: table.m,
                exposures,
            }
        }
    };
    model.validate(&data)?;
    Ok((data, model))
}

enum FittedPrior {
    Prior(Prior, Option<FitDiagnostics>),
    Conjugate(ConjugateFamily),
}

fn conjugate_family(name: &str, model: &LikelihoodModel) -> Result<ConjugateFamily, CliError> {
    match name {
        "gaussian" => {
            let sigma2 = match model {
                LikelihoodModel::GaussianHomoscedastic { noise_cov } if noise_cov.dim() == 1 => {
                    noise_cov.get(0, 0)
                }
                _ => {
                    return Err(CliError::Config(
                        "conjugate gaussian requires a univariate homoscedastic Gaussian model"
                            .into(),
                    ))
                }
            };
            Ok(ConjugateFamily::GaussianKnownVar { sigma2 })
        }
        "poisson" => Ok(ConjugateFamily::PoissonGamma),
        "exponential" => Ok(ConjugateFamily::ExponentialInvGamma),
        "geometric" => Ok(ConjugateFamily::GeometricConjugate),
        other => Err(CliError::Config(format!(
            "unknown conjugate family `{other}`"
        ))),
    }
}

fn fit_prior(
    cfg: &RunConfig,
    data: &Dataset,
    model: &LikelihoodModel,
) -> Result<FittedPrior, CliError> {
    match &cfg.prior {
        PriorConfig::Npmle { grid, refine } => {
            let atoms = build_grid(data, model, grid)?;
            let fit = fit_weights(&atoms, data, model, &cfg.fit)?;
            let fit = if *refine {
                em_refine(&fit.prior, data, model, &cfg.fit)?
            } else {
                fit
            };
            Ok(FittedPrior::Prior(
                Prior::Discrete(fit.prior),
                Some(fit.diagnostics),
            ))
        }
        PriorConfig::SmoothNpmle { kernel, grid } => {
            let kernel = kernel.to_spd(data.m())?;
            let (prior, diag) = smooth_npmle(data, model, kernel, grid, &cfg.fit)?;
            Ok(FittedPrior::Prior(Prior::Smooth(prior), Some(diag)))
        }
        PriorConfig::Fixed => {
            let path = cfg.prior_file.as_ref().ok_or_else(|| {
                CliError::Config("prior.kind = fixed needs --prior_file".into())
            })?;
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Data(format!("cannot read {path}: {e}")))?;
            let parsed: gmodel::PriorJson = serde_json::from_str(&text)
                .map_err(|e| CliError::Data(format!("bad prior JSON in {path}: {e}")))?;
            Ok(FittedPrior::Prior(Prior::from_json(parsed)?, None))
        }
        PriorConfig::Conjugate { family } => {
            if data.m() != 1 {
                return Err(CliError::Config(
                    "conjugate priors are univariate (m = 1)".into(),
                ));
            }
            Ok(FittedPrior::Conjugate(conjugate_family(family, model)?))
        }
    }
}

fn bayes_values(
    prior: &FittedPrior,
    data: &Dataset,
    model: &LikelihoodModel,
) -> Result<Vec<f64>, CliError> {
    match prior {
        FittedPrior::Prior(p, _) => {
            let table = posterior_table(p, data, model)?;
            Ok(gmodel::bayes_denoise(&table))
        }
        FittedPrior::Conjugate(family) => {
            let std = models::standardize(data, model);
            let std_data = Dataset::new(data.n(), data.m(), std);
            let rule = models::conjugate_bayes(*family, &std_data)?;
            Ok(rule.apply_rows(std_data.values(), data.n(), data.m()))
        }
    }
}

fn discrete_prior<'a>(prior: &'a FittedPrior, method: &str) -> Result<&'a DiscreteDistribution, CliError> {
    match prior {
        FittedPrior::Prior(Prior::Discrete(d), _) => Ok(d),
        FittedPrior::Prior(Prior::Smooth(_), _) => Err(CliError::Config(format!(
            "method {method} needs a discrete prior (npmle or fixed); smooth priors have no \
             discrete column marginal"
        ))),
        FittedPrior::Conjugate(_) => Err(CliError::Config(format!(
            "method {method} needs a fitted discrete prior, not a conjugate closed form"
        ))),
    }
}

fn run_method(
    cfg: &RunConfig,
    method: &str,
    data: &Dataset,
    model: &LikelihoodModel,
    prior: &FittedPrior,
    bayes: &[f64],
) -> Result<DenoiseReport, CliError> {
    let vcb_opts = VcbOptions {
        pd_ridge: cfg.pd_ridge,
    };
    match method {
        "bayes" => {
            let mut report = DenoiseReport {
                method: Method::Bayes,
                m: data.m(),
                values: bayes.to_vec(),
                affine: None,
                objective: None,
                target_mean: None,
                target_cov: None,
                constraint_residuals: Vec::new(),
                projection_residuals: Vec::new(),
                projected_latent: None,
                coupling: None,
                prior_used: None,
                diagnostics: Default::default(),
            };
            if let FittedPrior::Prior(p, _) = prior {
                report.prior_used = Some(p.base().clone());
            }
            Ok(report)
        }
        "vcb" | "mvcb" => {
            if let FittedPrior::Conjugate(family) = prior {
                let std = models::standardize(data, model);
                let std_data = Dataset::new(data.n(), data.m(), std);
                let rule = models::conjugate_vcb(*family, &std_data)?;
                let values = rule.apply_rows(std_data.values(), data.n(), data.m());
                let mut report = DenoiseReport {
                    method: Method::Conjugate,
                    m: data.m(),
                    values,
                    affine: Some(rule),
                    objective: None,
                    target_mean: None,
                    target_cov: None,
                    constraint_residuals: Vec::new(),
                    projection_residuals: Vec::new(),
                    projected_latent: None,
                    coupling: None,
                    prior_used: None,
                    diagnostics: Default::default(),
                };
                report.diagnostics.iterations = 0;
                return Ok(report);
            }
            let use_prior_moments = match cfg.moment_source.as_str() {
                "data" => false,
                "prior" => true,
                "auto" => method == "mvcb",
                other => {
                    return Err(CliError::Config(format!(
                        "moment_source must be auto, data, or prior (got `{other}`)"
                    )))
                }
            };
            if use_prior_moments {
                let FittedPrior::Prior(p, _) = prior else {
                    return Err(CliError::Config(
                        "mvcb needs a fitted prior for its moment targets".into(),
                    ));
                };
                Ok(constrain::marginal_variance_constrained(
                    data, model, bayes, p, &vcb_opts,
                )?)
            } else {
                Ok(constrain::variance_constrained(
                    data, model, bayes, &vcb_opts,
                )?)
            }
        }
        "cvcb" => {
            if !model.is_heterogeneous() {
                return Err(CliError::Config(
                    "cvcb needs per-observation heterogeneity (gaussian-rows or poisson model)"
                        .into(),
                ));
            }
            let p = discrete_prior(prior, method)?;
            Ok(constrain::conditional_variance_constrained(
                data,
                model,
                p,
                &CvcbOptions {
                    mc_samples: cfg.mc_samples,
                    seed: cfg.seed,
                    pd_ridge: cfg.pd_ridge,
                },
            )?)
        }
        "dcb" | "mdcb" => {
            if method == "mdcb" && !model.is_heterogeneous() {
                return Err(CliError::Config(
                    "mdcb needs per-observation heterogeneity; use dcb for the homogeneous model"
                        .into(),
                ));
            }
            let p = discrete_prior(prior, method)?;
            Ok(constrain::distribution_constrained(
                data,
                model,
                bayes,
                p,
                cfg.max_dense_entries,
            )?)
        }
        "gcb" | "mgcb" => {
            if method == "mgcb" && !model.is_heterogeneous() {
                return Err(CliError::Config(
                    "mgcb needs per-observation heterogeneity; use gcb for the homogeneous model"
                        .into(),
                ));
            }
            if cfg.constraints.is_empty() {
                return Err(CliError::Config(
                    "gcb needs a nonempty `constraints` list".into(),
                ));
            }
            let p = discrete_prior(prior, method)?;
            Ok(constrain::general_constrained(
                data,
                model,
                bayes,
                p,
                cfg.constraints.clone(),
                &GcbGridOptions {
                    points_per_axis: cfg.eta_grid.points_per_axis,
                    expand: cfg.eta_grid.expand,
                },
                cfg.max_dense_entries,
            )?)
        }
        other => Err(CliError::Config(format!("unknown method `{other}`"))),
    }
}

fn metrics_json(
    report: &DenoiseReport,
    data: &Dataset,
    prior: Option<&DiscreteDistribution>,
    latents: Option<&[f64]>,
    fit_diag: Option<&FitDiagnostics>,
) -> Value {
    let metrics = constrain::diagnostics(report, data, prior, latents);
    let mut map = Map::new();
    map.insert("method".into(), json!(report.method));
    map.insert("n".into(), json!(data.n()));
    map.insert("m".into(), json!(data.m()));
    if let Some(o) = metrics.objective {
        map.insert("objective".into(), json!(o));
    }
    if matches!(report.method, Method::Dcb | Method::Mdcb) {
        map.insert(
            "col_marginal_residual".into(),
            json!(report.constraint_residuals.first().copied().unwrap_or(0.0)),
        );
    }
    if !metrics.constraint_residuals.is_empty() {
        map.insert(
            "constraint_residuals".into(),
            json!(metrics.constraint_residuals),
        );
    }
    if !metrics.projection_residuals.is_empty() {
        map.insert(
            "projection_residuals".into(),
            json!(metrics.projection_residuals),
        );
    }
    if let Some(v) = metrics.mean_residual {
        map.insert("mean_residual".into(), json!(v));
    }
    if let Some(v) = metrics.cov_residual {
        map.insert("cov_residual".into(), json!(v));
    }
    if let Some(v) = metrics.empirical_risk {
        map.insert("empirical_risk".into(), json!(v));
    }
    if let Some(v) = metrics.w2_to_prior {
        map.insert("w2_to_prior".into(), json!(v));
    }
    if let Some(d) = fit_diag {
        map.insert(
            "fit".into(),
            json!({
                "log_likelihood": d.log_likelihood,
                "kkt_gap": d.kkt_gap,
                "iterations": d.iterations,
            }),
        );
    }
    if !report.diagnostics.warnings.is_empty() {
        map.insert("warnings".into(), json!(report.diagnostics.warnings));
    }
    Value::Object(map)
}

fn write_json(path: &str, value: &Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Data(format!("cannot serialize JSON: {e}")))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::Data(format!("cannot write {path}: {e}")))
}

pub fn cmd_fit(cfg: &RunConfig) -> Result<(), CliError> {
    let input = cfg
        .input
        .as_ref()
        .ok_or_else(|| CliError::Config("fit needs --input data.csv".into()))?;
    let output = cfg
        .output
        .as_ref()
        .ok_or_else(|| CliError::Config("fit needs --output prior.json".into()))?;
    if matches!(cfg.prior, PriorConfig::Fixed | PriorConfig::Conjugate { .. }) {
        return Err(CliError::Config(
            "fit needs prior.kind npmle or smooth-npmle".into(),
        ));
    }
    let table = csvio::read_table(input)?;
    let (data, model) = build_model(cfg, &table)?;
    let FittedPrior::Prior(prior, diag) = fit_prior(cfg, &data, &model)? else {
        unreachable!("conjugate priors are rejected above");
    };
    let prior_json = serde_json::to_value(prior.to_json())
        .map_err(|e| CliError::Data(format!("cannot serialize prior: {e}")))?;
    write_json(output, &prior_json)?;
    if let Some(d) = diag {
        let diag_json = json!({
            "log_likelihood": d.log_likelihood,
            "kkt_gap": d.kkt_gap,
            "iterations": d.iterations,
            "atoms": prior.base().len(),
        });
        match &cfg.metrics {
            Some(path) => write_json(path, &diag_json)?,
            None => println!("{diag_json}"),
        }
    }
    Ok(())
}

pub fn cmd_denoise(cfg: &RunConfig) -> Result<(), CliError> {
    let input = cfg
        .input
        .as_ref()
        .ok_or_else(|| CliError::Config("denoise needs --input data.csv".into()))?;
    let output = cfg
        .output
        .as_ref()
        .ok_or_else(|| CliError::Config("denoise needs --output denoised.csv".into()))?;
    let table = csvio::read_table(input)?;
    let (data, model) = build_model(cfg, &table)?;
    let prior = fit_prior(cfg, &data, &model)?;
    let bayes = bayes_values(&prior, &data, &model)?;
    let report = run_method(cfg, &cfg.method, &data, &model, &prior, &bayes)?;

    let (n, m) = (data.n(), data.m());
    let mut header: Vec<String> = (1..=m).map(|d| format!("z{d}")).collect();
    header.extend((1..=m).map(|d| format!("d{d}")));
    let mut writer = CsvWriter::new(&header);
    for i in 0..n {
        let mut fields: Vec<String> = data.row(i).iter().map(|v| fmt_float(*v)).collect();
        fields.extend(
            report.values[i * m..(i + 1) * m]
                .iter()
                .map(|v| fmt_float(*v)),
        );
        writer.row(&fields);
    }
    writer.write(output)?;

    if let Some(path) = &cfg.coupling_file {
        match &report.coupling {
            Some(coupling) => {
                let value = serde_json::to_value(coupling.to_json())
                    .map_err(|e| CliError::Data(format!("cannot serialize coupling: {e}")))?;
                write_json(path, &value)?;
            }
            None => {
                return Err(CliError::Config(format!(
                    "method {} produces no coupling to dump",
                    cfg.method
                )))
            }
        }
    }
    if let Some(path) = &cfg.metrics {
        let fit_diag = match &prior {
            FittedPrior::Prior(_, d) => d.as_ref(),
            _ => None,
        };
        let discrete = match &prior {
            FittedPrior::Prior(Prior::Discrete(d), _) => Some(d),
            _ => None,
        };
        let value = metrics_json(&report, &data, discrete, table.thetas.as_deref(), fit_diag);
        write_json(path, &value)?;
    }
    Ok(())
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<(), CliError> {
    let denoised_path = cfg
        .denoised
        .as_ref()
        .ok_or_else(|| CliError::Config("evaluate needs --denoised file.csv".into()))?;
    let latents_path = cfg
        .latents
        .as_ref()
        .ok_or_else(|| CliError::Config("evaluate needs --latents file.csv".into()))?;
    let den = csvio::read_table(denoised_path)?;
    let lat = csvio::read_table(latents_path)?;
    let values = den
        .denoised
        .clone()
        .unwrap_or_else(|| den.z.clone());
    let latents = lat.thetas.clone().unwrap_or_else(|| lat.z.clone());
    let n = values.len() / den.m;
    if latents.len() != values.len() {
        return Err(CliError::Data(format!(
            "row/column mismatch: {} denoised values vs {} latents",
            values.len(),
            latents.len()
        )));
    }
    let m = den.m;
    let mut map = Map::new();
    map.insert("n".into(), json!(n));
    map.insert("m".into(), json!(m));
    map.insert(
        "empirical_risk".into(),
        json!(constrain::empirical_risk(&values, &latents, n, m)),
    );
    if let Some(path) = &cfg.prior_file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("cannot read {path}: {e}")))?;
        let parsed: gmodel::PriorJson = serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("bad prior JSON in {path}: {e}")))?;
        let prior = Prior::from_json(parsed)?;
        let (mu, cov) = gmodel::prior_moments(&prior);
        let mean = linalg::sample_mean(&values, n, m);
        let mean_residual = mean
            .iter()
            .zip(&mu)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        let sample = linalg::sample_cov(&values, n, m);
        let diff = linalg::Matrix::from_vec(m, m, sample).sub(&cov.to_matrix());
        map.insert("mean_residual".into(), json!(mean_residual));
        map.insert(
            "cov_residual".into(),
            json!(diff.frob_norm() / (1.0 + cov.frob_norm())),
        );
        if let Ok(empirical) =
            DiscreteDistribution::new(m, values.clone(), vec![1.0 / n as f64; n])
        {
            if let Ok(w2) = transport::w2_sq(&empirical, prior.base()) {
                map.insert("w2_to_prior".into(), json!(w2));
            }
        }
    }
    let value = Value::Object(map);
    match &cfg.output {
        Some(path) => write_json(path, &value)?,
        None => println!("{value}"),
    }
    Ok(())
}

struct RepOutput {
    rows: Vec<Vec<String>>,
    points: Vec<Vec<String>>,
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<(), CliError> {
    let output = cfg
        .output
        .as_ref()
        .ok_or_else(|| CliError::Config("simulate needs --output results.csv".into()))?;
    let methods: Vec<String> = if cfg.methods.is_empty() {
        match &cfg.scenario {
            ScenarioConfig::Figure1 { .. } => vec!["bayes".into(), "vcb".into(), "dcb".into()],
            ScenarioConfig::Figure7 { .. } => vec!["bayes".into(), "mvcb".into(), "cvcb".into()],
            _ => vec!["bayes".into(), "vcb".into()],
        }
    } else {
        cfg.methods.clone()
    };

    let reps: Vec<Result<RepOutput, CliError>> = (0..cfg.replications.max(1))
        .into_par_iter()
        .map(|rep| simulate_one(cfg, rep, &methods))
        .collect();

    let m = match &cfg.scenario {
        ScenarioConfig::Figure1 { .. } => 2,
        ScenarioConfig::Figure7 { .. } | ScenarioConfig::Conjugate { .. } => 1,
        ScenarioConfig::Custom { prior, .. } => match prior {
            CustomPriorConfig::Discrete { atoms, .. } => {
                atoms.first().map(|a| a.len()).unwrap_or(1)
            }
            CustomPriorConfig::Gamma { .. } => 1,
        },
    };

    let header: Vec<String> = [
        "rep",
        "method",
        "risk",
        "mean_residual",
        "cov_residual",
        "objective",
        "w2_to_prior",
        "var_pooled",
        "var_low",
        "var_high",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let mut results = CsvWriter::new(&header);
    let mut points_header: Vec<String> =
        ["rep", "index", "series"].iter().map(|s| s.to_string()).collect();
    points_header.extend((1..=m).map(|d| format!("v{d}")));
    let mut points = CsvWriter::new(&points_header);

    for rep in reps {
        let rep = rep?;
        for row in rep.rows {
            results.row(&row);
        }
        for row in rep.points {
            points.row(&row);
        }
    }
    results.write(output)?;
    if let Some(path) = &cfg.points {
        points.write(path)?;
    }
    Ok(())
}

fn draw_scenario(cfg: &RunConfig, seed: u64) -> Result<SimDraw, CliError> {
    match &cfg.scenario {
        ScenarioConfig::Figure1 { n } => Ok(sim::draw_figure1(*n, seed)),
        ScenarioConfig::Figure7 { n } => Ok(sim::draw_figure7(*n, seed)),
        ScenarioConfig::Conjugate { scenario, n } => sim::draw_conjugate(scenario, *n, seed)
            .ok_or_else(|| {
                CliError::Config(format!("unknown scenario family `{}`", scenario.family))
            }),
        ScenarioConfig::Custom {
            prior,
            likelihood,
            n,
        } => {
            match (prior, likelihood) {
                (
                    CustomPriorConfig::Discrete { atoms, weights },
                    CustomLikelihoodConfig::Gaussian { sigma },
                ) => {
                    let m = atoms.first().map(|a| a.len()).unwrap_or(0);
                    let flat: Vec<f64> = atoms.iter().flatten().copied().collect();
                    let dist = DiscreteDistribution::new(m, flat, weights.clone())?;
                    let cov = sigma.to_spd(m)?;
                    Ok(sim::draw_discrete_gaussian(&dist, &cov, *n, seed))
                }
                (
                    CustomPriorConfig::Gamma { shape, scale },
                    CustomLikelihoodConfig::Poisson { exposure },
                ) => Ok(sim::draw_gamma_poisson(*shape, *scale, *exposure, *n, seed)),
                _ => Err(CliError::Config(
                    "custom scenario supports discrete+gaussian or gamma+poisson".into(),
                )),
            }
        }
    }
}

fn blank() -> String {
    String::new()
}

fn simulate_one(cfg: &RunConfig, rep: usize, methods: &[String]) -> Result<RepOutput, CliError> {
    let rep_seed = derive_seed(cfg.seed, rep as u64);
    let draw = draw_scenario(cfg, rep_seed)?;
    let (data, model) = (&draw.data, &draw.model);
    let (n, m) = (data.n(), data.m());

    // Conjugate scenarios use the conjugate closed forms; everything else
    // fits the configured prior.
    let prior = match &cfg.scenario {
        ScenarioConfig::Conjugate { scenario, .. } => {
            let family = scenario
                .family()
                .ok_or_else(|| CliError::Config("unknown conjugate family".into()))?;
            FittedPrior::Conjugate(family)
        }
        _ => {
            let mut sub = cfg.clone();
            sub.seed = rep_seed;
            fit_prior(&sub, data, model)?
        }
    };
    let bayes = bayes_values(&prior, data, model)?;

    // Noise-variance group labels for the heteroscedastic scalar scenarios.
    let group_labels: Option<Vec<bool>> = match model {
        LikelihoodModel::GaussianHeteroscedastic { noise_covs } if m == 1 => {
            let mut distinct: Vec<f64> = noise_covs.iter().map(|c| c.get(0, 0)).collect();
            distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
            distinct.dedup();
            if distinct.len() == 2 {
                let mid = 0.5 * (distinct[0] + distinct[1]);
                Some(noise_covs.iter().map(|c| c.get(0, 0) < mid).collect())
            } else {
                None
            }
        }
        _ => None,
    };

    let mut rows = Vec::new();
    let mut points = Vec::new();
    for (i, chunk) in draw.latents.chunks(m).enumerate() {
        let mut row = vec![rep.to_string(), i.to_string(), "latent".to_string()];
        row.extend(chunk.iter().map(|v| fmt_float(*v)));
        points.push(row);
    }
    let std = models::standardize(data, model);
    for i in 0..n {
        let mut row = vec![rep.to_string(), i.to_string(), "observed".to_string()];
        row.extend(std[i * m..(i + 1) * m].iter().map(|v| fmt_float(*v)));
        points.push(row);
    }

    for method in methods {
        let mut sub = cfg.clone();
        sub.seed = derive_seed(rep_seed, 0x6d65_7468);
        let report = run_method(&sub, method, data, model, &prior, &bayes)?;
        let risk = constrain::empirical_risk(&report.values, &draw.latents, n, m);
        let metrics = {
            let discrete = match &prior {
                FittedPrior::Prior(Prior::Discrete(d), _) => Some(d),
                _ => None,
            };
            constrain::diagnostics(&report, data, discrete, Some(&draw.latents))
        };
        let var_pooled = if n >= 2 {
            Some(trace_of_cov(&report.values, n, m))
        } else {
            None
        };
        let (var_low, var_high) = match &group_labels {
            Some(labels) => {
                let low: Vec<f64> = (0..n)
                    .filter(|i| labels[*i])
                    .map(|i| report.values[i])
                    .collect();
                let high: Vec<f64> = (0..n)
                    .filter(|i| !labels[*i])
                    .map(|i| report.values[i])
                    .collect();
                (
                    (low.len() >= 2).then(|| linalg::sample_cov(&low, low.len(), 1)[0]),
                    (high.len() >= 2).then(|| linalg::sample_cov(&high, high.len(), 1)[0]),
                )
            }
            None => (None, None),
        };
        rows.push(vec![
            rep.to_string(),
            method.clone(),
            fmt_float(risk),
            metrics.mean_residual.map(fmt_float).unwrap_or_else(blank),
            metrics.cov_residual.map(fmt_float).unwrap_or_else(blank),
            metrics.objective.map(fmt_float).unwrap_or_else(blank),
            metrics.w2_to_prior.map(fmt_float).unwrap_or_else(blank),
            var_pooled.map(fmt_float).unwrap_or_else(blank),
            var_low.map(fmt_float).unwrap_or_else(blank),
            var_high.map(fmt_float).unwrap_or_else(blank),
        ]);
        for i in 0..n {
            let mut row = vec![
                rep.to_string(),
                i.to_string(),
                format!("denoised:{method}"),
            ];
            row.extend(
                report.values[i * m..(i + 1) * m]
                    .iter()
                    .map(|v| fmt_float(*v)),
            );
            points.push(row);
        }
    }
    Ok(RepOutput { rows, points })
}

fn trace_of_cov(values: &[f64], n: usize, m: usize) -> f64 {
    let cov = linalg::sample_cov(values, n, m);
    (0..m).map(|d| cov[d * m + d]).sum()
}
