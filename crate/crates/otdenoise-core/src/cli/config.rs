//! Run configuration: a JSON document overridable key-by-key from the
//! command line.

use super::CliError;
use crate::gmodel::{FitOptions, GridOptions};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Input observations CSV (fit, denoise).
    pub input: Option<String>,
    /// Primary output path (fit: prior JSON; denoise: denoised CSV;
    /// simulate: results CSV; evaluate: metrics JSON).
    pub output: Option<String>,
    /// Metrics JSON path (denoise; optional for fit diagnostics).
    pub metrics: Option<String>,
    /// Fitted prior JSON to load (denoise with `prior.kind = fixed`,
    /// evaluate).
    pub prior_file: Option<String>,
    /// Long-format scatter CSV (simulate).
    pub points: Option<String>,
    /// Denoised CSV to score (evaluate).
    pub denoised: Option<String>,
    /// Latent values CSV (evaluate).
    pub latents: Option<String>,
    /// Optional sparse-triplet JSON dump of the optimal coupling
    /// (denoise with the coupling-based methods).
    pub coupling_file: Option<String>,

    pub model: ModelConfig,
    pub prior: PriorConfig,
    pub method: String,
    /// Constraint functions for the general-constrained method.
    pub constraints: Vec<crate::transport::ConstraintFn>,
    /// Lattice options for the general-constrained eta grid.
    pub eta_grid: EtaGridConfig,
    pub fit: FitOptions,
    pub seed: u64,
    pub mc_samples: usize,
    pub pd_ridge: f64,
    /// Moment source for the variance-constrained family: "auto" binds vcb
    /// to the data route and mvcb to the prior route; "data" / "prior"
    /// force one.
    pub moment_source: String,
    pub max_dense_entries: usize,
    pub scenario: ScenarioConfig,
    pub replications: usize,
    /// Methods to run per replication in `simulate`; empty means a
    /// scenario-specific default.
    pub methods: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            input: None,
            output: None,
            metrics: None,
            prior_file: None,
            points: None,
            denoised: None,
            latents: None,
            coupling_file: None,
            model: ModelConfig::default(),
            prior: PriorConfig::default(),
            method: "bayes".into(),
            constraints: Vec::new(),
            eta_grid: EtaGridConfig::default(),
            fit: FitOptions::default(),
            seed: 0,
            mc_samples: 100,
            pd_ridge: 0.0,
            moment_source: "auto".into(),
            max_dense_entries: crate::transport::MAX_DENSE_ENTRIES,
            scenario: ScenarioConfig::default(),
            replications: 1,
            methods: Vec::new(),
        }
    }
}

/// Scalar or full-matrix covariance specification.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CovSpec {
    Scalar(f64),
    Matrix(Vec<Vec<f64>>),
}

impl CovSpec {
    pub fn to_spd(&self, m: usize) -> Result<crate::bures::SpdMatrix, CliError> {
        match self {
            CovSpec::Scalar(v) => {
                Ok(crate::bures::SpdMatrix::diag(&vec![*v; m]))
            }
            CovSpec::Matrix(rows) => {
                if rows.len() != m || rows.iter().any(|r| r.len() != m) {
                    return Err(CliError::Config(format!(
                        "covariance matrix must be {m}x{m}"
                    )));
                }
                let flat: Vec<f64> = rows.iter().flatten().copied().collect();
                crate::bures::SpdMatrix::new(m, flat)
                    .map_err(|e| CliError::Config(format!("bad covariance: {e}")))
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelConfig {
    /// Homoscedastic Gaussian with a known covariance.
    Gaussian { sigma: CovSpec },
    /// Heteroscedastic Gaussian; per-row covariances come from the CSV
    /// columns sigma11..sigmaMM.
    GaussianRows,
    /// Poisson with per-row exposures from the CSV columns lambda1..lambdam
    /// (exposure 1 where absent).
    Poisson,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::Gaussian {
            sigma: CovSpec::Scalar(1.0),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PriorConfig {
    Npmle {
        #[serde(default)]
        grid: GridOptions,
        #[serde(default)]
        refine: bool,
    },
    SmoothNpmle {
        kernel: CovSpec,
        #[serde(default)]
        grid: GridOptions,
    },
    /// Load the prior from `prior_file`.
    Fixed,
    /// Closed-form conjugate family (univariate).
    Conjugate { family: String },
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig::Npmle {
            grid: GridOptions::default(),
            refine: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EtaGridConfig {
    pub points_per_axis: Option<usize>,
    pub expand: f64,
}

impl Default for EtaGridConfig {
    fn default() -> Self {
        EtaGridConfig {
            points_per_axis: None,
            expand: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScenarioConfig {
    Figure1 {
        #[serde(default = "default_figure1_n")]
        n: usize,
    },
    Figure7 {
        #[serde(default = "default_figure7_n")]
        n: usize,
    },
    Conjugate {
        #[serde(flatten)]
        scenario: crate::sim::ConjugateScenario,
        #[serde(default = "default_figure1_n")]
        n: usize,
    },
    Custom {
        prior: CustomPriorConfig,
        likelihood: CustomLikelihoodConfig,
        #[serde(default = "default_figure1_n")]
        n: usize,
    },
}

fn default_figure1_n() -> usize {
    crate::sim::FIGURE1_DEFAULT_N
}

fn default_figure7_n() -> usize {
    crate::sim::FIGURE7_DEFAULT_N
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig::Figure1 {
            n: default_figure1_n(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CustomPriorConfig {
    Discrete {
        atoms: Vec<Vec<f64>>,
        weights: Vec<f64>,
    },
    Gamma {
        shape: f64,
        scale: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CustomLikelihoodConfig {
    Gaussian { sigma: CovSpec },
    Poisson { exposure: f64 },
}

/// Parses `--key value` pairs (with an optional `--config file.json` base)
/// into a `RunConfig`. The file and the flags are deep-merged onto the
/// serialized defaults, so partial overrides like `--model.sigma 2.0` keep
/// the rest of the default model block.
pub fn parse(args: &[String]) -> Result<RunConfig, CliError> {
    let mut merged =
        serde_json::to_value(RunConfig::default()).expect("defaults serialize");
    let mut overrides: Vec<(String, Value)> = Vec::new();
    let mut iter = args.iter();
    while let Some(arg) = iter.next() {
        let Some(key) = arg.strip_prefix("--") else {
            return Err(CliError::Config(format!(
                "expected --key, found `{arg}`"
            )));
        };
        let Some(raw) = iter.next() else {
            return Err(CliError::Config(format!("flag --{key} is missing a value")));
        };
        let value = serde_json::from_str::<Value>(raw)
            .ok()
            .filter(|v| !v.is_string() || raw.starts_with('"'))
            .unwrap_or_else(|| Value::String(raw.clone()));
        if key == "config" {
            let text = std::fs::read_to_string(raw)
                .map_err(|e| CliError::Config(format!("cannot read config {raw}: {e}")))?;
            let file: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("bad config JSON in {raw}: {e}")))?;
            deep_merge(&mut merged, file);
        } else {
            overrides.push((key.to_string(), value));
        }
    }
    for (key, value) in overrides {
        set_path(&mut merged, &key, value)?;
    }
    serde_json::from_value(merged)
        .map_err(|e| CliError::Config(format!("bad configuration: {e}")))
}

fn deep_merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(root: &mut Value, dotted: &str, value: Value) -> Result<(), CliError> {
    let mut node = root;
    let parts: Vec<&str> = dotted.split('.').collect();
    for (idx, part) in parts.iter().enumerate() {
        // Config keys are snake_case; accept kebab-case flags too.
        let key = part.replace('-', "_");
        if !node.is_object() {
            *node = Value::Object(Default::default());
        }
        let map = node.as_object_mut().unwrap();
        if idx + 1 == parts.len() {
            map.insert(key, value);
            return Ok(());
        }
        node = map
            .entry(key)
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Err(CliError::Config(format!("empty flag name `{dotted}`")))
}
