//! Command-line entry point: `fit`, `denoise`, `simulate`, `evaluate`.
//!
//! Configuration is a single JSON file; every key can be overridden on the
//! command line as `--path.to.key value` (values parse as JSON when
//! possible, otherwise as strings). Exit codes: 0 success, 2 configuration
//! error, 3 data error, 4 numerical failure (a JSON object naming the
//! failing module is printed to stderr).

mod commands;
mod config;
mod csvio;

pub use config::RunConfig;

use crate::constrain::ConstrainError;
use crate::gmodel::GmodelError;
use crate::models::ModelError;
use crate::transport::TransportError;
use serde_json::json;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Numeric {
        module: &'static str,
        code: String,
        message: String,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric { .. } => 4,
        }
    }

    pub fn render(&self) -> String {
        match self {
            CliError::Config(msg) => format!("configuration error: {msg}"),
            CliError::Data(msg) => format!("data error: {msg}"),
            CliError::Numeric {
                module,
                code,
                message,
            } => json!({ "module": module, "code": code, "message": message }).to_string(),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let code = match &e {
            ModelError::DomainError(_) => "domain",
            ModelError::SingularCovariance { .. } => "singular_covariance",
            ModelError::EmptyDataset => "empty_dataset",
            ModelError::DimensionError { .. } => "dimension",
            ModelError::DegenerateSample => "degenerate_sample",
            ModelError::MismatchedRows { .. } => "mismatched_rows",
        };
        CliError::Numeric {
            module: "models",
            code: code.into(),
            message: e.to_string(),
        }
    }
}

impl From<GmodelError> for CliError {
    fn from(e: GmodelError) -> Self {
        let code = match &e {
            GmodelError::Model(inner) => return CliError::from_model_nested(inner, e.to_string()),
            GmodelError::GridTooLarge { .. } => "grid_too_large",
            GmodelError::AllAtomsZeroLikelihood { .. } => "all_atoms_zero_likelihood",
            GmodelError::NonConvergence { .. } => "non_convergence",
            GmodelError::InvalidDistribution(_) => "invalid_distribution",
        };
        CliError::Numeric {
            module: "gmodel",
            code: code.into(),
            message: e.to_string(),
        }
    }
}

impl CliError {
    fn from_model_nested(inner: &ModelError, message: String) -> Self {
        let base: CliError = match inner {
            ModelError::DomainError(s) => ModelError::DomainError(s.clone()).into(),
            ModelError::SingularCovariance { row } => {
                ModelError::SingularCovariance { row: *row }.into()
            }
            ModelError::EmptyDataset => ModelError::EmptyDataset.into(),
            ModelError::DimensionError { expected, got } => ModelError::DimensionError {
                expected: *expected,
                got: *got,
            }
            .into(),
            ModelError::DegenerateSample => ModelError::DegenerateSample.into(),
            ModelError::MismatchedRows { expected, got } => ModelError::MismatchedRows {
                expected: *expected,
                got: *got,
            }
            .into(),
        };
        match base {
            CliError::Numeric { module, code, .. } => CliError::Numeric {
                module,
                code,
                message,
            },
            other => other,
        }
    }
}

impl From<TransportError> for CliError {
    fn from(e: TransportError) -> Self {
        let code = match &e {
            TransportError::InfeasibleMarginals { .. } => "infeasible_marginals",
            TransportError::CycleLimit { .. } => "cycle_limit",
            TransportError::Infeasible { .. } => "infeasible",
            TransportError::Unbounded => "unbounded",
            TransportError::EmptyRow(_) => "empty_row",
            TransportError::TooLarge { .. } => "too_large",
            TransportError::BadInput(_) => "bad_input",
        };
        CliError::Numeric {
            module: "transport",
            code: code.into(),
            message: e.to_string(),
        }
    }
}

impl From<ConstrainError> for CliError {
    fn from(e: ConstrainError) -> Self {
        match e {
            ConstrainError::Model(inner) => inner.into(),
            ConstrainError::Gmodel(inner) => inner.into(),
            ConstrainError::Transport(inner) => inner.into(),
            ConstrainError::Bures(inner) => CliError::Numeric {
                module: "bures",
                code: "bures".into(),
                message: inner.to_string(),
            },
            ConstrainError::BayesCovarianceSingular => CliError::Numeric {
                module: "constrain",
                code: "bayes_covariance_singular".into(),
                message: e.to_string(),
            },
            ConstrainError::BadInput(msg) => CliError::Data(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

/// Runs the CLI with the given arguments (excluding the program name) and
/// returns the process exit code.
pub fn run(args: &[String]) -> i32 {
    match run_inner(args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.render());
            e.exit_code()
        }
    }
}

fn run_inner(args: &[String]) -> Result<(), CliError> {
    let Some(subcommand) = args.first() else {
        return Err(CliError::Config(usage()));
    };
    let config = config::parse(&args[1..])?;
    match subcommand.as_str() {
        "fit" => commands::cmd_fit(&config),
        "denoise" => commands::cmd_denoise(&config),
        "simulate" => commands::cmd_simulate(&config),
        "evaluate" => commands::cmd_evaluate(&config),
        other => Err(CliError::Config(format!(
            "unknown subcommand `{other}`\n{}",
            usage()
        ))),
    }
}

fn usage() -> String {
    "usage: otdenoise <fit|denoise|simulate|evaluate> [--config file.json] [--key value ...]\n\
     run with a subcommand; every configuration key can be set as --key value"
        .to_string()
}
