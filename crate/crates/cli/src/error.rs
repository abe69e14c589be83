use std::path::PathBuf;

use concept_atlas::cav::CavError;
use concept_atlas::factorizer::FactorizeError;
use concept_atlas::mask::MaskError;
use concept_atlas::report::ReportError;
use concept_atlas::similarity::SimilarityError;
use concept_atlas::synth::SynthError;
use concept_atlas::tensor_store::StoreError;
use thiserror::Error;

/// Errors are grouped into categories with distinct exit codes.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),
    /// Bad input data or a failed computation, tagged with the module that raised it.
    #[error("[{module}] {message}")]
    Module { module: &'static str, message: String },
    #[error("writing {}: {source}", path.display())]
    Output { path: PathBuf, source: std::io::Error },
    #[error("{fraction:.3} of matrix cells are degenerate, above the allowed {limit:.3}")]
    Degenerate { fraction: f64, limit: f64 },
    #[error("selfcheck failed: {0}")]
    SelfcheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingInput(_) => 3,
            CliError::Module { .. } => 4,
            CliError::Output { .. } => 5,
            CliError::Degenerate { .. } => 6,
            CliError::SelfcheckFailed(_) => 7,
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::MissingInput(_) => "missing-input",
            CliError::Module { .. } => "module",
            CliError::Output { .. } => "output",
            CliError::Degenerate { .. } => "degenerate",
            CliError::SelfcheckFailed(_) => "selfcheck",
        }
    }
}

macro_rules! module_error {
    ($ty:ty, $name:literal) => {
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Module {
                    module: $name,
                    message: e.to_string(),
                }
            }
        }
    };
}

module_error!(StoreError, "tensor-store");
module_error!(FactorizeError, "factorizer");
module_error!(CavError, "cav-trainer");
module_error!(MaskError, "mask-pipeline");
module_error!(SimilarityError, "similarity-engine");
module_error!(SynthError, "synth-forge");
module_error!(ReportError, "cli-report");
