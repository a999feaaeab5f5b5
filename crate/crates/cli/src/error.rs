use std::fmt;
use std::path::Path;

use neurokinect::Error;

/// Error surfaced to the user as `{"error": {"kind", "message"}}` with
/// exit code 1 (internal) or 2 (user or configuration).
#[derive(Debug)]
pub struct CliError {
    pub kind: String,
    pub message: String,
    pub code: i32,
}

impl CliError {
    pub fn user(kind: &str, message: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            message: message.into(),
            code: 2,
        }
    }

    pub fn internal(kind: &str, message: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            message: message.into(),
            code: 1,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::internal("Io", format!("{}: {e}", path.display()))
    }

    pub fn csv(path: &Path, e: csv::Error) -> Self {
        Self::internal("Io", format!("{}: {e}", path.display()))
    }

    pub fn to_json(&self, partial: Option<&Path>) -> String {
        let mut err = serde_json::json!({ "kind": self.kind, "message": self.message });
        if let Some(p) = partial {
            err["partial_outputs"] = serde_json::Value::String(p.display().to_string());
        }
        serde_json::json!({ "error": err }).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        // Problems with the supplied data or configuration are user errors.
        let user = matches!(e, Error::Config(_) | Error::Ingest(_));
        let kind = match e.kind() {
            "ingest" => "Ingest",
            "preprocess" => "Preprocess",
            "qc" => "Qc",
            "dataset" => "Dataset",
            "grad" => "Grad",
            "model" => "Model",
            "train" => "Train",
            "erp" => "Erp",
            "synth" => "Synth",
            _ => "ConfigInvalid",
        };
        Self {
            kind: kind.into(),
            message: e.to_string(),
            code: if user { 2 } else { 1 },
        }
    }
}

macro_rules! from_core {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                Error::from(e).into()
            }
        }
    )*};
}

from_core!(
    neurokinect::io::IngestError,
    neurokinect::dataset::DatasetError,
    neurokinect::qc::QcError,
    neurokinect::model::ModelError,
    neurokinect::train::TrainError,
    neurokinect::erp::ErpError,
    neurokinect::synth::SynthError
);
