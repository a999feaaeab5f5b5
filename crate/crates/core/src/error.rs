//! Crate-wide error wrapping every module's error, with a stable kind name
//! for structured reporting.

use thiserror::Error;

use crate::dataset::DatasetError;
use crate::erp::ErpError;
use crate::grad::GradError;
use crate::io::IngestError;
use crate::model::ModelError;
use crate::preprocess::PreprocessError;
use crate::qc::QcError;
use crate::synth::SynthError;
use crate::train::TrainError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error("trial `{trial_id}`: {source}")]
    Trial {
        trial_id: String,
        source: PreprocessError,
    },
    #[error(transparent)]
    Qc(#[from] QcError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Erp(#[from] ErpError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Ingest(_) => "ingest",
            Error::Preprocess(_) | Error::Trial { .. } => "preprocess",
            Error::Qc(_) => "qc",
            Error::Dataset(_) => "dataset",
            Error::Grad(_) => "grad",
            Error::Model(_) => "model",
            Error::Train(_) => "train",
            Error::Erp(_) => "erp",
            Error::Synth(_) => "synth",
            Error::Config(_) => "config",
        }
    }
}
