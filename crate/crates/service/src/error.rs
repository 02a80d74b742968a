//! Service errors with stable machine-readable codes.

use peak_core::backend::BackendError;
use peak_core::context::ContextError;
use peak_core::perf::PerfError;
use peak_core::spec::SpecError;
use peak_core::store::StoreError;
use peak_core::transform::{ApplyStatus, TransformError};
use peak_core::validation::ValidationError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("unknown job {0}")]
    UnknownJob(u64),
    #[error("transformation `{name}` ended with {}", status.as_str())]
    TransformFailed { name: String, status: ApplyStatus },
    #[error("validation failed: {0}")]
    ValidationFailed(String),
    #[error("the worker has stopped")]
    WorkerGone,
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Perf(#[from] PerfError),
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ServiceError {
    /// Stable upper-case code printed after `PEAK_ERROR` and returned by the API.
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::Config(_) => "CONFIG",
            ServiceError::InvalidArgument(_) => "INVALID_ARGUMENT",
            ServiceError::UnknownJob(_) => "UNKNOWN_JOB",
            ServiceError::TransformFailed { .. } => "TRANSFORM_FAILED",
            ServiceError::ValidationFailed(_) => "VALIDATION_FAILED",
            ServiceError::WorkerGone => "WORKER_GONE",
            ServiceError::Store(e) => match e {
                StoreError::NotAStore(_) => "NOT_A_STORE",
                StoreError::AlreadyInitialized(_) => "ALREADY_INITIALIZED",
                StoreError::Locked => "LOCKED",
                StoreError::UnknownParent(_) => "UNKNOWN_PARENT",
                StoreError::DigestCollisionConflict { .. } => "DIGEST_COLLISION",
                StoreError::UnknownCheckpoint(_) => "UNKNOWN_CHECKPOINT",
                StoreError::AmbiguousPrefix { .. } => "AMBIGUOUS_PREFIX",
                StoreError::UnknownRef(_) => "UNKNOWN_REF",
                StoreError::BadRefName(_) => "INVALID_ARGUMENT",
                StoreError::MissingPerfData(_) => "MISSING_PERF_DATA",
                StoreError::Corrupt { .. } => "CORRUPT_STORE",
                StoreError::ReportMismatch { .. } => "REPORT_MISMATCH",
                _ => "STORE",
            },
            ServiceError::Transform(e) => match e {
                TransformError::UnknownTransformation(_) => "UNKNOWN_TRANSFORMATION",
                TransformError::UnsupportedBackend { .. } => "UNSUPPORTED_BACKEND",
                TransformError::TuningConflict(_) => "TUNING_CONFLICT",
                TransformError::Client(_) => "LLM_CLIENT",
                TransformError::Manifest(_) | TransformError::MissingSnippet(_) | TransformError::BadPlaceholder(_) => {
                    "CATALOG"
                }
                _ => "TRANSFORM",
            },
            ServiceError::Perf(e) => match e {
                PerfError::NoValidConfiguration(_) => "NO_VALID_CONFIGURATION",
                PerfError::UnknownPlugin(_) => "UNKNOWN_TUNER",
                PerfError::InvalidQuery(_) => "INVALID_ARGUMENT",
                _ => "PERF",
            },
            ServiceError::Validation(_) => "VALIDATION",
            ServiceError::Backend(e) => match e {
                BackendError::UnknownBackend(_) => "UNKNOWN_BACKEND",
                BackendError::ToolchainMissing(_) => "TOOLCHAIN_MISSING",
                _ => "BACKEND",
            },
            ServiceError::Context(_) => "CONTEXT",
            ServiceError::Spec(_) => "SPEC",
            ServiceError::Json(_) => "JSON",
            ServiceError::Io(_) => "IO",
        }
    }

    /// HTTP status for the API.
    pub fn http_status(&self) -> u16 {
        match self.code() {
            "UNKNOWN_CHECKPOINT" | "UNKNOWN_REF" | "UNKNOWN_PARENT" | "UNKNOWN_JOB" | "UNKNOWN_TRANSFORMATION"
            | "UNKNOWN_TUNER" => 404,
            "LOCKED" | "DIGEST_COLLISION" => 409,
            "INVALID_ARGUMENT" | "AMBIGUOUS_PREFIX" | "UNSUPPORTED_BACKEND" | "TUNING_CONFLICT" | "JSON"
            | "SPEC" | "MISSING_PERF_DATA" => 422,
            _ => 500,
        }
    }
}
