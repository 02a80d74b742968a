//! Natural transformations: region-scoped, multi-pass rewrites of a kernel
//! context carried out by a language model, with validation and retries.

pub mod catalog;
pub mod client;
pub mod mock;
pub mod prompt;

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::excerpt;
use crate::context::{placeholders, ContextError, KernelContext, RegionKind};
use crate::spec::SpecError;
use crate::validation::{ReferenceStore, ValidationError, ValidationReport, Validator};

pub use catalog::{load_transformation, Catalog, NaturalTransformation, RegionCall, Snippet, TransformPass};
pub use client::{CallMeta, ClientError, LiveClient, LiveConfig, LlmClient};
pub use mock::{MockClient, MockRule};
pub use prompt::{assemble_prompt, extract_region_code, LlmRequest, LlmResponse};

#[derive(Debug, Error)]
pub enum TransformError {
    #[error("transformation manifest: {0}")]
    Manifest(String),
    #[error("snippet `{0}` is not in the snippet library")]
    MissingSnippet(String),
    #[error("bad prompt placeholder: {0}")]
    BadPlaceholder(String),
    #[error("response contains no fenced code block")]
    ExtractionFailure,
    #[error("unknown transformation `{0}`")]
    UnknownTransformation(String),
    #[error("transformation `{name}` does not support the {backend} backend")]
    UnsupportedBackend { name: String, backend: String },
    #[error("new tuning parameter `{0}` is already declared by the context")]
    TuningConflict(String),
    #[error("model client: {0}")]
    Client(#[from] ClientError),
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApplyStatus {
    Success,
    CompileFailure,
    ReferenceFailure,
    ExtractionFailure,
    ExhaustedRetries,
}

impl ApplyStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ApplyStatus::Success => "success",
            ApplyStatus::CompileFailure => "compile_failure",
            ApplyStatus::ReferenceFailure => "reference_failure",
            ApplyStatus::ExtractionFailure => "extraction_failure",
            ApplyStatus::ExhaustedRetries => "exhausted_retries",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttemptStatus {
    /// Validated and accepted.
    Ok,
    /// Applied without validation (an `intermediate_ok` pass).
    Unvalidated,
    CompileFailure,
    ReferenceFailure,
    ExtractionFailure,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub pass: usize,
    pub attempt: u32,
    pub status: AttemptStatus,
    pub stderr_excerpt: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ApplyOutcome {
    pub status: ApplyStatus,
    /// The transformed context; present exactly when `status` is success.
    #[serde(skip)]
    pub result_ctx: Option<KernelContext>,
    pub attempts: Vec<AttemptRecord>,
    /// Failure class of the last attempt when retries ran out.
    pub last_failure: Option<ApplyStatus>,
    /// Report of the last validation run, if any.
    pub validation: Option<ValidationReport>,
    pub llm_calls: usize,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ApplyOptions {
    /// Execution points sampled by each validation.
    pub validator_budget: usize,
    /// Extra attempts per pass after a failure.
    pub max_retries: u32,
    pub validation_seed: u64,
    /// Trial number passed to the client (1 outside reliability runs).
    pub trial: u32,
}

impl Default for ApplyOptions {
    fn default() -> Self {
        ApplyOptions { validator_budget: 16, max_retries: 3, validation_seed: 0, trial: 1 }
    }
}

static REGION_CHECKS: AtomicUsize = AtomicUsize::new(0);
static REGION_VIOLATIONS: AtomicUsize = AtomicUsize::new(0);

/// Region calls checked for isolation in this process and how many of them
/// changed a region other than their target.
pub fn region_isolation_stats() -> (usize, usize) {
    (REGION_CHECKS.load(Ordering::SeqCst), REGION_VIOLATIONS.load(Ordering::SeqCst))
}

fn region_hash(text: &str) -> String {
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}

enum CallFailure {
    Extraction(String),
    Compile(String),
}

/// Run one region call and splice its answer into `ctx`.
fn run_call(
    t: &NaturalTransformation,
    pass: &TransformPass,
    call: usize,
    ctx: &KernelContext,
    client: &dyn LlmClient,
    feedback: &str,
    attempt: u32,
    trial: u32,
) -> Result<Result<KernelContext, CallFailure>, TransformError> {
    let region = pass.calls[call].region;
    let request = assemble_prompt(t, pass, call, ctx, feedback, client.model_tag())?;
    let meta = CallMeta {
        transformation: t.name.clone(),
        pass: pass.index,
        call,
        attempt,
        trial,
        input_hash: region_hash(ctx.region(region)),
    };
    let response = client.complete(&request, &meta)?;
    let code = match extract_region_code(&response) {
        Ok(c) => c,
        Err(_) => return Ok(Err(CallFailure::Extraction(format!("no fenced code block in the answer for the {region} region")))),
    };

    // New tuning declarations are registered when their placeholders first appear.
    let names = match placeholders(&code) {
        Ok(n) => n,
        Err(e) => return Ok(Err(CallFailure::Compile(e.to_string()))),
    };
    let mut spec = ctx.spec().clone();
    for name in names {
        if spec.is_declared(&name) {
            continue;
        }
        match t.new_tuning_decl(&name) {
            Some(d) => spec.add_tuning(d.clone())?,
            None => return Ok(Err(CallFailure::Compile(format!("placeholder @TUNE({name}) is not a declared tuning parameter")))),
        }
    }
    let base = if &spec == ctx.spec() { ctx.clone() } else { ctx.with_spec(spec) };
    let next = match base.replace_region(region, &code) {
        Ok(c) => c,
        Err(e) => return Ok(Err(CallFailure::Compile(e.to_string()))),
    };

    REGION_CHECKS.fetch_add(1, Ordering::SeqCst);
    let isolated = RegionKind::ALL.iter().filter(|k| **k != region).all(|k| next.region(*k) == ctx.region(*k));
    if !isolated {
        REGION_VIOLATIONS.fetch_add(1, Ordering::SeqCst);
        tracing::error!(transformation = %t.name, pass = pass.index, "region call changed a non-target region");
    }
    Ok(Ok(next))
}

/// Apply every pass of `t` to `ctx`, validating after each pass that is not
/// `intermediate_ok` and retrying a failed pass with feedback.
pub fn apply_transformation(
    ctx: &KernelContext,
    t: &NaturalTransformation,
    client: &dyn LlmClient,
    validator: &Validator<'_>,
    refs: &ReferenceStore,
    options: &ApplyOptions,
) -> Result<ApplyOutcome, TransformError> {
    ctx.validate()?;
    if !t.supports(ctx.backend()) {
        return Err(TransformError::UnsupportedBackend { name: t.name.clone(), backend: ctx.backend().to_owned() });
    }
    if let Some(d) = t.new_tuning.iter().find(|d| ctx.spec().is_declared(&d.name)) {
        return Err(TransformError::TuningConflict(d.name.clone()));
    }

    let mut outcome = ApplyOutcome {
        status: ApplyStatus::Success,
        result_ctx: None,
        attempts: Vec::new(),
        last_failure: None,
        validation: None,
        llm_calls: 0,
    };
    let mut current = ctx.clone();
    let last_pass = t.passes.len() - 1;

    for pass in &t.passes {
        let mut feedback = String::new();
        let mut accepted = None;
        let mut last_failure = ApplyStatus::CompileFailure;
        for attempt in 0..=options.max_retries {
            let mut work = current.clone();
            let mut failure = None;
            for call in 0..pass.calls.len() {
                outcome.llm_calls += 1;
                match run_call(t, pass, call, &work, client, &feedback, attempt, options.trial)? {
                    Ok(next) => work = next,
                    Err(f) => {
                        failure = Some(f);
                        break;
                    }
                }
            }
            if failure.is_none() && pass.index == last_pass {
                // Every new tuning parameter must be in use by the end.
                if let Err(e) = work.validate() {
                    failure = Some(CallFailure::Compile(e.to_string()));
                }
            }
            let (status, message) = match failure {
                Some(CallFailure::Extraction(m)) => (AttemptStatus::ExtractionFailure, m),
                Some(CallFailure::Compile(m)) => (AttemptStatus::CompileFailure, m),
                None if pass.intermediate_ok => (AttemptStatus::Unvalidated, String::new()),
                None => {
                    let report = validator.validate(&work, refs, options.validator_budget, options.validation_seed)?;
                    let result = if report.passed() {
                        (AttemptStatus::Ok, String::new())
                    } else if report.has_compile_error() {
                        (AttemptStatus::CompileFailure, report.feedback())
                    } else {
                        (AttemptStatus::ReferenceFailure, report.feedback())
                    };
                    outcome.validation = Some(report);
                    result
                }
            };
            outcome.attempts.push(AttemptRecord { pass: pass.index, attempt, status, stderr_excerpt: excerpt(&message, 4000) });
            match status {
                AttemptStatus::Ok | AttemptStatus::Unvalidated => {
                    accepted = Some(work);
                    break;
                }
                AttemptStatus::CompileFailure => last_failure = ApplyStatus::CompileFailure,
                AttemptStatus::ReferenceFailure => last_failure = ApplyStatus::ReferenceFailure,
                AttemptStatus::ExtractionFailure => last_failure = ApplyStatus::ExtractionFailure,
            }
            feedback = format!("The previous attempt failed ({}):\n{message}", last_failure.as_str());
        }
        match accepted {
            Some(next) => current = next,
            None => {
                outcome.status = if options.max_retries == 0 { last_failure } else { ApplyStatus::ExhaustedRetries };
                outcome.last_failure = Some(last_failure);
                return Ok(outcome);
            }
        }
    }
    outcome.result_ctx = Some(current.with_label(&t.name));
    Ok(outcome)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: u32,
    pub status: ApplyStatus,
    pub attempts: Vec<AttemptRecord>,
    pub result_digest: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReliabilityReport {
    pub transformation: String,
    pub model_tag: String,
    pub trials: u32,
    pub success_rate: f64,
    pub compile_failure_rate: f64,
    pub reference_failure_rate: f64,
    /// Reported separately; not part of the three rates above.
    pub extraction_failure_rate: f64,
    pub records: Vec<TrialRecord>,
}

/// Apply `t` once per trial without retries and classify each outcome.
/// Trials are numbered from 1.
pub fn measure_reliability(
    ctx: &KernelContext,
    t: &NaturalTransformation,
    client: &dyn LlmClient,
    validator: &Validator<'_>,
    refs: &ReferenceStore,
    trials: u32,
    validator_budget: usize,
) -> Result<ReliabilityReport, TransformError> {
    let trials = trials.max(1);
    let mut records = Vec::new();
    for trial in 1..=trials {
        let opts = ApplyOptions { validator_budget, max_retries: 0, validation_seed: u64::from(trial), trial };
        let out = apply_transformation(ctx, t, client, validator, refs, &opts)?;
        records.push(TrialRecord {
            trial,
            status: out.status,
            attempts: out.attempts,
            result_digest: out.result_ctx.map(|c| c.digest().to_string()),
        });
    }
    let rate = |s: ApplyStatus| records.iter().filter(|r| r.status == s).count() as f64 / f64::from(trials);
    Ok(ReliabilityReport {
        transformation: t.name.clone(),
        model_tag: client.model_tag().to_owned(),
        trials,
        success_rate: rate(ApplyStatus::Success),
        compile_failure_rate: rate(ApplyStatus::CompileFailure),
        reference_failure_rate: rate(ApplyStatus::ReferenceFailure),
        extraction_failure_rate: rate(ApplyStatus::ExtractionFailure),
        records,
    })
}
