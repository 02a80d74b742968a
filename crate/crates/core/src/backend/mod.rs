//! Backend plugins: driver generation, compilation, execution and batching.
//!
//! Every backend is described by a JSON manifest plus a program template. The
//! template receives the three kernel regions and a generated table section
//! (`{{tables}}`) that lists arrays, init rules, timing counts and the host
//! launch call as X-macros; the template's own `main` turns those tables into
//! allocation, initialization, timed launches and the stdout wire protocol.

mod batch;
mod driver;
mod exec;

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{ContextError, KernelContext};
use crate::spec::{Dtype, ExecutionParams};
use crate::template::TemplateError;

pub use batch::{execute_batch, execute_batch_with_artifacts, lease_high_water, reset_lease_stats, BatchJob, DeviceLease};
pub use driver::generate_tables;
pub use exec::{compile_source, parse_protocol, run_artifact};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub id: String,
    pub display_name: String,
    pub warp_size: u32,
    pub max_threads_per_block: u32,
    #[serde(default = "default_shared")]
    pub max_shared_bytes: u64,
    pub compile_command_template: String,
    /// Seconds.
    pub run_timeout: f64,
    pub device_slots: usize,
    #[serde(default = "default_ext")]
    pub source_extension: String,
    /// Host-language element type per dtype; a missing entry means unsupported.
    pub types: HashMap<Dtype, String>,
}

fn default_shared() -> u64 {
    49152
}

fn default_ext() -> String {
    "c".into()
}

impl BackendDescriptor {
    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |m: &str| Err(BackendError::Manifest(format!("{}: {m}", self.id)));
        if self.id.is_empty() {
            return bad("empty id");
        }
        if self.warp_size == 0 || self.max_threads_per_block < self.warp_size {
            return bad("max_threads_per_block must be at least warp_size");
        }
        if self.device_slots == 0 {
            return bad("device_slots must be at least 1");
        }
        if !(self.run_timeout > 0.0) {
            return bad("run_timeout must be positive");
        }
        if !self.compile_command_template.contains("{{source}}") || !self.compile_command_template.contains("{{output}}") {
            return bad("compile command needs {{source}} and {{output}}");
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.run_timeout)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimingPolicy {
    pub warmup_runs: u32,
    pub measured_runs: u32,
}

impl Default for TimingPolicy {
    fn default() -> Self {
        TimingPolicy { warmup_runs: 2, measured_runs: 10 }
    }
}

impl TimingPolicy {
    pub fn new(warmup_runs: u32, measured_runs: u32) -> Self {
        TimingPolicy { warmup_runs, measured_runs: measured_runs.max(1) }
    }

    /// Minimal policy for runs whose only purpose is output capture.
    pub fn capture_only() -> Self {
        TimingPolicy { warmup_runs: 0, measured_runs: 1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    InvalidConfig,
    CompileError,
    RuntimeError,
    Timeout,
    /// Outputs captured for a reference store; the timing is not meaningful.
    ReferenceCapture,
}

impl RunStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Ok => "ok",
            RunStatus::InvalidConfig => "invalid_config",
            RunStatus::CompileError => "compile_error",
            RunStatus::RuntimeError => "runtime_error",
            RunStatus::Timeout => "timeout",
            RunStatus::ReferenceCapture => "reference_capture",
        }
    }
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub status: RunStatus,
    pub mean_time_ms: Option<f64>,
    /// Per-run times, when the driver reported them.
    #[serde(default)]
    pub run_times_ms: Vec<f64>,
    #[serde(skip)]
    pub outputs: Option<IndexMap<String, Vec<u8>>>,
    pub stderr_excerpt: String,
}

impl RunResult {
    pub fn failed(status: RunStatus, message: impl Into<String>) -> Self {
        RunResult { status, mean_time_ms: None, run_times_ms: Vec::new(), outputs: None, stderr_excerpt: message.into() }
    }

    pub fn is_ok(&self) -> bool {
        self.status == RunStatus::Ok
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("dtype {0} is not supported by backend `{1}`")]
    UnsupportedDtype(Dtype, String),
    #[error("compilation failed:\n{stderr}")]
    CompileFailure { stderr: String },
    #[error("toolchain `{0}` is not available")]
    ToolchainMissing(String),
    #[error("driver protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("context targets backend `{ctx}` but backend `{backend}` was invoked")]
    BackendMismatch { ctx: String, backend: String },
    #[error("execution parameters do not match the specification: {0}")]
    BadParams(String),
    #[error("unknown backend `{0}`")]
    UnknownBackend(String),
    #[error("bad backend manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The backend plugin contract.
pub trait Backend: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    /// Complete program text: the template rendered with the substituted
    /// regions and the driver tables for `params`.
    fn generate_driver(
        &self,
        ctx: &KernelContext,
        params: &ExecutionParams,
        policy: &TimingPolicy,
        capture_outputs: bool,
    ) -> Result<String, BackendError>;

    /// Compile a program produced by `generate_driver`, returning the executable.
    fn compile(&self, program: &str) -> Result<PathBuf, BackendError>;

    fn run(&self, artifact: &Path, timeout: Duration, capture: bool) -> Result<RunResult, BackendError>;
}

/// A backend entirely defined by a manifest and a program template.
pub struct TemplateBackend {
    descriptor: BackendDescriptor,
    template: String,
    cache_dir: PathBuf,
}

#[derive(Deserialize)]
struct ManifestFile {
    #[serde(flatten)]
    descriptor: BackendDescriptor,
    driver_template: String,
}

impl TemplateBackend {
    pub fn new(descriptor: BackendDescriptor, template: String) -> Result<Self, BackendError> {
        descriptor.validate()?;
        crate::template::placeholder_names(&template)?;
        Ok(TemplateBackend { descriptor, template, cache_dir: default_cache_dir() })
    }

    /// Load a manifest file; its `driver_template` path is relative to the manifest.
    pub fn from_manifest(path: &Path) -> Result<Self, BackendError> {
        let text = fs::read_to_string(path)?;
        let m: ManifestFile = serde_json::from_str(&text).map_err(|e| BackendError::Manifest(e.to_string()))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let template = fs::read_to_string(dir.join(&m.driver_template))?;
        TemplateBackend::new(m.descriptor, template)
    }

    fn from_embedded(manifest: &str, template: &str) -> Self {
        let m: ManifestFile = serde_json::from_str(manifest).expect("embedded backend manifest");
        TemplateBackend::new(m.descriptor, template.to_owned()).expect("embedded backend")
    }

    pub fn with_cache_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.cache_dir = dir.into();
        self
    }

    pub fn with_timeout(mut self, seconds: f64) -> Self {
        self.descriptor.run_timeout = seconds;
        self
    }

    pub fn cache_dir(&self) -> &Path {
        &self.cache_dir
    }
}

fn default_cache_dir() -> PathBuf {
    match std::env::var_os("PEAK_BUILD_CACHE") {
        Some(p) => PathBuf::from(p),
        None => std::env::temp_dir().join("peak-build-cache"),
    }
}

impl Backend for TemplateBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn generate_driver(
        &self,
        ctx: &KernelContext,
        params: &ExecutionParams,
        policy: &TimingPolicy,
        capture_outputs: bool,
    ) -> Result<String, BackendError> {
        driver::render_program(&self.descriptor, &self.template, ctx, params, policy, capture_outputs)
    }

    fn compile(&self, program: &str) -> Result<PathBuf, BackendError> {
        compile_source(&self.descriptor, &self.cache_dir, program)
    }

    fn run(&self, artifact: &Path, timeout: Duration, capture: bool) -> Result<RunResult, BackendError> {
        run_artifact(artifact, timeout, capture)
    }
}

const BUILTIN: [(&str, &str, &str); 4] = [
    ("cpu-ref", include_str!("../../backends/cpu-ref.json"), include_str!("../../backends/cpu-ref.c.tmpl")),
    ("cuda", include_str!("../../backends/cuda.json"), include_str!("../../backends/cuda.cu.tmpl")),
    ("hip", include_str!("../../backends/hip.json"), include_str!("../../backends/hip.cpp.tmpl")),
    ("hlsl", include_str!("../../backends/hlsl.json"), include_str!("../../backends/hlsl.cpp.tmpl")),
];

/// Backends known to a process: the built-in ones plus any loaded from manifests.
#[derive(Clone)]
pub struct BackendRegistry {
    backends: IndexMap<String, Arc<dyn Backend>>,
}

impl Default for BackendRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl BackendRegistry {
    pub fn empty() -> Self {
        BackendRegistry { backends: IndexMap::new() }
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        for (_, manifest, template) in BUILTIN {
            r.register(Arc::new(TemplateBackend::from_embedded(manifest, template)));
        }
        r
    }

    /// Built-in backends sharing one build cache directory.
    pub fn builtin_with_cache(cache_dir: &Path) -> Self {
        let mut r = Self::empty();
        for (_, manifest, template) in BUILTIN {
            r.register(Arc::new(TemplateBackend::from_embedded(manifest, template).with_cache_dir(cache_dir)));
        }
        r
    }

    pub fn register(&mut self, backend: Arc<dyn Backend>) {
        self.backends.insert(backend.descriptor().id.clone(), backend);
    }

    pub fn load_manifest(&mut self, path: &Path) -> Result<(), BackendError> {
        self.register(Arc::new(TemplateBackend::from_manifest(path)?));
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<Arc<dyn Backend>, BackendError> {
        self.backends.get(id).cloned().ok_or_else(|| BackendError::UnknownBackend(id.to_owned()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.backends.keys().map(String::as_str)
    }
}

/// Generate, compile and run one job on the calling thread (no lease taken).
pub fn compile_and_run(
    backend: &dyn Backend,
    ctx: &KernelContext,
    params: &ExecutionParams,
    policy: &TimingPolicy,
    capture: bool,
) -> Result<RunResult, BackendError> {
    let program = backend.generate_driver(ctx, params, policy, capture)?;
    let exe = backend.compile(&program)?;
    let result = backend.run(&exe, backend.descriptor().timeout(), capture)?;
    batch::check_outputs(ctx, params, result)
}

/// Keep the tail of long tool output.
pub fn excerpt(text: &str, max: usize) -> String {
    if text.len() <= max {
        return text.to_owned();
    }
    let mut start = text.len() - max;
    while !text.is_char_boundary(start) {
        start += 1;
    }
    format!("...{}", &text[start..])
}
