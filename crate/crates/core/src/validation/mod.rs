//! Reference outputs from the seed context and sampled output comparison.

mod plugin;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{execute_batch_with_artifacts, Backend, BatchJob, RunStatus, TimingPolicy};
use crate::context::{ContextDigest, ContextError, KernelContext};
use crate::spec::{enumerate_execution_params, enumerate_input_keys, sample_indices, Dtype, ExecutionParams, InputKey, SpecError};

pub use plugin::{CommandPlugin, Finding, PluginInput, PluginManifest, Severity, ValidatorPlugin, ValidatorRegistry};

#[derive(Debug, Error)]
pub enum ValidationError {
    #[error("seed execution failed: {0}")]
    SeedExecutionFailure(String),
    #[error("buffer lengths differ: candidate {candidate} bytes, reference {reference} bytes")]
    LengthMismatch { candidate: usize, reference: usize },
    #[error("incompatible reference store: {0}")]
    IncompatibleReference(String),
    #[error("validator plugin `{0}` is already registered")]
    DuplicatePlugin(String),
    #[error("bad plugin manifest: {0}")]
    PluginManifest(String),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TolerancePolicy {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub dtype: Dtype,
    /// Accumulation length; when larger than 64, `rel_tol` is scaled by sqrt(k / 64).
    #[serde(default)]
    pub reduction_dim_hint: Option<u64>,
}

impl TolerancePolicy {
    pub fn default_for(dtype: Dtype) -> Self {
        let (abs_tol, rel_tol) = match dtype {
            Dtype::F32 => (1e-6, 1e-3),
            Dtype::F16 => (1e-3, 1e-2),
            Dtype::I32 => (0.0, 0.0),
        };
        TolerancePolicy { abs_tol, rel_tol, dtype, reduction_dim_hint: None }
    }

    pub fn effective(&self) -> (f64, f64) {
        if self.dtype == Dtype::I32 {
            return (0.0, 0.0);
        }
        let scale = match self.reduction_dim_hint {
            Some(k) if k > 64 => (k as f64 / 64.0).sqrt(),
            _ => 1.0,
        };
        (self.abs_tol.max(0.0), self.rel_tol.max(0.0) * scale)
    }
}

/// Tolerances per element dtype, defaulting to [`TolerancePolicy::default_for`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TolerancePolicies {
    pub overrides: HashMap<Dtype, TolerancePolicy>,
}

impl TolerancePolicies {
    pub fn get(&self, dtype: Dtype) -> TolerancePolicy {
        self.overrides.get(&dtype).copied().unwrap_or_else(|| TolerancePolicy::default_for(dtype))
    }

    pub fn with(mut self, policy: TolerancePolicy) -> Self {
        self.overrides.insert(policy.dtype, policy);
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub matched: bool,
    pub worst_error: f64,
    pub first_mismatch_index: Option<usize>,
}

fn decode(buf: &[u8], dtype: Dtype) -> Vec<f64> {
    match dtype {
        Dtype::F32 => buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        Dtype::I32 => buf.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        Dtype::F16 => {
            buf.chunks_exact(2).map(|c| half::f16::from_bits(u16::from_le_bytes([c[0], c[1]])).to_f32() as f64).collect()
        }
    }
}

/// Elementwise `|c - r| <= abs_tol + rel_tol * |r|` over raw little-endian buffers.
pub fn compare_buffers(candidate: &[u8], reference: &[u8], policy: &TolerancePolicy) -> Result<Comparison, ValidationError> {
    if candidate.len() != reference.len() || !candidate.len().is_multiple_of(policy.dtype.byte_width()) {
        return Err(ValidationError::LengthMismatch { candidate: candidate.len(), reference: reference.len() });
    }
    let (abs_tol, rel_tol) = policy.effective();
    let c = decode(candidate, policy.dtype);
    let r = decode(reference, policy.dtype);
    let mut worst = 0.0f64;
    let mut first = None;
    for (i, (x, y)) in c.iter().zip(&r).enumerate() {
        if x.is_nan() && y.is_nan() {
            continue;
        }
        let err = (x - y).abs();
        let ok = err <= abs_tol + rel_tol * y.abs();
        if err.is_nan() || err > worst {
            worst = if err.is_nan() { f64::INFINITY } else { err };
        }
        if !ok && first.is_none() {
            first = Some(i);
        }
    }
    Ok(Comparison { matched: first.is_none(), worst_error: worst, first_mismatch_index: first })
}

/// Output buffers of the seed context keyed by input key (tuning excluded).
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceStore {
    pub seed_digest: ContextDigest,
    pub input_signature: String,
    pub dtypes: IndexMap<String, Dtype>,
    pub entries: IndexMap<InputKey, IndexMap<String, Vec<u8>>>,
}

#[derive(Serialize, Deserialize)]
struct RefIndex {
    seed_digest: ContextDigest,
    input_signature: String,
    dtypes: IndexMap<String, Dtype>,
    keys: Vec<RefIndexEntry>,
}

#[derive(Serialize, Deserialize)]
struct RefIndexEntry {
    key: InputKey,
    hash: String,
    arrays: Vec<String>,
}

impl ReferenceStore {
    pub fn get(&self, key: &InputKey) -> Option<&IndexMap<String, Vec<u8>>> {
        self.entries.get(key)
    }

    /// Persist as `<dir>/index.json` plus `<dir>/<key-hash>/<array>.bin`.
    pub fn save(&self, dir: &Path) -> Result<(), ValidationError> {
        fs::create_dir_all(dir)?;
        let mut keys = Vec::new();
        for (key, arrays) in &self.entries {
            let hash = key.hash();
            let sub = dir.join(&hash);
            fs::create_dir_all(&sub)?;
            for (name, buf) in arrays {
                fs::write(sub.join(format!("{name}.bin")), buf)?;
            }
            keys.push(RefIndexEntry { key: key.clone(), hash, arrays: arrays.keys().cloned().collect() });
        }
        let index = RefIndex {
            seed_digest: self.seed_digest.clone(),
            input_signature: self.input_signature.clone(),
            dtypes: self.dtypes.clone(),
            keys,
        };
        fs::write(dir.join("index.json"), serde_json::to_vec_pretty(&index)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, ValidationError> {
        let index: RefIndex = serde_json::from_slice(&fs::read(dir.join("index.json"))?)?;
        let mut entries = IndexMap::new();
        for e in index.keys {
            let mut arrays = IndexMap::new();
            for name in e.arrays {
                arrays.insert(name.clone(), fs::read(dir.join(&e.hash).join(format!("{name}.bin")))?);
            }
            entries.insert(e.key, arrays);
        }
        Ok(ReferenceStore {
            seed_digest: index.seed_digest,
            input_signature: index.input_signature,
            dtypes: index.dtypes,
            entries,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleStatus {
    Match,
    Mismatch,
    InvalidConfig,
    CompileError,
    RuntimeError,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub params: ExecutionParams,
    pub input_key: String,
    pub status: SampleStatus,
    pub worst_error: Option<f64>,
    pub first_mismatch_index: Option<usize>,
    /// Output array that mismatched first, if any.
    pub array: Option<String>,
    #[serde(default)]
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub verdict: Verdict,
    pub reason: Option<String>,
    pub sampled: usize,
    pub samples: Vec<SampleRecord>,
    pub plugin_findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }

    /// Whether any sample failed to compile (the failure class for retries).
    pub fn has_compile_error(&self) -> bool {
        self.samples.iter().any(|s| s.status == SampleStatus::CompileError)
    }

    /// Short human-readable explanation for feedback to a model.
    pub fn feedback(&self) -> String {
        let mut lines = Vec::new();
        if let Some(r) = &self.reason {
            lines.push(r.clone());
        }
        for s in &self.samples {
            match s.status {
                SampleStatus::Match | SampleStatus::InvalidConfig => {}
                SampleStatus::Mismatch => lines.push(format!(
                    "output `{}` differs from the reference for {}: first mismatch at flat index {}, worst abs error {:.3e}",
                    s.array.as_deref().unwrap_or("?"),
                    s.params,
                    s.first_mismatch_index.unwrap_or(0),
                    s.worst_error.unwrap_or(f64::NAN)
                )),
                SampleStatus::CompileError | SampleStatus::RuntimeError => {
                    lines.push(format!("{:?} for {}: {}", s.status, s.params, s.message))
                }
            }
            if lines.len() >= 4 {
                break;
            }
        }
        for f in &self.plugin_findings {
            lines.push(format!("[{}:{:?}] {}", f.plugin, f.severity, f.message));
        }
        lines.join("\n")
    }
}

/// Runs reference capture and validation through one backend.
pub struct Validator<'a> {
    pub backend: &'a dyn Backend,
    pub policies: TolerancePolicies,
    pub plugins: &'a ValidatorRegistry,
    pub parallel_compile: usize,
}

impl<'a> Validator<'a> {
    pub fn new(backend: &'a dyn Backend, plugins: &'a ValidatorRegistry) -> Self {
        Validator { backend, policies: TolerancePolicies::default(), plugins, parallel_compile: 1 }
    }

    pub fn with_policies(mut self, policies: TolerancePolicies) -> Self {
        self.policies = policies;
        self
    }

    pub fn with_parallelism(mut self, parallel_compile: usize) -> Self {
        self.parallel_compile = parallel_compile.max(1);
        self
    }

    /// Execute the seed over up to `budget` sampled input keys, each with the
    /// lowest tuning values that satisfy the constraints, capturing outputs.
    pub fn build_reference(&self, seed_ctx: &KernelContext, budget: usize, seed: u64) -> Result<ReferenceStore, ValidationError> {
        seed_ctx.validate()?;
        let spec = seed_ctx.spec();
        if spec.outputs().next().is_none() {
            return Err(ValidationError::SeedExecutionFailure("no outputs declared".into()));
        }
        let keys = enumerate_input_keys(spec)?;
        if keys.is_empty() {
            return Err(ValidationError::SeedExecutionFailure("the specification admits no execution parameters".into()));
        }
        let chosen: Vec<ExecutionParams> =
            sample_indices(spec, &keys, budget.max(1), seed).into_iter().map(|i| keys[i].clone()).collect();
        let jobs: Vec<BatchJob> = chosen
            .iter()
            .map(|p| BatchJob { ctx: seed_ctx.clone(), params: p.clone(), policy: TimingPolicy::capture_only(), capture: true })
            .collect();
        let results = execute_batch_with_artifacts(self.backend, &jobs, self.parallel_compile);
        let mut entries = IndexMap::new();
        for (p, (r, _)) in chosen.iter().zip(results) {
            if r.status != RunStatus::Ok {
                return Err(ValidationError::SeedExecutionFailure(format!("{} at {}: {}", r.status, p, r.stderr_excerpt)));
            }
            entries.insert(p.input_key(), r.outputs.unwrap_or_default());
        }
        Ok(ReferenceStore {
            seed_digest: seed_ctx.digest(),
            input_signature: spec.input_signature(),
            dtypes: spec.outputs().map(|a| (a.name.clone(), a.elem_dtype)).collect(),
            entries,
        })
    }

    /// Sample `budget` execution points (inputs and tuning jointly) among
    /// those whose input key has a reference, run them with capture and compare.
    pub fn validate(
        &self,
        ctx: &KernelContext,
        refs: &ReferenceStore,
        budget: usize,
        seed: u64,
    ) -> Result<ValidationReport, ValidationError> {
        let spec = ctx.spec();
        if spec.input_signature() != refs.input_signature {
            return Err(ValidationError::IncompatibleReference(
                "inputs and outputs differ from those the references were captured with".into(),
            ));
        }
        let candidates: Vec<ExecutionParams> = enumerate_execution_params(spec)?
            .into_iter()
            .filter(|p| refs.entries.contains_key(&p.input_key()))
            .collect();
        if candidates.is_empty() {
            return Err(ValidationError::IncompatibleReference("no execution point has a reference entry".into()));
        }
        let chosen: Vec<ExecutionParams> =
            sample_indices(spec, &candidates, budget.max(1), seed).into_iter().map(|i| candidates[i].clone()).collect();
        let jobs: Vec<BatchJob> = chosen
            .iter()
            .map(|p| BatchJob { ctx: ctx.clone(), params: p.clone(), policy: TimingPolicy::capture_only(), capture: true })
            .collect();
        let results = execute_batch_with_artifacts(self.backend, &jobs, self.parallel_compile);

        let mut samples = Vec::new();
        let mut runs_for_plugins = Vec::new();
        for (p, (r, exe)) in chosen.iter().zip(results) {
            let key = p.input_key();
            let mut rec = SampleRecord {
                params: p.clone(),
                input_key: key.to_string(),
                status: SampleStatus::Match,
                worst_error: None,
                first_mismatch_index: None,
                array: None,
                message: String::new(),
            };
            match r.status {
                RunStatus::Ok | RunStatus::ReferenceCapture => {
                    let reference = &refs.entries[&key];
                    let outputs = r.outputs.unwrap_or_default();
                    let mut worst = 0.0f64;
                    for (name, want) in reference {
                        let dtype = refs.dtypes.get(name).copied().unwrap_or(Dtype::F32);
                        let got = match outputs.get(name) {
                            Some(g) => g,
                            None => {
                                rec.status = SampleStatus::RuntimeError;
                                rec.message = format!("output `{name}` was not produced");
                                break;
                            }
                        };
                        let cmp = compare_buffers(got, want, &self.policies.get(dtype))?;
                        worst = worst.max(cmp.worst_error);
                        if !cmp.matched && rec.status == SampleStatus::Match {
                            rec.status = SampleStatus::Mismatch;
                            rec.first_mismatch_index = cmp.first_mismatch_index;
                            rec.array = Some(name.clone());
                        }
                    }
                    rec.worst_error = Some(worst);
                }
                RunStatus::InvalidConfig => rec.status = SampleStatus::InvalidConfig,
                RunStatus::CompileError => {
                    rec.status = SampleStatus::CompileError;
                    rec.message = r.stderr_excerpt;
                }
                RunStatus::RuntimeError | RunStatus::Timeout => {
                    rec.status = SampleStatus::RuntimeError;
                    rec.message = format!("{}: {}", r.status, r.stderr_excerpt);
                }
            }
            if let Some(exe) = exe {
                if rec.status != SampleStatus::InvalidConfig {
                    runs_for_plugins.push((p.clone(), exe));
                }
            }
            samples.push(rec);
        }

        let plugin_findings = self.plugins.run_all(self.backend.descriptor().id.as_str(), ctx, &runs_for_plugins);

        let valid = samples.iter().filter(|s| s.status != SampleStatus::InvalidConfig).count();
        let bad = samples.iter().find(|s| !matches!(s.status, SampleStatus::Match | SampleStatus::InvalidConfig));
        let plugin_error = plugin_findings.iter().find(|f| f.severity == Severity::Error);
        let reason = if valid == 0 {
            Some("no valid samples".to_owned())
        } else if let Some(s) = bad {
            Some(format!("{:?} at {}", s.status, s.params).to_lowercase())
        } else {
            plugin_error.map(|f| format!("plugin `{}` reported an error: {}", f.plugin, f.message))
        };
        Ok(ValidationReport {
            verdict: if reason.is_none() { Verdict::Pass } else { Verdict::Fail },
            reason,
            sampled: samples.len(),
            samples,
            plugin_findings,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f32_bytes(v: &[f32]) -> Vec<u8> {
        v.iter().flat_map(|x| x.to_le_bytes()).collect()
    }

    #[test]
    fn identical_buffers_match() {
        let a = f32_bytes(&[1.0, -2.0, 3.5]);
        let c = compare_buffers(&a, &a, &TolerancePolicy::default_for(Dtype::F32)).unwrap();
        assert!(c.matched);
        assert_eq!(c.worst_error, 0.0);
    }

    #[test]
    fn single_perturbation_is_located() {
        let r: Vec<f32> = (0..100).map(|i| (i as f32 / 100.0) - 0.5).collect();
        let mut c = r.clone();
        c[37] += 1.0;
        let cmp = compare_buffers(&f32_bytes(&c), &f32_bytes(&r), &TolerancePolicy::default_for(Dtype::F32)).unwrap();
        assert!(!cmp.matched);
        assert_eq!(cmp.first_mismatch_index, Some(37));
        assert!((cmp.worst_error - 1.0).abs() < 1e-6);
    }

    #[test]
    fn length_mismatch() {
        let p = TolerancePolicy::default_for(Dtype::F32);
        assert!(matches!(compare_buffers(&[0; 8], &[0; 4], &p), Err(ValidationError::LengthMismatch { .. })));
    }

    #[test]
    fn integers_compare_exactly() {
        let mut p = TolerancePolicy::default_for(Dtype::I32);
        p.abs_tol = 10.0;
        let a: Vec<u8> = [1i32, 2].iter().flat_map(|x| x.to_le_bytes()).collect();
        let b: Vec<u8> = [1i32, 3].iter().flat_map(|x| x.to_le_bytes()).collect();
        assert!(!compare_buffers(&a, &b, &p).unwrap().matched);
    }

    #[test]
    fn reduction_hint_scales_relative_tolerance() {
        let mut p = TolerancePolicy::default_for(Dtype::F32);
        assert_eq!(p.effective(), (1e-6, 1e-3));
        p.reduction_dim_hint = Some(4096);
        assert!((p.effective().1 - 8e-3).abs() < 1e-15);
        p.reduction_dim_hint = Some(16);
        assert_eq!(p.effective().1, 1e-3);
    }

    #[test]
    fn f16_buffers_are_widened() {
        let p = TolerancePolicy::default_for(Dtype::F16);
        let a: Vec<u8> = [half::f16::from_f32(1.0)].iter().flat_map(|h| h.to_bits().to_le_bytes()).collect();
        let b: Vec<u8> = [half::f16::from_f32(1.005)].iter().flat_map(|h| h.to_bits().to_le_bytes()).collect();
        assert!(compare_buffers(&a, &b, &p).unwrap().matched);
    }
}
