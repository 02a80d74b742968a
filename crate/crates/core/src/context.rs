//! Kernel contexts: the three code regions plus the input/tuning specification.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::spec::{parse_spec, ExecutionParams, InputSpec, SpecError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionKind {
    Device,
    Host,
    Macros,
}

impl RegionKind {
    pub const ALL: [RegionKind; 3] = [RegionKind::Macros, RegionKind::Device, RegionKind::Host];

    pub fn as_str(self) -> &'static str {
        match self {
            RegionKind::Device => "device",
            RegionKind::Host => "host",
            RegionKind::Macros => "macros",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "device" => Some(RegionKind::Device),
            "host" => Some(RegionKind::Host),
            "macros" => Some(RegionKind::Macros),
            _ => None,
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            RegionKind::Device => "device.src",
            RegionKind::Host => "host.src",
            RegionKind::Macros => "macros.src",
        }
    }
}

impl fmt::Display for RegionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum ContextError {
    #[error("placeholder @TUNE({0}) has no tuning declaration")]
    OrphanPlaceholder(String),
    #[error("tuning parameter `{0}` is declared but never used as a placeholder")]
    OrphanDeclaration(String),
    #[error("unknown placeholder @TUNE({0})")]
    UnknownPlaceholder(String),
    #[error("no value for tuning parameter `{0}`")]
    MissingTuningValue(String),
    #[error("malformed placeholder near `{0}`")]
    MalformedPlaceholder(String),
    #[error("kernel `{0}` does not appear in the device region")]
    KernelNotFound(String),
    #[error("{0} region may not be empty")]
    EmptyRegion(RegionKind),
    #[error("bad context encoding: {0}")]
    Encoding(String),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"@TUNE\(([A-Za-z_][A-Za-z0-9_]*)\)").unwrap())
}

/// Names of all `@TUNE(NAME)` placeholders in `text`.
pub fn placeholders(text: &str) -> Result<BTreeSet<String>, ContextError> {
    let re = placeholder_re();
    let names: BTreeSet<String> = re.captures_iter(text).map(|c| c[1].to_owned()).collect();
    let well_formed = re.find_iter(text).count();
    if text.matches("@TUNE(").count() != well_formed {
        let at = text.find("@TUNE(").unwrap_or(0);
        let snippet: String = text[at..].chars().take(24).collect();
        let mut rest = text;
        // report the first malformed occurrence rather than the first occurrence
        while let Some(i) = rest.find("@TUNE(") {
            let tail = &rest[i..];
            if re.find(tail).map(|m| m.start()) != Some(0) {
                return Err(ContextError::MalformedPlaceholder(tail.chars().take(24).collect()));
            }
            rest = &tail[6..];
        }
        return Err(ContextError::MalformedPlaceholder(snippet));
    }
    Ok(names)
}

fn normalize(text: &str) -> String {
    text.replace("\r\n", "\n").replace('\r', "\n")
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelContext {
    device: String,
    host: String,
    macros: String,
    spec: InputSpec,
    backend: String,
    kernel_name: String,
    label: String,
}

/// Regions with every placeholder replaced by its concrete value.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubstitutedRegions {
    pub device: String,
    pub host: String,
    pub macros: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ContextDigest(String);

impl ContextDigest {
    pub fn from_hex(hex: &str) -> Self {
        ContextDigest(hex.to_ascii_lowercase())
    }

    pub fn hex(&self) -> &str {
        &self.0
    }

    pub fn short(&self) -> &str {
        &self.0[..12.min(self.0.len())]
    }
}

impl fmt::Display for ContextDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    backend: String,
    kernel_name: String,
    #[serde(default)]
    label: String,
}

const MAGIC: &str = "PEAK-CONTEXT 1\n";

impl KernelContext {
    pub fn new(
        device: &str,
        host: &str,
        macros: &str,
        spec: InputSpec,
        backend: &str,
        kernel_name: &str,
    ) -> Result<Self, ContextError> {
        let ctx = KernelContext {
            device: normalize(device),
            host: normalize(host),
            macros: normalize(macros),
            spec,
            backend: backend.to_owned(),
            kernel_name: kernel_name.to_owned(),
            label: String::new(),
        };
        ctx.validate()?;
        Ok(ctx)
    }

    pub fn with_label(mut self, label: &str) -> Self {
        self.label = label.to_owned();
        self
    }

    pub fn device(&self) -> &str {
        &self.device
    }

    pub fn host(&self) -> &str {
        &self.host
    }

    pub fn macros(&self) -> &str {
        &self.macros
    }

    pub fn region(&self, kind: RegionKind) -> &str {
        match kind {
            RegionKind::Device => &self.device,
            RegionKind::Host => &self.host,
            RegionKind::Macros => &self.macros,
        }
    }

    pub fn spec(&self) -> &InputSpec {
        &self.spec
    }

    pub fn backend(&self) -> &str {
        &self.backend
    }

    pub fn kernel_name(&self) -> &str {
        &self.kernel_name
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    fn used_placeholders(&self) -> Result<BTreeSet<String>, ContextError> {
        let mut all = BTreeSet::new();
        for k in RegionKind::ALL {
            all.extend(placeholders(self.region(k))?);
        }
        Ok(all)
    }

    /// Full invariant check: placeholder closure in both directions, kernel
    /// name present, non-empty device and host regions.
    pub fn validate(&self) -> Result<(), ContextError> {
        for k in [RegionKind::Device, RegionKind::Host] {
            if self.region(k).trim().is_empty() {
                return Err(ContextError::EmptyRegion(k));
            }
        }
        let word = Regex::new(&format!(r"\b{}\b", regex::escape(&self.kernel_name))).unwrap();
        if self.kernel_name.is_empty() || !word.is_match(&self.device) {
            return Err(ContextError::KernelNotFound(self.kernel_name.clone()));
        }
        let used = self.used_placeholders()?;
        for name in &used {
            if !self.spec.tuning.iter().any(|t| &t.name == name) {
                return Err(ContextError::OrphanPlaceholder(name.clone()));
            }
        }
        for t in &self.spec.tuning {
            if !used.contains(&t.name) {
                return Err(ContextError::OrphanDeclaration(t.name.clone()));
            }
        }
        Ok(())
    }

    /// Replace exactly one region. Placeholders in the new text must already be declared.
    pub fn replace_region(&self, kind: RegionKind, new_text: &str) -> Result<KernelContext, ContextError> {
        let text = normalize(new_text);
        for name in placeholders(&text)? {
            if !self.spec.tuning.iter().any(|t| t.name == name) {
                return Err(ContextError::OrphanPlaceholder(name));
            }
        }
        let mut next = self.clone();
        match kind {
            RegionKind::Device => next.device = text,
            RegionKind::Host => next.host = text,
            RegionKind::Macros => next.macros = text,
        }
        Ok(next)
    }

    /// Same context with a different specification (used when a transformation
    /// registers new tuning parameters).
    pub fn with_spec(&self, spec: InputSpec) -> KernelContext {
        let mut next = self.clone();
        next.spec = spec;
        next
    }

    pub fn with_backend(&self, backend: &str) -> KernelContext {
        let mut next = self.clone();
        next.backend = backend.to_owned();
        next
    }

    pub fn substitute_tuning(&self, params: &ExecutionParams) -> Result<SubstitutedRegions, ContextError> {
        let sub = |text: &str| -> Result<String, ContextError> {
            for name in placeholders(text)? {
                if !self.spec.tuning.iter().any(|t| t.name == name) {
                    return Err(ContextError::UnknownPlaceholder(name));
                }
                if !params.tuning_values.contains_key(&name) {
                    return Err(ContextError::MissingTuningValue(name));
                }
            }
            Ok(placeholder_re()
                .replace_all(text, |c: &regex::Captures<'_>| params.tuning_values[&c[1]].to_string())
                .into_owned())
        };
        Ok(SubstitutedRegions { device: sub(&self.device)?, host: sub(&self.host)?, macros: sub(&self.macros)? })
    }

    fn encode(&self, include_label: bool) -> Vec<u8> {
        let mut out = String::from(MAGIC);
        let mut field = |name: &str, value: &str| {
            out.push_str(&format!("{name} {}\n", value.len()));
            out.push_str(value);
            out.push('\n');
        };
        field("backend", &self.backend);
        field("kernel_name", &self.kernel_name);
        if include_label {
            field("label", &self.label);
        }
        field("spec", &self.spec.print());
        field("macros", &self.macros);
        field("device", &self.device);
        field("host", &self.host);
        out.into_bytes()
    }

    /// Deterministic byte encoding: fixed field order, length-prefixed fields,
    /// regions verbatim, the spec in its printed form.
    pub fn canonical_serialize(&self) -> Vec<u8> {
        self.encode(true)
    }

    pub fn canonical_deserialize(bytes: &[u8]) -> Result<KernelContext, ContextError> {
        let text = std::str::from_utf8(bytes).map_err(|e| ContextError::Encoding(e.to_string()))?;
        let mut rest = text
            .strip_prefix(MAGIC)
            .ok_or_else(|| ContextError::Encoding("missing header".into()))?;
        let mut take = |name: &str| -> Result<String, ContextError> {
            let (head, tail) =
                rest.split_once('\n').ok_or_else(|| ContextError::Encoding(format!("truncated before `{name}`")))?;
            let len: usize = head
                .strip_prefix(name)
                .and_then(|l| l.trim().parse().ok())
                .ok_or_else(|| ContextError::Encoding(format!("expected field `{name}`")))?;
            if tail.len() < len + 1 || !tail.is_char_boundary(len) || &tail[len..len + 1] != "\n" {
                return Err(ContextError::Encoding(format!("bad length for `{name}`")));
            }
            rest = &tail[len + 1..];
            Ok(tail[..len].to_owned())
        };
        let backend = take("backend")?;
        let kernel_name = take("kernel_name")?;
        let label = take("label")?;
        let spec = take("spec")?;
        let macros = take("macros")?;
        let device = take("device")?;
        let host = take("host")?;
        let spec = if spec.trim().is_empty() { InputSpec::default() } else { parse_spec(&spec)? };
        Ok(KernelContext::new(&device, &host, &macros, spec, &backend, &kernel_name)?.with_label(&label))
    }

    /// SHA-256 over the canonical encoding with the label left out.
    pub fn digest(&self) -> ContextDigest {
        ContextDigest(hex::encode(Sha256::digest(self.encode(false))))
    }

    /// Write the on-disk bundle: one file per region, `spec.pspec` and `meta`.
    pub fn write_bundle(&self, dir: &Path) -> Result<(), ContextError> {
        fs::create_dir_all(dir)?;
        for k in RegionKind::ALL {
            fs::write(dir.join(k.file_name()), self.region(k))?;
        }
        fs::write(dir.join("spec.pspec"), self.spec.print())?;
        let meta = BundleMeta {
            backend: self.backend.clone(),
            kernel_name: self.kernel_name.clone(),
            label: self.label.clone(),
        };
        fs::write(dir.join("meta"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn read_bundle(dir: &Path) -> Result<KernelContext, ContextError> {
        let read = |name: &str| fs::read_to_string(dir.join(name));
        let meta: BundleMeta = serde_json::from_str(&read("meta")?)?;
        let macros = match read("macros.src") {
            Ok(s) => s,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(e.into()),
        };
        let spec = parse_spec(&read("spec.pspec")?)?;
        Ok(KernelContext::new(
            &read("device.src")?,
            &read("host.src")?,
            &macros,
            spec,
            &meta.backend,
            &meta.kernel_name,
        )?
        .with_label(&meta.label))
    }
}

/// First `__global__ void NAME(` in a device region, if any.
pub fn infer_kernel_name(device: &str) -> Option<String> {
    let re = Regex::new(r"__global__\s+void\s+([A-Za-z_][A-Za-z0-9_]*)\s*\(").unwrap();
    re.captures(device).map(|c| c[1].to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::{enumerate_execution_params, parse_spec};

    fn ctx() -> KernelContext {
        let spec = parse_spec("input n: i32 in {4}\noutput C: array<f32> size in {n} init zeros\ntune TILE_K_SIZE: i32 in {8, 16}")
            .unwrap();
        KernelContext::new(
            "__global__ void k(float* C, int n) {\n  for (int kk = 0; kk < @TUNE(TILE_K_SIZE); ++kk) {}\n}\n",
            "void host_launch(float* C, int n) { PEAK_LAUNCH(k, dim3_make(1,1,1), dim3_make(1,1,1), C, n); }\n",
            "",
            spec,
            "cpu-ref",
            "k",
        )
        .unwrap()
    }

    #[test]
    fn substitution_replaces_every_placeholder() {
        let c = ctx();
        let p = enumerate_execution_params(c.spec()).unwrap().remove(1);
        let out = c.substitute_tuning(&p).unwrap();
        assert!(out.device.contains("kk < 16; ++kk"));
        assert!(!out.device.contains("@TUNE("));
    }

    #[test]
    fn orphan_placeholders_are_rejected() {
        let c = ctx();
        let err = c.replace_region(RegionKind::Device, "__global__ void k() { @TUNE(NEW); @TUNE(TILE_K_SIZE); }").unwrap_err();
        assert!(matches!(err, ContextError::OrphanPlaceholder(ref n) if n == "NEW"));
        let err = KernelContext::new("void k() { @TUNE(FOO); }", "x", "", InputSpec::default(), "cpu-ref", "k").unwrap_err();
        assert!(matches!(err, ContextError::OrphanPlaceholder(ref n) if n == "FOO"));
    }

    #[test]
    fn unknown_placeholder_on_substitution() {
        // bypass construction checks to exercise the substitution guard
        let mut c = ctx();
        c.macros = "#define X @TUNE(FOO)\n".into();
        let p = enumerate_execution_params(c.spec()).unwrap().remove(0);
        assert!(matches!(c.substitute_tuning(&p), Err(ContextError::UnknownPlaceholder(ref n)) if n == "FOO"));
        let mut p2 = p.clone();
        p2.tuning_values.clear();
        c.macros.clear();
        assert!(matches!(c.substitute_tuning(&p2), Err(ContextError::MissingTuningValue(_))));
    }

    #[test]
    fn malformed_placeholder() {
        assert!(matches!(placeholders("x @TUNE(BAD NAME) y"), Err(ContextError::MalformedPlaceholder(_))));
        assert_eq!(placeholders("@TUNE(A) @TUNE(B) @TUNE(A)").unwrap().len(), 2);
    }

    #[test]
    fn replace_region_identity_and_change() {
        let c = ctx();
        let same = c.replace_region(RegionKind::Device, c.device()).unwrap();
        assert_eq!(same.digest(), c.digest());
        let changed = c.replace_region(RegionKind::Macros, "#define TIDX threadIdx.x\n").unwrap();
        assert_ne!(changed.digest(), c.digest());
        assert_eq!(changed.device(), c.device());
        assert_eq!(changed.host(), c.host());
    }

    #[test]
    fn serialization_round_trip_and_label_exclusion() {
        let c = ctx().with_label("seed");
        let bytes = c.canonical_serialize();
        assert_eq!(bytes, c.canonical_serialize());
        let back = KernelContext::canonical_deserialize(&bytes).unwrap();
        assert_eq!(back, c);
        let relabeled = c.clone().with_label("other");
        assert_ne!(relabeled.canonical_serialize(), bytes);
        assert_eq!(relabeled.digest(), c.digest());
        assert_ne!(c.with_backend("cuda").digest(), relabeled.digest());
    }

    #[test]
    fn line_endings_are_normalized() {
        let c = ctx();
        let crlf = c.replace_region(RegionKind::Host, &c.host().replace('\n', "\r\n")).unwrap();
        assert_eq!(crlf.digest(), c.digest());
    }

    #[test]
    fn bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = ctx().with_label("bundle");
        c.write_bundle(dir.path()).unwrap();
        assert_eq!(KernelContext::read_bundle(dir.path()).unwrap(), c);
    }

    #[test]
    fn kernel_name_inference() {
        assert_eq!(infer_kernel_name("__global__ void matmul(const float* A)").as_deref(), Some("matmul"));
    }
}
