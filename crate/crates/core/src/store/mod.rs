//! Content-addressed checkpoint store with parent lineage, named refs,
//! diffs and speedup trajectories.
//!
//! Layout under a workflow root:
//!
//! ```text
//! LOCK                      writer lock file
//! refs.json                 {"name": "<digest>"}
//! references/               seed outputs used by validation
//! checkpoints/<digest>/
//!     context.bin           canonical encoding
//!     context/              readable bundle
//!     meta.json
//!     validation.json       optional
//!     perf.json, perf.csv   optional
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions, TryLockError};
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use similar::TextDiff;
use thiserror::Error;

use crate::context::{ContextDigest, ContextError, KernelContext, RegionKind};
use crate::perf::{percent_of, speedup, PerfError, PerfReport};
use crate::spec::InputKey;
use crate::validation::{ReferenceStore, ValidationError, ValidationReport, Verdict};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("`{0}` is not a workflow root (run init first)")]
    NotAStore(PathBuf),
    #[error("`{0}` already holds a workflow store")]
    AlreadyInitialized(PathBuf),
    #[error("the workflow root is locked by another writer")]
    Locked,
    #[error("unknown parent checkpoint {0}")]
    UnknownParent(String),
    #[error("checkpoint {id} already exists with parent {existing}")]
    DigestCollisionConflict { id: String, existing: String },
    #[error("unknown checkpoint `{0}`")]
    UnknownCheckpoint(String),
    #[error("`{prefix}` matches several checkpoints: {}", matches.join(", "))]
    AmbiguousPrefix { prefix: String, matches: Vec<String> },
    #[error("unknown ref `{0}`")]
    UnknownRef(String),
    #[error("invalid ref name `{0}`")]
    BadRefName(String),
    #[error("checkpoint {0} has no performance report for the trajectory's input key")]
    MissingPerfData(String),
    #[error("checkpoint {id} is corrupt: {message}")]
    Corrupt { id: String, message: String },
    #[error("report is for context {report} but checkpoint is {checkpoint}")]
    ReportMismatch { report: String, checkpoint: String },
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Perf(#[from] PerfError),
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub verdict: Verdict,
    pub sampled: usize,
    pub reason: Option<String>,
}

impl From<&ValidationReport> for ValidationSummary {
    fn from(r: &ValidationReport) -> Self {
        ValidationSummary { verdict: r.verdict, sampled: r.sampled, reason: r.reason.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerfSummary {
    pub input_key: InputKey,
    pub best_time_ms: f64,
    pub best_tuning: indexmap::IndexMap<String, i64>,
    pub best_gflops: Option<f64>,
    pub evaluated: usize,
}

impl From<&PerfReport> for PerfSummary {
    fn from(r: &PerfReport) -> Self {
        PerfSummary {
            input_key: r.input_key.clone(),
            best_time_ms: r.best_time_ms(),
            best_tuning: r.best.tuning.clone(),
            best_gflops: r.best_gflops,
            evaluated: r.evaluated,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub id: ContextDigest,
    pub parent: Option<ContextDigest>,
    /// Absent for seeds.
    pub transformation_name: Option<String>,
    pub validation: Option<ValidationSummary>,
    pub perf: Option<PerfSummary>,
    pub created_at: DateTime<Utc>,
    #[serde(default)]
    pub note: String,
}

/// What to record with a new checkpoint.
#[derive(Clone, Debug, Default)]
pub struct CommitRequest<'a> {
    pub parent: Option<&'a ContextDigest>,
    pub transformation_name: Option<&'a str>,
    pub validation: Option<&'a ValidationReport>,
    pub perf: Option<&'a PerfReport>,
    pub note: &'a str,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionDiff {
    pub region: RegionKind,
    /// Unified diff; empty when the region is unchanged.
    pub unified: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetadataDelta {
    pub best_time_ms: (Option<f64>, Option<f64>),
    pub best_gflops: (Option<f64>, Option<f64>),
    /// `b` over `a`, when both have comparable reports.
    pub speedup: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointDiff {
    pub a: ContextDigest,
    pub b: ContextDigest,
    pub regions: Vec<RegionDiff>,
    pub spec: String,
    pub metadata: MetadataDelta,
}

impl CheckpointDiff {
    pub fn is_empty(&self) -> bool {
        self.spec.is_empty() && self.regions.iter().all(|r| r.unified.is_empty())
    }

    pub fn region(&self, kind: RegionKind) -> &str {
        self.regions.iter().find(|r| r.region == kind).map(|r| r.unified.as_str()).unwrap_or("")
    }

    /// All non-empty parts as one patch-like text.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.regions {
            out.push_str(&r.unified);
        }
        out.push_str(&self.spec);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub id: ContextDigest,
    pub transformation_name: Option<String>,
    pub best_time_ms: f64,
    pub cumulative_speedup: f64,
    pub step_speedup: f64,
    pub best_gflops: Option<f64>,
    pub percent_of_reference: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub input_key: InputKey,
    pub steps: Vec<TrajectoryStep>,
}

fn unified(a: &str, b: &str, name: &str) -> String {
    if a == b {
        return String::new();
    }
    TextDiff::from_lines(a, b).unified_diff().header(&format!("a/{name}"), &format!("b/{name}")).to_string()
}

fn valid_ref_name(name: &str) -> bool {
    !name.is_empty()
        && name.len() <= 128
        && name.chars().all(|c| c.is_ascii_alphanumeric() || "-_./".contains(c))
        && !name.starts_with(['.', '/'])
}

/// Write `bytes` to `path` through a temporary file in the same directory.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Read access to a workflow root. Any number of readers may coexist with
/// one writer.
#[derive(Clone, Debug)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    /// Create an empty store at `root`.
    pub fn init(root: &Path) -> Result<Store, StoreError> {
        if root.join("refs.json").exists() {
            return Err(StoreError::AlreadyInitialized(root.to_owned()));
        }
        fs::create_dir_all(root.join("checkpoints"))?;
        fs::create_dir_all(root.join("tmp"))?;
        write_atomic(&root.join("refs.json"), b"{}\n")?;
        Ok(Store { root: root.to_owned() })
    }

    pub fn open(root: &Path) -> Result<Store, StoreError> {
        if !root.join("refs.json").is_file() || !root.join("checkpoints").is_dir() {
            return Err(StoreError::NotAStore(root.to_owned()));
        }
        Ok(Store { root: root.to_owned() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Take the exclusive writer lock, failing immediately if it is held.
    pub fn writer(&self) -> Result<StoreWriter, StoreError> {
        let file = OpenOptions::new().create(true).truncate(false).write(true).open(self.root.join("LOCK"))?;
        match file.try_lock() {
            Ok(()) => Ok(StoreWriter { store: self.clone(), _lock: file }),
            Err(TryLockError::WouldBlock) => Err(StoreError::Locked),
            Err(TryLockError::Error(e)) => Err(e.into()),
        }
    }

    fn dir(&self, id: &ContextDigest) -> PathBuf {
        self.root.join("checkpoints").join(id.hex())
    }

    pub fn contains(&self, id: &ContextDigest) -> bool {
        self.dir(id).join("meta.json").is_file()
    }

    /// All checkpoint ids, sorted.
    pub fn ids(&self) -> Result<Vec<ContextDigest>, StoreError> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(self.root.join("checkpoints"))? {
            let entry = entry?;
            if entry.path().join("meta.json").is_file() {
                ids.push(ContextDigest::from_hex(&entry.file_name().to_string_lossy()));
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub fn checkpoint(&self, id: &ContextDigest) -> Result<Checkpoint, StoreError> {
        let path = self.dir(id).join("meta.json");
        let raw = fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => StoreError::UnknownCheckpoint(id.to_string()),
            _ => e.into(),
        })?;
        Ok(serde_json::from_slice(&raw)?)
    }

    /// Every checkpoint ordered by creation time, then id.
    pub fn checkpoints(&self) -> Result<Vec<Checkpoint>, StoreError> {
        let mut all = self.ids()?.iter().map(|id| self.checkpoint(id)).collect::<Result<Vec<_>, _>>()?;
        all.sort_by(|a, b| a.created_at.cmp(&b.created_at).then_with(|| a.id.cmp(&b.id)));
        Ok(all)
    }

    pub fn children(&self, id: &ContextDigest) -> Result<Vec<ContextDigest>, StoreError> {
        Ok(self.checkpoints()?.into_iter().filter(|c| c.parent.as_ref() == Some(id)).map(|c| c.id).collect())
    }

    /// Canonical bytes of a checkpoint's context.
    pub fn canonical_bytes(&self, id: &ContextDigest) -> Result<Vec<u8>, StoreError> {
        if !self.contains(id) {
            return Err(StoreError::UnknownCheckpoint(id.to_string()));
        }
        Ok(fs::read(self.dir(id).join("context.bin"))?)
    }

    /// The committed context, checked against its id.
    pub fn restore(&self, id: &ContextDigest) -> Result<KernelContext, StoreError> {
        let bytes = self.canonical_bytes(id)?;
        let ctx = KernelContext::canonical_deserialize(&bytes)
            .map_err(|e| StoreError::Corrupt { id: id.to_string(), message: e.to_string() })?;
        if &ctx.digest() != id || ctx.canonical_serialize() != bytes {
            return Err(StoreError::Corrupt { id: id.to_string(), message: "content does not match its digest".into() });
        }
        Ok(ctx)
    }

    pub fn validation_report(&self, id: &ContextDigest) -> Result<Option<ValidationReport>, StoreError> {
        self.read_optional(id, "validation.json")
    }

    pub fn perf_report(&self, id: &ContextDigest) -> Result<Option<PerfReport>, StoreError> {
        self.read_optional(id, "perf.json")
    }

    fn read_optional<T: serde::de::DeserializeOwned>(&self, id: &ContextDigest, file: &str) -> Result<Option<T>, StoreError> {
        if !self.contains(id) {
            return Err(StoreError::UnknownCheckpoint(id.to_string()));
        }
        match fs::read(self.dir(id).join(file)) {
            Ok(raw) => Ok(Some(serde_json::from_slice(&raw)?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    pub fn refs(&self) -> Result<BTreeMap<String, ContextDigest>, StoreError> {
        Ok(serde_json::from_slice(&fs::read(self.root.join("refs.json"))?)?)
    }

    pub fn resolve_ref(&self, name: &str) -> Result<ContextDigest, StoreError> {
        self.refs()?.remove(name).ok_or_else(|| StoreError::UnknownRef(name.to_owned()))
    }

    /// Resolve a ref name, a full digest or a unique digest prefix.
    pub fn resolve(&self, name: &str) -> Result<ContextDigest, StoreError> {
        if let Some(id) = self.refs()?.remove(name) {
            return Ok(id);
        }
        let lower = name.to_ascii_lowercase();
        if lower.is_empty() || !lower.chars().all(|c| c.is_ascii_hexdigit()) {
            return Err(StoreError::UnknownCheckpoint(name.to_owned()));
        }
        let matches: Vec<ContextDigest> = self.ids()?.into_iter().filter(|id| id.hex().starts_with(&lower)).collect();
        match matches.len() {
            0 => Err(StoreError::UnknownCheckpoint(name.to_owned())),
            1 => Ok(matches.into_iter().next().unwrap_or_else(|| unreachable!())),
            _ => Err(StoreError::AmbiguousPrefix {
                prefix: name.to_owned(),
                matches: matches.iter().map(|m| m.short().to_owned()).collect(),
            }),
        }
    }

    /// Checkpoints from the root of `tip`'s lineage down to `tip`.
    pub fn lineage(&self, tip: &ContextDigest) -> Result<Vec<Checkpoint>, StoreError> {
        let mut path = vec![self.checkpoint(tip)?];
        while let Some(parent) = path.last().and_then(|c| c.parent.clone()) {
            if path.len() > 100_000 {
                return Err(StoreError::Corrupt { id: tip.to_string(), message: "lineage does not terminate".into() });
            }
            path.push(self.checkpoint(&parent)?);
        }
        path.reverse();
        Ok(path)
    }

    pub fn diff(&self, a: &ContextDigest, b: &ContextDigest) -> Result<CheckpointDiff, StoreError> {
        let (ca, cb) = (self.restore(a)?, self.restore(b)?);
        let regions = RegionKind::ALL
            .iter()
            .map(|&k| RegionDiff { region: k, unified: unified(ca.region(k), cb.region(k), k.file_name()) })
            .collect();
        let spec = unified(&ca.spec().print(), &cb.spec().print(), "spec.pspec");
        let (pa, pb) = (self.perf_report(a)?, self.perf_report(b)?);
        let speedup = match (&pa, &pb) {
            (Some(ra), Some(rb)) => speedup(rb, ra).ok(),
            _ => None,
        };
        Ok(CheckpointDiff {
            a: a.clone(),
            b: b.clone(),
            regions,
            spec,
            metadata: MetadataDelta {
                best_time_ms: (pa.as_ref().map(|r| r.best_time_ms()), pb.as_ref().map(|r| r.best_time_ms())),
                best_gflops: (pa.as_ref().and_then(|r| r.best_gflops), pb.as_ref().and_then(|r| r.best_gflops)),
                speedup,
            },
        })
    }

    /// Speedups along the lineage of `tip`. Every checkpoint on the path
    /// needs a performance report for the same input key as the root's.
    pub fn trajectory(&self, tip: &ContextDigest, reference_time_ms: Option<f64>) -> Result<Trajectory, StoreError> {
        let path = self.lineage(tip)?;
        let mut reports = Vec::with_capacity(path.len());
        for c in &path {
            let r = self.perf_report(&c.id)?.ok_or_else(|| StoreError::MissingPerfData(c.id.to_string()))?;
            if let Some(first) = reports.first() {
                let first: &PerfReport = first;
                if first.input_key != r.input_key {
                    return Err(StoreError::MissingPerfData(c.id.to_string()));
                }
            }
            reports.push(r);
        }
        let seed_ms = reports[0].best_time_ms();
        let mut steps = Vec::with_capacity(path.len());
        for (i, (c, r)) in path.iter().zip(&reports).enumerate() {
            let t = r.best_time_ms();
            let parent_ms = if i == 0 { t } else { reports[i - 1].best_time_ms() };
            steps.push(TrajectoryStep {
                id: c.id.clone(),
                transformation_name: c.transformation_name.clone(),
                best_time_ms: t,
                cumulative_speedup: seed_ms / t,
                step_speedup: parent_ms / t,
                best_gflops: r.best_gflops,
                percent_of_reference: reference_time_ms.map(|ms| percent_of(r, ms)),
            });
        }
        Ok(Trajectory { input_key: reports[0].input_key.clone(), steps })
    }

    pub fn load_references(&self) -> Result<Option<ReferenceStore>, StoreError> {
        let dir = self.root.join("references");
        if !dir.is_dir() {
            return Ok(None);
        }
        Ok(Some(ReferenceStore::load(&dir)?))
    }
}

/// Holds the writer lock for as long as it lives.
#[derive(Debug)]
pub struct StoreWriter {
    store: Store,
    _lock: File,
}

impl std::ops::Deref for StoreWriter {
    type Target = Store;

    fn deref(&self) -> &Store {
        &self.store
    }
}

impl StoreWriter {
    /// Record `ctx` as a checkpoint. Committing an existing context under
    /// the same parent returns the stored checkpoint unchanged.
    pub fn commit(&self, ctx: &KernelContext, req: &CommitRequest<'_>) -> Result<Checkpoint, StoreError> {
        let id = ctx.digest();
        if let Some(p) = req.parent {
            if !self.contains(p) {
                return Err(StoreError::UnknownParent(p.to_string()));
            }
        }
        if self.contains(&id) {
            let existing = self.checkpoint(&id)?;
            if existing.parent.as_ref() == req.parent {
                return Ok(existing);
            }
            return Err(StoreError::DigestCollisionConflict {
                id: id.to_string(),
                existing: existing.parent.map(|p| p.to_string()).unwrap_or_else(|| "none".into()),
            });
        }
        for r in req.perf.iter().map(|r| &r.ctx_digest) {
            if r != &id {
                return Err(StoreError::ReportMismatch { report: r.to_string(), checkpoint: id.to_string() });
            }
        }

        let checkpoint = Checkpoint {
            id: id.clone(),
            parent: req.parent.cloned(),
            transformation_name: req.transformation_name.map(str::to_owned),
            validation: req.validation.map(ValidationSummary::from),
            perf: req.perf.map(PerfSummary::from),
            created_at: Utc::now(),
            note: req.note.to_owned(),
        };
        fs::create_dir_all(self.root.join("tmp"))?;
        let staging = tempfile::Builder::new().prefix("commit-").tempdir_in(self.root.join("tmp"))?;
        let dir = staging.path();
        fs::write(dir.join("context.bin"), ctx.canonical_serialize())?;
        ctx.write_bundle(&dir.join("context"))?;
        if let Some(v) = req.validation {
            fs::write(dir.join("validation.json"), serde_json::to_vec_pretty(v)?)?;
        }
        if let Some(p) = req.perf {
            fs::write(dir.join("perf.json"), serde_json::to_vec_pretty(p)?)?;
            fs::write(dir.join("perf.csv"), p.to_csv()?)?;
        }
        fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&checkpoint)?)?;
        for f in fs::read_dir(dir)? {
            let f = f?;
            if f.file_type()?.is_file() {
                File::open(f.path())?.sync_all()?;
            }
        }
        fs::rename(staging.keep(), self.dir(&id))?;
        Ok(checkpoint)
    }

    /// Attach or replace the validation report of an existing checkpoint.
    pub fn record_validation(&self, id: &ContextDigest, report: &ValidationReport) -> Result<Checkpoint, StoreError> {
        let mut c = self.checkpoint(id)?;
        write_atomic(&self.dir(id).join("validation.json"), &serde_json::to_vec_pretty(report)?)?;
        c.validation = Some(report.into());
        write_atomic(&self.dir(id).join("meta.json"), &serde_json::to_vec_pretty(&c)?)?;
        Ok(c)
    }

    /// Attach or replace the performance report of an existing checkpoint.
    pub fn record_perf(&self, id: &ContextDigest, report: &PerfReport) -> Result<Checkpoint, StoreError> {
        let mut c = self.checkpoint(id)?;
        if &report.ctx_digest != id {
            return Err(StoreError::ReportMismatch { report: report.ctx_digest.to_string(), checkpoint: id.to_string() });
        }
        write_atomic(&self.dir(id).join("perf.json"), &serde_json::to_vec_pretty(report)?)?;
        write_atomic(&self.dir(id).join("perf.csv"), report.to_csv()?.as_bytes())?;
        c.perf = Some(report.into());
        write_atomic(&self.dir(id).join("meta.json"), &serde_json::to_vec_pretty(&c)?)?;
        Ok(c)
    }

    /// Point `name` at `id`, creating or moving the ref.
    pub fn set_ref(&self, name: &str, id: &ContextDigest) -> Result<(), StoreError> {
        if !valid_ref_name(name) {
            return Err(StoreError::BadRefName(name.to_owned()));
        }
        if !self.contains(id) {
            return Err(StoreError::UnknownCheckpoint(id.to_string()));
        }
        let mut refs = self.refs()?;
        refs.insert(name.to_owned(), id.clone());
        write_atomic(&self.root.join("refs.json"), &serde_json::to_vec_pretty(&refs)?)
    }

    /// Persist the seed outputs used for validation, replacing any previous set.
    pub fn save_references(&self, refs: &ReferenceStore) -> Result<(), StoreError> {
        let staging = tempfile::Builder::new().prefix("refs-").tempdir_in(self.root.join("tmp"))?;
        refs.save(staging.path())?;
        let target = self.root.join("references");
        if target.exists() {
            let old = self.root.join("tmp").join(format!("old-references-{}", std::process::id()));
            fs::rename(&target, &old)?;
            fs::rename(staging.keep(), &target)?;
            fs::remove_dir_all(old)?;
        } else {
            fs::rename(staging.keep(), &target)?;
        }
        Ok(())
    }
}
