//! One open workflow root and the operations the CLI and the API share.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use peak_core::backend::{Backend, BackendRegistry};
use peak_core::context::{infer_kernel_name, ContextDigest, KernelContext, RegionKind};
use peak_core::perf::{default_input_key, input_keys, PerfEvaluator, PerfQuery, PerfReport, Strategy, TunerRegistry};
use peak_core::spec::{parse_spec, InputKey};
use peak_core::store::{Checkpoint, CheckpointDiff, CommitRequest, Store, StoreWriter, Trajectory};
use peak_core::transform::{
    apply_transformation, measure_reliability, ApplyOptions, ApplyOutcome, ApplyStatus, Catalog, LiveClient,
    LlmClient, MockClient, NaturalTransformation, ReliabilityReport,
};
use peak_core::validation::{ReferenceStore, ValidationReport, Validator, ValidatorRegistry};
use serde::{Deserialize, Serialize};

use crate::config::{LlmSettings, SessionConfig};
use crate::error::ServiceError;

/// Source files of a seed kernel context.
#[derive(Clone, Debug)]
pub struct SeedFiles {
    pub spec: PathBuf,
    pub device: PathBuf,
    pub host: PathBuf,
    pub macros: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Access {
    Read,
    /// Holds the store's writer lock until the session is dropped.
    Write,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransformResult {
    pub transformation: String,
    pub parent: ContextDigest,
    pub outcome: ApplyOutcome,
    /// The committed checkpoint; absent when the transformation failed.
    pub checkpoint: Option<Checkpoint>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EvaluateRequest {
    /// Falls back to the session's default strategy.
    #[serde(default)]
    pub strategy: Option<Strategy>,
    /// `name=value` pairs selecting an input key; defaults to the largest.
    #[serde(default)]
    pub input: Option<String>,
    #[serde(default)]
    pub keep_top: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SequenceStep {
    pub transformation: String,
    pub status: ApplyStatus,
    pub checkpoint: Option<ContextDigest>,
    pub best_time_ms: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SequenceResult {
    pub start: ContextDigest,
    pub steps: Vec<SequenceStep>,
    /// Whether every transformation succeeded.
    pub completed: bool,
    pub trajectory: Option<Trajectory>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub name: String,
    pub description: String,
    pub passes: usize,
    pub llm_calls: usize,
    pub new_tuning: Vec<String>,
    pub backend_only: Option<Vec<String>>,
    /// Whether it applies to the session's backend.
    pub supported: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogEntry {
    pub checkpoint: Checkpoint,
    pub children: Vec<ContextDigest>,
    pub refs: Vec<String>,
}

/// A mock fixture variant scheduled onto reliability trials.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub variant: String,
    pub trials: Vec<u32>,
}

impl std::str::FromStr for Schedule {
    type Err = String;

    /// `VARIANT@T1,T2,...`
    fn from_str(s: &str) -> Result<Self, String> {
        let (variant, trials) = s.split_once('@').ok_or("expected VARIANT@TRIAL[,TRIAL...]")?;
        let trials = trials
            .split(',')
            .map(|t| t.trim().parse::<u32>().map_err(|_| format!("bad trial number `{t}`")))
            .collect::<Result<Vec<_>, _>>()?;
        if variant.is_empty() || trials.is_empty() {
            return Err("expected VARIANT@TRIAL[,TRIAL...]".into());
        }
        Ok(Schedule { variant: variant.to_owned(), trials })
    }
}

pub struct Session {
    config: SessionConfig,
    store: Store,
    writer: Option<StoreWriter>,
    backend: Arc<dyn Backend>,
    validators: ValidatorRegistry,
    tuners: TunerRegistry,
    client: Box<dyn LlmClient>,
    catalog: Catalog,
}

fn build_client(config: &SessionConfig, root: &Path, schedules: &[(String, Schedule)]) -> Result<Box<dyn LlmClient>, ServiceError> {
    match &config.llm {
        LlmSettings::Mock { fixtures, variants } => {
            let mut mock = MockClient::from_dir(fixtures).map_err(|e| ServiceError::Config(e.to_string()))?;
            for v in variants {
                let (t, name) =
                    v.split_once(':').ok_or_else(|| ServiceError::Config(format!("mock variant `{v}` is not TRANSFORMATION:VARIANT")))?;
                mock.use_variant(t, name).map_err(|e| ServiceError::Config(e.to_string()))?;
            }
            for (t, s) in schedules {
                mock.schedule(t, &s.variant, &s.trials).map_err(|e| ServiceError::InvalidArgument(e.to_string()))?;
            }
            Ok(Box::new(mock))
        }
        LlmSettings::Live { .. } => {
            if !schedules.is_empty() {
                return Err(ServiceError::InvalidArgument("fixture schedules need the mock client".into()));
            }
            let live = config.live_config()?.ok_or_else(|| ServiceError::Config("live client is not configured".into()))?;
            Ok(Box::new(LiveClient::new(live).with_audit_dir(root.join("audit"))))
        }
    }
}

/// Key whose scalars match every `name=value` pair in `selector`.
fn select_key(keys: &[InputKey], selector: &str) -> Result<InputKey, ServiceError> {
    let wanted: Vec<(&str, &str)> = selector
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.split_once('=').map(|(k, v)| (k.trim(), v.trim())))
        .collect::<Option<_>>()
        .ok_or_else(|| ServiceError::InvalidArgument(format!("input selector `{selector}` is not name=value[,name=value]")))?;
    keys.iter()
        .find(|k| wanted.iter().all(|(n, v)| k.scalars.get(*n).is_some_and(|s| s.to_string() == *v)))
        .cloned()
        .ok_or_else(|| ServiceError::InvalidArgument(format!("no input key matches `{selector}`")))
}

impl Session {
    /// Create a workflow root, store the configuration, build the reference
    /// outputs from the seed and commit the seed as the first checkpoint.
    pub fn init(root: &Path, config: SessionConfig, seed: &SeedFiles) -> Result<(Session, Checkpoint), ServiceError> {
        config.check()?;
        let read = |p: &Path| fs::read_to_string(p).map_err(|e| ServiceError::InvalidArgument(format!("{}: {e}", p.display())));
        let device = read(&seed.device)?;
        let host = read(&seed.host)?;
        let macros = match &seed.macros {
            Some(p) => read(p)?,
            None => String::new(),
        };
        let spec = parse_spec(&read(&seed.spec)?)?;
        let kernel = infer_kernel_name(&device)
            .ok_or_else(|| ServiceError::InvalidArgument("device code has no `__global__ void NAME(` kernel".into()))?;
        let ctx = KernelContext::new(&device, &host, &macros, spec, &config.backend, &kernel)?.with_label("seed");

        Store::init(root)?;
        config.save(root)?;
        let session = Session::open(root, Access::Write)?;
        let validator = session.validator();
        let refs = validator.build_reference(&ctx, session.config.validator_budget, session.config.seed)?;
        session.writer()?.save_references(&refs)?;
        let report = validator.validate(&ctx, &refs, session.config.validator_budget, session.config.seed)?;
        let checkpoint = session.writer()?.commit(
            &ctx,
            &CommitRequest { validation: Some(&report), note: "seed", ..Default::default() },
        )?;
        session.writer()?.set_ref("seed", &checkpoint.id)?;
        Ok((session, checkpoint))
    }

    pub fn open(root: &Path, access: Access) -> Result<Session, ServiceError> {
        let store = Store::open(root)?;
        let writer = match access {
            Access::Write => Some(store.writer()?),
            Access::Read => None,
        };
        let config = SessionConfig::load(root)?;
        let cache = config.build_cache.clone().unwrap_or_else(|| root.join("build-cache"));
        let mut backends = BackendRegistry::builtin_with_cache(&cache);
        for m in &config.backend_manifests {
            backends.load_manifest(m)?;
        }
        let backend = backends.get(&config.backend)?;
        let mut validators = ValidatorRegistry::new();
        for m in &config.validator_plugins {
            validators.load_manifest(m)?;
        }
        let mut tuners = TunerRegistry::new();
        for m in &config.tuner_plugins {
            tuners.load_manifest(m)?;
        }
        let client = build_client(&config, root, &[])?;
        let catalog = Catalog::new(config.catalog.clone());
        Ok(Session { config, store, writer, backend, validators, tuners, client, catalog })
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    fn writer(&self) -> Result<&StoreWriter, ServiceError> {
        self.writer.as_ref().ok_or(ServiceError::Store(peak_core::store::StoreError::Locked))
    }

    fn validator(&self) -> Validator<'_> {
        Validator::new(self.backend.as_ref(), &self.validators).with_policies(self.config.tolerances.clone())
    }

    fn references(&self) -> Result<ReferenceStore, ServiceError> {
        self.store
            .load_references()?
            .ok_or_else(|| ServiceError::Config("the workflow root has no reference outputs".into()))
    }

    pub fn resolve(&self, target: &str) -> Result<ContextDigest, ServiceError> {
        Ok(self.store.resolve(target)?)
    }

    pub fn checkpoint(&self, target: &str) -> Result<Checkpoint, ServiceError> {
        Ok(self.store.checkpoint(&self.resolve(target)?)?)
    }

    pub fn region(&self, target: &str, kind: RegionKind) -> Result<String, ServiceError> {
        Ok(self.store.restore(&self.resolve(target)?)?.region(kind).to_owned())
    }

    pub fn transformation(&self, name: &str) -> Result<NaturalTransformation, ServiceError> {
        Ok(self.catalog.load(name)?)
    }

    pub fn transformations(&self) -> Result<Vec<CatalogEntry>, ServiceError> {
        let mut out = Vec::new();
        for name in self.catalog.names()? {
            let t = self.catalog.load(&name)?;
            out.push(CatalogEntry {
                supported: t.supports(&self.config.backend),
                llm_calls: t.llm_calls(),
                passes: t.passes.len(),
                new_tuning: t.new_tuning.iter().map(|d| d.name.clone()).collect(),
                backend_only: t.backend_only.clone(),
                description: t.description.clone(),
                name,
            });
        }
        Ok(out)
    }

    fn log_attempts(&self, result: &TransformResult) -> Result<(), ServiceError> {
        let entry = serde_json::json!({
            "time": chrono::Utc::now().to_rfc3339(),
            "transformation": result.transformation,
            "parent": result.parent,
            "status": result.outcome.status,
            "attempts": result.outcome.attempts,
            "checkpoint": result.checkpoint.as_ref().map(|c| &c.id),
        });
        let mut f = OpenOptions::new().create(true).append(true).open(self.store.root().join("attempts.jsonl"))?;
        writeln!(f, "{entry}")?;
        Ok(())
    }

    /// Apply a transformation to `target` and commit the result if it validates.
    /// A failed application commits nothing and is returned, not raised.
    pub fn transform(&self, target: &str, name: &str) -> Result<TransformResult, ServiceError> {
        let writer = self.writer()?;
        let parent = self.resolve(target)?;
        let ctx = self.store.restore(&parent)?;
        let t = self.transformation(name)?;
        let refs = self.references()?;
        let options = ApplyOptions {
            validator_budget: self.config.validator_budget,
            max_retries: self.config.max_retries,
            validation_seed: self.config.seed,
            trial: 1,
        };
        let outcome = apply_transformation(&ctx, &t, self.client.as_ref(), &self.validator(), &refs, &options)?;
        let checkpoint = match &outcome.result_ctx {
            Some(next) => Some(writer.commit(
                next,
                &CommitRequest {
                    parent: Some(&parent),
                    transformation_name: Some(name),
                    validation: outcome.validation.as_ref(),
                    ..Default::default()
                },
            )?),
            None => None,
        };
        let result = TransformResult { transformation: name.to_owned(), parent, outcome, checkpoint };
        self.log_attempts(&result)?;
        Ok(result)
    }

    pub fn evaluate(&self, target: &str, request: &EvaluateRequest) -> Result<PerfReport, ServiceError> {
        let writer = self.writer()?;
        let id = self.resolve(target)?;
        let ctx = self.store.restore(&id)?;
        let key = match &request.input {
            Some(sel) => select_key(&input_keys(ctx.spec())?, sel)?,
            None => default_input_key(ctx.spec())?
                .ok_or_else(|| ServiceError::InvalidArgument("the specification declares no inputs".into()))?,
        };
        let strategy = request.strategy.clone().unwrap_or_else(|| self.config.default_strategy.clone());
        let query = PerfQuery::new(key, strategy)
            .with_policy(self.config.timing)
            .with_keep_top(request.keep_top.unwrap_or(self.config.keep_top))
            .with_digest(id.clone());
        let eval = PerfEvaluator::new(self.backend.as_ref(), &self.tuners);
        let report = eval.evaluate(&ctx, &query, self.config.flops_model.as_ref())?;
        writer.record_perf(&id, &report)?;
        Ok(report)
    }

    pub fn validate(&self, target: &str, budget: Option<usize>, seed: Option<u64>) -> Result<ValidationReport, ServiceError> {
        let writer = self.writer()?;
        let id = self.resolve(target)?;
        let ctx = self.store.restore(&id)?;
        let budget = budget.unwrap_or(self.config.validator_budget);
        if budget == 0 {
            return Err(ServiceError::InvalidArgument("budget must be positive".into()));
        }
        let report = self.validator().validate(&ctx, &self.references()?, budget, seed.unwrap_or(self.config.seed))?;
        writer.record_validation(&id, &report)?;
        Ok(report)
    }

    pub fn log(&self) -> Result<Vec<LogEntry>, ServiceError> {
        let all = self.store.checkpoints()?;
        let refs = self.store.refs()?;
        Ok(all
            .iter()
            .map(|c| LogEntry {
                checkpoint: c.clone(),
                children: all.iter().filter(|x| x.parent.as_ref() == Some(&c.id)).map(|x| x.id.clone()).collect(),
                refs: refs.iter().filter(|(_, id)| **id == c.id).map(|(n, _)| n.clone()).collect(),
            })
            .collect())
    }

    pub fn diff(&self, a: &str, b: &str) -> Result<CheckpointDiff, ServiceError> {
        Ok(self.store.diff(&self.resolve(a)?, &self.resolve(b)?)?)
    }

    /// Write the checkpoint's context bundle to `dir`.
    pub fn restore_to(&self, target: &str, dir: &Path) -> Result<KernelContext, ServiceError> {
        let ctx = self.store.restore(&self.resolve(target)?)?;
        ctx.write_bundle(dir)?;
        Ok(ctx)
    }

    pub fn tag(&self, name: &str, target: &str) -> Result<ContextDigest, ServiceError> {
        let id = self.resolve(target)?;
        self.writer()?.set_ref(name, &id)?;
        Ok(id)
    }

    pub fn trajectory(&self, target: &str, reference_ms: Option<f64>) -> Result<Trajectory, ServiceError> {
        if reference_ms.is_some_and(|r| !(r.is_finite() && r > 0.0)) {
            return Err(ServiceError::InvalidArgument("reference time must be positive".into()));
        }
        Ok(self.store.trajectory(&self.resolve(target)?, reference_ms)?)
    }

    /// Repeated independent applications without retries; nothing is committed.
    pub fn reliability(
        &self,
        target: &str,
        name: &str,
        trials: u32,
        schedules: &[Schedule],
    ) -> Result<ReliabilityReport, ServiceError> {
        self.writer()?;
        if trials == 0 {
            return Err(ServiceError::InvalidArgument("trials must be positive".into()));
        }
        let ctx = self.store.restore(&self.resolve(target)?)?;
        let t = self.transformation(name)?;
        let scheduled: Vec<(String, Schedule)> = schedules.iter().map(|s| (name.to_owned(), s.clone())).collect();
        let client = build_client(&self.config, self.store.root(), &scheduled)?;
        let report = measure_reliability(
            &ctx,
            &t,
            client.as_ref(),
            &self.validator(),
            &self.references()?,
            trials,
            self.config.validator_budget,
        )?;
        let dir = self.store.root().join("reliability");
        fs::create_dir_all(&dir)?;
        let file = format!("{name}-{}.json", chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ"));
        fs::write(dir.join(file), serde_json::to_vec_pretty(&report)?)?;
        Ok(report)
    }

    /// Apply `names` in order from `start`, evaluating each new checkpoint,
    /// and stop at the first failure.
    pub fn run_sequence(&self, start: &str, names: &[String], request: &EvaluateRequest) -> Result<SequenceResult, ServiceError> {
        self.writer()?;
        for n in names {
            self.transformation(n)?;
        }
        let start_id = self.resolve(start)?;
        if self.store.perf_report(&start_id)?.is_none() {
            self.evaluate(start_id.hex(), request)?;
        }
        let mut tip = start_id.clone();
        let mut steps = Vec::new();
        let mut completed = true;
        for name in names {
            let r = self.transform(tip.hex(), name)?;
            let Some(cp) = r.checkpoint else {
                steps.push(SequenceStep { transformation: name.clone(), status: r.outcome.status, checkpoint: None, best_time_ms: None });
                completed = false;
                break;
            };
            let report = self.evaluate(cp.id.hex(), request)?;
            steps.push(SequenceStep {
                transformation: name.clone(),
                status: r.outcome.status,
                checkpoint: Some(cp.id.clone()),
                best_time_ms: Some(report.best_time_ms()),
            });
            tip = cp.id;
        }
        let trajectory = Some(self.store.trajectory(&tip, None)?);
        Ok(SequenceResult { start: start_id, steps, completed, trajectory })
    }
}
