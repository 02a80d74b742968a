//! Performance evaluation: search the tuning space of a kernel context for the
//! fastest configuration, keep the top-K survivors and derive throughput.

pub mod tuner;

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};

use indexmap::IndexMap;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{execute_batch, Backend, BatchJob, RunStatus, TimingPolicy};
use crate::context::{ContextDigest, KernelContext};
use crate::spec::{enumerate_execution_params, enumerate_input_keys, parse_expr, Bindings, ExecutionParams, Expr, InputKey, InputSpec, SpecError};

pub use tuner::{
    ExhaustiveTuner, ExternalTuner, ExternalTunerManifest, MeasureFn, Measurement, RandomSearchTuner, TuneJob, TunerPlugin,
    TunerRegistry, TuningDomain,
};

#[derive(Debug, Error)]
pub enum PerfError {
    #[error("no valid configuration: {0}")]
    NoValidConfiguration(String),
    #[error("reports are not comparable: {0}")]
    IncomparableReports(String),
    #[error("tuner plugin `{0}` is already registered")]
    DuplicatePlugin(String),
    #[error("unknown tuner plugin `{0}`")]
    UnknownPlugin(String),
    #[error("tuner plugin failed: {0}")]
    PluginFailure(String),
    #[error("invalid tuner manifest: {0}")]
    PluginManifest(String),
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("context digest {actual} does not match the query ({expected})")]
    DigestMismatch { expected: String, actual: String },
    #[error("invalid flops model: {0}")]
    FlopsModel(String),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    Exhaustive,
    Random { budget: usize, seed: u64 },
    Tuner { plugin: String, iteration_budget: usize, repeats: usize, seed: u64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerfQuery {
    /// When set, the evaluated context must have this digest.
    pub ctx_digest: Option<ContextDigest>,
    /// Scalar values and array sizes; the search varies tuning values only.
    pub input_key: InputKey,
    pub strategy: Strategy,
    pub policy: TimingPolicy,
    pub keep_top: usize,
    /// Extra runs of the winner after the search; 0 disables.
    pub confirm_best: u32,
    #[serde(skip, default = "one")]
    pub parallel_compile: usize,
}

fn one() -> usize {
    1
}

impl PerfQuery {
    pub fn new(input_key: InputKey, strategy: Strategy) -> Self {
        PerfQuery {
            ctx_digest: None,
            input_key,
            strategy,
            policy: TimingPolicy::default(),
            keep_top: 128,
            confirm_best: 0,
            parallel_compile: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }

    pub fn exhaustive(input_key: InputKey) -> Self {
        Self::new(input_key, Strategy::Exhaustive)
    }

    pub fn with_policy(mut self, policy: TimingPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_keep_top(mut self, keep_top: usize) -> Self {
        self.keep_top = keep_top;
        self
    }

    pub fn with_confirm_best(mut self, runs: u32) -> Self {
        self.confirm_best = runs;
        self
    }

    pub fn with_digest(mut self, digest: ContextDigest) -> Self {
        self.ctx_digest = Some(digest);
        self
    }

    fn check(&self) -> Result<(), PerfError> {
        let bad = |m: &str| Err(PerfError::InvalidQuery(m.to_owned()));
        if self.keep_top == 0 {
            return bad("keep_top must be at least 1");
        }
        match &self.strategy {
            Strategy::Random { budget: 0, .. } => bad("random budget must be at least 1"),
            Strategy::Tuner { iteration_budget: 0, .. } => bad("iteration budget must be at least 1"),
            Strategy::Tuner { repeats: 0, .. } => bad("repeats must be at least 1"),
            _ => Ok(()),
        }
    }
}

/// Distinct input keys of a spec in enumeration order.
pub fn input_keys(spec: &InputSpec) -> Result<Vec<InputKey>, SpecError> {
    Ok(enumerate_input_keys(spec)?.iter().map(|p| p.input_key()).collect())
}

/// The last (largest) input key, used when none is given.
pub fn default_input_key(spec: &InputSpec) -> Result<Option<InputKey>, SpecError> {
    Ok(input_keys(spec)?.pop())
}

/// Floating-point operations per kernel run, as an integer expression over
/// scalar names and `array.size`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FlopsModel {
    pub expression: String,
}

impl FlopsModel {
    pub fn new(expression: &str) -> Result<Self, PerfError> {
        parse_expr(expression).map_err(|e| PerfError::FlopsModel(e.to_string()))?;
        Ok(FlopsModel { expression: expression.to_owned() })
    }

    /// `2*n*n*n` for square matrix multiply.
    pub fn square_matmul() -> Self {
        FlopsModel { expression: "2*n*n*n".into() }
    }

    pub fn per_run(&self, key: &InputKey) -> Result<u64, PerfError> {
        let expr: Expr = parse_expr(&self.expression).map_err(|e| PerfError::FlopsModel(e.to_string()))?;
        let mut env = Bindings::new();
        for (k, v) in &key.scalars {
            if let Some(i) = v.as_int() {
                env.set(k, i);
            }
        }
        for (k, v) in &key.array_sizes {
            env.set_size(k, *v as i64);
        }
        let v = expr.eval_int(&env).map_err(|e| PerfError::FlopsModel(format!("{}: {e}", self.expression)))?;
        if v <= 0 {
            return Err(PerfError::FlopsModel(format!("`{}` is {v} at {key}", self.expression)));
        }
        Ok(v as u64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedPoint {
    pub tuning: IndexMap<String, i64>,
    pub mean_time_ms: f64,
}

/// Every attempted point, in enumeration order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointRecord {
    pub tuning: IndexMap<String, i64>,
    pub status: RunStatus,
    pub mean_time_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub min_ms: f64,
    pub mean_ms: f64,
    pub max_ms: f64,
    pub repeats: usize,
    pub failed_repeats: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<String>,
}

impl Distribution {
    fn from_bests(bests: &[f64], failures: Vec<String>) -> Option<Self> {
        if bests.is_empty() {
            return None;
        }
        Some(Distribution {
            min_ms: bests.iter().copied().fold(f64::INFINITY, f64::min),
            mean_ms: bests.iter().sum::<f64>() / bests.len() as f64,
            max_ms: bests.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            repeats: bests.len(),
            failed_repeats: failures.len(),
            failures,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Confirmation {
    pub runs: u32,
    pub mean_time_ms: f64,
    pub run_means_ms: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerfReport {
    pub ctx_digest: ContextDigest,
    pub backend: String,
    pub input_key: InputKey,
    pub strategy: Strategy,
    pub policy: TimingPolicy,
    pub keep_top: usize,
    /// Points actually run.
    pub attempted: usize,
    /// Points that produced a time.
    pub evaluated: usize,
    /// Points that could not run (invalid configuration or any other failure).
    pub pruned_invalid: usize,
    pub best: RankedPoint,
    pub top_k: Vec<RankedPoint>,
    pub flops_model: Option<FlopsModel>,
    pub flops_per_run: Option<u64>,
    pub best_gflops: Option<f64>,
    pub distribution: Option<Distribution>,
    pub confirmed: Option<Confirmation>,
    pub points: Vec<PointRecord>,
}

impl PerfReport {
    pub fn best_time_ms(&self) -> f64 {
        self.best.mean_time_ms
    }

    /// Per-point CSV: one column per tuning parameter, then `mean_ms`.
    /// Only points that produced a time are listed.
    pub fn to_csv(&self) -> Result<String, PerfError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let names: Vec<&str> = self.best.tuning.keys().map(String::as_str).collect();
        let mut header = names.clone();
        header.push("mean_ms");
        w.write_record(&header)?;
        for p in &self.points {
            if let Some(t) = p.mean_time_ms {
                let mut row: Vec<String> = names.iter().map(|n| p.tuning[*n].to_string()).collect();
                row.push(format!("{t}"));
                w.write_record(&row)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| PerfError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Full ranking of measured points: ascending time, ties in enumeration order.
    pub fn ranking(&self) -> Vec<RankedPoint> {
        rank(&self.points)
    }
}

fn rank(points: &[PointRecord]) -> Vec<RankedPoint> {
    let mut ranked: Vec<RankedPoint> = points
        .iter()
        .filter_map(|p| p.mean_time_ms.map(|t| RankedPoint { tuning: p.tuning.clone(), mean_time_ms: t }))
        .collect();
    // Stable sort keeps enumeration order among equal times.
    ranked.sort_by(|a, b| a.mean_time_ms.total_cmp(&b.mean_time_ms));
    ranked
}

/// How many times faster `a` is than `b`: `b.best / a.best`.
pub fn speedup(a: &PerfReport, b: &PerfReport) -> Result<f64, PerfError> {
    if a.input_key != b.input_key {
        return Err(PerfError::IncomparableReports(format!("input keys differ: {} vs {}", a.input_key, b.input_key)));
    }
    if a.flops_model != b.flops_model {
        return Err(PerfError::IncomparableReports("flops models differ".into()));
    }
    Ok(b.best.mean_time_ms / a.best.mean_time_ms)
}

/// Best time as a percentage of a user-supplied reference time (e.g. a vendor
/// library); above 100 means faster than the reference.
pub fn percent_of(report: &PerfReport, reference_time_ms: f64) -> f64 {
    reference_time_ms / report.best.mean_time_ms * 100.0
}

/// The execution points of one input key plus measurement bookkeeping.
struct Space<'a> {
    backend: &'a dyn Backend,
    ctx: &'a KernelContext,
    policy: TimingPolicy,
    parallel: usize,
    points: Vec<ExecutionParams>,
    domains: Vec<TuningDomain>,
    cache: HashMap<usize, (RunStatus, Option<f64>)>,
}

impl<'a> Space<'a> {
    fn new(backend: &'a dyn Backend, ctx: &'a KernelContext, key: &InputKey, policy: TimingPolicy, parallel: usize) -> Result<Self, PerfError> {
        let points: Vec<ExecutionParams> =
            enumerate_execution_params(ctx.spec())?.into_iter().filter(|p| &p.input_key() == key).collect();
        if points.is_empty() {
            return Err(PerfError::NoValidConfiguration(format!("no execution point satisfies the constraints at {key}")));
        }
        let domains = ctx
            .spec()
            .tuning
            .iter()
            .map(|t| Ok(TuningDomain { name: t.name.clone(), values: t.evaluate()? }))
            .collect::<Result<_, SpecError>>()?;
        Ok(Space { backend, ctx, policy, parallel, points, domains, cache: HashMap::new() })
    }

    /// Enumeration index of a proposed point, or `None` when it is outside the
    /// declared domain or violates a constraint.
    fn locate(&self, tuning: &IndexMap<String, i64>) -> Option<usize> {
        if tuning.len() != self.domains.len() {
            return None;
        }
        for d in &self.domains {
            if !d.values.contains(tuning.get(&d.name)?) {
                return None;
            }
        }
        self.points.iter().position(|p| self.domains.iter().all(|d| p.tuning_values[&d.name] == tuning[&d.name]))
    }

    fn measure(&mut self, indices: &[usize]) {
        let todo: Vec<usize> = indices.iter().copied().filter(|i| !self.cache.contains_key(i)).collect();
        if todo.is_empty() {
            return;
        }
        let jobs: Vec<BatchJob> = todo
            .iter()
            .map(|&i| BatchJob { ctx: self.ctx.clone(), params: self.points[i].clone(), policy: self.policy, capture: false })
            .collect();
        for (i, r) in todo.into_iter().zip(execute_batch(self.backend, &jobs, self.parallel)) {
            let t = if r.is_ok() { r.mean_time_ms } else { None };
            self.cache.insert(i, (r.status, t));
        }
    }

    fn time(&self, i: usize) -> Option<f64> {
        self.cache.get(&i).and_then(|(_, t)| *t)
    }

    fn records(&self) -> Vec<PointRecord> {
        let mut idx: Vec<usize> = self.cache.keys().copied().collect();
        idx.sort_unstable();
        idx.into_iter()
            .map(|i| {
                let (status, t) = self.cache[&i];
                PointRecord { tuning: self.points[i].tuning_values.clone(), status, mean_time_ms: t }
            })
            .collect()
    }

    /// One tuner run; returns the best time it found.
    fn run_tuner(&mut self, plugin: &dyn TunerPlugin, budget: usize, seed: u64) -> Result<f64, String> {
        let job = TuneJob { params: self.domains.clone(), budget, seed };
        let mut requested: Vec<usize> = Vec::new();
        let result = {
            let mut measure = |tuning: &IndexMap<String, i64>| -> Measurement {
                let Some(i) = self.locate(tuning) else { return Measurement::Invalid };
                if !requested.contains(&i) {
                    if requested.len() >= budget {
                        return Measurement::BudgetExhausted;
                    }
                    requested.push(i);
                }
                self.measure(&[i]);
                self.time(i).map_or(Measurement::Invalid, Measurement::TimeMs)
            };
            catch_unwind(AssertUnwindSafe(|| plugin.tune(&job, &mut measure)))
        };
        let best = match result {
            Ok(Ok(Some(best))) => best,
            Ok(Ok(None)) => return Err("no valid point found".into()),
            Ok(Err(e)) => return Err(e),
            Err(_) => return Err("tuner panicked".into()),
        };
        let i = self.locate(&best).ok_or_else(|| format!("returned point {best:?} is outside the space"))?;
        if !requested.contains(&i) {
            return Err(format!("returned point {best:?} was never measured"));
        }
        self.time(i).ok_or_else(|| format!("returned point {best:?} is invalid"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub budget: usize,
    pub min_ms: f64,
    pub mean_ms: f64,
    pub max_ms: f64,
    pub repeats: usize,
    pub failed_repeats: usize,
}

pub struct PerfEvaluator<'a> {
    pub backend: &'a dyn Backend,
    pub tuners: &'a TunerRegistry,
}

impl<'a> PerfEvaluator<'a> {
    pub fn new(backend: &'a dyn Backend, tuners: &'a TunerRegistry) -> Self {
        PerfEvaluator { backend, tuners }
    }

    pub fn evaluate(&self, ctx: &KernelContext, query: &PerfQuery, flops: Option<&FlopsModel>) -> Result<PerfReport, PerfError> {
        query.check()?;
        let digest = ctx.digest();
        if let Some(expected) = &query.ctx_digest {
            if expected != &digest {
                return Err(PerfError::DigestMismatch { expected: expected.to_string(), actual: digest.to_string() });
            }
        }
        let flops_per_run = flops.map(|f| f.per_run(&query.input_key)).transpose()?;
        let mut space = Space::new(self.backend, ctx, &query.input_key, query.policy, query.parallel_compile)?;

        let mut distribution = None;
        match &query.strategy {
            Strategy::Exhaustive => {
                let all: Vec<usize> = (0..space.points.len()).collect();
                space.measure(&all);
            }
            Strategy::Random { budget, seed } => {
                let n = space.points.len();
                let mut pick = index::sample(&mut ChaCha8Rng::seed_from_u64(*seed), n, (*budget).min(n)).into_vec();
                pick.sort_unstable();
                space.measure(&pick);
            }
            Strategy::Tuner { plugin, iteration_budget, repeats, seed } => {
                let p = self.tuners.get(plugin).ok_or_else(|| PerfError::UnknownPlugin(plugin.clone()))?;
                let (bests, failures) = tuner_repeats(&mut space, p.as_ref(), *iteration_budget, *repeats, *seed);
                if bests.is_empty() && space.cache.values().any(|(_, t)| t.is_some()) {
                    return Err(PerfError::PluginFailure(failures.join("; ")));
                }
                distribution = Distribution::from_bests(&bests, failures);
            }
        }

        let points = space.records();
        let ranked = rank(&points);
        let Some(best) = ranked.first().cloned() else {
            let mut counts: IndexMap<&str, usize> = IndexMap::new();
            for p in &points {
                *counts.entry(p.status.as_str()).or_default() += 1;
            }
            let summary: Vec<String> = counts.iter().map(|(s, c)| format!("{c} {s}")).collect();
            return Err(PerfError::NoValidConfiguration(format!(
                "all {} attempted points failed ({}) at {}",
                points.len(),
                summary.join(", "),
                query.input_key
            )));
        };

        let confirmed = if query.confirm_best > 0 {
            let i = space.locate(&best.tuning).expect("best point is in the space");
            let jobs: Vec<BatchJob> = (0..query.confirm_best)
                .map(|_| BatchJob { ctx: ctx.clone(), params: space.points[i].clone(), policy: query.policy, capture: false })
                .collect();
            let means: Vec<f64> = execute_batch(self.backend, &jobs, 1).into_iter().filter_map(|r| r.mean_time_ms).collect();
            (!means.is_empty()).then(|| Confirmation {
                runs: query.confirm_best,
                mean_time_ms: means.iter().sum::<f64>() / means.len() as f64,
                run_means_ms: means,
            })
        } else {
            None
        };

        let evaluated = ranked.len();
        Ok(PerfReport {
            ctx_digest: digest,
            backend: ctx.backend().to_owned(),
            input_key: query.input_key.clone(),
            strategy: query.strategy.clone(),
            policy: query.policy,
            keep_top: query.keep_top,
            attempted: points.len(),
            evaluated,
            pruned_invalid: points.len() - evaluated,
            best_gflops: flops_per_run.map(|f| f as f64 / (best.mean_time_ms / 1e3) / 1e9),
            best,
            top_k: ranked.into_iter().take(query.keep_top).collect(),
            flops_model: flops.cloned(),
            flops_per_run,
            distribution,
            confirmed,
            points,
        })
    }

    /// Run a tuner `repeats` times per budget (seeds `seed`, `seed + 1`, ..)
    /// and aggregate the best times found. Measurements are shared across the
    /// whole sweep, so a point is only run once.
    pub fn tuner_sweep(
        &self,
        ctx: &KernelContext,
        input_key: &InputKey,
        plugin: &str,
        budgets: &[usize],
        repeats: usize,
        policy: TimingPolicy,
        seed: u64,
    ) -> Result<Vec<SweepRow>, PerfError> {
        if repeats == 0 || budgets.contains(&0) {
            return Err(PerfError::InvalidQuery("budgets and repeats must be positive".into()));
        }
        let p = self.tuners.get(plugin).ok_or_else(|| PerfError::UnknownPlugin(plugin.to_owned()))?;
        let parallel = std::thread::available_parallelism().map_or(1, |n| n.get());
        let mut space = Space::new(self.backend, ctx, input_key, policy, parallel)?;
        let mut rows = Vec::new();
        for &budget in budgets {
            let (bests, failures) = tuner_repeats(&mut space, p.as_ref(), budget, repeats, seed);
            let failed = failures.len();
            let Some(d) = Distribution::from_bests(&bests, failures) else {
                return Err(PerfError::PluginFailure(format!("every repeat failed at budget {budget}")));
            };
            rows.push(SweepRow { budget, min_ms: d.min_ms, mean_ms: d.mean_ms, max_ms: d.max_ms, repeats: d.repeats, failed_repeats: failed });
        }
        Ok(rows)
    }
}

fn tuner_repeats(space: &mut Space<'_>, plugin: &dyn TunerPlugin, budget: usize, repeats: usize, seed: u64) -> (Vec<f64>, Vec<String>) {
    let mut bests = Vec::new();
    let mut failures = Vec::new();
    for r in 0..repeats {
        match space.run_tuner(plugin, budget, seed.wrapping_add(r as u64)) {
            Ok(t) => bests.push(t),
            Err(e) => {
                tracing::warn!(plugin = plugin.id(), repeat = r, "tuner repeat failed: {e}");
                failures.push(format!("repeat {r}: {e}"));
            }
        }
    }
    (bests, failures)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::ScalarValue;

    fn key(n: i64) -> InputKey {
        InputKey { scalars: [("n".to_owned(), ScalarValue::I32(n as i32))].into_iter().collect(), array_sizes: IndexMap::new() }
    }

    fn report(n: i64, best: f64) -> PerfReport {
        let best = RankedPoint { tuning: IndexMap::new(), mean_time_ms: best };
        PerfReport {
            ctx_digest: ContextDigest::from_hex("00"),
            backend: "cpu-ref".into(),
            input_key: key(n),
            strategy: Strategy::Exhaustive,
            policy: TimingPolicy::default(),
            keep_top: 1,
            attempted: 1,
            evaluated: 1,
            pruned_invalid: 0,
            top_k: vec![best.clone()],
            best,
            flops_model: None,
            flops_per_run: None,
            best_gflops: None,
            distribution: None,
            confirmed: None,
            points: Vec::new(),
        }
    }

    #[test]
    fn speedup_examples() {
        let a = report(64, 2.0);
        assert_eq!(speedup(&a, &a).unwrap(), 1.0);
        assert_eq!(speedup(&a, &report(64, 10.0)).unwrap(), 5.0);
        assert!(matches!(speedup(&a, &report(32, 10.0)), Err(PerfError::IncomparableReports(_))));
        let mut f = report(64, 10.0);
        f.flops_model = Some(FlopsModel::square_matmul());
        assert!(matches!(speedup(&a, &f), Err(PerfError::IncomparableReports(_))));
    }

    #[test]
    fn percent_of_reference() {
        assert_eq!(percent_of(&report(8, 2.0), 2.2), 110.00000000000001);
        assert_eq!(percent_of(&report(8, 4.0), 2.0), 50.0);
    }

    #[test]
    fn flops_model_evaluates_on_key() {
        assert_eq!(FlopsModel::square_matmul().per_run(&key(64)).unwrap(), 2 * 64 * 64 * 64);
        assert!(FlopsModel::new("2*n*").is_err());
        assert!(matches!(FlopsModel::new("n - n").unwrap().per_run(&key(4)), Err(PerfError::FlopsModel(_))));
        assert!(matches!(FlopsModel::new("m").unwrap().per_run(&key(4)), Err(PerfError::FlopsModel(_))));
    }
}
