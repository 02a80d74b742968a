//! Tuner plugins: search strategies driven through a measurement callable.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::Arc;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::PerfError;

/// One tuning parameter and its declared values, ascending.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TuningDomain {
    pub name: String,
    pub values: Vec<i64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TuneJob {
    pub params: Vec<TuningDomain>,
    /// Maximum number of executed measurements.
    pub budget: usize,
    pub seed: u64,
}

impl TuneJob {
    /// Size of the raw declaration product (constraints ignored).
    pub fn raw_size(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).product()
    }

    /// The `i`-th point of the raw product; the last parameter varies fastest.
    pub fn raw_point(&self, mut i: usize) -> IndexMap<String, i64> {
        let mut values = vec![0; self.params.len()];
        for (slot, p) in values.iter_mut().zip(&self.params).rev() {
            *slot = p.values[i % p.values.len()];
            i /= p.values.len();
        }
        self.params.iter().map(|p| p.name.clone()).zip(values).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Measurement {
    TimeMs(f64),
    /// Not runnable: outside the domain, violating a constraint, or rejected
    /// by the backend.
    Invalid,
    /// The iteration budget is used up; nothing was executed.
    BudgetExhausted,
}

pub type MeasureFn<'a> = dyn FnMut(&IndexMap<String, i64>) -> Measurement + 'a;

pub trait TunerPlugin: Send + Sync {
    fn id(&self) -> &str;

    /// Search the space and return the best point found, or `None` when no
    /// measured point was valid.
    fn tune(&self, job: &TuneJob, measure: &mut MeasureFn<'_>) -> Result<Option<IndexMap<String, i64>>, String>;
}

#[derive(Clone)]
pub struct TunerRegistry {
    plugins: Vec<Arc<dyn TunerPlugin>>,
}

impl Default for TunerRegistry {
    fn default() -> Self {
        let mut r = TunerRegistry::empty();
        r.plugins.push(Arc::new(ExhaustiveTuner));
        r.plugins.push(Arc::new(RandomSearchTuner));
        r
    }
}

impl TunerRegistry {
    /// Registry with the built-in `exhaustive` and `random-search` tuners.
    pub fn new() -> Self {
        Self::default()
    }

    pub fn empty() -> Self {
        TunerRegistry { plugins: Vec::new() }
    }

    pub fn register(&mut self, plugin: Arc<dyn TunerPlugin>) -> Result<(), PerfError> {
        if self.get(plugin.id()).is_some() {
            return Err(PerfError::DuplicatePlugin(plugin.id().to_owned()));
        }
        self.plugins.push(plugin);
        Ok(())
    }

    pub fn load_manifest(&mut self, path: &Path) -> Result<(), PerfError> {
        self.register(Arc::new(ExternalTuner::from_manifest(path)?))
    }

    pub fn get(&self, id: &str) -> Option<Arc<dyn TunerPlugin>> {
        self.plugins.iter().find(|p| p.id() == id).cloned()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.plugins.iter().map(|p| p.id()).collect()
    }
}

fn keep_best(best: &mut Option<(IndexMap<String, i64>, f64)>, point: IndexMap<String, i64>, t: f64) {
    if best.as_ref().is_none_or(|(_, b)| t < *b) {
        *best = Some((point, t));
    }
}

/// Walks the raw product in order until the budget runs out.
pub struct ExhaustiveTuner;

impl TunerPlugin for ExhaustiveTuner {
    fn id(&self) -> &str {
        "exhaustive"
    }

    fn tune(&self, job: &TuneJob, measure: &mut MeasureFn<'_>) -> Result<Option<IndexMap<String, i64>>, String> {
        let mut best = None;
        for i in 0..job.raw_size() {
            let p = job.raw_point(i);
            match measure(&p) {
                Measurement::TimeMs(t) => keep_best(&mut best, p, t),
                Measurement::Invalid => {}
                Measurement::BudgetExhausted => break,
            }
        }
        Ok(best.map(|(p, _)| p))
    }
}

/// Visits the raw product in a seeded random order without repetition.
/// Points the callable rejects up front do not use budget, so a budget at
/// least as large as the valid space covers all of it.
pub struct RandomSearchTuner;

impl TunerPlugin for RandomSearchTuner {
    fn id(&self) -> &str {
        "random-search"
    }

    fn tune(&self, job: &TuneJob, measure: &mut MeasureFn<'_>) -> Result<Option<IndexMap<String, i64>>, String> {
        let mut order: Vec<usize> = (0..job.raw_size()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(job.seed));
        let mut best = None;
        for i in order {
            let p = job.raw_point(i);
            match measure(&p) {
                Measurement::TimeMs(t) => keep_best(&mut best, p, t),
                Measurement::Invalid => {}
                Measurement::BudgetExhausted => break,
            }
        }
        Ok(best.map(|(p, _)| p))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExternalTunerManifest {
    pub id: String,
    /// Program and arguments, whitespace separated.
    pub command: String,
}

/// A tuner in another process, speaking line-delimited JSON over stdio.
///
/// The first line written to the tuner is `{"job": TuneJob}`. The tuner then
/// sends `{"measure": {name: value, ..}}` and receives one of
/// `{"time_ms": t}`, `{"invalid": true}` or `{"exhausted": true}`. It ends
/// with `{"best": {..}}`, `{"best": null}` or `{"error": "..."}`.
pub struct ExternalTuner {
    manifest: ExternalTunerManifest,
}

impl ExternalTuner {
    pub fn new(manifest: ExternalTunerManifest) -> Result<Self, PerfError> {
        if manifest.id.is_empty() || manifest.command.trim().is_empty() {
            return Err(PerfError::PluginManifest("id and command are required".into()));
        }
        Ok(ExternalTuner { manifest })
    }

    pub fn from_manifest(path: &Path) -> Result<Self, PerfError> {
        let m: ExternalTunerManifest = serde_json::from_slice(&fs::read(path)?)?;
        Self::new(m)
    }
}

impl TunerPlugin for ExternalTuner {
    fn id(&self) -> &str {
        &self.manifest.id
    }

    fn tune(&self, job: &TuneJob, measure: &mut MeasureFn<'_>) -> Result<Option<IndexMap<String, i64>>, String> {
        let argv: Vec<&str> = self.manifest.command.split_whitespace().collect();
        let mut child = Command::new(argv[0])
            .args(&argv[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| format!("cannot start `{}`: {e}", argv[0]))?;
        let mut stdin = child.stdin.take().ok_or("no stdin")?;
        let stdout = BufReader::new(child.stdout.take().ok_or("no stdout")?);
        let io = |e: std::io::Error| e.to_string();

        writeln!(stdin, "{}", json!({ "job": job })).map_err(io)?;
        stdin.flush().map_err(io)?;
        let mut outcome = Err("tuner exited without a result".to_owned());
        for line in stdout.lines() {
            let line = line.map_err(io)?;
            if line.trim().is_empty() {
                continue;
            }
            let msg: Value = serde_json::from_str(&line).map_err(|e| format!("bad message `{line}`: {e}"))?;
            if let Some(req) = msg.get("measure") {
                let point: IndexMap<String, i64> =
                    serde_json::from_value(req.clone()).map_err(|e| format!("bad measure request: {e}"))?;
                let reply = match measure(&point) {
                    Measurement::TimeMs(t) => json!({ "time_ms": t }),
                    Measurement::Invalid => json!({ "invalid": true }),
                    Measurement::BudgetExhausted => json!({ "exhausted": true }),
                };
                writeln!(stdin, "{reply}").map_err(io)?;
                stdin.flush().map_err(io)?;
            } else if let Some(best) = msg.get("best") {
                outcome = serde_json::from_value(best.clone()).map_err(|e| format!("bad best point: {e}"));
                break;
            } else if let Some(err) = msg.get("error") {
                outcome = Err(err.as_str().unwrap_or("tuner error").to_owned());
                break;
            } else {
                outcome = Err(format!("unknown message `{line}`"));
                break;
            }
        }
        drop(stdin);
        let _ = child.wait();
        outcome
    }
}
