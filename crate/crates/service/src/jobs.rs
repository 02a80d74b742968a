//! Asynchronous jobs for long-running API operations.
//!
//! Mutating jobs run one at a time on a single worker thread. Every state
//! change is appended to `jobs.jsonl` in the workflow root; on start-up the
//! journal is replayed and jobs that never reached a terminal state are
//! marked failed. Checkpoint commits are atomic, so an interrupted job never
//! leaves a partial checkpoint behind.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::ServiceError;
use crate::session::{EvaluateRequest, Session};

pub const JOURNAL_FILE: &str = "jobs.jsonl";

/// Terminal jobs are kept at least this long, and a day if never fetched.
const KEEP_FETCHED: Duration = Duration::from_secs(3600);
const KEEP_UNFETCHED: Duration = Duration::from_secs(24 * 3600);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JobSpec {
    Transform { checkpoint: String, name: String },
    Evaluate { checkpoint: String, request: EvaluateRequest },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

impl From<&ServiceError> for ErrorBody {
    fn from(e: &ServiceError) -> Self {
        ErrorBody { code: e.code().to_owned(), message: e.to_string() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: u64,
    pub spec: JobSpec,
    pub state: JobState,
    pub submitted_at: DateTime<Utc>,
    pub started_at: Option<DateTime<Utc>>,
    pub finished_at: Option<DateTime<Utc>>,
    pub result: Option<Value>,
    pub error: Option<ErrorBody>,
    /// API path of the resource the job produced or updated.
    pub result_link: Option<String>,
    #[serde(default)]
    pub fetched: bool,
}

struct Inner {
    jobs: BTreeMap<u64, Job>,
    next_id: u64,
}

pub struct Jobs {
    inner: Mutex<Inner>,
    changed: Condvar,
    journal: Mutex<File>,
    queue: Mutex<Option<Sender<u64>>>,
}

type Outcome = Result<(Value, Option<String>), (ServiceError, Option<Value>)>;

fn execute(session: &Session, spec: &JobSpec) -> Outcome {
    let link = |id: &str| Some(format!("/api/checkpoints/{id}"));
    match spec {
        JobSpec::Transform { checkpoint, name } => {
            let r = session.transform(checkpoint, name).map_err(|e| (e, None))?;
            let value = serde_json::to_value(&r).unwrap_or(Value::Null);
            match &r.checkpoint {
                Some(cp) => Ok((value, link(cp.id.hex()))),
                None => Err((ServiceError::TransformFailed { name: name.clone(), status: r.outcome.status }, Some(value))),
            }
        }
        JobSpec::Evaluate { checkpoint, request } => {
            let r = session.evaluate(checkpoint, request).map_err(|e| (e, None))?;
            let id = r.ctx_digest.hex().to_owned();
            Ok((serde_json::to_value(&r).unwrap_or(Value::Null), link(&id)))
        }
    }
}

impl Jobs {
    /// Replay the journal under `root` and start the worker for `session`.
    pub fn start(session: Arc<Session>) -> Result<Arc<Jobs>, ServiceError> {
        let root = session.store().root().to_owned();
        let (jobs, next_id) = replay(&root.join(JOURNAL_FILE))?;
        let journal = OpenOptions::new().create(true).append(true).open(root.join(JOURNAL_FILE))?;
        let (tx, rx) = mpsc::channel::<u64>();
        let this = Arc::new(Jobs {
            inner: Mutex::new(Inner { jobs, next_id }),
            changed: Condvar::new(),
            journal: Mutex::new(journal),
            queue: Mutex::new(Some(tx)),
        });
        let interrupted: Vec<u64> = this.lock().jobs.values().filter(|j| !j.state.is_terminal()).map(|j| j.id).collect();
        for id in interrupted {
            this.update(id, |j| {
                j.state = JobState::Failed;
                j.finished_at = Some(Utc::now());
                j.error = Some(ErrorBody { code: "INTERRUPTED".into(), message: "the service stopped before the job finished".into() });
            })?;
        }

        let worker = Arc::downgrade(&this);
        thread::Builder::new().name("peak-worker".into()).spawn(move || {
            for id in rx {
                let Some(jobs) = worker.upgrade() else { break };
                let Some(spec) = jobs.lock().jobs.get(&id).map(|j| j.spec.clone()) else { continue };
                if jobs.update(id, |j| {
                    j.state = JobState::Running;
                    j.started_at = Some(Utc::now());
                })
                .is_err()
                {
                    continue;
                }
                let outcome = catch_unwind(AssertUnwindSafe(|| execute(&session, &spec))).unwrap_or_else(|p| {
                    let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
                    Err((ServiceError::InvalidArgument(format!("job panicked: {}", msg.unwrap_or_default())), None))
                });
                let finished = jobs.update(id, |j| {
                    j.finished_at = Some(Utc::now());
                    match outcome {
                        Ok((value, link)) => {
                            j.state = JobState::Done;
                            j.result = Some(value);
                            j.result_link = link;
                        }
                        Err((e, value)) => {
                            j.state = JobState::Failed;
                            j.error = Some((&e).into());
                            j.result = value;
                        }
                    }
                });
                if let Err(e) = finished {
                    tracing::error!("could not journal job {id}: {e}");
                }
            }
        })?;
        Ok(this)
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn append(&self, job: &Job) -> Result<(), ServiceError> {
        let mut f = self.journal.lock().unwrap_or_else(|e| e.into_inner());
        writeln!(f, "{}", serde_json::to_string(job)?)?;
        f.flush()?;
        Ok(())
    }

    fn update(&self, id: u64, f: impl FnOnce(&mut Job)) -> Result<(), ServiceError> {
        let snapshot = {
            let mut inner = self.lock();
            let job = inner.jobs.get_mut(&id).ok_or(ServiceError::UnknownJob(id))?;
            f(job);
            job.clone()
        };
        self.append(&snapshot)?;
        self.changed.notify_all();
        Ok(())
    }

    pub fn submit(&self, spec: JobSpec) -> Result<Job, ServiceError> {
        let job = {
            let mut inner = self.lock();
            let id = inner.next_id;
            inner.next_id += 1;
            let job = Job {
                id,
                spec,
                state: JobState::Queued,
                submitted_at: Utc::now(),
                started_at: None,
                finished_at: None,
                result: None,
                error: None,
                result_link: None,
                fetched: false,
            };
            inner.jobs.insert(id, job.clone());
            job
        };
        self.append(&job)?;
        let queue = self.queue.lock().unwrap_or_else(|e| e.into_inner());
        queue.as_ref().ok_or(ServiceError::WorkerGone)?.send(job.id).map_err(|_| ServiceError::WorkerGone)?;
        Ok(job)
    }

    /// Current state of a job; fetching a terminal job marks it as seen.
    pub fn get(&self, id: u64) -> Result<Job, ServiceError> {
        let mut inner = self.lock();
        prune(&mut inner.jobs);
        let job = inner.jobs.get_mut(&id).ok_or(ServiceError::UnknownJob(id))?;
        let snapshot = job.clone();
        if job.state.is_terminal() {
            job.fetched = true;
        }
        Ok(snapshot)
    }

    pub fn list(&self) -> Vec<Job> {
        let mut inner = self.lock();
        prune(&mut inner.jobs);
        inner.jobs.values().cloned().collect()
    }

    /// Block until the job is terminal or `timeout` passes.
    pub fn wait(&self, id: u64, timeout: Duration) -> Result<Job, ServiceError> {
        let deadline = std::time::Instant::now() + timeout;
        let mut inner = self.lock();
        loop {
            let job = inner.jobs.get(&id).ok_or(ServiceError::UnknownJob(id))?;
            let now = std::time::Instant::now();
            if job.state.is_terminal() || now >= deadline {
                return Ok(job.clone());
            }
            inner = self.changed.wait_timeout(inner, deadline - now).unwrap_or_else(|e| e.into_inner()).0;
        }
    }

    /// Stop accepting jobs; the worker exits after the queued ones.
    pub fn shutdown(&self) {
        self.queue.lock().unwrap_or_else(|e| e.into_inner()).take();
    }
}

fn prune(jobs: &mut BTreeMap<u64, Job>) {
    let now = Utc::now();
    jobs.retain(|_, j| {
        let Some(done) = j.finished_at.filter(|_| j.state.is_terminal()) else { return true };
        let age = (now - done).to_std().unwrap_or_default();
        !(age > KEEP_UNFETCHED || (j.fetched && age > KEEP_FETCHED))
    });
}

/// Latest snapshot of every journaled job and the next free id.
fn replay(path: &Path) -> Result<(BTreeMap<u64, Job>, u64), ServiceError> {
    let mut jobs = BTreeMap::new();
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((jobs, 1)),
        Err(e) => return Err(e.into()),
    };
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        // A torn final line from a crash is skipped.
        match serde_json::from_str::<Job>(&line) {
            Ok(job) => {
                jobs.insert(job.id, job);
            }
            Err(e) => tracing::warn!("skipping unreadable journal line: {e}"),
        }
    }
    let next = jobs.keys().max().map_or(1, |m| m + 1);
    prune(&mut jobs);
    Ok((jobs, next))
}
