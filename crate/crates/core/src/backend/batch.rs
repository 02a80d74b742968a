//! Parallel compile, exclusive device leases and ordered batch results.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex, OnceLock};

use super::{Backend, BackendError, RunResult, RunStatus, TimingPolicy};
use crate::context::KernelContext;
use crate::spec::ExecutionParams;

#[derive(Clone, Debug)]
pub struct BatchJob {
    pub ctx: KernelContext,
    pub params: ExecutionParams,
    pub policy: TimingPolicy,
    pub capture: bool,
}

struct Slots {
    capacity: usize,
    state: Mutex<(usize, usize)>,
    freed: Condvar,
}

fn slots_for(id: &str, capacity: usize) -> Arc<Slots> {
    static ALL: OnceLock<Mutex<HashMap<String, Arc<Slots>>>> = OnceLock::new();
    let mut all = ALL.get_or_init(Default::default).lock().unwrap();
    all.entry(id.to_owned())
        .or_insert_with(|| Arc::new(Slots { capacity: capacity.max(1), state: Mutex::new((0, 0)), freed: Condvar::new() }))
        .clone()
}

/// An exclusive hold on one of a backend's device slots, process-wide.
pub struct DeviceLease {
    slots: Arc<Slots>,
}

impl DeviceLease {
    pub fn acquire(backend_id: &str, device_slots: usize) -> DeviceLease {
        let slots = slots_for(backend_id, device_slots);
        {
            let mut st = slots.state.lock().unwrap();
            while st.0 >= slots.capacity {
                st = slots.freed.wait(st).unwrap();
            }
            st.0 += 1;
            st.1 = st.1.max(st.0);
        }
        DeviceLease { slots }
    }
}

impl Drop for DeviceLease {
    fn drop(&mut self) {
        let mut st = self.slots.state.lock().unwrap();
        st.0 -= 1;
        self.slots.freed.notify_one();
    }
}

/// Largest number of simultaneously held leases seen for `backend_id`.
pub fn lease_high_water(backend_id: &str) -> usize {
    slots_for(backend_id, 1).state.lock().unwrap().1
}

pub fn reset_lease_stats(backend_id: &str) {
    let s = slots_for(backend_id, 1);
    let mut st = s.state.lock().unwrap();
    st.1 = st.0;
}

/// Reject results whose captured buffers do not match the declared outputs.
pub(super) fn check_outputs(
    ctx: &KernelContext,
    params: &ExecutionParams,
    result: RunResult,
) -> Result<RunResult, BackendError> {
    if let Some(outs) = &result.outputs {
        for a in ctx.spec().outputs() {
            let want = params.array_sizes[&a.name] as usize * a.elem_dtype.byte_width();
            match outs.get(&a.name) {
                Some(buf) if buf.len() == want => {}
                Some(buf) => {
                    return Err(BackendError::ProtocolViolation(format!(
                        "output `{}` has {} bytes, expected {want}",
                        a.name,
                        buf.len()
                    )))
                }
                None => return Err(BackendError::ProtocolViolation(format!("output `{}` was not written", a.name))),
            }
        }
    }
    Ok(result)
}

fn run_job(backend: &dyn Backend, job: &BatchJob) -> (RunResult, Option<PathBuf>) {
    let desc = backend.descriptor();
    let program = match backend.generate_driver(&job.ctx, &job.params, &job.policy, job.capture) {
        Ok(p) => p,
        Err(e) => return (RunResult::failed(RunStatus::CompileError, e.to_string()), None),
    };
    let exe = match backend.compile(&program) {
        Ok(p) => p,
        Err(BackendError::CompileFailure { stderr }) => return (RunResult::failed(RunStatus::CompileError, stderr), None),
        Err(e) => return (RunResult::failed(RunStatus::CompileError, e.to_string()), None),
    };
    let result = {
        let _lease = DeviceLease::acquire(&desc.id, desc.device_slots);
        backend.run(&exe, desc.timeout(), job.capture)
    };
    let result = match result.and_then(|r| check_outputs(&job.ctx, &job.params, r)) {
        Ok(r) => r,
        Err(e) => RunResult::failed(RunStatus::RuntimeError, e.to_string()),
    };
    (result, Some(exe))
}

/// Compile up to `parallel_compile` jobs at once and run them under the
/// backend's device leases. Results are returned in job order; a failing job
/// only affects its own entry.
pub fn execute_batch(backend: &dyn Backend, jobs: &[BatchJob], parallel_compile: usize) -> Vec<RunResult> {
    execute_batch_with_artifacts(backend, jobs, parallel_compile).into_iter().map(|(r, _)| r).collect()
}

/// Like [`execute_batch`], also returning each job's executable when it compiled.
pub fn execute_batch_with_artifacts(
    backend: &dyn Backend,
    jobs: &[BatchJob],
    parallel_compile: usize,
) -> Vec<(RunResult, Option<PathBuf>)> {
    let workers = parallel_compile.max(1).min(jobs.len().max(1));
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<(RunResult, Option<PathBuf>)>>> = Mutex::new(vec![None; jobs.len()]);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let r = run_job(backend, &jobs[i]);
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    results.into_inner().unwrap().into_iter().map(|r| r.expect("every job produces a result")).collect()
}
