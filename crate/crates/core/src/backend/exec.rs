//! Compiling programs and running driver executables.

use std::fs::{self, File};
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Duration;

use indexmap::IndexMap;
use sha2::{Digest, Sha256};
use wait_timeout::ChildExt;

use super::{excerpt, BackendDescriptor, BackendError, RunResult, RunStatus};

const EXCERPT: usize = 4000;

/// Compile `program` with the backend's command template. Artifacts are cached
/// by a hash of the command template and the source text.
pub fn compile_source(desc: &BackendDescriptor, cache_dir: &Path, program: &str) -> Result<PathBuf, BackendError> {
    let mut h = Sha256::new();
    h.update(desc.compile_command_template.as_bytes());
    h.update([0]);
    h.update(program.as_bytes());
    let key = hex::encode(h.finalize());
    let final_dir = cache_dir.join(&key[..32]);
    let exe = final_dir.join("program");
    if exe.is_file() {
        return Ok(exe);
    }
    fs::create_dir_all(cache_dir)?;
    let work = tempfile::Builder::new().prefix(".build-").tempdir_in(cache_dir)?;
    let src = work.path().join(format!("program.{}", desc.source_extension));
    fs::write(&src, program)?;
    let out = work.path().join("program");
    let argv: Vec<String> = desc
        .compile_command_template
        .split_whitespace()
        .map(|tok| {
            tok.replace("{{source}}", &src.to_string_lossy()).replace("{{output}}", &out.to_string_lossy())
        })
        .collect();
    let (tool, args) = argv.split_first().ok_or_else(|| BackendError::Manifest("empty compile command".into()))?;
    let output = match Command::new(tool).args(args).current_dir(work.path()).stdin(Stdio::null()).output() {
        Ok(o) => o,
        Err(e) if e.kind() == ErrorKind::NotFound => return Err(BackendError::ToolchainMissing(tool.clone())),
        Err(e) => return Err(e.into()),
    };
    if !output.status.success() || !out.is_file() {
        let mut stderr = String::from_utf8_lossy(&output.stderr).into_owned();
        if stderr.trim().is_empty() {
            stderr = String::from_utf8_lossy(&output.stdout).into_owned();
        }
        if stderr.trim().is_empty() {
            stderr = format!("compiler exited with {}", output.status);
        }
        return Err(BackendError::CompileFailure { stderr });
    }
    let tmp = work.keep();
    match fs::rename(&tmp, &final_dir) {
        Ok(()) => {}
        // another worker finished the same source first
        Err(_) if exe.is_file() => {
            let _ = fs::remove_dir_all(&tmp);
        }
        Err(e) => return Err(e.into()),
    }
    Ok(exe)
}

/// Execute a driver. Output buffers are read into memory; the scratch
/// directory they were written to is removed afterwards.
pub fn run_artifact(artifact: &Path, timeout: Duration, capture: bool) -> Result<RunResult, BackendError> {
    let scratch = tempfile::Builder::new().prefix("peak-run-").tempdir()?;
    let out_dir = scratch.path().canonicalize()?;
    let stdout_path = out_dir.join("stdout.txt");
    let stderr_path = out_dir.join("stderr.txt");
    let mut child = Command::new(artifact)
        .arg(&out_dir)
        .env("PEAK_DEBUG_RUNS", "1")
        .stdin(Stdio::null())
        .stdout(File::create(&stdout_path)?)
        .stderr(File::create(&stderr_path)?)
        .spawn()?;
    let status = match child.wait_timeout(timeout)? {
        Some(s) => s,
        None => {
            let _ = child.kill();
            let _ = child.wait();
            let err = fs::read_to_string(&stderr_path).unwrap_or_default();
            return Ok(RunResult::failed(
                RunStatus::Timeout,
                format!("killed after {:.1}s\n{}", timeout.as_secs_f64(), excerpt(&err, EXCERPT)),
            ));
        }
    };
    let stdout = fs::read_to_string(&stdout_path).unwrap_or_default();
    let stderr = excerpt(&fs::read_to_string(&stderr_path).unwrap_or_default(), EXCERPT);
    match status.code() {
        Some(3) => Ok(RunResult::failed(RunStatus::InvalidConfig, stderr)),
        Some(0) => {
            let mut result = parse_protocol(&stdout)?;
            result.stderr_excerpt = stderr;
            if capture {
                let mut buffers = IndexMap::new();
                for (name, path) in &result_paths(&stdout) {
                    let bytes = fs::read(path)
                        .map_err(|e| BackendError::ProtocolViolation(format!("cannot read output `{name}`: {e}")))?;
                    buffers.insert(name.clone(), bytes);
                }
                result.outputs = Some(buffers);
            }
            Ok(result)
        }
        code => {
            let what = match code {
                Some(c) => format!("exit code {c}"),
                None => "terminated by signal".to_owned(),
            };
            Ok(RunResult::failed(RunStatus::RuntimeError, format!("{what}\n{stderr}")))
        }
    }
}

fn result_paths(stdout: &str) -> Vec<(String, PathBuf)> {
    stdout
        .lines()
        .filter_map(|l| l.strip_prefix("PEAK_OUT "))
        .filter_map(|rest| rest.split_once(' '))
        .map(|(n, p)| (n.to_owned(), PathBuf::from(p.trim_end())))
        .collect()
}

/// Parse the stdout of a driver that exited with status 0.
pub fn parse_protocol(stdout: &str) -> Result<RunResult, BackendError> {
    let mut runs = Vec::new();
    let mut mean = None;
    for line in stdout.lines() {
        let num = |rest: &str| {
            rest.trim()
                .parse::<f64>()
                .map_err(|_| BackendError::ProtocolViolation(format!("bad number in `{line}`")))
        };
        if line == "PEAK_INVALID_CONFIG" {
            return Ok(RunResult::failed(RunStatus::InvalidConfig, ""));
        } else if let Some(rest) = line.strip_prefix("PEAK_RUN_MS ") {
            if mean.is_some() {
                return Err(BackendError::ProtocolViolation("PEAK_RUN_MS after PEAK_TIME_MS".into()));
            }
            runs.push(num(rest)?);
        } else if let Some(rest) = line.strip_prefix("PEAK_TIME_MS ") {
            if mean.is_some() {
                return Err(BackendError::ProtocolViolation("duplicate PEAK_TIME_MS".into()));
            }
            mean = Some(num(rest)?);
        } else if line.starts_with("PEAK_OUT ") {
            if mean.is_none() {
                return Err(BackendError::ProtocolViolation("PEAK_OUT before PEAK_TIME_MS".into()));
            }
            if line.split(' ').count() < 3 {
                return Err(BackendError::ProtocolViolation(format!("malformed `{line}`")));
            }
        }
    }
    let mean = mean.ok_or_else(|| BackendError::ProtocolViolation("missing PEAK_TIME_MS".into()))?;
    if !(mean > 0.0) || !mean.is_finite() {
        return Err(BackendError::ProtocolViolation(format!("non-positive mean time {mean}")));
    }
    Ok(RunResult { status: RunStatus::Ok, mean_time_ms: Some(mean), run_times_ms: runs, outputs: None, stderr_excerpt: String::new() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn protocol_parsing() {
        let r = parse_protocol("PEAK_RUN_MS 1\nPEAK_RUN_MS 3\nPEAK_TIME_MS 2\nPEAK_OUT C /tmp/C.bin\n").unwrap();
        assert_eq!(r.mean_time_ms, Some(2.0));
        assert_eq!(r.run_times_ms, vec![1.0, 3.0]);
        assert!(matches!(parse_protocol("hello\n"), Err(BackendError::ProtocolViolation(_))));
        assert!(matches!(parse_protocol("PEAK_OUT C /x\nPEAK_TIME_MS 1\n"), Err(BackendError::ProtocolViolation(_))));
        assert_eq!(parse_protocol("PEAK_INVALID_CONFIG\n").unwrap().status, RunStatus::InvalidConfig);
    }
}
