//! The `peak` command line.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use peak_core::perf::Strategy;
use peak_core::store::Trajectory;
use serde::Serialize;

use crate::api::{serve, AppState};
use crate::config::{LlmSettings, SessionConfig};
use crate::error::ServiceError;
use crate::jobs::Jobs;
use crate::session::{Access, EvaluateRequest, LogEntry, Schedule, SeedFiles, Session};

#[derive(Parser, Debug)]
#[command(name = "peak", version, about = "Kernel optimization workflows driven by natural-language transformations")]
pub struct Cli {
    /// Workflow root directory.
    #[arg(long, global = true, env = "PEAK_ROOT", default_value = ".")]
    pub root: PathBuf,
    /// Print results as JSON.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct StrategyArgs {
    /// Measure every valid tuning point.
    #[arg(long, conflicts_with_all = ["sample", "tuner"])]
    pub exhaustive: bool,
    /// Measure N random tuning points.
    #[arg(long, value_name = "N", conflicts_with = "tuner")]
    pub sample: Option<usize>,
    /// Search with a tuner plugin.
    #[arg(long, value_name = "ID", requires = "budget")]
    pub tuner: Option<String>,
    /// Iteration budget for --tuner.
    #[arg(long, value_name = "N")]
    pub budget: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Input key selector such as `n=32`; defaults to the largest key.
    #[arg(long)]
    pub input: Option<String>,
    #[arg(long)]
    pub keep_top: Option<usize>,
}

impl StrategyArgs {
    pub fn request(&self) -> EvaluateRequest {
        let strategy = if self.exhaustive {
            Some(Strategy::Exhaustive)
        } else if let Some(n) = self.sample {
            Some(Strategy::Random { budget: n, seed: self.seed })
        } else {
            self.tuner.as_ref().map(|t| Strategy::Tuner {
                plugin: t.clone(),
                iteration_budget: self.budget.unwrap_or(0),
                repeats: self.repeats,
                seed: self.seed,
            })
        };
        EvaluateRequest { strategy, input: self.input.clone(), keep_top: self.keep_top }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Create a workflow root from a seed kernel and build its reference outputs.
    Init {
        spec: PathBuf,
        device: PathBuf,
        host: PathBuf,
        macros: Option<PathBuf>,
        /// Full session configuration; the other options override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        backend: Option<String>,
        /// Transformation catalog directory.
        #[arg(long)]
        catalog: Option<PathBuf>,
        /// Use the offline mock client with this fixture directory.
        #[arg(long, conflicts_with_all = ["llm_url", "llm_model"])]
        mock: Option<PathBuf>,
        #[arg(long, requires = "llm_model")]
        llm_url: Option<String>,
        #[arg(long, requires = "llm_url")]
        llm_model: Option<String>,
        #[arg(long)]
        validator_budget: Option<usize>,
        #[arg(long)]
        max_retries: Option<u32>,
        #[arg(long)]
        keep_top: Option<usize>,
        #[arg(long)]
        build_cache: Option<PathBuf>,
    },
    /// Apply a transformation to a checkpoint, validate and commit.
    Transform { target: String, name: String },
    /// Measure a checkpoint over its tuning space.
    Evaluate {
        target: String,
        #[command(flatten)]
        strategy: StrategyArgs,
    },
    /// Check a checkpoint against the reference outputs.
    Validate {
        target: String,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Show the checkpoint lineage.
    Log,
    /// Compare two checkpoints.
    Diff { a: String, b: String },
    /// Write a checkpoint's context bundle to a directory.
    Restore {
        target: String,
        #[arg(long)]
        to: PathBuf,
    },
    /// Point a named ref at a checkpoint.
    Tag { name: String, target: String },
    /// Speedups along a checkpoint's lineage.
    Trajectory {
        target: String,
        #[arg(long)]
        reference_ms: Option<f64>,
    },
    /// Apply a transformation repeatedly without retries and classify the outcomes.
    Reliability {
        target: String,
        name: String,
        #[arg(long)]
        trials: u32,
        /// Mock fixture variant for specific trials, as VARIANT@T1,T2.
        #[arg(long)]
        schedule: Vec<Schedule>,
    },
    /// Apply the transformations listed in a file, one per line.
    RunSequence {
        file: PathBuf,
        /// Starting checkpoint.
        #[arg(long, default_value = "seed")]
        from: String,
        #[command(flatten)]
        strategy: StrategyArgs,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        listen: Option<String>,
    },
}

/// Command output: a JSON value for `--json` and text otherwise.
struct Output {
    json: serde_json::Value,
    text: String,
}

impl Output {
    fn new<T: Serialize>(value: &T, text: String) -> Result<Output, ServiceError> {
        Ok(Output { json: serde_json::to_value(value)?, text })
    }
}

fn absolute(p: &Path) -> Result<PathBuf, ServiceError> {
    Ok(std::path::absolute(p)?)
}

fn fmt_ms(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |t| format!("{t:.4}"))
}

fn render_log(entries: &[LogEntry]) -> String {
    let mut out = String::new();
    fn walk(entries: &[LogEntry], idx: usize, depth: usize, out: &mut String) {
        let e = &entries[idx];
        let c = &e.checkpoint;
        let name = c.transformation_name.as_deref().unwrap_or("seed");
        let refs = if e.refs.is_empty() { String::new() } else { format!(" ({})", e.refs.join(", ")) };
        let verdict = c.validation.as_ref().map_or("-".to_owned(), |v| format!("{:?}", v.verdict).to_lowercase());
        let best = fmt_ms(c.perf.as_ref().map(|p| p.best_time_ms));
        let _ = writeln!(out, "{}* {} {name}{refs} validation={verdict} best_ms={best}", "  ".repeat(depth), c.id.short());
        for child in &e.children {
            if let Some(i) = entries.iter().position(|x| &x.checkpoint.id == child) {
                walk(entries, i, depth + 1, out);
            }
        }
    }
    for (i, e) in entries.iter().enumerate() {
        if e.checkpoint.parent.is_none() {
            walk(entries, i, 0, &mut out);
        }
    }
    out
}

fn render_trajectory(t: &Trajectory) -> String {
    let mut out = format!("input {}\n", t.input_key);
    let _ = writeln!(out, "{:<4} {:<12} {:<16} {:>12} {:>10} {:>10} {:>10} {:>8}", "step", "checkpoint", "transformation", "best_ms", "cumulative", "step_x", "gflops", "%ref");
    for (i, s) in t.steps.iter().enumerate() {
        let _ = writeln!(
            out,
            "{:<4} {:<12} {:<16} {:>12.4} {:>10.3} {:>10.3} {:>10} {:>8}",
            i,
            s.id.short(),
            s.transformation_name.as_deref().unwrap_or("seed"),
            s.best_time_ms,
            s.cumulative_speedup,
            s.step_speedup,
            s.best_gflops.map_or("-".into(), |g| format!("{g:.2}")),
            s.percent_of_reference.map_or("-".into(), |p| format!("{p:.1}")),
        );
    }
    out
}

fn init_config(cmd: &Command) -> Result<SessionConfig, ServiceError> {
    let Command::Init { config, backend, catalog, mock, llm_url, llm_model, validator_budget, max_retries, keep_top, build_cache, .. } =
        cmd
    else {
        unreachable!()
    };
    let mut c = match config {
        Some(p) => serde_json::from_slice(&std::fs::read(p).map_err(|e| ServiceError::Config(format!("{}: {e}", p.display())))?)
            .map_err(|e| ServiceError::Config(format!("{}: {e}", p.display())))?,
        None => {
            let catalog = catalog.as_ref().ok_or_else(|| ServiceError::InvalidArgument("--catalog or --config is required".into()))?;
            let llm = match (mock, llm_url, llm_model) {
                (Some(dir), _, _) => LlmSettings::Mock { fixtures: dir.clone(), variants: Vec::new() },
                (None, Some(url), Some(model)) => LlmSettings::Live { base_url: url.clone(), model: model.clone() },
                _ => return Err(ServiceError::InvalidArgument("one of --mock or --llm-url/--llm-model is required".into())),
            };
            SessionConfig::new(backend.as_deref().unwrap_or("cpu-ref"), llm, catalog.clone())
        }
    };
    if let Some(b) = backend {
        c.backend = b.clone();
    }
    if let Some(p) = catalog {
        c.catalog = p.clone();
    }
    if let Some(p) = mock {
        c.llm = LlmSettings::Mock { fixtures: p.clone(), variants: Vec::new() };
    }
    if let Some(v) = validator_budget {
        c.validator_budget = *v;
    }
    if let Some(v) = max_retries {
        c.max_retries = *v;
    }
    if let Some(v) = keep_top {
        c.keep_top = *v;
    }
    if let Some(p) = build_cache {
        c.build_cache = Some(p.clone());
    }
    // Paths are stored absolute so the root works from any directory.
    c.catalog = absolute(&c.catalog)?;
    if let LlmSettings::Mock { fixtures, .. } = &mut c.llm {
        *fixtures = absolute(fixtures)?;
    }
    if let Some(p) = &c.build_cache {
        c.build_cache = Some(absolute(p)?);
    }
    Ok(c)
}

fn sequence_names(file: &Path) -> Result<Vec<String>, ServiceError> {
    let text = std::fs::read_to_string(file).map_err(|e| ServiceError::InvalidArgument(format!("{}: {e}", file.display())))?;
    let names: Vec<String> = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect();
    if names.is_empty() {
        return Err(ServiceError::InvalidArgument(format!("{} lists no transformations", file.display())));
    }
    Ok(names)
}

/// Run one command. Failures that still produced a result (a failed
/// transformation, a failing validation) return it together with the error.
fn run(cli: &Cli) -> Result<Output, (ServiceError, Option<Output>)> {
    let root = &cli.root;
    let open = |access| Session::open(root, access).map_err(|e| (e, None));
    let plain = |e: ServiceError| (e, None);
    match &cli.command {
        cmd @ Command::Init { spec, device, host, macros, .. } => {
            let config = init_config(cmd).map_err(plain)?;
            let seed = SeedFiles { spec: spec.clone(), device: device.clone(), host: host.clone(), macros: macros.clone() };
            let (_, cp) = Session::init(root, config, &seed).map_err(plain)?;
            let verdict = cp.validation.as_ref().map_or("-".into(), |v| format!("{:?}", v.verdict).to_lowercase());
            Output::new(&cp, format!("initialized {}\nseed {} validation={verdict}\n", root.display(), cp.id)).map_err(plain)
        }
        Command::Transform { target, name } => {
            let s = open(Access::Write)?;
            let r = s.transform(target, name).map_err(plain)?;
            let mut text = String::new();
            for a in &r.outcome.attempts {
                let _ = writeln!(text, "pass {} attempt {}: {:?}", a.pass, a.attempt, a.status);
                if !a.stderr_excerpt.is_empty() {
                    let _ = writeln!(text, "  {}", a.stderr_excerpt.lines().take(8).collect::<Vec<_>>().join("\n  "));
                }
            }
            match &r.checkpoint {
                Some(cp) => {
                    let _ = writeln!(text, "{name}: {} -> {}", r.outcome.status.as_str(), cp.id);
                    Output::new(&r, text).map_err(plain)
                }
                None => {
                    let out = Output::new(&r, text).map_err(plain)?;
                    Err((ServiceError::TransformFailed { name: name.clone(), status: r.outcome.status }, Some(out)))
                }
            }
        }
        Command::Evaluate { target, strategy } => {
            let s = open(Access::Write)?;
            let r = s.evaluate(target, &strategy.request()).map_err(plain)?;
            let text = format!(
                "{} input {}\nbest {:.4} ms at {:?}\nevaluated {} of {} (pruned {})\n",
                r.ctx_digest.short(),
                r.input_key,
                r.best_time_ms(),
                r.best.tuning,
                r.evaluated,
                r.attempted,
                r.pruned_invalid
            );
            Output::new(&r, text).map_err(plain)
        }
        Command::Validate { target, budget, seed } => {
            let s = open(Access::Write)?;
            let r = s.validate(target, *budget, *seed).map_err(plain)?;
            let verdict = format!("{:?}", r.verdict).to_lowercase();
            let mut text = format!("{verdict}: {} samples\n", r.sampled);
            if !r.passed() {
                text.push_str(&r.feedback());
                text.push('\n');
                let out = Output::new(&r, text).map_err(plain)?;
                return Err((ServiceError::ValidationFailed(r.reason.clone().unwrap_or_else(|| r.feedback())), Some(out)));
            }
            Output::new(&r, text).map_err(plain)
        }
        Command::Log => {
            let s = open(Access::Read)?;
            let entries = s.log().map_err(plain)?;
            let text = render_log(&entries);
            Output::new(&entries, text).map_err(plain)
        }
        Command::Diff { a, b } => {
            let s = open(Access::Read)?;
            let d = s.diff(a, b).map_err(plain)?;
            let mut text = d.to_text();
            let m = &d.metadata;
            if m.best_time_ms != (None, None) {
                let _ = writeln!(
                    text,
                    "best_ms {} -> {} speedup {}",
                    fmt_ms(m.best_time_ms.0),
                    fmt_ms(m.best_time_ms.1),
                    m.speedup.map_or("-".into(), |x| format!("{x:.3}"))
                );
            }
            Output::new(&d, text).map_err(plain)
        }
        Command::Restore { target, to } => {
            let s = open(Access::Read)?;
            let ctx = s.restore_to(target, to).map_err(plain)?;
            let value = serde_json::json!({ "id": ctx.digest(), "dir": to });
            Output::new(&value, format!("restored {} to {}\n", ctx.digest(), to.display())).map_err(plain)
        }
        Command::Tag { name, target } => {
            let s = open(Access::Write)?;
            let id = s.tag(name, target).map_err(plain)?;
            Output::new(&serde_json::json!({ "name": name, "id": id }), format!("{name} -> {id}\n")).map_err(plain)
        }
        Command::Trajectory { target, reference_ms } => {
            let s = open(Access::Read)?;
            let t = s.trajectory(target, *reference_ms).map_err(plain)?;
            let text = render_trajectory(&t);
            Output::new(&t, text).map_err(plain)
        }
        Command::Reliability { target, name, trials, schedule } => {
            let s = open(Access::Write)?;
            let r = s.reliability(target, name, *trials, schedule).map_err(plain)?;
            let text = format!(
                "{} x{} with {}: success {:.3} compile_failure {:.3} reference_failure {:.3} extraction_failure {:.3}\n",
                r.transformation, r.trials, r.model_tag, r.success_rate, r.compile_failure_rate, r.reference_failure_rate, r.extraction_failure_rate
            );
            Output::new(&r, text).map_err(plain)
        }
        Command::RunSequence { file, from, strategy } => {
            let names = sequence_names(file).map_err(plain)?;
            let s = open(Access::Write)?;
            let r = s.run_sequence(from, &names, &strategy.request()).map_err(plain)?;
            let mut text = String::new();
            for step in &r.steps {
                let _ = writeln!(
                    text,
                    "{}: {} {} best_ms={}",
                    step.transformation,
                    step.status.as_str(),
                    step.checkpoint.as_ref().map_or("-", |c| c.short()),
                    fmt_ms(step.best_time_ms)
                );
            }
            if let Some(t) = &r.trajectory {
                text.push_str(&render_trajectory(t));
            }
            let out = Output::new(&r, text).map_err(plain)?;
            match r.steps.iter().find(|s| s.checkpoint.is_none()) {
                Some(failed) => Err((
                    ServiceError::TransformFailed { name: failed.transformation.clone(), status: failed.status },
                    Some(out),
                )),
                None => Ok(out),
            }
        }
        Command::Serve { listen } => {
            let s = Arc::new(open(Access::Write)?);
            let listen = listen.clone().unwrap_or_else(|| s.config().listen.clone());
            let jobs = Jobs::start(s.clone()).map_err(plain)?;
            let runtime = tokio::runtime::Runtime::new().map_err(|e| plain(e.into()))?;
            runtime.block_on(serve(AppState { session: s, jobs }, &listen)).map_err(plain)?;
            Output::new(&serde_json::json!({ "stopped": true }), String::new()).map_err(plain)
        }
    }
}

fn emit(out: &Output, json: bool, to_stderr: bool) {
    let text = if json { format!("{}\n", serde_json::to_string_pretty(&out.json).unwrap_or_default()) } else { out.text.clone() };
    if to_stderr && !json {
        eprint!("{text}");
    } else {
        print!("{text}");
    }
}

/// Entry point used by the binary.
pub fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_env("PEAK_LOG").unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(out) => {
            emit(&out, cli.json, false);
            ExitCode::SUCCESS
        }
        Err((e, out)) => {
            if let Some(out) = &out {
                emit(out, cli.json, true);
            }
            let message = e.to_string().replace('\n', " ");
            eprintln!("PEAK_ERROR {} {message}", e.code());
            ExitCode::FAILURE
        }
    }
}
