//! Validator plugins: extra dynamic checks run on validated executables.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Arc;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::ValidationError;
use crate::context::KernelContext;
use crate::spec::ExecutionParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Info,
    Warning,
    Error,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub plugin: String,
    pub severity: Severity,
    pub message: String,
}

pub struct PluginInput<'a> {
    /// Directory holding the context bundle under test.
    pub bundle_dir: &'a Path,
    /// Each sampled execution point with the executable built for it.
    pub runs: &'a [(ExecutionParams, PathBuf)],
}

pub trait ValidatorPlugin: Send + Sync {
    fn id(&self) -> &str;

    fn supports(&self, backend_id: &str) -> bool;

    /// Findings for the given runs; `Err` means the plugin itself failed.
    fn check(&self, input: &PluginInput<'_>) -> Result<Vec<Finding>, String>;
}

#[derive(Clone, Default)]
pub struct ValidatorRegistry {
    plugins: Vec<Arc<dyn ValidatorPlugin>>,
}

impl ValidatorRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, plugin: Arc<dyn ValidatorPlugin>) -> Result<(), ValidationError> {
        if self.plugins.iter().any(|p| p.id() == plugin.id()) {
            return Err(ValidationError::DuplicatePlugin(plugin.id().to_owned()));
        }
        self.plugins.push(plugin);
        Ok(())
    }

    pub fn load_manifest(&mut self, path: &Path) -> Result<(), ValidationError> {
        self.register(Arc::new(CommandPlugin::from_manifest(path)?))
    }

    pub fn ids(&self) -> Vec<&str> {
        self.plugins.iter().map(|p| p.id()).collect()
    }

    /// Run every plugin supporting `backend_id`. Plugin failures and panics
    /// become warnings.
    pub fn run_all(&self, backend_id: &str, ctx: &KernelContext, runs: &[(ExecutionParams, PathBuf)]) -> Vec<Finding> {
        let active: Vec<_> = self.plugins.iter().filter(|p| p.supports(backend_id)).collect();
        if active.is_empty() {
            return Vec::new();
        }
        let warn = |plugin: &str, message: String| Finding { plugin: plugin.to_owned(), severity: Severity::Warning, message };
        let dir = match tempfile::tempdir() {
            Ok(d) => d,
            Err(e) => return active.iter().map(|p| warn(p.id(), format!("could not stage bundle: {e}"))).collect(),
        };
        if let Err(e) = ctx.write_bundle(dir.path()) {
            return active.iter().map(|p| warn(p.id(), format!("could not stage bundle: {e}"))).collect();
        }
        let input = PluginInput { bundle_dir: dir.path(), runs };
        let mut findings = Vec::new();
        for p in active {
            match catch_unwind(AssertUnwindSafe(|| p.check(&input))) {
                Ok(Ok(f)) => findings.extend(f),
                Ok(Err(msg)) => findings.push(warn(p.id(), format!("plugin failed: {msg}"))),
                Err(_) => findings.push(warn(p.id(), "plugin panicked".to_owned())),
            }
        }
        findings
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FindingPattern {
    pub regex: String,
    pub severity: Severity,
}

/// JSON manifest for an external checker. `command` may use `{{bundle}}`,
/// `{{executable}}` and `{{params}}`; it runs once per sampled point. Output
/// lines matching a pattern become findings (the `message` capture group, if
/// present, becomes the message).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PluginManifest {
    pub id: String,
    pub backends: Vec<String>,
    pub command: String,
    pub patterns: Vec<FindingPattern>,
}

pub struct CommandPlugin {
    manifest: PluginManifest,
    patterns: Vec<(Regex, Severity)>,
}

impl CommandPlugin {
    pub fn new(manifest: PluginManifest) -> Result<Self, ValidationError> {
        if manifest.id.is_empty() || manifest.command.trim().is_empty() {
            return Err(ValidationError::PluginManifest("id and command are required".into()));
        }
        let patterns = manifest
            .patterns
            .iter()
            .map(|p| {
                Regex::new(&p.regex)
                    .map(|r| (r, p.severity))
                    .map_err(|e| ValidationError::PluginManifest(format!("{}: {e}", p.regex)))
            })
            .collect::<Result<_, _>>()?;
        Ok(CommandPlugin { manifest, patterns })
    }

    pub fn from_manifest(path: &Path) -> Result<Self, ValidationError> {
        let m: PluginManifest = serde_json::from_slice(&fs::read(path)?)?;
        Self::new(m)
    }
}

impl ValidatorPlugin for CommandPlugin {
    fn id(&self) -> &str {
        &self.manifest.id
    }

    fn supports(&self, backend_id: &str) -> bool {
        self.manifest.backends.iter().any(|b| b == backend_id || b == "*")
    }

    fn check(&self, input: &PluginInput<'_>) -> Result<Vec<Finding>, String> {
        let mut findings = Vec::new();
        for (params, exe) in input.runs {
            let argv: Vec<String> = self
                .manifest
                .command
                .split_whitespace()
                .map(|t| {
                    t.replace("{{bundle}}", &input.bundle_dir.to_string_lossy())
                        .replace("{{executable}}", &exe.to_string_lossy())
                        .replace("{{params}}", &params.to_string())
                })
                .collect();
            let out = Command::new(&argv[0])
                .args(&argv[1..])
                .stdin(Stdio::null())
                .output()
                .map_err(|e| format!("cannot start `{}`: {e}", argv[0]))?;
            let text = format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
            for line in text.lines() {
                for (re, severity) in &self.patterns {
                    if let Some(c) = re.captures(line) {
                        let message = c.name("message").map_or(line, |m| m.as_str()).to_owned();
                        findings.push(Finding { plugin: self.manifest.id.clone(), severity: *severity, message });
                        break;
                    }
                }
            }
            if !out.status.success() {
                findings.push(Finding {
                    plugin: self.manifest.id.clone(),
                    severity: Severity::Warning,
                    message: format!("checker exited with {} at {params}", out.status),
                });
            }
        }
        Ok(findings)
    }
}
