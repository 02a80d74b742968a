//! Deterministic offline model client backed by fixture files.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use serde::Deserialize;

use super::client::{CallMeta, ClientError, LlmClient};
use super::prompt::{LlmRequest, LlmResponse};

/// A canned response. `None` fields match anything.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MockRule {
    pub transformation: String,
    pub pass: Option<usize>,
    pub call: Option<usize>,
    pub attempt: Option<u32>,
    pub trial: Option<u32>,
    pub input_hash: Option<String>,
    pub response: String,
}

impl MockRule {
    pub fn new(transformation: &str, pass: usize, call: usize, response: &str) -> Self {
        MockRule {
            transformation: transformation.to_owned(),
            pass: Some(pass),
            call: Some(call),
            attempt: None,
            trial: None,
            input_hash: None,
            response: response.to_owned(),
        }
    }

    fn matches(&self, m: &CallMeta) -> bool {
        self.transformation == m.transformation
            && self.pass.is_none_or(|p| p == m.pass)
            && self.call.is_none_or(|c| c == m.call)
            && self.attempt.is_none_or(|a| a == m.attempt)
            && self.trial.is_none_or(|t| t == m.trial)
            && self.input_hash.as_ref().is_none_or(|h| h == &m.input_hash)
    }

    fn specificity(&self) -> usize {
        [self.pass.is_some(), self.call.is_some(), self.attempt.is_some(), self.trial.is_some(), self.input_hash.is_some()]
            .iter()
            .filter(|b| **b)
            .count()
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FixtureEntry {
    pass: usize,
    call: usize,
    #[serde(default)]
    attempt: Option<u32>,
    #[serde(default)]
    input_hash: Option<String>,
    file: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FixtureManifest {
    responses: Vec<FixtureEntry>,
    #[serde(default)]
    variants: HashMap<String, Vec<FixtureEntry>>,
}

/// Answers from fixtures keyed by (transformation, pass, call, attempt,
/// trial, input hash). The most specific matching rule wins; among equally
/// specific rules the one added last wins. Identical keys always give
/// identical responses.
#[derive(Default)]
pub struct MockClient {
    rules: Vec<MockRule>,
    variants: HashMap<(String, String), Vec<MockRule>>,
    log: Mutex<Vec<CallMeta>>,
}

impl MockClient {
    pub fn new() -> Self {
        Self::default()
    }

    /// Load `<root>/<transformation>/fixtures.json` for every subdirectory.
    pub fn from_dir(root: &Path) -> Result<Self, ClientError> {
        let mut client = MockClient::new();
        let mut dirs: Vec<_> = fs::read_dir(root)
            .map_err(|e| ClientError::Config(format!("{}: {e}", root.display())))?
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| p.join("fixtures.json").is_file())
            .collect();
        dirs.sort();
        for dir in dirs {
            let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            client.load_fixtures(&name, &dir)?;
        }
        Ok(client)
    }

    pub fn load_fixtures(&mut self, transformation: &str, dir: &Path) -> Result<(), ClientError> {
        let path = dir.join("fixtures.json");
        let raw = fs::read(&path).map_err(|e| ClientError::Config(format!("{}: {e}", path.display())))?;
        let m: FixtureManifest =
            serde_json::from_slice(&raw).map_err(|e| ClientError::Config(format!("{}: {e}", path.display())))?;
        let to_rule = |e: &FixtureEntry| -> Result<MockRule, ClientError> {
            let response =
                fs::read_to_string(dir.join(&e.file)).map_err(|err| ClientError::Config(format!("{}: {err}", e.file)))?;
            Ok(MockRule {
                attempt: e.attempt,
                input_hash: e.input_hash.clone(),
                ..MockRule::new(transformation, e.pass, e.call, &response)
            })
        };
        for e in &m.responses {
            self.rules.push(to_rule(e)?);
        }
        for (name, entries) in &m.variants {
            let rules = entries.iter().map(to_rule).collect::<Result<Vec<_>, _>>()?;
            self.variants.insert((transformation.to_owned(), name.clone()), rules);
        }
        Ok(())
    }

    pub fn add_rule(&mut self, rule: MockRule) {
        self.rules.push(rule);
    }

    pub fn variant_names(&self, transformation: &str) -> Vec<&str> {
        let mut v: Vec<&str> =
            self.variants.keys().filter(|(t, _)| t == transformation).map(|(_, n)| n.as_str()).collect();
        v.sort();
        v
    }

    /// Use a named fixture variant on the given trials only.
    pub fn schedule(&mut self, transformation: &str, variant: &str, trials: &[u32]) -> Result<(), ClientError> {
        let rules = self.variant(transformation, variant)?;
        for &t in trials {
            for r in &rules {
                self.rules.push(MockRule { trial: Some(t), ..r.clone() });
            }
        }
        Ok(())
    }

    /// Use a named fixture variant on every trial.
    pub fn use_variant(&mut self, transformation: &str, variant: &str) -> Result<(), ClientError> {
        let rules = self.variant(transformation, variant)?;
        self.rules.extend(rules);
        Ok(())
    }

    fn variant(&self, transformation: &str, variant: &str) -> Result<Vec<MockRule>, ClientError> {
        self.variants
            .get(&(transformation.to_owned(), variant.to_owned()))
            .cloned()
            .ok_or_else(|| ClientError::Config(format!("no fixture variant `{variant}` for `{transformation}`")))
    }

    /// Every call received so far, in order.
    pub fn calls(&self) -> Vec<CallMeta> {
        self.log.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

impl LlmClient for MockClient {
    fn model_tag(&self) -> &str {
        "mock"
    }

    fn complete(&self, _request: &LlmRequest, meta: &CallMeta) -> Result<LlmResponse, ClientError> {
        self.log.lock().unwrap_or_else(|e| e.into_inner()).push(meta.clone());
        self.rules
            .iter()
            .enumerate()
            .filter(|(_, r)| r.matches(meta))
            .max_by_key(|(i, r)| (r.specificity(), *i))
            .map(|(_, r)| LlmResponse { raw_text: r.response.clone() })
            .ok_or_else(|| {
                ClientError::NoFixture(format!(
                    "{} pass {} call {} attempt {} trial {}",
                    meta.transformation, meta.pass, meta.call, meta.attempt, meta.trial
                ))
            })
    }
}
