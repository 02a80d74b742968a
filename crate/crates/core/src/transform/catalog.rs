//! On-disk transformation definitions and the shared snippet library.

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::TransformError;
use crate::context::RegionKind;
use crate::spec::{parse_spec, TuningDecl};
use crate::template::placeholder_names;

/// Placeholders a prompt template may use besides `insert:<ID>`.
pub const PROMPT_VARS: [&str; 6] = ["device_code", "host_code", "macros", "spec", "backend", "feedback"];

const SNIPPET_HEADER: &str = "// peak-snippet:";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snippet {
    pub id: String,
    pub region: RegionKind,
    pub text: String,
}

impl Snippet {
    /// Parse a snippet file: a `// peak-snippet: region=<kind>` header line
    /// followed by the snippet text.
    pub fn parse(id: &str, source: &str) -> Result<Self, TransformError> {
        let bad = |m: String| TransformError::Manifest(format!("snippet `{id}`: {m}"));
        let (head, body) = source.split_once('\n').unwrap_or((source, ""));
        let attrs = head
            .trim()
            .strip_prefix(SNIPPET_HEADER)
            .ok_or_else(|| bad(format!("first line must start with `{SNIPPET_HEADER}`")))?;
        let region = attrs
            .split_whitespace()
            .find_map(|kv| kv.strip_prefix("region="))
            .and_then(RegionKind::parse)
            .ok_or_else(|| bad("header needs region=device|host|macros".into()))?;
        if body.contains("{{") {
            return Err(bad("snippet text may not contain `{{`".into()));
        }
        Ok(Snippet { id: id.to_owned(), region, text: body.to_owned() })
    }
}

/// One model call within a pass: the region it rewrites and its prompt.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionCall {
    pub region: RegionKind,
    pub prompt_template: String,
    pub inserts: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformPass {
    pub index: usize,
    /// Region calls executed back to back under this pass, at most one per region.
    pub calls: Vec<RegionCall>,
    /// The pass may leave the context incorrect; it is not validated.
    pub intermediate_ok: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NaturalTransformation {
    pub name: String,
    pub description: String,
    pub passes: Vec<TransformPass>,
    pub new_tuning: Vec<TuningDecl>,
    /// Backends the transformation applies to; `None` means all.
    pub backend_only: Option<Vec<String>>,
    pub snippets: IndexMap<String, Snippet>,
}

impl NaturalTransformation {
    pub fn llm_calls(&self) -> usize {
        self.passes.iter().map(|p| p.calls.len()).sum()
    }

    pub fn supports(&self, backend: &str) -> bool {
        self.backend_only.as_ref().is_none_or(|b| b.iter().any(|x| x == backend))
    }

    pub fn new_tuning_decl(&self, name: &str) -> Option<&TuningDecl> {
        self.new_tuning.iter().find(|d| d.name == name)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    name: String,
    description: String,
    #[serde(default)]
    new_tuning: Vec<ManifestTuning>,
    #[serde(default)]
    backend_only: Option<Vec<String>>,
    passes: Vec<ManifestPass>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestTuning {
    name: String,
    /// Value set in spec syntax, e.g. `pow2(1..=16)` or `{4, 8}`.
    values: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestPass {
    calls: Vec<ManifestCall>,
    #[serde(default)]
    intermediate_ok: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestCall {
    region: String,
    /// Prompt file; defaults to `pass<k>.prompt`, or `pass<k>.<region>.prompt`
    /// when the pass has several calls.
    #[serde(default)]
    prompt: Option<String>,
    #[serde(default)]
    inserts: Vec<String>,
}

/// Load `<dir>/manifest.json` and its prompt files. Snippets come from the
/// sibling `snippets/` directory.
pub fn load_transformation(dir: &Path) -> Result<NaturalTransformation, TransformError> {
    let snippets_dir = dir.parent().map(|p| p.join("snippets")).unwrap_or_else(|| PathBuf::from("snippets"));
    load_transformation_with(dir, &snippets_dir)
}

pub fn load_transformation_with(dir: &Path, snippets_dir: &Path) -> Result<NaturalTransformation, TransformError> {
    let manifest_path = dir.join("manifest.json");
    let raw = fs::read(&manifest_path).map_err(|e| TransformError::Manifest(format!("{}: {e}", manifest_path.display())))?;
    let m: Manifest =
        serde_json::from_slice(&raw).map_err(|e| TransformError::Manifest(format!("{}: {e}", manifest_path.display())))?;
    if m.passes.is_empty() {
        return Err(TransformError::Manifest(format!("`{}` has no passes", m.name)));
    }
    if m.passes.last().is_some_and(|p| p.intermediate_ok) {
        return Err(TransformError::Manifest(format!("the last pass of `{}` cannot be intermediate_ok", m.name)));
    }

    let mut new_tuning = Vec::new();
    for t in &m.new_tuning {
        let spec = parse_spec(&format!("tune {}: i32 in {}", t.name, t.values))
            .map_err(|e| TransformError::Manifest(format!("new tuning `{}`: {e}", t.name)))?;
        new_tuning.extend(spec.tuning);
    }

    let mut snippets = IndexMap::new();
    let mut passes = Vec::new();
    for (k, mp) in m.passes.iter().enumerate() {
        if mp.calls.is_empty() || mp.calls.len() > 3 {
            return Err(TransformError::Manifest(format!("pass {k} must have one to three region calls")));
        }
        let mut calls = Vec::new();
        for mc in &mp.calls {
            let region = RegionKind::parse(&mc.region)
                .ok_or_else(|| TransformError::Manifest(format!("pass {k}: unknown region `{}`", mc.region)))?;
            if calls.iter().any(|c: &RegionCall| c.region == region) {
                return Err(TransformError::Manifest(format!("pass {k} calls region {region} twice")));
            }
            let file = mc.prompt.clone().unwrap_or_else(|| {
                if mp.calls.len() == 1 {
                    format!("pass{k}.prompt")
                } else {
                    format!("pass{k}.{}.prompt", region.as_str())
                }
            });
            let template = fs::read_to_string(dir.join(&file))
                .map_err(|e| TransformError::Manifest(format!("pass {k}: prompt `{file}`: {e}")))?;
            let used = placeholder_names(&template).map_err(|e| TransformError::BadPlaceholder(format!("{file}: {e}")))?;
            for name in &used {
                if let Some(id) = name.strip_prefix("insert:") {
                    if !mc.inserts.iter().any(|i| i == id) {
                        return Err(TransformError::BadPlaceholder(format!("{file}: `{{{{{name}}}}}` is not listed in the pass inserts")));
                    }
                } else if !PROMPT_VARS.contains(&name.as_str()) {
                    return Err(TransformError::BadPlaceholder(format!("{file}: unknown placeholder `{{{{{name}}}}}`")));
                }
            }
            for id in &mc.inserts {
                if !snippets.contains_key(id) {
                    let path = snippets_dir.join(format!("{id}.src"));
                    let text = fs::read_to_string(&path).map_err(|_| TransformError::MissingSnippet(id.clone()))?;
                    snippets.insert(id.clone(), Snippet::parse(id, &text)?);
                }
                if snippets[id].region != region {
                    return Err(TransformError::Manifest(format!(
                        "pass {k}: snippet `{id}` belongs to the {} region, not {region}",
                        snippets[id].region
                    )));
                }
            }
            calls.push(RegionCall { region, prompt_template: template, inserts: mc.inserts.clone() });
        }
        passes.push(TransformPass { index: k, calls, intermediate_ok: mp.intermediate_ok });
    }

    Ok(NaturalTransformation {
        name: m.name,
        description: m.description,
        passes,
        new_tuning,
        backend_only: m.backend_only,
        snippets,
    })
}

/// A directory of transformation bundles plus `snippets/`.
#[derive(Clone, Debug)]
pub struct Catalog {
    pub root: PathBuf,
}

impl Catalog {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Catalog { root: root.into() }
    }

    /// Names of all bundles, sorted.
    pub fn names(&self) -> Result<Vec<String>, TransformError> {
        let mut names = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let entry = entry?;
            if entry.path().join("manifest.json").is_file() {
                names.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        names.sort();
        Ok(names)
    }

    pub fn load(&self, name: &str) -> Result<NaturalTransformation, TransformError> {
        let dir = self.root.join(name);
        if !dir.join("manifest.json").is_file() {
            return Err(TransformError::UnknownTransformation(name.to_owned()));
        }
        load_transformation_with(&dir, &self.root.join("snippets"))
    }
}
