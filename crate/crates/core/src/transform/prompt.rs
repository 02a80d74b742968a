//! Prompt assembly for one region call and extraction of the returned code.

use pulldown_cmark::{CodeBlockKind, Event, Parser, Tag, TagEnd};
use serde::{Deserialize, Serialize};

use super::catalog::{NaturalTransformation, TransformPass};
use super::TransformError;
use crate::context::{KernelContext, RegionKind};
use crate::template::render_with;

/// Feedback longer than this is cut before it goes into a prompt.
pub const FEEDBACK_LIMIT: usize = 4000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub system: String,
    pub user: String,
    pub model_tag: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub raw_text: String,
}

/// First `limit` characters of `text`, marking the cut.
pub fn truncate_feedback(text: &str, limit: usize) -> String {
    match text.char_indices().nth(limit) {
        Some((i, _)) => format!("{}\n[feedback truncated]", &text[..i]),
        None => text.to_owned(),
    }
}

fn system_prompt(t: &NaturalTransformation, region: RegionKind, ctx: &KernelContext) -> String {
    let mut s = format!(
        "You are applying the `{}` transformation to a GPU kernel context for the `{}` backend.\n\
         The context has three regions: macros, device and host. This call edits only the {region} region.\n\
         Return exactly one fenced code block containing the full replacement text of the {region} region.\n\
         Tuning parameters are written as @TUNE(NAME); do not replace them with numbers.\n",
        t.name,
        ctx.backend()
    );
    let mut names: Vec<&str> = ctx.spec().tuning_names().collect();
    for d in &t.new_tuning {
        if !names.contains(&d.name.as_str()) {
            names.push(&d.name);
        }
    }
    if !names.is_empty() {
        s.push_str(&format!("Available tuning parameters: {}.\n", names.join(", ")));
    }
    s
}

/// Build the request for call `call` of `pass`. `feedback` is empty on a
/// first attempt.
pub fn assemble_prompt(
    t: &NaturalTransformation,
    pass: &TransformPass,
    call: usize,
    ctx: &KernelContext,
    feedback: &str,
    model_tag: &str,
) -> Result<LlmRequest, TransformError> {
    let rc = pass
        .calls
        .get(call)
        .ok_or_else(|| TransformError::Manifest(format!("pass {} has no call {call}", pass.index)))?;
    let feedback = truncate_feedback(feedback, FEEDBACK_LIMIT);
    let user = render_with(&rc.prompt_template, |name| match name {
        "device_code" => Some(ctx.device().to_owned()),
        "host_code" => Some(ctx.host().to_owned()),
        "macros" => Some(ctx.macros().to_owned()),
        "spec" => Some(ctx.spec().print()),
        "backend" => Some(ctx.backend().to_owned()),
        "feedback" => Some(feedback.clone()),
        _ => name.strip_prefix("insert:").and_then(|id| t.snippets.get(id)).map(|s| s.text.clone()),
    })
    .map_err(|e| TransformError::BadPlaceholder(e.to_string()))?;
    Ok(LlmRequest { system: system_prompt(t, rc.region, ctx), user, model_tag: model_tag.to_owned() })
}

/// Contents of the last fenced code block; the language tag is ignored.
pub fn extract_region_code(response: &LlmResponse) -> Result<String, TransformError> {
    let mut last = None;
    let mut current: Option<String> = None;
    for event in Parser::new(&response.raw_text) {
        match event {
            Event::Start(Tag::CodeBlock(CodeBlockKind::Fenced(_))) => current = Some(String::new()),
            Event::Text(text) => {
                if let Some(c) = current.as_mut() {
                    c.push_str(&text);
                }
            }
            Event::End(TagEnd::CodeBlock) => {
                if let Some(c) = current.take() {
                    last = Some(c);
                }
            }
            _ => {}
        }
    }
    last.ok_or(TransformError::ExtractionFailure)
}
