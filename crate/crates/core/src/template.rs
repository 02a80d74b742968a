//! `{{placeholder}}` rendering shared by driver templates and prompt templates.

use std::collections::HashMap;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("unknown placeholder {{{{{0}}}}}")]
    Unknown(String),
    #[error("unterminated placeholder starting at byte {0}")]
    Unterminated(usize),
}

/// Placeholder names in order of appearance.
pub fn placeholder_names(template: &str) -> Result<Vec<String>, TemplateError> {
    let mut names = Vec::new();
    let mut rest = template;
    let mut offset = 0;
    while let Some(i) = rest.find("{{") {
        let after = &rest[i + 2..];
        let end = after.find("}}").ok_or(TemplateError::Unterminated(offset + i))?;
        names.push(after[..end].trim().to_owned());
        let consumed = i + 2 + end + 2;
        offset += consumed;
        rest = &rest[consumed..];
    }
    Ok(names)
}

/// Substitute every `{{name}}` with `vars[name]`. Inserted text is not rescanned.
pub fn render(template: &str, vars: &HashMap<&str, String>) -> Result<String, TemplateError> {
    render_with(template, |name| vars.get(name).cloned())
}

pub fn render_with(
    template: &str,
    mut lookup: impl FnMut(&str) -> Option<String>,
) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    let mut offset = 0;
    while let Some(i) = rest.find("{{") {
        out.push_str(&rest[..i]);
        let after = &rest[i + 2..];
        let end = after.find("}}").ok_or(TemplateError::Unterminated(offset + i))?;
        let name = after[..end].trim();
        out.push_str(&lookup(name).ok_or_else(|| TemplateError::Unknown(name.to_owned()))?);
        let consumed = i + 2 + end + 2;
        offset += consumed;
        rest = &rest[consumed..];
    }
    out.push_str(rest);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_and_does_not_rescan() {
        let vars = HashMap::from([("a", "{{b}}".to_owned()), ("b", "x".to_owned())]);
        assert_eq!(render("<{{a}}|{{ b }}>", &vars).unwrap(), "<{{b}}|x>");
    }

    #[test]
    fn errors() {
        let vars = HashMap::new();
        assert_eq!(render("{{nope}}", &vars), Err(TemplateError::Unknown("nope".into())));
        assert_eq!(render("ab {{x", &vars), Err(TemplateError::Unterminated(3)));
        assert_eq!(placeholder_names("{{a}} {{insert:X}}").unwrap(), vec!["a", "insert:X"]);
    }
}
