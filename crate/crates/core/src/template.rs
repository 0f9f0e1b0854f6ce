//! Versioned prompt templates with `{name}` placeholders.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const JUDGE_V1: &str = include_str!("../templates/judge_v1.txt");
pub const EVAL_PROMPT_V1: &str = include_str!("../templates/eval_prompt_v1.txt");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub name: String,
    pub text: String,
}

/// Name and content hash, recorded next to anything a template produced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateProvenance {
    pub name: String,
    pub sha256: String,
}

impl PromptTemplate {
    pub fn new(name: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            text: text.into(),
        }
    }

    pub fn judge_v1() -> Self {
        Self::new("judge_v1", JUDGE_V1)
    }

    pub fn eval_v1() -> Self {
        Self::new("eval_prompt_v1", EVAL_PROMPT_V1)
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "custom".into());
        Ok(Self::new(name, text))
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.text.as_bytes()))
    }

    pub fn provenance(&self) -> TemplateProvenance {
        TemplateProvenance {
            name: self.name.clone(),
            sha256: self.sha256(),
        }
    }

    /// Substitutes each `{key}`; unknown placeholders are left untouched.
    pub fn render(&self, vars: &[(&str, &str)]) -> String {
        let mut out = self.text.clone();
        for (k, v) in vars {
            out = out.replace(&format!("{{{k}}}"), v);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_placeholders() {
        let t = PromptTemplate::new("t", "Q: {question} / {missing}");
        assert_eq!(t.render(&[("question", "why?")]), "Q: why? / {missing}");
    }

    #[test]
    fn bundled_templates_have_expected_slots() {
        let j = PromptTemplate::judge_v1();
        for slot in ["{question}", "{reference}", "{prediction}"] {
            assert!(j.text.contains(slot));
        }
        let e = PromptTemplate::eval_v1();
        for slot in ["{question}", "{options}", "{width}", "{height}"] {
            assert!(e.text.contains(slot));
        }
        assert_eq!(j.sha256().len(), 64);
    }
}
