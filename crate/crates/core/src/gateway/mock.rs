//! Deterministic scripted model for offline runs and tests.
//!
//! A table is an ordered list of rules; the first rule whose matcher accepts
//! the prompt (and whose `model`, if set, equals the request's model id)
//! supplies the response. Regex rules may reference named or numbered capture
//! groups in the response with `$name` / `${1}`.

use std::sync::atomic::{AtomicUsize, Ordering};

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{CompletionRequest, LanguageModel};
use crate::error::GatewayError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleMatcher {
    Contains(String),
    Regex(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(flatten)]
    pub matcher: RuleMatcher,
    pub response: String,
}

impl MockRule {
    pub fn contains(needle: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            model: None,
            matcher: RuleMatcher::Contains(needle.into()),
            response: response.into(),
        }
    }

    pub fn regex(pattern: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            model: None,
            matcher: RuleMatcher::Regex(pattern.into()),
            response: response.into(),
        }
    }

    pub fn for_model(mut self, model: impl Into<String>) -> Self {
        self.model = Some(model.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedMockTable {
    pub rules: Vec<MockRule>,
    #[serde(default)]
    pub default_response: String,
}

impl ScriptedMockTable {
    pub fn with_default(response: impl Into<String>) -> Self {
        Self {
            rules: Vec::new(),
            default_response: response.into(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, GatewayError> {
        serde_json::from_str(text).map_err(|e| GatewayError::Config(format!("mock table: {e}")))
    }
}

enum Compiled {
    Contains(String),
    Regex(Regex),
}

/// Compiled, immutable form of a [`ScriptedMockTable`].
pub struct ScriptedMock {
    table: ScriptedMockTable,
    compiled: Vec<Compiled>,
    calls: AtomicUsize,
}

impl ScriptedMock {
    pub fn new(table: ScriptedMockTable) -> Result<Self, GatewayError> {
        let compiled = table
            .rules
            .iter()
            .map(|r| match &r.matcher {
                RuleMatcher::Contains(s) => Ok(Compiled::Contains(s.clone())),
                RuleMatcher::Regex(p) => Regex::new(p)
                    .map(Compiled::Regex)
                    .map_err(|e| GatewayError::Config(format!("bad mock pattern {p:?}: {e}"))),
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            table,
            compiled,
            calls: AtomicUsize::new(0),
        })
    }

    pub fn table(&self) -> &ScriptedMockTable {
        &self.table
    }

    /// Number of completions served so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn respond(&self, model_id: &str, prompt: &str) -> String {
        for (rule, matcher) in self.table.rules.iter().zip(&self.compiled) {
            if rule.model.as_deref().is_some_and(|m| m != model_id) {
                continue;
            }
            match matcher {
                Compiled::Contains(needle) => {
                    if prompt.contains(needle.as_str()) {
                        return rule.response.clone();
                    }
                }
                Compiled::Regex(re) => {
                    if let Some(caps) = re.captures(prompt) {
                        let mut out = String::new();
                        caps.expand(&rule.response, &mut out);
                        return out;
                    }
                }
            }
        }
        self.table.default_response.clone()
    }
}

impl LanguageModel for ScriptedMock {
    fn complete(&self, req: &CompletionRequest) -> Result<String, GatewayError> {
        req.validate()?;
        self.calls.fetch_add(1, Ordering::Relaxed);
        Ok(self.respond(&req.model_id, &req.prompt))
    }
}
