//! Deterministic backend driven by an ordered list of pattern rules.

use std::collections::BTreeMap;
use std::sync::LazyLock;

use regex::Regex;
use serde::Deserialize;
use serde_json::Value;
use thiserror::Error;

use super::{Backend, BackendError, Completion, CompletionAction, Prompt};

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("script syntax: {0}")]
    Syntax(String),
    #[error("rule `{rule}`: {message}")]
    Rule { rule: String, message: String },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct HandoffDoc {
    to: String,
    content: String,
    #[serde(default)]
    step: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ToolCallDoc {
    name: String,
    #[serde(default)]
    arguments: Value,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleDoc {
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    when: BTreeMap<String, String>,
    #[serde(default)]
    unless: BTreeMap<String, String>,
    #[serde(default)]
    thought: Option<String>,
    #[serde(default)]
    confidence: Option<f64>,
    #[serde(default)]
    utterance: Option<String>,
    #[serde(default)]
    tool_call: Option<ToolCallDoc>,
    #[serde(default)]
    handoff: Option<HandoffDoc>,
}

#[derive(Debug, Clone)]
enum Response {
    Utterance(String),
    ToolCall(ToolCallDoc),
    Handoff(HandoffDoc),
}

/// `when` patterns must all match their context variable; `unless` patterns
/// must all fail. Named captures from `when` are usable in templates.
#[derive(Debug, Clone, Deserialize)]
#[serde(try_from = "RuleDoc")]
pub struct Rule {
    pub name: String,
    when: Vec<(String, Regex)>,
    unless: Vec<(String, Regex)>,
    thought: Option<String>,
    confidence: Option<f64>,
    response: Response,
}

impl TryFrom<RuleDoc> for Rule {
    type Error = ScriptError;

    fn try_from(doc: RuleDoc) -> Result<Self, Self::Error> {
        let name = doc.name.unwrap_or_else(|| "<unnamed>".to_string());
        let err = |message: String| ScriptError::Rule {
            rule: name.clone(),
            message,
        };
        let compile = |m: BTreeMap<String, String>| -> Result<Vec<(String, Regex)>, ScriptError> {
            m.into_iter()
                .map(|(k, p)| Regex::new(&p).map(|r| (k, r)).map_err(|e| err(e.to_string())))
                .collect()
        };
        let response = match (doc.utterance, doc.tool_call, doc.handoff) {
            (Some(u), None, None) => Response::Utterance(u),
            (None, Some(t), None) => Response::ToolCall(t),
            (None, None, Some(h)) => Response::Handoff(h),
            _ => return Err(err("exactly one of utterance, tool_call or handoff is required".into())),
        };
        Ok(Rule {
            when: compile(doc.when)?,
            unless: compile(doc.unless)?,
            thought: doc.thought,
            confidence: doc.confidence,
            response,
            name,
        })
    }
}

static PLACEHOLDER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\{\{\s*([A-Za-z0-9_]+)\s*\}\}").unwrap());

fn render(template: &str, vars: &BTreeMap<String, String>, prompt: &Prompt) -> String {
    let out = PLACEHOLDER.replace_all(template, |c: &regex::Captures| {
        let key = &c[1];
        vars.get(key).cloned().unwrap_or_else(|| prompt.get(key).to_string())
    });
    out.trim().to_string()
}

fn render_value(v: &Value, vars: &BTreeMap<String, String>, prompt: &Prompt) -> Value {
    match v {
        Value::String(s) => Value::String(render(s, vars, prompt)),
        Value::Array(items) => Value::Array(items.iter().map(|i| render_value(i, vars, prompt)).collect()),
        Value::Object(m) => Value::Object(
            m.iter()
                .map(|(k, i)| (k.clone(), render_value(i, vars, prompt)))
                .collect(),
        ),
        other => other.clone(),
    }
}

impl Rule {
    fn try_match(&self, prompt: &Prompt) -> Option<BTreeMap<String, String>> {
        let mut vars = BTreeMap::new();
        for (key, re) in &self.when {
            let caps = re.captures(prompt.get(key))?;
            for name in re.capture_names().flatten() {
                if let Some(m) = caps.name(name) {
                    vars.insert(name.to_string(), m.as_str().to_string());
                }
            }
        }
        if self.unless.iter().any(|(key, re)| re.is_match(prompt.get(key))) {
            return None;
        }
        Some(vars)
    }

    fn fire(&self, prompt: &Prompt, vars: &BTreeMap<String, String>) -> Completion {
        let action = match &self.response {
            Response::Utterance(t) => CompletionAction::Utterance {
                text: render(t, vars, prompt),
            },
            Response::ToolCall(t) => CompletionAction::ToolCall {
                name: render(&t.name, vars, prompt),
                arguments: render_value(&t.arguments, vars, prompt),
            },
            Response::Handoff(h) => CompletionAction::Handoff {
                to: render(&h.to, vars, prompt),
                content: render(&h.content, vars, prompt),
                step: h.step.as_ref().map(|s| render(s, vars, prompt)),
            },
        };
        Completion {
            thought: Some(
                self.thought
                    .as_ref()
                    .map(|t| render(t, vars, prompt))
                    .unwrap_or_else(|| format!("rule {}", self.name)),
            ),
            action,
            confidence: self.confidence,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptDoc {
    #[serde(default)]
    rules: Vec<Rule>,
}

/// First matching rule wins; no match is `NoRuleMatched`.
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    rules: Vec<Rule>,
}

impl ScriptedBackend {
    pub fn new(rules: Vec<Rule>) -> Self {
        Self { rules }
    }

    pub fn from_yaml(document: &str) -> Result<Self, ScriptError> {
        let doc: ScriptDoc = serde_yaml::from_str(document).map_err(|e| ScriptError::Syntax(e.to_string()))?;
        Ok(Self::new(doc.rules))
    }

    /// A copy with `rules` consulted before the existing ones.
    pub fn with_overrides(&self, rules: &[Rule]) -> Self {
        Self {
            rules: rules.iter().chain(&self.rules).cloned().collect(),
        }
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }
}

impl Backend for ScriptedBackend {
    fn name(&self) -> &str {
        "scripted"
    }

    fn complete(&self, prompt: &Prompt) -> Result<Completion, BackendError> {
        self.rules
            .iter()
            .find_map(|r| r.try_match(prompt).map(|vars| r.fire(prompt, &vars)))
            .ok_or_else(|| BackendError::NoRuleMatched {
                agent: prompt.agent.clone(),
                task: prompt.get("task").to_string(),
            })
    }
}
