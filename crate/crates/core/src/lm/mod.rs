//! Language-model boundary: prompts, completions, schema validation and the
//! two backend implementations.

mod remote;
mod scripted;

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

pub use remote::{BackendConfig, BackendKind, HttpBackend};
pub use scripted::{Rule, ScriptError, ScriptedBackend};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("backend timed out after {0:?}")]
    Timeout(Duration),
    #[error("contract violation: {0}")]
    ContractViolation(String),
    #[error("no scripted rule matched (agent `{agent}`, task `{task}`)")]
    NoRuleMatched { agent: String, task: String },
}

impl BackendError {
    /// Errors the agent loop may feed back for one self-correction attempt.
    pub fn is_correctable(&self) -> bool {
        matches!(self, BackendError::ContractViolation(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    Customer,
    Agent,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamType {
    String,
    Boolean,
    Number,
    StringList,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSchema {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: ParamType,
    #[serde(default)]
    pub required: bool,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSchema {
    pub name: String,
    pub description: String,
    pub parameters: Vec<ParamSchema>,
}

impl ToolSchema {
    pub fn new(name: &str, description: &str) -> Self {
        Self {
            name: name.to_string(),
            description: description.to_string(),
            parameters: vec![],
        }
    }

    pub fn param(mut self, name: &str, ty: ParamType, required: bool, description: &str) -> Self {
        self.parameters.push(ParamSchema {
            name: name.to_string(),
            ty,
            required,
            description: description.to_string(),
        });
        self
    }

    /// Checks `arguments` against the schema, coercing string forms of
    /// booleans and numbers. Unknown keys are rejected.
    pub fn validate(&self, arguments: &Value) -> Result<Value, String> {
        let obj = match arguments {
            Value::Object(m) => m,
            Value::Null => &Map::new(),
            other => return Err(format!("arguments to `{}` must be an object, got {other}", self.name)),
        };
        for key in obj.keys() {
            if !self.parameters.iter().any(|p| &p.name == key) {
                return Err(format!("`{}` has no parameter `{key}`", self.name));
            }
        }
        let mut out = Map::new();
        for p in &self.parameters {
            match obj.get(&p.name) {
                None | Some(Value::Null) => {
                    if p.required {
                        return Err(format!("`{}` requires `{}`", self.name, p.name));
                    }
                }
                Some(v) => {
                    let coerced = coerce(p.ty, v)
                        .ok_or_else(|| format!("`{}.{}` expects {:?}, got {v}", self.name, p.name, p.ty))?;
                    out.insert(p.name.clone(), coerced);
                }
            }
        }
        Ok(Value::Object(out))
    }
}

fn coerce(ty: ParamType, v: &Value) -> Option<Value> {
    match (ty, v) {
        (ParamType::String, Value::String(_)) => Some(v.clone()),
        (ParamType::Boolean, Value::Bool(_)) => Some(v.clone()),
        (ParamType::Boolean, Value::String(s)) => match s.trim().to_ascii_lowercase().as_str() {
            "true" | "yes" => Some(Value::Bool(true)),
            "false" | "no" => Some(Value::Bool(false)),
            _ => None,
        },
        (ParamType::Number, Value::Number(_)) => Some(v.clone()),
        (ParamType::Number, Value::String(s)) => s
            .trim()
            .parse::<f64>()
            .ok()
            .and_then(serde_json::Number::from_f64)
            .map(Value::Number),
        (ParamType::StringList, Value::Array(items)) if items.iter().all(Value::is_string) => Some(v.clone()),
        (ParamType::StringList, Value::String(s)) => Some(Value::Array(
            s.split(';')
                .map(str::trim)
                .filter(|t| !t.is_empty())
                .map(|t| Value::String(t.to_string()))
                .collect(),
        )),
        _ => None,
    }
}

/// Everything a backend sees for one completion. `context` carries named
/// state variables; the scripted backend matches on them and a model
/// backend may use them as structured hints.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Prompt {
    pub agent: String,
    pub system: String,
    #[serde(default)]
    pub history: Vec<Turn>,
    #[serde(default)]
    pub tool_schemas: Vec<ToolSchema>,
    #[serde(default)]
    pub context: BTreeMap<String, String>,
}

impl Prompt {
    pub fn new(agent: &str, system: impl Into<String>) -> Self {
        Self {
            agent: agent.to_string(),
            system: system.into(),
            ..Default::default()
        }
    }

    /// A single-shot prompt for an agent-internal task.
    pub fn task(agent: &str, task: &str, system: impl Into<String>) -> Self {
        Self::new(agent, system).with_context("task", task)
    }

    pub fn with_context(mut self, key: &str, value: impl Into<String>) -> Self {
        self.context.insert(key.to_string(), value.into());
        self
    }

    pub fn get(&self, key: &str) -> &str {
        match key {
            "agent" => &self.agent,
            "system" => &self.system,
            _ => self.context.get(key).map(String::as_str).unwrap_or(""),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CompletionAction {
    Utterance {
        text: String,
    },
    ToolCall {
        name: String,
        #[serde(default)]
        arguments: Value,
    },
    Handoff {
        to: String,
        content: String,
        /// Conversation step the content belongs to, when it is not the
        /// step currently being discussed.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        step: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thought: Option<String>,
    pub action: CompletionAction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

impl Completion {
    pub fn utterance(text: impl Into<String>) -> Self {
        Self {
            thought: None,
            action: CompletionAction::Utterance { text: text.into() },
            confidence: None,
        }
    }
}

pub trait Backend: Send + Sync {
    fn name(&self) -> &str;

    fn complete(&self, prompt: &Prompt) -> Result<Completion, BackendError>;
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn complete(&self, prompt: &Prompt) -> Result<Completion, BackendError> {
        (**self).complete(prompt)
    }
}

/// Validates a tool call against the prompt's schemas, returning it with
/// coerced arguments.
pub fn validate_completion(prompt: &Prompt, mut completion: Completion) -> Result<Completion, BackendError> {
    if let CompletionAction::ToolCall { name, arguments } = &mut completion.action {
        let schema = prompt
            .tool_schemas
            .iter()
            .find(|s| &s.name == name)
            .ok_or_else(|| BackendError::ContractViolation(format!("unknown tool `{name}`")))?;
        *arguments = schema.validate(arguments).map_err(BackendError::ContractViolation)?;
    }
    if let Some(c) = completion.confidence {
        if !(0.0..=1.0).contains(&c) {
            return Err(BackendError::ContractViolation(format!(
                "confidence {c} outside [0, 1]"
            )));
        }
    }
    Ok(completion)
}

/// One validated completion: no tool call reaches execution unchecked.
pub fn complete(backend: &dyn Backend, prompt: &Prompt) -> Result<Completion, BackendError> {
    validate_completion(prompt, backend.complete(prompt)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn schema() -> ToolSchema {
        ToolSchema::new("record_condition_answer", "")
            .param("term", ParamType::String, true, "")
            .param("answer", ParamType::Boolean, true, "")
    }

    #[test]
    fn coerces_string_booleans() {
        let v = schema().validate(&json!({"term": "Asthma", "answer": "true"})).unwrap();
        assert_eq!(v, json!({"term": "Asthma", "answer": true}));
    }

    #[test]
    fn rejects_missing_and_unknown_arguments() {
        assert!(schema().validate(&json!({"term": "Asthma"})).is_err());
        assert!(schema()
            .validate(&json!({"term": "Asthma", "answer": true, "extra": 1}))
            .is_err());
        assert!(schema().validate(&json!(["Asthma"])).is_err());
        assert!(schema().validate(&json!({"term": 3, "answer": true})).is_err());
    }

    #[test]
    fn unknown_tool_is_contract_violation() {
        let mut prompt = Prompt::new("conversationalist", "");
        prompt.tool_schemas.push(schema());
        let c = Completion {
            thought: None,
            action: CompletionAction::ToolCall {
                name: "launch".into(),
                arguments: json!({}),
            },
            confidence: None,
        };
        assert!(matches!(
            validate_completion(&prompt, c),
            Err(BackendError::ContractViolation(m)) if m.contains("launch")
        ));
    }

    #[test]
    fn completion_wire_format() {
        let c: Completion = serde_json::from_value(json!({
            "thought": "route it",
            "action": {"type": "handoff", "to": "symptom_assessor", "content": "starch"}
        }))
        .unwrap();
        assert!(matches!(c.action, CompletionAction::Handoff { ref to, .. } if to == "symptom_assessor"));
        let back = serde_json::to_value(&c).unwrap();
        assert_eq!(back["action"]["type"], "handoff");
    }
}
