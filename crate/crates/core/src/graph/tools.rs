//! Tool registry and the built-in tools: the five knowledge base tools and
//! the two session tools the conversationalist uses to record progress.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde_json::{json, Value};
use thiserror::Error;

use super::memory::{Event, FlagKind, Recommendation, SharedMemory};
use crate::agents::FollowupKind;
use crate::clock::Clock;
use crate::kb::{KbError, KnowledgeBase, Partition, Table};
use crate::lm::{Backend, BackendError, ParamType, ToolSchema};
use crate::matching::{self, MatchThresholds};
use crate::spec::{RiskLevel, StepKind, StepStatus};

pub const RECOMMENDATION_KEY: &str = "recommendation";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ToolError {
    #[error("unknown tool `{0}`")]
    UnknownTool(String),
    #[error("tool `{0}` is already registered")]
    DuplicateName(String),
    #[error("invalid arguments: {0}")]
    InvalidArguments(String),
    #[error(transparent)]
    Kb(KbError),
    #[error(transparent)]
    Backend(BackendError),
    #[error("{0}")]
    Rejected(String),
}

/// What a tool may touch while it runs.
pub struct ToolEnv<'a> {
    pub kb: &'a KnowledgeBase,
    pub thresholds: MatchThresholds,
    pub backend: Option<&'a dyn Backend>,
    pub memory: &'a mut SharedMemory,
    pub clock: &'a dyn Clock,
    pub actor: &'a str,
    /// Data keys whose steps are filled by the contraindication pipeline.
    pub routed_keys: &'a [String],
}

impl ToolEnv<'_> {
    fn append(&mut self, event: Event) -> Result<(), ToolError> {
        self.memory
            .append(self.clock.now(), self.actor, event)
            .map(|_| ())
            .map_err(|e| ToolError::Rejected(e.to_string()))
    }
}

pub type ToolFn = Arc<dyn Fn(&mut ToolEnv<'_>, &Value) -> Result<Value, ToolError> + Send + Sync>;

#[derive(Clone, Default)]
pub struct ToolRegistry {
    tools: BTreeMap<String, (ToolSchema, ToolFn)>,
}

impl std::fmt::Debug for ToolRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.tools.keys()).finish()
    }
}

impl ToolRegistry {
    pub fn register_tool(&mut self, schema: ToolSchema, f: ToolFn) -> Result<(), ToolError> {
        if self.tools.contains_key(&schema.name) {
            return Err(ToolError::DuplicateName(schema.name));
        }
        self.tools.insert(schema.name.clone(), (schema, f));
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tools.contains_key(name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.tools.keys().map(String::as_str).collect()
    }

    pub fn schema(&self, name: &str) -> Option<&ToolSchema> {
        self.tools.get(name).map(|(s, _)| s)
    }

    /// Registered schemas for `names`, in the given order.
    pub fn schemas_for<S: AsRef<str>>(&self, names: &[S]) -> Vec<ToolSchema> {
        names.iter().filter_map(|n| self.schema(n.as_ref()).cloned()).collect()
    }

    pub fn invoke(&self, name: &str, env: &mut ToolEnv<'_>, arguments: &Value) -> Result<Value, ToolError> {
        let (schema, f) = self
            .tools
            .get(name)
            .ok_or_else(|| ToolError::UnknownTool(name.to_string()))?;
        let args = schema.validate(arguments).map_err(ToolError::InvalidArguments)?;
        f(env, &args)
    }
}

fn str_arg<'v>(args: &'v Value, key: &str) -> Option<&'v str> {
    args.get(key).and_then(Value::as_str)
}

fn threshold_arg(args: &Value, default: f64) -> Result<f64, ToolError> {
    let t = args.get("threshold").and_then(Value::as_f64).unwrap_or(default);
    if t > 0.0 && t <= 1.0 {
        Ok(t)
    } else {
        Err(ToolError::InvalidArguments(format!("threshold {t} outside (0, 1]")))
    }
}

fn terms_arg(args: &Value) -> Vec<String> {
    args.get("terms")
        .and_then(Value::as_array)
        .map(|a| a.iter().filter_map(|v| v.as_str().map(str::to_string)).collect())
        .unwrap_or_default()
}

fn find_tool(table: Table) -> ToolFn {
    Arc::new(move |env, args| {
        let term = str_arg(args, "term").unwrap_or_default();
        let threshold = threshold_arg(args, env.thresholds.default_threshold)?;
        let r = matching::find_most_similar(env.kb, table, term, threshold);
        Ok(serde_json::to_value(r).expect("match result serializes"))
    })
}

fn check_tool(table: Table) -> ToolFn {
    Arc::new(move |env, args| {
        let terms = terms_arg(args);
        let answers = &env.memory.state().condition_answers;
        let p = match table {
            Table::Allergies => matching::check_pill_contraindicating_allergies(env.kb, &terms, answers),
            Table::MedicationsAndDiseases => {
                matching::check_pill_contraindicating_medications_and_diseases(env.kb, &terms, answers)
            }
        }
        .map_err(ToolError::Kb)?;
        Ok(serde_json::to_value(p).expect("partition serializes"))
    })
}

fn classify_tool() -> ToolFn {
    Arc::new(|env, args| {
        let term = str_arg(args, "term").unwrap_or_default();
        let category = matching::classify_contraindication(env.kb, term, env.backend).map_err(ToolError::Backend)?;
        Ok(json!({ "term": term, "category": category }))
    })
}

pub fn recommendation_text(partition: &Partition) -> String {
    if partition.safe.is_empty() {
        "Based on what you've told me, none of the emergency contraceptive pills we have are suitable for you. Please consult the pharmacist at the counter.".to_string()
    } else {
        let names: Vec<&str> = partition.safe.iter().map(|p| p.name.as_str()).collect();
        format!(
            "Based on what you've told me, these emergency contraceptive pills are suitable for you: {}.",
            names.join(", ")
        )
    }
}

fn record_step_tool() -> ToolFn {
    Arc::new(|env, args| {
        let step_id = str_arg(args, "step").unwrap_or_default().to_string();
        let spec = env.memory.spec().clone();
        let pos = spec
            .position(&step_id)
            .ok_or_else(|| ToolError::Rejected(format!("unknown step `{step_id}`")))?;
        let step = &spec.steps[pos];
        let state = env.memory.state();

        let earlier_open: Vec<_> = spec.steps[..pos]
            .iter()
            .filter(|s| s.mandatory && !state.tracker.is_done(&s.id))
            .collect();
        let blocking: Vec<&str> = earlier_open
            .iter()
            .filter(|s| s.risk_level == RiskLevel::Critical)
            .map(|s| s.id.as_str())
            .collect();
        if !blocking.is_empty() {
            return Err(ToolError::Rejected(format!(
                "cannot record `{step_id}` while critical steps are open: {}",
                blocking.join(", ")
            )));
        }

        let is_routed = |key: Option<&str>| key.is_some_and(|k| env.routed_keys.iter().any(|r| r == k));
        let routed = is_routed(step.data_key.as_deref());
        let needs_partition = routed
            || step.data_key.as_deref() == Some(RECOMMENDATION_KEY)
            || step
                .requires
                .iter()
                .any(|r| is_routed(spec.step(r).and_then(|s| s.data_key.as_deref())));
        if needs_partition {
            if let Some(f) = state.open_followups.first() {
                return Err(ToolError::Rejected(format!(
                    "cannot record `{step_id}` while a follow-up is open: {}",
                    f.question
                )));
            }
            if state.current_partition().is_none() {
                return Err(ToolError::Rejected(format!(
                    "cannot record `{step_id}` before the contraindications are verified"
                )));
            }
        }

        let value = if routed {
            let terms = state.working_sets.get(&step_id).cloned().unwrap_or_default();
            Some(if terms.is_empty() {
                "none".to_string()
            } else {
                terms.join("; ")
            })
        } else if step.kind == StepKind::Elicit {
            str_arg(args, "value").map(str::to_string)
        } else {
            None
        };
        let effect = env
            .memory
            .preview_mark(&step_id, StepStatus::Done, value.as_deref())
            .map_err(|e| ToolError::Rejected(e.to_string()))?;

        let skipped: Vec<String> = earlier_open.iter().map(|s| s.id.clone()).collect();
        if !skipped.is_empty() {
            env.append(Event::Flag {
                kind: FlagKind::Advisory,
                cause: format!("`{step_id}` recorded before mandatory steps: {}", skipped.join(", ")),
            })?;
        }
        let replaced = effect.replaced.clone();
        let reconfirm = effect.reconfirm.clone();
        env.append(Event::StepMarked {
            step: step_id.clone(),
            status: StepStatus::Done,
            value: value.clone(),
            effect,
        })?;

        if step.data_key.as_deref() == Some(RECOMMENDATION_KEY) {
            let partition = env.memory.state().current_partition().cloned().expect("checked above");
            env.append(Event::Recommendation(Recommendation {
                text: recommendation_text(&partition),
                safe: partition.safe,
            }))?;
        }

        Ok(json!({
            "observation": if replaced.is_some() { "value_changed" } else { "step_recorded" },
            "step": step_id,
            "value": value,
            "replaced": replaced,
            "reconfirm": reconfirm,
        }))
    })
}

fn record_condition_answer_tool() -> ToolFn {
    Arc::new(|env, args| {
        let term = str_arg(args, "term").unwrap_or_default();
        let answer = args.get("answer").and_then(Value::as_bool).unwrap_or_default();
        let entry = env
            .kb
            .entry(term)
            .filter(|e| e.is_conditional())
            .ok_or_else(|| ToolError::Rejected(format!("`{term}` is not a conditional contraindication")))?;
        let canonical = entry.term.clone();
        env.append(Event::ConditionAnswered {
            term: canonical.clone(),
            answer,
        })?;
        let open: Vec<u32> = env
            .memory
            .state()
            .open_followups
            .iter()
            .filter(|f| f.kind == FollowupKind::Condition && f.key == canonical)
            .map(|f| f.id)
            .collect();
        for id in open {
            env.append(Event::FollowupClosed {
                id,
                resolution: format!("answered {answer}"),
            })?;
        }
        Ok(json!({ "observation": "condition_recorded", "term": canonical, "answer": answer }))
    })
}

pub const FIND_ALLERGIES: &str = "find_most_similar_word_allergies";
pub const FIND_MEDICATIONS: &str = "find_most_similar_word_regular_medications_and_diseases";
pub const CHECK_ALLERGIES: &str = "check_pill_contraindicating_allergies";
pub const CHECK_MEDICATIONS: &str = "check_pill_contraindicating_medications_and_diseases";
pub const CLASSIFY: &str = "classify_contraindication";
pub const RECORD_STEP: &str = "record_step";
pub const RECORD_CONDITION_ANSWER: &str = "record_condition_answer";

/// Registry with every built-in tool.
pub fn ecp_registry() -> ToolRegistry {
    let mut r = ToolRegistry::default();
    let find = |name: &str, what: &str| {
        ToolSchema::new(name, what)
            .param("term", ParamType::String, true, "Term to look up.")
            .param("threshold", ParamType::Number, false, "Minimum similarity in (0, 1].")
    };
    let check = |name: &str, what: &str| {
        ToolSchema::new(name, what).param("terms", ParamType::StringList, true, "Canonical terms.")
    };
    let tools: Vec<(ToolSchema, ToolFn)> = vec![
        (
            find(FIND_ALLERGIES, "Return the most similar allergy term or terms."),
            find_tool(Table::Allergies),
        ),
        (
            find(
                FIND_MEDICATIONS,
                "Return the most similar medication or disease term or terms.",
            ),
            find_tool(Table::MedicationsAndDiseases),
        ),
        (
            check(CHECK_ALLERGIES, "Partition the pills by the given allergy terms."),
            check_tool(Table::Allergies),
        ),
        (
            check(
                CHECK_MEDICATIONS,
                "Partition the pills by the given medication and disease terms.",
            ),
            check_tool(Table::MedicationsAndDiseases),
        ),
        (
            ToolSchema::new(
                CLASSIFY,
                "If the term is a type of a known category, return that category, else None.",
            )
            .param("term", ParamType::String, true, "Term to classify."),
            classify_tool(),
        ),
        (
            ToolSchema::new(RECORD_STEP, "Mark a conversation step as covered.")
                .param("step", ParamType::String, true, "Step id.")
                .param(
                    "value",
                    ParamType::String,
                    false,
                    "Customer's answer, for elicit steps.",
                ),
            record_step_tool(),
        ),
        (
            ToolSchema::new(
                RECORD_CONDITION_ANSWER,
                "Record the yes/no answer to a conditional contraindication.",
            )
            .param("term", ParamType::String, true, "Canonical term.")
            .param("answer", ParamType::Boolean, true, "Whether the condition holds."),
            record_condition_answer_tool(),
        ),
    ];
    for (schema, f) in tools {
        r.register_tool(schema, f).expect("built-in names are distinct");
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::SteppingClock;
    use crate::kb::load_kb;
    use crate::spec::parse_spec;

    fn kb() -> KnowledgeBase {
        load_kb(include_str!("../../../../fixtures/kb/ecp_kb.yaml")).unwrap()
    }

    fn memory() -> SharedMemory {
        SharedMemory::new(Arc::new(
            parse_spec(include_str!("../../../../fixtures/spec/ecp_counseling.yaml")).unwrap(),
        ))
    }

    #[test]
    fn all_five_kb_tools_are_invocable() {
        let r = ecp_registry();
        let kb = kb();
        let mut mem = memory();
        let clock = SteppingClock::fixed();
        let mut env = ToolEnv {
            kb: &kb,
            thresholds: MatchThresholds::default(),
            backend: None,
            memory: &mut mem,
            clock: &clock,
            actor: "test",
            routed_keys: &[],
        };
        let v = r.invoke(FIND_ALLERGIES, &mut env, &json!({"term": "starch"})).unwrap();
        assert_eq!(v["matches"].as_array().unwrap().len(), 2);
        let v = r
            .invoke(FIND_MEDICATIONS, &mut env, &json!({"term": "astma", "threshold": 0.8}))
            .unwrap();
        assert_eq!(v["matches"][0]["term"], "Asthma");
        let v = r
            .invoke(CHECK_ALLERGIES, &mut env, &json!({"terms": ["corn starch"]}))
            .unwrap();
        assert_eq!(v["excluded"][0]["product"]["id"], "levodonna");
        let v = r.invoke(CHECK_MEDICATIONS, &mut env, &json!({"terms": []})).unwrap();
        assert_eq!(v["safe"].as_array().unwrap().len(), 3);
        let v = r
            .invoke(CLASSIFY, &mut env, &json!({"term": "Celiac disease"}))
            .unwrap();
        assert_eq!(v["category"], "Severe Malabsorption Disorder");
        assert!(matches!(
            r.invoke(CHECK_MEDICATIONS, &mut env, &json!({"terms": ["Asthma"]})),
            Err(ToolError::Kb(KbError::UnansweredCondition { .. }))
        ));
        assert!(matches!(
            r.invoke(FIND_ALLERGIES, &mut env, &json!({"term": "x", "threshold": 0})),
            Err(ToolError::InvalidArguments(_))
        ));
    }

    #[test]
    fn registry_errors() {
        let empty = ToolRegistry::default();
        let kb = kb();
        let mut mem = memory();
        let clock = SteppingClock::fixed();
        let mut env = ToolEnv {
            kb: &kb,
            thresholds: MatchThresholds::default(),
            backend: None,
            memory: &mut mem,
            clock: &clock,
            actor: "test",
            routed_keys: &[],
        };
        assert_eq!(
            empty.invoke(FIND_ALLERGIES, &mut env, &json!({})),
            Err(ToolError::UnknownTool(FIND_ALLERGIES.into()))
        );
        let mut r = ecp_registry();
        let f = r.tools[CLASSIFY].1.clone();
        assert_eq!(
            r.register_tool(ToolSchema::new(CLASSIFY, ""), f),
            Err(ToolError::DuplicateName(CLASSIFY.into()))
        );
    }

    #[test]
    fn critical_steps_hard_block_later_records() {
        let r = ecp_registry();
        let kb = kb();
        let mut mem = memory();
        let clock = SteppingClock::fixed();
        let mut env = ToolEnv {
            kb: &kb,
            thresholds: MatchThresholds::default(),
            backend: None,
            memory: &mut mem,
            clock: &clock,
            actor: "test",
            routed_keys: &[],
        };
        let err = r
            .invoke(
                RECORD_STEP,
                &mut env,
                &json!({"step": "earlier_unprotected_intercourse", "value": "no"}),
            )
            .unwrap_err();
        assert!(err.to_string().contains("time_since_intercourse"), "{err}");
        let v = r
            .invoke(
                RECORD_STEP,
                &mut env,
                &json!({"step": "time_since_intercourse", "value": "14 hours"}),
            )
            .unwrap();
        assert_eq!(v["observation"], "step_recorded");
        let v = r
            .invoke(
                RECORD_STEP,
                &mut env,
                &json!({"step": "time_since_intercourse", "value": "20 hours"}),
            )
            .unwrap();
        assert_eq!(v["observation"], "value_changed");
        assert_eq!(v["replaced"], "14 hours");
    }
}
