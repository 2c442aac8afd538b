//! Conversation specification: the ordered counseling procedure and the
//! tracker recording how far a session has progressed through it.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpecError {
    #[error("syntax error in conversation spec: {0}")]
    Syntax(String),
    #[error("invalid conversation spec: {0}")]
    Validation(#[from] ValidationError),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ValidationError {
    #[error("spec has no steps")]
    NoSteps,
    #[error("duplicate step id `{step}`")]
    DuplicateStep { step: String },
    #[error("step `{step}` requires unknown step `{missing}`")]
    DanglingRequires { step: String, missing: String },
    #[error("step `{step}` requires `{target}`, which does not come earlier in the spec")]
    ForwardRequires { step: String, target: String },
    #[error("critical step `{step}` must be mandatory")]
    CriticalNotMandatory { step: String },
    #[error("elicit step `{step}` has no data_key")]
    ElicitWithoutDataKey { step: String },
    #[error("data_key `{data_key}` is used by both `{first}` and `{second}`")]
    DuplicateDataKey {
        data_key: String,
        first: String,
        second: String,
    },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TrackerError {
    #[error("unknown step `{0}`")]
    UnknownStep(String),
    #[error("step `{0}` is an elicit step and needs a value to be marked done")]
    MissingValue(String),
    #[error("step `{0}` does not collect a value")]
    UnexpectedValue(String),
    #[error("step `{step}` cannot be done before {pending:?}")]
    PrerequisitesPending { step: String, pending: Vec<String> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Inform,
    Elicit,
    Decide,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskLevel {
    Low,
    Medium,
    High,
    Critical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    pub id: String,
    pub title: String,
    /// What must be communicated to, or obtained from, the customer.
    pub goal: String,
    pub kind: StepKind,
    pub risk_level: RiskLevel,
    pub mandatory: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub requires: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_key: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConversationSpec {
    pub medication_id: String,
    pub version: String,
    pub steps: Vec<Step>,
}

impl ConversationSpec {
    pub fn step(&self, id: &str) -> Option<&Step> {
        self.steps.iter().find(|s| s.id == id)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.steps.iter().position(|s| s.id == id)
    }

    pub fn step_for_data_key(&self, key: &str) -> Option<&Step> {
        self.steps.iter().find(|s| s.data_key.as_deref() == Some(key))
    }

    /// Steps that transitively require `id`, in spec order.
    pub fn dependents(&self, id: &str) -> Vec<&Step> {
        let mut reached: HashSet<&str> = HashSet::from([id]);
        let mut out = Vec::new();
        // requires only point backwards, so one forward pass closes the set
        for step in &self.steps {
            if step.requires.iter().any(|r| reached.contains(r.as_str())) {
                reached.insert(step.id.as_str());
                out.push(step);
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.steps.is_empty() {
            return Err(ValidationError::NoSteps);
        }
        let all: HashSet<&str> = self.steps.iter().map(|s| s.id.as_str()).collect();
        let mut seen: HashSet<&str> = HashSet::new();
        let mut data_keys: BTreeMap<&str, &str> = BTreeMap::new();
        for step in &self.steps {
            if !seen.insert(step.id.as_str()) {
                return Err(ValidationError::DuplicateStep { step: step.id.clone() });
            }
            for req in &step.requires {
                if !all.contains(req.as_str()) {
                    return Err(ValidationError::DanglingRequires {
                        step: step.id.clone(),
                        missing: req.clone(),
                    });
                }
                if !seen.contains(req.as_str()) || req == &step.id {
                    return Err(ValidationError::ForwardRequires {
                        step: step.id.clone(),
                        target: req.clone(),
                    });
                }
            }
            if step.risk_level == RiskLevel::Critical && !step.mandatory {
                return Err(ValidationError::CriticalNotMandatory { step: step.id.clone() });
            }
            if step.kind == StepKind::Elicit && step.data_key.is_none() {
                return Err(ValidationError::ElicitWithoutDataKey { step: step.id.clone() });
            }
            if let Some(key) = step.data_key.as_deref() {
                if let Some(first) = data_keys.insert(key, step.id.as_str()) {
                    return Err(ValidationError::DuplicateDataKey {
                        data_key: key.to_string(),
                        first: first.to_string(),
                        second: step.id.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("spec serializes")
    }
}

pub fn parse_spec(document: &str) -> Result<ConversationSpec, SpecError> {
    let spec: ConversationSpec = serde_yaml::from_str(document).map_err(|e| SpecError::Syntax(e.to_string()))?;
    spec.validate()?;
    Ok(spec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    Pending,
    InProgress,
    Done,
    ReconfirmNeeded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectedValue {
    pub value: String,
    /// Turn in which the value was recorded.
    pub turn: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MarkEffect {
    /// Previously collected value, when this mark replaced a different one.
    pub replaced: Option<String>,
    /// Steps flipped to `reconfirm_needed` as a consequence.
    pub reconfirm: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ProgressTracker {
    pub statuses: BTreeMap<String, StepStatus>,
    pub collected: BTreeMap<String, CollectedValue>,
}

impl ProgressTracker {
    pub fn new(spec: &ConversationSpec) -> Self {
        Self {
            statuses: spec.steps.iter().map(|s| (s.id.clone(), StepStatus::Pending)).collect(),
            collected: BTreeMap::new(),
        }
    }

    pub fn status(&self, step: &str) -> StepStatus {
        self.statuses.get(step).copied().unwrap_or(StepStatus::Pending)
    }

    pub fn is_done(&self, step: &str) -> bool {
        self.status(step) == StepStatus::Done
    }

    pub fn value(&self, data_key: &str) -> Option<&str> {
        self.collected.get(data_key).map(|c| c.value.as_str())
    }

    /// Updates one step's status, returning what else changed.
    pub fn mark_step(
        &mut self,
        spec: &ConversationSpec,
        step_id: &str,
        status: StepStatus,
        value: Option<&str>,
        turn: u32,
    ) -> Result<MarkEffect, TrackerError> {
        let step = spec
            .step(step_id)
            .ok_or_else(|| TrackerError::UnknownStep(step_id.to_string()))?;
        let collects = step.kind == StepKind::Elicit && status == StepStatus::Done;
        match (collects, value) {
            (true, None) => return Err(TrackerError::MissingValue(step_id.to_string())),
            (false, Some(_)) => return Err(TrackerError::UnexpectedValue(step_id.to_string())),
            _ => {}
        }
        if status == StepStatus::Done {
            let pending: Vec<String> = step.requires.iter().filter(|r| !self.is_done(r)).cloned().collect();
            if !pending.is_empty() {
                return Err(TrackerError::PrerequisitesPending {
                    step: step_id.to_string(),
                    pending,
                });
            }
        }

        let mut effect = MarkEffect::default();
        let was_done = self.is_done(step_id);
        let mut invalidate = was_done && status != StepStatus::Done;
        if let (Some(value), Some(key)) = (value, step.data_key.as_deref()) {
            let previous = self.collected.insert(
                key.to_string(),
                CollectedValue {
                    value: value.to_string(),
                    turn,
                },
            );
            if let Some(prev) = previous {
                if prev.value != value {
                    effect.replaced = Some(prev.value);
                    invalidate = true;
                }
            }
        }
        self.statuses.insert(step_id.to_string(), status);
        if invalidate {
            for dep in spec.dependents(step_id) {
                if self.is_done(&dep.id) {
                    self.statuses.insert(dep.id.clone(), StepStatus::ReconfirmNeeded);
                    effect.reconfirm.push(dep.id.clone());
                }
            }
        }
        Ok(effect)
    }

    /// Re-applies a recorded effect without consulting the spec.
    pub fn apply_effect(&mut self, effect: &MarkEffect) {
        for id in &effect.reconfirm {
            self.statuses.insert(id.clone(), StepStatus::ReconfirmNeeded);
        }
    }
}

/// Steps that can be worked on now, in spec order.
pub fn next_pending_steps<'a>(spec: &'a ConversationSpec, tracker: &ProgressTracker) -> Vec<&'a Step> {
    spec.steps
        .iter()
        .filter(|s| {
            matches!(
                tracker.status(&s.id),
                StepStatus::Pending | StepStatus::ReconfirmNeeded | StepStatus::InProgress
            )
        })
        .filter(|s| s.requires.iter().all(|r| tracker.is_done(r)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepCoverage {
    pub id: String,
    pub status: StepStatus,
    pub mandatory: bool,
    pub risk_level: RiskLevel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub steps: Vec<StepCoverage>,
    pub mandatory_remaining: Vec<String>,
    pub complete: bool,
}

impl CoverageReport {
    pub fn mandatory_total(&self) -> usize {
        self.steps.iter().filter(|s| s.mandatory).count()
    }

    pub fn mandatory_done(&self) -> usize {
        self.mandatory_total() - self.mandatory_remaining.len()
    }

    /// Fraction of mandatory steps done; 1.0 for a spec without mandatory steps.
    pub fn fraction(&self) -> f64 {
        let total = self.mandatory_total();
        if total == 0 {
            1.0
        } else {
            self.mandatory_done() as f64 / total as f64
        }
    }
}

pub fn coverage_report(spec: &ConversationSpec, tracker: &ProgressTracker) -> CoverageReport {
    let steps: Vec<StepCoverage> = spec
        .steps
        .iter()
        .map(|s| StepCoverage {
            id: s.id.clone(),
            status: tracker.status(&s.id),
            mandatory: s.mandatory,
            risk_level: s.risk_level,
        })
        .collect();
    let mandatory_remaining: Vec<String> = steps
        .iter()
        .filter(|s| s.mandatory && s.status != StepStatus::Done)
        .map(|s| s.id.clone())
        .collect();
    CoverageReport {
        complete: mandatory_remaining.is_empty(),
        steps,
        mandatory_remaining,
    }
}

/// Ids of steps that are critical, per spec order.
pub fn critical_steps(spec: &ConversationSpec) -> BTreeSet<&str> {
    spec.steps
        .iter()
        .filter(|s| s.risk_level == RiskLevel::Critical)
        .map(|s| s.id.as_str())
        .collect()
}
