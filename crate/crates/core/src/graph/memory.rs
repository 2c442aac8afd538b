//! Shared memory as an append-only event log. Every piece of session state
//! is a fold over the transcript, so replaying stored entries rebuilds it.

use std::collections::BTreeMap;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::agents::{Followup, HandoffMessage, HandoffPayload};
use crate::kb::{Partition, ProductRef, Table};
use crate::spec::{ConversationSpec, MarkEffect, ProgressTracker, StepStatus, TrackerError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MemoryError {
    #[error(transparent)]
    Tracker(#[from] TrackerError),
    #[error("entry {seq} out of order (expected {expected})")]
    OutOfOrder { seq: u64, expected: u64 },
    #[error("replayed step mark on `{0}` diverged from the recorded effect")]
    Divergence(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    #[default]
    Active,
    Complete,
    Escalated,
    Abandoned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagKind {
    /// Handed to a human; the session stops.
    Escalation,
    /// A mandatory step was passed over; recorded for review only.
    Advisory,
    /// The interpreter's strict re-check rejected a term.
    Safeguard,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Awaiting {
    Step { step: String },
    Followup { id: u32, key: String },
}

impl Awaiting {
    /// Key a scripted customer answers on.
    pub fn script_key(&self) -> String {
        match self {
            Awaiting::Step { step } => step.clone(),
            Awaiting::Followup { key, .. } => format!("followup:{key}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Recommendation {
    pub safe: Vec<ProductRef>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    pub step: String,
    pub mention: String,
    /// Extracted term that was matched.
    pub term: String,
    pub canonical: String,
    pub table: Table,
    /// Similarity rounded to four places; absent for category re-labels.
    pub score: Option<f64>,
    pub relabeled: bool,
    /// `match`, `alias` or `classify`.
    pub via: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    SessionStarted {
        session_id: String,
        spec_id: String,
        spec_version: String,
        kb_id: String,
        steps: Vec<String>,
    },
    CustomerMessage {
        text: String,
    },
    Thought {
        text: String,
    },
    ToolCall {
        tool: String,
        arguments: Value,
    },
    Observation {
        tool: String,
        result: Value,
    },
    ErrorObservation {
        error: String,
        retry: bool,
    },
    Handoff(HandoffMessage),
    TermsExtracted {
        step: String,
        mention: String,
        terms: Vec<String>,
    },
    TermResolved(Resolution),
    TermDropped {
        step: String,
        mention: String,
        term: String,
        note: String,
    },
    WorkingSetUpdated {
        step: String,
        terms: Vec<String>,
    },
    FollowupOpened(Followup),
    FollowupClosed {
        id: u32,
        resolution: String,
    },
    StepMarked {
        step: String,
        status: StepStatus,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        value: Option<String>,
        effect: MarkEffect,
    },
    ConditionAnswered {
        term: String,
        answer: bool,
    },
    Recommendation(Recommendation),
    Reply {
        text: String,
        awaiting: Option<Awaiting>,
    },
    Flag {
        kind: FlagKind,
        cause: String,
    },
    Note {
        text: String,
    },
    StatusChanged {
        status: SessionStatus,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub seq: u64,
    pub turn: u32,
    pub at: DateTime<Utc>,
    pub actor: String,
    pub event: Event,
}

/// Everything derived from the transcript.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct MemoryState {
    pub session_id: String,
    pub spec_id: String,
    pub kb_id: String,
    pub turn: u32,
    pub status: SessionStatus,
    pub tracker: ProgressTracker,
    /// Canonical contraindication terms per conversation step.
    pub working_sets: BTreeMap<String, Vec<String>>,
    pub condition_answers: BTreeMap<String, bool>,
    pub open_followups: Vec<Followup>,
    pub next_followup_id: u32,
    pub partition: Option<Partition>,
    /// False once terms or answers changed after the partition was made.
    pub partition_current: bool,
    pub recommendation: Option<Recommendation>,
    pub awaiting: Option<Awaiting>,
    pub scratch: BTreeMap<String, Vec<String>>,
    pub flags: Vec<(FlagKind, String)>,
}

impl MemoryState {
    /// Union of all working sets, in first-seen order.
    pub fn all_terms(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for terms in self.working_sets.values() {
            for t in terms {
                if !out.contains(t) {
                    out.push(t.clone());
                }
            }
        }
        out
    }

    pub fn current_partition(&self) -> Option<&Partition> {
        self.partition.as_ref().filter(|_| self.partition_current)
    }

    pub fn is_escalated(&self) -> bool {
        self.flags.iter().any(|(k, _)| *k == FlagKind::Escalation)
    }
}

#[derive(Debug, Clone)]
pub struct SharedMemory {
    spec: Arc<ConversationSpec>,
    transcript: Vec<TranscriptEntry>,
    state: MemoryState,
}

impl SharedMemory {
    pub fn new(spec: Arc<ConversationSpec>) -> Self {
        let state = MemoryState {
            tracker: ProgressTracker::new(&spec),
            ..Default::default()
        };
        Self {
            spec,
            transcript: Vec::new(),
            state,
        }
    }

    pub fn replay(spec: Arc<ConversationSpec>, entries: &[TranscriptEntry]) -> Result<Self, MemoryError> {
        let mut m = Self::new(spec);
        for e in entries {
            let expected = m.transcript.len() as u64;
            if e.seq != expected {
                return Err(MemoryError::OutOfOrder { seq: e.seq, expected });
            }
            m.apply(&e.actor, &e.event)?;
            m.transcript.push(e.clone());
        }
        Ok(m)
    }

    pub fn spec(&self) -> &Arc<ConversationSpec> {
        &self.spec
    }

    pub fn state(&self) -> &MemoryState {
        &self.state
    }

    pub fn transcript(&self) -> &[TranscriptEntry] {
        &self.transcript
    }

    /// Applies `event` and records it. On error nothing is recorded.
    pub fn append(&mut self, at: DateTime<Utc>, actor: &str, event: Event) -> Result<&TranscriptEntry, MemoryError> {
        self.apply(actor, &event)?;
        self.transcript.push(TranscriptEntry {
            seq: self.transcript.len() as u64,
            turn: self.state.turn,
            at,
            actor: actor.to_string(),
            event,
        });
        Ok(self.transcript.last().expect("just pushed"))
    }

    /// Tries a step mark against a copy of the tracker.
    pub fn preview_mark(
        &self,
        step: &str,
        status: StepStatus,
        value: Option<&str>,
    ) -> Result<MarkEffect, TrackerError> {
        self.state
            .tracker
            .clone()
            .mark_step(&self.spec, step, status, value, self.state.turn)
    }

    fn apply(&mut self, actor: &str, event: &Event) -> Result<(), MemoryError> {
        let s = &mut self.state;
        match event {
            Event::SessionStarted {
                session_id,
                spec_id,
                kb_id,
                ..
            } => {
                s.session_id = session_id.clone();
                s.spec_id = spec_id.clone();
                s.kb_id = kb_id.clone();
                s.status = SessionStatus::Active;
            }
            Event::CustomerMessage { .. } => s.turn += 1,
            Event::Handoff(HandoffMessage {
                payload: HandoffPayload::SafePillPartition { partition },
                ..
            }) => {
                s.partition = Some(partition.clone());
                s.partition_current = true;
            }
            Event::WorkingSetUpdated { step, terms } => {
                s.working_sets.insert(step.clone(), terms.clone());
                s.partition_current = false;
            }
            Event::FollowupOpened(f) => {
                s.next_followup_id = s.next_followup_id.max(f.id + 1);
                s.open_followups.push(f.clone());
            }
            Event::FollowupClosed { id, .. } => s.open_followups.retain(|f| f.id != *id),
            Event::StepMarked {
                step,
                status,
                value,
                effect,
            } => {
                let got = s
                    .tracker
                    .mark_step(&self.spec, step, *status, value.as_deref(), s.turn)?;
                if &got != effect {
                    return Err(MemoryError::Divergence(step.clone()));
                }
            }
            Event::ConditionAnswered { term, answer } => {
                s.condition_answers.insert(term.clone(), *answer);
                s.partition_current = false;
            }
            Event::Recommendation(r) => s.recommendation = Some(r.clone()),
            Event::Reply { awaiting, .. } => s.awaiting = awaiting.clone(),
            Event::Flag { kind, cause } => s.flags.push((*kind, cause.clone())),
            Event::Note { text } => s.scratch.entry(actor.to_string()).or_default().push(text.clone()),
            Event::StatusChanged { status } => s.status = *status,
            Event::Thought { .. }
            | Event::ToolCall { .. }
            | Event::Observation { .. }
            | Event::ErrorObservation { .. }
            | Event::Handoff(_)
            | Event::TermsExtracted { .. }
            | Event::TermResolved(_)
            | Event::TermDropped { .. } => {}
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::{Clock, SteppingClock};
    use crate::spec::parse_spec;

    fn spec() -> Arc<ConversationSpec> {
        Arc::new(
            parse_spec(
                r#"
medication_id: demo
version: "1"
steps:
  - {id: hours, title: Hours, goal: "How long ago?", kind: elicit, risk_level: critical, mandatory: true, data_key: hours}
  - {id: window, title: Window, goal: Assess, kind: decide, risk_level: high, mandatory: true, requires: [hours]}
"#,
            )
            .unwrap(),
        )
    }

    #[test]
    fn replay_rebuilds_state_and_transcript() {
        let clock = SteppingClock::fixed();
        let mut m = SharedMemory::new(spec());
        m.append(
            clock.now(),
            "runtime",
            Event::SessionStarted {
                session_id: "s1".into(),
                spec_id: "demo".into(),
                spec_version: "1".into(),
                kb_id: "kb".into(),
                steps: vec!["hours".into(), "window".into()],
            },
        )
        .unwrap();
        m.append(
            clock.now(),
            "customer",
            Event::CustomerMessage {
                text: "14 hours".into(),
            },
        )
        .unwrap();
        let effect = m.preview_mark("hours", StepStatus::Done, Some("14 hours")).unwrap();
        m.append(
            clock.now(),
            "conversationalist",
            Event::StepMarked {
                step: "hours".into(),
                status: StepStatus::Done,
                value: Some("14 hours".into()),
                effect,
            },
        )
        .unwrap();
        m.append(
            clock.now(),
            "symptom_assessor",
            Event::WorkingSetUpdated {
                step: "hours".into(),
                terms: vec!["Asthma".into()],
            },
        )
        .unwrap();
        m.append(clock.now(), "symptom_assessor", Event::Note { text: "checked".into() })
            .unwrap();

        let json = serde_json::to_string(m.transcript()).unwrap();
        let entries: Vec<TranscriptEntry> = serde_json::from_str(&json).unwrap();
        let again = SharedMemory::replay(spec(), &entries).unwrap();
        assert_eq!(again.state(), m.state());
        assert_eq!(again.transcript(), m.transcript());
        assert_eq!(m.state().turn, 1);
        assert_eq!(m.transcript()[2].turn, 1);
        assert_eq!(m.state().scratch["symptom_assessor"], ["checked"]);
    }

    #[test]
    fn failed_append_records_nothing() {
        let mut m = SharedMemory::new(spec());
        let err = m.append(
            SteppingClock::fixed().now(),
            "x",
            Event::StepMarked {
                step: "window".into(),
                status: StepStatus::Done,
                value: None,
                effect: MarkEffect::default(),
            },
        );
        assert!(err.is_err());
        assert!(m.transcript().is_empty());
    }

    #[test]
    fn out_of_order_replay_rejected() {
        let entry = TranscriptEntry {
            seq: 3,
            turn: 0,
            at: SteppingClock::fixed().now(),
            actor: "x".into(),
            event: Event::Note { text: "n".into() },
        };
        assert!(matches!(
            SharedMemory::replay(spec(), &[entry]),
            Err(MemoryError::OutOfOrder { seq: 3, expected: 0 })
        ));
    }
}
