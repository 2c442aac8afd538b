//! End-of-session report, derived only from the transcript.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::agents::FollowupKind;
use crate::graph::{Event, FlagKind, MemoryError, Recommendation, SessionStatus, SharedMemory, TranscriptEntry};
use crate::kb::{Exclusion, Table};
use crate::spec::{coverage_report, ConversationSpec, CoverageReport};
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContraindicationLine {
    pub canonical: String,
    pub table: Table,
    pub step: String,
    /// Customer wording the term was taken from.
    pub mention: String,
    /// `match`, `alias` or `classify`.
    pub via: String,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedLine {
    pub step: String,
    pub term: String,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FollowupLine {
    pub kind: FollowupKind,
    pub step: String,
    pub question: String,
    /// None while still open.
    pub resolution: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlagLine {
    pub kind: FlagKind,
    pub cause: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub session_id: String,
    pub spec_id: String,
    pub spec_version: String,
    pub kb_id: String,
    pub status: SessionStatus,
    pub turns: u32,
    pub started_at: Option<DateTime<Utc>>,
    pub ended_at: Option<DateTime<Utc>>,
    pub coverage: CoverageReport,
    /// Collected answers by data key.
    pub collected: BTreeMap<String, String>,
    pub contraindications: Vec<ContraindicationLine>,
    pub dropped: Vec<DroppedLine>,
    pub condition_answers: BTreeMap<String, bool>,
    pub recommendation: Option<Recommendation>,
    pub excluded: Vec<Exclusion>,
    pub followups: Vec<FollowupLine>,
    pub flags: Vec<FlagLine>,
}

impl SummaryReport {
    /// Replays `entries` and reports on the resulting state.
    pub fn from_transcript(spec: Arc<ConversationSpec>, entries: &[TranscriptEntry]) -> Result<Self, MemoryError> {
        let memory = SharedMemory::replay(spec, entries)?;
        Ok(Self::from_memory(&memory))
    }

    pub fn from_memory(memory: &SharedMemory) -> Self {
        let state = memory.state();
        let transcript = memory.transcript();
        let final_terms = state.all_terms();

        let mut spec_version = String::new();
        let mut lines: Vec<ContraindicationLine> = Vec::new();
        let mut dropped = Vec::new();
        let mut followups: Vec<(u32, FollowupLine)> = Vec::new();
        for e in transcript {
            match &e.event {
                Event::SessionStarted { spec_version: v, .. } => spec_version = v.clone(),
                Event::TermResolved(r) if final_terms.contains(&r.canonical) => {
                    let line = ContraindicationLine {
                        canonical: r.canonical.clone(),
                        table: r.table,
                        step: r.step.clone(),
                        mention: r.mention.clone(),
                        via: r.via.clone(),
                        score: r.score,
                    };
                    // the latest resolution of a term describes it best
                    match lines.iter_mut().find(|l| l.canonical == r.canonical) {
                        Some(l) => *l = line,
                        None => lines.push(line),
                    }
                }
                Event::TermDropped { step, term, note, .. } => dropped.push(DroppedLine {
                    step: step.clone(),
                    term: term.clone(),
                    note: note.clone(),
                }),
                Event::FollowupOpened(f) => followups.push((
                    f.id,
                    FollowupLine {
                        kind: f.kind,
                        step: f.step.clone(),
                        question: f.question.clone(),
                        resolution: None,
                    },
                )),
                Event::FollowupClosed { id, resolution } => {
                    if let Some((_, l)) = followups.iter_mut().find(|(i, _)| i == id) {
                        l.resolution = Some(resolution.clone());
                    }
                }
                _ => {}
            }
        }

        SummaryReport {
            session_id: state.session_id.clone(),
            spec_id: state.spec_id.clone(),
            spec_version,
            kb_id: state.kb_id.clone(),
            status: state.status,
            turns: state.turn,
            started_at: transcript.first().map(|e| e.at),
            ended_at: transcript.last().map(|e| e.at),
            coverage: coverage_report(memory.spec(), &state.tracker),
            collected: state
                .tracker
                .collected
                .iter()
                .map(|(k, v)| (k.clone(), v.value.clone()))
                .collect(),
            contraindications: lines,
            dropped,
            condition_answers: state.condition_answers.clone(),
            recommendation: state.recommendation.clone(),
            excluded: state.partition.as_ref().map(|p| p.excluded.clone()).unwrap_or_default(),
            followups: followups.into_iter().map(|(_, l)| l).collect(),
            flags: state
                .flags
                .iter()
                .map(|(kind, cause)| FlagLine {
                    kind: *kind,
                    cause: cause.clone(),
                })
                .collect(),
        }
    }
}
