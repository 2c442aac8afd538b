//! Conversationalist prompt assembly. The prompt's context variables expose
//! the conversation state a model needs to pick its next action.

use super::{AgentProfile, FollowupKind, CONVERSATIONALIST};
use crate::graph::tools::RECOMMENDATION_KEY;
use crate::graph::{Awaiting, Event, SharedMemory, ToolRegistry};
use crate::lm::{Prompt, Role, Turn};
use crate::spec::{next_pending_steps, StepKind};

pub const FALLBACK_REPLY: &str =
    "I'm sorry, I can't safely continue this consultation. A human pharmacist will assist you.";

/// Per-iteration inputs that are not part of shared memory.
#[derive(Debug, Clone, Default)]
pub struct PromptState<'a> {
    pub customer: &'a str,
    /// `none`, `step_recorded`, `value_changed`, `condition_recorded`,
    /// `followup` or `partition`.
    pub observation: &'a str,
    pub last_error: Option<&'a str>,
    /// Transcript index of this turn's customer message.
    pub turn_start: usize,
    /// Step whose contraindications were last resolved in this turn.
    pub resolved_step: Option<&'a str>,
}

fn tidy(value: &str) -> &str {
    value.trim().trim_end_matches(['.', '!', '?']).trim()
}

fn describe_followup(memory: &SharedMemory, id: u32) -> Option<(FollowupKind, String, Vec<String>)> {
    memory.transcript().iter().rev().find_map(|e| match &e.event {
        Event::FollowupOpened(f) if f.id == id => Some((f.kind, f.question.clone(), f.candidates.clone())),
        _ => None,
    })
}

/// What this turn has said so far: confirmations, re-confirmations and the
/// text of inform steps covered.
fn confirmation(memory: &SharedMemory, from: usize, routed: &[String]) -> String {
    let spec = memory.spec();
    let mut parts: Vec<String> = Vec::new();
    for e in &memory.transcript()[from.min(memory.transcript().len())..] {
        match &e.event {
            Event::StepMarked {
                step, value, effect, ..
            } => {
                let Some(s) = spec.step(step) else { continue };
                let is_routed = s.data_key.as_ref().is_some_and(|k| routed.contains(k));
                match (s.kind, value, &effect.replaced) {
                    (StepKind::Elicit, Some(v), Some(prev)) => parts.push(format!(
                        "You changed your answer from \"{}\" to \"{}\". I have updated it and will go over what depends on it again.",
                        tidy(prev),
                        tidy(v)
                    )),
                    (StepKind::Elicit, Some(v), None) if is_routed && v == "none" => {
                        parts.push("Thank you, I have noted that there is nothing to report.".into())
                    }
                    (StepKind::Elicit, Some(v), None) => parts.push(format!("Thank you, noted: {}.", tidy(v))),
                    (StepKind::Inform, _, _) if s.data_key.as_deref() == Some(RECOMMENDATION_KEY) => {
                        if let Some(r) = &memory.state().recommendation {
                            parts.push(r.text.clone());
                        }
                    }
                    (StepKind::Inform, _, _) => parts.push(s.goal.clone()),
                    _ => {}
                }
            }
            Event::ConditionAnswered { .. } => parts.push("Thank you for clarifying.".into()),
            _ => {}
        }
    }
    parts.join(" ")
}

fn history(memory: &SharedMemory, from: usize) -> Vec<Turn> {
    let mut turns = Vec::new();
    for (i, e) in memory.transcript().iter().enumerate() {
        let in_turn = i >= from;
        let t = match &e.event {
            Event::CustomerMessage { text } => Some((Role::Customer, text.clone())),
            Event::Reply { text, .. } => Some((Role::Agent, text.clone())),
            Event::ToolCall { tool, arguments } if in_turn && e.actor == CONVERSATIONALIST => {
                Some((Role::Tool, format!("call {tool} {arguments}")))
            }
            Event::Observation { tool, result } if in_turn && e.actor == CONVERSATIONALIST => {
                Some((Role::Tool, format!("{tool} -> {result}")))
            }
            Event::ErrorObservation { error, .. } if in_turn => Some((Role::Tool, format!("error: {error}"))),
            Event::Handoff(h) if in_turn && h.to == CONVERSATIONALIST => Some((
                Role::Tool,
                format!(
                    "{} -> {}",
                    h.from,
                    serde_json::to_string(&h.payload).unwrap_or_default()
                ),
            )),
            _ => None,
        };
        if let Some((role, text)) = t {
            turns.push(Turn { role, text });
        }
    }
    turns
}

pub fn conversationalist_prompt(
    profile: &AgentProfile,
    memory: &SharedMemory,
    registry: &ToolRegistry,
    ps: &PromptState<'_>,
) -> Prompt {
    let spec = memory.spec();
    let state = memory.state();
    let routed = &profile.routed_data_keys;
    let mut p = Prompt::new(CONVERSATIONALIST, profile.system_prompt());
    p.tool_schemas = registry.schemas_for(&profile.tools);
    p.history = history(memory, ps.turn_start);

    let mut set = |k: &str, v: String| {
        p.context.insert(k.to_string(), v);
    };
    set("task", "converse".into());
    set("agent_name", profile.name.clone());
    set("customer", ps.customer.to_string());
    set("observation", ps.observation.to_string());
    set("last_error", ps.last_error.unwrap_or_default().to_string());

    match &state.awaiting {
        None => set("awaiting_kind", "none".into()),
        Some(Awaiting::Step { step }) => {
            set("awaiting_kind", "step".into());
            set("awaiting_step_id", step.clone());
            if let Some(s) = spec.step(step) {
                set("awaiting_step_kind", format!("{:?}", s.kind).to_lowercase());
                let key = s.data_key.clone().unwrap_or_default();
                let route = if routed.contains(&key) { "symptom_assessor" } else { "" };
                set("awaiting_route", route.into());
                if let Some(v) = state.tracker.value(&key) {
                    set("recorded_value", v.to_string());
                }
                set("awaiting_data_key", key);
            }
        }
        Some(Awaiting::Followup { id, key }) => {
            set("awaiting_kind", "followup".into());
            set("followup_term", key.clone());
            if let Some((kind, question, candidates)) = describe_followup(memory, *id) {
                set("followup_kind", format!("{kind:?}").to_lowercase());
                set("followup_question", question);
                set("followup_candidates", candidates.join("; "));
            }
        }
    }

    let next = next_pending_steps(spec, &state.tracker);
    match next.first() {
        Some(s) => {
            set("next_id", s.id.clone());
            set("next_kind", format!("{:?}", s.kind).to_lowercase());
            set("next_goal", s.goal.clone());
            set("next_data_key", s.data_key.clone().unwrap_or_default());
        }
        None => set("next_kind", "none".into()),
    }

    if let Some(step) = ps.resolved_step {
        set("resolved_step", step.to_string());
        let terms = state.working_sets.get(step).cloned().unwrap_or_default();
        set(
            "resolved",
            if terms.is_empty() {
                "none".into()
            } else {
                terms.join("; ")
            },
        );
    }
    if let Some(r) = &state.recommendation {
        set("recommendation", r.text.clone());
    }
    let marked = memory.transcript()[ps.turn_start.min(memory.transcript().len())..]
        .iter()
        .filter(|e| matches!(e.event, Event::StepMarked { .. }))
        .count();
    set("marked_this_turn", marked.to_string());
    set("confirmation", confirmation(memory, ps.turn_start, routed));
    let ask = match (state.open_followups.first(), next.first()) {
        (Some(f), _) => f.question.clone(),
        (None, Some(s)) if s.kind == StepKind::Elicit => s.goal.clone(),
        (None, Some(_)) => "Shall I go on?".into(),
        _ => String::new(),
    };
    set("ask", ask);
    p
}
