//! Symptom assessor: turns free-text mentions into canonical terms, asks
//! for clarification when a mention is ambiguous or a term is conditional.

use serde_json::{json, Value};

use super::{AgentContext, AgentError, AgentProfile, Followup, FollowupKind, SYMPTOM_ASSESSOR};
use crate::graph::tools::{CLASSIFY, FIND_ALLERGIES, FIND_MEDICATIONS};
use crate::graph::{Event, Resolution};
use crate::kb::Table;
use crate::lm::{BackendError, CompletionAction, Prompt};
use crate::matching::{normalize, MatchResult, TermMatch};

pub const EXTRACT_TASK: &str = "extract_terms";

#[derive(Debug, Clone, PartialEq)]
pub enum AssessorOutcome {
    /// Something must be asked before the list can be interpreted.
    Followup(Followup),
    /// The full canonical list, ready for the medicine interpreter.
    ToInterpreter(Vec<String>),
}

enum Resolved {
    Term(Resolution),
    Ambiguous(Vec<String>),
    Dropped(String),
}

fn parse_terms(text: &str) -> Vec<String> {
    let t = text.trim();
    if t.is_empty() || t.eq_ignore_ascii_case("none") {
        return vec![];
    }
    let mut out: Vec<String> = Vec::new();
    for part in t.split([';', ',']).flat_map(|p| p.split(" and ")) {
        let part = part.trim().trim_end_matches('.').trim();
        if !part.is_empty() && !out.iter().any(|o| normalize(o) == normalize(part)) {
            out.push(part.to_string());
        }
    }
    out
}

fn matches_of(v: Value) -> Result<MatchResult, AgentError> {
    serde_json::from_value(v)
        .map_err(|e| AgentError::Backend(BackendError::ContractViolation(format!("bad match result: {e}"))))
}

fn round4(x: f64) -> f64 {
    (x * 10_000.0).round() / 10_000.0
}

fn resolve(ctx: &mut dyn AgentContext, step: &str, mention: &str, term: &str) -> Result<Resolved, AgentError> {
    let threshold = ctx.thresholds().default_threshold;
    let mut candidates: Vec<(TermMatch, Table)> = Vec::new();
    for (tool, table) in [
        (FIND_ALLERGIES, Table::Allergies),
        (FIND_MEDICATIONS, Table::MedicationsAndDiseases),
    ] {
        let r = matches_of(ctx.call_tool(tool, json!({ "term": term, "threshold": threshold }))?)?;
        for m in r.matches {
            if !candidates.iter().any(|(c, _)| c.term == m.term) {
                candidates.push((m, table));
            }
        }
    }
    let key = normalize(term);
    let exact: Vec<&(TermMatch, Table)> = candidates
        .iter()
        .filter(|(m, _)| normalize(&m.term) == key || m.alias.as_deref().is_some_and(|a| normalize(a) == key))
        .collect();
    let pick = match (exact.as_slice(), candidates.as_slice()) {
        ([one], _) => Some((*one).clone()),
        ([], [one]) => Some(one.clone()),
        _ => None,
    };
    if let Some((m, table)) = pick {
        return Ok(Resolved::Term(Resolution {
            step: step.to_string(),
            mention: mention.to_string(),
            term: term.to_string(),
            relabeled: m.alias.is_some(),
            via: if m.alias.is_some() { "alias" } else { "match" }.to_string(),
            canonical: m.term,
            table,
            score: Some(round4(m.score)),
        }));
    }
    if candidates.len() > 1 {
        let mut names: Vec<String> = candidates.into_iter().map(|(m, _)| m.term).collect();
        names.sort();
        return Ok(Resolved::Ambiguous(names));
    }

    let v = ctx.call_tool(CLASSIFY, json!({ "term": term }))?;
    match v.get("category").and_then(Value::as_str) {
        Some(category) => Ok(Resolved::Term(Resolution {
            step: step.to_string(),
            mention: mention.to_string(),
            term: term.to_string(),
            canonical: category.to_string(),
            table: Table::MedicationsAndDiseases,
            score: None,
            relabeled: true,
            via: "classify".to_string(),
        })),
        None => Ok(Resolved::Dropped(format!(
            "no term scored at least {threshold} and no category applies"
        ))),
    }
}

fn ambiguity_question(mention: &str, candidates: &[String]) -> String {
    let (last, rest) = candidates.split_last().expect("at least two candidates");
    format!("When you say \"{mention}\", do you mean {} or {last}?", rest.join(", "))
}

/// Resolves one batch of raw mentions for `step`. With `amend` the resolved
/// terms are added to the step's terms, otherwise they replace them.
pub fn symptom_assessor_policy(
    ctx: &mut dyn AgentContext,
    profile: &AgentProfile,
    step: &str,
    mentions: &str,
    amend: bool,
) -> Result<AssessorOutcome, AgentError> {
    let data_key = ctx
        .spec()
        .step(step)
        .and_then(|s| s.data_key.clone())
        .unwrap_or_default();
    let prompt = Prompt::task(
        SYMPTOM_ASSESSOR,
        EXTRACT_TASK,
        format!(
            "{}\nList the allergies, medicines, illnesses or states in the customer's words, separated by ';', or answer none.",
            profile.system_prompt()
        ),
    )
    .with_context("mention", mentions)
    .with_context("step", step)
    .with_context("data_key", data_key);
    let completion = ctx.complete(&prompt)?;
    let CompletionAction::Utterance { text } = completion.action else {
        return Err(BackendError::ContractViolation("term extraction must be an utterance".into()).into());
    };
    let terms = parse_terms(&text);
    ctx.record(Event::TermsExtracted {
        step: step.to_string(),
        mention: mentions.to_string(),
        terms: terms.clone(),
    })?;

    let mut canonical: Vec<String> = Vec::new();
    let mut ambiguous: Vec<(String, Vec<String>)> = Vec::new();
    for term in &terms {
        match resolve(ctx, step, mentions, term)? {
            Resolved::Term(r) => {
                if !canonical.contains(&r.canonical) {
                    canonical.push(r.canonical.clone());
                }
                ctx.record(Event::TermResolved(r))?;
            }
            Resolved::Ambiguous(c) => ambiguous.push((term.clone(), c)),
            Resolved::Dropped(note) => ctx.record(Event::TermDropped {
                step: step.to_string(),
                mention: mentions.to_string(),
                term: term.clone(),
                note,
            })?,
        }
    }

    let existing = ctx.state().working_sets.get(step).cloned();
    let mut updated = if amend {
        existing.clone().unwrap_or_default()
    } else {
        vec![]
    };
    for t in canonical {
        if !updated.contains(&t) {
            updated.push(t);
        }
    }
    if !amend {
        let stale: Vec<u32> = ctx
            .state()
            .open_followups
            .iter()
            .filter(|f| f.step == step)
            .map(|f| f.id)
            .collect();
        for id in stale {
            ctx.record(Event::FollowupClosed {
                id,
                resolution: "superseded by a new answer".into(),
            })?;
        }
    }
    if existing.as_ref() != Some(&updated) {
        ctx.record(Event::WorkingSetUpdated {
            step: step.to_string(),
            terms: updated,
        })?;
    }

    for (mention, candidates) in ambiguous {
        let f = Followup {
            id: ctx.state().next_followup_id,
            kind: FollowupKind::Ambiguity,
            step: step.to_string(),
            question: ambiguity_question(&mention, &candidates),
            key: mention,
            candidates,
        };
        ctx.record(Event::FollowupOpened(f))?;
    }

    // conditional terms anywhere in the working sets need an answer first
    let state = ctx.state();
    let mut conditions = Vec::new();
    for (owner, terms) in &state.working_sets {
        for t in terms {
            let Some(entry) = ctx.kb().entry(t) else { continue };
            let Some(condition) = &entry.condition else { continue };
            let asked = state
                .open_followups
                .iter()
                .any(|f| f.kind == FollowupKind::Condition && &f.key == t)
                || conditions.iter().any(|(_, k, _): &(String, String, String)| k == t);
            if state.condition_answers.contains_key(t) || asked {
                continue;
            }
            let question = entry
                .severity_question
                .as_ref()
                .and_then(|k| profile.followup_prompts.get(k))
                .cloned()
                .unwrap_or_else(|| format!("About {t}: is it the case that {condition}?"));
            conditions.push((owner.clone(), t.clone(), question));
        }
    }
    for (owner, term, question) in conditions {
        let f = Followup {
            id: ctx.state().next_followup_id,
            kind: FollowupKind::Condition,
            step: owner,
            key: term,
            question,
            candidates: vec![],
        };
        ctx.record(Event::FollowupOpened(f))?;
    }

    let state = ctx.state();
    Ok(match state.open_followups.first() {
        Some(f) => AssessorOutcome::Followup(f.clone()),
        None => AssessorOutcome::ToInterpreter(state.all_terms()),
    })
}
