//! Medicine interpreter: re-checks the canonical list at the strict
//! threshold, then partitions the pills with the two check tools.

use serde_json::json;

use super::{AgentContext, AgentError};
use crate::graph::tools::{CHECK_ALLERGIES, CHECK_MEDICATIONS, FIND_ALLERGIES, FIND_MEDICATIONS};
use crate::graph::ToolError;
use crate::kb::{KbError, Partition, Table};
use crate::lm::BackendError;
use crate::matching::{normalize, MatchResult};

#[derive(Debug, Clone, PartialEq)]
pub enum InterpreterOutcome {
    Partition(Partition),
    /// The strict re-check could not confirm `term`; it must be asked about
    /// again and is removed from the list meanwhile.
    Unconfirmed {
        term: String,
        candidates: Vec<String>,
    },
    /// A conditional term has no answer yet.
    Unanswered {
        term: String,
        condition: String,
    },
}

fn contract(e: serde_json::Error) -> AgentError {
    AgentError::Backend(BackendError::ContractViolation(e.to_string()))
}

pub fn medicine_interpreter_policy(
    ctx: &mut dyn AgentContext,
    terms: &[String],
) -> Result<InterpreterOutcome, AgentError> {
    let strict = ctx.thresholds().strict_threshold;
    let mut by_table: [Vec<String>; 2] = [vec![], vec![]];
    for term in terms {
        let mut hits: Vec<(String, Option<String>, Table)> = Vec::new();
        for (tool, table) in [
            (FIND_ALLERGIES, Table::Allergies),
            (FIND_MEDICATIONS, Table::MedicationsAndDiseases),
        ] {
            let r: MatchResult =
                serde_json::from_value(ctx.call_tool(tool, json!({ "term": term, "threshold": strict }))?)
                    .map_err(contract)?;
            hits.extend(r.matches.into_iter().map(|m| (m.term, m.alias, table)));
        }
        let key = normalize(term);
        let exact: Vec<_> = hits
            .iter()
            .filter(|(t, a, _)| normalize(t) == key || a.as_deref().is_some_and(|a| normalize(a) == key))
            .collect();
        let chosen = match (exact.as_slice(), hits.as_slice()) {
            ([one], _) => Some((one.0.clone(), one.2)),
            ([], [one]) => Some((one.0.clone(), one.2)),
            _ => None,
        };
        match chosen {
            Some((canonical, table)) => {
                let slot = &mut by_table[table as usize];
                if !slot.contains(&canonical) {
                    slot.push(canonical);
                }
            }
            None => {
                return Ok(InterpreterOutcome::Unconfirmed {
                    term: term.clone(),
                    candidates: hits.into_iter().map(|h| h.0).collect(),
                })
            }
        }
    }

    let mut partitions = Vec::new();
    for (tool, table_terms) in [(CHECK_ALLERGIES, &by_table[0]), (CHECK_MEDICATIONS, &by_table[1])] {
        match ctx.call_tool(tool, json!({ "terms": table_terms })) {
            Ok(v) => partitions.push(serde_json::from_value::<Partition>(v).map_err(contract)?),
            Err(AgentError::Tool(ToolError::Kb(KbError::UnansweredCondition { term, condition }))) => {
                return Ok(InterpreterOutcome::Unanswered { term, condition })
            }
            Err(e) => return Err(e),
        }
    }
    let products = &ctx.kb().products;
    Ok(InterpreterOutcome::Partition(
        partitions[0].merge(&partitions[1], products),
    ))
}
