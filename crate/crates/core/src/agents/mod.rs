//! Agent profiles, inter-agent payloads and the per-agent policies.

mod assessor;
mod conversationalist;
mod interpreter;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Edge, EdgeKind, Event, MemoryState, ToolError};
use crate::kb::{KnowledgeBase, Partition};
use crate::lm::{BackendError, Completion, Prompt};
use crate::matching::MatchThresholds;
use crate::spec::ConversationSpec;

pub use assessor::{symptom_assessor_policy, AssessorOutcome, EXTRACT_TASK};
pub use conversationalist::{conversationalist_prompt, PromptState, FALLBACK_REPLY};
pub use interpreter::{medicine_interpreter_policy, InterpreterOutcome};

pub const CONVERSATIONALIST: &str = "conversationalist";
pub const SYMPTOM_ASSESSOR: &str = "symptom_assessor";
pub const MEDICINE_INTERPRETER: &str = "medicine_interpreter";

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("syntax error in {path}: {message}")]
    Syntax { path: String, message: String },
    #[error("graph file lists agent `{0}` but no profile defines it")]
    MissingProfile(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error(transparent)]
    Tool(#[from] ToolError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("memory rejected event: {0}")]
    Memory(String),
}

/// What the runtime lends an agent policy: read access to shared state and
/// logged tool, model and memory operations.
pub trait AgentContext {
    fn kb(&self) -> &KnowledgeBase;
    fn spec(&self) -> &ConversationSpec;
    fn state(&self) -> &MemoryState;
    fn thresholds(&self) -> MatchThresholds;
    fn call_tool(&mut self, name: &str, arguments: serde_json::Value) -> Result<serde_json::Value, AgentError>;
    fn complete(&mut self, prompt: &Prompt) -> Result<Completion, AgentError>;
    fn record(&mut self, event: Event) -> Result<(), AgentError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FewShotKind {
    Confirmation,
    Reconfirmation,
    FollowUp,
    ToolUsage,
    Handoff,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FewShot {
    pub kind: FewShotKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub customer: Option<String>,
    pub agent: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeerContract {
    pub input: String,
    pub output: String,
    pub purpose: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentProfile {
    pub id: String,
    /// Used in instructions as "[name] should ...".
    pub name: String,
    pub purpose: String,
    #[serde(default)]
    pub instructions: Vec<String>,
    #[serde(default)]
    pub tools: Vec<String>,
    #[serde(default)]
    pub peers: BTreeMap<String, PeerContract>,
    #[serde(default)]
    pub few_shots: Vec<FewShot>,
    /// Follow-up question templates keyed by severity question key.
    #[serde(default)]
    pub followup_prompts: BTreeMap<String, String>,
    /// Data keys whose answers are sent to the symptom assessor.
    #[serde(default)]
    pub routed_data_keys: Vec<String>,
}

impl AgentProfile {
    /// System prompt text: purpose, instructions, peer contracts, examples.
    pub fn system_prompt(&self) -> String {
        let mut s = format!("You are {}. {}\n", self.name, self.purpose);
        for line in &self.instructions {
            let _ = writeln!(s, "- {line}");
        }
        for (peer, c) in &self.peers {
            let _ = writeln!(
                s,
                "Peer {peer}: {} Send: {}. Expect back: {}.",
                c.purpose, c.input, c.output
            );
        }
        for shot in &self.few_shots {
            let _ = match &shot.customer {
                Some(c) => writeln!(
                    s,
                    "Example ({:?}): customer: {c} / {}: {}",
                    shot.kind, self.name, shot.agent
                ),
                None => writeln!(s, "Example ({:?}): {}: {}", shot.kind, self.name, shot.agent),
            };
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphDoc {
    nodes: Vec<String>,
    #[serde(default)]
    edges: Vec<Edge>,
}

/// The agent profiles (entry agent first) and the edges between them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentSuite {
    pub profiles: Vec<AgentProfile>,
    pub edges: Vec<Edge>,
}

const BUILTIN: [&str; 3] = [
    include_str!("../../../../fixtures/agents/conversationalist.yaml"),
    include_str!("../../../../fixtures/agents/symptom_assessor.yaml"),
    include_str!("../../../../fixtures/agents/medicine_interpreter.yaml"),
];
const BUILTIN_GRAPH: &str = include_str!("../../../../fixtures/agents/graph.yaml");

impl AgentSuite {
    /// The three-agent suite shipped with the crate.
    pub fn builtin() -> Self {
        let profiles = BUILTIN
            .iter()
            .map(|doc| serde_yaml::from_str(doc).expect("builtin profile parses"))
            .collect();
        Self::assemble(profiles, BUILTIN_GRAPH, "builtin").expect("builtin suite is valid")
    }

    /// Loads every `*.yaml` profile in `dir` plus its `graph.yaml`.
    pub fn load_dir(dir: &Path) -> Result<Self, ProfileError> {
        let read = |p: &Path| {
            std::fs::read_to_string(p).map_err(|e| ProfileError::Io {
                path: p.display().to_string(),
                message: e.to_string(),
            })
        };
        let graph_path = dir.join("graph.yaml");
        let graph = read(&graph_path)?;
        let mut entries: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| ProfileError::Io {
                path: dir.display().to_string(),
                message: e.to_string(),
            })?
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "yaml") && p.file_name() != Some("graph.yaml".as_ref()))
            .collect();
        entries.sort();
        let mut profiles = Vec::new();
        for p in entries {
            let text = read(&p)?;
            let profile: AgentProfile = serde_yaml::from_str(&text).map_err(|e| ProfileError::Syntax {
                path: p.display().to_string(),
                message: e.to_string(),
            })?;
            profiles.push(profile);
        }
        Self::assemble(profiles, &graph, &graph_path.display().to_string())
    }

    fn assemble(mut profiles: Vec<AgentProfile>, graph: &str, path: &str) -> Result<Self, ProfileError> {
        let doc: GraphDoc = serde_yaml::from_str(graph).map_err(|e| ProfileError::Syntax {
            path: path.to_string(),
            message: e.to_string(),
        })?;
        let mut ordered = Vec::new();
        for id in &doc.nodes {
            let i = profiles
                .iter()
                .position(|p| &p.id == id)
                .ok_or_else(|| ProfileError::MissingProfile(id.clone()))?;
            ordered.push(profiles.remove(i));
        }
        ordered.extend(profiles);
        Ok(Self {
            profiles: ordered,
            edges: doc.edges,
        })
    }

    pub fn profile(&self, id: &str) -> Option<&AgentProfile> {
        self.profiles.iter().find(|p| p.id == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FollowupKind {
    /// Several knowledge base terms matched one mention.
    Ambiguity,
    /// A conditional contraindication needs a yes/no answer.
    Condition,
    /// The interpreter's re-check could not confirm a term.
    Clarification,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Followup {
    pub id: u32,
    pub kind: FollowupKind,
    /// Conversation step the mention belongs to.
    pub step: String,
    /// The mention for ambiguities and clarifications, the canonical term
    /// for conditions.
    pub key: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    RawContraindicationMentions,
    CanonicalContraindicationList,
    SafePillPartition,
    FollowupRequest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HandoffPayload {
    RawContraindicationMentions {
        source_step: String,
        mentions: String,
        /// Adds to the step's terms instead of replacing them.
        amend: bool,
    },
    CanonicalContraindicationList {
        terms: Vec<String>,
    },
    SafePillPartition {
        partition: Partition,
    },
    FollowupRequest {
        followup: Followup,
    },
}

impl HandoffPayload {
    pub fn kind(&self) -> PayloadKind {
        match self {
            HandoffPayload::RawContraindicationMentions { .. } => PayloadKind::RawContraindicationMentions,
            HandoffPayload::CanonicalContraindicationList { .. } => PayloadKind::CanonicalContraindicationList,
            HandoffPayload::SafePillPartition { .. } => PayloadKind::SafePillPartition,
            HandoffPayload::FollowupRequest { .. } => PayloadKind::FollowupRequest,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandoffMessage {
    pub from: String,
    pub to: String,
    pub turn: u32,
    pub payload: HandoffPayload,
}

/// Which payload kinds may travel along a directed agent pair.
pub fn payload_allowed(from: &str, to: &str, kind: PayloadKind) -> bool {
    use PayloadKind::*;
    match (from, to) {
        (CONVERSATIONALIST, SYMPTOM_ASSESSOR) => kind == RawContraindicationMentions,
        (SYMPTOM_ASSESSOR, MEDICINE_INTERPRETER) => kind == CanonicalContraindicationList,
        (MEDICINE_INTERPRETER, SYMPTOM_ASSESSOR) | (SYMPTOM_ASSESSOR, CONVERSATIONALIST) => {
            matches!(kind, SafePillPartition | FollowupRequest)
        }
        _ => false,
    }
}

/// The default wiring of the three agents.
pub fn default_edges() -> Vec<Edge> {
    let e = |from: &str, to: &str, kind| Edge {
        from: from.to_string(),
        to: to.to_string(),
        kind,
    };
    vec![
        e(CONVERSATIONALIST, SYMPTOM_ASSESSOR, EdgeKind::Optional),
        e(SYMPTOM_ASSESSOR, MEDICINE_INTERPRETER, EdgeKind::Mandatory),
        e(MEDICINE_INTERPRETER, SYMPTOM_ASSESSOR, EdgeKind::Mandatory),
        e(SYMPTOM_ASSESSOR, CONVERSATIONALIST, EdgeKind::Mandatory),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_suite_has_three_agents_entry_first() {
        let suite = AgentSuite::builtin();
        let ids: Vec<&str> = suite.profiles.iter().map(|p| p.id.as_str()).collect();
        assert_eq!(ids, [CONVERSATIONALIST, SYMPTOM_ASSESSOR, MEDICINE_INTERPRETER]);
        assert_eq!(suite.edges, default_edges());
        let c = suite.profile(CONVERSATIONALIST).unwrap();
        assert_eq!(c.name, "Ava");
        assert!(c.instructions.iter().all(|i| i.starts_with("Ava should")));
        for kind in [
            FewShotKind::Confirmation,
            FewShotKind::Reconfirmation,
            FewShotKind::FollowUp,
            FewShotKind::ToolUsage,
            FewShotKind::Handoff,
        ] {
            assert!(c.few_shots.iter().any(|s| s.kind == kind), "{kind:?}");
        }
        assert!(c.system_prompt().contains("Ava should"));
    }

    #[test]
    fn suite_loads_from_directory() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/agents");
        assert_eq!(AgentSuite::load_dir(&dir).unwrap(), AgentSuite::builtin());
    }

    #[test]
    fn payload_legality() {
        assert!(payload_allowed(
            CONVERSATIONALIST,
            SYMPTOM_ASSESSOR,
            PayloadKind::RawContraindicationMentions
        ));
        assert!(!payload_allowed(
            CONVERSATIONALIST,
            MEDICINE_INTERPRETER,
            PayloadKind::CanonicalContraindicationList
        ));
        assert!(!payload_allowed(
            SYMPTOM_ASSESSOR,
            MEDICINE_INTERPRETER,
            PayloadKind::SafePillPartition
        ));
        assert!(payload_allowed(
            SYMPTOM_ASSESSOR,
            CONVERSATIONALIST,
            PayloadKind::FollowupRequest
        ));
    }

    #[test]
    fn payload_wire_format() {
        let p = HandoffPayload::CanonicalContraindicationList {
            terms: vec!["Asthma".into()],
        };
        let v = serde_json::to_value(&p).unwrap();
        assert_eq!(v["kind"], "canonical_contraindication_list");
        assert_eq!(serde_json::from_value::<HandoffPayload>(v).unwrap(), p);
    }
}
