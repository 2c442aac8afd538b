//! The turn loop. The conversationalist reasons and acts until it replies;
//! its handoffs run the assessor and interpreter policies inline.

use std::sync::Arc;

use serde_json::Value;
use thiserror::Error;

use super::memory::{Awaiting, Event, FlagKind, MemoryError, MemoryState, SessionStatus, SharedMemory};
use super::tools::{ToolEnv, ToolError, ToolRegistry};
use super::{build_graph, Graph, GraphError};
use crate::agents::{
    conversationalist_prompt, medicine_interpreter_policy, payload_allowed, symptom_assessor_policy, AgentContext,
    AgentError, AgentProfile, AgentSuite, AssessorOutcome, Followup, FollowupKind, HandoffMessage, HandoffPayload,
    InterpreterOutcome, PromptState, CONVERSATIONALIST, FALLBACK_REPLY, MEDICINE_INTERPRETER, SYMPTOM_ASSESSOR,
};
use crate::clock::Clock;
use crate::kb::KnowledgeBase;
use crate::lm::{self, Backend, BackendError, Completion, CompletionAction, Prompt};
use crate::matching::MatchThresholds;
use crate::spec::{coverage_report, next_pending_steps, ConversationSpec};

pub const DEFAULT_MAX_ITERATIONS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RuntimeConfig {
    /// Reason/act iterations allowed per customer turn.
    pub max_iterations: usize,
    pub thresholds: MatchThresholds,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            max_iterations: DEFAULT_MAX_ITERATIONS,
            thresholds: MatchThresholds::default(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RuntimeError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("invalid agent wiring: {0}")]
    Wiring(String),
    #[error("session is {0:?}, not active")]
    SessionNotActive(SessionStatus),
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TurnOutcome {
    pub reply: String,
    pub awaiting: Option<Awaiting>,
    pub status: SessionStatus,
}

pub struct Runtime {
    kb: Arc<KnowledgeBase>,
    suite: AgentSuite,
    graph: Graph,
    registry: ToolRegistry,
    backend: Arc<dyn Backend>,
    clock: Arc<dyn Clock>,
    config: RuntimeConfig,
}

impl std::fmt::Debug for Runtime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Runtime")
            .field("kb", &self.kb.id)
            .field("graph", &self.graph)
            .field("backend", &self.backend.name())
            .field("config", &self.config)
            .finish()
    }
}

/// Why a turn could not go on normally.
enum Fault {
    /// Fed back to the model once.
    Correctable(String),
    Fatal(String),
}

impl From<AgentError> for Fault {
    fn from(e: AgentError) -> Self {
        match &e {
            AgentError::Backend(b) | AgentError::Tool(ToolError::Backend(b)) if !b.is_correctable() => {
                Fault::Fatal(e.to_string())
            }
            AgentError::Memory(_) => Fault::Fatal(e.to_string()),
            _ => Fault::Correctable(e.to_string()),
        }
    }
}

impl From<BackendError> for Fault {
    fn from(e: BackendError) -> Self {
        AgentError::Backend(e).into()
    }
}

/// Outcome of one conversationalist handoff, as seen by the model.
struct HandoffResult {
    observation: &'static str,
    resolved_step: Option<String>,
}

impl Runtime {
    pub fn new(
        kb: Arc<KnowledgeBase>,
        suite: AgentSuite,
        registry: ToolRegistry,
        backend: Arc<dyn Backend>,
        clock: Arc<dyn Clock>,
        config: RuntimeConfig,
    ) -> Result<Self, RuntimeError> {
        let graph = build_graph(&suite.profiles, &suite.edges)?;
        if graph.entry != CONVERSATIONALIST {
            return Err(RuntimeError::Wiring(format!(
                "entry agent must be `{CONVERSATIONALIST}`, found `{}`",
                graph.entry
            )));
        }
        for id in [CONVERSATIONALIST, SYMPTOM_ASSESSOR, MEDICINE_INTERPRETER] {
            if suite.profile(id).is_none() {
                return Err(RuntimeError::Wiring(format!("missing agent `{id}`")));
            }
        }
        for p in &suite.profiles {
            if let Some(t) = p.tools.iter().find(|t| !registry.contains(t)) {
                return Err(RuntimeError::Wiring(format!(
                    "agent `{}` lists unregistered tool `{t}`",
                    p.id
                )));
            }
            if let Some(peer) = p.peers.keys().find(|peer| graph.edge(&p.id, peer).is_none()) {
                return Err(RuntimeError::Wiring(format!(
                    "agent `{}` names peer `{peer}` without an edge",
                    p.id
                )));
            }
        }
        if !config.thresholds.is_valid() {
            return Err(RuntimeError::Wiring(
                "thresholds must satisfy 0 < default <= strict <= 1".into(),
            ));
        }
        Ok(Self {
            kb,
            suite,
            graph,
            registry,
            backend,
            clock,
            config,
        })
    }

    pub fn kb(&self) -> &Arc<KnowledgeBase> {
        &self.kb
    }

    pub fn suite(&self) -> &AgentSuite {
        &self.suite
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.config
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    fn profile(&self, id: &str) -> &AgentProfile {
        self.suite.profile(id).expect("checked in Runtime::new")
    }

    fn routed_keys(&self) -> &[String] {
        &self.profile(CONVERSATIONALIST).routed_data_keys
    }

    fn append(&self, memory: &mut SharedMemory, actor: &str, event: Event) -> Result<(), RuntimeError> {
        memory.append(self.clock.now(), actor, event)?;
        Ok(())
    }

    /// Records the session header. Call once on an empty memory.
    pub fn start_session(&self, memory: &mut SharedMemory, session_id: &str) -> Result<(), RuntimeError> {
        let spec = memory.spec().clone();
        self.append(
            memory,
            "runtime",
            Event::SessionStarted {
                session_id: session_id.to_string(),
                spec_id: spec.medication_id.clone(),
                spec_version: spec.version.clone(),
                kb_id: self.kb.id.clone(),
                steps: spec.steps.iter().map(|s| s.id.clone()).collect(),
            },
        )
    }

    /// Handles one customer message and returns the reply.
    pub fn run_turn(&self, memory: &mut SharedMemory, text: &str) -> Result<TurnOutcome, RuntimeError> {
        let status = memory.state().status;
        if status != SessionStatus::Active {
            return Err(RuntimeError::SessionNotActive(status));
        }
        let turn_start = memory.transcript().len();
        self.append(memory, "customer", Event::CustomerMessage { text: text.to_string() })?;
        let started_awaiting = memory.state().awaiting.clone();

        let mut observation: &str = "none";
        let mut last_error: Option<String> = None;
        let mut resolved_step: Option<String> = None;
        let mut retried = false;
        let profile = self.profile(CONVERSATIONALIST);

        for _ in 0..self.config.max_iterations {
            let prompt = conversationalist_prompt(
                profile,
                memory,
                &self.registry,
                &PromptState {
                    customer: text,
                    observation,
                    last_error: last_error.as_deref(),
                    turn_start,
                    resolved_step: resolved_step.as_deref(),
                },
            );
            let step = match lm::complete(self.backend.as_ref(), &prompt) {
                Ok(c) => self.act(memory, c, &started_awaiting),
                Err(e) => Ok(Err(e.into())),
            };
            match step? {
                Ok(Acted::Replied(outcome)) => return Ok(outcome),
                Ok(Acted::Observed { label, resolved }) => {
                    observation = label;
                    if resolved.is_some() {
                        resolved_step = resolved;
                    }
                }
                Err(Fault::Correctable(error)) if !retried => {
                    retried = true;
                    self.append(
                        memory,
                        CONVERSATIONALIST,
                        Event::ErrorObservation {
                            error: error.clone(),
                            retry: true,
                        },
                    )?;
                    last_error = Some(error);
                    observation = "error";
                }
                Err(Fault::Correctable(error)) => {
                    self.append(
                        memory,
                        CONVERSATIONALIST,
                        Event::ErrorObservation {
                            error: error.clone(),
                            retry: false,
                        },
                    )?;
                    return self.escalate(memory, format!("repeated error: {error}"));
                }
                Err(Fault::Fatal(error)) => return self.escalate(memory, error),
            }
        }
        self.escalate(
            memory,
            format!("no reply within {} iterations", self.config.max_iterations),
        )
    }

    /// Executes one completion. The outer result carries memory failures,
    /// the inner one faults the loop handles.
    fn act(
        &self,
        memory: &mut SharedMemory,
        completion: Completion,
        started_awaiting: &Option<Awaiting>,
    ) -> Result<Result<Acted, Fault>, RuntimeError> {
        if let Some(thought) = completion.thought {
            self.append(memory, CONVERSATIONALIST, Event::Thought { text: thought })?;
        }
        match completion.action {
            CompletionAction::Utterance { text } => {
                if let Err(e) = self.guard_reply(memory.state(), &text) {
                    return Ok(Err(e));
                }
                self.reply(memory, text).map(|o| Ok(Acted::Replied(o)))
            }
            CompletionAction::ToolCall { name, arguments } => {
                self.append(
                    memory,
                    CONVERSATIONALIST,
                    Event::ToolCall {
                        tool: name.clone(),
                        arguments: arguments.clone(),
                    },
                )?;
                let result = self
                    .registry
                    .invoke(&name, &mut self.tool_env(memory, CONVERSATIONALIST), &arguments);
                match result {
                    Ok(v) => {
                        let label = observation_label(&v);
                        self.append(memory, CONVERSATIONALIST, Event::Observation { tool: name, result: v })?;
                        Ok(Ok(Acted::Observed { label, resolved: None }))
                    }
                    Err(e) => Ok(Err(AgentError::Tool(e).into())),
                }
            }
            CompletionAction::Handoff { to, content, step } => {
                match self.handoff(memory, &to, content, step, started_awaiting) {
                    Ok(r) => Ok(Ok(Acted::Observed {
                        label: r.observation,
                        resolved: r.resolved_step,
                    })),
                    Err(e) => Ok(Err(e)),
                }
            }
        }
    }

    fn tool_env<'a>(&'a self, memory: &'a mut SharedMemory, actor: &'a str) -> ToolEnv<'a> {
        ToolEnv {
            kb: &self.kb,
            thresholds: self.config.thresholds,
            backend: Some(self.backend.as_ref()),
            memory,
            clock: self.clock.as_ref(),
            actor,
            routed_keys: self.routed_keys(),
        }
    }

    /// A reply may only name products from the verified safe set.
    fn guard_reply(&self, state: &MemoryState, text: &str) -> Result<(), Fault> {
        let lower = text.to_lowercase();
        let safe = state.current_partition().map(|p| p.safe_ids()).unwrap_or_default();
        for p in &self.kb.products {
            if lower.contains(&p.name.to_lowercase()) && !safe.contains(&p.id.as_str()) {
                return Err(Fault::Correctable(format!(
                    "reply names {} which is not in the verified safe set",
                    p.name
                )));
            }
        }
        Ok(())
    }

    fn reply(&self, memory: &mut SharedMemory, text: String) -> Result<TurnOutcome, RuntimeError> {
        let state = memory.state();
        let spec: &ConversationSpec = memory.spec();
        let awaiting = match state.open_followups.first() {
            Some(f) => Some(Awaiting::Followup {
                id: f.id,
                key: f.key.clone(),
            }),
            None => next_pending_steps(spec, &state.tracker)
                .first()
                .map(|s| Awaiting::Step { step: s.id.clone() }),
        };
        let report = coverage_report(spec, &state.tracker);
        let complete = awaiting.is_none() && report.mandatory_done() == report.mandatory_total();
        self.append(
            memory,
            CONVERSATIONALIST,
            Event::Reply {
                text: text.clone(),
                awaiting: awaiting.clone(),
            },
        )?;
        if complete {
            self.append(
                memory,
                "runtime",
                Event::StatusChanged {
                    status: SessionStatus::Complete,
                },
            )?;
        }
        Ok(TurnOutcome {
            reply: text,
            awaiting,
            status: memory.state().status,
        })
    }

    fn escalate(&self, memory: &mut SharedMemory, cause: String) -> Result<TurnOutcome, RuntimeError> {
        self.append(
            memory,
            "runtime",
            Event::Flag {
                kind: FlagKind::Escalation,
                cause,
            },
        )?;
        self.append(
            memory,
            CONVERSATIONALIST,
            Event::Reply {
                text: FALLBACK_REPLY.to_string(),
                awaiting: None,
            },
        )?;
        self.append(
            memory,
            "runtime",
            Event::StatusChanged {
                status: SessionStatus::Escalated,
            },
        )?;
        Ok(TurnOutcome {
            reply: FALLBACK_REPLY.to_string(),
            awaiting: None,
            status: SessionStatus::Escalated,
        })
    }

    fn send(&self, memory: &mut SharedMemory, from: &str, to: &str, payload: HandoffPayload) -> Result<(), Fault> {
        if self.graph.edge(from, to).is_none() || !payload_allowed(from, to, payload.kind()) {
            return Err(Fault::Correctable(format!(
                "{from} cannot send {:?} to `{to}`",
                payload.kind()
            )));
        }
        let turn = memory.state().turn;
        memory
            .append(
                self.clock.now(),
                from,
                Event::Handoff(HandoffMessage {
                    from: from.to_string(),
                    to: to.to_string(),
                    turn,
                    payload,
                }),
            )
            .map(|_| ())
            .map_err(|e| Fault::Fatal(e.to_string()))
    }

    /// Conversationalist handoff: assessor, then interpreter when the
    /// assessor has a complete list, and back.
    fn handoff(
        &self,
        memory: &mut SharedMemory,
        to: &str,
        content: String,
        step: Option<String>,
        started_awaiting: &Option<Awaiting>,
    ) -> Result<HandoffResult, Fault> {
        // the step the customer was answering when the turn began
        let (awaited_step, followup_id) = match started_awaiting {
            Some(Awaiting::Step { step }) => (Some(step.clone()), None),
            Some(Awaiting::Followup { id, .. }) => (opened_followup(memory, *id).map(|f| f.step), Some(*id)),
            None => (None, None),
        };
        let source = step
            .or_else(|| awaited_step.clone())
            .ok_or_else(|| Fault::Correctable("handoff has no conversation step to attach to".into()))?;
        let routed = memory
            .spec()
            .step(&source)
            .and_then(|s| s.data_key.as_ref())
            .is_some_and(|k| self.routed_keys().contains(k));
        if !routed {
            return Err(Fault::Correctable(format!(
                "step `{source}` does not collect contraindications"
            )));
        }
        let amend = followup_id.is_some() && awaited_step.as_deref() == Some(source.as_str());

        self.send(
            memory,
            CONVERSATIONALIST,
            to,
            HandoffPayload::RawContraindicationMentions {
                source_step: source.clone(),
                mentions: content.clone(),
                amend,
            },
        )?;
        if let Some(id) = followup_id.filter(|_| amend) {
            if memory.state().open_followups.iter().any(|f| f.id == id) {
                memory
                    .append(
                        self.clock.now(),
                        CONVERSATIONALIST,
                        Event::FollowupClosed {
                            id,
                            resolution: format!("answered: {content}"),
                        },
                    )
                    .map_err(|e| Fault::Fatal(e.to_string()))?;
            }
        }

        let outcome = {
            let mut ctx = Ctx {
                rt: self,
                memory,
                actor: SYMPTOM_ASSESSOR,
            };
            symptom_assessor_policy(&mut ctx, self.profile(SYMPTOM_ASSESSOR), &source, &content, amend)?
        };
        let terms = match outcome {
            AssessorOutcome::Followup(followup) => {
                self.send(
                    memory,
                    SYMPTOM_ASSESSOR,
                    CONVERSATIONALIST,
                    HandoffPayload::FollowupRequest { followup },
                )?;
                return Ok(HandoffResult {
                    observation: "followup",
                    resolved_step: None,
                });
            }
            AssessorOutcome::ToInterpreter(terms) => terms,
        };

        self.send(
            memory,
            SYMPTOM_ASSESSOR,
            MEDICINE_INTERPRETER,
            HandoffPayload::CanonicalContraindicationList { terms: terms.clone() },
        )?;
        let verdict = {
            let mut ctx = Ctx {
                rt: self,
                memory,
                actor: MEDICINE_INTERPRETER,
            };
            medicine_interpreter_policy(&mut ctx, &terms)?
        };
        let followup = match verdict {
            InterpreterOutcome::Partition(partition) => {
                self.send(
                    memory,
                    MEDICINE_INTERPRETER,
                    SYMPTOM_ASSESSOR,
                    HandoffPayload::SafePillPartition {
                        partition: partition.clone(),
                    },
                )?;
                self.send(
                    memory,
                    SYMPTOM_ASSESSOR,
                    CONVERSATIONALIST,
                    HandoffPayload::SafePillPartition { partition },
                )?;
                return Ok(HandoffResult {
                    observation: "partition",
                    resolved_step: Some(source),
                });
            }
            InterpreterOutcome::Unconfirmed { term, candidates } => {
                self.reject_term(memory, &source, &term, candidates)?
            }
            InterpreterOutcome::Unanswered { term, condition } => {
                let owner = owning_step(memory.state(), &term).unwrap_or(source);
                let f = Followup {
                    id: memory.state().next_followup_id,
                    kind: FollowupKind::Condition,
                    step: owner,
                    question: format!("About {term}: is it the case that {condition}?"),
                    key: term,
                    candidates: vec![],
                };
                self.record(memory, MEDICINE_INTERPRETER, Event::FollowupOpened(f.clone()))?;
                f
            }
        };
        self.send(
            memory,
            MEDICINE_INTERPRETER,
            SYMPTOM_ASSESSOR,
            HandoffPayload::FollowupRequest {
                followup: followup.clone(),
            },
        )?;
        self.send(
            memory,
            SYMPTOM_ASSESSOR,
            CONVERSATIONALIST,
            HandoffPayload::FollowupRequest { followup },
        )?;
        Ok(HandoffResult {
            observation: "followup",
            resolved_step: None,
        })
    }

    /// Drops a term the strict re-check could not confirm and asks about it.
    fn reject_term(
        &self,
        memory: &mut SharedMemory,
        source: &str,
        term: &str,
        candidates: Vec<String>,
    ) -> Result<Followup, Fault> {
        self.record(
            memory,
            MEDICINE_INTERPRETER,
            Event::Flag {
                kind: FlagKind::Safeguard,
                cause: format!("`{term}` could not be confirmed at the strict threshold"),
            },
        )?;
        let owners: Vec<(String, Vec<String>)> = memory
            .state()
            .working_sets
            .iter()
            .filter(|(_, terms)| terms.iter().any(|t| t == term))
            .map(|(step, terms)| (step.clone(), terms.iter().filter(|t| *t != term).cloned().collect()))
            .collect();
        let step = owners
            .first()
            .map(|(s, _)| s.clone())
            .unwrap_or_else(|| source.to_string());
        for (step, terms) in owners {
            self.record(memory, MEDICINE_INTERPRETER, Event::WorkingSetUpdated { step, terms })?;
        }
        let f = Followup {
            id: memory.state().next_followup_id,
            kind: FollowupKind::Clarification,
            step,
            key: term.to_string(),
            question: format!("I could not confirm \"{term}\". Could you describe it in other words?"),
            candidates,
        };
        self.record(memory, MEDICINE_INTERPRETER, Event::FollowupOpened(f.clone()))?;
        Ok(f)
    }

    fn record(&self, memory: &mut SharedMemory, actor: &str, event: Event) -> Result<(), Fault> {
        memory
            .append(self.clock.now(), actor, event)
            .map(|_| ())
            .map_err(|e| Fault::Fatal(e.to_string()))
    }
}

enum Acted {
    Replied(TurnOutcome),
    Observed {
        label: &'static str,
        resolved: Option<String>,
    },
}

fn observation_label(v: &Value) -> &'static str {
    match v.get("observation").and_then(Value::as_str) {
        Some("step_recorded") => "step_recorded",
        Some("value_changed") => "value_changed",
        Some("condition_recorded") => "condition_recorded",
        _ => "tool_result",
    }
}

fn opened_followup(memory: &SharedMemory, id: u32) -> Option<Followup> {
    memory.transcript().iter().rev().find_map(|e| match &e.event {
        Event::FollowupOpened(f) if f.id == id => Some(f.clone()),
        _ => None,
    })
}

fn owning_step(state: &MemoryState, term: &str) -> Option<String> {
    state
        .working_sets
        .iter()
        .find(|(_, terms)| terms.iter().any(|t| t == term))
        .map(|(s, _)| s.clone())
}

/// Context lent to the assessor and interpreter policies.
struct Ctx<'r, 'm> {
    rt: &'r Runtime,
    memory: &'m mut SharedMemory,
    actor: &'static str,
}

impl AgentContext for Ctx<'_, '_> {
    fn kb(&self) -> &KnowledgeBase {
        &self.rt.kb
    }

    fn spec(&self) -> &ConversationSpec {
        self.memory.spec()
    }

    fn state(&self) -> &MemoryState {
        self.memory.state()
    }

    fn thresholds(&self) -> MatchThresholds {
        self.rt.config.thresholds
    }

    fn call_tool(&mut self, name: &str, arguments: Value) -> Result<Value, AgentError> {
        if !self.rt.profile(self.actor).tools.iter().any(|t| t == name) {
            return Err(ToolError::UnknownTool(name.to_string()).into());
        }
        self.record(Event::ToolCall {
            tool: name.to_string(),
            arguments: arguments.clone(),
        })?;
        let result = self
            .rt
            .registry
            .invoke(name, &mut self.rt.tool_env(self.memory, self.actor), &arguments);
        let logged = match &result {
            Ok(v) => v.clone(),
            Err(e) => serde_json::json!({ "error": e.to_string() }),
        };
        self.record(Event::Observation {
            tool: name.to_string(),
            result: logged,
        })?;
        Ok(result?)
    }

    fn complete(&mut self, prompt: &Prompt) -> Result<Completion, AgentError> {
        Ok(lm::complete(self.rt.backend.as_ref(), prompt)?)
    }

    fn record(&mut self, event: Event) -> Result<(), AgentError> {
        self.memory
            .append(self.rt.clock.now(), self.actor, event)
            .map(|_| ())
            .map_err(|e| AgentError::Memory(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::SteppingClock;
    use crate::graph::ecp_registry;
    use crate::harness::{BASE_SCRIPT, ECP_KB, ECP_SPEC};
    use crate::kb::load_kb;
    use crate::lm::{Rule, ScriptedBackend};
    use crate::spec::parse_spec;

    struct Down;

    impl Backend for Down {
        fn name(&self) -> &str {
            "down"
        }

        fn complete(&self, _: &Prompt) -> Result<Completion, BackendError> {
            Err(BackendError::Unavailable("connection refused".into()))
        }
    }

    fn runtime_with(backend: Arc<dyn Backend>) -> Runtime {
        Runtime::new(
            Arc::new(load_kb(ECP_KB).unwrap()),
            AgentSuite::builtin(),
            ecp_registry(),
            backend,
            Arc::new(SteppingClock::fixed()),
            RuntimeConfig::default(),
        )
        .unwrap()
    }

    fn scripted(overrides: &str) -> Arc<dyn Backend> {
        let base = ScriptedBackend::from_yaml(BASE_SCRIPT).unwrap();
        let extra: Vec<Rule> = serde_yaml::from_str(overrides).unwrap();
        Arc::new(base.with_overrides(&extra))
    }

    fn session(rt: &Runtime) -> SharedMemory {
        let mut m = SharedMemory::new(Arc::new(parse_spec(ECP_SPEC).unwrap()));
        rt.start_session(&mut m, "t").unwrap();
        m
    }

    fn escalations(m: &SharedMemory) -> usize {
        m.state()
            .flags
            .iter()
            .filter(|(k, _)| *k == FlagKind::Escalation)
            .count()
    }

    #[test]
    fn unregistered_profile_tool_is_a_wiring_error() {
        let mut suite = AgentSuite::builtin();
        suite.profiles[0].tools.push("teleport".into());
        let err = Runtime::new(
            Arc::new(load_kb(ECP_KB).unwrap()),
            suite,
            ecp_registry(),
            scripted("[]"),
            Arc::new(SteppingClock::fixed()),
            RuntimeConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, RuntimeError::Wiring(m) if m.contains("teleport")));
    }

    #[test]
    fn peer_without_edge_is_a_wiring_error() {
        let mut suite = AgentSuite::builtin();
        suite.edges.retain(|e| e.from != CONVERSATIONALIST);
        suite.edges.push(crate::graph::Edge {
            from: MEDICINE_INTERPRETER.into(),
            to: CONVERSATIONALIST.into(),
            kind: crate::graph::EdgeKind::Mandatory,
        });
        let err = Runtime::new(
            Arc::new(load_kb(ECP_KB).unwrap()),
            suite,
            ecp_registry(),
            scripted("[]"),
            Arc::new(SteppingClock::fixed()),
            RuntimeConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, RuntimeError::Graph(_) | RuntimeError::Wiring(_)), "{err}");
    }

    #[test]
    fn unavailable_backend_escalates_without_retry() {
        let rt = runtime_with(Arc::new(Down));
        let mut m = session(&rt);
        let out = rt.run_turn(&mut m, "Hello").unwrap();
        assert_eq!(out.status, SessionStatus::Escalated);
        assert_eq!(out.reply, FALLBACK_REPLY);
        assert_eq!(escalations(&m), 1);
        assert!(!m
            .transcript()
            .iter()
            .any(|e| matches!(e.event, Event::ErrorObservation { .. })));
        assert_eq!(
            rt.run_turn(&mut m, "Hello?"),
            Err(RuntimeError::SessionNotActive(SessionStatus::Escalated))
        );
    }

    #[test]
    fn iteration_cap_escalates() {
        // a model that keeps looking things up and never answers
        let rt = runtime_with(scripted(
            r#"
- name: loop
  when: {task: ^converse$}
  tool_call: {name: record_step, arguments: {step: time_since_intercourse, value: "1 hours"}}
"#,
        ));
        let mut m = session(&rt);
        let out = rt.run_turn(&mut m, "Hi").unwrap();
        assert_eq!(out.status, SessionStatus::Escalated);
        let calls = m
            .transcript()
            .iter()
            .filter(|e| matches!(e.event, Event::ToolCall { .. }))
            .count();
        assert_eq!(calls, DEFAULT_MAX_ITERATIONS);
        assert!(m.state().flags[0].1.contains("iterations"));
    }

    #[test]
    fn reply_naming_unverified_pill_is_corrected_once() {
        let rt = runtime_with(scripted(
            r#"
- name: eager
  when: {task: ^converse$, awaiting_kind: ^none$}
  utterance: You should take Ulipra 30.
"#,
        ));
        let mut m = session(&rt);
        let out = rt.run_turn(&mut m, "Hi").unwrap();
        assert_eq!(out.status, SessionStatus::Escalated);
        let retries: Vec<bool> = m
            .transcript()
            .iter()
            .filter_map(|e| match &e.event {
                Event::ErrorObservation { retry, error } => {
                    assert!(error.contains("Ulipra 30"));
                    Some(*retry)
                }
                _ => None,
            })
            .collect();
        assert_eq!(retries, [true, false]);
    }

    #[test]
    fn handoff_from_unrouted_step_is_rejected() {
        let rt = runtime_with(scripted(
            r#"
- name: stray
  when: {task: ^converse$, awaiting_step_id: ^time_since_intercourse$, observation: ^none$}
  handoff: {to: symptom_assessor, content: "{{customer}}"}
"#,
        ));
        let mut m = session(&rt);
        rt.run_turn(&mut m, "Hi").unwrap();
        let out = rt.run_turn(&mut m, "14 hours").unwrap();
        // the error goes back to the model, which then simply replies
        assert_eq!(out.status, SessionStatus::Active);
        assert!(!m.state().tracker.is_done("time_since_intercourse"));
        let err = m
            .transcript()
            .iter()
            .find_map(|e| match &e.event {
                Event::ErrorObservation { error, .. } => Some(error.clone()),
                _ => None,
            })
            .unwrap();
        assert!(err.contains("does not collect contraindications"), "{err}");
    }
}
