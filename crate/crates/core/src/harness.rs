//! Scenario harness: scripted customers talk to the runtime and the result
//! is checked against the scenario's expectations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{AgentSuite, FollowupKind};
use crate::clock::SteppingClock;
use crate::graph::{ecp_registry, Event, Runtime, RuntimeConfig, SessionStatus, SharedMemory, TranscriptEntry};
use crate::kb::{load_kb, KnowledgeBase};
use crate::lm::{Rule, ScriptedBackend};
use crate::spec::{coverage_report, parse_spec, ConversationSpec};

/// Customer turns allowed before a scenario counts as stuck.
pub const MAX_TURNS: usize = 80;

pub const BASE_SCRIPT: &str = include_str!("../../../fixtures/scripts/ecp_base.yaml");
pub const BASELINE_CUSTOMER: &str = include_str!("../../../fixtures/customer_baseline.yaml");
pub const ECP_SPEC: &str = include_str!("../../../fixtures/spec/ecp_counseling.yaml");
pub const ECP_KB: &str = include_str!("../../../fixtures/kb/ecp_kb.yaml");

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("invalid scenario {path}: {message}")]
    Syntax { path: String, message: String },
    #[error("cannot build the runtime: {0}")]
    Setup(String),
    #[error("scenario `{id}`: {message}")]
    Invalid { id: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Answer {
    /// Given every time the key is asked.
    Always(String),
    /// Given in order, one per time asked; the default follows.
    Sequence(Vec<String>),
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomerScript {
    #[serde(default)]
    pub opening: Option<String>,
    #[serde(default)]
    pub answers: BTreeMap<String, Answer>,
    #[serde(default)]
    pub default: Option<String>,
}

impl CustomerScript {
    /// `self` with `over` taking precedence.
    pub fn from_yaml(document: &str) -> Result<Self, HarnessError> {
        serde_yaml::from_str(document).map_err(|e| HarnessError::Syntax {
            path: "customer script".to_string(),
            message: e.to_string(),
        })
    }

    pub fn overlay(&self, over: &CustomerScript) -> CustomerScript {
        let mut answers = self.answers.clone();
        answers.extend(over.answers.clone());
        CustomerScript {
            opening: over.opening.clone().or_else(|| self.opening.clone()),
            answers,
            default: over.default.clone().or_else(|| self.default.clone()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expected {
    /// Product ids recommended as safe.
    #[serde(default)]
    pub safe: Option<Vec<String>>,
    /// Canonical contraindication terms collected, in any order.
    #[serde(default)]
    pub canonical_terms: Option<Vec<String>>,
    #[serde(default)]
    pub condition_answers: BTreeMap<String, bool>,
    /// Kinds of the follow-ups opened, in order.
    #[serde(default)]
    pub followups: Option<Vec<FollowupKind>>,
    #[serde(default)]
    pub required_steps: Vec<String>,
    /// Collected values by data key.
    #[serde(default)]
    pub values: BTreeMap<String, String>,
    #[serde(default)]
    pub escalation: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub id: String,
    pub risk_area: String,
    pub use_context: String,
    #[serde(default)]
    pub evaluation_parameters: Vec<String>,
    #[serde(default)]
    pub customer: CustomerScript,
    #[serde(default)]
    pub expected: Expected,
    /// Consulted before the base script.
    #[serde(default)]
    pub backend_rules: Vec<Rule>,
}

pub fn parse_scenario(document: &str, origin: &str) -> Result<Scenario, HarnessError> {
    serde_yaml::from_str(document).map_err(|e| HarnessError::Syntax {
        path: origin.to_string(),
        message: e.to_string(),
    })
}

/// Every `*.yaml` in `dir`, sorted by file name.
pub fn load_scenarios(dir: &Path) -> Result<Vec<Scenario>, HarnessError> {
    let io = |p: &Path, e: std::io::Error| HarnessError::Io {
        path: p.display().to_string(),
        message: e.to_string(),
    };
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| io(dir, e))?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "yaml"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| io(p, e))?;
            parse_scenario(&text, &p.display().to_string())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    /// Handed to a human although the scenario did not expect it.
    Escalated,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalResult {
    pub scenario_id: String,
    pub verdict: Verdict,
    pub failures: Vec<String>,
    pub status: SessionStatus,
    pub turns: usize,
    pub safe: Option<Vec<String>>,
    pub canonical_terms: Vec<String>,
    #[serde(skip)]
    pub transcript: Vec<TranscriptEntry>,
    #[serde(skip)]
    pub elapsed: Duration,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub results: Vec<EvalResult>,
    pub passed: usize,
    pub failed: usize,
    pub escalated: usize,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.passed == self.results.len()
    }
}

/// What every scenario runs against.
#[derive(Debug, Clone)]
pub struct HarnessEnv {
    pub kb: Arc<KnowledgeBase>,
    pub spec: Arc<ConversationSpec>,
    pub suite: AgentSuite,
    pub script: ScriptedBackend,
    pub baseline: CustomerScript,
    pub config: RuntimeConfig,
}

impl HarnessEnv {
    /// The shipped knowledge base, flow, agents, script and baseline customer.
    pub fn builtin() -> Self {
        Self {
            kb: Arc::new(load_kb(ECP_KB).expect("builtin kb loads")),
            spec: Arc::new(parse_spec(ECP_SPEC).expect("builtin spec parses")),
            suite: AgentSuite::builtin(),
            script: ScriptedBackend::from_yaml(BASE_SCRIPT).expect("builtin script parses"),
            baseline: serde_yaml::from_str(BASELINE_CUSTOMER).expect("baseline customer parses"),
            config: RuntimeConfig::default(),
        }
    }
}

struct Customer {
    script: CustomerScript,
    used: BTreeMap<String, usize>,
}

impl Customer {
    fn answer(&mut self, key: &str) -> Option<String> {
        let fallback = self.script.default.clone();
        match self.script.answers.get(key) {
            Some(Answer::Always(a)) => Some(a.clone()),
            Some(Answer::Sequence(list)) => {
                let i = self.used.entry(key.to_string()).or_default();
                *i += 1;
                list.get(*i - 1).cloned().or(fallback)
            }
            None => fallback,
        }
    }
}

/// Expectations must name things the KB and spec know about.
pub fn validate_scenario(env: &HarnessEnv, scenario: &Scenario) -> Result<(), HarnessError> {
    let invalid = |message: String| HarnessError::Invalid {
        id: scenario.id.clone(),
        message,
    };
    let e = &scenario.expected;
    for id in e.safe.iter().flatten() {
        if env.kb.product(id).is_none() {
            return Err(invalid(format!(
                "expected safe product `{id}` is not in the knowledge base"
            )));
        }
    }
    for term in e.canonical_terms.iter().flatten().chain(e.condition_answers.keys()) {
        if env.kb.entry(term).is_none() {
            return Err(invalid(format!("`{term}` is not a canonical term")));
        }
    }
    for step in &e.required_steps {
        if env.spec.step(step).is_none() {
            return Err(invalid(format!("required step `{step}` is not in the spec")));
        }
    }
    Ok(())
}

/// Runs one scenario on a fresh session with a deterministic clock.
pub fn run_scenario(env: &HarnessEnv, scenario: &Scenario) -> Result<EvalResult, HarnessError> {
    validate_scenario(env, scenario)?;
    let started = Instant::now();
    let backend = Arc::new(env.script.with_overrides(&scenario.backend_rules));
    let runtime = Runtime::new(
        env.kb.clone(),
        env.suite.clone(),
        ecp_registry(),
        backend,
        Arc::new(SteppingClock::fixed()),
        env.config,
    )
    .map_err(|e| HarnessError::Setup(e.to_string()))?;
    let mut memory = SharedMemory::new(env.spec.clone());
    runtime
        .start_session(&mut memory, &scenario.id)
        .map_err(|e| HarnessError::Setup(e.to_string()))?;

    let mut customer = Customer {
        script: env.baseline.overlay(&scenario.customer),
        used: BTreeMap::new(),
    };
    let mut failures = Vec::new();
    let mut message = customer.script.opening.clone().unwrap_or_else(|| "Hello.".to_string());
    let mut turns = 0;
    loop {
        if turns == MAX_TURNS {
            failures.push(format!("stuck: still active after {MAX_TURNS} turns"));
            break;
        }
        turns += 1;
        let outcome = match runtime.run_turn(&mut memory, &message) {
            Ok(o) => o,
            Err(e) => {
                failures.push(format!("runtime error: {e}"));
                break;
            }
        };
        if outcome.status != SessionStatus::Active {
            break;
        }
        let key = outcome.awaiting.as_ref().map(|a| a.script_key()).unwrap_or_default();
        match customer.answer(&key) {
            Some(next) => message = next,
            None => {
                failures.push(format!("stuck: no answer for `{key}`"));
                break;
            }
        }
    }

    let state = memory.state();
    let safe = state
        .recommendation
        .as_ref()
        .map(|r| r.safe.iter().map(|p| p.id.clone()).collect::<Vec<_>>());
    let canonical_terms = state.all_terms();
    let exp = &scenario.expected;

    match (state.status, exp.escalation) {
        (SessionStatus::Escalated, true) | (SessionStatus::Complete, false) => {}
        (SessionStatus::Escalated, false) => {}
        (status, _) => failures.push(format!(
            "ended {status:?}, expected {}",
            if exp.escalation { "escalation" } else { "completion" }
        )),
    }
    if state.status == SessionStatus::Complete {
        let report = coverage_report(&env.spec, &state.tracker);
        let open: Vec<&str> = report
            .steps
            .iter()
            .filter(|s| s.mandatory && s.status != crate::spec::StepStatus::Done)
            .map(|s| s.id.as_str())
            .collect();
        if !open.is_empty() {
            failures.push(format!("completed with mandatory steps open: {}", open.join(", ")));
        }
    }
    if !exp.escalation {
        if let Some(want) = &exp.safe {
            if safe.as_ref() != Some(want) {
                failures.push(format!("safe set {safe:?}, expected {want:?}"));
            }
        }
        if let Some(want) = &exp.canonical_terms {
            let mut got = canonical_terms.clone();
            let mut want = want.clone();
            got.sort();
            want.sort();
            if got != want {
                failures.push(format!("terms {got:?}, expected {want:?}"));
            }
        }
        for (term, answer) in &exp.condition_answers {
            if state.condition_answers.get(term) != Some(answer) {
                failures.push(format!(
                    "condition answer for {term} is {:?}, expected {answer}",
                    state.condition_answers.get(term)
                ));
            }
        }
        if let Some(want) = &exp.followups {
            let got: Vec<FollowupKind> = memory
                .transcript()
                .iter()
                .filter_map(|e| match &e.event {
                    Event::FollowupOpened(f) => Some(f.kind),
                    _ => None,
                })
                .collect();
            if &got != want {
                failures.push(format!("follow-ups {got:?}, expected {want:?}"));
            }
        }
        for (key, want) in &exp.values {
            if state.tracker.value(key) != Some(want.as_str()) {
                failures.push(format!(
                    "value of {key} is {:?}, expected {want:?}",
                    state.tracker.value(key)
                ));
            }
        }
        for step in &exp.required_steps {
            if !state.tracker.is_done(step) {
                failures.push(format!("required step `{step}` not done"));
            }
        }
    }

    let verdict = if state.status == SessionStatus::Escalated && !exp.escalation {
        Verdict::Escalated
    } else if failures.is_empty() {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    Ok(EvalResult {
        scenario_id: scenario.id.clone(),
        verdict,
        failures,
        status: state.status,
        turns,
        safe,
        canonical_terms,
        transcript: memory.transcript().to_vec(),
        elapsed: started.elapsed(),
    })
}

/// Runs scenarios in parallel; results keep the input order.
pub fn run_suite(env: &HarnessEnv, scenarios: &[Scenario]) -> Result<SuiteReport, HarnessError> {
    let results: Vec<EvalResult> = scenarios
        .par_iter()
        .map(|s| run_scenario(env, s))
        .collect::<Result<_, _>>()?;
    let count = |v: Verdict| results.iter().filter(|r| r.verdict == v).count();
    Ok(SuiteReport {
        passed: count(Verdict::Pass),
        failed: count(Verdict::Fail),
        escalated: count(Verdict::Escalated),
        results,
    })
}
