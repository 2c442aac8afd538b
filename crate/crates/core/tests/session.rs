use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread;

use counsel_core::agents::AgentSuite;
use counsel_core::clock::SteppingClock;
use counsel_core::graph::{ecp_registry, Event, Runtime, RuntimeConfig, SessionStatus};
use counsel_core::harness::{CustomerScript, BASELINE_CUSTOMER, BASE_SCRIPT, ECP_KB, ECP_SPEC};
use counsel_core::kb::load_kb;
use counsel_core::lm::{Backend, BackendError, Completion, Prompt, ScriptedBackend};
use counsel_core::session::{JsonlStore, MemoryStore, SessionError, SessionManager, SessionStore, SummaryReport};
use counsel_core::spec::{parse_spec, ConversationSpec};

fn spec() -> Arc<ConversationSpec> {
    Arc::new(parse_spec(ECP_SPEC).unwrap())
}

fn runtime(backend: Arc<dyn Backend>, clock: Arc<SteppingClock>) -> Arc<Runtime> {
    Arc::new(
        Runtime::new(
            Arc::new(load_kb(ECP_KB).unwrap()),
            AgentSuite::builtin(),
            ecp_registry(),
            backend,
            clock,
            RuntimeConfig::default(),
        )
        .unwrap(),
    )
}

fn scripted() -> Arc<dyn Backend> {
    Arc::new(ScriptedBackend::from_yaml(BASE_SCRIPT).unwrap())
}

fn manager(store: Arc<dyn SessionStore>) -> SessionManager {
    SessionManager::open(runtime(scripted(), Arc::new(SteppingClock::fixed())), spec(), store).unwrap()
}

/// Plays the baseline customer until the session leaves `active`.
fn play_through(m: &SessionManager, id: &str) {
    let customer: CustomerScript = serde_yaml::from_str(BASELINE_CUSTOMER).unwrap();
    let mut text = customer.opening.clone().unwrap();
    for _ in 0..40 {
        let r = m.post_message(id, &text).unwrap();
        if r.status != SessionStatus::Active {
            return;
        }
        let key = r.awaiting.map(|a| a.script_key()).unwrap_or_default();
        text = match customer.answers.get(&key) {
            Some(counsel_core::harness::Answer::Always(a)) => a.clone(),
            _ => customer.default.clone().unwrap(),
        };
    }
    panic!("session did not finish");
}

#[test]
fn full_session_finalizes_from_the_stored_transcript() {
    let store: Arc<dyn SessionStore> = Arc::new(MemoryStore::default());
    let m = manager(store.clone());
    let created = m.create_with_id("s1").unwrap();
    assert!(created.disclosure.contains("automated"));
    assert!(matches!(m.finalize("s1"), Err(SessionError::NotFinalizable { .. })));
    assert!(matches!(m.summary("s1"), Err(SessionError::NotFinalized(_))));

    play_through(&m, "s1");
    let view = m.view("s1").unwrap();
    assert_eq!(view.status, SessionStatus::Complete);
    assert_eq!(view.coverage, 1.0);
    assert!(view.mandatory_remaining.is_empty());

    let report = m.finalize("s1").unwrap();
    assert_eq!(m.summary("s1").unwrap(), report);
    assert_eq!(m.finalize("s1").unwrap(), report);
    let recomputed = SummaryReport::from_transcript(spec(), &store.load("s1").unwrap()).unwrap();
    assert_eq!(recomputed, report);
    assert_eq!(report.recommendation.unwrap().safe.len(), 3);
    assert_eq!(report.collected["hours_since_intercourse"], "14 hours");
    assert!(matches!(
        m.post_message("s1", "one more thing"),
        Err(SessionError::NotActive {
            status: SessionStatus::Complete,
            ..
        })
    ));
}

#[test]
fn restart_restores_sessions_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let before = {
        let m = manager(Arc::new(JsonlStore::open(dir.path()).unwrap()));
        m.create_with_id("keep").unwrap();
        m.post_message("keep", "Hi").unwrap();
        m.post_message("keep", "About 10 hours ago.").unwrap();
        (m.view("keep").unwrap(), m.transcript("keep").unwrap())
    };
    let m = manager(Arc::new(JsonlStore::open(dir.path()).unwrap()));
    assert_eq!(m.session_ids(), ["keep"]);
    assert_eq!(m.view("keep").unwrap(), before.0);
    assert_eq!(m.transcript("keep").unwrap(), before.1);
    let r = m.post_message("keep", "No.").unwrap();
    assert!(r.reply.contains("noted: No"));
    let t = m.transcript("keep").unwrap();
    assert!(t.iter().enumerate().all(|(i, e)| e.seq == i as u64));
}

#[test]
fn idle_session_is_abandoned() {
    let clock = Arc::new(SteppingClock::fixed());
    let m = SessionManager::open(
        runtime(scripted(), clock.clone()),
        spec(),
        Arc::new(MemoryStore::default()),
    )
    .unwrap();
    m.create_with_id("idle").unwrap();
    m.post_message("idle", "Hi").unwrap();
    clock.advance(chrono::Duration::minutes(31));
    let err = m.post_message("idle", "Still there?").unwrap_err();
    assert!(matches!(
        err,
        SessionError::NotActive {
            status: SessionStatus::Abandoned,
            ..
        }
    ));
    let last = m.transcript("idle").unwrap().pop().unwrap();
    assert_eq!(
        last.event,
        Event::StatusChanged {
            status: SessionStatus::Abandoned
        }
    );
    // abandoned sessions can still be reported on
    assert_eq!(m.finalize("idle").unwrap().status, SessionStatus::Abandoned);
}

#[test]
fn sweep_abandons_only_idle_sessions() {
    let clock = Arc::new(SteppingClock::fixed());
    let m = SessionManager::open(
        runtime(scripted(), clock.clone()),
        spec(),
        Arc::new(MemoryStore::default()),
    )
    .unwrap();
    m.create_with_id("old").unwrap();
    clock.advance(chrono::Duration::minutes(40));
    m.create_with_id("new").unwrap();
    assert_eq!(m.sweep().unwrap(), ["old"]);
    assert_eq!(m.view("new").unwrap().status, SessionStatus::Active);
}

/// Blocks inside the first completion until released.
struct Gate {
    inner: Arc<dyn Backend>,
    entered: Mutex<Option<Sender<()>>>,
    release: Mutex<Receiver<()>>,
}

impl Backend for Gate {
    fn name(&self) -> &str {
        "gate"
    }

    fn complete(&self, prompt: &Prompt) -> Result<Completion, BackendError> {
        let first = self.entered.lock().unwrap().take();
        if let Some(tx) = first {
            tx.send(()).unwrap();
            self.release.lock().unwrap().recv().unwrap();
        }
        self.inner.complete(prompt)
    }
}

#[test]
fn concurrent_message_for_the_same_session_is_refused() {
    let (entered_tx, entered_rx) = channel();
    let (release_tx, release_rx) = channel();
    let gate = Arc::new(Gate {
        inner: scripted(),
        entered: Mutex::new(Some(entered_tx)),
        release: Mutex::new(release_rx),
    });
    let m = Arc::new(
        SessionManager::open(
            runtime(gate, Arc::new(SteppingClock::fixed())),
            spec(),
            Arc::new(MemoryStore::default()),
        )
        .unwrap(),
    );
    m.create_with_id("a").unwrap();
    m.create_with_id("b").unwrap();
    let first = {
        let m = m.clone();
        thread::spawn(move || m.post_message("a", "Hi"))
    };
    entered_rx.recv().unwrap();
    assert!(matches!(m.post_message("a", "Hello?"), Err(SessionError::Busy(_))));
    // other sessions are unaffected
    assert!(m.post_message("b", "Hi").is_ok());
    release_tx.send(()).unwrap();
    assert!(first.join().unwrap().is_ok());
    assert!(m.post_message("a", "About 5 hours ago.").is_ok());
}

#[test]
fn invalid_requests() {
    let m = manager(Arc::new(MemoryStore::default()));
    assert!(matches!(m.post_message("ghost", "Hi"), Err(SessionError::NotFound(_))));
    assert!(matches!(m.create_with_id("../x"), Err(SessionError::Store(_))));
    m.create_with_id("x").unwrap();
    assert!(matches!(m.create_with_id("x"), Err(SessionError::AlreadyExists(_))));
    assert!(matches!(
        m.post_message("x", "   "),
        Err(SessionError::InvalidMessage(_))
    ));
    assert!(matches!(
        m.post_message("x", &"a".repeat(5000)),
        Err(SessionError::InvalidMessage(_))
    ));
    let generated = m.create().unwrap();
    assert_eq!(generated.session_id.len(), 32);
}

#[test]
fn create_checks_spec_and_kb_ids() {
    let m = manager(Arc::new(MemoryStore::default()));
    assert!(m.create_for(Some("ecp"), Some("ecp-synthetic-v1")).is_ok());
    assert!(m.create_for(None, None).is_ok());
    assert!(matches!(
        m.create_for(Some("insulin"), None),
        Err(SessionError::UnknownSpec(_))
    ));
    assert!(matches!(
        m.create_for(None, Some("other")),
        Err(SessionError::UnknownKb(_))
    ));
    // independent trackers
    let ids = m.session_ids();
    m.post_message(&ids[0], "Hi").unwrap();
    assert_eq!(m.view(&ids[1]).unwrap().turn, 0);
}

#[test]
fn escalated_session_report_names_the_cause() {
    use counsel_core::lm::Rule;
    let rules: Vec<Rule> =
        serde_yaml::from_str("- when: {task: ^converse$}\n  tool_call: {name: lookup_price, arguments: {}}\n").unwrap();
    let backend = Arc::new(ScriptedBackend::from_yaml(BASE_SCRIPT).unwrap().with_overrides(&rules));
    let m = SessionManager::open(
        runtime(backend, Arc::new(SteppingClock::fixed())),
        spec(),
        Arc::new(MemoryStore::default()),
    )
    .unwrap();
    m.create_with_id("e").unwrap();
    let r = m.post_message("e", "Hi").unwrap();
    assert_eq!(r.status, SessionStatus::Escalated);
    assert!(r.reply.contains("pharmacist"));
    let report = m.finalize("e").unwrap();
    assert_eq!(report.flags.len(), 1);
    assert!(report.flags[0].cause.contains("lookup_price"), "{:?}", report.flags);
}
