//! Session service: owns live sessions, serializes turns per session,
//! persists every transcript entry and produces the final report.

mod store;
mod summary;

use std::collections::HashMap;
use std::sync::{Arc, Mutex, TryLockError};

use serde::Serialize;
use thiserror::Error;

use crate::graph::{Awaiting, Event, MemoryError, Runtime, RuntimeError, SessionStatus, SharedMemory, TranscriptEntry};
use crate::spec::{coverage_report, ConversationSpec};

pub use store::{valid_session_id, JsonlStore, MemoryStore, SessionStore, StoreError};
pub use summary::{ContraindicationLine, DroppedLine, FlagLine, FollowupLine, SummaryReport};

/// Shown to the customer when a session opens.
pub const DISCLOSURE: &str = "You are chatting with Ava, an automated pharmacy assistant, not a person. \
A pharmacist is available at the counter at any time.";
pub const DEFAULT_IDLE_MINUTES: i64 = 30;
pub const MAX_MESSAGE_CHARS: usize = 2000;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("no session `{0}`")]
    NotFound(String),
    #[error("unknown conversation spec `{0}`")]
    UnknownSpec(String),
    #[error("unknown knowledge base `{0}`")]
    UnknownKb(String),
    #[error("session `{0}` already exists")]
    AlreadyExists(String),
    #[error("session `{0}` is handling another message")]
    Busy(String),
    #[error("session `{id}` is {status:?}")]
    NotActive { id: String, status: SessionStatus },
    #[error("session `{id}` is still {status:?} and cannot be finalized")]
    NotFinalizable { id: String, status: SessionStatus },
    #[error("session `{0}` has not been finalized")]
    NotFinalized(String),
    #[error("invalid message: {0}")]
    InvalidMessage(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Runtime(RuntimeError),
    #[error("stored transcript of `{id}` does not replay: {source}")]
    Corrupt { id: String, source: MemoryError },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Created {
    pub session_id: String,
    pub status: SessionStatus,
    pub disclosure: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MessageReply {
    pub session_id: String,
    pub reply: String,
    pub awaiting: Option<Awaiting>,
    pub status: SessionStatus,
    pub turn: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionView {
    pub session_id: String,
    pub status: SessionStatus,
    pub turn: u32,
    pub awaiting: Option<Awaiting>,
    /// Fraction of mandatory steps done.
    pub coverage: f64,
    pub mandatory_remaining: Vec<String>,
    pub safe: Option<Vec<String>>,
}

struct Slot {
    memory: SharedMemory,
    persisted: usize,
}

pub struct SessionManager {
    runtime: Arc<Runtime>,
    spec: Arc<ConversationSpec>,
    store: Arc<dyn SessionStore>,
    sessions: Mutex<HashMap<String, Arc<Mutex<Slot>>>>,
    idle: chrono::Duration,
}

impl std::fmt::Debug for SessionManager {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SessionManager")
            .field("runtime", &self.runtime)
            .field("spec", &self.spec.medication_id)
            .field("idle", &self.idle)
            .finish()
    }
}

impl SessionManager {
    /// Opens the manager and restores every session found in `store`.
    pub fn open(
        runtime: Arc<Runtime>,
        spec: Arc<ConversationSpec>,
        store: Arc<dyn SessionStore>,
    ) -> Result<Self, SessionError> {
        let mut sessions = HashMap::new();
        for id in store.sessions()? {
            let entries = store.load(&id)?;
            let memory = SharedMemory::replay(spec.clone(), &entries)
                .map_err(|source| SessionError::Corrupt { id: id.clone(), source })?;
            let persisted = memory.transcript().len();
            sessions.insert(id, Arc::new(Mutex::new(Slot { memory, persisted })));
        }
        Ok(Self {
            runtime,
            spec,
            store,
            sessions: Mutex::new(sessions),
            idle: chrono::Duration::minutes(DEFAULT_IDLE_MINUTES),
        })
    }

    pub fn with_idle_timeout(mut self, idle: chrono::Duration) -> Self {
        self.idle = idle;
        self
    }

    pub fn spec(&self) -> &ConversationSpec {
        &self.spec
    }

    pub fn runtime(&self) -> &Runtime {
        &self.runtime
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.sessions.lock().expect("session map").keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn create(&self) -> Result<Created, SessionError> {
        self.create_with_id(&uuid::Uuid::new_v4().simple().to_string())
    }

    /// Like `create`, but checks the caller's spec and KB ids against the
    /// loaded ones first. `None` accepts whatever is loaded.
    pub fn create_for(&self, spec_id: Option<&str>, kb_id: Option<&str>) -> Result<Created, SessionError> {
        if let Some(s) = spec_id.filter(|s| *s != self.spec.medication_id) {
            return Err(SessionError::UnknownSpec(s.to_string()));
        }
        if let Some(k) = kb_id.filter(|k| *k != self.runtime.kb().id) {
            return Err(SessionError::UnknownKb(k.to_string()));
        }
        self.create()
    }

    pub fn create_with_id(&self, id: &str) -> Result<Created, SessionError> {
        if !valid_session_id(id) {
            return Err(StoreError::InvalidId(id.to_string()).into());
        }
        let mut map = self.sessions.lock().expect("session map");
        if map.contains_key(id) {
            return Err(SessionError::AlreadyExists(id.to_string()));
        }
        let mut slot = Slot {
            memory: SharedMemory::new(self.spec.clone()),
            persisted: 0,
        };
        self.runtime
            .start_session(&mut slot.memory, id)
            .map_err(SessionError::Runtime)?;
        self.persist(id, &mut slot)?;
        let status = slot.memory.state().status;
        map.insert(id.to_string(), Arc::new(Mutex::new(slot)));
        Ok(Created {
            session_id: id.to_string(),
            status,
            disclosure: DISCLOSURE.to_string(),
        })
    }

    fn slot(&self, id: &str) -> Result<Arc<Mutex<Slot>>, SessionError> {
        self.sessions
            .lock()
            .expect("session map")
            .get(id)
            .cloned()
            .ok_or_else(|| SessionError::NotFound(id.to_string()))
    }

    /// Waits for the session; reads never fail as busy.
    fn with_slot<T>(&self, id: &str, f: impl FnOnce(&mut Slot) -> Result<T, SessionError>) -> Result<T, SessionError> {
        let slot = self.slot(id)?;
        let mut guard = slot.lock().unwrap_or_else(|p| p.into_inner());
        f(&mut guard)
    }

    fn persist(&self, id: &str, slot: &mut Slot) -> Result<(), SessionError> {
        let new = &slot.memory.transcript()[slot.persisted..];
        if !new.is_empty() {
            self.store.append(id, new)?;
            slot.persisted = slot.memory.transcript().len();
        }
        Ok(())
    }

    /// Marks the session abandoned when it has been idle too long.
    fn expire(&self, id: &str, slot: &mut Slot) -> Result<bool, SessionError> {
        let state = slot.memory.state();
        let Some(last) = slot.memory.transcript().last() else {
            return Ok(false);
        };
        let now = self.runtime.clock().now();
        if state.status != SessionStatus::Active || now - last.at <= self.idle {
            return Ok(false);
        }
        slot.memory
            .append(
                now,
                "runtime",
                Event::StatusChanged {
                    status: SessionStatus::Abandoned,
                },
            )
            .map_err(|source| SessionError::Corrupt {
                id: id.to_string(),
                source,
            })?;
        self.persist(id, slot)?;
        Ok(true)
    }

    /// Abandons every idle session; returns their ids.
    pub fn sweep(&self) -> Result<Vec<String>, SessionError> {
        let mut out = Vec::new();
        for id in self.session_ids() {
            let slot = self.slot(&id)?;
            let Ok(mut guard) = slot.try_lock() else { continue };
            if self.expire(&id, &mut guard)? {
                out.push(id);
            }
        }
        Ok(out)
    }

    /// Runs one customer turn. A second message for the same session while
    /// one is in flight is refused rather than queued.
    pub fn post_message(&self, id: &str, text: &str) -> Result<MessageReply, SessionError> {
        let text = text.trim();
        if text.is_empty() {
            return Err(SessionError::InvalidMessage("message is empty".into()));
        }
        if text.chars().count() > MAX_MESSAGE_CHARS {
            return Err(SessionError::InvalidMessage(format!(
                "message exceeds {MAX_MESSAGE_CHARS} characters"
            )));
        }
        let slot = self.slot(id)?;
        let mut guard = match slot.try_lock() {
            Ok(g) => g,
            Err(TryLockError::WouldBlock) => return Err(SessionError::Busy(id.to_string())),
            Err(TryLockError::Poisoned(p)) => p.into_inner(),
        };
        self.expire(id, &mut guard)?;
        let status = guard.memory.state().status;
        if status != SessionStatus::Active {
            return Err(SessionError::NotActive {
                id: id.to_string(),
                status,
            });
        }
        let result = self.runtime.run_turn(&mut guard.memory, text);
        // whatever was appended is stored before anyone sees the reply
        self.persist(id, &mut guard)?;
        let outcome = result.map_err(SessionError::Runtime)?;
        Ok(MessageReply {
            session_id: id.to_string(),
            reply: outcome.reply,
            awaiting: outcome.awaiting,
            status: outcome.status,
            turn: guard.memory.state().turn,
        })
    }

    pub fn view(&self, id: &str) -> Result<SessionView, SessionError> {
        self.with_slot(id, |slot| {
            let state = slot.memory.state();
            let report = coverage_report(&self.spec, &state.tracker);
            Ok(SessionView {
                session_id: id.to_string(),
                status: state.status,
                turn: state.turn,
                awaiting: state.awaiting.clone(),
                coverage: report.fraction(),
                mandatory_remaining: report.mandatory_remaining,
                safe: state
                    .recommendation
                    .as_ref()
                    .map(|r| r.safe.iter().map(|p| p.id.clone()).collect()),
            })
        })
    }

    pub fn transcript(&self, id: &str) -> Result<Vec<TranscriptEntry>, SessionError> {
        self.with_slot(id, |slot| Ok(slot.memory.transcript().to_vec()))
    }

    /// Builds the report from the stored transcript and persists it.
    /// Finalizing twice returns the same report.
    pub fn finalize(&self, id: &str) -> Result<SummaryReport, SessionError> {
        self.with_slot(id, |slot| {
            let status = slot.memory.state().status;
            if status == SessionStatus::Active {
                return Err(SessionError::NotFinalizable {
                    id: id.to_string(),
                    status,
                });
            }
            let entries = self.store.load(id)?;
            let report = SummaryReport::from_transcript(self.spec.clone(), &entries).map_err(|source| {
                SessionError::Corrupt {
                    id: id.to_string(),
                    source,
                }
            })?;
            self.store.save_summary(id, &report)?;
            Ok(report)
        })
    }

    pub fn summary(&self, id: &str) -> Result<SummaryReport, SessionError> {
        self.slot(id)?;
        self.store
            .load_summary(id)?
            .ok_or_else(|| SessionError::NotFinalized(id.to_string()))
    }
}
