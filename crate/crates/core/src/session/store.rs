//! Durable session storage: one append-only JSON-lines file per session,
//! plus the finalized summary next to it.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use thiserror::Error;

use super::summary::SummaryReport;
use crate::graph::TranscriptEntry;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("storage i/o on {path}: {message}")]
    Io { path: String, message: String },
    #[error("corrupt record in {path} line {line}: {message}")]
    Corrupt { path: String, line: usize, message: String },
    #[error("invalid session id `{0}`")]
    InvalidId(String),
}

pub trait SessionStore: Send + Sync {
    /// Appends entries; they must be durable when this returns.
    fn append(&self, session: &str, entries: &[TranscriptEntry]) -> Result<(), StoreError>;
    fn load(&self, session: &str) -> Result<Vec<TranscriptEntry>, StoreError>;
    fn sessions(&self) -> Result<Vec<String>, StoreError>;
    fn save_summary(&self, session: &str, summary: &SummaryReport) -> Result<(), StoreError>;
    fn load_summary(&self, session: &str) -> Result<Option<SummaryReport>, StoreError>;
}

/// Ids become file names, so only a safe alphabet is accepted.
pub fn valid_session_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

fn check(id: &str) -> Result<(), StoreError> {
    if valid_session_id(id) {
        Ok(())
    } else {
        Err(StoreError::InvalidId(id.to_string()))
    }
}

type Stored = (Vec<TranscriptEntry>, Option<SummaryReport>);

#[derive(Debug, Default)]
pub struct MemoryStore {
    inner: Mutex<BTreeMap<String, Stored>>,
}

impl SessionStore for MemoryStore {
    fn append(&self, session: &str, entries: &[TranscriptEntry]) -> Result<(), StoreError> {
        check(session)?;
        let mut m = self.inner.lock().expect("store lock");
        m.entry(session.to_string()).or_default().0.extend_from_slice(entries);
        Ok(())
    }

    fn load(&self, session: &str) -> Result<Vec<TranscriptEntry>, StoreError> {
        check(session)?;
        Ok(self
            .inner
            .lock()
            .expect("store lock")
            .get(session)
            .map(|s| s.0.clone())
            .unwrap_or_default())
    }

    fn sessions(&self) -> Result<Vec<String>, StoreError> {
        Ok(self.inner.lock().expect("store lock").keys().cloned().collect())
    }

    fn save_summary(&self, session: &str, summary: &SummaryReport) -> Result<(), StoreError> {
        check(session)?;
        self.inner
            .lock()
            .expect("store lock")
            .entry(session.to_string())
            .or_default()
            .1 = Some(summary.clone());
        Ok(())
    }

    fn load_summary(&self, session: &str) -> Result<Option<SummaryReport>, StoreError> {
        check(session)?;
        Ok(self
            .inner
            .lock()
            .expect("store lock")
            .get(session)
            .and_then(|s| s.1.clone()))
    }
}

#[derive(Debug)]
pub struct JsonlStore {
    dir: PathBuf,
}

impl JsonlStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
        Ok(Self { dir })
    }

    fn transcript_path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.jsonl"))
    }

    fn summary_path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.summary.json"))
    }
}

fn io(path: &Path, e: std::io::Error) -> StoreError {
    StoreError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

impl SessionStore for JsonlStore {
    fn append(&self, session: &str, entries: &[TranscriptEntry]) -> Result<(), StoreError> {
        check(session)?;
        let path = self.transcript_path(session);
        let mut buf = Vec::new();
        for e in entries {
            serde_json::to_writer(&mut buf, e).expect("entries serialize");
            buf.push(b'\n');
        }
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| io(&path, e))?;
        f.write_all(&buf).map_err(|e| io(&path, e))?;
        f.sync_data().map_err(|e| io(&path, e))
    }

    fn load(&self, session: &str) -> Result<Vec<TranscriptEntry>, StoreError> {
        check(session)?;
        let path = self.transcript_path(session);
        let f = match fs::File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(vec![]),
            Err(e) => return Err(io(&path, e)),
        };
        let mut out = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(|e| StoreError::Corrupt {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Ok(out)
    }

    fn sessions(&self) -> Result<Vec<String>, StoreError> {
        let mut ids: Vec<String> = fs::read_dir(&self.dir)
            .map_err(|e| io(&self.dir, e))?
            .filter_map(Result::ok)
            .filter_map(|e| e.file_name().to_str()?.strip_suffix(".jsonl").map(str::to_string))
            .filter(|id| valid_session_id(id))
            .collect();
        ids.sort();
        Ok(ids)
    }

    fn save_summary(&self, session: &str, summary: &SummaryReport) -> Result<(), StoreError> {
        check(session)?;
        let path = self.summary_path(session);
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_vec_pretty(summary).expect("summary serializes");
        fs::write(&tmp, text).map_err(|e| io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| io(&path, e))
    }

    fn load_summary(&self, session: &str) -> Result<Option<SummaryReport>, StoreError> {
        check(session)?;
        let path = self.summary_path(session);
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| StoreError::Corrupt {
                    path: path.display().to_string(),
                    line: 0,
                    message: e.to_string(),
                }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io(&path, e)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::{Clock, SteppingClock};
    use crate::graph::Event;

    fn entry(seq: u64) -> TranscriptEntry {
        TranscriptEntry {
            seq,
            turn: 0,
            at: SteppingClock::fixed().now(),
            actor: "x".into(),
            event: Event::Note {
                text: format!("n{seq}"),
            },
        }
    }

    #[test]
    fn ids_are_restricted() {
        assert!(valid_session_id("a-1_B"));
        assert!(!valid_session_id("../etc"));
        assert!(!valid_session_id(""));
    }

    #[test]
    fn jsonl_round_trip_and_listing() {
        let dir = tempfile::tempdir().unwrap();
        let store = JsonlStore::open(dir.path()).unwrap();
        store.append("s1", &[entry(0), entry(1)]).unwrap();
        store.append("s1", &[entry(2)]).unwrap();
        store.append("s2", &[entry(0)]).unwrap();
        assert_eq!(store.load("s1").unwrap(), vec![entry(0), entry(1), entry(2)]);
        assert_eq!(store.sessions().unwrap(), ["s1", "s2"]);
        assert!(store.load("nope").unwrap().is_empty());
        assert!(store.load_summary("s1").unwrap().is_none());
        assert!(matches!(store.append("../x", &[]), Err(StoreError::InvalidId(_))));
    }

    #[test]
    fn corrupt_line_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let store = JsonlStore::open(dir.path()).unwrap();
        store.append("s", &[entry(0)]).unwrap();
        fs::OpenOptions::new()
            .append(true)
            .open(dir.path().join("s.jsonl"))
            .unwrap()
            .write_all(b"{oops\n")
            .unwrap();
        assert!(matches!(store.load("s"), Err(StoreError::Corrupt { line: 2, .. })));
    }
}
