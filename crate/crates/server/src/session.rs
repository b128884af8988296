//! In-memory sessions with an optional append-only JSONL log per session.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use polyrag_core::types::{ChatMessage, Clock, ConversationHistory};
use serde::{Deserialize, Serialize};
use tokio::sync::{Mutex, RwLock};

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("session {0} not found")]
    NotFound(String),
    #[error("session {0} already exists")]
    AlreadyExists(String),
    #[error("session log {path}: {reason}")]
    Persistence { path: String, reason: String },
}

#[derive(Debug, Clone)]
pub struct Session {
    pub session_id: String,
    pub history: ConversationHistory,
    pub created_ms: u64,
    pub updated_ms: u64,
}

/// Transcript returned by the session endpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub created_ms: u64,
    pub updated_ms: u64,
    pub messages: Vec<ChatMessage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub created_ms: u64,
    pub updated_ms: u64,
    pub message_count: usize,
}

impl Session {
    pub fn view(&self) -> SessionView {
        SessionView {
            session_id: self.session_id.clone(),
            created_ms: self.created_ms,
            updated_ms: self.updated_ms,
            messages: self.history.messages().to_vec(),
        }
    }

    pub fn summary(&self) -> SessionSummary {
        SessionSummary {
            session_id: self.session_id.clone(),
            created_ms: self.created_ms,
            updated_ms: self.updated_ms,
            message_count: self.history.len(),
        }
    }
}

/// The mutex around each session doubles as its turn lock.
pub type SessionHandle = Arc<Mutex<Session>>;

pub struct SessionStore {
    sessions: RwLock<HashMap<String, SessionHandle>>,
    log_dir: Option<PathBuf>,
    clock: Arc<dyn Clock>,
}

impl SessionStore {
    pub fn in_memory(clock: Arc<dyn Clock>) -> Self {
        SessionStore { sessions: RwLock::new(HashMap::new()), log_dir: None, clock }
    }

    /// Persists every message to `{dir}/{session_id}.jsonl` and restores
    /// sessions already logged there.
    pub fn persistent(dir: impl Into<PathBuf>, clock: Arc<dyn Clock>) -> Result<Self, SessionError> {
        let dir = dir.into();
        let io = |e: std::io::Error| SessionError::Persistence { path: dir.display().to_string(), reason: e.to_string() };
        std::fs::create_dir_all(&dir).map_err(io)?;
        let mut sessions = HashMap::new();
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        paths.sort();
        for path in paths {
            let session = load_log(&path)?;
            sessions.insert(session.session_id.clone(), Arc::new(Mutex::new(session)));
        }
        Ok(SessionStore { sessions: RwLock::new(sessions), log_dir: Some(dir), clock })
    }

    pub async fn create(&self, id: Option<String>) -> Result<SessionHandle, SessionError> {
        let id = id.unwrap_or_else(|| uuid::Uuid::new_v4().simple().to_string());
        let mut map = self.sessions.write().await;
        if map.contains_key(&id) {
            return Err(SessionError::AlreadyExists(id));
        }
        let now = self.clock.now_ms();
        let session = Session { session_id: id.clone(), history: ConversationHistory::new(), created_ms: now, updated_ms: now };
        let handle = Arc::new(Mutex::new(session));
        map.insert(id, handle.clone());
        Ok(handle)
    }

    pub async fn get(&self, id: &str) -> Option<SessionHandle> {
        self.sessions.read().await.get(id).cloned()
    }

    /// Returns the named session, creating it when absent.
    pub async fn get_or_create(&self, id: &str) -> SessionHandle {
        if let Some(h) = self.get(id).await {
            return h;
        }
        match self.create(Some(id.to_string())).await {
            Ok(h) => h,
            // Lost a race with another creator.
            Err(_) => self.get(id).await.expect("session exists after a failed create"),
        }
    }

    pub async fn len(&self) -> usize {
        self.sessions.read().await.len()
    }

    pub async fn is_empty(&self) -> bool {
        self.len().await == 0
    }

    pub async fn list(&self) -> Vec<SessionSummary> {
        let handles: Vec<SessionHandle> = self.sessions.read().await.values().cloned().collect();
        let mut out = Vec::with_capacity(handles.len());
        for h in handles {
            out.push(h.lock().await.summary());
        }
        out.sort_by(|a, b| a.created_ms.cmp(&b.created_ms).then_with(|| a.session_id.cmp(&b.session_id)));
        out
    }

    pub fn now_ms(&self) -> u64 {
        self.clock.now_ms()
    }

    /// Appends messages `from..` of the session's history to its log.
    pub fn persist_from(&self, session: &Session, from: usize) -> Result<(), SessionError> {
        let Some(dir) = &self.log_dir else {
            return Ok(());
        };
        let path = dir.join(format!("{}.jsonl", session.session_id));
        let err = |e: String| SessionError::Persistence { path: path.display().to_string(), reason: e };
        let mut file =
            std::fs::OpenOptions::new().create(true).append(true).open(&path).map_err(|e| err(e.to_string()))?;
        for m in &session.history.messages()[from..] {
            let line = serde_json::to_string(m).map_err(|e| err(e.to_string()))?;
            writeln!(file, "{line}").map_err(|e| err(e.to_string()))?;
        }
        Ok(())
    }
}

fn load_log(path: &Path) -> Result<Session, SessionError> {
    let err = |e: String| SessionError::Persistence { path: path.display().to_string(), reason: e };
    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let mut history = ConversationHistory::new();
    let mut first = None;
    let mut last = 0;
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let m: ChatMessage = serde_json::from_str(line).map_err(|e| err(format!("line {}: {e}", n + 1)))?;
        first.get_or_insert(m.timestamp);
        last = m.timestamp;
        history.push(m.role, m.content, m.timestamp).map_err(|e| err(format!("line {}: {e}", n + 1)))?;
    }
    Ok(Session { session_id: id, history, created_ms: first.unwrap_or(0), updated_ms: last })
}
