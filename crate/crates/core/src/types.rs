//! Shared value types for conversations and knowledge.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
    System,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::User => "user",
            Role::Assistant => "assistant",
            Role::System => "system",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub index: usize,
    pub role: Role,
    pub content: String,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum HistoryError {
    #[error("message content must be non-empty for {0} messages")]
    EmptyContent(&'static str),
}

/// An ordered dialogue. Indices are assigned on push and stay contiguous from 0.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConversationHistory {
    messages: Vec<ChatMessage>,
}

impl ConversationHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, role: Role, content: impl Into<String>, timestamp: u64) -> Result<&ChatMessage, HistoryError> {
        let content = content.into();
        if content.is_empty() && role != Role::System {
            return Err(HistoryError::EmptyContent(role.as_str()));
        }
        let index = self.messages.len();
        self.messages.push(ChatMessage { index, role, content, timestamp });
        Ok(&self.messages[index])
    }

    pub fn messages(&self) -> &[ChatMessage] {
        &self.messages
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&ChatMessage> {
        self.messages.get(index)
    }

    pub fn last(&self) -> Option<&ChatMessage> {
        self.messages.last()
    }

    /// Longest suffix of whole messages whose total content length (in chars)
    /// fits in `max_chars`. The latest message is always kept, even when it
    /// alone is longer than the budget. Original indices are preserved.
    pub fn window(&self, max_chars: usize) -> ConversationHistory {
        let mut total = 0usize;
        let mut start = self.messages.len();
        for (pos, msg) in self.messages.iter().enumerate().rev() {
            let len = msg.content.chars().count();
            if start != self.messages.len() && total + len > max_chars {
                break;
            }
            total += len;
            start = pos;
        }
        ConversationHistory { messages: self.messages[start..].to_vec() }
    }

    /// Renders the history as `[index] role: content` lines.
    pub fn render(&self) -> String {
        self.messages
            .iter()
            .map(|m| format!("[{}] {}: {}", m.index, m.role.as_str(), m.content))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Free-function form of [`ConversationHistory::window`].
pub fn history_window(history: &ConversationHistory, max_chars: usize) -> ConversationHistory {
    history.window(max_chars)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub original: String,
    pub enriched: Option<String>,
    pub per_agent_rewrites: BTreeMap<String, String>,
}

impl Query {
    pub fn new(original: impl Into<String>) -> Self {
        Query { original: original.into(), enriched: None, per_agent_rewrites: BTreeMap::new() }
    }

    /// The enriched text when present, otherwise the original.
    pub fn effective(&self) -> &str {
        self.enriched.as_deref().filter(|s| !s.is_empty()).unwrap_or(&self.original)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Vdb,
    SearchEngine,
    HttpApi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeChunk {
    pub chunk_id: String,
    pub text: String,
    /// Unit-normalized for vector-store chunks; absent for online results.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
    pub source_uri: String,
    pub source_kind: SourceKind,
    pub source_name: String,
}

/// Source of message and session timestamps, in milliseconds.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

/// Wall-clock milliseconds since the Unix epoch.
#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
    }
}

/// Deterministic clock: every reading advances by a fixed step.
#[derive(Debug, Default)]
pub struct StepClock {
    next: std::sync::atomic::AtomicU64,
    step: u64,
}

impl StepClock {
    pub fn new(start: u64, step: u64) -> Self {
        StepClock { next: std::sync::atomic::AtomicU64::new(start), step }
    }
}

impl Clock for StepClock {
    fn now_ms(&self) -> u64 {
        self.next.fetch_add(self.step, std::sync::atomic::Ordering::SeqCst)
    }
}
