//! Wire format of the chat stream.
//!
//! Each event is written as an `event:` line naming the kind, a single
//! `data:` line holding a JSON payload, and a blank line. A normal turn is
//! `meta token* citations done`; a failed one is `(meta token*)? error done`.

use std::collections::BTreeMap;

use polyrag_core::pipeline::{TurnEvent, TurnMeta, TurnTrace};
use polyrag_core::summarizer::Citation;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    SessionNotFound,
    EmptyMessage,
    TurnFailed,
    InvalidRequest,
}

/// Condensed trace carried by the `done` event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub turn_index: usize,
    pub enriched_query: String,
    pub activated_agents: Vec<String>,
    pub chunk_counts: BTreeMap<String, usize>,
    pub presented_chunks: usize,
    pub citation_count: usize,
    pub first_token_us: Option<u64>,
    pub total_us: u64,
    pub errors: Vec<String>,
}

impl From<&TurnTrace> for TraceSummary {
    fn from(t: &TurnTrace) -> Self {
        TraceSummary {
            turn_index: t.turn_index,
            enriched_query: t.enriched_query.clone(),
            activated_agents: t.activated_agents.clone(),
            chunk_counts: t.chunk_counts.clone(),
            presented_chunks: t.presented_chunks.len(),
            citation_count: t.citation_count,
            first_token_us: t.timings.first_token_us,
            total_us: t.timings.citations_done_us,
            errors: t.errors.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", content = "data", rename_all = "snake_case")]
pub enum ServiceEvent {
    Meta(TurnMeta),
    Token {
        text: String,
    },
    Citations {
        citations: Vec<Citation>,
    },
    Error {
        code: ErrorCode,
        message: String,
    },
    Done {
        session_id: String,
        /// Absent when the turn failed.
        trace: Option<TraceSummary>,
    },
}

impl From<TurnEvent> for ServiceEvent {
    fn from(e: TurnEvent) -> Self {
        match e {
            TurnEvent::Meta(m) => ServiceEvent::Meta(m),
            TurnEvent::Token(text) => ServiceEvent::Token { text },
            TurnEvent::Citations(citations) => ServiceEvent::Citations { citations },
        }
    }
}

impl ServiceEvent {
    pub fn name(&self) -> &'static str {
        match self {
            ServiceEvent::Meta(_) => "meta",
            ServiceEvent::Token { .. } => "token",
            ServiceEvent::Citations { .. } => "citations",
            ServiceEvent::Error { .. } => "error",
            ServiceEvent::Done { .. } => "done",
        }
    }

    /// The JSON payload of the `data:` line.
    pub fn data(&self) -> serde_json::Value {
        let v = serde_json::to_value(self).expect("service events always serialize");
        v.get("data").cloned().unwrap_or(serde_json::Value::Null)
    }

    pub fn to_sse(&self) -> String {
        format!("event: {}\ndata: {}\n\n", self.name(), self.data())
    }

    fn from_parts(name: &str, data: serde_json::Value) -> Result<ServiceEvent, ProtocolError> {
        serde_json::from_value(serde_json::json!({ "event": name, "data": data }))
            .map_err(|e| ProtocolError::BadPayload { event: name.to_string(), reason: e.to_string() })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProtocolError {
    #[error("malformed line {0:?}")]
    MalformedLine(String),
    #[error("event block without an event name")]
    MissingEvent,
    #[error("unknown event {0:?}")]
    UnknownEvent(String),
    #[error("bad {event} payload: {reason}")]
    BadPayload { event: String, reason: String },
    #[error("{0}")]
    Grammar(String),
}

/// Parses a complete event-stream body. Multi-line `data:` fields are joined
/// with newlines; comment lines starting with `:` are skipped.
pub fn parse_sse(text: &str) -> Result<Vec<ServiceEvent>, ProtocolError> {
    let mut events = Vec::new();
    let mut name: Option<String> = None;
    let mut data: Vec<String> = Vec::new();
    let mut flush = |name: &mut Option<String>, data: &mut Vec<String>| -> Result<(), ProtocolError> {
        if name.is_none() && data.is_empty() {
            return Ok(());
        }
        let n = name.take().ok_or(ProtocolError::MissingEvent)?;
        if !matches!(n.as_str(), "meta" | "token" | "citations" | "error" | "done") {
            return Err(ProtocolError::UnknownEvent(n));
        }
        let raw = data.join("\n");
        data.clear();
        let payload: serde_json::Value = serde_json::from_str(&raw)
            .map_err(|e| ProtocolError::BadPayload { event: n.clone(), reason: e.to_string() })?;
        events.push(ServiceEvent::from_parts(&n, payload)?);
        Ok(())
    };
    for line in text.lines() {
        if line.is_empty() {
            flush(&mut name, &mut data)?;
        } else if line.starts_with(':') {
            continue;
        } else if let Some((field, value)) = line.split_once(':') {
            let value = value.strip_prefix(' ').unwrap_or(value);
            match field {
                "event" => name = Some(value.to_string()),
                "data" => data.push(value.to_string()),
                "id" | "retry" => {}
                _ => return Err(ProtocolError::MalformedLine(line.to_string())),
            }
        } else {
            return Err(ProtocolError::MalformedLine(line.to_string()));
        }
    }
    flush(&mut name, &mut data)?;
    Ok(events)
}

/// Checks one request's events against the stream grammar.
pub fn check_grammar(events: &[ServiceEvent]) -> Result<(), ProtocolError> {
    let fail = |m: String| Err(ProtocolError::Grammar(m));
    let names: Vec<&str> = events.iter().map(|e| e.name()).collect();
    match names.iter().position(|n| *n == "done") {
        None => return fail("stream has no done event".into()),
        Some(i) if i + 1 != names.len() => return fail(format!("{} event(s) after done", names.len() - i - 1)),
        Some(_) => {}
    }
    let body = &names[..names.len() - 1];
    let mut i = 0;
    if body.first() == Some(&"meta") {
        i = 1;
        while body.get(i) == Some(&"token") {
            i += 1;
        }
    }
    match &body[i..] {
        ["citations"] if i > 0 => Ok(()),
        ["error"] => Ok(()),
        rest => fail(format!("unexpected sequence {:?} before done (full stream {:?})", rest, names)),
    }
}
