//! Conversation-context handling: enriching the query for retrieval, and
//! distilling the history down to the messages the final answer needs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::llm::{ChatRequest, LlmGateway};
use crate::prompts;
use crate::types::{ChatMessage, ConversationHistory};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextAnalysis {
    pub analysis: String,
    /// Strictly ascending, each below the history length.
    pub indices_of_related_messages: Vec<usize>,
    pub related_messages: Vec<ChatMessage>,
}

impl ContextAnalysis {
    /// Everything is related; used when the model output cannot be parsed.
    pub fn full(history: &ConversationHistory) -> Self {
        ContextAnalysis {
            analysis: String::new(),
            indices_of_related_messages: (0..history.len()).collect(),
            related_messages: history.messages().to_vec(),
        }
    }

    pub fn is_consistent_with(&self, history: &ConversationHistory) -> bool {
        let idx = &self.indices_of_related_messages;
        idx.windows(2).all(|w| w[0] < w[1])
            && idx.iter().all(|&i| i < history.len())
            && self.related_messages.len() == idx.len()
            && idx.iter().zip(&self.related_messages).all(|(&i, m)| history.get(i) == Some(m))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("message index {index} out of range for history of {len}")]
pub struct IndexOutOfRange {
    pub index: usize,
    pub len: usize,
}

/// Order-preserving selection of history entries.
pub fn extract_related(history: &ConversationHistory, indices: &[usize]) -> Result<Vec<ChatMessage>, IndexOutOfRange> {
    indices
        .iter()
        .map(|&i| history.get(i).cloned().ok_or(IndexOutOfRange { index: i, len: history.len() }))
        .collect()
}

/// Extracts the JSON object of a completion: the first fenced block if one
/// exists, otherwise the outermost braces.
pub fn extract_json_block(output: &str) -> Option<serde_json::Value> {
    let mut candidates = Vec::new();
    if let Some(start) = output.find("```") {
        let body = &output[start + 3..];
        let body = body.trim_start_matches(|c: char| c.is_ascii_alphabetic());
        if let Some(end) = body.find("```") {
            candidates.push(body[..end].trim().to_string());
        }
    }
    if let (Some(open), Some(close)) = (output.find('{'), output.rfind('}')) {
        if open < close {
            candidates.push(output[open..=close].to_string());
        }
    }
    candidates.into_iter().find_map(|c| serde_json::from_str::<serde_json::Value>(&c).ok().filter(|v| v.is_object()))
}

/// Parses the two-field analysis payload. Returns `None` when the output is
/// not usable at all; out-of-range or malformed indices are dropped.
pub fn parse_analysis(output: &str, history: &ConversationHistory) -> Option<ContextAnalysis> {
    let v = extract_json_block(output)?;
    let raw = v.get("indices_of_related_messages")?.as_array()?;
    let mut indices: Vec<usize> = Vec::new();
    for item in raw {
        match item.as_u64().map(|i| i as usize) {
            Some(i) if i < history.len() => indices.push(i),
            _ => tracing::warn!(index = %item, len = history.len(), "dropping invalid related-message index"),
        }
    }
    indices.sort_unstable();
    indices.dedup();
    let analysis = match v.get("analysis") {
        Some(serde_json::Value::String(s)) => s.clone(),
        Some(serde_json::Value::Null) | None => String::new(),
        Some(other) => other.to_string(),
    };
    let related_messages = extract_related(history, &indices).ok()?;
    Some(ContextAnalysis { analysis, indices_of_related_messages: indices, related_messages })
}

#[derive(Clone)]
pub struct ContextManager {
    llm: LlmGateway,
    model: String,
    temperature: f64,
    max_tokens: u32,
    window_chars: Option<usize>,
}

impl ContextManager {
    pub fn new(llm: LlmGateway, model: impl Into<String>) -> Self {
        ContextManager { llm, model: model.into(), temperature: 0.0, max_tokens: 1024, window_chars: None }
    }

    pub fn with_sampling(mut self, temperature: f64, max_tokens: u32) -> Self {
        self.temperature = temperature;
        self.max_tokens = max_tokens;
        self
    }

    /// Shows the model only the most recent `max_chars` of history. Indices
    /// in the analysis still refer to the full history.
    pub fn with_window(mut self, max_chars: usize) -> Self {
        self.window_chars = Some(max_chars);
        self
    }

    fn request(&self, prompt: String) -> ChatRequest {
        let mut req = ChatRequest::user(self.model.clone(), prompt);
        req.temperature = self.temperature;
        req.max_tokens = self.max_tokens;
        req
    }

    fn prompt(&self, template: &str, query: &str, history: &ConversationHistory) -> String {
        let rendered = match self.window_chars {
            Some(n) => history.window(n).render(),
            None => history.render(),
        };
        let vars: BTreeMap<&str, &str> = [("query", query), ("history", rendered.as_str())].into_iter().collect();
        prompts::fill(template, &vars)
    }

    /// Resolves references to earlier turns. Never returns empty text; when
    /// there is no history or no usable completion the query comes back
    /// unchanged.
    pub async fn rewrite_for_retrieval(&self, query: &str, history: &ConversationHistory) -> String {
        if history.is_empty() {
            return query.to_string();
        }
        match self.llm.chat(&self.request(self.prompt(prompts::CONTEXT_REWRITE, query, history))).await {
            Ok(out) if !out.trim().is_empty() => out.trim().to_string(),
            Ok(_) => query.to_string(),
            Err(e) => {
                tracing::warn!(error = %e, "context rewrite failed; using the original query");
                query.to_string()
            }
        }
    }

    /// Asks for the related-message analysis. Unusable output degrades to
    /// the full history so the summarizer never loses context.
    pub async fn analyze_context(&self, query: &str, history: &ConversationHistory) -> ContextAnalysis {
        if history.is_empty() {
            return ContextAnalysis::full(history);
        }
        match self.llm.chat(&self.request(self.prompt(prompts::CONTEXT_ANALYSIS, query, history))).await {
            Ok(out) => parse_analysis(&out, history).unwrap_or_else(|| {
                tracing::warn!("unparseable context analysis; passing the full history");
                ContextAnalysis::full(history)
            }),
            Err(e) => {
                tracing::warn!(error = %e, "context analysis failed; passing the full history");
                ContextAnalysis::full(history)
            }
        }
    }
}
