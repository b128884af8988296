//! Uniform access to chat-completion and embedding models.
//!
//! Two chat backends ship: a scripted [`MockBackend`] that makes every
//! pipeline path testable offline, and [`OpenAiBackend`] for any server
//! speaking the chat-completions wire format. Embedders follow the same
//! split ([`HashedEmbedder`] / [`OpenAiEmbedder`]).

use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use futures::stream::{self, BoxStream, StreamExt};
use serde::{Deserialize, Serialize};
use tokio::time::Instant;

use crate::types::Role;
use crate::vector;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LlmError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("stream interrupted after {} chars", partial.len())]
    StreamInterrupted { partial: String },
    #[error("embedding failed: {0}")]
    EmbeddingFailed(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<(Role, String)>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub stream: bool,
}

impl ChatRequest {
    pub fn new(model: impl Into<String>, messages: Vec<(Role, String)>) -> Self {
        ChatRequest { model: model.into(), messages, temperature: 0.2, max_tokens: 1024, stream: false }
    }

    pub fn user(model: impl Into<String>, prompt: impl Into<String>) -> Self {
        Self::new(model, vec![(Role::User, prompt.into())])
    }

    /// All message contents joined by blank lines; what mock rules match against.
    pub fn prompt_text(&self) -> String {
        self.messages.iter().map(|(_, c)| c.as_str()).collect::<Vec<_>>().join("\n\n")
    }

    fn check(&self) -> Result<(), LlmError> {
        if self.messages.is_empty() {
            return Err(LlmError::InvalidRequest("messages must be non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum StreamEvent {
    Token(String),
    Done,
}

pub type TokenStream = BoxStream<'static, Result<StreamEvent, LlmError>>;

#[async_trait]
pub trait ChatBackend: Send + Sync {
    async fn chat(&self, request: &ChatRequest) -> Result<String, LlmError>;

    /// Token events followed by exactly one `Done`, or an error item.
    async fn chat_stream(&self, request: &ChatRequest) -> Result<TokenStream, LlmError>;
}

/// Collects a token stream into its full text.
pub async fn collect_stream(mut stream: TokenStream) -> Result<String, LlmError> {
    let mut out = String::new();
    while let Some(ev) = stream.next().await {
        match ev? {
            StreamEvent::Token(t) => out.push_str(&t),
            StreamEvent::Done => break,
        }
    }
    Ok(out)
}

/// Shareable handle adding a per-call timeout around a backend.
#[derive(Clone)]
pub struct LlmGateway {
    backend: Arc<dyn ChatBackend>,
    timeout: Duration,
}

impl LlmGateway {
    pub fn new(backend: Arc<dyn ChatBackend>, timeout: Duration) -> Self {
        LlmGateway { backend, timeout }
    }

    pub async fn chat(&self, request: &ChatRequest) -> Result<String, LlmError> {
        request.check()?;
        match tokio::time::timeout(self.timeout, self.backend.chat(request)).await {
            Ok(r) => r,
            Err(_) => Err(LlmError::Timeout(self.timeout)),
        }
    }

    /// The timeout covers opening the stream, not its full duration.
    pub async fn chat_stream(&self, request: &ChatRequest) -> Result<TokenStream, LlmError> {
        request.check()?;
        let mut req = request.clone();
        req.stream = true;
        match tokio::time::timeout(self.timeout, self.backend.chat_stream(&req)).await {
            Ok(r) => r,
            Err(_) => Err(LlmError::Timeout(self.timeout)),
        }
    }
}

/// A gateway bound to one model and its sampling settings.
#[derive(Clone)]
pub struct ModelHandle {
    pub gateway: LlmGateway,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ModelHandle {
    pub fn new(gateway: LlmGateway, model: impl Into<String>) -> Self {
        ModelHandle { gateway, model: model.into(), temperature: 0.0, max_tokens: 1024 }
    }

    pub fn request(&self, prompt: impl Into<String>) -> ChatRequest {
        let mut req = ChatRequest::user(self.model.clone(), prompt.into());
        req.temperature = self.temperature;
        req.max_tokens = self.max_tokens;
        req
    }

    pub async fn complete(&self, prompt: impl Into<String>) -> Result<String, LlmError> {
        self.gateway.chat(&self.request(prompt)).await
    }
}

// ---------------------------------------------------------------------------
// Mock backend

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    /// Substring matched against the concatenated prompt.
    pub pattern: String,
    /// Further substrings that must all be present too.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub requires: Vec<String>,
    #[serde(default)]
    pub response: String,
    #[serde(default)]
    pub latency_ms: u64,
    /// Fail the call with `BackendUnavailable`.
    #[serde(default)]
    pub unavailable: bool,
    /// Streaming only: cut the stream after this many token events.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interrupt_after: Option<usize>,
}

impl MockRule {
    pub fn new(pattern: impl Into<String>, response: impl Into<String>, latency_ms: u64) -> Self {
        MockRule {
            pattern: pattern.into(),
            requires: Vec::new(),
            response: response.into(),
            latency_ms,
            unavailable: false,
            interrupt_after: None,
        }
    }

    pub fn requiring(mut self, substring: impl Into<String>) -> Self {
        self.requires.push(substring.into());
        self
    }

    pub fn matches(&self, prompt: &str) -> bool {
        prompt.contains(&self.pattern) && self.requires.iter().all(|r| prompt.contains(r.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    #[serde(default)]
    pub default_response: String,
    #[serde(default)]
    pub default_latency_ms: u64,
}

impl MockScript {
    pub fn new(default_response: impl Into<String>) -> Self {
        MockScript { rules: Vec::new(), default_response: default_response.into(), default_latency_ms: 0 }
    }

    pub fn rule(mut self, rule: MockRule) -> Self {
        self.rules.push(rule);
        self
    }

    pub fn load(path: &std::path::Path) -> Result<MockScript, LlmError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LlmError::BackendUnavailable(format!("mock script {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| LlmError::BackendUnavailable(format!("mock script {}: {e}", path.display())))
    }

    /// First matching rule, if any.
    pub fn matching(&self, prompt: &str) -> Option<(usize, &MockRule)> {
        self.rules.iter().enumerate().find(|(_, r)| r.matches(prompt))
    }
}

/// One recorded call against the mock backend.
#[derive(Debug, Clone)]
pub struct MockCall {
    pub model: String,
    pub prompt: String,
    pub stream: bool,
    pub rule: Option<usize>,
    pub started_at: Instant,
}

/// Deterministic scripted chat backend. The rule table is read-only after
/// construction; calls are appended to an inspectable log.
pub struct MockBackend {
    script: MockScript,
    log: Mutex<Vec<MockCall>>,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        MockBackend { script, log: Mutex::new(Vec::new()) }
    }

    pub fn script(&self) -> &MockScript {
        &self.script
    }

    pub fn calls(&self) -> Vec<MockCall> {
        self.log.lock().unwrap().clone()
    }

    pub fn call_count(&self) -> usize {
        self.log.lock().unwrap().len()
    }

    pub fn clear_log(&self) {
        self.log.lock().unwrap().clear();
    }

    fn resolve(&self, request: &ChatRequest) -> (Option<usize>, MockRule) {
        let prompt = request.prompt_text();
        let (idx, rule) = match self.script.matching(&prompt) {
            Some((i, r)) => (Some(i), r.clone()),
            None => (
                None,
                MockRule::new(String::new(), self.script.default_response.clone(), self.script.default_latency_ms),
            ),
        };
        self.log.lock().unwrap().push(MockCall {
            model: request.model.clone(),
            prompt,
            stream: request.stream,
            rule: idx,
            started_at: Instant::now(),
        });
        (idx, rule)
    }
}

/// Splits text at whitespace boundaries; each piece keeps its trailing
/// whitespace, so the pieces concatenate back to the input.
pub fn whitespace_chunks(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut in_ws = false;
    for ch in text.chars() {
        let ws = ch.is_whitespace();
        if !ws && in_ws {
            out.push(std::mem::take(&mut cur));
        }
        in_ws = ws;
        cur.push(ch);
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[async_trait]
impl ChatBackend for MockBackend {
    async fn chat(&self, request: &ChatRequest) -> Result<String, LlmError> {
        let (_, rule) = self.resolve(request);
        if rule.latency_ms > 0 {
            tokio::time::sleep(Duration::from_millis(rule.latency_ms)).await;
        }
        if rule.unavailable {
            return Err(LlmError::BackendUnavailable("mock rule marked unavailable".into()));
        }
        Ok(rule.response)
    }

    async fn chat_stream(&self, request: &ChatRequest) -> Result<TokenStream, LlmError> {
        let (_, rule) = self.resolve(request);
        if rule.latency_ms > 0 {
            tokio::time::sleep(Duration::from_millis(rule.latency_ms)).await;
        }
        if rule.unavailable {
            return Err(LlmError::BackendUnavailable("mock rule marked unavailable".into()));
        }
        let tokens = whitespace_chunks(&rule.response);
        let mut events: Vec<Result<StreamEvent, LlmError>> = Vec::new();
        match rule.interrupt_after {
            Some(n) if n < tokens.len() => {
                let partial: String = tokens[..n].concat();
                events.extend(tokens.into_iter().take(n).map(|t| Ok(StreamEvent::Token(t))));
                events.push(Err(LlmError::StreamInterrupted { partial }));
            }
            _ => {
                events.extend(tokens.into_iter().map(|t| Ok(StreamEvent::Token(t))));
                events.push(Ok(StreamEvent::Done));
            }
        }
        Ok(stream::iter(events).boxed())
    }
}

// ---------------------------------------------------------------------------
// HTTP chat-completions backend

/// Client for servers exposing `POST {base_url}/chat/completions`.
pub struct OpenAiBackend {
    client: reqwest::Client,
    base_url: String,
    api_key: Option<String>,
}

pub const ENV_BASE_URL: &str = "POLYRAG_LLM_BASE_URL";
pub const ENV_API_KEY: &str = "POLYRAG_LLM_API_KEY";
pub const ENV_CHAT_MODEL: &str = "POLYRAG_CHAT_MODEL";
pub const ENV_CONTEXT_MODEL: &str = "POLYRAG_CONTEXT_MODEL";
pub const ENV_EMBEDDING_MODEL: &str = "POLYRAG_EMBEDDING_MODEL";

impl OpenAiBackend {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>) -> Self {
        OpenAiBackend { client: reqwest::Client::new(), base_url: base_url.into(), api_key }
    }

    pub fn from_env() -> Result<Self, LlmError> {
        let base = std::env::var(ENV_BASE_URL)
            .map_err(|_| LlmError::BackendUnavailable(format!("{ENV_BASE_URL} is not set")))?;
        Ok(Self::new(base, std::env::var(ENV_API_KEY).ok()))
    }

    fn body(request: &ChatRequest) -> serde_json::Value {
        let messages: Vec<serde_json::Value> = request
            .messages
            .iter()
            .map(|(role, content)| serde_json::json!({"role": role.as_str(), "content": content}))
            .collect();
        serde_json::json!({
            "model": request.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
            "stream": request.stream,
        })
    }

    async fn post(&self, request: &ChatRequest) -> Result<reqwest::Response, LlmError> {
        let url = format!("{}/chat/completions", self.base_url.trim_end_matches('/'));
        let mut req = self.client.post(url).json(&Self::body(request));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().await.map_err(|e| LlmError::BackendUnavailable(e.to_string()))?;
        if !resp.status().is_success() {
            let status = resp.status();
            let text = resp.text().await.unwrap_or_default();
            return Err(LlmError::BackendUnavailable(format!("HTTP {status}: {text}")));
        }
        Ok(resp)
    }
}

/// Extracts the delta text from one `data:` payload of a streamed completion.
pub fn parse_stream_line(line: &str) -> Option<Result<Option<String>, LlmError>> {
    let data = line.strip_prefix("data:")?.trim();
    if data == "[DONE]" {
        return Some(Ok(None));
    }
    match serde_json::from_str::<serde_json::Value>(data) {
        Ok(v) => Some(Ok(Some(v["choices"][0]["delta"]["content"].as_str().unwrap_or_default().to_string()))),
        Err(e) => Some(Err(LlmError::BackendUnavailable(format!("bad stream payload: {e}")))),
    }
}

#[async_trait]
impl ChatBackend for OpenAiBackend {
    async fn chat(&self, request: &ChatRequest) -> Result<String, LlmError> {
        let mut req = request.clone();
        req.stream = false;
        let v: serde_json::Value =
            self.post(&req).await?.json().await.map_err(|e| LlmError::BackendUnavailable(e.to_string()))?;
        v["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| LlmError::BackendUnavailable("response lacks choices[0].message.content".into()))
    }

    async fn chat_stream(&self, request: &ChatRequest) -> Result<TokenStream, LlmError> {
        let resp = self.post(request).await?;
        struct State {
            body: BoxStream<'static, reqwest::Result<bytes::Bytes>>,
            buf: String,
            partial: String,
            finished: bool,
        }
        let state = State { body: resp.bytes_stream().boxed(), buf: String::new(), partial: String::new(), finished: false };
        let s = stream::unfold(state, |mut st| async move {
            if st.finished {
                return None;
            }
            loop {
                if let Some(pos) = st.buf.find('\n') {
                    let line: String = st.buf.drain(..=pos).collect();
                    match parse_stream_line(line.trim()) {
                        None => continue,
                        Some(Ok(None)) => {
                            st.finished = true;
                            return Some((Ok(StreamEvent::Done), st));
                        }
                        Some(Ok(Some(t))) if t.is_empty() => continue,
                        Some(Ok(Some(t))) => {
                            st.partial.push_str(&t);
                            return Some((Ok(StreamEvent::Token(t)), st));
                        }
                        Some(Err(_)) => continue,
                    }
                }
                match st.body.next().await {
                    Some(Ok(bytes)) => st.buf.push_str(&String::from_utf8_lossy(&bytes)),
                    Some(Err(_)) | None => {
                        st.finished = true;
                        let partial = st.partial.clone();
                        return Some((Err(LlmError::StreamInterrupted { partial }), st));
                    }
                }
            }
        });
        Ok(s.boxed())
    }
}

// ---------------------------------------------------------------------------
// Embedders

#[async_trait]
pub trait Embedder: Send + Sync {
    /// Stable identifier; part of the ingestion cache key.
    fn id(&self) -> String;

    fn dim(&self) -> usize;

    /// One unit vector per input text.
    async fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, LlmError>;
}

pub const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
pub const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over the UTF-8 bytes of `s`.
pub fn fnv1a64(s: &str) -> u64 {
    s.bytes().fold(FNV_OFFSET, |h, b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Lowercased alphanumeric tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(|t| t.to_lowercase()).collect()
}

/// Bag of hashed tokens: each token adds one count to bucket
/// `fnv1a64(token) % dim`, then the counts are l2-normalized.
#[derive(Debug, Clone)]
pub struct HashedEmbedder {
    dim: usize,
    latency: Duration,
}

impl HashedEmbedder {
    pub fn new(dim: usize) -> Self {
        HashedEmbedder { dim, latency: Duration::ZERO }
    }

    /// Simulated per-call latency, for pipeline timing tests.
    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    pub fn embed_one(&self, text: &str) -> Result<Vec<f64>, LlmError> {
        if text.is_empty() {
            return Err(LlmError::EmbeddingFailed("empty text".into()));
        }
        let mut v = vec![0.0; self.dim];
        for tok in tokenize(text) {
            v[(fnv1a64(&tok) % self.dim as u64) as usize] += 1.0;
        }
        vector::normalized(&v).ok_or_else(|| LlmError::EmbeddingFailed(format!("no tokens in {text:?}")))
    }
}

#[async_trait]
impl Embedder for HashedEmbedder {
    fn id(&self) -> String {
        format!("hashed-fnv1a64-d{}", self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    async fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, LlmError> {
        if texts.is_empty() {
            return Err(LlmError::EmbeddingFailed("no texts".into()));
        }
        if !self.latency.is_zero() {
            tokio::time::sleep(self.latency).await;
        }
        texts.iter().map(|t| self.embed_one(t)).collect()
    }
}

/// Client for `POST {base_url}/embeddings`.
pub struct OpenAiEmbedder {
    client: reqwest::Client,
    base_url: String,
    api_key: Option<String>,
    model: String,
    dim: usize,
}

impl OpenAiEmbedder {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>, model: impl Into<String>, dim: usize) -> Self {
        OpenAiEmbedder { client: reqwest::Client::new(), base_url: base_url.into(), api_key, model: model.into(), dim }
    }
}

#[async_trait]
impl Embedder for OpenAiEmbedder {
    fn id(&self) -> String {
        format!("openai-{}-d{}", self.model, self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    async fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, LlmError> {
        if texts.is_empty() || texts.iter().any(|t| t.is_empty()) {
            return Err(LlmError::EmbeddingFailed("empty input".into()));
        }
        let url = format!("{}/embeddings", self.base_url.trim_end_matches('/'));
        let mut req = self.client.post(url).json(&serde_json::json!({"model": self.model, "input": texts}));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().await.map_err(|e| LlmError::EmbeddingFailed(e.to_string()))?;
        let v: serde_json::Value = resp.json().await.map_err(|e| LlmError::EmbeddingFailed(e.to_string()))?;
        let data = v["data"].as_array().ok_or_else(|| LlmError::EmbeddingFailed("response lacks data[]".into()))?;
        let mut out = Vec::with_capacity(data.len());
        for item in data {
            let raw: Vec<f64> = item["embedding"]
                .as_array()
                .ok_or_else(|| LlmError::EmbeddingFailed("item lacks embedding".into()))?
                .iter()
                .filter_map(|x| x.as_f64())
                .collect();
            if raw.len() != self.dim {
                return Err(LlmError::EmbeddingFailed(format!("expected dim {}, got {}", self.dim, raw.len())));
            }
            out.push(vector::normalized(&raw).ok_or_else(|| LlmError::EmbeddingFailed("zero vector".into()))?);
        }
        if out.len() != texts.len() {
            return Err(LlmError::EmbeddingFailed("embedding count mismatch".into()));
        }
        Ok(out)
    }
}
