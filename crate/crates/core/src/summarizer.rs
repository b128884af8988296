//! Rerank-filtering of pooled knowledge, then answer streaming with
//! look-back citations.

use std::collections::{BTreeMap, HashSet};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use crate::context::ContextAnalysis;
use crate::llm::{tokenize, LlmError, ModelHandle, TokenStream};
use crate::prompts;
use crate::retrieval::{BundleContent, RetrievalBundle};
use crate::types::{ConversationHistory, KnowledgeChunk, Role};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RerankError {
    #[error("reranker request failed: {0}")]
    Request(String),
    #[error("reranker returned {got} scores for {expected} texts")]
    Length { expected: usize, got: usize },
}

/// Scores texts against a query; higher is more relevant.
#[async_trait]
pub trait Reranker: Send + Sync {
    async fn score(&self, query: &str, texts: &[String]) -> Result<Vec<f64>, RerankError>;
}

fn term_frequencies(text: &str) -> BTreeMap<String, f64> {
    let mut tf = BTreeMap::new();
    for t in tokenize(text) {
        *tf.entry(t).or_insert(0.0) += 1.0;
    }
    tf
}

/// Cosine between term-frequency vectors of lowercased alphanumeric tokens.
/// Zero when either side has no tokens.
pub fn tf_cosine(a: &str, b: &str) -> f64 {
    let (ta, tb) = (term_frequencies(a), term_frequencies(b));
    let dot: f64 = ta.iter().filter_map(|(t, x)| tb.get(t).map(|y| x * y)).sum();
    let na = ta.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb = tb.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Deterministic offline reranker.
#[derive(Debug, Clone, Copy, Default)]
pub struct TfCosineReranker;

#[async_trait]
impl Reranker for TfCosineReranker {
    async fn score(&self, query: &str, texts: &[String]) -> Result<Vec<f64>, RerankError> {
        Ok(texts.iter().map(|t| tf_cosine(query, t)).collect())
    }
}

/// External cross-encoder: `POST {endpoint}` with `{"query", "documents"}`,
/// answered by `{"scores": [...]}`.
pub struct CrossEncoderReranker {
    client: reqwest::Client,
    endpoint: String,
}

impl CrossEncoderReranker {
    pub fn new(endpoint: impl Into<String>) -> Self {
        CrossEncoderReranker { client: reqwest::Client::new(), endpoint: endpoint.into() }
    }
}

#[async_trait]
impl Reranker for CrossEncoderReranker {
    async fn score(&self, query: &str, texts: &[String]) -> Result<Vec<f64>, RerankError> {
        #[derive(Deserialize)]
        struct Scores {
            scores: Vec<f64>,
        }
        let resp = self
            .client
            .post(&self.endpoint)
            .json(&serde_json::json!({ "query": query, "documents": texts }))
            .send()
            .await
            .map_err(|e| RerankError::Request(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(RerankError::Request(format!("HTTP {}", resp.status())));
        }
        let body: Scores = resp.json().await.map_err(|e| RerankError::Request(e.to_string()))?;
        if body.scores.len() != texts.len() {
            return Err(RerankError::Length { expected: texts.len(), got: body.scores.len() });
        }
        Ok(body.scores)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Origin {
    pub source_uri: String,
    pub source_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedChunk {
    /// Text is already capped to the per-chunk character limit.
    pub chunk: KnowledgeChunk,
    pub score: f64,
    /// Where the text came from. One entry for raw chunks; the supporting
    /// chunks' sources for a digest.
    pub origins: Vec<Origin>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RerankedContext {
    pub chunks: Vec<RankedChunk>,
    pub dropped: usize,
    pub total_chars: usize,
}

impl RerankedContext {
    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }
}

/// Pools bundles into candidate chunks: raw items as-is, each digest as one
/// pseudo-chunk `digest:{agent}`. Repeated chunk ids keep their first copy.
pub fn pool(bundles: &[RetrievalBundle]) -> Vec<(KnowledgeChunk, Vec<Origin>)> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for b in bundles {
        match &b.content {
            BundleContent::Raw { items } => {
                for item in items {
                    if seen.insert(item.chunk.chunk_id.clone()) {
                        let origin =
                            Origin { source_uri: item.chunk.source_uri.clone(), source_name: item.chunk.source_name.clone() };
                        out.push((item.chunk.clone(), vec![origin]));
                    }
                }
            }
            BundleContent::Digested { summary, supporting } => {
                let id = format!("digest:{}", b.agent_id);
                if !seen.insert(id.clone()) {
                    continue;
                }
                let mut origins: Vec<Origin> = Vec::new();
                for s in supporting {
                    let o = Origin { source_uri: s.chunk.source_uri.clone(), source_name: s.chunk.source_name.clone() };
                    if !origins.contains(&o) {
                        origins.push(o);
                    }
                }
                let pseudo = KnowledgeChunk {
                    chunk_id: id.clone(),
                    text: summary.clone(),
                    embedding: None,
                    source_uri: id,
                    source_kind: supporting[0].chunk.source_kind,
                    source_name: b.agent_id.clone(),
                };
                out.push((pseudo, origins));
            }
        }
    }
    out
}

fn cap_chars(text: &str, max_chars: usize) -> String {
    match text.char_indices().nth(max_chars) {
        Some((i, _)) => text[..i].to_string(),
        None => text.to_string(),
    }
}

/// Scores the pooled chunks, orders them by descending score then ascending
/// chunk id and keeps `chunk_budget`. Retrieval-time scores are ignored. If
/// the configured reranker fails, the TF-cosine fallback is used.
pub async fn rerank(
    query: &str,
    bundles: &[RetrievalBundle],
    chunk_budget: usize,
    max_chunk_chars: usize,
    reranker: &dyn Reranker,
) -> RerankedContext {
    let pooled = pool(bundles);
    if pooled.is_empty() {
        return RerankedContext::default();
    }
    let texts: Vec<String> = pooled.iter().map(|(c, _)| c.text.clone()).collect();
    let scores = match reranker.score(query, &texts).await {
        Ok(s) => s,
        Err(e) => {
            tracing::warn!(error = %e, "reranker failed; using term-frequency cosine");
            TfCosineReranker.score(query, &texts).await.unwrap_or_default()
        }
    };
    let mut ranked: Vec<RankedChunk> = pooled
        .into_iter()
        .zip(scores)
        .map(|((chunk, origins), score)| RankedChunk { chunk, score, origins })
        .collect();
    ranked.sort_by(|a, b| {
        b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal).then_with(|| a.chunk.chunk_id.cmp(&b.chunk.chunk_id))
    });
    let dropped = ranked.len().saturating_sub(chunk_budget);
    ranked.truncate(chunk_budget);
    for r in &mut ranked {
        r.chunk.text = cap_chars(&r.chunk.text, max_chunk_chars);
    }
    let total_chars = ranked.iter().map(|r| r.chunk.text.chars().count()).sum();
    RerankedContext { chunks: ranked, dropped, total_chars }
}

/// What the answer prompt sees of the conversation.
#[derive(Debug, Clone, PartialEq)]
pub enum ConversationView {
    Analysis(ContextAnalysis),
    Full(ConversationHistory),
}

fn numbered_fragments(context: &RerankedContext) -> String {
    context
        .chunks
        .iter()
        .enumerate()
        .map(|(i, r)| format!("[{}] ({}) {}", i + 1, r.chunk.source_uri, r.chunk.text))
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Deterministic answer prompt: system instructions, conversation context,
/// numbered knowledge and the question.
pub fn answer_messages(query: &str, view: &ConversationView, context: &RerankedContext) -> Vec<(Role, String)> {
    let mut body = String::new();
    match view {
        ConversationView::Analysis(a) => {
            if !a.analysis.is_empty() {
                body.push_str(&format!("Conversation analysis:\n{}\n\n", a.analysis));
            }
            if !a.related_messages.is_empty() {
                let lines: Vec<String> =
                    a.related_messages.iter().map(|m| format!("[{}] {}: {}", m.index, m.role.as_str(), m.content)).collect();
                body.push_str(&format!("Related earlier messages:\n{}\n\n", lines.join("\n")));
            }
        }
        ConversationView::Full(h) => {
            if !h.is_empty() {
                body.push_str(&format!("Conversation history:\n{}\n\n", h.render()));
            }
        }
    }
    if context.is_empty() {
        body.push_str(prompts::NO_KNOWLEDGE);
        body.push_str("\n\n");
    } else {
        body.push_str(&format!("Knowledge:\n{}\n\n", numbered_fragments(context)));
    }
    body.push_str(&format!("Question: {query}"));
    vec![(Role::System, prompts::ANSWER_SYSTEM.to_string()), (Role::User, body)]
}

/// Opens the answer token stream.
pub async fn generate_answer_stream(
    query: &str,
    view: &ConversationView,
    context: &RerankedContext,
    llm: &ModelHandle,
) -> Result<TokenStream, LlmError> {
    let mut req = llm.request(String::new());
    req.messages = answer_messages(query, view, context);
    llm.gateway.chat_stream(&req).await
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Citation {
    pub source_uri: String,
    pub source_name: String,
    pub chunk_ids: Vec<String>,
    pub display_index: usize,
}

/// Fragment numbers in a look-back reply: the first JSON integer array if
/// one parses, otherwise every standalone integer. Duplicates keep their
/// first position.
pub fn parse_fragment_numbers(output: &str) -> Vec<i64> {
    let mut nums: Vec<i64> = Vec::new();
    let from_array = output.find('[').and_then(|open| {
        let close = output[open..].find(']')? + open;
        serde_json::from_str::<Vec<i64>>(&output[open..=close]).ok()
    });
    match from_array {
        Some(v) => nums = v,
        None => {
            let mut cur = String::new();
            for c in output.chars().chain(std::iter::once(' ')) {
                if c.is_ascii_digit() {
                    cur.push(c);
                } else if !cur.is_empty() {
                    if let Ok(n) = cur.parse() {
                        nums.push(n);
                    }
                    cur.clear();
                }
            }
        }
    }
    let mut seen = HashSet::new();
    nums.retain(|n| seen.insert(*n));
    nums
}

/// Maps 1-based fragment numbers to citations grouped by source URI, in
/// first-use order. Out-of-range numbers are ignored.
pub fn citations_from_numbers(numbers: &[i64], context: &RerankedContext) -> Vec<Citation> {
    let n = context.chunks.len() as i64;
    let mut citations: Vec<Citation> = Vec::new();
    for &num in numbers {
        if num < 1 || num > n {
            continue;
        }
        let ranked = &context.chunks[(num - 1) as usize];
        for origin in &ranked.origins {
            let id = &ranked.chunk.chunk_id;
            match citations.iter_mut().find(|c| c.source_uri == origin.source_uri) {
                Some(c) => {
                    if !c.chunk_ids.contains(id) {
                        c.chunk_ids.push(id.clone());
                    }
                }
                None => citations.push(Citation {
                    source_uri: origin.source_uri.clone(),
                    source_name: origin.source_name.clone(),
                    chunk_ids: vec![id.clone()],
                    display_index: citations.len() + 1,
                }),
            }
        }
    }
    citations
}

/// Look-back citation pass over a finished answer. Never fails: backend
/// errors and unparseable output leave the answer uncited.
pub async fn generate_citations(answer: &str, context: &RerankedContext, llm: &ModelHandle) -> Vec<Citation> {
    if answer.trim().is_empty() || context.is_empty() {
        return Vec::new();
    }
    let fragments = numbered_fragments(context);
    let vars: BTreeMap<&str, &str> = [("fragments", fragments.as_str()), ("answer", answer)].into_iter().collect();
    match llm.complete(prompts::fill(prompts::CITATION, &vars)).await {
        Ok(out) => citations_from_numbers(&parse_fragment_numbers(&out), context),
        Err(e) => {
            tracing::warn!(error = %e, "citation pass failed; answer left uncited");
            Vec::new()
        }
    }
}
