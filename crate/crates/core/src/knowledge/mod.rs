//! Knowledge sources. Local documents are chunked into an in-memory hybrid
//! vector store; online sources are reached through search-engine and
//! site-specific HTTP API clients.

mod chunking;
mod ingest;
mod online;
mod store;

pub use chunking::chunk_document;
pub use ingest::{ingest, ingest_files, source_files, IngestStats};
pub use online::{
    fill_template, normalize_keywords, walk_response_path, FixtureResult, HttpApiClient, HttpFixture, SearchEngineClient, SearchFixture,
    SearchResult, ENV_SEARCH_API_KEY,
};
pub use store::{ScoredChunk, SearchableStore, VectorStore, BM25_B, BM25_K1};

use crate::llm::LlmError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KnowledgeError {
    #[error("unreadable path: {0}")]
    UnreadablePath(String),
    #[error(transparent)]
    Embedding(#[from] LlmError),
    #[error("no recorded fixture for {0}")]
    FixtureMiss(String),
    #[error("network error: {0}")]
    NetworkError(String),
    #[error("unbound placeholder: {0}")]
    UnboundPlaceholder(String),
    #[error("response path miss: {0}")]
    ParsePathMiss(String),
    #[error("invalid source configuration: {0}")]
    InvalidSource(String),
}
