//! Multi-agent retrieval QA engine.
//!
//! A turn flows through two concurrent stages: conversation-aware query
//! enrichment runs alongside embedding-cluster routing, then the activated
//! retrieval agents run alongside conversation analysis. A summarizer then
//! rerank-filters the pooled knowledge and streams the answer, after which a
//! look-back pass attaches citations.

pub mod config;
pub mod context;
pub mod knowledge;
pub mod llm;
pub mod pipeline;
pub mod prompts;
pub mod retrieval;
pub mod rewrite;
pub mod router;
pub mod summarizer;
pub mod types;
pub mod vector;
