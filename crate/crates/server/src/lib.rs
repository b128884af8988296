//! Streaming HTTP service around a [`polyrag_core::pipeline::Engine`], with
//! its session store and ingestion cache.

pub mod app;
pub mod cache;
pub mod protocol;
pub mod session;

pub use app::{chat_events, router, AppState, ChatRequest, EngineFactory};
pub use cache::{build_engine_cached, IngestReport};
pub use protocol::{check_grammar, parse_sse, ErrorCode, ServiceEvent};
pub use session::{SessionStore, SessionView};
