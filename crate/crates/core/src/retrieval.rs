//! Retrieval agents: a rewrite chain bound to one or more knowledge sources.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::{AgentConfig, RewriteSpec};
use crate::context::extract_json_block;
use crate::knowledge::{HttpApiClient, KnowledgeError, SearchEngineClient, SearchableStore};
use crate::llm::{Embedder, ModelHandle};
use crate::prompts;
use crate::rewrite::{apply_chain, RewriteContext, RewriteOutput, RewriteRegistry};
use crate::types::{KnowledgeChunk, SourceKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedItem {
    pub chunk: KnowledgeChunk,
    /// Retrieval score; absent for search results.
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BundleContent {
    Raw { items: Vec<RetrievedItem> },
    /// `supporting` is the subset of retrieved items the summary relies on.
    Digested { summary: String, supporting: Vec<RetrievedItem> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalBundle {
    pub agent_id: String,
    pub content: BundleContent,
    pub rewritten_query: RewriteOutput,
    /// Per-source failures and skipped rewrite steps.
    pub errors: Vec<String>,
}

impl RetrievalBundle {
    pub fn empty(agent_id: impl Into<String>, query: &str, error: Option<String>) -> Self {
        RetrievalBundle {
            agent_id: agent_id.into(),
            content: BundleContent::Raw { items: Vec::new() },
            rewritten_query: RewriteOutput::Text(query.to_string()),
            errors: error.into_iter().collect(),
        }
    }

    /// Raw items, or the supporting items of a digest.
    pub fn items(&self) -> &[RetrievedItem] {
        match &self.content {
            BundleContent::Raw { items } => items,
            BundleContent::Digested { supporting, .. } => supporting,
        }
    }

    pub fn is_empty(&self) -> bool {
        matches!(&self.content, BundleContent::Raw { items } if items.is_empty())
    }

    pub fn is_digested(&self) -> bool {
        matches!(self.content, BundleContent::Digested { .. })
    }
}

/// A source as seen by an agent, with its read-only handle.
#[derive(Clone)]
pub enum AgentSource {
    Vdb { name: String, store: Arc<dyn SearchableStore>, hybrid_alpha: f64 },
    SearchEngine { name: String, client: Arc<SearchEngineClient>, site: Option<String> },
    HttpApi { name: String, client: Arc<HttpApiClient>, query_param: String, params: BTreeMap<String, String> },
}

impl AgentSource {
    pub fn name(&self) -> &str {
        match self {
            AgentSource::Vdb { name, .. } | AgentSource::SearchEngine { name, .. } | AgentSource::HttpApi { name, .. } => {
                name
            }
        }
    }
}

pub struct RetrievalAgent {
    pub id: String,
    pub rewrite_chain: Vec<RewriteSpec>,
    pub digest: bool,
    pub n_per_source: usize,
    pub sources: Vec<AgentSource>,
    llm: ModelHandle,
    embedder: Arc<dyn Embedder>,
    registry: Arc<RewriteRegistry>,
}

impl RetrievalAgent {
    pub fn new(
        config: &AgentConfig,
        sources: Vec<AgentSource>,
        llm: ModelHandle,
        embedder: Arc<dyn Embedder>,
        registry: Arc<RewriteRegistry>,
    ) -> Self {
        RetrievalAgent {
            id: config.id.clone(),
            rewrite_chain: config.rewrite_chain.clone(),
            digest: config.digest,
            n_per_source: config.n_per_source,
            sources,
            llm,
            embedder,
            registry,
        }
    }

    /// The store used as `{context}` by retrieval rewrites: the first local one.
    fn primary_store(&self) -> Option<(&dyn SearchableStore, f64)> {
        self.sources.iter().find_map(|s| match s {
            AgentSource::Vdb { store, hybrid_alpha, .. } => Some((store.as_ref(), *hybrid_alpha)),
            _ => None,
        })
    }

    /// Rewrites the enriched query through the agent's chain and queries every
    /// source. A failing source contributes an error note instead of items.
    pub async fn retrieve(&self, enriched_query: &str) -> RetrievalBundle {
        let (store, alpha) = match self.primary_store() {
            Some((s, a)) => (Some(s), a),
            None => (None, 0.5),
        };
        let ctx = RewriteContext {
            llm: &self.llm.gateway,
            model: &self.llm.model,
            temperature: self.llm.temperature,
            max_tokens: self.llm.max_tokens,
            embedder: self.embedder.as_ref(),
            store,
            hybrid_alpha: alpha,
            registry: &self.registry,
        };
        let outcome = apply_chain(enriched_query, &self.rewrite_chain, &ctx).await;
        let mut errors = outcome.notes;
        let rewritten = outcome.output;
        let text = rewritten.as_text();
        let mut items = Vec::new();
        for source in &self.sources {
            match self.query_source(source, &rewritten, &text).await {
                Ok(found) => items.extend(found),
                Err(e) => {
                    tracing::warn!(agent = %self.id, source = source.name(), error = %e, "source failed");
                    errors.push(format!("{}: {e}", source.name()));
                }
            }
        }
        let bundle = RetrievalBundle {
            agent_id: self.id.clone(),
            content: BundleContent::Raw { items },
            rewritten_query: rewritten,
            errors,
        };
        if self.digest {
            digest(bundle, enriched_query, &self.llm).await
        } else {
            bundle
        }
    }

    async fn query_source(
        &self,
        source: &AgentSource,
        rewritten: &RewriteOutput,
        text: &str,
    ) -> Result<Vec<RetrievedItem>, KnowledgeError> {
        let n = self.n_per_source;
        match source {
            AgentSource::Vdb { store, hybrid_alpha, .. } => {
                if store.is_empty() {
                    return Ok(Vec::new());
                }
                let qv = self.embedder.embed(&[text.to_string()]).await?.remove(0);
                Ok(store
                    .hybrid_search(text, &qv, n, *hybrid_alpha)
                    .into_iter()
                    .map(|s| RetrievedItem { chunk: s.chunk, score: Some(s.score) })
                    .collect())
            }
            AgentSource::SearchEngine { name, client, site } => {
                let keywords = match rewritten.keywords() {
                    Some(k) => k.to_vec(),
                    None => crate::rewrite::whitespace_keywords(text),
                };
                let results = client.query(&keywords, site.as_deref(), n).await?;
                Ok(results
                    .into_iter()
                    .map(|r| RetrievedItem { chunk: r.into_chunk(name, SourceKind::SearchEngine), score: None })
                    .collect())
            }
            AgentSource::HttpApi { name, client, query_param, params } => {
                let mut bound = params.clone();
                bound.insert(query_param.clone(), text.to_string());
                let results = client.query(&bound, n).await?;
                Ok(results
                    .into_iter()
                    .map(|r| RetrievedItem { chunk: r.into_chunk(name, SourceKind::HttpApi), score: None })
                    .collect())
            }
        }
    }
}

#[derive(Debug, Deserialize)]
struct DigestPayload {
    summary: String,
    #[serde(default)]
    supporting_chunk_ids: Vec<String>,
}

/// Condenses raw items into a summary plus the ids it relies on. Unknown ids
/// are dropped. The bundle stays raw unless a non-empty summary cites at
/// least one known item.
pub async fn digest(bundle: RetrievalBundle, query: &str, llm: &ModelHandle) -> RetrievalBundle {
    let BundleContent::Raw { items } = &bundle.content else {
        return bundle;
    };
    if items.is_empty() {
        return bundle;
    }
    let fragments = items.iter().map(|i| format!("[{}] {}", i.chunk.chunk_id, i.chunk.text)).collect::<Vec<_>>().join("\n\n");
    let vars: BTreeMap<&str, &str> = [("query", query), ("fragments", fragments.as_str())].into_iter().collect();
    let output = match llm.complete(prompts::fill(prompts::DIGEST, &vars)).await {
        Ok(o) => o,
        Err(e) => {
            tracing::warn!(agent = %bundle.agent_id, error = %e, "digest failed; keeping raw items");
            return bundle;
        }
    };
    let Some(payload) = extract_json_block(&output).and_then(|v| serde_json::from_value::<DigestPayload>(v).ok()) else {
        tracing::warn!(agent = %bundle.agent_id, "unparseable digest; keeping raw items");
        return bundle;
    };
    // Keep retrieval order, each supporting item once.
    let supporting: Vec<RetrievedItem> =
        items.iter().filter(|i| payload.supporting_chunk_ids.contains(&i.chunk.chunk_id)).cloned().collect();
    if supporting.is_empty() || payload.summary.trim().is_empty() {
        return bundle;
    }
    RetrievalBundle { content: BundleContent::Digested { summary: payload.summary.trim().to_string(), supporting }, ..bundle }
}
