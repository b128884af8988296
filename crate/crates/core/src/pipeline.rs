//! Turn orchestration.
//!
//! Stage 1 runs the context-aware query rewrite next to routing on the
//! original query's embedding. Stage 2 runs every activated agent next to
//! the conversation analysis. The summarizer then reranks, streams the
//! answer and looks back for citations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use futures::future::join_all;
use futures::StreamExt;
use serde::{Deserialize, Serialize};
use tokio::sync::mpsc::UnboundedSender;
use tokio::time::Instant;

use crate::config::{ConfigErrors, EmbeddingConfig, EngineConfig, LlmBackend, RerankerConfig, RewriteKind, SourceSpec};
use crate::context::{ContextAnalysis, ContextManager};
use crate::knowledge::{
    ingest, HttpApiClient, IngestStats, KnowledgeError, SearchEngineClient, SearchableStore, VectorStore,
    ENV_SEARCH_API_KEY,
};
use crate::llm::{
    self, ChatBackend, Embedder, HashedEmbedder, LlmError, LlmGateway, MockBackend, MockScript, ModelHandle,
    OpenAiBackend, OpenAiEmbedder, StreamEvent,
};
use crate::retrieval::{AgentSource, RetrievalAgent, RetrievalBundle};
use crate::rewrite::{RewriteOutput, RewriteRegistry};
use crate::router::{build_routing_model, AgentRoutingInput, AgentScore, LocalKnowledge, RouterError, RoutingModel};
use crate::summarizer::{
    generate_answer_stream, generate_citations, rerank, Citation, ConversationView, CrossEncoderReranker, Reranker,
    TfCosineReranker,
};
use crate::types::{Clock, ConversationHistory, Role, SystemClock};

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("{0}")]
    Config(#[from] ConfigErrors),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
    #[error(transparent)]
    Router(#[from] RouterError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("custom rewrite strategy {0:?} is not registered")]
    UnregisteredStrategy(String),
    #[error("source {0}: {1}")]
    Source(String, String),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TurnError {
    #[error("message must not be empty")]
    EmptyMessage,
    #[error("turn failed: {reason}")]
    TurnFailed { reason: String, partial: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnMeta {
    pub activated_agents: Vec<String>,
    pub routing_enabled: bool,
    pub context_manager_enabled: bool,
}

/// Streamed to the caller while the turn runs, in this order: one meta,
/// any number of tokens, one citations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "data", rename_all = "snake_case")]
pub enum TurnEvent {
    Meta(TurnMeta),
    Token(String),
    Citations(Vec<Citation>),
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StageTiming {
    pub wall_us: u64,
    pub branches_us: BTreeMap<String, u64>,
}

impl StageTiming {
    pub fn max_branch_us(&self) -> u64 {
        self.branches_us.values().copied().max().unwrap_or(0)
    }
}

/// Offsets are measured from the start of the turn.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TurnTimings {
    pub stage1: StageTiming,
    pub stage2: StageTiming,
    pub stage1_done_us: u64,
    pub stage2_done_us: u64,
    pub rerank_done_us: u64,
    pub first_token_us: Option<u64>,
    pub answer_done_us: u64,
    pub citations_done_us: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnTrace {
    pub turn_index: usize,
    pub query: String,
    pub enriched_query: String,
    pub context_manager_enabled: bool,
    pub routing_enabled: bool,
    pub route_scores: Option<Vec<AgentScore>>,
    pub activated_agents: Vec<String>,
    pub rewritten_queries: BTreeMap<String, RewriteOutput>,
    pub chunk_counts: BTreeMap<String, usize>,
    pub related_indices: Option<Vec<usize>>,
    pub presented_chunks: Vec<String>,
    pub dropped_chunks: usize,
    pub citation_count: usize,
    pub timings: TurnTimings,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnOutcome {
    pub answer: String,
    pub citations: Vec<Citation>,
    pub trace: TurnTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteDebug {
    pub routing_enabled: bool,
    /// Omitted when routing is disabled.
    pub scores: Option<Vec<AgentScore>>,
    pub activated: Vec<String>,
    pub fallback_all: bool,
}

pub struct EngineBuilder {
    config: EngineConfig,
    base_dir: Option<PathBuf>,
    backend: Option<Arc<dyn ChatBackend>>,
    embedder: Option<Arc<dyn Embedder>>,
    registry: RewriteRegistry,
    clock: Option<Arc<dyn Clock>>,
    stores: BTreeMap<String, VectorStore>,
    routing: Option<RoutingModel>,
    reranker: Option<Arc<dyn Reranker>>,
}

impl EngineBuilder {
    /// Directory that relative paths in the config resolve against.
    pub fn base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = Some(dir.into());
        self
    }

    pub fn backend(mut self, backend: Arc<dyn ChatBackend>) -> Self {
        self.backend = Some(backend);
        self
    }

    pub fn embedder(mut self, embedder: Arc<dyn Embedder>) -> Self {
        self.embedder = Some(embedder);
        self
    }

    pub fn registry(mut self, registry: RewriteRegistry) -> Self {
        self.registry = registry;
        self
    }

    pub fn clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = Some(clock);
        self
    }

    /// Uses an already-built store instead of ingesting the source.
    pub fn store(mut self, source: impl Into<String>, store: VectorStore) -> Self {
        self.stores.insert(source.into(), store);
        self
    }

    pub fn routing_model(mut self, model: RoutingModel) -> Self {
        self.routing = Some(model);
        self
    }

    pub fn reranker(mut self, reranker: Arc<dyn Reranker>) -> Self {
        self.reranker = Some(reranker);
        self
    }

    fn resolve(&self, p: &str) -> PathBuf {
        crate::config::resolve_path(self.base_dir.as_deref(), p)
    }

    pub async fn build(mut self) -> Result<Engine, EngineError> {
        let cfg = self.config.clone();
        let openai = cfg.llm.backend == LlmBackend::Openai;
        let env_or = |var: &str, fallback: &str| {
            if openai {
                std::env::var(var).unwrap_or_else(|_| fallback.to_string())
            } else {
                fallback.to_string()
            }
        };
        let chat_model = env_or(llm::ENV_CHAT_MODEL, &cfg.llm.chat_model);
        let context_model = env_or(llm::ENV_CONTEXT_MODEL, cfg.llm.context_model());

        let mut mock = None;
        let backend: Arc<dyn ChatBackend> = match self.backend.take() {
            Some(b) => b,
            None => match cfg.llm.backend {
                LlmBackend::Mock => {
                    let script = match &cfg.llm.mock_script {
                        Some(p) => MockScript::load(&self.resolve(p))?,
                        None => MockScript::new("No answer is scripted for this question."),
                    };
                    let m = Arc::new(MockBackend::new(script));
                    mock = Some(m.clone());
                    m
                }
                LlmBackend::Openai => Arc::new(OpenAiBackend::from_env()?),
            },
        };
        let gateway = LlmGateway::new(backend, Duration::from_millis(cfg.llm.timeout_ms));

        let embedder: Arc<dyn Embedder> = match self.embedder.take() {
            Some(e) => e,
            None => embedder_from_config(&cfg)?,
        };

        for agent in &cfg.agents {
            for step in &agent.rewrite_chain {
                if step.kind == RewriteKind::Custom {
                    let name = step.name.clone().unwrap_or_default();
                    if !self.registry.contains(&name) {
                        return Err(EngineError::UnregisteredStrategy(name));
                    }
                }
            }
        }

        let mut stores: BTreeMap<String, Arc<VectorStore>> = BTreeMap::new();
        let mut ingest_stats = Vec::new();
        let mut sources: BTreeMap<String, AgentSource> = BTreeMap::new();
        for source in &cfg.knowledge_sources {
            let handle = match &source.spec {
                SourceSpec::Vdb { hybrid_alpha, .. } => {
                    let store = match self.stores.remove(&source.name) {
                        Some(s) => s,
                        None => {
                            let (store, stats) = ingest(source, self.base_dir.as_deref(), embedder.as_ref()).await?;
                            ingest_stats.push(stats);
                            store
                        }
                    };
                    let store = Arc::new(store);
                    stores.insert(source.name.clone(), store.clone());
                    AgentSource::Vdb { name: source.name.clone(), store, hybrid_alpha: *hybrid_alpha }
                }
                SourceSpec::SearchEngine { fixture_dir, endpoint, site } => {
                    let client = match (fixture_dir, endpoint) {
                        (Some(dir), _) => SearchEngineClient::from_fixture_dir(&self.resolve(dir))?,
                        (None, Some(ep)) => SearchEngineClient::live(ep.clone(), std::env::var(ENV_SEARCH_API_KEY).ok()),
                        (None, None) => {
                            return Err(EngineError::Source(source.name.clone(), "needs fixture_dir or endpoint".into()))
                        }
                    };
                    AgentSource::SearchEngine { name: source.name.clone(), client: Arc::new(client), site: site.clone() }
                }
                SourceSpec::HttpApi { endpoint_template, base_url, fixture_dir, query_param, params, response_path, fields } => {
                    let client = match (fixture_dir, base_url) {
                        (Some(dir), _) => HttpApiClient::from_fixture_dir(
                            &self.resolve(dir),
                            endpoint_template.clone(),
                            response_path.clone(),
                            fields.clone(),
                        )?,
                        (None, Some(base)) => {
                            HttpApiClient::live(base.clone(), endpoint_template.clone(), response_path.clone(), fields.clone())
                        }
                        (None, None) => {
                            return Err(EngineError::Source(source.name.clone(), "needs fixture_dir or base_url".into()))
                        }
                    };
                    AgentSource::HttpApi {
                        name: source.name.clone(),
                        client: Arc::new(client),
                        query_param: query_param.clone(),
                        params: params.clone(),
                    }
                }
            };
            sources.insert(source.name.clone(), handle);
        }

        let mut light = ModelHandle::new(gateway.clone(), context_model.clone());
        light.temperature = cfg.llm.temperature;
        light.max_tokens = cfg.llm.max_tokens;
        let registry = Arc::new(self.registry);
        let agents: Vec<Arc<RetrievalAgent>> = cfg
            .agents
            .iter()
            .map(|a| {
                let bound = a.sources.iter().filter_map(|s| sources.get(s).cloned()).collect();
                Arc::new(RetrievalAgent::new(a, bound, light.clone(), embedder.clone(), registry.clone()))
            })
            .collect();

        let routing = if cfg.router.is_enabled() {
            match self.routing.take() {
                Some(m) => Some(m),
                None => {
                    let inputs: Vec<AgentRoutingInput> = cfg
                        .agents
                        .iter()
                        .map(|a| {
                            let rc = cfg.router.agents.get(&a.id).cloned().unwrap_or_default();
                            let local = a
                                .sources
                                .iter()
                                .filter_map(|s| {
                                    let store = stores.get(s)?;
                                    let cluster_count = match &cfg.source(s)?.spec {
                                        SourceSpec::Vdb { cluster_count, .. } => *cluster_count,
                                        _ => None,
                                    };
                                    Some(LocalKnowledge { embeddings: store.embeddings(), cluster_count })
                                })
                                .collect();
                            AgentRoutingInput {
                                agent_id: a.id.clone(),
                                local,
                                mixin_texts: rc.mixin.clone(),
                                mixin_weight: rc.mixin_weight.unwrap_or(0.5),
                                scale: rc.scale,
                            }
                        })
                        .collect();
                    Some(build_routing_model(&inputs, embedder.as_ref(), cfg.router.seed).await?)
                }
            }
        } else {
            None
        };

        let reranker: Arc<dyn Reranker> = match self.reranker.take() {
            Some(r) => r,
            None => match &cfg.summarizer.reranker {
                RerankerConfig::TfCosine => Arc::new(TfCosineReranker),
                RerankerConfig::CrossEncoder { endpoint } => Arc::new(CrossEncoderReranker::new(endpoint.clone())),
            },
        };

        let mut chat = ModelHandle::new(gateway.clone(), chat_model);
        chat.temperature = cfg.llm.temperature;
        chat.max_tokens = cfg.llm.max_tokens;
        let context = ContextManager::new(gateway, context_model)
            .with_sampling(cfg.llm.temperature, cfg.llm.max_tokens)
            .with_window(cfg.pipeline.history_max_chars);

        Ok(Engine {
            config: cfg,
            agents,
            routing,
            stores,
            ingest_stats,
            chat,
            context,
            embedder,
            reranker,
            clock: self.clock.unwrap_or_else(|| Arc::new(SystemClock)),
            mock,
        })
    }
}

/// Everything a turn needs, built once from a validated configuration and
/// shared read-only across sessions.
pub struct Engine {
    config: EngineConfig,
    agents: Vec<Arc<RetrievalAgent>>,
    routing: Option<RoutingModel>,
    stores: BTreeMap<String, Arc<VectorStore>>,
    ingest_stats: Vec<IngestStats>,
    chat: ModelHandle,
    context: ContextManager,
    embedder: Arc<dyn Embedder>,
    reranker: Arc<dyn Reranker>,
    clock: Arc<dyn Clock>,
    mock: Option<Arc<MockBackend>>,
}

/// The embedder a config describes. Remote embedders read their endpoint
/// from the environment.
pub fn embedder_from_config(cfg: &EngineConfig) -> Result<Arc<dyn Embedder>, LlmError> {
    Ok(match &cfg.llm.embedding {
        EmbeddingConfig::Hashed { dim, latency_ms } => {
            Arc::new(HashedEmbedder::new(*dim).with_latency(Duration::from_millis(*latency_ms)))
        }
        EmbeddingConfig::Openai { model, dim } => {
            let base = std::env::var(llm::ENV_BASE_URL)
                .map_err(|_| LlmError::BackendUnavailable(format!("{} is not set", llm::ENV_BASE_URL)))?;
            let model = std::env::var(llm::ENV_EMBEDDING_MODEL).unwrap_or_else(|_| model.clone());
            Arc::new(OpenAiEmbedder::new(base, std::env::var(llm::ENV_API_KEY).ok(), model, *dim))
        }
    })
}

fn micros(since: Instant) -> u64 {
    since.elapsed().as_micros() as u64
}

impl Engine {
    pub fn builder(config: EngineConfig) -> EngineBuilder {
        EngineBuilder {
            config,
            base_dir: None,
            backend: None,
            embedder: None,
            registry: RewriteRegistry::new(),
            clock: None,
            stores: BTreeMap::new(),
            routing: None,
            reranker: None,
        }
    }

    /// Loads and validates a config file, then builds with its defaults.
    pub async fn from_config_file(path: &Path) -> Result<Engine, EngineError> {
        let cfg = EngineConfig::load(path)?;
        let mut b = Engine::builder(cfg);
        if let Some(dir) = path.parent() {
            b = b.base_dir(dir);
        }
        b.build().await
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn agent_ids(&self) -> Vec<String> {
        self.agents.iter().map(|a| a.id.clone()).collect()
    }

    pub fn stores(&self) -> &BTreeMap<String, Arc<VectorStore>> {
        &self.stores
    }

    pub fn ingest_stats(&self) -> &[IngestStats] {
        &self.ingest_stats
    }

    pub fn routing_model(&self) -> Option<&RoutingModel> {
        self.routing.as_ref()
    }

    pub fn embedder(&self) -> &Arc<dyn Embedder> {
        &self.embedder
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    /// The scripted backend, when the engine built one from its config.
    pub fn mock_backend(&self) -> Option<&Arc<MockBackend>> {
        self.mock.as_ref()
    }

    /// Per-agent scores and the activation list, exactly as a turn computes
    /// them. Embedding failures fall back to activating every agent.
    pub async fn route_debug(&self, query: &str) -> Result<RouteDebug, LlmError> {
        let Some(model) = &self.routing else {
            return Ok(RouteDebug { routing_enabled: false, scores: None, activated: self.agent_ids(), fallback_all: false });
        };
        let qv = self.embedder.embed(&[query.to_string()]).await?.remove(0);
        let d = model.decide(&qv, self.config.router.top_k, self.config.router.min_score);
        Ok(RouteDebug { routing_enabled: true, scores: Some(d.scores), activated: d.activated, fallback_all: d.fallback_all })
    }

    /// Runs one turn and, on success, appends the user message and the answer
    /// to `history`. Component failures degrade the turn; only a failed
    /// answer generation fails it, leaving `history` untouched.
    pub async fn run_turn(
        &self,
        history: &mut ConversationHistory,
        message: &str,
        events: Option<&UnboundedSender<TurnEvent>>,
    ) -> Result<TurnOutcome, TurnError> {
        let message = message.trim();
        if message.is_empty() {
            return Err(TurnError::EmptyMessage);
        }
        let emit = |e: TurnEvent| {
            if let Some(tx) = events {
                let _ = tx.send(e);
            }
        };
        let manager_on = self.config.pipeline.context_manager_enabled;
        let turn_start = Instant::now();
        let mut errors = Vec::new();
        let mut timings = TurnTimings::default();
        let hist: &ConversationHistory = history;

        // Stage 1: query enrichment alongside routing.
        let stage1 = Instant::now();
        let rewrite_branch = async {
            let t = Instant::now();
            let q = if manager_on { self.context.rewrite_for_retrieval(message, hist).await } else { message.to_string() };
            (q, micros(t))
        };
        let route_branch = async {
            let t = Instant::now();
            let r = self.route_debug(message).await;
            (r, micros(t))
        };
        let ((enriched, rewrite_us), (routed, route_us)) = tokio::join!(rewrite_branch, route_branch);
        timings.stage1 = StageTiming {
            wall_us: micros(stage1),
            branches_us: [("context_rewrite".to_string(), rewrite_us), ("routing".to_string(), route_us)].into(),
        };
        timings.stage1_done_us = micros(turn_start);
        let route = routed.unwrap_or_else(|e| {
            errors.push(format!("routing: {e}; all agents activated"));
            RouteDebug { routing_enabled: true, scores: None, activated: self.agent_ids(), fallback_all: true }
        });
        emit(TurnEvent::Meta(TurnMeta {
            activated_agents: route.activated.clone(),
            routing_enabled: route.routing_enabled,
            context_manager_enabled: manager_on,
        }));

        // Stage 2: activated agents alongside the conversation analysis.
        let stage2 = Instant::now();
        let timeout = Duration::from_millis(self.config.pipeline.retrieval_timeout_ms);
        let active: Vec<&Arc<RetrievalAgent>> =
            route.activated.iter().filter_map(|id| self.agents.iter().find(|a| &a.id == id)).collect();
        let retrievals = join_all(active.iter().map(|agent| {
            let enriched = enriched.as_str();
            async move {
                let t = Instant::now();
                let bundle = match tokio::time::timeout(timeout, agent.retrieve(enriched)).await {
                    Ok(b) => b,
                    Err(_) => RetrievalBundle::empty(
                        agent.id.clone(),
                        enriched,
                        Some(format!("retrieval timed out after {} ms", timeout.as_millis())),
                    ),
                };
                (bundle, micros(t))
            }
        }));
        let analysis_branch = async {
            let t = Instant::now();
            let a = if manager_on { Some(self.context.analyze_context(message, hist).await) } else { None };
            (a, micros(t))
        };
        let (retrieved, (analysis, analysis_us)) = tokio::join!(retrievals, analysis_branch);
        let mut branches_us = BTreeMap::new();
        branches_us.insert("context_analysis".to_string(), analysis_us);
        let mut bundles = Vec::with_capacity(retrieved.len());
        let mut rewritten_queries = BTreeMap::new();
        let mut chunk_counts = BTreeMap::new();
        for (bundle, us) in retrieved {
            branches_us.insert(format!("agent:{}", bundle.agent_id), us);
            rewritten_queries.insert(bundle.agent_id.clone(), bundle.rewritten_query.clone());
            chunk_counts.insert(bundle.agent_id.clone(), bundle.items().len());
            errors.extend(bundle.errors.iter().map(|e| format!("{}: {e}", bundle.agent_id)));
            bundles.push(bundle);
        }
        timings.stage2 = StageTiming { wall_us: micros(stage2), branches_us };
        timings.stage2_done_us = micros(turn_start);

        // Summarization: rerank, stream, look back.
        let s = &self.config.summarizer;
        let context = rerank(&enriched, &bundles, s.chunk_budget, s.max_chunk_chars, self.reranker.as_ref()).await;
        timings.rerank_done_us = micros(turn_start);
        let related_indices = analysis.as_ref().map(|a: &ContextAnalysis| a.indices_of_related_messages.clone());
        let view = match analysis {
            Some(a) => ConversationView::Analysis(a),
            None => ConversationView::Full(hist.clone()),
        };
        let failed = |reason: String, partial: String| TurnError::TurnFailed { reason, partial };
        let mut stream = generate_answer_stream(message, &view, &context, &self.chat)
            .await
            .map_err(|e| failed(e.to_string(), String::new()))?;
        let mut answer = String::new();
        while let Some(event) = stream.next().await {
            match event {
                Ok(StreamEvent::Token(t)) => {
                    timings.first_token_us.get_or_insert_with(|| micros(turn_start));
                    answer.push_str(&t);
                    emit(TurnEvent::Token(t));
                }
                Ok(StreamEvent::Done) => break,
                Err(e) => return Err(failed(e.to_string(), answer)),
            }
        }
        timings.answer_done_us = micros(turn_start);
        if answer.trim().is_empty() {
            return Err(failed("the model returned an empty answer".into(), answer));
        }
        let citations = generate_citations(&answer, &context, &self.chat).await;
        timings.citations_done_us = micros(turn_start);
        emit(TurnEvent::Citations(citations.clone()));

        let turn_index = history.len() / 2;
        // Both contents are non-empty, so neither push can fail.
        let _ = history.push(Role::User, message, self.clock.now_ms());
        let _ = history.push(Role::Assistant, answer.clone(), self.clock.now_ms());

        let trace = TurnTrace {
            turn_index,
            query: message.to_string(),
            enriched_query: enriched,
            context_manager_enabled: manager_on,
            routing_enabled: route.routing_enabled,
            route_scores: route.scores,
            activated_agents: route.activated,
            rewritten_queries,
            chunk_counts,
            related_indices,
            presented_chunks: context.chunks.iter().map(|c| c.chunk.chunk_id.clone()).collect(),
            dropped_chunks: context.dropped,
            citation_count: citations.len(),
            timings,
            errors,
        };
        tracing::info!(target: "polyrag::turn", trace = %serde_json::to_string(&trace).unwrap_or_default(), "turn complete");
        Ok(TurnOutcome { answer, citations, trace })
    }
}
