//! Declarative engine configuration and its validation.
//!
//! The same types describe both the file on disk and the validated result.
//! Validation fills every context-dependent default, such as the router
//! toggle or mix-in weights, and inlines referenced template and mix-in
//! files, so a validated config re-validates to itself.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::prompts;

pub const DEFAULT_TOP_K: usize = 2;
pub const DEFAULT_MIXIN_WEIGHT: f64 = 0.5;
pub const DEFAULT_SCALE: f64 = 1.0;
pub const DEFAULT_CHUNK_BUDGET: usize = 8;
pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_N_PER_SOURCE: usize = 5;
pub const DEFAULT_HYBRID_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub agents: Vec<AgentConfig>,
    pub knowledge_sources: Vec<SourceConfig>,
    #[serde(default)]
    pub router: RouterConfig,
    #[serde(default)]
    pub summarizer: SummarizerConfig,
    #[serde(default)]
    pub llm: LlmConfig,
    #[serde(default)]
    pub pipeline: PipelineConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub id: String,
    #[serde(default)]
    pub description: String,
    pub sources: Vec<String>,
    #[serde(default)]
    pub rewrite_chain: Vec<RewriteSpec>,
    /// Summarize raw retrieved text with the LLM before handing it on.
    #[serde(default)]
    pub digest: bool,
    #[serde(default = "default_n_per_source")]
    pub n_per_source: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewriteKind {
    Prompt,
    Retrieval,
    Keyword,
    Hyde,
    Translation,
    Custom,
}

impl RewriteKind {
    pub fn default_template(&self) -> Option<&'static str> {
        match self {
            RewriteKind::Prompt => Some(prompts::PROMPT_REWRITE),
            RewriteKind::Retrieval => Some(prompts::RETRIEVAL_REWRITE),
            RewriteKind::Keyword => Some(prompts::KEYWORD_REWRITE),
            RewriteKind::Hyde => Some(prompts::HYDE_REWRITE),
            RewriteKind::Translation => Some(prompts::TRANSLATION_REWRITE),
            RewriteKind::Custom => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteSpec {
    pub kind: RewriteKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    /// Path (relative to the config file) of a template; inlined on validation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_file: Option<String>,
    /// Retrieval rewrite: number of context chunks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_context_chunks: Option<usize>,
    /// Translation rewrite: language name or code.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_language: Option<String>,
    /// Custom rewrite: registered strategy name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

impl RewriteSpec {
    pub fn new(kind: RewriteKind) -> Self {
        RewriteSpec {
            kind,
            template: None,
            template_file: None,
            n_context_chunks: None,
            target_language: None,
            name: None,
        }
    }

    /// The configured template, or the built-in default for the kind.
    pub fn template_or_default(&self) -> &str {
        self.template.as_deref().or_else(|| self.kind.default_template()).unwrap_or("{query}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceConfig {
    pub name: String,
    /// Language of the source content, used as the default translation target.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language: Option<String>,
    #[serde(flatten)]
    pub spec: SourceSpec,
}

impl SourceConfig {
    pub fn kind(&self) -> crate::types::SourceKind {
        use crate::types::SourceKind;
        match self.spec {
            SourceSpec::Vdb { .. } => SourceKind::Vdb,
            SourceSpec::SearchEngine { .. } => SourceKind::SearchEngine,
            SourceSpec::HttpApi { .. } => SourceKind::HttpApi,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceSpec {
    Vdb {
        /// Files or directories, relative to the config file.
        paths: Vec<String>,
        #[serde(default)]
        chunking: ChunkingPolicy,
        /// Cluster count for routing synopses; derived from chunk count when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cluster_count: Option<usize>,
        #[serde(default = "default_hybrid_alpha")]
        hybrid_alpha: f64,
        #[serde(default = "default_extensions")]
        extensions: Vec<String>,
    },
    SearchEngine {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        fixture_dir: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        endpoint: Option<String>,
        /// Restricts results to one site or domain.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        site: Option<String>,
    },
    HttpApi {
        endpoint_template: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        base_url: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        fixture_dir: Option<String>,
        /// Placeholder bound to the rewritten query.
        #[serde(default = "default_query_param")]
        query_param: String,
        #[serde(default)]
        params: BTreeMap<String, String>,
        response_path: String,
        #[serde(default)]
        fields: ResultFields,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultFields {
    pub title: String,
    pub snippet: String,
    pub url: String,
}

impl Default for ResultFields {
    fn default() -> Self {
        ResultFields { title: "title".into(), snippet: "snippet".into(), url: "url".into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPreference {
    Paragraph,
    Line,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkingPolicy {
    pub max_chunk_chars: usize,
    pub overlap_chars: usize,
    pub split_preference: SplitPreference,
}

impl Default for ChunkingPolicy {
    fn default() -> Self {
        ChunkingPolicy { max_chunk_chars: 1200, overlap_chars: 200, split_preference: SplitPreference::Paragraph }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterConfig {
    /// Defaults to on when two or more agents are configured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enabled: Option<bool>,
    #[serde(default = "default_top_k", alias = "K")]
    pub top_k: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Agents scoring below this are deactivated; if none remain, all are activated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_score: Option<f64>,
    #[serde(default)]
    pub agents: BTreeMap<String, RouterAgentConfig>,
}

impl Default for RouterConfig {
    fn default() -> Self {
        RouterConfig { enabled: None, top_k: DEFAULT_TOP_K, seed: DEFAULT_SEED, min_score: None, agents: BTreeMap::new() }
    }
}

impl RouterConfig {
    pub fn is_enabled(&self) -> bool {
        self.enabled.unwrap_or(false)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterAgentConfig {
    /// Manual descriptions or sample chunks blended into the agent's routing score.
    #[serde(default)]
    pub mixin: Vec<String>,
    /// Files of blank-line-separated mix-in entries; inlined on validation.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mixin_files: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixin_weight: Option<f64>,
    #[serde(default = "default_scale")]
    pub scale: f64,
}

impl Default for RouterAgentConfig {
    fn default() -> Self {
        RouterAgentConfig { mixin: Vec::new(), mixin_files: Vec::new(), mixin_weight: None, scale: DEFAULT_SCALE }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummarizerConfig {
    #[serde(default = "default_chunk_budget")]
    pub chunk_budget: usize,
    #[serde(default = "default_max_chunk_chars")]
    pub max_chunk_chars: usize,
    #[serde(default)]
    pub reranker: RerankerConfig,
}

impl Default for SummarizerConfig {
    fn default() -> Self {
        SummarizerConfig {
            chunk_budget: DEFAULT_CHUNK_BUDGET,
            max_chunk_chars: default_max_chunk_chars(),
            reranker: RerankerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RerankerConfig {
    TfCosine,
    CrossEncoder { endpoint: String },
}

impl Default for RerankerConfig {
    fn default() -> Self {
        RerankerConfig::TfCosine
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LlmBackend {
    Mock,
    Openai,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmConfig {
    #[serde(default = "default_backend")]
    pub backend: LlmBackend,
    #[serde(default = "default_chat_model")]
    pub chat_model: String,
    /// Model for the context manager; a lighter model is recommended.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_model: Option<String>,
    /// Mock script file, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock_script: Option<String>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub embedding: EmbeddingConfig,
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig {
            backend: default_backend(),
            chat_model: default_chat_model(),
            context_model: None,
            mock_script: None,
            temperature: default_temperature(),
            max_tokens: default_max_tokens(),
            timeout_ms: default_timeout_ms(),
            embedding: EmbeddingConfig::default(),
        }
    }
}

impl LlmConfig {
    pub fn context_model(&self) -> &str {
        self.context_model.as_deref().unwrap_or(&self.chat_model)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbeddingConfig {
    /// Deterministic bag-of-hashed-tokens embedder.
    Hashed {
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default)]
        latency_ms: u64,
    },
    Openai { model: String, dim: usize },
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig::Hashed { dim: default_dim(), latency_ms: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default = "default_true")]
    pub context_manager_enabled: bool,
    #[serde(default = "default_retrieval_timeout_ms")]
    pub retrieval_timeout_ms: u64,
    /// Character budget of history handed to the context manager.
    #[serde(default = "default_history_max_chars")]
    pub history_max_chars: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            context_manager_enabled: true,
            retrieval_timeout_ms: default_retrieval_timeout_ms(),
            history_max_chars: default_history_max_chars(),
        }
    }
}

fn default_n_per_source() -> usize {
    DEFAULT_N_PER_SOURCE
}
fn default_hybrid_alpha() -> f64 {
    DEFAULT_HYBRID_ALPHA
}
fn default_extensions() -> Vec<String> {
    ["md", "txt", "py", "rs", "rst", "json", "yaml", "toml"].iter().map(|s| s.to_string()).collect()
}
fn default_query_param() -> String {
    "q".into()
}
fn default_top_k() -> usize {
    DEFAULT_TOP_K
}
fn default_seed() -> u64 {
    DEFAULT_SEED
}
fn default_scale() -> f64 {
    DEFAULT_SCALE
}
fn default_chunk_budget() -> usize {
    DEFAULT_CHUNK_BUDGET
}
fn default_max_chunk_chars() -> usize {
    2000
}
fn default_backend() -> LlmBackend {
    LlmBackend::Mock
}
fn default_chat_model() -> String {
    "mock-chat".into()
}
fn default_temperature() -> f64 {
    0.2
}
fn default_max_tokens() -> u32 {
    1024
}
fn default_timeout_ms() -> u64 {
    60_000
}
fn default_dim() -> usize {
    64
}
fn default_true() -> bool {
    true
}
fn default_retrieval_timeout_ms() -> u64 {
    10_000
}
fn default_history_max_chars() -> usize {
    12_000
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown source reference: {0}")]
    UnknownSourceReference(String),
    #[error("unknown agent reference: {0}")]
    UnknownAgentReference(String),
    #[error("value out of range: {0}")]
    InvalidRange(String),
    #[error("duplicate agent id: {0}")]
    DuplicateAgentId(String),
    #[error("duplicate source name: {0}")]
    DuplicateSourceName(String),
    #[error("invalid rewrite chain for agent {agent}: {reason}")]
    InvalidRewriteChain { agent: String, reason: String },
    #[error("missing value: {0}")]
    Missing(String),
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("malformed config: {0}")]
    Parse(String),
}

/// All violations found in one validation pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigErrors(pub Vec<ConfigError>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} configuration violation(s):", self.0.len())?;
        for e in &self.0 {
            writeln!(f, "  - {e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

impl ConfigErrors {
    pub fn contains(&self, err: &ConfigError) -> bool {
        self.0.contains(err)
    }
}

/// Parses and validates a raw configuration tree. Relative template and
/// mix-in file paths resolve against `base_dir`.
pub fn validate_config(raw: serde_json::Value, base_dir: Option<&Path>) -> Result<EngineConfig, ConfigErrors> {
    let cfg: EngineConfig =
        serde_json::from_value(raw).map_err(|e| ConfigErrors(vec![ConfigError::Parse(e.to_string())]))?;
    cfg.validate(base_dir)
}

impl EngineConfig {
    pub fn from_json_str(text: &str, base_dir: Option<&Path>) -> Result<EngineConfig, ConfigErrors> {
        let raw: serde_json::Value =
            serde_json::from_str(text).map_err(|e| ConfigErrors(vec![ConfigError::Parse(e.to_string())]))?;
        validate_config(raw, base_dir)
    }

    pub fn load(path: &Path) -> Result<EngineConfig, ConfigErrors> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            ConfigErrors(vec![ConfigError::Io { path: path.display().to_string(), reason: e.to_string() }])
        })?;
        Self::from_json_str(&text, path.parent())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn agent(&self, id: &str) -> Option<&AgentConfig> {
        self.agents.iter().find(|a| a.id == id)
    }

    pub fn source(&self, name: &str) -> Option<&SourceConfig> {
        self.knowledge_sources.iter().find(|s| s.name == name)
    }

    pub fn validate(mut self, base_dir: Option<&Path>) -> Result<EngineConfig, ConfigErrors> {
        let mut errs = Vec::new();

        let mut source_names = BTreeSet::new();
        for s in &self.knowledge_sources {
            if s.name.is_empty() {
                errs.push(ConfigError::Missing("knowledge source name".into()));
            }
            if !source_names.insert(s.name.clone()) {
                errs.push(ConfigError::DuplicateSourceName(s.name.clone()));
            }
            validate_source(s, &mut errs);
        }

        if self.agents.is_empty() {
            errs.push(ConfigError::Missing("at least one agent".into()));
        }
        let mut agent_ids = BTreeSet::new();
        for a in &self.agents {
            if a.id.is_empty() {
                errs.push(ConfigError::Missing("agent id".into()));
            }
            if !agent_ids.insert(a.id.clone()) {
                errs.push(ConfigError::DuplicateAgentId(a.id.clone()));
            }
            if a.sources.is_empty() {
                errs.push(ConfigError::Missing(format!("sources for agent {}", a.id)));
            }
            for s in &a.sources {
                if !source_names.contains(s) {
                    errs.push(ConfigError::UnknownSourceReference(s.clone()));
                }
            }
            if a.n_per_source < 1 {
                errs.push(ConfigError::InvalidRange(format!("n_per_source ({})", a.id)));
            }
        }

        // Rewrite chains: inline template files, fill defaults, check shape.
        let sources = self.knowledge_sources.clone();
        for a in &mut self.agents {
            validate_chain(a, &sources, base_dir, &mut errs);
        }

        // Router.
        if self.router.top_k < 1 {
            errs.push(ConfigError::InvalidRange("K".into()));
        }
        if let Some(t) = self.router.min_score {
            if !t.is_finite() {
                errs.push(ConfigError::InvalidRange("min_score".into()));
            }
        }
        let enabled = self.router.enabled.unwrap_or(self.agents.len() >= 2);
        self.router.enabled = Some(enabled);
        for id in self.router.agents.keys() {
            if !agent_ids.contains(id) {
                errs.push(ConfigError::UnknownAgentReference(id.clone()));
            }
        }
        for a in &self.agents {
            let entry = self.router.agents.entry(a.id.clone()).or_default();
            for file in std::mem::take(&mut entry.mixin_files) {
                match read_relative(base_dir, &file) {
                    Ok(text) => entry.mixin.extend(split_blocks(&text)),
                    Err(e) => errs.push(e),
                }
            }
            entry.mixin.retain(|m| !m.trim().is_empty());
            if !(entry.scale > 0.0 && entry.scale.is_finite()) {
                errs.push(ConfigError::InvalidRange("scale".into()));
            }
            if let Some(w) = entry.mixin_weight {
                if !(0.0..=1.0).contains(&w) {
                    errs.push(ConfigError::InvalidRange("mixin_weight".into()));
                }
            }
            let has_local = a
                .sources
                .iter()
                .filter_map(|s| sources.iter().find(|c| &c.name == s))
                .any(|c| matches!(c.spec, SourceSpec::Vdb { .. }));
            let has_mixin = !entry.mixin.is_empty();
            entry.mixin_weight = Some(match (has_local, has_mixin) {
                (false, _) => 1.0,
                (true, false) => 0.0,
                (true, true) => entry.mixin_weight.unwrap_or(DEFAULT_MIXIN_WEIGHT),
            });
            if enabled && !has_local && !has_mixin {
                errs.push(ConfigError::Missing(format!(
                    "router mix-in for agent {} (it has no local knowledge to cluster)",
                    a.id
                )));
            }
        }

        if self.summarizer.chunk_budget < 1 {
            errs.push(ConfigError::InvalidRange("chunk_budget".into()));
        }
        if self.summarizer.max_chunk_chars < 1 {
            errs.push(ConfigError::InvalidRange("max_chunk_chars".into()));
        }
        if let RerankerConfig::CrossEncoder { endpoint } = &self.summarizer.reranker {
            if endpoint.is_empty() {
                errs.push(ConfigError::Missing("reranker endpoint".into()));
            }
        }

        if !(self.llm.temperature >= 0.0 && self.llm.temperature.is_finite()) {
            errs.push(ConfigError::InvalidRange("temperature".into()));
        }
        if self.llm.max_tokens < 1 {
            errs.push(ConfigError::InvalidRange("max_tokens".into()));
        }
        match &self.llm.embedding {
            EmbeddingConfig::Hashed { dim, .. } | EmbeddingConfig::Openai { dim, .. } if *dim < 1 => {
                errs.push(ConfigError::InvalidRange("embedding dim".into()))
            }
            _ => {}
        }
        if self.llm.context_model.is_none() {
            self.llm.context_model = Some(self.llm.chat_model.clone());
        }
        if self.pipeline.history_max_chars < 1 {
            errs.push(ConfigError::InvalidRange("history_max_chars".into()));
        }

        if errs.is_empty() {
            Ok(self)
        } else {
            Err(ConfigErrors(errs))
        }
    }
}

fn validate_source(s: &SourceConfig, errs: &mut Vec<ConfigError>) {
    match &s.spec {
        SourceSpec::Vdb { paths, chunking, cluster_count, hybrid_alpha, .. } => {
            if paths.is_empty() {
                errs.push(ConfigError::Missing(format!("paths for source {}", s.name)));
            }
            if chunking.max_chunk_chars < 1 || chunking.overlap_chars >= chunking.max_chunk_chars {
                errs.push(ConfigError::InvalidRange(format!("chunking ({})", s.name)));
            }
            if matches!(cluster_count, Some(0)) {
                errs.push(ConfigError::InvalidRange(format!("cluster_count ({})", s.name)));
            }
            if !(0.0..=1.0).contains(hybrid_alpha) {
                errs.push(ConfigError::InvalidRange(format!("hybrid_alpha ({})", s.name)));
            }
        }
        SourceSpec::SearchEngine { fixture_dir, endpoint, .. } => {
            if fixture_dir.is_none() && endpoint.is_none() {
                errs.push(ConfigError::Missing(format!("fixture_dir or endpoint for source {}", s.name)));
            }
        }
        SourceSpec::HttpApi { endpoint_template, fixture_dir, base_url, response_path, .. } => {
            if endpoint_template.is_empty() {
                errs.push(ConfigError::Missing(format!("endpoint_template for source {}", s.name)));
            }
            if response_path.is_empty() {
                errs.push(ConfigError::Missing(format!("response_path for source {}", s.name)));
            }
            if fixture_dir.is_none() && base_url.is_none() {
                errs.push(ConfigError::Missing(format!("fixture_dir or base_url for source {}", s.name)));
            }
        }
    }
}

fn validate_chain(a: &mut AgentConfig, sources: &[SourceConfig], base_dir: Option<&Path>, errs: &mut Vec<ConfigError>) {
    let chain_err = |reason: String| ConfigError::InvalidRewriteChain { agent: a.id.clone(), reason };
    let agent_sources: Vec<&SourceConfig> =
        a.sources.iter().filter_map(|s| sources.iter().find(|c| &c.name == s)).collect();
    let has_vdb = agent_sources.iter().any(|s| matches!(s.spec, SourceSpec::Vdb { .. }));
    let has_search = agent_sources.iter().any(|s| matches!(s.spec, SourceSpec::SearchEngine { .. }));
    let source_language = agent_sources.iter().find_map(|s| s.language.clone());
    let last = a.rewrite_chain.len().saturating_sub(1);
    let mut new_errs = Vec::new();

    for (pos, step) in a.rewrite_chain.iter_mut().enumerate() {
        if step.kind == RewriteKind::Keyword && pos != last {
            new_errs.push(chain_err("keyword rewrite must be the last step".into()));
        }
        if let Some(file) = step.template_file.take() {
            match read_relative(base_dir, &file) {
                Ok(t) => step.template = Some(t),
                Err(e) => new_errs.push(e),
            }
        }
        match step.kind {
            RewriteKind::Custom => {
                if step.name.as_deref().map_or(true, str::is_empty) {
                    new_errs.push(chain_err("custom rewrite requires a name".into()));
                }
            }
            kind => {
                if step.template.is_none() {
                    step.template = kind.default_template().map(str::to_string);
                }
                if !step.template.as_deref().unwrap_or_default().contains("{query}") {
                    new_errs.push(chain_err(format!("{kind:?} template lacks {{query}}")));
                }
            }
        }
        match step.kind {
            RewriteKind::Retrieval => {
                if !has_vdb {
                    new_errs.push(chain_err("retrieval rewrite requires a vector-store source".into()));
                }
                let n = *step.n_context_chunks.get_or_insert(3);
                if n < 1 {
                    new_errs.push(ConfigError::InvalidRange("n_context_chunks".into()));
                }
            }
            RewriteKind::Translation => {
                if step.target_language.is_none() {
                    step.target_language = source_language.clone();
                }
                if step.target_language.as_deref().map_or(true, str::is_empty) {
                    new_errs.push(chain_err("translation rewrite requires target_language".into()));
                }
            }
            _ => {}
        }
    }
    if has_search && a.rewrite_chain.last().map(|s| s.kind) != Some(RewriteKind::Keyword) {
        new_errs.push(chain_err("search-engine sources require the chain to end with a keyword rewrite".into()));
    }
    errs.extend(new_errs);
}

fn read_relative(base_dir: Option<&Path>, file: &str) -> Result<String, ConfigError> {
    let path = resolve_path(base_dir, file);
    std::fs::read_to_string(&path)
        .map_err(|e| ConfigError::Io { path: path.display().to_string(), reason: e.to_string() })
}

pub fn resolve_path(base_dir: Option<&Path>, file: &str) -> PathBuf {
    let p = Path::new(file);
    match base_dir {
        Some(base) if p.is_relative() => base.join(p),
        _ => p.to_path_buf(),
    }
}

/// Splits text into blank-line-separated, trimmed, non-empty blocks.
pub fn split_blocks(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur: Vec<&str> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !cur.is_empty() {
                out.push(cur.join("\n").trim().to_string());
                cur.clear();
            }
        } else {
            cur.push(line);
        }
    }
    if !cur.is_empty() {
        out.push(cur.join("\n").trim().to_string());
    }
    out
}
