//! Knowledge-context query rewrites and rewrite chains.
//!
//! Built-in strategies: prompt, retrieval-augmented, keyword extraction,
//! hypothetical-answer (HyDE) and translation. Custom strategies register by
//! name in a [`RewriteRegistry`]. Every strategy falls back to its input when
//! the model returns nothing; [`apply_chain`] additionally skips failed steps.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use crate::config::{RewriteKind, RewriteSpec};
use crate::knowledge::SearchableStore;
use crate::llm::{ChatRequest, Embedder, LlmError, LlmGateway};
use crate::prompts;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RewriteError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("no keywords could be parsed")]
    EmptyKeywords,
    #[error("strategy misconfigured: {0}")]
    Misconfigured(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewriteOutput {
    Text(String),
    Keywords(Vec<String>),
}

impl RewriteOutput {
    /// Text form; keywords are joined by spaces.
    pub fn as_text(&self) -> String {
        match self {
            RewriteOutput::Text(t) => t.clone(),
            RewriteOutput::Keywords(k) => k.join(" "),
        }
    }

    pub fn keywords(&self) -> Option<&[String]> {
        match self {
            RewriteOutput::Keywords(k) => Some(k),
            RewriteOutput::Text(_) => None,
        }
    }
}

/// A developer-supplied rewrite strategy.
#[async_trait]
pub trait CustomRewrite: Send + Sync {
    async fn rewrite(&self, query: &str, ctx: &RewriteContext<'_>) -> Result<String, RewriteError>;
}

#[derive(Clone, Default)]
pub struct RewriteRegistry {
    custom: HashMap<String, Arc<dyn CustomRewrite>>,
}

impl RewriteRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, strategy: Arc<dyn CustomRewrite>) {
        self.custom.insert(name.into(), strategy);
    }

    pub fn get(&self, name: &str) -> Option<&Arc<dyn CustomRewrite>> {
        self.custom.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.custom.contains_key(name)
    }
}

/// What a strategy may use besides the query.
pub struct RewriteContext<'a> {
    pub llm: &'a LlmGateway,
    pub model: &'a str,
    pub temperature: f64,
    pub max_tokens: u32,
    pub embedder: &'a dyn Embedder,
    /// Local store for retrieval rewrites.
    pub store: Option<&'a dyn SearchableStore>,
    pub hybrid_alpha: f64,
    pub registry: &'a RewriteRegistry,
}

impl RewriteContext<'_> {
    async fn complete(&self, prompt: String) -> Result<String, LlmError> {
        let mut req = ChatRequest::user(self.model, prompt);
        req.temperature = self.temperature;
        req.max_tokens = self.max_tokens;
        self.llm.chat(&req).await
    }
}

fn or_original(output: String, query: &str) -> String {
    let trimmed = output.trim();
    if trimmed.is_empty() {
        query.to_string()
    } else {
        trimmed.to_string()
    }
}

fn fill_query(template: &str, query: &str, extra: &[(&str, &str)]) -> String {
    let mut vars: BTreeMap<&str, &str> = extra.iter().cloned().collect();
    vars.insert("query", query);
    prompts::fill(template, &vars)
}

pub async fn prompt_rewrite(query: &str, spec: &RewriteSpec, ctx: &RewriteContext<'_>) -> Result<String, RewriteError> {
    let out = ctx.complete(fill_query(spec.template_or_default(), query, &[])).await?;
    Ok(or_original(out, query))
}

/// Hybrid-searches the local store with the original query and hands the
/// retrieved text to the model as `{context}`.
pub async fn retrieval_rewrite(query: &str, spec: &RewriteSpec, ctx: &RewriteContext<'_>) -> Result<String, RewriteError> {
    let store = ctx.store.ok_or_else(|| RewriteError::Misconfigured("retrieval rewrite needs a local store".into()))?;
    let n = spec.n_context_chunks.unwrap_or(3).max(1);
    let context = if store.is_empty() {
        String::new()
    } else {
        let qv = ctx.embedder.embed(&[query.to_string()]).await?.remove(0);
        store
            .hybrid_search(query, &qv, n, ctx.hybrid_alpha)
            .into_iter()
            .map(|h| h.chunk.text)
            .collect::<Vec<_>>()
            .join("\n\n")
    };
    let out = ctx.complete(fill_query(spec.template_or_default(), query, &[("context", &context)])).await?;
    Ok(or_original(out, query))
}

/// Comma- or newline-separated keywords, trimmed, empties dropped, order
/// kept, duplicates removed case-insensitively.
pub fn parse_keywords(output: &str) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    output
        .split([',', '\n'])
        .map(str::trim)
        .filter(|k| !k.is_empty())
        .filter(|k| seen.insert(k.to_lowercase()))
        .map(str::to_string)
        .collect()
}

pub async fn keyword_rewrite(query: &str, spec: &RewriteSpec, ctx: &RewriteContext<'_>) -> Result<Vec<String>, RewriteError> {
    let out = ctx.complete(fill_query(spec.template_or_default(), query, &[])).await?;
    let keywords = parse_keywords(&out);
    if keywords.is_empty() {
        return Err(RewriteError::EmptyKeywords);
    }
    Ok(keywords)
}

/// Fallback keywords when extraction fails: the query's whitespace tokens.
pub fn whitespace_keywords(query: &str) -> Vec<String> {
    parse_keywords(&query.split_whitespace().collect::<Vec<_>>().join(","))
}

pub async fn hyde_rewrite(query: &str, spec: &RewriteSpec, ctx: &RewriteContext<'_>) -> Result<String, RewriteError> {
    let out = ctx.complete(fill_query(spec.template_or_default(), query, &[])).await?;
    Ok(or_original(out, query))
}

/// Coarse script detection: `"zh"` when any CJK ideograph is present,
/// `"en"` for ASCII-only text, otherwise `"other"`.
pub fn detect_language(text: &str) -> &'static str {
    if text.chars().any(|c| ('\u{4e00}'..='\u{9fff}').contains(&c) || ('\u{3400}'..='\u{4dbf}').contains(&c)) {
        "zh"
    } else if text.is_ascii() {
        "en"
    } else {
        "other"
    }
}

/// Maps common language names to the codes [`detect_language`] returns.
pub fn language_code(name: &str) -> String {
    match name.trim().to_lowercase().as_str() {
        "zh" | "zh-cn" | "chinese" | "中文" | "汉语" => "zh".into(),
        "en" | "en-us" | "english" | "英文" => "en".into(),
        other => other.to_string(),
    }
}

pub async fn translation_rewrite(query: &str, spec: &RewriteSpec, ctx: &RewriteContext<'_>) -> Result<String, RewriteError> {
    let target = spec
        .target_language
        .as_deref()
        .ok_or_else(|| RewriteError::Misconfigured("translation rewrite needs target_language".into()))?;
    if language_code(target) == detect_language(query) {
        return Ok(query.to_string());
    }
    let out = ctx.complete(fill_query(spec.template_or_default(), query, &[("target_language", target)])).await?;
    Ok(or_original(out, query))
}

/// Runs one strategy on text input.
pub async fn apply_step(query: &str, spec: &RewriteSpec, ctx: &RewriteContext<'_>) -> Result<RewriteOutput, RewriteError> {
    Ok(match spec.kind {
        RewriteKind::Prompt => RewriteOutput::Text(prompt_rewrite(query, spec, ctx).await?),
        RewriteKind::Retrieval => RewriteOutput::Text(retrieval_rewrite(query, spec, ctx).await?),
        RewriteKind::Keyword => RewriteOutput::Keywords(keyword_rewrite(query, spec, ctx).await?),
        RewriteKind::Hyde => RewriteOutput::Text(hyde_rewrite(query, spec, ctx).await?),
        RewriteKind::Translation => RewriteOutput::Text(translation_rewrite(query, spec, ctx).await?),
        RewriteKind::Custom => {
            let name = spec.name.as_deref().unwrap_or_default();
            let strategy = ctx
                .registry
                .get(name)
                .ok_or_else(|| RewriteError::Misconfigured(format!("custom strategy {name:?} is not registered")))?;
            RewriteOutput::Text(or_original(strategy.rewrite(query, ctx).await?, query))
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainOutcome {
    pub output: RewriteOutput,
    /// One note per step that failed and was skipped.
    pub notes: Vec<String>,
}

/// Applies strategies left to right, each consuming the previous output.
/// A failed step passes its input through; a failed keyword step falls back
/// to the whitespace tokens of its input.
pub async fn apply_chain(query: &str, chain: &[RewriteSpec], ctx: &RewriteContext<'_>) -> ChainOutcome {
    let mut current = RewriteOutput::Text(query.to_string());
    let mut notes = Vec::new();
    for spec in chain {
        let input = current.as_text();
        current = match apply_step(&input, spec, ctx).await {
            Ok(out) => out,
            Err(e) => {
                notes.push(format!("{:?} rewrite skipped: {e}", spec.kind));
                if spec.kind == RewriteKind::Keyword {
                    RewriteOutput::Keywords(whitespace_keywords(&input))
                } else {
                    RewriteOutput::Text(input)
                }
            }
        };
    }
    ChainOutcome { output: current, notes }
}
