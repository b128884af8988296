//! On-disk ingestion cache.
//!
//! The key hashes the vector-store sources (files and settings) together
//! with the embedder id and router settings, so any change that could alter
//! a store or the routing model lands in a fresh directory. Each entry keeps
//! the serialized stores and routing model beside a manifest of digests.

use std::path::{Path, PathBuf};

use polyrag_core::config::{EngineConfig, SourceSpec};
use polyrag_core::knowledge::{source_files, VectorStore};
use polyrag_core::pipeline::{embedder_from_config, Engine, EngineBuilder, EngineError};
use polyrag_core::router::RoutingModel;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const ROUTING: &str = "routing.json";

#[derive(Debug, thiserror::Error)]
pub enum CacheError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("cache {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("cache entry {0} is corrupt: {1}")]
    Corrupt(String, String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreDigest {
    pub source: String,
    pub chunk_count: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub key: String,
    pub embedder_id: String,
    pub stores: Vec<StoreDigest>,
    pub routing_sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub cache_hit: bool,
    pub key: String,
    pub entry_dir: String,
    pub stores: Vec<StoreDigest>,
    pub routing_sha256: Option<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CacheError + '_ {
    move |e| CacheError::Io { path: path.display().to_string(), reason: e.to_string() }
}

/// Cache key for a validated config whose relative paths resolve against `base_dir`.
pub fn cache_key(cfg: &EngineConfig, base_dir: Option<&Path>, embedder_id: &str) -> Result<String, CacheError> {
    let mut sources = Vec::new();
    for source in &cfg.knowledge_sources {
        if !matches!(source.spec, SourceSpec::Vdb { .. }) {
            continue;
        }
        let files = source_files(source, base_dir).map_err(|e| CacheError::Engine(e.into()))?;
        let mut listed = Vec::with_capacity(files.len());
        for (path, display) in files {
            let bytes = std::fs::read(&path).map_err(io_err(&path))?;
            listed.push(serde_json::json!([display, sha256_hex(&bytes)]));
        }
        sources.push(serde_json::json!({ "source": source, "files": listed }));
    }
    let agents: Vec<_> = cfg.agents.iter().map(|a| serde_json::json!([a.id, a.sources])).collect();
    let material = serde_json::json!({
        "format_version": FORMAT_VERSION,
        "embedder": embedder_id,
        "router": cfg.router,
        "agents": agents,
        "sources": sources,
    });
    Ok(sha256_hex(material.to_string().as_bytes()))
}

pub struct IngestCache {
    root: PathBuf,
}

impl IngestCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        IngestCache { root: root.into() }
    }

    pub fn entry_dir(&self, key: &str) -> PathBuf {
        self.root.join(key)
    }

    /// Stores and routing model of a complete, digest-verified entry.
    pub fn load(&self, key: &str) -> Result<Option<(Manifest, Vec<(String, VectorStore)>, Option<RoutingModel>)>, CacheError> {
        let dir = self.entry_dir(key);
        let manifest_path = dir.join(MANIFEST);
        if !manifest_path.exists() {
            return Ok(None);
        }
        let corrupt = |m: String| CacheError::Corrupt(key.to_string(), m);
        let text = std::fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
        if manifest.format_version != FORMAT_VERSION || manifest.key != key {
            return Ok(None);
        }
        let mut stores = Vec::new();
        for d in &manifest.stores {
            let path = dir.join(store_file(&d.source));
            let bytes = std::fs::read(&path).map_err(io_err(&path))?;
            if sha256_hex(&bytes) != d.sha256 {
                return Err(corrupt(format!("digest mismatch for store {}", d.source)));
            }
            let store: VectorStore = serde_json::from_slice(&bytes).map_err(|e| corrupt(e.to_string()))?;
            stores.push((d.source.clone(), store));
        }
        let routing = match &manifest.routing_sha256 {
            None => None,
            Some(digest) => {
                let path = dir.join(ROUTING);
                let bytes = std::fs::read(&path).map_err(io_err(&path))?;
                if &sha256_hex(&bytes) != digest {
                    return Err(corrupt("digest mismatch for routing model".into()));
                }
                Some(serde_json::from_slice(&bytes).map_err(|e| corrupt(e.to_string()))?)
            }
        };
        Ok(Some((manifest, stores, routing)))
    }

    /// Writes the engine's stores and routing model. The manifest goes last
    /// so a partially written entry is never treated as a hit.
    pub fn save(&self, key: &str, embedder_id: &str, engine: &Engine) -> Result<Manifest, CacheError> {
        let dir = self.entry_dir(key);
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let mut stores = Vec::new();
        for (name, store) in engine.stores() {
            let bytes = serde_json::to_vec(store.as_ref()).map_err(|e| CacheError::Corrupt(key.into(), e.to_string()))?;
            let path = dir.join(store_file(name));
            std::fs::write(&path, &bytes).map_err(io_err(&path))?;
            stores.push(StoreDigest { source: name.clone(), chunk_count: store.chunks().len(), sha256: sha256_hex(&bytes) });
        }
        let routing_sha256 = match engine.routing_model() {
            None => None,
            Some(model) => {
                let bytes = serde_json::to_vec(model).map_err(|e| CacheError::Corrupt(key.into(), e.to_string()))?;
                let path = dir.join(ROUTING);
                std::fs::write(&path, &bytes).map_err(io_err(&path))?;
                Some(sha256_hex(&bytes))
            }
        };
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            key: key.to_string(),
            embedder_id: embedder_id.to_string(),
            stores,
            routing_sha256,
        };
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, text).map_err(io_err(&path))?;
        Ok(manifest)
    }
}

fn store_file(source: &str) -> String {
    let safe: String = source.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
    format!("store-{safe}.json")
}

/// Builds an engine from a config file, reusing or filling the cache when
/// `cache_dir` is given. `customize` can swap in a backend or a clock.
pub async fn build_engine_cached(
    config_path: &Path,
    cache_dir: Option<&Path>,
    customize: impl FnOnce(EngineBuilder) -> EngineBuilder,
) -> Result<(Engine, Option<IngestReport>), CacheError> {
    let cfg = EngineConfig::load(config_path).map_err(|e| CacheError::Engine(e.into()))?;
    let base_dir = config_path.parent().map(Path::to_path_buf);
    let embedder = embedder_from_config(&cfg).map_err(|e| CacheError::Engine(e.into()))?;
    let embedder_id = embedder.id();
    let mut builder = Engine::builder(cfg.clone()).embedder(embedder);
    if let Some(dir) = &base_dir {
        builder = builder.base_dir(dir);
    }
    builder = customize(builder);
    let Some(cache_dir) = cache_dir else {
        return Ok((builder.build().await?, None));
    };
    let cache = IngestCache::new(cache_dir);
    let key = cache_key(&cfg, base_dir.as_deref(), &embedder_id)?;
    let entry_dir = cache.entry_dir(&key).display().to_string();
    let loaded = match cache.load(&key) {
        Ok(l) => l,
        Err(e) => {
            tracing::warn!("ignoring cache entry: {e}");
            None
        }
    };
    if let Some((manifest, stores, routing)) = loaded {
        for (name, store) in stores {
            builder = builder.store(name, store);
        }
        if let Some(model) = routing {
            builder = builder.routing_model(model);
        }
        let engine = builder.build().await?;
        let report = IngestReport {
            cache_hit: true,
            key,
            entry_dir,
            stores: manifest.stores,
            routing_sha256: manifest.routing_sha256,
        };
        return Ok((engine, Some(report)));
    }
    let engine = builder.build().await?;
    let manifest = cache.save(&key, &embedder_id, &engine)?;
    let report =
        IngestReport { cache_hit: false, key, entry_dir, stores: manifest.stores, routing_sha256: manifest.routing_sha256 };
    Ok((engine, Some(report)))
}
