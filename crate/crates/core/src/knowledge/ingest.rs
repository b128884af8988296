use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tokio::time::Instant;
use walkdir::WalkDir;

use super::{chunk_document, KnowledgeError, VectorStore};
use crate::config::{resolve_path, SourceConfig, SourceSpec};
use crate::llm::Embedder;
use crate::types::{KnowledgeChunk, SourceKind};

const EMBED_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestStats {
    pub source: String,
    pub files: usize,
    pub chunk_count: usize,
    pub embedding_dim: usize,
    pub elapsed_ms: u64,
}

/// Lists the files of a vector-store source in a stable order, with the
/// display path (relative to `base_dir` when possible) used for ids and URIs.
pub fn source_files(source: &SourceConfig, base_dir: Option<&Path>) -> Result<Vec<(PathBuf, String)>, KnowledgeError> {
    let SourceSpec::Vdb { paths, extensions, .. } = &source.spec else {
        return Err(KnowledgeError::InvalidSource(format!("{} is not a vector-store source", source.name)));
    };
    let mut files = Vec::new();
    for p in paths {
        let root = resolve_path(base_dir, p);
        if !root.exists() {
            return Err(KnowledgeError::UnreadablePath(root.display().to_string()));
        }
        if root.is_file() {
            files.push((root.clone(), p.clone()));
            continue;
        }
        for entry in WalkDir::new(&root).sort_by_file_name() {
            let entry = entry.map_err(|e| KnowledgeError::UnreadablePath(e.to_string()))?;
            if !entry.file_type().is_file() {
                continue;
            }
            let ext = entry.path().extension().and_then(|e| e.to_str()).unwrap_or_default();
            if !extensions.iter().any(|x| x.eq_ignore_ascii_case(ext)) {
                continue;
            }
            let rel = entry.path().strip_prefix(&root).unwrap_or(entry.path());
            let display = Path::new(p).join(rel).to_string_lossy().replace('\\', "/");
            files.push((entry.path().to_path_buf(), display));
        }
    }
    Ok(files)
}

/// Builds the indexed store of a vector-store source from its files.
pub async fn ingest(
    source: &SourceConfig,
    base_dir: Option<&Path>,
    embedder: &dyn Embedder,
) -> Result<(VectorStore, IngestStats), KnowledgeError> {
    let files = source_files(source, base_dir)?;
    let mut contents = Vec::with_capacity(files.len());
    for (path, display) in files {
        let text =
            std::fs::read_to_string(&path).map_err(|_| KnowledgeError::UnreadablePath(path.display().to_string()))?;
        contents.push((display, text));
    }
    ingest_files(source, &contents, embedder).await
}

/// Ingests already-loaded `(display path, content)` pairs.
pub async fn ingest_files(
    source: &SourceConfig,
    files: &[(String, String)],
    embedder: &dyn Embedder,
) -> Result<(VectorStore, IngestStats), KnowledgeError> {
    let started = Instant::now();
    let SourceSpec::Vdb { chunking, .. } = &source.spec else {
        return Err(KnowledgeError::InvalidSource(format!("{} is not a vector-store source", source.name)));
    };
    let mut chunks = Vec::new();
    for (display, text) in files {
        for (i, piece) in chunk_document(text, chunking).into_iter().enumerate() {
            chunks.push(KnowledgeChunk {
                chunk_id: format!("{}:{}#{}", source.name, display, i),
                text: piece,
                embedding: None,
                source_uri: display.clone(),
                source_kind: SourceKind::Vdb,
                source_name: source.name.clone(),
            });
        }
    }
    // Pieces without any alphanumeric token cannot be embedded.
    chunks.retain(|c| c.text.chars().any(char::is_alphanumeric));
    for batch in chunks.chunks_mut(EMBED_BATCH) {
        let texts: Vec<String> = batch.iter().map(|c| c.text.clone()).collect();
        let vectors = embedder.embed(&texts).await?;
        for (c, v) in batch.iter_mut().zip(vectors) {
            c.embedding = Some(v);
        }
    }
    let stats = IngestStats {
        source: source.name.clone(),
        files: files.len(),
        chunk_count: chunks.len(),
        embedding_dim: embedder.dim(),
        elapsed_ms: started.elapsed().as_millis() as u64,
    };
    Ok((VectorStore::new(chunks), stats))
}
