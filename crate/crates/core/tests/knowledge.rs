use std::path::PathBuf;

use polyrag_core::config::{EngineConfig, SourceSpec};
use polyrag_core::knowledge::{ingest, ingest_files, ScoredChunk, SearchableStore, VectorStore};
use polyrag_core::llm::HashedEmbedder;
use polyrag_core::types::{KnowledgeChunk, SourceKind};
use proptest::prelude::*;

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn chunk(id: String, text: String, embedding: Option<Vec<f64>>) -> KnowledgeChunk {
    KnowledgeChunk {
        source_uri: format!("mem://{id}"),
        chunk_id: id,
        text,
        embedding,
        source_kind: SourceKind::Vdb,
        source_name: "mem".into(),
    }
}

fn unit(v: Vec<f64>) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 1e-6).then(|| v.into_iter().map(|x| x / n).collect())
}

fn ids(hits: Vec<ScoredChunk>) -> Vec<String> {
    hits.into_iter().map(|h| h.chunk.chunk_id).collect()
}

const WORDS: [&str; 8] = ["alpha", "beta", "gamma", "delta", "agent", "model", "tool", "query"];

fn store_strategy() -> impl Strategy<Value = (Vec<KnowledgeChunk>, Vec<f64>, String)> {
    (2usize..12).prop_flat_map(|dim| {
        let vec = prop::collection::vec(-1.0f64..1.0, dim).prop_filter_map("zero vector", unit);
        let text = prop::collection::vec(prop::sample::select(WORDS.to_vec()), 1..8).prop_map(|w| w.join(" "));
        (
            prop::collection::vec((text.clone(), vec.clone()), 1..40).prop_map(|docs| {
                docs.into_iter().enumerate().map(|(i, (t, e))| chunk(format!("c{i:03}"), t, Some(e))).collect()
            }),
            vec,
            text,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn dense_search_is_an_exhaustive_scan((chunks, q, _) in store_strategy(), n in 1usize..50) {
        let store = VectorStore::new(chunks.clone());
        let mut scan: Vec<(f64, String)> = chunks
            .iter()
            .map(|c| (c.embedding.as_ref().unwrap().iter().zip(&q).map(|(a, b)| a * b).sum(), c.chunk_id.clone()))
            .collect();
        scan.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        scan.truncate(n);
        let got = store.dense_search(&q, n);
        prop_assert_eq!(got.len(), scan.len());
        for (g, (s, id)) in got.iter().zip(&scan) {
            prop_assert!((g.score - s).abs() < 1e-12);
            prop_assert_eq!(&g.chunk.chunk_id, id);
        }
    }

    #[test]
    fn hybrid_boundaries_reproduce_single_modes((chunks, q, text) in store_strategy(), n in 1usize..20) {
        let store = VectorStore::new(chunks);
        prop_assert_eq!(ids(store.hybrid_search(&text, &q, n, 1.0)), ids(store.dense_search(&q, n)));
        prop_assert_eq!(ids(store.hybrid_search(&text, &q, n, 0.0)), ids(store.sparse_search(&text, n)));
    }

    #[test]
    fn hybrid_scores_stay_in_unit_range((chunks, q, text) in store_strategy(), alpha in 0.0f64..=1.0) {
        let store = VectorStore::new(chunks);
        for hit in store.hybrid_search(&text, &q, 10, alpha) {
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&hit.score));
        }
    }
}

#[test]
fn bm25_matches_the_reference_corpus() {
    let corpus = ["the cat sat on the mat", "dog chases the cat", "a quick brown fox", "cat cat cat naps", "the dog and the fox are friends"];
    let store = VectorStore::new(corpus.iter().enumerate().map(|(i, t)| chunk(format!("d{i}"), t.to_string(), None)).collect());
    let reference: [(&str, [f64; 5]); 3] = [
        ("cat", [0.4982320595008033, 0.5870258918870851, 0.0, 0.8849196280685909, 0.0]),
        ("the fox", [0.7016522494745041, 0.5870258918870851, 0.9534808030587029, 0.0, 1.4185313965072783]),
        ("dog cat", [0.4982320595008033, 1.540506694945788, 0.0, 0.8849196280685909, 0.7523559461635078]),
    ];
    for (query, expected) in reference {
        let hits = store.sparse_search(query, 10);
        assert_eq!(hits.len(), expected.iter().filter(|s| **s > 0.0).count());
        for h in hits {
            let doc: usize = h.chunk.chunk_id[1..].parse().unwrap();
            assert!((h.score - expected[doc]).abs() < 1e-9, "{query} d{doc}: {}", h.score);
        }
    }
}

#[tokio::test]
async fn ingestion_is_deterministic() {
    let cfg = EngineConfig::load(&configs_dir().join("agentscope-qa.json")).unwrap();
    let embedder = HashedEmbedder::new(64);
    for source in cfg.knowledge_sources.iter().filter(|s| matches!(s.spec, SourceSpec::Vdb { .. })) {
        let (a, stats) = ingest(source, Some(&configs_dir()), &embedder).await.unwrap();
        let (b, _) = ingest(source, Some(&configs_dir()), &embedder).await.unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(stats.chunk_count, a.len());
        assert!(a.len() > 0, "{} is empty", source.name);
        for c in a.chunks() {
            let e = c.embedding.as_ref().unwrap();
            assert!((e.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-9);
            assert_eq!(c.source_name, source.name);
        }
    }
}

#[tokio::test]
async fn identical_content_under_the_same_name_gives_identical_stores() {
    let cfg = EngineConfig::load(&configs_dir().join("toy-two-agents.json")).unwrap();
    let source = &cfg.knowledge_sources[0];
    let files = vec![("notes/a.md".to_string(), "First paragraph.\n\nSecond paragraph about bread.".to_string())];
    let embedder = HashedEmbedder::new(16);
    let (a, _) = ingest_files(source, &files, &embedder).await.unwrap();
    let (b, _) = ingest_files(source, &files, &embedder).await.unwrap();
    assert_eq!(a, b);
    let changed = vec![("notes/a.md".to_string(), "First paragraph.\n\nSecond paragraph about soup.".to_string())];
    let (c, _) = ingest_files(source, &changed, &embedder).await.unwrap();
    assert_ne!(a, c);
}
