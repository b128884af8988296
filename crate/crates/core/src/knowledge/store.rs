use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::llm::tokenize;
use crate::types::KnowledgeChunk;
use crate::vector;

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredChunk {
    pub chunk: KnowledgeChunk,
    pub score: f64,
}

/// Retrieval interface of a local knowledge store.
pub trait SearchableStore: Send + Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Embeddings of every chunk, used to build routing synopses.
    fn embeddings(&self) -> Vec<Vec<f64>>;

    fn dense_search(&self, query_vec: &[f64], n: usize) -> Vec<ScoredChunk>;

    fn sparse_search(&self, query: &str, n: usize) -> Vec<ScoredChunk>;

    fn hybrid_search(&self, query: &str, query_vec: &[f64], n: usize, alpha: f64) -> Vec<ScoredChunk>;
}

/// Exact in-memory store with a BM25 inverted index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorStore {
    chunks: Vec<KnowledgeChunk>,
    /// term -> (chunk position, term frequency), positions ascending.
    inverted_index: BTreeMap<String, Vec<(usize, u32)>>,
    doc_lengths: Vec<usize>,
    avg_doc_length: f64,
}

/// Descending by score, then ascending chunk id.
fn rank_order(a: &(usize, f64), b: &(usize, f64), chunks: &[KnowledgeChunk]) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| chunks[a.0].chunk_id.cmp(&chunks[b.0].chunk_id))
}

impl VectorStore {
    pub fn new(chunks: Vec<KnowledgeChunk>) -> Self {
        let mut inverted_index: BTreeMap<String, Vec<(usize, u32)>> = BTreeMap::new();
        let mut doc_lengths = Vec::with_capacity(chunks.len());
        for (pos, chunk) in chunks.iter().enumerate() {
            let tokens = tokenize(&chunk.text);
            doc_lengths.push(tokens.len());
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            for (term, count) in tf {
                inverted_index.entry(term).or_default().push((pos, count));
            }
        }
        let avg_doc_length =
            if chunks.is_empty() { 0.0 } else { doc_lengths.iter().sum::<usize>() as f64 / chunks.len() as f64 };
        VectorStore { chunks, inverted_index, doc_lengths, avg_doc_length }
    }

    pub fn chunks(&self) -> &[KnowledgeChunk] {
        &self.chunks
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn doc_length(&self, pos: usize) -> usize {
        self.doc_lengths[pos]
    }

    pub fn postings(&self, term: &str) -> &[(usize, u32)] {
        self.inverted_index.get(term).map(Vec::as_slice).unwrap_or(&[])
    }

    /// `ln(1 + (N - n_t + 0.5) / (n_t + 0.5))`
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.chunks.len() as f64;
        let nt = self.postings(term).len() as f64;
        (1.0 + (n - nt + 0.5) / (nt + 0.5)).ln()
    }

    /// Unique query terms, in first-occurrence order. Repeating a term in
    /// the query does not change its contribution.
    fn query_terms(query: &str) -> Vec<String> {
        let mut seen = BTreeSet::new();
        tokenize(query).into_iter().filter(|t| seen.insert(t.clone())).collect()
    }

    fn bm25_term(&self, tf: u32, pos: usize, idf: f64) -> f64 {
        let tf = f64::from(tf);
        let dl = self.doc_lengths[pos] as f64;
        let norm = if self.avg_doc_length > 0.0 { dl / self.avg_doc_length } else { 0.0 };
        idf * tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * (1.0 - BM25_B + BM25_B * norm))
    }

    /// BM25 scores of every chunk with at least one matching term.
    fn bm25_all(&self, query: &str) -> HashMap<usize, f64> {
        let mut scores: HashMap<usize, f64> = HashMap::new();
        for term in Self::query_terms(query) {
            let idf = self.idf(&term);
            for &(pos, tf) in self.postings(&term) {
                *scores.entry(pos).or_default() += self.bm25_term(tf, pos, idf);
            }
        }
        scores
    }

    fn top(&self, mut scored: Vec<(usize, f64)>, n: usize) -> Vec<(usize, f64)> {
        scored.sort_by(|a, b| rank_order(a, b, &self.chunks));
        scored.truncate(n);
        scored
    }

    fn dense_ranked(&self, query_vec: &[f64], n: usize) -> Vec<(usize, f64)> {
        let scored = self
            .chunks
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.embedding.as_ref().map(|e| (i, vector::dot(e, query_vec))))
            .collect();
        self.top(scored, n)
    }

    fn sparse_ranked(&self, query: &str, n: usize) -> Vec<(usize, f64)> {
        let scored = self.bm25_all(query).into_iter().filter(|(_, s)| *s > 0.0).collect();
        self.top(scored, n)
    }

    fn materialize(&self, ranked: Vec<(usize, f64)>) -> Vec<ScoredChunk> {
        ranked.into_iter().map(|(i, score)| ScoredChunk { chunk: self.chunks[i].clone(), score }).collect()
    }
}

/// Maps values to [0, 1]; a degenerate range maps everything to 1.
fn min_max(values: &[f64]) -> Vec<f64> {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return vec![1.0; values.len()];
    }
    values.iter().map(|v| (v - min) / (max - min)).collect()
}

impl SearchableStore for VectorStore {
    fn len(&self) -> usize {
        self.chunks.len()
    }

    fn embeddings(&self) -> Vec<Vec<f64>> {
        self.chunks.iter().filter_map(|c| c.embedding.clone()).collect()
    }

    fn dense_search(&self, query_vec: &[f64], n: usize) -> Vec<ScoredChunk> {
        self.materialize(self.dense_ranked(query_vec, n))
    }

    fn sparse_search(&self, query: &str, n: usize) -> Vec<ScoredChunk> {
        self.materialize(self.sparse_ranked(query, n))
    }

    /// Weighted sum of per-query min-max normalized dense and BM25 scores
    /// over the union of each side's top-2n candidates. A side with zero
    /// weight contributes no candidates.
    fn hybrid_search(&self, query: &str, query_vec: &[f64], n: usize, alpha: f64) -> Vec<ScoredChunk> {
        let pool = n.saturating_mul(2);
        let mut candidates: BTreeSet<usize> = BTreeSet::new();
        if alpha > 0.0 {
            candidates.extend(self.dense_ranked(query_vec, pool).into_iter().map(|(i, _)| i));
        }
        if alpha < 1.0 {
            candidates.extend(self.sparse_ranked(query, pool).into_iter().map(|(i, _)| i));
        }
        if candidates.is_empty() {
            return Vec::new();
        }
        let ids: Vec<usize> = candidates.into_iter().collect();
        let bm25 = self.bm25_all(query);
        let dense: Vec<f64> = ids
            .iter()
            .map(|&i| self.chunks[i].embedding.as_ref().map_or(0.0, |e| vector::dot(e, query_vec)))
            .collect();
        let sparse: Vec<f64> = ids.iter().map(|i| bm25.get(i).copied().unwrap_or(0.0)).collect();
        let (dn, sn) = (min_max(&dense), min_max(&sparse));
        let fused = ids.iter().enumerate().map(|(k, &i)| (i, alpha * dn[k] + (1.0 - alpha) * sn[k])).collect();
        self.materialize(self.top(fused, n))
    }
}
