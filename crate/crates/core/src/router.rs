//! Embedding-cluster routing.
//!
//! Each agent is summarized by the k-means centroids of its local chunk
//! embeddings, optionally blended with embedded manual mix-in texts:
//!
//! ```text
//! S = scale * ( w * max_j cos(q, mixin_j) + (1 - w) * max_i cos(q, centroid_i) )
//! ```
//!
//! The top-K agents by `S` are activated, ties going to the smaller agent id.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::llm::{Embedder, LlmError};
use crate::vector;

pub const MAX_KMEANS_ITERATIONS: usize = 100;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RouterError {
    #[error("k = {k} exceeds the number of points ({n})")]
    KTooLarge { k: usize, n: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error(transparent)]
    Embedding(#[from] LlmError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// Unit-normalized means of the assigned points.
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub iterations: usize,
    /// Sum of squared point-to-centroid distances after every assignment
    /// and update step.
    pub objective_history: Vec<f64>,
}

/// `clamp(floor(sqrt(n / 2)), 1, 16)`, never more than `n`.
pub fn default_cluster_count(n: usize) -> usize {
    ((n as f64 / 2.0).sqrt().floor() as usize).clamp(1, 16).min(n.max(1))
}

pub fn kmeans_objective(points: &[Vec<f64>], centroids: &[Vec<f64>], assignments: &[usize]) -> f64 {
    points.iter().zip(assignments).map(|(p, &a)| vector::squared_distance(p, &centroids[a])).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = vector::squared_distance(point, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| vector::squared_distance(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, d) in d2.iter().enumerate() {
                if *d <= 0.0 {
                    continue;
                }
                if target < *d {
                    pick = Some(i);
                    break;
                }
                target -= d;
            }
            // rounding can leave a residue past the last positive weight
            pick.unwrap_or_else(|| d2.iter().rposition(|d| *d > 0.0).unwrap())
        } else {
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(vector::squared_distance(p, &points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

/// Normalized mean of the members; the first member when the mean vanishes.
fn spherical_mean(points: &[Vec<f64>], members: &[usize]) -> Vec<f64> {
    let dim = points[members[0]].len();
    let mut sum = vec![0.0; dim];
    for &m in members {
        for (s, x) in sum.iter_mut().zip(&points[m]) {
            *s += x;
        }
    }
    vector::normalized(&sum).unwrap_or_else(|| points[members[0]].clone())
}

/// Recomputes centroids from assignments. Empty clusters take the point
/// farthest from its own centroid among clusters that can spare one.
fn update(points: &[Vec<f64>], k: usize, assignments: &mut [usize], centroids: &mut [Vec<f64>]) {
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &a) in assignments.iter().enumerate() {
        members[a].push(i);
    }
    for c in 0..k {
        if !members[c].is_empty() {
            centroids[c] = spherical_mean(points, &members[c]);
        }
    }
    for c in 0..k {
        if !members[c].is_empty() {
            continue;
        }
        let donor = (0..points.len())
            .filter(|&i| members[assignments[i]].len() > 1)
            .max_by(|&a, &b| {
                let da = vector::squared_distance(&points[a], &centroids[assignments[a]]);
                let db = vector::squared_distance(&points[b], &centroids[assignments[b]]);
                da.partial_cmp(&db).unwrap_or(Ordering::Equal).then(b.cmp(&a))
            });
        let Some(p) = donor else { continue };
        let old = assignments[p];
        members[old].retain(|&m| m != p);
        centroids[old] = spherical_mean(points, &members[old]);
        members[c].push(p);
        assignments[p] = c;
        centroids[c] = points[p].clone();
    }
}

/// Spherical Lloyd iterations with seeded k-means++ initialization. Stops
/// when no assignment changes or after [`MAX_KMEANS_ITERATIONS`].
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeansResult, RouterError> {
    if k == 0 {
        return Err(RouterError::ZeroK);
    }
    if k > points.len() {
        return Err(RouterError::KTooLarge { k, n: points.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(points, k, &mut rng);
    let mut assignments: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
    let mut objective_history = vec![kmeans_objective(points, &centroids, &assignments)];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < MAX_KMEANS_ITERATIONS {
        iterations += 1;
        update(points, k, &mut assignments, &mut centroids);
        objective_history.push(kmeans_objective(points, &centroids, &assignments));
        // Keep the current cluster unless another is strictly closer.
        let next: Vec<usize> = points
            .iter()
            .zip(&assignments)
            .map(|(p, &cur)| {
                let best = nearest(p, &centroids);
                if vector::squared_distance(p, &centroids[best]) < vector::squared_distance(p, &centroids[cur]) {
                    best
                } else {
                    cur
                }
            })
            .collect();
        if next == assignments {
            converged = true;
            break;
        }
        assignments = next;
        objective_history.push(kmeans_objective(points, &centroids, &assignments));
    }
    if !converged {
        update(points, k, &mut assignments, &mut centroids);
        objective_history.push(kmeans_objective(points, &centroids, &assignments));
    }
    Ok(KMeansResult { centroids, assignments, iterations, objective_history })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSynopsis {
    pub agent_id: String,
    pub centroids: Vec<Vec<f64>>,
    pub mixin_vectors: Vec<Vec<f64>>,
    pub mixin_weight: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RoutingModel {
    pub agents: Vec<AgentSynopsis>,
}

fn best_similarity(query_vec: &[f64], vectors: &[Vec<f64>]) -> f64 {
    vectors.iter().map(|v| vector::dot(query_vec, v)).fold(f64::NEG_INFINITY, f64::max)
}

/// Blended, scaled routing score of one agent. An absent side contributes 0
/// (its weight is 0 or 1 by construction).
pub fn agent_score(query_vec: &[f64], agent: &AgentSynopsis) -> f64 {
    let w = agent.mixin_weight;
    let mixin = if agent.mixin_vectors.is_empty() || w == 0.0 { 0.0 } else { best_similarity(query_vec, &agent.mixin_vectors) };
    let local = if agent.centroids.is_empty() || w == 1.0 { 0.0 } else { best_similarity(query_vec, &agent.centroids) };
    agent.scale * (w * mixin + (1.0 - w) * local)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentScore {
    pub agent_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteDecision {
    /// All agents, by descending score then ascending id.
    pub scores: Vec<AgentScore>,
    pub activated: Vec<String>,
    /// True when a score threshold deactivated everyone and all agents were
    /// activated instead.
    pub fallback_all: bool,
}

impl RoutingModel {
    pub fn agent(&self, id: &str) -> Option<&AgentSynopsis> {
        self.agents.iter().find(|a| a.agent_id == id)
    }

    pub fn ranked_scores(&self, query_vec: &[f64]) -> Vec<AgentScore> {
        let mut scores: Vec<AgentScore> = self
            .agents
            .iter()
            .map(|a| AgentScore { agent_id: a.agent_id.clone(), score: agent_score(query_vec, a) })
            .collect();
        scores.sort_by(|a, b| {
            b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal).then_with(|| a.agent_id.cmp(&b.agent_id))
        });
        scores
    }

    /// Top-`k` agents, optionally dropping those under `min_score`. Never
    /// activates zero agents.
    pub fn decide(&self, query_vec: &[f64], k: usize, min_score: Option<f64>) -> RouteDecision {
        let scores = self.ranked_scores(query_vec);
        let mut activated: Vec<String> = scores
            .iter()
            .filter(|s| min_score.map_or(true, |t| s.score >= t))
            .take(k.max(1))
            .map(|s| s.agent_id.clone())
            .collect();
        let fallback_all = activated.is_empty() && !scores.is_empty();
        if fallback_all {
            activated = scores.iter().map(|s| s.agent_id.clone()).collect();
        }
        RouteDecision { scores, activated, fallback_all }
    }
}

/// Ordered ids of the top-`k` agents.
pub fn route(query_vec: &[f64], model: &RoutingModel, k: usize) -> Vec<String> {
    model.decide(query_vec, k, None).activated
}

/// Local knowledge of one source, to be clustered separately.
#[derive(Debug, Clone)]
pub struct LocalKnowledge {
    pub embeddings: Vec<Vec<f64>>,
    /// Cluster count; [`default_cluster_count`] when `None`.
    pub cluster_count: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct AgentRoutingInput {
    pub agent_id: String,
    pub local: Vec<LocalKnowledge>,
    pub mixin_texts: Vec<String>,
    pub mixin_weight: f64,
    pub scale: f64,
}

/// Clusters every agent's local knowledge and embeds its mix-in texts with
/// the same embedder used for chunks.
pub async fn build_routing_model(
    inputs: &[AgentRoutingInput],
    embedder: &dyn Embedder,
    seed: u64,
) -> Result<RoutingModel, RouterError> {
    let mut agents = Vec::with_capacity(inputs.len());
    for input in inputs {
        let mut centroids = Vec::new();
        for local in &input.local {
            if local.embeddings.is_empty() {
                continue;
            }
            let n = local.embeddings.len();
            let k = local.cluster_count.unwrap_or_else(|| default_cluster_count(n)).min(n);
            centroids.extend(kmeans(&local.embeddings, k, seed)?.centroids);
        }
        let mixin_vectors = if input.mixin_texts.is_empty() { Vec::new() } else { embedder.embed(&input.mixin_texts).await? };
        let mixin_weight = match (centroids.is_empty(), mixin_vectors.is_empty()) {
            (true, _) => 1.0,
            (false, true) => 0.0,
            (false, false) => input.mixin_weight,
        };
        agents.push(AgentSynopsis {
            agent_id: input.agent_id.clone(),
            centroids,
            mixin_vectors,
            mixin_weight,
            scale: input.scale,
        });
    }
    Ok(RoutingModel { agents })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::HashedEmbedder;

    fn unit(v: &[f64]) -> Vec<f64> {
        vector::normalized(v).unwrap()
    }

    fn synopsis(id: &str, centroids: Vec<Vec<f64>>, mixins: Vec<Vec<f64>>, w: f64, scale: f64) -> AgentSynopsis {
        AgentSynopsis { agent_id: id.into(), centroids, mixin_vectors: mixins, mixin_weight: w, scale }
    }

    #[test]
    fn k_one_is_normalized_mean() {
        let pts = vec![unit(&[1.0, 0.0, 0.2]), unit(&[0.3, 1.0, 0.0]), unit(&[0.0, 0.4, 1.0])];
        let r = kmeans(&pts, 1, 7).unwrap();
        let mut sum = vec![0.0; 3];
        for p in &pts {
            for (s, x) in sum.iter_mut().zip(p) {
                *s += x;
            }
        }
        let expected = unit(&sum);
        for (a, b) in r.centroids[0].iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn k_too_large() {
        let pts = vec![unit(&[1.0, 0.0]); 3];
        assert_eq!(kmeans(&pts, 5, 1), Err(RouterError::KTooLarge { k: 5, n: 3 }));
    }

    #[test]
    fn default_k_rule() {
        assert_eq!(default_cluster_count(50), 5);
        assert_eq!(default_cluster_count(1), 1);
        assert_eq!(default_cluster_count(3), 1);
        assert_eq!(default_cluster_count(10_000), 16);
    }

    #[test]
    fn empty_cluster_is_reseeded() {
        // duplicates make k-means++ pick the same location twice
        let pts = vec![unit(&[1.0, 0.0]), unit(&[1.0, 0.0]), unit(&[0.0, 1.0])];
        let r = kmeans(&pts, 3, 3).unwrap();
        let mut counts = vec![0; 3];
        for &a in &r.assignments {
            counts[a] += 1;
        }
        assert!(counts.iter().all(|&c| c == 1), "{counts:?}");
    }

    #[test]
    fn score_examples() {
        let a = synopsis("a", vec![vec![1.0, 0.0]], vec![], 0.0, 1.0);
        assert_eq!(agent_score(&[1.0, 0.0], &a), 1.0);

        // best mix-in cos 0.8, best centroid cos 0.4
        let q = vec![1.0, 0.0];
        let b = synopsis("b", vec![vec![0.4, (1.0f64 - 0.16).sqrt()]], vec![vec![0.8, 0.6]], 0.5, 1.0);
        assert!((agent_score(&q, &b) - 0.6).abs() < 1e-12);
        let c = AgentSynopsis { scale: 1.5, ..b };
        assert!((agent_score(&q, &c) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn route_examples() {
        let single = RoutingModel { agents: vec![synopsis("only", vec![vec![0.0, 1.0]], vec![], 0.0, 1.0)] };
        assert_eq!(route(&[1.0, 0.0], &single, 2), vec!["only"]);

        let a = synopsis("A", vec![vec![1.0, 0.0]], vec![], 0.0, 1.0);
        let b = synopsis("B", vec![vec![0.0, 1.0]], vec![], 0.0, 1.0);
        let model = RoutingModel { agents: vec![a.clone(), b.clone()] };
        assert_eq!(route(&[1.0, 0.0], &model, 1), vec!["A"]);

        // S_A = 0.8, S_B = 0.6 * 1.5 = 0.9
        let scaled = RoutingModel { agents: vec![a, AgentSynopsis { scale: 1.5, ..b }] };
        assert_eq!(route(&[0.8, 0.6], &scaled, 1), vec!["B"]);
    }

    #[test]
    fn ties_go_to_smaller_id() {
        let model = RoutingModel {
            agents: vec![
                synopsis("zeta", vec![vec![1.0, 0.0]], vec![], 0.0, 1.0),
                synopsis("alpha", vec![vec![1.0, 0.0]], vec![], 0.0, 1.0),
            ],
        };
        assert_eq!(route(&[1.0, 0.0], &model, 2), vec!["alpha", "zeta"]);
    }

    #[test]
    fn threshold_falls_back_to_all() {
        let model = RoutingModel {
            agents: vec![
                synopsis("a", vec![vec![1.0, 0.0]], vec![], 0.0, 1.0),
                synopsis("b", vec![vec![0.0, 1.0]], vec![], 0.0, 1.0),
            ],
        };
        let d = model.decide(&[1.0, 0.0], 2, Some(0.5));
        assert_eq!(d.activated, vec!["a"]);
        let d = model.decide(&[-1.0, 0.0], 2, Some(0.5));
        assert!(d.fallback_all);
        assert_eq!(d.activated, vec!["b", "a"]);
    }

    #[tokio::test]
    async fn build_model_conventions() {
        let emb = HashedEmbedder::new(16);
        let one = emb.embed_one("msghub docs").unwrap();
        let inputs = vec![
            AgentRoutingInput {
                agent_id: "local".into(),
                local: vec![LocalKnowledge { embeddings: vec![one.clone()], cluster_count: None }],
                mixin_texts: vec![],
                mixin_weight: 0.5,
                scale: 1.0,
            },
            AgentRoutingInput {
                agent_id: "online".into(),
                local: vec![],
                mixin_texts: vec!["olympic results".into(), "medal table".into()],
                mixin_weight: 0.5,
                scale: 1.0,
            },
        ];
        let model = build_routing_model(&inputs, &emb, 42).await.unwrap();
        let local = model.agent("local").unwrap();
        assert_eq!(local.centroids.len(), 1);
        assert!(local.centroids[0].iter().zip(&one).all(|(a, b)| (a - b).abs() < 1e-12));
        assert_eq!(local.mixin_weight, 0.0);
        let online = model.agent("online").unwrap();
        assert!(online.centroids.is_empty());
        assert_eq!(online.mixin_vectors.len(), 2);
        assert_eq!(online.mixin_weight, 1.0);
        assert_eq!(build_routing_model(&inputs, &emb, 42).await.unwrap(), model);
    }
}
