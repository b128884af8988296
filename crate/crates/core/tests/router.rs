use polyrag_core::router::{agent_score, kmeans, kmeans_objective, route, AgentSynopsis, RouterError, RoutingModel};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if v.iter().map(|x| x * x).sum::<f64>() > 1e-6 {
            return unit(v);
        }
    }
}

/// 2 to 8 agents over one dimension. Some agents lack centroids (w = 1) or
/// mix-ins (w = 0), and a few are exact copies under another id to force ties.
fn random_model(rng: &mut ChaCha8Rng) -> (RoutingModel, usize) {
    let dim = rng.gen_range(8..=64);
    let n = rng.gen_range(2..=8);
    let mut agents: Vec<AgentSynopsis> = Vec::new();
    for i in 0..n {
        if i > 0 && rng.gen_bool(0.15) {
            let mut copy = agents[rng.gen_range(0..agents.len())].clone();
            copy.agent_id = format!("agent-{i:02}");
            agents.push(copy);
            continue;
        }
        let shape = rng.gen_range(0..4);
        let centroids: Vec<Vec<f64>> =
            if shape == 0 { vec![] } else { (0..rng.gen_range(1..=16)).map(|_| random_unit(rng, dim)).collect() };
        let mixins: Vec<Vec<f64>> =
            if shape == 1 || (shape != 0 && rng.gen_bool(0.5)) { vec![] } else { (0..rng.gen_range(1..=4)).map(|_| random_unit(rng, dim)).collect() };
        let w = if centroids.is_empty() {
            1.0
        } else if mixins.is_empty() {
            0.0
        } else {
            rng.gen_range(0.0..=1.0)
        };
        agents.push(AgentSynopsis {
            agent_id: format!("agent-{i:02}"),
            centroids,
            mixin_vectors: mixins,
            mixin_weight: w,
            scale: rng.gen_range(0.2..3.0),
        });
    }
    // Ids are compared as strings, so shuffle to keep order-of-insertion from mattering.
    for i in (1..agents.len()).rev() {
        agents.swap(i, rng.gen_range(0..=i));
    }
    (RoutingModel { agents }, dim)
}

fn naive_cos(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    dot / (na.sqrt() * nb.sqrt())
}

fn oracle_scores(q: &[f64], model: &RoutingModel) -> Vec<(String, f64)> {
    model
        .agents
        .iter()
        .map(|a| {
            let mut best_mix = f64::NEG_INFINITY;
            for m in &a.mixin_vectors {
                best_mix = best_mix.max(naive_cos(q, m));
            }
            let mut best_cen = f64::NEG_INFINITY;
            for c in &a.centroids {
                best_cen = best_cen.max(naive_cos(q, c));
            }
            let blend = if a.centroids.is_empty() {
                best_mix
            } else if a.mixin_vectors.is_empty() {
                best_cen
            } else {
                a.mixin_weight * best_mix + (1.0 - a.mixin_weight) * best_cen
            };
            (a.agent_id.clone(), a.scale * blend)
        })
        .collect()
}

/// Repeated selection of the best remaining agent, no sorting.
fn oracle_route(q: &[f64], model: &RoutingModel, k: usize) -> Vec<String> {
    let mut remaining = oracle_scores(q, model);
    let mut out = Vec::new();
    while out.len() < k && !remaining.is_empty() {
        let mut best = 0;
        for i in 1..remaining.len() {
            let (id, s) = &remaining[i];
            let (bid, bs) = &remaining[best];
            if s > bs || (s == bs && id < bid) {
                best = i;
            }
        }
        out.push(remaining.remove(best).0);
    }
    out
}

fn rank_of(list: &[String], id: &str) -> usize {
    list.iter().position(|x| x == id).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn route_matches_brute_force(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (model, dim) = random_model(&mut rng);
        let q = random_unit(&mut rng, dim);
        for k in 1..=model.agents.len() + 1 {
            prop_assert_eq!(route(&q, &model, k), oracle_route(&q, &model, k));
        }
        for a in &model.agents {
            let oracle = oracle_scores(&q, &model).into_iter().find(|(id, _)| id == &a.agent_id).unwrap().1;
            prop_assert!((agent_score(&q, a) - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_scaling_keeps_the_ranking(seed in any::<u64>(), c in 0.05f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (model, dim) = random_model(&mut rng);
        let q = random_unit(&mut rng, dim);
        let mut scaled = model.clone();
        for a in &mut scaled.agents {
            a.scale *= c;
        }
        let n = model.agents.len();
        prop_assert_eq!(route(&q, &model, n), route(&q, &scaled, n));
    }

    /// Raising one agent's scale never lowers its rank while its blended
    /// similarity is non-negative. A negative blend is scaled further down by
    /// construction.
    #[test]
    fn raising_one_scale_never_lowers_its_rank(seed in any::<u64>(), factor in 1.0f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (model, dim) = random_model(&mut rng);
        let q = random_unit(&mut rng, dim);
        let n = model.agents.len();
        let target = rng.gen_range(0..n);
        let id = model.agents[target].agent_id.clone();
        prop_assume!(agent_score(&q, &model.agents[target]) >= 0.0);
        let mut raised = model.clone();
        raised.agents[target].scale *= factor;
        let before = rank_of(&route(&q, &model, n), &id);
        let after = rank_of(&route(&q, &raised, n), &id);
        prop_assert!(after <= before, "rank {} -> {}", before, after);
    }

    #[test]
    fn pure_mixin_routing_ignores_centroids(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut model, dim) = random_model(&mut rng);
        for a in &mut model.agents {
            if a.mixin_vectors.is_empty() {
                a.mixin_vectors.push(random_unit(&mut rng, dim));
            }
            a.mixin_weight = 1.0;
        }
        let q = random_unit(&mut rng, dim);
        let mut moved = model.clone();
        for a in &mut moved.agents {
            let count = rng.gen_range(0..=16);
            a.centroids = (0..count).map(|_| random_unit(&mut rng, dim)).collect();
        }
        for k in 1..=model.agents.len() {
            prop_assert_eq!(route(&q, &model, k), route(&q, &moved, k));
        }
    }
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| random_unit(rng, dim)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn kmeans_objective_never_increases(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..60);
        let dim = rng.gen_range(2..16);
        let k = rng.gen_range(1..=n.min(8));
        let points = random_points(&mut rng, n, dim);
        let r = kmeans(&points, k, seed).unwrap();
        prop_assert!(!r.objective_history.is_empty());
        for w in r.objective_history.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9, "{:?}", r.objective_history);
        }
        prop_assert_eq!(r.centroids.len(), k);
        prop_assert!(r.iterations <= 100);
        for c in &r.centroids {
            prop_assert!((c.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let last = *r.objective_history.last().unwrap();
        prop_assert!((kmeans_objective(&points, &r.centroids, &r.assignments) - last).abs() < 1e-9);
    }

    #[test]
    fn kmeans_is_deterministic_per_seed(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = random_points(&mut rng, 30, 6);
        prop_assert_eq!(kmeans(&points, 4, seed).unwrap(), kmeans(&points, 4, seed).unwrap());
    }
}

#[test]
fn single_cluster_is_the_normalized_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let n = rng.gen_range(1..40);
        let dim = rng.gen_range(2..32);
        let points = random_points(&mut rng, n, dim);
        let mut sum = vec![0.0; dim];
        for p in &points {
            for (s, x) in sum.iter_mut().zip(p) {
                *s += x;
            }
        }
        let expected = unit(sum);
        let r = kmeans(&points, 1, 3).unwrap();
        assert!(r.assignments.iter().all(|&a| a == 0));
        for (a, b) in r.centroids[0].iter().zip(&expected) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

/// Objective of the best partition of 4 points into two non-empty clusters,
/// found by trying all 7 of them.
fn best_two_partition(points: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut best = (vec![], f64::INFINITY);
    for mask in 1u32..(1 << (points.len() - 1)) {
        let labels: Vec<usize> = (0..points.len()).map(|i| ((mask >> i) & 1) as usize).collect();
        let centroid = |label: usize| {
            let mut s = vec![0.0; points[0].len()];
            for (p, _) in points.iter().zip(&labels).filter(|(_, &l)| l == label) {
                for (a, x) in s.iter_mut().zip(p) {
                    *a += x;
                }
            }
            unit(s)
        };
        let cs = [centroid(0), centroid(1)];
        let obj: f64 = points
            .iter()
            .zip(&labels)
            .map(|(p, &l)| p.iter().zip(&cs[l]).map(|(x, c)| (x - c) * (x - c)).sum::<f64>())
            .sum();
        if obj < best.1 {
            best = (labels, obj);
        }
    }
    best
}

fn same_partition(a: &[usize], b: &[usize]) -> bool {
    (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
}

#[test]
fn separable_four_points_match_the_exhaustive_partition() {
    let points: Vec<Vec<f64>> =
        [[0.0, 1.0], [0.1, 1.0], [1.0, 0.0], [1.0, 0.1]].iter().map(|p| unit(p.to_vec())).collect();
    let (labels, obj) = best_two_partition(&points);
    assert!(same_partition(&labels, &[0, 0, 1, 1]));
    for seed in 0..50 {
        let r = kmeans(&points, 2, seed).unwrap();
        assert!(same_partition(&r.assignments, &labels), "seed {seed}: {:?}", r.assignments);
        assert!((kmeans_objective(&points, &r.centroids, &r.assignments) - obj).abs() < 1e-12);
        let near = |target: [f64; 2]| r.centroids.iter().any(|c| c[0] * target[0] + c[1] * target[1] > 0.99);
        assert!(near([0.0, 1.0]) && near([1.0, 0.0]));
    }
}

#[test]
fn too_many_clusters_is_rejected() {
    let points: Vec<Vec<f64>> = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]];
    assert_eq!(kmeans(&points, 5, 1), Err(RouterError::KTooLarge { k: 5, n: 3 }));
}
