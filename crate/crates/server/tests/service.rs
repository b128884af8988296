use std::path::PathBuf;
use std::process::Command;
use std::sync::Arc;

use polyrag_core::llm::{MockBackend, MockRule, MockScript};
use polyrag_core::pipeline::Engine;
use polyrag_core::types::{Role, StepClock};
use polyrag_server::cache::build_engine_cached;
use polyrag_server::{check_grammar, parse_sse, router, AppState, ErrorCode, ServiceEvent, SessionStore, SessionView};

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn toy_script(sessions: usize) -> MockScript {
    let mut script = MockScript::new("A general answer [1].")
        .rule(MockRule { unavailable: true, ..MockRule::new("Question: boom", "", 0) })
        .rule(MockRule { interrupt_after: Some(2), ..MockRule::new("Question: cut", "one two three four", 0) });
    for i in 0..sessions {
        script = script.rule(MockRule::new(format!("Question: s{i}-"), format!("reply for s{i} only"), 1));
    }
    script
}

async fn toy_engine(script: MockScript) -> Engine {
    let path = configs().join("toy-two-agents.json");
    let (engine, _) = build_engine_cached(&path, None, |b| b.backend(Arc::new(MockBackend::new(script))))
        .await
        .unwrap();
    engine
}

async fn spawn(state: AppState) -> (String, Arc<AppState>) {
    let state = Arc::new(state);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let app = router(state.clone());
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    (format!("http://{addr}"), state)
}

fn sessions() -> SessionStore {
    SessionStore::in_memory(Arc::new(StepClock::new(1_000, 1)))
}

async fn chat(client: &reqwest::Client, base: &str, session: Option<&str>, message: &str) -> Vec<ServiceEvent> {
    let body = match session {
        Some(id) => serde_json::json!({ "session_id": id, "message": message }),
        None => serde_json::json!({ "message": message }),
    };
    let resp = client.post(format!("{base}/v1/chat")).json(&body).send().await.unwrap();
    assert_eq!(resp.status(), 200);
    let ctype = resp.headers()["content-type"].to_str().unwrap().to_string();
    assert!(ctype.starts_with("text/event-stream"), "{ctype}");
    parse_sse(&resp.text().await.unwrap()).unwrap()
}

fn tokens(events: &[ServiceEvent]) -> String {
    events
        .iter()
        .filter_map(|e| match e {
            ServiceEvent::Token { text } => Some(text.as_str()),
            _ => None,
        })
        .collect()
}

fn done_session(events: &[ServiceEvent]) -> String {
    match events.last() {
        Some(ServiceEvent::Done { session_id, .. }) => session_id.clone(),
        other => panic!("stream did not end with done: {other:?}"),
    }
}

fn error_code(events: &[ServiceEvent]) -> Option<ErrorCode> {
    events.iter().find_map(|e| match e {
        ServiceEvent::Error { code, .. } => Some(*code),
        _ => None,
    })
}

#[tokio::test]
async fn normal_turn_follows_grammar_and_records_transcript() {
    let (base, _) = spawn(AppState::new(toy_engine(toy_script(1)).await, sessions())).await;
    let client = reqwest::Client::new();
    let events = chat(&client, &base, None, "how long should bread rise").await;
    check_grammar(&events).unwrap();
    assert!(matches!(&events[0], ServiceEvent::Meta(m) if m.activated_agents == ["kitchen"]));
    let ServiceEvent::Done { session_id, trace: Some(trace) } = events.last().unwrap() else { panic!() };
    assert_eq!(trace.turn_index, 0);
    assert_eq!(trace.activated_agents, ["kitchen"]);

    let view: SessionView =
        client.get(format!("{base}/v1/sessions/{session_id}")).send().await.unwrap().json().await.unwrap();
    assert_eq!(view.messages.len(), 2);
    assert_eq!(view.messages[0].content, "how long should bread rise");
    assert_eq!(view.messages[1].role, Role::Assistant);
    assert_eq!(view.messages[1].content, tokens(&events));
}

#[tokio::test]
async fn unknown_session_in_strict_mode_is_an_error_event() {
    let (base, state) = spawn(AppState::new(toy_engine(toy_script(0)).await, sessions()).strict(true)).await;
    let client = reqwest::Client::new();
    let events = chat(&client, &base, Some("no-such-session"), "hello").await;
    check_grammar(&events).unwrap();
    assert_eq!(events.len(), 2);
    assert_eq!(error_code(&events), Some(ErrorCode::SessionNotFound));
    assert_eq!(done_session(&events), "no-such-session");
    assert!(state.sessions().is_empty().await);

    // Explicitly created sessions are accepted.
    let resp = client.post(format!("{base}/v1/sessions")).json(&serde_json::json!({})).send().await.unwrap();
    assert_eq!(resp.status(), 201);
    let view: SessionView = resp.json().await.unwrap();
    let events = chat(&client, &base, Some(&view.session_id), "hello").await;
    assert_eq!(error_code(&events), None);
}

#[tokio::test]
async fn lenient_mode_creates_named_sessions() {
    let (base, state) = spawn(AppState::new(toy_engine(toy_script(0)).await, sessions())).await;
    let client = reqwest::Client::new();
    let events = chat(&client, &base, Some("mine"), "hello").await;
    assert_eq!(done_session(&events), "mine");
    assert_eq!(state.sessions().get("mine").await.unwrap().lock().await.history.len(), 2);
}

#[tokio::test]
async fn zero_retrieved_chunks_yield_empty_citations() {
    let path = configs().join("olympic-bot.json");
    let (engine, _) = build_engine_cached(&path, None, |b| b).await.unwrap();
    let (base, _) = spawn(AppState::new(engine, sessions())).await;
    let events = chat(&reqwest::Client::new(), &base, None, "What is the capital of Peru?").await;
    check_grammar(&events).unwrap();
    let ServiceEvent::Done { trace: Some(trace), .. } = events.last().unwrap() else { panic!("{events:?}") };
    assert_eq!(trace.presented_chunks, 0);
    assert!(events.iter().any(|e| matches!(e, ServiceEvent::Citations { citations } if citations.is_empty())));
}

#[tokio::test]
async fn failures_emit_error_then_done_and_leave_history_alone() {
    let (base, state) = spawn(AppState::new(toy_engine(toy_script(0)).await, sessions())).await;
    let client = reqwest::Client::new();
    let ok = chat(&client, &base, Some("f"), "bread").await;
    check_grammar(&ok).unwrap();

    for (message, code) in [("boom now", ErrorCode::TurnFailed), ("cut short", ErrorCode::TurnFailed), ("   ", ErrorCode::EmptyMessage)] {
        let events = chat(&client, &base, Some("f"), message).await;
        check_grammar(&events).unwrap();
        assert_eq!(error_code(&events), Some(code), "{message}");
        assert!(!events.iter().any(|e| matches!(e, ServiceEvent::Citations { .. })));
    }
    let cut = chat(&client, &base, Some("f"), "cut again").await;
    assert_eq!(tokens(&cut), "one two ");
    assert_eq!(state.sessions().get("f").await.unwrap().lock().await.history.len(), 2);
}

#[tokio::test]
async fn malformed_body_is_a_json_error() {
    let (base, _) = spawn(AppState::new(toy_engine(toy_script(0)).await, sessions())).await;
    let resp = reqwest::Client::new()
        .post(format!("{base}/v1/chat"))
        .header("content-type", "application/json")
        .body("{\"msg\": 1}")
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 400);
    let v: serde_json::Value = resp.json().await.unwrap();
    assert_eq!(v["error"]["code"], "invalid_request");
}

#[tokio::test]
async fn hundred_requests_with_error_injection_keep_the_grammar() {
    let (base, _) = spawn(AppState::new(toy_engine(toy_script(4)).await, sessions()).strict(true)).await;
    let client = reqwest::Client::new();
    let mut ids = Vec::new();
    for _ in 0..4 {
        let v: SessionView =
            client.post(format!("{base}/v1/sessions")).send().await.unwrap().json().await.unwrap();
        ids.push(v.session_id);
    }
    let mut errors = 0;
    for i in 0..100 {
        let id = &ids[i % 4];
        let events = match i % 5 {
            0 => chat(&client, &base, Some(id), "boom").await,
            1 => chat(&client, &base, Some(id), &format!("cut {i}")).await,
            2 => chat(&client, &base, Some("ghost"), "hello").await,
            3 => chat(&client, &base, Some(id), "").await,
            _ => chat(&client, &base, Some(id), &format!("s{}- question {i}", i % 4)).await,
        };
        check_grammar(&events).unwrap_or_else(|e| panic!("request {i}: {e}: {events:?}"));
        errors += error_code(&events).is_some() as usize;
    }
    assert_eq!(errors, 80);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 8)]
async fn concurrent_sessions_never_share_history() {
    const N: usize = 32;
    let (base, _) = spawn(AppState::new(toy_engine(toy_script(N)).await, sessions())).await;
    let client = reqwest::Client::new();
    let tasks: Vec<_> = (0..N)
        .map(|i| {
            let client = client.clone();
            let base = base.clone();
            tokio::spawn(async move {
                let id = format!("sess-{i}");
                for turn in 0..3 {
                    let events = chat(&client, &base, Some(&id), &format!("s{i}- turn {turn}")).await;
                    check_grammar(&events).unwrap();
                    assert_eq!(tokens(&events), format!("reply for s{i} only"));
                }
                id
            })
        })
        .collect();
    for (i, t) in tasks.into_iter().enumerate() {
        let id = t.await.unwrap();
        let view: SessionView = client.get(format!("{base}/v1/sessions/{id}")).send().await.unwrap().json().await.unwrap();
        let contents: Vec<String> = view.messages.iter().map(|m| m.content.clone()).collect();
        let expected: Vec<String> = (0..3)
            .flat_map(|turn| [format!("s{i}- turn {turn}"), format!("reply for s{i} only")])
            .collect();
        assert_eq!(contents, expected);
    }
}

#[tokio::test]
async fn sources_health_sessions_and_reindex() {
    let factory: polyrag_server::EngineFactory =
        Arc::new(|| Box::pin(async { Ok(toy_engine(toy_script(0)).await) }));
    let state = AppState::new(toy_engine(toy_script(0)).await, sessions()).with_factory(factory);
    let (base, _) = spawn(state).await;
    let client = reqwest::Client::new();

    let sources: serde_json::Value = client.get(format!("{base}/v1/sources")).send().await.unwrap().json().await.unwrap();
    let names: Vec<&str> = sources.as_array().unwrap().iter().map(|s| s["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["cooking", "astronomy"]);
    assert_eq!(sources[0]["kind"], "vdb");
    assert!(sources[0]["chunk_count"].as_u64().unwrap() > 0);
    assert_eq!(sources[1]["agents"], serde_json::json!(["sky"]));

    chat(&client, &base, Some("a"), "hi").await;
    let health: serde_json::Value = client.get(format!("{base}/v1/health")).send().await.unwrap().json().await.unwrap();
    assert_eq!(health["status"], "ok");
    assert_eq!(health["sessions"], 1);

    let list: serde_json::Value = client.get(format!("{base}/v1/sessions")).send().await.unwrap().json().await.unwrap();
    assert_eq!(list[0]["session_id"], "a");
    assert_eq!(list[0]["message_count"], 2);

    let missing = client.get(format!("{base}/v1/sessions/zzz")).send().await.unwrap();
    assert_eq!(missing.status(), 404);

    let re = client.post(format!("{base}/v1/reindex")).send().await.unwrap();
    assert_eq!(re.status(), 200);
    let re: serde_json::Value = re.json().await.unwrap();
    assert_eq!(re["sources"], sources);
    // Sessions survive a reindex.
    let view: SessionView = client.get(format!("{base}/v1/sessions/a")).send().await.unwrap().json().await.unwrap();
    assert_eq!(view.messages.len(), 2);
}

#[tokio::test]
async fn sessions_are_logged_to_disk() {
    let dir = tempfile::tempdir().unwrap();
    let store = SessionStore::persistent(dir.path(), Arc::new(StepClock::new(0, 1))).unwrap();
    let (base, _) = spawn(AppState::new(toy_engine(toy_script(0)).await, store)).await;
    let client = reqwest::Client::new();
    chat(&client, &base, Some("logged"), "first").await;
    chat(&client, &base, Some("logged"), "boom").await;
    chat(&client, &base, Some("logged"), "second").await;
    let text = std::fs::read_to_string(dir.path().join("logged.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 4);
    let reopened = SessionStore::persistent(dir.path(), Arc::new(StepClock::new(0, 1))).unwrap();
    let h = reopened.get("logged").await.unwrap();
    let s = h.lock().await;
    assert_eq!(s.history.get(2).unwrap().content, "second");
}

#[tokio::test]
async fn ingest_cache_hits_on_unchanged_corpus() {
    let cache = tempfile::tempdir().unwrap();
    let path = configs().join("agentscope-qa.json");
    let (first_engine, first) = build_engine_cached(&path, Some(cache.path()), |b| b).await.unwrap();
    let (second_engine, second) = build_engine_cached(&path, Some(cache.path()), |b| b).await.unwrap();
    let (first, second) = (first.unwrap(), second.unwrap());
    assert!(!first.cache_hit);
    assert!(second.cache_hit);
    assert_eq!(first.key, second.key);
    assert_eq!(first.stores, second.stores);
    assert_eq!(first.routing_sha256, second.routing_sha256);
    assert!(second_engine.ingest_stats().is_empty());
    for (name, store) in first_engine.stores() {
        assert_eq!(store.as_ref(), second_engine.stores()[name].as_ref());
    }
    assert_eq!(first_engine.routing_model(), second_engine.routing_model());
}

#[tokio::test]
async fn cache_key_follows_corpus_content() {
    let dir = tempfile::tempdir().unwrap();
    let src = configs();
    std::fs::copy(src.join("toy-two-agents.json"), dir.path().join("toy.json")).unwrap();
    std::fs::create_dir_all(dir.path().join("data/toy")).unwrap();
    for f in ["cooking.md", "astronomy.md"] {
        std::fs::copy(src.join("data/toy").join(f), dir.path().join("data/toy").join(f)).unwrap();
    }
    let cache = dir.path().join("cache");
    let cfg = dir.path().join("toy.json");
    let (_, a) = build_engine_cached(&cfg, Some(&cache), |b| b).await.unwrap();
    std::fs::write(dir.path().join("data/toy/cooking.md"), "Whisk eggs with sugar.\n").unwrap();
    let (_, b) = build_engine_cached(&cfg, Some(&cache), |b| b).await.unwrap();
    let (a, b) = (a.unwrap(), b.unwrap());
    assert_ne!(a.key, b.key);
    assert!(!b.cache_hit);
    assert_eq!(a.stores.iter().find(|s| s.source == "astronomy"), b.stores.iter().find(|s| s.source == "astronomy"));
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_polyrag")).args(args).env("RUST_LOG", "error").output().unwrap()
}

#[test]
fn cli_ingest_twice_reports_cache_hit() {
    let cache = tempfile::tempdir().unwrap();
    let cfg = configs().join("modelscope-qa.json");
    let run = || {
        let out = cli(&["ingest", "--config", cfg.to_str().unwrap(), "--cache-dir", cache.path().to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    let first = run();
    let second = run();
    assert!(first.starts_with("cache miss"), "{first}");
    assert!(second.starts_with("cache hit"), "{second}");
    let digests = |s: &str| s.lines().filter(|l| l.starts_with("store ") || l.starts_with("routing ")).map(String::from).collect::<Vec<_>>();
    assert!(!digests(&first).is_empty());
    assert_eq!(digests(&first), digests(&second));
}

#[tokio::test]
async fn cli_route_matches_a_direct_score_computation() {
    let cfg = configs().join("toy-two-agents.json");
    let engine = toy_engine(toy_script(0)).await;
    let model = engine.routing_model().unwrap();
    for query in ["how long do I bake bread", "largest planet moons", "what about volcanoes on Mars"] {
        let out = cli(&["route", "--config", cfg.to_str().unwrap(), "--query", query, "--json"]);
        assert!(out.status.success());
        let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();

        let qv = engine.embedder().embed(&[query.to_string()]).await.unwrap().remove(0);
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let best = |vs: &[Vec<f64>]| vs.iter().map(|v| dot(&qv, v)).fold(f64::NEG_INFINITY, f64::max);
        let mut expected: Vec<(String, f64)> = model
            .agents
            .iter()
            .map(|a| {
                let w = a.mixin_weight;
                let mix = if a.mixin_vectors.is_empty() { 0.0 } else { best(&a.mixin_vectors) };
                let cen = if a.centroids.is_empty() { 0.0 } else { best(&a.centroids) };
                (a.agent_id.clone(), a.scale * (w * mix + (1.0 - w) * cen))
            })
            .collect();
        expected.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let scores = v["scores"].as_array().unwrap();
        assert_eq!(scores.len(), expected.len());
        for (got, (id, s)) in scores.iter().zip(&expected) {
            assert_eq!(got["agent_id"], id.as_str());
            assert!((got["score"].as_f64().unwrap() - s).abs() < 1e-12, "{query}: {got} vs {s}");
        }
        assert_eq!(v["activated"], serde_json::json!([expected[0].0]));
    }
}

#[test]
fn cli_rejects_invalid_config_with_violations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(
        &cfg,
        r#"{"agents":[{"id":"a","sources":["missing"]},{"id":"a","sources":[]}],"knowledge_sources":[]}"#,
    )
    .unwrap();
    for cmd in ["serve", "ingest", "chat"] {
        let out = cli(&[cmd, "--config", cfg.to_str().unwrap()]);
        assert!(!out.status.success());
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains("invalid config"), "{err}");
        assert!(err.lines().filter(|l| l.trim_start().starts_with("- ")).count() >= 2, "{err}");
    }
}
