use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use polyrag_core::config::EngineConfig;
use polyrag_core::pipeline::{Engine, TurnEvent};
use polyrag_core::types::{ConversationHistory, SystemClock};
use polyrag_server::cache::{build_engine_cached, CacheError};
use polyrag_server::{router, AppState, EngineFactory, SessionStore};
use tokio::io::{AsyncBufReadExt, BufReader};

#[derive(Parser)]
#[command(name = "polyrag", version, about = "Multi-agent retrieval QA service")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Boot the HTTP service.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Reuse ingested stores from this directory.
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        /// Append every session's messages to JSONL files here.
        #[arg(long)]
        sessions_dir: Option<PathBuf>,
        /// Answer unknown session ids with an error instead of creating them.
        #[arg(long)]
        strict_sessions: bool,
    },
    /// Build stores and the routing model and persist them.
    Ingest {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".polyrag-cache")]
        cache_dir: PathBuf,
    },
    /// Chat with the pipeline in the terminal.
    Chat {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
    },
    /// Print per-agent routing scores for a query.
    Route {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        query: String,
        /// Print the raw JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("invalid config {path}:\n{errors}")]
    Config { path: String, errors: String },
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error("{0}")]
    Other(String),
}

/// Validates up front so every violation is listed, one per line.
fn check_config(path: &Path) -> Result<EngineConfig, CliError> {
    EngineConfig::load(path).map_err(|errs| CliError::Config {
        path: path.display().to_string(),
        errors: errs.0.iter().map(|e| format!("  - {e}")).collect::<Vec<_>>().join("\n"),
    })
}

async fn load_engine(config: &Path, cache_dir: Option<&Path>) -> Result<Engine, CliError> {
    check_config(config)?;
    let (engine, report) = build_engine_cached(config, cache_dir, |b| b).await?;
    if let Some(r) = report {
        tracing::info!(cache_hit = r.cache_hit, key = %r.key, "ingestion cache");
    }
    Ok(engine)
}

async fn serve(
    config: PathBuf,
    addr: SocketAddr,
    cache_dir: Option<PathBuf>,
    sessions_dir: Option<PathBuf>,
    strict: bool,
) -> Result<(), CliError> {
    let engine = load_engine(&config, cache_dir.as_deref()).await?;
    let clock = Arc::new(SystemClock);
    let sessions = match sessions_dir {
        Some(dir) => SessionStore::persistent(dir, clock).map_err(|e| CliError::Other(e.to_string()))?,
        None => SessionStore::in_memory(clock),
    };
    let factory: EngineFactory = Arc::new(move || {
        let config = config.clone();
        let cache_dir = cache_dir.clone();
        Box::pin(async move { load_engine(&config, cache_dir.as_deref()).await.map_err(|e| e.to_string()) })
    });
    let state = Arc::new(AppState::new(engine, sessions).strict(strict).with_factory(factory));
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| CliError::Other(format!("bind {addr}: {e}")))?;
    tracing::info!("listening on http://{addr}");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| CliError::Other(e.to_string()))
}

async fn ingest(config: PathBuf, cache_dir: PathBuf) -> Result<(), CliError> {
    check_config(&config)?;
    let (engine, report) = build_engine_cached(&config, Some(&cache_dir), |b| b).await?;
    let report = report.expect("a cache directory was given");
    println!("{}", if report.cache_hit { "cache hit" } else { "cache miss: stores rebuilt" });
    println!("key {}", report.key);
    println!("entry {}", report.entry_dir);
    for s in &report.stores {
        println!("store {} chunks={} sha256={}", s.source, s.chunk_count, s.sha256);
    }
    if let Some(r) = &report.routing_sha256 {
        println!("routing sha256={r}");
    }
    for stat in engine.ingest_stats() {
        println!("ingested {} files={} chunks={} in {} ms", stat.source, stat.files, stat.chunk_count, stat.elapsed_ms);
    }
    Ok(())
}

async fn chat(config: PathBuf, cache_dir: Option<PathBuf>) -> Result<(), CliError> {
    let engine = load_engine(&config, cache_dir.as_deref()).await?;
    let mut history = ConversationHistory::new();
    let mut lines = BufReader::new(tokio::io::stdin()).lines();
    println!("agents: {}. Type a question, or /quit.", engine.agent_ids().join(", "));
    loop {
        print!("> ");
        let _ = std::io::stdout().flush();
        let Some(line) = lines.next_line().await.map_err(|e| CliError::Other(e.to_string()))? else {
            break;
        };
        let line = line.trim();
        if line == "/quit" {
            break;
        }
        if line.is_empty() {
            continue;
        }
        let (tx, mut rx) = tokio::sync::mpsc::unbounded_channel();
        let printer = tokio::spawn(async move {
            while let Some(event) = rx.recv().await {
                match event {
                    TurnEvent::Meta(m) => println!("[agents: {}]", m.activated_agents.join(", ")),
                    TurnEvent::Token(t) => {
                        print!("{t}");
                        let _ = std::io::stdout().flush();
                    }
                    TurnEvent::Citations(cs) => {
                        println!();
                        for c in cs {
                            println!("[{}] {} ({})", c.display_index, c.source_name, c.source_uri);
                        }
                    }
                }
            }
        });
        let result = engine.run_turn(&mut history, line, Some(&tx)).await;
        drop(tx);
        let _ = printer.await;
        if let Err(e) = result {
            println!("\nerror: {e}");
        }
    }
    Ok(())
}

async fn route(config: PathBuf, query: String, json: bool) -> Result<(), CliError> {
    let engine = load_engine(&config, None).await?;
    let debug = engine.route_debug(&query).await.map_err(|e| CliError::Other(e.to_string()))?;
    if json {
        println!("{}", serde_json::to_string_pretty(&debug).expect("route debug serializes"));
        return Ok(());
    }
    match &debug.scores {
        None => println!("routing disabled; all agents active"),
        Some(scores) => {
            for s in scores {
                let mark = if debug.activated.contains(&s.agent_id) { "*" } else { " " };
                println!("{mark} {:<24} {:.6}", s.agent_id, s.score);
            }
        }
    }
    println!("activated: {}", debug.activated.join(", "));
    if debug.fallback_all {
        println!("(no agent passed the score threshold; all activated)");
    }
    Ok(())
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn,polyrag=info".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Serve { config, addr, cache_dir, sessions_dir, strict_sessions } => {
            serve(config, addr, cache_dir, sessions_dir, strict_sessions).await
        }
        Command::Ingest { config, cache_dir } => ingest(config, cache_dir).await,
        Command::Chat { config, cache_dir } => chat(config, cache_dir).await,
        Command::Route { config, query, json } => route(config, query, json).await,
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
