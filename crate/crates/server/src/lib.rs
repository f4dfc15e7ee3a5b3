//! HTTP JSON service over one loaded Backpack checkpoint.
//!
//! Endpoints: `POST /generate`, `GET /senses/{char}`, `POST /decompose`,
//! `POST /bias_report`, `GET /health`, `GET /meta` and a small session API
//! under `/sessions`. Every float in a response carries 9 significant digits.

mod error;
mod handlers;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, Mutex};

use axum::routing::{get, post, put};
use axum::Router;
use backpack::control::InterventionSpec;
use backpack::corpus::Vocabulary;
use backpack::model::{Architecture, Backpack, LanguageModel};
use backpack::trainer::Checkpoint;
use sha2::{Digest, Sha256};

pub use error::ApiError;

/// Upper bound on tokens produced by one generation request.
pub const MAX_NEW_TOKENS: usize = 1024;

/// Per-client generation defaults and intervention.
#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    pub id: u64,
    pub spec: InterventionSpec,
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub beam_width: usize,
    pub seed: u64,
}

#[derive(Debug, Default)]
struct Sessions {
    next_id: u64,
    table: BTreeMap<u64, Session>,
}

/// Shared, read-only model plus the session table.
pub struct AppState {
    pub model: Backpack<f32>,
    pub vocab: Vocabulary,
    /// Hex SHA-256 of the checkpoint bytes.
    pub checkpoint_sha256: String,
    pub metadata: BTreeMap<String, String>,
    sessions: Mutex<Sessions>,
}

impl AppState {
    pub fn new(model: Backpack<f32>, vocab: Vocabulary, checkpoint_sha256: String, metadata: BTreeMap<String, String>) -> backpack::Result<Self> {
        if vocab.len() != model.config().vocab_size {
            return Err(backpack::Error::Checkpoint(format!(
                "vocabulary has {} entries but the model expects {}",
                vocab.len(),
                model.config().vocab_size
            )));
        }
        Ok(Self {
            model,
            vocab,
            checkpoint_sha256,
            metadata,
            sessions: Mutex::new(Sessions::default()),
        })
    }

    /// Reads a Backpack checkpoint that embeds its vocabulary.
    pub fn from_checkpoint_bytes(bytes: &[u8]) -> backpack::Result<Self> {
        let ck = Checkpoint::read_from(bytes)?;
        if ck.architecture()? != Architecture::Backpack {
            return Err(backpack::Error::Checkpoint(
                "the server needs a backpack checkpoint; baseline models have no senses".into(),
            ));
        }
        let vocab = ck
            .vocab()?
            .ok_or_else(|| backpack::Error::Checkpoint("checkpoint carries no vocabulary".into()))?;
        let model: Backpack<f32> = ck.restore()?;
        Self::new(model, vocab, hex::encode(Sha256::digest(bytes)), ck.metadata.clone())
    }

    pub fn load(path: impl AsRef<Path>) -> backpack::Result<Self> {
        Self::from_checkpoint_bytes(&std::fs::read(path)?)
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(handlers::health))
        .route("/meta", get(handlers::meta))
        .route("/generate", post(handlers::generate))
        .route("/senses/{ch}", get(handlers::senses))
        .route("/decompose", post(handlers::decompose))
        .route("/bias_report", post(handlers::bias_report))
        .route("/sessions", post(handlers::create_session))
        .route("/sessions/{id}", get(handlers::get_session).delete(handlers::delete_session))
        .route("/sessions/{id}/spec", put(handlers::put_spec))
        .with_state(state)
}

/// Serves until ctrl-c.
pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

/// Rounds to 9 significant digits.
pub fn round9(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.8e}").parse().unwrap_or(x)
}
