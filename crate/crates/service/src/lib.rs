//! HTTP surveillance service: specimen ingest and classification, alerts,
//! a taxonomist review queue, summaries and training-corpus export.
//!
//! | route | |
//! |---|---|
//! | `GET /health` | liveness and model status, never authenticated |
//! | `POST /specimens` | multipart: optional `metadata` JSON part plus 1 to 12 image parts |
//! | `GET /specimens/{id}` | full record |
//! | `GET /review/pending` | predictions awaiting a decision |
//! | `GET /review/{id}` | images and activation-map overlays, base64 PNG |
//! | `POST /review/{id}/decision` | `{"decision": "confirm"}` or `{"decision": "override", "label": ...}` |
//! | `GET /export/training-corpus` | labeled specimens, reviewed labels first |
//! | `GET /summary?since=YYYY-MM-DD` | per-species, per-trap and alert counts |
//! | `GET /alerts` | the alert log |
//! | `POST /model` | `{"path": dir}`: load and atomically swap the model |

pub mod config;
pub mod error;
mod routes;
pub mod state;

use std::sync::Arc;

use thiserror::Error;
use tokio::net::TcpListener;

pub use config::{AlertPolicy, ServiceConfig};
pub use error::{ApiError, ConfigError};
pub use routes::router;
pub use state::{AlertEvent, AppState};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("store: {0}")]
    Store(String),
    #[error(transparent)]
    Model(#[from] culicid_core::bundle::BundleError),
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Binds the configured address, reports the bound address through
/// `on_bound` and serves until ctrl-c or SIGTERM.
pub async fn serve(config: ServiceConfig, on_bound: impl FnOnce(std::net::SocketAddr)) -> Result<(), Error> {
    let addr = config.bind.clone();
    let state = Arc::new(AppState::open(config)?);
    let listener = TcpListener::bind(&addr).await.map_err(|source| Error::Bind { addr, source })?;
    let local = listener.local_addr()?;
    tracing::info!(%local, model = ?state.model().map(|m| m.id().to_owned()), "listening");
    on_bound(local);
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown_signal()).await?;
    Ok(())
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        if let Ok(mut s) = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            s.recv().await;
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}
