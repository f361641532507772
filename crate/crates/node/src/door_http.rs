//! HTTP front end of the door server.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{Context, Result};
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use marketpalace_core::canonical::b64;
use marketpalace_core::clock::{Clock, SystemClock};
use marketpalace_core::crypto::{CertifiedKey, KeyPair, PublicKey};
use marketpalace_core::door::{AttributeDisclosure, DiscloseOutcome, DoorError, DoorServer, HashStore, TrustedIssuers};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::sync::watch;
use tokio::task::JoinHandle;

use crate::api::{Canonical, ErrorBody};
use crate::config::DoorConfig;
use crate::keys::PublicKeyFile;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub token: String,
    pub qr_payload: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscloseResult {
    pub result: DiscloseOutcome,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompleteRequest {
    #[serde(with = "b64")]
    pub public_key: Vec<u8>,
}

struct DoorHttpError(StatusCode, ErrorBody);

impl DoorHttpError {
    fn new(status: StatusCode, error: &str, detail: impl ToString) -> Self {
        Self(status, ErrorBody { error: error.into(), detail: detail.to_string() })
    }
}

impl From<DoorError> for DoorHttpError {
    fn from(e: DoorError) -> Self {
        match &e {
            DoorError::UnknownSession => Self::new(StatusCode::NOT_FOUND, "unknown-session", e),
            DoorError::SessionExpired => Self::new(StatusCode::CONFLICT, "session-expired", e),
            DoorError::WrongState { .. } => Self::new(StatusCode::CONFLICT, "wrong-state", e),
            DoorError::Crypto(_) => Self::new(StatusCode::BAD_REQUEST, "bad-key", e),
            DoorError::Store(_) => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "storage", e),
        }
    }
}

impl From<JsonRejection> for DoorHttpError {
    fn from(e: JsonRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad-request", e.body_text())
    }
}

impl IntoResponse for DoorHttpError {
    fn into_response(self) -> Response {
        Canonical(self.0, self.1).into_response()
    }
}

type DoorResult<T> = Result<Canonical<T>, DoorHttpError>;

pub fn router(door: Arc<DoorServer>) -> Router {
    Router::new()
        .route("/session", post(start_session))
        .route("/session/{token}/disclose", post(disclose))
        .route("/session/{token}/complete", post(complete))
        .route("/server-key", get(server_key))
        .with_state(door)
}

async fn start_session(State(door): State<Arc<DoorServer>>) -> DoorResult<SessionCreated> {
    let (token, qr_payload) = door.start_session();
    Ok(Canonical(StatusCode::CREATED, SessionCreated { token: token.token, qr_payload }))
}

async fn disclose(
    State(door): State<Arc<DoorServer>>,
    Path(token): Path<String>,
    body: Result<Json<AttributeDisclosure>, JsonRejection>,
) -> DoorResult<DiscloseResult> {
    let Json(d) = body?;
    // The hash store fsyncs on insert.
    let result = tokio::task::spawn_blocking(move || door.disclose(&token, &d))
        .await
        .map_err(|e| DoorHttpError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e))??;
    Ok(Canonical(StatusCode::OK, DiscloseResult { result }))
}

async fn complete(
    State(door): State<Arc<DoorServer>>,
    Path(token): Path<String>,
    body: Result<Json<CompleteRequest>, JsonRejection>,
) -> DoorResult<CertifiedKey> {
    let Json(req) = body?;
    Ok(Canonical(StatusCode::OK, door.complete_registration(&token, &req.public_key)?))
}

async fn server_key(State(door): State<Arc<DoorServer>>) -> DoorResult<PublicKeyFile> {
    Ok(Canonical(StatusCode::OK, PublicKeyFile { public_key: door.public_key().clone() }))
}

pub fn trusted_issuers(cfg: &DoorConfig) -> Result<TrustedIssuers> {
    let mut trusted = TrustedIssuers::new();
    for issuer in &cfg.issuer_keys {
        let key: PublicKey = serde_json::from_value(serde_json::Value::String(issuer.public_key.clone()))
            .with_context(|| format!("issuer {} has a malformed public key", issuer.issuer_id))?;
        trusted.insert(issuer.issuer_id.clone(), key);
    }
    Ok(trusted)
}

pub struct RunningDoor {
    pub addr: SocketAddr,
    pub door: Arc<DoorServer>,
    shutdown: watch::Sender<bool>,
    tasks: Vec<JoinHandle<()>>,
}

impl RunningDoor {
    pub async fn shutdown(self) {
        let _ = self.shutdown.send(true);
        for t in self.tasks {
            t.abort();
            let _ = t.await;
        }
    }
}

pub async fn start(cfg: &DoorConfig, server_keys: KeyPair) -> Result<RunningDoor> {
    let store = HashStore::open(&cfg.hash_store_path)
        .with_context(|| format!("opening hash store {}", cfg.hash_store_path.display()))?;
    let listener = TcpListener::bind(&cfg.listen_addr).await.with_context(|| format!("binding {}", cfg.listen_addr))?;
    let addr = listener.local_addr()?;
    let host = cfg.public_host.clone().unwrap_or_else(|| addr.to_string());
    let door = Arc::new(DoorServer::new(
        server_keys,
        Box::new(trusted_issuers(cfg)?),
        store,
        cfg.session_ttl_s,
        host,
        Arc::new(SystemClock),
    ));
    let (shutdown, _) = watch::channel(false);
    let mut tasks = Vec::new();

    let sweeper = door.clone();
    let every = Duration::from_secs((cfg.session_ttl_s / 4).clamp(1, 60));
    tasks.push(tokio::spawn(async move {
        let mut tick = tokio::time::interval(every);
        loop {
            tick.tick().await;
            let n = sweeper.expire_sessions(SystemClock.now());
            if n > 0 {
                tracing::debug!(expired = n, "sessions expired");
            }
        }
    }));

    let app = router(door.clone());
    let mut stop = shutdown.subscribe();
    tasks.push(tokio::spawn(async move {
        let serve = axum::serve(listener, app).with_graceful_shutdown(async move {
            let _ = stop.wait_for(|s| *s).await;
        });
        if let Err(err) = serve.await {
            tracing::error!(%err, "door server failed");
        }
    }));
    tracing::info!(%addr, "door server listening");
    Ok(RunningDoor { addr, door, shutdown, tasks })
}
