//! HTTP clients: registration against the door server, and the CLI's calls
//! into a running node's local API.

use std::time::Duration;

use marketpalace_core::crypto::{verify_certification, CertifiedKey, KeyBundle, KeyPair, PublicKey};
use marketpalace_core::door::{AttributeDisclosure, DiscloseOutcome};
use reqwest::{Method, StatusCode};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::config::{write_json, NodeConfig};
use crate::daemon::now;
use crate::door_http::{CompleteRequest, DiscloseResult, SessionCreated};
use crate::keys::{load_bundle, load_keypair, load_public_key, PublicKeyFile};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_DUPLICATE: u8 = 2;
pub const EXIT_NETWORK: u8 = 3;

const REQUEST_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("this identity is already registered; a person can register only once")]
    Duplicate,
    #[error("network error: {0}")]
    Network(String),
    #[error("request rejected ({status}): {body}")]
    Rejected { status: u16, body: String },
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl ClientError {
    pub fn exit_code(&self) -> u8 {
        match self {
            ClientError::Duplicate => EXIT_DUPLICATE,
            ClientError::Network(_) => EXIT_NETWORK,
            _ => EXIT_FAILURE,
        }
    }
}

fn http() -> reqwest::Client {
    reqwest::Client::builder()
        .timeout(REQUEST_TIMEOUT)
        .connect_timeout(Duration::from_secs(5))
        .build()
        .expect("http client builds")
}

async fn request<B: Serialize, T: DeserializeOwned>(
    client: &reqwest::Client,
    method: Method,
    url: &str,
    body: Option<&B>,
) -> Result<T, ClientError> {
    let mut req = client.request(method, url);
    if let Some(b) = body {
        req = req.json(b);
    }
    let resp = req.send().await.map_err(|e| ClientError::Network(format!("{url}: {e}")))?;
    let status = resp.status();
    let text = resp.text().await.map_err(|e| ClientError::Network(e.to_string()))?;
    if status.is_server_error() || status == StatusCode::SERVICE_UNAVAILABLE {
        return Err(ClientError::Network(format!("{url} answered {status}: {text}")));
    }
    if !status.is_success() {
        return Err(ClientError::Rejected { status: status.as_u16(), body: text });
    }
    serde_json::from_str(&text).map_err(|e| ClientError::Other(anyhow::anyhow!("unexpected response from {url}: {e}")))
}

#[derive(Debug)]
pub enum Registration {
    Registered(KeyBundle),
    AlreadyRegistered(KeyBundle),
}

fn existing_bundle(cfg: &NodeConfig, keys: &KeyPair) -> Option<KeyBundle> {
    let bundle = load_bundle(&cfg.key_bundle_path).ok()?;
    let server = load_public_key(&cfg.server_public_key_path).ok()?;
    let cert = bundle.cert();
    (cert.public_key == keys.public.as_der() && verify_certification(&server, &cert)).then_some(bundle)
}

/// Runs start-session, disclose and complete against the door server and
/// saves the certified bundle. Nothing is written unless registration
/// succeeds, so a failed attempt can simply be retried.
pub async fn register(
    cfg: &NodeConfig,
    passphrase: &str,
    disclosure: &AttributeDisclosure,
) -> Result<Registration, ClientError> {
    let keys = load_keypair(&cfg.private_key_path, passphrase)?;
    if let Some(bundle) = existing_bundle(cfg, &keys) {
        return Ok(Registration::AlreadyRegistered(bundle));
    }
    let client = http();
    let base = cfg.door_server_url.trim_end_matches('/');

    let fetched_server_key = if cfg.server_public_key_path.exists() {
        None
    } else {
        let f: PublicKeyFile = request(&client, Method::GET, &format!("{base}/server-key"), None::<&()>).await?;
        Some(f.public_key)
    };
    let server_key: PublicKey = match &fetched_server_key {
        Some(k) => k.clone(),
        None => load_public_key(&cfg.server_public_key_path)?,
    };

    let session: SessionCreated = request(&client, Method::POST, &format!("{base}/session"), None::<&()>).await?;
    let url = format!("{base}/session/{}/disclose", session.token);
    let disclosed: DiscloseResult = request(&client, Method::POST, &url, Some(disclosure)).await?;
    match disclosed.result {
        DiscloseOutcome::Accepted => {}
        DiscloseOutcome::Duplicate => return Err(ClientError::Duplicate),
        DiscloseOutcome::Invalid => {
            return Err(ClientError::Rejected {
                status: 200,
                body: "door server rejected the attribute disclosure".into(),
            })
        }
    }
    let url = format!("{base}/session/{}/complete", session.token);
    let body = CompleteRequest { public_key: keys.public.as_der().to_vec() };
    let cert: CertifiedKey = request(&client, Method::POST, &url, Some(&body)).await?;
    if cert.public_key != keys.public.as_der() || !verify_certification(&server_key, &cert) {
        return Err(ClientError::Other(anyhow::anyhow!("door server returned a certificate that does not verify")));
    }
    if let Some(k) = fetched_server_key {
        write_json(&cfg.server_public_key_path, &PublicKeyFile { public_key: k }).map_err(anyhow::Error::from)?;
    }
    let bundle = KeyBundle::new(cert, now());
    write_json(&cfg.key_bundle_path, &bundle).map_err(anyhow::Error::from)?;
    Ok(Registration::Registered(bundle))
}

/// Client for a running node's local API.
pub struct ApiClient {
    base: String,
    http: reqwest::Client,
}

impl ApiClient {
    pub fn new(api_addr: &str) -> Self {
        Self { base: format!("http://{api_addr}"), http: http() }
    }

    pub async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        request(&self.http, Method::GET, &format!("{}{path}", self.base), None::<&()>).await
    }

    pub async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ClientError> {
        request(&self.http, Method::POST, &format!("{}{path}", self.base), Some(body)).await
    }

    pub async fn delete<T: DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        request(&self.http, Method::DELETE, &format!("{}{path}", self.base), None::<&()>).await
    }
}
