//! JSON configuration files for the node daemon and the door server.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use marketpalace_core::canonical::to_canonical_vec;
use marketpalace_core::door::DEFAULT_SESSION_TTL_S;
use marketpalace_core::gossip::DEFAULT_K;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {err}")]
    Read { path: PathBuf, err: std::io::Error },
    #[error("cannot parse {path}: {err}")]
    Parse { path: PathBuf, err: serde_json::Error },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

fn default_api_addr() -> String {
    "127.0.0.1:7470".into()
}

fn default_period() -> f64 {
    90.0
}

fn default_k() -> usize {
    DEFAULT_K
}

fn default_bootstrap_retries() -> u32 {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub listen_addr: String,
    #[serde(default = "default_api_addr")]
    pub api_addr: String,
    /// Required to bind the API to a non-loopback address.
    #[serde(default)]
    pub allow_remote_api: bool,
    #[serde(default)]
    pub bootstrap_addrs: Vec<String>,
    #[serde(default = "default_bootstrap_retries")]
    pub bootstrap_retries: u32,
    pub door_server_url: String,
    pub server_public_key_path: PathBuf,
    pub key_bundle_path: PathBuf,
    pub private_key_path: PathBuf,
    #[serde(default = "default_period")]
    pub timer_period_s: f64,
    #[serde(default = "default_k")]
    pub k: usize,
    pub data_dir: PathBuf,
}

impl NodeConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let cfg: Self = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.timer_period_s.is_finite() && self.timer_period_s > 0.0) {
            return Err(ConfigError::Invalid(format!("timer_period_s must be positive, got {}", self.timer_period_s)));
        }
        if self.k == 0 {
            return Err(ConfigError::Invalid("k must be at least 1".into()));
        }
        let api: SocketAddr = self
            .api_addr
            .parse()
            .map_err(|_| ConfigError::Invalid(format!("api_addr {:?} is not an ip:port address", self.api_addr)))?;
        if !api.ip().is_loopback() && !self.allow_remote_api {
            return Err(ConfigError::Invalid(format!(
                "api_addr {} is not a loopback address; set allow_remote_api to expose it",
                self.api_addr
            )));
        }
        Ok(())
    }

    pub fn listings_dir(&self) -> PathBuf {
        self.data_dir.join("listings")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IssuerKey {
    pub issuer_id: String,
    /// Base64 DER public key, the `public_key` field of a `keygen` public key file.
    pub public_key: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TlsConfig {
    pub enabled: bool,
    #[serde(default)]
    pub cert_path: Option<PathBuf>,
    #[serde(default)]
    pub key_path: Option<PathBuf>,
}

fn default_ttl() -> u64 {
    DEFAULT_SESSION_TTL_S
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DoorConfig {
    pub listen_addr: String,
    /// Passphrase-encrypted server private key.
    pub server_key_path: PathBuf,
    pub issuer_keys: Vec<IssuerKey>,
    #[serde(default = "default_ttl")]
    pub session_ttl_s: u64,
    #[serde(default)]
    pub tls: TlsConfig,
    pub hash_store_path: PathBuf,
    /// Host:port placed in QR payloads; defaults to `listen_addr`.
    #[serde(default)]
    pub public_host: Option<String>,
}

impl DoorConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let cfg: Self = read_json(path)?;
        if cfg.tls.enabled {
            return Err(ConfigError::Invalid(
                "built-in TLS is not supported; terminate TLS in a reverse proxy and set tls.enabled to false".into(),
            ));
        }
        Ok(cfg)
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, ConfigError> {
    let bytes = std::fs::read(path).map_err(|err| ConfigError::Read { path: path.to_owned(), err })?;
    serde_json::from_slice(&bytes).map_err(|err| ConfigError::Parse { path: path.to_owned(), err })
}

/// Writes canonical JSON through a temporary file and rename. Values with
/// floating-point fields (node configs) use [`write_pretty`] instead.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    write_atomic(path, &to_canonical_vec(value).map_err(std::io::Error::other)?)
}

pub fn write_pretty<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    write_atomic(path, &serde_json::to_vec_pretty(value).map_err(std::io::Error::other)?)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> NodeConfig {
        NodeConfig {
            listen_addr: "127.0.0.1:7400".into(),
            api_addr: default_api_addr(),
            allow_remote_api: false,
            bootstrap_addrs: vec![],
            bootstrap_retries: 5,
            door_server_url: "http://127.0.0.1:8080".into(),
            server_public_key_path: "server.json".into(),
            key_bundle_path: "bundle.json".into(),
            private_key_path: "key.json".into(),
            timer_period_s: 90.0,
            k: 20,
            data_dir: "data".into(),
        }
    }

    #[test]
    fn loopback_enforced() {
        assert!(sample().validate().is_ok());
        let remote = NodeConfig { api_addr: "0.0.0.0:7470".into(), ..sample() };
        assert!(remote.validate().is_err());
        assert!(NodeConfig { allow_remote_api: true, ..remote }.validate().is_ok());
        assert!(NodeConfig { api_addr: "[::1]:7470".into(), ..sample() }.validate().is_ok());
        assert!(NodeConfig { api_addr: "localhost:1".into(), ..sample() }.validate().is_err());
    }

    #[test]
    fn bounds() {
        assert!(NodeConfig { timer_period_s: 0.0, ..sample() }.validate().is_err());
        assert!(NodeConfig { k: 0, ..sample() }.validate().is_err());
    }

    #[test]
    fn defaults_fill_in() {
        let json = r#"{"listen_addr":"127.0.0.1:1","door_server_url":"http://x","server_public_key_path":"s",
            "key_bundle_path":"b","private_key_path":"p","data_dir":"d"}"#;
        let cfg: NodeConfig = serde_json::from_str(json).unwrap();
        assert_eq!((cfg.timer_period_s, cfg.k, cfg.api_addr.as_str()), (90.0, 20, "127.0.0.1:7470"));
        assert!(serde_json::from_str::<NodeConfig>(&json.replace("\"d\"}", "\"d\",\"bogus\":1}")).is_err());
    }

    #[test]
    fn door_tls_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("door.json");
        let mut cfg = DoorConfig {
            listen_addr: "127.0.0.1:0".into(),
            server_key_path: "k".into(),
            issuer_keys: vec![],
            session_ttl_s: 300,
            tls: TlsConfig { enabled: true, cert_path: None, key_path: None },
            hash_store_path: "h".into(),
            public_host: None,
        };
        write_json(&path, &cfg).unwrap();
        assert!(matches!(DoorConfig::load(&path), Err(ConfigError::Invalid(_))));
        cfg.tls.enabled = false;
        write_json(&path, &cfg).unwrap();
        assert_eq!(DoorConfig::load(&path).unwrap(), cfg);
    }
}
