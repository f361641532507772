#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use marketpalace::config::{write_json, write_pretty, NodeConfig};
use marketpalace::daemon::{self, RunningNode};
use marketpalace::keys::{PublicKeyFile, PASSPHRASE_ENV};
use marketpalace_core::crypto::{
    certify_key, encrypt_private_key_with_iterations, generate_keypair, KeyBundle, KeyPair, MIN_KDF_ITERATIONS,
};
use marketpalace_core::gossip::NodeIdentity;
use tempfile::TempDir;

pub const PASSPHRASE: &str = "correct horse battery";
pub const BIN: &str = env!("CARGO_BIN_EXE_marketpalace");

/// Door server key used to certify every fixture identity.
pub fn server() -> &'static KeyPair {
    static K: OnceLock<KeyPair> = OnceLock::new();
    K.get_or_init(|| generate_keypair(2048).unwrap())
}

/// Certified identities, generated once per test binary.
pub fn identity(i: usize) -> NodeIdentity {
    static IDS: OnceLock<Vec<NodeIdentity>> = OnceLock::new();
    let ids = IDS.get_or_init(|| {
        (0..6)
            .map(|_| {
                let keys = generate_keypair(2048).unwrap();
                let cert = certify_key(&server().private, &keys.public);
                NodeIdentity { keys, cert }
            })
            .collect()
    });
    ids[i].clone()
}

/// A node's files on disk: keys, bundle, server key and config.
pub struct NodeDir {
    pub dir: TempDir,
    pub config_path: PathBuf,
    pub config: NodeConfig,
}

impl NodeDir {
    pub fn new(who: usize, bootstrap: &[String], period_s: f64) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path();
        let id = identity(who);
        let config = NodeConfig {
            listen_addr: "127.0.0.1:0".into(),
            api_addr: "127.0.0.1:0".into(),
            allow_remote_api: false,
            bootstrap_addrs: bootstrap.to_vec(),
            bootstrap_retries: 5,
            door_server_url: "http://127.0.0.1:9".into(),
            server_public_key_path: p.join("server_key.json"),
            key_bundle_path: p.join("bundle.json"),
            private_key_path: p.join("private_key.json"),
            timer_period_s: period_s,
            k: 20,
            data_dir: p.join("data"),
        };
        write_json(&config.server_public_key_path, &PublicKeyFile { public_key: server().public.clone() }).unwrap();
        // Minimum iteration count keeps fixture setup fast.
        let enc = encrypt_private_key_with_iterations(&id.keys.private, PASSPHRASE, MIN_KDF_ITERATIONS).unwrap();
        write_json(&config.private_key_path, &enc).unwrap();
        write_json(&config.key_bundle_path, &KeyBundle::new(id.cert.clone(), 1_700_000_000)).unwrap();
        let config_path = p.join("node.json");
        write_pretty(&config_path, &config).unwrap();
        Self { dir, config_path, config }
    }
}

pub async fn start_node(who: usize, nd: &NodeDir) -> RunningNode {
    daemon::start(&nd.config, identity(who), server().public.clone()).await.unwrap()
}

/// Polls `f` every 20 ms until it returns `Some` or `limit` passes.
pub async fn eventually<T, F, Fut>(limit: Duration, mut f: F) -> Option<T>
where
    F: FnMut() -> Fut,
    Fut: std::future::Future<Output = Option<T>>,
{
    let start = Instant::now();
    loop {
        if let Some(v) = f().await {
            return Some(v);
        }
        if start.elapsed() > limit {
            return None;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

pub fn http() -> reqwest::Client {
    reqwest::Client::builder().timeout(Duration::from_secs(10)).build().unwrap()
}

pub async fn get_json(c: &reqwest::Client, url: &str) -> (u16, serde_json::Value) {
    let r = c.get(url).send().await.unwrap();
    let status = r.status().as_u16();
    (status, r.json().await.unwrap_or(serde_json::Value::Null))
}

pub async fn post_json(c: &reqwest::Client, url: &str, body: &serde_json::Value) -> (u16, serde_json::Value) {
    let r = c.post(url).json(body).send().await.unwrap();
    let status = r.status().as_u16();
    (status, r.json().await.unwrap_or(serde_json::Value::Null))
}

pub fn cli() -> Command {
    let mut c = Command::new(BIN);
    c.env(PASSPHRASE_ENV, PASSPHRASE).env("RUST_LOG", "warn").stdin(Stdio::null());
    c
}

/// A `serve` process. Killed on drop.
pub struct NodeProc {
    pub child: Child,
    pub listen: String,
    pub api: String,
}

impl NodeProc {
    /// Starts `marketpalace serve` and waits for its startup line.
    pub fn spawn(config: &Path, log: &Path) -> Self {
        let log = std::fs::OpenOptions::new().create(true).append(true).open(log).unwrap();
        let mut child =
            cli().args(["serve", "--config"]).arg(config).stdout(Stdio::piped()).stderr(log).spawn().unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        // "node <id> listening on <addr>, api on <addr>"
        let words: Vec<&str> = line.split_whitespace().collect();
        assert!(words.len() >= 8 && words[2] == "listening", "unexpected startup line {line:?}");
        Self { child, listen: words[4].trim_end_matches(',').to_owned(), api: words[7].to_owned() }
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{path}", self.api)
    }

    /// Sends SIGTERM and waits for the exit code.
    pub fn terminate(mut self) -> Option<i32> {
        unsafe {
            libc::kill(self.child.id() as libc::pid_t, libc::SIGTERM);
        }
        let status = self.child.wait().unwrap();
        status.code()
    }
}

impl Drop for NodeProc {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}
