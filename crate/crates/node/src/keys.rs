//! Key files on disk: `{public_key}` public key files, passphrase-encrypted
//! private keys and certified key bundles, all canonical JSON.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use marketpalace_core::crypto::{
    decrypt_private_key, encrypt_private_key, generate_keypair, verify_certification, EncryptedPrivateKey, KeyBundle,
    KeyPair, PublicKey, MIN_MODULUS_BITS,
};
use marketpalace_core::gossip::NodeIdentity;
use serde::{Deserialize, Serialize};

use crate::config::{read_json, write_json, NodeConfig};

pub const PASSPHRASE_ENV: &str = "MARKETPALACE_PASSPHRASE";
pub const PRIVATE_KEY_FILE: &str = "private_key.json";
pub const PUBLIC_KEY_FILE: &str = "public_key.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PublicKeyFile {
    pub public_key: PublicKey,
}

/// Reads the passphrase from the environment, or prompts on the terminal
/// with echo turned off.
pub fn passphrase(prompt: &str) -> Result<String> {
    if let Ok(p) = std::env::var(PASSPHRASE_ENV) {
        return Ok(p);
    }
    eprint!("{prompt}");
    let _echo = EchoOff::new();
    let mut line = String::new();
    std::io::stdin().read_line(&mut line).context("reading passphrase")?;
    eprintln!();
    Ok(line.trim_end_matches(['\r', '\n']).to_owned())
}

/// Disables terminal echo on stdin until dropped. Does nothing when stdin is
/// not a terminal.
struct EchoOff(Option<libc::termios>);

impl EchoOff {
    fn new() -> Self {
        // SAFETY: termios is plain data; tcgetattr fills it or fails.
        unsafe {
            let mut t: libc::termios = std::mem::zeroed();
            if libc::isatty(libc::STDIN_FILENO) != 1 || libc::tcgetattr(libc::STDIN_FILENO, &mut t) != 0 {
                return Self(None);
            }
            let saved = t;
            t.c_lflag &= !libc::ECHO;
            libc::tcsetattr(libc::STDIN_FILENO, libc::TCSANOW, &t);
            Self(Some(saved))
        }
    }
}

impl Drop for EchoOff {
    fn drop(&mut self) {
        if let Some(saved) = self.0 {
            // SAFETY: restores the attributes read in `new`.
            unsafe {
                libc::tcsetattr(libc::STDIN_FILENO, libc::TCSANOW, &saved);
            }
        }
    }
}

/// Generates a key pair into `dir`. Existing key files are only replaced
/// with `force`.
pub fn keygen(dir: &Path, passphrase: &str, force: bool) -> Result<(PathBuf, PathBuf)> {
    let (sk_path, pk_path) = (dir.join(PRIVATE_KEY_FILE), dir.join(PUBLIC_KEY_FILE));
    for p in [&sk_path, &pk_path] {
        if p.exists() && !force {
            bail!("{} already exists; pass --force to overwrite", p.display());
        }
    }
    let keys = generate_keypair(MIN_MODULUS_BITS)?;
    let enc = encrypt_private_key(&keys.private, passphrase)?;
    write_json(&sk_path, &enc).with_context(|| format!("writing {}", sk_path.display()))?;
    write_json(&pk_path, &PublicKeyFile { public_key: keys.public })
        .with_context(|| format!("writing {}", pk_path.display()))?;
    Ok((sk_path, pk_path))
}

pub fn load_keypair(path: &Path, passphrase: &str) -> Result<KeyPair> {
    let enc: EncryptedPrivateKey = read_json(path)?;
    let sk = decrypt_private_key(&enc, passphrase).with_context(|| format!("decrypting {}", path.display()))?;
    Ok(KeyPair::from_private(sk))
}

pub fn load_public_key(path: &Path) -> Result<PublicKey> {
    let f: PublicKeyFile = read_json(path)?;
    Ok(f.public_key)
}

pub fn load_bundle(path: &Path) -> Result<KeyBundle> {
    Ok(read_json(path)?)
}

/// Loads the node's keys and certificate and checks that they belong
/// together and were certified by the configured door server.
pub fn load_identity(cfg: &NodeConfig, passphrase: &str) -> Result<(NodeIdentity, PublicKey)> {
    if !cfg.key_bundle_path.exists() {
        bail!("no key bundle at {}; run `marketpalace register --config <path>` first", cfg.key_bundle_path.display());
    }
    let server_key = load_public_key(&cfg.server_public_key_path)?;
    let bundle = load_bundle(&cfg.key_bundle_path)?;
    let keys = load_keypair(&cfg.private_key_path, passphrase)?;
    let cert = bundle.cert();
    if cert.public_key != keys.public.as_der() {
        bail!("key bundle {} does not match the private key", cfg.key_bundle_path.display());
    }
    if !verify_certification(&server_key, &cert) {
        bail!("key bundle {} is not certified by the configured door server", cfg.key_bundle_path.display());
    }
    Ok((NodeIdentity { keys, cert }, server_key))
}
