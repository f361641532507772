//! Keys, door-server certification, passphrase-protected private keys,
//! detached signatures and the envelope pipeline for direct messages.
//!
//! Signatures are RSASSA-PSS over SHA-256. Envelopes use a fresh AES-256-GCM
//! payload key wrapped with RSA-OAEP (SHA-256) for the receiver, and the
//! sender signs the canonical encoding of every other envelope field.

use std::fmt;
use std::time::{SystemTime, UNIX_EPOCH};

use aes_gcm::aead::{Aead, KeyInit};
use aes_gcm::{Aes256Gcm, Nonce};
use hmac::{Hmac, Mac};
use rand::rngs::OsRng;
use rand::RngCore;
use rsa::pkcs1::{DecodeRsaPublicKey, EncodeRsaPublicKey};
use rsa::pkcs8::{DecodePrivateKey, EncodePrivateKey};
use rsa::pss::{BlindedSigningKey, VerifyingKey};
use rsa::signature::{RandomizedSigner, SignatureEncoding, Verifier};
use rsa::traits::PublicKeyParts;
use rsa::{Oaep, RsaPrivateKey, RsaPublicKey};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::canonical::{b64, to_canonical_vec};

pub const MIN_MODULUS_BITS: usize = 2048;
pub const MIN_PASSPHRASE_CHARS: usize = 8;
pub const MIN_KDF_ITERATIONS: u32 = 100_000;
pub const DEFAULT_KDF_ITERATIONS: u32 = 200_000;

const KDF_SALT_LEN: usize = 16;
const GCM_NONCE_LEN: usize = 12;
const PASSPHRASE_CHECK_LEN: usize = 16;
const PAYLOAD_KEY_LEN: usize = 32;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("rejected parameters: {0}")]
    RejectedParameters(String),
    #[error("encoding error: {0}")]
    Encoding(String),
    #[error("authentication failed: wrong passphrase")]
    AuthenticationFailed,
    #[error("corrupt data: {0}")]
    CorruptData(String),
    #[error("envelope could not be decrypted with this key")]
    DecryptFailure,
    #[error("sender key is not certified by the door server")]
    BadCert,
    #[error("envelope signature does not verify")]
    BadSignature,
}

pub type Result<T, E = CryptoError> = std::result::Result<T, E>;

/// SHA-256 of `bytes`.
pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// An RSA public key together with its canonical encoding (PKCS#1 DER).
#[derive(Clone)]
pub struct PublicKey {
    inner: RsaPublicKey,
    der: Vec<u8>,
}

impl PublicKey {
    pub fn from_der(der: &[u8]) -> Result<Self> {
        let inner = RsaPublicKey::from_pkcs1_der(der)
            .map_err(|e| CryptoError::Encoding(format!("invalid RSA public key: {e}")))?;
        if inner.size() * 8 < MIN_MODULUS_BITS {
            return Err(CryptoError::Encoding(format!(
                "RSA modulus of {} bits is below the {MIN_MODULUS_BITS}-bit minimum",
                inner.size() * 8
            )));
        }
        let key = Self::from_rsa(inner);
        // Reject non-canonical encodings so the key bytes stay a stable identity.
        if key.der != der {
            return Err(CryptoError::Encoding("public key is not canonically encoded".into()));
        }
        Ok(key)
    }

    fn from_rsa(inner: RsaPublicKey) -> Self {
        let der = inner.to_pkcs1_der().expect("encoding a valid RSA public key cannot fail").as_bytes().to_vec();
        Self { inner, der }
    }

    /// Canonical encoding: PKCS#1 `RSAPublicKey` DER.
    pub fn as_der(&self) -> &[u8] {
        &self.der
    }

    pub fn bits(&self) -> usize {
        self.inner.n().bits()
    }

    /// SHA-256 of the canonical encoding. Doubles as the owner fingerprint
    /// of listings and as the peer id.
    pub fn fingerprint(&self) -> [u8; 32] {
        sha256(&self.der)
    }
}

impl PartialEq for PublicKey {
    fn eq(&self, other: &Self) -> bool {
        self.der == other.der
    }
}

impl Eq for PublicKey {}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({}…, {} bits)", &hex::encode(self.fingerprint())[..16], self.bits())
    }
}

impl Serialize for PublicKey {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        b64::serialize(&self.der, serializer)
    }
}

impl<'de> Deserialize<'de> for PublicKey {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let der = b64::deserialize(deserializer)?;
        PublicKey::from_der(&der).map_err(serde::de::Error::custom)
    }
}

/// An RSA private key. Never serialized in the clear; see [`EncryptedPrivateKey`].
#[derive(Clone)]
pub struct PrivateKey {
    inner: RsaPrivateKey,
}

impl PrivateKey {
    pub fn public_key(&self) -> PublicKey {
        PublicKey::from_rsa(self.inner.to_public_key())
    }
}

impl PartialEq for PrivateKey {
    fn eq(&self, other: &Self) -> bool {
        self.inner == other.inner
    }
}

impl fmt::Debug for PrivateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("PrivateKey(..)")
    }
}

#[derive(Clone, Debug)]
pub struct KeyPair {
    pub public: PublicKey,
    pub private: PrivateKey,
}

impl KeyPair {
    pub fn from_private(private: PrivateKey) -> Self {
        Self { public: private.public_key(), private }
    }
}

pub fn generate_keypair(bits: usize) -> Result<KeyPair> {
    if bits < MIN_MODULUS_BITS {
        return Err(CryptoError::RejectedParameters(format!(
            "modulus of {bits} bits is below the {MIN_MODULUS_BITS}-bit minimum"
        )));
    }
    let inner = RsaPrivateKey::new(&mut OsRng, bits).map_err(|e| CryptoError::RejectedParameters(e.to_string()))?;
    Ok(KeyPair::from_private(PrivateKey { inner }))
}

/// PSS signature over the SHA-256 digest of `message`.
pub fn sign_detached(key: &PrivateKey, message: &[u8]) -> Vec<u8> {
    let signer = BlindedSigningKey::<Sha256>::new(key.inner.clone());
    signer.sign_with_rng(&mut OsRng, message).to_vec()
}

pub fn verify_detached(key: &PublicKey, message: &[u8], signature: &[u8]) -> bool {
    let Ok(signature) = rsa::pss::Signature::try_from(signature) else {
        return false;
    };
    VerifyingKey::<Sha256>::new(key.inner.clone()).verify(message, &signature).is_ok()
}

/// A user's public key plus the door server's signature over its canonical
/// encoding. Fields are kept as raw bytes so that malformed certificates can
/// be represented and rejected by [`verify_certification`].
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifiedKey {
    #[serde(with = "b64")]
    pub public_key: Vec<u8>,
    #[serde(with = "b64")]
    pub certification: Vec<u8>,
}

impl CertifiedKey {
    pub fn public_key(&self) -> Result<PublicKey> {
        PublicKey::from_der(&self.public_key)
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        sha256(&self.public_key)
    }
}

pub fn certify_key(server_key: &PrivateKey, user_key: &PublicKey) -> CertifiedKey {
    CertifiedKey { public_key: user_key.as_der().to_vec(), certification: sign_detached(server_key, user_key.as_der()) }
}

/// Like [`certify_key`] for a key that arrives as bytes.
pub fn certify_key_der(server_key: &PrivateKey, user_key_der: &[u8]) -> Result<CertifiedKey> {
    let key = PublicKey::from_der(user_key_der)?;
    Ok(certify_key(server_key, &key))
}

pub fn verify_certification(server_key: &PublicKey, cert: &CertifiedKey) -> bool {
    cert.public_key().is_ok() && verify_detached(server_key, &cert.public_key, &cert.certification)
}

/// On-disk form of a certified key.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyBundle {
    #[serde(with = "b64")]
    pub public_key: Vec<u8>,
    #[serde(with = "b64")]
    pub certification: Vec<u8>,
    pub created_at: u64,
}

impl KeyBundle {
    pub fn new(cert: CertifiedKey, created_at: u64) -> Self {
        Self { public_key: cert.public_key, certification: cert.certification, created_at }
    }

    pub fn cert(&self) -> CertifiedKey {
        CertifiedKey { public_key: self.public_key.clone(), certification: self.certification.clone() }
    }
}

/// A private key encrypted under a passphrase-derived key.
///
/// `ciphertext` is a 16-byte passphrase check value followed by the
/// AES-256-GCM encryption of the PKCS#8 DER private key. The check value lets
/// a wrong passphrase be told apart from damaged ciphertext.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncryptedPrivateKey {
    #[serde(with = "b64")]
    pub ciphertext: Vec<u8>,
    #[serde(with = "b64")]
    pub kdf_salt: Vec<u8>,
    pub kdf_iterations: u32,
    #[serde(with = "b64")]
    pub nonce: Vec<u8>,
}

struct DerivedKeys {
    cipher_key: [u8; 32],
    check_key: [u8; 32],
}

fn derive_keys(passphrase: &str, salt: &[u8], iterations: u32) -> DerivedKeys {
    let mut okm = [0u8; 64];
    pbkdf2::pbkdf2_hmac::<Sha256>(passphrase.as_bytes(), salt, iterations, &mut okm);
    let mut keys = DerivedKeys { cipher_key: [0; 32], check_key: [0; 32] };
    keys.cipher_key.copy_from_slice(&okm[..32]);
    keys.check_key.copy_from_slice(&okm[32..]);
    keys
}

fn passphrase_check(check_key: &[u8; 32]) -> Hmac<Sha256> {
    let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(check_key).expect("hmac accepts any key length");
    mac.update(b"marketpalace private key check");
    mac
}

pub fn encrypt_private_key(key: &PrivateKey, passphrase: &str) -> Result<EncryptedPrivateKey> {
    encrypt_private_key_with_iterations(key, passphrase, DEFAULT_KDF_ITERATIONS)
}

pub fn encrypt_private_key_with_iterations(
    key: &PrivateKey,
    passphrase: &str,
    iterations: u32,
) -> Result<EncryptedPrivateKey> {
    if passphrase.chars().count() < MIN_PASSPHRASE_CHARS {
        return Err(CryptoError::RejectedParameters(format!(
            "passphrase must be at least {MIN_PASSPHRASE_CHARS} characters"
        )));
    }
    if iterations < MIN_KDF_ITERATIONS {
        return Err(CryptoError::RejectedParameters(format!(
            "at least {MIN_KDF_ITERATIONS} KDF iterations are required"
        )));
    }
    let mut salt = [0u8; KDF_SALT_LEN];
    let mut nonce = [0u8; GCM_NONCE_LEN];
    OsRng.fill_bytes(&mut salt);
    OsRng.fill_bytes(&mut nonce);

    let keys = derive_keys(passphrase, &salt, iterations);
    let der = key.inner.to_pkcs8_der().map_err(|e| CryptoError::Encoding(e.to_string()))?;
    let sealed = Aes256Gcm::new(&keys.cipher_key.into())
        .encrypt(Nonce::from_slice(&nonce), der.as_bytes())
        .map_err(|_| CryptoError::Encoding("private key encryption failed".into()))?;

    let mut ciphertext = passphrase_check(&keys.check_key).finalize().into_bytes()[..PASSPHRASE_CHECK_LEN].to_vec();
    ciphertext.extend_from_slice(&sealed);
    Ok(EncryptedPrivateKey { ciphertext, kdf_salt: salt.to_vec(), kdf_iterations: iterations, nonce: nonce.to_vec() })
}

pub fn decrypt_private_key(enc: &EncryptedPrivateKey, passphrase: &str) -> Result<PrivateKey> {
    if enc.kdf_iterations == 0 {
        return Err(CryptoError::CorruptData("kdf_iterations must be positive".into()));
    }
    if enc.kdf_salt.len() != KDF_SALT_LEN {
        return Err(CryptoError::CorruptData(format!("salt must be {KDF_SALT_LEN} bytes")));
    }
    if enc.nonce.len() != GCM_NONCE_LEN {
        return Err(CryptoError::CorruptData(format!("nonce must be {GCM_NONCE_LEN} bytes")));
    }
    if enc.ciphertext.len() < PASSPHRASE_CHECK_LEN {
        return Err(CryptoError::CorruptData("ciphertext is truncated".into()));
    }
    let (check, sealed) = enc.ciphertext.split_at(PASSPHRASE_CHECK_LEN);
    let keys = derive_keys(passphrase, &enc.kdf_salt, enc.kdf_iterations);
    passphrase_check(&keys.check_key).verify_truncated_left(check).map_err(|_| CryptoError::AuthenticationFailed)?;

    let der = Aes256Gcm::new(&keys.cipher_key.into())
        .decrypt(Nonce::from_slice(&enc.nonce), sealed)
        .map_err(|_| CryptoError::CorruptData("ciphertext failed authentication".into()))?;
    let inner = RsaPrivateKey::from_pkcs8_der(&der)
        .map_err(|e| CryptoError::CorruptData(format!("decrypted key does not parse: {e}")))?;
    Ok(PrivateKey { inner })
}

/// Encrypted, sender-certified, signed container for a direct message.
///
/// `ciphertext` is the 12-byte GCM nonce followed by the AES-256-GCM output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Envelope {
    #[serde(with = "b64")]
    pub ciphertext: Vec<u8>,
    #[serde(with = "b64")]
    pub wrapped_key: Vec<u8>,
    pub sender_cert: CertifiedKey,
    #[serde(with = "b64")]
    pub signature: Vec<u8>,
    pub timestamp: u64,
}

#[derive(Serialize)]
struct EnvelopeSignedPart<'a> {
    #[serde(with = "b64")]
    ciphertext: &'a Vec<u8>,
    #[serde(with = "b64")]
    wrapped_key: &'a Vec<u8>,
    sender_cert: &'a CertifiedKey,
    timestamp: u64,
}

impl Envelope {
    /// The bytes covered by the sender's signature.
    pub fn signed_bytes(&self) -> Vec<u8> {
        to_canonical_vec(&EnvelopeSignedPart {
            ciphertext: &self.ciphertext,
            wrapped_key: &self.wrapped_key,
            sender_cert: &self.sender_cert,
            timestamp: self.timestamp,
        })
        .expect("envelope fields always serialize")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OpenedEnvelope {
    pub plaintext: Vec<u8>,
    pub sender: PublicKey,
    pub timestamp: u64,
}

pub fn seal_envelope(
    sender_key: &PrivateKey,
    sender_cert: &CertifiedKey,
    receiver_key: &PublicKey,
    plaintext: &[u8],
) -> Result<Envelope> {
    seal_envelope_at(sender_key, sender_cert, receiver_key, plaintext, now_unix())
}

pub fn seal_envelope_at(
    sender_key: &PrivateKey,
    sender_cert: &CertifiedKey,
    receiver_key: &PublicKey,
    plaintext: &[u8],
    timestamp: u64,
) -> Result<Envelope> {
    if sender_key.public_key().as_der() != sender_cert.public_key.as_slice() {
        return Err(CryptoError::RejectedParameters("sender certificate does not match the sender private key".into()));
    }
    let mut payload_key = [0u8; PAYLOAD_KEY_LEN];
    let mut nonce = [0u8; GCM_NONCE_LEN];
    OsRng.fill_bytes(&mut payload_key);
    OsRng.fill_bytes(&mut nonce);

    let sealed = Aes256Gcm::new(&payload_key.into())
        .encrypt(Nonce::from_slice(&nonce), plaintext)
        .map_err(|_| CryptoError::RejectedParameters("payload too large to encrypt".into()))?;
    let mut ciphertext = Vec::with_capacity(GCM_NONCE_LEN + sealed.len());
    ciphertext.extend_from_slice(&nonce);
    ciphertext.extend_from_slice(&sealed);

    let wrapped_key = receiver_key
        .inner
        .encrypt(&mut OsRng, Oaep::new::<Sha256>(), &payload_key)
        .map_err(|e| CryptoError::RejectedParameters(e.to_string()))?;

    let mut env =
        Envelope { ciphertext, wrapped_key, sender_cert: sender_cert.clone(), signature: Vec::new(), timestamp };
    env.signature = sign_detached(sender_key, &env.signed_bytes());
    Ok(env)
}

/// Decrypts, then checks the sender certificate, then the envelope signature.
/// Any failure rejects the whole envelope.
pub fn open_envelope(receiver_key: &PrivateKey, server_key: &PublicKey, env: &Envelope) -> Result<OpenedEnvelope> {
    let payload_key =
        receiver_key.inner.decrypt(Oaep::new::<Sha256>(), &env.wrapped_key).map_err(|_| CryptoError::DecryptFailure)?;
    if payload_key.len() != PAYLOAD_KEY_LEN || env.ciphertext.len() < GCM_NONCE_LEN {
        return Err(CryptoError::DecryptFailure);
    }
    let (nonce, sealed) = env.ciphertext.split_at(GCM_NONCE_LEN);
    let cipher = Aes256Gcm::new_from_slice(&payload_key).map_err(|_| CryptoError::DecryptFailure)?;
    let plaintext = cipher.decrypt(Nonce::from_slice(nonce), sealed).map_err(|_| CryptoError::DecryptFailure)?;

    if !verify_certification(server_key, &env.sender_cert) {
        return Err(CryptoError::BadCert);
    }
    let sender = env.sender_cert.public_key().map_err(|_| CryptoError::BadCert)?;
    if !verify_detached(&sender, &env.signed_bytes(), &env.signature) {
        return Err(CryptoError::BadSignature);
    }
    Ok(OpenedEnvelope { plaintext, sender, timestamp: env.timestamp })
}
