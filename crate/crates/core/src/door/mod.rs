//! The registration authority ("door server").
//!
//! A registrant opens a session, discloses an issuer-signed attribute, and,
//! if the attribute's SHA-256 has never been seen, submits a public key that
//! the server certifies. Each attribute value admits at most one
//! registration.

mod hash_store;

use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock};

use rand::rngs::OsRng;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{b64, to_canonical_vec};
use crate::clock::Clock;
use crate::crypto::{certify_key_der, sign_detached, verify_detached, CertifiedKey, CryptoError, KeyPair, PublicKey};

pub use hash_store::{HashRecord, HashStore, StoreError};

pub const DEFAULT_SESSION_TTL_S: u64 = 300;
pub const QR_SCHEME: &str = "marketpalace";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SessionState {
    Created,
    AttributesVerified,
    Completed,
    Expired,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionToken {
    pub token: String,
    pub state: SessionState,
    pub created_at: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute_hash: Option<String>,
}

/// An issuer-signed statement that `subject` holds `attribute_name = attribute_value`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeDisclosure {
    pub attribute_name: String,
    pub attribute_value: String,
    pub issuer_id: String,
    pub subject: String,
    #[serde(with = "b64")]
    pub issuer_signature: Vec<u8>,
}

#[derive(Serialize)]
struct DisclosureSignedPart<'a> {
    attribute_name: &'a str,
    attribute_value: &'a str,
    subject: &'a str,
}

impl AttributeDisclosure {
    pub fn signed_bytes(&self) -> Vec<u8> {
        disclosure_bytes(&self.attribute_name, &self.attribute_value, &self.subject)
    }
}

fn disclosure_bytes(name: &str, value: &str, subject: &str) -> Vec<u8> {
    to_canonical_vec(&DisclosureSignedPart { attribute_name: name, attribute_value: value, subject })
        .expect("strings always serialize")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
pub enum AssertionError {
    #[error("unknown issuer")]
    UnknownIssuer,
    #[error("issuer signature does not verify")]
    BadSignature,
}

/// Decides whether an attribute disclosure is genuine.
pub trait AttributeVerifier: Send + Sync {
    fn verify(&self, disclosure: &AttributeDisclosure) -> Result<(), AssertionError>;
}

/// Accepts disclosures signed by any of a fixed set of issuer keys.
#[derive(Clone, Debug, Default)]
pub struct TrustedIssuers {
    keys: HashMap<String, PublicKey>,
}

impl TrustedIssuers {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, issuer_id: impl Into<String>, key: PublicKey) -> Self {
        self.insert(issuer_id, key);
        self
    }

    pub fn insert(&mut self, issuer_id: impl Into<String>, key: PublicKey) {
        self.keys.insert(issuer_id.into(), key);
    }
}

impl AttributeVerifier for TrustedIssuers {
    fn verify(&self, d: &AttributeDisclosure) -> Result<(), AssertionError> {
        let key = self.keys.get(&d.issuer_id).ok_or(AssertionError::UnknownIssuer)?;
        if verify_detached(key, &d.signed_bytes(), &d.issuer_signature) {
            Ok(())
        } else {
            Err(AssertionError::BadSignature)
        }
    }
}

/// Stand-in for a credential wallet's issuer: signs attribute assertions.
pub struct MockIssuer {
    pub issuer_id: String,
    pub keys: KeyPair,
}

impl MockIssuer {
    pub fn new(issuer_id: impl Into<String>, keys: KeyPair) -> Self {
        Self { issuer_id: issuer_id.into(), keys }
    }

    pub fn issue(&self, name: &str, value: &str, subject: &str) -> AttributeDisclosure {
        AttributeDisclosure {
            attribute_name: name.to_owned(),
            attribute_value: value.to_owned(),
            issuer_id: self.issuer_id.clone(),
            subject: subject.to_owned(),
            issuer_signature: sign_detached(&self.keys.private, &disclosure_bytes(name, value, subject)),
        }
    }
}

pub fn verify_attribute_assertion(verifier: &dyn AttributeVerifier, d: &AttributeDisclosure) -> bool {
    verifier.verify(d).is_ok()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiscloseOutcome {
    Accepted,
    Duplicate,
    Invalid,
}

#[derive(Debug, Error)]
pub enum DoorError {
    #[error("unknown session")]
    UnknownSession,
    #[error("session expired")]
    SessionExpired,
    #[error("session is {actual:?}, expected {expected:?}")]
    WrongState { expected: SessionState, actual: SessionState },
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Builds the registration URI shown to the user as a QR code.
pub fn qr_payload(host: &str, token: &str) -> String {
    format!("{QR_SCHEME}://register?host={host}&token={token}")
}

/// Parses a registration URI back into `(host, token)`.
pub fn parse_qr_payload(payload: &str) -> Option<(String, String)> {
    let query = payload.strip_prefix(&format!("{QR_SCHEME}://register?"))?;
    let (mut host, mut token) = (None, None);
    for pair in query.split('&') {
        match pair.split_once('=')? {
            ("host", v) if host.is_none() && !v.is_empty() => host = Some(v.to_owned()),
            ("token", v) if token.is_none() && !v.is_empty() => token = Some(v.to_owned()),
            _ => return None,
        }
    }
    Some((host?, token?))
}

pub struct DoorServer {
    keys: KeyPair,
    verifier: Box<dyn AttributeVerifier>,
    store: HashStore,
    sessions: RwLock<HashMap<String, Arc<Mutex<SessionToken>>>>,
    ttl_s: u64,
    public_host: String,
    clock: Arc<dyn Clock>,
}

impl DoorServer {
    pub fn new(
        keys: KeyPair,
        verifier: Box<dyn AttributeVerifier>,
        store: HashStore,
        ttl_s: u64,
        public_host: impl Into<String>,
        clock: Arc<dyn Clock>,
    ) -> Self {
        Self {
            keys,
            verifier,
            store,
            sessions: RwLock::new(HashMap::new()),
            ttl_s,
            public_host: public_host.into(),
            clock,
        }
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.keys.public
    }

    pub fn store(&self) -> &HashStore {
        &self.store
    }

    pub fn start_session(&self) -> (SessionToken, String) {
        let mut raw = [0u8; 16];
        OsRng.fill_bytes(&mut raw);
        let token = SessionToken {
            token: hex::encode(raw),
            state: SessionState::Created,
            created_at: self.clock.now(),
            attribute_hash: None,
        };
        let qr = qr_payload(&self.public_host, &token.token);
        self.sessions
            .write()
            .expect("session table poisoned")
            .insert(token.token.clone(), Arc::new(Mutex::new(token.clone())));
        (token, qr)
    }

    pub fn session(&self, token: &str) -> Option<SessionToken> {
        let entry = self.sessions.read().expect("session table poisoned").get(token).cloned()?;
        let session = entry.lock().expect("session poisoned").clone();
        Some(session)
    }

    fn with_session<T>(
        &self,
        token: &str,
        expected: SessionState,
        f: impl FnOnce(&mut SessionToken) -> Result<T, DoorError>,
    ) -> Result<T, DoorError> {
        let entry = self
            .sessions
            .read()
            .expect("session table poisoned")
            .get(token)
            .cloned()
            .ok_or(DoorError::UnknownSession)?;
        let mut session = entry.lock().expect("session poisoned");
        if self.timed_out(&session, self.clock.now()) {
            session.state = SessionState::Expired;
        }
        match session.state {
            SessionState::Expired => Err(DoorError::SessionExpired),
            actual if actual != expected => Err(DoorError::WrongState { expected, actual }),
            _ => f(&mut session),
        }
    }

    fn timed_out(&self, session: &SessionToken, now: u64) -> bool {
        matches!(session.state, SessionState::Created | SessionState::AttributesVerified)
            && now.saturating_sub(session.created_at) > self.ttl_s
    }

    pub fn disclose(&self, token: &str, d: &AttributeDisclosure) -> Result<DiscloseOutcome, DoorError> {
        self.with_session(token, SessionState::Created, |session| {
            if let Err(reason) = self.verifier.verify(d) {
                tracing::info!(%reason, issuer = %d.issuer_id, "rejected attribute disclosure");
                return Ok(DiscloseOutcome::Invalid);
            }
            let record = HashRecord::of_attribute(&d.attribute_value);
            if self.store.insert_if_absent(&record)? {
                session.state = SessionState::AttributesVerified;
                session.attribute_hash = Some(record.to_hex());
                Ok(DiscloseOutcome::Accepted)
            } else {
                tracing::info!("duplicate identity, denying registration");
                session.state = SessionState::Expired;
                Ok(DiscloseOutcome::Duplicate)
            }
        })
    }

    pub fn complete_registration(&self, token: &str, user_public_key: &[u8]) -> Result<CertifiedKey, DoorError> {
        self.with_session(token, SessionState::AttributesVerified, |session| {
            let cert = certify_key_der(&self.keys.private, user_public_key)?;
            session.state = SessionState::Completed;
            tracing::info!(fingerprint = %hex::encode(&cert.fingerprint()[..8]), "registration completed");
            Ok(cert)
        })
    }

    /// Expires sessions older than the TTL and forgets finished sessions
    /// older than twice the TTL. Returns the number newly expired.
    pub fn expire_sessions(&self, now: u64) -> usize {
        let mut sessions = self.sessions.write().expect("session table poisoned");
        let mut expired = 0;
        sessions.retain(|_, entry| {
            let mut session = entry.lock().expect("session poisoned");
            if self.timed_out(&session, now) {
                session.state = SessionState::Expired;
                expired += 1;
            }
            let finished = matches!(session.state, SessionState::Completed | SessionState::Expired);
            !(finished && now.saturating_sub(session.created_at) > 2 * self.ttl_s)
        });
        expired
    }
}
