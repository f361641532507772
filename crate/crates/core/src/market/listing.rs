use std::fmt;
use std::str::FromStr;

use rand::rngs::OsRng;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::MarketError;
use crate::canonical::{b64, hex32, to_canonical_vec};
use crate::crypto::{sha256, sign_detached, verify_certification, verify_detached, CertifiedKey, KeyPair, PublicKey};

pub const MAX_TITLE_CHARS: usize = 140;
pub const MAX_DESCRIPTION_CHARS: usize = 4096;
pub const DEFAULT_LISTING_TTL_S: u64 = 7 * 24 * 3600;
pub const MAX_LISTING_TTL_S: u64 = 30 * 24 * 3600;

/// SHA-256 of a listing's canonical encoding.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ContentId(#[serde(with = "hex32")] pub [u8; 32]);

impl fmt::Display for ContentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for ContentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContentId({})", &hex::encode(self.0)[..12])
    }
}

impl FromStr for ContentId {
    type Err = MarketError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        hex32::parse(s).map(ContentId).map_err(MarketError::Validation)
    }
}

pub(crate) fn validate_currency(code: &str) -> Result<(), MarketError> {
    if code.len() == 3 && code.bytes().all(|b| b.is_ascii_uppercase()) {
        Ok(())
    } else {
        Err(MarketError::Validation(format!("currency {code:?} is not an ISO-4217 code")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Listing {
    pub title: String,
    pub description: String,
    /// Minor currency units.
    pub price_amount: u64,
    pub currency: String,
    #[serde(with = "hex32")]
    pub owner_fingerprint: [u8; 32],
    pub created_at: u64,
    pub expires_at: u64,
    pub nonce: u64,
}

impl Listing {
    pub fn validate(&self) -> Result<(), MarketError> {
        let title_len = self.title.chars().count();
        if self.title.trim().is_empty() || title_len > MAX_TITLE_CHARS {
            return Err(MarketError::Validation(format!("title must be 1 to {MAX_TITLE_CHARS} characters")));
        }
        if self.description.chars().count() > MAX_DESCRIPTION_CHARS {
            return Err(MarketError::Validation(format!(
                "description must be at most {MAX_DESCRIPTION_CHARS} characters"
            )));
        }
        validate_currency(&self.currency)?;
        if self.expires_at <= self.created_at {
            return Err(MarketError::Validation("expires_at must be after created_at".into()));
        }
        if self.expires_at - self.created_at > MAX_LISTING_TTL_S {
            return Err(MarketError::Validation(format!("listing lifetime exceeds {MAX_LISTING_TTL_S} s")));
        }
        Ok(())
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        to_canonical_vec(self).expect("listing always serializes")
    }

    pub fn content_id(&self) -> ContentId {
        ContentId(sha256(&self.canonical_bytes()))
    }
}

/// User-supplied listing fields.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ListingDraft {
    pub title: String,
    pub description: String,
    pub price_amount: u64,
    pub currency: String,
    #[serde(default = "default_ttl")]
    pub ttl_s: u64,
}

fn default_ttl() -> u64 {
    DEFAULT_LISTING_TTL_S
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignedListing {
    pub listing: Listing,
    pub content_id: ContentId,
    pub owner_cert: CertifiedKey,
    /// Owner's signature over the 32 content id bytes.
    #[serde(with = "b64")]
    pub signature: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ListingVerdict {
    Valid,
    BadCert,
    BadSignature,
    FingerprintMismatch,
    Expired,
}

pub fn create_signed_listing(
    keys: &KeyPair,
    cert: &CertifiedKey,
    draft: &ListingDraft,
    now: u64,
) -> Result<SignedListing, MarketError> {
    if cert.public_key != keys.public.as_der() {
        return Err(MarketError::Validation("certificate does not belong to this key pair".into()));
    }
    let listing = Listing {
        title: draft.title.clone(),
        description: draft.description.clone(),
        price_amount: draft.price_amount,
        currency: draft.currency.clone(),
        owner_fingerprint: cert.fingerprint(),
        created_at: now,
        expires_at: now.saturating_add(draft.ttl_s),
        nonce: OsRng.next_u64(),
    };
    listing.validate()?;
    let content_id = listing.content_id();
    let signature = sign_detached(&keys.private, &content_id.0);
    Ok(SignedListing { listing, content_id, owner_cert: cert.clone(), signature })
}

/// Checks, in order: certificate, owner fingerprint, signature (including the
/// content id recompute), expiry. Reports the first failure.
pub fn verify_signed_listing(server_key: &PublicKey, sl: &SignedListing, now: u64) -> ListingVerdict {
    if !verify_certification(server_key, &sl.owner_cert) {
        return ListingVerdict::BadCert;
    }
    if sl.owner_cert.fingerprint() != sl.listing.owner_fingerprint {
        return ListingVerdict::FingerprintMismatch;
    }
    let Ok(owner) = sl.owner_cert.public_key() else {
        return ListingVerdict::BadCert;
    };
    if sl.listing.content_id() != sl.content_id || !verify_detached(&owner, &sl.content_id.0, &sl.signature) {
        return ListingVerdict::BadSignature;
    }
    if sl.listing.expires_at <= now {
        return ListingVerdict::Expired;
    }
    ListingVerdict::Valid
}

/// Signed marker that removes a listing everywhere it has been replicated.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tombstone {
    pub content_id: ContentId,
    pub removed_at: u64,
    #[serde(with = "b64")]
    pub signature: Vec<u8>,
}

#[derive(Serialize)]
struct TombstoneSignedPart {
    content_id: ContentId,
    removed_at: u64,
}

impl Tombstone {
    pub fn signed_bytes(content_id: ContentId, removed_at: u64) -> Vec<u8> {
        to_canonical_vec(&TombstoneSignedPart { content_id, removed_at }).expect("tombstone always serializes")
    }

    pub fn sign(keys: &KeyPair, content_id: ContentId, removed_at: u64) -> Self {
        Self {
            content_id,
            removed_at,
            signature: sign_detached(&keys.private, &Self::signed_bytes(content_id, removed_at)),
        }
    }

    /// True iff this tombstone was signed by the owner of `listing`.
    pub fn verify_for(&self, listing: &SignedListing) -> bool {
        if self.content_id != listing.content_id {
            return false;
        }
        let Ok(owner) = listing.owner_cert.public_key() else {
            return false;
        };
        verify_detached(&owner, &Self::signed_bytes(self.content_id, self.removed_at), &self.signature)
    }
}
