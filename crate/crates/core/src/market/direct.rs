//! Bids and chat messages. These travel point to point inside envelopes and
//! are never gossiped.

use serde::{Deserialize, Serialize};

use super::listing::{validate_currency, ContentId};
use super::MarketError;
use crate::canonical::{hex32, to_canonical_vec};
use crate::crypto::sha256;

pub const MAX_CHAT_BODY_CHARS: usize = 4096;

/// An advisory offer on a listing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bid {
    pub content_id: ContentId,
    pub amount: u64,
    pub currency: String,
    #[serde(with = "hex32")]
    pub bidder_fingerprint: [u8; 32],
    pub created_at: u64,
}

impl Bid {
    pub fn new(
        content_id: ContentId,
        amount: u64,
        currency: impl Into<String>,
        bidder_fingerprint: [u8; 32],
        created_at: u64,
    ) -> Result<Self, MarketError> {
        let bid = Self { content_id, amount, currency: currency.into(), bidder_fingerprint, created_at };
        bid.validate()?;
        Ok(bid)
    }

    pub fn validate(&self) -> Result<(), MarketError> {
        validate_currency(&self.currency)
    }
}

pub fn make_bid_payload(bid: &Bid) -> Vec<u8> {
    to_canonical_vec(bid).expect("bid always serializes")
}

pub fn parse_bid_payload(bytes: &[u8]) -> Result<Bid, MarketError> {
    let bid: Bid = serde_json::from_slice(bytes).map_err(|e| MarketError::Parse(e.to_string()))?;
    bid.validate()?;
    Ok(bid)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatMessage {
    #[serde(with = "hex32")]
    pub channel_id: [u8; 32],
    pub body: String,
    pub sent_at: u64,
}

impl ChatMessage {
    pub fn new(channel_id: [u8; 32], body: impl Into<String>, sent_at: u64) -> Result<Self, MarketError> {
        let msg = Self { channel_id, body: body.into(), sent_at };
        msg.validate()?;
        Ok(msg)
    }

    pub fn validate(&self) -> Result<(), MarketError> {
        if self.body.is_empty() || self.body.chars().count() > MAX_CHAT_BODY_CHARS {
            return Err(MarketError::Validation(format!("chat body must be 1 to {MAX_CHAT_BODY_CHARS} characters")));
        }
        Ok(())
    }
}

/// Channel between two participants about one listing:
/// SHA-256(min(a, b) || max(a, b) || content_id).
pub fn chat_channel_id(fp_a: &[u8; 32], fp_b: &[u8; 32], content_id: &ContentId) -> Result<[u8; 32], MarketError> {
    if fp_a == fp_b {
        return Err(MarketError::Validation("a chat channel needs two distinct participants".into()));
    }
    let (lo, hi) = if fp_a < fp_b { (fp_a, fp_b) } else { (fp_b, fp_a) };
    let mut material = Vec::with_capacity(96);
    material.extend_from_slice(lo);
    material.extend_from_slice(hi);
    material.extend_from_slice(&content_id.0);
    Ok(sha256(&material))
}

/// Plaintext carried inside an envelope.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DirectMessage {
    Bid(Bid),
    Chat(ChatMessage),
}

impl DirectMessage {
    pub fn to_bytes(&self) -> Vec<u8> {
        to_canonical_vec(self).expect("direct message always serializes")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, MarketError> {
        let msg: Self = serde_json::from_slice(bytes).map_err(|e| MarketError::Parse(e.to_string()))?;
        match &msg {
            DirectMessage::Bid(b) => b.validate()?,
            DirectMessage::Chat(c) => c.validate()?,
        }
        Ok(msg)
    }
}
