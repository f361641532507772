//! Listings, tombstones, bids and chat: the market's domain logic.

mod direct;
mod listing;
mod store;

use std::io;

use thiserror::Error;

pub use direct::{
    chat_channel_id, make_bid_payload, parse_bid_payload, Bid, ChatMessage, DirectMessage, MAX_CHAT_BODY_CHARS,
};
pub use listing::{
    create_signed_listing, verify_signed_listing, ContentId, Listing, ListingDraft, ListingVerdict, SignedListing,
    Tombstone, DEFAULT_LISTING_TTL_S, MAX_DESCRIPTION_CHARS, MAX_LISTING_TTL_S, MAX_TITLE_CHARS,
};
pub use store::{ListingStore, MergeReport, MAX_PENDING_TOMBSTONES, TOMBSTONE_GRACE_S};

#[derive(Debug, Error)]
pub enum MarketError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("listing {0} not found")]
    NotFound(ContentId),
    #[error("only the owner may remove a listing")]
    NotOwner,
    #[error("listing store I/O error: {0}")]
    Io(#[from] io::Error),
}

impl From<serde_json::Error> for MarketError {
    fn from(err: serde_json::Error) -> Self {
        MarketError::Parse(err.to_string())
    }
}
