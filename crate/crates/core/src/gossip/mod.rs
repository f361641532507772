//! Peer identity and discovery, XOR-distance neighbour selection, framing,
//! and timer-driven push gossip of the listing store.

mod node;
mod peer;
mod timer;
mod wire;

use thiserror::Error;

use crate::crypto::CryptoError;
use crate::market::MarketError;

pub use node::{Channel, ChatEntry, GossipNode, Inbound, NodeIdentity, ReceivedBid, MAX_DELIVERY_FAILURES};
pub use peer::{k_closest_by, xor_distance, Distance, PeerId, PeerInfo, PeerTable, DEFAULT_K, DEFAULT_TABLE_CAPACITY};
pub use timer::{PushTimer, DEFAULT_PUSH_PERIOD};
pub use wire::{
    frame_decode, frame_encode, frame_len, FrameError, Hello, MessageType, PeersRequest, PeersResponse, PushAck,
    PushPayload, WireMessage, HEADER_LEN, MAX_FRAME_LEN,
};

#[derive(Debug, Error)]
pub enum GossipError {
    #[error("encoding error: {0}")]
    Encoding(String),
    #[error("undecodable message: {0}")]
    Decode(String),
    #[error("uncertified peer: {0}")]
    Uncertified(String),
    #[error("unknown peer {0}")]
    NotFound(PeerId),
    #[error("unknown chat channel")]
    UnknownChannel,
    #[error("rejected: {0}")]
    Rejected(String),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Market(#[from] MarketError),
}
