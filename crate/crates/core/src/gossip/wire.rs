//! Frame layout: `len: u32 BE` (type byte + payload) `|| type: u8 || payload`,
//! where the payload is canonical JSON.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::peer::PeerInfo;
use crate::canonical::to_canonical_vec;
use crate::crypto::CertifiedKey;
use crate::market::{MergeReport, SignedListing, Tombstone};

/// Largest accepted value of the length prefix.
pub const MAX_FRAME_LEN: usize = 16 * 1024 * 1024;
pub const HEADER_LEN: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageType {
    Hello = 1,
    HelloAck = 2,
    Push = 3,
    PushAck = 4,
    Envelope = 5,
    PeersRequest = 6,
    PeersResponse = 7,
}

impl MessageType {
    pub const ALL: [MessageType; 7] = [
        MessageType::Hello,
        MessageType::HelloAck,
        MessageType::Push,
        MessageType::PushAck,
        MessageType::Envelope,
        MessageType::PeersRequest,
        MessageType::PeersResponse,
    ];
}

impl TryFrom<u8> for MessageType {
    type Error = FrameError;

    fn try_from(b: u8) -> Result<Self, FrameError> {
        MessageType::ALL.into_iter().find(|t| *t as u8 == b).ok_or(FrameError::UnknownType(b))
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FrameError {
    #[error("incomplete frame: need {needed} more bytes")]
    Incomplete { needed: usize },
    #[error("frame length {0} exceeds the {MAX_FRAME_LEN}-byte limit")]
    Oversize(usize),
    #[error("frame has no type byte")]
    Empty,
    #[error("unknown message type {0}")]
    UnknownType(u8),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WireMessage {
    pub kind: MessageType,
    pub payload: Vec<u8>,
}

impl WireMessage {
    pub fn new<T: Serialize>(kind: MessageType, payload: &T) -> Self {
        Self { kind, payload: to_canonical_vec(payload).expect("wire payloads always serialize") }
    }

    pub fn decode<T: DeserializeOwned>(&self) -> Result<T, serde_json::Error> {
        serde_json::from_slice(&self.payload)
    }

    /// Parses the part of a frame after the length prefix.
    pub fn from_body(body: &[u8]) -> Result<Self, FrameError> {
        let (&kind, payload) = body.split_first().ok_or(FrameError::Empty)?;
        Ok(Self { kind: MessageType::try_from(kind)?, payload: payload.to_vec() })
    }
}

pub fn frame_encode(msg: &WireMessage) -> Result<Vec<u8>, FrameError> {
    let len = msg.payload.len() + 1;
    if len > MAX_FRAME_LEN {
        return Err(FrameError::Oversize(len));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + len);
    out.extend_from_slice(&(len as u32).to_be_bytes());
    out.push(msg.kind as u8);
    out.extend_from_slice(&msg.payload);
    Ok(out)
}

/// Validates a length prefix before any body bytes are read.
pub fn frame_len(header: [u8; HEADER_LEN]) -> Result<usize, FrameError> {
    let len = u32::from_be_bytes(header) as usize;
    if len == 0 {
        return Err(FrameError::Empty);
    }
    if len > MAX_FRAME_LEN {
        return Err(FrameError::Oversize(len));
    }
    Ok(len)
}

/// Decodes one frame from the front of `buf`, returning it and the number of
/// bytes consumed.
pub fn frame_decode(buf: &[u8]) -> Result<(WireMessage, usize), FrameError> {
    let header: [u8; HEADER_LEN] = match buf.get(..HEADER_LEN) {
        Some(h) => h.try_into().expect("slice of header length"),
        None => return Err(FrameError::Incomplete { needed: HEADER_LEN - buf.len() }),
    };
    let len = frame_len(header)?;
    let body = buf
        .get(HEADER_LEN..HEADER_LEN + len)
        .ok_or_else(|| FrameError::Incomplete { needed: HEADER_LEN + len - buf.len() })?;
    Ok((WireMessage::from_body(body)?, HEADER_LEN + len))
}

/// Payload of `hello` and `hello-ack`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hello {
    pub cert: CertifiedKey,
    pub listen_addr: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PushPayload {
    pub listings: Vec<SignedListing>,
    pub tombstones: Vec<Tombstone>,
}

pub type PushAck = MergeReport;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeersRequest {}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeersResponse {
    pub peers: Vec<PeerInfo>,
}
