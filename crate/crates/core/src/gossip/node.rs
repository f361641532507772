//! Transport-independent node state. The daemon feeds it events (timer
//! fires, inbound messages, local API calls) one at a time and performs the
//! network I/O it asks for.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::peer::{PeerId, PeerInfo, PeerTable, DEFAULT_TABLE_CAPACITY};
use super::wire::{Hello, MessageType, PeersRequest, PeersResponse, PushPayload, WireMessage};
use super::GossipError;
use crate::canonical::hex32;
use crate::crypto::{
    open_envelope, seal_envelope_at, verify_certification, CertifiedKey, Envelope, KeyPair, PublicKey,
};
use crate::market::{
    chat_channel_id, create_signed_listing, Bid, ChatMessage, ContentId, DirectMessage, ListingDraft, ListingStore,
    MarketError, MergeReport, SignedListing, Tombstone,
};

/// Consecutive failed deliveries after which a peer is dropped from the table.
pub const MAX_DELIVERY_FAILURES: u32 = 5;

#[derive(Clone, Debug)]
pub struct NodeIdentity {
    pub keys: KeyPair,
    pub cert: CertifiedKey,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatEntry {
    pub from: PeerId,
    pub message: ChatMessage,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Channel {
    #[serde(with = "hex32")]
    pub channel_id: [u8; 32],
    pub peer: PeerId,
    pub content_id: ContentId,
    pub messages: Vec<ChatEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceivedBid {
    pub from: PeerId,
    pub bid: Bid,
}

/// What an inbound envelope turned out to be.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Inbound {
    Bid(ReceivedBid),
    Chat { channel_id: [u8; 32], entry: ChatEntry },
}

pub struct GossipNode {
    identity: NodeIdentity,
    id: PeerId,
    server_key: PublicKey,
    listen_addr: String,
    k: usize,
    table: PeerTable,
    store: ListingStore,
    channels: BTreeMap<[u8; 32], Channel>,
    bids: Vec<ReceivedBid>,
    failures: HashMap<PeerId, u32>,
}

impl GossipNode {
    pub fn new(
        identity: NodeIdentity,
        server_key: PublicKey,
        listen_addr: impl Into<String>,
        k: usize,
        store: ListingStore,
    ) -> Result<Self, GossipError> {
        if !verify_certification(&server_key, &identity.cert) {
            return Err(GossipError::Uncertified("own key is not certified by the door server".into()));
        }
        if identity.cert.public_key != identity.keys.public.as_der() {
            return Err(GossipError::Uncertified("certificate does not match the node key".into()));
        }
        let id = PeerId::from_cert(&identity.cert)?;
        Ok(Self {
            id,
            server_key,
            listen_addr: listen_addr.into(),
            k: k.max(1),
            table: PeerTable::new(id, DEFAULT_TABLE_CAPACITY),
            store,
            channels: BTreeMap::new(),
            bids: Vec::new(),
            failures: HashMap::new(),
            identity,
        })
    }

    pub fn id(&self) -> PeerId {
        self.id
    }

    pub fn cert(&self) -> &CertifiedKey {
        &self.identity.cert
    }

    pub fn server_key(&self) -> &PublicKey {
        &self.server_key
    }

    pub fn listen_addr(&self) -> &str {
        &self.listen_addr
    }

    pub fn set_listen_addr(&mut self, addr: impl Into<String>) {
        self.listen_addr = addr.into();
    }

    pub fn table(&self) -> &PeerTable {
        &self.table
    }

    pub fn store(&self) -> &ListingStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ListingStore {
        &mut self.store
    }

    pub fn hello(&self, kind: MessageType) -> WireMessage {
        debug_assert!(matches!(kind, MessageType::Hello | MessageType::HelloAck));
        WireMessage::new(kind, &Hello { cert: self.identity.cert.clone(), listen_addr: self.listen_addr.clone() })
    }

    /// Verifies a `hello`/`hello-ack` and records the peer.
    pub fn handle_hello(&mut self, msg: &WireMessage, now: u64) -> Result<PeerInfo, GossipError> {
        let hello: Hello = msg.decode().map_err(|e| GossipError::Decode(e.to_string()))?;
        let info = PeerInfo {
            peer_id: PeerId::from_cert(&hello.cert)?,
            address: hello.listen_addr,
            cert: hello.cert,
            last_seen: now,
        };
        info.verify(&self.server_key)?;
        if info.peer_id != self.id {
            self.table.insert(info.clone(), &self.server_key)?;
        }
        Ok(info)
    }

    pub fn push_targets(&self) -> Vec<PeerInfo> {
        self.table.k_closest(&self.id, self.k)
    }

    /// One push per closest peer, each carrying the full non-expired store.
    pub fn on_timer_fire(&mut self, now: u64) -> Vec<(PeerInfo, WireMessage)> {
        if let Err(err) = self.store.expire(now) {
            tracing::warn!(%err, "listing expiry failed");
        }
        let (listings, tombstones) = self.store.snapshot(now);
        let msg = WireMessage::new(MessageType::Push, &PushPayload { listings, tombstones });
        self.push_targets().into_iter().map(|peer| (peer, msg.clone())).collect()
    }

    /// Merges a push received from `sender` (as identified by its hello) and
    /// returns the report plus the `push-ack` to send back.
    pub fn handle_push(
        &mut self,
        sender: &PeerInfo,
        msg: &WireMessage,
        now: u64,
    ) -> Result<(MergeReport, WireMessage), GossipError> {
        if let Err(err) = sender.verify(&self.server_key) {
            tracing::warn!(peer = %sender.peer_id, %err, "rejecting push from uncertified sender");
            return Err(err);
        }
        let payload: PushPayload = msg.decode().map_err(|e| GossipError::Decode(e.to_string()))?;
        let report = self.store.merge(&payload.listings, &payload.tombstones, now)?;
        let mut seen = sender.clone();
        seen.last_seen = now;
        self.table.insert(seen, &self.server_key)?;
        self.failures.remove(&sender.peer_id);
        Ok((report, WireMessage::new(MessageType::PushAck, &report)))
    }

    pub fn peers_request(&self) -> WireMessage {
        WireMessage::new(MessageType::PeersRequest, &PeersRequest {})
    }

    pub fn peers_response(&self) -> WireMessage {
        WireMessage::new(MessageType::PeersResponse, &PeersResponse { peers: self.table.iter().cloned().collect() })
    }

    /// Records every certified peer in a `peers-response`. Returns how many were new.
    pub fn handle_peers_response(&mut self, msg: &WireMessage) -> Result<usize, GossipError> {
        let resp: PeersResponse = msg.decode().map_err(|e| GossipError::Decode(e.to_string()))?;
        let mut added = 0;
        for peer in resp.peers {
            match self.table.insert(peer, &self.server_key) {
                Ok(true) => added += 1,
                Ok(false) => {}
                Err(err) => tracing::debug!(%err, "ignoring advertised peer"),
            }
        }
        Ok(added)
    }

    pub fn mark_reachable(&mut self, peer: &PeerId, now: u64) {
        self.failures.remove(peer);
        self.table.touch(peer, now);
    }

    /// Counts a failed delivery; drops the peer after repeated failures.
    pub fn mark_unreachable(&mut self, peer: &PeerId) {
        let count = self.failures.entry(*peer).or_default();
        *count += 1;
        if *count >= MAX_DELIVERY_FAILURES {
            tracing::info!(%peer, "dropping unreachable peer");
            self.table.remove(peer);
            self.failures.remove(peer);
        }
    }

    pub fn add_listing(&mut self, draft: &ListingDraft, now: u64) -> Result<SignedListing, GossipError> {
        let sl = create_signed_listing(&self.identity.keys, &self.identity.cert, draft, now)?;
        let report = self.store.merge(std::slice::from_ref(&sl), &[], now)?;
        debug_assert_eq!(report.accepted, 1);
        Ok(sl)
    }

    pub fn remove_listing(&mut self, id: &ContentId, now: u64) -> Result<Tombstone, GossipError> {
        Ok(self.store.remove_listing(&self.identity.keys, &self.identity.cert, id, now)?)
    }

    fn seal_for(&self, target: &PeerId, msg: &DirectMessage, now: u64) -> Result<(PeerInfo, WireMessage), GossipError> {
        let peer = self.table.get(target).cloned().ok_or(GossipError::NotFound(*target))?;
        let receiver_key = peer.cert.public_key()?;
        let env =
            seal_envelope_at(&self.identity.keys.private, &self.identity.cert, &receiver_key, &msg.to_bytes(), now)?;
        Ok((peer, WireMessage::new(MessageType::Envelope, &env)))
    }

    /// Builds an envelope carrying a bid on `content_id` for `target`.
    pub fn make_bid(
        &self,
        content_id: ContentId,
        amount: u64,
        currency: &str,
        target: &PeerId,
        now: u64,
    ) -> Result<(PeerInfo, WireMessage), GossipError> {
        if let Some(listing) = self.store.get(&content_id) {
            if listing.listing.currency != currency {
                return Err(MarketError::Validation(format!(
                    "bid currency {currency} does not match listing currency {}",
                    listing.listing.currency
                ))
                .into());
            }
        }
        let bid = Bid::new(content_id, amount, currency, self.id.0, now)?;
        self.seal_for(target, &DirectMessage::Bid(bid), now)
    }

    /// Builds a chat envelope. A new channel needs `route` (the other
    /// participant and the listing); an existing one is looked up by id.
    pub fn send_chat(
        &mut self,
        channel_id: [u8; 32],
        body: &str,
        route: Option<(PeerId, ContentId)>,
        now: u64,
    ) -> Result<(PeerInfo, WireMessage), GossipError> {
        let (peer, content_id) = match (self.channels.get(&channel_id), route) {
            (Some(ch), _) => (ch.peer, ch.content_id),
            (None, Some(route)) => route,
            (None, None) => return Err(GossipError::UnknownChannel),
        };
        if chat_channel_id(&self.id.0, &peer.0, &content_id)? != channel_id {
            return Err(GossipError::UnknownChannel);
        }
        let message = ChatMessage::new(channel_id, body, now)?;
        let out = self.seal_for(&peer, &DirectMessage::Chat(message.clone()), now)?;
        self.channels
            .entry(channel_id)
            .or_insert_with(|| Channel { channel_id, peer, content_id, messages: Vec::new() })
            .messages
            .push(ChatEntry { from: self.id, message });
        Ok(out)
    }

    /// Opens an envelope addressed to this node and files its contents.
    pub fn handle_envelope(&mut self, msg: &WireMessage, now: u64) -> Result<Inbound, GossipError> {
        let env: Envelope = msg.decode().map_err(|e| GossipError::Decode(e.to_string()))?;
        let opened = open_envelope(&self.identity.keys.private, &self.server_key, &env)?;
        let from = PeerId(opened.sender.fingerprint());
        match DirectMessage::from_bytes(&opened.plaintext)? {
            DirectMessage::Bid(bid) => {
                if bid.bidder_fingerprint != from.0 {
                    return Err(GossipError::Rejected("bidder fingerprint does not match sender".into()));
                }
                if let Some(listing) = self.store.get(&bid.content_id) {
                    if listing.listing.currency != bid.currency {
                        return Err(GossipError::Rejected("bid currency does not match listing".into()));
                    }
                }
                let received = ReceivedBid { from, bid };
                self.bids.push(received.clone());
                Ok(Inbound::Bid(received))
            }
            DirectMessage::Chat(message) => {
                let channel_id = message.channel_id;
                let content_id = match self.channels.get(&channel_id) {
                    Some(ch) if ch.peer == from => ch.content_id,
                    Some(_) => return Err(GossipError::UnknownChannel),
                    None => self.find_listing_for_channel(&from, &channel_id).ok_or(GossipError::UnknownChannel)?,
                };
                let entry = ChatEntry { from, message };
                self.channels
                    .entry(channel_id)
                    .or_insert_with(|| Channel { channel_id, peer: from, content_id, messages: Vec::new() })
                    .messages
                    .push(entry.clone());
                tracing::debug!(channel = %hex::encode(&channel_id[..8]), now, "chat message received");
                Ok(Inbound::Chat { channel_id, entry })
            }
        }
    }

    fn find_listing_for_channel(&self, from: &PeerId, channel_id: &[u8; 32]) -> Option<ContentId> {
        self.store
            .listings()
            .map(|l| l.content_id)
            .find(|cid| chat_channel_id(&self.id.0, &from.0, cid).ok().as_ref() == Some(channel_id))
    }

    pub fn channels(&self) -> impl Iterator<Item = &Channel> {
        self.channels.values()
    }

    pub fn channel(&self, id: &[u8; 32]) -> Option<&Channel> {
        self.channels.get(id)
    }

    pub fn bids(&self) -> &[ReceivedBid] {
        &self.bids
    }
}
