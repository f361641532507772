use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::GossipError;
use crate::canonical::hex32;
use crate::crypto::{verify_certification, CertifiedKey, PublicKey};

pub const DEFAULT_K: usize = 20;
pub const DEFAULT_TABLE_CAPACITY: usize = 256;

/// 256-bit node identifier: SHA-256 of the node's certified public key.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PeerId(#[serde(with = "hex32")] pub [u8; 32]);

impl PeerId {
    pub fn from_cert(cert: &CertifiedKey) -> Result<Self, GossipError> {
        cert.public_key().map_err(|e| GossipError::Encoding(e.to_string()))?;
        Ok(Self(cert.fingerprint()))
    }
}

impl fmt::Display for PeerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for PeerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PeerId({})", &hex::encode(self.0)[..12])
    }
}

impl FromStr for PeerId {
    type Err = GossipError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        hex32::parse(s).map(PeerId).map_err(GossipError::Encoding)
    }
}

/// XOR of two ids, read as a big-endian unsigned integer. The derived `Ord`
/// on the byte array is exactly that numeric order.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Distance(pub [u8; 32]);

impl fmt::Debug for Distance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Distance({})", hex::encode(self.0))
    }
}

pub fn xor_distance(a: &PeerId, b: &PeerId) -> Distance {
    let mut out = [0u8; 32];
    for (o, (x, y)) in out.iter_mut().zip(a.0.iter().zip(b.0.iter())) {
        *o = x ^ y;
    }
    Distance(out)
}

/// The `k` items closest to `target`, ascending by distance, ties broken by
/// peer id.
pub fn k_closest_by<T, F>(items: impl IntoIterator<Item = T>, id_of: F, target: &PeerId, k: usize) -> Vec<T>
where
    F: Fn(&T) -> PeerId,
{
    let mut keyed: Vec<((Distance, PeerId), T)> = items
        .into_iter()
        .map(|item| {
            let id = id_of(&item);
            ((xor_distance(&id, target), id), item)
        })
        .collect();
    if k < keyed.len() {
        keyed.select_nth_unstable_by(k, |a, b| a.0.cmp(&b.0));
        keyed.truncate(k);
    }
    keyed.sort_unstable_by_key(|a| a.0);
    keyed.into_iter().map(|(_, item)| item).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeerInfo {
    pub peer_id: PeerId,
    pub address: String,
    pub cert: CertifiedKey,
    pub last_seen: u64,
}

impl PeerInfo {
    /// Checks that the id matches the certificate and the certificate was
    /// issued by the door server.
    pub fn verify(&self, server_key: &PublicKey) -> Result<(), GossipError> {
        if self.cert.fingerprint() != self.peer_id.0 {
            return Err(GossipError::Uncertified("peer id does not match certificate".into()));
        }
        if !verify_certification(server_key, &self.cert) {
            return Err(GossipError::Uncertified("certificate not issued by the door server".into()));
        }
        Ok(())
    }
}

/// Flat set of certified peers, keyed by id. Never contains the owner.
#[derive(Clone, Debug)]
pub struct PeerTable {
    own_id: PeerId,
    capacity: usize,
    peers: BTreeMap<PeerId, PeerInfo>,
}

impl PeerTable {
    pub fn new(own_id: PeerId, capacity: usize) -> Self {
        Self { own_id, capacity: capacity.max(1), peers: BTreeMap::new() }
    }

    pub fn own_id(&self) -> &PeerId {
        &self.own_id
    }

    pub fn len(&self) -> usize {
        self.peers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.peers.is_empty()
    }

    pub fn get(&self, id: &PeerId) -> Option<&PeerInfo> {
        self.peers.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &PeerInfo> {
        self.peers.values()
    }

    pub fn remove(&mut self, id: &PeerId) -> Option<PeerInfo> {
        self.peers.remove(id)
    }

    /// Verifies and records `info`. Returns true if the peer was new. An
    /// existing entry gets the newer address and `last_seen`. When full, the
    /// least recently seen peer is evicted.
    pub fn insert(&mut self, info: PeerInfo, server_key: &PublicKey) -> Result<bool, GossipError> {
        if info.peer_id == self.own_id {
            return Ok(false);
        }
        info.verify(server_key)?;
        if let Some(existing) = self.peers.get_mut(&info.peer_id) {
            if info.last_seen >= existing.last_seen {
                existing.address = info.address;
                existing.last_seen = info.last_seen;
            }
            return Ok(false);
        }
        if self.peers.len() >= self.capacity {
            let stalest = self
                .peers
                .values()
                .min_by_key(|p| (p.last_seen, p.peer_id))
                .map(|p| p.peer_id)
                .expect("table is non-empty");
            self.peers.remove(&stalest);
        }
        self.peers.insert(info.peer_id, info);
        Ok(true)
    }

    pub fn touch(&mut self, id: &PeerId, now: u64) {
        if let Some(p) = self.peers.get_mut(id) {
            p.last_seen = p.last_seen.max(now);
        }
    }

    pub fn k_closest(&self, target: &PeerId, k: usize) -> Vec<PeerInfo> {
        k_closest_by(self.peers.values(), |p| p.peer_id, target, k.max(1)).into_iter().cloned().collect()
    }
}
