//! Replicated listing store.
//!
//! State is three sets: live listings, removed listings with the tombstones
//! that removed them, and pending tombstones whose listing has not been seen
//! yet. Merging is a union over these sets followed by normalization, which
//! makes it idempotent and order-independent for a fixed clock.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::listing::{verify_signed_listing, ContentId, ListingVerdict, SignedListing, Tombstone, MAX_LISTING_TTL_S};
use super::MarketError;
use crate::canonical::to_canonical_vec;
use crate::crypto::{CertifiedKey, KeyPair, PublicKey};

/// Tombstones are kept this long past the removed listing's expiry.
pub const TOMBSTONE_GRACE_S: u64 = 24 * 3600;
/// Upper bound on unmatched tombstones held while waiting for their listing.
pub const MAX_PENDING_TOMBSTONES: usize = 10_000;

const TOMBSTONES_FILE: &str = "tombstones.json";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeReport {
    pub accepted: usize,
    pub rejected: usize,
    pub duplicates: usize,
    pub tombstones_applied: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct Removal {
    listing: SignedListing,
    tombstones: BTreeSet<Tombstone>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct TombstoneFile {
    removed: Vec<Removal>,
    pending: Vec<Tombstone>,
}

pub struct ListingStore {
    server_key: PublicKey,
    listings: BTreeMap<ContentId, SignedListing>,
    removed: BTreeMap<ContentId, Removal>,
    pending: BTreeSet<Tombstone>,
    dir: Option<PathBuf>,
}

impl PartialEq for ListingStore {
    fn eq(&self, other: &Self) -> bool {
        self.listings == other.listings && self.removed == other.removed && self.pending == other.pending
    }
}

impl std::fmt::Debug for ListingStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ListingStore")
            .field("listings", &self.listings.keys().collect::<Vec<_>>())
            .field("removed", &self.removed.keys().collect::<Vec<_>>())
            .field("pending", &self.pending.len())
            .finish()
    }
}

impl ListingStore {
    pub fn in_memory(server_key: PublicKey) -> Self {
        Self { server_key, listings: BTreeMap::new(), removed: BTreeMap::new(), pending: BTreeSet::new(), dir: None }
    }

    /// Opens a write-through store persisted as `{content_id}.json` files plus
    /// `tombstones.json` in `dir`. Everything on disk is re-verified.
    pub fn open(dir: impl AsRef<Path>, server_key: PublicKey, now: u64) -> Result<Self, MarketError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let mut listings = Vec::new();
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            let is_listing =
                path.extension().is_some_and(|e| e == "json") && path.file_name().is_some_and(|n| n != TOMBSTONES_FILE);
            if !is_listing {
                continue;
            }
            match serde_json::from_slice::<SignedListing>(&fs::read(&path)?) {
                Ok(sl) => listings.push(sl),
                Err(err) => tracing::warn!(path = %path.display(), %err, "skipping unreadable listing file"),
            }
        }
        let tombs: TombstoneFile = match fs::read(dir.join(TOMBSTONES_FILE)) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| MarketError::Parse(e.to_string()))?,
            Err(err) if err.kind() == io::ErrorKind::NotFound => TombstoneFile::default(),
            Err(err) => return Err(err.into()),
        };

        let mut store = Self::in_memory(server_key);
        let mut tombstones = tombs.pending;
        for removal in tombs.removed {
            tombstones.extend(removal.tombstones);
            listings.push(removal.listing);
        }
        store.merge_inner(&listings, &tombstones, now);
        store.expire_inner(now);
        store.dir = Some(dir);
        store.rewrite_all()?;
        Ok(store)
    }

    pub fn server_key(&self) -> &PublicKey {
        &self.server_key
    }

    pub fn len(&self) -> usize {
        self.listings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.listings.is_empty()
    }

    pub fn get(&self, id: &ContentId) -> Option<&SignedListing> {
        self.listings.get(id)
    }

    pub fn listings(&self) -> impl Iterator<Item = &SignedListing> {
        self.listings.values()
    }

    pub fn is_removed(&self, id: &ContentId) -> bool {
        self.removed.contains_key(id)
    }

    /// Every tombstone the store knows, matched or pending.
    pub fn tombstones(&self) -> Vec<Tombstone> {
        self.removed.values().flat_map(|r| r.tombstones.iter().cloned()).chain(self.pending.iter().cloned()).collect()
    }

    /// Non-expired listings plus all tombstones, as pushed to peers.
    pub fn snapshot(&self, now: u64) -> (Vec<SignedListing>, Vec<Tombstone>) {
        let listings = self.listings.values().filter(|l| l.listing.expires_at > now).cloned().collect();
        (listings, self.tombstones())
    }

    pub fn merge(
        &mut self,
        batch: &[SignedListing],
        tombs: &[Tombstone],
        now: u64,
    ) -> Result<MergeReport, MarketError> {
        let (report, dirty) = self.merge_inner(batch, tombs, now);
        self.persist(&dirty)?;
        Ok(report)
    }

    fn merge_inner(&mut self, batch: &[SignedListing], tombs: &[Tombstone], now: u64) -> (MergeReport, Dirty) {
        let mut report = MergeReport::default();
        let mut dirty = Dirty::default();

        for tomb in tombs {
            if let Some(listing) = self.listings.get(&tomb.content_id) {
                if tomb.verify_for(listing) {
                    let listing = self.listings.remove(&tomb.content_id).expect("present");
                    self.removed
                        .insert(tomb.content_id, Removal { listing, tombstones: BTreeSet::from([tomb.clone()]) });
                    dirty.removed_files.push(tomb.content_id);
                    dirty.tombstones = true;
                    report.tombstones_applied += 1;
                }
            } else if let Some(removal) = self.removed.get_mut(&tomb.content_id) {
                if tomb.verify_for(&removal.listing) && removal.tombstones.insert(tomb.clone()) {
                    dirty.tombstones = true;
                    report.tombstones_applied += 1;
                }
            } else if !self.pending.contains(tomb)
                && !pending_stale(tomb, now)
                && self.pending.len() < MAX_PENDING_TOMBSTONES
            {
                self.pending.insert(tomb.clone());
                dirty.tombstones = true;
            }
        }

        for sl in batch {
            let id = sl.content_id;
            if let Some(removal) = self.removed.get_mut(&id) {
                let smaller =
                    (&sl.owner_cert, &sl.signature) < (&removal.listing.owner_cert, &removal.listing.signature);
                if smaller && verify_signed_listing(&self.server_key, sl, now) == ListingVerdict::Valid {
                    removal.listing = sl.clone();
                    dirty.tombstones = true;
                }
                report.duplicates += 1;
                continue;
            }
            if verify_signed_listing(&self.server_key, sl, now) != ListingVerdict::Valid
                || sl.listing.validate().is_err()
            {
                report.rejected += 1;
                continue;
            }
            if let Some(existing) = self.listings.get_mut(&id) {
                // The owner may have signed the same content twice; keep a
                // deterministic representative so merge order does not matter.
                if (&sl.owner_cert, &sl.signature) < (&existing.owner_cert, &existing.signature) {
                    *existing = sl.clone();
                    dirty.written.push(id);
                }
                report.duplicates += 1;
                continue;
            }
            let matching: Vec<Tombstone> = self.pending.iter().filter(|t| t.content_id == id).cloned().collect();
            let valid: BTreeSet<Tombstone> = matching.iter().filter(|t| t.verify_for(sl)).cloned().collect();
            for t in &matching {
                self.pending.remove(t);
                dirty.tombstones = true;
            }
            if valid.is_empty() {
                self.listings.insert(id, sl.clone());
                dirty.written.push(id);
                report.accepted += 1;
            } else {
                report.tombstones_applied += valid.len();
                report.duplicates += 1;
                self.removed.insert(id, Removal { listing: sl.clone(), tombstones: valid });
            }
        }
        (report, dirty)
    }

    /// Removes a listing owned by `cert` and returns the tombstone to gossip.
    pub fn remove_listing(
        &mut self,
        keys: &KeyPair,
        cert: &CertifiedKey,
        id: &ContentId,
        now: u64,
    ) -> Result<Tombstone, MarketError> {
        let listing = self.listings.get(id).ok_or(MarketError::NotFound(*id))?;
        if listing.listing.owner_fingerprint != cert.fingerprint() || cert.public_key != keys.public.as_der() {
            return Err(MarketError::NotOwner);
        }
        let tomb = Tombstone::sign(keys, *id, now);
        let (report, dirty) = self.merge_inner(&[], std::slice::from_ref(&tomb), now);
        debug_assert_eq!(report.tombstones_applied, 1);
        self.persist(&dirty)?;
        Ok(tomb)
    }

    /// Drops listings with `expires_at <= now` and tombstones past their
    /// grace period. Returns the number of listings dropped.
    pub fn expire(&mut self, now: u64) -> Result<usize, MarketError> {
        let (count, dirty) = self.expire_inner(now);
        self.persist(&dirty)?;
        Ok(count)
    }

    fn expire_inner(&mut self, now: u64) -> (usize, Dirty) {
        let mut dirty = Dirty::default();
        let expired: Vec<ContentId> =
            self.listings.iter().filter(|(_, sl)| sl.listing.expires_at <= now).map(|(id, _)| *id).collect();
        for id in &expired {
            self.listings.remove(id);
            dirty.removed_files.push(*id);
        }
        let before = (self.removed.len(), self.pending.len());
        self.removed.retain(|_, r| r.listing.listing.expires_at.saturating_add(TOMBSTONE_GRACE_S) > now);
        self.pending.retain(|t| !pending_stale(t, now));
        dirty.tombstones = before != (self.removed.len(), self.pending.len());
        (expired.len(), dirty)
    }

    fn persist(&self, dirty: &Dirty) -> Result<(), MarketError> {
        let Some(dir) = &self.dir else {
            return Ok(());
        };
        for id in &dirty.written {
            if let Some(sl) = self.listings.get(id) {
                write_atomic(&dir.join(format!("{id}.json")), &to_canonical_vec(sl)?)?;
            }
        }
        for id in &dirty.removed_files {
            match fs::remove_file(dir.join(format!("{id}.json"))) {
                Err(err) if err.kind() != io::ErrorKind::NotFound => return Err(err.into()),
                _ => {}
            }
        }
        if dirty.tombstones {
            self.write_tombstones(dir)?;
        }
        Ok(())
    }

    fn write_tombstones(&self, dir: &Path) -> Result<(), MarketError> {
        let file = TombstoneFile {
            removed: self.removed.values().cloned().collect(),
            pending: self.pending.iter().cloned().collect(),
        };
        write_atomic(&dir.join(TOMBSTONES_FILE), &to_canonical_vec(&file)?)?;
        Ok(())
    }

    fn rewrite_all(&self) -> Result<(), MarketError> {
        let Some(dir) = &self.dir else {
            return Ok(());
        };
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            let stale = path
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.parse::<ContentId>().ok())
                .is_some_and(|id| !self.listings.contains_key(&id));
            if stale {
                fs::remove_file(&path)?;
            }
        }
        let dirty =
            Dirty { written: self.listings.keys().copied().collect(), removed_files: Vec::new(), tombstones: true };
        self.persist(&dirty)
    }
}

fn pending_stale(tomb: &Tombstone, now: u64) -> bool {
    tomb.removed_at.saturating_add(MAX_LISTING_TTL_S + TOMBSTONE_GRACE_S) <= now
}

#[derive(Default)]
struct Dirty {
    written: Vec<ContentId>,
    removed_files: Vec<ContentId>,
    tombstones: bool,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, bytes)?;
    fs::File::open(&tmp)?.sync_all()?;
    fs::rename(&tmp, path)
}
