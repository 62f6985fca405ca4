//! Data-plane model of a relay switch.
//!
//! The switch answers handshakes and segment requests itself, admits block
//! advertisers to a capped whitelist, forwards whitelisted uploads to its
//! controller and bans heavy requesters. Per-packet work is a fixed number of
//! filter probes plus at most one segment lookup; periodic maintenance
//! (filter rotation, key rotation, expiry) runs off the packet path.

use std::collections::VecDeque;
use std::net::Ipv4Addr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::sketch::{bloom_params, BloomFilter, CountMinSketch};
use crate::wire::{
    blk_prefix, ones_sum, udp_checksum_cached, Blk, BlockHash, Endpoint, Message, Segment,
    BLK_PREFIX_LEN, UDP_HEADER_LEN,
};

pub const MINUTE_MS: u64 = 60_000;
pub const DAY_MS: u64 = 86_400_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSpec {
    pub items: u64,
    pub false_positive: f64,
}

impl FilterSpec {
    pub const fn new(items: u64, false_positive: f64) -> Self {
        FilterSpec {
            items,
            false_positive,
        }
    }

    pub fn size_bytes(&self) -> f64 {
        bloom_params(self.items, self.false_positive).0 as f64 / 8.0
    }
}

/// Structure sizes and timing of a switch. Loadable from TOML; missing keys
/// take the defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwitchConfig {
    /// Size of each of the two alternating peer filters.
    pub peerlist: FilterSpec,
    pub whitelist: FilterSpec,
    pub blacklist: FilterSpec,
    pub hashmem: FilterSpec,
    pub whitelist_threshold: usize,
    pub whitelist_ttl_ms: u64,
    /// Committed blocks kept; a staged update occupies one of them.
    pub block_slots: usize,
    pub block_slot_bytes: usize,
    pub segment_bytes: usize,
    pub sketch_depth: usize,
    pub sketch_width: usize,
    pub sentlimit_epoch_ms: u64,
    /// Ban once a source requests more than this many blocks' worth of
    /// segments within one epoch.
    pub sentlimit_blocks: u32,
    pub peer_epoch_ms: u64,
    pub key_rotation_ms: u64,
    pub key_grace_ms: u64,
    /// How long an advertised hash stays claimed by its first advertiser.
    pub adv_claim_ms: u64,
    pub seed: u64,
}

impl Default for SwitchConfig {
    fn default() -> Self {
        SwitchConfig {
            peerlist: FilterSpec::new(100_000, 1e-4),
            whitelist: FilterSpec::new(100, 1e-4),
            blacklist: FilterSpec::new(1_000_000, 1e-3),
            hashmem: FilterSpec::new(518_823, 1e-4),
            whitelist_threshold: 100,
            whitelist_ttl_ms: 4 * DAY_MS,
            block_slots: 1,
            block_slot_bytes: 1 << 20,
            segment_bytes: 1024,
            sketch_depth: 4,
            sketch_width: 2048,
            sentlimit_epoch_ms: 10 * MINUTE_MS,
            sentlimit_blocks: 3,
            peer_epoch_ms: 60 * MINUTE_MS,
            key_rotation_ms: 10 * MINUTE_MS,
            key_grace_ms: MINUTE_MS,
            adv_claim_ms: MINUTE_MS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryRow {
    pub component: &'static str,
    pub items: u64,
    pub false_positive: Option<f64>,
    pub bytes: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryReport {
    pub rows: Vec<MemoryRow>,
}

impl MemoryReport {
    pub fn total_bytes(&self) -> f64 {
        self.rows.iter().map(|r| r.bytes).sum()
    }

    pub fn row(&self, component: &str) -> Option<&MemoryRow> {
        self.rows.iter().find(|r| r.component == component)
    }
}

impl SwitchConfig {
    pub fn memory_report(&self) -> MemoryReport {
        let f = |component, spec: FilterSpec, copies: f64| MemoryRow {
            component,
            items: spec.items,
            false_positive: Some(spec.false_positive),
            bytes: spec.size_bytes() * copies,
        };
        let segments = self.block_slot_bytes.div_ceil(self.segment_bytes.max(1));
        MemoryReport {
            rows: vec![
                f("BlackList", self.blacklist, 1.0),
                f("WhiteList", self.whitelist, 1.0),
                f("HashMem", self.hashmem, 1.0),
                f("PeerList", self.peerlist, 2.0),
                MemoryRow {
                    component: "BlockMem",
                    items: self.block_slots as u64,
                    false_positive: None,
                    bytes: (self.block_slots * (self.block_slot_bytes + 2 * segments)) as f64,
                },
                MemoryRow {
                    component: "SentLimit",
                    items: (self.sketch_depth * self.sketch_width) as u64,
                    false_positive: None,
                    bytes: (self.sketch_depth * self.sketch_width * 2) as f64,
                },
                MemoryRow {
                    component: "WhiteListEntries",
                    items: self.whitelist_threshold as u64,
                    false_positive: None,
                    // address plus expiry
                    bytes: (self.whitelist_threshold * 12) as f64,
                },
            ],
        }
    }
}

/// Handshake secret for a source under `key`: the first four bytes of
/// SHA-256 over key, address and port.
pub fn secret_for(ip: Ipv4Addr, port: u16, key: &[u8; 8]) -> u32 {
    let mut h = Sha256::new();
    h.update(key);
    h.update(ip.octets());
    h.update(port.to_be_bytes());
    let d = h.finalize();
    u32::from_be_bytes([d[0], d[1], d[2], d[3]])
}

/// What reaches the switch from the network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Inbound {
    Wire(Message),
    /// Traffic addressed to the controller (a block upload).
    ToController(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outbound {
    pub src: Endpoint,
    pub dest: Endpoint,
    pub msg: Message,
    /// UDP checksum assembled from the cached segment sum (BLK only).
    pub udp_checksum: Option<u16>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ToController {
    Note(Message),
    Upload { from: Endpoint, bytes: Vec<u8> },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SwitchOutput {
    pub replies: Vec<Outbound>,
    pub to_controller: Vec<ToController>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SwitchStats {
    pub packets: u64,
    pub dropped_blacklisted: u64,
    pub synacks: u64,
    pub acks_accepted: u64,
    pub acks_rejected: u64,
    pub blks_sent: u64,
    pub segs_refused: u64,
    pub bans: u64,
    pub ctrs: u64,
    pub advs_dropped: u64,
    pub uploads_forwarded: u64,
    pub uploads_dropped: u64,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum UpdateError {
    #[error("BLK without a preceding UPD")]
    NoUpdate,
    #[error("BLK for a different block than the staged update")]
    HashMismatch,
    #[error("BLK declares {got} segments, update has {want}")]
    SegCountMismatch { got: u16, want: u16 },
    #[error("BLK without a cached sum")]
    MissingSum,
    #[error("cached sum of segment {seg_id} does not match its payload")]
    BadSum { seg_id: u16 },
    #[error("segment {seg_id} delivered twice")]
    Duplicate { seg_id: u16 },
    #[error("update incomplete: {missing} segments missing")]
    Incomplete { missing: usize },
    #[error("block of {0} bytes exceeds the block slot")]
    Oversize(usize),
    #[error("unexpected {0} from controller")]
    Unexpected(&'static str),
}

#[derive(Debug, Clone)]
struct CachedBlock {
    hash: BlockHash,
    segments: Vec<Segment>,
}

#[derive(Debug, Clone)]
struct Staging {
    hash: BlockHash,
    seg_count: u16,
    segments: Vec<Option<Segment>>,
    filled: usize,
}

#[derive(Debug, Clone)]
pub struct Switch {
    cfg: SwitchConfig,
    address: Endpoint,
    source_pool: Vec<Ipv4Addr>,
    rotate_next: usize,
    rng: ChaCha8Rng,

    peers_active: BloomFilter,
    peers_previous: BloomFilter,
    peer_epoch_end: u64,
    peer_admissions: u64,

    whitelist_gate: BloomFilter,
    whitelist: Vec<(Ipv4Addr, u64)>,
    next_expiry: u64,
    claims: VecDeque<(BlockHash, u64)>,

    blacklist: BloomFilter,
    hashmem: BloomFilter,

    committed: VecDeque<CachedBlock>,
    staging: Option<Staging>,

    sentlimit: CountMinSketch,
    sentlimit_epoch_end: u64,

    key: [u8; 8],
    previous_key: Option<([u8; 8], u64)>,
    key_rotation_at: u64,

    last_probes: u32,
    stats: SwitchStats,
}

impl Switch {
    pub fn new(cfg: SwitchConfig, address: Endpoint, source_pool: Vec<Ipv4Addr>) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut seed = || rng.next_u64();
        let filter = |s: FilterSpec, seed: u64| BloomFilter::with_capacity(s.items, s.false_positive, seed);
        let peers_active = filter(cfg.peerlist, seed());
        let peers_previous = filter(cfg.peerlist, seed());
        let whitelist_gate = filter(cfg.whitelist, seed());
        let blacklist = filter(cfg.blacklist, seed());
        let hashmem = filter(cfg.hashmem, seed());
        let sentlimit = CountMinSketch::new(cfg.sketch_depth, cfg.sketch_width, seed());
        let mut key = [0u8; 8];
        rng.fill_bytes(&mut key);
        Switch {
            address,
            source_pool,
            rotate_next: 0,
            peers_active,
            peers_previous,
            peer_epoch_end: cfg.peer_epoch_ms,
            peer_admissions: 0,
            whitelist_gate,
            whitelist: Vec::new(),
            next_expiry: u64::MAX,
            claims: VecDeque::new(),
            blacklist,
            hashmem,
            committed: VecDeque::new(),
            staging: None,
            sentlimit,
            sentlimit_epoch_end: cfg.sentlimit_epoch_ms,
            key,
            previous_key: None,
            key_rotation_at: cfg.key_rotation_ms,
            last_probes: 0,
            stats: SwitchStats::default(),
            rng,
            cfg,
        }
    }

    pub fn config(&self) -> &SwitchConfig {
        &self.cfg
    }

    pub fn address(&self) -> Endpoint {
        self.address
    }

    pub fn stats(&self) -> &SwitchStats {
        &self.stats
    }

    pub fn key(&self) -> [u8; 8] {
        self.key
    }

    /// Handshakes that added their source to the active peerlist; a
    /// re-handshake in a later epoch counts again.
    pub fn peer_admissions(&self) -> u64 {
        self.peer_admissions
    }

    pub fn whitelist_len(&self) -> usize {
        self.whitelist.len()
    }

    pub fn whitelist_entries(&self) -> &[(Ipv4Addr, u64)] {
        &self.whitelist
    }

    pub fn is_blacklisted(&self, ip: Ipv4Addr) -> bool {
        self.blacklist.contains(&ip.octets())
    }

    /// Sources inserted into the blacklist so far.
    pub fn blacklist_len(&self) -> u64 {
        self.blacklist.inserted()
    }

    pub fn is_connected(&self, from: Endpoint) -> bool {
        let k = from.key();
        self.peers_active.contains(&k) || self.peers_previous.contains(&k)
    }

    pub fn knows_hash(&self, hash: &BlockHash) -> bool {
        self.hashmem.contains(&hash.0)
    }

    /// Hashes of the blocks currently served, newest first.
    pub fn served_blocks(&self) -> Vec<BlockHash> {
        self.served().map(|b| b.hash).collect()
    }

    /// Bit probes and segment lookups made by the last `handle_packet`.
    pub fn last_probes(&self) -> u32 {
        self.last_probes
    }

    /// Upper bound on per-packet probes implied by the configuration.
    pub fn probe_bound(&self) -> u32 {
        let h = |f: &BloomFilter| f.hash_count();
        2 * h(&self.blacklist)
            + 2 * h(&self.peers_active)
            + 2 * h(&self.whitelist_gate)
            + h(&self.hashmem)
            + self.cfg.sketch_depth as u32
            + 1
    }

    fn served(&self) -> impl Iterator<Item = &CachedBlock> {
        let n = self.cfg.block_slots - usize::from(self.staging.is_some());
        self.committed.iter().take(n)
    }

    fn probe(&mut self, which: Filter, key: &[u8]) -> bool {
        let f = match which {
            Filter::Blacklist => &self.blacklist,
            Filter::PeersActive => &self.peers_active,
            Filter::PeersPrevious => &self.peers_previous,
            Filter::Whitelist => &self.whitelist_gate,
            Filter::HashMem => &self.hashmem,
        };
        let (hit, n) = f.probe(key);
        self.last_probes += n;
        hit
    }

    fn connected(&mut self, from: Endpoint) -> bool {
        let k = from.key();
        self.probe(Filter::PeersActive, &k) || self.probe(Filter::PeersPrevious, &k)
    }

    fn next_source(&mut self) -> Endpoint {
        if self.source_pool.is_empty() {
            return self.address;
        }
        let ip = self.source_pool[self.rotate_next % self.source_pool.len()];
        self.rotate_next = self.rotate_next.wrapping_add(1);
        Endpoint::new(ip, self.address.port)
    }

    /// Source address for the next outgoing packet; cycles through the pool
    /// when one is configured.
    pub fn egress(&mut self) -> Endpoint {
        self.next_source()
    }

    fn reply(&mut self, out: &mut SwitchOutput, dest: Endpoint, msg: Message) {
        let src = self.next_source();
        out.replies.push(Outbound {
            src,
            dest,
            msg,
            udp_checksum: None,
        });
    }

    /// Epoch rotations and expiry. Runs before every packet but only does
    /// work when a deadline has passed.
    pub fn maintain(&mut self, now: u64) {
        while now >= self.peer_epoch_end {
            std::mem::swap(&mut self.peers_active, &mut self.peers_previous);
            self.peers_active.clear();
            self.peer_epoch_end += self.cfg.peer_epoch_ms.max(1);
        }
        if now >= self.sentlimit_epoch_end {
            self.sentlimit.clear();
            let e = self.cfg.sentlimit_epoch_ms.max(1);
            self.sentlimit_epoch_end = (now / e + 1) * e;
        }
        if now >= self.key_rotation_at {
            self.previous_key = Some((self.key, now + self.cfg.key_grace_ms));
            self.rng.fill_bytes(&mut self.key);
            let e = self.cfg.key_rotation_ms.max(1);
            self.key_rotation_at = (now / e + 1) * e;
        }
        if now >= self.next_expiry {
            self.whitelist.retain(|&(_, exp)| exp > now);
            self.whitelist_gate.clear();
            for (ip, _) in &self.whitelist {
                self.whitelist_gate.insert(&ip.octets());
            }
            self.next_expiry = self.whitelist.iter().map(|e| e.1).min().unwrap_or(u64::MAX);
        }
        while self.claims.front().is_some_and(|c| c.1 <= now) {
            self.claims.pop_front();
        }
    }

    pub fn handle_packet(&mut self, from: Endpoint, pkt: Inbound, now: u64) -> SwitchOutput {
        self.maintain(now);
        self.last_probes = 0;
        self.stats.packets += 1;
        let mut out = SwitchOutput::default();
        let ip_key = from.ip.octets();
        if self.probe(Filter::Blacklist, &ip_key) {
            self.stats.dropped_blacklisted += 1;
            return out;
        }
        let m = match pkt {
            Inbound::ToController(bytes) => {
                if self.probe(Filter::Whitelist, &ip_key) {
                    self.stats.uploads_forwarded += 1;
                    out.to_controller.push(ToController::Upload { from, bytes });
                } else {
                    self.stats.uploads_dropped += 1;
                }
                return out;
            }
            Inbound::Wire(m) => m,
        };
        match m {
            Message::Syn => {
                let secret = secret_for(from.ip, from.port, &self.key);
                self.stats.synacks += 1;
                self.reply(&mut out, from, Message::SynAck { secret });
            }
            Message::Ack { secret } => {
                let current = secret_for(from.ip, from.port, &self.key);
                let previous = self
                    .previous_key
                    .filter(|(_, until)| now < *until)
                    .map(|(k, _)| secret_for(from.ip, from.port, &k));
                if secret == current || previous == Some(secret) {
                    // repeated ACK copies refresh the entry without a new admission
                    if !self.probe(Filter::PeersActive, &from.key()) {
                        self.peer_admissions += 1;
                    }
                    self.last_probes += self.peers_active.insert(&from.key());
                    self.stats.acks_accepted += 1;
                    out.to_controller.push(ToController::Note(Message::NConn {
                        addr: from.ip,
                        port: from.port,
                    }));
                } else {
                    self.stats.acks_rejected += 1;
                }
            }
            Message::GetSeg { hash, seg_id } => self.serve_segment(&mut out, from, hash, seg_id),
            Message::Adv { hash } => self.advertise(&mut out, from, hash, now),
            _ => {}
        }
        out
    }

    fn serve_segment(&mut self, out: &mut SwitchOutput, from: Endpoint, hash: BlockHash, seg_id: u16) {
        if !self.connected(from) {
            self.stats.segs_refused += 1;
            return;
        }
        let ip_key = from.ip.octets();
        let count = self.sentlimit.add(&ip_key);
        self.last_probes += self.cfg.sketch_depth as u32;
        let per_block = self
            .served()
            .next()
            .map_or(self.cfg.block_slot_bytes.div_ceil(self.cfg.segment_bytes.max(1)), |b| {
                b.segments.len()
            });
        if count as u64 > self.cfg.sentlimit_blocks as u64 * per_block as u64 {
            self.last_probes += self.blacklist.insert(&ip_key);
            self.stats.bans += 1;
            return;
        }
        self.last_probes += 1;
        let found = self
            .served()
            .find(|b| b.hash == hash)
            .and_then(|b| b.segments.get(seg_id as usize).map(|s| (s.clone(), b.segments.len())));
        let Some((seg, seg_count)) = found else {
            self.stats.segs_refused += 1;
            return;
        };
        let src = self.next_source();
        let len = seg.bytes.len() as u16;
        let prefix = blk_prefix(&hash, seg_id, seg_count as u16, len);
        let udp_len = (UDP_HEADER_LEN + BLK_PREFIX_LEN) as u16 + len;
        let checksum = udp_checksum_cached(src.ip, from.ip, src.port, from.port, udp_len, &prefix, seg.cached_sum);
        self.stats.blks_sent += 1;
        out.replies.push(Outbound {
            src,
            dest: from,
            msg: Message::Blk(Blk {
                hash,
                seg_id,
                seg_count: seg_count as u16,
                payload: seg.bytes,
                cached_sum: None,
            }),
            udp_checksum: Some(checksum),
        });
    }

    fn advertise(&mut self, out: &mut SwitchOutput, from: Endpoint, hash: BlockHash, now: u64) {
        if !self.connected(from) || self.probe(Filter::HashMem, &hash.0) {
            self.stats.advs_dropped += 1;
            return;
        }
        if self.probe(Filter::Whitelist, &from.ip.octets()) {
            self.stats.ctrs += 1;
            self.reply(out, from, Message::Ctr);
            return;
        }
        // at most one new admission per advertised block
        let claimed = self.claims.iter().any(|c| c.0 == hash);
        if claimed || self.whitelist.len() >= self.cfg.whitelist_threshold {
            self.stats.advs_dropped += 1;
            return;
        }
        let expiry = now + self.cfg.whitelist_ttl_ms;
        self.whitelist.push((from.ip, expiry));
        self.next_expiry = self.next_expiry.min(expiry);
        self.last_probes += self.whitelist_gate.insert(&from.ip.octets());
        self.claims.push_back((hash, now + self.cfg.adv_claim_ms));
        self.stats.ctrs += 1;
        self.reply(out, from, Message::Ctr);
    }

    /// Drops a whitelist entry, e.g. after its upload failed validation.
    pub fn revoke_whitelist(&mut self, ip: Ipv4Addr) {
        let before = self.whitelist.len();
        self.whitelist.retain(|e| e.0 != ip);
        if self.whitelist.len() != before {
            self.whitelist_gate.clear();
            for (ip, _) in &self.whitelist {
                self.whitelist_gate.insert(&ip.octets());
            }
        }
    }

    /// Feeds one controller message. Returns the hash of a block when this
    /// message completes its update.
    pub fn handle_controller(&mut self, m: &Message) -> Result<Option<BlockHash>, UpdateError> {
        match m {
            Message::Upd { hash, seg_count } => {
                self.staging = Some(Staging {
                    hash: *hash,
                    seg_count: *seg_count,
                    segments: vec![None; *seg_count as usize],
                    filled: 0,
                });
                Ok(None)
            }
            Message::Blk(b) => {
                let st = self.staging.as_mut().ok_or(UpdateError::NoUpdate)?;
                if b.hash != st.hash {
                    return Err(UpdateError::HashMismatch);
                }
                if b.seg_count != st.seg_count {
                    return Err(UpdateError::SegCountMismatch {
                        got: b.seg_count,
                        want: st.seg_count,
                    });
                }
                let sum = b.cached_sum.ok_or(UpdateError::MissingSum)?;
                if sum != ones_sum(&b.payload) {
                    return Err(UpdateError::BadSum { seg_id: b.seg_id });
                }
                let slot = &mut st.segments[b.seg_id as usize];
                if slot.is_some() {
                    self.staging = None;
                    return Err(UpdateError::Duplicate { seg_id: b.seg_id });
                }
                *slot = Some(Segment {
                    index: b.seg_id,
                    bytes: b.payload.clone(),
                    cached_sum: sum,
                });
                st.filled += 1;
                if st.filled < st.segments.len() {
                    return Ok(None);
                }
                let st = self.staging.take().unwrap();
                let segments: Vec<Segment> = st.segments.into_iter().map(Option::unwrap).collect();
                let size: usize = segments.iter().map(|s| s.bytes.len()).sum();
                if size > self.cfg.block_slot_bytes {
                    return Err(UpdateError::Oversize(size));
                }
                self.hashmem.insert(&st.hash.0);
                self.committed.push_front(CachedBlock {
                    hash: st.hash,
                    segments,
                });
                self.committed.truncate(self.cfg.block_slots.max(1));
                Ok(Some(st.hash))
            }
            other => Err(UpdateError::Unexpected(other.name())),
        }
    }

    /// Applies an UPD and its BLKs as one unit. An incomplete or malformed
    /// update is discarded and the previously committed blocks stay served.
    pub fn apply_update(&mut self, upd: &Message, blks: &[Message]) -> Result<BlockHash, UpdateError> {
        let result = (|| {
            self.handle_controller(upd)?;
            for b in blks {
                if let Some(h) = self.handle_controller(b)? {
                    return Ok(h);
                }
            }
            let missing = self
                .staging
                .as_ref()
                .map_or(0, |s| s.segments.len() - s.filled);
            Err(UpdateError::Incomplete { missing })
        })();
        if result.is_err() {
            self.staging = None;
        }
        result
    }

    /// Discards a partially received update.
    pub fn abort_update(&mut self) {
        self.staging = None;
    }
}

#[derive(Clone, Copy)]
enum Filter {
    Blacklist,
    PeersActive,
    PeersPrevious,
    Whitelist,
    HashMem,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::segment_block;

    fn ep(last: u8, port: u16) -> Endpoint {
        Endpoint::new(Ipv4Addr::new(10, 0, 0, last), port)
    }

    fn switch(cfg: SwitchConfig) -> Switch {
        Switch::new(cfg, ep(1, 8333), Vec::new())
    }

    fn handshake(sw: &mut Switch, from: Endpoint, now: u64) {
        let out = sw.handle_packet(from, Inbound::Wire(Message::Syn), now);
        let Message::SynAck { secret } = out.replies[0].msg else {
            panic!("expected SYNACK")
        };
        let out = sw.handle_packet(from, Inbound::Wire(Message::Ack { secret }), now);
        assert_eq!(out.to_controller.len(), 1);
    }

    fn update_msgs(block: &[u8]) -> (BlockHash, Message, Vec<Message>) {
        let hash = BlockHash::of(block);
        let segs = segment_block(block, 1024).unwrap();
        let n = segs.len() as u16;
        let blks = segs
            .into_iter()
            .map(|s| {
                Message::Blk(Blk {
                    hash,
                    seg_id: s.index,
                    seg_count: n,
                    payload: s.bytes,
                    cached_sum: Some(s.cached_sum),
                })
            })
            .collect();
        (hash, Message::Upd { hash, seg_count: n }, blks)
    }

    #[test]
    fn syn_gets_one_synack() {
        let mut sw = switch(SwitchConfig::default());
        let out = sw.handle_packet(ep(2, 1000), Inbound::Wire(Message::Syn), 0);
        assert_eq!(out.replies.len(), 1);
        assert!(matches!(out.replies[0].msg, Message::SynAck { .. }));
        assert!(out.to_controller.is_empty());
    }

    #[test]
    fn wrong_secret_changes_nothing() {
        let mut sw = switch(SwitchConfig::default());
        let c = ep(2, 1000);
        let good = secret_for(c.ip, c.port, &sw.key());
        let out = sw.handle_packet(c, Inbound::Wire(Message::Ack { secret: good ^ 1 }), 0);
        assert_eq!(out, SwitchOutput::default());
        assert!(!sw.is_connected(c));
        assert_eq!(sw.peer_admissions(), 0);
    }

    #[test]
    fn secrets_depend_on_port() {
        let key = [7u8; 8];
        let ip = Ipv4Addr::new(192, 0, 2, 9);
        assert_eq!(secret_for(ip, 5, &key), secret_for(ip, 5, &key));
        let distinct: std::collections::BTreeSet<u32> =
            (0..1000u16).map(|p| secret_for(ip, p, &key)).collect();
        assert!(distinct.len() >= 990);
    }

    #[test]
    fn old_secret_expires_after_grace() {
        let cfg = SwitchConfig {
            key_rotation_ms: 1000,
            key_grace_ms: 100,
            ..SwitchConfig::default()
        };
        let mut sw = switch(cfg);
        let c = ep(3, 7);
        let old = secret_for(c.ip, c.port, &sw.key());
        // rotation at 1000, grace until 1100
        let out = sw.handle_packet(c, Inbound::Wire(Message::Ack { secret: old }), 1050);
        assert_eq!(out.to_controller.len(), 1);
        let c2 = ep(4, 7);
        let old2 = {
            let cfg = SwitchConfig {
                key_rotation_ms: 1000,
                key_grace_ms: 100,
                ..SwitchConfig::default()
            };
            secret_for(c2.ip, c2.port, &switch(cfg).key())
        };
        let out = sw.handle_packet(c2, Inbound::Wire(Message::Ack { secret: old2 }), 1200);
        assert!(out.to_controller.is_empty());
    }

    #[test]
    fn serves_committed_segments_with_valid_checksums() {
        let mut sw = switch(SwitchConfig::default());
        let block: Vec<u8> = (0..3000u32).map(|i| (i * 7) as u8).collect();
        let (hash, upd, blks) = update_msgs(&block);
        assert_eq!(sw.apply_update(&upd, &blks), Ok(hash));
        let c = ep(9, 4444);
        handshake(&mut sw, c, 10);
        let out = sw.handle_packet(c, Inbound::Wire(Message::GetSeg { hash, seg_id: 1 }), 20);
        let r = &out.replies[0];
        let Message::Blk(b) = &r.msg else { panic!() };
        assert_eq!(b.payload, block[1024..2048]);
        let bytes = crate::wire::encode(&r.msg).unwrap();
        let udp_len = (8 + bytes.len()) as u16;
        let scratch = udp_checksum_cached(r.src.ip, c.ip, r.src.port, c.port, udp_len, &bytes, 0);
        assert_eq!(r.udp_checksum, Some(scratch));
    }

    #[test]
    fn unconnected_requests_are_ignored() {
        let mut sw = switch(SwitchConfig::default());
        let (hash, upd, blks) = update_msgs(&[1, 2, 3]);
        sw.apply_update(&upd, &blks).unwrap();
        let out = sw.handle_packet(ep(5, 1), Inbound::Wire(Message::GetSeg { hash, seg_id: 0 }), 0);
        assert!(out.replies.is_empty());
    }

    #[test]
    fn partial_update_is_not_served() {
        let cfg = SwitchConfig {
            block_slots: 2,
            ..SwitchConfig::default()
        };
        let mut sw = switch(cfg);
        let old: Vec<u8> = vec![9; 1500];
        let (old_hash, upd, blks) = update_msgs(&old);
        sw.apply_update(&upd, &blks).unwrap();
        let new: Vec<u8> = vec![4; 2000];
        let (new_hash, upd, blks) = update_msgs(&new);
        let err = sw.apply_update(&upd, &blks[..1]).unwrap_err();
        assert_eq!(err, UpdateError::Incomplete { missing: 1 });
        assert_eq!(sw.served_blocks(), vec![old_hash]);
        // the same holds while the update is still streaming in
        sw.handle_controller(&upd).unwrap();
        sw.handle_controller(&blks[0]).unwrap();
        let c = ep(6, 1);
        handshake(&mut sw, c, 0);
        let out = sw.handle_packet(c, Inbound::Wire(Message::GetSeg { hash: new_hash, seg_id: 1 }), 1);
        assert!(out.replies.is_empty());
        let out = sw.handle_packet(c, Inbound::Wire(Message::GetSeg { hash: old_hash, seg_id: 1 }), 1);
        assert_eq!(out.replies.len(), 1);
        assert_eq!(sw.handle_controller(&blks[1]), Ok(Some(new_hash)));
        assert_eq!(sw.served_blocks(), vec![new_hash, old_hash]);
    }

    #[test]
    fn corrupted_and_duplicate_segments() {
        let mut sw = switch(SwitchConfig::default());
        let (_, upd, mut blks) = update_msgs(&[5u8; 2048]);
        if let Message::Blk(b) = &mut blks[0] {
            b.cached_sum = Some(b.cached_sum.unwrap() ^ 1);
        }
        sw.handle_controller(&upd).unwrap();
        assert_eq!(sw.handle_controller(&blks[0]), Err(UpdateError::BadSum { seg_id: 0 }));
        let (_, upd, blks) = update_msgs(&[6u8; 2048]);
        sw.handle_controller(&upd).unwrap();
        sw.handle_controller(&blks[0]).unwrap();
        assert_eq!(sw.handle_controller(&blks[0]), Err(UpdateError::Duplicate { seg_id: 0 }));
        assert!(sw.served_blocks().is_empty());
    }

    #[test]
    fn whitelist_stops_at_threshold() {
        let cfg = SwitchConfig {
            whitelist_threshold: 100,
            ..SwitchConfig::default()
        };
        let mut sw = switch(cfg);
        for i in 0..101u32 {
            let c = Endpoint::new(Ipv4Addr::from(0x0A01_0000 + i), 1);
            handshake(&mut sw, c, 0);
            let hash = BlockHash::of(&i.to_be_bytes());
            let out = sw.handle_packet(c, Inbound::Wire(Message::Adv { hash }), 0);
            if i < 100 {
                assert_eq!(out.replies[0].msg, Message::Ctr);
            } else {
                assert!(out.replies.is_empty());
            }
        }
        assert_eq!(sw.whitelist_len(), 100);
    }

    #[test]
    fn known_hash_and_second_advertiser_are_dropped() {
        let mut sw = switch(SwitchConfig::default());
        let (hash, upd, blks) = update_msgs(&[1; 10]);
        sw.apply_update(&upd, &blks).unwrap();
        let (a, b) = (ep(20, 1), ep(21, 1));
        handshake(&mut sw, a, 0);
        handshake(&mut sw, b, 0);
        assert!(sw.handle_packet(a, Inbound::Wire(Message::Adv { hash }), 0).replies.is_empty());
        let fresh = BlockHash::of(b"fresh");
        assert_eq!(sw.handle_packet(a, Inbound::Wire(Message::Adv { hash: fresh }), 0).replies.len(), 1);
        assert!(sw.handle_packet(b, Inbound::Wire(Message::Adv { hash: fresh }), 0).replies.is_empty());
        assert_eq!(sw.whitelist_len(), 1);
    }

    #[test]
    fn whitelist_entries_expire() {
        let mut sw = switch(SwitchConfig::default());
        let c = ep(30, 1);
        handshake(&mut sw, c, 0);
        sw.handle_packet(c, Inbound::Wire(Message::Adv { hash: BlockHash::of(b"x") }), 0);
        let up = sw.handle_packet(c, Inbound::ToController(vec![1]), 1000);
        assert_eq!(up.to_controller.len(), 1);
        sw.maintain(4 * DAY_MS);
        assert_eq!(sw.whitelist_len(), 0);
        let up = sw.handle_packet(c, Inbound::ToController(vec![1]), 4 * DAY_MS);
        assert!(up.to_controller.is_empty());
    }

    #[test]
    fn heavy_requester_is_banned() {
        let mut sw = switch(SwitchConfig::default());
        let (hash, upd, blks) = update_msgs(&[3u8; 4096]);
        sw.apply_update(&upd, &blks).unwrap();
        let c = ep(40, 1);
        handshake(&mut sw, c, 0);
        let mut served = 0;
        for round in 0..10 {
            for s in 0..4 {
                let out = sw.handle_packet(c, Inbound::Wire(Message::GetSeg { hash, seg_id: s }), round);
                served += out.replies.len();
            }
        }
        assert_eq!(served, 12);
        assert!(sw.is_blacklisted(c.ip));
        assert!(sw.handle_packet(c, Inbound::Wire(Message::Syn), 20).replies.is_empty());
    }

    #[test]
    fn per_packet_work_is_bounded() {
        let mut sw = switch(SwitchConfig::default());
        let (hash, upd, blks) = update_msgs(&vec![8u8; 200_000]);
        sw.apply_update(&upd, &blks).unwrap();
        let bound = sw.probe_bound();
        let mut worst = 0;
        for i in 0..2000u32 {
            let c = Endpoint::new(Ipv4Addr::from(0x0B00_0000 + i), 9);
            handshake(&mut sw, c, 0);
            worst = worst.max(sw.last_probes());
            for m in [
                Message::GetSeg { hash, seg_id: (i % 190) as u16 },
                Message::Adv { hash: BlockHash::of(&i.to_be_bytes()) },
            ] {
                sw.handle_packet(c, Inbound::Wire(m), 0);
                worst = worst.max(sw.last_probes());
            }
        }
        assert!(worst <= bound, "{worst} > {bound}");
    }

    #[test]
    fn peers_survive_one_rotation() {
        let mut sw = switch(SwitchConfig::default());
        let c = ep(50, 1);
        handshake(&mut sw, c, 0);
        sw.maintain(60 * MINUTE_MS);
        assert!(sw.is_connected(c));
        sw.maintain(120 * MINUTE_MS);
        assert!(!sw.is_connected(c));
    }

    #[test]
    fn source_rotation_cycles_the_pool() {
        let pool = vec![Ipv4Addr::new(203, 0, 113, 1), Ipv4Addr::new(203, 0, 113, 2)];
        let mut sw = Switch::new(SwitchConfig::default(), ep(1, 8333), pool.clone());
        let (hash, upd, blks) = update_msgs(&[1u8; 3000]);
        sw.apply_update(&upd, &blks).unwrap();
        let c = ep(60, 1);
        handshake(&mut sw, c, 0);
        let srcs: Vec<Ipv4Addr> = (0..3)
            .map(|s| sw.handle_packet(c, Inbound::Wire(Message::GetSeg { hash, seg_id: s }), 0).replies[0].src.ip)
            .collect();
        assert!(srcs.iter().all(|ip| pool.contains(ip)));
        assert!(srcs.windows(2).all(|w| w[0] != w[1]));
    }

    #[test]
    fn default_memory_fits_five_megabytes() {
        let r = SwitchConfig::default().memory_report();
        let mb = |c: &str| r.row(c).unwrap().bytes / 1e6;
        assert!((mb("BlackList") - 1.80).abs() < 0.005);
        assert!((mb("HashMem") - 1.24).abs() < 0.005);
        assert!((mb("PeerList") - 0.48).abs() < 0.005);
        assert!(r.total_bytes() < 5e6, "{}", r.total_bytes());
    }

    #[test]
    fn config_reads_partial_toml() {
        let cfg: SwitchConfig = toml::from_str("block_slots = 2\n[whitelist]\nitems = 50\nfalse_positive = 0.001\n").unwrap();
        assert_eq!(cfg.block_slots, 2);
        assert_eq!(cfg.whitelist.items, 50);
        assert_eq!(cfg.sentlimit_blocks, 3);
        assert!(toml::from_str::<SwitchConfig>("nonsense = 1").is_err());
    }
}
