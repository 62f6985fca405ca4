//! Client-side state machine: relay handshakes, windowed segment download
//! with per-segment retry, block advertisement and upload.

use std::collections::{BTreeMap, HashMap};
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use crate::chain::{merkle_root, Block};
use crate::wire::{BlockHash, Endpoint, Message};

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientConfig {
    pub window: usize,
    pub timeout_ms: u64,
    pub max_backoff_ms: u64,
    pub max_retries: u32,
    pub handshake_timeout_ms: u64,
    /// Interval between re-handshakes with a connected relay.
    pub rehandshake_ms: u64,
    /// Copies of each handshake ACK; nothing acknowledges an ACK, so a
    /// lost one would leave the relay unaware of the client.
    pub ack_copies: u32,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            window: 32,
            timeout_ms: 250,
            max_backoff_ms: 4000,
            max_retries: 8,
            handshake_timeout_ms: 500,
            rehandshake_ms: 30 * 60_000,
            ack_copies: 3,
        }
    }
}

/// How a client reaches one relay.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelayInfo {
    pub address: Endpoint,
    /// Extra addresses the relay may send from.
    pub sources: Vec<Ipv4Addr>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Idle,
    SynSent,
    Connected,
    CtrConnected,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientEvent {
    Timer,
    Inbound { from: Endpoint, msg: Message },
    LocalNewBlock(Block),
    /// A serialized block from a P2P neighbor.
    Gossip { from: NodeId, bytes: Vec<u8> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Send { to: Endpoint, msg: Message },
    /// Block delivered to a relay's controller after CTR.
    Upload { to: Endpoint, bytes: Vec<u8> },
    Gossip { to: NodeId, bytes: Vec<u8> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DownloadStatus {
    Active,
    Complete,
    Failed,
}

#[derive(Debug, Clone)]
struct Link {
    info: RelayInfo,
    phase: Phase,
    awaiting_synack: bool,
    syn_tries: u32,
    deadline: u64,
    /// Set once the relay has answered a post-handshake request.
    confirmed: bool,
    pending_upload: Option<BlockHash>,
    adv_sent: bool,
}

impl Link {
    fn usable(&self) -> bool {
        matches!(self.phase, Phase::Connected | Phase::CtrConnected)
    }
}

#[derive(Debug, Clone)]
struct Request {
    relay: usize,
    deadline: u64,
    tries: u32,
}

#[derive(Debug, Clone)]
struct Download {
    segs: Vec<Option<Vec<u8>>>,
    received: usize,
    next: usize,
    outstanding: BTreeMap<u16, Request>,
    sources: Vec<usize>,
    rr: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClientStats {
    pub get_segs: u64,
    pub retries: u64,
    pub blks_received: u64,
    pub uploads: u64,
    pub advs: u64,
}

#[derive(Debug, Clone)]
pub struct Client {
    cfg: ClientConfig,
    address: Endpoint,
    legacy: bool,
    links: Vec<Link>,
    by_ip: HashMap<Ipv4Addr, usize>,
    neighbors: Vec<NodeId>,
    blocks: HashMap<BlockHash, Vec<u8>>,
    downloads: BTreeMap<BlockHash, Download>,
    status: BTreeMap<BlockHash, DownloadStatus>,
    learned: Vec<(BlockHash, u64)>,
    sends_per_segment: HashMap<(BlockHash, u16), u32>,
    stats: ClientStats,
}

impl Client {
    /// A relay-aware client connected to `relays` and to `neighbors` over P2P.
    pub fn new(cfg: ClientConfig, address: Endpoint, relays: Vec<RelayInfo>, neighbors: Vec<NodeId>) -> Self {
        let mut by_ip = HashMap::new();
        for (i, r) in relays.iter().enumerate() {
            by_ip.insert(r.address.ip, i);
            for &ip in &r.sources {
                by_ip.insert(ip, i);
            }
        }
        let links = relays
            .into_iter()
            .map(|info| Link {
                info,
                phase: Phase::Idle,
                awaiting_synack: false,
                syn_tries: 0,
                deadline: 0,
                confirmed: false,
                pending_upload: None,
                adv_sent: false,
            })
            .collect();
        Client {
            cfg,
            address,
            legacy: false,
            links,
            by_ip,
            neighbors,
            blocks: HashMap::new(),
            downloads: BTreeMap::new(),
            status: BTreeMap::new(),
            learned: Vec::new(),
            sends_per_segment: HashMap::new(),
            stats: ClientStats::default(),
        }
    }

    /// An unmodified client: P2P only.
    pub fn legacy(address: Endpoint, neighbors: Vec<NodeId>) -> Self {
        let mut c = Client::new(ClientConfig::default(), address, Vec::new(), neighbors);
        c.legacy = true;
        c
    }

    pub fn address(&self) -> Endpoint {
        self.address
    }

    pub fn is_legacy(&self) -> bool {
        self.legacy
    }

    pub fn phase(&self, relay: usize) -> Phase {
        self.links[relay].phase
    }

    pub fn has_block(&self, h: &BlockHash) -> bool {
        self.blocks.contains_key(h)
    }

    pub fn block_bytes(&self, h: &BlockHash) -> Option<&[u8]> {
        self.blocks.get(h).map(Vec::as_slice)
    }

    pub fn download_status(&self, h: &BlockHash) -> Option<DownloadStatus> {
        self.status.get(h).copied()
    }

    /// Blocks in the order they were learned, with the time.
    pub fn learned(&self) -> &[(BlockHash, u64)] {
        &self.learned
    }

    pub fn stats(&self) -> &ClientStats {
        &self.stats
    }

    /// Largest number of GET_SEGs sent for any single segment.
    pub fn max_sends_per_segment(&self) -> u32 {
        self.sends_per_segment.values().copied().max().unwrap_or(0)
    }

    /// Opens handshakes with every relay.
    pub fn start(&mut self, now: u64) -> Vec<Action> {
        let mut out = Vec::new();
        for r in 0..self.links.len() {
            self.send_syn(r, now, &mut out);
        }
        out
    }

    /// Earliest time at which `step(Timer)` has work to do.
    pub fn next_deadline(&self) -> Option<u64> {
        let links = self
            .links
            .iter()
            .filter(|l| l.phase != Phase::Idle)
            .map(|l| l.deadline);
        let reqs = self
            .downloads
            .values()
            .flat_map(|d| d.outstanding.values().map(|r| r.deadline));
        links.chain(reqs).min()
    }

    pub fn step(&mut self, event: ClientEvent, now: u64) -> Vec<Action> {
        let mut out = Vec::new();
        match event {
            ClientEvent::Timer => self.on_timer(now, &mut out),
            ClientEvent::Inbound { from, msg } => {
                if let Some(&r) = self.by_ip.get(&from.ip) {
                    self.on_message(r, msg, now, &mut out);
                }
            }
            ClientEvent::LocalNewBlock(b) => {
                let bytes = b.to_bytes();
                self.learn(b.hash(), bytes, None, now, &mut out);
            }
            ClientEvent::Gossip { from, bytes } => {
                if let Ok(b) = Block::from_bytes(&bytes) {
                    if b.header.merkle_root == merkle_root(&b.body) {
                        self.learn(b.hash(), bytes, Some(from), now, &mut out);
                    }
                }
            }
        }
        out
    }

    fn send_syn(&mut self, r: usize, now: u64, out: &mut Vec<Action>) {
        let l = &mut self.links[r];
        if l.phase == Phase::Idle {
            l.phase = Phase::SynSent;
        }
        l.awaiting_synack = true;
        let backoff = self.cfg.handshake_timeout_ms << l.syn_tries.min(3);
        l.deadline = now + backoff;
        l.syn_tries += 1;
        out.push(Action::Send {
            to: l.info.address,
            msg: Message::Syn,
        });
    }

    fn on_timer(&mut self, now: u64, out: &mut Vec<Action>) {
        for r in 0..self.links.len() {
            let l = &self.links[r];
            if l.phase != Phase::Idle && now >= l.deadline {
                self.send_syn(r, now, out);
            }
        }
        let hashes: Vec<BlockHash> = self.downloads.keys().copied().collect();
        for h in hashes {
            let due: Vec<u16> = self.downloads[&h]
                .outstanding
                .iter()
                .filter(|(_, q)| q.deadline <= now)
                .map(|(&s, _)| s)
                .collect();
            for seg in due {
                let d = self.downloads.get_mut(&h).unwrap();
                let q = d.outstanding.remove(&seg).unwrap();
                if q.tries >= self.cfg.max_retries {
                    self.downloads.remove(&h);
                    self.status.insert(h, DownloadStatus::Failed);
                    break;
                }
                if !self.links[q.relay].confirmed && !self.links[q.relay].awaiting_synack {
                    // the ACK may have been lost
                    self.send_syn(q.relay, now, out);
                }
                self.stats.retries += 1;
                self.request(h, seg, q.tries + 1, now, out);
            }
            self.fill_window(h, now, out);
        }
    }

    fn on_message(&mut self, r: usize, msg: Message, now: u64, out: &mut Vec<Action>) {
        match msg {
            Message::SynAck { secret } => {
                let l = &mut self.links[r];
                if !l.awaiting_synack {
                    return;
                }
                l.awaiting_synack = false;
                l.syn_tries = 0;
                if l.phase == Phase::SynSent {
                    l.phase = Phase::Connected;
                }
                l.deadline = now + self.cfg.rehandshake_ms;
                for _ in 0..self.cfg.ack_copies.max(1) {
                    out.push(Action::Send {
                        to: l.info.address,
                        msg: Message::Ack { secret },
                    });
                }
                self.advertise_pending(r, out);
                let hashes: Vec<BlockHash> = self.downloads.keys().copied().collect();
                for h in hashes {
                    self.fill_window(h, now, out);
                }
            }
            Message::Ctr => {
                let l = &mut self.links[r];
                l.confirmed = true;
                l.phase = Phase::CtrConnected;
                if let Some(h) = l.pending_upload.take() {
                    let to = l.info.address;
                    if let Some(bytes) = self.blocks.get(&h) {
                        self.stats.uploads += 1;
                        out.push(Action::Upload { to, bytes: bytes.clone() });
                    }
                }
            }
            Message::Inv { hash, seg_count } => {
                if self.blocks.contains_key(&hash)
                    || self.status.get(&hash) == Some(&DownloadStatus::Failed)
                    || seg_count == 0
                {
                    return;
                }
                let d = self.downloads.entry(hash).or_insert_with(|| Download {
                    segs: vec![None; seg_count as usize],
                    received: 0,
                    next: 0,
                    outstanding: BTreeMap::new(),
                    sources: Vec::new(),
                    rr: 0,
                });
                if !d.sources.contains(&r) {
                    d.sources.push(r);
                }
                self.status.insert(hash, DownloadStatus::Active);
                self.fill_window(hash, now, out);
            }
            Message::Blk(b) => {
                self.links[r].confirmed = true;
                self.stats.blks_received += 1;
                let Some(d) = self.downloads.get_mut(&b.hash) else {
                    return;
                };
                let i = b.seg_id as usize;
                if i >= d.segs.len() || d.segs[i].is_some() || b.seg_count as usize != d.segs.len() {
                    return;
                }
                d.segs[i] = Some(b.payload);
                d.received += 1;
                d.outstanding.remove(&b.seg_id);
                if d.received == d.segs.len() {
                    let d = self.downloads.remove(&b.hash).unwrap();
                    let bytes: Vec<u8> = d.segs.into_iter().flat_map(Option::unwrap).collect();
                    let ok = Block::from_bytes(&bytes)
                        .is_ok_and(|blk| blk.hash() == b.hash && blk.header.merkle_root == merkle_root(&blk.body));
                    if ok {
                        self.status.insert(b.hash, DownloadStatus::Complete);
                        self.learn(b.hash, bytes, None, now, out);
                    } else {
                        self.status.insert(b.hash, DownloadStatus::Failed);
                    }
                } else {
                    self.fill_window(b.hash, now, out);
                }
            }
            _ => {}
        }
    }

    fn learn(&mut self, h: BlockHash, bytes: Vec<u8>, via_p2p: Option<NodeId>, now: u64, out: &mut Vec<Action>) {
        if self.blocks.contains_key(&h) {
            return;
        }
        let from_relay = via_p2p.is_none() && self.status.get(&h) == Some(&DownloadStatus::Complete);
        self.downloads.remove(&h);
        for &n in &self.neighbors {
            if Some(n) != via_p2p {
                out.push(Action::Gossip { to: n, bytes: bytes.clone() });
            }
        }
        self.blocks.insert(h, bytes);
        self.learned.push((h, now));
        if self.legacy || from_relay {
            return;
        }
        for r in 0..self.links.len() {
            let l = &mut self.links[r];
            l.pending_upload = Some(h);
            l.adv_sent = false;
            self.advertise_pending(r, out);
        }
    }

    fn advertise_pending(&mut self, r: usize, out: &mut Vec<Action>) {
        let l = &mut self.links[r];
        if let (true, false, Some(hash)) = (l.usable(), l.adv_sent, l.pending_upload) {
            l.adv_sent = true;
            self.stats.advs += 1;
            out.push(Action::Send {
                to: l.info.address,
                msg: Message::Adv { hash },
            });
        }
    }

    fn fill_window(&mut self, h: BlockHash, now: u64, out: &mut Vec<Action>) {
        loop {
            let Some(d) = self.downloads.get(&h) else { return };
            if d.outstanding.len() >= self.cfg.window {
                return;
            }
            let Some(seg) = (d.next..d.segs.len()).find(|&i| d.segs[i].is_none() && !d.outstanding.contains_key(&(i as u16)))
            else {
                return;
            };
            if !self.request(h, seg as u16, 0, now, out) {
                return;
            }
            self.downloads.get_mut(&h).unwrap().next = seg + 1;
        }
    }

    /// Sends one GET_SEG to the next usable source. Returns false when no
    /// source is connected yet.
    fn request(&mut self, h: BlockHash, seg: u16, tries: u32, now: u64, out: &mut Vec<Action>) -> bool {
        let d = self.downloads.get_mut(&h).unwrap();
        let n = d.sources.len();
        let Some(relay) = (0..n)
            .map(|i| d.sources[(d.rr + i) % n])
            .find(|&r| self.links[r].usable())
        else {
            return false;
        };
        d.rr = (d.rr + 1) % n.max(1);
        let wait = (self.cfg.timeout_ms << tries.min(16)).min(self.cfg.max_backoff_ms);
        d.outstanding.insert(
            seg,
            Request {
                relay,
                deadline: now + wait,
                tries,
            },
        );
        self.stats.get_segs += 1;
        *self.sends_per_segment.entry((h, seg)).or_default() += 1;
        out.push(Action::Send {
            to: self.links[relay].info.address,
            msg: Message::GetSeg { hash: h, seg_id: seg },
        });
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{toy_block, GENESIS};
    use crate::wire::{segment_block, Blk};

    fn relay() -> RelayInfo {
        RelayInfo {
            address: Endpoint::new(Ipv4Addr::new(10, 9, 9, 9), 8333),
            sources: vec![],
        }
    }

    fn connected_client() -> Client {
        let mut c = Client::new(ClientConfig::default(), Endpoint::new(Ipv4Addr::new(10, 0, 0, 2), 5000), vec![relay()], vec![]);
        assert_eq!(c.start(0), vec![Action::Send { to: relay().address, msg: Message::Syn }]);
        let out = c.step(ClientEvent::Inbound { from: relay().address, msg: Message::SynAck { secret: 42 } }, 1);
        let ack = Action::Send { to: relay().address, msg: Message::Ack { secret: 42 } };
        assert_eq!(out, vec![ack; ClientConfig::default().ack_copies as usize]);
        assert_eq!(c.phase(0), Phase::Connected);
        c
    }

    fn blks(b: &Block) -> Vec<Message> {
        let bytes = b.to_bytes();
        let segs = segment_block(&bytes, 1024).unwrap();
        let n = segs.len() as u16;
        segs.into_iter()
            .map(|s| Message::Blk(Blk { hash: b.hash(), seg_id: s.index, seg_count: n, payload: s.bytes, cached_sum: None }))
            .collect()
    }

    fn get_segs(out: &[Action]) -> Vec<u16> {
        out.iter()
            .filter_map(|a| match a {
                Action::Send { msg: Message::GetSeg { seg_id, .. }, .. } => Some(*seg_id),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn in_order_download_reassembles() {
        let mut c = connected_client();
        let b = toy_block(GENESIS, 2500, 1, 248);
        let out = c.step(ClientEvent::Inbound { from: relay().address, msg: Message::Inv { hash: b.hash(), seg_count: 3 } }, 2);
        assert_eq!(get_segs(&out), vec![0, 1, 2]);
        for m in blks(&b) {
            c.step(ClientEvent::Inbound { from: relay().address, msg: m }, 3);
        }
        assert_eq!(c.block_bytes(&b.hash()), Some(&b.to_bytes()[..]));
        assert_eq!(c.download_status(&b.hash()), Some(DownloadStatus::Complete));
    }

    #[test]
    fn lost_segment_is_requested_once_more() {
        let mut c = connected_client();
        let b = toy_block(GENESIS, 2500, 2, 248);
        c.step(ClientEvent::Inbound { from: relay().address, msg: Message::Inv { hash: b.hash(), seg_count: 3 } }, 0);
        let segs = blks(&b);
        c.step(ClientEvent::Inbound { from: relay().address, msg: segs[0].clone() }, 10);
        c.step(ClientEvent::Inbound { from: relay().address, msg: segs[2].clone() }, 10);
        assert!(get_segs(&c.step(ClientEvent::Timer, 249)).is_empty());
        assert_eq!(get_segs(&c.step(ClientEvent::Timer, 250)), vec![1]);
        c.step(ClientEvent::Inbound { from: relay().address, msg: segs[1].clone() }, 300);
        assert!(c.has_block(&b.hash()));
        assert_eq!(c.stats().get_segs, 4);
    }

    #[test]
    fn known_hash_is_not_requested() {
        let mut c = connected_client();
        let b = toy_block(GENESIS, 900, 3, 248);
        c.step(ClientEvent::LocalNewBlock(b.clone()), 0);
        let out = c.step(ClientEvent::Inbound { from: relay().address, msg: Message::Inv { hash: b.hash(), seg_count: 1 } }, 1);
        assert!(get_segs(&out).is_empty());
    }

    #[test]
    fn local_block_is_advertised_then_uploaded() {
        let mut c = connected_client();
        let b = toy_block(GENESIS, 900, 4, 248);
        let out = c.step(ClientEvent::LocalNewBlock(b.clone()), 5);
        assert_eq!(out, vec![Action::Send { to: relay().address, msg: Message::Adv { hash: b.hash() } }]);
        let out = c.step(ClientEvent::Inbound { from: relay().address, msg: Message::Ctr }, 6);
        assert_eq!(out, vec![Action::Upload { to: relay().address, bytes: b.to_bytes() }]);
        assert_eq!(c.phase(0), Phase::CtrConnected);
    }

    #[test]
    fn retry_budget_exhaustion_fails_the_download() {
        let mut c = connected_client();
        let b = toy_block(GENESIS, 900, 5, 248);
        c.step(ClientEvent::Inbound { from: relay().address, msg: Message::Inv { hash: b.hash(), seg_count: 1 } }, 0);
        let mut t = 0;
        while c.download_status(&b.hash()) == Some(DownloadStatus::Active) {
            t = c.next_deadline().unwrap().max(t);
            c.step(ClientEvent::Timer, t);
            assert!(t < 60_000);
        }
        assert_eq!(c.download_status(&b.hash()), Some(DownloadStatus::Failed));
        assert_eq!(c.max_sends_per_segment(), 1 + ClientConfig::default().max_retries);
    }

    #[test]
    fn no_requests_before_handshake() {
        let mut c = Client::new(ClientConfig::default(), Endpoint::new(Ipv4Addr::new(10, 0, 0, 3), 1), vec![relay()], vec![]);
        c.start(0);
        let b = toy_block(GENESIS, 900, 6, 248);
        let out = c.step(ClientEvent::Inbound { from: relay().address, msg: Message::Inv { hash: b.hash(), seg_count: 1 } }, 1);
        assert!(get_segs(&out).is_empty());
        let out = c.step(ClientEvent::Inbound { from: relay().address, msg: Message::SynAck { secret: 1 } }, 2);
        assert_eq!(get_segs(&out), vec![0]);
    }

    #[test]
    fn legacy_client_only_gossips() {
        let mut c = Client::legacy(Endpoint::new(Ipv4Addr::new(10, 0, 0, 4), 1), vec![7, 8]);
        let b = toy_block(GENESIS, 900, 7, 248);
        let out = c.step(ClientEvent::Gossip { from: 7, bytes: b.to_bytes() }, 0);
        assert_eq!(out, vec![Action::Gossip { to: 8, bytes: b.to_bytes() }]);
    }
}
