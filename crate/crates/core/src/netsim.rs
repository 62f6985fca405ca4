//! Deterministic discrete-event network joining clients, relay switches and
//! controllers, with on-path adversaries and metric collection.
//!
//! Time is integer milliseconds. Every random choice (jitter, loss, spoofed
//! addresses) comes from one seeded ChaCha stream consumed in event order, so
//! a scenario and seed fully determine the trace.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::io::Write;
use std::net::Ipv4Addr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{toy_block, Block, GENESIS};
use crate::client::{Action, Client, ClientConfig, ClientEvent, DownloadStatus, NodeId, RelayInfo};
use crate::controller::{Controller, ControllerConfig, ControllerInput, ControllerOutput};
use crate::switch::{Inbound, Switch, SwitchConfig, ToController};
use crate::wire::{decode, encode, BlockHash, Endpoint, Message};

pub const PORT: u16 = 8333;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Client,
    Legacy,
    Relay,
    /// Completes the handshake, then requests every segment of each
    /// announced block `repeat` times.
    Abuser,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub name: String,
    pub role: Role,
    #[serde(default = "one")]
    pub repeat: u32,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkParams {
    pub delay_ms: u64,
    pub jitter_ms: u64,
    /// Per-packet loss probability for datagrams.
    pub loss: f64,
    pub backbone_delay_ms: u64,
}

impl Default for LinkParams {
    fn default() -> Self {
        LinkParams {
            delay_ms: 20,
            jitter_ms: 5,
            loss: 0.0,
            backbone_delay_ms: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    Source,
    Destination,
    Both,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Adversary {
    #[default]
    None,
    /// Drops traffic whose endpoints sit on opposite sides.
    DropCrossing { side_s: Vec<String>, side_n: Vec<String> },
    /// Drops datagrams carrying a relay's advertised address. With
    /// `victims` non-empty only traffic to or from those nodes is affected.
    DropByRelayIp {
        relays: Vec<String>,
        direction: Direction,
        #[serde(default)]
        victims: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    /// A client mines it, or a relay receives it over the backbone.
    pub origin: String,
    pub bytes: usize,
    pub at_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FloodKind {
    Syn,
    GetSeg,
    Adv,
}

/// Spoofed traffic aimed at one relay.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Flood {
    pub target: String,
    pub sources: u32,
    pub per_source: Vec<FloodKind>,
    pub rate_per_ms: u32,
    #[serde(default)]
    pub start_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopWhen {
    #[default]
    AllLearned,
    Time,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub stop_ms: u64,
    pub stop_when: StopWhen,
    /// Occupancy sampling interval; zero disables the timeline.
    pub sample_ms: u64,
    pub trace: bool,
    /// Window over which clients start their handshakes.
    pub start_spread_ms: u64,
    /// Extra sending addresses per relay.
    pub source_rotation: u32,
    /// Datagram copies of each INV a relay sends.
    pub inv_copies: u32,
    pub target_exp: u32,
    pub link: LinkParams,
    #[serde(rename = "node")]
    pub nodes: Vec<NodeSpec>,
    pub p2p: Vec<(String, String)>,
    #[serde(rename = "block")]
    pub blocks: Vec<BlockSpec>,
    pub adversary: Adversary,
    pub flood: Option<Flood>,
    pub switch: SwitchConfig,
    pub controller: ControllerConfig,
    pub client: ClientConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 0,
            stop_ms: 60_000,
            stop_when: StopWhen::AllLearned,
            sample_ms: 0,
            trace: false,
            start_spread_ms: 100,
            source_rotation: 0,
            inv_copies: 3,
            target_exp: 248,
            link: LinkParams::default(),
            nodes: Vec::new(),
            p2p: Vec::new(),
            blocks: Vec::new(),
            adversary: Adversary::None,
            flood: None,
            switch: SwitchConfig::default(),
            controller: ControllerConfig::default(),
            client: ClientConfig::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("duplicate node name {0:?}")]
    DuplicateName(String),
    #[error("unknown node {0:?}")]
    UnknownNode(String),
    #[error("{name:?} must be a {want}")]
    WrongRole { name: String, want: &'static str },
    #[error("node {0:?} is on both sides")]
    OverlappingSides(String),
    #[error("link loss {0} outside [0, 1)")]
    BadLoss(f64),
    #[error("segment size {0} outside 1..=1024")]
    BadSegment(usize),
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        Ok(toml::from_str(text)?)
    }

    fn index(&self) -> Result<HashMap<&str, NodeId>, ScenarioError> {
        let mut m = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if m.insert(n.name.as_str(), i).is_some() {
                return Err(ScenarioError::DuplicateName(n.name.clone()));
            }
        }
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let idx = self.index()?;
        let find = |name: &String| idx.get(name.as_str()).copied().ok_or_else(|| ScenarioError::UnknownNode(name.clone()));
        let role = |name: &String| find(name).map(|i| self.nodes[i].role);
        let peer_role = |r: Role| matches!(r, Role::Client | Role::Legacy);
        for (a, b) in &self.p2p {
            for n in [a, b] {
                if !peer_role(role(n)?) {
                    return Err(ScenarioError::WrongRole { name: n.clone(), want: "client" });
                }
            }
        }
        for b in &self.blocks {
            if role(&b.origin)? == Role::Abuser {
                return Err(ScenarioError::WrongRole { name: b.origin.clone(), want: "client or relay" });
            }
        }
        match &self.adversary {
            Adversary::None => {}
            Adversary::DropCrossing { side_s, side_n } => {
                let s: BTreeSet<NodeId> = side_s.iter().map(find).collect::<Result<_, _>>()?;
                for n in side_n {
                    if s.contains(&find(n)?) {
                        return Err(ScenarioError::OverlappingSides(n.clone()));
                    }
                }
            }
            Adversary::DropByRelayIp { relays, victims, .. } => {
                for r in relays {
                    if role(r)? != Role::Relay {
                        return Err(ScenarioError::WrongRole { name: r.clone(), want: "relay" });
                    }
                }
                for v in victims {
                    find(v)?;
                }
            }
        }
        if let Some(f) = &self.flood {
            if role(&f.target)? != Role::Relay {
                return Err(ScenarioError::WrongRole { name: f.target.clone(), want: "relay" });
            }
        }
        if !(0.0..1.0).contains(&self.link.loss) {
            return Err(ScenarioError::BadLoss(self.link.loss));
        }
        let seg = self.controller.segment_bytes;
        if seg == 0 || seg > crate::wire::MAX_SEGMENT {
            return Err(ScenarioError::BadSegment(seg));
        }
        Ok(())
    }
}

/// RFC 768 checksum computed word by word over pseudo-header, UDP header
/// and payload.
pub fn rfc768_checksum(src: Endpoint, dst: Endpoint, payload: &[u8]) -> u16 {
    let len = (8 + payload.len()) as u32;
    let mut sum: u32 = 0;
    let mut add = |hi: u8, lo: u8| {
        sum += u32::from(hi) << 8 | u32::from(lo);
    };
    let (s, d) = (src.ip.octets(), dst.ip.octets());
    add(s[0], s[1]);
    add(s[2], s[3]);
    add(d[0], d[1]);
    add(d[2], d[3]);
    add(0, 17);
    add((len >> 8) as u8, len as u8);
    for v in [src.port, dst.port, len as u16, 0] {
        add((v >> 8) as u8, v as u8);
    }
    for w in payload.chunks(2) {
        add(w[0], *w.get(1).unwrap_or(&0));
    }
    while sum > 0xFFFF {
        sum = (sum & 0xFFFF) + (sum >> 16);
    }
    match !(sum as u16) {
        0 => 0xFFFF,
        c => c,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Payload {
    Udp { bytes: Vec<u8>, checksum: Option<u16> },
    Upload(Vec<u8>),
    Gossip(Vec<u8>),
    Forward(Vec<u8>),
}

/// Sender id used for spoofed traffic and receiver id for unknown addresses.
const OUTSIDE: NodeId = usize::MAX;

#[derive(Debug, Clone)]
struct Packet {
    from: NodeId,
    to: NodeId,
    src: Endpoint,
    dst: Endpoint,
    payload: Payload,
}

#[derive(Debug, Clone)]
enum EventKind {
    Start(NodeId),
    Deliver(Packet),
    Wake(NodeId),
    Mine(usize),
    FloodTick,
    Sample,
}

struct Event {
    at: u64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, o: &Self) -> bool {
        (self.at, self.seq) == (o.at, o.seq)
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Event {
    fn cmp(&self, o: &Self) -> Ordering {
        (o.at, o.seq).cmp(&(self.at, self.seq))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LinkCounters {
    pub sent: u64,
    pub delivered: u64,
    pub lost: u64,
    pub blocked: u64,
    pub unroutable: u64,
    pub in_flight: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkRow {
    pub from: String,
    pub to: String,
    pub counters: LinkCounters,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ArrivalRow {
    pub node: String,
    pub block: String,
    pub at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OccupancyRow {
    pub at_ms: u64,
    pub relay: String,
    pub whitelist: usize,
    pub blacklist: u64,
    pub peers: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceRow {
    pub at_ms: u64,
    pub node: String,
    pub event: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RelayRow {
    pub relay: String,
    pub peer_admissions: u64,
    pub controller_peers: usize,
    pub whitelist: usize,
    pub blacklist: u64,
    pub blks_sent: u64,
    pub bans: u64,
    pub dropped_blacklisted: u64,
    pub blocks_accepted: u64,
    pub blocks_rejected: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Metrics {
    pub arrivals: Vec<ArrivalRow>,
    pub links: Vec<LinkRow>,
    pub occupancy: Vec<OccupancyRow>,
    pub trace: Vec<TraceRow>,
    pub relays: Vec<RelayRow>,
    /// Every client (legacy included) learned every block.
    pub connected: bool,
    pub clients: usize,
    pub clients_complete: usize,
    pub failed_downloads: usize,
    pub checksums_verified: u64,
    pub checksum_mismatches: u64,
    pub decode_errors: u64,
    pub corrupted_blocks: u64,
    pub end_ms: u64,
    pub events: u64,
}

impl Metrics {
    pub fn partitioned(&self) -> bool {
        !self.connected
    }

    pub fn arrival(&self, node: &str, block: usize, hashes: &[BlockHash]) -> Option<u64> {
        let h = hashes.get(block)?.to_hex();
        self.arrivals.iter().find(|a| a.node == node && a.block == h).map(|a| a.at_ms)
    }

    fn write_rows<S: Serialize>(rows: impl IntoIterator<Item = S>, w: impl Write, header: &[&str]) -> csv::Result<()> {
        let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        wr.write_record(header)?;
        for r in rows {
            wr.serialize(r)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn arrivals_csv(&self, w: impl Write) -> csv::Result<()> {
        Self::write_rows(&self.arrivals, w, &["node", "block", "at_ms"])
    }

    pub fn links_csv(&self, w: impl Write) -> csv::Result<()> {
        let rows = self.links.iter().map(|l| {
            let c = l.counters;
            (&l.from, &l.to, c.sent, c.delivered, c.lost, c.blocked, c.unroutable, c.in_flight)
        });
        Self::write_rows(
            rows,
            w,
            &["from", "to", "sent", "delivered", "lost", "blocked", "unroutable", "in_flight"],
        )
    }

    pub fn occupancy_csv(&self, w: impl Write) -> csv::Result<()> {
        Self::write_rows(&self.occupancy, w, &["at_ms", "relay", "whitelist", "blacklist", "peers"])
    }

    pub fn trace_csv(&self, w: impl Write) -> csv::Result<()> {
        Self::write_rows(&self.trace, w, &["at_ms", "node", "event"])
    }

    pub fn relays_csv(&self, w: impl Write) -> csv::Result<()> {
        Self::write_rows(
            &self.relays,
            w,
            &[
                "relay",
                "peer_admissions",
                "controller_peers",
                "whitelist",
                "blacklist",
                "blks_sent",
                "bans",
                "dropped_blacklisted",
                "blocks_accepted",
                "blocks_rejected",
            ],
        )
    }

    pub fn summary(&self) -> String {
        let sent: u64 = self.links.iter().map(|l| l.counters.sent).sum();
        let delivered: u64 = self.links.iter().map(|l| l.counters.delivered).sum();
        let dropped: u64 = self
            .links
            .iter()
            .map(|l| l.counters.lost + l.counters.blocked + l.counters.unroutable)
            .sum();
        format!(
            "verdict: {}\nclients complete: {}/{}\nfailed downloads: {}\npackets sent: {sent}\npackets delivered: {delivered}\npackets dropped: {dropped}\nchecksums verified: {} (mismatches {})\nend: {} ms\nevents: {}\n",
            if self.connected { "connected" } else { "partitioned" },
            self.clients_complete,
            self.clients,
            self.failed_downloads,
            self.checksums_verified,
            self.checksum_mismatches,
            self.end_ms,
            self.events,
        )
    }
}

struct Relay {
    switch: Switch,
    controller: Controller,
    accepted: u64,
    rejected: u64,
}

struct Abuser {
    address: Endpoint,
    relay: Endpoint,
    repeat: u32,
    connected: bool,
    served: BTreeSet<BlockHash>,
}

enum NodeState {
    Client(Box<Client>),
    Relay(Box<Relay>),
    Abuser(Abuser),
}

pub struct Simulation {
    cfg: ScenarioConfig,
    names: Vec<String>,
    nodes: Vec<NodeState>,
    addr_of: Vec<Endpoint>,
    by_ip: HashMap<Ipv4Addr, NodeId>,
    relay_ids: Vec<NodeId>,
    blocks: Vec<Block>,
    block_origin: Vec<NodeId>,
    crossing: Option<(BTreeSet<NodeId>, BTreeSet<NodeId>)>,
    relay_ip_filter: Option<(BTreeSet<Ipv4Addr>, Direction, BTreeSet<NodeId>)>,
    heap: BinaryHeap<Event>,
    seq: u64,
    now: u64,
    rng: ChaCha8Rng,
    wake_at: Vec<Option<u64>>,
    links: BTreeMap<(NodeId, NodeId), LinkCounters>,
    flood_sent: u64,
    metrics: Metrics,
}

fn node_ip(i: NodeId) -> Ipv4Addr {
    Ipv4Addr::from(0x0A00_0001 + i as u32)
}

fn pool_ip(relay: usize, j: u32) -> Ipv4Addr {
    Ipv4Addr::from(0x6440_0000 + ((relay as u32) << 12) + j + 1)
}

impl Simulation {
    pub fn new(cfg: ScenarioConfig) -> Result<Self, ScenarioError> {
        cfg.validate()?;
        let idx: HashMap<String, NodeId> = cfg.index()?.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        let n = cfg.nodes.len();
        let addr_of: Vec<Endpoint> = (0..n).map(|i| Endpoint::new(node_ip(i), PORT)).collect();
        let mut by_ip: HashMap<Ipv4Addr, NodeId> = (0..n).map(|i| (node_ip(i), i)).collect();
        let relay_ids: Vec<NodeId> = (0..n).filter(|&i| cfg.nodes[i].role == Role::Relay).collect();
        let mut relay_infos = Vec::new();
        for (k, &r) in relay_ids.iter().enumerate() {
            let sources: Vec<Ipv4Addr> = (0..cfg.source_rotation).map(|j| pool_ip(k, j)).collect();
            for &ip in &sources {
                by_ip.insert(ip, r);
            }
            relay_infos.push(RelayInfo {
                address: addr_of[r],
                sources,
            });
        }
        let mut neighbors: Vec<Vec<NodeId>> = vec![Vec::new(); n];
        for (a, b) in &cfg.p2p {
            let (a, b) = (idx[a], idx[b]);
            if !neighbors[a].contains(&b) {
                neighbors[a].push(b);
                neighbors[b].push(a);
            }
        }
        let mut nodes = Vec::with_capacity(n);
        for (i, spec) in cfg.nodes.iter().enumerate() {
            let nb = std::mem::take(&mut neighbors[i]);
            nodes.push(match spec.role {
                Role::Client => NodeState::Client(Box::new(Client::new(cfg.client.clone(), addr_of[i], relay_infos.clone(), nb))),
                Role::Legacy => NodeState::Client(Box::new(Client::legacy(addr_of[i], nb))),
                Role::Relay => {
                    let k = relay_ids.iter().position(|&r| r == i).unwrap();
                    let scfg = SwitchConfig {
                        seed: cfg.switch.seed ^ cfg.seed.rotate_left(17) ^ (i as u64 + 1),
                        ..cfg.switch.clone()
                    };
                    let ccfg = ControllerConfig {
                        target_exp: cfg.target_exp,
                        ..cfg.controller.clone()
                    };
                    NodeState::Relay(Box::new(Relay {
                        switch: Switch::new(scfg, addr_of[i], relay_infos[k].sources.clone()),
                        controller: Controller::new(ccfg),
                        accepted: 0,
                        rejected: 0,
                    }))
                }
                Role::Abuser => NodeState::Abuser(Abuser {
                    address: addr_of[i],
                    relay: relay_ids.first().map_or(addr_of[i], |&r| addr_of[r]),
                    repeat: spec.repeat,
                    connected: false,
                    served: BTreeSet::new(),
                }),
            });
        }
        let mut prev = GENESIS;
        let mut blocks = Vec::new();
        let mut block_origin = Vec::new();
        for (j, b) in cfg.blocks.iter().enumerate() {
            let blk = toy_block(prev, b.bytes, cfg.seed.wrapping_mul(1000).wrapping_add(j as u64), cfg.target_exp);
            prev = blk.hash();
            blocks.push(blk);
            block_origin.push(idx[&b.origin]);
        }
        let crossing = match &cfg.adversary {
            Adversary::DropCrossing { side_s, side_n } => Some((
                side_s.iter().map(|s| idx[s]).collect(),
                side_n.iter().map(|s| idx[s]).collect(),
            )),
            _ => None,
        };
        let relay_ip_filter = match &cfg.adversary {
            Adversary::DropByRelayIp { relays, direction, victims } => Some((
                relays.iter().map(|r| addr_of[idx[r]].ip).collect(),
                *direction,
                victims.iter().map(|v| idx[v]).collect(),
            )),
            _ => None,
        };
        let mut sim = Simulation {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            names: cfg.nodes.iter().map(|n| n.name.clone()).collect(),
            nodes,
            addr_of,
            by_ip,
            relay_ids,
            blocks,
            block_origin,
            crossing,
            relay_ip_filter,
            heap: BinaryHeap::new(),
            seq: 0,
            now: 0,
            wake_at: vec![None; n],
            links: BTreeMap::new(),
            flood_sent: 0,
            metrics: Metrics::default(),
            cfg,
        };
        for i in 0..n {
            if !matches!(sim.nodes[i], NodeState::Relay(_)) {
                let at = if sim.cfg.start_spread_ms == 0 {
                    0
                } else {
                    sim.rng.gen_range(0..sim.cfg.start_spread_ms)
                };
                sim.push(at, EventKind::Start(i));
            }
        }
        for j in 0..sim.blocks.len() {
            sim.push(sim.cfg.blocks[j].at_ms, EventKind::Mine(j));
        }
        if let Some(f) = &sim.cfg.flood {
            sim.push(f.start_ms, EventKind::FloodTick);
        }
        if sim.cfg.sample_ms > 0 {
            sim.push(0, EventKind::Sample);
        }
        Ok(sim)
    }

    pub fn block_hashes(&self) -> Vec<BlockHash> {
        self.blocks.iter().map(Block::hash).collect()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn node_id(&self, name: &str) -> Option<NodeId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn address(&self, node: NodeId) -> Endpoint {
        self.addr_of[node]
    }

    pub fn client(&self, node: NodeId) -> Option<&Client> {
        match &self.nodes[node] {
            NodeState::Client(c) => Some(c),
            _ => None,
        }
    }

    pub fn switch(&self, node: NodeId) -> Option<&Switch> {
        match &self.nodes[node] {
            NodeState::Relay(r) => Some(&r.switch),
            _ => None,
        }
    }

    pub fn controller(&self, node: NodeId) -> Option<&Controller> {
        match &self.nodes[node] {
            NodeState::Relay(r) => Some(&r.controller),
            _ => None,
        }
    }

    fn push(&mut self, at: u64, kind: EventKind) {
        self.seq += 1;
        self.heap.push(Event { at, seq: self.seq, kind });
    }

    fn trace(&mut self, node: NodeId, what: impl FnOnce(&Self) -> String) {
        if self.cfg.trace {
            let row = TraceRow {
                at_ms: self.now,
                node: self.names.get(node).cloned().unwrap_or_else(|| "outside".into()),
                event: what(self),
            };
            self.metrics.trace.push(row);
        }
    }

    fn blocked(&self, p: &Packet) -> bool {
        if let Some((s, n)) = &self.crossing {
            let straddles = (s.contains(&p.from) && n.contains(&p.to)) || (n.contains(&p.from) && s.contains(&p.to));
            if straddles {
                return true;
            }
        }
        if let Some((ips, dir, victims)) = &self.relay_ip_filter {
            let hit = match dir {
                Direction::Source => ips.contains(&p.src.ip),
                Direction::Destination => ips.contains(&p.dst.ip),
                Direction::Both => ips.contains(&p.src.ip) || ips.contains(&p.dst.ip),
            };
            let scoped = victims.is_empty() || victims.contains(&p.from) || victims.contains(&p.to);
            if hit && scoped {
                return true;
            }
        }
        false
    }

    fn send(&mut self, from: NodeId, src: Endpoint, dst: Endpoint, payload: Payload) {
        let to = self.by_ip.get(&dst.ip).copied().unwrap_or(OUTSIDE);
        let c = self.links.entry((from, to)).or_default();
        c.sent += 1;
        if to == OUTSIDE {
            c.unroutable += 1;
            return;
        }
        let p = Packet { from, to, src, dst, payload };
        if self.blocked(&p) {
            self.links.get_mut(&(from, to)).unwrap().blocked += 1;
            return;
        }
        let backbone = matches!(p.payload, Payload::Forward(_));
        if matches!(p.payload, Payload::Udp { .. }) && self.cfg.link.loss > 0.0 && self.rng.gen_bool(self.cfg.link.loss) {
            self.links.get_mut(&(from, to)).unwrap().lost += 1;
            return;
        }
        let base = if backbone {
            self.cfg.link.backbone_delay_ms
        } else {
            self.cfg.link.delay_ms
        };
        let jitter = if self.cfg.link.jitter_ms > 0 {
            self.rng.gen_range(0..=self.cfg.link.jitter_ms)
        } else {
            0
        };
        self.push(self.now + base + jitter, EventKind::Deliver(p));
    }

    fn send_msg(&mut self, from: NodeId, src: Endpoint, dst: Endpoint, msg: &Message, checksum: Option<u16>) {
        let bytes = encode(msg).expect("simulated nodes emit encodable messages");
        self.send(from, src, dst, Payload::Udp { bytes, checksum });
    }

    fn apply_client(&mut self, node: NodeId, actions: Vec<Action>) {
        let src = self.addr_of[node];
        for a in actions {
            match a {
                Action::Send { to, msg } => {
                    self.trace(node, |_| format!("send {}", msg.name()));
                    self.send_msg(node, src, to, &msg, None);
                }
                Action::Upload { to, bytes } => {
                    self.trace(node, |_| "upload".into());
                    self.send(node, src, to, Payload::Upload(bytes));
                }
                Action::Gossip { to, bytes } => {
                    self.trace(node, |s| format!("gossip to {}", s.names[to]));
                    let dst = self.addr_of[to];
                    self.send(node, src, dst, Payload::Gossip(bytes));
                }
            }
        }
        self.schedule_wake(node);
        self.record_learned(node);
    }

    fn record_learned(&mut self, node: NodeId) {
        let NodeState::Client(c) = &self.nodes[node] else { return };
        let have = self.metrics.arrivals.iter().filter(|a| a.node == self.names[node]).count();
        let fresh: Vec<(BlockHash, u64)> = c.learned()[have.min(c.learned().len())..].to_vec();
        for (h, at) in fresh {
            self.trace(node, |_| "learned".into());
            self.metrics.arrivals.push(ArrivalRow {
                node: self.names[node].clone(),
                block: h.to_hex(),
                at_ms: at,
            });
        }
    }

    fn schedule_wake(&mut self, node: NodeId) {
        let NodeState::Client(c) = &self.nodes[node] else { return };
        let Some(d) = c.next_deadline() else { return };
        let d = d.max(self.now);
        if self.wake_at[node].is_none_or(|w| d < w || w < self.now) {
            self.wake_at[node] = Some(d);
            self.push(d, EventKind::Wake(node));
        }
    }

    fn relay_controller_input(&mut self, node: NodeId, input: ControllerInput) {
        let NodeState::Relay(r) = &mut self.nodes[node] else { return };
        let out = r.controller.handle(input);
        self.relay_controller_output(node, out);
    }

    fn relay_controller_output(&mut self, node: NodeId, out: ControllerOutput) {
        let NodeState::Relay(r) = &mut self.nodes[node] else { return };
        if let Some(ip) = out.revoke {
            r.switch.revoke_whitelist(ip);
        }
        if out.rejected.is_some() {
            r.rejected += 1;
        }
        let mut egress = Vec::with_capacity(out.invs.len());
        for m in &out.to_switch {
            // a rejected update leaves the switch serving its committed blocks
            if r.switch.handle_controller(m).is_err() {
                r.switch.abort_update();
                break;
            }
        }
        let copies = self.cfg.inv_copies.max(1) as usize;
        for _ in 0..out.invs.len() * copies {
            egress.push(r.switch.egress());
        }
        if let Some(h) = out.accepted {
            r.accepted += 1;
            self.trace(node, |_| format!("valid {}", &h.to_hex()[..8]));
            self.trace(node, |_| format!("UPD {} segments", out.to_switch.len().saturating_sub(1)));
        }
        if let Some(e) = out.rejected {
            self.trace(node, |_| format!("invalid {e:?}"));
        }
        let invs = out.invs.iter().flat_map(|i| std::iter::repeat_n(i, copies));
        for ((dst, msg), src) in invs.zip(egress) {
            self.trace(node, |s| format!("send INV to {}", s.by_ip.get(&dst.ip).map_or("?", |&i| &s.names[i])));
            self.send_msg(node, src, *dst, msg, None);
        }
        if let Some(bytes) = out.forward {
            let src = self.addr_of[node];
            for k in 0..self.relay_ids.len() {
                let other = self.relay_ids[k];
                if other != node {
                    let dst = self.addr_of[other];
                    self.send(node, src, dst, Payload::Forward(bytes.clone()));
                }
            }
        }
    }

    fn deliver(&mut self, p: Packet) {
        self.links.entry((p.from, p.to)).or_default().delivered += 1;
        let node = p.to;
        match p.payload {
            Payload::Udp { bytes, checksum } => {
                let msg = match decode(&bytes) {
                    Ok(m) => m,
                    Err(_) => {
                        self.metrics.decode_errors += 1;
                        return;
                    }
                };
                if let Some(c) = checksum {
                    self.metrics.checksums_verified += 1;
                    if rfc768_checksum(p.src, p.dst, &bytes) != c {
                        self.metrics.checksum_mismatches += 1;
                        return;
                    }
                }
                self.deliver_msg(node, p.src, msg);
            }
            Payload::Upload(bytes) => {
                let NodeState::Relay(r) = &mut self.nodes[node] else { return };
                let out = r.switch.handle_packet(p.src, Inbound::ToController(bytes), self.now);
                self.relay_switch_output(node, out);
            }
            Payload::Gossip(bytes) => {
                if let NodeState::Client(c) = &mut self.nodes[node] {
                    let acts = c.step(ClientEvent::Gossip { from: p.from, bytes }, self.now);
                    self.trace(node, |s| format!("gossip from {}", s.names[p.from]));
                    self.apply_client(node, acts);
                }
            }
            Payload::Forward(bytes) => self.relay_controller_input(node, ControllerInput::Relay(bytes)),
        }
    }

    fn relay_switch_output(&mut self, node: NodeId, out: crate::switch::SwitchOutput) {
        for r in out.replies {
            self.trace(node, |_| format!("send {}", r.msg.name()));
            self.send_msg(node, r.src, r.dest, &r.msg, r.udp_checksum);
        }
        for m in out.to_controller {
            if let ToController::Upload { .. } = m {
                self.trace(node, |_| "controller receives upload".into());
            }
            self.relay_controller_input(node, ControllerInput::Switch(m));
        }
    }

    fn deliver_msg(&mut self, node: NodeId, from: Endpoint, msg: Message) {
        match &mut self.nodes[node] {
            NodeState::Client(c) => {
                let acts = c.step(ClientEvent::Inbound { from, msg }, self.now);
                self.apply_client(node, acts);
            }
            NodeState::Relay(r) => {
                let out = r.switch.handle_packet(from, Inbound::Wire(msg), self.now);
                self.relay_switch_output(node, out);
            }
            NodeState::Abuser(a) => {
                let src = a.address;
                let relay = a.relay;
                let mut sends = Vec::new();
                match msg {
                    Message::SynAck { secret } => {
                        a.connected = true;
                        sends.extend(std::iter::repeat_n(Message::Ack { secret }, 3));
                    }
                    Message::Inv { hash, seg_count } if a.connected && a.served.insert(hash) => {
                        for _ in 0..a.repeat {
                            sends.extend((0..seg_count).map(|seg_id| Message::GetSeg { hash, seg_id }));
                        }
                    }
                    _ => {}
                }
                for m in sends {
                    self.send_msg(node, src, relay, &m, None);
                }
            }
        }
    }

    fn flood_tick(&mut self) {
        let Some(f) = self.cfg.flood.clone() else { return };
        let total = f.sources as u64 * f.per_source.len() as u64;
        let target = self.relay_ids[self.relay_ids.iter().position(|&r| self.names[r] == f.target).unwrap()];
        let dst = self.addr_of[target];
        let hash = self.blocks.first().map_or(BlockHash([0; 32]), Block::hash);
        for _ in 0..f.rate_per_ms {
            if self.flood_sent >= total {
                return;
            }
            let k = self.flood_sent;
            self.flood_sent += 1;
            let source = (k / f.per_source.len() as u64) as u32;
            let src = Endpoint::new(Ipv4Addr::from(0xC612_0000u32.wrapping_add(source)), self.rng.gen());
            let msg = match f.per_source[(k % f.per_source.len() as u64) as usize] {
                FloodKind::Syn => Message::Syn,
                FloodKind::GetSeg => Message::GetSeg {
                    hash,
                    seg_id: self.rng.gen_range(0..16),
                },
                FloodKind::Adv => Message::Adv {
                    hash: BlockHash(self.rng.gen()),
                },
            };
            self.send_msg(OUTSIDE, src, dst, &msg, None);
        }
        if self.flood_sent < total {
            self.push(self.now + 1, EventKind::FloodTick);
        }
    }

    fn sample(&mut self) {
        for k in 0..self.relay_ids.len() {
            let r = self.relay_ids[k];
            if let NodeState::Relay(x) = &self.nodes[r] {
                self.metrics.occupancy.push(OccupancyRow {
                    at_ms: self.now,
                    relay: self.names[r].clone(),
                    whitelist: x.switch.whitelist_len(),
                    blacklist: x.switch.blacklist_len(),
                    peers: x.controller.peers().len(),
                });
            }
        }
        self.push(self.now + self.cfg.sample_ms, EventKind::Sample);
    }

    fn all_learned(&self) -> bool {
        if self.blocks.is_empty() {
            return false;
        }
        let hashes = self.block_hashes();
        self.nodes.iter().all(|n| match n {
            NodeState::Client(c) => hashes.iter().all(|h| c.has_block(h)),
            _ => true,
        })
    }

    fn handle(&mut self, kind: EventKind) {
        match kind {
            EventKind::Start(node) => match &mut self.nodes[node] {
                NodeState::Client(c) => {
                    let acts = c.start(self.now);
                    self.apply_client(node, acts);
                }
                NodeState::Abuser(a) => {
                    let (src, dst) = (a.address, a.relay);
                    self.send_msg(node, src, dst, &Message::Syn, None);
                }
                NodeState::Relay(_) => {}
            },
            EventKind::Deliver(p) => self.deliver(p),
            EventKind::Wake(node) => {
                if self.wake_at[node] != Some(self.now) {
                    return;
                }
                self.wake_at[node] = None;
                if let NodeState::Client(c) = &mut self.nodes[node] {
                    let acts = c.step(ClientEvent::Timer, self.now);
                    self.apply_client(node, acts);
                }
            }
            EventKind::Mine(j) => {
                let origin = self.block_origin[j];
                let block = self.blocks[j].clone();
                self.trace(origin, |_| format!("mine block {j}"));
                match &mut self.nodes[origin] {
                    NodeState::Client(c) => {
                        let acts = c.step(ClientEvent::LocalNewBlock(block), self.now);
                        self.apply_client(origin, acts);
                    }
                    NodeState::Relay(_) => self.relay_controller_input(origin, ControllerInput::Relay(block.to_bytes())),
                    NodeState::Abuser(_) => {}
                }
            }
            EventKind::FloodTick => self.flood_tick(),
            EventKind::Sample => self.sample(),
        }
    }

    fn advance(&mut self) {
        let last_block = self.cfg.blocks.iter().map(|b| b.at_ms).max().unwrap_or(0);
        while let Some(ev) = self.heap.peek() {
            if ev.at > self.cfg.stop_ms {
                break;
            }
            let ev = self.heap.pop().unwrap();
            self.now = ev.at;
            self.metrics.events += 1;
            self.handle(ev.kind);
            if self.cfg.stop_when == StopWhen::AllLearned && self.now >= last_block && self.all_learned() {
                break;
            }
        }
    }

    /// Runs to the stop condition and returns the collected metrics.
    pub fn run(self) -> Metrics {
        self.run_keep().0
    }

    /// Runs and also returns the final state for inspection.
    pub fn run_keep(mut self) -> (Metrics, Simulation) {
        self.advance();
        let m = self.collect();
        (m, self)
    }

    fn collect(&mut self) -> Metrics {
        for ev in self.heap.iter() {
            if let EventKind::Deliver(p) = &ev.kind {
                self.links.entry((p.from, p.to)).or_default().in_flight += 1;
            }
        }
        let name = |i: NodeId| {
            if i == OUTSIDE {
                "outside".to_string()
            } else {
                self.names[i].clone()
            }
        };
        let mut m = std::mem::take(&mut self.metrics);
        m.links = self
            .links
            .iter()
            .map(|(&(a, b), &c)| LinkRow {
                from: name(a),
                to: name(b),
                counters: c,
            })
            .collect();
        let hashes = self.block_hashes();
        m.clients = 0;
        m.clients_complete = 0;
        m.failed_downloads = 0;
        for n in &self.nodes {
            if let NodeState::Client(c) = n {
                m.clients += 1;
                if !hashes.is_empty() && hashes.iter().all(|h| c.has_block(h)) {
                    m.clients_complete += 1;
                }
                m.failed_downloads += hashes
                    .iter()
                    .filter(|h| c.download_status(h) == Some(DownloadStatus::Failed))
                    .count();
            }
        }
        m.connected = !hashes.is_empty() && m.clients_complete == m.clients;
        m.relays = self
            .relay_ids
            .iter()
            .map(|&r| {
                let NodeState::Relay(x) = &self.nodes[r] else { unreachable!() };
                let s = x.switch.stats();
                RelayRow {
                    relay: self.names[r].clone(),
                    peer_admissions: x.switch.peer_admissions(),
                    controller_peers: x.controller.peers().len(),
                    whitelist: x.switch.whitelist_len(),
                    blacklist: x.switch.blacklist_len(),
                    blks_sent: s.blks_sent,
                    bans: s.bans,
                    dropped_blacklisted: s.dropped_blacklisted,
                    blocks_accepted: x.accepted,
                    blocks_rejected: x.rejected,
                }
            })
            .collect();
        m.end_ms = self.now;
        m
    }
}

pub fn run_scenario(cfg: ScenarioConfig) -> Result<Metrics, ScenarioError> {
    Ok(Simulation::new(cfg)?.run())
}

/// Flood-resilience scenario: benign clients and abusive sources share one
/// relay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DdosConfig {
    pub seed: u64,
    pub benign: usize,
    /// Abusers that complete the handshake and over-request.
    pub connected_abusers: usize,
    pub repeat: u32,
    /// Spoofed sources, each sending every packet kind once.
    pub spoofed: u32,
    pub attacker_rate_per_ms: u32,
    pub loss: f64,
    pub block_bytes: usize,
    pub block_at_ms: u64,
    pub stop_ms: u64,
    pub switch: SwitchConfig,
}

impl Default for DdosConfig {
    fn default() -> Self {
        DdosConfig {
            seed: 0,
            benign: 100,
            connected_abusers: 500,
            repeat: 10,
            spoofed: 99_500,
            attacker_rate_per_ms: 200,
            loss: 0.05,
            block_bytes: 16 * 1024,
            block_at_ms: 5_000,
            stop_ms: 30_000,
            switch: SwitchConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DdosReport {
    pub metrics: Metrics,
    pub benign_total: usize,
    pub benign_complete: usize,
    pub abusers_banned: usize,
    pub benign_banned: usize,
    pub peer_admissions: u64,
    pub controller_peers: usize,
}

impl DdosReport {
    pub fn benign_completion(&self) -> f64 {
        self.benign_complete as f64 / self.benign_total.max(1) as f64
    }
}

impl DdosConfig {
    pub fn scenario(&self) -> ScenarioConfig {
        let mut nodes = vec![NodeSpec {
            name: "relay".into(),
            role: Role::Relay,
            repeat: 1,
        }];
        nodes.extend((0..self.benign).map(|i| NodeSpec {
            name: format!("c{i}"),
            role: Role::Client,
            repeat: 1,
        }));
        nodes.extend((0..self.connected_abusers).map(|i| NodeSpec {
            name: format!("x{i}"),
            role: Role::Abuser,
            repeat: self.repeat,
        }));
        ScenarioConfig {
            seed: self.seed,
            stop_ms: self.stop_ms,
            link: LinkParams {
                loss: self.loss,
                ..LinkParams::default()
            },
            nodes,
            blocks: vec![BlockSpec {
                origin: "relay".into(),
                bytes: self.block_bytes,
                at_ms: self.block_at_ms,
            }],
            flood: (self.spoofed > 0).then(|| Flood {
                target: "relay".into(),
                sources: self.spoofed,
                per_source: vec![FloodKind::Syn, FloodKind::GetSeg, FloodKind::Adv],
                rate_per_ms: self.attacker_rate_per_ms,
                start_ms: 0,
            }),
            switch: self.switch.clone(),
            ..ScenarioConfig::default()
        }
    }
}

pub fn ddos_scenario(cfg: &DdosConfig) -> Result<DdosReport, ScenarioError> {
    let sc = cfg.scenario();
    let (metrics, sim) = Simulation::new(sc)?.run_keep();
    let relay = sim.switch(0).unwrap();
    let hashes = sim.block_hashes();
    let benign = 1..=cfg.benign;
    let benign_complete = benign
        .clone()
        .filter(|&i| sim.client(i).is_some_and(|c| hashes.iter().all(|h| c.has_block(h))))
        .count();
    let benign_banned = benign.filter(|&i| relay.is_blacklisted(sim.address(i).ip)).count();
    let abusers_banned = (cfg.benign + 1..=cfg.benign + cfg.connected_abusers)
        .filter(|&i| relay.is_blacklisted(sim.address(i).ip))
        .count();
    Ok(DdosReport {
        benign_total: cfg.benign,
        benign_complete,
        abusers_banned,
        benign_banned,
        peer_admissions: relay.peer_admissions(),
        controller_peers: sim.controller(0).unwrap().peers().len(),
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ScenarioConfig {
        ScenarioConfig::from_toml(
            r#"
            seed = 3
            [[node]]
            name = "a"
            role = "client"
            [[node]]
            name = "b"
            role = "client"
            [[node]]
            name = "r"
            role = "relay"
            [[block]]
            origin = "a"
            bytes = 5000
            at_ms = 200
            "#,
        )
        .unwrap()
    }

    #[test]
    fn block_reaches_the_other_client_through_the_relay() {
        let m = run_scenario(small()).unwrap();
        assert!(m.connected);
        assert!(m.checksums_verified >= 5);
        assert_eq!(m.checksum_mismatches, 0);
        assert_eq!(m.relays[0].blocks_accepted, 1);
    }

    #[test]
    fn validation_errors() {
        let mut c = small();
        c.nodes.push(NodeSpec { name: "a".into(), role: Role::Client, repeat: 1 });
        assert!(matches!(c.validate(), Err(ScenarioError::DuplicateName(_))));
        let mut c = small();
        c.p2p.push(("a".into(), "zz".into()));
        assert!(matches!(c.validate(), Err(ScenarioError::UnknownNode(_))));
        let mut c = small();
        c.adversary = Adversary::DropCrossing { side_s: vec!["a".into()], side_n: vec!["a".into()] };
        assert!(matches!(c.validate(), Err(ScenarioError::OverlappingSides(_))));
        let mut c = small();
        c.p2p.push(("a".into(), "r".into()));
        assert!(matches!(c.validate(), Err(ScenarioError::WrongRole { .. })));
        assert!(ScenarioConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn reference_checksum_of_known_datagram() {
        // all-zero pseudo-header fields except protocol and lengths
        let z = Endpoint::new(Ipv4Addr::UNSPECIFIED, 0);
        assert_eq!(rfc768_checksum(z, z, &[]), !(17u16 + 8 + 8));
    }
}
