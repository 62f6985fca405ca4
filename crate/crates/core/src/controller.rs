//! Relay controller: validates uploaded blocks, loads them into its switch
//! and announces them to every connected client.

use std::collections::{BTreeSet, HashSet};
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{Block, Target, GENESIS, MAX_BLOCK_BYTES};
use crate::switch::ToController;
use crate::wire::{segment_block, Blk, BlockHash, Endpoint, Message, MAX_SEGMENT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum Invalid {
    #[error("header hash above target")]
    BadPoW,
    #[error("parent is not the current tip")]
    BadParent,
    #[error("block larger than {MAX_BLOCK_BYTES} bytes")]
    Oversize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub target_exp: u32,
    pub segment_bytes: usize,
    /// Send the active block's INV to clients that connect after it was
    /// announced.
    pub inv_late_joiners: bool,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            target_exp: 248,
            segment_bytes: MAX_SEGMENT,
            inv_late_joiners: false,
        }
    }
}

/// Inputs to a controller.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ControllerInput {
    Switch(ToController),
    /// A block forwarded by another relay's controller.
    Relay(Vec<u8>),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ControllerOutput {
    /// UPD followed by the BLK sequence, in order.
    pub to_switch: Vec<Message>,
    pub invs: Vec<(Endpoint, Message)>,
    /// Serialized block for the other relays' controllers.
    pub forward: Option<Vec<u8>>,
    /// Whitelisted source whose upload failed validation.
    pub revoke: Option<Ipv4Addr>,
    pub accepted: Option<BlockHash>,
    pub rejected: Option<Invalid>,
}

#[derive(Debug, Clone)]
pub struct Controller {
    cfg: ControllerConfig,
    target: Target,
    peers: BTreeSet<Endpoint>,
    known: HashSet<BlockHash>,
    tip: BlockHash,
    active: Option<(BlockHash, u16)>,
}

impl Controller {
    pub fn new(cfg: ControllerConfig) -> Self {
        Controller {
            target: Target::pow2(cfg.target_exp),
            cfg,
            peers: BTreeSet::new(),
            known: HashSet::new(),
            tip: GENESIS,
            active: None,
        }
    }

    pub fn peers(&self) -> &BTreeSet<Endpoint> {
        &self.peers
    }

    pub fn tip(&self) -> BlockHash {
        self.tip
    }

    pub fn knows(&self, h: &BlockHash) -> bool {
        self.known.contains(h)
    }

    pub fn target(&self) -> Target {
        self.target
    }

    pub fn validate_block(&self, b: &Block) -> Result<(), Invalid> {
        if b.size() > MAX_BLOCK_BYTES {
            return Err(Invalid::Oversize);
        }
        if !self.target.is_met_by(&b.hash()) {
            return Err(Invalid::BadPoW);
        }
        if b.header.prev_hash != self.tip {
            return Err(Invalid::BadParent);
        }
        Ok(())
    }

    /// Loads a block into the switch and announces it. An invalid block
    /// produces no messages and leaves the state unchanged.
    pub fn on_new_block(&mut self, b: &Block) -> ControllerOutput {
        let mut out = ControllerOutput::default();
        if let Err(e) = self.validate_block(b) {
            out.rejected = Some(e);
            return out;
        }
        let hash = b.hash();
        let bytes = b.to_bytes();
        let segs = segment_block(&bytes, self.cfg.segment_bytes)
            .expect("validated block fits the segment count");
        let n = segs.len() as u16;
        out.to_switch.push(Message::Upd { hash, seg_count: n });
        out.to_switch.extend(segs.into_iter().map(|s| {
            Message::Blk(Blk {
                hash,
                seg_id: s.index,
                seg_count: n,
                payload: s.bytes,
                cached_sum: Some(s.cached_sum),
            })
        }));
        out.invs = self
            .peers
            .iter()
            .map(|&p| (p, Message::Inv { hash, seg_count: n }))
            .collect();
        out.forward = Some(bytes);
        out.accepted = Some(hash);
        self.known.insert(hash);
        self.tip = hash;
        self.active = Some((hash, n));
        out
    }

    pub fn handle(&mut self, input: ControllerInput) -> ControllerOutput {
        match input {
            ControllerInput::Switch(ToController::Note(Message::NConn { addr, port })) => {
                let peer = Endpoint::new(addr, port);
                let fresh = self.peers.insert(peer);
                let mut out = ControllerOutput::default();
                if let (true, true, Some((hash, seg_count))) = (fresh, self.cfg.inv_late_joiners, self.active) {
                    out.invs.push((peer, Message::Inv { hash, seg_count }));
                }
                out
            }
            ControllerInput::Switch(ToController::Note(_)) => ControllerOutput::default(),
            ControllerInput::Switch(ToController::Upload { from, bytes }) => {
                let mut out = self.ingest(&bytes);
                if out.rejected.is_some() {
                    out.revoke = Some(from.ip);
                }
                out
            }
            ControllerInput::Relay(bytes) => self.ingest(&bytes),
        }
    }

    fn ingest(&mut self, bytes: &[u8]) -> ControllerOutput {
        let Ok(block) = Block::from_bytes(bytes) else {
            return ControllerOutput {
                rejected: Some(Invalid::BadPoW),
                ..ControllerOutput::default()
            };
        };
        if self.known.contains(&block.hash()) {
            return ControllerOutput::default();
        }
        self.on_new_block(&block)
    }
}
