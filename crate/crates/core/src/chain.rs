//! Toy blocks: a fixed header with a hash-threshold proof of work and an
//! opaque body.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::wire::BlockHash;

pub const HEADER_BYTES: usize = 76;
pub const MAX_BLOCK_BYTES: usize = 1 << 20;

/// 256-bit big-endian threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Target(pub [u8; 32]);

impl Target {
    /// `2^exp`; exponents of 256 or more give the maximum target.
    pub fn pow2(exp: u32) -> Self {
        let mut t = [0u8; 32];
        if exp >= 256 {
            return Target([0xFF; 32]);
        }
        let byte = 31 - (exp / 8) as usize;
        t[byte] = 1 << (exp % 8);
        Target(t)
    }

    pub fn is_met_by(&self, hash: &BlockHash) -> bool {
        hash.0 <= self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockHeader {
    pub prev_hash: BlockHash,
    pub merkle_root: BlockHash,
    pub nonce: u32,
    pub timestamp: u32,
    /// Exponent of the target the miner worked against.
    pub target_exp: u32,
}

impl BlockHeader {
    pub fn to_bytes(&self) -> [u8; HEADER_BYTES] {
        let mut b = [0u8; HEADER_BYTES];
        b[..32].copy_from_slice(&self.prev_hash.0);
        b[32..64].copy_from_slice(&self.merkle_root.0);
        b[64..68].copy_from_slice(&self.nonce.to_be_bytes());
        b[68..72].copy_from_slice(&self.timestamp.to_be_bytes());
        b[72..76].copy_from_slice(&self.target_exp.to_be_bytes());
        b
    }

    pub fn from_bytes(b: &[u8; HEADER_BYTES]) -> Self {
        let u32_at = |i: usize| u32::from_be_bytes(b[i..i + 4].try_into().unwrap());
        BlockHeader {
            prev_hash: BlockHash(b[..32].try_into().unwrap()),
            merkle_root: BlockHash(b[32..64].try_into().unwrap()),
            nonce: u32_at(64),
            timestamp: u32_at(68),
            target_exp: u32_at(72),
        }
    }

    pub fn hash(&self) -> BlockHash {
        BlockHash::of(&self.to_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub header: BlockHeader,
    pub body: Vec<u8>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BlockParseError {
    #[error("block shorter than its {HEADER_BYTES}-byte header")]
    Short,
}

impl Block {
    pub fn hash(&self) -> BlockHash {
        self.header.hash()
    }

    pub fn size(&self) -> usize {
        HEADER_BYTES + self.body.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.size());
        out.extend(self.header.to_bytes());
        out.extend(&self.body);
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, BlockParseError> {
        if b.len() < HEADER_BYTES {
            return Err(BlockParseError::Short);
        }
        Ok(Block {
            header: BlockHeader::from_bytes(b[..HEADER_BYTES].try_into().unwrap()),
            body: b[HEADER_BYTES..].to_vec(),
        })
    }
}

pub fn merkle_root(body: &[u8]) -> BlockHash {
    BlockHash(Sha256::digest(Sha256::digest(body)).into())
}

/// Searches nonces from zero until the header hash meets `2^target_exp`.
pub fn mine(prev_hash: BlockHash, body: Vec<u8>, timestamp: u32, target_exp: u32) -> Block {
    let target = Target::pow2(target_exp);
    let mut header = BlockHeader {
        prev_hash,
        merkle_root: merkle_root(&body),
        nonce: 0,
        timestamp,
        target_exp,
    };
    while !target.is_met_by(&header.hash()) {
        header.nonce = header.nonce.wrapping_add(1);
    }
    Block { header, body }
}

/// A mined block of exactly `total_bytes` serialized bytes with a seeded
/// pseudorandom body.
pub fn toy_block(prev_hash: BlockHash, total_bytes: usize, seed: u64, target_exp: u32) -> Block {
    let mut body = vec![0u8; total_bytes.saturating_sub(HEADER_BYTES)];
    ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut body);
    mine(prev_hash, body, seed as u32, target_exp)
}

/// Parent hash of the first block in a simulated chain.
pub const GENESIS: BlockHash = BlockHash([0; 32]);
