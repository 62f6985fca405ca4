//! UDP message codec between clients, switches and controllers, and the
//! one's-complement arithmetic that lets a switch finish a BLK checksum from
//! a per-segment cached sum.
//!
//! Every message starts with `version`, `kind`, `flags` (one byte each);
//! integers are big-endian. See `docs/wire-format.md` for the byte layouts.

use std::fmt;
use std::net::Ipv4Addr;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub const WIRE_VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 3;
pub const HASH_LEN: usize = 32;
pub const MAX_SEGMENT: usize = 1024;
/// Bytes preceding the payload in a BLK message.
pub const BLK_PREFIX_LEN: usize = HEADER_LEN + HASH_LEN + 6;
pub const FLAG_CACHED_SUM: u8 = 0x01;

pub mod kind {
    pub const SYN: u8 = 0x01;
    pub const SYNACK: u8 = 0x02;
    pub const ACK: u8 = 0x03;
    pub const NCONN: u8 = 0x04;
    pub const CTR: u8 = 0x05;
    pub const ADV: u8 = 0x06;
    pub const INV: u8 = 0x07;
    pub const GET_SEG: u8 = 0x08;
    pub const BLK: u8 = 0x09;
    pub const UPD: u8 = 0x0A;
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct BlockHash(pub [u8; HASH_LEN]);

impl BlockHash {
    /// Double SHA-256 of `data`.
    pub fn of(data: &[u8]) -> Self {
        BlockHash(Sha256::digest(Sha256::digest(data)).into())
    }

    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl fmt::Debug for BlockHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BlockHash({})", &self.to_hex()[..16])
    }
}

impl fmt::Display for BlockHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// An IPv4 address and UDP port.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Endpoint {
    pub ip: Ipv4Addr,
    pub port: u16,
}

impl Endpoint {
    pub fn new(ip: Ipv4Addr, port: u16) -> Self {
        Endpoint { ip, port }
    }

    pub fn key(&self) -> [u8; 6] {
        let o = self.ip.octets();
        let p = self.port.to_be_bytes();
        [o[0], o[1], o[2], o[3], p[0], p[1]]
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.ip, self.port)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Blk {
    pub hash: BlockHash,
    pub seg_id: u16,
    pub seg_count: u16,
    pub payload: Vec<u8>,
    /// Present only on controller-to-switch transfers.
    pub cached_sum: Option<u16>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Syn,
    SynAck { secret: u32 },
    Ack { secret: u32 },
    NConn { addr: Ipv4Addr, port: u16 },
    Ctr,
    Adv { hash: BlockHash },
    Inv { hash: BlockHash, seg_count: u16 },
    GetSeg { hash: BlockHash, seg_id: u16 },
    Blk(Blk),
    Upd { hash: BlockHash, seg_count: u16 },
}

impl Message {
    pub fn kind(&self) -> u8 {
        match self {
            Message::Syn => kind::SYN,
            Message::SynAck { .. } => kind::SYNACK,
            Message::Ack { .. } => kind::ACK,
            Message::NConn { .. } => kind::NCONN,
            Message::Ctr => kind::CTR,
            Message::Adv { .. } => kind::ADV,
            Message::Inv { .. } => kind::INV,
            Message::GetSeg { .. } => kind::GET_SEG,
            Message::Blk(_) => kind::BLK,
            Message::Upd { .. } => kind::UPD,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Message::Syn => "SYN",
            Message::SynAck { .. } => "SYNACK",
            Message::Ack { .. } => "ACK",
            Message::NConn { .. } => "NCONN",
            Message::Ctr => "CTR",
            Message::Adv { .. } => "ADV",
            Message::Inv { .. } => "INV",
            Message::GetSeg { .. } => "GET_SEG",
            Message::Blk(_) => "BLK",
            Message::Upd { .. } => "UPD",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("unsupported wire version {0:#04x}")]
    BadVersion(u8),
    #[error("unknown message kind {0:#04x}")]
    UnknownKind(u8),
    #[error("truncated message: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("flags {flags:#04x} not allowed on kind {kind:#04x}")]
    BadFlags { kind: u8, flags: u8 },
    #[error("{0} trailing bytes")]
    TrailingBytes(usize),
    #[error("segment {seg_id} of {seg_count} with {len} payload bytes")]
    BadSegment { seg_id: u16, seg_count: u16, len: usize },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EncodeError {
    #[error("segment {seg_id} of {seg_count} with {len} payload bytes")]
    BadSegment { seg_id: u16, seg_count: u16, len: usize },
}

fn check_blk(seg_id: u16, seg_count: u16, len: usize) -> bool {
    seg_id < seg_count && len <= MAX_SEGMENT
}

pub fn encode(m: &Message) -> Result<Vec<u8>, EncodeError> {
    let flags = match m {
        Message::Blk(b) if b.cached_sum.is_some() => FLAG_CACHED_SUM,
        _ => 0,
    };
    let mut out = vec![WIRE_VERSION, m.kind(), flags];
    match m {
        Message::Syn | Message::Ctr => {}
        Message::SynAck { secret } | Message::Ack { secret } => out.extend(secret.to_be_bytes()),
        Message::NConn { addr, port } => {
            out.extend(addr.octets());
            out.extend(port.to_be_bytes());
        }
        Message::Adv { hash } => out.extend(hash.0),
        Message::Inv { hash, seg_count } | Message::Upd { hash, seg_count } => {
            out.extend(hash.0);
            out.extend(seg_count.to_be_bytes());
        }
        Message::GetSeg { hash, seg_id } => {
            out.extend(hash.0);
            out.extend(seg_id.to_be_bytes());
        }
        Message::Blk(b) => {
            if !check_blk(b.seg_id, b.seg_count, b.payload.len()) {
                return Err(EncodeError::BadSegment {
                    seg_id: b.seg_id,
                    seg_count: b.seg_count,
                    len: b.payload.len(),
                });
            }
            out.extend(b.hash.0);
            out.extend(b.seg_id.to_be_bytes());
            out.extend(b.seg_count.to_be_bytes());
            out.extend((b.payload.len() as u16).to_be_bytes());
            out.extend(&b.payload);
            if let Some(s) = b.cached_sum {
                out.extend(s.to_be_bytes());
            }
        }
    }
    Ok(out)
}

/// The bytes of a flag-free BLK message that precede its payload.
pub fn blk_prefix(hash: &BlockHash, seg_id: u16, seg_count: u16, payload_len: u16) -> [u8; BLK_PREFIX_LEN] {
    let mut b = [0u8; BLK_PREFIX_LEN];
    b[0] = WIRE_VERSION;
    b[1] = kind::BLK;
    b[3..35].copy_from_slice(&hash.0);
    b[35..37].copy_from_slice(&seg_id.to_be_bytes());
    b[37..39].copy_from_slice(&seg_count.to_be_bytes());
    b[39..41].copy_from_slice(&payload_len.to_be_bytes());
    b
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(DecodeError::Truncated {
                need: end,
                have: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn hash(&mut self) -> Result<BlockHash, DecodeError> {
        Ok(BlockHash(self.take(HASH_LEN)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<Message, DecodeError> {
    let mut r = Reader { buf, pos: 0 };
    let head = r.take(HEADER_LEN)?;
    let (version, kind, flags) = (head[0], head[1], head[2]);
    if version != WIRE_VERSION {
        return Err(DecodeError::BadVersion(version));
    }
    if !(kind::SYN..=kind::UPD).contains(&kind) {
        return Err(DecodeError::UnknownKind(kind));
    }
    let allowed = if kind == kind::BLK { FLAG_CACHED_SUM } else { 0 };
    if flags & !allowed != 0 {
        return Err(DecodeError::BadFlags { kind, flags });
    }
    let m = match kind {
        kind::SYN => Message::Syn,
        kind::SYNACK => Message::SynAck { secret: r.u32()? },
        kind::ACK => Message::Ack { secret: r.u32()? },
        kind::NCONN => {
            let o: [u8; 4] = r.take(4)?.try_into().unwrap();
            Message::NConn {
                addr: Ipv4Addr::from(o),
                port: r.u16()?,
            }
        }
        kind::CTR => Message::Ctr,
        kind::ADV => Message::Adv { hash: r.hash()? },
        kind::INV => Message::Inv {
            hash: r.hash()?,
            seg_count: r.u16()?,
        },
        kind::GET_SEG => Message::GetSeg {
            hash: r.hash()?,
            seg_id: r.u16()?,
        },
        kind::UPD => Message::Upd {
            hash: r.hash()?,
            seg_count: r.u16()?,
        },
        _ => {
            let hash = r.hash()?;
            let seg_id = r.u16()?;
            let seg_count = r.u16()?;
            let len = r.u16()? as usize;
            if !check_blk(seg_id, seg_count, len) {
                return Err(DecodeError::BadSegment {
                    seg_id,
                    seg_count,
                    len,
                });
            }
            let payload = r.take(len)?.to_vec();
            let cached_sum = if flags & FLAG_CACHED_SUM != 0 {
                Some(r.u16()?)
            } else {
                None
            };
            Message::Blk(Blk {
                hash,
                seg_id,
                seg_count,
                payload,
                cached_sum,
            })
        }
    };
    if r.pos != buf.len() {
        return Err(DecodeError::TrailingBytes(buf.len() - r.pos));
    }
    Ok(m)
}

/// Adds with end-around carry until the value fits in 16 bits.
pub fn fold(mut sum: u64) -> u16 {
    while sum > 0xFFFF {
        sum = (sum & 0xFFFF) + (sum >> 16);
    }
    sum as u16
}

/// One's-complement sum of big-endian 16-bit words; an odd tail byte is
/// padded with zero.
pub fn ones_sum(bytes: &[u8]) -> u16 {
    let mut sum = 0u64;
    let mut chunks = bytes.chunks_exact(2);
    for c in &mut chunks {
        sum += u16::from_be_bytes([c[0], c[1]]) as u64;
    }
    if let [last] = chunks.remainder() {
        sum += (*last as u64) << 8;
    }
    fold(sum)
}

/// One's-complement sum of the concatenation of two byte strings whose sums
/// are known. When the first part has odd length the second part's bytes
/// sit at swapped positions within each word.
pub fn combine(first_sum: u16, first_len: usize, second_sum: u16) -> u16 {
    let second = if first_len % 2 == 1 {
        second_sum.swap_bytes()
    } else {
        second_sum
    };
    fold(first_sum as u64 + second as u64)
}

pub const UDP_PROTOCOL: u8 = 17;
pub const UDP_HEADER_LEN: usize = 8;

/// UDP checksum of a datagram whose payload is `header_bytes` followed by a
/// tail with one's-complement sum `cached_sum`. `length` is the UDP length
/// (header plus payload). A computed zero is sent as `0xFFFF`.
pub fn udp_checksum_cached(
    src_ip: Ipv4Addr,
    dst_ip: Ipv4Addr,
    src_port: u16,
    dst_port: u16,
    length: u16,
    header_bytes: &[u8],
    cached_sum: u16,
) -> u16 {
    let mut sum = 0u64;
    for ip in [src_ip, dst_ip] {
        let o = ip.octets();
        sum += u16::from_be_bytes([o[0], o[1]]) as u64 + u16::from_be_bytes([o[2], o[3]]) as u64;
    }
    sum += UDP_PROTOCOL as u64 + length as u64;
    sum += src_port as u64 + dst_port as u64 + length as u64;
    let payload = combine(ones_sum(header_bytes), header_bytes.len(), cached_sum);
    let c = !fold(sum + payload as u64);
    if c == 0 {
        0xFFFF
    } else {
        c
    }
}

/// A slice of a block with its precomputed one's-complement sum.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub index: u16,
    pub bytes: Vec<u8>,
    pub cached_sum: u16,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SegmentError {
    #[error("segment size must be within 1..={MAX_SEGMENT}, got {0}")]
    BadSize(usize),
    #[error("block of {0} bytes needs more than 65535 segments")]
    TooLarge(usize),
}

/// Cuts a block into equal-size segments (the last may be shorter). An empty
/// block yields one empty segment.
pub fn segment_block(block: &[u8], seg_size: usize) -> Result<Vec<Segment>, SegmentError> {
    if seg_size == 0 || seg_size > MAX_SEGMENT {
        return Err(SegmentError::BadSize(seg_size));
    }
    let count = block.len().div_ceil(seg_size).max(1);
    if count > u16::MAX as usize {
        return Err(SegmentError::TooLarge(block.len()));
    }
    if block.is_empty() {
        return Ok(vec![Segment {
            index: 0,
            bytes: Vec::new(),
            cached_sum: 0,
        }]);
    }
    Ok(block
        .chunks(seg_size)
        .enumerate()
        .map(|(i, c)| Segment {
            index: i as u16,
            bytes: c.to_vec(),
            cached_sum: ones_sum(c),
        })
        .collect())
}
