//! Long-running measurements shared by the acceptance suite.

use std::net::Ipv4Addr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sabre_core::switch::{FilterSpec, Inbound, Switch, SwitchConfig, DAY_MS, MINUTE_MS};
use sabre_core::wire::{BlockHash, Endpoint, Message};

pub const BLOCKS_PER_DAY: u64 = 144;
pub const BLOCK_INTERVAL_MS: u64 = DAY_MS / BLOCKS_PER_DAY;

/// Whitelist occupancy held by a single actor, sampled once per minute
/// after the first expiry period.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Occupancy {
    pub mean: f64,
    pub min: usize,
    pub max: usize,
    pub blocks: u64,
}

impl Occupancy {
    /// Entries the actor holds on average, whole entries only.
    pub fn sustained(&self) -> usize {
        self.mean.floor() as usize
    }
}

/// Runs one switch for `days` of simulated time. Every block interval a
/// block is found; the actor finds an exact `share` of them with a seeded
/// phase, handshakes from a fresh address and advertises it. The whitelist
/// cap is lifted so that only the expiry limits what the actor keeps.
pub fn whitelist_occupancy(share: f64, seed: u64, days: u64) -> Occupancy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SwitchConfig {
        whitelist: FilterSpec::new(10_000, 1e-4),
        whitelist_threshold: 10_000,
        seed,
        ..SwitchConfig::default()
    };
    let ttl = cfg.whitelist_ttl_ms;
    let mut sw = Switch::new(cfg, Endpoint::new(Ipv4Addr::new(10, 0, 0, 1), 8333), Vec::new());
    let mut acc: f64 = rng.gen();
    let end = days * DAY_MS;
    let warmup = ttl + DAY_MS;
    let mut tally = Tally { sum: 0, samples: 0, min: usize::MAX, max: 0 };
    let mut blocks = 0u64;
    let mut next_sample = MINUTE_MS / 2;
    for i in 0..days * BLOCKS_PER_DAY {
        let at = i * BLOCK_INTERVAL_MS;
        while next_sample < at {
            tally.sample(&mut sw, next_sample, warmup);
            next_sample += MINUTE_MS;
        }
        acc += share;
        if acc < 1.0 {
            continue;
        }
        acc -= 1.0;
        blocks += 1;
        let from = Endpoint::new(Ipv4Addr::from(0x6400_0000 + i as u32), 8333);
        let out = sw.handle_packet(from, Inbound::Wire(Message::Syn), at);
        let Some(Message::SynAck { secret }) = out.replies.first().map(|r| r.msg.clone()) else {
            continue;
        };
        sw.handle_packet(from, Inbound::Wire(Message::Ack { secret }), at);
        let hash = BlockHash::of(&i.to_be_bytes());
        sw.handle_packet(from, Inbound::Wire(Message::Adv { hash }), at);
    }
    while next_sample < end {
        tally.sample(&mut sw, next_sample, warmup);
        next_sample += MINUTE_MS;
    }
    Occupancy {
        mean: tally.sum as f64 / tally.samples.max(1) as f64,
        min: if tally.samples == 0 { 0 } else { tally.min },
        max: tally.max,
        blocks,
    }
}

struct Tally {
    sum: u64,
    samples: u64,
    min: usize,
    max: usize,
}

impl Tally {
    fn sample(&mut self, sw: &mut Switch, now: u64, warmup: u64) {
        sw.maintain(now);
        if now < warmup {
            return;
        }
        let n = sw.whitelist_len();
        self.sum += n as u64;
        self.samples += 1;
        self.min = self.min.min(n);
        self.max = self.max.max(n);
    }
}
