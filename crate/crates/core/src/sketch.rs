//! Bloom filters and a count-min sketch with probe accounting.

/// Bits and hash count for a Bloom filter holding `n` items at false-positive
/// rate `p`: `m = ceil(-n ln p / ln(2)^2)`, `h = round(m/n * ln 2)`.
pub fn bloom_params(n: u64, p: f64) -> (u64, u32) {
    assert!(n >= 1 && p > 0.0 && p < 1.0, "bloom_params needs n >= 1 and 0 < p < 1");
    let ln2 = std::f64::consts::LN_2;
    let m = (-(n as f64) * p.ln() / (ln2 * ln2)).ceil() as u64;
    let h = ((m as f64 / n as f64) * ln2).round().max(1.0) as u32;
    (m, h)
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Two independent 64-bit digests of `key` under `seed`.
pub fn digest_pair(key: &[u8], seed: u64) -> (u64, u64) {
    let mut a = 0xcbf29ce484222325u64 ^ seed;
    let mut b = mix64(seed ^ 0x9e3779b97f4a7c15);
    for &x in key {
        a = (a ^ x as u64).wrapping_mul(0x100000001b3);
        b = mix64(b ^ x as u64);
    }
    (mix64(a), mix64(b ^ key.len() as u64) | 1)
}

#[derive(Debug, Clone)]
pub struct BloomFilter {
    bits: Vec<u64>,
    m: u64,
    h: u32,
    seed: u64,
    inserted: u64,
}

impl BloomFilter {
    pub fn with_capacity(n: u64, p: f64, seed: u64) -> Self {
        let (m, h) = bloom_params(n, p);
        Self::with_bits(m, h, seed)
    }

    pub fn with_bits(m: u64, h: u32, seed: u64) -> Self {
        BloomFilter {
            bits: vec![0; m.div_ceil(64) as usize],
            m,
            h,
            seed,
            inserted: 0,
        }
    }

    pub fn bits(&self) -> u64 {
        self.m
    }

    pub fn hash_count(&self) -> u32 {
        self.h
    }

    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    /// Configured size in bytes (`m / 8`, possibly fractional).
    pub fn size_bytes(&self) -> f64 {
        self.m as f64 / 8.0
    }

    fn positions(&self, key: &[u8]) -> impl Iterator<Item = u64> + '_ {
        let (a, b) = digest_pair(key, self.seed);
        (0..self.h as u64).map(move |i| a.wrapping_add(i.wrapping_mul(b)) % self.m)
    }

    /// Inserts `key`; returns the number of bit probes made.
    pub fn insert(&mut self, key: &[u8]) -> u32 {
        let pos: Vec<u64> = self.positions(key).collect();
        for p in pos {
            self.bits[(p / 64) as usize] |= 1 << (p % 64);
        }
        self.inserted += 1;
        self.h
    }

    /// Membership test; returns the answer and the number of bit probes made.
    pub fn probe(&self, key: &[u8]) -> (bool, u32) {
        let mut n = 0;
        for p in self.positions(key) {
            n += 1;
            if self.bits[(p / 64) as usize] & (1 << (p % 64)) == 0 {
                return (false, n);
            }
        }
        (true, n)
    }

    pub fn contains(&self, key: &[u8]) -> bool {
        self.probe(key).0
    }

    pub fn clear(&mut self) {
        self.bits.iter_mut().for_each(|w| *w = 0);
        self.inserted = 0;
    }
}

/// Count-min sketch of saturating 16-bit counters.
#[derive(Debug, Clone)]
pub struct CountMinSketch {
    rows: Vec<Vec<u16>>,
    width: usize,
    seed: u64,
}

impl CountMinSketch {
    pub fn new(depth: usize, width: usize, seed: u64) -> Self {
        assert!(depth >= 1 && width >= 1);
        CountMinSketch {
            rows: vec![vec![0; width]; depth],
            width,
            seed,
        }
    }

    pub fn depth(&self) -> usize {
        self.rows.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn size_bytes(&self) -> usize {
        self.rows.len() * self.width * 2
    }

    fn column(&self, row: usize, key: &[u8]) -> usize {
        let (a, b) = digest_pair(key, self.seed);
        (a.wrapping_add((row as u64).wrapping_mul(b)) % self.width as u64) as usize
    }

    /// Adds one occurrence of `key` and returns its new estimate.
    pub fn add(&mut self, key: &[u8]) -> u16 {
        let mut est = u16::MAX;
        for r in 0..self.rows.len() {
            let c = self.column(r, key);
            let cell = &mut self.rows[r][c];
            *cell = cell.saturating_add(1);
            est = est.min(*cell);
        }
        est
    }

    pub fn estimate(&self, key: &[u8]) -> u16 {
        (0..self.rows.len())
            .map(|r| self.rows[r][self.column(r, key)])
            .min()
            .unwrap_or(0)
    }

    pub fn clear(&mut self) {
        for r in &mut self.rows {
            r.iter_mut().for_each(|c| *c = 0);
        }
    }
}
