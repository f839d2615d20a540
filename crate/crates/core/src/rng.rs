//! Counter-based random numbers.
//!
//! All randomness in the crate comes from Philox4x32-10 (Salmon et al., "Parallel random
//! numbers: as easy as 1, 2, 3"). A draw is a pure function of a 64-bit key and a 128-bit
//! counter, so any worker can reproduce any part of a stream without replaying the rest.
//!
//! Layout used throughout:
//!
//! * the key is a 64-bit seed;
//! * the upper 64 counter bits select a stream (a [`Domain`] tag plus an index);
//! * the lower 64 counter bits are the position within the stream.

use rand_core::{impls, RngCore};

const PHILOX_M0: u32 = 0xD251_1F53;
const PHILOX_M1: u32 = 0xCD9E_8D57;
const PHILOX_W0: u32 = 0x9E37_79B9;
const PHILOX_W1: u32 = 0xBB67_AE85;

#[inline]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = u64::from(a) * u64::from(b);
    ((p >> 32) as u32, p as u32)
}

/// The Philox4x32 bijection with 10 rounds.
#[inline]
pub fn philox4x32_10(mut ctr: [u32; 4], mut key: [u32; 2]) -> [u32; 4] {
    for round in 0..10 {
        if round > 0 {
            key[0] = key[0].wrapping_add(PHILOX_W0);
            key[1] = key[1].wrapping_add(PHILOX_W1);
        }
        let (hi0, lo0) = mulhilo(PHILOX_M0, ctr[0]);
        let (hi1, lo1) = mulhilo(PHILOX_M1, ctr[2]);
        ctr = [hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0];
    }
    ctr
}

/// Two 64-bit words at counter `(stream, position)` under `seed`.
#[inline]
pub fn block(seed: u64, stream: u64, position: u64) -> [u64; 2] {
    let key = [seed as u32, (seed >> 32) as u32];
    let ctr = [
        position as u32,
        (position >> 32) as u32,
        stream as u32,
        (stream >> 32) as u32,
    ];
    let out = philox4x32_10(ctr, key);
    [
        u64::from(out[0]) | (u64::from(out[1]) << 32),
        u64::from(out[2]) | (u64::from(out[3]) << 32),
    ]
}

/// Stream families. The tag occupies the top byte of the stream word.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Domain {
    /// Per-node standard normal noise of a sample.
    NodeNoise = 1,
    /// Seed derivation.
    Derive = 2,
    /// Prior draws (one stream per draw).
    Prior = 3,
    /// Bootstrap resampling.
    Bootstrap = 4,
    /// Generic auxiliary stream (panels, random test inputs).
    Aux = 5,
}

#[inline]
pub fn stream_id(domain: Domain, index: u64) -> u64 {
    debug_assert!(index < 1 << 56);
    (u64::from(domain as u8) << 56) | (index & ((1 << 56) - 1))
}

/// Derive an independent seed from a master seed and a path of indices
/// (e.g. `[cell, trial]`).
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(master, |acc, &ix| {
        block(acc, stream_id(Domain::Derive, 0), ix)[0]
    })
}

/// Uniform on the open interval (0, 1) from the top 53 bits.
#[inline]
pub fn open01(x: u64) -> f64 {
    ((x >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Box–Muller pair from one Philox block.
#[inline]
fn normal_pair(words: [u64; 2]) -> (f64, f64) {
    let r = (-2.0 * open01(words[0]).ln()).sqrt();
    let theta = std::f64::consts::TAU * open01(words[1]);
    let (s, c) = theta.sin_cos();
    (r * c, r * s)
}

/// The standard normal attached to `node` of the noise field keyed by `seed`.
///
/// Nodes `2i` and `2i + 1` share one Philox block (cosine and sine branch).
#[inline]
pub fn node_normal(seed: u64, node: u64) -> f64 {
    let (c, s) = normal_pair(block(seed, stream_id(Domain::NodeNoise, 0), node >> 1));
    if node & 1 == 0 {
        c
    } else {
        s
    }
}

/// Fill `out[node]` for every node of `nodes` (any order) with the noise field under `seed`.
pub fn fill_node_normals(seed: u64, nodes: &[u32], out: &mut [f64]) {
    let stream = stream_id(Domain::NodeNoise, 0);
    let mut cached: Option<(u64, (f64, f64))> = None;
    for &v in nodes {
        let pair_ix = u64::from(v) >> 1;
        let pair = match cached {
            Some((ix, p)) if ix == pair_ix => p,
            _ => {
                let p = normal_pair(block(seed, stream, pair_ix));
                cached = Some((pair_ix, p));
                p
            }
        };
        out[v as usize] = if v & 1 == 0 { pair.0 } else { pair.1 };
    }
}

/// A sequential generator over one Philox stream. Implements [`RngCore`] so the
/// `rand` distribution machinery can sit on top of it.
#[derive(Debug, Clone)]
pub struct CounterRng {
    seed: u64,
    stream: u64,
    position: u64,
    buf: [u64; 2],
    used: usize,
}

impl CounterRng {
    pub fn new(seed: u64, domain: Domain, index: u64) -> Self {
        Self {
            seed,
            stream: stream_id(domain, index),
            position: 0,
            buf: [0; 2],
            used: 2,
        }
    }
}

impl RngCore for CounterRng {
    fn next_u32(&mut self) -> u32 {
        self.next_u64() as u32
    }

    fn next_u64(&mut self) -> u64 {
        if self.used == 2 {
            self.buf = block(self.seed, self.stream, self.position);
            self.position += 1;
            self.used = 0;
        }
        let x = self.buf[self.used];
        self.used += 1;
        x
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        impls::fill_bytes_via_next(self, dest)
    }
}
