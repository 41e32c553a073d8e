//! Deterministic random number generation and hashing.
//!
//! Everything downstream of a seed must be reproducible bit-for-bit across
//! runs and platforms, so we use a self-contained splitmix64/xoshiro256**
//! generator rather than an external crate whose stream could change under
//! a version bump. Seed derivation and config hashing use FNV-1a.

/// FNV-1a over a byte slice, 64-bit.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// 128-bit content hash built from two FNV passes with distinct offsets,
/// rendered as 32 hex chars. Used to content-address artifacts.
pub fn content_hash_hex(bytes: &[u8]) -> String {
    let a = fnv1a64(bytes);
    let mut h: u64 = 0x6c62272e07bb0142;
    for &b in bytes.iter().rev() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{a:016x}{h:016x}")
}

/// Derive a child seed from a parent seed and a label (phase name, index…).
pub fn derive_seed(parent: u64, label: &str) -> u64 {
    let mut buf = parent.to_le_bytes().to_vec();
    buf.extend_from_slice(label.as_bytes());
    fnv1a64(&buf)
}

/// Derive a child seed from a parent seed and an index.
pub fn derive_seed_idx(parent: u64, idx: u64) -> u64 {
    let mut buf = parent.to_le_bytes().to_vec();
    buf.extend_from_slice(&idx.to_le_bytes());
    fnv1a64(&buf)
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// xoshiro256** seeded via splitmix64.
#[derive(Clone, Debug)]
pub struct Rng {
    s: [u64; 4],
    spare_normal: Option<f32>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Rng {
            s,
            spare_normal: None,
        }
    }

    /// Independent child stream; streams for distinct labels never overlap
    /// in practice because the seed space is re-mixed through splitmix64.
    pub fn fork(&self, label: &str) -> Rng {
        Rng::new(derive_seed(self.s[0] ^ self.s[3], label))
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.s;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    pub fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    /// Uniform in [0, 1).
    pub fn next_f32(&mut self) -> f32 {
        ((self.next_u64() >> 40) as f32) * (1.0 / (1u64 << 24) as f32)
    }

    /// Uniform in [0, 1) with f64 resolution.
    pub fn next_f64(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n).
    pub fn next_below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_f64() * n as f64) as usize % n
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.next_f32()
    }

    /// Bernoulli draw with probability p of true.
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard normal via Box-Muller, cached in pairs.
    pub fn normal(&mut self) -> f32 {
        if let Some(v) = self.spare_normal.take() {
            return v;
        }
        // Avoid log(0).
        let u1 = (self.next_f64()).max(1e-12);
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some((r * theta.sin()) as f32);
        (r * theta.cos()) as f32
    }

    pub fn fill_normal(&mut self, buf: &mut [f32], scale: f32) {
        for v in buf.iter_mut() {
            *v = self.normal() * scale;
        }
    }
}
