//! Shared test oracles.

/// Reference LFSR113, written from the generator's defining parameters.
///
/// Component j is a Tausworthe recurrence of degree k with parameters (q, s);
/// its mask keeps the top k bits of the word.
pub struct OracleLfsr113 {
    z: [u64; 4],
}

const PARAMS: [(u32, u32, u32); 4] = [(31, 6, 18), (29, 2, 2), (28, 13, 7), (25, 3, 13)];
const WORD: u64 = 0xFFFF_FFFF;

impl OracleLfsr113 {
    pub fn new(seed: [u32; 4]) -> Self {
        Self {
            z: seed.map(u64::from),
        }
    }

    pub fn state(&self) -> [u32; 4] {
        self.z.map(|w| w as u32)
    }

    pub fn next_u32(&mut self) -> u32 {
        let mut out = 0u64;
        for (z, &(k, q, s)) in self.z.iter_mut().zip(&PARAMS) {
            let mask = (WORD << (32 - k)) & WORD;
            let b = ((((*z << q) & WORD) ^ *z) >> (k - s)) & WORD;
            *z = (((*z & mask) << s) & WORD) ^ b;
            out ^= *z;
        }
        out as u32
    }

    pub fn next_u01(&mut self) -> f64 {
        self.next_u32() as f64 * 2.328_306_436_538_696_3e-10
    }
}

/// Legal seeds (component k above 1, 7, 15, 127) from a fixed xorshift walk.
pub fn legal_seeds(count: usize, mut x: u64) -> Vec<[u32; 4]> {
    let mut word = move || {
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        (x >> 16) as u32
    };
    let bounds = [1u32, 7, 15, 127];
    (0..count)
        .map(|_| bounds.map(|b| loop {
            let w = word();
            if w > b {
                break w;
            }
        }))
        .collect()
}
