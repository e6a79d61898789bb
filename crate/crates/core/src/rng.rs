//! LFSR113 combined Tausworthe generator (L'Ecuyer's four-component
//! construction, period ≈ 2^113) and per-worker stream derivation.

/// Generator state. Component `zk` must exceed 1, 7, 15 and 127 respectively,
/// otherwise the corresponding component recurrence degenerates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Lfsr113 {
    z: [u32; 4],
}

/// Component lower bounds; a legal seed has `z[k] > LOWER_BOUNDS[k]`.
pub const LOWER_BOUNDS: [u32; 4] = [1, 7, 15, 127];

const TO_UNIT: f64 = 1.0 / 4_294_967_296.0;

impl Lfsr113 {
    /// Builds a state from four words. Components at or below their bound are
    /// OR-ed with `bound + 1`, which makes seeding total and deterministic.
    pub fn seed(s1: u32, s2: u32, s3: u32, s4: u32) -> Self {
        let mut z = [s1, s2, s3, s4];
        for (w, &b) in z.iter_mut().zip(&LOWER_BOUNDS) {
            if *w <= b {
                *w |= b + 1;
            }
        }
        Self { z }
    }

    pub fn state(&self) -> [u32; 4] {
        self.z
    }

    pub fn is_legal(&self) -> bool {
        self.z.iter().zip(&LOWER_BOUNDS).all(|(w, b)| w > b)
    }

    pub fn next_u32(&mut self) -> u32 {
        let [z1, z2, z3, z4] = &mut self.z;
        let b = ((*z1 << 6) ^ *z1) >> 13;
        *z1 = ((*z1 & 0xFFFF_FFFE) << 18) ^ b;
        let b = ((*z2 << 2) ^ *z2) >> 27;
        *z2 = ((*z2 & 0xFFFF_FFF8) << 2) ^ b;
        let b = ((*z3 << 13) ^ *z3) >> 21;
        *z3 = ((*z3 & 0xFFFF_FFF0) << 7) ^ b;
        let b = ((*z4 << 3) ^ *z4) >> 12;
        *z4 = ((*z4 & 0xFFFF_FF80) << 13) ^ b;
        *z1 ^ *z2 ^ *z3 ^ *z4
    }

    /// Next value in [0, 1).
    pub fn next_u01(&mut self) -> f64 {
        f64::from(self.next_u32()) * TO_UNIT
    }

    /// Independent stream for worker `rank` under `master_seed`.
    ///
    /// The pair is folded through a splitmix64 finaliser (a bijection on u64),
    /// split into four words, remapped by [`Lfsr113::seed`] and warmed up by 16
    /// draws.
    pub fn derive_stream(master_seed: u64, rank: u64) -> Self {
        const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
        let mut x = master_seed.wrapping_add(rank.wrapping_add(1).wrapping_mul(GOLDEN));
        let mut next = || {
            x = x.wrapping_add(GOLDEN);
            splitmix64(x)
        };
        let (a, b) = (next(), next());
        let mut g = Self::seed(a as u32, (a >> 32) as u32, b as u32, (b >> 32) as u32);
        for _ in 0..16 {
            g.next_u32();
        }
        g
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
