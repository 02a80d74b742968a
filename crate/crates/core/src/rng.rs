//! SplitMix64, the array initializer shared by every generated driver.
//!
//! The C drivers carry a line-for-line copy of this generator so that seeded
//! inputs are identical on every backend and platform.

#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [-1, 1) with 24 bits of resolution; exact in binary32.
    pub fn next_f32(&mut self) -> f32 {
        let k = (self.next_u64() >> 40) as f32;
        k * (1.0 / 8_388_608.0) - 1.0
    }

    /// Uniform integer in [-100, 100].
    pub fn next_i32(&mut self) -> i32 {
        ((self.next_u64() >> 33) % 201) as i32 - 100
    }
}

/// Values of a `random(seed)` f32 array, as the drivers produce them.
pub fn random_f32(seed: u64, len: usize) -> Vec<f32> {
    let mut g = SplitMix64::new(seed);
    (0..len).map(|_| g.next_f32()).collect()
}

/// Values of a `random(seed)` i32 array.
pub fn random_i32(seed: u64, len: usize) -> Vec<i32> {
    let mut g = SplitMix64::new(seed);
    (0..len).map(|_| g.next_i32()).collect()
}

/// Bit patterns of a `random(seed)` f16 array (binary32 rounded to nearest even).
pub fn random_f16_bits(seed: u64, len: usize) -> Vec<u16> {
    random_f32(seed, len).into_iter().map(|x| half::f16::from_f32(x).to_bits()).collect()
}
