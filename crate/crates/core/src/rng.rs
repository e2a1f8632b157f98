use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Names one independent random stream: a run seed plus a stream id
/// (path index, particle index, ...). Streams never overlap, so work keyed
/// by stream id gives the same numbers under any scheduling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedStream {
    pub seed: u64,
    pub stream: u64,
}

impl SeedStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    /// Derive a sub-stream; `tag` separates unrelated consumers of the same seed.
    pub fn child(&self, tag: u64, index: u64) -> Self {
        // splitmix-style mixing keeps distinct (tag, index) pairs apart
        let mut z = self
            .stream
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(tag.wrapping_mul(0xBF58_476D_1CE4_E5B9))
            .wrapping_add(index.wrapping_mul(0x94D0_49BB_1331_11EB));
        z ^= z >> 31;
        z = z.wrapping_mul(0xD6E8_FEB8_6659_FD93);
        z ^= z >> 29;
        Self {
            seed: self.seed,
            stream: z,
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

/// Stream tags keeping unrelated consumers of one seed apart.
pub(crate) mod tags {
    pub const INITIAL: u64 = 1;
    pub const INDIVIDUAL: u64 = 2;
    pub const COMMON: u64 = 3;
    pub const BRANCH: u64 = 4;
}

/// Brownian increments N(0, dt) for `n` independent particles over `nt` steps,
/// row-major by particle; particle `j` draws from its own stream.
pub fn brownian_increments(stream: SeedStream, tag: u64, n: usize, nt: usize, dt: f64) -> Vec<f64> {
    let sd = dt.sqrt();
    let mut out = vec![0.0; n * nt];
    for (j, row) in out.chunks_mut(nt.max(1)).enumerate().take(n) {
        let mut rng = stream.child(tag, j as u64).rng();
        for v in row.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = sd * z;
        }
    }
    out
}
