//! Seeded random streams.
//!
//! Every consumer of randomness draws from its own ChaCha8 stream. A stream is
//! identified by the run seed plus a name: the seed keys the generator and the
//! 64-bit FNV-1a hash of the name selects the ChaCha stream id. Parameters use
//! their dotted path (`layers.2.attn.wq`) as the name, the batch sampler uses
//! `"data"`. Adding or reordering parameters therefore never shifts the values
//! drawn for any other parameter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn fnv1a64(name: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in name.bytes() {
        hash ^= u64::from(byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a64(name));
    rng
}

/// Normal samples with the given std, redrawn until within two standard deviations.
pub fn truncated_normal(rng: &mut impl Rng, len: usize, std: f64) -> Vec<f64> {
    (0..len)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect()
}

/// Serializable position of a stream, enough to resume it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StreamState {
    pub seed: u64,
    pub stream: u64,
    /// Word position, as a decimal string since JSON numbers stop at 2^53.
    #[serde(with = "u128_string")]
    pub word_pos: u128,
}

impl StreamState {
    pub fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        StreamState { seed, stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

mod u128_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&value.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_streams_are_independent_and_reproducible() {
        let a: Vec<u64> = (0..4).map(|_| stream(7, "wq").random()).collect();
        let mut r = stream(7, "wq");
        let b: Vec<u64> = (0..4).map(|_| r.random()).collect();
        assert_eq!(a.len(), 4);
        let mut r2 = stream(7, "wq");
        let c: Vec<u64> = (0..4).map(|_| r2.random()).collect();
        assert_eq!(b, c);
        let mut other = stream(7, "wk");
        assert_ne!(b[0], other.random::<u64>());
    }

    #[test]
    fn stream_state_resumes() {
        let mut rng = stream(3, "data");
        for _ in 0..11 {
            let _: u32 = rng.random();
        }
        let state = StreamState::capture(3, &rng);
        let mut resumed = state.restore();
        assert_eq!(rng.random::<u64>(), resumed.random::<u64>());
    }

    #[test]
    fn truncated_normal_is_bounded() {
        let mut rng = stream(1, "x");
        let xs = truncated_normal(&mut rng, 10_000, 0.02);
        assert!(xs.iter().all(|x| x.abs() <= 0.04));
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 1e-3);
    }
}
