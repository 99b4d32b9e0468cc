//! Byte corpora, train/valid/test splits and the batch sampler.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Byte offsets where the validation and test splits begin. `None` falls back
/// to 90% and 95% of the corpus length.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitOffsets {
    pub valid_offset: Option<usize>,
    pub test_offset: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::config(&["split"], format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    bytes: Vec<u8>,
    valid_start: usize,
    test_start: usize,
}

impl Corpus {
    pub fn from_bytes(bytes: Vec<u8>, offsets: SplitOffsets) -> Result<Self> {
        let len = bytes.len();
        let valid_start = offsets.valid_offset.unwrap_or(len / 10 * 9);
        let test_start = offsets.test_offset.unwrap_or(len / 20 * 19);
        if valid_start > test_start || test_start > len {
            return Err(Error::config(
                &["valid_offset", "test_offset"],
                format!("offsets {valid_start} and {test_start} do not fit a corpus of {len} bytes"),
            ));
        }
        Ok(Corpus { bytes, valid_start, test_start })
    }

    pub fn load(path: &Path, offsets: SplitOffsets) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(bytes, offsets)
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn split(&self, split: Split) -> &[u8] {
        match split {
            Split::Train => &self.bytes[..self.valid_start],
            Split::Valid => &self.bytes[self.valid_start..self.test_start],
            Split::Test => &self.bytes[self.test_start..],
        }
    }
}

/// Seeded English-like text: pseudo-words drawn from a Zipf law over a fixed
/// lexicon, grouped into capitalized sentences and paragraphs.
pub fn synthetic_text(seed: u64, len: usize) -> Vec<u8> {
    const LETTERS: &[u8] = b"etaoinshrdlcumwfgypbvkjxqz";
    let mut rng = rng::stream(seed, "corpus");
    let letter = Zipf::new(LETTERS.len() as f64, 1.0).expect("valid zipf");
    let lexicon: Vec<Vec<u8>> = (0..2000)
        .map(|_| {
            let n = rng.random_range(1..=9);
            (0..n).map(|_| LETTERS[letter.sample(&mut rng) as usize - 1]).collect()
        })
        .collect();
    let word = Zipf::new(lexicon.len() as f64, 1.1).expect("valid zipf");

    let mut out = Vec::with_capacity(len + 16);
    let mut sentence_start = true;
    while out.len() < len {
        let w = &lexicon[word.sample(&mut rng) as usize - 1];
        if sentence_start {
            out.push(w[0].to_ascii_uppercase());
            out.extend_from_slice(&w[1..]);
            sentence_start = false;
        } else {
            out.extend_from_slice(w);
        }
        match rng.random_range(0..100) {
            0..=5 => {
                out.extend_from_slice(b". ");
                sentence_start = true;
            }
            6 => {
                out.extend_from_slice(b".\n\n");
                sentence_start = true;
            }
            7..=10 => out.extend_from_slice(b", "),
            _ => out.push(b' '),
        }
    }
    out.truncate(len);
    out
}

/// Draws training windows at uniform random offsets.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
}

/// Inputs and next-byte targets of `batch` packed sequences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
}

impl BatchSampler {
    pub fn new(seed: u64) -> Self {
        BatchSampler { rng: rng::stream(seed, "data") }
    }

    pub fn from_rng(rng: ChaCha8Rng) -> Self {
        BatchSampler { rng }
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn sample(&mut self, data: &[u8], batch: usize, seq_len: usize) -> Result<Batch> {
        if data.len() < seq_len + 1 {
            return Err(Error::Data(format!(
                "split of {} bytes is shorter than one window of {}",
                data.len(),
                seq_len + 1
            )));
        }
        let mut inputs = Vec::with_capacity(batch * seq_len);
        let mut targets = Vec::with_capacity(batch * seq_len);
        for _ in 0..batch {
            let start = self.rng.random_range(0..=data.len() - seq_len - 1);
            let window = &data[start..start + seq_len + 1];
            inputs.extend(window[..seq_len].iter().map(|&b| b as usize));
            targets.extend(window[1..].iter().map(|&b| b as usize));
        }
        Ok(Batch { inputs, targets, batch })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_text_is_seeded_and_sized() {
        let a = synthetic_text(3, 10_000);
        assert_eq!(a.len(), 10_000);
        assert_eq!(a, synthetic_text(3, 10_000));
        assert_ne!(a, synthetic_text(4, 10_000));
        assert!(a.iter().all(|b| b.is_ascii()));
    }

    #[test]
    fn default_splits_cover_corpus() {
        let c = Corpus::from_bytes(vec![0; 1000], SplitOffsets::default()).unwrap();
        let sizes: Vec<usize> = [Split::Train, Split::Valid, Split::Test].iter().map(|&s| c.split(s).len()).collect();
        assert_eq!(sizes, vec![900, 50, 50]);
        let bad = SplitOffsets { valid_offset: Some(600), test_offset: Some(500) };
        assert!(Corpus::from_bytes(vec![0; 1000], bad).is_err());
    }

    #[test]
    fn sampled_targets_are_shifted_inputs() {
        let data: Vec<u8> = (0..=255).collect();
        let b = BatchSampler::new(0).sample(&data, 3, 8).unwrap();
        for s in 0..3 {
            for t in 0..8 {
                assert_eq!(b.targets[s * 8 + t], b.inputs[s * 8 + t] + 1);
            }
        }
        assert!(BatchSampler::new(0).sample(&data[..5], 1, 8).is_err());
    }
}
