//! Byte-level corpora.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

pub fn tokenize(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

pub fn detokenize(tokens: &[usize]) -> Vec<u8> {
    tokens.iter().map(|&t| t.min(255) as u8).collect()
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let tokens = tokenize(&std::fs::read(path)?);
    if tokens.is_empty() {
        return Err(Error::Config("corpus is empty".into()));
    }
    Ok(tokens)
}

/// Splits off the last `fraction` of the corpus, rounded down to whole
/// windows of `align` tokens.
pub fn split_holdout(tokens: &[usize], fraction: f64, align: usize) -> (Vec<usize>, Vec<usize>) {
    let align = align.max(1);
    let windows = tokens.len() / align;
    let held = ((windows as f64 * fraction).round() as usize).min(windows);
    let cut = (windows - held) * align;
    (tokens[..cut].to_vec(), tokens[cut..windows * align].to_vec())
}

/// Synthetic recall sequences: a start byte, a random key, predictable
/// filler, a marker, then the key again at the end of the sequence. The
/// repeated key can only be predicted by reaching back to the start.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecallTask {
    pub seq_len: usize,
    pub key_len: usize,
}

pub const RECALL_START: u8 = b'^';
pub const RECALL_MARKER: u8 = b'=';
const KEY_ALPHABET: &[u8] = b"0123456789";
const FILLER_ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz";

impl RecallTask {
    pub fn new(seq_len: usize, key_len: usize) -> Result<Self> {
        if key_len == 0 || seq_len < 2 * key_len + 3 {
            return Err(Error::Config(format!(
                "recall sequence of length {seq_len} cannot hold two keys of length {key_len}"
            )));
        }
        Ok(Self { seq_len, key_len })
    }

    pub fn sequence<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<u8> {
        let key: Vec<u8> = (0..self.key_len)
            .map(|_| KEY_ALPHABET[rng.gen_range(0..KEY_ALPHABET.len())])
            .collect();
        let filler_len = self.seq_len - 2 * self.key_len - 2;
        let offset = rng.gen_range(0..FILLER_ALPHABET.len());
        let mut s = Vec::with_capacity(self.seq_len);
        s.push(RECALL_START);
        s.extend_from_slice(&key);
        s.extend((0..filler_len).map(|i| FILLER_ALPHABET[(offset + i) % FILLER_ALPHABET.len()]));
        s.push(RECALL_MARKER);
        s.extend_from_slice(&key);
        s
    }

    /// `n` sequences back to back.
    pub fn corpus<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        (0..n).flat_map(|_| tokenize(&self.sequence(rng))).collect()
    }

    /// Positions within a sequence whose target is a recalled key byte.
    pub fn recall_positions(&self) -> std::ops::Range<usize> {
        self.seq_len - self.key_len - 1..self.seq_len - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn recall_sequence_layout() {
        let task = RecallTask::new(32, 4).unwrap();
        let s = task.sequence(&mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(s.len(), 32);
        assert_eq!(s[0], RECALL_START);
        assert_eq!(s[27], RECALL_MARKER);
        assert_eq!(&s[1..5], &s[28..32]);
        for p in task.recall_positions() {
            assert_eq!(s[p + 1], s[p + 1 - 27]);
        }
    }

    #[test]
    fn rejects_short_sequences() {
        assert!(RecallTask::new(10, 4).is_err());
        assert!(RecallTask::new(11, 4).is_ok());
    }

    #[test]
    fn holdout_split_is_aligned() {
        let t: Vec<usize> = (0..105).collect();
        let (a, b) = split_holdout(&t, 0.2, 10);
        assert_eq!((a.len(), b.len()), (80, 20));
        assert_eq!(b[0], 80);
    }

    #[test]
    fn bytes_round_trip() {
        assert_eq!(detokenize(&tokenize(b"hello\xff")), b"hello\xff");
    }
}
