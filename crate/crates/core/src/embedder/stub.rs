//! Deterministic bag-of-words embedder for tests and offline runs.
//!
//! Each distinct word maps to a pseudo-random direction derived from a hash
//! of the word and the seed; a text is the sum of its words' directions,
//! unit-normalized. Texts sharing words therefore have higher cosine.

use crate::error::{Error, Result};
use crate::text::words;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn accumulate_word(acc: &mut [f64], word: &str, seed: u64) {
    let mut state = fnv1a(word.as_bytes()) ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for a in acc.iter_mut() {
        // uniform in [-1, 1)
        let u = (splitmix64(&mut state) >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        *a += 2.0 * u - 1.0;
    }
}

/// Unit-normalized stub vector for `text`.
pub fn stub_encode(text: &str, dim: usize, seed: u64) -> Result<Vec<f32>> {
    if dim < 2 {
        return Err(Error::Config("stub dim must be >= 2".into()));
    }
    let mut acc = vec![0.0f64; dim];
    let mut n = 0usize;
    for w in words(text) {
        accumulate_word(&mut acc, w, seed);
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidInput("cannot embed empty text".into()));
    }
    let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(acc.iter().map(|x| (x / norm) as f32).collect())
}
