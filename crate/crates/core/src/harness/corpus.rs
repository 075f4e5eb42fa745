//! Seeded synthetic text standing in for a natural-language corpus.
//!
//! A fixed lexicon of lowercase pseudo-words is sampled with Zipf(1.1)
//! frequencies and joined with spaces, punctuation and newlines, then mapped
//! to byte tokens. Every sequence has its own stream, so sequence `i` is the
//! same no matter how many are requested.

use rand::Rng;
use rand_distr::{Distribution, Zipf};

use crate::model::TokenSequence;
use crate::rng::stream_rng;

const LEXICON_SIZE: usize = 2000;
const LEXICON_STREAM: u64 = u64::MAX;

fn lexicon(seed: u64) -> Vec<Vec<u8>> {
    let mut rng = stream_rng(seed, LEXICON_STREAM);
    (0..LEXICON_SIZE)
        .map(|_| {
            let len = rng.random_range(1..=9);
            (0..len).map(|_| rng.random_range(b'a'..=b'z')).collect()
        })
        .collect()
}

/// `count` sequences of exactly `length` tokens, starting at stream `first`.
pub fn synthetic_corpus(seed: u64, first: usize, count: usize, length: usize, vocab_size: usize) -> Vec<TokenSequence> {
    let words = lexicon(seed);
    let zipf = Zipf::new(LEXICON_SIZE as f64, 1.1).expect("valid zipf parameters");
    (first..first + count)
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let mut bytes: Vec<u8> = Vec::with_capacity(length + 16);
            while bytes.len() < length {
                let w = &words[zipf.sample(&mut rng) as usize - 1];
                bytes.extend_from_slice(w);
                let r: f64 = rng.random();
                if r < 0.06 {
                    bytes.extend_from_slice(b". ");
                } else if r < 0.1 {
                    bytes.extend_from_slice(b", ");
                } else if r < 0.11 {
                    bytes.push(b'\n');
                } else {
                    bytes.push(b' ');
                }
            }
            bytes.truncate(length);
            let ids = bytes.iter().map(|&b| u32::from(b) % vocab_size as u32).collect();
            TokenSequence::new(ids, vocab_size).expect("ids reduced into vocabulary")
        })
        .collect()
}
