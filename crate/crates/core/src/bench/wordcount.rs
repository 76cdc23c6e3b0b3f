//! Corpus generation, the map step and the sequential reference count.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A corpus of `bytes` bytes (give or take one word) of space- and
/// newline-separated words drawn from a seeded vocabulary.
pub fn generate_corpus(bytes: usize, vocabulary: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words: Vec<Vec<u8>> = (0..vocabulary.max(1))
        .map(|_| {
            let len = rng.gen_range(2..=10);
            (0..len).map(|_| rng.gen_range(b'a'..=b'z')).collect()
        })
        .collect();
    let mut out = Vec::with_capacity(bytes + 16);
    let mut line = 0;
    while out.len() < bytes {
        // a skewed pick so some words are much more common than others
        let r: f64 = rng.gen();
        let w = &words[((r * r) * words.len() as f64) as usize];
        out.extend_from_slice(w);
        line += 1;
        out.push(if line % 12 == 0 { b'\n' } else { b' ' });
    }
    out
}

/// The reference: one pass over the whole corpus.
pub fn count_words(corpus: &[u8]) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    for w in corpus
        .split(|b| b.is_ascii_whitespace())
        .filter(|w| !w.is_empty())
    {
        *counts
            .entry(String::from_utf8_lossy(w).into_owned())
            .or_insert(0) += 1;
    }
    counts
}

/// Splits the corpus into batches of about `batch` bytes, cutting only at
/// whitespace so no word straddles two batches.
pub fn split_batches(corpus: &[u8], batch: usize) -> Vec<&[u8]> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < corpus.len() {
        let mut end = (start + batch.max(1)).min(corpus.len());
        while end < corpus.len() && !corpus[end].is_ascii_whitespace() {
            end += 1;
        }
        out.push(&corpus[start..end]);
        start = end;
    }
    out
}

/// The map step for one batch: counts its words and encodes them as
/// `word\tcount\n` records.
pub fn map_batch(batch: &[u8]) -> (Vec<u8>, u64) {
    let counts = count_words(batch);
    let words = counts.values().sum();
    let mut out = Vec::new();
    for (w, n) in counts {
        out.extend_from_slice(w.as_bytes());
        out.push(b'\t');
        out.extend_from_slice(n.to_string().as_bytes());
        out.push(b'\n');
    }
    (out, words)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tiny_corpus() {
        let c = count_words(b"a b a");
        assert_eq!(c.len(), 2);
        assert_eq!(c["a"], 2);
        assert_eq!(c["b"], 1);
        assert_eq!(map_batch(b"a b a"), (b"a\t2\nb\t1\n".to_vec(), 3));
    }

    #[test]
    fn generation_is_seeded() {
        assert_eq!(generate_corpus(4096, 50, 3), generate_corpus(4096, 50, 3));
        assert_ne!(generate_corpus(4096, 50, 3), generate_corpus(4096, 50, 4));
        assert!(generate_corpus(4096, 50, 3).len() >= 4096);
    }

    proptest! {
        // Summing per-batch maps must give the whole-corpus count.
        #[test]
        fn batched_maps_sum_to_the_reference(seed in any::<u64>(), batch in 1usize..3000) {
            let corpus = generate_corpus(20_000, 40, seed);
            let mut merged: BTreeMap<String, u64> = BTreeMap::new();
            for b in split_batches(&corpus, batch) {
                let (records, _) = map_batch(b);
                for line in records.split(|&c| c == b'\n').filter(|l| !l.is_empty()) {
                    let line = std::str::from_utf8(line).unwrap();
                    let (w, n) = line.split_once('\t').unwrap();
                    *merged.entry(w.to_string()).or_insert(0) += n.parse::<u64>().unwrap();
                }
            }
            prop_assert_eq!(merged, count_words(&corpus));
        }
    }
}
