//! Count-based n-gram model with Laplace smoothing.
//!
//! Serves two roles: an exact, brute-force-checkable oracle for the
//! prediction interface, and a cheap stand-in reference model in tests.
//! Contexts shorter than `order - 1` are left-padded with BOS, matching the
//! BOS-prefixed convention of the transformer.

use crate::error::{Error, Result};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Default)]
struct ContextCounts {
    total: u64,
    by_token: BTreeMap<u32, u64>,
}

#[derive(Debug, Clone)]
pub struct NGramModel {
    pub order: usize,
    pub lambda: f64,
    pub vocab_size: usize,
    pub bos: u32,
    counts: BTreeMap<Vec<u32>, ContextCounts>,
}

/// Fit from whole captions (without BOS; padding is internal).
pub fn ngram_fit(
    captions: &[Vec<u32>],
    order: usize,
    lambda: f64,
    vocab_size: usize,
    bos: u32,
) -> Result<NGramModel> {
    if captions.is_empty() {
        return Err(Error::invalid("cannot fit an n-gram on an empty corpus"));
    }
    if order < 1 {
        return Err(Error::invalid("order must be >= 1"));
    }
    if !(lambda > 0.0) {
        return Err(Error::invalid("lambda must be > 0"));
    }
    let mut counts: BTreeMap<Vec<u32>, ContextCounts> = BTreeMap::new();
    let ctx_len = order - 1;
    for caption in captions {
        let mut padded = vec![bos; ctx_len];
        padded.extend_from_slice(caption);
        for i in 0..caption.len() {
            let context = padded[i..i + ctx_len].to_vec();
            let next = caption[i];
            let entry = counts.entry(context).or_default();
            entry.total += 1;
            *entry.by_token.entry(next).or_insert(0) += 1;
        }
    }
    Ok(NGramModel {
        order,
        lambda,
        vocab_size,
        bos,
        counts,
    })
}

/// Smoothed conditional probability of `next` after `prefix`.
pub fn ngram_prob(model: &NGramModel, prefix: &[u32], next: u32) -> Result<f64> {
    if next as usize >= model.vocab_size {
        return Err(Error::invalid(format!(
            "token {next} outside vocabulary of size {}",
            model.vocab_size
        )));
    }
    let ctx_len = model.order - 1;
    let mut context = vec![model.bos; ctx_len.saturating_sub(prefix.len())];
    let tail_start = prefix.len().saturating_sub(ctx_len);
    context.extend_from_slice(&prefix[tail_start..]);
    let (count, total) = match model.counts.get(&context) {
        Some(c) => (*c.by_token.get(&next).unwrap_or(&0), c.total),
        None => (0, 0),
    };
    Ok((count as f64 + model.lambda)
        / (total as f64 + model.lambda * model.vocab_size as f64))
}

impl NGramModel {
    /// Reference probabilities for each caption token given its predecessors.
    pub fn caption_probs(&self, caption: &[u32]) -> Result<Vec<f64>> {
        (0..caption.len())
            .map(|i| ngram_prob(self, &caption[..i], caption[i]))
            .collect()
    }

    /// Content hash over the count tables (BTreeMap order is canonical).
    pub fn hash_hex(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.order.to_le_bytes());
        hasher.update(self.lambda.to_le_bytes());
        hasher.update(self.vocab_size.to_le_bytes());
        hasher.update(self.bos.to_le_bytes());
        for (context, c) in &self.counts {
            hasher.update((context.len() as u64).to_le_bytes());
            for t in context {
                hasher.update(t.to_le_bytes());
            }
            hasher.update(c.total.to_le_bytes());
            for (tok, n) in &c.by_token {
                hasher.update(tok.to_le_bytes());
                hasher.update(n.to_le_bytes());
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<u32> {
        // a=0 b=1 c=2
        s.split_whitespace()
            .map(|w| match w {
                "a" => 0,
                "b" => 1,
                "c" => 2,
                _ => panic!("unknown token"),
            })
            .collect()
    }

    #[test]
    fn bigram_example() {
        let corpus = vec![toks("a b"), toks("a b")];
        let m = ngram_fit(&corpus, 2, 1.0, 2, 9).unwrap();
        // context [a]: b seen twice -> (2+1)/(2+2)
        assert_eq!(ngram_prob(&m, &toks("a"), 1).unwrap(), 0.75);
    }

    #[test]
    fn unigram_example() {
        let corpus = vec![toks("a")];
        let m = ngram_fit(&corpus, 1, 1.0, 2, 9).unwrap();
        assert_eq!(ngram_prob(&m, &[], 0).unwrap(), 2.0 / 3.0);
    }

    #[test]
    fn heavy_smoothing_approaches_uniform() {
        let corpus = vec![toks("a b a b a b")];
        let m = ngram_fit(&corpus, 2, 1e9, 3, 9).unwrap();
        let p = ngram_prob(&m, &toks("a"), 1).unwrap();
        assert!((p - 1.0 / 3.0).abs() < 1e-6, "{p}");
    }

    #[test]
    fn unseen_context_is_uniform() {
        let corpus = vec![toks("a b")];
        let m = ngram_fit(&corpus, 2, 1.0, 3, 9).unwrap();
        assert_eq!(ngram_prob(&m, &toks("c"), 0).unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn distribution_sums_to_one() {
        let corpus = vec![toks("a b c a b"), toks("b c a")];
        let m = ngram_fit(&corpus, 3, 0.5, 3, 9).unwrap();
        for prefix in [vec![], toks("a"), toks("a b"), toks("c a")] {
            let sum: f64 = (0..3u32)
                .map(|t| ngram_prob(&m, &prefix, t).unwrap())
                .sum();
            assert!((sum - 1.0).abs() < 1e-12, "prefix {prefix:?} sums to {sum}");
        }
    }

    #[test]
    fn out_of_vocab_rejected() {
        let corpus = vec![toks("a b")];
        let m = ngram_fit(&corpus, 2, 1.0, 2, 9).unwrap();
        assert!(ngram_prob(&m, &toks("a"), 5).is_err());
    }

    #[test]
    fn fit_rejects_bad_args() {
        assert!(ngram_fit(&[], 2, 1.0, 2, 9).is_err());
        assert!(ngram_fit(&[toks("a")], 0, 1.0, 2, 9).is_err());
        assert!(ngram_fit(&[toks("a")], 2, 0.0, 2, 9).is_err());
    }

    /// Independent oracle: count (context, next) pairs by rescanning the
    /// corpus, then apply the smoothing formula with the same arithmetic.
    fn brute_force_prob(
        captions: &[Vec<u32>],
        order: usize,
        lambda: f64,
        vocab_size: usize,
        bos: u32,
        prefix: &[u32],
        next: u32,
    ) -> f64 {
        let ctx_len = order - 1;
        let mut query = vec![bos; ctx_len.saturating_sub(prefix.len())];
        let tail_start = prefix.len().saturating_sub(ctx_len);
        query.extend_from_slice(&prefix[tail_start..]);
        let mut count = 0u64;
        let mut total = 0u64;
        for caption in captions {
            let mut padded = vec![bos; ctx_len];
            padded.extend_from_slice(caption);
            for i in 0..caption.len() {
                if padded[i..i + ctx_len] == query[..] {
                    total += 1;
                    if caption[i] == next {
                        count += 1;
                    }
                }
            }
        }
        (count as f64 + lambda) / (total as f64 + lambda * vocab_size as f64)
    }

    #[test]
    fn matches_brute_force_enumeration_exactly() {
        let mut rng = crate::rng::DetRng::from_seed(2024);
        let vocab = 6usize;
        let bos = 7u32;
        for order in 1..=3 {
            let captions: Vec<Vec<u32>> = (0..100)
                .map(|_| {
                    let len = 1 + rng.below(12) as usize;
                    (0..len).map(|_| rng.below(vocab as u64) as u32).collect()
                })
                .collect();
            let m = ngram_fit(&captions, order, 0.75, vocab, bos).unwrap();
            for _ in 0..200 {
                let plen = rng.below(4) as usize;
                let prefix: Vec<u32> =
                    (0..plen).map(|_| rng.below(vocab as u64) as u32).collect();
                let next = rng.below(vocab as u64) as u32;
                let got = ngram_prob(&m, &prefix, next).unwrap();
                let want =
                    brute_force_prob(&captions, order, 0.75, vocab, bos, &prefix, next);
                assert_eq!(got, want, "order {order} prefix {prefix:?} next {next}");
            }
        }
    }
}
