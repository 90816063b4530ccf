//! Synthetic image-caption corpora with known image-related tokens.
//!
//! An "image" is a tuple of attribute values, one per slot. Its caption is a
//! single Markov-chain walk over a filler vocabulary, split into geometric
//! runs, with each slot's attribute token inserted once at a randomly chosen
//! run boundary. Attribute values are drawn independently of the filler text,
//! so a text-only model can never beat chance (`1/s`) on them, while filler
//! transitions concentrate `gamma` of their mass on one successor and become
//! highly predictable — a wide, machine-checkable gap between image-related
//! and unrelated tokens. The `related_mask` records the ground truth.

use crate::error::{Error, Result};
use crate::rng::DetRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{BufRead, Write};

pub const BOS_ID: u32 = 0;
pub const PAD_ID: u32 = 1;

/// RNG stream index reserved for the Markov chain layout; per-sample streams
/// use the sample index and stay well below this.
const MARKOV_STREAM: u64 = 1 << 63;

/// Longest single filler run; bounds caption length.
const MAX_RUN: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    /// m: attribute slots per image.
    pub n_slots: usize,
    /// s: values per slot.
    pub attrs_per_slot: usize,
    /// f: filler vocabulary size.
    pub filler_vocab: usize,
    /// gamma: dominant transition mass, in (1/f, 1).
    pub markov_peak: f64,
    /// Geometric success probability for filler run lengths.
    pub filler_run_p: f64,
    pub runs_min: usize,
    pub runs_max: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        // a high dominant mass keeps the fraction of intrinsically
        // unpredictable filler transitions (whose importance scores rival the
        // attribute tokens') at 1 - peak = 5%, which is what makes the score
        // a strong relatedness classifier on this corpus
        CorpusSpec {
            n_slots: 3,
            attrs_per_slot: 8,
            filler_vocab: 32,
            markov_peak: 0.95,
            filler_run_p: 0.3,
            runs_min: 3,
            runs_max: 6,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_slots == 0 || self.attrs_per_slot == 0 || self.filler_vocab == 0 {
            return Err(Error::invalid("n_slots, attrs_per_slot, filler_vocab must be >= 1"));
        }
        let inv_f = 1.0 / self.filler_vocab as f64;
        if !(self.markov_peak > inv_f && self.markov_peak < 1.0) {
            return Err(Error::invalid(format!(
                "markov_peak must lie in (1/{}, 1), got {}",
                self.filler_vocab, self.markov_peak
            )));
        }
        if !(self.filler_run_p > 0.0 && self.filler_run_p < 1.0) {
            return Err(Error::invalid("filler_run_p must lie in (0, 1)"));
        }
        if self.runs_min == 0 || self.runs_min > self.runs_max {
            return Err(Error::invalid("need 1 <= runs_min <= runs_max"));
        }
        // every slot needs its own run boundary
        if self.runs_min + 1 < self.n_slots {
            return Err(Error::invalid(
                "runs_min + 1 boundaries must cover n_slots attribute insertions",
            ));
        }
        Ok(())
    }

    pub fn hash_hex(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(self).expect("spec serializes"));
        let digest = hasher.finalize();
        let mut out = String::with_capacity(64);
        for b in digest {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }
}

/// Contiguous id ranges: specials, then slot-attribute blocks, then fillers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub n_slots: usize,
    pub attrs_per_slot: usize,
    pub filler_vocab: usize,
    pub attr_start: u32,
    pub filler_start: u32,
    pub total: usize,
}

pub fn build_vocab(spec: &CorpusSpec) -> Result<VocabLayout> {
    spec.validate()?;
    let attr_count = spec.n_slots * spec.attrs_per_slot;
    Ok(VocabLayout {
        n_slots: spec.n_slots,
        attrs_per_slot: spec.attrs_per_slot,
        filler_vocab: spec.filler_vocab,
        attr_start: 2,
        filler_start: 2 + attr_count as u32,
        total: 2 + attr_count + spec.filler_vocab,
    })
}

impl VocabLayout {
    pub fn attr_id(&self, slot: usize, value: usize) -> u32 {
        debug_assert!(slot < self.n_slots && value < self.attrs_per_slot);
        self.attr_start + (slot * self.attrs_per_slot + value) as u32
    }

    pub fn filler_id(&self, index: usize) -> u32 {
        debug_assert!(index < self.filler_vocab);
        self.filler_start + index as u32
    }

    pub fn is_attr(&self, id: u32) -> bool {
        id >= self.attr_start && id < self.filler_start
    }

    pub fn is_filler(&self, id: u32) -> bool {
        id >= self.filler_start && (id as usize) < self.total
    }

    pub fn attr_slot(&self, id: u32) -> Option<usize> {
        self.is_attr(id)
            .then(|| (id - self.attr_start) as usize / self.attrs_per_slot)
    }

    pub fn attr_value(&self, id: u32) -> Option<usize> {
        self.is_attr(id)
            .then(|| (id - self.attr_start) as usize % self.attrs_per_slot)
    }

    pub fn filler_index(&self, id: u32) -> Option<usize> {
        self.is_filler(id).then(|| (id - self.filler_start) as usize)
    }

    /// Token id range for one slot's attribute values.
    pub fn slot_range(&self, slot: usize) -> std::ops::Range<u32> {
        let start = self.attr_id(slot, 0);
        start..start + self.attrs_per_slot as u32
    }
}

/// Filler transition structure: each filler has one dominant successor with
/// mass `gamma`; the remaining mass is uniform over the other fillers.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovChain {
    pub gamma: f64,
    pub dominant: Vec<usize>,
}

pub fn gen_markov(spec: &CorpusSpec) -> Result<MarkovChain> {
    spec.validate()?;
    if spec.filler_vocab < 2 {
        return Err(Error::invalid("a Markov chain needs at least 2 fillers"));
    }
    let mut rng = DetRng::for_stream(spec.seed, MARKOV_STREAM);
    let dominant = rng.permutation(spec.filler_vocab);
    Ok(MarkovChain {
        gamma: spec.markov_peak,
        dominant,
    })
}

impl MarkovChain {
    pub fn f(&self) -> usize {
        self.dominant.len()
    }

    /// Full probability row for filler index `i`.
    pub fn row(&self, i: usize) -> Vec<f64> {
        let f = self.f();
        let rest = (1.0 - self.gamma) / (f - 1) as f64;
        let mut row = vec![rest; f];
        row[self.dominant[i]] = self.gamma;
        row
    }

    fn step(&self, cur: usize, rng: &mut DetRng) -> usize {
        let f = self.f();
        if rng.next_f64() < self.gamma {
            self.dominant[cur]
        } else {
            // uniform over the f-1 non-dominant successors
            let mut j = rng.below(f as u64 - 1) as usize;
            if j >= self.dominant[cur] {
                j += 1;
            }
            j
        }
    }
}

/// One corpus record; `tokens` and `related_mask` are aligned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSample {
    /// Attribute token ids, one per slot, in slot order. Doubles as the
    /// model's image prefix.
    pub image_attrs: Vec<u32>,
    pub tokens: Vec<u32>,
    pub related_mask: Vec<bool>,
    pub spec_hash: String,
}

/// Generate sample `index` of the corpus. Samples are independent streams of
/// the corpus seed, so generation can run in any order or in parallel.
pub fn gen_sample(
    spec: &CorpusSpec,
    vocab: &VocabLayout,
    chain: &MarkovChain,
    spec_hash: &str,
    index: u64,
) -> SyntheticSample {
    let mut rng = DetRng::for_stream(spec.seed, index);
    let m = spec.n_slots;

    let image_attrs: Vec<u32> = (0..m)
        .map(|slot| vocab.attr_id(slot, rng.below(spec.attrs_per_slot as u64) as usize))
        .collect();

    let n_runs =
        spec.runs_min + rng.below((spec.runs_max - spec.runs_min + 1) as u64) as usize;
    let run_lens: Vec<usize> = (0..n_runs)
        .map(|_| rng.geometric(spec.filler_run_p, MAX_RUN))
        .collect();

    // one continuous Markov walk; run boundaries only host attribute insertions
    let total_fillers: usize = run_lens.iter().sum();
    let mut walk = Vec::with_capacity(total_fillers);
    let mut cur = rng.below(spec.filler_vocab as u64) as usize;
    walk.push(cur);
    for _ in 1..total_fillers {
        cur = chain.step(cur, &mut rng);
        walk.push(cur);
    }

    // choose m distinct boundaries out of n_runs + 1, in ascending order;
    // slot j takes the j-th boundary
    let mut boundaries: Vec<usize> = (0..=n_runs).collect();
    rng.shuffle(&mut boundaries);
    let mut chosen = boundaries[..m].to_vec();
    chosen.sort_unstable();

    let mut tokens = Vec::with_capacity(total_fillers + m);
    let mut related_mask = Vec::with_capacity(total_fillers + m);
    let mut walk_pos = 0usize;
    let mut slot = 0usize;
    for boundary in 0..=n_runs {
        while slot < m && chosen[slot] == boundary {
            tokens.push(image_attrs[slot]);
            related_mask.push(true);
            slot += 1;
        }
        if boundary < n_runs {
            for _ in 0..run_lens[boundary] {
                tokens.push(vocab.filler_id(walk[walk_pos]));
                related_mask.push(false);
                walk_pos += 1;
            }
        }
    }

    SyntheticSample {
        image_attrs,
        tokens,
        related_mask,
        spec_hash: spec_hash.to_string(),
    }
}

/// Stream `n` samples (indices `offset..offset+n`) as JSONL. Byte-identical
/// for identical `(spec, n, offset)`.
pub fn gen_corpus(spec: &CorpusSpec, n: u64, offset: u64, out: &mut dyn Write) -> Result<()> {
    if n == 0 {
        return Err(Error::invalid("corpus must contain at least one sample"));
    }
    spec.validate()?;
    let vocab = build_vocab(spec)?;
    let chain = gen_markov(spec)?;
    let spec_hash = spec.hash_hex();
    for i in 0..n {
        let sample = gen_sample(spec, &vocab, &chain, &spec_hash, offset + i);
        serde_json::to_writer(&mut *out, &sample)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Read a corpus file back; verifies that all rows share one spec hash.
pub fn read_corpus(reader: impl BufRead) -> Result<Vec<SyntheticSample>> {
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: SyntheticSample = serde_json::from_str(&line)
            .map_err(|e| Error::invalid(format!("corpus line {}: {e}", i + 1)))?;
        if sample.tokens.len() != sample.related_mask.len() {
            return Err(Error::invalid(format!(
                "corpus line {}: mask/token length mismatch",
                i + 1
            )));
        }
        if let Some(first) = samples.first() {
            let first: &SyntheticSample = first;
            if first.spec_hash != sample.spec_hash {
                return Err(Error::invalid(format!(
                    "corpus line {}: spec hash differs from line 1",
                    i + 1
                )));
            }
        }
        samples.push(sample);
    }
    if samples.is_empty() {
        return Err(Error::invalid("corpus file is empty"));
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            n_slots: 2,
            attrs_per_slot: 4,
            filler_vocab: 8,
            markov_peak: 0.7,
            filler_run_p: 0.4,
            runs_min: 2,
            runs_max: 4,
            seed: 11,
        }
    }

    #[test]
    fn vocab_arithmetic() {
        let spec = CorpusSpec::default();
        let v = build_vocab(&spec).unwrap();
        assert_eq!(v.total, 58);
        assert_eq!(v.attr_start, 2);
        assert_eq!(v.filler_start, 26);
    }

    #[test]
    fn vocab_minimal_layout() {
        let spec = CorpusSpec {
            n_slots: 1,
            attrs_per_slot: 2,
            filler_vocab: 2,
            markov_peak: 0.6,
            runs_min: 1,
            runs_max: 2,
            ..CorpusSpec::default()
        };
        let v = build_vocab(&spec).unwrap();
        assert_eq!(v.attr_id(0, 0), 2);
        assert_eq!(v.attr_id(0, 1), 3);
        assert_eq!(v.filler_id(0), 4);
        assert_eq!(v.total, 6);
    }

    #[test]
    fn vocab_ranges_are_disjoint() {
        for spec in [CorpusSpec::default(), small_spec()] {
            let v = build_vocab(&spec).unwrap();
            let mut seen = vec![false; v.total];
            seen[BOS_ID as usize] = true;
            seen[PAD_ID as usize] = true;
            for slot in 0..v.n_slots {
                for val in 0..v.attrs_per_slot {
                    let id = v.attr_id(slot, val) as usize;
                    assert!(!seen[id]);
                    seen[id] = true;
                }
            }
            for i in 0..v.filler_vocab {
                let id = v.filler_id(i) as usize;
                assert!(!seen[id]);
                seen[id] = true;
            }
            assert!(seen.iter().all(|&s| s));
        }
    }

    #[test]
    fn vocab_rejects_zero_sizes() {
        let mut spec = CorpusSpec::default();
        spec.attrs_per_slot = 0;
        assert!(build_vocab(&spec).is_err());
    }

    #[test]
    fn markov_rows_sum_to_one_with_peak() {
        let spec = CorpusSpec {
            filler_vocab: 4,
            markov_peak: 0.7,
            ..CorpusSpec::default()
        };
        let chain = gen_markov(&spec).unwrap();
        for i in 0..4 {
            let row = chain.row(i);
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            let mut sorted = row.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            assert!((sorted[0] - 0.7).abs() < 1e-12);
            for &rest in &sorted[1..] {
                assert!((rest - 0.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn markov_rejects_peak_at_uniform() {
        let mut spec = CorpusSpec::default();
        spec.markov_peak = 1.0 / spec.filler_vocab as f64;
        assert!(gen_markov(&spec).is_err());
    }

    #[test]
    fn markov_same_seed_same_chain() {
        let spec = CorpusSpec::default();
        assert_eq!(gen_markov(&spec).unwrap(), gen_markov(&spec).unwrap());
    }

    #[test]
    fn samples_are_deterministic_and_aligned() {
        let spec = small_spec();
        let vocab = build_vocab(&spec).unwrap();
        let chain = gen_markov(&spec).unwrap();
        let hash = spec.hash_hex();
        for i in 0..200 {
            let a = gen_sample(&spec, &vocab, &chain, &hash, i);
            let b = gen_sample(&spec, &vocab, &chain, &hash, i);
            assert_eq!(a, b);
            assert_eq!(a.tokens.len(), a.related_mask.len());
            // each slot's attribute appears exactly once and is masked true
            for (slot, &attr) in a.image_attrs.iter().enumerate() {
                assert_eq!(vocab.attr_slot(attr), Some(slot));
                let hits: Vec<usize> = a
                    .tokens
                    .iter()
                    .enumerate()
                    .filter_map(|(p, &t)| (t == attr).then_some(p))
                    .collect();
                assert_eq!(hits.len(), 1, "sample {i} slot {slot}");
                assert!(a.related_mask[hits[0]]);
            }
            // mask true exactly on attribute tokens
            for (&t, &m) in a.tokens.iter().zip(&a.related_mask) {
                assert_eq!(m, vocab.is_attr(t));
                assert!(vocab.is_attr(t) || vocab.is_filler(t));
            }
            let true_count = a.related_mask.iter().filter(|&&m| m).count();
            assert_eq!(true_count, spec.n_slots);
        }
    }

    #[test]
    fn corpus_bytes_are_reproducible() {
        let spec = small_spec();
        let mut a = Vec::new();
        let mut b = Vec::new();
        gen_corpus(&spec, 50, 0, &mut a).unwrap();
        gen_corpus(&spec, 50, 0, &mut b).unwrap();
        assert_eq!(a, b);
        let parsed = read_corpus(a.as_slice()).unwrap();
        assert_eq!(parsed.len(), 50);
    }

    #[test]
    fn single_line_corpus() {
        let spec = small_spec();
        let mut buf = Vec::new();
        gen_corpus(&spec, 1, 0, &mut buf).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 1);
    }

    #[test]
    fn offset_partition_is_disjoint_by_stream() {
        let spec = small_spec();
        let vocab = build_vocab(&spec).unwrap();
        let chain = gen_markov(&spec).unwrap();
        let hash = spec.hash_hex();
        // sample i is the same whether generated in the 0-offset or the
        // offset block, so (0..n) and (n..n+h) never overlap
        let direct = gen_sample(&spec, &vocab, &chain, &hash, 57);
        let mut buf = Vec::new();
        gen_corpus(&spec, 3, 56, &mut buf).unwrap();
        let block = read_corpus(buf.as_slice()).unwrap();
        assert_eq!(block[1], direct);
    }

    #[test]
    fn attribute_marginal_is_uniform_chi_squared() {
        let spec = CorpusSpec::default();
        let vocab = build_vocab(&spec).unwrap();
        let chain = gen_markov(&spec).unwrap();
        let hash = spec.hash_hex();
        let n = 20_000u64;
        let s = spec.attrs_per_slot;
        let mut counts = vec![vec![0u64; s]; spec.n_slots];
        for i in 0..n {
            let sample = gen_sample(&spec, &vocab, &chain, &hash, i);
            // mask/token alignment holds for every sample of the default corpus
            assert_eq!(sample.tokens.len(), sample.related_mask.len());
            for (&t, &m) in sample.tokens.iter().zip(&sample.related_mask) {
                assert_eq!(m, vocab.is_attr(t));
            }
            for (slot, &attr) in sample.image_attrs.iter().enumerate() {
                counts[slot][vocab.attr_value(attr).unwrap()] += 1;
            }
        }
        // chi-squared critical value at p = 0.001, df = s - 1 = 7
        let critical = 24.322;
        let expected = n as f64 / s as f64;
        for (slot, slot_counts) in counts.iter().enumerate() {
            let chi2: f64 = slot_counts
                .iter()
                .map(|&c| {
                    let d = c as f64 - expected;
                    d * d / expected
                })
                .sum();
            assert!(chi2 < critical, "slot {slot} chi2 {chi2}");
        }
    }

    #[test]
    fn filler_bigram_recovers_gamma() {
        let spec = CorpusSpec::default();
        let vocab = build_vocab(&spec).unwrap();
        let chain = gen_markov(&spec).unwrap();
        let hash = spec.hash_hex();
        let mut dominant_hits = 0u64;
        let mut pairs = 0u64;
        for i in 0..20_000u64 {
            let sample = gen_sample(&spec, &vocab, &chain, &hash, i);
            for w in sample.tokens.windows(2) {
                if let (Some(a), Some(b)) =
                    (vocab.filler_index(w[0]), vocab.filler_index(w[1]))
                {
                    pairs += 1;
                    if chain.dominant[a] == b {
                        dominant_hits += 1;
                    }
                }
            }
        }
        let frac = dominant_hits as f64 / pairs as f64;
        assert!(
            (frac - spec.markov_peak).abs() < 0.05,
            "dominant fraction {frac} vs gamma {}",
            spec.markov_peak
        );
    }

    #[test]
    fn longer_captions_carry_proportionally_less_related_mass() {
        // the mechanism behind the negative length-score correlation
        let spec = CorpusSpec::default();
        let vocab = build_vocab(&spec).unwrap();
        let chain = gen_markov(&spec).unwrap();
        let hash = spec.hash_hex();
        for i in 0..500u64 {
            let sample = gen_sample(&spec, &vocab, &chain, &hash, i);
            let related = sample.related_mask.iter().filter(|&&m| m).count();
            assert_eq!(related, spec.n_slots);
            assert_eq!(
                related as f64 / sample.tokens.len() as f64,
                spec.n_slots as f64 / sample.tokens.len() as f64
            );
        }
    }
}
