//! Diagnostics over scored corpora: how importance scores distribute across
//! caption lengths and positions, how model loss splits across a score
//! threshold, how well scores recover the ground-truth relatedness mask, and
//! the per-token information gain of conditioning on the image prefix.
//!
//! Analyses always use the raw (unnormalized) score `1 - p_ref` at the given
//! exponent; the k-scaled weights exist only inside the training objective.
//! Everything here is read-only and deterministic.

use crate::error::{Error, Result};
use crate::loss::{raw_importance, ReferenceProbs};
use crate::model::{forward_job, CheckpointBundle, SequenceJob};
use crate::scoring::ScoredSample;
use crate::trainer::append_caption;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Captions per packed forward buffer in the model-driven analyses.
const CAPTIONS_PER_JOB: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthScoreReport {
    /// (caption length, mean caption-level score, captions at this length),
    /// ascending by length; lengths with no captions are absent.
    pub per_length: Vec<(usize, f64, u64)>,
    /// Pearson correlation over caption-level (length, mean score) pairs.
    pub pearson_r: f64,
    pub n_captions: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionScoreReport {
    /// (1-based position, mean score, token count).
    pub per_position: Vec<(usize, f64, u64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCell {
    pub tau: f64,
    /// Mean model NLL over tokens with score >= tau; absent if none.
    pub related_nll: Option<f64>,
    /// Mean model NLL over tokens with score < tau; absent if none.
    pub unrelated_nll: Option<f64>,
    pub n_related: u64,
    pub n_unrelated: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSplitReport {
    pub cells: Vec<ThresholdCell>,
    pub n_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfoGainReport {
    /// Mean over tokens of ln p_model(t|prefix, ctx) - ln p_ref(t|ctx).
    pub overall: f64,
    pub related: Option<f64>,
    pub unrelated: Option<f64>,
    pub n_tokens: u64,
    pub n_related: u64,
    pub n_unrelated: u64,
}

fn scores(sample: &ScoredSample, alpha: f64) -> Result<Vec<f64>> {
    let p = ReferenceProbs::clamped(sample.ref_probs.iter().copied());
    raw_importance(&p, alpha)
}

/// Pearson correlation over caption-level (length, mean score) pairs, plus
/// the per-length profile.
pub fn length_score_correlation(
    corpus: &[ScoredSample],
    alpha: f64,
) -> Result<LengthScoreReport> {
    if corpus.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    let mut pairs = Vec::with_capacity(corpus.len());
    for s in corpus {
        let w = scores(s, alpha)?;
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        pairs.push((s.tokens.len() as f64, mean));
    }
    let r = pearson(&pairs)?;

    let max_len = corpus.iter().map(|s| s.tokens.len()).max().unwrap();
    let mut sums = vec![(0.0f64, 0u64); max_len + 1];
    for ((len, mean), s) in pairs.iter().zip(corpus) {
        debug_assert_eq!(*len as usize, s.tokens.len());
        let cell = &mut sums[s.tokens.len()];
        cell.0 += mean;
        cell.1 += 1;
    }
    let per_length = sums
        .into_iter()
        .enumerate()
        .filter(|(_, (_, n))| *n > 0)
        .map(|(len, (sum, n))| (len, sum / n as f64, n))
        .collect();
    Ok(LengthScoreReport {
        per_length,
        pearson_r: r,
        n_captions: corpus.len() as u64,
    })
}

/// Two-pass Pearson correlation; errors when either variance vanishes.
pub fn pearson(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.len() < 2 {
        return Err(Error::UndefinedCorrelation(
            "need at least two pairs".into(),
        ));
    }
    let n = pairs.len() as f64;
    let mean_x = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for &(x, y) in pairs {
        let dx = x - mean_x;
        let dy = y - mean_y;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "zero variance in one coordinate".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Mean importance score by absolute (1-based) token position.
pub fn position_score_profile(
    corpus: &[ScoredSample],
    alpha: f64,
    max_pos: usize,
) -> Result<PositionScoreReport> {
    if max_pos == 0 {
        return Err(Error::invalid("max_pos must be >= 1"));
    }
    let mut sums = vec![(0.0f64, 0u64); max_pos];
    for s in corpus {
        let w = scores(s, alpha)?;
        for (i, &wi) in w.iter().take(max_pos).enumerate() {
            sums[i].0 += wi;
            sums[i].1 += 1;
        }
    }
    Ok(PositionScoreReport {
        per_position: sums
            .into_iter()
            .enumerate()
            .filter(|(_, (_, n))| *n > 0)
            .map(|(i, (sum, n))| (i + 1, sum / n as f64, n))
            .collect(),
    })
}

/// Per-token model NLLs for every sample, packed for throughput. The
/// prefix comes from the checkpoint's configuration: text-only models see
/// captions without attributes.
fn model_nlls(ckpt: &CheckpointBundle, corpus: &[ScoredSample]) -> Result<Vec<Vec<f64>>> {
    let cfg = &ckpt.config;
    let per_chunk: Vec<Result<Vec<Vec<f64>>>> = corpus
        .par_chunks(CAPTIONS_PER_JOB)
        .map(|chunk| {
            let mut job = SequenceJob {
                tokens: Vec::new(),
                segments: Vec::new(),
                losses: Vec::new(),
            };
            for s in chunk {
                let prefix: &[u32] = if cfg.prefix_len == 0 {
                    &[]
                } else {
                    &s.image_attrs
                };
                append_caption(&mut job, prefix, &s.tokens, None);
            }
            let out = forward_job(cfg, &ckpt.params, &job, false)?;
            let mut cursor = 0;
            Ok(chunk
                .iter()
                .map(|s| {
                    let nlls = out.nlls[cursor..cursor + s.tokens.len()].to_vec();
                    cursor += s.tokens.len();
                    nlls
                })
                .collect())
        })
        .collect();
    let mut all = Vec::with_capacity(corpus.len());
    for chunk in per_chunk {
        all.extend(chunk?);
    }
    Ok(all)
}

/// Mean model NLL on tokens above vs below each score threshold. Scores are
/// the raw `1 - p_ref` (exponent 1).
pub fn threshold_loss_split(
    ckpt: &CheckpointBundle,
    corpus: &[ScoredSample],
    thresholds: &[f64],
) -> Result<ThresholdSplitReport> {
    if thresholds.is_empty() {
        return Err(Error::invalid("no thresholds given"));
    }
    for pair in thresholds.windows(2) {
        if pair[1] <= pair[0] {
            return Err(Error::invalid("thresholds must be strictly increasing"));
        }
    }
    if thresholds[0] <= 0.0 || *thresholds.last().unwrap() >= 1.0 {
        return Err(Error::invalid("thresholds must lie in (0, 1)"));
    }
    let nlls = model_nlls(ckpt, corpus)?;
    let mut per_token = Vec::new();
    for (s, sample_nlls) in corpus.iter().zip(&nlls) {
        let w = scores(s, 1.0)?;
        per_token.extend(w.into_iter().zip(sample_nlls.iter().copied()));
    }
    Ok(split_cells(&per_token, thresholds))
}

/// Split (score, nll) pairs at every threshold.
fn split_cells(per_token: &[(f64, f64)], thresholds: &[f64]) -> ThresholdSplitReport {
    let cells = thresholds
        .iter()
        .map(|&tau| {
            let mut rel = (0.0, 0u64);
            let mut unrel = (0.0, 0u64);
            for &(w, nll) in per_token {
                if w >= tau {
                    rel.0 += nll;
                    rel.1 += 1;
                } else {
                    unrel.0 += nll;
                    unrel.1 += 1;
                }
            }
            ThresholdCell {
                tau,
                related_nll: (rel.1 > 0).then(|| rel.0 / rel.1 as f64),
                unrelated_nll: (unrel.1 > 0).then(|| unrel.0 / unrel.1 as f64),
                n_related: rel.1,
                n_unrelated: unrel.1,
            }
        })
        .collect();
    ThresholdSplitReport {
        cells,
        n_tokens: per_token.len() as u64,
    }
}

/// Rank-based AUC of the importance score as a classifier of the
/// ground-truth relatedness mask (ties count one half).
pub fn relatedness_auc(corpus: &[ScoredSample], alpha: f64) -> Result<f64> {
    let mut scored: Vec<(f64, bool)> = Vec::new();
    for s in corpus {
        let w = scores(s, alpha)?;
        for (&wi, &related) in w.iter().zip(&s.related_mask) {
            scored.push((wi, related));
        }
    }
    let n_pos = scored.iter().filter(|(_, r)| *r).count() as f64;
    let n_neg = scored.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return Err(Error::invalid(
            "AUC needs both related and unrelated tokens",
        ));
    }
    // average rank of the positive class, with mid-ranks on ties
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0usize;
    while i < scored.len() {
        let mut j = i;
        while j + 1 < scored.len() && scored[j + 1].0 == scored[i].0 {
            j += 1;
        }
        let mid_rank = (i + j) as f64 / 2.0 + 1.0;
        for item in &scored[i..=j] {
            if item.1 {
                rank_sum_pos += mid_rank;
            }
        }
        i = j + 1;
    }
    Ok((rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}

/// Plug-in estimate of how much the image prefix shifts per-token
/// log-probabilities relative to the text-only reference.
pub fn info_gain(
    cond_ckpt: &CheckpointBundle,
    ref_ckpt: &CheckpointBundle,
    corpus: &[ScoredSample],
) -> Result<InfoGainReport> {
    if cond_ckpt.config.vocab_size != ref_ckpt.config.vocab_size {
        return Err(Error::IncompatibleTokenizer(format!(
            "conditional vocab {} vs reference vocab {}",
            cond_ckpt.config.vocab_size, ref_ckpt.config.vocab_size
        )));
    }
    if corpus.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    let cond = model_nlls(cond_ckpt, corpus)?;
    let mut text_ref = ref_ckpt.clone();
    text_ref.config.prefix_len = 0;
    let refn = model_nlls(&text_ref, corpus)?;

    let mut overall = (0.0, 0u64);
    let mut rel = (0.0, 0u64);
    let mut unrel = (0.0, 0u64);
    for ((s, c_nlls), r_nlls) in corpus.iter().zip(&cond).zip(&refn) {
        for ((&c, &r), &related) in c_nlls.iter().zip(r_nlls).zip(&s.related_mask) {
            // ln p_model - ln p_ref = nll_ref - nll_model
            let gain = r - c;
            overall.0 += gain;
            overall.1 += 1;
            if related {
                rel.0 += gain;
                rel.1 += 1;
            } else {
                unrel.0 += gain;
                unrel.1 += 1;
            }
        }
    }
    Ok(InfoGainReport {
        overall: overall.0 / overall.1 as f64,
        related: (rel.1 > 0).then(|| rel.0 / rel.1 as f64),
        unrelated: (unrel.1 > 0).then(|| unrel.0 / unrel.1 as f64),
        n_tokens: overall.1,
        n_related: rel.1,
        n_unrelated: unrel.1,
    })
}
