//! Text-only reference training and the offline scoring pass.
//!
//! The reference model sees captions without their image prefix. Training
//! packs several BOS-prefixed captions into one context window (first-fit, in
//! batch order) with block-diagonal attention, which the model treats exactly
//! like separate sequences. Scoring runs per caption, unpacked, and stores
//! each token's clamped reference probability next to the corpus record, so
//! one scored file serves every later exponent sweep.

use crate::error::{Error, Result};
use crate::loss::{clamp_prob, EPSILON};
use crate::model::{
    forward_job, transformer_init, CheckpointBundle, ModelConfig, NGramModel, SequenceJob,
};
use crate::synth::{SyntheticSample, VocabLayout, BOS_ID};
use crate::trainer::{
    adam_update, chunked_gradient, evaluate, AdamState, BatchSampler, RunRecord, TrainConfig,
    TrainingRunLog,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

/// A corpus record extended with per-token reference probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub image_attrs: Vec<u32>,
    pub tokens: Vec<u32>,
    pub related_mask: Vec<bool>,
    pub spec_hash: String,
    /// Clamped into [1e-6, 1-1e-6], rounded to 9 significant digits.
    pub ref_probs: Vec<f64>,
    pub ref_model_hash: String,
}

/// Captions packed into one flat buffer, each its own attention segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBatch {
    pub tokens: Vec<u32>,
    pub segments: Vec<(usize, usize)>,
    /// Which input sequence each segment came from.
    pub source_indices: Vec<usize>,
}

/// First-fit packing in input order: each sequence goes into the first
/// buffer with room, preserving order within each buffer.
pub fn pack_sequences(sequences: &[Vec<u32>], context_len: usize) -> Result<Vec<PackedBatch>> {
    let mut batches: Vec<PackedBatch> = Vec::new();
    for (idx, seq) in sequences.iter().enumerate() {
        if seq.is_empty() {
            return Err(Error::invalid(format!("sequence {idx} is empty")));
        }
        if seq.len() > context_len {
            return Err(Error::invalid(format!(
                "sequence {idx} of length {} exceeds context_len {context_len}",
                seq.len()
            )));
        }
        let slot = batches
            .iter_mut()
            .find(|b| b.tokens.len() + seq.len() <= context_len);
        let batch = match slot {
            Some(b) => b,
            None => {
                batches.push(PackedBatch {
                    tokens: Vec::new(),
                    segments: Vec::new(),
                    source_indices: Vec::new(),
                });
                batches.last_mut().unwrap()
            }
        };
        let start = batch.tokens.len();
        batch.tokens.extend_from_slice(seq);
        batch.segments.push((start, start + seq.len()));
        batch.source_indices.push(idx);
    }
    Ok(batches)
}

/// Anything that can assign text-only probabilities to caption tokens.
pub trait ReferenceScorer: Sync {
    fn vocab_size(&self) -> usize;
    fn model_hash(&self) -> String;
    /// Raw (unclamped) probability of each token given its predecessors.
    fn caption_probs(&self, caption: &[u32]) -> Result<Vec<f64>>;
}

impl ReferenceScorer for NGramModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn model_hash(&self) -> String {
        self.hash_hex()
    }

    fn caption_probs(&self, caption: &[u32]) -> Result<Vec<f64>> {
        NGramModel::caption_probs(self, caption)
    }
}

impl ReferenceScorer for CheckpointBundle {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn model_hash(&self) -> String {
        self.hash_hex()
    }

    /// Text-only forward: BOS plus the caption, no image prefix regardless
    /// of how the checkpoint was configured.
    fn caption_probs(&self, caption: &[u32]) -> Result<Vec<f64>> {
        let job = SequenceJob::for_caption(&[], caption, BOS_ID, None);
        let nlls = forward_job(&self.config, &self.params, &job, false)?.nlls;
        Ok(nlls.iter().map(|&l| (-l).exp()).collect())
    }
}

/// Round to 9 significant decimal digits; what is stored is what every later
/// stage computes with.
fn round_sig9(x: f64) -> f64 {
    format!("{x:.8e}").parse().expect("formatted float parses")
}

/// Attach clamped reference probabilities to every sample. Fails before
/// producing anything if any token falls outside the scorer's vocabulary.
pub fn score_corpus(
    scorer: &dyn ReferenceScorer,
    corpus: &[SyntheticSample],
) -> Result<Vec<ScoredSample>> {
    if corpus.is_empty() {
        return Err(Error::invalid("cannot score an empty corpus"));
    }
    let vocab_size = scorer.vocab_size();
    for (i, s) in corpus.iter().enumerate() {
        if let Some(&t) = s.tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::IncompatibleTokenizer(format!(
                "sample {i} holds token {t} but the reference vocabulary has {vocab_size} ids"
            )));
        }
    }
    let hash = scorer.model_hash();
    corpus
        .par_iter()
        .map(|s| {
            let probs = scorer.caption_probs(&s.tokens)?;
            let ref_probs = probs
                .into_iter()
                .map(|p| round_sig9(clamp_prob(p)))
                .collect();
            Ok(ScoredSample {
                image_attrs: s.image_attrs.clone(),
                tokens: s.tokens.clone(),
                related_mask: s.related_mask.clone(),
                spec_hash: s.spec_hash.clone(),
                ref_probs,
                ref_model_hash: hash.clone(),
            })
        })
        .collect()
}

/// Test helper: a scored corpus under a uniform reference (every probability
/// `1/V`), the scoring outcome of a freshly initialized model.
pub fn score_with_uniform(corpus: &[SyntheticSample], vocab_size: usize) -> Vec<ScoredSample> {
    let p = round_sig9(clamp_prob(1.0 / vocab_size as f64));
    corpus
        .iter()
        .map(|s| ScoredSample {
            image_attrs: s.image_attrs.clone(),
            tokens: s.tokens.clone(),
            related_mask: s.related_mask.clone(),
            spec_hash: s.spec_hash.clone(),
            ref_probs: vec![p; s.tokens.len()],
            ref_model_hash: "uniform".into(),
        })
        .collect()
}

pub fn write_scored(samples: &[ScoredSample], out: &mut dyn Write) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut *out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_scored(reader: impl BufRead) -> Result<Vec<ScoredSample>> {
    let mut samples: Vec<ScoredSample> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: ScoredSample = serde_json::from_str(&line)
            .map_err(|e| Error::invalid(format!("scored line {}: {e}", i + 1)))?;
        if s.ref_probs.len() != s.tokens.len() {
            return Err(Error::invalid(format!(
                "scored line {}: {} probabilities for {} tokens",
                i + 1,
                s.ref_probs.len(),
                s.tokens.len()
            )));
        }
        if s
            .ref_probs
            .iter()
            .any(|&p| !(EPSILON..=1.0 - EPSILON).contains(&p))
        {
            return Err(Error::invalid(format!(
                "scored line {}: probability outside clamp bounds",
                i + 1
            )));
        }
        if let Some(first) = samples.first() {
            if first.ref_model_hash != s.ref_model_hash {
                return Err(Error::StaleArtifact(format!(
                    "scored line {}: reference model hash differs from line 1",
                    i + 1
                )));
            }
        }
        samples.push(s);
    }
    if samples.is_empty() {
        return Err(Error::invalid("scored file is empty"));
    }
    Ok(samples)
}

/// Train the text-only reference model on captions alone (packed), under the
/// plain NTP objective. The image prefix is never shown to it.
pub fn train_reference(
    corpus: &[SyntheticSample],
    heldout: &[SyntheticSample],
    vocab: &VocabLayout,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<(CheckpointBundle, TrainingRunLog)> {
    train_cfg.validate()?;
    model_cfg.validate()?;
    if model_cfg.prefix_len != 0 {
        return Err(Error::invalid(
            "the reference model is text-only: prefix_len must be 0",
        ));
    }
    if corpus.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    if train_cfg.batch_size > corpus.len() {
        return Err(Error::invalid(format!(
            "batch_size {} exceeds corpus size {}",
            train_cfg.batch_size,
            corpus.len()
        )));
    }

    let mut ckpt = transformer_init(model_cfg)?;
    let mut sampler = BatchSampler::new(train_cfg.seed, corpus.len());
    let mut adam = AdamState::new(ckpt.params.len());
    let mut grads = vec![0.0; ckpt.params.len()];
    let mut records = Vec::new();

    let mut tokens_seen = 0u64;
    let mut window_weighted = 0.0f64;
    let mut window_tokens = 0u64;

    for step in 1..=train_cfg.steps {
        let batch = sampler.next_batch(train_cfg.batch_size);
        let sequences: Vec<Vec<u32>> = batch
            .iter()
            .map(|&i| {
                let mut seq = Vec::with_capacity(corpus[i].tokens.len() + 1);
                seq.push(BOS_ID);
                seq.extend_from_slice(&corpus[i].tokens);
                seq
            })
            .collect();
        let packed = pack_sequences(&sequences, model_cfg.context_len)?;
        let jobs: Vec<SequenceJob> = packed
            .into_iter()
            .map(|batch| {
                let losses = batch
                    .segments
                    .iter()
                    .flat_map(|&(s, e)| {
                        // position s holds BOS; targets are the caption tokens
                        (s..e - 1).map(move |pos| crate::model::LossTarget {
                            pos,
                            target: 0, // filled below
                            weight: 1.0,
                        })
                    })
                    .collect::<Vec<_>>();
                let mut job = SequenceJob {
                    tokens: batch.tokens,
                    segments: batch.segments,
                    losses,
                };
                for l in job.losses.iter_mut() {
                    l.target = job.tokens[l.pos + 1];
                }
                job
            })
            .collect();

        grads.fill(0.0);
        let (weighted, _plain, count) =
            chunked_gradient(model_cfg, &ckpt.params, &jobs, &mut grads)?;
        if !weighted.is_finite() {
            return Err(Error::numeric(
                format!("reference training step {step}"),
                format!("non-finite batch loss {weighted}"),
            ));
        }
        let inv_b = 1.0 / train_cfg.batch_size as f64;
        for g in grads.iter_mut() {
            *g *= inv_b;
        }
        adam_update(
            ckpt.params.data_mut(),
            &grads,
            &mut adam,
            train_cfg.learning_rate,
            train_cfg.beta1,
            train_cfg.beta2,
            train_cfg.adam_eps,
        );

        tokens_seen += count;
        window_weighted += weighted;
        window_tokens += count;

        if step % train_cfg.eval_every == 0 {
            let eval = evaluate(&ckpt, heldout, vocab)?;
            records.push(RunRecord {
                step,
                tokens_seen,
                train_loss: window_weighted / window_tokens as f64,
                overall_nll: eval.overall_nll,
                related_nll: eval.related_nll,
                unrelated_nll: eval.unrelated_nll,
                attr_acc: eval.attr_acc,
            });
            window_weighted = 0.0;
            window_tokens = 0;
        }
    }

    ckpt.rng_state = sampler.rng_state();
    let log = TrainingRunLog {
        objective: train_cfg.objective,
        config_hash: String::new(),
        records,
    };
    Ok((ckpt, log))
}
