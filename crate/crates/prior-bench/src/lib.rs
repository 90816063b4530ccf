//! Shared fixtures for the benchmark targets.

use prior_core::model::{transformer_init, CheckpointBundle, ModelConfig, SequenceJob};
use prior_core::rng::DetRng;

/// Default-sized checkpoint with parameters nudged off the zero-head init so
/// softmax rows are non-uniform.
pub fn default_ckpt(seed: u64) -> CheckpointBundle {
    let cfg = ModelConfig::micro(58, 3, seed);
    let mut ckpt = transformer_init(&cfg).unwrap();
    let mut rng = DetRng::from_seed(seed ^ 0xBEEF);
    for w in ckpt.params.data_mut().iter_mut() {
        *w += rng.gauss(0.02);
    }
    ckpt
}

/// A packed job of `n_captions` captions with `caption_len` tokens each,
/// in the default vocabulary layout.
pub fn packed_job(n_captions: usize, caption_len: usize) -> SequenceJob {
    let mut rng = DetRng::from_seed(7);
    let mut job = SequenceJob {
        tokens: Vec::new(),
        segments: Vec::new(),
        losses: Vec::new(),
    };
    for _ in 0..n_captions {
        let start = job.tokens.len();
        for slot in 0..3u32 {
            job.tokens.push(2 + slot * 8 + rng.below(8) as u32);
        }
        job.tokens.push(0);
        let bos = job.tokens.len() - 1;
        for i in 0..caption_len {
            let t = 26 + rng.below(32) as u32;
            job.tokens.push(t);
            job.losses.push(prior_core::model::LossTarget {
                pos: bos + i,
                target: t,
                weight: 1.0,
            });
        }
        job.segments.push((start, job.tokens.len()));
    }
    job
}
