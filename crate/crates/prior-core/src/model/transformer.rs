//! Micro decoder-only transformer with hand-written analytic gradients.
//!
//! Pre-norm blocks (RMSNorm), learned positional embeddings, GELU MLP, no
//! biases, untied zero-initialized output head (so a fresh model predicts the
//! uniform distribution and its loss anchors at `ln V`). Everything is f64.
//!
//! Sequences are processed as a flat token buffer divided into segments:
//! attention is causal and block-diagonal per segment, and positions reset at
//! each segment start, so a caption's NLLs are bit-identical whether it is
//! forwarded alone or packed alongside others.

use super::checkpoint::CheckpointBundle;
use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::loss::TokenNlls;
use crate::rng::DetRng;
use std::ops::Range;

const RMS_EPS: f64 = 1e-6;
/// MLP hidden width as a multiple of d_model. Two is enough capacity for the
/// corpora this model targets and keeps the per-step cost (matmuls plus one
/// libm tanh per hidden unit) down.
const MLP_RATIO: usize = 2;
const INIT_STD: f64 = 0.02;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// One named parameter tensor inside the flat buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// All model parameters in one flat f64 buffer plus the shape manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    specs: Vec<ParamSpec>,
    data: Vec<f64>,
}

struct LayerRanges {
    attn_norm: Range<usize>,
    wq: Range<usize>,
    wk: Range<usize>,
    wv: Range<usize>,
    wo: Range<usize>,
    mlp_norm: Range<usize>,
    fc1: Range<usize>,
    fc2: Range<usize>,
}

struct Ranges {
    tok_embed: Range<usize>,
    pos_embed: Range<usize>,
    layers: Vec<LayerRanges>,
    final_norm: Range<usize>,
    lm_head: Range<usize>,
}

impl Parameters {
    fn layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
        let (v, d, c, h) = (cfg.vocab_size, cfg.d_model, cfg.context_len, MLP_RATIO * cfg.d_model);
        let mut specs = Vec::new();
        let mut offset = 0usize;
        let mut push = |name: String, shape: Vec<usize>| {
            let len: usize = shape.iter().product();
            specs.push(ParamSpec {
                name,
                shape,
                offset,
                len,
            });
            offset += len;
        };
        push("tok_embed".into(), vec![v, d]);
        push("pos_embed".into(), vec![c, d]);
        for l in 0..cfg.n_layers {
            push(format!("layers.{l}.attn_norm.gain"), vec![d]);
            push(format!("layers.{l}.attn.wq"), vec![d, d]);
            push(format!("layers.{l}.attn.wk"), vec![d, d]);
            push(format!("layers.{l}.attn.wv"), vec![d, d]);
            push(format!("layers.{l}.attn.wo"), vec![d, d]);
            push(format!("layers.{l}.mlp_norm.gain"), vec![d]);
            push(format!("layers.{l}.mlp.fc1"), vec![d, h]);
            push(format!("layers.{l}.mlp.fc2"), vec![h, d]);
        }
        push("final_norm.gain".into(), vec![d]);
        push("lm_head".into(), vec![d, v]);
        specs
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let specs = Self::layout(cfg);
        let total = specs.iter().map(|s| s.len).sum();
        Parameters {
            specs,
            data: vec![0.0; total],
        }
    }

    /// Scaled-Gaussian init for matrices, ones for norm gains, zeros for the
    /// output head. Draws happen in manifest order, so (config, seed) fully
    /// determines every parameter bit.
    pub fn init(cfg: &ModelConfig, rng: &mut DetRng) -> Self {
        let mut p = Self::zeros(cfg);
        for i in 0..p.specs.len() {
            let spec = p.specs[i].clone();
            let slice = &mut p.data[spec.offset..spec.offset + spec.len];
            if spec.name.ends_with("norm.gain") {
                slice.fill(1.0);
            } else if spec.name == "lm_head" {
                // stays zero: step-0 logits are uniform
            } else {
                for w in slice.iter_mut() {
                    *w = rng.gauss(INIT_STD);
                }
            }
        }
        p
    }

    pub fn from_parts(specs: Vec<ParamSpec>, data: Vec<f64>) -> Result<Self> {
        let total: usize = specs.iter().map(|s| s.len).sum();
        if total != data.len() {
            return Err(Error::invalid(format!(
                "manifest covers {total} values but data holds {}",
                data.len()
            )));
        }
        let mut offset = 0;
        for s in &specs {
            if s.offset != offset || s.len != s.shape.iter().product::<usize>() {
                return Err(Error::invalid(format!(
                    "manifest entry {} has inconsistent offset/shape",
                    s.name
                )));
            }
            offset += s.len;
        }
        Ok(Parameters { specs, data })
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn slice(&self, name: &str) -> Option<&[f64]> {
        self.specs
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.data[s.offset..s.offset + s.len])
    }

    /// Name of the parameter tensor owning flat index `i`.
    pub fn name_of_index(&self, i: usize) -> &str {
        let s = self
            .specs
            .iter()
            .find(|s| i >= s.offset && i < s.offset + s.len)
            .expect("index within data");
        &s.name
    }

    fn ranges(&self, cfg: &ModelConfig) -> Ranges {
        let mut it = self.specs.iter();
        let mut next = |expect: &str| {
            let s = it.next().expect("manifest entry");
            debug_assert!(s.name.ends_with(expect) || s.name == expect, "{}", s.name);
            s.offset..s.offset + s.len
        };
        let tok_embed = next("tok_embed");
        let pos_embed = next("pos_embed");
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            layers.push(LayerRanges {
                attn_norm: next("attn_norm.gain"),
                wq: next("attn.wq"),
                wk: next("attn.wk"),
                wv: next("attn.wv"),
                wo: next("attn.wo"),
                mlp_norm: next("mlp_norm.gain"),
                fc1: next("mlp.fc1"),
                fc2: next("mlp.fc2"),
            });
        }
        Ranges {
            tok_embed,
            pos_embed,
            layers,
            final_norm: next("final_norm.gain"),
            lm_head: next("lm_head"),
        }
    }
}

/// Fresh checkpoint from a validated config.
pub fn transformer_init(cfg: &ModelConfig) -> Result<CheckpointBundle> {
    cfg.validate()?;
    let mut rng = DetRng::from_seed(cfg.seed);
    let params = Parameters::init(cfg, &mut rng);
    Ok(CheckpointBundle::new(cfg.clone(), params, rng.state()))
}

/// A position whose next-token prediction contributes to the loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTarget {
    /// Index into the flat token buffer holding the *previous* token; the
    /// model's distribution at this position is scored against `target`.
    pub pos: usize,
    pub target: u32,
    /// Constant multiplier on this token's NLL (importance weight times any
    /// batch normalization). Never differentiated through.
    pub weight: f64,
}

/// A flat token buffer with block-diagonal segments and its loss positions.
#[derive(Debug, Clone)]
pub struct SequenceJob {
    pub tokens: Vec<u32>,
    /// Half-open (start, end) ranges; attention and positions are confined to
    /// each segment.
    pub segments: Vec<(usize, usize)>,
    pub losses: Vec<LossTarget>,
}

impl SequenceJob {
    /// Single-segment job for `prefix ++ [bos] ++ caption`, with one loss
    /// entry per caption token. `weights[i]` multiplies caption token i's
    /// NLL; pass `None` for uniform weight 1.
    pub fn for_caption(
        prefix: &[u32],
        caption: &[u32],
        bos: u32,
        weights: Option<&[f64]>,
    ) -> SequenceJob {
        let m = prefix.len();
        let mut tokens = Vec::with_capacity(m + 1 + caption.len());
        tokens.extend_from_slice(prefix);
        tokens.push(bos);
        tokens.extend_from_slice(caption);
        let losses = caption
            .iter()
            .enumerate()
            .map(|(i, &t)| LossTarget {
                pos: m + i,
                target: t,
                weight: weights.map_or(1.0, |w| w[i]),
            })
            .collect();
        let end = tokens.len();
        SequenceJob {
            tokens,
            segments: vec![(0, end)],
            losses,
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::invalid("empty token buffer"));
        }
        let mut prev_end = 0usize;
        for &(s, e) in &self.segments {
            if s != prev_end || e <= s {
                return Err(Error::invalid("segments must be ordered, covering, nonempty"));
            }
            if e - s > cfg.context_len {
                return Err(Error::invalid(format!(
                    "segment of length {} exceeds context_len {}",
                    e - s,
                    cfg.context_len
                )));
            }
            prev_end = e;
        }
        if prev_end != self.tokens.len() {
            return Err(Error::invalid("segments do not cover the token buffer"));
        }
        if let Some(&t) = self.tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::invalid(format!(
                "token id {t} outside vocabulary of size {}",
                cfg.vocab_size
            )));
        }
        for l in &self.losses {
            if l.pos >= self.tokens.len() {
                return Err(Error::invalid("loss position outside buffer"));
            }
            if l.target as usize >= cfg.vocab_size {
                return Err(Error::invalid("loss target outside vocabulary"));
            }
            if !l.weight.is_finite() || l.weight < 0.0 {
                return Err(Error::invalid("loss weight must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

/// Per-loss-position outputs of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardResult {
    /// NLL of each loss target, unweighted, in loss order.
    pub nlls: Vec<f64>,
    /// Full next-token distribution at each loss position, if requested.
    pub dists: Option<Vec<Vec<f64>>>,
}

struct LayerCache {
    x_in: Vec<f64>,
    inv1: Vec<f64>,
    normed1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// per segment, per head: row-major [t][j] attention probabilities
    attn: Vec<Vec<f64>>,
    ho: Vec<f64>,
    x_mid: Vec<f64>,
    inv2: Vec<f64>,
    normed2: Vec<f64>,
    h_pre: Vec<f64>,
    h_act: Vec<f64>,
    /// tanh of the inner GELU argument, cached so backward avoids a second
    /// round of libm calls (they dominate the MLP cost otherwise)
    h_tanh: Vec<f64>,
}

struct Cache {
    x_last: Vec<f64>,
    layers: Vec<LayerCache>,
    final_inv: Vec<f64>,
    final_normed: Vec<f64>,
    /// softmax rows at loss positions, [L × V]
    probs: Vec<f64>,
}

// ---- dense kernels -------------------------------------------------------
// Accumulation order inside each kernel is fixed, so results are identical
// run to run and machine to machine. The inner loops carry no reduction and
// autovectorize.


/// Row-tile size for the dense kernels; a tile's outputs stay cache-resident
/// while each weight row is streamed once per tile rather than once per row.
const MM_TILE: usize = 8;

/// y[M×N] += x[M×K] · w[K×N]
///
/// Tiled over rows and unrolled four k-steps deep: a y row is loaded and
/// stored once per four weight rows, and each weight row is reused across
/// the whole tile. Per output element the contributions still add in
/// ascending-k order, so the result is bit-identical to the naive loop.
fn matmul_acc(y: &mut [f64], x: &[f64], w: &[f64], m: usize, k_dim: usize, n: usize) {
    let k4 = k_dim / 4 * 4;
    let mut i0 = 0;
    while i0 < m {
        let tile_end = (i0 + MM_TILE).min(m);
        let mut kk = 0;
        while kk < k4 {
            let w0 = &w[kk * n..(kk + 1) * n];
            let w1 = &w[(kk + 1) * n..(kk + 2) * n];
            let w2 = &w[(kk + 2) * n..(kk + 3) * n];
            let w3 = &w[(kk + 3) * n..(kk + 4) * n];
            for i in i0..tile_end {
                let xrow = &x[i * k_dim..(i + 1) * k_dim];
                let (a0, a1, a2, a3) = (xrow[kk], xrow[kk + 1], xrow[kk + 2], xrow[kk + 3]);
                let yrow = &mut y[i * n..(i + 1) * n];
                for j in 0..n {
                    let mut t = yrow[j] + a0 * w0[j];
                    t += a1 * w1[j];
                    t += a2 * w2[j];
                    t += a3 * w3[j];
                    yrow[j] = t;
                }
            }
            kk += 4;
        }
        for kk in k4..k_dim {
            let wrow = &w[kk * n..(kk + 1) * n];
            for i in i0..tile_end {
                let a = x[i * k_dim + kk];
                let yrow = &mut y[i * n..(i + 1) * n];
                for (yj, &wj) in yrow.iter_mut().zip(wrow) {
                    *yj += a * wj;
                }
            }
        }
        i0 = tile_end;
    }
}

/// dw[K×N] += xᵀ · dy, with x[M×K], dy[M×N].
///
/// The k loop is outermost so each dw row is touched exactly once per call
/// while the small dy buffer stays cache-resident; with M ~ a few dozen
/// positions this is bandwidth-critical.
fn matmul_acc_wgrad(dw: &mut [f64], x: &[f64], dy: &[f64], m: usize, k_dim: usize, n: usize) {
    // tiles of 16 rows, unrolled 4 deep: dw rows stream once per tile, the
    // tile's dy rows stay in L1; accumulation stays in ascending-row order
    const TILE: usize = 16;
    let mut i0 = 0;
    while i0 < m {
        let tile_end = (i0 + TILE).min(m);
        let sub4 = i0 + (tile_end - i0) / 4 * 4;
        for kk in 0..k_dim {
            let dwrow = &mut dw[kk * n..(kk + 1) * n];
            let mut i = i0;
            while i < sub4 {
                let (a0, a1, a2, a3) = (
                    x[i * k_dim + kk],
                    x[(i + 1) * k_dim + kk],
                    x[(i + 2) * k_dim + kk],
                    x[(i + 3) * k_dim + kk],
                );
                let d0 = &dy[i * n..(i + 1) * n];
                let d1 = &dy[(i + 1) * n..(i + 2) * n];
                let d2 = &dy[(i + 2) * n..(i + 3) * n];
                let d3 = &dy[(i + 3) * n..(i + 4) * n];
                for j in 0..n {
                    let mut t = dwrow[j] + a0 * d0[j];
                    t += a1 * d1[j];
                    t += a2 * d2[j];
                    t += a3 * d3[j];
                    dwrow[j] = t;
                }
                i += 4;
            }
            while i < tile_end {
                let a = x[i * k_dim + kk];
                let dyrow = &dy[i * n..(i + 1) * n];
                for (dwj, &dyj) in dwrow.iter_mut().zip(dyrow) {
                    *dwj += a * dyj;
                }
                i += 1;
            }
        }
        i0 = tile_end;
    }
}

/// out[N×K]: transpose of w[K×N]. Backward input-gradients multiply by the
/// transposed weights, and a materialized transpose keeps that on the fast
/// accumulate kernel; `BackwardCtx` caches these once per optimizer step.
fn transpose(w: &[f64], k_dim: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; w.len()];
    for i in 0..k_dim {
        for j in 0..n {
            out[j * k_dim + i] = w[i * n + j];
        }
    }
    out
}

struct LayerCtx {
    wq_t: Vec<f64>,
    wk_t: Vec<f64>,
    wv_t: Vec<f64>,
    wo_t: Vec<f64>,
    fc1_t: Vec<f64>,
    fc2_t: Vec<f64>,
}

/// Transposed weights shared by every backward pass in one step.
pub struct BackwardCtx {
    layers: Vec<LayerCtx>,
    head_t: Vec<f64>,
}

impl BackwardCtx {
    pub fn new(cfg: &ModelConfig, params: &Parameters) -> Self {
        let d = cfg.d_model;
        let h = MLP_RATIO * d;
        let r = params.ranges(cfg);
        let data = params.data();
        let layers = r
            .layers
            .iter()
            .map(|lr| LayerCtx {
                wq_t: transpose(&data[lr.wq.clone()], d, d),
                wk_t: transpose(&data[lr.wk.clone()], d, d),
                wv_t: transpose(&data[lr.wv.clone()], d, d),
                wo_t: transpose(&data[lr.wo.clone()], d, d),
                fc1_t: transpose(&data[lr.fc1.clone()], d, h),
                fc2_t: transpose(&data[lr.fc2.clone()], h, d),
            })
            .collect();
        let head_t = transpose(&data[r.lm_head.clone()], d, cfg.vocab_size);
        BackwardCtx { layers, head_t }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn rmsnorm_rows(normed: &mut [f64], inv: &mut [f64], x: &[f64], gain: &[f64], n_rows: usize, d: usize) {
    for t in 0..n_rows {
        let xr = &x[t * d..(t + 1) * d];
        let ms = dot(xr, xr) / d as f64;
        let r = 1.0 / (ms + RMS_EPS).sqrt();
        inv[t] = r;
        let nr = &mut normed[t * d..(t + 1) * d];
        for ((o, &xi), &g) in nr.iter_mut().zip(xr).zip(gain) {
            *o = g * xi * r;
        }
    }
}

/// dx += rmsnorm backward; accumulates the gain gradient too.
fn rmsnorm_backward(
    dx: &mut [f64],
    dgain: &mut [f64],
    dy: &[f64],
    x: &[f64],
    gain: &[f64],
    inv: &[f64],
    n_rows: usize,
    d: usize,
) {
    for t in 0..n_rows {
        let xr = &x[t * d..(t + 1) * d];
        let dyr = &dy[t * d..(t + 1) * d];
        let r = inv[t];
        let mut gd_x = 0.0;
        for j in 0..d {
            gd_x += gain[j] * dyr[j] * xr[j];
        }
        let coeff = r * r * r * gd_x / d as f64;
        let dxr = &mut dx[t * d..(t + 1) * d];
        for j in 0..d {
            dxr[j] += gain[j] * dyr[j] * r - xr[j] * coeff;
            dgain[j] += dyr[j] * xr[j] * r;
        }
    }
}

/// GELU (tanh form); returns the activation and the inner tanh for reuse.
fn gelu(x: f64) -> (f64, f64) {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    (0.5 * x * (1.0 + t), t)
}

fn gelu_grad(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn forward_cached(
    cfg: &ModelConfig,
    params: &Parameters,
    job: &SequenceJob,
    want_dists: bool,
) -> Result<(ForwardResult, Cache)> {
    job.validate(cfg)?;
    let d = cfg.d_model;
    let n = job.tokens.len();
    let heads = cfg.n_heads;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let r = params.ranges(cfg);
    let data = params.data();

    // embeddings with per-segment position reset
    let tok_embed = &data[r.tok_embed.clone()];
    let pos_embed = &data[r.pos_embed.clone()];
    let mut x = vec![0.0f64; n * d];
    for &(s, e) in &job.segments {
        for t in s..e {
            let tok = job.tokens[t] as usize;
            let pos = t - s;
            let xr = &mut x[t * d..(t + 1) * d];
            let te = &tok_embed[tok * d..(tok + 1) * d];
            let pe = &pos_embed[pos * d..(pos + 1) * d];
            for j in 0..d {
                xr[j] = te[j] + pe[j];
            }
        }
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for lr in &r.layers {
        let x_in = x;
        let gain1 = &data[lr.attn_norm.clone()];
        let mut normed1 = vec![0.0; n * d];
        let mut inv1 = vec![0.0; n];
        rmsnorm_rows(&mut normed1, &mut inv1, &x_in, gain1, n, d);

        let mut q = vec![0.0; n * d];
        let mut k = vec![0.0; n * d];
        let mut v = vec![0.0; n * d];
        matmul_acc(&mut q, &normed1, &data[lr.wq.clone()], n, d, d);
        matmul_acc(&mut k, &normed1, &data[lr.wk.clone()], n, d, d);
        matmul_acc(&mut v, &normed1, &data[lr.wv.clone()], n, d, d);

        // causal attention, block-diagonal over segments
        let mut ho = vec![0.0; n * d];
        let mut attn = Vec::with_capacity(job.segments.len());
        for &(s, e) in &job.segments {
            let t_len = e - s;
            let mut seg_probs = vec![0.0f64; heads * t_len * t_len];
            for h in 0..heads {
                let off = h * hd;
                for t in 0..t_len {
                    let qrow = &q[(s + t) * d + off..(s + t) * d + off + hd];
                    let prow =
                        &mut seg_probs[h * t_len * t_len + t * t_len..h * t_len * t_len + (t + 1) * t_len];
                    let mut maxv = f64::NEG_INFINITY;
                    for j in 0..=t {
                        let krow = &k[(s + j) * d + off..(s + j) * d + off + hd];
                        let sc = dot(qrow, krow) * scale;
                        prow[j] = sc;
                        if sc > maxv {
                            maxv = sc;
                        }
                    }
                    let mut sum = 0.0;
                    for p in prow.iter_mut().take(t + 1) {
                        *p = (*p - maxv).exp();
                        sum += *p;
                    }
                    let inv_sum = 1.0 / sum;
                    for p in prow.iter_mut().take(t + 1) {
                        *p *= inv_sum;
                    }
                    let orow = &mut ho[(s + t) * d + off..(s + t) * d + off + hd];
                    for j in 0..=t {
                        let a = prow[j];
                        let vrow = &v[(s + j) * d + off..(s + j) * d + off + hd];
                        for (oi, &vi) in orow.iter_mut().zip(vrow) {
                            *oi += a * vi;
                        }
                    }
                }
            }
            attn.push(seg_probs);
        }

        let mut x_mid = x_in.clone();
        matmul_acc(&mut x_mid, &ho, &data[lr.wo.clone()], n, d, d);

        let gain2 = &data[lr.mlp_norm.clone()];
        let mut normed2 = vec![0.0; n * d];
        let mut inv2 = vec![0.0; n];
        rmsnorm_rows(&mut normed2, &mut inv2, &x_mid, gain2, n, d);

        let hdim = MLP_RATIO * d;
        let mut h_pre = vec![0.0; n * hdim];
        matmul_acc(&mut h_pre, &normed2, &data[lr.fc1.clone()], n, d, hdim);
        let mut h_act = vec![0.0; n * hdim];
        let mut h_tanh = vec![0.0; n * hdim];
        for ((a, t), &p) in h_act.iter_mut().zip(h_tanh.iter_mut()).zip(&h_pre) {
            (*a, *t) = gelu(p);
        }
        let mut x_out = x_mid.clone();
        matmul_acc(&mut x_out, &h_act, &data[lr.fc2.clone()], n, hdim, d);

        layers.push(LayerCache {
            x_in,
            inv1,
            normed1,
            q,
            k,
            v,
            attn,
            ho,
            x_mid,
            inv2,
            normed2,
            h_pre,
            h_act,
            h_tanh,
        });
        x = x_out;
    }

    let x_last = x;
    let gain_f = &data[r.final_norm.clone()];
    let mut final_normed = vec![0.0; n * d];
    let mut final_inv = vec![0.0; n];
    rmsnorm_rows(&mut final_normed, &mut final_inv, &x_last, gain_f, n, d);

    // logits, softmax and NLL at loss positions only
    let vsz = cfg.vocab_size;
    let head = &data[r.lm_head.clone()];
    let n_loss = job.losses.len();
    let mut probs = vec![0.0f64; n_loss * vsz];
    let mut nlls = Vec::with_capacity(n_loss);
    let mut dists = if want_dists {
        Some(Vec::with_capacity(n_loss))
    } else {
        None
    };
    let mut logits = vec![0.0f64; vsz];
    for (li, loss) in job.losses.iter().enumerate() {
        logits.fill(0.0);
        let xr = &final_normed[loss.pos * d..(loss.pos + 1) * d];
        for (kk, &a) in xr.iter().enumerate() {
            let wrow = &head[kk * vsz..(kk + 1) * vsz];
            for (lj, &wj) in logits.iter_mut().zip(wrow) {
                *lj += a * wj;
            }
        }
        let maxv = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let prow = &mut probs[li * vsz..(li + 1) * vsz];
        for (p, &l) in prow.iter_mut().zip(logits.iter()) {
            *p = (l - maxv).exp();
            sum += *p;
        }
        let inv_sum = 1.0 / sum;
        for p in prow.iter_mut() {
            *p *= inv_sum;
        }
        let lse = maxv + sum.ln();
        let nll = lse - logits[loss.target as usize];
        if !nll.is_finite() {
            return Err(Error::numeric(
                format!("forward at loss position {}", loss.pos),
                format!("non-finite NLL {nll}"),
            ));
        }
        nlls.push(nll);
        if let Some(ds) = dists.as_mut() {
            ds.push(prow.to_vec());
        }
    }

    Ok((
        ForwardResult { nlls, dists },
        Cache {
            x_last,
            layers,
            final_inv,
            final_normed,
            probs,
        },
    ))
}

/// Forward pass only; per-target NLLs and (optionally) full distributions.
pub fn forward_job(
    cfg: &ModelConfig,
    params: &Parameters,
    job: &SequenceJob,
    want_dists: bool,
) -> Result<ForwardResult> {
    forward_cached(cfg, params, job, want_dists).map(|(r, _)| r)
}

/// Forward + backward. Accumulates the gradient of
/// `sum_i weight_i * nll_i` into `grads` (same flat layout as the
/// parameters) and returns the unweighted per-target NLLs.
pub fn forward_backward(
    cfg: &ModelConfig,
    params: &Parameters,
    job: &SequenceJob,
    grads: &mut [f64],
) -> Result<Vec<f64>> {
    let ctx = BackwardCtx::new(cfg, params);
    forward_backward_with_ctx(cfg, params, &ctx, job, grads)
}

/// Backward with precomputed transposes; the trainer builds one `BackwardCtx`
/// per step and shares it across the batch.
pub fn forward_backward_with_ctx(
    cfg: &ModelConfig,
    params: &Parameters,
    ctx: &BackwardCtx,
    job: &SequenceJob,
    grads: &mut [f64],
) -> Result<Vec<f64>> {
    debug_assert_eq!(grads.len(), params.len());
    let (result, cache) = forward_cached(cfg, params, job, false)?;
    let d = cfg.d_model;
    let n = job.tokens.len();
    let vsz = cfg.vocab_size;
    let heads = cfg.n_heads;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let r = params.ranges(cfg);
    let data = params.data();

    // head backward from weighted cross-entropy
    let mut d_final_normed = vec![0.0f64; n * d];
    {
        let mut d_logits = vec![0.0f64; vsz];
        for (li, loss) in job.losses.iter().enumerate() {
            if loss.weight == 0.0 {
                continue;
            }
            let prow = &cache.probs[li * vsz..(li + 1) * vsz];
            for (dl, &p) in d_logits.iter_mut().zip(prow) {
                *dl = loss.weight * p;
            }
            d_logits[loss.target as usize] -= loss.weight;

            let xr = &cache.final_normed[loss.pos * d..(loss.pos + 1) * d];
            let dh = &mut grads[r.lm_head.clone()];
            for (kk, &a) in xr.iter().enumerate() {
                let dwrow = &mut dh[kk * vsz..(kk + 1) * vsz];
                for (dwj, &dlj) in dwrow.iter_mut().zip(&d_logits) {
                    *dwj += a * dlj;
                }
            }
            let dxr = &mut d_final_normed[loss.pos * d..(loss.pos + 1) * d];
            matmul_acc(dxr, &d_logits, &ctx.head_t, 1, vsz, d);
        }
    }

    let mut dx = vec![0.0f64; n * d];
    {
        let (dgain, _) = grads[r.final_norm.start..].split_at_mut(d);
        rmsnorm_backward(
            &mut dx,
            dgain,
            &d_final_normed,
            &cache.x_last,
            &data[r.final_norm.clone()],
            &cache.final_inv,
            n,
            d,
        );
    }

    for (l, lr) in r.layers.iter().enumerate().rev() {
        let lc = &cache.layers[l];
        let lt = &ctx.layers[l];
        let hdim = MLP_RATIO * d;

        // MLP branch: x_out = x_mid + h_act · fc2
        let mut d_h_act = vec![0.0; n * hdim];
        matmul_acc_wgrad(&mut grads[lr.fc2.clone()], &lc.h_act, &dx, n, hdim, d);
        matmul_acc(&mut d_h_act, &dx, &lt.fc2_t, n, d, hdim);
        let mut d_h_pre = d_h_act;
        for ((dh, &hp), &t) in d_h_pre.iter_mut().zip(&lc.h_pre).zip(&lc.h_tanh) {
            *dh *= gelu_grad(hp, t);
        }
        let mut d_normed2 = vec![0.0; n * d];
        matmul_acc_wgrad(&mut grads[lr.fc1.clone()], &lc.normed2, &d_h_pre, n, d, hdim);
        matmul_acc(&mut d_normed2, &d_h_pre, &lt.fc1_t, n, hdim, d);
        // dx currently holds d(x_out); the residual adds it to d(x_mid)
        let mut d_x_mid = dx;
        {
            let dgain = &mut grads[lr.mlp_norm.clone()];
            rmsnorm_backward(
                &mut d_x_mid,
                dgain,
                &d_normed2,
                &lc.x_mid,
                &data[lr.mlp_norm.clone()],
                &lc.inv2,
                n,
                d,
            );
        }

        // attention branch: x_mid = x_in + ho · wo
        let mut d_ho = vec![0.0; n * d];
        matmul_acc_wgrad(&mut grads[lr.wo.clone()], &lc.ho, &d_x_mid, n, d, d);
        matmul_acc(&mut d_ho, &d_x_mid, &lt.wo_t, n, d, d);

        let mut d_q = vec![0.0; n * d];
        let mut d_k = vec![0.0; n * d];
        let mut d_v = vec![0.0; n * d];
        for (si, &(s, e)) in job.segments.iter().enumerate() {
            let t_len = e - s;
            let seg_probs = &lc.attn[si];
            let mut d_aw = vec![0.0f64; t_len];
            for h in 0..heads {
                let off = h * hd;
                for t in 0..t_len {
                    let prow = &seg_probs[h * t_len * t_len + t * t_len..h * t_len * t_len + (t + 1) * t_len];
                    let dhor = &d_ho[(s + t) * d + off..(s + t) * d + off + hd];
                    // grads into attention probabilities and values
                    let mut dot_sum = 0.0;
                    for j in 0..=t {
                        let vrow = &v_slice(&lc.v, s + j, d, off, hd);
                        let g = dot(dhor, vrow);
                        d_aw[j] = g;
                        dot_sum += prow[j] * g;
                    }
                    for j in 0..=t {
                        let a = prow[j];
                        if a == 0.0 {
                            continue;
                        }
                        let dvr = &mut d_v[(s + j) * d + off..(s + j) * d + off + hd];
                        for (dvi, &dhi) in dvr.iter_mut().zip(dhor) {
                            *dvi += a * dhi;
                        }
                        let ds = a * (d_aw[j] - dot_sum) * scale;
                        let krow = v_slice(&lc.k, s + j, d, off, hd);
                        let dqr = &mut d_q[(s + t) * d + off..(s + t) * d + off + hd];
                        for (dqi, &ki) in dqr.iter_mut().zip(krow) {
                            *dqi += ds * ki;
                        }
                        let qrow = v_slice(&lc.q, s + t, d, off, hd);
                        let dkr = &mut d_k[(s + j) * d + off..(s + j) * d + off + hd];
                        for (dki, &qi) in dkr.iter_mut().zip(qrow) {
                            *dki += ds * qi;
                        }
                    }
                }
            }
        }

        let mut d_normed1 = vec![0.0; n * d];
        matmul_acc_wgrad(&mut grads[lr.wq.clone()], &lc.normed1, &d_q, n, d, d);
        matmul_acc(&mut d_normed1, &d_q, &lt.wq_t, n, d, d);
        matmul_acc_wgrad(&mut grads[lr.wk.clone()], &lc.normed1, &d_k, n, d, d);
        matmul_acc(&mut d_normed1, &d_k, &lt.wk_t, n, d, d);
        matmul_acc_wgrad(&mut grads[lr.wv.clone()], &lc.normed1, &d_v, n, d, d);
        matmul_acc(&mut d_normed1, &d_v, &lt.wv_t, n, d, d);

        let mut d_x_in = d_x_mid;
        {
            let dgain = &mut grads[lr.attn_norm.clone()];
            rmsnorm_backward(
                &mut d_x_in,
                dgain,
                &d_normed1,
                &lc.x_in,
                &data[lr.attn_norm.clone()],
                &lc.inv1,
                n,
                d,
            );
        }
        dx = d_x_in;
    }

    // embedding scatter
    for &(s, e) in &job.segments {
        for t in s..e {
            let tok = job.tokens[t] as usize;
            let pos = t - s;
            let dxr = &dx[t * d..(t + 1) * d];
            let te = &mut grads[r.tok_embed.start + tok * d..r.tok_embed.start + (tok + 1) * d];
            for (g, &v) in te.iter_mut().zip(dxr) {
                *g += v;
            }
            let pe = &mut grads[r.pos_embed.start + pos * d..r.pos_embed.start + (pos + 1) * d];
            for (g, &v) in pe.iter_mut().zip(dxr) {
                *g += v;
            }
        }
    }

    Ok(result.nlls)
}

fn v_slice(buf: &[f64], row: usize, d: usize, off: usize, hd: usize) -> &[f64] {
    &buf[row * d + off..row * d + off + hd]
}

/// Per-token NLLs (and full distributions) for one prefixed caption.
///
/// `loss_mask[i]` selects caption token `i`; unmasked tokens produce no
/// output. The prefix and BOS never receive loss.
pub fn forward_nll(
    ckpt: &CheckpointBundle,
    prefix: &[u32],
    caption: &[u32],
    bos: u32,
    loss_mask: &[bool],
) -> Result<(TokenNlls, Vec<Vec<f64>>)> {
    if loss_mask.len() != caption.len() {
        return Err(Error::invalid(format!(
            "loss mask length {} != caption length {}",
            loss_mask.len(),
            caption.len()
        )));
    }
    let mut job = SequenceJob::for_caption(prefix, caption, bos, None);
    job.losses = job
        .losses
        .into_iter()
        .zip(loss_mask)
        .filter_map(|(l, &keep)| keep.then_some(l))
        .collect();
    let result = forward_job(&ckpt.config, &ckpt.params, &job, true)?;
    Ok((TokenNlls::new(result.nlls)?, result.dists.unwrap()))
}

/// Deterministic argmax decoding; ties break toward the lowest token id.
/// Returns only the generated tokens.
pub fn greedy_decode(ckpt: &CheckpointBundle, prefix: &[u32], max_len: usize) -> Result<Vec<u32>> {
    let cfg = &ckpt.config;
    if prefix.is_empty() {
        return Err(Error::invalid("greedy_decode needs a nonempty prefix"));
    }
    if prefix.len() + max_len > cfg.context_len {
        return Err(Error::invalid(format!(
            "prefix {} + max_len {max_len} exceeds context_len {}",
            prefix.len(),
            cfg.context_len
        )));
    }
    let mut seq = prefix.to_vec();
    let mut out = Vec::with_capacity(max_len);
    for _ in 0..max_len {
        let end = seq.len();
        let job = SequenceJob {
            tokens: seq.clone(),
            segments: vec![(0, end)],
            losses: vec![LossTarget {
                pos: end - 1,
                target: 0,
                weight: 0.0,
            }],
        };
        let result = forward_job(cfg, &ckpt.params, &job, true)?;
        let dist = &result.dists.as_ref().unwrap()[0];
        let mut best = 0usize;
        for (i, &p) in dist.iter().enumerate() {
            if p > dist[best] {
                best = i;
            }
        }
        seq.push(best as u32);
        out.push(best as u32);
    }
    Ok(out)
}
