//! The masked-token predictor: a small pre-norm transformer with full
//! bidirectional attention and a manually derived backward pass.
//!
//! The model sees one flat token sequence (context, target block, padding)
//! and emits logits over the unified vocabulary at every position. `<pad>`
//! positions are masked out as attention keys, which makes trailing padding
//! mathematically inert: forwarding only the non-pad prefix of a sample
//! yields the same logits as forwarding the padded sequence.
//!
//! Gradients are exact analytic derivatives, checked against central finite
//! differences in f64 (see [`grad_check`]).

use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffusion::LossWeights;
use crate::error::{Error, Result};
use crate::nn::{
    add_bias, axpy, col_sums_acc, dot, gelu_backward, gelu_forward, layernorm_backward,
    layernorm_forward, matmul, matmul_acc, matmul_at_acc, matmul_bt, softmax_in_place, Scalar,
};
use crate::rng::rng_from_seed;
use crate::vocab::{Modal, Special, TokenId, UnifiedVocab};

/// Architecture and initialization parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    /// Must equal the unified vocabulary size.
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Initialization seed.
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0
            || self.heads == 0
            || self.model_dim == 0
            || self.ff_dim == 0
            || self.vocab_size == 0
            || self.max_seq_len == 0
        {
            return Err(Error::Config("model dimensions must all be nonzero".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

/// Weights of one transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_g: Vec<T>,
    pub ln1_b: Vec<T>,
    pub wq: Vec<T>,
    pub bq: Vec<T>,
    pub wk: Vec<T>,
    pub bk: Vec<T>,
    pub wv: Vec<T>,
    pub bv: Vec<T>,
    pub wo: Vec<T>,
    pub bo: Vec<T>,
    pub ln2_g: Vec<T>,
    pub ln2_b: Vec<T>,
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: Vec<T>,
}

/// All model weights. Also reused as the gradient container, since gradient
/// structure mirrors the parameters exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub cfg: ModelConfig,
    /// (vocab_size x model_dim)
    pub tok_emb: Vec<T>,
    /// (max_seq_len x model_dim), learned absolute positions
    pub pos_emb: Vec<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_g: Vec<T>,
    pub final_b: Vec<T>,
    /// (model_dim x vocab_size), no bias
    pub out_w: Vec<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// All-zero parameters with shapes derived from the config alone.
    pub fn zeros(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (d, f, v, s) = (cfg.model_dim, cfg.ff_dim, cfg.vocab_size, cfg.max_seq_len);
        let layer = || LayerParams {
            ln1_g: vec![T::zero(); d],
            ln1_b: vec![T::zero(); d],
            wq: vec![T::zero(); d * d],
            bq: vec![T::zero(); d],
            wk: vec![T::zero(); d * d],
            bk: vec![T::zero(); d],
            wv: vec![T::zero(); d * d],
            bv: vec![T::zero(); d],
            wo: vec![T::zero(); d * d],
            bo: vec![T::zero(); d],
            ln2_g: vec![T::zero(); d],
            ln2_b: vec![T::zero(); d],
            w1: vec![T::zero(); d * f],
            b1: vec![T::zero(); f],
            w2: vec![T::zero(); f * d],
            b2: vec![T::zero(); d],
        };
        Ok(ModelParams {
            cfg,
            tok_emb: vec![T::zero(); v * d],
            pos_emb: vec![T::zero(); s * d],
            layers: (0..cfg.layers).map(|_| layer()).collect(),
            final_g: vec![T::zero(); d],
            final_b: vec![T::zero(); d],
            out_w: vec![T::zero(); d * v],
        })
    }

    /// Named views of every tensor, in canonical order.
    pub fn tensors(&self) -> Vec<(String, &[T])> {
        let mut out: Vec<(String, &[T])> = vec![
            ("tok_emb".into(), self.tok_emb.as_slice()),
            ("pos_emb".into(), self.pos_emb.as_slice()),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in [
                ("ln1_g", &layer.ln1_g),
                ("ln1_b", &layer.ln1_b),
                ("wq", &layer.wq),
                ("bq", &layer.bq),
                ("wk", &layer.wk),
                ("bk", &layer.bk),
                ("wv", &layer.wv),
                ("bv", &layer.bv),
                ("wo", &layer.wo),
                ("bo", &layer.bo),
                ("ln2_g", &layer.ln2_g),
                ("ln2_b", &layer.ln2_b),
                ("w1", &layer.w1),
                ("b1", &layer.b1),
                ("w2", &layer.w2),
                ("b2", &layer.b2),
            ] {
                out.push((format!("layer{l}.{name}"), t.as_slice()));
            }
        }
        out.push(("final_g".into(), self.final_g.as_slice()));
        out.push(("final_b".into(), self.final_b.as_slice()));
        out.push(("out_w".into(), self.out_w.as_slice()));
        out
    }

    /// Mutable views of every tensor, in the same canonical order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Vec<T>)> {
        let mut out: Vec<(String, &mut Vec<T>)> = vec![
            ("tok_emb".into(), &mut self.tok_emb),
            ("pos_emb".into(), &mut self.pos_emb),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in [
                ("ln1_g", &mut layer.ln1_g),
                ("ln1_b", &mut layer.ln1_b),
                ("wq", &mut layer.wq),
                ("bq", &mut layer.bq),
                ("wk", &mut layer.wk),
                ("bk", &mut layer.bk),
                ("wv", &mut layer.wv),
                ("bv", &mut layer.bv),
                ("wo", &mut layer.wo),
                ("bo", &mut layer.bo),
                ("ln2_g", &mut layer.ln2_g),
                ("ln2_b", &mut layer.ln2_b),
                ("w1", &mut layer.w1),
                ("b1", &mut layer.b1),
                ("w2", &mut layer.w2),
                ("b2", &mut layer.b2),
            ] {
                out.push((format!("layer{l}.{name}"), t));
            }
        }
        out.push(("final_g".into(), &mut self.final_g));
        out.push(("final_b".into(), &mut self.final_b));
        out.push(("out_w".into(), &mut self.out_w));
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

/// Initializes parameters deterministically from `cfg.seed`.
///
/// Weight matrices and embeddings draw from Normal(0, 0.02); layernorm gains
/// are 1, biases 0; the output projection is scaled down by 1/sqrt(2*layers).
pub fn init_params<T: Scalar>(cfg: ModelConfig) -> Result<ModelParams<T>> {
    let mut p = ModelParams::<T>::zeros(cfg)?;
    let mut rng = rng_from_seed(cfg.seed);
    let base = Normal::new(0.0f64, 0.02).expect("std is positive");
    let out_std = 0.02 / (2.0 * cfg.layers as f64).sqrt();
    let out = Normal::new(0.0f64, out_std).expect("std is positive");

    let fill = |t: &mut Vec<T>, dist: &Normal<f64>, rng: &mut dyn rand::RngCore| {
        for v in t.iter_mut() {
            *v = T::from_f64(dist.sample(rng));
        }
    };
    fill(&mut p.tok_emb, &base, &mut rng);
    fill(&mut p.pos_emb, &base, &mut rng);
    for layer in &mut p.layers {
        layer.ln1_g.fill(T::one());
        fill(&mut layer.wq, &base, &mut rng);
        fill(&mut layer.wk, &base, &mut rng);
        fill(&mut layer.wv, &base, &mut rng);
        fill(&mut layer.wo, &base, &mut rng);
        layer.ln2_g.fill(T::one());
        fill(&mut layer.w1, &base, &mut rng);
        fill(&mut layer.w2, &base, &mut rng);
    }
    p.final_g.fill(T::one());
    fill(&mut p.out_w, &out, &mut rng);
    Ok(p)
}

/// Counts full forward passes, for decode latency accounting.
#[derive(Debug, Default)]
pub struct ForwardCounter(AtomicU64);

impl ForwardCounter {
    pub fn new() -> Self {
        ForwardCounter(AtomicU64::new(0))
    }
    pub fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }
    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

/// Activations of one block, kept for the backward pass.
struct LayerTrace<T> {
    ln1_out: Vec<T>,
    ln1_mean: Vec<T>,
    ln1_rstd: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// Attention probabilities, head-major (heads x s x s).
    probs: Vec<T>,
    ctx: Vec<T>,
    x_mid: Vec<T>,
    ln2_out: Vec<T>,
    ln2_mean: Vec<T>,
    ln2_rstd: Vec<T>,
    ff_pre: Vec<T>,
    ff_act: Vec<T>,
}

/// Full activation record of one forward pass.
pub struct ForwardTrace<T> {
    tokens: Vec<TokenId>,
    key_mask: Vec<bool>,
    /// Residual stream inputs per layer; xs[layers] feeds the final norm.
    xs: Vec<Vec<T>>,
    layers: Vec<LayerTrace<T>>,
    final_out: Vec<T>,
    final_mean: Vec<T>,
    final_rstd: Vec<T>,
    /// (s x vocab_size)
    pub logits: Vec<T>,
}

impl<T> ForwardTrace<T> {
    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }
}

fn validate_tokens(cfg: &ModelConfig, tokens: &[TokenId]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Shape("cannot forward an empty sequence".into()));
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::Capacity(format!(
            "sequence of {} tokens exceeds max_seq_len {}",
            tokens.len(),
            cfg.max_seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::Modality(format!(
            "token id {bad} outside vocab of size {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

fn embed<T: Scalar>(params: &ModelParams<T>, tokens: &[TokenId]) -> Vec<T> {
    let d = params.cfg.model_dim;
    let mut x = vec![T::zero(); tokens.len() * d];
    for (i, &id) in tokens.iter().enumerate() {
        let row = &mut x[i * d..(i + 1) * d];
        row.copy_from_slice(&params.tok_emb[id as usize * d..(id as usize + 1) * d]);
        for (o, &p) in row.iter_mut().zip(&params.pos_emb[i * d..(i + 1) * d]) {
            *o += p;
        }
    }
    x
}

fn key_mask(tokens: &[TokenId]) -> Vec<bool> {
    tokens.iter().map(|&t| t == Special::Pad.id()).collect()
}

fn gather_head<T: Scalar>(dst: &mut [T], src: &[T], head: usize, hd: usize, s: usize, d: usize) {
    for i in 0..s {
        dst[i * hd..(i + 1) * hd].copy_from_slice(&src[i * d + head * hd..i * d + (head + 1) * hd]);
    }
}

/// Gathers a head of `src` transposed: dst (hd x s).
fn gather_head_t<T: Scalar>(dst: &mut [T], src: &[T], head: usize, hd: usize, s: usize, d: usize) {
    for i in 0..s {
        for j in 0..hd {
            dst[j * s + i] = src[i * d + head * hd + j];
        }
    }
}

fn scatter_head_acc<T: Scalar>(dst: &mut [T], src: &[T], head: usize, hd: usize, s: usize, d: usize) {
    for i in 0..s {
        for j in 0..hd {
            dst[i * d + head * hd + j] += src[i * hd + j];
        }
    }
}

/// Computes masked scaled-dot-product attention probabilities in place:
/// scores (s x s) -> softmax((q k^T) * scale) with masked keys at -inf.
fn mask_scale_softmax<T: Scalar>(scores: &mut [T], mask: &[bool], scale: T, s: usize) {
    for i in 0..s {
        let row = &mut scores[i * s..(i + 1) * s];
        for (j, v) in row.iter_mut().enumerate() {
            if mask[j] {
                *v = T::neg_infinity();
            } else {
                *v *= scale;
            }
        }
        softmax_in_place(row);
    }
}

/// Forward pass retaining every activation needed for backprop.
pub fn forward_trace<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[TokenId],
) -> Result<ForwardTrace<T>> {
    let cfg = &params.cfg;
    validate_tokens(cfg, tokens)?;
    let (s, d, f, v) = (tokens.len(), cfg.model_dim, cfg.ff_dim, cfg.vocab_size);
    let (h, hd) = (cfg.heads, cfg.head_dim());
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    let mask = key_mask(tokens);

    let mut xs = Vec::with_capacity(cfg.layers + 1);
    xs.push(embed(params, tokens));
    let mut layers = Vec::with_capacity(cfg.layers);

    for layer in &params.layers {
        let x = xs.last().expect("stream nonempty");
        let mut ln1_out = vec![T::zero(); s * d];
        let (mut ln1_mean, mut ln1_rstd) = (vec![T::zero(); s], vec![T::zero(); s]);
        layernorm_forward(
            &mut ln1_out, &mut ln1_mean, &mut ln1_rstd, x, &layer.ln1_g, &layer.ln1_b, s, d,
        );

        let mut q = vec![T::zero(); s * d];
        let mut k = vec![T::zero(); s * d];
        let mut vv = vec![T::zero(); s * d];
        matmul(&mut q, &ln1_out, &layer.wq, s, d, d);
        add_bias(&mut q, &layer.bq, s, d);
        matmul(&mut k, &ln1_out, &layer.wk, s, d, d);
        add_bias(&mut k, &layer.bk, s, d);
        matmul(&mut vv, &ln1_out, &layer.wv, s, d, d);
        add_bias(&mut vv, &layer.bv, s, d);

        let mut probs = vec![T::zero(); h * s * s];
        let mut ctx = vec![T::zero(); s * d];
        let mut qh = vec![T::zero(); s * hd];
        let mut kt = vec![T::zero(); hd * s];
        let mut vh = vec![T::zero(); s * hd];
        let mut ctxh = vec![T::zero(); s * hd];
        for head in 0..h {
            gather_head(&mut qh, &q, head, hd, s, d);
            gather_head_t(&mut kt, &k, head, hd, s, d);
            gather_head(&mut vh, &vv, head, hd, s, d);
            let scores = &mut probs[head * s * s..(head + 1) * s * s];
            matmul(scores, &qh, &kt, s, hd, s);
            mask_scale_softmax(scores, &mask, scale, s);
            matmul(&mut ctxh, scores, &vh, s, s, hd);
            scatter_head_acc(&mut ctx, &ctxh, head, hd, s, d);
        }

        let mut att = vec![T::zero(); s * d];
        matmul(&mut att, &ctx, &layer.wo, s, d, d);
        add_bias(&mut att, &layer.bo, s, d);
        let mut x_mid = x.clone();
        for (o, &a) in x_mid.iter_mut().zip(&att) {
            *o += a;
        }

        let mut ln2_out = vec![T::zero(); s * d];
        let (mut ln2_mean, mut ln2_rstd) = (vec![T::zero(); s], vec![T::zero(); s]);
        layernorm_forward(
            &mut ln2_out, &mut ln2_mean, &mut ln2_rstd, &x_mid, &layer.ln2_g, &layer.ln2_b, s, d,
        );
        let mut ff_pre = vec![T::zero(); s * f];
        matmul(&mut ff_pre, &ln2_out, &layer.w1, s, d, f);
        add_bias(&mut ff_pre, &layer.b1, s, f);
        let mut ff_act = vec![T::zero(); s * f];
        gelu_forward(&mut ff_act, &ff_pre);
        let mut x_next = x_mid.clone();
        matmul_acc(&mut x_next, &ff_act, &layer.w2, s, f, d);
        add_bias(&mut x_next, &layer.b2, s, d);

        layers.push(LayerTrace {
            ln1_out,
            ln1_mean,
            ln1_rstd,
            q,
            k,
            v: vv,
            probs,
            ctx,
            x_mid,
            ln2_out,
            ln2_mean,
            ln2_rstd,
            ff_pre,
            ff_act,
        });
        xs.push(x_next);
    }

    let x_last = xs.last().expect("stream nonempty");
    let mut final_out = vec![T::zero(); s * d];
    let (mut final_mean, mut final_rstd) = (vec![T::zero(); s], vec![T::zero(); s]);
    layernorm_forward(
        &mut final_out,
        &mut final_mean,
        &mut final_rstd,
        x_last,
        &params.final_g,
        &params.final_b,
        s,
        d,
    );
    let mut logits = vec![T::zero(); s * v];
    matmul(&mut logits, &final_out, &params.out_w, s, d, v);

    Ok(ForwardTrace {
        tokens: tokens.to_vec(),
        key_mask: mask,
        xs,
        layers,
        final_out,
        final_mean,
        final_rstd,
        logits,
    })
}

/// Plain forward pass: logits only (s x vocab_size), no trace retained.
pub fn forward<T: Scalar>(params: &ModelParams<T>, tokens: &[TokenId]) -> Result<Vec<T>> {
    // Decoding and training batch sizes are small, so the extra allocations
    // of the tracing path are noise next to the matmuls; reuse it.
    Ok(forward_trace(params, tokens)?.logits)
}

/// Forward pass that increments a latency counter.
pub fn forward_counted<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[TokenId],
    counter: &ForwardCounter,
) -> Result<Vec<T>> {
    counter.bump();
    forward(params, tokens)
}

/// Accumulates gradients for one traced forward given sparse logit
/// gradients (row index, d logits) into `grads`.
pub fn backward<T: Scalar>(
    trace: &ForwardTrace<T>,
    params: &ModelParams<T>,
    dlogit_rows: &[(usize, Vec<T>)],
    grads: &mut ModelParams<T>,
) {
    let cfg = &params.cfg;
    let (s, d, f, v) = (trace.tokens.len(), cfg.model_dim, cfg.ff_dim, cfg.vocab_size);
    let (h, hd) = (cfg.heads, cfg.head_dim());
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());

    // Output projection, only over rows with nonzero logit gradients.
    let mut d_final = vec![T::zero(); s * d];
    for (row, dvec) in dlogit_rows {
        debug_assert_eq!(dvec.len(), v);
        let fo = &trace.final_out[row * d..(row + 1) * d];
        let dfo = &mut d_final[row * d..(row + 1) * d];
        for p in 0..d {
            dfo[p] += dot(dvec, &params.out_w[p * v..(p + 1) * v]);
            axpy(&mut grads.out_w[p * v..(p + 1) * v], fo[p], dvec);
        }
    }

    // Final layernorm.
    let mut dx = vec![T::zero(); s * d];
    layernorm_backward(
        &mut dx,
        &mut grads.final_g,
        &mut grads.final_b,
        &d_final,
        trace.xs.last().expect("stream nonempty"),
        &params.final_g,
        &trace.final_mean,
        &trace.final_rstd,
        s,
        d,
    );

    for l in (0..cfg.layers).rev() {
        let layer = &params.layers[l];
        let glayer = &mut grads.layers[l];
        let tr = &trace.layers[l];

        // Feed-forward branch: x_next = x_mid + gelu(ln2(x_mid) w1 + b1) w2 + b2
        let mut d_ff_act = vec![T::zero(); s * f];
        matmul_bt(&mut d_ff_act, &dx, &layer.w2, s, d, f);
        matmul_at_acc(&mut glayer.w2, &tr.ff_act, &dx, s, f, d);
        col_sums_acc(&mut glayer.b2, &dx, s, d);

        let mut d_ff_pre = vec![T::zero(); s * f];
        gelu_backward(&mut d_ff_pre, &d_ff_act, &tr.ff_pre);

        let mut d_ln2 = vec![T::zero(); s * d];
        matmul_bt(&mut d_ln2, &d_ff_pre, &layer.w1, s, f, d);
        matmul_at_acc(&mut glayer.w1, &tr.ln2_out, &d_ff_pre, s, d, f);
        col_sums_acc(&mut glayer.b1, &d_ff_pre, s, f);

        let mut d_mid = vec![T::zero(); s * d];
        layernorm_backward(
            &mut d_mid,
            &mut glayer.ln2_g,
            &mut glayer.ln2_b,
            &d_ln2,
            &tr.x_mid,
            &layer.ln2_g,
            &tr.ln2_mean,
            &tr.ln2_rstd,
            s,
            d,
        );
        // Residual: gradient flows to x_mid both directly and through the FF.
        for (o, &g) in d_mid.iter_mut().zip(&dx) {
            *o += g;
        }

        // Attention branch: x_mid = x + ctx wo + bo
        let mut d_ctx = vec![T::zero(); s * d];
        matmul_bt(&mut d_ctx, &d_mid, &layer.wo, s, d, d);
        matmul_at_acc(&mut glayer.wo, &tr.ctx, &d_mid, s, d, d);
        col_sums_acc(&mut glayer.bo, &d_mid, s, d);

        let mut dq = vec![T::zero(); s * d];
        let mut dk = vec![T::zero(); s * d];
        let mut dv = vec![T::zero(); s * d];
        let mut qh = vec![T::zero(); s * hd];
        let mut kh = vec![T::zero(); s * hd];
        let mut vh = vec![T::zero(); s * hd];
        let mut d_ctxh = vec![T::zero(); s * hd];
        let mut d_headbuf = vec![T::zero(); s * hd];
        let mut d_probs = vec![T::zero(); s * s];
        for head in 0..h {
            let probs = &tr.probs[head * s * s..(head + 1) * s * s];
            gather_head(&mut qh, &tr.q, head, hd, s, d);
            gather_head(&mut kh, &tr.k, head, hd, s, d);
            gather_head(&mut vh, &tr.v, head, hd, s, d);
            gather_head(&mut d_ctxh, &d_ctx, head, hd, s, d);

            // d probs = d ctx_h v_h^T ; d v_h = probs^T d ctx_h
            matmul_bt(&mut d_probs, &d_ctxh, &vh, s, hd, s);
            d_headbuf.fill(T::zero());
            matmul_at_acc(&mut d_headbuf, probs, &d_ctxh, s, s, hd);
            scatter_head_acc(&mut dv, &d_headbuf, head, hd, s, d);

            // Softmax backward per row, then fold in the 1/sqrt(hd) scale.
            for i in 0..s {
                let p_row = &probs[i * s..(i + 1) * s];
                let dp_row = &mut d_probs[i * s..(i + 1) * s];
                let inner: T = p_row.iter().zip(dp_row.iter()).map(|(&p, &dp)| p * dp).sum();
                for j in 0..s {
                    dp_row[j] = p_row[j] * (dp_row[j] - inner) * scale;
                }
            }

            // d q_h = d scores k_h ; d k_h = d scores^T q_h
            matmul(&mut d_headbuf, &d_probs, &kh, s, s, hd);
            scatter_head_acc(&mut dq, &d_headbuf, head, hd, s, d);
            d_headbuf.fill(T::zero());
            matmul_at_acc(&mut d_headbuf, &d_probs, &qh, s, s, hd);
            scatter_head_acc(&mut dk, &d_headbuf, head, hd, s, d);
        }

        // Projections back to the ln1 output.
        let mut d_ln1 = vec![T::zero(); s * d];
        let mut tmp = vec![T::zero(); s * d];
        matmul_bt(&mut d_ln1, &dq, &layer.wq, s, d, d);
        matmul_bt(&mut tmp, &dk, &layer.wk, s, d, d);
        for (o, &g) in d_ln1.iter_mut().zip(&tmp) {
            *o += g;
        }
        matmul_bt(&mut tmp, &dv, &layer.wv, s, d, d);
        for (o, &g) in d_ln1.iter_mut().zip(&tmp) {
            *o += g;
        }
        matmul_at_acc(&mut glayer.wq, &tr.ln1_out, &dq, s, d, d);
        col_sums_acc(&mut glayer.bq, &dq, s, d);
        matmul_at_acc(&mut glayer.wk, &tr.ln1_out, &dk, s, d, d);
        col_sums_acc(&mut glayer.bk, &dk, s, d);
        matmul_at_acc(&mut glayer.wv, &tr.ln1_out, &dv, s, d, d);
        col_sums_acc(&mut glayer.bv, &dv, s, d);

        let mut d_x = vec![T::zero(); s * d];
        layernorm_backward(
            &mut d_x,
            &mut glayer.ln1_g,
            &mut glayer.ln1_b,
            &d_ln1,
            &trace.xs[l],
            &layer.ln1_g,
            &tr.ln1_mean,
            &tr.ln1_rstd,
            s,
            d,
        );
        for (o, &g) in d_x.iter_mut().zip(&d_mid) {
            *o += g;
        }
        dx = d_x;
    }

    // Embeddings.
    for (i, &id) in trace.tokens.iter().enumerate() {
        let g_row = &dx[i * d..(i + 1) * d];
        for (o, &g) in grads.tok_emb[id as usize * d..(id as usize + 1) * d]
            .iter_mut()
            .zip(g_row)
        {
            *o += g;
        }
        for (o, &g) in grads.pos_emb[i * d..(i + 1) * d].iter_mut().zip(g_row) {
            *o += g;
        }
    }
    let _ = &trace.key_mask; // masking is already baked into the cached probs
}

/// One corrupted training sample ready for the model.
#[derive(Clone, Debug)]
pub struct CorruptedSample {
    pub modal: Modal,
    /// Sequence with `x_t` substituted into the target span. May be the
    /// non-pad prefix of the assembled sample; trailing padding is inert.
    pub tokens: Vec<TokenId>,
    pub target_span: Range<usize>,
    /// Ground-truth block (length = target_span).
    pub x_0: Vec<TokenId>,
    /// Which block positions were masked (length = target_span).
    pub mask_flags: Vec<bool>,
    pub t: f64,
}

impl CorruptedSample {
    fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.target_span.end > self.tokens.len() || self.target_span.start >= self.target_span.end
        {
            return Err(Error::Shape(format!(
                "target span {:?} outside sequence of {} tokens",
                self.target_span,
                self.tokens.len()
            )));
        }
        let len = self.target_span.len();
        if self.x_0.len() != len || self.mask_flags.len() != len {
            return Err(Error::Shape(format!(
                "block of {len} positions got {} ground-truth ids and {} flags",
                self.x_0.len(),
                self.mask_flags.len()
            )));
        }
        if self.t <= 0.0 {
            return Err(Error::Domain(format!("sample t {} must be positive", self.t)));
        }
        if let Some(&bad) = self.x_0.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(Error::Modality(format!(
                "ground-truth id {bad} outside vocab of size {}",
                cfg.vocab_size
            )));
        }
        Ok(())
    }
}

/// Per-modality batch statistics from one `loss_and_grad` call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModalStats {
    pub samples: usize,
    pub masked_positions: usize,
    /// Sum of raw per-token cross entropies over masked positions.
    pub ce_sum: f64,
    /// Weight-free modal loss: mean over samples of (1/t) x mean masked CE.
    pub loss: f64,
    /// Number of forward passes spent on this modality.
    pub forwards: u64,
}

impl ModalStats {
    /// Mean cross entropy per masked token (nats).
    pub fn mean_ce(&self) -> f64 {
        if self.masked_positions == 0 {
            0.0
        } else {
            self.ce_sum / self.masked_positions as f64
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub per_modal: [ModalStats; 3],
}

impl BatchStats {
    pub fn modal(&self, m: Modal) -> &ModalStats {
        &self.per_modal[m.index()]
    }
}

/// Computes the combined weighted loss over a batch and its exact gradient.
///
/// Per-modal loss is the mean over that modality's batch members of
/// `(1/t) x mean masked cross entropy`; the combined loss weights each modal
/// term by its lambda. Modalities with weight 0 are skipped entirely (no
/// forward pass is spent on them).
pub fn loss_and_grad<T: Scalar>(
    params: &ModelParams<T>,
    batch: &[CorruptedSample],
    weights: &LossWeights,
) -> Result<(f64, ModelParams<T>, BatchStats)> {
    weights.validate()?;
    let cfg = params.cfg;
    let v = cfg.vocab_size;
    let mut grads = ModelParams::<T>::zeros(cfg)?;
    let mut stats = BatchStats::default();

    // Batch sizes per modality (active ones only).
    let mut counts = [0usize; 3];
    for sample in batch {
        sample.validate(&cfg)?;
        if weights.get(sample.modal) > 0.0 {
            counts[sample.modal.index()] += 1;
        }
    }

    for sample in batch {
        let lambda = weights.get(sample.modal);
        if lambda == 0.0 {
            continue;
        }
        let b_m = counts[sample.modal.index()] as f64;
        let trace = forward_trace(params, &sample.tokens)?;
        let masked: Vec<usize> = (0..sample.target_span.len())
            .filter(|&i| sample.mask_flags[i])
            .collect();
        let modal_stats = &mut stats.per_modal[sample.modal.index()];
        modal_stats.samples += 1;
        modal_stats.forwards += 1;
        if masked.is_empty() {
            continue;
        }

        let scale = T::from_f64(lambda / (b_m * sample.t * masked.len() as f64));
        let mut dlogit_rows = Vec::with_capacity(masked.len());
        let mut ce_sum = 0.0f64;
        for &i in &masked {
            let row_idx = sample.target_span.start + i;
            let row = &trace.logits[row_idx * v..(row_idx + 1) * v];
            let target = sample.x_0[i] as usize;

            let max = row.iter().copied().fold(T::neg_infinity(), T::max).to_f64();
            let sum_exp: f64 = row.iter().map(|&l| (l.to_f64() - max).exp()).sum();
            let lse = sum_exp.ln() + max;
            ce_sum += lse - row[target].to_f64();

            // d logits = scale * (softmax(row) - onehot(target))
            let inv_sum = T::from_f64(1.0 / sum_exp);
            let max_t = T::from_f64(max);
            let mut drow: Vec<T> = row
                .iter()
                .map(|&l| (l - max_t).exp() * inv_sum * scale)
                .collect();
            drow[target] -= scale;
            dlogit_rows.push((row_idx, drow));
        }

        modal_stats.masked_positions += masked.len();
        modal_stats.ce_sum += ce_sum;
        modal_stats.loss += ce_sum / masked.len() as f64 / sample.t / b_m;
        backward(&trace, params, &dlogit_rows, &mut grads);
    }

    let mut combined = 0.0;
    for modal in Modal::ALL {
        combined += weights.get(modal) * stats.per_modal[modal.index()].loss;
    }
    if !combined.is_finite() {
        return Err(Error::Numeric(format!(
            "combined loss is {combined} (per-modal: action {}, text {}, image {})",
            stats.modal(Modal::Action).loss,
            stats.modal(Modal::Text).loss,
            stats.modal(Modal::Image).loss
        )));
    }
    Ok((combined, grads, stats))
}

/// Assigns -inf to every logit outside the modality's allowed set.
pub fn restrict_logits<T: Scalar>(row: &mut [T], modal: Modal, vocab: &UnifiedVocab) {
    for (id, l) in row.iter_mut().enumerate() {
        if !vocab.decodable(modal, id as TokenId) {
            *l = T::neg_infinity();
        }
    }
}

/// Argmax over the modality's allowed set, with its restricted softmax
/// probability as the confidence. Id ties resolve to the lower id.
pub fn restricted_argmax<T: Scalar>(
    row: &[T],
    modal: Modal,
    vocab: &UnifiedVocab,
) -> (TokenId, f64) {
    let allowed: &mut dyn Iterator<Item = TokenId> = match modal {
        Modal::Action => &mut vocab.action_range(),
        Modal::Image => &mut vocab.image_range(),
        Modal::Text => &mut std::iter::once(vocab.eos()).chain(vocab.text_range()),
    };
    let mut best_id = TokenId::MAX;
    let mut best = f64::NEG_INFINITY;
    let mut ids_count = 0usize;
    let mut logits = Vec::new();
    for id in allowed {
        let l = row[id as usize].to_f64();
        logits.push(l);
        if l > best {
            best = l;
            best_id = id;
        }
        ids_count += 1;
    }
    debug_assert!(ids_count > 0);
    let sum: f64 = logits.iter().map(|&l| (l - best).exp()).sum();
    (best_id, 1.0 / sum)
}

/// Report from [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// Where the worst disagreement sat and what both sides said.
    pub worst: (String, f64, f64),
}

/// Central finite-difference verification of `loss_and_grad`, sampling
/// `coords_per_tensor` coordinates from every parameter tensor. Meant to run
/// in f64, where truncation error at h=1e-5 is far below the tolerance.
pub fn grad_check(
    params: &mut ModelParams<f64>,
    batch: &[CorruptedSample],
    weights: &LossWeights,
    coords_per_tensor: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let (_, grads, _) = loss_and_grad(params, batch, weights)?;
    let grad_tensors: Vec<(String, Vec<f64>)> = grads
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.to_vec()))
        .collect();

    let mut rng = rng_from_seed(seed);
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    let mut worst = (String::new(), 0.0, 0.0);
    for (ti, (name, analytic)) in grad_tensors.iter().enumerate() {
        for _ in 0..coords_per_tensor.min(analytic.len()) {
            let ci = rng.random_range(0..analytic.len());
            let orig = params.tensors_mut()[ti].1[ci];

            params.tensors_mut()[ti].1[ci] = orig + h;
            let (lp, _, _) = loss_and_grad(params, batch, weights)?;
            params.tensors_mut()[ti].1[ci] = orig - h;
            let (lm, _, _) = loss_and_grad(params, batch, weights)?;
            params.tensors_mut()[ti].1[ci] = orig;

            let fd = (lp - lm) / (2.0 * h);
            let a = analytic[ci];
            // The denominator floor turns the relative test into an absolute
            // one for near-zero gradients, where central differences bottom
            // out at roughly (summation error of the loss) / 2h, about 2e-9
            // here. Below the floor the measurement would grade FD noise,
            // not the backprop.
            let denom = a.abs().max(fd.abs()).max(1e-4);
            let rel = (a - fd).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
                worst = (format!("{name}[{ci}]"), a, fd);
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        coords_checked: checked,
        worst,
    })
}
