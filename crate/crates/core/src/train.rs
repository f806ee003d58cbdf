//! Two-stage masked-token training.
//!
//! A [`TokenSpace`] binds a dataset to the unified vocabulary: it fits the
//! action and state quantizers, derives the context layout, and turns each
//! dataset frame into one assembled sequence per modality. Training then
//! repeats a simple loop: sample frames, corrupt each active modality's
//! target block at a freshly drawn noise level, take the exact gradient of
//! the weighted masked cross entropy, and apply one Adam update.
//!
//! Stage 1 trains text and image prediction only; stage 2 adds (or
//! isolates) the action head. The whole loop is driven by one seeded
//! generator, so a run is reproducible bit for bit.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assembly::{
    attach_target_block, build_context, pack_text_target, AssembledSample, BlockSpec,
    ContextInputs, ContextLayout,
};
use crate::diffusion::{corrupt_block, sample_train_t, LossWeights, MaskSchedule};
use crate::error::{Error, Result};
use crate::gridworld::data::Dataset;
use crate::model::{loss_and_grad, BatchStats, CorruptedSample, ModelParams};
use crate::rng::{derive_seed, rng_from_seed};
use crate::vocab::{
    ActionQuantizer, Modal, PaletteImageCodec, UnifiedVocab, VocabConfig,
};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.95;
pub const ADAM_EPS: f64 = 1e-8;

/// Sizes that, together with a dataset manifest, fix the token interface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpaceSpec {
    pub vocab: VocabConfig,
    /// Text target block length; annotations must fit with room for `<eos>`.
    pub text_len: usize,
    pub instruction_len: usize,
    pub description_len: usize,
}

/// The full token interface between a dataset and the model: vocabulary,
/// codecs, quantizers, context layout and target block sizes.
#[derive(Debug, Clone)]
pub struct TokenSpace {
    pub vocab: UnifiedVocab,
    pub image_codec: PaletteImageCodec,
    pub action_quantizer: ActionQuantizer,
    pub state_quantizer: ActionQuantizer,
    pub layout: ContextLayout,
    pub blocks: BlockSpec,
}

impl TokenSpace {
    /// Fit quantizers on the dataset and derive the layout from its
    /// manifest. The image block is one full view; `max_seq_len` is sized
    /// for the largest modality block.
    pub fn fit(ds: &Dataset, spec: &SpaceSpec) -> Result<TokenSpace> {
        let vocab = UnifiedVocab::new(spec.vocab)?;
        let m = &ds.manifest;
        if spec.vocab.image_tokens < m.palette {
            return Err(Error::Config(format!(
                "dataset palette {} does not fit in {} image tokens",
                m.palette, spec.vocab.image_tokens
            )));
        }
        let action_quantizer =
            ActionQuantizer::from_samples(spec.vocab.action_bins, &ds.action_dim_samples())?;
        let state_quantizer =
            ActionQuantizer::from_samples(spec.vocab.action_bins, &ds.state_dim_samples())?;
        let image_codec = PaletteImageCodec {
            height: m.height,
            width: m.width,
            palette: m.palette,
        };
        let blocks = BlockSpec {
            text_len: spec.text_len,
            image_len: image_codec.tokens_per_image(),
            action_dims: m.action_dims as usize,
            chunk_size: m.chunk_size as usize,
        };
        blocks.validate()?;
        let mut layout = ContextLayout {
            views: m.views as usize,
            view_tokens: image_codec.tokens_per_image(),
            instruction_len: spec.instruction_len,
            description_len: spec.description_len,
            state_len: m.state_dims as usize,
            max_seq_len: 0,
        };
        let widest = blocks
            .block_len(Modal::Text)
            .max(blocks.block_len(Modal::Image))
            .max(blocks.block_len(Modal::Action));
        layout.max_seq_len = layout.context_len() + widest;
        layout.validate()?;
        Ok(TokenSpace {
            vocab,
            image_codec,
            action_quantizer,
            state_quantizer,
            layout,
            blocks,
        })
    }

    /// Rebuild a space from checkpointed parts, revalidating consistency.
    pub fn from_parts(
        vocab: VocabConfig,
        image_codec: PaletteImageCodec,
        action_quantizer: ActionQuantizer,
        state_quantizer: ActionQuantizer,
        layout: ContextLayout,
        blocks: BlockSpec,
    ) -> Result<TokenSpace> {
        let vocab = UnifiedVocab::new(vocab)?;
        layout.validate()?;
        blocks.validate()?;
        if layout.view_tokens != image_codec.tokens_per_image() {
            return Err(Error::Config(format!(
                "layout expects {} view tokens, codec yields {}",
                layout.view_tokens,
                image_codec.tokens_per_image()
            )));
        }
        Ok(TokenSpace {
            vocab,
            image_codec,
            action_quantizer,
            state_quantizer,
            layout,
            blocks,
        })
    }

    /// Assemble a fully masked sample for inference.
    pub fn assemble(&self, modal: Modal, inputs: ContextInputs<'_>) -> Result<AssembledSample> {
        let ctx = build_context(
            modal,
            inputs,
            &self.layout,
            &self.vocab,
            &self.image_codec,
            &self.state_quantizer,
        )?;
        attach_target_block(ctx, modal, &self.blocks, &self.layout, &self.vocab)
    }

    /// Assemble with a custom block spec (e.g. a different chunk size at
    /// evaluation time). The block must still fit `max_seq_len`.
    pub fn assemble_with_blocks(
        &self,
        modal: Modal,
        inputs: ContextInputs<'_>,
        blocks: &BlockSpec,
    ) -> Result<AssembledSample> {
        let ctx = build_context(
            modal,
            inputs,
            &self.layout,
            &self.vocab,
            &self.image_codec,
            &self.state_quantizer,
        )?;
        attach_target_block(ctx, modal, blocks, &self.layout, &self.vocab)
    }

    /// Turn one dataset frame into per-modality training samples.
    pub fn prepare_frame(
        &self,
        instruction: &str,
        frame: &crate::gridworld::data::Frame,
    ) -> Result<PreparedFrame> {
        let inputs = ContextInputs {
            views: &frame.views,
            instruction,
            description: None,
            state: Some(&frame.state),
        };

        let action_gt = self
            .action_quantizer
            .encode_chunk(&frame.chunk, self.blocks.chunk_size, &self.vocab)?;
        let text_gt = pack_text_target(&frame.annotation, &self.blocks, &self.vocab)?;
        let image_gt = self.image_codec.encode(&frame.future, &self.vocab)?;

        let mut samples: [Option<AssembledSample>; 3] = [None, None, None];
        for (modal, gt) in [
            (Modal::Action, action_gt),
            (Modal::Text, text_gt),
            (Modal::Image, image_gt),
        ] {
            let sample = self.assemble(modal, inputs)?.with_target(gt, &self.vocab)?;
            samples[modal.index()] = Some(sample);
        }
        Ok(PreparedFrame { samples })
    }

    /// Prepare every frame of the dataset, in episode order.
    pub fn prepare_frames(&self, ds: &Dataset) -> Result<Vec<PreparedFrame>> {
        ds.iter_frames()
            .map(|(ep, frame)| self.prepare_frame(&ep.instruction, frame))
            .collect()
    }
}

/// One dataset frame, assembled once per modality and reused every epoch.
#[derive(Debug, Clone)]
pub struct PreparedFrame {
    /// Indexed by `Modal::index()`. A missing entry means the frame cannot
    /// train that modality.
    pub samples: [Option<AssembledSample>; 3],
}

impl PreparedFrame {
    pub fn sample(&self, modal: Modal) -> Option<&AssembledSample> {
        self.samples[modal.index()].as_ref()
    }
}

/// Hyperparameters for one training stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// 1 = text/image pretraining, 2 = action finetuning.
    pub stage: u32,
    pub weights: LossWeights,
    /// Sample groups per micro-batch.
    pub batch_size: usize,
    /// Micro-batches averaged into one optimizer update.
    pub accum_steps: usize,
    pub learning_rate: f64,
    /// Decoupled weight decay on matrices and embeddings; 0 disables it.
    #[serde(default)]
    pub weight_decay: f64,
    pub total_steps: usize,
    pub seed: u64,
    /// When false, each frame is consumed at most once and running out of
    /// frames is an error.
    pub sample_with_replacement: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        match self.stage {
            1 => {
                if self.weights.action != 0.0 {
                    return Err(Error::Config(format!(
                        "stage 1 must not train actions, got weight {}",
                        self.weights.action
                    )));
                }
            }
            2 => {
                if self.weights.action <= 0.0 {
                    return Err(Error::Config(
                        "stage 2 needs a positive action weight".into(),
                    ));
                }
            }
            other => return Err(Error::Config(format!("stage must be 1 or 2, got {other}"))),
        }
        if self.weights.action == 0.0 && self.weights.text == 0.0 && self.weights.image == 0.0 {
            return Err(Error::Config("all loss weights are zero".into()));
        }
        if self.batch_size == 0 || self.accum_steps == 0 {
            return Err(Error::Config(
                "batch_size and accum_steps must be positive".into(),
            ));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "learning rate {} must be finite and nonnegative",
                self.learning_rate
            )));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight decay {} must be finite and nonnegative",
                self.weight_decay
            )));
        }
        Ok(())
    }

    /// Groups consumed per optimizer step.
    pub fn groups_per_step(&self) -> usize {
        self.batch_size * self.accum_steps
    }
}

/// Adam moments, one pair of tensors per parameter tensor in canonical
/// order, plus the shared step counter for bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(params: &ModelParams<f32>) -> AdamState {
        let shapes: Vec<usize> = params.tensors().iter().map(|(_, t)| t.len()).collect();
        AdamState {
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn matches(&self, params: &ModelParams<f32>) -> bool {
        let tensors = params.tensors();
        self.m.len() == tensors.len()
            && self.v.len() == tensors.len()
            && tensors
                .iter()
                .zip(self.m.iter())
                .zip(self.v.iter())
                .all(|(((_, t), m), v)| m.len() == t.len() && v.len() == t.len())
    }
}

/// Whether a tensor takes weight decay. Matrices and embeddings do;
/// biases and norm gains stay untouched so they can move freely.
fn decays(name: &str) -> bool {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    matches!(
        leaf,
        "tok_emb" | "pos_emb" | "wq" | "wk" | "wv" | "wo" | "w1" | "w2" | "out_w"
    )
}

/// One Adam update with bias correction and decoupled weight decay.
/// Moments always advance; the parameter write is skipped at `lr == 0`
/// so such steps are exact no-ops on the weights.
pub fn adam_update(
    params: &mut ModelParams<f32>,
    grads: &ModelParams<f32>,
    opt: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if !opt.matches(params) {
        return Err(Error::Shape(
            "optimizer state does not match parameter shapes".into(),
        ));
    }
    opt.step += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(opt.step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(opt.step as i32);

    let mut ps = params.tensors_mut();
    let gs = grads.tensors();
    for (i, ((name, p), (_, g))) in ps.iter_mut().zip(gs.iter()).enumerate() {
        let wd = if decays(name) { weight_decay } else { 0.0 };
        let (m, v) = (&mut opt.m[i], &mut opt.v[i]);
        for j in 0..p.len() {
            let gj = g[j] as f64;
            let mj = ADAM_BETA1 * m[j] as f64 + (1.0 - ADAM_BETA1) * gj;
            let vj = ADAM_BETA2 * v[j] as f64 + (1.0 - ADAM_BETA2) * gj * gj;
            m[j] = mj as f32;
            v[j] = vj as f32;
            if lr > 0.0 {
                let pj = p[j] as f64;
                let update = lr * (mj / bc1) / ((vj / bc2).sqrt() + ADAM_EPS) + lr * wd * pj;
                p[j] = (pj - update) as f32;
            }
        }
    }
    Ok(())
}

/// Corrupt the active-modality blocks of each group at freshly drawn noise
/// levels. Sequences are trimmed to the non-pad prefix; the trailing
/// padding is attention-inert so the logits are unchanged.
fn corrupt_groups(
    space: &TokenSpace,
    groups: &[&PreparedFrame],
    weights: &LossWeights,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<CorruptedSample>> {
    let mut batch = Vec::new();
    for (gi, group) in groups.iter().enumerate() {
        for modal in Modal::ALL {
            if weights.get(modal) == 0.0 {
                continue;
            }
            let sample = group.sample(modal).ok_or_else(|| {
                Error::Data(format!(
                    "group {gi} lacks a {} sample required by the loss weights",
                    modal.name()
                ))
            })?;
            let gt = sample
                .target_gt
                .as_ref()
                .ok_or_else(|| Error::Data(format!("group {gi} has no {} target", modal.name())))?;
            let t = sample_train_t(modal, rng);
            let corr = corrupt_block(gt, t, MaskSchedule::for_modal(modal), rng, &space.vocab)?;
            let mut tokens = sample.tokens[..sample.active_len()].to_vec();
            tokens[sample.target_span.clone()].copy_from_slice(&corr.x_t);
            batch.push(CorruptedSample {
                modal,
                tokens,
                target_span: sample.target_span.clone(),
                x_0: corr.x_0,
                mask_flags: corr.mask_flags,
                t,
            });
        }
    }
    Ok(batch)
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    /// Combined weighted loss, averaged over micro-batches.
    pub loss: f64,
    pub stats: BatchStats,
}

fn merge_stats(parts: &[(f64, BatchStats)]) -> (f64, BatchStats) {
    let mut merged = BatchStats::default();
    let mut loss = 0.0;
    for (l, st) in parts {
        loss += l;
        for (acc, part) in merged.per_modal.iter_mut().zip(st.per_modal.iter()) {
            // Modal losses are per-sample means; re-weight by sample count.
            let total = acc.samples + part.samples;
            if total > 0 {
                acc.loss = (acc.loss * acc.samples as f64 + part.loss * part.samples as f64)
                    / total as f64;
            }
            acc.samples = total;
            acc.masked_positions += part.masked_positions;
            acc.ce_sum += part.ce_sum;
            acc.forwards += part.forwards;
        }
    }
    (loss / parts.len() as f64, merged)
}

/// One optimizer step over `groups`, which must hold exactly
/// `cfg.groups_per_step()` sample groups. Gradients of the micro-batches
/// are averaged before the single Adam update.
pub fn train_step(
    params: &mut ModelParams<f32>,
    opt: &mut AdamState,
    space: &TokenSpace,
    groups: &[&PreparedFrame],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepStats> {
    cfg.validate()?;
    if groups.len() != cfg.groups_per_step() {
        return Err(Error::Shape(format!(
            "step got {} groups, config needs {}",
            groups.len(),
            cfg.groups_per_step()
        )));
    }
    if params.cfg.vocab_size != space.vocab.size() as usize {
        return Err(Error::Config(format!(
            "model vocab {} differs from token space {}",
            params.cfg.vocab_size,
            space.vocab.size()
        )));
    }

    let mut acc_grads = ModelParams::<f32>::zeros(params.cfg)?;
    let mut parts = Vec::with_capacity(cfg.accum_steps);
    for micro in groups.chunks(cfg.batch_size) {
        let batch = corrupt_groups(space, micro, &cfg.weights, rng)?;
        let (loss, grads, stats) = loss_and_grad(params, &batch, &cfg.weights)?;
        parts.push((loss, stats));
        for ((_, acc), (_, g)) in acc_grads.tensors_mut().iter_mut().zip(grads.tensors()) {
            for (a, &b) in acc.iter_mut().zip(g.iter()) {
                *a += b;
            }
        }
    }
    if cfg.accum_steps > 1 {
        let inv = 1.0 / cfg.accum_steps as f32;
        for (_, t) in acc_grads.tensors_mut().iter_mut() {
            for v in t.iter_mut() {
                *v *= inv;
            }
        }
    }
    adam_update(params, &acc_grads, opt, cfg.learning_rate, cfg.weight_decay)?;
    let (loss, stats) = merge_stats(&parts);
    Ok(StepStats { loss, stats })
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub action_loss: f64,
    pub text_loss: f64,
    pub image_loss: f64,
    pub forwards: u64,
    /// Wall time of this step in seconds; excluded from reproducibility
    /// comparisons.
    pub wall_secs: f64,
}

/// Summary of one `run_stage` call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub steps: Vec<StepRecord>,
    pub wall_secs: f64,
}

impl StageReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|r| r.loss)
    }

    pub fn final_modal_loss(&self, modal: Modal) -> Option<f64> {
        self.steps.last().map(|r| match modal {
            Modal::Action => r.action_loss,
            Modal::Text => r.text_loss,
            Modal::Image => r.image_loss,
        })
    }
}

/// Run `cfg.total_steps` optimizer steps over the prepared frames, calling
/// `on_step` after each one. Frame selection and corruption draw from one
/// generator seeded by `cfg.seed`, so runs repeat exactly.
pub fn run_stage(
    params: &mut ModelParams<f32>,
    opt: &mut AdamState,
    space: &TokenSpace,
    frames: &[PreparedFrame],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<StageReport> {
    cfg.validate()?;
    if frames.is_empty() {
        return Err(Error::Data("no frames to train on".into()));
    }
    let start = Instant::now();
    let mut rng = rng_from_seed(derive_seed(cfg.seed, cfg.stage as u64));

    // Without replacement we deal from a shuffled deck exactly once.
    let mut deck: Vec<usize> = (0..frames.len()).collect();
    let mut dealt = 0usize;
    if !cfg.sample_with_replacement {
        for i in (1..deck.len()).rev() {
            deck.swap(i, rng.random_range(0..=i));
        }
    }

    let mut report = StageReport {
        steps: Vec::with_capacity(cfg.total_steps),
        wall_secs: 0.0,
    };
    for step in 0..cfg.total_steps {
        let step_start = Instant::now();
        let mut groups = Vec::with_capacity(cfg.groups_per_step());
        for _ in 0..cfg.groups_per_step() {
            let ix = if cfg.sample_with_replacement {
                rng.random_range(0..frames.len())
            } else {
                if dealt == deck.len() {
                    return Err(Error::Data(format!(
                        "dataset exhausted after {dealt} draws with replacement disabled"
                    )));
                }
                dealt += 1;
                deck[dealt - 1]
            };
            groups.push(&frames[ix]);
        }
        let stats = train_step(params, opt, space, &groups, cfg, &mut rng)?;
        let record = StepRecord {
            step,
            loss: stats.loss,
            action_loss: stats.stats.modal(Modal::Action).loss,
            text_loss: stats.stats.modal(Modal::Text).loss,
            image_loss: stats.stats.modal(Modal::Image).loss,
            forwards: stats.stats.per_modal.iter().map(|m| m.forwards).sum(),
            wall_secs: step_start.elapsed().as_secs_f64(),
        };
        on_step(&record);
        report.steps.push(record);
    }
    report.wall_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::data::{generate_dataset, GenConfig};
    use crate::gridworld::{EnvConfig, TaskKind};
    use crate::model::{init_params, ModelConfig};

    fn toy_dataset() -> Dataset {
        generate_dataset(&GenConfig {
            env: EnvConfig {
                height: 5,
                width: 5,
            },
            episodes: 4,
            seed: 11,
            tasks: vec![TaskKind::Press, TaskKind::Sort],
            chunk_size: 3,
            views: 1,
        })
        .unwrap()
    }

    fn toy_space(ds: &Dataset) -> TokenSpace {
        TokenSpace::fit(
            ds,
            &SpaceSpec {
                vocab: VocabConfig {
                    image_tokens: 16,
                    action_bins: 16,
                },
                text_len: 224,
                instruction_len: 32,
                description_len: 0,
            },
        )
        .unwrap()
    }

    fn toy_model(space: &TokenSpace, seed: u64) -> ModelParams<f32> {
        init_params(ModelConfig {
            layers: 1,
            heads: 2,
            model_dim: 16,
            ff_dim: 32,
            vocab_size: space.vocab.size() as usize,
            max_seq_len: space.layout.max_seq_len,
            seed,
        })
        .unwrap()
    }

    fn stage2_cfg() -> TrainConfig {
        TrainConfig {
            stage: 2,
            weights: LossWeights {
                action: 1.0,
                text: 0.05,
                image: 0.05,
            },
            batch_size: 2,
            accum_steps: 1,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            total_steps: 2,
            seed: 5,
            sample_with_replacement: true,
        }
    }

    #[test]
    fn space_fit_derives_consistent_shapes() {
        let ds = toy_dataset();
        let space = toy_space(&ds);
        assert_eq!(space.layout.views, 1);
        assert_eq!(space.layout.view_tokens, 25);
        assert_eq!(space.layout.state_len, 3);
        assert_eq!(space.blocks.image_len, 25);
        assert_eq!(space.blocks.action_len(), 9);
        // Context is task token + view + instruction + state.
        assert_eq!(space.layout.context_len(), 1 + 25 + 32 + 3);
        assert_eq!(
            space.layout.max_seq_len,
            space.layout.context_len() + 224
        );
    }

    #[test]
    fn space_fit_rejects_small_palette() {
        let ds = toy_dataset();
        let err = TokenSpace::fit(
            &ds,
            &SpaceSpec {
                vocab: VocabConfig {
                    image_tokens: 8,
                    action_bins: 16,
                },
                text_len: 224,
                instruction_len: 32,
                description_len: 0,
            },
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn prepared_frames_assemble_every_modality() {
        let ds = toy_dataset();
        let space = toy_space(&ds);
        let frames = space.prepare_frames(&ds).unwrap();
        assert_eq!(frames.len(), ds.frame_count());
        for frame in &frames {
            for modal in Modal::ALL {
                let s = frame.sample(modal).unwrap();
                assert_eq!(s.tokens.len(), space.layout.max_seq_len);
                assert_eq!(s.target_span.len(), space.blocks.block_len(modal));
                assert!(s.target_gt.is_some());
            }
            // All three share one context.
            let a = frame.sample(Modal::Action).unwrap();
            let t = frame.sample(Modal::Text).unwrap();
            let ctx = space.layout.context_len();
            assert_eq!(a.tokens[1..ctx], t.tokens[1..ctx]);
            assert_ne!(a.tokens[0], t.tokens[0]);
        }
    }

    #[test]
    fn stage_discipline_is_enforced() {
        let bad = TrainConfig {
            stage: 1,
            weights: LossWeights {
                action: 0.5,
                text: 1.0,
                image: 1.0,
            },
            ..stage2_cfg()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));

        let bad = TrainConfig {
            stage: 2,
            weights: LossWeights {
                action: 0.0,
                text: 1.0,
                image: 1.0,
            },
            ..stage2_cfg()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));

        let ok = TrainConfig {
            stage: 1,
            weights: LossWeights::stage1(),
            ..stage2_cfg()
        };
        assert!(ok.validate().is_ok());
    }

    #[test]
    fn stage1_spends_no_forwards_on_actions() {
        let ds = toy_dataset();
        let space = toy_space(&ds);
        let frames = space.prepare_frames(&ds).unwrap();
        let mut params = toy_model(&space, 1);
        let mut opt = AdamState::new(&params);
        let cfg = TrainConfig {
            stage: 1,
            weights: LossWeights::stage1(),
            total_steps: 2,
            ..stage2_cfg()
        };
        let report = run_stage(&mut params, &mut opt, &space, &frames, &cfg, |_| {}).unwrap();
        for rec in &report.steps {
            assert_eq!(rec.action_loss, 0.0);
            // Two groups, two active modalities each.
            assert_eq!(rec.forwards, 4);
        }
    }

    #[test]
    fn zero_learning_rate_keeps_params_bit_exact() {
        let ds = toy_dataset();
        let space = toy_space(&ds);
        let frames = space.prepare_frames(&ds).unwrap();
        let mut params = toy_model(&space, 2);
        let before = params.clone();
        let mut opt = AdamState::new(&params);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            weight_decay: 0.0,
            total_steps: 1,
            ..stage2_cfg()
        };
        run_stage(&mut params, &mut opt, &space, &frames, &cfg, |_| {}).unwrap();
        for ((_, a), (_, b)) in params.tensors().iter().zip(before.tensors()) {
            assert!(a
                .iter()
                .zip(b.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        // The optimizer still advanced.
        assert_eq!(opt.step, 1);
        assert!(opt.m.iter().any(|t| t.iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn zero_steps_changes_nothing() {
        let ds = toy_dataset();
        let space = toy_space(&ds);
        let frames = space.prepare_frames(&ds).unwrap();
        let mut params = toy_model(&space, 3);
        let before = params.clone();
        let mut opt = AdamState::new(&params);
        let cfg = TrainConfig {
            total_steps: 0,
            ..stage2_cfg()
        };
        let report = run_stage(&mut params, &mut opt, &space, &frames, &cfg, |_| {}).unwrap();
        assert!(report.steps.is_empty());
        assert_eq!(params, before);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = toy_dataset();
        let space = toy_space(&ds);
        let frames = space.prepare_frames(&ds).unwrap();
        let cfg = TrainConfig {
            total_steps: 3,
            ..stage2_cfg()
        };

        let run = || {
            let mut params = toy_model(&space, 4);
            let mut opt = AdamState::new(&params);
            let report =
                run_stage(&mut params, &mut opt, &space, &frames, &cfg, |_| {}).unwrap();
            (params, report)
        };
        let (pa, ra) = run();
        let (pb, rb) = run();
        assert_eq!(pa, pb);
        let strip = |r: &StageReport| -> Vec<(usize, f64, f64, f64, f64)> {
            r.steps
                .iter()
                .map(|s| (s.step, s.loss, s.action_loss, s.text_loss, s.image_loss))
                .collect()
        };
        assert_eq!(strip(&ra), strip(&rb));
    }

    #[test]
    fn batch_gradient_matches_weighted_member_mean() {
        let ds = toy_dataset();
        let space = toy_space(&ds);
        let frames = space.prepare_frames(&ds).unwrap();
        let params = toy_model(&space, 5);
        let weights = LossWeights::stage2_joint();

        let mut rng = rng_from_seed(77);
        let refs: Vec<&PreparedFrame> = frames.iter().take(4).collect();
        let batch = corrupt_groups(&space, &refs, &weights, &mut rng).unwrap();

        let (full_loss, full_grads, _) = loss_and_grad(&params, &batch, &weights).unwrap();

        // Per-modal normalization means equal-count halves average exactly.
        let k = batch.len() / 2;
        let (la, ga, _) = loss_and_grad(&params, &batch[..k], &weights).unwrap();
        let (lb, gb, _) = loss_and_grad(&params, &batch[k..], &weights).unwrap();
        assert!((full_loss - 0.5 * (la + lb)).abs() < 1e-6, "loss mismatch");

        for (((_, f), (_, a)), (_, b)) in full_grads
            .tensors()
            .iter()
            .zip(ga.tensors())
            .zip(gb.tensors())
        {
            for ((&fv, &av), &bv) in f.iter().zip(a.iter()).zip(b.iter()) {
                let mean = 0.5 * (av as f64 + bv as f64);
                assert!(
                    (fv as f64 - mean).abs() < 1e-6,
                    "gradient mismatch: {fv} vs {mean}"
                );
            }
        }
    }

    #[test]
    fn missing_modality_sample_is_a_data_error() {
        let ds = toy_dataset();
        let space = toy_space(&ds);
        let mut frames = space.prepare_frames(&ds).unwrap();
        frames[0].samples[Modal::Action.index()] = None;
        let mut params = toy_model(&space, 6);
        let mut opt = AdamState::new(&params);
        let cfg = TrainConfig {
            batch_size: 1,
            total_steps: 1,
            ..stage2_cfg()
        };
        let groups = [&frames[0]];
        let mut rng = rng_from_seed(1);
        let err = train_step(&mut params, &mut opt, &space, &groups, &cfg, &mut rng);
        assert!(matches!(err, Err(Error::Data(_))));
    }

    #[test]
    fn no_replacement_exhaustion_is_a_data_error() {
        let ds = toy_dataset();
        let space = toy_space(&ds);
        let frames = space.prepare_frames(&ds).unwrap();
        let n = frames.len();
        let mut params = toy_model(&space, 7);
        let mut opt = AdamState::new(&params);
        let cfg = TrainConfig {
            batch_size: n,
            total_steps: 2, // needs 2n draws, only n available
            sample_with_replacement: false,
            ..stage2_cfg()
        };
        let err = run_stage(&mut params, &mut opt, &space, &frames, &cfg, |_| {});
        assert!(matches!(err, Err(Error::Data(_))));
    }

    #[test]
    fn accumulation_matches_fused_batch_loss() {
        let ds = toy_dataset();
        let space = toy_space(&ds);
        let frames = space.prepare_frames(&ds).unwrap();

        // Same total groups, once fused and once split in two micro-batches.
        let fused = TrainConfig {
            batch_size: 4,
            accum_steps: 1,
            learning_rate: 0.0,
            weight_decay: 0.0,
            total_steps: 1,
            ..stage2_cfg()
        };
        let split = TrainConfig {
            batch_size: 2,
            accum_steps: 2,
            ..fused
        };

        let run = |cfg: &TrainConfig| {
            let mut params = toy_model(&space, 8);
            let mut opt = AdamState::new(&params);
            let report =
                run_stage(&mut params, &mut opt, &space, &frames, cfg, |_| {}).unwrap();
            report.steps[0]
        };
        let a = run(&fused);
        let b = run(&split);
        // Identical frame draws and corruption stream, so the averaged
        // micro losses agree with the fused batch up to float roundoff.
        assert!((a.loss - b.loss).abs() < 1e-9, "{} vs {}", a.loss, b.loss);
        assert_eq!(a.forwards, b.forwards);
    }

    #[test]
    fn loss_falls_when_overfitting_one_frame() {
        let ds = toy_dataset();
        let space = toy_space(&ds);
        let frames = space.prepare_frames(&ds).unwrap();
        let one = vec![frames[0].clone()];
        let mut params = toy_model(&space, 9);
        let mut opt = AdamState::new(&params);
        let cfg = TrainConfig {
            weights: LossWeights::stage2_action_only(),
            batch_size: 1,
            learning_rate: 3e-3,
            weight_decay: 0.0,
            total_steps: 200,
            ..stage2_cfg()
        };
        let report = run_stage(&mut params, &mut opt, &space, &one, &cfg, |_| {}).unwrap();
        let first = report.steps.first().unwrap().loss;
        let last = report.steps.last().unwrap().loss;
        assert!(
            last < 0.3 && last < first * 0.1,
            "loss should collapse on one frame: {first} -> {last}"
        );
        assert!(params.all_finite());
    }
}
