//! Closed-loop policy evaluation and the generation-quality metrics.
//!
//! A [`Policy`] bundles trained weights with the token interface from its
//! checkpoint. Rollouts alternate one action-block decode with open-loop
//! execution of the decoded chunk, so the cost of acting is exactly the
//! decode cost; that is what [`decode_bench`] measures when it compares
//! one-step and iterative decoding at different chunk sizes.
//!
//! Image quality uses PSNR (capped at 99 dB) and a single-window SSIM;
//! language quality is exact-match accuracy of the announced subtask after
//! whitespace normalization.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::assembly::{BlockSpec, ContextInputs};
use crate::checkpoint::Checkpoint;
use crate::decode::{decode_block, DecodeConfig, Strategy};
use crate::error::{Error, Result};
use crate::gridworld::data::{AnnotationFields, Dataset};
use crate::gridworld::{is_success, success_score, EnvConfig, TaskKind, WorldState};
use crate::model::{ForwardCounter, ModelParams};
use crate::rng::derive_seed;
use crate::train::TokenSpace;
use crate::vocab::{Modal, PaletteImage, TextCodec};

/// Trained weights plus everything needed to talk tokens to them.
#[derive(Debug, Clone)]
pub struct Policy {
    pub params: ModelParams<f32>,
    pub space: TokenSpace,
    pub env: EnvConfig,
}

impl Policy {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Policy> {
        Ok(Policy {
            params: ckpt.params.clone(),
            space: ckpt.manifest.token_space()?,
            env: ckpt.manifest.env,
        })
    }
}

/// Knobs for one rollout.
#[derive(Debug, Clone, Copy)]
pub struct RolloutOptions {
    pub decode: DecodeConfig,
    /// Actions per decoded chunk; defaults to the trained chunk size.
    pub chunk_size: Option<usize>,
    /// Environment step budget; defaults to the expert's bound.
    pub max_steps: Option<usize>,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        RolloutOptions {
            decode: DecodeConfig::one_step(),
            chunk_size: None,
            max_steps: None,
        }
    }
}

/// What one episode did.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutOutcome {
    pub success: bool,
    pub score: f64,
    pub env_steps: usize,
    pub chunks: usize,
    pub forwards: u64,
    /// Wall time spent inside decoding, in seconds.
    pub decode_secs: f64,
}

/// Run one episode: decode a chunk, execute it open-loop, repeat until
/// success or the step budget runs out.
pub fn rollout(
    policy: &Policy,
    kind: TaskKind,
    seed: u64,
    opts: &RolloutOptions,
) -> Result<RolloutOutcome> {
    rollout_states(policy, kind, seed, opts).map(|(outcome, _)| outcome)
}

/// Like [`rollout`] but also returns every visited state, the initial one
/// first. Callers that want a trajectory render re-render from these.
pub fn rollout_states(
    policy: &Policy,
    kind: TaskKind,
    seed: u64,
    opts: &RolloutOptions,
) -> Result<(RolloutOutcome, Vec<WorldState>)> {
    let space = &policy.space;
    let chunk_size = opts.chunk_size.unwrap_or(space.blocks.chunk_size);
    if chunk_size == 0 {
        return Err(Error::Config("chunk size must be positive".into()));
    }
    let blocks = BlockSpec {
        chunk_size,
        ..space.blocks
    };
    let max_steps = opts.max_steps.unwrap_or_else(|| policy.env.step_budget());

    let (mut state, task) = policy.env.reset(seed, kind)?;
    let counter = ForwardCounter::new();
    let mut visited = vec![state.clone()];
    let mut outcome = RolloutOutcome {
        success: false,
        score: 0.0,
        env_steps: 0,
        chunks: 0,
        forwards: 0,
        decode_secs: 0.0,
    };

    'episode: while outcome.env_steps < max_steps {
        let views: Vec<PaletteImage> = (0..space.layout.views)
            .map(|v| policy.env.render(&state, v))
            .collect::<Result<_>>()?;
        let proprio = state.proprio();
        let sample = space.assemble_with_blocks(
            Modal::Action,
            ContextInputs {
                views: &views,
                instruction: &task.instruction,
                description: None,
                state: Some(&proprio),
            },
            &blocks,
        )?;

        let start = Instant::now();
        let out = decode_block(&policy.params, &sample, &opts.decode, &space.vocab, &counter)?;
        outcome.decode_secs += start.elapsed().as_secs_f64();
        outcome.chunks += 1;

        // The restricted head makes non-action ids impossible; seeing one
        // means the decode contract was violated, which is fatal.
        if let Some(&bad) = out
            .tokens
            .iter()
            .find(|&&id| !space.vocab.action_range().contains(&id))
        {
            return Err(Error::Modality(format!(
                "decoded action block contains non-action token {bad}"
            )));
        }
        let actions = space.action_quantizer.decode_chunk(&out.tokens, &space.vocab)?;
        for step in actions.chunks_exact(space.blocks.action_dims) {
            state = policy.env.step(&state, step)?;
            visited.push(state.clone());
            outcome.env_steps += 1;
            if is_success(&state, &task) {
                break 'episode;
            }
            if outcome.env_steps >= max_steps {
                break 'episode;
            }
        }
    }

    outcome.success = is_success(&state, &task);
    outcome.score = success_score(&state, &task);
    outcome.forwards = counter.get();
    Ok((outcome, visited))
}

/// Aggregate of many rollouts on one task family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub kind: TaskKind,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_score: f64,
    pub mean_env_steps: f64,
    pub forwards: u64,
    pub wall_secs: f64,
}

/// Evaluate `trials` episodes with per-trial seeds derived from
/// `base_seed`. Pick a base that is disjoint from the data-generation seed
/// so evaluation layouts were never seen in training.
pub fn success_rate(
    policy: &Policy,
    kind: TaskKind,
    trials: usize,
    base_seed: u64,
    opts: &RolloutOptions,
) -> Result<TaskEval> {
    if trials == 0 {
        return Err(Error::Config("need at least one trial".into()));
    }
    let start = Instant::now();
    let mut successes = 0usize;
    let mut score = 0.0;
    let mut steps = 0usize;
    let mut forwards = 0u64;
    for trial in 0..trials {
        let outcome = rollout(policy, kind, derive_seed(base_seed, trial as u64), opts)?;
        successes += outcome.success as usize;
        score += outcome.score;
        steps += outcome.env_steps;
        forwards += outcome.forwards;
    }
    Ok(TaskEval {
        kind,
        trials,
        successes,
        success_rate: successes as f64 / trials as f64,
        mean_score: score / trials as f64,
        mean_env_steps: steps as f64 / trials as f64,
        forwards,
        wall_secs: start.elapsed().as_secs_f64(),
    })
}

/// One row of the decode strategy comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub chunk_size: usize,
    pub strategy: Strategy,
    pub steps: usize,
    pub trials: usize,
    pub success_rate: f64,
    pub mean_score: f64,
    /// Mean wall seconds per decoded chunk.
    pub secs_per_chunk: f64,
    pub forwards_per_chunk: f64,
}

/// Compare decode configurations on one task with identical trial seeds.
pub fn decode_bench(
    policy: &Policy,
    kind: TaskKind,
    trials: usize,
    base_seed: u64,
    grid: &[(usize, DecodeConfig)],
) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::with_capacity(grid.len());
    for &(chunk_size, decode) in grid {
        let mut chunks = 0usize;
        let mut forwards = 0u64;
        let mut decode_secs = 0.0;
        let mut successes = 0usize;
        let mut score = 0.0;
        for trial in 0..trials {
            let outcome = rollout(
                policy,
                kind,
                derive_seed(base_seed, trial as u64),
                &RolloutOptions {
                    decode,
                    chunk_size: Some(chunk_size),
                    max_steps: None,
                },
            )?;
            chunks += outcome.chunks;
            forwards += outcome.forwards;
            decode_secs += outcome.decode_secs;
            successes += outcome.success as usize;
            score += outcome.score;
        }
        rows.push(BenchRow {
            chunk_size,
            strategy: decode.strategy,
            steps: decode.steps,
            trials,
            success_rate: successes as f64 / trials as f64,
            mean_score: score / trials as f64,
            secs_per_chunk: decode_secs / chunks.max(1) as f64,
            forwards_per_chunk: forwards as f64 / chunks.max(1) as f64,
        });
    }
    Ok(rows)
}

/// PSNR cap for identical images, in dB.
pub const PSNR_CAP: f64 = 99.0;

/// PSNR from a precomputed mean squared error.
pub fn psnr_from_mse(mse: f64, max_value: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * ((max_value * max_value) / mse).log10()).min(PSNR_CAP)
}

fn check_same_shape(a: &PaletteImage, b: &PaletteImage) -> Result<()> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::Shape(format!(
            "image shapes differ: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio over palette indices, capped at 99 dB.
pub fn psnr(a: &PaletteImage, b: &PaletteImage, max_value: f64) -> Result<f64> {
    check_same_shape(a, b)?;
    let n = a.cells.len() as f64;
    let mse = a
        .cells
        .iter()
        .zip(b.cells.iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / n;
    Ok(psnr_from_mse(mse, max_value))
}

/// Single-window SSIM over the whole image with the standard stabilizers
/// C1 = (0.01 max)^2 and C2 = (0.03 max)^2. The global window makes the
/// zero-variance case exact: identical images score 1 even when constant.
pub fn ssim(a: &PaletteImage, b: &PaletteImage, max_value: f64) -> Result<f64> {
    check_same_shape(a, b)?;
    let n = a.cells.len() as f64;
    let mean = |img: &PaletteImage| img.cells.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mu_a = mean(a);
    let mu_b = mean(b);
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    let mut cov = 0.0;
    for (&x, &y) in a.cells.iter().zip(b.cells.iter()) {
        let dx = x as f64 - mu_a;
        let dy = y as f64 - mu_b;
        var_a += dx * dx;
        var_b += dy * dy;
        cov += dx * dy;
    }
    var_a /= n;
    var_b /= n;
    cov /= n;
    let c1 = (0.01 * max_value) * (0.01 * max_value);
    let c2 = (0.03 * max_value) * (0.03 * max_value);
    Ok(((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
        / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)))
}

/// Collapse all whitespace runs to single spaces and trim.
pub fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Fraction of predictions whose announced subtask matches the reference
/// exactly after whitespace normalization. Predictions that do not parse
/// as the template count as incorrect; references must parse.
pub fn planning_accuracy(predictions: &[String], references: &[String]) -> Result<f64> {
    if predictions.len() != references.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} references",
            predictions.len(),
            references.len()
        )));
    }
    if references.is_empty() {
        return Err(Error::Data("no references to score against".into()));
    }
    let mut correct = 0usize;
    for (pred, reference) in predictions.iter().zip(references.iter()) {
        let ref_fields = AnnotationFields::parse(reference).ok_or_else(|| {
            Error::Data("reference annotation does not follow the template".into())
        })?;
        if let Some(pred_fields) = AnnotationFields::parse(pred) {
            if normalize_ws(&pred_fields.subtask_text) == normalize_ws(&ref_fields.subtask_text) {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / predictions.len() as f64)
}

fn frame_inputs<'a>(
    instruction: &'a str,
    frame: &'a crate::gridworld::data::Frame,
) -> ContextInputs<'a> {
    ContextInputs {
        views: &frame.views,
        instruction,
        description: None,
        state: Some(&frame.state),
    }
}

/// Decode the annotation for one frame's context.
pub fn predict_annotation(
    policy: &Policy,
    instruction: &str,
    frame: &crate::gridworld::data::Frame,
    decode: &DecodeConfig,
    counter: &ForwardCounter,
) -> Result<String> {
    let sample = policy
        .space
        .assemble(Modal::Text, frame_inputs(instruction, frame))?;
    let out = decode_block(&policy.params, &sample, decode, &policy.space.vocab, counter)?;
    let bytes = TextCodec::new(&policy.space.vocab).decode(&out.tokens)?;
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

/// Decode the future image for one frame's context.
pub fn predict_future(
    policy: &Policy,
    instruction: &str,
    frame: &crate::gridworld::data::Frame,
    decode: &DecodeConfig,
    counter: &ForwardCounter,
) -> Result<PaletteImage> {
    let sample = policy
        .space
        .assemble(Modal::Image, frame_inputs(instruction, frame))?;
    let out = decode_block(&policy.params, &sample, decode, &policy.space.vocab, counter)?;
    policy.space.image_codec.decode(&out.tokens, &policy.space.vocab)
}

/// Subtask-prediction accuracy over dataset frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanningEval {
    pub frames: usize,
    pub accuracy: f64,
    pub unparseable: usize,
    pub forwards: u64,
    pub wall_secs: f64,
}

/// Predict annotations for up to `limit` frames and score the subtask.
pub fn planning_eval(
    policy: &Policy,
    ds: &Dataset,
    decode: &DecodeConfig,
    limit: usize,
) -> Result<PlanningEval> {
    let start = Instant::now();
    let counter = ForwardCounter::new();
    let mut predictions = Vec::new();
    let mut references = Vec::new();
    let mut unparseable = 0usize;
    for (ep, frame) in ds.iter_frames().take(limit) {
        let pred = predict_annotation(policy, &ep.instruction, frame, decode, &counter)?;
        if AnnotationFields::parse(&pred).is_none() {
            unparseable += 1;
        }
        predictions.push(pred);
        references.push(frame.annotation.clone());
    }
    let accuracy = planning_accuracy(&predictions, &references)?;
    Ok(PlanningEval {
        frames: predictions.len(),
        accuracy,
        unparseable,
        forwards: counter.get(),
        wall_secs: start.elapsed().as_secs_f64(),
    })
}

/// Future-image quality over dataset frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub frames: usize,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub forwards: u64,
    pub wall_secs: f64,
}

/// Predict future images for up to `limit` frames and score against the
/// dataset's ground truth.
pub fn image_eval(
    policy: &Policy,
    ds: &Dataset,
    decode: &DecodeConfig,
    limit: usize,
) -> Result<ImageEval> {
    let start = Instant::now();
    let counter = ForwardCounter::new();
    let max_value = (policy.space.image_codec.palette - 1) as f64;
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    let mut frames = 0usize;
    for (ep, frame) in ds.iter_frames().take(limit) {
        let pred = predict_future(policy, &ep.instruction, frame, decode, &counter)?;
        psnr_sum += psnr(&pred, &frame.future, max_value)?;
        ssim_sum += ssim(&pred, &frame.future, max_value)?;
        frames += 1;
    }
    if frames == 0 {
        return Err(Error::Data("no frames to evaluate".into()));
    }
    Ok(ImageEval {
        frames,
        mean_psnr: psnr_sum / frames as f64,
        mean_ssim: ssim_sum / frames as f64,
        forwards: counter.get(),
        wall_secs: start.elapsed().as_secs_f64(),
    })
}

/// Everything one `eval` invocation produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: Vec<TaskEval>,
    pub planning: Option<PlanningEval>,
    pub image: Option<ImageEval>,
}

impl EvalReport {
    /// Zero all wall-clock fields; everything left is reproducible bit for
    /// bit across runs.
    pub fn strip_timing(&mut self) {
        for t in &mut self.tasks {
            t.wall_secs = 0.0;
        }
        if let Some(p) = &mut self.planning {
            p.wall_secs = 0.0;
        }
        if let Some(i) = &mut self.image {
            i.wall_secs = 0.0;
        }
    }
}
