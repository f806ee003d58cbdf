//! Acceptance suite. Each test exercises one numbered release criterion and
//! prints a single `criterion NN PASS` line with the measured values; a
//! failed assert is the corresponding FAIL. Tests are self-contained except
//! where noted (the end-to-end checkpoint is shared to keep total runtime
//! sane on one core).

use std::ops::Range;
use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;

use mmp_core::assembly::{
    attach_target_block, build_context, BlockSpec, ContextInputs, ContextLayout,
};
use mmp_core::decode::{
    decode_block, one_step_decode, remask_decode, unmask_plan, DecodeConfig,
};
use mmp_core::diffusion::{
    corrupt_block, masked_ce_loss, LossWeights, MaskSchedule,
};
use mmp_core::eval::{
    decode_bench, psnr, psnr_from_mse, ssim, success_rate, Policy, RolloutOptions, TaskEval,
    PSNR_CAP,
};
use mmp_core::gridworld::data::{
    augment_dataset, generate_dataset, AnnotationFields, Dataset, GenConfig,
};
use mmp_core::gridworld::{completed_subtasks, EnvConfig, TaskKind};
use mmp_core::model::{grad_check, init_params, CorruptedSample, ForwardCounter, ModelConfig};
use mmp_core::rng::{derive_seed, rng_from_seed};
use mmp_core::train::{run_stage, AdamState, SpaceSpec, TokenSpace, TrainConfig};
use mmp_core::vocab::{
    ActionQuantizer, Bounds, Modal, PaletteImage, PaletteImageCodec, TextCodec, UnifiedVocab,
    VocabConfig,
};

fn vocab(image_tokens: u32, action_bins: u32) -> UnifiedVocab {
    UnifiedVocab::new(VocabConfig {
        image_tokens,
        action_bins,
    })
    .unwrap()
}

/// Criterion 1: text and image codecs invert exactly on fuzzed inputs, and
/// the action quantizer round-trips within half a bin width for K in
/// {256, 2048}.
#[test]
fn criterion_01_tokenizer_laws() {
    let start = Instant::now();
    let v = vocab(32, 256);
    let mut rng = rng_from_seed(0xC1);

    let text = TextCodec::new(&v);
    for _ in 0..1_000 {
        let len = rng.random_range(0..=64);
        let bytes: Vec<u8> = (0..len).map(|_| rng.random()).collect();
        let tokens = text.encode_bytes(&bytes);
        assert_eq!(text.decode(&tokens).unwrap(), bytes, "text codec round trip");
    }

    for _ in 0..1_000 {
        let (h, w) = (rng.random_range(1..=8u32), rng.random_range(1..=8u32));
        let codec = PaletteImageCodec {
            height: h,
            width: w,
            palette: 16,
        };
        let cells: Vec<u8> = (0..h * w).map(|_| rng.random_range(0..16)).collect();
        let img = PaletteImage::from_cells(h, w, cells).unwrap();
        let tokens = codec.encode(&img, &v).unwrap();
        assert_eq!(codec.decode(&tokens, &v).unwrap(), img, "image codec round trip");
    }

    // Bounds chosen exactly representable in binary so the half-bin-width
    // guarantee is not blurred by decimal-constant rounding; the fuzzed
    // values still sweep the ranges continuously.
    let bounds = [
        Bounds { low: -1.0, high: 1.0 },
        Bounds { low: 0.0, high: 8.0 },
        Bounds { low: -4.0, high: 0.5 },
    ];
    for &bins in &[256u32, 2048] {
        let q = ActionQuantizer::new(bins, bounds.to_vec()).unwrap();
        let mut worst = 0.0f64;
        for _ in 0..10_000 {
            for (dim, b) in bounds.iter().enumerate() {
                let x = rng.random_range(b.low..=b.high);
                let back = q.decode_bin(dim, q.bin_index(dim, x)) as f64;
                let err = (x as f64 - back).abs();
                let half = (b.high as f64 - b.low as f64) / (2.0 * bins as f64);
                assert!(
                    err <= half,
                    "K={bins} dim {dim}: value {x} came back {back}, err {err} > {half}"
                );
                worst = worst.max(err / half);
            }
        }
        assert!(worst <= 1.0);
    }

    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 5.0, "criterion 1 took {secs:.2}s, budget 5s");
    println!("criterion 01 PASS tokenizer laws: 1000 text + 1000 image exact, 10000 action scalars within half-bin for K in {{256, 2048}} ({secs:.2}s < 5s)");
}

/// Criterion 2: the empirical masked fraction tracks f(t) within 3 standard
/// errors at t in {0.1, 0.5, 0.9} for both schedules.
#[test]
fn criterion_02_corruption_statistics() {
    let start = Instant::now();
    let v = vocab(32, 256);
    let mut rng = rng_from_seed(0xC2);
    const L: usize = 64;
    const TRIALS: usize = 10_000;

    let block: Vec<u32> = (0..L as u32).map(|i| v.text_range().start + i % 256).collect();
    for schedule in [MaskSchedule::Linear, MaskSchedule::Cosine] {
        for t in [0.1, 0.5, 0.9] {
            let f = schedule.eval(t).unwrap();
            let mut masked = 0usize;
            for _ in 0..TRIALS {
                masked += corrupt_block(&block, t, schedule, &mut rng, &v)
                    .unwrap()
                    .masked_count();
            }
            let n = (TRIALS * L) as f64;
            let p_hat = masked as f64 / n;
            let se = (f * (1.0 - f) / n).sqrt();
            assert!(
                (p_hat - f).abs() <= 3.0 * se,
                "{schedule:?} t={t}: p_hat {p_hat:.5} vs f {f:.5}, |diff| > 3 SE ({se:.5})"
            );
        }
    }

    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 10.0, "criterion 2 took {secs:.2}s, budget 10s");
    println!("criterion 02 PASS corruption statistics: masked fraction within 3 SE of f(t) for t in {{0.1, 0.5, 0.9}}, both schedules, {TRIALS} trials each ({secs:.2}s < 10s)");
}

/// Criterion 3: loss oracle. Uniform logits give ln V per masked position,
/// the 1/t weighting is exact, and unmasked-position logits cannot move the
/// loss by a single bit.
#[test]
fn criterion_03_loss_oracle() {
    let start = Instant::now();
    let v = vocab(8, 8);
    let vs = v.size() as usize;
    let mut rng = rng_from_seed(0xC3);

    let len = 16usize;
    let x_0: Vec<u32> = (0..len)
        .map(|_| rng.random_range(v.text_range().start..v.text_range().end))
        .collect();
    let all_masked = vec![true; len];

    // Uniform logits: every row predicts the uniform distribution, so the
    // cross entropy per masked position is exactly ln V.
    let uniform = vec![0.3f64; len * vs];
    let loss = masked_ce_loss(&uniform, vs, &x_0, &all_masked, 1.0, 1.0).unwrap();
    let expect = (vs as f64).ln();
    assert!(
        (loss - expect).abs() < 1e-4,
        "uniform-logit loss {loss} vs ln V {expect}"
    );

    // 1/t weighting: halving t must exactly double the loss. The reference
    // points are powers of two so the scaling is representable.
    let logits: Vec<f64> = (0..len * vs).map(|_| rng.random_range(-3.0..3.0)).collect();
    let base = masked_ce_loss(&logits, vs, &x_0, &all_masked, 1.0, 1.0).unwrap();
    for t in [0.5, 0.25, 0.125] {
        let scaled = masked_ce_loss(&logits, vs, &x_0, &all_masked, t, 1.0).unwrap();
        assert_eq!(
            scaled.to_bits(),
            (base / t).to_bits(),
            "1/t scaling not exact at t={t}"
        );
    }

    // Invariance: rewriting logits at unmasked positions is invisible.
    let mut flags = vec![false; len];
    for i in (0..len).step_by(2) {
        flags[i] = true;
    }
    let before = masked_ce_loss(&logits, vs, &x_0, &flags, 0.7, 1.3).unwrap();
    let mut tampered = logits.clone();
    for (i, &m) in flags.iter().enumerate() {
        if !m {
            for l in &mut tampered[i * vs..(i + 1) * vs] {
                *l = rng.random_range(-50.0..50.0);
            }
        }
    }
    let after = masked_ce_loss(&tampered, vs, &x_0, &flags, 0.7, 1.3).unwrap();
    assert_eq!(
        before.to_bits(),
        after.to_bits(),
        "loss depends on unmasked-position logits"
    );

    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 5.0, "criterion 3 took {secs:.2}s, budget 5s");
    println!("criterion 03 PASS loss oracle: uniform logits = ln V within 1e-4, 1/t scaling bit-exact, unmasked logits inert ({secs:.2}s < 5s)");
}

/// A small assembly stack shared by the model-level criteria: a vocab, a
/// layout with one 2x2 view, and quantizers over three action dims.
struct Rig {
    vocab: UnifiedVocab,
    layout: ContextLayout,
    blocks: BlockSpec,
    codec: PaletteImageCodec,
    quant: ActionQuantizer,
}

impl Rig {
    fn new(image_tokens: u32, action_bins: u32) -> Rig {
        let vocab = vocab(image_tokens, action_bins);
        let blocks = BlockSpec {
            text_len: 16,
            image_len: 4,
            action_dims: 3,
            chunk_size: 4,
        };
        let layout = ContextLayout {
            views: 1,
            view_tokens: 4,
            instruction_len: 8,
            description_len: 0,
            state_len: 3,
            // Context (16) plus the widest block (text, 16).
            max_seq_len: 32,
        };
        let codec = PaletteImageCodec {
            height: 2,
            width: 2,
            palette: image_tokens.min(16),
        };
        let quant = ActionQuantizer::new(
            action_bins,
            vec![
                Bounds { low: -1.0, high: 1.0 };
                3
            ],
        )
        .unwrap();
        Rig {
            vocab,
            layout,
            blocks,
            codec,
            quant,
        }
    }

    fn model_config(&self, dim: usize, layers: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            layers,
            heads: 4,
            model_dim: dim,
            ff_dim: dim * 2,
            vocab_size: self.vocab.size() as usize,
            max_seq_len: self.layout.max_seq_len,
            seed,
        }
    }

    /// A fully masked sample for `modal` built from fuzzed context inputs.
    fn masked_sample(
        &self,
        modal: Modal,
        rng: &mut impl Rng,
    ) -> mmp_core::assembly::AssembledSample {
        let cells: Vec<u8> = (0..4).map(|_| rng.random_range(0..self.codec.palette as u8)).collect();
        let view = PaletteImage::from_cells(2, 2, cells).unwrap();
        let state: Vec<f32> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ctx = build_context(
            modal,
            ContextInputs {
                instruction: "go",
                description: None,
                state: Some(&state),
                views: std::slice::from_ref(&view),
            },
            &self.layout,
            &self.vocab,
            &self.codec,
            &self.quant,
        )
        .unwrap();
        attach_target_block(ctx, modal, &self.blocks, &self.layout, &self.vocab).unwrap()
    }

    /// Ground-truth ids drawn uniformly from the modal's decodable range.
    fn random_gt(&self, modal: Modal, rng: &mut impl Rng) -> Vec<u32> {
        let range: Range<u32> = match modal {
            Modal::Action => self.vocab.action_range(),
            Modal::Image => self.vocab.image_range(),
            // Text targets may also end in <eos>.
            Modal::Text => self.vocab.text_range(),
        };
        (0..self.blocks.block_len(modal))
            .map(|_| rng.random_range(range.clone()))
            .collect()
    }
}

/// Criterion 4: analytic gradients agree with central finite differences on
/// a tiny 64-bit model, over at least 200 sampled coordinates per parameter
/// tensor (tensors smaller than that are sampled at their full size).
#[test]
fn criterion_04_gradient_check() {
    let start = Instant::now();
    let rig = Rig::new(8, 8);
    let mut rng = rng_from_seed(0xC4);

    // model_dim 24 keeps even the layernorm gain groups at a meaningful
    // sampled share while the finite-difference sweep stays fast.
    let mut params = init_params::<f64>(rig.model_config(24, 2, 9)).unwrap();
    let weights = LossWeights {
        action: 1.0,
        text: 0.5,
        image: 0.25,
    };

    let mut batch = Vec::new();
    for modal in Modal::ALL {
        let sample = rig.masked_sample(modal, &mut rng);
        let gt = rig.random_gt(modal, &mut rng);
        let t = if modal == Modal::Action { 1.0 } else { 0.6 };
        let corr = corrupt_block(&gt, t, MaskSchedule::for_modal(modal), &mut rng, &rig.vocab)
            .unwrap();
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

    let report = grad_check(&mut params, &batch, &weights, 200, 1e-5, 0xC4).unwrap();
    assert!(
        report.max_rel_err < 1e-4,
        "max relative gradient error {} over {} coords, worst at {:?}",
        report.max_rel_err,
        report.coords_checked,
        report.worst
    );

    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 120.0, "criterion 4 took {secs:.2}s, budget 2min");
    println!(
        "criterion 04 PASS gradient check: max rel err {:.2e} < 1e-4 over {} coords ({secs:.2}s < 120s)",
        report.max_rel_err, report.coords_checked
    );
}

/// Criterion 5: decode laws. Unmask plans conserve counts, a T=1 re-mask is
/// bit-identical to one-step decoding, forward counts are exact, and every
/// decoded id stays inside the target modality's range.
#[test]
fn criterion_05_decode_laws() {
    let start = Instant::now();
    let rig = Rig::new(8, 8);
    let mut rng = rng_from_seed(0xC5);

    for _ in 0..500 {
        let len = rng.random_range(1..=256usize);
        let steps = rng.random_range(1..=16usize);
        let schedule = if rng.random::<bool>() {
            MaskSchedule::Linear
        } else {
            MaskSchedule::Cosine
        };
        let plan = unmask_plan(len, steps, schedule).unwrap();
        assert_eq!(plan.len(), steps);
        assert_eq!(*plan.last().unwrap(), 0, "final step must finish the block");
        let mut prev = len;
        let mut unmasked = 0usize;
        for &remaining in &plan {
            assert!(remaining <= prev, "plan must be non-increasing");
            unmasked += prev - remaining;
            prev = remaining;
        }
        assert_eq!(unmasked, len, "unmask counts must sum to the block length");
    }

    // T=1 re-mask degenerates to one-step, bit for bit, and the forward
    // counters read exactly 1 and T.
    let params = init_params::<f32>(rig.model_config(16, 1, 11)).unwrap();
    for modal in Modal::ALL {
        let sample = rig.masked_sample(modal, &mut rng);

        let c1 = ForwardCounter::default();
        let one = one_step_decode(&params, &sample, &rig.vocab, &c1).unwrap();
        assert_eq!(c1.get(), 1, "one-step must cost exactly one forward");
        assert_eq!(one.forwards, 1);

        let c2 = ForwardCounter::default();
        let single = remask_decode(
            &params,
            &sample,
            &DecodeConfig::remask(1, MaskSchedule::Cosine),
            &rig.vocab,
            &c2,
        )
        .unwrap();
        assert_eq!(single.tokens, one.tokens, "T=1 re-mask differs from one-step");
        assert_eq!(c2.get(), 1);

        for steps in [3usize, 6] {
            let ct = ForwardCounter::default();
            let out = remask_decode(
                &params,
                &sample,
                &DecodeConfig::remask(steps, MaskSchedule::Cosine),
                &rig.vocab,
                &ct,
            )
            .unwrap();
            assert_eq!(ct.get(), steps as u64, "re-mask must cost T forwards");
            assert_eq!(out.forwards, steps as u64);
        }
    }

    // Range fuzz: across fresh random models and contexts, every decoded id
    // must be decodable for its modality. Counts tokens, not calls.
    let mut ids_checked = 0usize;
    let mut reinit = 0u64;
    while ids_checked < 10_000 {
        reinit += 1;
        let params = init_params::<f32>(rig.model_config(16, 1, 100 + reinit)).unwrap();
        for modal in Modal::ALL {
            let sample = rig.masked_sample(modal, &mut rng);
            let steps = rng.random_range(1..=4usize);
            let cfg = if steps == 1 {
                DecodeConfig::one_step()
            } else {
                DecodeConfig::remask(steps, MaskSchedule::for_modal(modal))
            };
            let out = decode_block(&params, &sample, &cfg, &rig.vocab, &ForwardCounter::default())
                .unwrap();
            for &id in &out.tokens {
                assert!(
                    rig.vocab.decodable(modal, id),
                    "{} decode produced out-of-range id {id}",
                    modal.name()
                );
            }
            ids_checked += out.tokens.len();
        }
    }

    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 60.0, "criterion 5 took {secs:.2}s, budget 1min");
    println!("criterion 05 PASS decode laws: 500 plans conserve counts, T=1 == one-step bit-exact, forward counts exact, {ids_checked} fuzzed ids in range ({secs:.2}s < 60s)");
}

/// Criterion 6: dataset oracle. Replaying every stored chunk through the
/// environment reproduces the stored future image cell-for-cell, and every
/// annotation matches the template oracle.
#[test]
fn criterion_06_dataset_oracle() {
    let start = Instant::now();
    let env = EnvConfig {
        height: 16,
        width: 16,
    };
    let ds = generate_dataset(&GenConfig {
        env,
        episodes: 100,
        seed: 0xC6,
        tasks: vec![TaskKind::Press, TaskKind::Stack, TaskKind::Sort],
        chunk_size: 8,
        views: 2,
    })
    .unwrap();

    let mut frames_checked = 0usize;
    for ep in &ds.episodes {
        assert!(ep.success, "expert episode {:?}/{} failed", ep.kind, ep.seed);
        // Independent replay: only the seed and the stored actions are
        // trusted; states, images, and annotations are all re-derived.
        let (mut state, task) = env.reset(ep.seed, ep.kind).unwrap();
        for frame in &ep.frames {
            for (v, view) in frame.views.iter().enumerate() {
                assert_eq!(
                    &env.render(&state, v).unwrap(),
                    view,
                    "stored view {v} diverges from re-simulation"
                );
            }
            assert_eq!(frame.state, state.proprio().to_vec(), "stored proprio diverges");
            let expect =
                AnnotationFields::for_task(&task, completed_subtasks(&state, &task)).render();
            assert_eq!(frame.annotation, expect, "annotation differs from template oracle");

            let mut sim = state.clone();
            for action in frame.chunk.chunks(ds.manifest.action_dims as usize) {
                sim = env.step(&sim, action).unwrap();
            }
            assert_eq!(
                env.render(&sim, 0).unwrap(),
                frame.future,
                "stored future image diverges from re-simulated chunk"
            );
            // Chunks are non-overlapping, so the replayed end state is the
            // next frame's start (padding only ever extends the last frame).
            state = sim;
            frames_checked += 1;
        }
    }

    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 60.0, "criterion 6 took {secs:.2}s, budget 1min");
    println!("criterion 06 PASS dataset oracle: {frames_checked} frames re-simulated cell-for-cell with exact annotations across 100 episodes ({secs:.2}s < 60s)");
}

/// Generate the standard 500-episode desk dataset for `tasks` on a 4x4
/// grid with two views, then widen it with translated and recolored
/// variants. The small grid keeps end-to-end budgets honest on one core;
/// task semantics do not depend on grid size.
fn desk_dataset(tasks: Vec<TaskKind>, copies: usize) -> (EnvConfig, Dataset) {
    let env = EnvConfig {
        height: 4,
        width: 4,
    };
    let ds = generate_dataset(&GenConfig {
        env,
        episodes: 500,
        seed: 1,
        tasks,
        chunk_size: 8,
        views: 2,
    })
    .unwrap();
    (env, augment_dataset(&ds, copies, 99).unwrap())
}

/// One constant-lr training phase.
struct Phase {
    stage: u32,
    weights: LossWeights,
    steps: usize,
    lr: f64,
    seed: u64,
}

/// Train a fresh model through `stages`; phases inside one stage share an
/// optimizer (warm moments), each stage starts with a fresh one.
fn train_policy(
    space: &TokenSpace,
    frames: &[mmp_core::train::PreparedFrame],
    dim: usize,
    model_seed: u64,
    stages: &[&[Phase]],
) -> mmp_core::model::ModelParams<f32> {
    let model = ModelConfig {
        layers: 2,
        heads: 4,
        model_dim: dim,
        ff_dim: dim * 4,
        vocab_size: space.vocab.size() as usize,
        max_seq_len: space.layout.max_seq_len,
        seed: model_seed,
    };
    let mut params = init_params::<f32>(model).unwrap();
    for phases in stages {
        let mut opt = AdamState::new(&params);
        for p in *phases {
            run_stage(
                &mut params,
                &mut opt,
                space,
                frames,
                &TrainConfig {
                    stage: p.stage,
                    weights: p.weights,
                    batch_size: 8,
                    accum_steps: 1,
                    learning_rate: p.lr,
                    weight_decay: 0.0,
                    total_steps: p.steps,
                    seed: p.seed,
                    sample_with_replacement: true,
                },
                |_| {},
            )
            .unwrap();
        }
    }
    params
}

/// End-to-end artifacts shared by criteria 7 and 9. Training runs inside
/// whichever test arrives first; under the default serial order that is
/// criterion 7, which charges the full pipeline against its budget.
struct EndToEnd {
    policy: Policy,
    press: TaskEval,
    stack: TaskEval,
    total_secs: f64,
}

static END_TO_END: OnceLock<EndToEnd> = OnceLock::new();

fn end_to_end() -> &'static EndToEnd {
    END_TO_END.get_or_init(|| {
        let start = Instant::now();
        let (env, ds) = desk_dataset(
            vec![
                TaskKind::Press,
                TaskKind::Stack,
                TaskKind::Stack,
                TaskKind::Stack,
            ],
            20,
        );
        let space = TokenSpace::fit(
            &ds,
            &SpaceSpec {
                vocab: VocabConfig {
                    image_tokens: 32,
                    action_bins: 256,
                },
                text_len: 256,
                instruction_len: 64,
                description_len: 0,
            },
        )
        .unwrap();
        let frames = space.prepare_frames(&ds).unwrap();
        let params = train_policy(
            &space,
            &frames,
            128,
            7,
            &[
                // Stage 1: text and image generation shape the shared trunk.
                &[Phase {
                    stage: 1,
                    weights: LossWeights::stage1(),
                    steps: 400,
                    lr: 1e-3,
                    seed: 5,
                }],
                // Stage 2: action-only, high lr then a low-lr polish.
                &[
                    Phase {
                        stage: 2,
                        weights: LossWeights::stage2_action_only(),
                        steps: 6000,
                        lr: 1e-3,
                        seed: 3,
                    },
                    Phase {
                        stage: 2,
                        weights: LossWeights::stage2_action_only(),
                        steps: 3000,
                        lr: 2e-4,
                        seed: 4,
                    },
                ],
            ],
        );
        let policy = Policy {
            params,
            space,
            env,
        };
        let opts = RolloutOptions::default();
        let press = success_rate(&policy, TaskKind::Press, 100, 424242, &opts).unwrap();
        let stack = success_rate(&policy, TaskKind::Stack, 100, 424242, &opts).unwrap();
        EndToEnd {
            policy,
            press,
            stack,
            total_secs: start.elapsed().as_secs_f64(),
        }
    })
}

/// Criterion 7: the full pipeline (stage 1, stage 2 action-only, held-out
/// rollouts) reaches at least 0.90 success per task over 100 seeded trials
/// with one-step decoding at chunk 8.
#[test]
fn criterion_07_end_to_end_policy() {
    let e = end_to_end();
    for (name, eval) in [("press", &e.press), ("stack", &e.stack)] {
        assert!(
            eval.success_rate >= 0.90,
            "{name}: success {}/{} below the 0.90 bar",
            eval.successes,
            eval.trials
        );
    }
    assert!(
        e.total_secs < 3600.0,
        "end-to-end pipeline took {:.0}s, budget 60min",
        e.total_secs
    );
    println!(
        "criterion 07 PASS end-to-end policy: press {}/100, stack {}/100 held-out successes, one-step decode, chunk 8 ({:.0}s < 3600s)",
        e.press.successes, e.stack.successes, e.total_secs
    );
}

/// Criterion 8: joint text+image+action training is not inferior to the
/// action-only baseline on sort, mean over three seeds with identical
/// budgets; the raw per-seed numbers are the published comparison.
#[test]
fn criterion_08_joint_vs_action_only() {
    let start = Instant::now();
    const SEEDS: [u64; 3] = [11, 12, 13];

    let (env, ds) = desk_dataset(vec![TaskKind::Sort], 15);
    // Tight text and instruction blocks sized from the data keep the joint
    // arm's text forwards affordable without changing the comparison.
    let max_annot = ds
        .episodes
        .iter()
        .flat_map(|e| e.frames.iter())
        .map(|f| f.annotation.len())
        .max()
        .unwrap();
    let max_instr = ds
        .episodes
        .iter()
        .map(|e| e.instruction.len())
        .max()
        .unwrap();
    let space = TokenSpace::fit(
        &ds,
        &SpaceSpec {
            vocab: VocabConfig {
                image_tokens: 32,
                action_bins: 256,
            },
            text_len: (max_annot + 2).next_multiple_of(8),
            instruction_len: (max_instr + 2).next_multiple_of(8),
            description_len: 0,
        },
    )
    .unwrap();
    let frames = space.prepare_frames(&ds).unwrap();

    let arm = |weights: LossWeights, seed: u64| -> TaskEval {
        let params = train_policy(
            &space,
            &frames,
            64,
            seed,
            &[&[
                Phase {
                    stage: 2,
                    weights,
                    steps: 2500,
                    lr: 1e-3,
                    seed: derive_seed(seed, 1),
                },
                Phase {
                    stage: 2,
                    weights,
                    steps: 1000,
                    lr: 2e-4,
                    seed: derive_seed(seed, 2),
                },
            ]],
        );
        let policy = Policy {
            params,
            space: space.clone(),
            env,
        };
        success_rate(
            &policy,
            TaskKind::Sort,
            200,
            424242,
            &RolloutOptions::default(),
        )
        .unwrap()
    };

    let mut action_mean = 0.0;
    let mut joint_mean = 0.0;
    let mut raw = Vec::new();
    for seed in SEEDS {
        let a = arm(LossWeights::stage2_action_only(), seed);
        let j = arm(LossWeights::stage2_joint(), seed);
        println!(
            "  seed {seed}: action-only {}/{}  joint {}/{}",
            a.successes, a.trials, j.successes, j.trials
        );
        raw.push(format!(
            "seed {seed}: {:.3} vs {:.3}",
            a.success_rate, j.success_rate
        ));
        action_mean += a.success_rate / SEEDS.len() as f64;
        joint_mean += j.success_rate / SEEDS.len() as f64;
    }

    assert!(
        joint_mean >= action_mean - 0.02,
        "joint mean {joint_mean:.3} vs action-only mean {action_mean:.3}: inferior beyond 2 points ({})",
        raw.join(", ")
    );
    let secs = start.elapsed().as_secs_f64();
    println!(
        "criterion 08 PASS joint vs action-only on sort: mean {joint_mean:.3} vs {action_mean:.3} over {} seeds x 200 trials (gate: >= mean - 0.02; raw: {}) ({secs:.0}s)",
        SEEDS.len(),
        raw.join("; ")
    );
}

/// Criterion 9: re-mask decoding at T=6 costs more than 3x one-step wall
/// time per chunk on the criterion-7 checkpoint; success deltas are
/// reported, not asserted.
#[test]
fn criterion_09_decode_bench() {
    let e = end_to_end();
    let start = Instant::now();

    let grid = [
        (8usize, DecodeConfig::one_step()),
        (8, DecodeConfig::remask(6, MaskSchedule::Cosine)),
    ];
    let rows = decode_bench(&e.policy, TaskKind::Press, 20, 424243, &grid).unwrap();
    let one = &rows[0];
    let re = &rows[1];
    assert_eq!(one.steps, 1);
    assert_eq!(re.steps, 6);
    let ratio = re.secs_per_chunk / one.secs_per_chunk;
    assert!(
        ratio > 3.0,
        "remask T=6 is only {ratio:.2}x one-step ({:.5}s vs {:.5}s per chunk)",
        re.secs_per_chunk,
        one.secs_per_chunk
    );

    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 600.0, "criterion 9 took {secs:.2}s, budget 10min");
    println!(
        "criterion 09 PASS decode bench: remask T=6 {:.2}x one-step wall per chunk (>3x), forwards {:.1} vs {:.1}; success {:.2} vs {:.2} reported not asserted ({secs:.1}s < 600s)",
        ratio, re.forwards_per_chunk, one.forwards_per_chunk, re.success_rate, one.success_rate
    );
}

/// Criterion 10: metric self-checks against closed forms.
#[test]
fn criterion_10_metric_self_checks() {
    let start = Instant::now();

    // PSNR closed forms. max_value 10 with a uniform error of 1 gives
    // 10 log10(100) = 20 dB; a full-scale error gives exactly 0 dB.
    assert!((psnr_from_mse(100.0, 10.0) - 0.0).abs() < 1e-6);
    assert!((psnr_from_mse(1.0, 10.0) - 20.0).abs() < 1e-6);
    assert_eq!(psnr_from_mse(0.0, 10.0), PSNR_CAP);

    let zeros = PaletteImage::filled(4, 4);
    let mut full = PaletteImage::filled(4, 4);
    let mut off_by_one = PaletteImage::filled(4, 4);
    for r in 0..4 {
        for c in 0..4 {
            full.set(r, c, 10);
            off_by_one.set(r, c, 1);
        }
    }
    assert!((psnr(&zeros, &full, 10.0).unwrap() - 0.0).abs() < 1e-6);
    assert!((psnr(&zeros, &off_by_one, 10.0).unwrap() - 20.0).abs() < 1e-6);
    assert_eq!(psnr(&full, &full, 10.0).unwrap(), PSNR_CAP);

    // SSIM identity and symmetry.
    let mut rng = rng_from_seed(0xCA);
    for _ in 0..50 {
        let cells_a: Vec<u8> = (0..36).map(|_| rng.random_range(0..16)).collect();
        let cells_b: Vec<u8> = (0..36).map(|_| rng.random_range(0..16)).collect();
        let a = PaletteImage::from_cells(6, 6, cells_a).unwrap();
        let b = PaletteImage::from_cells(6, 6, cells_b).unwrap();
        assert_eq!(ssim(&a, &a, 15.0).unwrap(), 1.0, "SSIM(a, a) must be exactly 1");
        let ab = ssim(&a, &b, 15.0).unwrap();
        let ba = ssim(&b, &a, 15.0).unwrap();
        assert!((ab - ba).abs() <= 1e-9, "SSIM asymmetry: {ab} vs {ba}");
    }

    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 1.0, "criterion 10 took {secs:.2}s, budget 1s");
    println!("criterion 10 PASS metric self-checks: PSNR closed forms within 1e-6, SSIM identity exact and symmetric to 1e-9 ({secs:.2}s < 1s)");
}

/// Criterion 11: gen-data, train, and eval are bit-reproducible under fixed
/// seeds, excluding wall-time fields. Runs the real binary twice per stage.
#[test]
fn criterion_11_reproducibility() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();

    let config = dir.path().join("repro.toml");
    std::fs::write(
        &config,
        r#"
[env]
height = 4
width = 4

[layout]
views = 1
instruction_len = 32

[data]
episodes = 8
seed = 21
tasks = ["press"]

[blocks]
chunk_size = 4

[model]
layers = 1
heads = 2
model_dim = 16
ff_dim = 32

[train]
stage = 2
lambda = [1.0, 0.0, 0.0]
batch_size = 2
total_steps = 5
learning_rate = 1e-3

[eval]
trials = 4
tasks = ["press"]
"#,
    )
    .unwrap();

    let run = |label: &str, args: &[&str]| {
        let out = std::process::Command::new(env!("CARGO_BIN_EXE_mmp"))
            .args(args)
            .output()
            .expect("spawn mmp");
        assert!(
            out.status.success(),
            "{label} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    };
    let cfg = config.to_str().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();

    for pass in ["a", "b"] {
        let ds = p(&format!("data_{pass}.mpds"));
        let ck = p(&format!("ckpt_{pass}.mpck"));
        let log = p(&format!("log_{pass}.jsonl"));
        let report = p(&format!("eval_{pass}.json"));
        run("gen-data", &["--config", cfg, "gen-data", "--out", &ds]);
        run(
            "train",
            &[
                "--config", cfg,
                "--set", &format!("paths.log={log}"),
                "train", "--dataset", &ds, "--out", &ck,
            ],
        );
        run(
            "eval",
            &[
                "--config", cfg,
                "eval", "--checkpoint", &ck, "--dataset", &ds, "--out", &report,
            ],
        );
    }

    let bytes = |name: &str| std::fs::read(dir.path().join(name)).unwrap();
    assert_eq!(
        bytes("data_a.mpds"),
        bytes("data_b.mpds"),
        "gen-data is not byte-reproducible"
    );
    assert_eq!(
        bytes("ckpt_a.mpck"),
        bytes("ckpt_b.mpck"),
        "train is not byte-reproducible"
    );
    // Logs and eval reports may differ only in wall-time fields.
    fn scrub(v: &mut serde_json::Value) {
        match v {
            serde_json::Value::Object(map) => {
                map.retain(|k, _| !k.contains("wall") && !k.contains("secs"));
                map.values_mut().for_each(scrub);
            }
            serde_json::Value::Array(items) => items.iter_mut().for_each(scrub),
            _ => {}
        }
    }
    let strip = |name: &str| {
        let mut v: serde_json::Value =
            serde_json::from_slice(&bytes(name)).expect("report parses");
        scrub(&mut v);
        v
    };
    let strip_lines = |name: &str| -> Vec<serde_json::Value> {
        String::from_utf8(bytes(name))
            .unwrap()
            .lines()
            .map(|line| {
                let mut v: serde_json::Value = serde_json::from_str(line).expect("log line parses");
                scrub(&mut v);
                v
            })
            .collect()
    };
    assert_eq!(
        strip_lines("log_a.jsonl"),
        strip_lines("log_b.jsonl"),
        "training logs differ beyond wall-time fields"
    );
    assert_eq!(
        strip("eval_a.json"),
        strip("eval_b.json"),
        "eval reports differ beyond wall-time fields"
    );

    let secs = start.elapsed().as_secs_f64();
    println!("criterion 11 PASS reproducibility: gen-data, train, and eval byte-stable across reruns, eval equal after wall-field strip ({secs:.2}s)");
}
