// Scratch convergence probe for the end-to-end configs. Not part of the suite.

use std::time::Instant;

use mmp_core::diffusion::LossWeights;
use mmp_core::eval::{success_rate, Policy, RolloutOptions};
use mmp_core::gridworld::data::{generate_dataset, GenConfig};
use mmp_core::gridworld::{EnvConfig, TaskKind};
use mmp_core::model::{init_params, ModelConfig};
use mmp_core::train::{run_stage, AdamState, SpaceSpec, TokenSpace, TrainConfig};
use mmp_core::vocab::VocabConfig;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let size: u32 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(8);
    let stage1_steps: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(300);
    let stage2_steps: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1200);
    let lr: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let dim: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(64);
    let layers: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(2);

    let env = EnvConfig {
        height: size,
        width: size,
    };
    let total = Instant::now();
    let ds = generate_dataset(&GenConfig {
        env,
        episodes: 500,
        seed: 1,
        tasks: vec![TaskKind::Press, TaskKind::Stack],
        chunk_size: 8,
        views: 1,
    })
    .unwrap();
    println!("dataset: {} frames", ds.frame_count());

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

    let cfg = ModelConfig {
        layers,
        heads: 4,
        model_dim: dim,
        ff_dim: dim * 4,
        vocab_size: space.vocab.size() as usize,
        max_seq_len: space.layout.max_seq_len,
        seed: 7,
    };
    let mut params = init_params::<f32>(cfg).unwrap();
    let mut opt = AdamState::new(&params);

    let t0 = Instant::now();
    let r1 = run_stage(
        &mut params,
        &mut opt,
        &space,
        &frames,
        &TrainConfig {
            stage: 1,
            weights: LossWeights::stage1(),
            batch_size: 8,
            accum_steps: 1,
            learning_rate: lr,
            weight_decay: 0.0,
            total_steps: stage1_steps,
            seed: 2,
            sample_with_replacement: true,
        },
        |r| {
            if r.step % 100 == 0 {
                println!(
                    "  s1 step {} text {:.4} image {:.4}",
                    r.step, r.text_loss, r.image_loss
                );
            }
        },
    )
    .unwrap();
    println!(
        "stage1 {} steps in {:.1}s, final text {:.4} image {:.4}",
        stage1_steps,
        t0.elapsed().as_secs_f64(),
        r1.steps.last().map(|r| r.text_loss).unwrap_or(0.0),
        r1.steps.last().map(|r| r.image_loss).unwrap_or(0.0),
    );

    let mut opt2 = AdamState::new(&params);
    let t0 = Instant::now();
    let r2 = run_stage(
        &mut params,
        &mut opt2,
        &space,
        &frames,
        &TrainConfig {
            stage: 2,
            weights: LossWeights::stage2_action_only(),
            batch_size: 8,
            accum_steps: 1,
            learning_rate: lr,
            weight_decay: 0.0,
            total_steps: stage2_steps,
            seed: 3,
            sample_with_replacement: true,
        },
        |r| {
            if r.step % 200 == 0 {
                println!("  s2 step {} action {:.4}", r.step, r.action_loss);
            }
        },
    )
    .unwrap();
    println!(
        "stage2 {} steps in {:.1}s, final action {:.4}",
        stage2_steps,
        t0.elapsed().as_secs_f64(),
        r2.steps.last().map(|r| r.action_loss).unwrap_or(0.0),
    );

    let policy = Policy {
        params,
        space,
        env,
    };
    for kind in [TaskKind::Press, TaskKind::Stack] {
        let t0 = Instant::now();
        let eval = success_rate(&policy, kind, 100, 424242, &RolloutOptions::default()).unwrap();
        println!(
            "{}: {}/{} success ({:.0?}s)",
            kind.name(),
            eval.successes,
            eval.trials,
            t0.elapsed().as_secs_f64()
        );
    }
    println!("total {:.1}s", total.elapsed().as_secs_f64());
}
