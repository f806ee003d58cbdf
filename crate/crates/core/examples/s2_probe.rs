// Scratch probe for stage-2 action convergence. Not part of the suite.

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
    let steps_a: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1000);
    let lr_a: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let steps_b: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(1000);
    let lr_b: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(2e-4);
    let dim: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(64);
    let layers: usize = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(2);
    let batch: usize = args.get(8).map(|s| s.parse().unwrap()).unwrap_or(8);
    let views: usize = args.get(9).map(|s| s.parse().unwrap()).unwrap_or(1);

    let env = EnvConfig {
        height: size,
        width: size,
    };
    let ds = generate_dataset(&GenConfig {
        env,
        episodes: 500,
        seed: 1,
        tasks: vec![TaskKind::Press, TaskKind::Stack],
        chunk_size: 8,
        views,
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
    for (phase, (steps, lr, seed)) in [(steps_a, lr_a, 3u64), (steps_b, lr_b, 4u64)]
        .into_iter()
        .enumerate()
    {
        if steps == 0 {
            continue;
        }
        run_stage(
            &mut params,
            &mut opt,
            &space,
            &frames,
            &TrainConfig {
                stage: 2,
                weights: LossWeights::stage2_action_only(),
                batch_size: batch,
                accum_steps: 1,
                learning_rate: lr,
                weight_decay: 0.0,
                total_steps: steps,
                seed,
                sample_with_replacement: true,
            },
            |r| {
                if r.step % 200 == 0 || r.step + 1 == steps {
                    println!("  phase {} step {} action {:.4}", phase, r.step, r.action_loss);
                }
            },
        )
        .unwrap();
    }
    println!("train {:.1}s", t0.elapsed().as_secs_f64());

    let policy = Policy {
        params,
        space,
        env,
    };
    for kind in [TaskKind::Press, TaskKind::Stack] {
        let eval = success_rate(&policy, kind, 100, 424242, &RolloutOptions::default()).unwrap();
        println!("{}: {}/{} success", kind.name(), eval.successes, eval.trials);
    }
}
