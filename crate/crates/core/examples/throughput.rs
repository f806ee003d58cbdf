// Scratch sizing probe for the end-to-end configs. Not part of the suite.

use std::time::Instant;

use mmp_core::diffusion::LossWeights;
use mmp_core::eval::{rollout, Policy, RolloutOptions};
use mmp_core::gridworld::data::{generate_dataset, GenConfig};
use mmp_core::gridworld::{EnvConfig, TaskKind};
use mmp_core::model::{init_params, ModelConfig};
use mmp_core::train::{run_stage, AdamState, SpaceSpec, TokenSpace, TrainConfig};
use mmp_core::vocab::VocabConfig;

fn main() {
    let env = EnvConfig {
        height: 10,
        width: 10,
    };
    let t0 = Instant::now();
    let ds = generate_dataset(&GenConfig {
        env,
        episodes: 500,
        seed: 1,
        tasks: vec![TaskKind::Press, TaskKind::Stack],
        chunk_size: 8,
        views: 1,
    })
    .unwrap();
    println!(
        "dataset: {} episodes, {} frames in {:.2}s",
        ds.episodes.len(),
        ds.frame_count(),
        t0.elapsed().as_secs_f64()
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
    println!(
        "space: vocab {}, ctx {}, max_seq {}",
        space.vocab.size(),
        space.layout.context_len(),
        space.layout.max_seq_len
    );
    let t0 = Instant::now();
    let frames = space.prepare_frames(&ds).unwrap();
    println!("prepared {} frames in {:.2}s", frames.len(), t0.elapsed().as_secs_f64());

    for (layers, heads, dim, ff) in [(2usize, 4usize, 64usize, 256usize), (4, 4, 128, 512)] {
        let cfg = ModelConfig {
            layers,
            heads,
            model_dim: dim,
            ff_dim: ff,
            vocab_size: space.vocab.size() as usize,
            max_seq_len: space.layout.max_seq_len,
            seed: 7,
        };
        let mut params = init_params::<f32>(cfg).unwrap();
        let mut opt = AdamState::new(&params);

        let t0 = Instant::now();
        let steps = 5;
        run_stage(
            &mut params,
            &mut opt,
            &space,
            &frames,
            &TrainConfig {
                stage: 2,
                weights: LossWeights::stage2_action_only(),
                batch_size: 8,
                accum_steps: 1,
                learning_rate: 1e-3,
                weight_decay: 0.0,
                total_steps: steps,
                seed: 2,
                sample_with_replacement: true,
            },
            |_| {},
        )
        .unwrap();
        let action_step = t0.elapsed().as_secs_f64() / steps as f64;

        let t0 = Instant::now();
        run_stage(
            &mut params,
            &mut opt,
            &space,
            &frames,
            &TrainConfig {
                stage: 1,
                weights: LossWeights::stage1(),
                batch_size: 8,
                accum_steps: 1,
                learning_rate: 1e-3,
                weight_decay: 0.0,
                total_steps: steps,
                seed: 3,
                sample_with_replacement: true,
            },
            |_| {},
        )
        .unwrap();
        let stage1_step = t0.elapsed().as_secs_f64() / steps as f64;

        let t0 = Instant::now();
        run_stage(
            &mut params,
            &mut opt,
            &space,
            &frames,
            &TrainConfig {
                stage: 2,
                weights: LossWeights::stage2_joint(),
                batch_size: 8,
                accum_steps: 1,
                learning_rate: 1e-3,
                weight_decay: 0.0,
                total_steps: steps,
                seed: 4,
                sample_with_replacement: true,
            },
            |_| {},
        )
        .unwrap();
        let joint_step = t0.elapsed().as_secs_f64() / steps as f64;

        let policy = Policy {
            params,
            space: space.clone(),
            env,
        };
        let t0 = Instant::now();
        let trials = 5;
        for s in 0..trials {
            rollout(&policy, TaskKind::Press, 1000 + s, &RolloutOptions::default()).unwrap();
        }
        let per_trial = t0.elapsed().as_secs_f64() / trials as f64;

        println!(
            "model {layers}L/{dim}d/{ff}ff: action step {action_step:.3}s, stage1 step {stage1_step:.3}s, joint step {joint_step:.3}s, rollout {per_trial:.3}s/trial"
        );
    }
}
