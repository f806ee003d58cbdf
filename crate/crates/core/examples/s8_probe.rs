// Scratch diagnostic for joint-vs-action-only sort arms. Not part of the
// suite.

use std::time::Instant;

use mmp_core::diffusion::LossWeights;
use mmp_core::eval::{success_rate, Policy, RolloutOptions};
use mmp_core::gridworld::data::{augment_dataset, generate_dataset, GenConfig};
use mmp_core::gridworld::{EnvConfig, TaskKind};
use mmp_core::model::{init_params, ModelConfig};
use mmp_core::rng::derive_seed;
use mmp_core::train::{run_stage, AdamState, SpaceSpec, TokenSpace, TrainConfig};
use mmp_core::vocab::VocabConfig;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let size: u32 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(4);
    let steps_a: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(3000);
    let lr_a: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let steps_b: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(1500);
    let lr_b: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(2e-4);
    let dim: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(128);
    let layers: usize = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(2);
    let views: usize = args.get(8).map(|s| s.parse().unwrap()).unwrap_or(2);
    let aug_copies: usize = args.get(9).map(|s| s.parse().unwrap()).unwrap_or(0);
    let seeds: Vec<u64> = if args.len() > 10 {
        args[10..].iter().map(|s| s.parse().unwrap()).collect()
    } else {
        vec![11]
    };

    let env = EnvConfig {
        height: size,
        width: size,
    };
    let mut ds = generate_dataset(&GenConfig {
        env,
        episodes: 500,
        seed: 1,
        tasks: vec![TaskKind::Sort],
        chunk_size: 8,
        views,
    })
    .unwrap();
    if aug_copies > 0 {
        ds = augment_dataset(&ds, aug_copies, 99).unwrap();
        println!("augmented to {} episodes", ds.episodes.len());
    }
    let max_annot = ds
        .episodes
        .iter()
        .flat_map(|e| e.frames.iter())
        .map(|f| f.annotation.len())
        .max()
        .unwrap();
    let max_instr = ds.episodes.iter().map(|e| e.instruction.len()).max().unwrap();
    let text_len = (max_annot + 2).next_multiple_of(8);
    let instruction_len = (max_instr + 2).next_multiple_of(8);
    println!("text_len {} instruction_len {}", text_len, instruction_len);
    let space = TokenSpace::fit(
        &ds,
        &SpaceSpec {
            vocab: VocabConfig {
                image_tokens: 32,
                action_bins: 256,
            },
            text_len,
            instruction_len,
            description_len: 0,
        },
    )
    .unwrap();
    let frames = space.prepare_frames(&ds).unwrap();

    for (arm, weights) in [
        ("action", LossWeights::stage2_action_only()),
        ("joint", LossWeights::stage2_joint()),
    ] {
        for &seed in &seeds {
            let start = Instant::now();
            let cfg = ModelConfig {
                layers,
                heads: 4,
                model_dim: dim,
                ff_dim: dim * 4,
                vocab_size: space.vocab.size() as usize,
                max_seq_len: space.layout.max_seq_len,
                seed,
            };
            let mut params = init_params::<f32>(cfg).unwrap();
            let mut opt = AdamState::new(&params);
            for (steps, lr, phase) in [(steps_a, lr_a, 1u64), (steps_b, lr_b, 2u64)] {
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
                        weights,
                        batch_size: 8,
                        accum_steps: 1,
                        learning_rate: lr,
                        weight_decay: 0.0,
                        total_steps: steps,
                        seed: derive_seed(seed, phase),
                        sample_with_replacement: true,
                    },
                    |_| {},
                )
                .unwrap();
            }
            let policy = Policy {
                params,
                space: space.clone(),
                env,
            };
            let eval = success_rate(
                &policy,
                TaskKind::Sort,
                100,
                424242,
                &RolloutOptions::default(),
            )
            .unwrap();
            println!(
                "{} seed {}: {}/{} sort success, {:.0}s",
                arm,
                seed,
                eval.successes,
                eval.trials,
                start.elapsed().as_secs_f64()
            );
        }
    }
}
