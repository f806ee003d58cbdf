// Scratch diagnostic for stack-task rollouts. Not part of the suite.

use mmp_core::assembly::ContextInputs;
use mmp_core::decode::{decode_block, DecodeConfig};
use mmp_core::diffusion::LossWeights;
use mmp_core::eval::{success_rate, Policy, RolloutOptions};
use mmp_core::gridworld::data::{augment_dataset, generate_dataset, GenConfig};
use mmp_core::gridworld::{EnvConfig, TaskKind};
use mmp_core::model::{init_params, ForwardCounter, ModelConfig};
use mmp_core::rng::derive_seed;
use mmp_core::train::{run_stage, AdamState, SpaceSpec, TokenSpace, TrainConfig};
use mmp_core::vocab::{Modal, VocabConfig};

fn show(img: &mmp_core::vocab::PaletteImage) {
    for r in 0..img.height {
        let row: String = (0..img.width)
            .map(|c| {
                let v = img.cells[(r * img.width + c) as usize];
                char::from_digit(v as u32, 16).unwrap_or('?')
            })
            .collect();
        println!("    {}", row);
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let size: u32 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(6);
    let steps_a: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1000);
    let lr_a: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let steps_b: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(1000);
    let lr_b: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(2e-4);
    let dim: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(64);
    let layers: usize = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(2);
    let views: usize = args.get(8).map(|s| s.parse().unwrap()).unwrap_or(1);
    let wd: f64 = args.get(9).map(|s| s.parse().unwrap()).unwrap_or(0.0);
    let stack_per_press: usize = args.get(10).map(|s| s.parse().unwrap()).unwrap_or(1);
    let aug_copies: usize = args.get(11).map(|s| s.parse().unwrap()).unwrap_or(0);
    let s1_steps: usize = args.get(12).map(|s| s.parse().unwrap()).unwrap_or(0);

    let env = EnvConfig {
        height: size,
        width: size,
    };
    let mut tasks = vec![TaskKind::Press];
    tasks.extend(std::iter::repeat(TaskKind::Stack).take(stack_per_press));
    let mut ds = generate_dataset(&GenConfig {
        env,
        episodes: 500,
        seed: 1,
        tasks,
        chunk_size: 8,
        views,
    })
    .unwrap();
    if aug_copies > 0 {
        ds = augment_dataset(&ds, aug_copies, 99).unwrap();
        println!("augmented to {} episodes", ds.episodes.len());
    }
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
    if s1_steps > 0 {
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
                weight_decay: wd,
                total_steps: s1_steps,
                seed: 5,
                sample_with_replacement: true,
            },
            |_| {},
        )
        .unwrap();
        opt = AdamState::new(&params);
        println!("stage 1 done ({} steps)", s1_steps);
    }
    for (steps, lr, seed) in [(steps_a, lr_a, 3u64), (steps_b, lr_b, 4u64)] {
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
                batch_size: 8,
                accum_steps: 1,
                learning_rate: lr,
                weight_decay: wd,
                total_steps: steps,
                seed,
                sample_with_replacement: true,
            },
            |_| {},
        )
        .unwrap();
    }

    // Token accuracy on training frames, split by task.
    let dc = DecodeConfig::one_step();
    let counter = ForwardCounter::default();
    for kind in [TaskKind::Press, TaskKind::Stack] {
        let mut hit = 0usize;
        let mut tot = 0usize;
        let mut frames_seen = 0;
        for ((ep, frame), prepared) in ds.iter_frames().zip(frames.iter()) {
            if ep.kind != kind {
                continue;
            }
            let gt = prepared
                .sample(Modal::Action)
                .and_then(|s| s.target_gt.clone())
                .unwrap();
            let sample = space
                .assemble(
                    Modal::Action,
                    ContextInputs {
                        instruction: &ep.instruction,
                        description: None,
                        state: Some(&frame.state),
                        views: &frame.views,
                    },
                )
                .unwrap();
            let out = decode_block(&params, &sample, &dc, &space.vocab, &counter).unwrap();
            let mut miss: Vec<String> = Vec::new();
            for (i, (a, b)) in out.tokens.iter().zip(gt.iter()).enumerate() {
                tot += 1;
                if a == b {
                    hit += 1;
                } else {
                    miss.push(format!("s{}d{} {}->{}", i / 3, i % 3, b, a));
                }
            }
            if !miss.is_empty() && frames_seen < 12 && kind == TaskKind::Stack {
                println!("  miss[{}]: {}", frames_seen, miss.join(" "));
            }
            frames_seen += 1;
            if frames_seen >= 40 {
                break;
            }
        }
        println!(
            "{} train token acc: {}/{} = {:.3}",
            kind.name(),
            hit,
            tot,
            hit as f64 / tot as f64
        );
    }

    // Trace two stack rollouts on held-out seeds.
    let policy = Policy {
        params,
        space: space.clone(),
        env,
    };
    for kind in [TaskKind::Press, TaskKind::Stack] {
        let eval = success_rate(&policy, kind, 100, 424242, &RolloutOptions::default()).unwrap();
        println!("{}: {}/{} success", kind.name(), eval.successes, eval.trials);
    }
    for trial in 0..2u64 {
        let seed = derive_seed(424242, trial);
        let (mut state, task) = env.reset(seed, TaskKind::Stack).unwrap();
        println!("== stack trial {} seed {:#x}: {}", trial, seed, task.instruction);
        println!(
            "  objects: mover at ({},{}) color {}, base at ({},{}) color {}",
            state.objects[0].row,
            state.objects[0].col,
            state.objects[0].color,
            state.objects[1].row,
            state.objects[1].col,
            state.objects[1].color
        );
        for chunk in 0..6 {
            let imgs: Vec<_> = (0..space.layout.views)
                .map(|v| env.render(&state, v).unwrap())
                .collect();
            show(&imgs[0]);
            let sample = space
                .assemble(
                    Modal::Action,
                    ContextInputs {
                        instruction: &task.instruction,
                        description: None,
                        state: Some(&state.proprio()),
                        views: &imgs,
                    },
                )
                .unwrap();
            let out = decode_block(&policy.params, &sample, &dc, &space.vocab, &counter).unwrap();
            let acts = space
                .action_quantizer
                .decode_chunk(&out.tokens, &space.vocab)
                .unwrap();
            print!("  chunk {}:", chunk);
            for step_acts in acts.chunks(3) {
                print!(
                    " [{:+.0},{:+.0},{:+.0}]",
                    step_acts[0], step_acts[1], step_acts[2]
                );
            }
            println!();
            for a in acts.chunks(3) {
                state = env.step(&state, a).unwrap();
                if mmp_core::gridworld::is_success(&state, &task) {
                    break;
                }
            }
            println!(
                "  grip ({:.1},{:.1}) closed {} held {:?}",
                state.grip_row, state.grip_col, state.closed, state.held
            );
            if mmp_core::gridworld::is_success(&state, &task) {
                println!("  SUCCESS");
                break;
            }
        }
    }
}
