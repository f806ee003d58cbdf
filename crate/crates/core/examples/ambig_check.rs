// Scratch check for context-target ambiguity in generated datasets. Not part
// of the suite.

use std::collections::HashMap;

use mmp_core::gridworld::data::{generate_dataset, GenConfig};
use mmp_core::gridworld::{EnvConfig, TaskKind};
use mmp_core::train::{SpaceSpec, TokenSpace};
use mmp_core::vocab::{Modal, VocabConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let size: u32 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(4);
    let views: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(2);

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

    for kind in [TaskKind::Press, TaskKind::Stack] {
        // context tokens -> (gt tokens, frame description)
        let mut seen: HashMap<Vec<u32>, (Vec<u32>, String)> = HashMap::new();
        let mut total = 0usize;
        let mut conflict_frames = 0usize;
        let mut conflict_tokens = 0usize;
        let mut example_shown = false;
        for ((ep, _frame), prepared) in ds.iter_frames().zip(frames.iter()) {
            if ep.kind != kind {
                continue;
            }
            total += 1;
            let sample = prepared.sample(Modal::Action).unwrap();
            let gt = sample.target_gt.clone().unwrap();
            let mut ctx = sample.tokens[..sample.active_len()].to_vec();
            for i in sample.target_span.clone() {
                ctx[i] = 0;
            }
            let desc = format!("ep seed {:#x} {}", ep.seed, ep.instruction);
            match seen.entry(ctx) {
                std::collections::hash_map::Entry::Occupied(e) => {
                    let (prev_gt, prev_desc) = e.get();
                    if *prev_gt != gt {
                        conflict_frames += 1;
                        let diff = prev_gt
                            .iter()
                            .zip(gt.iter())
                            .filter(|(a, b)| a != b)
                            .count();
                        conflict_tokens += diff;
                        if !example_shown {
                            example_shown = true;
                            println!("  conflict: {} vs {}", prev_desc, desc);
                            println!("    gt a: {:?}", prev_gt);
                            println!("    gt b: {:?}", gt);
                        }
                    }
                }
                std::collections::hash_map::Entry::Vacant(v) => {
                    v.insert((gt, desc));
                }
            }
        }
        println!(
            "{}: {} frames, {} conflicting (sum diff tokens {})",
            kind.name(),
            total,
            conflict_frames,
            conflict_tokens
        );
    }
}
