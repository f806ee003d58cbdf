//! Block decoding strategies.
//!
//! Actions decode in a single forward pass: the block is fully masked, the
//! model predicts every position simultaneously, and each position takes the
//! argmax of its restricted logits. Text and images use iterative re-mask
//! decoding: at each step all masked positions are predicted, only the most
//! confident predictions are kept, and the rest are re-masked for the next
//! step. The number of tokens left masked after step k follows the noise
//! schedule: `n_k = ceil(L * f(1 - k/T))`, with `n_T = 0`.
//!
//! Temperature is fixed at 0 (argmax) and there is no classifier-free
//! guidance, so confidence-selected decoding is fully deterministic.

use serde::{Deserialize, Serialize};

use crate::assembly::AssembledSample;
use crate::diffusion::MaskSchedule;
use crate::error::{Error, Result};
use crate::model::{forward_counted, restricted_argmax, ForwardCounter, ModelParams};
use crate::nn::Scalar;
use crate::rng::rng_from_seed;
use crate::vocab::{TokenId, UnifiedVocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    OneStep,
    Remask,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Keep the highest-confidence predictions (deterministic).
    Confidence,
    /// Keep a uniformly random subset (deterministic per seed).
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    /// Number of re-mask steps T.
    pub steps: usize,
    pub schedule: MaskSchedule,
    pub selection: Selection,
    /// Seed for random selection; unused under confidence selection.
    pub seed: u64,
}

impl DecodeConfig {
    pub fn one_step() -> Self {
        DecodeConfig {
            strategy: Strategy::OneStep,
            steps: 1,
            schedule: MaskSchedule::Cosine,
            selection: Selection::Confidence,
            seed: 0,
        }
    }

    pub fn remask(steps: usize, schedule: MaskSchedule) -> Self {
        DecodeConfig {
            strategy: Strategy::Remask,
            steps,
            schedule,
            selection: Selection::Confidence,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("decode steps must be at least 1".into()));
        }
        if self.strategy == Strategy::OneStep && self.steps != 1 {
            return Err(Error::Config(format!(
                "one-step decoding requires steps = 1, got {}",
                self.steps
            )));
        }
        Ok(())
    }
}

/// A decoded block plus the number of forward passes it cost.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecodeOut {
    pub tokens: Vec<TokenId>,
    pub forwards: u64,
}

/// Remaining-masked counts n_1..n_T for a block of length `len`.
///
/// `n_k = ceil(len * f(1 - k/T))` with the final entry forced to zero, so
/// the per-step unmask counts `n_(k-1) - n_k` always sum to `len`.
pub fn unmask_plan(len: usize, steps: usize, schedule: MaskSchedule) -> Result<Vec<usize>> {
    if len == 0 || steps == 0 {
        return Err(Error::Shape(format!(
            "unmask plan needs len >= 1 and steps >= 1, got {len}, {steps}"
        )));
    }
    let mut plan = Vec::with_capacity(steps);
    let mut prev = len;
    for k in 1..=steps {
        let remaining = if k == steps {
            0
        } else {
            let f = schedule.eval(1.0 - k as f64 / steps as f64)?;
            ((len as f64 * f).ceil() as usize).min(prev)
        };
        plan.push(remaining);
        prev = remaining;
    }
    Ok(plan)
}

fn require_fully_masked(sample: &AssembledSample, vocab: &UnifiedVocab) -> Result<()> {
    let block = &sample.tokens[sample.target_span.clone()];
    if block.iter().any(|&id| id != vocab.mask()) {
        return Err(Error::State(
            "decode requires a fully masked target block".into(),
        ));
    }
    Ok(())
}

/// Decodes the whole block in exactly one forward pass.
pub fn one_step_decode<T: Scalar>(
    params: &ModelParams<T>,
    sample: &AssembledSample,
    vocab: &UnifiedVocab,
    counter: &ForwardCounter,
) -> Result<DecodeOut> {
    require_fully_masked(sample, vocab)?;
    let span = sample.target_span.clone();
    // Trailing padding is attention-masked out as keys, so forwarding only
    // the active prefix produces identical logits at lower cost.
    let active = &sample.tokens[..span.end];
    let before = counter.get();
    let logits = forward_counted(params, active, counter)?;
    let v = params.cfg.vocab_size;
    let tokens = span
        .clone()
        .map(|pos| restricted_argmax(&logits[pos * v..(pos + 1) * v], sample.modal, vocab).0)
        .collect();
    Ok(DecodeOut {
        tokens,
        forwards: counter.get() - before,
    })
}

/// Iterative low-confidence re-mask decoding; the block state after every
/// step is also returned (step snapshots, ending in the final block).
pub fn remask_decode_traced<T: Scalar>(
    params: &ModelParams<T>,
    sample: &AssembledSample,
    cfg: &DecodeConfig,
    vocab: &UnifiedVocab,
    counter: &ForwardCounter,
) -> Result<(DecodeOut, Vec<Vec<TokenId>>)> {
    cfg.validate()?;
    require_fully_masked(sample, vocab)?;
    let span = sample.target_span.clone();
    let len = span.len();
    let plan = unmask_plan(len, cfg.steps, cfg.schedule)?;

    let mut seq = sample.tokens[..span.end].to_vec();
    let mut committed = vec![false; len];
    let mut rng = rng_from_seed(cfg.seed);
    let v = params.cfg.vocab_size;
    let before = counter.get();
    let mut snapshots = Vec::with_capacity(cfg.steps);

    let mut remaining = len;
    for &target_remaining in &plan {
        let logits = forward_counted(params, &seq, counter)?;
        // Predict every currently masked position.
        let mut candidates: Vec<(usize, TokenId, f64)> = (0..len)
            .filter(|&i| !committed[i])
            .map(|i| {
                let pos = span.start + i;
                let (id, conf) =
                    restricted_argmax(&logits[pos * v..(pos + 1) * v], sample.modal, vocab);
                (i, id, conf)
            })
            .collect();

        let commit_count = remaining - target_remaining;
        match cfg.selection {
            Selection::Confidence => {
                // Highest confidence first; ties broken by lower position.
                candidates.sort_unstable_by(|a, b| {
                    b.2.partial_cmp(&a.2)
                        .expect("confidences are finite")
                        .then(a.0.cmp(&b.0))
                });
            }
            Selection::Random => {
                // Partial Fisher-Yates: the first commit_count entries
                // become a uniform sample without replacement.
                use rand::Rng;
                for i in 0..commit_count.min(candidates.len().saturating_sub(1)) {
                    let j = rng.random_range(i..candidates.len());
                    candidates.swap(i, j);
                }
            }
        }
        for &(i, id, _) in candidates.iter().take(commit_count) {
            seq[span.start + i] = id;
            committed[i] = true;
        }
        remaining = target_remaining;
        snapshots.push(seq[span.start..span.end].to_vec());
    }

    debug_assert!(committed.iter().all(|&c| c));
    Ok((
        DecodeOut {
            tokens: seq[span.start..span.end].to_vec(),
            forwards: counter.get() - before,
        },
        snapshots,
    ))
}

/// Iterative re-mask decoding (see [`remask_decode_traced`]).
pub fn remask_decode<T: Scalar>(
    params: &ModelParams<T>,
    sample: &AssembledSample,
    cfg: &DecodeConfig,
    vocab: &UnifiedVocab,
    counter: &ForwardCounter,
) -> Result<DecodeOut> {
    Ok(remask_decode_traced(params, sample, cfg, vocab, counter)?.0)
}

/// Dispatches on the configured strategy.
pub fn decode_block<T: Scalar>(
    params: &ModelParams<T>,
    sample: &AssembledSample,
    cfg: &DecodeConfig,
    vocab: &UnifiedVocab,
    counter: &ForwardCounter,
) -> Result<DecodeOut> {
    cfg.validate()?;
    match cfg.strategy {
        Strategy::OneStep => one_step_decode(params, sample, vocab, counter),
        Strategy::Remask => remask_decode(params, sample, cfg, vocab, counter),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::{
        attach_target_block, build_context, BlockSpec, ContextInputs, ContextLayout,
    };
    use crate::model::{init_params, ModelConfig};
    use crate::vocab::{ActionQuantizer, Bounds, Modal, PaletteImage, PaletteImageCodec, VocabConfig};
    use rand::Rng;

    struct Fixture {
        vocab: UnifiedVocab,
        layout: ContextLayout,
        blocks: BlockSpec,
        codec: PaletteImageCodec,
        quant: ActionQuantizer,
        params: ModelParams<f32>,
    }

    fn fixture() -> Fixture {
        let vocab = UnifiedVocab::new(VocabConfig {
            image_tokens: 16,
            action_bins: 32,
        })
        .unwrap();
        let layout = ContextLayout {
            views: 1,
            view_tokens: 4,
            instruction_len: 4,
            description_len: 0,
            state_len: 2,
            max_seq_len: 19,
        };
        let blocks = BlockSpec {
            text_len: 8,
            image_len: 4,
            action_dims: 2,
            chunk_size: 2,
        };
        let codec = PaletteImageCodec {
            height: 2,
            width: 2,
            palette: 16,
        };
        let quant =
            ActionQuantizer::new(32, vec![Bounds { low: -1.0, high: 1.0 }; 2]).unwrap();
        let params = init_params::<f32>(ModelConfig {
            layers: 1,
            heads: 2,
            model_dim: 8,
            ff_dim: 16,
            vocab_size: vocab.size() as usize,
            max_seq_len: 19,
            seed: 7,
        })
        .unwrap();
        Fixture {
            vocab,
            layout,
            blocks,
            codec,
            quant,
            params,
        }
    }

    fn sample(fx: &Fixture, modal: Modal, image_fill: u8) -> AssembledSample {
        let views = vec![PaletteImage::from_cells(2, 2, vec![image_fill; 4]).unwrap()];
        let ctx = build_context(
            modal,
            ContextInputs {
                views: &views,
                instruction: "go",
                description: None,
                state: Some(&[0.25, -0.5]),
            },
            &fx.layout,
            &fx.vocab,
            &fx.codec,
            &fx.quant,
        )
        .unwrap();
        attach_target_block(ctx, modal, &fx.blocks, &fx.layout, &fx.vocab).unwrap()
    }

    #[test]
    fn plan_single_step_unmasks_everything() {
        assert_eq!(unmask_plan(24, 1, MaskSchedule::Cosine).unwrap(), vec![0]);
    }

    #[test]
    fn plan_matches_hand_computed_sequences() {
        let cosine = unmask_plan(256, 6, MaskSchedule::Cosine).unwrap();
        assert_eq!(cosine, vec![248, 222, 182, 128, 67, 0]);
        let mut prev = 256;
        let unmasks: Vec<usize> = cosine
            .iter()
            .map(|&n| {
                let u = prev - n;
                prev = n;
                u
            })
            .collect();
        assert_eq!(unmasks, vec![8, 26, 40, 54, 61, 67]);
        assert_eq!(unmasks.iter().sum::<usize>(), 256);

        let linear = unmask_plan(256, 6, MaskSchedule::Linear).unwrap();
        assert_eq!(linear, vec![214, 171, 128, 86, 43, 0]);
    }

    #[test]
    fn plan_conserves_token_count() {
        let mut rng = crate::rng::rng_from_seed(14);
        for _ in 0..500 {
            let len = rng.random_range(1..400);
            let steps = rng.random_range(1..12);
            let schedule = if rng.random_bool(0.5) {
                MaskSchedule::Linear
            } else {
                MaskSchedule::Cosine
            };
            let plan = unmask_plan(len, steps, schedule).unwrap();
            assert_eq!(plan.len(), steps);
            assert_eq!(*plan.last().unwrap(), 0);
            let mut prev = len;
            let mut total = 0;
            for &n in &plan {
                assert!(n <= prev, "plan must be nonincreasing");
                total += prev - n;
                prev = n;
            }
            assert_eq!(total, len);
        }
    }

    #[test]
    fn one_step_uses_one_forward_and_stays_in_range() {
        let fx = fixture();
        for modal in Modal::ALL {
            let s = sample(&fx, modal, 3);
            let counter = ForwardCounter::new();
            let out = one_step_decode(&fx.params, &s, &fx.vocab, &counter).unwrap();
            assert_eq!(out.forwards, 1);
            assert_eq!(counter.get(), 1);
            assert_eq!(out.tokens.len(), fx.blocks.block_len(modal));
            assert!(out.tokens.iter().all(|&id| fx.vocab.decodable(modal, id)));
        }
    }

    #[test]
    fn one_step_is_deterministic() {
        let fx = fixture();
        let s = sample(&fx, Modal::Action, 5);
        let c = ForwardCounter::new();
        let a = one_step_decode(&fx.params, &s, &fx.vocab, &c).unwrap();
        let b = one_step_decode(&fx.params, &s, &fx.vocab, &c).unwrap();
        assert_eq!(a.tokens, b.tokens);
    }

    #[test]
    fn decode_rejects_partially_unmasked_blocks() {
        let fx = fixture();
        let mut s = sample(&fx, Modal::Action, 1);
        let start = s.target_span.start;
        s.tokens[start] = fx.vocab.action_range().start;
        let c = ForwardCounter::new();
        assert!(matches!(
            one_step_decode(&fx.params, &s, &fx.vocab, &c),
            Err(Error::State(_))
        ));
        assert!(matches!(
            remask_decode(&fx.params, &s, &DecodeConfig::remask(3, MaskSchedule::Cosine), &fx.vocab, &c),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn single_step_remask_equals_one_step() {
        let fx = fixture();
        for modal in Modal::ALL {
            let s = sample(&fx, modal, 9);
            let c = ForwardCounter::new();
            let one = one_step_decode(&fx.params, &s, &fx.vocab, &c).unwrap();
            let re = remask_decode(
                &fx.params,
                &s,
                &DecodeConfig::remask(1, MaskSchedule::Cosine),
                &fx.vocab,
                &c,
            )
            .unwrap();
            assert_eq!(one.tokens, re.tokens, "T=1 remask must be bit-identical");
        }
    }

    #[test]
    fn remask_spends_exactly_t_forwards() {
        let fx = fixture();
        let s = sample(&fx, Modal::Text, 2);
        for steps in [2usize, 4, 6] {
            let c = ForwardCounter::new();
            let out = remask_decode(
                &fx.params,
                &s,
                &DecodeConfig::remask(steps, MaskSchedule::Linear),
                &fx.vocab,
                &c,
            )
            .unwrap();
            assert_eq!(out.forwards, steps as u64);
            assert!(out.tokens.iter().all(|&id| id != fx.vocab.mask()));
        }
    }

    #[test]
    fn committed_tokens_are_never_remasked() {
        let fx = fixture();
        let mut rng = crate::rng::rng_from_seed(55);
        for trial in 0..200 {
            let modal = Modal::ALL[trial % 3];
            let s = sample(&fx, modal, (trial % 13) as u8);
            let steps = rng.random_range(2..6);
            let cfg = DecodeConfig {
                strategy: Strategy::Remask,
                steps,
                schedule: if trial % 2 == 0 { MaskSchedule::Cosine } else { MaskSchedule::Linear },
                selection: if trial % 5 == 0 { Selection::Random } else { Selection::Confidence },
                seed: trial as u64,
            };
            let c = ForwardCounter::new();
            let (out, snaps) = remask_decode_traced(&fx.params, &s, &cfg, &fx.vocab, &c).unwrap();
            for w in snaps.windows(2) {
                for (prev, next) in w[0].iter().zip(&w[1]) {
                    if *prev != fx.vocab.mask() {
                        assert_eq!(prev, next, "a committed token was re-masked");
                    }
                }
            }
            assert_eq!(snaps.last().unwrap(), &out.tokens);
            assert!(out.tokens.iter().all(|&id| fx.vocab.decodable(modal, id)));
        }
    }

    #[test]
    fn random_selection_is_seed_deterministic() {
        let fx = fixture();
        let s = sample(&fx, Modal::Image, 4);
        let mk = |seed| DecodeConfig {
            strategy: Strategy::Remask,
            steps: 3,
            schedule: MaskSchedule::Cosine,
            selection: Selection::Random,
            seed,
        };
        let c = ForwardCounter::new();
        let a = remask_decode(&fx.params, &s, &mk(11), &fx.vocab, &c).unwrap();
        let b = remask_decode(&fx.params, &s, &mk(11), &fx.vocab, &c).unwrap();
        assert_eq!(a.tokens, b.tokens);
    }

    #[test]
    fn config_validation() {
        let mut cfg = DecodeConfig::one_step();
        cfg.steps = 2;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = DecodeConfig::remask(0, MaskSchedule::Cosine);
        cfg.steps = 0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
