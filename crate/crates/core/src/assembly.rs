//! Fixed-slot sequence assembly.
//!
//! Every training or inference sample is one token sequence:
//!
//! ```text
//! [ task token | views | instruction | description | state ] [ target block ] [ <pad>... ]
//! ```
//!
//! The context uses fixed-length slots with `<pad>` fill and no separators,
//! so the three modal contexts built from the same inputs are identical
//! except for the task token at position 0. The target block is fully
//! `<mask>`-filled until predictions are committed, and the whole sequence
//! is padded to `max_seq_len`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{
    ActionQuantizer, Modal, PaletteImage, PaletteImageCodec, TextCodec, TokenId, UnifiedVocab,
};

/// Slot sizes of the shared context, in tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextLayout {
    /// Number of camera views.
    pub views: usize,
    /// Tokens per view (grid height x width).
    pub view_tokens: usize,
    /// Instruction slot length.
    pub instruction_len: usize,
    /// Description slot length (0 disables the slot).
    pub description_len: usize,
    /// State slot length; one token per state dimension.
    pub state_len: usize,
    /// Total assembled sequence length including target block and padding.
    pub max_seq_len: usize,
}

impl ContextLayout {
    /// Context length: task token plus all slots.
    pub fn context_len(&self) -> usize {
        1 + self.views * self.view_tokens
            + self.instruction_len
            + self.description_len
            + self.state_len
    }

    pub fn validate(&self) -> Result<()> {
        if self.views == 0 || self.view_tokens == 0 {
            return Err(Error::Config("layout needs at least one nonempty view".into()));
        }
        if self.max_seq_len < self.context_len() {
            return Err(Error::Config(format!(
                "max_seq_len {} is smaller than the context ({} tokens)",
                self.max_seq_len,
                self.context_len()
            )));
        }
        Ok(())
    }
}

/// Target block lengths per modality.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    /// Text block length.
    pub text_len: usize,
    /// Image block length (grid height x width of the generated image).
    pub image_len: usize,
    /// Action dimensions per step.
    pub action_dims: usize,
    /// Steps per action chunk.
    pub chunk_size: usize,
}

impl BlockSpec {
    /// Action block length: one token per dimension per chunk step.
    pub fn action_len(&self) -> usize {
        self.action_dims * self.chunk_size
    }

    pub fn block_len(&self, modal: Modal) -> usize {
        match modal {
            Modal::Action => self.action_len(),
            Modal::Text => self.text_len,
            Modal::Image => self.image_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.text_len == 0
            || self.image_len == 0
            || self.action_dims == 0
            || self.chunk_size == 0
        {
            return Err(Error::Config("block lengths must all be nonzero".into()));
        }
        Ok(())
    }
}

/// The shared inputs a context is built from.
#[derive(Clone, Copy, Debug)]
pub struct ContextInputs<'a> {
    pub views: &'a [PaletteImage],
    pub instruction: &'a str,
    /// Optional scene description (e.g. a previously decoded annotation).
    pub description: Option<&'a str>,
    /// Optional proprioceptive state, quantized with the action-bin codec.
    pub state: Option<&'a [f32]>,
}

/// One fully assembled sequence ready for the model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AssembledSample {
    pub modal: Modal,
    /// Exactly `max_seq_len` tokens.
    pub tokens: Vec<TokenId>,
    /// Index interval of the target block.
    pub target_span: Range<usize>,
    /// Ground-truth block content; absent at inference.
    pub target_gt: Option<Vec<TokenId>>,
}

impl AssembledSample {
    /// Length of the non-padding prefix (context plus target block).
    pub fn active_len(&self) -> usize {
        self.target_span.end
    }

    /// Attaches the ground-truth block, validating length and modality.
    pub fn with_target(mut self, gt: Vec<TokenId>, vocab: &UnifiedVocab) -> Result<Self> {
        if gt.len() != self.target_span.len() {
            return Err(Error::Shape(format!(
                "target has {} tokens, block expects {}",
                gt.len(),
                self.target_span.len()
            )));
        }
        if let Some(&bad) = gt.iter().find(|&&id| !vocab.decodable(self.modal, id)) {
            return Err(Error::Modality(format!(
                "ground-truth token {bad} is not decodable under {}",
                self.modal.name()
            )));
        }
        self.target_gt = Some(gt);
        Ok(self)
    }
}

fn fill_slot(
    out: &mut Vec<TokenId>,
    content: &[TokenId],
    slot_len: usize,
    slot: &str,
    pad: TokenId,
) -> Result<()> {
    if content.len() > slot_len {
        return Err(Error::Overflow(format!(
            "{slot} needs {} tokens but its slot holds {slot_len}",
            content.len()
        )));
    }
    out.extend_from_slice(content);
    out.extend(std::iter::repeat(pad).take(slot_len - content.len()));
    Ok(())
}

/// Builds the fixed-slot context for one modality.
pub fn build_context(
    modal: Modal,
    inputs: ContextInputs<'_>,
    layout: &ContextLayout,
    vocab: &UnifiedVocab,
    image_codec: &PaletteImageCodec,
    state_quantizer: &ActionQuantizer,
) -> Result<Vec<TokenId>> {
    layout.validate()?;
    if image_codec.tokens_per_image() != layout.view_tokens {
        return Err(Error::Config(format!(
            "codec produces {} tokens per view, layout expects {}",
            image_codec.tokens_per_image(),
            layout.view_tokens
        )));
    }
    if inputs.views.len() != layout.views {
        return Err(Error::Shape(format!(
            "got {} views, layout expects {}",
            inputs.views.len(),
            layout.views
        )));
    }

    let text = TextCodec::new(vocab);
    let pad = vocab.pad();
    let mut tokens = Vec::with_capacity(layout.context_len());
    tokens.push(vocab.task_token(modal));
    for view in inputs.views {
        tokens.extend(image_codec.encode(view, vocab)?);
    }
    fill_slot(
        &mut tokens,
        &text.encode(inputs.instruction),
        layout.instruction_len,
        "instruction",
        pad,
    )?;
    let description = inputs.description.map(|d| text.encode(d)).unwrap_or_default();
    fill_slot(
        &mut tokens,
        &description,
        layout.description_len,
        "description",
        pad,
    )?;
    match inputs.state {
        Some(state) => {
            if state.len() != layout.state_len || state.len() != state_quantizer.dims() {
                return Err(Error::Shape(format!(
                    "state has {} values, layout expects {} (quantizer: {})",
                    state.len(),
                    layout.state_len,
                    state_quantizer.dims()
                )));
            }
            tokens.extend(state_quantizer.encode_chunk(state, 1, vocab)?);
        }
        None => tokens.extend(std::iter::repeat(pad).take(layout.state_len)),
    }

    debug_assert_eq!(tokens.len(), layout.context_len());
    Ok(tokens)
}

/// Appends the `<mask>`-filled target block and pads to `max_seq_len`.
pub fn attach_target_block(
    context: Vec<TokenId>,
    modal: Modal,
    blocks: &BlockSpec,
    layout: &ContextLayout,
    vocab: &UnifiedVocab,
) -> Result<AssembledSample> {
    if context.len() != layout.context_len() {
        return Err(Error::Shape(format!(
            "context has {} tokens, layout expects {}",
            context.len(),
            layout.context_len()
        )));
    }
    let block_len = blocks.block_len(modal);
    let start = context.len();
    let end = start + block_len;
    if end > layout.max_seq_len {
        return Err(Error::Capacity(format!(
            "context ({start}) plus {} block ({block_len}) exceeds max_seq_len {}",
            modal.name(),
            layout.max_seq_len
        )));
    }
    let mut tokens = context;
    tokens.extend(std::iter::repeat(vocab.mask()).take(block_len));
    let tokens = pad_to_max(tokens, layout, vocab)?;
    Ok(AssembledSample {
        modal,
        tokens,
        target_span: start..end,
        target_gt: None,
    })
}

/// Packs an annotation into a text target block: bytes then `<eos>` fill.
///
/// Trailing `<eos>` repetition (rather than `<pad>`) keeps every target
/// position a legal prediction, so the fixed-length block stays fully
/// trainable and decodable.
pub fn pack_text_target(
    annotation: &str,
    blocks: &BlockSpec,
    vocab: &UnifiedVocab,
) -> Result<Vec<TokenId>> {
    let bytes = TextCodec::new(vocab).encode(annotation);
    if bytes.len() >= blocks.text_len {
        return Err(Error::Overflow(format!(
            "annotation of {} bytes does not fit a {} token text block",
            bytes.len(),
            blocks.text_len
        )));
    }
    let mut block = bytes;
    block.resize(blocks.text_len, vocab.eos());
    Ok(block)
}

/// Pads a sequence with `<pad>` to exactly `max_seq_len`.
pub fn pad_to_max(
    mut tokens: Vec<TokenId>,
    layout: &ContextLayout,
    vocab: &UnifiedVocab,
) -> Result<Vec<TokenId>> {
    if tokens.len() > layout.max_seq_len {
        return Err(Error::Capacity(format!(
            "sequence of {} tokens exceeds max_seq_len {}",
            tokens.len(),
            layout.max_seq_len
        )));
    }
    tokens.resize(layout.max_seq_len, vocab.pad());
    Ok(tokens)
}
