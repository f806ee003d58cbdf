//! The unified discrete token space.
//!
//! One vocabulary covers every modality so a single output head can predict
//! text bytes, image cells and action bins alike. Layout, in id order:
//!
//! ```text
//! [ specials | text bytes (256) | image palette (V_img) | action bins (K) ]
//! ```
//!
//! Specials come first with fixed ids, the action codebook is appended last
//! so action-space size can change without renumbering text or image ids.

use serde::{Deserialize, Serialize};
use std::ops::Range;

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Number of reserved special tokens.
pub const NUM_SPECIALS: u32 = 6;
/// Number of text tokens (one per byte value).
pub const TEXT_TOKENS: u32 = 256;

/// Reserved tokens. The discriminant is the token id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u32)]
pub enum Special {
    /// Masked position awaiting prediction.
    Mask = 0,
    /// Filler; attention-masked as a key, never a prediction target.
    Pad = 1,
    /// End of text content inside a text block.
    Eos = 2,
    /// Task token selecting action prediction.
    Mm2a = 3,
    /// Task token selecting text prediction.
    Mmu = 4,
    /// Task token selecting image prediction.
    T2i = 5,
}

impl Special {
    pub const ALL: [Special; 6] = [
        Special::Mask,
        Special::Pad,
        Special::Eos,
        Special::Mm2a,
        Special::Mmu,
        Special::T2i,
    ];

    pub fn id(self) -> TokenId {
        self as TokenId
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Special::Mask => "<mask>",
            Special::Pad => "<pad>",
            Special::Eos => "<eos>",
            Special::Mm2a => "<|mm2a|>",
            Special::Mmu => "<|mmu|>",
            Special::T2i => "<|t2i|>",
        }
    }
}

/// Prediction modality. Selects the task token and the target block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modal {
    Action,
    Text,
    Image,
}

impl Modal {
    pub const ALL: [Modal; 3] = [Modal::Action, Modal::Text, Modal::Image];

    /// The task token placed at position 0 of the context.
    pub fn task_token(self) -> Special {
        match self {
            Modal::Action => Special::Mm2a,
            Modal::Text => Special::Mmu,
            Modal::Image => Special::T2i,
        }
    }

    /// Stable index used for per-modal arrays.
    pub fn index(self) -> usize {
        match self {
            Modal::Action => 0,
            Modal::Text => 1,
            Modal::Image => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modal::Action => "action",
            Modal::Text => "text",
            Modal::Image => "image",
        }
    }
}

/// What a token id denotes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Special(Special),
    Text,
    Image,
    Action,
}

/// Sizes of the configurable vocabulary sections.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabConfig {
    /// Image palette size V_img.
    pub image_tokens: u32,
    /// Action bins per dimension K.
    pub action_bins: u32,
}

impl VocabConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_tokens < 2 {
            return Err(Error::Config(format!(
                "image_tokens must be at least 2, got {}",
                self.image_tokens
            )));
        }
        if self.image_tokens > 256 {
            // Palette cells are stored as single bytes.
            return Err(Error::Config(format!(
                "image_tokens must be at most 256, got {}",
                self.image_tokens
            )));
        }
        if self.action_bins < 2 {
            return Err(Error::Config(format!(
                "action_bins must be at least 2, got {}",
                self.action_bins
            )));
        }
        Ok(())
    }
}

/// Concrete id layout built from a [`VocabConfig`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnifiedVocab {
    config: VocabConfig,
    text_start: TokenId,
    image_start: TokenId,
    action_start: TokenId,
    size: u32,
}

impl UnifiedVocab {
    pub fn new(config: VocabConfig) -> Result<Self> {
        config.validate()?;
        let text_start = NUM_SPECIALS;
        let image_start = text_start + TEXT_TOKENS;
        let action_start = image_start + config.image_tokens;
        let size = action_start + config.action_bins;
        Ok(UnifiedVocab {
            config,
            text_start,
            image_start,
            action_start,
            size,
        })
    }

    pub fn config(&self) -> VocabConfig {
        self.config
    }

    /// Total number of token ids.
    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn mask(&self) -> TokenId {
        Special::Mask.id()
    }

    pub fn pad(&self) -> TokenId {
        Special::Pad.id()
    }

    pub fn eos(&self) -> TokenId {
        Special::Eos.id()
    }

    pub fn task_token(&self, modal: Modal) -> TokenId {
        modal.task_token().id()
    }

    pub fn text_range(&self) -> Range<TokenId> {
        self.text_start..self.image_start
    }

    pub fn image_range(&self) -> Range<TokenId> {
        self.image_start..self.action_start
    }

    pub fn action_range(&self) -> Range<TokenId> {
        self.action_start..self.size
    }

    /// Classifies an id, or `None` if it is outside the vocabulary.
    pub fn kind(&self, id: TokenId) -> Option<TokenKind> {
        if id < NUM_SPECIALS {
            return Some(TokenKind::Special(Special::ALL[id as usize]));
        }
        if self.text_range().contains(&id) {
            Some(TokenKind::Text)
        } else if self.image_range().contains(&id) {
            Some(TokenKind::Image)
        } else if self.action_range().contains(&id) {
            Some(TokenKind::Action)
        } else {
            None
        }
    }

    /// Whether `id` may be produced when decoding under `modal`.
    ///
    /// Text decoding may emit `<eos>` to terminate early; action and image
    /// blocks are fixed-length and draw only from their own section.
    pub fn decodable(&self, modal: Modal, id: TokenId) -> bool {
        match modal {
            Modal::Action => self.action_range().contains(&id),
            Modal::Text => id == self.eos() || self.text_range().contains(&id),
            Modal::Image => self.image_range().contains(&id),
        }
    }
}

/// Byte-level text codec: token id = text_start + byte value.
#[derive(Clone, Copy, Debug)]
pub struct TextCodec {
    text: (TokenId, TokenId),
    eos: TokenId,
    pad: TokenId,
}

impl TextCodec {
    pub fn new(vocab: &UnifiedVocab) -> Self {
        let r = vocab.text_range();
        TextCodec {
            text: (r.start, r.end),
            eos: vocab.eos(),
            pad: vocab.pad(),
        }
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        self.encode_bytes(text.as_bytes())
    }

    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<TokenId> {
        bytes.iter().map(|&b| self.text.0 + b as TokenId).collect()
    }

    /// Decodes up to the first `<eos>`, skipping `<pad>`. Ids outside the
    /// text section (other than those two) are a modality violation.
    pub fn decode(&self, tokens: &[TokenId]) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(tokens.len());
        for &id in tokens {
            if id == self.eos {
                break;
            }
            if id == self.pad {
                continue;
            }
            if id < self.text.0 || id >= self.text.1 {
                return Err(Error::Modality(format!(
                    "token {id} is not a text byte, <eos> or <pad>"
                )));
            }
            out.push((id - self.text.0) as u8);
        }
        Ok(out)
    }

    /// Like [`decode`](Self::decode) but replaces invalid UTF-8 sequences.
    pub fn decode_lossy(&self, tokens: &[TokenId]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode(tokens)?).into_owned())
    }
}

/// Per-dimension value bounds used for normalization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub low: f32,
    pub high: f32,
}

impl Bounds {
    pub fn validate(&self) -> Result<()> {
        if !self.low.is_finite() || !self.high.is_finite() || self.low >= self.high {
            return Err(Error::Config(format!(
                "bounds must be finite with low < high, got [{}, {}]",
                self.low, self.high
            )));
        }
        Ok(())
    }
}

/// Uniform bin quantizer mapping continuous action values to token ids.
///
/// Values are normalized to `[-1, 1]` per dimension (clamping outliers),
/// split into `K` equal bins, and decoded back to bin centers. All bins of
/// all dimensions share the same `K` token ids at the end of the vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionQuantizer {
    bins: u32,
    bounds: Vec<Bounds>,
}

impl ActionQuantizer {
    pub fn new(bins: u32, bounds: Vec<Bounds>) -> Result<Self> {
        if bins < 2 {
            return Err(Error::Config(format!("need at least 2 bins, got {bins}")));
        }
        if bounds.is_empty() {
            return Err(Error::Config("quantizer needs at least one dimension".into()));
        }
        for b in &bounds {
            b.validate()?;
        }
        Ok(ActionQuantizer { bins, bounds })
    }

    /// Fits bounds from per-dimension samples using the 1st and 99th
    /// percentiles (nearest rank). Degenerate dimensions are widened to a
    /// unit interval around the observed value.
    pub fn from_samples(bins: u32, samples: &[Vec<f32>]) -> Result<Self> {
        let bounds = samples
            .iter()
            .enumerate()
            .map(|(dim, vals)| {
                if vals.is_empty() {
                    return Err(Error::Config(format!("no samples for dimension {dim}")));
                }
                if vals.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Domain(format!(
                        "non-finite sample in dimension {dim}"
                    )));
                }
                let mut sorted = vals.clone();
                sorted.sort_by(f32::total_cmp);
                let rank = |q: f64| {
                    let idx = (q * (sorted.len() - 1) as f64).round() as usize;
                    sorted[idx]
                };
                let (mut low, mut high) = (rank(0.01), rank(0.99));
                if high - low < 1e-6 {
                    low -= 0.5;
                    high += 0.5;
                }
                Ok(Bounds { low, high })
            })
            .collect::<Result<Vec<_>>>()?;
        ActionQuantizer::new(bins, bounds)
    }

    pub fn bins(&self) -> u32 {
        self.bins
    }

    pub fn dims(&self) -> usize {
        self.bounds.len()
    }

    pub fn bounds(&self) -> &[Bounds] {
        &self.bounds
    }

    /// Normalizes a raw value into `[-1, 1]`, clamping outliers.
    pub fn normalize(&self, dim: usize, value: f32) -> f64 {
        let Bounds { low, high } = self.bounds[dim];
        let scaled = 2.0 * (value as f64 - low as f64) / (high as f64 - low as f64) - 1.0;
        scaled.clamp(-1.0, 1.0)
    }

    /// Bin index of a raw value: `min(floor((norm + 1) / 2 * K), K - 1)`.
    pub fn bin_index(&self, dim: usize, value: f32) -> u32 {
        let unit = (self.normalize(dim, value) + 1.0) / 2.0;
        let idx = (unit * self.bins as f64).floor() as u32;
        idx.min(self.bins - 1)
    }

    /// Normalized center of a bin: `-1 + (2 * bin + 1) / K`.
    pub fn bin_center(&self, bin: u32) -> f64 {
        debug_assert!(bin < self.bins);
        -1.0 + (2.0 * bin as f64 + 1.0) / self.bins as f64
    }

    /// Raw value a bin decodes to (the denormalized bin center).
    pub fn decode_bin(&self, dim: usize, bin: u32) -> f32 {
        let Bounds { low, high } = self.bounds[dim];
        let unit = (self.bin_center(bin) + 1.0) / 2.0;
        (low as f64 + unit * (high as f64 - low as f64)) as f32
    }

    /// Encodes a flat row-major chunk (`steps` x `dims`) to token ids.
    pub fn encode_chunk(
        &self,
        actions: &[f32],
        steps: usize,
        vocab: &UnifiedVocab,
    ) -> Result<Vec<TokenId>> {
        let dims = self.dims();
        if actions.len() != steps * dims {
            return Err(Error::Shape(format!(
                "action chunk has {} values, expected {steps} steps x {dims} dims",
                actions.len()
            )));
        }
        if let Some(v) = actions.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite action value {v}")));
        }
        let start = vocab.action_range().start;
        Ok(actions
            .iter()
            .enumerate()
            .map(|(i, &v)| start + self.bin_index(i % dims, v))
            .collect())
    }

    /// Decodes action tokens back to a flat row-major chunk of bin centers.
    pub fn decode_chunk(&self, tokens: &[TokenId], vocab: &UnifiedVocab) -> Result<Vec<f32>> {
        let dims = self.dims();
        if tokens.len() % dims != 0 {
            return Err(Error::Shape(format!(
                "action block of {} tokens is not a multiple of {dims} dims",
                tokens.len()
            )));
        }
        let range = vocab.action_range();
        tokens
            .iter()
            .enumerate()
            .map(|(i, &id)| {
                if !range.contains(&id) {
                    return Err(Error::Modality(format!(
                        "token {id} is outside the action range {}..{}",
                        range.start, range.end
                    )));
                }
                Ok(self.decode_bin(i % dims, id - range.start))
            })
            .collect()
    }
}

/// A small indexed-color image; `cells` is row-major, one palette id per cell.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaletteImage {
    pub height: u32,
    pub width: u32,
    pub cells: Vec<u8>,
}

impl PaletteImage {
    /// A new image filled with palette entry 0.
    pub fn filled(height: u32, width: u32) -> Self {
        PaletteImage {
            height,
            width,
            cells: vec![0; (height * width) as usize],
        }
    }

    pub fn from_cells(height: u32, width: u32, cells: Vec<u8>) -> Result<Self> {
        if cells.len() != (height * width) as usize {
            return Err(Error::Shape(format!(
                "{}x{} image needs {} cells, got {}",
                height,
                width,
                height * width,
                cells.len()
            )));
        }
        Ok(PaletteImage {
            height,
            width,
            cells,
        })
    }

    pub fn cell(&self, row: u32, col: u32) -> u8 {
        self.cells[(row * self.width + col) as usize]
    }

    pub fn set(&mut self, row: u32, col: u32, value: u8) {
        self.cells[(row * self.width + col) as usize] = value;
    }
}

/// Maps palette images to image-section token ids (row-major scan).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaletteImageCodec {
    pub height: u32,
    pub width: u32,
    /// Number of palette entries; must not exceed the image token count.
    pub palette: u32,
}

impl PaletteImageCodec {
    pub fn tokens_per_image(&self) -> usize {
        (self.height * self.width) as usize
    }

    pub fn encode(&self, image: &PaletteImage, vocab: &UnifiedVocab) -> Result<Vec<TokenId>> {
        if image.height != self.height || image.width != self.width {
            return Err(Error::Shape(format!(
                "image is {}x{}, codec expects {}x{}",
                image.height, image.width, self.height, self.width
            )));
        }
        let start = vocab.image_range().start;
        image
            .cells
            .iter()
            .map(|&cell| {
                if cell as u32 >= self.palette {
                    return Err(Error::Domain(format!(
                        "palette index {cell} out of range (palette size {})",
                        self.palette
                    )));
                }
                let id = start + cell as u32;
                if !vocab.image_range().contains(&id) {
                    return Err(Error::Modality(format!(
                        "cell {cell} maps outside the image token section"
                    )));
                }
                Ok(id)
            })
            .collect()
    }

    pub fn decode(&self, tokens: &[TokenId], vocab: &UnifiedVocab) -> Result<PaletteImage> {
        if tokens.len() != self.tokens_per_image() {
            return Err(Error::Shape(format!(
                "image block of {} tokens, codec expects {}",
                tokens.len(),
                self.tokens_per_image()
            )));
        }
        let range = vocab.image_range();
        let cells = tokens
            .iter()
            .map(|&id| {
                if !range.contains(&id) {
                    return Err(Error::Modality(format!(
                        "token {id} is outside the image range {}..{}",
                        range.start, range.end
                    )));
                }
                Ok((id - range.start) as u8)
            })
            .collect::<Result<Vec<_>>>()?;
        PaletteImage::from_cells(self.height, self.width, cells)
    }
}
