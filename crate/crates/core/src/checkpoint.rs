//! Checkpoint files: model weights, optional optimizer state, and the
//! manifest needed to rebuild the full token interface at load time.
//!
//! Layout mirrors the dataset format: magic and version, a JSON manifest,
//! length-prefixed little-endian tensors in the canonical parameter order,
//! and a trailing SHA-256. The checksum is verified before anything else is
//! parsed, and tensor names and shapes are checked against the manifest's
//! model config so a file cannot silently load into the wrong architecture.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gridworld::EnvConfig;
use crate::model::{ModelConfig, ModelParams};
use crate::train::{AdamState, TokenSpace};
use crate::assembly::{BlockSpec, ContextLayout};
use crate::vocab::{ActionQuantizer, PaletteImageCodec, UnifiedVocab, VocabConfig};

const MAGIC: &[u8; 4] = b"MPCK";
const VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

/// Everything beyond raw weights that a consumer needs: the vocabulary
/// layout, codecs and quantizers that define the token interface, and the
/// environment the policy was trained for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub model: ModelConfig,
    pub vocab: VocabConfig,
    pub image_codec: PaletteImageCodec,
    pub action_quantizer: ActionQuantizer,
    pub state_quantizer: ActionQuantizer,
    pub layout: ContextLayout,
    pub blocks: BlockSpec,
    pub env: EnvConfig,
    /// Human-readable summary of the run that produced the weights.
    pub train_digest: String,
}

impl CheckpointManifest {
    /// Rebuild the token interface, revalidating internal consistency.
    pub fn token_space(&self) -> Result<TokenSpace> {
        let space = TokenSpace::from_parts(
            self.vocab,
            self.image_codec,
            self.action_quantizer.clone(),
            self.state_quantizer.clone(),
            self.layout,
            self.blocks,
        )?;
        if space.vocab.size() as usize != self.model.vocab_size {
            return Err(Error::Format(format!(
                "manifest vocabulary has {} ids but the model was built for {}",
                space.vocab.size(),
                self.model.vocab_size
            )));
        }
        Ok(space)
    }
}

/// An in-memory checkpoint, ready to serialize.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub opt: Option<AdamState>,
    pub manifest: CheckpointManifest,
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_tensor(buf: &mut Vec<u8>, name: &str, data: &[f32]) {
    push_u32(buf, name.len() as u32);
    buf.extend_from_slice(name.as_bytes());
    push_u64(buf, data.len() as u64);
    for &v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "checkpoint needs {n} bytes at offset {}, only {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not valid UTF-8".into()))
    }

    fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    /// Expect a tensor with exactly this name and length.
    fn tensor(&mut self, want_name: &str, want_len: usize) -> Result<Vec<f32>> {
        let name = self.str()?;
        if name != want_name {
            return Err(Error::Format(format!(
                "expected tensor '{want_name}', file has '{name}'"
            )));
        }
        let len = self.u64()? as usize;
        if len != want_len {
            return Err(Error::Format(format!(
                "tensor '{name}' has {len} values, model config needs {want_len}"
            )));
        }
        self.f32_vec(len)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        push_u32(&mut buf, VERSION);
        let manifest = serde_json::to_vec(&self.manifest)
            .map_err(|e| Error::Format(format!("manifest encode failed: {e}")))?;
        push_u64(&mut buf, manifest.len() as u64);
        buf.extend_from_slice(&manifest);

        let tensors = self.params.tensors();
        push_u32(&mut buf, tensors.len() as u32);
        for (name, data) in &tensors {
            push_tensor(&mut buf, name, data);
        }

        match &self.opt {
            None => buf.push(0),
            Some(opt) => {
                buf.push(1);
                push_u64(&mut buf, opt.step);
                for ((name, _), moment) in tensors.iter().zip(opt.m.iter()) {
                    push_tensor(&mut buf, name, moment);
                }
                for ((name, _), moment) in tensors.iter().zip(opt.v.iter()) {
                    push_tensor(&mut buf, name, moment);
                }
            }
        }

        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        Ok(buf)
    }

    /// Parse and validate. Checksum first (bit flips and truncation report
    /// as corruption), then manifest consistency, then tensor shapes.
    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < MAGIC.len() + 4 + CHECKSUM_LEN {
            return Err(Error::Corrupt(format!(
                "file of {} bytes is shorter than the fixed header",
                bytes.len()
            )));
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format("bad magic, not a checkpoint file".into()));
        }
        let body = &bytes[..bytes.len() - CHECKSUM_LEN];
        let stored = &bytes[bytes.len() - CHECKSUM_LEN..];
        if Sha256::digest(body).as_slice() != stored {
            return Err(Error::Corrupt("checkpoint checksum mismatch".into()));
        }

        let mut r = Reader {
            buf: &body[MAGIC.len()..],
            pos: 0,
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version}, this build reads {VERSION}"
            )));
        }
        let manifest_len = r.u64()? as usize;
        let manifest: CheckpointManifest = serde_json::from_slice(r.take(manifest_len)?)
            .map_err(|e| Error::Format(format!("manifest decode failed: {e}")))?;

        // The vocabulary must agree with the declared model dimensions
        // before any tensor is trusted.
        let vocab = UnifiedVocab::new(manifest.vocab)?;
        if vocab.size() as usize != manifest.model.vocab_size {
            return Err(Error::Format(format!(
                "manifest vocabulary has {} ids but tensors are shaped for {}",
                vocab.size(),
                manifest.model.vocab_size
            )));
        }

        let mut params = ModelParams::<f32>::zeros(manifest.model)?;
        let expected: Vec<(String, usize)> = params
            .tensors()
            .iter()
            .map(|(n, t)| (n.clone(), t.len()))
            .collect();
        let count = r.u32()? as usize;
        if count != expected.len() {
            return Err(Error::Format(format!(
                "file has {count} tensors, model config needs {}",
                expected.len()
            )));
        }
        for (slot, (name, len)) in params.tensors_mut().into_iter().zip(expected.iter()) {
            *slot.1 = r.tensor(name, *len)?;
        }

        let opt = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let mut m = Vec::with_capacity(expected.len());
                for (name, len) in &expected {
                    m.push(r.tensor(name, *len)?);
                }
                let mut v = Vec::with_capacity(expected.len());
                for (name, len) in &expected {
                    v.push(r.tensor(name, *len)?);
                }
                Some(AdamState { step, m, v })
            }
            other => {
                return Err(Error::Format(format!(
                    "optimizer presence flag must be 0 or 1, got {other}"
                )))
            }
        };
        if r.pos != r.buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint payload",
                r.buf.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            params,
            opt,
            manifest,
        })
    }
}

/// Write a checkpoint, validating that the manifest matches the weights.
pub fn save_checkpoint(
    params: &ModelParams<f32>,
    opt: Option<&AdamState>,
    manifest: &CheckpointManifest,
    path: &Path,
) -> Result<()> {
    if params.cfg != manifest.model {
        return Err(Error::Config(
            "manifest model config differs from the parameters being saved".into(),
        ));
    }
    manifest.token_space().map_err(|e| match e {
        Error::Format(m) => Error::Config(m),
        other => other,
    })?;
    if let Some(o) = opt {
        if !o.matches(params) {
            return Err(Error::Shape(
                "optimizer state does not match parameter shapes".into(),
            ));
        }
    }
    let ckpt = Checkpoint {
        params: params.clone(),
        opt: opt.cloned(),
        manifest: manifest.clone(),
    };
    Ok(std::fs::write(path, ckpt.to_bytes()?)?)
}

/// Read a checkpoint back; see [`Checkpoint::from_bytes`] for validation.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
