//! Expert dataset generation and the on-disk dataset format.
//!
//! Each episode is an expert rollout sliced into fixed-size action chunks.
//! A frame captures what the policy will see at train time: rendered views
//! and proprioception at the chunk start, the ground-truth action chunk
//! (last chunk padded by repeating the final action), a templated language
//! annotation, and the image the world shows after the chunk runs.
//!
//! Files are a magic/version header, a JSON manifest, length-prefixed
//! little-endian episode records and a trailing SHA-256 of everything
//! before it, so truncation or bit flips surface as corruption before any
//! record is parsed.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};
use crate::vocab::PaletteImage;

use super::{
    completed_subtasks, expert_rollout, is_success, EnvConfig, TaskKind, TaskSpec, WorldState,
    ACTION_DIMS, COLOR_NAMES, OBJECT_COLORS, PALETTE_MIN, STATE_DIMS,
};

const MAGIC: &[u8; 4] = b"MPDS";
const VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

const ANNOT_LEAD: &str = "My task is ";
const ANNOT_PLAN: &str = " I need to finish this task by ";
const ANNOT_HIST: &str = " Currently, I have finished ";
const ANNOT_NEXT: &str = " So now I should continue to ";

/// The four slots of the fixed annotation template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationFields {
    pub instructions: String,
    pub planning_text: String,
    pub history_text: String,
    pub subtask_text: String,
}

impl AnnotationFields {
    /// Expand the fields into the one description string stored on disk.
    pub fn render(&self) -> String {
        format!(
            "{ANNOT_LEAD}{}{ANNOT_PLAN}{}{ANNOT_HIST}{}{ANNOT_NEXT}{}",
            self.instructions, self.planning_text, self.history_text, self.subtask_text
        )
    }

    /// Invert [`render`](Self::render). Returns `None` when the string does
    /// not follow the template. Field contents must not contain the template
    /// markers themselves; ours never do.
    pub fn parse(text: &str) -> Option<AnnotationFields> {
        let rest = text.strip_prefix(ANNOT_LEAD)?;
        let (instructions, rest) = rest.split_once(ANNOT_PLAN)?;
        let (planning_text, rest) = rest.split_once(ANNOT_HIST)?;
        let (history_text, subtask_text) = rest.split_once(ANNOT_NEXT)?;
        Some(AnnotationFields {
            instructions: instructions.to_string(),
            planning_text: planning_text.to_string(),
            history_text: history_text.to_string(),
            subtask_text: subtask_text.to_string(),
        })
    }

    /// Fields for a task with `done` subtasks already finished.
    pub fn for_task(task: &TaskSpec, done: usize) -> AnnotationFields {
        let history_text = if done == 0 {
            "nothing.".to_string()
        } else {
            format!("{}.", task.subtasks[..done].join(", "))
        };
        let subtask_text = match task.subtasks.get(done) {
            Some(s) => format!("{s}."),
            None => "finish the task.".to_string(),
        };
        AnnotationFields {
            instructions: task.instruction.clone(),
            planning_text: format!("{}.", task.subtasks.join(", ")),
            history_text,
            subtask_text,
        }
    }
}

/// One training frame: inputs at the chunk start plus every target block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub views: Vec<PaletteImage>,
    pub state: Vec<f32>,
    /// Flat row-major `chunk_size x ACTION_DIMS` expert actions.
    pub chunk: Vec<f32>,
    pub annotation: String,
    /// View 0 rendered after the chunk executes from this frame's state.
    pub future: PaletteImage,
}

/// One expert rollout plus the task it solved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub kind: TaskKind,
    pub seed: u64,
    pub instruction: String,
    pub subtasks: Vec<String>,
    pub success: bool,
    pub frames: Vec<Frame>,
}

/// Dataset-wide facts a reader needs before touching any record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub height: u32,
    pub width: u32,
    pub views: u32,
    pub state_dims: u32,
    pub action_dims: u32,
    pub chunk_size: u32,
    /// Exclusive upper bound on cell values appearing in the images.
    pub palette: u32,
    pub tasks: Vec<TaskKind>,
    pub episodes: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn frame_count(&self) -> usize {
        self.episodes.iter().map(|e| e.frames.len()).sum()
    }

    pub fn iter_frames(&self) -> impl Iterator<Item = (&Episode, &Frame)> {
        self.episodes
            .iter()
            .flat_map(|e| e.frames.iter().map(move |f| (e, f)))
    }

    /// Per-dimension action samples across all chunks, for quantizer fits.
    pub fn action_dim_samples(&self) -> Vec<Vec<f32>> {
        let mut dims = vec![Vec::new(); ACTION_DIMS];
        for (_, frame) in self.iter_frames() {
            for step in frame.chunk.chunks_exact(ACTION_DIMS) {
                for (d, &v) in step.iter().enumerate() {
                    dims[d].push(v);
                }
            }
        }
        dims
    }

    /// Per-dimension proprioception samples, for the state quantizer fit.
    pub fn state_dim_samples(&self) -> Vec<Vec<f32>> {
        let mut dims = vec![Vec::new(); STATE_DIMS];
        for (_, frame) in self.iter_frames() {
            for (d, &v) in frame.state.iter().enumerate() {
                dims[d].push(v);
            }
        }
        dims
    }
}

/// Everything that determines a generated dataset, bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub env: EnvConfig,
    pub episodes: usize,
    pub seed: u64,
    /// Episode `i` runs `tasks[i % tasks.len()]`; repeats skew the mix.
    pub tasks: Vec<TaskKind>,
    pub chunk_size: usize,
    /// Rendered views per frame: 1 (scene) or 2 (scene + goal overlay).
    pub views: usize,
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        if self.episodes == 0 {
            return Err(Error::Config("need at least one episode".into()));
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("task mix is empty".into()));
        }
        if self.chunk_size == 0 || self.chunk_size > 64 {
            return Err(Error::Config(format!(
                "chunk size {} out of range 1..=64",
                self.chunk_size
            )));
        }
        if self.views == 0 || self.views > 2 {
            return Err(Error::Config(format!(
                "{} views out of range 1..=2",
                self.views
            )));
        }
        Ok(())
    }
}

/// Roll the expert on each episode seed and slice frames. The output is a
/// pure function of the config.
pub fn generate_dataset(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut episodes = Vec::with_capacity(cfg.episodes);
    for ep in 0..cfg.episodes {
        let kind = cfg.tasks[ep % cfg.tasks.len()];
        let seed = derive_seed(cfg.seed, ep as u64);
        episodes.push(generate_episode(cfg, kind, seed)?);
    }
    Ok(Dataset {
        manifest: DatasetManifest {
            height: cfg.env.height,
            width: cfg.env.width,
            views: cfg.views as u32,
            state_dims: STATE_DIMS as u32,
            action_dims: ACTION_DIMS as u32,
            chunk_size: cfg.chunk_size as u32,
            palette: PALETTE_MIN as u32,
            tasks: cfg.tasks.clone(),
            episodes: cfg.episodes as u64,
            seed: cfg.seed,
        },
        episodes,
    })
}

fn generate_episode(cfg: &GenConfig, kind: TaskKind, seed: u64) -> Result<Episode> {
    let (start, task) = cfg.env.reset(seed, kind)?;
    let (states, actions) = expert_rollout(&cfg.env, start, &task)?;

    let mut frames = Vec::new();
    for chunk_start in (0..actions.len()).step_by(cfg.chunk_size) {
        let state = &states[chunk_start];
        let views = (0..cfg.views)
            .map(|v| cfg.env.render(state, v))
            .collect::<Result<Vec<_>>>()?;

        let end = (chunk_start + cfg.chunk_size).min(actions.len());
        let mut chunk_actions: Vec<[f32; ACTION_DIMS]> = actions[chunk_start..end].to_vec();
        let last = *chunk_actions.last().expect("chunk slices are non-empty");
        chunk_actions.resize(cfg.chunk_size, last);

        // The future view comes from actually executing the stored chunk,
        // padding included, so it stays an oracle for what training saw.
        let mut sim = state.clone();
        for a in &chunk_actions {
            sim = cfg.env.step(&sim, a)?;
        }
        let future = cfg.env.render(&sim, 0)?;

        let annotation =
            AnnotationFields::for_task(&task, completed_subtasks(state, &task)).render();

        frames.push(Frame {
            views,
            state: state.proprio().to_vec(),
            chunk: chunk_actions.iter().flatten().copied().collect(),
            annotation,
            future,
        });
    }

    Ok(Episode {
        kind,
        seed,
        instruction: task.instruction.clone(),
        subtasks: task.subtasks.clone(),
        success: is_success(states.last().unwrap(), &task),
        frames,
    })
}

/// Replace color words in template text under `perm`, simultaneously.
///
/// Single left-to-right scan, so a replacement can never be re-replaced
/// even when the permutation maps one color name onto another.
fn recolor_text(text: &str, perm: &[usize; 5]) -> String {
    let mut out = String::with_capacity(text.len() + 8);
    let mut rest = text;
    'scan: while !rest.is_empty() {
        for (i, name) in COLOR_NAMES.iter().enumerate() {
            if let Some(tail) = rest.strip_prefix(name) {
                out.push_str(COLOR_NAMES[perm[i]]);
                rest = tail;
                continue 'scan;
            }
        }
        let ch = rest.chars().next().unwrap();
        out.push(ch);
        rest = &rest[ch.len_utf8()..];
    }
    out
}

fn recolor_task(task: &TaskSpec, perm: &[usize; 5]) -> TaskSpec {
    TaskSpec {
        kind: task.kind,
        instruction: recolor_text(&task.instruction, perm),
        subtasks: task.subtasks.iter().map(|s| recolor_text(s, perm)).collect(),
    }
}

fn transform_state(state: &WorldState, dr: i32, dc: i32, perm: &[usize; 5]) -> WorldState {
    let shift_u32 = |v: u32, d: i32| (v as i64 + d as i64) as u32;
    WorldState {
        grip_row: state.grip_row + dr as f32,
        grip_col: state.grip_col + dc as f32,
        closed: state.closed,
        held: state.held,
        objects: state
            .objects
            .iter()
            .map(|o| super::Object {
                row: shift_u32(o.row, dr),
                col: shift_u32(o.col, dc),
                color: OBJECT_COLORS[perm[(o.color - OBJECT_COLORS[0]) as usize]],
            })
            .collect(),
        goals: state
            .goals
            .iter()
            .map(|&(r, c)| (shift_u32(r, dr), shift_u32(c, dc)))
            .collect(),
    }
}

/// Expert dynamics are translation-equivariant and ignore colors, so a
/// stored episode stays a perfect demonstration when every position shifts
/// by the same offset and object colors are permuted (with the instruction
/// and annotations rewritten to match). Everything is re-derived through
/// the real renderer and simulator from the transformed states.
pub fn augment_episode(
    env: &EnvConfig,
    ep: &Episode,
    dr: i32,
    dc: i32,
    perm: &[usize; 5],
) -> Result<Episode> {
    let views = ep.frames.first().map(|f| f.views.len()).unwrap_or(1);
    let (start, task) = env.reset(ep.seed, ep.kind)?;
    let task = recolor_task(&task, perm);

    let in_grid = |s: &WorldState| {
        let cell_ok = |r: u32, c: u32| r < env.height && c < env.width;
        s.grip_row >= 0.0
            && s.grip_col >= 0.0
            && s.grip_row <= (env.height - 1) as f32
            && s.grip_col <= (env.width - 1) as f32
            && s.objects.iter().all(|o| cell_ok(o.row, o.col))
            && s.goals.iter().all(|&(r, c)| cell_ok(r, c))
    };

    let mut state = transform_state(&start, dr, dc, perm);
    let mut frames = Vec::with_capacity(ep.frames.len());
    for frame in &ep.frames {
        if !in_grid(&state) {
            return Err(Error::Domain(format!(
                "shift ({dr}, {dc}) pushes the episode off the grid"
            )));
        }
        let rendered = (0..views)
            .map(|v| env.render(&state, v))
            .collect::<Result<Vec<_>>>()?;
        let annotation =
            AnnotationFields::for_task(&task, completed_subtasks(&state, &task)).render();

        let mut sim = state.clone();
        for action in frame.chunk.chunks_exact(ACTION_DIMS) {
            sim = env.step(&sim, action)?;
            if !in_grid(&sim) {
                return Err(Error::Domain(format!(
                    "shift ({dr}, {dc}) pushes the episode off the grid"
                )));
            }
        }
        frames.push(Frame {
            views: rendered,
            state: state.proprio().to_vec(),
            chunk: frame.chunk.clone(),
            annotation,
            future: env.render(&sim, 0)?,
        });
        state = sim;
    }

    Ok(Episode {
        kind: ep.kind,
        seed: ep.seed,
        instruction: task.instruction,
        subtasks: task.subtasks,
        success: ep.success,
        frames,
    })
}

/// Extent of everything the episode touches, tracked through replay so a
/// shift can be validated before transforming anything.
fn episode_extent(env: &EnvConfig, ep: &Episode) -> Result<(u32, u32, u32, u32)> {
    let (start, _) = env.reset(ep.seed, ep.kind)?;
    let (mut min_r, mut max_r, mut min_c, mut max_c) = (u32::MAX, 0u32, u32::MAX, 0u32);
    let mut absorb = |state: &WorldState| {
        let mut hit = |r: u32, c: u32| {
            min_r = min_r.min(r);
            max_r = max_r.max(r);
            min_c = min_c.min(c);
            max_c = max_c.max(c);
        };
        hit(state.grip_row.floor() as u32, state.grip_col.floor() as u32);
        hit(state.grip_row.ceil() as u32, state.grip_col.ceil() as u32);
        for o in &state.objects {
            hit(o.row, o.col);
        }
        for &(r, c) in &state.goals {
            hit(r, c);
        }
    };
    let mut state = start;
    absorb(&state);
    for frame in &ep.frames {
        for action in frame.chunk.chunks_exact(ACTION_DIMS) {
            state = env.step(&state, action)?;
            absorb(&state);
        }
    }
    Ok((min_r, max_r, min_c, max_c))
}

/// Appends `copies` transformed variants of every episode: a fresh uniform
/// color permutation and a uniform in-grid translation each time. Training
/// data only; variants do not correspond to generator seeds, so augmented
/// datasets should not be written where replay tools expect originals.
pub fn augment_dataset(ds: &Dataset, copies: usize, seed: u64) -> Result<Dataset> {
    let env = EnvConfig {
        height: ds.manifest.height,
        width: ds.manifest.width,
    };
    let mut episodes = ds.episodes.clone();
    episodes.reserve(ds.episodes.len() * copies);
    for (i, ep) in ds.episodes.iter().enumerate() {
        let (min_r, max_r, min_c, max_c) = episode_extent(&env, ep)?;
        let mut rng = rng_from_seed(derive_seed(seed, i as u64));
        for _ in 0..copies {
            let mut perm = [0usize, 1, 2, 3, 4];
            perm.shuffle(&mut rng);
            let dr = rng.random_range(-(min_r as i32)..=(env.height - 1 - max_r) as i32);
            let dc = rng.random_range(-(min_c as i32)..=(env.width - 1 - max_c) as i32);
            episodes.push(augment_episode(&env, ep, dr, dc, &perm)?);
        }
    }
    let mut manifest = ds.manifest.clone();
    manifest.episodes = episodes.len() as u64;
    Ok(Dataset { manifest, episodes })
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_lp_bytes(buf: &mut Vec<u8>, bytes: &[u8]) {
    push_u32(buf, bytes.len() as u32);
    buf.extend_from_slice(bytes);
}

/// Bounded little-endian reader over a checksum-verified byte range.
struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "record needs {n} bytes at offset {}, only {} left",
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

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn lp_bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn lp_str(&mut self) -> Result<String> {
        let bytes = self.lp_bytes()?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Format("string field is not valid UTF-8".into()))
    }

    fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f32()?);
        }
        Ok(out)
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn encode_image(buf: &mut Vec<u8>, img: &PaletteImage) {
    buf.extend_from_slice(&img.cells);
}

fn decode_image(r: &mut ByteReader, m: &DatasetManifest) -> Result<PaletteImage> {
    let cells = r.take((m.height * m.width) as usize)?.to_vec();
    if let Some(&bad) = cells.iter().find(|&&c| c as u32 >= m.palette) {
        return Err(Error::Format(format!(
            "cell value {bad} outside palette {}",
            m.palette
        )));
    }
    PaletteImage::from_cells(m.height, m.width, cells)
}

fn encode_episode(ep: &Episode) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.push(ep.kind as u8);
    push_u64(&mut buf, ep.seed);
    buf.push(ep.success as u8);
    push_lp_bytes(&mut buf, ep.instruction.as_bytes());
    push_u32(&mut buf, ep.subtasks.len() as u32);
    for s in &ep.subtasks {
        push_lp_bytes(&mut buf, s.as_bytes());
    }
    push_u32(&mut buf, ep.frames.len() as u32);
    for f in &ep.frames {
        buf.push(f.views.len() as u8);
        for v in &f.views {
            encode_image(&mut buf, v);
        }
        push_u32(&mut buf, f.state.len() as u32);
        for &x in &f.state {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        push_u32(&mut buf, f.chunk.len() as u32);
        for &x in &f.chunk {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        push_lp_bytes(&mut buf, f.annotation.as_bytes());
        encode_image(&mut buf, &f.future);
    }
    buf
}

fn decode_episode(record: &[u8], m: &DatasetManifest) -> Result<Episode> {
    let mut r = ByteReader::new(record);
    let kind = match r.u8()? {
        0 => TaskKind::Press,
        1 => TaskKind::Stack,
        2 => TaskKind::Sort,
        other => return Err(Error::Format(format!("unknown task kind byte {other}"))),
    };
    let seed = r.u64()?;
    let success = match r.u8()? {
        0 => false,
        1 => true,
        other => return Err(Error::Format(format!("bad success flag {other}"))),
    };
    let instruction = r.lp_str()?;
    let n_sub = r.u32()? as usize;
    let mut subtasks = Vec::with_capacity(n_sub);
    for _ in 0..n_sub {
        subtasks.push(r.lp_str()?);
    }
    let n_frames = r.u32()? as usize;
    let mut frames = Vec::with_capacity(n_frames);
    for _ in 0..n_frames {
        let n_views = r.u8()? as usize;
        if n_views != m.views as usize {
            return Err(Error::Format(format!(
                "frame has {n_views} views, manifest says {}",
                m.views
            )));
        }
        let mut views = Vec::with_capacity(n_views);
        for _ in 0..n_views {
            views.push(decode_image(&mut r, m)?);
        }
        let n_state = r.u32()? as usize;
        if n_state != m.state_dims as usize {
            return Err(Error::Format(format!(
                "frame has {n_state} state dims, manifest says {}",
                m.state_dims
            )));
        }
        let state = r.f32_vec(n_state)?;
        let n_chunk = r.u32()? as usize;
        if n_chunk != (m.chunk_size * m.action_dims) as usize {
            return Err(Error::Format(format!(
                "frame chunk has {n_chunk} values, manifest says {}",
                m.chunk_size * m.action_dims
            )));
        }
        let chunk = r.f32_vec(n_chunk)?;
        let annotation = r.lp_str()?;
        if AnnotationFields::parse(&annotation).is_none() {
            return Err(Error::Format(
                "frame annotation does not follow the template".into(),
            ));
        }
        let future = decode_image(&mut r, m)?;
        frames.push(Frame {
            views,
            state,
            chunk,
            annotation,
            future,
        });
    }
    if !r.done() {
        return Err(Error::Format(format!(
            "{} trailing bytes in episode record",
            record.len() - r.pos
        )));
    }
    Ok(Episode {
        kind,
        seed,
        instruction,
        subtasks,
        success,
        frames,
    })
}

impl Dataset {
    /// Serialize to the wire format, checksum included.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        push_u32(&mut buf, VERSION);
        let manifest = serde_json::to_vec(&self.manifest)
            .map_err(|e| Error::Format(format!("manifest encode failed: {e}")))?;
        push_u64(&mut buf, manifest.len() as u64);
        buf.extend_from_slice(&manifest);
        push_u64(&mut buf, self.episodes.len() as u64);
        for ep in &self.episodes {
            let record = encode_episode(ep);
            push_u64(&mut buf, record.len() as u64);
            buf.extend_from_slice(&record);
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        Ok(buf)
    }

    /// Parse and fully validate the wire format. The checksum is verified
    /// before any record is trusted, so flipped or missing bytes report as
    /// corruption rather than a confusing parse error.
    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        if bytes.len() < MAGIC.len() + 4 + CHECKSUM_LEN {
            return Err(Error::Corrupt(format!(
                "file of {} bytes is shorter than the fixed header",
                bytes.len()
            )));
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format("bad magic, not a dataset file".into()));
        }
        let body = &bytes[..bytes.len() - CHECKSUM_LEN];
        let stored = &bytes[bytes.len() - CHECKSUM_LEN..];
        let digest = Sha256::digest(body);
        if digest.as_slice() != stored {
            return Err(Error::Corrupt("dataset checksum mismatch".into()));
        }

        let mut r = ByteReader::new(&body[MAGIC.len()..]);
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "dataset version {version}, this build reads {VERSION}"
            )));
        }
        let manifest_len = r.u64()? as usize;
        let manifest: DatasetManifest = serde_json::from_slice(r.take(manifest_len)?)
            .map_err(|e| Error::Format(format!("manifest decode failed: {e}")))?;
        let n_episodes = r.u64()? as usize;
        if n_episodes != manifest.episodes as usize {
            return Err(Error::Format(format!(
                "file holds {n_episodes} episodes, manifest says {}",
                manifest.episodes
            )));
        }
        let mut episodes = Vec::with_capacity(n_episodes);
        for _ in 0..n_episodes {
            let len = r.u64()? as usize;
            episodes.push(decode_episode(r.take(len)?, &manifest)?);
        }
        if !r.done() {
            return Err(Error::Format("trailing bytes after last episode".into()));
        }
        Ok(Dataset { manifest, episodes })
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes()?)?)
    }

    pub fn read_file(path: &Path) -> Result<Dataset> {
        Dataset::from_bytes(&std::fs::read(path)?)
    }
}
