//! Run configuration: one TOML file with sectioned keys, overridable from
//! the command line. Precedence is flags > file > built-in defaults; the
//! effective config is printable with `mmp show-config` and normalizes to a
//! stable TOML rendering (load, emit, re-load is a fixed point).

use std::path::{Path, PathBuf};

use mmp_core::decode::{DecodeConfig, Selection, Strategy};
use mmp_core::diffusion::{LossWeights, MaskSchedule};
use mmp_core::error::{Error, Result};
use mmp_core::gridworld::data::GenConfig;
use mmp_core::gridworld::{EnvConfig, TaskKind};
use mmp_core::model::ModelConfig;
use mmp_core::train::{SpaceSpec, TrainConfig};
use mmp_core::vocab::VocabConfig;
use serde::{Deserialize, Serialize};

/// Environment variable consulted for a default config path when `--config`
/// is not given.
pub const CONFIG_ENV: &str = "MMP_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; sections with their own seed ignore it.
    pub seed: u64,
    pub vocab: VocabSection,
    pub layout: LayoutSection,
    pub blocks: BlocksSection,
    pub env: EnvSection,
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub decode: DecodeSection,
    pub eval: EvalSection,
    pub bench: BenchSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            vocab: VocabSection::default(),
            layout: LayoutSection::default(),
            blocks: BlocksSection::default(),
            env: EnvSection::default(),
            model: ModelSection::default(),
            data: DataSection::default(),
            train: TrainSection::default(),
            decode: DecodeSection::default(),
            eval: EvalSection::default(),
            bench: BenchSection::default(),
            paths: PathsSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabSection {
    /// Image sub-vocabulary size V_img (palette ids live below this).
    pub image_tokens: u32,
    /// Action quantization bins K.
    pub action_bins: u32,
}

impl Default for VocabSection {
    fn default() -> Self {
        VocabSection {
            image_tokens: 32,
            action_bins: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LayoutSection {
    /// Observation views per frame (1 = scene, 2 = scene + goal overlay).
    pub views: usize,
    /// Token slot for the instruction text.
    pub instruction_len: usize,
    /// Token slot for an optional scene description (0 disables it).
    pub description_len: usize,
    /// Text target block length.
    pub text_len: usize,
}

impl Default for LayoutSection {
    fn default() -> Self {
        LayoutSection {
            views: 1,
            instruction_len: 64,
            description_len: 0,
            text_len: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlocksSection {
    /// Actions predicted per chunk, fixed across training and inference.
    pub chunk_size: usize,
}

impl Default for BlocksSection {
    fn default() -> Self {
        BlocksSection { chunk_size: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSection {
    pub height: u32,
    pub width: u32,
}

impl Default for EnvSection {
    fn default() -> Self {
        EnvSection {
            height: 16,
            width: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    /// Weight initialization seed.
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            layers: 2,
            heads: 4,
            model_dim: 64,
            ff_dim: 256,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub episodes: usize,
    /// Dataset generation seed; episode i uses a sub-seed derived from it.
    pub seed: u64,
    /// Task mix, cycled over episodes.
    pub tasks: Vec<String>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            episodes: 500,
            seed: 1,
            tasks: vec!["press".into(), "stack".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// 1 = text + image pretraining, 2 = action fine-tuning.
    pub stage: u32,
    /// Modal loss weights (action, text, image).
    pub lambda: [f64; 3],
    pub batch_size: usize,
    /// Micro-batches fused into one optimizer step.
    pub accum_steps: usize,
    pub learning_rate: f64,
    /// Decoupled weight decay on matrices and embeddings; 0 disables it.
    pub weight_decay: f64,
    pub total_steps: usize,
    /// Seed for frame sampling and corruption noise.
    pub seed: u64,
    /// Sample frames with replacement; without, the deck is dealt once.
    pub sample_with_replacement: bool,
    /// Extra translated and recolored variants per episode, derived in
    /// memory before training; 0 trains on the dataset as stored.
    pub augment_copies: usize,
    /// Seed for augmentation shifts and color permutations.
    pub augment_seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            stage: 2,
            lambda: [1.0, 0.0, 0.0],
            batch_size: 8,
            accum_steps: 1,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            total_steps: 200,
            seed: 2,
            sample_with_replacement: true,
            augment_copies: 0,
            augment_seed: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeSection {
    /// "one-step" or "remask".
    pub strategy: String,
    /// Re-mask iteration count T (ignored by one-step).
    pub steps: usize,
    /// Re-mask keep schedule: "linear" or "cosine".
    pub schedule: String,
    /// Which predictions survive each re-mask round: "confidence" or
    /// "random".
    pub selection: String,
    /// Seed for random selection.
    pub seed: u64,
}

impl Default for DecodeSection {
    fn default() -> Self {
        DecodeSection {
            strategy: "one-step".into(),
            steps: 6,
            schedule: "cosine".into(),
            selection: "confidence".into(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Rollout trials per task.
    pub trials: usize,
    /// Base seed; trial i uses a sub-seed derived from it.
    pub seed: u64,
    pub tasks: Vec<String>,
    /// Frames scored for planning accuracy (0 skips the metric).
    pub planning_frames: usize,
    /// Frames scored for future-image PSNR/SSIM (0 skips the metric).
    pub image_frames: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            trials: 100,
            seed: 424242,
            tasks: vec!["press".into(), "stack".into()],
            planning_frames: 0,
            image_frames: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    /// Task the decode benchmark rolls out.
    pub task: String,
    pub trials: usize,
    pub seed: u64,
    pub chunk_sizes: Vec<usize>,
    /// Decode step counts; 1 benches one-step, >1 benches re-mask with T
    /// iterations.
    pub remask_steps: Vec<usize>,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            task: "press".into(),
            trials: 20,
            seed: 424243,
            chunk_sizes: vec![8, 16],
            remask_steps: vec![1, 6],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    /// Optional checkpoint to initialize training from (stage-2 warm start);
    /// empty means train from scratch.
    pub init: PathBuf,
    /// Training log, one JSON record per optimizer step.
    pub log: PathBuf,
    /// Evaluation report (JSON).
    pub report: PathBuf,
    /// Decode benchmark table (JSON).
    pub bench: PathBuf,
    /// Directory for rollout trajectory renders.
    pub rollout_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            dataset: "out/dataset.mpds".into(),
            checkpoint: "out/checkpoint.mpck".into(),
            init: PathBuf::new(),
            log: "out/train.jsonl".into(),
            report: "out/eval.json".into(),
            bench: "out/decode_bench.json".into(),
            rollout_dir: "out/rollout".into(),
        }
    }
}

fn parse_tasks(names: &[String]) -> Result<Vec<TaskKind>> {
    if names.is_empty() {
        return Err(Error::Config("task list is empty".into()));
    }
    names.iter().map(|n| TaskKind::from_name(n)).collect()
}

fn parse_schedule(name: &str) -> Result<MaskSchedule> {
    match name {
        "linear" => Ok(MaskSchedule::Linear),
        "cosine" => Ok(MaskSchedule::Cosine),
        other => Err(Error::Config(format!(
            "decode.schedule: unknown schedule {other:?}, expected \"linear\" or \"cosine\""
        ))),
    }
}

impl RunConfig {
    /// Cross-validate everything that does not need the dataset. Field
    /// errors name the offending key.
    pub fn validate(&self) -> Result<()> {
        self.env_config().validate()?;
        self.vocab_config().map_err(prefix("vocab"))?;
        parse_tasks(&self.data.tasks).map_err(prefix("data.tasks"))?;
        parse_tasks(&self.eval.tasks).map_err(prefix("eval.tasks"))?;
        TaskKind::from_name(&self.bench.task).map_err(prefix("bench.task"))?;
        self.decode_config().map_err(prefix("decode"))?;
        self.train_config().map_err(prefix("train"))?;
        if self.layout.views == 0 || self.layout.views > 2 {
            return Err(Error::Config(format!(
                "layout.views: {} is out of range, expected 1 or 2",
                self.layout.views
            )));
        }
        if self.blocks.chunk_size == 0 {
            return Err(Error::Config("blocks.chunk_size must be positive".into()));
        }
        if self.data.episodes == 0 {
            return Err(Error::Config("data.episodes must be positive".into()));
        }
        if self.bench.chunk_sizes.is_empty() || self.bench.remask_steps.is_empty() {
            return Err(Error::Config(
                "bench.chunk_sizes and bench.remask_steps must be non-empty".into(),
            ));
        }
        Ok(())
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            height: self.env.height,
            width: self.env.width,
        }
    }

    pub fn vocab_config(&self) -> Result<VocabConfig> {
        let v = VocabConfig {
            image_tokens: self.vocab.image_tokens,
            action_bins: self.vocab.action_bins,
        };
        mmp_core::vocab::UnifiedVocab::new(v)?;
        Ok(v)
    }

    pub fn space_spec(&self) -> Result<SpaceSpec> {
        Ok(SpaceSpec {
            vocab: self.vocab_config()?,
            text_len: self.layout.text_len,
            instruction_len: self.layout.instruction_len,
            description_len: self.layout.description_len,
        })
    }

    pub fn gen_config(&self) -> Result<GenConfig> {
        Ok(GenConfig {
            env: self.env_config(),
            episodes: self.data.episodes,
            seed: self.data.seed,
            tasks: parse_tasks(&self.data.tasks)?,
            chunk_size: self.blocks.chunk_size,
            views: self.layout.views,
        })
    }

    /// Model config sized for a given token space.
    pub fn model_config(&self, vocab_size: usize, max_seq_len: usize) -> ModelConfig {
        ModelConfig {
            layers: self.model.layers,
            heads: self.model.heads,
            model_dim: self.model.model_dim,
            ff_dim: self.model.ff_dim,
            vocab_size,
            max_seq_len,
            seed: self.model.seed,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let [a, t, i] = self.train.lambda;
        let cfg = TrainConfig {
            stage: self.train.stage,
            weights: LossWeights {
                action: a,
                text: t,
                image: i,
            },
            batch_size: self.train.batch_size,
            accum_steps: self.train.accum_steps,
            learning_rate: self.train.learning_rate,
            weight_decay: self.train.weight_decay,
            total_steps: self.train.total_steps,
            seed: self.train.seed,
            sample_with_replacement: self.train.sample_with_replacement,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn decode_config(&self) -> Result<DecodeConfig> {
        let strategy = match self.decode.strategy.as_str() {
            "one-step" => Strategy::OneStep,
            "remask" => Strategy::Remask,
            other => {
                return Err(Error::Config(format!(
                    "decode.strategy: unknown strategy {other:?}, expected \"one-step\" or \"remask\""
                )))
            }
        };
        let selection = match self.decode.selection.as_str() {
            "confidence" => Selection::Confidence,
            "random" => Selection::Random,
            other => {
                return Err(Error::Config(format!(
                    "decode.selection: unknown selection {other:?}, expected \"confidence\" or \"random\""
                )))
            }
        };
        if strategy == Strategy::Remask && self.decode.steps == 0 {
            return Err(Error::Config("decode.steps must be positive".into()));
        }
        Ok(DecodeConfig {
            strategy,
            // steps documents the re-mask iteration count only.
            steps: match strategy {
                Strategy::OneStep => 1,
                Strategy::Remask => self.decode.steps,
            },
            schedule: parse_schedule(&self.decode.schedule)?,
            selection,
            seed: self.decode.seed,
        })
    }

    pub fn eval_tasks(&self) -> Result<Vec<TaskKind>> {
        parse_tasks(&self.eval.tasks)
    }

    /// Decode grid for the benchmark: the cross product of chunk sizes and
    /// step counts, step count 1 meaning one-step decoding.
    pub fn bench_grid(&self) -> Result<Vec<(usize, DecodeConfig)>> {
        let schedule = parse_schedule(&self.decode.schedule)?;
        let mut grid = Vec::new();
        for &cs in &self.bench.chunk_sizes {
            for &t in &self.bench.remask_steps {
                let dc = if t <= 1 {
                    DecodeConfig::one_step()
                } else {
                    DecodeConfig::remask(t, schedule)
                };
                grid.push((cs, dc));
            }
        }
        Ok(grid)
    }

    /// Stable normalized rendering; re-parsing it yields an equal config.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config serialization failed: {e}")))
    }

    /// Deterministic summary of the knobs that shape training, stored in
    /// checkpoint manifests. No timing or host details.
    pub fn train_digest(&self) -> String {
        format!(
            "stage {} lambda {:?} steps {} lr {} wd {} batch {}x{} train-seed {} aug {}@{} data-seed {} episodes {} tasks {}",
            self.train.stage,
            self.train.lambda,
            self.train.total_steps,
            self.train.learning_rate,
            self.train.weight_decay,
            self.train.batch_size,
            self.train.accum_steps,
            self.train.seed,
            self.train.augment_copies,
            self.train.augment_seed,
            self.data.seed,
            self.data.episodes,
            self.data.tasks.join("+"),
        )
    }
}

fn prefix(section: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Config(msg) => Error::Config(format!("{section}: {msg}")),
        other => other,
    }
}

/// Merge `over` into `base` table-by-table; scalar and array values from
/// `over` win.
fn merge_value(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_value(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Apply one `--set section.key=value` override onto the merged TOML value.
/// The value side is parsed as TOML (so numbers, booleans and arrays work);
/// anything that does not parse is taken as a bare string.
fn apply_set(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| {
        Error::Config(format!("--set {spec:?} is not of the form key=value"))
    })?;
    let parsed: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key v just inserted"),
        Err(_) => toml::Value::String(raw.to_string()),
    };

    let mut node = root;
    let mut segments = path.split('.').peekable();
    while let Some(seg) = segments.next() {
        if seg.is_empty() {
            return Err(Error::Config(format!("--set {spec:?} has an empty key segment")));
        }
        let table = node.as_table_mut().ok_or_else(|| {
            Error::Config(format!("--set {path}: {seg} does not name a table"))
        })?;
        if segments.peek().is_none() {
            table.insert(seg.to_string(), parsed);
            return Ok(());
        }
        node = table
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    unreachable!("split always yields at least one segment")
}

/// Assemble the effective config: defaults, then the file (explicit path,
/// else `$MMP_CONFIG` if set), then `--set` overrides. Unknown keys anywhere
/// are rejected with the offending name.
pub fn load_config(path: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
    let mut root = toml::Value::try_from(RunConfig::default())
        .map_err(|e| Error::Config(format!("default config serialization failed: {e}")))?;

    let env_path = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
    let file = path.or(env_path.as_deref());
    if let Some(file) = file {
        let text = std::fs::read_to_string(file).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", file.display()))
        })?;
        let value: toml::Value = toml::from_str(&text).map_err(|e| {
            Error::Config(format!("config {}: {e}", file.display()))
        })?;
        merge_value(&mut root, value);
    }
    for spec in sets {
        apply_set(&mut root, spec)?;
    }

    let cfg: RunConfig = root
        .try_into()
        .map_err(|e| Error::Config(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}
