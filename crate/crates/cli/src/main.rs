//! `mmp`: generate gridworld data, train the unified-token policy, evaluate
//! it, and inspect the artifacts it produces. All sub-commands read one TOML
//! config (flags > file > defaults) and exit 0 on success, 2 on config
//! errors, 3 on data/format errors, 4 on contract violations.

mod config;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use mmp_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest};
use mmp_core::error::{Error, Result};
use mmp_core::eval::{
    decode_bench, image_eval, planning_eval, rollout_states, success_rate, EvalReport, Policy,
    RolloutOptions,
};
use mmp_core::gridworld::data::{augment_dataset, generate_dataset, Dataset};
use mmp_core::gridworld::{EnvConfig, TaskKind};
use mmp_core::model::init_params;
use mmp_core::train::{run_stage, AdamState, TokenSpace};
use mmp_core::vocab::PaletteImage;

use config::{load_config, RunConfig};

#[derive(Parser)]
#[command(name = "mmp", version, about = "Unified-token multimodal policy on a gridworld")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file; defaults to $MMP_CONFIG when set, else built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set train.total_steps=500.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Roll the scripted expert and write a dataset file.
    GenData {
        /// Output path; defaults to paths.dataset.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one stage on a dataset; writes a checkpoint and a loss log.
    Train {
        /// Dataset path; defaults to paths.dataset.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Warm-start checkpoint; defaults to paths.init when non-empty.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Checkpoint output; defaults to paths.checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Roll out the policy and report success rates and text/image metrics.
    Eval {
        /// Checkpoint path; defaults to paths.checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset for planning/image metrics; defaults to paths.dataset.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Report output; defaults to paths.report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one episode and write its trajectory as PGM frames.
    Rollout {
        /// Task to roll out; defaults to the first eval task.
        #[arg(long)]
        task: Option<String>,
        /// Episode seed; defaults to eval.seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output directory; defaults to paths.rollout_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare decode strategies across chunk sizes on a trained policy.
    DecodeBench {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Table output; defaults to paths.bench.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the manifest of a dataset, checkpoint, or report file.
    Inspect { path: PathBuf },
    /// Print the effective configuration as normalized TOML.
    ShowConfig,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.common.config.as_deref(), &cli.common.sets)?;
    match cli.command {
        Command::GenData { out } => cmd_gen_data(&cfg, out),
        Command::Train { dataset, init, out } => cmd_train(&cfg, dataset, init, out),
        Command::Eval {
            checkpoint,
            dataset,
            out,
        } => cmd_eval(&cfg, checkpoint, dataset, out),
        Command::Rollout {
            task,
            seed,
            checkpoint,
            out,
        } => cmd_rollout(&cfg, task, seed, checkpoint, out),
        Command::DecodeBench { checkpoint, out } => cmd_decode_bench(&cfg, checkpoint, out),
        Command::Inspect { path } => cmd_inspect(&path),
        Command::ShowConfig => {
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Format(format!("serializing {}: {e}", path.display())))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn cmd_gen_data(cfg: &RunConfig, out: Option<PathBuf>) -> Result<()> {
    let path = out.unwrap_or_else(|| cfg.paths.dataset.clone());
    let gen = cfg.gen_config()?;
    let start = Instant::now();
    let ds = generate_dataset(&gen)?;
    ensure_parent(&path)?;
    ds.write_file(&path)?;
    println!(
        "wrote {} episodes ({} frames) to {} in {:.2}s",
        ds.episodes.len(),
        ds.frame_count(),
        path.display(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn cmd_train(
    cfg: &RunConfig,
    dataset: Option<PathBuf>,
    init: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let dataset_path = dataset.unwrap_or_else(|| cfg.paths.dataset.clone());
    let init_path = init.or_else(|| {
        (!cfg.paths.init.as_os_str().is_empty()).then(|| cfg.paths.init.clone())
    });
    let out_path = out.unwrap_or_else(|| cfg.paths.checkpoint.clone());

    let mut ds = Dataset::read_file(&dataset_path)?;
    let env = EnvConfig {
        height: ds.manifest.height,
        width: ds.manifest.width,
    };
    if cfg.train.augment_copies > 0 {
        let before = ds.episodes.len();
        ds = augment_dataset(&ds, cfg.train.augment_copies, cfg.train.augment_seed)?;
        println!(
            "augmented {} episodes to {} (shift + recolor variants)",
            before,
            ds.episodes.len()
        );
    }

    let (space, mut params) = match &init_path {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            let space = ck.manifest.token_space()?;
            if space.blocks.chunk_size != ds.manifest.chunk_size as usize {
                return Err(Error::Config(format!(
                    "checkpoint was trained with chunk size {} but the dataset uses {}",
                    space.blocks.chunk_size, ds.manifest.chunk_size
                )));
            }
            (space, ck.params)
        }
        None => {
            let space = TokenSpace::fit(&ds, &cfg.space_spec()?)?;
            let model = cfg.model_config(space.vocab.size() as usize, space.layout.max_seq_len);
            let params = init_params::<f32>(model)?;
            (space, params)
        }
    };

    let frames = space.prepare_frames(&ds)?;
    let train = cfg.train_config()?;
    let mut opt = AdamState::new(&params);

    let every = (train.total_steps / 10).max(1);
    let start = Instant::now();
    let report = run_stage(&mut params, &mut opt, &space, &frames, &train, |r| {
        if r.step % every == 0 || r.step + 1 == train.total_steps {
            println!(
                "step {:>6}  loss {:.4}  (action {:.4} text {:.4} image {:.4})",
                r.step, r.loss, r.action_loss, r.text_loss, r.image_loss
            );
        }
    })?;

    ensure_parent(&cfg.paths.log)?;
    let mut log = fs::File::create(&cfg.paths.log)?;
    for record in &report.steps {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::Format(format!("serializing log record: {e}")))?;
        writeln!(log, "{line}")?;
    }

    let manifest = CheckpointManifest {
        model: params.cfg,
        vocab: space.vocab.config(),
        image_codec: space.image_codec,
        action_quantizer: space.action_quantizer.clone(),
        state_quantizer: space.state_quantizer.clone(),
        layout: space.layout,
        blocks: space.blocks,
        env,
        train_digest: cfg.train_digest(),
    };
    ensure_parent(&out_path)?;
    save_checkpoint(&params, Some(&opt), &manifest, &out_path)?;
    println!(
        "stage {} done: final loss {:.4} over {} steps in {:.1}s; checkpoint {}",
        train.stage,
        report.final_loss().unwrap_or(f64::NAN),
        report.steps.len(),
        start.elapsed().as_secs_f64(),
        out_path.display()
    );
    Ok(())
}

fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: Option<PathBuf>,
    dataset: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let ck_path = checkpoint.unwrap_or_else(|| cfg.paths.checkpoint.clone());
    let out_path = out.unwrap_or_else(|| cfg.paths.report.clone());
    let ck = load_checkpoint(&ck_path)?;
    let policy = Policy::from_checkpoint(&ck)?;
    let decode = cfg.decode_config()?;
    let opts = RolloutOptions {
        decode,
        chunk_size: None,
        max_steps: None,
    };

    let mut tasks = Vec::new();
    for kind in cfg.eval_tasks()? {
        let eval = success_rate(&policy, kind, cfg.eval.trials, cfg.eval.seed, &opts)?;
        println!(
            "task={} trials={} success_rate={:.3} mean_score={:.3} mean_env_steps={:.1} forwards={} wall={:.1}s",
            kind.name(),
            eval.trials,
            eval.success_rate,
            eval.mean_score,
            eval.mean_env_steps,
            eval.forwards,
            eval.wall_secs
        );
        tasks.push(eval);
    }

    let needs_ds = cfg.eval.planning_frames > 0 || cfg.eval.image_frames > 0;
    let (mut planning, mut image) = (None, None);
    if needs_ds {
        let ds_path = dataset.unwrap_or_else(|| cfg.paths.dataset.clone());
        let ds = Dataset::read_file(&ds_path)?;
        if cfg.eval.planning_frames > 0 {
            let p = planning_eval(&policy, &ds, &decode, cfg.eval.planning_frames)?;
            println!(
                "planning frames={} accuracy={:.3} unparseable={} forwards={} wall={:.1}s",
                p.frames, p.accuracy, p.unparseable, p.forwards, p.wall_secs
            );
            planning = Some(p);
        }
        if cfg.eval.image_frames > 0 {
            let i = image_eval(&policy, &ds, &decode, cfg.eval.image_frames)?;
            println!(
                "image frames={} mean_psnr={:.2} mean_ssim={:.4} forwards={} wall={:.1}s",
                i.frames, i.mean_psnr, i.mean_ssim, i.forwards, i.wall_secs
            );
            image = Some(i);
        }
    }

    let report = EvalReport {
        tasks,
        planning,
        image,
    };
    write_json(&out_path, &report)?;
    println!("report written to {}", out_path.display());
    Ok(())
}

/// Plain PGM (P2) render of a palette image, one gray level per palette id.
fn write_pgm(path: &Path, img: &PaletteImage, max_value: u32) -> Result<()> {
    let mut text = format!("P2\n{} {}\n{}\n", img.width, img.height, max_value);
    for row in img.cells.chunks(img.width as usize) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        text.push_str(&line.join(" "));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn cmd_rollout(
    cfg: &RunConfig,
    task: Option<String>,
    seed: Option<u64>,
    checkpoint: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let ck_path = checkpoint.unwrap_or_else(|| cfg.paths.checkpoint.clone());
    let out_dir = out.unwrap_or_else(|| cfg.paths.rollout_dir.clone());
    let kind = match task {
        Some(name) => TaskKind::from_name(&name)?,
        None => *cfg.eval_tasks()?.first().expect("validated non-empty"),
    };
    let seed = seed.unwrap_or(cfg.eval.seed);

    let ck = load_checkpoint(&ck_path)?;
    let policy = Policy::from_checkpoint(&ck)?;
    let opts = RolloutOptions {
        decode: cfg.decode_config()?,
        chunk_size: None,
        max_steps: None,
    };
    let (outcome, states) = rollout_states(&policy, kind, seed, &opts)?;

    fs::create_dir_all(&out_dir)?;
    let max_value = policy.space.image_codec.palette - 1;
    for (i, state) in states.iter().enumerate() {
        let img = policy.env.render(state, 0)?;
        write_pgm(&out_dir.join(format!("frame_{i:04}.pgm")), &img, max_value)?;
    }
    println!(
        "task={} seed={} success={} score={:.2} env_steps={} chunks={} forwards={}; {} frames in {}",
        kind.name(),
        seed,
        outcome.success,
        outcome.score,
        outcome.env_steps,
        outcome.chunks,
        outcome.forwards,
        states.len(),
        out_dir.display()
    );
    Ok(())
}

fn cmd_decode_bench(
    cfg: &RunConfig,
    checkpoint: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let ck_path = checkpoint.unwrap_or_else(|| cfg.paths.checkpoint.clone());
    let out_path = out.unwrap_or_else(|| cfg.paths.bench.clone());
    let ck = load_checkpoint(&ck_path)?;
    let policy = Policy::from_checkpoint(&ck)?;
    let kind = TaskKind::from_name(&cfg.bench.task)?;
    let grid = cfg.bench_grid()?;

    let rows = decode_bench(&policy, kind, cfg.bench.trials, cfg.bench.seed, &grid)?;
    println!("chunk  strategy  steps  success  score   s/chunk   fwd/chunk");
    for row in &rows {
        println!(
            "{:>5}  {:<8}  {:>5}  {:>7.3}  {:>5.3}  {:>8.4}  {:>9.2}",
            row.chunk_size,
            format!("{:?}", row.strategy).to_lowercase(),
            row.steps,
            row.success_rate,
            row.mean_score,
            row.secs_per_chunk,
            row.forwards_per_chunk
        );
    }
    // Wall-time ratios per chunk size, re-mask row vs its one-step row.
    for &cs in &cfg.bench.chunk_sizes {
        let one = rows
            .iter()
            .find(|r| r.chunk_size == cs && r.steps == 1 && r.secs_per_chunk > 0.0);
        for row in rows.iter().filter(|r| r.chunk_size == cs && r.steps > 1) {
            if let Some(one) = one {
                println!(
                    "chunk {cs}: remask T={} wall is {:.2}x one-step",
                    row.steps,
                    row.secs_per_chunk / one.secs_per_chunk
                );
            }
        }
    }
    write_json(&out_path, &rows)?;
    println!("table written to {}", out_path.display());
    Ok(())
}

fn cmd_inspect(path: &Path) -> Result<()> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"MPDS") {
        let ds = Dataset::from_bytes(&bytes)?;
        let manifest = serde_json::to_string_pretty(&ds.manifest)
            .map_err(|e| Error::Format(format!("manifest: {e}")))?;
        println!("dataset {}", path.display());
        println!("{manifest}");
        println!(
            "episodes: {}  frames: {}  bytes: {}",
            ds.episodes.len(),
            ds.frame_count(),
            bytes.len()
        );
        return Ok(());
    }
    if bytes.starts_with(b"MPCK") {
        let ck = Checkpoint::from_bytes(&bytes)?;
        let manifest = serde_json::to_string_pretty(&ck.manifest)
            .map_err(|e| Error::Format(format!("manifest: {e}")))?;
        let tensor_count = ck.params.tensors().len();
        println!("checkpoint {}", path.display());
        println!("{manifest}");
        println!(
            "tensors: {}  optimizer state: {}  bytes: {}",
            tensor_count,
            if ck.opt.is_some() { "yes" } else { "no" },
            bytes.len()
        );
        return Ok(());
    }
    // Reports and logs are JSON; pretty-print them if they parse.
    if let Ok(v) = serde_json::from_slice::<serde_json::Value>(&bytes) {
        println!(
            "{}",
            serde_json::to_string_pretty(&v).expect("value round-trip")
        );
        return Ok(());
    }
    Err(Error::Format(format!(
        "{}: not a dataset, checkpoint, or JSON artifact",
        path.display()
    )))
}
