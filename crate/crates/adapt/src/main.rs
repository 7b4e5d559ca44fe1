//! Command-line interface: dataset generation, training, evaluation,
//! prediction, and the inference latency benchmark.
//!
//! Machine-readable output (metric reports, prediction dumps, benchmark CSV
//! when no `--out` is given, training step logs) goes to standard output;
//! progress and errors go to standard error. Every flag has a config-file
//! equivalent; flags win when both are present.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use adapt::bench::{run_bench, BenchOptions};
use adapt::checkpoint::Checkpoint;
use adapt::model::{AdaptModel, ModelConfig, Setting};
use adapt::scene::Scene;
use adapt::synth::{apply_input_noise, generate_dataset, read_dataset, write_dataset, GeneratorConfig};
use adapt::train::adam::Adam;
use adapt::train::{evaluate, train_loop, val_split, Precision, TrainConfig, TrainProgress};
use adapt_tensor::Real;

#[derive(Parser)]
#[command(
    name = "adapt",
    version,
    about = "Multi-agent trajectory prediction: data generation, training, evaluation, benchmarking"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset (NDJSON, one scene per line).
    Generate {
        /// JSON config: {"generator": {...}, "out": "path"}.
        #[arg(long)]
        config: PathBuf,
        /// Output dataset path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the generator seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the number of scenes.
        #[arg(long)]
        n_scenes: Option<usize>,
    },
    /// Train a model, writing a checkpoint after every epoch.
    Train {
        /// JSON config: {"model": {...}, "train": {...}, "data": ..., "out": ...}.
        #[arg(long)]
        config: PathBuf,
        /// Training dataset (NDJSON).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint output path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Resume from the checkpoint at --out if it exists.
        #[arg(long)]
        resume: bool,
        /// Write the JSON-lines step log here instead of standard output.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Override the epoch count.
        #[arg(long)]
        epochs: Option<usize>,
        /// Override the training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a dataset; prints a JSON metric report.
    Eval {
        /// Optional JSON config with the same fields as the flags.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Evaluation dataset (NDJSON) with ground-truth futures.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Expected prediction setting; fails if the checkpoint disagrees.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Standard deviation of Gaussian noise added to observed positions.
        #[arg(long)]
        noise_sigma: Option<f64>,
        /// Seed for the noise stream.
        #[arg(long)]
        noise_seed: Option<u64>,
    },
    /// Predict trajectories for one scene; prints JSON.
    Predict {
        /// Optional JSON config with the same fields as the flags.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// A single scene as a JSON document.
        #[arg(long)]
        scene: Option<PathBuf>,
    },
    /// Benchmark single-pass versus per-agent-loop inference latency.
    Bench {
        /// Optional JSON config with the same fields as the flags.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Comma-separated agent counts, e.g. 2,8,32.
        #[arg(long)]
        agents: Option<String>,
        /// Lane count for every benchmark scene.
        #[arg(long)]
        lanes: Option<usize>,
        /// Timed repeats per (scene, mode); at least 20.
        #[arg(long)]
        repeats: Option<usize>,
        /// Worker threads for the per-agent loop.
        #[arg(long)]
        threads: Option<usize>,
        /// Seed for benchmark scene construction.
        #[arg(long)]
        seed: Option<u64>,
        /// CSV output path; when omitted the CSV goes to standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ModeArg {
    Single,
    Multi,
}

impl ModeArg {
    fn matches(self, setting: Setting) -> bool {
        matches!(
            (self, setting),
            (ModeArg::Single, Setting::SingleAgent) | (ModeArg::Multi, Setting::MultiAgent)
        )
    }
}

#[derive(Debug, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct GenerateFile {
    generator: GeneratorConfig,
    out: Option<PathBuf>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    model: ModelConfig,
    train: TrainConfig,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    resume: bool,
    log: Option<PathBuf>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct EvalFile {
    ckpt: Option<PathBuf>,
    data: Option<PathBuf>,
    mode: Option<ModeArg>,
    noise_sigma: Option<f64>,
    noise_seed: Option<u64>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct PredictFile {
    ckpt: Option<PathBuf>,
    scene: Option<PathBuf>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct BenchFile {
    ckpt: Option<PathBuf>,
    agents: Option<Vec<usize>>,
    lanes: Option<usize>,
    repeats: Option<usize>,
    threads: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate {
            config,
            out,
            seed,
            n_scenes,
        } => cmd_generate(&config, out, seed, n_scenes),
        Command::Train {
            config,
            data,
            out,
            resume,
            log,
            epochs,
            seed,
        } => cmd_train(&config, data, out, resume, log, epochs, seed),
        Command::Eval {
            config,
            ckpt,
            data,
            mode,
            noise_sigma,
            noise_seed,
        } => cmd_eval(config, ckpt, data, mode, noise_sigma, noise_seed),
        Command::Predict {
            config,
            ckpt,
            scene,
        } => cmd_predict(config, ckpt, scene),
        Command::Bench {
            config,
            ckpt,
            agents,
            lanes,
            repeats,
            threads,
            seed,
            out,
        } => cmd_bench(config, ckpt, agents, lanes, repeats, threads, seed, out),
    }
}

/// Write machine output to standard output, treating a closed pipe (e.g.
/// `adapt predict … | head`) as success rather than a panic.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Flag value when present, else config-file value, else an error naming the
/// missing setting.
fn require<P>(flag: Option<P>, file: Option<P>, what: &str) -> Result<P> {
    flag.or(file)
        .with_context(|| format!("missing {what}: pass the flag or set it in the config file"))
}

fn cmd_generate(
    config: &Path,
    out: Option<PathBuf>,
    seed: Option<u64>,
    n_scenes: Option<usize>,
) -> Result<()> {
    let file: GenerateFile = read_json(config)?;
    let mut gen_cfg = file.generator;
    if let Some(s) = seed {
        gen_cfg.seed = s;
    }
    if let Some(n) = n_scenes {
        gen_cfg.n_scenes = n;
    }
    let out = require(out, file.out, "output path (--out)")?;
    gen_cfg.validate()?;
    let scenes = generate_dataset(&gen_cfg);
    write_dataset(&out, &scenes)?;
    eprintln!("wrote {} scenes to {}", scenes.len(), out.display());
    Ok(())
}

fn cmd_train(
    config: &Path,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    resume: bool,
    log: Option<PathBuf>,
    epochs: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    let file: TrainFile = read_json(config)?;
    let data = require(data, file.data, "dataset path (--data)")?;
    let out = require(out, file.out, "checkpoint path (--out)")?;
    let log = log.or(file.log);
    let resume = resume || file.resume;
    let mut train_cfg = file.train;
    if let Some(e) = epochs {
        train_cfg.epochs = e;
    }
    if let Some(s) = seed {
        train_cfg.seed = s;
    }
    train_cfg.validate()?;
    file.model.validate()?;

    let scenes = read_dataset(&data)?;
    if scenes.is_empty() {
        bail!("dataset {} is empty", data.display());
    }
    let (train_idx, val_idx) = val_split(scenes.len());
    let train_scenes: Vec<Scene> = train_idx.iter().map(|&i| scenes[i].clone()).collect();
    let val_scenes: Vec<Scene> = val_idx.iter().map(|&i| scenes[i].clone()).collect();
    eprintln!(
        "training on {} scenes, validating on {}",
        train_scenes.len(),
        val_scenes.len()
    );

    match train_cfg.precision {
        Precision::F64 => train_typed::<f64>(
            file.model, train_cfg, &train_scenes, &val_scenes, resume, &out, log.as_deref(),
        ),
        Precision::F32 => train_typed::<f32>(
            file.model, train_cfg, &train_scenes, &val_scenes, resume, &out, log.as_deref(),
        ),
    }
}

fn train_typed<T: Real>(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    train_scenes: &[Scene],
    val_scenes: &[Scene],
    resume: bool,
    out: &Path,
    log: Option<&Path>,
) -> Result<()> {
    let (mut model, mut optimizer, progress) = if resume && out.exists() {
        let ckpt = Checkpoint::load(out)?;
        if ckpt.model != model_cfg {
            eprintln!(
                "note: resuming with the checkpoint's model config, which differs from the config file"
            );
        }
        let model: AdaptModel<T> = ckpt.restore()?;
        let optimizer = match ckpt.optimizer {
            Some(state) => Adam::from_state(&model.params, state).map_err(anyhow::Error::msg)?,
            None => Adam::new(&model.params),
        };
        eprintln!(
            "resuming from {} at epoch {}, step {}",
            out.display(),
            ckpt.trained_epochs,
            ckpt.global_step
        );
        (
            model,
            optimizer,
            TrainProgress {
                epochs_done: ckpt.trained_epochs,
                global_step: ckpt.global_step,
            },
        )
    } else {
        let model: AdaptModel<T> = AdaptModel::init(model_cfg)?;
        let optimizer = Adam::new(&model.params);
        (model, optimizer, TrainProgress::default())
    };

    let stdout = std::io::stdout();
    let mut log_writer: Box<dyn Write> = match log {
        Some(path) => Box::new(BufWriter::new(
            File::create(path).with_context(|| format!("creating {}", path.display()))?,
        )),
        None => Box::new(stdout.lock()),
    };
    let progress = train_loop(
        &mut model,
        &mut optimizer,
        train_scenes,
        val_scenes,
        &train_cfg,
        progress,
        None,
        Some(out),
        &mut log_writer,
    )?;
    log_writer.flush()?;
    eprintln!(
        "finished {} epochs ({} steps); checkpoint at {}",
        progress.epochs_done,
        progress.global_step,
        out.display()
    );
    Ok(())
}

fn cmd_eval(
    config: Option<PathBuf>,
    ckpt: Option<PathBuf>,
    data: Option<PathBuf>,
    mode: Option<ModeArg>,
    noise_sigma: Option<f64>,
    noise_seed: Option<u64>,
) -> Result<()> {
    let file: EvalFile = match config {
        Some(path) => read_json(&path)?,
        None => EvalFile::default(),
    };
    let ckpt_path = require(ckpt, file.ckpt, "checkpoint path (--ckpt)")?;
    let data_path = require(data, file.data, "dataset path (--data)")?;
    let mode = mode.or(file.mode);
    let sigma = noise_sigma.or(file.noise_sigma).unwrap_or(0.0);
    let noise_seed = noise_seed.or(file.noise_seed).unwrap_or(0);
    if sigma.is_nan() || sigma < 0.0 {
        bail!("noise sigma must be nonnegative, got {sigma}");
    }

    let ckpt = Checkpoint::load(&ckpt_path)?;
    let model: AdaptModel<f64> = ckpt.restore()?;
    if let Some(m) = mode {
        if !m.matches(model.config.setting) {
            bail!(
                "checkpoint was trained for the {:?} setting, which does not match --mode",
                model.config.setting
            );
        }
    }
    let scenes = read_dataset(&data_path)?;
    let scenes = if sigma == 0.0 {
        scenes
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        scenes
            .iter()
            .map(|s| apply_input_noise(s, sigma, &mut rng))
            .collect()
    };
    let report = evaluate(&model, &scenes)?;
    if report.n_agents == 0 {
        bail!("dataset contains no target agents with ground-truth futures");
    }
    emit(&serde_json::to_string_pretty(&report)?)?;
    Ok(())
}

fn cmd_predict(
    config: Option<PathBuf>,
    ckpt: Option<PathBuf>,
    scene: Option<PathBuf>,
) -> Result<()> {
    let file: PredictFile = match config {
        Some(path) => read_json(&path)?,
        None => PredictFile::default(),
    };
    let ckpt_path = require(ckpt, file.ckpt, "checkpoint path (--ckpt)")?;
    let scene_path = require(scene, file.scene, "scene path (--scene)")?;
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let model: AdaptModel<f64> = ckpt.restore()?;
    let scene: Scene = read_json(&scene_path)?;
    scene.validate()?;
    let predictions = model.predict(&scene)?;
    emit(&serde_json::to_string_pretty(
        &serde_json::json!({ "agents": predictions }),
    )?)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_bench(
    config: Option<PathBuf>,
    ckpt: Option<PathBuf>,
    agents: Option<String>,
    lanes: Option<usize>,
    repeats: Option<usize>,
    threads: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let file: BenchFile = match config {
        Some(path) => read_json(&path)?,
        None => BenchFile::default(),
    };
    let ckpt_path = require(ckpt, file.ckpt, "checkpoint path (--ckpt)")?;
    let agent_counts: Vec<usize> = match agents {
        Some(list) => list
            .split(',')
            .map(|part| part.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .with_context(|| format!("parsing --agents {list:?}"))?,
        None => file
            .agents
            .context("missing agent counts (--agents), e.g. --agents 2,8,32")?,
    };
    let out = out.or(file.out);
    let opts = BenchOptions {
        repeats: repeats.or(file.repeats).unwrap_or(20),
        warmups: 3,
        threads: threads.or(file.threads).unwrap_or(1),
        seed: seed.or(file.seed).unwrap_or(0),
    };
    let lanes = lanes.or(file.lanes).unwrap_or(8);

    let ckpt = Checkpoint::load(&ckpt_path)?;
    let model: AdaptModel<f64> = ckpt.restore()?;
    let result = run_bench(&model, &agent_counts, lanes, &opts)?;
    if let Some(slope) = result.single_slope {
        eprintln!("single-pass log-log slope over agent counts: {slope:.3}");
    }
    if let Some(slope) = result.loop_slope {
        eprintln!("per-agent-loop log-log slope over agent counts: {slope:.3}");
    }
    let csv = result.to_csv();
    match out {
        Some(path) => {
            std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
            eprintln!("wrote benchmark table to {}", path.display());
        }
        None => emit(csv.trim_end())?,
    }
    Ok(())
}
