use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use skipclip::config::RunConfig;
use skipclip::encoders::{init_params, SkipClipNet};
use skipclip::evaluation::{
    evaluate_ranking, export_heatmap, finetune, frame_heatmap, heatmap_pgm, FinetuneMode,
    FinetuneOptions, TrainedModel,
};
use skipclip::numerics::{skt, FdOptions};
use skipclip::rng;
use skipclip::sampling::Sampler;
use skipclip::training::{
    gradcheck_objective, load_checkpoint, pretrain, save_checkpoint, thread_pool, Checkpoint,
    PretrainObserver, StepMetrics,
};
use skipclip::videoio::{generate_synthetic_dataset, load_video, Dataset};
use skipclip::{Error, ErrorClass, Tensor};

#[derive(Parser)]
#[command(name = "skipclip", version, about = "Skip-Clip pre-training and evaluation")]
struct Cli {
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Force single-threaded numerics.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic moving-sprite corpus.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train the encoders on the training split.
    Pretrain(PretrainArgs),
    /// Report ranking accuracy on the held-out split.
    EvalRank {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        data: PathBuf,
        /// Number of held-out examples (default: run.eval_examples).
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a motion classifier and report sliding-window accuracy.
    Finetune {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "probe")]
        mode: FinetuneMode,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export the per-cell similarity map of one target frame.
    Heatmap {
        #[command(flatten)]
        model: ModelArgs,
        /// SKT1 video file.
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        frame: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write sampled training examples as SKT1 tensors for inspection.
    DumpExamples {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus directory holding train.json.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the full objective in 64-bit precision.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        instances: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus directory holding train.json.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint directory.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    no_rank: bool,
    #[arg(long)]
    no_contrastive: bool,
    #[arg(long)]
    no_rotation: bool,
}

#[derive(Args)]
struct ModelArgs {
    /// Checkpoint directory.
    #[arg(long, conflicts_with = "random_init", required_unless_present = "random_init")]
    ckpt: Option<PathBuf>,
    /// Use freshly initialized parameters instead of a checkpoint.
    #[arg(long)]
    random_init: bool,
    /// Configuration (default: the one stored beside the checkpoint).
    #[arg(long)]
    config: Option<PathBuf>,
}

const CONFIG_FILE: &str = "config.json";

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (class, kind, code) = match err.downcast_ref::<Error>() {
                Some(e) => {
                    let (name, code) = match e.class() {
                        ErrorClass::Config => ("config", 2),
                        ErrorClass::Data => ("data", 3),
                        ErrorClass::Numerical => ("numerical", 4),
                    };
                    (name, e.kind(), code)
                }
                None => ("config", "usage", 2),
            };
            let line = json!({
                "error": kind,
                "class": class,
                "message": format!("{err:#}"),
            });
            eprintln!("{line}");
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let overrides = RunOverrides {
        threads: cli.threads,
        deterministic: cli.deterministic,
    };
    match cli.command {
        Command::GenData { config, out } => gen_data(config.as_deref(), &out, &overrides),
        Command::Pretrain(args) => run_pretrain(args, &overrides),
        Command::EvalRank {
            model,
            data,
            n,
            seed,
            out,
        } => eval_rank(&model, &data, n, seed, out.as_deref(), &overrides),
        Command::Finetune {
            model,
            mode,
            data,
            epochs,
            seed,
            out,
        } => run_finetune(&model, mode, &data, epochs, seed, out.as_deref(), &overrides),
        Command::Heatmap {
            model,
            video,
            frame,
            out,
        } => heatmap(&model, &video, frame, &out, &overrides),
        Command::DumpExamples {
            config,
            data,
            n,
            seed,
            out,
        } => dump_examples(config.as_deref(), &data, n, seed, &out, &overrides),
        Command::Gradcheck {
            config,
            instances,
            out,
        } => gradcheck(config.as_deref(), instances, out.as_deref(), &overrides),
    }
}

struct RunOverrides {
    threads: Option<usize>,
    deterministic: bool,
}

impl RunOverrides {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(t) = self.threads {
            cfg.run.threads = t;
        }
        if self.deterministic {
            cfg.run.deterministic = true;
        }
    }
}

fn load_config(path: Option<&Path>, overrides: &RunOverrides) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn write_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    cfg.save(&dir.join(CONFIG_FILE))?;
    Ok(())
}

fn emit(value: &serde_json::Value, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            fs::write(p, text).map_err(|e| Error::io(p, e))?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn gen_data(config: Option<&Path>, out: &Path, overrides: &RunOverrides) -> Result<()> {
    let cfg = load_config(config, overrides)?;
    write_config(&cfg, out)?;
    let corpus = generate_synthetic_dataset(&cfg.data, cfg.sample.min_frames(), out)?;
    eprintln!(
        "wrote {} training and {} test videos to {}",
        corpus.train.entries.len(),
        corpus.test.entries.len(),
        out.display()
    );
    Ok(())
}

struct RunLog {
    metrics: BufWriter<File>,
    checkpoints: PathBuf,
    cfg: RunConfig,
}

impl PretrainObserver for RunLog {
    fn on_step(&mut self, m: &StepMetrics) -> skipclip::Result<()> {
        let line = serde_json::to_string(m).expect("metrics serialize");
        writeln!(self.metrics, "{line}").map_err(|e| Error::io(&self.checkpoints, e))
    }

    fn on_checkpoint(&mut self, ckpt: &Checkpoint) -> skipclip::Result<()> {
        self.metrics.flush().map_err(|e| Error::io(&self.checkpoints, e))?;
        let dir = self.checkpoints.join(format!("epoch-{:04}", ckpt.epoch));
        save_checkpoint(ckpt, &dir)?;
        self.cfg.save(&dir.join(CONFIG_FILE))
    }
}

fn run_pretrain(args: PretrainArgs, overrides: &RunOverrides) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref(), overrides)?;
    if args.no_rank {
        cfg.loss.enable_rank = false;
    }
    if args.no_contrastive {
        cfg.loss.enable_contrastive = false;
    }
    if args.no_rotation {
        cfg.loss.enable_rotation = false;
    }
    if let Some(e) = args.epochs {
        cfg.optim.epochs = e;
    }
    cfg.validate()?;
    write_config(&cfg, &args.out)?;

    let train = Dataset::load(&args.data.join("train.json"))?;
    let start = match &args.resume {
        Some(p) => Some(load_checkpoint(p, Some(&cfg.encoder.fingerprint()))?),
        None => None,
    };
    let metrics_path = args.out.join("metrics.jsonl");
    let metrics = if start.is_some() {
        fs::OpenOptions::new().append(true).create(true).open(&metrics_path)
    } else {
        File::create(&metrics_path)
    }
    .map_err(|e| Error::io(&metrics_path, e))?;
    let mut log = RunLog {
        metrics: BufWriter::new(metrics),
        checkpoints: args.out.join("checkpoints"),
        cfg: cfg.clone(),
    };
    let started = Instant::now();
    let ckpt = pretrain(&cfg, &train.videos, start, cfg.optim.epochs, &mut log)?;
    log.metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    let final_dir = args.out.join("checkpoint");
    save_checkpoint(&ckpt, &final_dir)?;
    cfg.save(&final_dir.join(CONFIG_FILE))?;
    emit(
        &json!({
            "epochs": ckpt.epoch,
            "steps": ckpt.rng.step,
            "checkpoint": final_dir,
            "seconds": started.elapsed().as_secs_f64(),
        }),
        Some(&args.out.join("pretrain_report.json")),
    )
}

/// Configuration and parameters named by `--ckpt` / `--random-init`.
fn resolve_model(args: &ModelArgs, overrides: &RunOverrides) -> Result<(RunConfig, TrainedModel, &'static str)> {
    let config_path = match (&args.config, &args.ckpt) {
        (Some(c), _) => Some(c.clone()),
        (None, Some(ckpt)) => Some(ckpt.join(CONFIG_FILE)),
        (None, None) => None,
    };
    let cfg = load_config(config_path.as_deref(), overrides)?;
    let net = SkipClipNet::new(cfg.encoder.clone())?;
    let (params, init) = match &args.ckpt {
        Some(p) if !args.random_init => {
            let ckpt = load_checkpoint(p, Some(&cfg.encoder.fingerprint()))?;
            (ckpt.params, "checkpoint")
        }
        _ => (init_params(&cfg.encoder, cfg.run.seed)?, "random"),
    };
    Ok((cfg, TrainedModel::new(net, params)?, init))
}

fn eval_rank(
    model: &ModelArgs,
    data: &Path,
    n: Option<usize>,
    seed: Option<u64>,
    out: Option<&Path>,
    overrides: &RunOverrides,
) -> Result<()> {
    let (cfg, model, _) = resolve_model(model, overrides)?;
    if let Some(dir) = out.and_then(Path::parent).filter(|d| !d.as_os_str().is_empty()) {
        write_config(&cfg, dir)?;
    }
    let test = Dataset::load(&data.join("test.json"))?;
    let n = n.unwrap_or(cfg.run.eval_examples);
    let seed = seed.unwrap_or(cfg.run.seed);
    let report = thread_pool(&cfg)?.install(|| evaluate_ranking(&model, &test.videos, &cfg.sample, n, seed))?;
    emit(&serde_json::to_value(&report)?, out)
}

fn run_finetune(
    model: &ModelArgs,
    mode: FinetuneMode,
    data: &Path,
    epochs: Option<usize>,
    seed: Option<u64>,
    out: Option<&Path>,
    overrides: &RunOverrides,
) -> Result<()> {
    let (mut cfg, model, init) = resolve_model(model, overrides)?;
    if let Some(e) = epochs {
        cfg.optim.finetune_epochs = e;
    }
    if let Some(s) = seed {
        cfg.run.seed = s;
    }
    if let Some(dir) = out.and_then(Path::parent).filter(|d| !d.as_os_str().is_empty()) {
        write_config(&cfg, dir)?;
    }
    let train = Dataset::load(&data.join("train.json"))?;
    let test = Dataset::load(&data.join("test.json"))?;
    let opts = FinetuneOptions::from_config(&cfg, mode, init);
    let (report, _) = thread_pool(&cfg)?
        .install(|| finetune(&model.net, &model.params, &train.videos, &test.videos, &opts))?;
    emit(&serde_json::to_value(&report)?, out)
}

fn heatmap(model: &ModelArgs, video: &Path, frame: usize, out: &Path, overrides: &RunOverrides) -> Result<()> {
    let (cfg, model, _) = resolve_model(model, overrides)?;
    write_config(&cfg, out)?;
    let video = load_video(video)?;
    let map = frame_heatmap(&model, &video, &cfg.sample, frame)?;
    let frame_hw = model.net.config.frame_size;
    let stem = format!("frame-{frame:04}");
    let (pgm, raw) = export_heatmap(&map.grid, frame_hw, out, &format!("{stem}-heatmap"))?;
    // the target frame itself, channel 0, for side-by-side viewing
    let (h, w) = frame_hw;
    let plane = Tensor::new(vec![h, w], map.target.data()[..h * w].iter().map(|v| v * 2.0 - 1.0).collect())?;
    let target = out.join(format!("{stem}-target.pgm"));
    fs::write(&target, heatmap_pgm(&plane, frame_hw)?).map_err(|e| Error::io(&target, e))?;
    let mean = skipclip::numerics::kernels::mean_of(map.grid.data());
    emit(
        &json!({
            "video": video.id,
            "frame": map.frame,
            "context_start": map.context_start,
            "grid_shape": map.grid.shape(),
            "grid": map.grid.data(),
            "score": mean,
            "heatmap_pgm": pgm,
            "heatmap_skt": raw,
            "target_pgm": target,
        }),
        Some(&out.join(format!("{stem}.json"))),
    )
}

/// Example `i` uses the same stream as pre-training example `i` of epoch 0.
fn dump_examples(
    config: Option<&Path>,
    data: &Path,
    n: usize,
    seed: Option<u64>,
    out: &Path,
    overrides: &RunOverrides,
) -> Result<()> {
    let cfg = load_config(config, overrides)?;
    let train = Dataset::load(&data.join("train.json"))?;
    if train.is_empty() {
        bail!(Error::InvalidArgument("training split is empty".into()));
    }
    let seed = seed.unwrap_or(cfg.run.seed);
    let sampler = Sampler::new(cfg.sample.clone(), cfg.augment.clone());
    for i in 0..n {
        let mut rng = rng::stream(seed, "sampler", i as u64);
        let video = i % train.len();
        let ex = sampler.example(&train.videos, video, &mut rng)?;
        let dir = out.join(format!("example-{i:04}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        skt::write_tensor(&ex.context, &dir.join("context.skt"))?;
        for (kind, tensors) in [
            ("target", &ex.targets),
            ("negative", &ex.negatives),
            ("rotation", &ex.rotation_inputs),
        ] {
            for (j, t) in tensors.iter().enumerate() {
                skt::write_tensor(t, &dir.join(format!("{kind}-{j:02}.skt")))?;
            }
        }
        emit(
            &json!({
                "video_id": ex.video_id,
                "seek_index": ex.seek_index,
                "reversed": ex.reversed,
                "target_indices": ex.target_indices,
                "negative_ids": ex.negative_ids,
                "rotation_labels": ex.rotation_labels,
                "augment": ex.augment,
            }),
            Some(&dir.join("example.json")),
        )?;
    }
    eprintln!("wrote {n} examples to {}", out.display());
    Ok(())
}

fn gradcheck(config: Option<&Path>, instances: u64, out: Option<&Path>, overrides: &RunOverrides) -> Result<()> {
    let cfg = match config {
        Some(_) => load_config(config, overrides)?,
        None => {
            let mut c = RunConfig::tiny();
            overrides.apply(&mut c);
            c
        }
    };
    if instances == 0 {
        bail!(Error::InvalidArgument("--instances must be positive".into()));
    }
    let opts = FdOptions::default();
    let mut reports = Vec::new();
    let mut worst: f64 = 0.0;
    let mut failed = Vec::new();
    for i in 0..instances {
        let r = gradcheck_objective(&cfg, i, &opts).with_context(|| format!("instance {i}"))?;
        worst = worst.max(r.max_rel_error);
        if !r.passed() {
            failed.push(json!({"instance": i, "params": r.flagged()}));
        }
        reports.push(r);
    }
    let passed = failed.is_empty();
    emit(
        &json!({
            "instances": instances,
            "tol": opts.tol,
            "max_rel_error": worst,
            "passed": passed,
            "failed": failed,
            "reports": reports,
        }),
        out,
    )?;
    if !passed {
        bail!(Error::GradientMismatch(format!(
            "max relative error {worst:e} exceeds {:e}",
            opts.tol
        )));
    }
    Ok(())
}
