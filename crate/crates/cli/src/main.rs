use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use ccg::checkpoint::Checkpoint;
use ccg::config::{AblationMode, TrainConfig};
use ccg::data::{
    generate_synthetic_dataset, write_dataset, Dataset, DatasetFiles, SyntheticConfig,
};
use ccg::eval::{accuracy_table, evaluate, export_heatmap, heatmap_file_name, IOU_THRESHOLDS};
use ccg::train::{split_for, Start, Trainer, LATEST_CHECKPOINT};

#[derive(Parser)]
#[command(
    name = "ccg",
    version,
    about = "Weakly-supervised lesion localization with cross-image graphs"
)]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset in the on-disk dataset layout.
    Synth(SynthArgs),
    /// Train a model and write the step log and per-epoch checkpoints.
    Train(TrainArgs),
    /// Write T(IoU) accuracy tables for a checkpoint.
    Eval(EvalArgs),
    /// Write heatmap overlays for a checkpoint.
    Viz(VizArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    n_images: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 0.2)]
    fraction_annotated: f64,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// baseline, IR, IK, KR or a `+` combination such as IR+IK+KR.
    #[arg(long)]
    ablation: Option<AblationMode>,
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self, base: TrainConfig) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::load(path)
                .with_context(|| format!("reading config {}", path.display()))?,
            None => base,
        };
        if let Some(mode) = self.ablation {
            cfg.ablation = mode;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        for kv in &self.overrides {
            let Some((k, v)) = kv.split_once('=') else {
                bail!("--set expects KEY=VALUE, got {kv:?}");
            };
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Resume from this checkpoint; its stored config is used.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitChoice {
    Test,
    Train,
    All,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, default_value = "eval")]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitChoice,
    /// Test-time feature up-sampling factor (overrides the checkpoint config).
    #[arg(long)]
    upsample: Option<usize>,
}

#[derive(Args)]
struct VizArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, default_value = "viz")]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitChoice,
    /// Stop after this many images.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    upsample: Option<usize>,
}

fn load_data(dir: &Path, size: usize) -> Result<Dataset> {
    DatasetFiles::in_dir(dir)
        .load(size)
        .with_context(|| format!("loading dataset from {}", dir.display()))
}

fn select(cfg: &TrainConfig, n: usize, which: SplitChoice) -> Result<Vec<usize>> {
    Ok(match which {
        SplitChoice::All => (0..n).collect(),
        SplitChoice::Train => split_for(cfg, n)?.train,
        SplitChoice::Test => split_for(cfg, n)?.test,
    })
}

fn synth(args: &SynthArgs) -> Result<()> {
    let mut cfg = SyntheticConfig::new(args.seed, args.n_images, args.classes);
    cfg.fraction_annotated = args.fraction_annotated;
    cfg.image_size = args.image_size;
    let ds = generate_synthetic_dataset(&cfg)?;
    write_dataset(&ds, &args.out)?;
    println!("wrote {} images to {}", ds.len(), args.out.display());
    Ok(())
}

fn train(args: &TrainArgs) -> Result<()> {
    let resume = args
        .checkpoint
        .as_deref()
        .map(Checkpoint::load)
        .transpose()?;
    let cfg = match &resume {
        Some(ck) => ck.config.clone(),
        None => args.config.resolve(TrainConfig::default())?,
    };
    let ds = load_data(&args.data_dir, cfg.input_size)?;
    let split = split_for(&cfg, ds.len())?;
    info!(
        "{} training / {} held-out samples, mode {}",
        split.train.len(),
        split.test.len(),
        cfg.ablation
    );
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("config.txt"), cfg.to_text())?;
    let start = Instant::now();
    let trainer = Trainer::new(cfg, &ds, split.train).with_out_dir(&args.out);
    let outcome = match &resume {
        Some(ck) => trainer.run(Start::Resume(ck))?,
        None => trainer.run(Start::Fresh)?,
    };
    let summary = serde_json::json!({
        "epochs_completed": outcome.epochs_completed,
        "steps": outcome.step,
        "epoch_mean_l_all": outcome.epoch_means,
        "seconds": start.elapsed().as_secs_f64(),
    });
    fs::write(
        args.out.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    println!(
        "trained {} epochs ({} steps); checkpoint {}",
        outcome.epochs_completed,
        outcome.step,
        args.out.join(LATEST_CHECKPOINT).display()
    );
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let (model, _) = ck.restore()?;
    let ds = load_data(&args.data_dir, ck.config.input_size)?;
    if ds.num_classes() != ck.num_classes {
        bail!(
            "dataset has {} classes, checkpoint {}",
            ds.num_classes(),
            ck.num_classes
        );
    }
    let indices = select(&ck.config, ds.len(), args.split)?;
    let upsample = args.upsample.unwrap_or(ck.config.upsample);
    let results = evaluate(&model, &ds, &indices, ck.config.threshold, upsample)?;
    let table = accuracy_table(&results, &IOU_THRESHOLDS, ds.vocab.names());
    table.write(&args.out)?;
    let mut per_pair = String::from("sample_id,class,iou\n");
    for r in &results {
        per_pair.push_str(&format!(
            "{},{},{}\n",
            r.sample_id,
            ds.vocab.name(r.class),
            r.iou
        ));
    }
    fs::write(args.out.join("iou.csv"), per_pair)?;
    print!("{}", table.to_text());
    Ok(())
}

fn viz(args: &VizArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let (model, _) = ck.restore()?;
    let ds = load_data(&args.data_dir, ck.config.input_size)?;
    let mut indices = select(&ck.config, ds.len(), args.split)?;
    if let Some(limit) = args.limit {
        indices.truncate(limit);
    }
    let upsample = args.upsample.unwrap_or(ck.config.upsample);
    fs::create_dir_all(&args.out)?;
    let results = evaluate(&model, &ds, &indices, ck.config.threshold, upsample)?;
    for r in &results {
        let sample = ds
            .samples
            .iter()
            .find(|s| s.id == r.sample_id)
            .expect("result from dataset");
        let boxes: Vec<_> = sample.boxes_of(r.class).copied().collect();
        let path = args
            .out
            .join(heatmap_file_name(&sample.id, ds.vocab.name(r.class)));
        export_heatmap(sample, r.mask.view(), &boxes, &path)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    println!("wrote {} heatmaps to {}", results.len(), args.out.display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Viz(a) => viz(a),
    }
}
