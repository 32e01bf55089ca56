//! `deshadow`: command-line surface for the two-stage shadow-removal
//! pipeline. Every subcommand exits 0 on success and nonzero with a one-line
//! diagnostic (naming the offending path where there is one) on failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use deshadow_core::checkpoint::{load_checkpoint, save_checkpoint, verify_config_hash, Checkpoint};
use deshadow_core::dataset::{
    build_pair_corpus, ingest_dataset, read_corpus, write_corpus, DatasetLayout, SampleRecord,
    Split,
};
use deshadow_core::eval::{
    channel_gap_stats, evaluate, load_eval_items, render_table, Metric, RegionSummary,
};
use deshadow_core::imaging::{load_image, save_image, ImagePlane};
use deshadow_core::net::{AblationVariant, CanetPipeline};
use deshadow_core::training::{
    apply_overrides, cpm_from_checkpoint, load_train_config, materialize_corpus, train_canet,
    train_cpm, CanetTrainer, StepResult, TrainConfig, TrainLogger,
};

#[derive(Parser)]
#[command(
    name = "deshadow",
    version,
    about = "Two-stage context-aware shadow removal"
)]
struct Cli {
    /// Training/eval config file (TOML or JSON); defaults to the built-in
    /// full-scale profile when omitted
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override the config's seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the config's ablation variant
    #[arg(long, global = true, value_name = "NAME")]
    variant: Option<String>,

    /// Output path; meaning is per-subcommand (file or directory)
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,

    /// Dotted-path config override, e.g. --set lr=0.003 (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build a balanced patch-pair corpus from a dataset
    BuildPairs(BuildPairsArgs),
    /// Train the patch-matching network on a corpus
    TrainCpm(TrainCpmArgs),
    /// Train the removal network
    Train(TrainArgs),
    /// Remove the shadow from a single image
    Remove(RemoveArgs),
    /// Evaluate a checkpoint over a dataset split
    Evaluate(EvaluateArgs),
    /// Per-channel shadow-region gap statistics over a dataset
    Stats(StatsArgs),
    /// Process a directory of frames, one output frame per input frame
    Video(VideoArgs),
}

#[derive(Args)]
struct BuildPairsArgs {
    /// Dataset root to ingest
    #[arg(long)]
    root: PathBuf,
    /// Dataset layout: istd or srd
    #[arg(long, default_value = "istd")]
    layout: String,
    /// Number of patch pairs to emit (must be even: labels are balanced)
    #[arg(long)]
    n: usize,
}

#[derive(Args)]
struct TrainCpmArgs {
    /// Corpus file written by build-pairs
    #[arg(long)]
    corpus: PathBuf,
    /// Base directory for resolving corpus-relative image paths
    #[arg(long, default_value = ".")]
    root: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root; defaults to the config's dataset_root
    #[arg(long)]
    root: Option<PathBuf>,
    /// Dataset layout: istd or srd
    #[arg(long, default_value = "istd")]
    layout: String,
    /// Matcher checkpoint to install before training
    #[arg(long, value_name = "FILE")]
    cpm: Option<PathBuf>,
    /// Resume from a removal-network checkpoint
    #[arg(long, value_name = "FILE")]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct RemoveArgs {
    /// Input image
    input: PathBuf,
    /// Trained removal checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    /// Also write the match set used for transfer as JSON
    #[arg(long, value_name = "FILE")]
    dump_matchset: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Trained removal checkpoint (omit with --all-variants)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset root
    #[arg(long)]
    root: PathBuf,
    /// Dataset layout: istd or srd
    #[arg(long, default_value = "istd")]
    layout: String,
    /// Split to evaluate: train, test, or all
    #[arg(long, default_value = "test")]
    split: String,
    /// Error metric: rmse or mae
    #[arg(long, default_value = "rmse")]
    metric: String,
    /// Evaluate canet_{variant}.ckpt for every variant from this directory
    #[arg(long, value_name = "DIR")]
    all_variants: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    /// Dataset root
    #[arg(long)]
    root: PathBuf,
    /// Dataset layout: istd or srd
    #[arg(long, default_value = "istd")]
    layout: String,
    /// Split to cover: train, test, or all
    #[arg(long, default_value = "all")]
    split: String,
}

#[derive(Args)]
struct VideoArgs {
    /// Directory of input frames, processed in filename order
    input_dir: PathBuf,
    /// Trained removal checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = effective_config(&cli)?;
    match &cli.cmd {
        Cmd::BuildPairs(args) => cmd_build_pairs(&cli, &cfg, args),
        Cmd::TrainCpm(args) => cmd_train_cpm(&cli, cfg, args),
        Cmd::Train(args) => cmd_train(&cli, cfg, args),
        Cmd::Remove(args) => cmd_remove(&cli, &cfg, args),
        Cmd::Evaluate(args) => cmd_evaluate(&cli, &cfg, args),
        Cmd::Stats(args) => cmd_stats(&cli, args),
        Cmd::Video(args) => cmd_video(&cli, &cfg, args),
    }
}

/// Resolve the run config: file (or built-in default), then `--set`
/// overrides, then the dedicated `--seed`/`--variant` flags.
fn effective_config(cli: &Cli) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(path) => load_train_config(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => TrainConfig::default(),
    };
    apply_overrides(&mut cfg, &cli.set).context("applying --set overrides")?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(name) = &cli.variant {
        cfg.variant = AblationVariant::from_str(name)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_layout(name: &str) -> Result<DatasetLayout> {
    match name {
        "istd" => Ok(DatasetLayout::Istd),
        "srd" => Ok(DatasetLayout::Srd),
        other => bail!("unknown dataset layout '{other}' (expected istd or srd)"),
    }
}

fn parse_split(name: &str) -> Result<Option<Split>> {
    match name {
        "train" => Ok(Some(Split::Train)),
        "test" => Ok(Some(Split::Test)),
        "all" => Ok(None),
        other => bail!("unknown split '{other}' (expected train, test, or all)"),
    }
}

fn records_for(root: &Path, layout: &str, split: Option<Split>) -> Result<Vec<SampleRecord>> {
    let layout = parse_layout(layout)?;
    let report = ingest_dataset(root, layout)
        .with_context(|| format!("ingesting dataset {}", root.display()))?;
    let records: Vec<SampleRecord> = report
        .records
        .into_iter()
        .filter(|r| split.map_or(true, |s| r.split == s))
        .collect();
    if records.is_empty() {
        bail!("no usable records under {}", root.display());
    }
    Ok(records)
}

/// Rebuild the pipeline a checkpoint was trained with; the config hash
/// refuses weights from a different configuration.
fn load_pipeline(cfg: &TrainConfig, ckpt: &Checkpoint) -> Result<CanetPipeline> {
    verify_config_hash(ckpt, cfg)?;
    let mut pipe = CanetPipeline::init(cfg.to_pipeline_config(), cfg.seed)?;
    pipe.import_store(&ckpt.weights)?;
    Ok(pipe)
}

fn load_checkpoint_at(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn cmd_build_pairs(cli: &Cli, cfg: &TrainConfig, args: &BuildPairsArgs) -> Result<()> {
    let records = records_for(&args.root, &args.layout, Some(Split::Train))?;
    let corpus = build_pair_corpus(&records, args.n, cfg.seed)?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("corpus.json"));
    write_corpus(&out, &corpus)?;
    println!(
        "wrote {} pairs ({} match / {} non-match) to {}",
        corpus.pairs.len(),
        corpus.header.n_match,
        corpus.header.n_nonmatch,
        out.display()
    );
    Ok(())
}

fn cmd_train_cpm(cli: &Cli, mut cfg: TrainConfig, args: &TrainCpmArgs) -> Result<()> {
    if let Some(dir) = &cli.out {
        cfg.checkpoint_dir = dir.clone();
    }
    let corpus = read_corpus(&args.corpus)
        .with_context(|| format!("reading corpus {}", args.corpus.display()))?;
    let examples = materialize_corpus(&corpus, &args.root)?;
    let mut logger = TrainLogger::append(&cfg.checkpoint_dir.join("cpm_log.jsonl"))?;
    let outcome = train_cpm(&cfg, &examples, &mut logger, None)?;
    if let Some(reason) = outcome.aborted {
        bail!(
            "matcher training aborted ({reason}); last good state kept at {}",
            outcome.checkpoint_path.display()
        );
    }
    let last = outcome.epochs.last().expect("at least one epoch");
    println!(
        "trained matcher for {} epochs (held-out accuracy {:.3}) -> {}",
        outcome.epochs.len(),
        last.held_accuracy,
        outcome.checkpoint_path.display()
    );
    Ok(())
}

fn load_pairs(records: &[SampleRecord]) -> Result<Vec<(ImagePlane, ImagePlane)>> {
    records
        .iter()
        .map(|r| {
            let shadow = load_image(&r.shadow_img_path)?;
            let free = load_image(&r.shadowfree_img_path)?;
            Ok((shadow, free))
        })
        .collect()
}

fn cmd_train(cli: &Cli, mut cfg: TrainConfig, args: &TrainArgs) -> Result<()> {
    if let Some(dir) = &cli.out {
        cfg.checkpoint_dir = dir.clone();
    }
    let root = args.root.clone().unwrap_or_else(|| cfg.dataset_root.clone());
    let records = records_for(&root, &args.layout, Some(Split::Train))?;
    let pairs = load_pairs(&records)?;
    let mut logger = TrainLogger::append(&cfg.checkpoint_dir.join("train_log.jsonl"))?;

    if let Some(resume_path) = &args.resume {
        let ckpt = load_checkpoint_at(resume_path)?;
        let mut trainer = CanetTrainer::resume(&cfg, pairs, ckpt)?;
        let total = (cfg.epochs_canet * trainer.steps_per_epoch()) as u64;
        while trainer.current_step() < total {
            match trainer.step_once()? {
                StepResult::Stepped(log) => logger.log(&log)?,
                StepResult::Diverged { step, observed } => {
                    let path = save_canet(&trainer, &cfg)?;
                    bail!("training diverged at step {step} (loss {observed:e}); last good state kept at {}", path.display());
                }
            }
        }
        let path = save_canet(&trainer, &cfg)?;
        println!(
            "resumed to step {} ({} variant) -> {}",
            trainer.current_step(),
            cfg.variant,
            path.display()
        );
        return Ok(());
    }

    let cpm = match &args.cpm {
        Some(path) => Some(cpm_from_checkpoint(&load_checkpoint_at(path)?, cfg.seed)?),
        None => None,
    };
    let outcome = train_canet(&cfg, pairs, cpm, &mut logger)?;
    if let Some(reason) = outcome.aborted {
        bail!(
            "training aborted ({reason}); last good state kept at {}",
            outcome.checkpoint_path.display()
        );
    }
    match outcome.validation_rmse {
        Some(rmse) => println!(
            "trained {} steps ({} variant, validation RMSE {:.3}) -> {}",
            outcome.steps.len(),
            cfg.variant,
            rmse,
            outcome.checkpoint_path.display()
        ),
        None => println!(
            "trained {} steps ({} variant) -> {}",
            outcome.steps.len(),
            cfg.variant,
            outcome.checkpoint_path.display()
        ),
    }
    Ok(())
}

fn save_canet(trainer: &CanetTrainer, cfg: &TrainConfig) -> Result<PathBuf> {
    let path = cfg
        .checkpoint_dir
        .join(format!("canet_{}.ckpt", cfg.variant.name()));
    let ckpt = trainer.checkpoint()?;
    save_checkpoint(&ckpt, &path)?;
    Ok(path)
}

fn cmd_remove(cli: &Cli, cfg: &TrainConfig, args: &RemoveArgs) -> Result<()> {
    let ckpt = load_checkpoint_at(&args.checkpoint)?;
    let pipe = load_pipeline(cfg, &ckpt)?;
    let img = load_image(&args.input)
        .with_context(|| format!("loading image {}", args.input.display()))?;
    let removal = pipe.remove_shadow(&img)?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out.png"));
    save_image(&removal.final_rgb, &out)?;
    if let Some(dump) = &args.dump_matchset {
        let json = serde_json::to_vec_pretty(&removal.matchset)?;
        std::fs::write(dump, json).with_context(|| format!("writing {}", dump.display()))?;
    }
    println!(
        "wrote {} ({} queries matched)",
        out.display(),
        removal.matchset.queries.len()
    );
    Ok(())
}

fn cmd_evaluate(cli: &Cli, cfg: &TrainConfig, args: &EvaluateArgs) -> Result<()> {
    let metric = Metric::from_str(&args.metric)?;
    let records = records_for(&args.root, &args.layout, parse_split(&args.split)?)?;
    let items = load_eval_items(&records)?;

    if let Some(dir) = &args.all_variants {
        return evaluate_all_variants(cli, cfg, dir, &items, metric);
    }

    let Some(ckpt_path) = &args.checkpoint else {
        bail!("evaluate needs --checkpoint (or --all-variants <dir>)");
    };
    let ckpt = load_checkpoint_at(ckpt_path)?;
    let report = evaluate(&ckpt, cfg, &items, metric)?;
    print!("{}", render_table(&report));
    if let Some(out) = &cli.out {
        let json = serde_json::to_vec_pretty(&report)?;
        std::fs::write(out, json).with_context(|| format!("writing {}", out.display()))?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

/// One aggregate row per ablation variant, reading `canet_{variant}.ckpt`
/// from `dir`. Each checkpoint must come from this config with only the
/// variant changed.
fn evaluate_all_variants(
    cli: &Cli,
    cfg: &TrainConfig,
    dir: &Path,
    items: &[deshadow_core::eval::EvalItem],
    metric: Metric,
) -> Result<()> {
    let mut rows: Vec<(String, RegionSummary)> = Vec::new();
    for variant in AblationVariant::ALL {
        let path = dir.join(format!("canet_{}.ckpt", variant.name()));
        let ckpt = load_checkpoint_at(&path)?;
        let mut vcfg = cfg.clone();
        vcfg.variant = variant;
        let report = evaluate(&ckpt, &vcfg, items, metric)?;
        rows.push((variant.name().to_string(), report.aggregate));
    }
    let name_w = rows
        .iter()
        .map(|(n, _)| n.len())
        .chain(["variant".len()])
        .max()
        .unwrap();
    let fmt = |v: Option<f64>| match v {
        Some(x) => format!("{x:>10.4}"),
        None => format!("{:>10}", "-"),
    };
    println!(
        "{:<name_w$} {:>10} {:>10} {:>10}   ({metric})",
        "variant", "shadow", "non_shadow", "all"
    );
    for (name, agg) in &rows {
        println!(
            "{name:<name_w$} {} {} {}",
            fmt(agg.shadow),
            fmt(agg.non_shadow),
            fmt(Some(agg.all))
        );
    }
    if let Some(out) = &cli.out {
        let json = serde_json::to_vec_pretty(&serde_json::json!({
            "schema_version": 1,
            "metric": metric.to_string(),
            "rows": rows
                .iter()
                .map(|(name, agg)| serde_json::json!({ "variant": name, "aggregate": agg }))
                .collect::<Vec<_>>(),
        }))?;
        std::fs::write(out, json).with_context(|| format!("writing {}", out.display()))?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn cmd_stats(cli: &Cli, args: &StatsArgs) -> Result<()> {
    let records = records_for(&args.root, &args.layout, parse_split(&args.split)?)?;
    let stats = channel_gap_stats(&records)?;
    println!(
        "shadow-region channel gaps over {} images: L {:.4}  A {:.4}  B {:.4}",
        stats.images_used, stats.l, stats.a, stats.b
    );
    if stats.images_skipped > 0 {
        println!("({} images had no shadow pixels and were skipped)", stats.images_skipped);
    }
    if let Some(out) = &cli.out {
        let json = serde_json::to_vec_pretty(&stats)?;
        std::fs::write(out, json).with_context(|| format!("writing {}", out.display()))?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn cmd_video(cli: &Cli, cfg: &TrainConfig, args: &VideoArgs) -> Result<()> {
    let Some(out_dir) = cli.out.clone() else {
        bail!("video needs --out <dir> for the output frames");
    };
    let ckpt = load_checkpoint_at(&args.checkpoint)?;
    let pipe = load_pipeline(cfg, &ckpt)?;

    let mut frames: Vec<PathBuf> = std::fs::read_dir(&args.input_dir)
        .with_context(|| format!("reading frame directory {}", args.input_dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .with_context(|| format!("reading frame directory {}", args.input_dir.display()))?;
    frames.retain(|p| {
        matches!(
            p.extension().and_then(|e| e.to_str()),
            Some("png") | Some("jpg") | Some("jpeg") | Some("bmp")
        )
    });
    // filename order defines frame order; each frame depends only on itself
    frames.sort();
    if frames.is_empty() {
        bail!("no frames found under {}", args.input_dir.display());
    }
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    for frame in &frames {
        let img = load_image(frame)?;
        let removal = pipe.remove_shadow(&img)?;
        let name = frame.file_name().expect("frame paths have file names");
        save_image(&removal.final_rgb, &out_dir.join(name))?;
    }
    println!("processed {} frames -> {}", frames.len(), out_dir.display());
    Ok(())
}
