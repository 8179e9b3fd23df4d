use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use oarseg::checkpoint::{load_checkpoint, save_checkpoint};
use oarseg::dataset::{load_dataset, load_index, save_dataset};
use oarseg::error::{AppError, Result, EXIT_OK, EXIT_USAGE};
use oarseg::files::{create_dir, read_json, write_atomic, write_json};
use oarseg::runner::{load_experiment_config, run_experiment, CellStatus};
use oarseg::tables::{training_log_csv, validation_csv};
use oarseg::volume_io::{load_volume, save_volume};
use oarseg_core::evaluation::{binarize, evaluate_volume, infer_volume};
use oarseg_core::experiment::{cells, generate_split, thin_labels, ExperimentConfig};
use oarseg_core::network::NetworkConfig;
use oarseg_core::phantom::PhantomSpec;
use oarseg_core::sampling::{apply_plan, sample, SamplingMode, SubsetPlan};
use oarseg_core::training::{train, TrainerConfig};
use oarseg_core::volume::LabeledVolume;

/// Masked multi-label 3D segmentation with incomplete labels.
#[derive(Debug, Parser)]
#[command(name = "oarseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic phantom volumes and a manifest.
    Generate {
        /// Phantom spec JSON; the built-in 32³ five-class desk spec when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Number of volumes.
        #[arg(long)]
        count: usize,
        /// Master seed; each volume derives its own seed from it.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Volume ids are `<prefix>_000`, `<prefix>_001`, ...
        #[arg(long, default_value = "vol")]
        prefix: String,
        /// Keep all labels on the first N volumes and thin the rest. All
        /// volumes stay fully labeled when omitted.
        #[arg(long)]
        fully_labeled: Option<usize>,
        /// Per-class probability that a thinned volume keeps a label.
        #[arg(long, default_value_t = 0.85)]
        keep_probability: f64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample a concentrated or distributed label subset from a manifest.
    Sample {
        /// Dataset manifest (`manifest.json` written by `generate`).
        #[arg(long)]
        index: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: SamplingMode,
        /// Times each class is labeled.
        #[arg(long)]
        m: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Plan JSON to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network on the volumes and labels selected by a plan.
    Train {
        /// Dataset directory holding the plan's volumes.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        /// Network config JSON; the desk network when omitted.
        #[arg(long)]
        net: Option<PathBuf>,
        /// Trainer config JSON; missing fields take the full-scale defaults
        /// (lr 0.001, 15000 iterations, batch 4, 64³ patches). The desk
        /// trainer is used when the flag is omitted.
        #[arg(long)]
        trainer: Option<PathBuf>,
        /// Fully labeled validation dataset for best-checkpoint selection.
        #[arg(long)]
        val_data: Option<PathBuf>,
        /// Run directory for the checkpoint, logs and resolved config.
        #[arg(long)]
        out: PathBuf,
        /// Print the resolved config and stop.
        #[arg(long)]
        dry_run: bool,
    },
    /// Predict label masks for one volume.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Volume id inside the dataset directory.
        #[arg(long)]
        id: String,
        /// Directory for the predicted volume (image plus one mask per class).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        patch: usize,
        #[arg(long, default_value_t = 0.5)]
        overlap: f64,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Score a model with per-class Dice on a dataset.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Subdirectory of `--data` to evaluate, e.g. `test`.
        #[arg(long)]
        split: Option<String>,
        /// CSV with columns volume,class,dice.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        patch: usize,
        #[arg(long, default_value_t = 0.5)]
        overlap: f64,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Run or resume the (mode, M, repetition) experiment grid.
    Experiment {
        /// Experiment config JSON.
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's output_dir.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// List the grid cells and stop.
        #[arg(long)]
        dry_run: bool,
        /// Write the desk grid config to `--config` and stop. An existing
        /// file is left alone.
        #[arg(long, conflicts_with = "dry_run")]
        init: bool,
    },
}

fn parse_mode(s: &str) -> std::result::Result<SamplingMode, String> {
    SamplingMode::parse(s).ok_or_else(|| format!("expected concentrated or distributed, got {s:?}"))
}

fn generate(
    spec: Option<&Path>,
    count: usize,
    seed: u64,
    prefix: &str,
    fully_labeled: Option<usize>,
    keep_probability: f64,
    out: &Path,
) -> Result<()> {
    if count == 0 {
        return Err(AppError::Usage("--count must be positive".into()));
    }
    if !(0.0..=1.0).contains(&keep_probability) {
        return Err(AppError::Usage("--keep-probability must lie in [0, 1]".into()));
    }
    let spec = match spec {
        Some(p) => read_json::<PhantomSpec>(p)?,
        None => PhantomSpec::desk(),
    };
    spec.validate()?;
    let mut volumes = generate_split(&spec, seed, prefix, count)?;
    if let Some(k) = fully_labeled {
        thin_labels(&mut volumes, k, keep_probability, seed)?;
    }
    let index = save_dataset(out, &volumes)?;
    println!(
        "wrote {} volumes ({} fully labeled) and {}",
        volumes.len(),
        index.fully_labeled_count(),
        out.join("manifest.json").display()
    );
    Ok(())
}

fn sample_cmd(index: &Path, mode: SamplingMode, m: usize, seed: u64, out: &Path) -> Result<()> {
    let idx = load_index(index)?;
    let plan = sample(&idx, mode, m, seed)?;
    plan.check(&idx).map_err(|e| AppError::Runtime(format!("sampled plan fails its invariants: {e}")))?;
    write_json(out, &plan)?;
    println!(
        "{mode} plan, M={m}: {} labeled structures over {} volumes -> {}",
        plan.labeled_structures(),
        plan.used_volumes(),
        out.display()
    );
    Ok(())
}

fn print_trainer(t: &TrainerConfig, n: &NetworkConfig) {
    println!("network: num_classes={} base_width={} num_res_blocks={} kernel_size={} head_bias_init={}",
        n.num_classes, n.base_width, n.num_res_blocks, n.kernel_size, n.head_bias_init);
    println!(
        "trainer: learning_rate={} iterations={} batch_size={} patch_size={} foreground_patch_fraction={} seed={} \
         validation_interval={} inference_overlap={} threshold={}",
        t.learning_rate,
        t.iterations,
        t.batch_size,
        t.patch_size,
        t.foreground_patch_fraction,
        t.seed,
        t.validation_interval,
        t.inference_overlap,
        t.threshold
    );
}

#[derive(serde::Serialize)]
struct RunConfig<'a> {
    network: &'a NetworkConfig,
    trainer: &'a TrainerConfig,
    plan: &'a SubsetPlan,
}

#[derive(serde::Serialize)]
struct RunSummary<'a> {
    selected_iteration: usize,
    warnings: &'a [String],
}

#[allow(clippy::too_many_arguments)]
fn train_cmd(
    data: &Path,
    plan: &Path,
    net: Option<&Path>,
    trainer: Option<&Path>,
    val_data: Option<&Path>,
    out: &Path,
    dry_run: bool,
) -> Result<()> {
    let plan: SubsetPlan = read_json(plan)?;
    let trainer = match trainer {
        Some(p) => read_json::<TrainerConfig>(p)?,
        None => TrainerConfig::desk(),
    };
    trainer.validate()?;
    let net = match net {
        Some(p) => read_json::<NetworkConfig>(p)?,
        None => NetworkConfig::desk(plan.roster.len()),
    };
    net.validate()?;
    print_trainer(&trainer, &net);
    if dry_run {
        return Ok(());
    }
    let (index, volumes) = load_dataset(data)?;
    plan.check(&index).map_err(|e| AppError::malformed(data, format!("plan does not fit this dataset: {e}")))?;
    let selected = apply_plan(&plan, &volumes)?;
    let validation: Vec<LabeledVolume> = match val_data {
        Some(d) => load_dataset(d)?.1,
        None => Vec::new(),
    };
    create_dir(out)?;
    write_json(&out.join("config.json"), &RunConfig { network: &net, trainer: &trainer, plan: &plan })?;
    let (params, log) = train(&selected, &validation, &net, &trainer)?;
    for w in &log.warnings {
        eprintln!("warning: {w}");
    }
    save_checkpoint(&out.join("model.ckpt"), &params)?;
    write_atomic(&out.join("train_log.csv"), &training_log_csv(&log))?;
    write_atomic(&out.join("validation.csv"), &validation_csv(&log))?;
    write_json(&out.join("summary.json"), &RunSummary { selected_iteration: log.selected_iteration, warnings: &log.warnings })?;
    let last = log.rows.last().map(|r| r.total);
    println!(
        "trained {} iterations on {} volumes; final loss {}; selected iteration {} -> {}",
        trainer.iterations,
        selected.len(),
        last.map(|v| format!("{v:.6}")).unwrap_or_else(|| "n/a".into()),
        log.selected_iteration,
        out.display()
    );
    Ok(())
}

fn check_window(patch: usize, overlap: f64, threshold: f64) -> Result<()> {
    if patch == 0 || !patch.is_multiple_of(4) || patch < 8 {
        return Err(AppError::Usage(format!("--patch {patch} must be a multiple of 4 and at least 8")));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(AppError::Usage("--overlap must lie in [0, 1)".into()));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(AppError::Usage("--threshold must lie in (0, 1)".into()));
    }
    Ok(())
}

fn infer_cmd(model: &Path, data: &Path, id: &str, out: &Path, patch: usize, overlap: f64, threshold: f64) -> Result<()> {
    check_window(patch, overlap, threshold)?;
    let params = load_checkpoint(model)?;
    let volume = load_volume(data, id)?;
    if params.config().num_classes != volume.roster.len() {
        return Err(AppError::malformed(
            data,
            format!("model predicts {} classes, volume roster has {}", params.config().num_classes, volume.roster.len()),
        ));
    }
    let inference = infer_volume(&params, &volume.image, patch, overlap)?;
    let labels = binarize(&inference.probs, threshold);
    let masks = (0..volume.roster.len()).map(|c| labels.channel(c).map(Some)).collect::<oarseg_core::Result<Vec<_>>>()?;
    let predicted = LabeledVolume { masks, ..volume };
    create_dir(out)?;
    save_volume(out, &predicted)?;
    println!("predicted {} classes for {id} from {} windows -> {}", predicted.roster.len(), inference.windows, out.display());
    Ok(())
}

fn evaluate_cmd(
    model: &Path,
    data: &Path,
    split: Option<&str>,
    out: &Path,
    patch: usize,
    overlap: f64,
    threshold: f64,
) -> Result<()> {
    check_window(patch, overlap, threshold)?;
    let params = load_checkpoint(model)?;
    let dir = match split {
        Some(s) => data.join(s),
        None => data.to_path_buf(),
    };
    let (_, volumes) = load_dataset(&dir)?;
    if volumes.is_empty() {
        return Err(oarseg_core::Error::Empty("evaluation split").into());
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["volume", "class", "dice"]).expect("in-memory CSV");
    let mut scores = Vec::new();
    for v in &volumes {
        let d = evaluate_volume(&params, v, patch, overlap, threshold)?;
        for (class, s) in v.roster.iter().zip(&d.dice) {
            w.write_record([v.id.as_str(), class, &s.map(|x| x.to_string()).unwrap_or_default()]).expect("in-memory CSV");
            scores.extend(*s);
        }
    }
    write_atomic(out, &w.into_inner().expect("in-memory CSV"))?;
    let mean = oarseg_core::evaluation::mean_defined(scores.iter().map(|&s| Some(s)));
    println!(
        "evaluated {} volumes; mean Dice {} -> {}",
        volumes.len(),
        mean.map(|m| format!("{m:.4}")).unwrap_or_else(|| "undefined".into()),
        out.display()
    );
    Ok(())
}

fn experiment_cmd(config: &Path, output_dir: Option<&Path>, dry_run: bool, init: bool) -> Result<()> {
    if init {
        if config.exists() {
            return Err(AppError::Usage(format!("{} already exists", config.display())));
        }
        let dir = output_dir.map_or_else(|| "results".into(), |d| d.to_string_lossy().into_owned());
        write_json(config, &ExperimentConfig::desk(&dir))?;
        println!("wrote {}", config.display());
        return Ok(());
    }
    let mut cfg = load_experiment_config(config)?;
    if let Some(d) = output_dir {
        cfg.output_dir = d.to_string_lossy().into_owned();
    }
    if dry_run {
        for c in cells(&cfg) {
            println!("{} mode={} m={} repetition={} seed={}", c.run_id(), c.mode, c.m, c.repetition, c.seed);
        }
        println!("{} cells; output directory {}", cells(&cfg).len(), cfg.output_dir);
        return Ok(());
    }
    let report = run_experiment(&cfg, &|line: &str| eprintln!("{line}"))?;
    println!(
        "{} trained, {} already complete, {} skipped; aggregate -> {}",
        report.count(CellStatus::Trained),
        report.count(CellStatus::Resumed),
        report.count(CellStatus::Skipped),
        Path::new(&cfg.output_dir).join("aggregate.csv").display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { spec, count, seed, prefix, fully_labeled, keep_probability, out } => {
            generate(spec.as_deref(), count, seed, &prefix, fully_labeled, keep_probability, &out)
        }
        Command::Sample { index, mode, m, seed, out } => sample_cmd(&index, mode, m, seed, &out),
        Command::Train { data, plan, net, trainer, val_data, out, dry_run } => {
            train_cmd(&data, &plan, net.as_deref(), trainer.as_deref(), val_data.as_deref(), &out, dry_run)
        }
        Command::Infer { model, data, id, out, patch, overlap, threshold } => {
            infer_cmd(&model, &data, &id, &out, patch, overlap, threshold)
        }
        Command::Evaluate { model, data, split, out, patch, overlap, threshold } => {
            evaluate_cmd(&model, &data, split.as_deref(), &out, patch, overlap, threshold)
        }
        Command::Experiment { config, output_dir, dry_run, init } => {
            experiment_cmd(&config, output_dir.as_deref(), dry_run, init)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
