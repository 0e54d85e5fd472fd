use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use segtrans_core::{PresetName, VariantKind};
use segtrans_data::{
    brats_to_half_slices, generate_cluttered_mnist, select_labeled_subset, validate, BratsSliceSpec, ClutterPreset,
    ClutterSpec, DatasetManifest, DigitFolds, Domain, Fold, MANIFEST_FILE,
};
use segtrans_harness::loader::{load_batch, stack, Dataset};
use segtrans_harness::{
    emit_panels, evaluate, load_checkpoint, run_experiment, residual_localization, Error, ExperimentConfig, Result, RunOptions,
};

#[derive(Parser)]
#[command(name = "segtrans", version, about = "Semi-supervised segmentation through image-to-image translation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a cluttered-digit benchmark or extract MRI half-slices.
    GenData(GenData),
    /// Train every configured seed (or one) and write the report.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Dice scores of a checkpoint on one fold.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        fold: Fold,
        /// Dataset to use instead of the one recorded in the checkpoint.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Evaluate at most this many images.
        #[arg(long)]
        limit: Option<usize>,
        /// Also report how the translation residual concentrates on the target.
        #[arg(long)]
        residual: bool,
    },
    /// Render translation and segmentation grids for a few examples.
    Panels {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value = "test")]
        fold: Fold,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Output directory (defaults to the checkpoint's directory).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check manifest invariants and the files it references.
    ValidateData {
        #[arg(long)]
        manifest: PathBuf,
        /// Only check the manifest itself.
        #[arg(long)]
        skip_files: bool,
    },
    /// Print a configuration file with every setting at its default.
    PrintConfig {
        #[arg(long, default_value = "mnist48")]
        preset: PresetName,
        #[arg(long, default_value = "proposed")]
        variant: VariantKind,
        #[arg(long, default_value = "data/manifest.jsonl")]
        manifest: PathBuf,
    },
}

#[derive(Args)]
struct GenData {
    /// Output directory; the manifest is written inside it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cluttered-digit preset: simple48, hard48 or large128.
    #[arg(long, default_value = "simple48", conflicts_with = "brats_dir")]
    preset: ClutterPreset,
    /// Examples per domain in the train, valid and test folds.
    #[arg(long, default_value_t = 50_000)]
    train: usize,
    #[arg(long, default_value_t = 5_000)]
    valid: usize,
    #[arg(long, default_value_t = 5_000)]
    test: usize,
    /// Directory with MNIST IDX files; procedural digits are used otherwise.
    #[arg(long)]
    mnist_dir: Option<PathBuf>,
    /// Procedural source digits per fold (train; valid and test get a fifth).
    #[arg(long, default_value_t = 10_000)]
    source_digits: usize,
    /// Directory of MRI cases (one subdirectory per case).
    #[arg(long)]
    brats_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0.01)]
    labeled_fraction: f64,
    /// Class whose examples may be labeled (digits only).
    #[arg(long, default_value_t = 9)]
    label_class: u8,
}

fn gen_data(args: &GenData) -> Result<()> {
    std::fs::create_dir_all(&args.out).map_err(|source| Error::Io { path: args.out.clone(), source })?;
    let labeled = match &args.brats_dir {
        Some(dir) => {
            let out = brats_to_half_slices(dir, &BratsSliceSpec::default(), args.seed, &args.out)?;
            for (case, reason) in &out.skipped {
                eprintln!("skipped {case}: {reason}");
            }
            let m = select_labeled_subset(&out.manifest, args.labeled_fraction, None, args.seed)?;
            m.write(&args.out.join(MANIFEST_FILE))?;
            m
        }
        None => {
            let source = match &args.mnist_dir {
                Some(dir) => DigitFolds::from_idx_dir(dir, 5_000)?,
                None => {
                    let n = args.source_digits;
                    DigitFolds::procedural(n, (n / 5).max(1), (n / 5).max(1), args.seed)
                }
            };
            let mut specs = ClutterSpec::preset_folds_sized(args.preset, [args.train, args.valid, args.test]);
            for s in &mut specs {
                s.labeled_fraction = args.labeled_fraction;
                s.digit_filter_for_labels = args.label_class;
            }
            generate_cluttered_mnist(&specs, &source, args.seed, &args.out)?
        }
    };
    println!(
        "{} examples ({} labeled) in {}",
        labeled.records.len(),
        labeled.n_labeled(),
        args.out.display()
    );
    Ok(())
}

fn config_of(state: &segtrans_harness::TrainingState, manifest: Option<&Path>) -> Result<(ExperimentConfig, Dataset)> {
    let cfg: ExperimentConfig = match &state.progress.config_json {
        Some(json) => serde_json::from_str(json)?,
        None => return Err(Error::Config("checkpoint carries no configuration; pass --manifest".into())),
    };
    let path = manifest.map(Path::to_path_buf).unwrap_or_else(|| cfg.data.manifest.clone());
    let data = Dataset::open(&path)?;
    Ok((cfg, data))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => gen_data(&args),
        Command::Train { config, seed, resume } => {
            let cfg = ExperimentConfig::load(&config)?;
            let report = run_experiment(&cfg, &RunOptions { seed, resume })?;
            print!("{}", report.render_table());
            Ok(())
        }
        Command::Evaluate { checkpoint, fold, manifest, threshold, limit, residual } => {
            let state = load_checkpoint(&checkpoint)?;
            let (cfg, data) = config_of(&state, manifest.as_deref())?;
            let limit = limit.or(cfg.experiment.max_eval_examples);
            let model = &state.trainer.model;
            let dice = evaluate(model, &data, fold, threshold, limit)?;
            let localization = if residual { Some(residual_localization(model, &data, fold, limit)?) } else { None };
            let out = serde_json::json!({ "fold": fold, "dice": dice, "residual_localization": localization });
            println!("{}", serde_json::to_string_pretty(&out)?);
            Ok(())
        }
        Command::Panels { checkpoint, n, fold, manifest, out, seed } => {
            let state = load_checkpoint(&checkpoint)?;
            let (_, data) = config_of(&state, manifest.as_deref())?;
            let out = out.unwrap_or_else(|| checkpoint.parent().map(Path::to_path_buf).unwrap_or_default());
            std::fs::create_dir_all(&out).map_err(|source| Error::Io { path: out.clone(), source })?;
            for (domain, name) in [(Domain::P, "panels_presence.png"), (Domain::A, "panels_absence.png")] {
                let records: Vec<_> = data.records(fold, domain).into_iter().take(n).collect();
                if records.is_empty() {
                    continue;
                }
                let (images, _) = load_batch(&data, &records, None)?;
                let path = out.join(name);
                emit_panels(&state.trainer.model, &stack(&images)?, domain, seed, &path)?;
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::ValidateData { manifest, skip_files } => {
            let m = DatasetManifest::read(&manifest)?;
            let root = manifest.parent().unwrap_or(Path::new("."));
            let report = validate(&m, (!skip_files).then_some(root));
            for p in &report.problems {
                println!("{p}");
            }
            println!(
                "{} records, {} labeled, {} problems",
                report.n_records,
                report.n_labeled,
                report.problems.len()
            );
            if report.is_valid() {
                Ok(())
            } else {
                Err(Error::Config(format!("{} manifest problems", report.problems.len())))
            }
        }
        Command::PrintConfig { preset, variant, manifest } => {
            let mut cfg = ExperimentConfig::for_preset(preset, variant, manifest);
            cfg.loss = Some(cfg.weights());
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
