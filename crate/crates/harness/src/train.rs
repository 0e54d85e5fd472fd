//! Multi-seed training runs: batching, metrics, checkpoints, model selection and reports.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use segtrans_core::{LabeledBatch, LossReport, Model, Trainer, VariantKind};
use segtrans_data::seed::derive_seed;
use segtrans_data::{Domain, ExampleRecord, Fold};

use crate::checkpoint::{load_checkpoint, save_checkpoint, RunProgress, TrainingState};
use crate::config::{preset_name, ExperimentConfig};
use crate::error::{io_err, Error, Result};
use crate::evaluate::{evaluate, DiceSummary};
use crate::loader::{load_batch, stack, Dataset};

const EPOCH_STREAM: u64 = 0x65_706f_6368;
const ABSENCE_STREAM: u64 = 0x61_6273_656e;
const AUGMENT_STREAM: u64 = 0x61_7567;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// One line of `metrics.jsonl`: epoch means of the step losses and the
/// validation scores after that epoch. Epoch 0 is the untrained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub seed: u64,
    pub epoch: usize,
    pub step: u64,
    pub losses: Option<LossReport>,
    pub labeled_seen: usize,
    pub val_dice_mean: Option<f64>,
    pub val_dice_aggregate: Option<f64>,
}

/// Wall-clock time is kept apart so that metrics files stay reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub seed: u64,
    pub epoch: usize,
    pub step: u64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub num_params: usize,
    pub epochs_completed: usize,
    pub best_epoch: Option<usize>,
    pub best_val_dice: Option<f64>,
    pub test: DiceSummary,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (0 for a single seed).
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub variant: VariantKind,
    pub preset: String,
    pub num_params: usize,
    pub test_dice_mean: MeanStd,
    pub test_dice_aggregate: MeanStd,
    pub seeds: Vec<SeedSummary>,
}

impl RunReport {
    pub fn from_seeds(cfg: &ExperimentConfig, seeds: Vec<SeedSummary>) -> Self {
        let per_image: Vec<f64> = seeds.iter().map(|s| s.test.dice_mean).collect();
        let pooled: Vec<f64> = seeds.iter().map(|s| s.test.dice_aggregate).collect();
        Self {
            name: cfg.experiment.name.clone(),
            variant: cfg.experiment.variant,
            preset: preset_name(cfg.experiment.preset).into(),
            num_params: seeds.first().map_or(0, |s| s.num_params),
            test_dice_mean: MeanStd::of(&per_image),
            test_dice_aggregate: MeanStd::of(&pooled),
            seeds,
        }
    }

    /// Plain-text table: one row per seed and a `mean (std)` summary row.
    pub fn render_table(&self) -> String {
        let mut out = format!(
            "{} ({}, {}, {} parameters)\n{:<10} {:>8} {:>12} {:>12} {:>8}\n",
            self.name,
            self.variant.name(),
            self.preset,
            self.num_params,
            "seed",
            "epoch",
            "dice",
            "dice_pooled",
            "images"
        );
        for s in &self.seeds {
            out += &format!(
                "{:<10} {:>8} {:>12.4} {:>12.4} {:>8}\n",
                s.seed,
                s.best_epoch.map_or("-".to_string(), |e| e.to_string()),
                s.test.dice_mean,
                s.test.dice_aggregate,
                s.test.n
            );
        }
        out += &format!(
            "{:<10} {:>8} {:>12} {:>12}\n",
            "all",
            "",
            format!("{:.2} ({:.2})", self.test_dice_mean.mean, self.test_dice_mean.std),
            format!("{:.2} ({:.2})", self.test_dice_aggregate.mean, self.test_dice_aggregate.std),
        );
        out
    }
}

/// The presence and absence rows of one step, as indices into the training lists.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub presence: Vec<usize>,
    pub labeled_rows: Vec<usize>,
    pub absence: Vec<usize>,
}

/// Deterministic absence-example stream: reshuffled on every pass.
struct AbsenceStream {
    seed: u64,
    n: usize,
    perms: HashMap<u64, Vec<usize>>,
}

impl AbsenceStream {
    fn index(&mut self, cursor: u64) -> usize {
        let pass = cursor / self.n as u64;
        let (seed, n) = (self.seed, self.n);
        let perm = self.perms.entry(pass).or_insert_with(|| {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, ABSENCE_STREAM, pass])));
            p
        });
        perm[(cursor % n as u64) as usize]
    }
}

/// Plans every step of one epoch. Presence examples are shuffled per epoch;
/// batches short of `min_labeled` labeled rows have their trailing unlabeled
/// rows replaced by draws (with replacement) from the labeled pool.
#[allow(clippy::too_many_arguments)]
pub fn plan_epoch(
    labeled: &[bool],
    n_absence: usize,
    batch_size: usize,
    min_labeled: usize,
    max_steps: Option<usize>,
    seed: u64,
    epoch: usize,
    absence_cursor: &mut u64,
) -> Vec<BatchPlan> {
    let n_presence = labeled.len();
    if n_presence == 0 || n_absence == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, EPOCH_STREAM, epoch as u64]));
    let mut order: Vec<usize> = (0..n_presence).collect();
    order.shuffle(&mut rng);
    let pool: Vec<usize> = (0..n_presence).filter(|&i| labeled[i]).collect();
    let mut absence = AbsenceStream {
        seed,
        n: n_absence,
        perms: HashMap::new(),
    };
    let mut steps = n_presence.div_ceil(batch_size);
    if let Some(cap) = max_steps {
        steps = steps.min(cap);
    }
    let mut plans = Vec::with_capacity(steps);
    for chunk in order.chunks(batch_size).take(steps) {
        let mut presence = chunk.to_vec();
        let have = presence.iter().filter(|&&i| labeled[i]).count();
        if have < min_labeled && !pool.is_empty() {
            let mut need = min_labeled.min(presence.len()) - have;
            for row in (0..presence.len()).rev() {
                if need == 0 {
                    break;
                }
                if !labeled[presence[row]] {
                    presence[row] = pool[rng.random_range(0..pool.len())];
                    need -= 1;
                }
            }
        }
        let labeled_rows = (0..presence.len()).filter(|&r| labeled[presence[r]]).collect();
        let absence_rows = (0..presence.len())
            .map(|_| {
                let i = absence.index(*absence_cursor);
                *absence_cursor += 1;
                i
            })
            .collect();
        plans.push(BatchPlan {
            presence,
            labeled_rows,
            absence: absence_rows,
        });
    }
    plans
}

fn append_line<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    writeln!(f, "{}", serde_json::to_string(value)?).map_err(io_err(path))
}

/// Keeps only lines of a JSONL log whose epoch is at most `epoch`.
fn truncate_log(path: &Path, epoch: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let file = File::open(path).map_err(io_err(path))?;
    let mut kept = String::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_err(path))?;
        let v: serde_json::Value = serde_json::from_str(&line)?;
        if v.get("epoch").and_then(|e| e.as_u64()).is_some_and(|e| e as usize <= epoch) {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(io_err(path))
}

fn mean_losses(reports: &[LossReport]) -> Option<LossReport> {
    if reports.is_empty() {
        return None;
    }
    let n = reports.len() as f64;
    let mut m = LossReport::default();
    for r in reports {
        m.total += r.total / n;
        m.seg += r.seg / n;
        m.rec += r.rec / n;
        m.lat += r.lat / n;
        m.cyc += r.cyc / n;
        m.adv_g += r.adv_g / n;
        m.adv_d += r.adv_d / n;
    }
    Some(m)
}

pub fn seed_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.output_root().join(format!("seed_{seed}"))
}

fn fresh_state(cfg: &ExperimentConfig, data: &Dataset, seed: u64) -> Result<TrainingState> {
    let model = Model::<f32>::new(cfg.experiment.variant, cfg.architecture(), seed)?;
    let trainer = Trainer::new(model, cfg.weights(), cfg.optimizer, seed)?;
    let mut progress = RunProgress::new(seed);
    progress.config_json = Some(serde_json::to_string(cfg)?);
    progress.data_digest = Some(data.digest.clone());
    Ok(TrainingState {
        trainer,
        optimizer: cfg.optimizer,
        progress,
    })
}

fn resumed_state(cfg: &ExperimentConfig, data: &Dataset, path: &Path, warnings: &mut Vec<String>) -> Result<TrainingState> {
    let state = load_checkpoint(path)?;
    let here = serde_json::to_string(cfg)?;
    if state.progress.config_json.as_deref() != Some(here.as_str()) {
        warnings.push(format!("configuration differs from the one stored in {}", path.display()));
    }
    if state.progress.data_digest.as_deref() != Some(data.digest.as_str()) {
        warnings.push(format!("dataset manifest differs from the one used for {}", path.display()));
    }
    if state.trainer.model.variant != cfg.experiment.variant || state.trainer.model.arch != cfg.architecture() {
        return Err(Error::Config(format!(
            "checkpoint {} holds a different model than the configuration",
            path.display()
        )));
    }
    for w in warnings.iter() {
        log::warn!("{w}");
    }
    Ok(state)
}

/// Trains one seed, selects the best-validation checkpoint and scores it on test.
pub fn run_seed(cfg: &ExperimentConfig, data: &Dataset, seed: u64, resume: Option<&Path>) -> Result<SeedSummary> {
    let dir = seed_dir(cfg, seed);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let (metrics_path, timing_path) = (dir.join(METRICS_FILE), dir.join(TIMING_FILE));
    let (last_path, best_path) = (dir.join(LAST_CHECKPOINT), dir.join(BEST_CHECKPOINT));
    let e = &cfg.experiment;
    let mut warnings = Vec::new();
    let started = Instant::now();

    let mut state = match resume {
        Some(path) => {
            let s = resumed_state(cfg, data, path, &mut warnings)?;
            if s.progress.seed != seed {
                return Err(Error::Config(format!("checkpoint belongs to seed {}, not {seed}", s.progress.seed)));
            }
            truncate_log(&metrics_path, s.progress.epoch)?;
            truncate_log(&timing_path, s.progress.epoch)?;
            s
        }
        None => {
            for p in [&metrics_path, &timing_path] {
                if p.exists() {
                    fs::remove_file(p).map_err(io_err(p))?;
                }
            }
            let mut s = fresh_state(cfg, data, seed)?;
            let val = evaluate(&s.trainer.model, data, Fold::Valid, e.threshold, e.max_eval_examples)?;
            s.progress.best_val_dice = Some(val.dice_mean);
            s.progress.best_epoch = Some(0);
            append_line(
                &metrics_path,
                &MetricsRecord {
                    seed,
                    epoch: 0,
                    step: 0,
                    losses: None,
                    labeled_seen: 0,
                    val_dice_mean: Some(val.dice_mean),
                    val_dice_aggregate: Some(val.dice_aggregate),
                },
            )?;
            append_line(&timing_path, &TimingRecord { seed, epoch: 0, step: 0, wall_seconds: started.elapsed().as_secs_f64() })?;
            save_checkpoint(&s, &best_path)?;
            s
        }
    };
    let num_params = state.trainer.model.num_params();
    log::info!("seed {seed}: {} model with {num_params} parameters", e.variant.name());

    let presence: Vec<&ExampleRecord> = data.records(Fold::Train, Domain::P);
    let absence: Vec<&ExampleRecord> = data.records(Fold::Train, Domain::A);
    if e.epochs > state.progress.epoch && (presence.is_empty() || absence.is_empty()) {
        return Err(Error::Config("training fold needs presence and absence examples".into()));
    }
    let labeled: Vec<bool> = presence.iter().map(|r| r.labeled).collect();
    let augmentation = cfg.augment.enabled.then_some(&cfg.augment.params);

    for epoch in state.progress.epoch + 1..=e.epochs {
        let plans = plan_epoch(
            &labeled,
            absence.len(),
            e.batch_size,
            e.min_labeled_per_batch,
            e.max_steps_per_epoch,
            seed,
            epoch,
            &mut state.progress.absence_cursor,
        );
        let mut reports = Vec::with_capacity(plans.len());
        let mut labeled_seen = 0;
        for (k, plan) in plans.iter().enumerate() {
            let seeds = |domain: u64, n: usize| -> Vec<u64> {
                (0..n).map(|r| derive_seed(&[seed, AUGMENT_STREAM, epoch as u64, k as u64, domain, r as u64])).collect()
            };
            let p_recs: Vec<&ExampleRecord> = plan.presence.iter().map(|&i| presence[i]).collect();
            let a_recs: Vec<&ExampleRecord> = plan.absence.iter().map(|&i| absence[i]).collect();
            let (p_seeds, a_seeds) = (seeds(0, p_recs.len()), seeds(1, a_recs.len()));
            let (p_img, p_mask) = load_batch(data, &p_recs, augmentation.map(|c| (c, &p_seeds[..])))?;
            let (a_img, _) = load_batch(data, &a_recs, augmentation.map(|c| (c, &a_seeds[..])))?;
            let batch = if plan.labeled_rows.is_empty() {
                LabeledBatch::none()
            } else {
                let masks: Vec<_> = plan
                    .labeled_rows
                    .iter()
                    .map(|&r| p_mask[r].clone().ok_or_else(|| Error::Config("labeled example without mask".into())))
                    .collect::<Result<_>>()?;
                LabeledBatch {
                    rows: plan.labeled_rows.clone(),
                    masks: stack(&masks)?,
                }
            };
            let report = state.trainer.training_step(&stack(&p_img)?, &stack(&a_img)?, &batch)?;
            labeled_seen += report.n_labeled;
            if (k + 1) % 50 == 0 {
                log::info!("seed {seed} epoch {epoch} step {}/{}: {:?}", k + 1, plans.len(), report.losses);
            }
            reports.push(report.losses);
        }
        state.progress.epoch = epoch;

        let val = if epoch % e.eval_every == 0 || epoch == e.epochs {
            Some(evaluate(&state.trainer.model, data, Fold::Valid, e.threshold, e.max_eval_examples)?)
        } else {
            None
        };
        append_line(
            &metrics_path,
            &MetricsRecord {
                seed,
                epoch,
                step: state.trainer.step,
                losses: mean_losses(&reports),
                labeled_seen,
                val_dice_mean: val.map(|v| v.dice_mean),
                val_dice_aggregate: val.map(|v| v.dice_aggregate),
            },
        )?;
        append_line(
            &timing_path,
            &TimingRecord { seed, epoch, step: state.trainer.step, wall_seconds: started.elapsed().as_secs_f64() },
        )?;
        log::info!("seed {seed} epoch {epoch}: validation {val:?}");

        if let Some(v) = val {
            if state.progress.best_val_dice.is_none_or(|b| v.dice_mean > b) {
                state.progress.best_val_dice = Some(v.dice_mean);
                state.progress.best_epoch = Some(epoch);
                save_checkpoint(&state, &best_path)?;
            }
        }
        if epoch % e.checkpoint_every == 0 || epoch == e.epochs {
            save_checkpoint(&state, &last_path)?;
        }
    }
    if !last_path.exists() {
        save_checkpoint(&state, &last_path)?;
    }

    let best = if best_path.exists() { load_checkpoint(&best_path)? } else { state.clone() };
    let test = evaluate(&best.trainer.model, data, Fold::Test, e.threshold, e.max_eval_examples)?;
    let summary = SeedSummary {
        seed,
        num_params,
        epochs_completed: state.progress.epoch,
        best_epoch: state.progress.best_epoch,
        best_val_dice: state.progress.best_val_dice,
        test,
        warnings,
    };
    let path = dir.join("summary.json");
    fs::write(&path, serde_json::to_string_pretty(&summary)?).map_err(io_err(&path))?;
    Ok(summary)
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Train only this seed instead of the configured list.
    pub seed: Option<u64>,
    /// Continue from a checkpoint (its seed is used).
    pub resume: Option<PathBuf>,
}

/// Runs every configured seed sequentially and writes the aggregate report.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunReport> {
    cfg.validate()?;
    cfg.check_paths()?;
    let data = Dataset::open(&cfg.data.manifest)?;
    let root = cfg.output_root();
    fs::create_dir_all(&root).map_err(io_err(&root))?;
    let config_path = root.join("config.toml");
    fs::write(&config_path, cfg.to_toml()).map_err(io_err(&config_path))?;

    let mut summaries = Vec::new();
    if let Some(path) = &opts.resume {
        let seed = load_checkpoint(path)?.progress.seed;
        summaries.push(run_seed(cfg, &data, seed, Some(path))?);
    } else {
        let seeds = opts.seed.map_or_else(|| cfg.experiment.seeds.clone(), |s| vec![s]);
        for seed in seeds {
            summaries.push(run_seed(cfg, &data, seed, None)?);
        }
    }
    let report = RunReport::from_seeds(cfg, summaries);
    let json_path = root.join(REPORT_JSON);
    fs::write(&json_path, serde_json::to_string_pretty(&report)?).map_err(io_err(&json_path))?;
    let text_path = root.join(REPORT_TEXT);
    fs::write(&text_path, report.render_table()).map_err(io_err(&text_path))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_plans_cover_presence_once_and_top_up_labels() {
        let labeled: Vec<bool> = (0..95).map(|i| i == 7 || i == 50).collect();
        let mut cursor = 0;
        let plans = plan_epoch(&labeled, 40, 20, 1, None, 3, 1, &mut cursor);
        assert_eq!(plans.len(), 5);
        assert_eq!(cursor, 95);
        for p in &plans {
            assert!(!p.labeled_rows.is_empty());
            assert_eq!(p.absence.len(), p.presence.len());
            for &r in &p.labeled_rows {
                assert!(labeled[p.presence[r]]);
            }
        }
        assert_eq!(plans.last().unwrap().presence.len(), 15);

        let mut again = 0;
        assert_eq!(plan_epoch(&labeled, 40, 20, 1, None, 3, 1, &mut again), plans);
        let mut other = 0;
        assert_ne!(plan_epoch(&labeled, 40, 20, 1, None, 3, 2, &mut other), plans);

        let mut capped = 0;
        assert_eq!(plan_epoch(&labeled, 40, 20, 0, Some(2), 3, 1, &mut capped).len(), 2);
    }

    #[test]
    fn absence_stream_visits_every_example_each_pass() {
        let mut s = AbsenceStream { seed: 1, n: 7, perms: HashMap::new() };
        for pass in 0..3u64 {
            let mut seen: Vec<usize> = (0..7).map(|i| s.index(pass * 7 + i)).collect();
            seen.sort();
            assert_eq!(seen, (0..7).collect::<Vec<_>>());
        }
    }

    #[test]
    fn mean_and_sample_std() {
        let m = MeanStd::of(&[0.5, 0.7, 0.9]);
        assert!((m.mean - 0.7).abs() < 1e-12);
        assert!((m.std - 0.2).abs() < 1e-12);
        assert_eq!(MeanStd::of(&[0.3]).std, 0.0);
    }
}
