use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dibs::data::{apply_shift, make_noise_ood, rotate_points, uniform_in_box, LabeledDataset, NoiseKind, ShiftSpec};
use dibs::nets::{groups, param_digest, EnsembleModel};
use dibs::oodeval::{aupr, auroc, evaluate, write_results, OodScoreSet, ResultRow};
use dibs::rng::{stream, Stream};
use dibs::training::{load_checkpoint, save_checkpoint, train, transfer_finetune, write_metrics, Trainer};
use dibs::uncertainty::{accuracy, mean_kl, mean_pairwise_w2, member_scores, predictive_scores, write_prediction_dump};
use serde::Serialize;

use crate::config::{config_error, ExperimentConfig, OodKind, ReportFormat, Splits, TargetSpec};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.tar";
pub const SEED_FILE: &str = "seed.json";

/// Creates a fresh run directory, refusing to reuse an existing path.
pub fn create_run_dir(out: Option<&Path>, cfg: &ExperimentConfig, command: &str) -> Result<PathBuf> {
    let dir = match out {
        Some(p) => p.to_path_buf(),
        None => cfg.output_dir.join(format!("{command}-{}-seed{}", &cfg.digest()[..12], cfg.train.seed)),
    };
    if dir.exists() {
        return Err(config_error(format!("run directory {} already exists", dir.display())));
    }
    if let Some(parent) = dir.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::create_dir(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_toml()?).context("writing config copy")?;
    Ok(dir)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

/// Writes `rows` as CSV below a digest comment line.
fn write_csv<R: Serialize>(path: &Path, digest: &str, rows: &[R]) -> Result<()> {
    let mut out = create(path)?;
    writeln!(out, "# config_digest={digest}")?;
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SeedRecord {
    base_seed: u64,
    seeds: Vec<u64>,
}

fn write_seeds(dir: &Path, base: u64, seeds: Vec<u64>) -> Result<()> {
    let text = serde_json::to_string_pretty(&SeedRecord { base_seed: base, seeds })?;
    fs::write(dir.join(SEED_FILE), text + "\n").context("writing seed record")
}

fn load_trainer(checkpoint: Option<&Path>) -> Result<Trainer> {
    let path = checkpoint.ok_or_else(|| config_error("--checkpoint is required"))?;
    if !path.exists() {
        return Err(config_error(format!("checkpoint {} does not exist", path.display())));
    }
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Splits rebuilt with the seed that trained `trainer`.
fn splits_for(cfg: &ExperimentConfig, trainer: &Trainer) -> Result<Splits> {
    let s = cfg.splits(trainer.config.seed)?;
    if s.train.shape() != trainer.model.config.input {
        bail!(
            "incompatible input shape: dataset has {:?}, checkpoint expects {:?}",
            s.train.shape(),
            trainer.model.config.input
        );
    }
    Ok(s)
}

pub fn cmd_train(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<PathBuf> {
    let splits = cfg.splits(cfg.train.seed)?;
    let dir = create_run_dir(out, cfg, "train")?;
    write_seeds(&dir, cfg.train.seed, vec![cfg.train.seed])?;
    let outcome = train(&cfg.train, &splits.train, Some(&splits.val))?;
    write_metrics(create(&dir.join(METRICS_FILE))?, &cfg.train.digest(), &outcome.history)?;
    save_checkpoint(&outcome.trainer, dir.join(CHECKPOINT_FILE))?;
    let last = outcome.history.last().expect("at least one step");
    let test = accuracy(&outcome.trainer.model, &splits.test)?;
    println!(
        "trained {} epochs ({} steps): train acc {:.4}, val acc {:.4}, test acc {test:.4}",
        cfg.train.epochs,
        outcome.history.len(),
        last.train_acc.unwrap_or(f64::NAN),
        last.val_acc.unwrap_or(f64::NAN)
    );
    Ok(dir)
}

#[derive(Serialize)]
struct AccuracyRow {
    split: String,
    shift: String,
    seed: u64,
    accuracy: f64,
}

#[derive(Serialize)]
struct AccuracySummary {
    split: String,
    shift: String,
    runs: usize,
    mean: f64,
    std: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

pub fn cmd_generalize(cfg: &ExperimentConfig, checkpoint: Option<&Path>, out: Option<&Path>) -> Result<PathBuf> {
    let trainer = load_trainer(checkpoint)?;
    let splits = splits_for(cfg, &trainer)?;
    let dir = create_run_dir(out, cfg, "generalize")?;
    let base = trainer.config.seed;
    let seeds: Vec<u64> = (0..cfg.seeds as u64).map(|i| base + i).collect();
    write_seeds(&dir, base, seeds.clone())?;
    let mut shifts = vec![ShiftSpec::None];
    shifts.extend(cfg.shifts.iter().filter(|s| **s != ShiftSpec::None).cloned());
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for (name, ds) in [("train", &splits.train), ("test", &splits.test)] {
        for shift in &shifts {
            let mut accs = Vec::new();
            for &seed in &seeds {
                let shifted = apply_shift(ds, shift, seed)?;
                let a = accuracy(&trainer.model, &shifted)?;
                rows.push(AccuracyRow { split: name.into(), shift: shift.describe(), seed, accuracy: a });
                accs.push(a);
            }
            let (mean, std) = mean_std(&accs);
            println!("{name:>5} {:<24} {mean:.4} +- {std:.4}", shift.describe());
            summary.push(AccuracySummary { split: name.into(), shift: shift.describe(), runs: accs.len(), mean, std });
        }
    }
    let digest = cfg.digest();
    write_csv(&dir.join("generalize.csv"), &digest, &rows)?;
    write_csv(&dir.join("generalize_summary.csv"), &digest, &summary)?;
    Ok(dir)
}

fn apply_target(target: &TargetSpec, ds: &LabeledDataset, seed: u64) -> Result<LabeledDataset> {
    Ok(match target {
        TargetSpec::Shift { shift } => apply_shift(ds, shift, seed)?,
        TargetSpec::RotatePoints { degrees } => rotate_points(ds, *degrees)?,
    })
}

#[derive(Serialize)]
struct TransferRow {
    stage: &'static str,
    target_accuracy: f64,
    encoder_digest: String,
}

pub fn cmd_transfer(cfg: &ExperimentConfig, checkpoint: Option<&Path>, out: Option<&Path>) -> Result<PathBuf> {
    let spec = cfg.transfer.as_ref().ok_or_else(|| config_error("transfer needs a [transfer] section"))?;
    let mut trainer = load_trainer(checkpoint)?;
    let splits = splits_for(cfg, &trainer)?;
    let seed = trainer.config.seed;
    let target_train = apply_target(&spec.target, &splits.train, seed)?;
    let target_test = apply_target(&spec.target, &splits.test, seed + 1)?;
    let dir = create_run_dir(out, cfg, "transfer")?;
    write_seeds(&dir, seed, vec![seed])?;
    let before = accuracy(&trainer.model, &target_test)?;
    let digest_before = param_digest(&trainer.model, groups::encoder);
    let mut model = trainer.model.clone();
    let rows = transfer_finetune(&mut model, &target_train, spec.epochs, &trainer.config)?;
    let after = accuracy(&model, &target_test)?;
    let digest_after = param_digest(&model, groups::encoder);
    if digest_before != digest_after {
        bail!("encoder parameters changed during finetuning");
    }
    println!("target accuracy {before:.4} -> {after:.4} after {} finetune epochs", spec.epochs);
    write_metrics(create(&dir.join("finetune_metrics.csv"))?, &trainer.config.digest(), &rows)?;
    let table = [
        TransferRow { stage: "before", target_accuracy: before, encoder_digest: digest_before },
        TransferRow { stage: "after", target_accuracy: after, encoder_digest: digest_after },
    ];
    write_csv(&dir.join("transfer.csv"), &cfg.digest(), &table)?;
    trainer.model = model;
    save_checkpoint(&trainer, dir.join(CHECKPOINT_FILE))?;
    Ok(dir)
}

fn ood_set(kind: OodKind, splits: &Splits, count: usize, seed: u64) -> Result<LabeledDataset> {
    let shape = splits.train.shape();
    Ok(match kind {
        OodKind::Uniform => make_noise_ood(NoiseKind::Uniform, count, shape, seed)?,
        OodKind::Gaussian => make_noise_ood(NoiseKind::Gaussian, count, shape, seed)?,
        OodKind::BoxUniform => {
            let (lo, hi) = splits.train.bounding_box();
            uniform_in_box(count, &lo, &hi, seed)?
        }
        OodKind::InDistribution => splits.val.clone(),
    })
}

fn dump(path: &Path, model: &EnsembleModel<f32>, dataset: &str, scores: &[Vec<f64>]) -> Result<()> {
    let digest = param_digest(model, groups::all);
    write_prediction_dump(create(path)?, &digest, dataset, scores)?;
    Ok(())
}

pub fn cmd_ood(cfg: &ExperimentConfig, checkpoint: Option<&Path>, out: Option<&Path>) -> Result<PathBuf> {
    if cfg.ood.kinds.is_empty() {
        return Err(config_error("ood.kinds is empty"));
    }
    let trainer = load_trainer(checkpoint)?;
    let splits = splits_for(cfg, &trainer)?;
    let dir = create_run_dir(out, cfg, "ood")?;
    let seed = trainer.config.seed;
    write_seeds(&dir, seed, vec![seed])?;
    let model = &trainer.model;
    let k = model.num_heads();
    let in_scores = member_scores(model, &splits.test)?;
    let val_scores = member_scores(model, &splits.val)?;
    dump(&dir.join("scores_test.csv"), model, "test", &in_scores)?;
    let in_pred = predictive_scores(model, &splits.test, cfg.draws, &mut stream(seed, Stream::Eval))?;
    let count = if cfg.ood.count == 0 { splits.test.len() } else { cfg.ood.count };
    let mut rows: Vec<ResultRow> = Vec::new();
    for (i, &kind) in cfg.ood.kinds.iter().enumerate() {
        let ood = ood_set(kind, &splits, count, seed + 1000 + i as u64)?;
        let out_scores = member_scores(model, &ood)?;
        dump(&dir.join(format!("scores_{}.csv", kind.name())), model, kind.name(), &out_scores)?;
        let report = evaluate(&OodScoreSet::new(in_scores.clone(), out_scores)?, &val_scores, cfg.ood.tpr)?;
        let pair = format!("test_vs_{}", kind.name());
        rows.extend(report.rows(&pair, k, seed));
        let out_pred = predictive_scores(model, &ood, cfg.draws, &mut stream(seed + 1, Stream::Eval))?;
        for (metric, value) in
            [("predictive_auroc", auroc(&in_pred, &out_pred)?), ("predictive_aupr", aupr(&in_pred, &out_pred)?)]
        {
            rows.push(ResultRow { dataset_pair: pair.clone(), metric: metric.into(), value, k, seed });
        }
        println!(
            "{pair}: auroc {:.4}, aupr {:.4}, delta {:.4}, detection accuracy {:.4} (majority) {:.4} (any)",
            report.aggregated_auroc,
            report.aggregated_aupr,
            report.delta,
            report.detection_accuracy_majority,
            report.detection_accuracy_any
        );
    }
    write_results(create(&dir.join("ood.csv"))?, &cfg.digest(), &rows)?;
    Ok(dir)
}

#[derive(Serialize)]
struct SweepRow {
    parameter: &'static str,
    value: String,
    seed: u64,
    final_val_accuracy: f64,
    mean_kl: f64,
    /// Empty for single-head runs.
    mean_pairwise_w2: Option<f64>,
}

pub fn cmd_sweep(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<PathBuf> {
    let spec = cfg.sweep.as_ref().ok_or_else(|| config_error("sweep needs a [sweep] section"))?;
    let values = spec.values()?;
    let dir = create_run_dir(out, cfg, "sweep")?;
    let base = cfg.train.seed;
    let seeds: Vec<u64> = (0..cfg.seeds as u64).map(|i| base + i).collect();
    write_seeds(&dir, base, seeds.clone())?;
    let mut rows = Vec::new();
    for v in &values {
        for &seed in &seeds {
            let mut run = cfg.train.clone();
            v.apply(&mut run);
            run.seed = seed;
            let splits = cfg.splits(seed)?;
            let outcome = train(&run, &splits.train, Some(&splits.val))?;
            let run_dir = dir.join(format!("{}-{}-seed{seed}", v.parameter(), v.value()));
            fs::create_dir(&run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
            write_metrics(create(&run_dir.join(METRICS_FILE))?, &run.digest(), &outcome.history)?;
            let model = &outcome.trainer.model;
            let row = SweepRow {
                parameter: v.parameter(),
                value: v.value(),
                seed,
                final_val_accuracy: outcome.history.last().and_then(|r| r.val_acc).unwrap_or(f64::NAN),
                mean_kl: mean_kl(model, &splits.val)?,
                mean_pairwise_w2: if model.num_heads() > 1 {
                    Some(mean_pairwise_w2(model, &splits.val)?)
                } else {
                    None
                },
            };
            println!(
                "{}={} seed {seed}: val acc {:.4}, mean kl {:.4}, mean w2 {}",
                row.parameter,
                row.value,
                row.final_val_accuracy,
                row.mean_kl,
                row.mean_pairwise_w2.map_or("-".into(), |w| format!("{w:.4}"))
            );
            rows.push(row);
        }
    }
    write_csv(&dir.join("sweep.csv"), &cfg.digest(), &rows)?;
    Ok(dir)
}

/// Known result tables, in report order.
const TABLES: [&str; 6] =
    [METRICS_FILE, "generalize_summary.csv", "transfer.csv", "ood.csv", "sweep.csv", "generalize.csv"];

fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let header = r.headers()?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec?.iter().map(String::from).collect());
    }
    Ok((header, rows))
}

/// Renders every known table found in `dirs`. Metrics tables are
/// reduced to their final row.
pub fn render_report(dirs: &[PathBuf], format: ReportFormat) -> Result<String> {
    let mut out = String::new();
    for dir in dirs {
        if !dir.is_dir() {
            return Err(config_error(format!("{} is not a run directory", dir.display())));
        }
        let mut found = false;
        for name in TABLES {
            let path = dir.join(name);
            if !path.exists() {
                continue;
            }
            found = true;
            let (header, mut rows) = read_table(&path)?;
            if name == METRICS_FILE {
                rows = rows.split_off(rows.len().saturating_sub(1));
            }
            match format {
                ReportFormat::Markdown => {
                    out += &format!(
                        "## {} / {name}\n\n| {} |\n|{}\n",
                        dir.display(),
                        header.join(" | "),
                        "---|".repeat(header.len())
                    );
                    for r in &rows {
                        out += &format!("| {} |\n", r.join(" | "));
                    }
                    out += "\n";
                }
                ReportFormat::Csv => {
                    out += &format!("# {}/{name}\n{}\n", dir.display(), header.join(","));
                    for r in &rows {
                        out += &format!("{}\n", r.join(","));
                    }
                }
            }
        }
        if !found {
            return Err(config_error(format!("{} holds no result tables", dir.display())));
        }
    }
    Ok(out)
}

pub fn cmd_report(dirs: &[PathBuf], format: ReportFormat, out: Option<&Path>) -> Result<()> {
    if dirs.is_empty() {
        return Err(config_error("report needs at least one run directory"));
    }
    let text = render_report(dirs, format)?;
    match out {
        Some(p) if p.exists() => Err(config_error(format!("{} already exists", p.display()))),
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
