//! `socnav train`: one behavior-cloning run per (variant, seed).
//!
//! Each run writes its own directory `<out>/train/<variant>/seed<k>/`
//! holding `history.csv` (per-epoch train record plus per-epoch test
//! records overall and per scenario) and `checkpoint.bin` (final weights;
//! periodic `checkpoint_epoch*.bin` files when the spec asks for them).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use socnav_core::network::{CheckpointMeta, Modality};
use socnav_core::sampling::TrainingSample;
use socnav_core::trainer::{evaluate, train_with_hook, write_history, LossRecord};

use crate::data::{check_manifest_matches, load_manifest, load_split};
use crate::spec::ExperimentSpec;

pub fn run_dir(out: &Path, variant: Modality, seed: u64) -> PathBuf {
    out.join("train").join(variant.as_str()).join(format!("seed{seed}"))
}

pub fn checkpoint_path(out: &Path, variant: Modality, seed: u64) -> PathBuf {
    run_dir(out, variant, seed).join("checkpoint.bin")
}

pub fn history_path(out: &Path, variant: Modality, seed: u64) -> PathBuf {
    run_dir(out, variant, seed).join("history.csv")
}

pub fn cmd_train(
    spec: &ExperimentSpec,
    out: &Path,
    variants: &[Modality],
    force: bool,
) -> anyhow::Result<()> {
    let manifest = load_manifest(out)?;
    check_manifest_matches(&manifest, spec)?;

    let train = load_split(
        out,
        "train",
        &manifest.train,
        spec.data.stride,
        spec.data.max_train_samples,
    )?;
    let test =
        load_split(out, "test", &manifest.test, spec.data.stride, spec.data.max_test_samples)?;
    println!(
        "dataset: {} train samples from {} episodes ({} skipped at episode ends), \
         {} test samples from {} episodes",
        train.samples.len(),
        train.episodes,
        train.stats.skipped_insufficient,
        test.samples.len(),
        test.episodes
    );
    if train.samples.is_empty() {
        bail!("the training split produced no samples; lengthen episodes or lower the stride");
    }
    if test.samples.is_empty() {
        println!("warning: the test split produced no samples; histories will hold train records only");
    }

    for &variant in variants {
        for &seed in &spec.seeds {
            train_one(spec, out, variant, seed, &train.samples, &test.samples, force)?;
        }
    }
    Ok(())
}

fn train_one(
    spec: &ExperimentSpec,
    out: &Path,
    variant: Modality,
    seed: u64,
    train_samples: &[TrainingSample],
    test_samples: &[TrainingSample],
    force: bool,
) -> anyhow::Result<()> {
    let dir = run_dir(out, variant, seed);
    if dir.exists() && dir.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false) {
        if !force {
            bail!(
                "run directory {} already holds results; pass --force to retrain",
                dir.display()
            );
        }
        std::fs::remove_dir_all(&dir).with_context(|| format!("cannot clear {}", dir.display()))?;
    }
    std::fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;

    let model_cfg = spec.model.config_for(variant);
    let train_cfg = spec.train_config(seed);
    let mut eval_by_epoch: Vec<Vec<LossRecord>> = vec![Vec::new(); train_cfg.epochs];

    let (params, train_history) = train_with_hook(
        train_samples,
        None,
        &model_cfg,
        &train_cfg,
        |epoch, params, _history| {
            if !test_samples.is_empty() {
                let mut report = evaluate(params, test_samples, train_cfg.lambda)?;
                report.overall.epoch = epoch;
                let mut records = vec![report.overall];
                for mut r in report.per_scenario {
                    r.epoch = epoch;
                    records.push(r);
                }
                eval_by_epoch[epoch] = records;
            }
            if train_cfg.checkpoint_every > 0
                && (epoch + 1) % train_cfg.checkpoint_every == 0
                && epoch + 1 < train_cfg.epochs
            {
                let snap = dir.join(format!("checkpoint_epoch{:04}.bin", epoch + 1));
                let loss = eval_by_epoch[epoch]
                    .first()
                    .map(|r| r.total)
                    .unwrap_or(f64::NAN);
                params.save_checkpoint(&snap, CheckpointMeta { seed, epoch, loss })?;
            }
            Ok(())
        },
    )?;

    // Interleave per epoch: the train record, then that epoch's test
    // records (overall first, then per scenario).
    let mut history = Vec::new();
    for (epoch, train_rec) in train_history.into_iter().enumerate() {
        history.push(train_rec);
        history.extend(eval_by_epoch[epoch].drain(..));
    }

    let final_loss = history
        .iter()
        .rev()
        .find(|r| r.split == socnav_core::trainer::Split::Test)
        .or_else(|| history.last())
        .map(|r| r.total)
        .unwrap_or(f64::NAN);
    params.save_checkpoint(
        &checkpoint_path(out, variant, seed),
        CheckpointMeta { seed, epoch: train_cfg.epochs - 1, loss: final_loss },
    )?;
    write_history(&history_path(out, variant, seed), &history)?;

    println!(
        "trained {variant} seed {seed}: final loss {:.6} -> {}",
        final_loss,
        dir.display()
    );
    Ok(())
}
