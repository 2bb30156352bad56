//! Synthetic data generation and dataset loading.
//!
//! `gen-data` writes episode directories under `<out>/data/{train,test}/`
//! plus a `manifest.json` naming both splits; `train` and `compare` read
//! the manifest back and slice episodes into supervised samples. Episode
//! seeds for the two splits come from disjoint blocks, so the splits can
//! never share an episode.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use socnav_core::episodes::{load_episode, save_episode, Episode};
use socnav_core::sampling::{build_dataset, DatasetStats, TrainingSample};
use socnav_core::synthgen::{gen_world, scenario_preset, simulate_episode};
use socnav_core::voxelizer::GridSpec;

use crate::spec::{ExperimentSpec, MAX_EPISODES_PER_SCENARIO};
use crate::MissingPrereq;

pub const MANIFEST_NAME: &str = "manifest.json";
const MANIFEST_VERSION: &str = "1";

/// Index of a generated dataset: which episodes belong to which split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: String,
    /// Name of the experiment that generated the data.
    pub experiment: String,
    pub data_seed: u64,
    pub scenarios: Vec<String>,
    pub episode_seconds: f64,
    pub dt: f64,
    /// Episode ids (= directory names) of the training split.
    pub train: Vec<String>,
    /// Episode ids of the test split; disjoint from `train`.
    pub test: Vec<String>,
}

pub fn data_dir(out: &Path) -> PathBuf {
    out.join("data")
}

/// Seed for episode `index` of `scenario_idx` in one split. Train and
/// test draw from disjoint halves of a per-scenario block.
fn episode_seed(base: u64, scenario_idx: usize, index: usize, is_test: bool) -> u64 {
    let split_offset = if is_test { MAX_EPISODES_PER_SCENARIO as u64 } else { 0 };
    base.wrapping_add(scenario_idx as u64 * 2 * MAX_EPISODES_PER_SCENARIO as u64)
        .wrapping_add(split_offset)
        .wrapping_add(index as u64)
}

/// Generates both episode splits and the manifest.
///
/// Refuses to touch an existing non-empty data directory unless `force`
/// is set; with `force` the directory is regenerated from scratch, which
/// reproduces it byte-for-byte (generation is seed-deterministic).
pub fn cmd_gen_data(spec: &ExperimentSpec, out: &Path, force: bool) -> anyhow::Result<()> {
    let dir = data_dir(out);
    if dir.exists() && dir.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false) {
        if !force {
            bail!(
                "data directory {} already holds generated data; pass --force to regenerate",
                dir.display()
            );
        }
        std::fs::remove_dir_all(&dir)
            .with_context(|| format!("cannot clear {}", dir.display()))?;
    }

    let mut manifest = Manifest {
        format_version: MANIFEST_VERSION.to_string(),
        experiment: spec.name.clone(),
        data_seed: spec.data.seed,
        scenarios: spec.data.scenarios.clone(),
        episode_seconds: spec.data.episode_seconds,
        dt: spec.data.dt,
        train: Vec::new(),
        test: Vec::new(),
    };

    for (split, is_test) in [("train", false), ("test", true)] {
        let split_dir = dir.join(split);
        std::fs::create_dir_all(&split_dir)
            .with_context(|| format!("cannot create {}", split_dir.display()))?;
        let count = if is_test { spec.data.test_episodes } else { spec.data.train_episodes };
        for (si, scenario) in spec.data.scenarios.iter().enumerate() {
            for i in 0..count {
                let seed = episode_seed(spec.data.seed, si, i, is_test);
                let world_spec = scenario_preset(scenario, seed)?;
                let world = gen_world(&world_spec)?;
                let ep = simulate_episode(
                    &world,
                    &spec.expert,
                    spec.data.episode_seconds,
                    spec.data.dt,
                )?;
                let ep_dir = save_episode(&ep, &split_dir)?;
                let id = ep_dir
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_else(|| ep.id.clone());
                if is_test {
                    manifest.test.push(id);
                } else {
                    manifest.train.push(id);
                }
            }
        }
    }

    check_disjoint(&manifest)?;
    let manifest_path = dir.join(MANIFEST_NAME);
    let json = serde_json::to_string_pretty(&manifest).context("manifest serialization")?;
    std::fs::write(&manifest_path, json.as_bytes())
        .with_context(|| format!("cannot write {}", manifest_path.display()))?;

    println!(
        "generated {} train and {} test episodes across {} scenario(s) under {}",
        manifest.train.len(),
        manifest.test.len(),
        manifest.scenarios.len(),
        dir.display()
    );
    Ok(())
}

fn check_disjoint(manifest: &Manifest) -> anyhow::Result<()> {
    let train: HashSet<&str> = manifest.train.iter().map(String::as_str).collect();
    let clash: Vec<&str> =
        manifest.test.iter().map(String::as_str).filter(|id| train.contains(id)).collect();
    if !clash.is_empty() {
        bail!("train and test splits share episodes: {clash:?}");
    }
    Ok(())
}

/// Loads the manifest, failing with a missing-prerequisite error (exit 3)
/// when no data has been generated yet.
pub fn load_manifest(out: &Path) -> anyhow::Result<Manifest> {
    let path = data_dir(out).join(MANIFEST_NAME);
    if !path.exists() {
        return Err(MissingPrereq(format!(
            "no data manifest at {}; run `socnav gen-data` first",
            path.display()
        ))
        .into());
    }
    let bytes = std::fs::read(&path).with_context(|| format!("cannot read {}", path.display()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes)
        .with_context(|| format!("malformed manifest {}", path.display()))?;
    if manifest.format_version != MANIFEST_VERSION {
        bail!(
            "manifest {} has format_version {:?}, this build expects {MANIFEST_VERSION:?}",
            path.display(),
            manifest.format_version
        );
    }
    check_disjoint(&manifest)?;
    Ok(manifest)
}

/// Rejects a manifest generated under different data settings than the
/// spec in hand, so train/compare never silently mix experiments.
pub fn check_manifest_matches(manifest: &Manifest, spec: &ExperimentSpec) -> anyhow::Result<()> {
    let mut mismatches = Vec::new();
    if manifest.experiment != spec.name {
        mismatches.push(format!(
            "experiment name: manifest {:?} vs spec {:?}",
            manifest.experiment, spec.name
        ));
    }
    if manifest.data_seed != spec.data.seed {
        mismatches
            .push(format!("data seed: manifest {} vs spec {}", manifest.data_seed, spec.data.seed));
    }
    if manifest.scenarios != spec.data.scenarios {
        mismatches.push(format!(
            "scenarios: manifest {:?} vs spec {:?}",
            manifest.scenarios, spec.data.scenarios
        ));
    }
    if manifest.episode_seconds != spec.data.episode_seconds || manifest.dt != spec.data.dt {
        mismatches.push(format!(
            "episode timing: manifest {} s @ {} vs spec {} s @ {}",
            manifest.episode_seconds, manifest.dt, spec.data.episode_seconds, spec.data.dt
        ));
    }
    if mismatches.is_empty() {
        Ok(())
    } else {
        bail!(
            "generated data does not match this spec (regenerate with `socnav gen-data --force`):\n{}",
            mismatches.join("\n")
        );
    }
}

/// One loaded split, sliced into supervised samples.
pub struct SplitSamples {
    pub samples: Vec<TrainingSample>,
    pub stats: DatasetStats,
    pub episodes: usize,
}

/// Loads the episodes of one split and slices them into samples, applying
/// the even thinning cap.
pub fn load_split(
    out: &Path,
    split: &str,
    ids: &[String],
    stride: usize,
    max_samples: usize,
) -> anyhow::Result<SplitSamples> {
    let split_dir = data_dir(out).join(split);
    let mut episodes: Vec<Episode> = Vec::with_capacity(ids.len());
    for id in ids {
        let ep_dir = split_dir.join(id);
        if !ep_dir.exists() {
            return Err(MissingPrereq(format!(
                "episode {} listed in the manifest is missing at {}; rerun `socnav gen-data --force`",
                id,
                ep_dir.display()
            ))
            .into());
        }
        episodes.push(load_episode(&ep_dir)?);
    }
    let (samples, stats) = build_dataset(&episodes, stride, &GridSpec::default())?;
    let samples = thin(samples, max_samples);
    Ok(SplitSamples { samples, stats, episodes: episodes.len() })
}

/// Deterministically keeps at most `max` samples (0 = keep all), spread
/// evenly across the input order so every episode and scenario keeps
/// proportional representation.
fn thin(samples: Vec<TrainingSample>, max: usize) -> Vec<TrainingSample> {
    if max == 0 || samples.len() <= max {
        return samples;
    }
    let n = samples.len();
    let mut keep: Vec<Option<TrainingSample>> = samples.into_iter().map(Some).collect();
    (0..max).map(|i| keep[i * n / max].take().expect("indices strictly increase")).collect()
}
