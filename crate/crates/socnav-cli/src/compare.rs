//! `socnav compare`: score trained variants and classical baselines on
//! the test split and emit the comparison table, per-sample records,
//! baseline history rows, and loss-curve plots.
//!
//! Outputs under `<out>/compare/`:
//! * `comparison.csv` — per (source, scenario): seed mean and spread of
//!   each loss component (spread = max - min across seeds).
//! * `samples.csv` — every per-sample loss for every source and seed, the
//!   raw records the table is derivable from.
//! * `history.csv` — baseline scores in the loss-history schema
//!   (`split = baseline:<kind>`), epoch-independent.
//! * `loss_<scenario>.png` and `loss_all.png` — test-loss curves per
//!   variant (seed-averaged), with baselines as dashed reference lines.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::Context;
use socnav_core::baselines::{score_baseline, BaselineKind};
use socnav_core::network::{Modality, ModelParams};
use socnav_core::trainer::{
    evaluate, read_history, EvalReport, Split, SCENARIO_ALL,
};

use crate::data::{check_manifest_matches, load_manifest, load_split};
use crate::plot::{color_for, line_chart, HLine, Series};
use crate::spec::ExperimentSpec;
use crate::train_cmd::{checkpoint_path, history_path};
use crate::MissingPrereq;

pub fn cmd_compare(
    spec: &ExperimentSpec,
    spec_path: &Path,
    out: &Path,
    variants: &[Modality],
) -> anyhow::Result<()> {
    let manifest = load_manifest(out)?;
    check_manifest_matches(&manifest, spec)?;
    let test =
        load_split(out, "test", &manifest.test, spec.data.stride, spec.data.max_test_samples)?;
    if test.samples.is_empty() {
        anyhow::bail!("the test split produced no samples; nothing to compare");
    }
    println!("scoring {} sources on {} test samples", variants.len() + 2, test.samples.len());

    let compare_dir = out.join("compare");
    std::fs::create_dir_all(&compare_dir)
        .with_context(|| format!("cannot create {}", compare_dir.display()))?;

    // (source, seed) -> evaluation report. Baselines carry seed 0: they
    // have no learned state, so one deterministic evaluation covers them.
    let mut reports: Vec<(String, u64, EvalReport)> = Vec::new();
    for &variant in variants {
        for &seed in &spec.seeds {
            let path = checkpoint_path(out, variant, seed);
            if !path.exists() {
                return Err(MissingPrereq(format!(
                    "no checkpoint for variant {variant} seed {seed} at {}; run \
                     `socnav train --spec {} --variant {variant}` first",
                    path.display(),
                    spec_path.display()
                ))
                .into());
            }
            let (params, _meta) = ModelParams::load_checkpoint(&path)?;
            let report = evaluate(&params, &test.samples, spec.train.lambda)?;
            reports.push((variant.as_str().to_string(), seed, report));
        }
    }
    let mut baseline_records = Vec::new();
    for kind in [BaselineKind::StraightPursuit, BaselineKind::DwaLite] {
        let cfg = spec.baselines.config_for(kind);
        let report = score_baseline(&cfg, &test.samples, spec.train.lambda)?;
        baseline_records.push(report.overall.clone());
        baseline_records.extend(report.per_scenario.iter().cloned());
        reports.push((kind.as_str().to_string(), 0, report));
    }

    let source_order: Vec<String> = variants
        .iter()
        .map(|v| v.as_str().to_string())
        .chain([BaselineKind::StraightPursuit, BaselineKind::DwaLite]
            .iter()
            .map(|k| k.as_str().to_string()))
        .collect();

    write_comparison(&compare_dir.join("comparison.csv"), &source_order, &reports)?;
    write_samples(&compare_dir.join("samples.csv"), &reports)?;
    socnav_core::trainer::write_history(&compare_dir.join("history.csv"), &baseline_records)?;
    let scenario_list: Vec<String> =
        [SCENARIO_ALL.to_string()].into_iter().chain(manifest.scenarios.iter().cloned()).collect();
    write_plots(&compare_dir, out, spec, variants, &reports, &scenario_list)?;

    print_table(&source_order, &reports);
    println!("comparison written to {}", compare_dir.display());
    Ok(())
}

/// Mean and spread (max - min) per (source, scenario, metric), across
/// seeds.
struct Agg {
    n_seeds: usize,
    mean: [f64; 4],
    spread: [f64; 4],
}

fn metrics(rec: &socnav_core::trainer::LossRecord) -> [f64; 4] {
    [rec.total, rec.global_l2, rec.global_l1, rec.local_l1]
}

fn aggregate(reports: &[(String, u64, EvalReport)]) -> BTreeMap<(String, String), Agg> {
    let mut cells: BTreeMap<(String, String), Vec<[f64; 4]>> = BTreeMap::new();
    for (source, _seed, report) in reports {
        for rec in std::iter::once(&report.overall).chain(report.per_scenario.iter()) {
            cells
                .entry((source.clone(), rec.scenario.clone()))
                .or_default()
                .push(metrics(rec));
        }
    }
    cells
        .into_iter()
        .map(|(key, rows)| {
            let n = rows.len();
            let mut mean = [0.0; 4];
            let mut lo = [f64::INFINITY; 4];
            let mut hi = [f64::NEG_INFINITY; 4];
            for row in &rows {
                for k in 0..4 {
                    mean[k] += row[k];
                    lo[k] = lo[k].min(row[k]);
                    hi[k] = hi[k].max(row[k]);
                }
            }
            for k in 0..4 {
                mean[k] /= n as f64;
            }
            let spread = std::array::from_fn(|k| hi[k] - lo[k]);
            (key, Agg { n_seeds: n, mean, spread })
        })
        .collect()
}

/// Scenario sort key: "all" first, then alphabetical.
fn scenario_rank(s: &str) -> (u8, &str) {
    if s == SCENARIO_ALL {
        (0, s)
    } else {
        (1, s)
    }
}

fn write_comparison(
    path: &Path,
    source_order: &[String],
    reports: &[(String, u64, EvalReport)],
) -> anyhow::Result<()> {
    let aggs = aggregate(reports);
    let mut text = String::from(
        "source,scenario,seeds,total_mean,total_spread,global_l2_mean,global_l2_spread,\
         global_l1_mean,global_l1_spread,local_l1_mean,local_l1_spread\n",
    );
    for source in source_order {
        let mut keys: Vec<&(String, String)> =
            aggs.keys().filter(|(s, _)| s == source).collect();
        keys.sort_by_key(|(_, sc)| scenario_rank(sc));
        for key in keys {
            let a = &aggs[key];
            write!(text, "{},{},{}", key.0, key.1, a.n_seeds).unwrap();
            for k in 0..4 {
                write!(text, ",{},{}", a.mean[k], a.spread[k]).unwrap();
            }
            text.push('\n');
        }
    }
    std::fs::write(path, text.as_bytes())
        .with_context(|| format!("cannot write {}", path.display()))
}

fn write_samples(path: &Path, reports: &[(String, u64, EvalReport)]) -> anyhow::Result<()> {
    let mut text =
        String::from("source,seed,episode_id,t_index,scenario,global_l2,global_l1,local_l1,total\n");
    for (source, seed, report) in reports {
        for s in &report.per_sample {
            writeln!(
                text,
                "{source},{seed},{},{},{},{},{},{},{}",
                s.episode_id, s.t_index, s.scenario, s.global_l2, s.global_l1, s.local_l1, s.total
            )
            .unwrap();
        }
    }
    std::fs::write(path, text.as_bytes())
        .with_context(|| format!("cannot write {}", path.display()))
}

/// One plot per scenario: per-variant seed-averaged test curves from the
/// training histories, baselines as dashed horizontals.
fn write_plots(
    compare_dir: &Path,
    out: &Path,
    spec: &ExperimentSpec,
    variants: &[Modality],
    reports: &[(String, u64, EvalReport)],
    scenarios: &[String],
) -> anyhow::Result<()> {
    // source -> scenario -> constant score, for the baseline reference lines.
    let mut baseline_levels: BTreeMap<&str, BTreeMap<&str, f64>> = BTreeMap::new();
    for (source, _seed, report) in reports {
        if [BaselineKind::StraightPursuit.as_str(), BaselineKind::DwaLite.as_str()]
            .contains(&source.as_str())
        {
            let per = baseline_levels.entry(source.as_str()).or_default();
            for rec in std::iter::once(&report.overall).chain(report.per_scenario.iter()) {
                per.insert(rec.scenario.as_str(), rec.total);
            }
        }
    }

    for scenario in scenarios {
        let mut series = Vec::new();
        for &variant in variants {
            // epoch -> (sum, count) across seeds.
            let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
            for &seed in &spec.seeds {
                let records = read_history(&history_path(out, variant, seed))?;
                for r in records {
                    if r.split == Split::Test && r.scenario == *scenario {
                        let e = acc.entry(r.epoch).or_insert((0.0, 0));
                        e.0 += r.total;
                        e.1 += 1;
                    }
                }
            }
            if acc.is_empty() {
                continue;
            }
            series.push(Series {
                name: variant.as_str().to_string(),
                color: color_for(variant.as_str()),
                points: acc
                    .into_iter()
                    .map(|(epoch, (sum, n))| (epoch as f64, sum / n as f64))
                    .collect(),
            });
        }
        let hlines: Vec<HLine> = baseline_levels
            .iter()
            .filter_map(|(source, per)| {
                per.get(scenario.as_str()).map(|&y| HLine {
                    name: source.to_string(),
                    color: color_for(source),
                    y,
                })
            })
            .collect();
        if series.is_empty() && hlines.is_empty() {
            continue;
        }
        let file = compare_dir.join(format!("loss_{scenario}.png"));
        line_chart(
            &format!("test loss - {scenario}"),
            "epoch",
            "total loss",
            &series,
            &hlines,
            &file,
        )?;
    }
    Ok(())
}

fn print_table(source_order: &[String], reports: &[(String, u64, EvalReport)]) {
    let aggs = aggregate(reports);
    println!("{:<18} {:<16} {:>6} {:>12} {:>12}", "source", "scenario", "seeds", "total", "spread");
    let mut keys: Vec<&(String, String)> = aggs.keys().collect();
    keys.sort_by_key(|(source, scenario)| {
        let rank = source_order.iter().position(|s| s == source).unwrap_or(usize::MAX);
        (rank, scenario_rank(scenario))
    });
    for key in keys {
        let a = &aggs[key];
        println!(
            "{:<18} {:<16} {:>6} {:>12.6} {:>12.6}",
            key.0, key.1, a.n_seeds, a.mean[0], a.spread[0]
        );
    }
}
