//! Matched-seed runs across classifier weights.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::record::MetricRecord;
use crate::run::run_training;

pub const CURVES_FILE: &str = "curves.jsonl";
pub const COMPARISON_FILE: &str = "comparison.json";

/// Final and summary quantities of one run.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RunEndpoints {
    pub alpha: f64,
    pub seed: u64,
    pub dir: PathBuf,
    pub final_cosine_gap: Option<f64>,
    pub final_probe_accuracy: Option<f64>,
    pub initial_heldout_seal_loss: Option<f64>,
    pub final_heldout_seal_loss: Option<f64>,
    pub peak_token_entropy: Option<f64>,
    pub peak_trajectory_entropy: Option<f64>,
    pub final_reward_mean: Option<f64>,
    pub final_duplication_ratio: Option<f64>,
}

fn peak(values: impl Iterator<Item = f64>) -> Option<f64> {
    values.fold(None, |m, v| Some(m.map_or(v, |m: f64| m.max(v))))
}

impl RunEndpoints {
    pub fn from_records(alpha: f64, seed: u64, dir: PathBuf, records: &[MetricRecord]) -> Self {
        let last = records.last();
        Self {
            alpha,
            seed,
            dir,
            final_cosine_gap: last.and_then(|r| r.cosine_gap),
            final_probe_accuracy: last.and_then(|r| r.probe_accuracy),
            initial_heldout_seal_loss: records.first().and_then(|r| r.heldout_seal_loss),
            final_heldout_seal_loss: last.and_then(|r| r.heldout_seal_loss),
            peak_token_entropy: peak(records.iter().map(|r| r.token_entropy)),
            peak_trajectory_entropy: peak(records.iter().filter_map(|r| r.trajectory_entropy)),
            final_reward_mean: last.map(|r| r.reward_mean),
            final_duplication_ratio: last.map(|r| r.duplication_ratio),
        }
    }
}

/// Treatment minus baseline for one seed; absent when either side is absent.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairedDelta {
    pub alpha: f64,
    pub seed: u64,
    pub cosine_gap: Option<f64>,
    pub probe_accuracy: Option<f64>,
    pub final_heldout_seal_loss: Option<f64>,
    pub peak_token_entropy: Option<f64>,
    pub peak_trajectory_entropy: Option<f64>,
    pub reward_mean: Option<f64>,
    pub duplication_ratio: Option<f64>,
}

fn diff(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some(a? - b?)
}

impl PairedDelta {
    fn between(treated: &RunEndpoints, baseline: &RunEndpoints) -> Self {
        let (t, b) = (treated, baseline);
        Self {
            alpha: t.alpha,
            seed: t.seed,
            cosine_gap: diff(t.final_cosine_gap, b.final_cosine_gap),
            probe_accuracy: diff(t.final_probe_accuracy, b.final_probe_accuracy),
            final_heldout_seal_loss: diff(t.final_heldout_seal_loss, b.final_heldout_seal_loss),
            peak_token_entropy: diff(t.peak_token_entropy, b.peak_token_entropy),
            peak_trajectory_entropy: diff(t.peak_trajectory_entropy, b.peak_trajectory_entropy),
            reward_mean: diff(t.final_reward_mean, b.final_reward_mean),
            duplication_ratio: diff(t.final_duplication_ratio, b.final_duplication_ratio),
        }
    }
}

/// Per-α tallies of the paired deltas.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlphaSummary {
    pub alpha: f64,
    pub seeds: usize,
    /// Seeds where the final cosine gap is strictly higher than at α = 0.
    pub cosine_gap_wins: usize,
    pub probe_accuracy_wins: usize,
    /// Seeds where both separation scores are strictly higher.
    pub separation_wins: usize,
    /// Seeds whose held-out classifier loss ended below its step-0 value.
    pub heldout_loss_decreased: usize,
    pub mean_peak_token_entropy_delta: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ComparisonReport {
    pub baseline_alpha: f64,
    pub seeds: Vec<u64>,
    pub runs: Vec<RunEndpoints>,
    pub deltas: Vec<PairedDelta>,
    pub summaries: Vec<AlphaSummary>,
}

#[derive(Serialize)]
struct CurvePoint<'a> {
    alpha: f64,
    seed: u64,
    #[serde(flatten)]
    record: &'a MetricRecord,
}

fn run_dir(out: &Path, index: usize, alpha: f64, seed: u64) -> PathBuf {
    out.join(format!("alpha{index}_{alpha}"))
        .join(format!("seed_{seed}"))
}

fn summarize(alpha: f64, deltas: &[&PairedDelta], runs: &[&RunEndpoints]) -> AlphaSummary {
    let wins = |f: fn(&PairedDelta) -> Option<f64>| {
        deltas
            .iter()
            .filter(|d| f(d).is_some_and(|v| v > 0.0))
            .count()
    };
    let entropy: Vec<f64> = deltas.iter().filter_map(|d| d.peak_token_entropy).collect();
    AlphaSummary {
        alpha,
        seeds: deltas.len(),
        cosine_gap_wins: wins(|d| d.cosine_gap),
        probe_accuracy_wins: wins(|d| d.probe_accuracy),
        separation_wins: deltas
            .iter()
            .filter(|d| {
                d.cosine_gap.is_some_and(|v| v > 0.0) && d.probe_accuracy.is_some_and(|v| v > 0.0)
            })
            .count(),
        heldout_loss_decreased: runs
            .iter()
            .filter(|r| matches!((r.initial_heldout_seal_loss, r.final_heldout_seal_loss), (Some(a), Some(b)) if b < a))
            .count(),
        mean_peak_token_entropy_delta: (!entropy.is_empty())
            .then(|| entropy.iter().sum::<f64>() / entropy.len() as f64),
    }
}

/// Runs every (α, seed) pair under `out` and writes curves plus the paired report.
///
/// The first α equal to zero is the baseline; every other entry, including a
/// repeated zero, is compared against it seed by seed.
pub fn run_comparison(
    config: &ExperimentConfig,
    alphas: &[f64],
    out: &Path,
) -> Result<ComparisonReport> {
    if alphas.len() < 2 {
        bail!(
            "compare.alphas: need at least two values, got {}",
            alphas.len()
        );
    }
    let Some(base) = alphas.iter().position(|&a| a == 0.0) else {
        bail!("compare.alphas: one value must be 0");
    };
    if let Some(a) = alphas.iter().find(|a| !(a.is_finite() && **a >= 0.0)) {
        bail!("compare.alphas: {a} is not a non-negative weight");
    }
    if config.compare.seeds == 0 {
        bail!("compare.seeds: must be at least 1");
    }
    let seeds: Vec<u64> = (config.seed..config.seed + config.compare.seeds).collect();
    let jobs: Vec<(usize, f64, u64)> = alphas
        .iter()
        .enumerate()
        .flat_map(|(i, &a)| seeds.iter().map(move |&s| (i, a, s)))
        .collect();
    let mut configs = Vec::with_capacity(jobs.len());
    for &(i, alpha, seed) in &jobs {
        let mut c = config.clone();
        c.seed = seed;
        c.train.seal_weight = alpha;
        c.output.dir = run_dir(out, i, alpha, seed);
        c.validate()?;
        configs.push(c);
    }
    fs::create_dir_all(out)?;
    // Each run owns its directory and seed, so running them concurrently
    // changes nothing in the output.
    let results: Vec<Result<Vec<MetricRecord>>> = configs
        .par_iter()
        .map(|c| run_training(c).map(|o| o.records))
        .collect();

    let mut curves = BufWriter::new(File::create(out.join(CURVES_FILE))?);
    let mut runs = Vec::with_capacity(jobs.len());
    for ((&(_, alpha, seed), c), result) in jobs.iter().zip(&configs).zip(results) {
        let records = result?;
        for r in &records {
            serde_json::to_writer(
                &mut curves,
                &CurvePoint {
                    alpha,
                    seed,
                    record: r,
                },
            )?;
            curves.write_all(b"\n")?;
        }
        runs.push(RunEndpoints::from_records(
            alpha,
            seed,
            c.output.dir.clone(),
            &records,
        ));
    }
    curves.flush()?;

    let n = seeds.len();
    let baseline = &runs[base * n..(base + 1) * n];
    let mut deltas = Vec::new();
    let mut summaries = Vec::new();
    for (i, &alpha) in alphas.iter().enumerate() {
        if i == base {
            continue;
        }
        let treated = &runs[i * n..(i + 1) * n];
        let d: Vec<PairedDelta> = treated
            .iter()
            .zip(baseline)
            .map(|(t, b)| PairedDelta::between(t, b))
            .collect();
        summaries.push(summarize(
            alpha,
            &d.iter().collect::<Vec<_>>(),
            &treated.iter().collect::<Vec<_>>(),
        ));
        deltas.extend(d);
    }
    let report = ComparisonReport {
        baseline_alpha: 0.0,
        seeds,
        runs,
        deltas,
        summaries,
    };
    fs::write(
        out.join(COMPARISON_FILE),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    Ok(report)
}

impl ComparisonReport {
    pub fn render_table(&self) -> String {
        let mut s = format!(
            "{:>6} {:>6} {:>12} {:>12} {:>12} {:>12}\n",
            "alpha", "seed", "d_cos_gap", "d_probe", "d_peak_H", "d_reward"
        );
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:+.4}"));
        for d in &self.deltas {
            s += &format!(
                "{:>6} {:>6} {:>12} {:>12} {:>12} {:>12}\n",
                d.alpha,
                d.seed,
                cell(d.cosine_gap),
                cell(d.probe_accuracy),
                cell(d.peak_token_entropy),
                cell(d.reward_mean)
            );
        }
        for a in &self.summaries {
            s += &format!(
                "alpha {}: separation higher in {}/{} seeds, held-out classifier loss fell in {}/{}\n",
                a.alpha, a.separation_wins, a.seeds, a.heldout_loss_decreased, a.seeds
            );
        }
        s
    }
}
