//! Training runs: mid-training, RL steps, metric ticks, checkpoints.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;

use eruption_core::diagnostics::{
    degeneracy_metrics, entropy_of_log_probs, enumerate_distribution, format_mass, mean_pool,
    predicted_vs_observed_drift, separation_score,
};
use eruption_core::env::{demonstrations, Episode, ToolQASpec};
use eruption_core::policy::{forward, sample_with_rng, PolicySnapshot};
use eruption_core::trainer::{
    mid_train, rollout, seal_loss, step_prompt, stream_rng, train_step, Group, SealHead,
    StepRecord, TrainConfig, TrainState,
};

use crate::config::ExperimentConfig;
use crate::record::{MetricRecord, StepLog};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const STEPS_FILE: &str = "steps.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.conf";
pub const SNAPSHOT_DIR: &str = "snapshots";

/// Seed offset of the classifier head relative to the policy init.
const HEAD_SEED_OFFSET: u64 = 0x5EA1;

pub fn snapshot_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(SNAPSHOT_DIR).join(format!("step_{step:06}.snap"))
}

/// Draw budget per requested held-out trajectory when filling label quotas.
pub const HELDOUT_DRAWS_PER_SLOT: usize = 32;

/// Fixed trajectories, sampled once from the initial RL policy, used to track
/// how the representation of correct and incorrect responses evolves.
#[derive(Clone, Debug)]
pub struct HeldOut {
    /// One group per prompt, advantages all zero.
    pub groups: Vec<Group>,
}

impl HeldOut {
    /// Samples per prompt until half the prompt's share is correct and half is
    /// not, or the draw budget runs out; a skewed policy then leaves the
    /// minority class short rather than absent by luck.
    pub fn sample(
        policy: &PolicySnapshot,
        spec: &ToolQASpec,
        size: usize,
        seed: u64,
        temperature: f64,
    ) -> Result<Self> {
        let prompts = spec.prompts();
        let mut groups = Vec::new();
        let mut index = 0u64;
        for (p, prompt) in prompts.iter().enumerate() {
            let share = size / prompts.len() + usize::from(p < size % prompts.len());
            let quota = [share / 2, share - share / 2];
            let mut kept: [Vec<Episode>; 2] = [Vec::new(), Vec::new()];
            for _ in 0..share * HELDOUT_DRAWS_PER_SLOT {
                if kept[0].len() == quota[0] && kept[1].len() == quota[1] {
                    break;
                }
                // Training never reaches step u64::MAX, so these streams are disjoint from rollouts.
                let mut rng = stream_rng(seed, u64::MAX, index);
                index += 1;
                let y = sample_with_rng(
                    policy,
                    prompt,
                    spec.eos,
                    temperature,
                    spec.max_response_len,
                    &mut rng,
                )?;
                let e = Episode::score(spec, prompt, &y)?;
                let class = usize::from(e.is_correct());
                if kept[class].len() < quota[class] {
                    kept[class].push(e);
                }
            }
            let [wrong, right] = kept;
            let episodes: Vec<Episode> = right.into_iter().chain(wrong).collect();
            if episodes.len() >= 2 {
                let n = episodes.len();
                groups.push(Group::with_advantages(
                    prompt.clone(),
                    episodes,
                    vec![0.0; n],
                )?);
            }
        }
        Ok(Self { groups })
    }

    pub fn labels(&self) -> Vec<bool> {
        self.groups
            .iter()
            .flat_map(|g| g.episodes.iter().map(Episode::is_correct))
            .collect()
    }

    pub fn pooled_hidden(&self, policy: &PolicySnapshot) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::new();
        for g in &self.groups {
            for e in &g.episodes {
                let (_, diags) = forward(policy, &g.prompt, &e.response)?;
                let rows: Vec<Vec<f64>> = diags.into_iter().map(|d| d.hidden).collect();
                out.push(mean_pool(&rows));
            }
        }
        Ok(out)
    }

    /// Token-weighted classifier loss over all held-out groups.
    pub fn seal_loss(&self, policy: &PolicySnapshot, head: &SealHead) -> Result<Option<f64>> {
        let (mut sum, mut tokens) = (0.0, 0usize);
        for g in &self.groups {
            let n = g.response_tokens();
            if n > 0 {
                sum += seal_loss(g, policy, head)?.value() * n as f64;
                tokens += n;
            }
        }
        Ok((tokens > 0).then(|| sum / tokens as f64))
    }
}

fn mean_where(values: &[f64], keep: impl Iterator<Item = bool>) -> Option<f64> {
    let picked: Vec<f64> = values
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(v, _)| *v)
        .collect();
    (!picked.is_empty()).then(|| picked.iter().sum::<f64>() / picked.len() as f64)
}

struct TickInputs<'a> {
    state: &'a TrainState,
    group: &'a Group,
    record: Option<&'a StepRecord>,
}

fn tick_metrics(
    config: &ExperimentConfig,
    spec: &ToolQASpec,
    heldout: Option<&HeldOut>,
    inputs: TickInputs<'_>,
) -> Result<MetricRecord> {
    let TickInputs {
        state,
        group,
        record,
    } = inputs;
    let policy = &state.policy;
    let deg = degeneracy_metrics(spec, &group.episodes)?;
    let mut lls = Vec::with_capacity(group.size());
    let (mut entropy, mut positions) = (0.0, 0usize);
    for e in &group.episodes {
        let (ell, diags) = forward(policy, &group.prompt, &e.response)?;
        lls.push(ell);
        for d in &diags {
            entropy -= d
                .probs
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|p| p * p.ln())
                .sum::<f64>();
        }
        positions += diags.len();
    }
    let mut m = MetricRecord {
        step: state.step,
        reward_mean: group.episodes.iter().map(|e| e.reward).sum::<f64>() / group.size() as f64,
        valid_action_ratio: deg.valid_action_ratio,
        duplication_ratio: deg.duplication_ratio,
        hallucination_rate: deg.hallucination_rate,
        token_entropy: entropy / positions.max(1) as f64,
        mean_ll_correct: mean_where(&lls, group.episodes.iter().map(Episode::is_correct)),
        mean_ll_valid: mean_where(&lls, group.episodes.iter().map(|e| e.r_fmt == 1)),
        ..Default::default()
    };
    if let Some(r) = record {
        m.rl_loss = Some(r.rl_loss);
        m.seal_loss = r.seal_loss;
        m.kl_loss = r.kl_loss;
        m.grad_norm = Some(r.grad_norm);
    }
    if config.diagnostics.exact {
        let prompts = spec.prompts();
        let (mut h, mut fmt, mut sem) = (0.0, 0.0, 0.0);
        for prompt in &prompts {
            let dist = enumerate_distribution(policy, spec, prompt)?;
            h += entropy_of_log_probs(dist.log_probs());
            let mass = format_mass(&dist, spec)?;
            fmt += mass.p_fmt;
            sem += mass.p_sem;
        }
        let n = prompts.len() as f64;
        m.trajectory_entropy = Some(h / n);
        m.exact_p_fmt = Some(fmt / n);
        m.exact_p_sem = Some(sem / n);
    }
    if config.diagnostics.drift {
        let d = predicted_vs_observed_drift(policy, group, config.train.learning_rate)?;
        m.predicted_drift = Some(d.predicted);
        m.observed_drift = Some(d.observed);
    }
    if let Some(h) = heldout {
        let labels = h.labels();
        if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
            let s = separation_score(&h.pooled_hidden(policy)?, &labels)?;
            m.cosine_gap = Some(s.cosine_gap);
            m.probe_accuracy = Some(s.probe_accuracy);
        }
        m.heldout_seal_loss = h.seal_loss(policy, &state.head)?;
    }
    Ok(m)
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub steps_completed: u64,
    pub steps_requested: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub halted: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mid_train_initial_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mid_train_final_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heldout_correct: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heldout_size: Option<usize>,
    pub checkpoints: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_metrics: Option<MetricRecord>,
}

pub struct RunOutcome {
    pub dir: PathBuf,
    pub records: Vec<MetricRecord>,
    pub state: TrainState,
    pub summary: RunSummary,
}

fn write_line<T: Serialize>(w: &mut impl Write, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Initial RL state: fresh init, optionally mid-trained on demonstrations.
pub fn initial_state(config: &ExperimentConfig) -> Result<(TrainState, Option<Vec<f64>>)> {
    let spec = config.spec()?;
    let arch = config.arch()?;
    let mut policy = PolicySnapshot::init(arch, config.seed)?;
    let mut losses = None;
    if config.mid_train.enabled {
        let demos = demonstrations(&spec, config.mid_train.demonstrations, config.seed)?;
        let out = mid_train(
            &policy,
            &demos,
            config.mid_train.epochs,
            config.mid_train.learning_rate,
        )?;
        policy = out.snapshot.with_version(0);
        losses = Some(out.losses);
    }
    let head = SealHead::init(arch.model_dim, config.seed.wrapping_add(HEAD_SEED_OFFSET))?;
    Ok((TrainState::new(policy, head), losses))
}

/// Runs one configured training; artifacts go to `config.output.dir`.
///
/// A non-finite step halts the run after the summary and all records so far
/// are written; the error is returned to the caller.
pub fn run_training(config: &ExperimentConfig) -> Result<RunOutcome> {
    config.validate()?;
    let spec = config.spec()?;
    let train: TrainConfig = config.train_config();
    let dir = config.output.dir.clone();
    fs::create_dir_all(dir.join(SNAPSHOT_DIR))
        .with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join(CONFIG_FILE), config.render())?;
    let started = Instant::now();

    let (mut state, mid_losses) = initial_state(config)?;
    let heldout = if config.diagnostics.heldout > 0 {
        Some(HeldOut::sample(
            &state.policy,
            &spec,
            config.diagnostics.heldout,
            config.seed,
            train.temperature,
        )?)
    } else {
        None
    };
    let mut metrics = BufWriter::new(File::create(dir.join(METRICS_FILE))?);
    let mut steps = BufWriter::new(File::create(dir.join(STEPS_FILE))?);
    let mut summary = RunSummary {
        steps_completed: 0,
        steps_requested: train.steps,
        halted: None,
        mid_train_initial_loss: mid_losses.as_ref().and_then(|l| l.first().copied()),
        mid_train_final_loss: mid_losses.as_ref().and_then(|l| l.last().copied()),
        heldout_correct: heldout
            .as_ref()
            .map(|h| h.labels().iter().filter(|&&l| l).count()),
        heldout_size: heldout.as_ref().map(|h| h.labels().len()),
        checkpoints: Vec::new(),
        final_metrics: None,
    };
    let mut records = Vec::new();
    let mut failure = None;
    for t in 0..=train.steps {
        let tick = t % config.diagnostics.every == 0 || t == train.steps;
        let stepped = if t < train.steps {
            match train_step(&state, &train, &spec) {
                Ok(out) => Some(out),
                Err(e) => {
                    failure = Some(anyhow::Error::from(e).context(format!("step {t}")));
                    break;
                }
            }
        } else {
            None
        };
        if tick {
            let final_group;
            let (group, record) = match &stepped {
                Some((_, r)) => (&r.group, Some(r)),
                None => {
                    let prompt = step_prompt(&spec, train.rng_seed, t);
                    let eps = rollout(&state.policy, &spec, &prompt, &train, t)?;
                    final_group = Group::new(prompt, eps, train.advantage_mode)?;
                    (&final_group, None)
                }
            };
            let mut m = tick_metrics(
                config,
                &spec,
                heldout.as_ref(),
                TickInputs {
                    state: &state,
                    group,
                    record,
                },
            )?;
            if config.output.wall_clock {
                m.wall_clock_ms = Some(started.elapsed().as_secs_f64() * 1e3);
            }
            write_line(&mut metrics, &m)?;
            records.push(m);
        }
        if t > 0 && (t % config.output.checkpoint_every == 0 || t == train.steps) {
            save_checkpoint(&dir, &state, &mut summary)?;
        }
        if let Some((next, record)) = stepped {
            write_line(&mut steps, &StepLog::from(&record))?;
            state = next;
            summary.steps_completed = state.step;
        }
    }
    if train.steps == 0 {
        save_checkpoint(&dir, &state, &mut summary)?;
    }
    metrics.flush()?;
    steps.flush()?;
    if let Some(e) = &failure {
        summary.halted = Some(format!("{e:#}"));
    }
    summary.final_metrics = records.last().cloned();
    fs::write(
        dir.join(SUMMARY_FILE),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(RunOutcome {
        dir,
        records,
        state,
        summary,
    })
}

fn save_checkpoint(dir: &Path, state: &TrainState, summary: &mut RunSummary) -> Result<()> {
    let path = snapshot_path(dir, state.step);
    state.policy.save(&path)?;
    summary.checkpoints.push(
        path.file_name()
            .expect("file name")
            .to_string_lossy()
            .into_owned(),
    );
    Ok(())
}
