//! Group-relative policy-gradient training with an optional token-level
//! correctness classifier and a KL anchor.

mod seal;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{Episode, ToolQASpec};
use crate::error::{Error, Result};
use crate::numerics::{ParamVector, Tape, Var};
use crate::policy::{self, log_prob_table, PolicySnapshot, PolicyVars, SequenceVars};

pub use seal::{SealHead, SealVars};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageMode {
    Centered,
    #[default]
    Standardized,
}

impl std::str::FromStr for AdvantageMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "centered" => Ok(Self::Centered),
            "standardized" => Ok(Self::Standardized),
            _ => Err(Error::InvalidArgument(format!("advantage mode `{s}`"))),
        }
    }
}

impl std::fmt::Display for AdvantageMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Centered => "centered",
            Self::Standardized => "standardized",
        })
    }
}

/// Within-group advantages; an all-equal group yields exact zeros.
pub fn compute_advantages(rewards: &[f64], mode: AdvantageMode) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "group of {} rewards; at least 2 required",
            rewards.len()
        )));
    }
    if let Some(r) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(Error::NonFinite(format!("reward {r}")));
    }
    if rewards.iter().all(|r| *r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let g = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / g;
    let centered: Vec<f64> = rewards.iter().map(|r| r - mean).collect();
    Ok(match mode {
        AdvantageMode::Centered => centered,
        AdvantageMode::Standardized => {
            let std = (centered.iter().map(|a| a * a).sum::<f64>() / g).sqrt();
            if std == 0.0 {
                vec![0.0; rewards.len()]
            } else {
                centered.iter().map(|a| a / std).collect()
            }
        }
    })
}

/// Tolerance on `|Σ A_i|`.
pub const CENTERING_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub prompt: Vec<usize>,
    pub episodes: Vec<Episode>,
    pub advantages: Vec<f64>,
}

impl Group {
    pub fn new(prompt: Vec<usize>, episodes: Vec<Episode>, mode: AdvantageMode) -> Result<Self> {
        let rewards: Vec<f64> = episodes.iter().map(|e| e.reward).collect();
        let advantages = compute_advantages(&rewards, mode)?;
        Self::with_advantages(prompt, episodes, advantages)
    }

    /// Group with caller-supplied advantages, which must be centered.
    pub fn with_advantages(
        prompt: Vec<usize>,
        episodes: Vec<Episode>,
        advantages: Vec<f64>,
    ) -> Result<Self> {
        if episodes.len() < 2 || advantages.len() != episodes.len() {
            return Err(Error::InvalidArgument(format!(
                "{} episodes with {} advantages",
                episodes.len(),
                advantages.len()
            )));
        }
        let sum: f64 = advantages.iter().sum();
        if sum.abs() > CENTERING_TOL {
            return Err(Error::NotCentered(sum));
        }
        Ok(Self {
            prompt,
            episodes,
            advantages,
        })
    }

    pub fn size(&self) -> usize {
        self.episodes.len()
    }

    /// Correctness label per trajectory.
    pub fn labels(&self) -> Vec<f64> {
        self.episodes
            .iter()
            .map(|e| if e.is_correct() { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn response_tokens(&self) -> usize {
        self.episodes.iter().map(|e| e.response.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub group_size: usize,
    /// Weight of the correctness-classifier loss.
    pub seal_weight: f64,
    pub kl_coef: f64,
    pub temperature: f64,
    pub advantage_mode: AdvantageMode,
    pub steps: u64,
    pub rng_seed: u64,
    /// First step at which the classifier loss is applied.
    pub seal_start_step: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            group_size: 8,
            seal_weight: 0.0,
            kl_coef: 0.01,
            temperature: 1.0,
            advantage_mode: AdvantageMode::Standardized,
            steps: 200,
            rng_seed: 0,
            seal_start_step: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        if !(self.seal_weight >= 0.0 && self.seal_weight.is_finite()) {
            return bad("seal_weight must be non-negative");
        }
        if !(self.kl_coef >= 0.0 && self.kl_coef.is_finite()) {
            return bad("kl_coef must be non-negative");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        Ok(())
    }

    pub fn seal_active(&self, step: u64) -> bool {
        self.seal_weight > 0.0 && step >= self.seal_start_step
    }
}

/// A scalar loss recorded on its own tape.
pub struct LossGraph {
    tape: Tape,
    output: Var,
}

impl LossGraph {
    pub fn value(&self) -> f64 {
        self.tape.scalar(self.output)
    }

    /// Gradient over every registered parameter; `current` must match the
    /// parameters the loss was recorded with.
    pub fn gradient(&self, current: &ParamVector) -> Result<ParamVector> {
        self.tape.backward_checked(self.output, 1.0, current)
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }
}

fn record_group(tape: &mut Tape, vars: &PolicyVars, group: &Group) -> Result<Vec<SequenceVars>> {
    group
        .episodes
        .iter()
        .map(|e| vars.record_sequence(tape, &group.prompt, &e.response))
        .collect()
}

fn rl_terms(group: &Group, seqs: &[SequenceVars]) -> Vec<(Var, f64)> {
    seqs.iter()
        .zip(&group.advantages)
        .map(|(s, a)| (s.log_likelihood, -a))
        .collect()
}

/// `−Σ A_i ℓ_i` on a fresh tape over the policy parameters only.
pub fn rl_loss(group: &Group, snapshot: &PolicySnapshot) -> Result<LossGraph> {
    let mut tape = Tape::new();
    let vars = PolicyVars::register(&mut tape, snapshot)?;
    let seqs = record_group(&mut tape, &vars, group)?;
    let output = tape.lin_comb(&rl_terms(group, &seqs))?;
    Ok(LossGraph { tape, output })
}

fn seal_term(
    tape: &mut Tape,
    head: &SealVars,
    group: &Group,
    seqs: &[SequenceVars],
) -> Result<Var> {
    let total = group.response_tokens();
    if total == 0 {
        return Err(Error::InvalidArgument(
            "group has no response tokens".into(),
        ));
    }
    let mut terms = Vec::with_capacity(seqs.len());
    for (s, z) in seqs.iter().zip(group.labels()) {
        if tape.value(s.hidden).rows() == 0 {
            continue;
        }
        let logit = head.record(tape, s.hidden)?;
        let signed = if z == 1.0 {
            logit
        } else {
            tape.scale(logit, -1.0)
        };
        let ls = tape.log_sigmoid(signed);
        terms.push((tape.sum_all(ls), -1.0 / total as f64));
    }
    tape.lin_comb(&terms)
}

/// Mean token-level binary cross-entropy of the classifier head.
pub fn seal_loss(group: &Group, snapshot: &PolicySnapshot, head: &SealHead) -> Result<LossGraph> {
    let mut tape = Tape::new();
    let vars = PolicyVars::register(&mut tape, snapshot)?;
    let head_vars = head.register(&mut tape)?;
    let seqs = record_group(&mut tape, &vars, group)?;
    let output = seal_term(&mut tape, &head_vars, group, &seqs)?;
    Ok(LossGraph { tape, output })
}

fn reference_tables(
    group: &Group,
    reference: &PolicySnapshot,
) -> Result<Vec<crate::numerics::RealMatrix>> {
    group
        .episodes
        .iter()
        .map(|e| log_prob_table(reference, &group.prompt, &e.response))
        .collect()
}

fn kl_term(
    tape: &mut Tape,
    group: &Group,
    seqs: &[SequenceVars],
    reference: &PolicySnapshot,
) -> Result<Var> {
    let total = group.response_tokens();
    if total == 0 {
        return tape.lin_comb(&[]);
    }
    let tables = reference_tables(group, reference)?;
    let mut terms = Vec::with_capacity(seqs.len());
    for (s, table) in seqs.iter().zip(tables) {
        if table.rows() == 0 {
            continue;
        }
        let r = tape.constant(table);
        let diff = tape.lin_comb(&[(s.log_probs, 1.0), (r, -1.0)])?;
        let p = tape.exp(s.log_probs);
        let m = tape.mul(p, diff)?;
        terms.push((tape.sum_all(m), 1.0 / total as f64));
    }
    tape.lin_comb(&terms)
}

fn check_same_arch(a: &PolicySnapshot, b: &PolicySnapshot) -> Result<()> {
    if a.arch() != b.arch() {
        return Err(Error::InvalidArchitecture(format!(
            "reference {:?} differs from policy {:?}",
            b.arch(),
            a.arch()
        )));
    }
    Ok(())
}

/// Per-token `KL(π_θ ‖ π_ref)` averaged over the group's response positions.
pub fn kl_anchor_loss(
    group: &Group,
    snapshot: &PolicySnapshot,
    reference: &PolicySnapshot,
) -> Result<LossGraph> {
    check_same_arch(snapshot, reference)?;
    let mut tape = Tape::new();
    let vars = PolicyVars::register(&mut tape, snapshot)?;
    let seqs = record_group(&mut tape, &vars, group)?;
    let output = kl_term(&mut tape, group, &seqs, reference)?;
    Ok(LossGraph { tape, output })
}

/// `Σ p log(p/q)` for two distributions over the same support.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a.ln() - b.ln()))
        .sum()
}

/// RNG stream for `(seed, step, index)`, independent of scheduling.
pub fn stream_rng(seed: u64, step: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&step.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Samples and scores `group_size` responses to `prompt` in parallel.
pub fn rollout(
    snapshot: &PolicySnapshot,
    spec: &ToolQASpec,
    prompt: &[usize],
    config: &TrainConfig,
    step: u64,
) -> Result<Vec<Episode>> {
    (0..config.group_size)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(config.rng_seed, step, i as u64);
            let response = policy::sample_with_rng(
                snapshot,
                prompt,
                spec.eos,
                config.temperature,
                spec.max_response_len,
                &mut rng,
            )?;
            Episode::score(spec, prompt, &response)
        })
        .collect()
}

/// Prompt drawn for `step`.
pub fn step_prompt(spec: &ToolQASpec, seed: u64, step: u64) -> Vec<usize> {
    let mut rng = stream_rng(seed, step, u64::MAX);
    let key = spec.keys[rng.gen_range(0..spec.keys.len())];
    spec.prompt(key)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub policy: PolicySnapshot,
    pub head: SealHead,
    /// Anchor for the KL term: the policy as it stood before RL.
    pub reference: PolicySnapshot,
    pub step: u64,
}

impl TrainState {
    pub fn new(policy: PolicySnapshot, head: SealHead) -> Self {
        Self {
            reference: policy.clone(),
            policy,
            head,
            step: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub snapshot_version: u64,
    pub group: Group,
    pub log_likelihoods: Vec<f64>,
    pub token_log_probs: Vec<Vec<f64>>,
    /// Mean entropy of the next-token distributions along sampled responses.
    pub token_entropy: f64,
    /// Response-mean hidden state of each trajectory.
    pub pooled_hidden: Vec<Vec<f64>>,
    pub rl_loss: f64,
    pub seal_loss: Option<f64>,
    pub kl_loss: Option<f64>,
    pub total_loss: f64,
    pub grad_norm: f64,
}

struct StepLoss {
    tape: Tape,
    total: Var,
    rl: Var,
    seal: Option<Var>,
    kl: Option<Var>,
    seqs: Vec<SequenceVars>,
}

fn record_step_loss(state: &TrainState, group: &Group, config: &TrainConfig) -> Result<StepLoss> {
    let mut tape = Tape::new();
    let vars = PolicyVars::register(&mut tape, &state.policy)?;
    let head_vars = if config.seal_active(state.step) {
        Some(state.head.register(&mut tape)?)
    } else {
        None
    };
    let seqs = record_group(&mut tape, &vars, group)?;
    let mut terms = rl_terms(group, &seqs);
    let rl = tape.lin_comb(&terms)?;
    let seal = match &head_vars {
        Some(h) => {
            let s = seal_term(&mut tape, h, group, &seqs)?;
            terms.push((s, config.seal_weight));
            Some(s)
        }
        None => None,
    };
    let kl = if config.kl_coef > 0.0 {
        let k = kl_term(&mut tape, group, &seqs, &state.reference)?;
        terms.push((k, config.kl_coef));
        Some(k)
    } else {
        None
    };
    let total = tape.lin_comb(&terms)?;
    Ok(StepLoss {
        tape,
        total,
        rl,
        seal,
        kl,
        seqs,
    })
}

fn mean_rows(m: &crate::numerics::RealMatrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (o, x) in out.iter_mut().zip(m.row(r)) {
            *o += x;
        }
    }
    let n = m.rows().max(1) as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// One rollout, loss assembly and plain gradient-descent update.
///
/// On a non-finite loss or update the input state is left untouched and
/// [`Error::NonFiniteLoss`] is returned.
pub fn train_step(
    state: &TrainState,
    config: &TrainConfig,
    spec: &ToolQASpec,
) -> Result<(TrainState, StepRecord)> {
    config.validate()?;
    let step = state.step;
    let prompt = step_prompt(spec, config.rng_seed, step);
    let episodes = rollout(&state.policy, spec, &prompt, config, step).map_err(|e| match e {
        Error::NonFinite(_) => Error::NonFiniteLoss { step },
        other => other,
    })?;
    let group = Group::new(prompt, episodes, config.advantage_mode)?;
    let loss = record_step_loss(state, &group, config)?;
    let total_loss = loss.tape.scalar(loss.total);
    if !total_loss.is_finite() {
        return Err(Error::NonFiniteLoss { step });
    }
    let current = if loss.seal.is_some() {
        state.policy.params().concat(state.head.params())?
    } else {
        state.policy.params().clone()
    };
    let grad = loss.tape.backward_checked(loss.total, 1.0, &current)?;
    if !grad.is_finite() {
        return Err(Error::NonFiniteLoss { step });
    }
    let names: Vec<&str> = state.policy.params().names().collect();
    let (policy_grad, head_grad) = grad.split(&names);
    let policy = state
        .policy
        .apply_update(&policy_grad, -config.learning_rate)
        .map_err(|_| Error::NonFiniteLoss { step })?;
    let head = if loss.seal.is_some() {
        state
            .head
            .apply_update(&head_grad, -config.learning_rate)
            .map_err(|_| Error::NonFiniteLoss { step })?
    } else {
        state.head.clone()
    };

    let tape = &loss.tape;
    let mut entropy_sum = 0.0;
    let mut positions = 0usize;
    let mut token_log_probs = Vec::with_capacity(group.size());
    let mut pooled_hidden = Vec::with_capacity(group.size());
    for s in &loss.seqs {
        let lp = tape.value(s.log_probs);
        for r in 0..lp.rows() {
            entropy_sum -= lp.row(r).iter().map(|l| l.exp() * l).sum::<f64>();
            positions += 1;
        }
        token_log_probs.push(s.token_log_probs.iter().map(|v| tape.scalar(*v)).collect());
        pooled_hidden.push(mean_rows(tape.value(s.hidden)));
    }
    let record = StepRecord {
        step,
        snapshot_version: state.policy.version(),
        log_likelihoods: loss
            .seqs
            .iter()
            .map(|s| tape.scalar(s.log_likelihood))
            .collect(),
        token_log_probs,
        token_entropy: entropy_sum / positions.max(1) as f64,
        pooled_hidden,
        rl_loss: tape.scalar(loss.rl),
        seal_loss: loss.seal.map(|v| tape.scalar(v)),
        kl_loss: loss.kl.map(|v| tape.scalar(v)),
        total_loss,
        grad_norm: grad.norm(),
        group,
    };
    let next = TrainState {
        policy,
        head,
        reference: state.reference.clone(),
        step: step + 1,
    };
    Ok((next, record))
}

pub const DEFAULT_MID_TRAIN_EPOCHS: usize = 200;
pub const DEFAULT_MID_TRAIN_LR: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct MidTrainOutcome {
    pub snapshot: PolicySnapshot,
    /// Loss before each epoch's update.
    pub losses: Vec<f64>,
}

/// Full-batch supervised descent on demonstration response tokens.
pub fn mid_train(
    snapshot: &PolicySnapshot,
    demonstrations: &[(Vec<usize>, Vec<usize>)],
    epochs: usize,
    learning_rate: f64,
) -> Result<MidTrainOutcome> {
    if demonstrations.is_empty() {
        return Err(Error::InvalidArgument("no demonstrations".into()));
    }
    if !(learning_rate > 0.0 && learning_rate.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "learning rate {learning_rate}"
        )));
    }
    let tokens: usize = demonstrations.iter().map(|(_, r)| r.len()).sum();
    if tokens == 0 {
        return Err(Error::InvalidArgument(
            "demonstrations have no response tokens".into(),
        ));
    }
    let mut current = snapshot.clone();
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut tape = Tape::new();
        let vars = PolicyVars::register(&mut tape, &current)?;
        let mut terms = Vec::with_capacity(demonstrations.len());
        for (prompt, response) in demonstrations {
            let s = vars.record_sequence(&mut tape, prompt, response)?;
            terms.push((s.log_likelihood, -1.0 / tokens as f64));
        }
        let loss = tape.lin_comb(&terms)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step: epoch as u64 });
        }
        losses.push(value);
        let grad = tape.backward_checked(loss, 1.0, current.params())?;
        current = current.apply_update(&grad, -learning_rate)?;
    }
    Ok(MidTrainOutcome {
        snapshot: current,
        losses,
    })
}

#[cfg(test)]
mod tests;
