//! The identity and order checks run by `check-lemmas`.

use std::fmt::Write as _;

use anyhow::{bail, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use eruption_core::diagnostics::{
    corollary_check, entropy_difference_quotient, entropy_report, enumerate_distribution,
    format_mass, interference, orthogonal_pair, predicted_vs_observed_drift,
    sample_corollary_instance, CorollaryVerdict, Hypothesis, ENUMERATION_BOUND,
};
use eruption_core::env::{Episode, ToolQASpec};
use eruption_core::numerics::fd::{finite_difference_check, FD_STEP};
use eruption_core::numerics::{ParamVector, RealMatrix};
use eruption_core::policy::{
    forward, sample, trajectory_gradient, GradientBundle, PolicyArchitecture, PolicySnapshot,
};
use eruption_core::trainer::{compute_advantages, rl_loss, AdvantageMode, Group};
use eruption_core::Error;

use crate::config::ExperimentConfig;

/// Coordinate scale of the random snapshots the identities are checked on.
pub const INSTANCE_SCALE: f64 = 0.3;
/// Smaller scale for the drift check, so the tested steps are in the second-order regime.
pub const DRIFT_SCALE: f64 = 0.1;
pub const FORMAT_MASS_SCALE: f64 = 0.2;
pub const GROUP_SIZE: usize = 8;
pub const DRIFT_GROUP_SIZE: usize = 4;
pub const DRIFT_STEPS: [f64; 2] = [1e-2, 5e-3];
pub const ENTROPY_STEPS: [f64; 2] = [1e-3, 5e-4];
pub const FORMAT_MASS_SNAPSHOTS: u64 = 4;
pub const COROLLARY_INSTANCES: usize = 20;

pub const GRADIENT_TOL: f64 = 1e-6;
pub const W_IDENTITY_TOL: f64 = 1e-10;
pub const DECOMPOSITION_TOL: f64 = 1e-12;
pub const NORMALIZATION_TOL: f64 = 1e-9;
pub const ENTROPY_RATE_TOL: f64 = 1e-9;
pub const FACTORIZATION_TOL: f64 = 1e-12;
pub const SECOND_ORDER_BAND: (f64, f64) = (3.5, 4.5);
pub const FIRST_ORDER_BAND: (f64, f64) = (1.5, 2.5);

pub const CHECKS: &[&str] = &[
    "gradient_finite_difference",
    "w_block_identity",
    "phi_block_identity",
    "kernel_decomposition",
    "drift_second_order",
    "drift_zero_advantage",
    "drift_orthogonal_pair",
    "enumeration_normalization",
    "entropy_rate_identity",
    "entropy_first_order",
    "format_mass_factorization",
    "corollary_constructive",
    "corollary_negative_control",
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckEntry {
    pub check: String,
    pub seed: u64,
    pub tolerance: String,
    /// Worst error for tolerance checks, the offending ratio for band checks.
    pub observed: f64,
    pub instances: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct LemmaReport {
    pub entries: Vec<CheckEntry>,
}

impl LemmaReport {
    pub fn all_passed(&self) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(|e| e.passed)
    }

    pub fn failed_checks(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self
            .entries
            .iter()
            .filter(|e| !e.passed)
            .map(|e| e.check.as_str())
            .collect();
        names.dedup();
        names
    }

    pub fn render_table(&self) -> String {
        let mut out = format!(
            "{:<28} {:>6} {:>16} {:>12} {:>5}  {}\n",
            "check", "seed", "tolerance", "observed", "n", "status"
        );
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{:<28} {:>6} {:>16} {:>12.3e} {:>5}  {}",
                e.check,
                e.seed,
                e.tolerance,
                e.observed,
                e.instances,
                if e.passed { "pass" } else { "FAIL" }
            );
        }
        out
    }
}

struct Recorder<'a> {
    report: &'a mut LemmaReport,
    seed: u64,
}

impl Recorder<'_> {
    fn below(&mut self, check: &str, worst: f64, tol: f64, instances: usize) {
        self.push(check, format!("< {tol:e}"), worst, instances, worst < tol);
    }

    /// `values` must all fall inside `band`; the one farthest from its centre is reported.
    fn band(&mut self, check: &str, values: &[f64], band: (f64, f64)) {
        let centre = 0.5 * (band.0 + band.1);
        let worst = values
            .iter()
            .copied()
            .max_by(|a, b| (a - centre).abs().total_cmp(&(b - centre).abs()))
            .unwrap_or(f64::NAN);
        let ok = !values.is_empty() && values.iter().all(|v| (band.0..=band.1).contains(v));
        self.push(
            check,
            format!("[{}, {}]", band.0, band.1),
            worst,
            values.len(),
            ok,
        );
    }

    fn push(
        &mut self,
        check: &str,
        tolerance: String,
        observed: f64,
        instances: usize,
        passed: bool,
    ) {
        self.report.entries.push(CheckEntry {
            check: check.to_string(),
            seed: self.seed,
            tolerance,
            observed,
            instances,
            passed,
        });
    }
}

/// Deliberate corruption used to confirm the suite can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Perturbs one residual feeding the output-block token-pair sum.
    OutputBlock,
}

fn sampled_group(
    snap: &PolicySnapshot,
    spec: &ToolQASpec,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Group> {
    let prompt = spec.prompt(spec.keys[rng.gen_range(0..spec.keys.len())]);
    let episodes = (0..size)
        .map(|_| {
            let y = sample(
                snap,
                &prompt,
                spec.eos,
                1.0,
                spec.max_response_len,
                rng.gen(),
            )?;
            Ok(Episode::score(spec, &prompt, &y)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let raw: Vec<f64> = (0..size).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let advantages = compute_advantages(&raw, AdvantageMode::Centered)?;
    Ok(Group::with_advantages(prompt, episodes, advantages)?)
}

fn bundles(snap: &PolicySnapshot, group: &Group) -> Result<Vec<GradientBundle>> {
    group
        .episodes
        .iter()
        .enumerate()
        .map(|(i, e)| Ok(trajectory_gradient(snap, &group.prompt, &e.response)?.with_id(i)))
        .collect()
}

fn check_gradient(
    rec: &mut Recorder,
    arch: PolicyArchitecture,
    spec: &ToolQASpec,
    seed: u64,
) -> Result<()> {
    let snap = PolicySnapshot::init(arch, seed)?;
    let prompt = spec.prompt(spec.keys[seed as usize % spec.keys.len()]);
    let response = sample(&snap, &prompt, spec.eos, 1.0, spec.max_response_len, seed)?;
    let b = trajectory_gradient(&snap, &prompt, &response)?;
    let f = |p: &ParamVector| {
        PolicySnapshot::from_params(arch, p.clone(), 0)
            .and_then(|s| forward(&s, &prompt, &response))
            .map_or(f64::NAN, |(ell, _)| ell)
    };
    let report = finite_difference_check(f, snap.params(), &b.g, FD_STEP)?;
    let worst = if report.non_finite.is_empty() {
        report.max_relative_error
    } else {
        f64::INFINITY
    };
    rec.below(
        "gradient_finite_difference",
        worst,
        GRADIENT_TOL,
        report.coordinates,
    );
    Ok(())
}

fn check_kernels(
    rec: &mut Recorder,
    arch: PolicyArchitecture,
    spec: &ToolQASpec,
    seed: u64,
    fault: Option<Fault>,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let snap = PolicySnapshot::random(arch, seed, INSTANCE_SCALE)?;
    let group = sampled_group(&snap, spec, GROUP_SIZE, &mut rng)?;
    let mut b = bundles(&snap, &group)?;
    if fault == Some(Fault::OutputBlock) {
        b[0].tokens[0].residual[0] += 0.25;
    }
    let r = interference(&b, &group.advantages)?;
    let pairs = GROUP_SIZE * (GROUP_SIZE + 1) / 2;
    rec.below(
        "w_block_identity",
        r.w_identity_error,
        W_IDENTITY_TOL,
        pairs,
    );
    rec.below(
        "phi_block_identity",
        r.phi_identity_error,
        W_IDENTITY_TOL,
        pairs,
    );
    rec.below(
        "kernel_decomposition",
        r.decomposition_error,
        DECOMPOSITION_TOL,
        pairs,
    );
    Ok(())
}

fn check_drift(
    rec: &mut Recorder,
    arch: PolicyArchitecture,
    spec: &ToolQASpec,
    seed: u64,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD21F7);
    let snap = PolicySnapshot::random(arch, seed.wrapping_add(1000), DRIFT_SCALE)?;
    let group = sampled_group(&snap, spec, DRIFT_GROUP_SIZE, &mut rng)?;
    let [big, small] = DRIFT_STEPS;
    let a = predicted_vs_observed_drift(&snap, &group, big)?;
    let b = predicted_vs_observed_drift(&snap, &group, small)?;
    rec.band(
        "drift_second_order",
        &[a.residual / b.residual],
        SECOND_ORDER_BAND,
    );

    let still = Group::with_advantages(
        group.prompt.clone(),
        group.episodes.clone(),
        vec![0.0; group.size()],
    )?;
    let z = predicted_vs_observed_drift(&snap, &still, big)?;
    let worst = z.predicted.abs().max(z.observed.abs());
    rec.push("drift_zero_advantage", "= 0".into(), worst, 1, worst == 0.0);

    let base = PolicySnapshot::random(arch, seed.wrapping_add(1500), DRIFT_SCALE)?;
    let pair = orthogonal_pair(
        &base,
        spec,
        &spec.prompt(spec.keys[seed as usize % spec.keys.len()]),
    )?;
    let a = predicted_vs_observed_drift(&pair.snapshot, &pair.group, big)?;
    let b = predicted_vs_observed_drift(&pair.snapshot, &pair.group, small)?;
    rec.band(
        "drift_orthogonal_pair",
        &[a.observed / b.observed],
        SECOND_ORDER_BAND,
    );
    Ok(())
}

fn relative_gap(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn check_entropy(
    rec: &mut Recorder,
    arch: PolicyArchitecture,
    spec: &ToolQASpec,
    seed: u64,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xE27);
    let snap = PolicySnapshot::random(arch, seed.wrapping_add(2000), INSTANCE_SCALE)?;
    let group = sampled_group(&snap, spec, GROUP_SIZE, &mut rng)?;
    // Direction of one descent step on the RL loss, normalized.
    let grad = rl_loss(&group, &snap)?.gradient(snap.params())?;
    let norm = grad.norm();
    if norm == 0.0 {
        bail!("seed {seed}: zero RL gradient for the entropy check");
    }
    let direction = grad.scaled(-1.0 / norm);
    let prompt = &group.prompt;
    let dist = enumerate_distribution(&snap, spec, prompt)?;
    rec.below(
        "enumeration_normalization",
        (dist.total_mass() - 1.0).abs(),
        NORMALIZATION_TOL,
        dist.len(),
    );
    let r = entropy_report(&snap, spec, prompt, &direction)?;
    let rate = r.predicted_rate.expect("exact mode");
    let analytic = r.analytic_rate.expect("exact mode");
    rec.below(
        "entropy_rate_identity",
        relative_gap(rate, analytic),
        ENTROPY_RATE_TOL,
        r.trajectories,
    );
    let [big, small] = ENTROPY_STEPS;
    let e1 = entropy_difference_quotient(&snap, spec, prompt, &direction, big)? - rate;
    let e2 = entropy_difference_quotient(&snap, spec, prompt, &direction, small)? - rate;
    rec.band("entropy_first_order", &[e1 / e2], FIRST_ORDER_BAND);
    Ok(())
}

fn check_format_mass(
    rec: &mut Recorder,
    arch: PolicyArchitecture,
    spec: &ToolQASpec,
    seed: u64,
) -> Result<()> {
    let mut worst: f64 = 0.0;
    for j in 0..FORMAT_MASS_SNAPSHOTS {
        let snap =
            PolicySnapshot::random(arch, seed.wrapping_add(3000 + 100 * j), FORMAT_MASS_SCALE)?;
        let prompt = spec.prompt(spec.keys[j as usize % spec.keys.len()]);
        let r = format_mass(&enumerate_distribution(&snap, spec, &prompt)?, spec)?;
        if r.joint == 0.0 {
            bail!("seed {seed}: joint format and semantic mass is zero");
        }
        worst = worst.max(r.factorization_error());
    }
    rec.below(
        "format_mass_factorization",
        worst,
        FACTORIZATION_TOL,
        FORMAT_MASS_SNAPSHOTS as usize,
    );
    Ok(())
}

fn check_corollary(rec: &mut Recorder, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0_2011);
    let mut failures = 0usize;
    for _ in 0..COROLLARY_INSTANCES {
        let g = rng.gen_range(2..=GROUP_SIZE);
        let inst = sample_corollary_instance(&mut rng, g, 16)?;
        match corollary_check(&inst.grads, &inst.advantages, inst.delta)? {
            CorollaryVerdict::Holds { .. } => {}
            _ => failures += 1,
        }
    }
    rec.push(
        "corollary_constructive",
        "0 failures".into(),
        failures as f64,
        COROLLARY_INSTANCES,
        failures == 0,
    );

    let scale = rng.gen_range(0.5..2.0);
    let axis = |i: usize| {
        let v: Vec<f64> = (0..4).map(|k| if k == i { scale } else { 0.0 }).collect();
        ParamVector::new().with("g", RealMatrix::row_vector(v))
    };
    let grads = [axis(0)?, axis(1)?];
    let v = corollary_check(&grads, &[1.0, -1.0], 0.5)?;
    let named = matches!(
        v,
        CorollaryVerdict::HypothesisViolated {
            failed: Hypothesis::Similarity { .. }
        }
    );
    rec.push(
        "corollary_negative_control",
        "similarity violated".into(),
        0.0,
        1,
        named,
    );
    Ok(())
}

/// Refuses specs whose response space is too large to enumerate.
pub fn check_guard(spec: &ToolQASpec) -> Result<(), Error> {
    let required = (spec.vocab_size() as f64).powi(spec.max_response_len as i32);
    if required > ENUMERATION_BOUND {
        return Err(Error::EnumerationGuard {
            required,
            bound: ENUMERATION_BOUND,
        });
    }
    Ok(())
}

/// Only the finite-difference gradient check, over the same seeds as the suite.
pub fn gradient_checks(config: &ExperimentConfig) -> Result<LemmaReport> {
    config.validate()?;
    let spec = config.spec()?;
    let arch = config.arch()?;
    let mut report = LemmaReport::default();
    for seed in config.seed..config.seed + config.lemmas.seeds {
        check_gradient(
            &mut Recorder {
                report: &mut report,
                seed,
            },
            arch,
            &spec,
            seed,
        )?;
    }
    Ok(report)
}

/// Runs every check for seeds `config.seed .. config.seed + config.lemmas.seeds`.
pub fn run_lemma_suite(config: &ExperimentConfig, fault: Option<Fault>) -> Result<LemmaReport> {
    config.validate()?;
    if config.lemmas.seeds < 5 {
        bail!(
            "lemmas.seeds: the suite needs at least 5 seeds, got {}",
            config.lemmas.seeds
        );
    }
    let spec = config.spec()?;
    check_guard(&spec)?;
    let arch = config.arch()?;
    let mut report = LemmaReport::default();
    for seed in config.seed..config.seed + config.lemmas.seeds {
        let mut rec = Recorder {
            report: &mut report,
            seed,
        };
        check_gradient(&mut rec, arch, &spec, seed)?;
        check_kernels(&mut rec, arch, &spec, seed, fault)?;
        check_drift(&mut rec, arch, &spec, seed)?;
        check_entropy(&mut rec, arch, &spec, seed)?;
        check_format_mass(&mut rec, arch, &spec, seed)?;
        check_corollary(&mut rec, seed)?;
    }
    Ok(report)
}
