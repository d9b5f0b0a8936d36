use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{enumerate_distribution, enumerate_with_tangent};
use crate::env::ToolQASpec;
use crate::error::{Error, Result};
use crate::numerics::ParamVector;
use crate::policy::{forward, sample_with_rng, PolicySnapshot};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimationMode {
    /// Trajectory-distribution entropy over the full enumeration.
    Exact,
    /// Mean next-token entropy along sampled responses.
    MonteCarloToken,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub mode: EstimationMode,
    /// Nats.
    pub entropy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub covariance: Option<f64>,
    /// `−Cov(log π, ℓ̇)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predicted_rate: Option<f64>,
    /// `−Σ π ℓ̇ (log π + 1)`, the entropy derivative taken directly.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub analytic_rate: Option<f64>,
    /// Number of trajectories enumerated or sampled.
    pub trajectories: usize,
}

/// `−Σ π log π` for probabilities given as logs; zero-probability terms vanish.
pub fn entropy_of_log_probs(log_probs: &[f64]) -> f64 {
    -log_probs
        .iter()
        .map(|&l| {
            let p = l.exp();
            if p > 0.0 {
                p * l
            } else {
                0.0
            }
        })
        .sum::<f64>()
}

/// Entropy, covariance and rate from `(log π, ℓ̇)` pairs over a full support.
pub fn entropy_rate_from(log_probs: &[f64], tangents: &[f64]) -> Result<EntropyReport> {
    if log_probs.len() != tangents.len() || log_probs.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} log-probabilities with {} tangents",
            log_probs.len(),
            tangents.len()
        )));
    }
    let probs: Vec<f64> = log_probs.iter().map(|l| l.exp()).collect();
    let mean_log: f64 = probs.iter().zip(log_probs).map(|(p, l)| p * l).sum();
    let mean_rate: f64 = probs.iter().zip(tangents).map(|(p, t)| p * t).sum();
    let covariance: f64 = probs
        .iter()
        .zip(log_probs.iter().zip(tangents))
        .map(|(p, (l, t))| p * (l - mean_log) * (t - mean_rate))
        .sum();
    let analytic: f64 = -probs
        .iter()
        .zip(log_probs.iter().zip(tangents))
        .map(|(p, (l, t))| p * t * (l + 1.0))
        .sum::<f64>();
    Ok(EntropyReport {
        mode: EstimationMode::Exact,
        entropy: entropy_of_log_probs(log_probs),
        covariance: Some(covariance),
        predicted_rate: Some(-covariance),
        analytic_rate: Some(analytic),
        trajectories: log_probs.len(),
    })
}

/// Exact trajectory entropy and its rate of change along `direction`.
pub fn entropy_report(
    snapshot: &PolicySnapshot,
    spec: &ToolQASpec,
    prompt: &[usize],
    direction: &ParamVector,
) -> Result<EntropyReport> {
    let dist = enumerate_with_tangent(snapshot, spec, prompt, direction)?;
    entropy_rate_from(
        dist.log_probs(),
        dist.tangents().expect("tangent enumeration"),
    )
}

/// Exact trajectory entropy without a rate.
pub fn exact_entropy(
    snapshot: &PolicySnapshot,
    spec: &ToolQASpec,
    prompt: &[usize],
) -> Result<f64> {
    Ok(entropy_of_log_probs(
        enumerate_distribution(snapshot, spec, prompt)?.log_probs(),
    ))
}

/// `(H(θ + η·dir) − H(θ)) / η` by exact enumeration.
pub fn entropy_difference_quotient(
    snapshot: &PolicySnapshot,
    spec: &ToolQASpec,
    prompt: &[usize],
    direction: &ParamVector,
    step: f64,
) -> Result<f64> {
    let moved = snapshot.apply_update(direction, step)?;
    Ok((exact_entropy(&moved, spec, prompt)? - exact_entropy(snapshot, spec, prompt)?) / step)
}

/// Mean per-token entropy of the next-token distributions along sampled responses.
pub fn token_entropy_estimate<R: Rng>(
    snapshot: &PolicySnapshot,
    spec: &ToolQASpec,
    prompt: &[usize],
    samples: usize,
    rng: &mut R,
) -> Result<EntropyReport> {
    if samples == 0 {
        return Err(Error::InvalidArgument(
            "sample budget must be positive".into(),
        ));
    }
    let (mut total, mut count) = (0.0, 0usize);
    for _ in 0..samples {
        let y = sample_with_rng(snapshot, prompt, spec.eos, 1.0, spec.max_response_len, rng)?;
        let (_, diags) = forward(snapshot, prompt, &y)?;
        for d in &diags {
            total -= d
                .probs
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|p| p * p.ln())
                .sum::<f64>();
        }
        count += diags.len();
    }
    Ok(EntropyReport {
        mode: EstimationMode::MonteCarloToken,
        entropy: total / count as f64,
        covariance: None,
        predicted_rate: None,
        analytic_rate: None,
        trajectories: samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyArchitecture;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_over_four() {
        let l = vec![0.25f64.ln(); 4];
        let r = entropy_rate_from(&l, &[0.0; 4]).unwrap();
        assert!((r.entropy - 4f64.ln()).abs() < 1e-15);
        assert_eq!(r.covariance, Some(0.0));
        assert_eq!(r.predicted_rate, Some(-0.0));
    }

    #[test]
    fn zero_direction_gives_zero_rate() {
        let spec = ToolQASpec::micro();
        let arch = PolicyArchitecture::new(spec.vocab_size(), spec.context_window());
        let snap = PolicySnapshot::random(arch, 1, 0.3).unwrap();
        let zero = snap.params().zeros_like();
        let r = entropy_report(&snap, &spec, &spec.prompt(spec.keys[0]), &zero).unwrap();
        assert_eq!(r.covariance, Some(0.0));
        assert_eq!(r.predicted_rate.unwrap(), 0.0);
        assert!(r.entropy >= 0.0 && r.entropy <= (r.trajectories as f64).ln());
    }

    #[test]
    fn covariance_matches_direct_derivative_and_finite_differences() {
        let spec = ToolQASpec::micro();
        let arch = PolicyArchitecture::new(spec.vocab_size(), spec.context_window());
        let snap = PolicySnapshot::random(arch, 2, 0.3).unwrap();
        let raw = PolicySnapshot::random(arch, 99, 1.0).unwrap();
        let dir = raw.params().scaled(1.0 / raw.params().norm());
        let prompt = spec.prompt(spec.keys[1]);
        let r = entropy_report(&snap, &spec, &prompt, &dir).unwrap();
        let rate = r.predicted_rate.unwrap();
        assert!((rate - r.analytic_rate.unwrap()).abs() <= 1e-9 * rate.abs().max(1.0));
        let eta = 1e-3;
        let e1 = entropy_difference_quotient(&snap, &spec, &prompt, &dir, eta).unwrap() - rate;
        let e2 =
            entropy_difference_quotient(&snap, &spec, &prompt, &dir, eta / 2.0).unwrap() - rate;
        let ratio = e1 / e2;
        assert!((1.7..=2.3).contains(&ratio), "ratio {ratio} ({e1}, {e2})");
    }

    #[test]
    fn token_estimate_is_bounded() {
        let spec = ToolQASpec::micro();
        let arch = PolicyArchitecture::new(spec.vocab_size(), spec.context_window());
        let snap = PolicySnapshot::init(arch, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r =
            token_entropy_estimate(&snap, &spec, &spec.prompt(spec.keys[0]), 50, &mut rng).unwrap();
        assert_eq!(r.mode, EstimationMode::MonteCarloToken);
        assert!(r.entropy <= (spec.vocab_size() as f64).ln() + 1e-12);
        assert!(r.entropy > 0.99 * (spec.vocab_size() as f64).ln());
        assert!(r.covariance.is_none());
    }
}
