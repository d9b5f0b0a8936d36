use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::gram;
use crate::error::{Error, Result};
use crate::numerics::{ParamVector, RealMatrix};
use crate::trainer::CENTERING_TOL;

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "hypothesis", rename_all = "snake_case")]
pub enum Hypothesis {
    /// `⟨g_i, g_j⟩ ≤ δ‖g_i‖‖g_j‖` for this pair.
    Similarity { i: usize, j: usize },
    /// Largest positive-advantage norm is not below `δ` times the smallest negative one.
    NormRatio {
        max_positive: f64,
        min_negative: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum CorollaryVerdict {
    HypothesisViolated {
        failed: Hypothesis,
    },
    /// Hypotheses hold and every first-order drift `Σ_j A_j⟨g_i, g_j⟩` is negative.
    Holds {
        drifts: Vec<f64>,
    },
    /// Hypotheses hold but some drift is not negative.
    Counterexample {
        drifts: Vec<f64>,
    },
}

impl CorollaryVerdict {
    pub fn is_counterexample(&self) -> bool {
        matches!(self, Self::Counterexample { .. })
    }
}

pub fn corollary_check(
    grads: &[ParamVector],
    advantages: &[f64],
    delta: f64,
) -> Result<CorollaryVerdict> {
    if grads.len() != advantages.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} gradients with {} advantages",
            grads.len(),
            advantages.len()
        )));
    }
    let sum: f64 = advantages.iter().sum();
    if sum.abs() > CENTERING_TOL {
        return Err(Error::NotCentered(sum));
    }
    if !advantages.iter().any(|&a| a > 0.0) || !advantages.iter().any(|&a| a < 0.0) {
        return Err(Error::InvalidArgument(
            "both positive and negative advantages are required".into(),
        ));
    }
    let refs: Vec<&ParamVector> = grads.iter().collect();
    let k: RealMatrix = gram(&refs)?;
    let norms: Vec<f64> = (0..grads.len()).map(|i| k.get(i, i).sqrt()).collect();
    for i in 0..grads.len() {
        for j in i..grads.len() {
            if k.get(i, j) <= norms[i] * norms[j] * delta {
                return Ok(CorollaryVerdict::HypothesisViolated {
                    failed: Hypothesis::Similarity { i, j },
                });
            }
        }
    }
    let pick = |positive: bool| {
        advantages
            .iter()
            .zip(&norms)
            .filter(move |(a, _)| if positive { **a > 0.0 } else { **a < 0.0 })
            .map(|(_, n)| *n)
    };
    let max_positive = pick(true).fold(f64::NEG_INFINITY, f64::max);
    let min_negative = pick(false).fold(f64::INFINITY, f64::min);
    if delta * min_negative <= max_positive {
        return Ok(CorollaryVerdict::HypothesisViolated {
            failed: Hypothesis::NormRatio {
                max_positive,
                min_negative,
            },
        });
    }
    let drifts: Vec<f64> = (0..grads.len())
        .map(|i| {
            advantages
                .iter()
                .enumerate()
                .map(|(j, a)| a * k.get(i, j))
                .sum()
        })
        .collect();
    Ok(if drifts.iter().all(|&d| d < 0.0) {
        CorollaryVerdict::Holds { drifts }
    } else {
        CorollaryVerdict::Counterexample { drifts }
    })
}

/// A random gradient family meant to satisfy the corollary's hypotheses.
pub struct CorollaryInstance {
    pub grads: Vec<ParamVector>,
    pub advantages: Vec<f64>,
    pub delta: f64,
}

/// Draws gradients inside a narrow cone around a random axis, with every
/// negative-advantage norm well above the positive ones divided by `δ`.
pub fn sample_corollary_instance<R: Rng>(
    rng: &mut R,
    group_size: usize,
    dim: usize,
) -> Result<CorollaryInstance> {
    if group_size < 2 || dim < 2 {
        return Err(Error::InvalidArgument(
            "need at least two gradients in two dimensions".into(),
        ));
    }
    let delta: f64 = rng.gen_range(0.5..0.95);
    // Pairwise angle stays below 2·half_angle, whose cosine exceeds delta.
    let half_angle = 0.45 * delta.acos();
    let axis = normalize(gauss(rng, dim));
    let mut rewards = gauss(rng, group_size);
    rewards[0] = rewards[0].abs() + 0.1;
    rewards[1] = -rewards[1].abs() - 0.1;
    let mean = rewards.iter().sum::<f64>() / group_size as f64;
    let mut advantages: Vec<f64> = rewards.iter().map(|r| r - mean).collect();
    let drift: f64 = advantages.iter().sum::<f64>() / group_size as f64;
    advantages.iter_mut().for_each(|a| *a -= drift);
    let max_positive = 1.0;
    let floor = 1.05 * max_positive / delta;
    let mut grads = Vec::with_capacity(group_size);
    for &a in &advantages {
        let norm = if a > 0.0 {
            rng.gen_range(0.2..max_positive)
        } else {
            floor * rng.gen_range(1.0..3.0)
        };
        let mut off = gauss(rng, dim);
        let along: f64 = off.iter().zip(&axis).map(|(o, x)| o * x).sum();
        off.iter_mut().zip(&axis).for_each(|(o, x)| *o -= along * x);
        let off = normalize(off);
        let angle: f64 = rng.gen_range(0.0..half_angle);
        let v: Vec<f64> = axis
            .iter()
            .zip(&off)
            .map(|(x, o)| norm * (angle.cos() * x + angle.sin() * o))
            .collect();
        grads.push(ParamVector::new().with("g", RealMatrix::row_vector(v))?);
    }
    Ok(CorollaryInstance {
        grads,
        advantages,
        delta,
    })
}

fn gauss<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalize(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}
