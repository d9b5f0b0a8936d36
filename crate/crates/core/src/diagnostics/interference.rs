use serde::Serialize;

use crate::env::{Episode, ToolQASpec};
use crate::error::{Error, Result};
use crate::numerics::kernels::dot;
use crate::numerics::{inner, ParamVector, RealMatrix};
use crate::policy::{forward, trajectory_gradient, GradientBundle, PolicySnapshot, OUTPUT_WEIGHT};
use crate::trainer::{rl_loss, Group};

/// Gradient kernel of a group and the drift it predicts.
#[derive(Clone, Debug)]
pub struct KernelSummary {
    pub kernel: RealMatrix,
    pub centralities: Vec<f64>,
    /// `Σ_j A_j c_j`: first-order change of the mean log-likelihood per unit step.
    pub predicted_drift: f64,
}

impl KernelSummary {
    pub fn from_kernel(kernel: RealMatrix, advantages: &[f64]) -> Result<Self> {
        let g = kernel.rows();
        if kernel.cols() != g || advantages.len() != g || g == 0 {
            return Err(Error::ShapeMismatch(format!(
                "kernel {}x{} with {} advantages",
                kernel.rows(),
                kernel.cols(),
                advantages.len()
            )));
        }
        let centralities: Vec<f64> = (0..g)
            .map(|j| (0..g).map(|i| kernel.get(i, j)).sum::<f64>() / g as f64)
            .collect();
        let predicted_drift = dot(advantages, &centralities);
        Ok(Self {
            kernel,
            centralities,
            predicted_drift,
        })
    }
}

pub fn gram(vectors: &[&ParamVector]) -> Result<RealMatrix> {
    let n = vectors.len();
    let mut k = RealMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = inner(vectors[i], vectors[j])?;
            k.set(i, j, v)?;
            k.set(j, i, v)?;
        }
    }
    Ok(k)
}

/// Kernel summary for raw gradient vectors.
pub fn kernel_summary(grads: &[ParamVector], advantages: &[f64]) -> Result<KernelSummary> {
    let refs: Vec<&ParamVector> = grads.iter().collect();
    KernelSummary::from_kernel(gram(&refs)?, advantages)
}

/// `⟨q_{i,k}, q_{j,k'}⟩` for every token pair of two trajectories.
pub fn token_pair_coefficients(a: &GradientBundle, b: &GradientBundle) -> RealMatrix {
    RealMatrix::from_fn(a.tokens.len(), b.tokens.len(), |k, l| {
        dot(&a.tokens[k].residual, &b.tokens[l].residual)
    })
}

fn w_pair_sum(a: &GradientBundle, b: &GradientBundle) -> f64 {
    let alpha = token_pair_coefficients(a, b);
    let mut s = 0.0;
    for (k, ta) in a.tokens.iter().enumerate() {
        for (l, tb) in b.tokens.iter().enumerate() {
            s += alpha.get(k, l) * dot(&ta.hidden, &tb.hidden);
        }
    }
    s
}

fn phi_pair_sum(a: &GradientBundle, b: &GradientBundle) -> Result<f64> {
    let mut s = 0.0;
    for pa in &a.per_token_phi {
        for pb in &b.per_token_phi {
            s += inner(pa, pb)?;
        }
    }
    Ok(s)
}

/// `|a − b|` relative to the Cauchy–Schwarz scale `sqrt(K_ii K_jj)` of the entry.
///
/// Off-diagonal inner products can cancel to nearly zero, where a plain
/// relative error only measures rounding noise.
pub fn kernel_relative_error(a: &RealMatrix, b: &RealMatrix) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            let scale = (a.get(i, i).abs() * a.get(j, j).abs()).sqrt();
            let diff = (a.get(i, j) - b.get(i, j)).abs();
            if diff > 0.0 {
                worst = worst.max(if scale > 0.0 {
                    diff / scale
                } else {
                    f64::INFINITY
                });
            }
        }
    }
    worst
}

#[derive(Clone, Debug)]
pub struct InterferenceReport {
    pub summary: KernelSummary,
    /// Output-matrix kernel from the direct block inner products.
    pub kernel_w: RealMatrix,
    /// Output-matrix kernel from the residual/hidden token-pair double sum.
    pub kernel_w_pairs: RealMatrix,
    pub kernel_phi: RealMatrix,
    /// Backbone kernel from the per-token gradient double sum.
    pub kernel_phi_pairs: RealMatrix,
    pub w_identity_error: f64,
    pub phi_identity_error: f64,
    /// Gap between the full kernel and the sum of the two block kernels.
    pub decomposition_error: f64,
}

pub fn interference(bundles: &[GradientBundle], advantages: &[f64]) -> Result<InterferenceReport> {
    let first = bundles
        .first()
        .ok_or_else(|| Error::InvalidArgument("no gradient bundles".into()))?;
    if let Some(b) = bundles
        .iter()
        .find(|b| b.snapshot_version != first.snapshot_version)
    {
        return Err(Error::VersionMismatch {
            expected: first.snapshot_version,
            found: b.snapshot_version,
        });
    }
    let g = bundles.len();
    let full: Vec<&ParamVector> = bundles.iter().map(|b| &b.g).collect();
    let phi: Vec<&ParamVector> = bundles.iter().map(|b| &b.phi_block).collect();
    let kernel = gram(&full)?;
    let kernel_phi = gram(&phi)?;
    let mut kernel_w = RealMatrix::zeros(g, g);
    let mut kernel_w_pairs = RealMatrix::zeros(g, g);
    let mut kernel_phi_pairs = RealMatrix::zeros(g, g);
    for i in 0..g {
        for j in i..g {
            let (a, b) = (&bundles[i], &bundles[j]);
            let direct = dot(a.w_block_tape.data(), b.w_block_tape.data());
            let pairs = w_pair_sum(a, b);
            let phi_pairs = phi_pair_sum(a, b)?;
            for (m, v) in [
                (&mut kernel_w, direct),
                (&mut kernel_w_pairs, pairs),
                (&mut kernel_phi_pairs, phi_pairs),
            ] {
                m.set(i, j, v)?;
                m.set(j, i, v)?;
            }
        }
    }
    let mut blocks = kernel_w.clone();
    blocks.add_assign(&kernel_phi);
    let w_identity_error = kernel_relative_error(&kernel_w, &kernel_w_pairs);
    let phi_identity_error = kernel_relative_error(&kernel_phi, &kernel_phi_pairs);
    let decomposition_error = kernel_relative_error(&kernel, &blocks);
    Ok(InterferenceReport {
        summary: KernelSummary::from_kernel(kernel, advantages)?,
        kernel_w,
        kernel_w_pairs,
        kernel_phi,
        kernel_phi_pairs,
        w_identity_error,
        phi_identity_error,
        decomposition_error,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DriftReport {
    pub predicted: f64,
    pub observed: f64,
    pub residual: f64,
}

fn mean_log_likelihood(snapshot: &PolicySnapshot, group: &Group) -> Result<f64> {
    let mut s = 0.0;
    for e in &group.episodes {
        s += forward(snapshot, &e.prompt, &e.response)?.0;
    }
    Ok(s / group.size() as f64)
}

/// First-order drift prediction against one explicit descent step on the RL loss.
pub fn predicted_vs_observed_drift(
    snapshot: &PolicySnapshot,
    group: &Group,
    step_size: f64,
) -> Result<DriftReport> {
    let bundles = group
        .episodes
        .iter()
        .map(|e| trajectory_gradient(snapshot, &e.prompt, &e.response))
        .collect::<Result<Vec<_>>>()?;
    let grads: Vec<ParamVector> = bundles.into_iter().map(|b| b.g).collect();
    let summary = kernel_summary(&grads, &group.advantages)?;
    let predicted = step_size * summary.predicted_drift;
    let loss = rl_loss(group, snapshot)?;
    let grad = loss.gradient(snapshot.params())?;
    let next = snapshot.apply_update(&grad, -step_size)?;
    let observed = mean_log_likelihood(&next, group)? - mean_log_likelihood(snapshot, group)?;
    Ok(DriftReport {
        predicted,
        observed,
        residual: observed - predicted,
    })
}

/// A two-trajectory group whose log-likelihood gradients are orthogonal.
pub struct OrthogonalPair {
    pub snapshot: PolicySnapshot,
    pub group: Group,
    /// `⟨g_1, g_2⟩` at the constructed snapshot.
    pub cross: f64,
}

/// Replaces the output matrix by `s · e_focus hᵀ / ‖h‖²`, with `h` the hidden
/// state that predicts the first response token.
fn focused_output(
    snap: &PolicySnapshot,
    prompt: &[usize],
    focus: usize,
    s: f64,
) -> Result<PolicySnapshot> {
    let arch = *snap.arch();
    let (_, diags) = forward(snap, prompt, &[focus])?;
    let h = &diags[0].hidden;
    let hh = dot(h, h);
    let w = RealMatrix::from_fn(arch.vocab_size, arch.model_dim, |v, j| {
        if v == focus {
            s * h[j] / hh
        } else {
            0.0
        }
    });
    let (_, backbone) = snap.params().split(&[OUTPUT_WEIGHT]);
    let params = backbone.concat(&ParamVector::new().with(OUTPUT_WEIGHT, w)?)?;
    PolicySnapshot::from_params(arch, params, 0)
}

/// Two one-token responses (a key and a value) with advantages `(1, −1)`.
///
/// With a zero output matrix the two gradients overlap by `−‖h‖²/|V|`; pushing
/// mass onto a third token (CALL) makes the overlap positive, and the scale in
/// between where it vanishes is found by bisection.
pub fn orthogonal_pair(
    base: &PolicySnapshot,
    spec: &ToolQASpec,
    prompt: &[usize],
) -> Result<OrthogonalPair> {
    let (a, b, focus) = (spec.keys[0], spec.values[spec.values.len() - 1], spec.call);
    let cross = |s: f64| -> Result<(f64, PolicySnapshot)> {
        let snap = focused_output(base, prompt, focus, s)?;
        let ga = trajectory_gradient(&snap, prompt, &[a])?.g;
        let gb = trajectory_gradient(&snap, prompt, &[b])?.g;
        Ok((inner(&ga, &gb)?, snap))
    };
    let (mut lo, mut hi) = (0.0, 30.0);
    if cross(lo)?.0 >= 0.0 || cross(hi)?.0 <= 0.0 {
        return Err(Error::InvalidArgument(
            "overlap does not change sign on [0, 30]".into(),
        ));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if cross(mid)?.0 < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (k_lo, snap_lo) = cross(lo)?;
    let (k_hi, snap_hi) = cross(hi)?;
    let (cross, snapshot) = if k_lo.abs() <= k_hi.abs() {
        (k_lo, snap_lo)
    } else {
        (k_hi, snap_hi)
    };
    let episodes = vec![
        Episode::score(spec, prompt, &[a])?,
        Episode::score(spec, prompt, &[b])?,
    ];
    let group = Group::with_advantages(prompt.to_vec(), episodes, vec![1.0, -1.0])?;
    Ok(OrthogonalPair {
        snapshot,
        group,
        cross,
    })
}
