//! Tiny causal attention policy over integer tokens.

mod decoder;
mod graph;
mod snapshot;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::kernels::{log_softmax, softmax};
use crate::numerics::{ParamVector, RealMatrix, Tape};

pub use decoder::{Decoder, StepOutput, Weights};
pub use graph::{PolicyVars, SequenceVars};
pub use snapshot::{
    PolicyArchitecture, PolicySnapshot, OUTPUT_WEIGHT, POSITION_EMBEDDING, TOKEN_EMBEDDING,
};

/// Per-position quantities of a scored response token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenDiagnostics {
    pub position: usize,
    /// Last-layer hidden state at the position predicting this token.
    pub hidden: Vec<f64>,
    pub probs: Vec<f64>,
    pub token: usize,
    /// One-hot of `token` minus `probs`.
    pub residual: Vec<f64>,
    pub log_prob: f64,
}

/// Response log-likelihood and per-token diagnostics.
pub fn forward(
    snapshot: &PolicySnapshot,
    prompt: &[usize],
    response: &[usize],
) -> Result<(f64, Vec<TokenDiagnostics>)> {
    graph::check_inputs(snapshot.arch(), prompt, response)?;
    let weights = Weights::new(snapshot);
    let mut dec = weights.decoder();
    let mut out = dec.feed(prompt)?.expect("non-empty prompt");
    let v = snapshot.arch().vocab_size;
    let mut total = 0.0;
    let mut diags = Vec::with_capacity(response.len());
    let mut lp = vec![0.0; v];
    for (k, &y) in response.iter().enumerate() {
        log_softmax(&out.logits, &mut lp);
        let mut probs = vec![0.0; v];
        softmax(&out.logits, &mut probs);
        let mut residual: Vec<f64> = probs.iter().map(|p| -p).collect();
        residual[y] += 1.0;
        total += lp[y];
        diags.push(TokenDiagnostics {
            position: k,
            hidden: out.hidden,
            probs,
            token: y,
            residual,
            log_prob: lp[y],
        });
        if k + 1 < response.len() {
            out = dec.step(y)?;
        } else {
            break;
        }
    }
    Ok((total, diags))
}

/// Log-softmax rows at each response position (`T x |V|`).
pub fn log_prob_table(
    snapshot: &PolicySnapshot,
    prompt: &[usize],
    response: &[usize],
) -> Result<RealMatrix> {
    graph::check_inputs(snapshot.arch(), prompt, response)?;
    let v = snapshot.arch().vocab_size;
    let mut table = RealMatrix::zeros(response.len(), v);
    if response.is_empty() {
        return Ok(table);
    }
    let weights = Weights::new(snapshot);
    let mut dec = weights.decoder();
    let mut out = dec.feed(prompt)?.expect("non-empty prompt");
    for (k, &y) in response.iter().enumerate() {
        log_softmax(&out.logits, table.row_mut(k));
        if k + 1 < response.len() {
            out = dec.step(y)?;
        }
    }
    Ok(table)
}

/// Logits for the token following `prompt ++ partial`.
pub fn next_token_logits(
    snapshot: &PolicySnapshot,
    prompt: &[usize],
    partial: &[usize],
) -> Result<Vec<f64>> {
    graph::check_inputs(snapshot.arch(), prompt, partial)?;
    let weights = Weights::new(snapshot);
    let mut dec = weights.decoder();
    let mut out = dec.feed(prompt)?.expect("non-empty prompt");
    if let Some(o) = dec.feed(partial)? {
        out = o;
    }
    Ok(out.logits)
}

/// `p(· | prompt, partial)` at temperature 1.
pub fn full_next_token_table(
    snapshot: &PolicySnapshot,
    prompt: &[usize],
    partial: &[usize],
) -> Result<Vec<f64>> {
    next_token_distribution(snapshot, prompt, partial, 1.0)
}

/// `softmax(logits / temperature)` for the next position.
pub fn next_token_distribution(
    snapshot: &PolicySnapshot,
    prompt: &[usize],
    partial: &[usize],
    temperature: f64,
) -> Result<Vec<f64>> {
    check_temperature(temperature)?;
    let logits = next_token_logits(snapshot, prompt, partial)?;
    Ok(tempered_probs(&logits, temperature))
}

fn check_temperature(temperature: f64) -> Result<()> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature {temperature}")));
    }
    Ok(())
}

fn tempered_probs(logits: &[f64], temperature: f64) -> Vec<f64> {
    let mut p = vec![0.0; logits.len()];
    if temperature == 1.0 {
        softmax(logits, &mut p);
    } else {
        let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
        softmax(&scaled, &mut p);
    }
    p
}

/// Ancestral sampling until `eos` or `max_len` tokens, from an explicit RNG.
pub fn sample_with_rng<R: Rng>(
    snapshot: &PolicySnapshot,
    prompt: &[usize],
    eos: usize,
    temperature: f64,
    max_len: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    check_temperature(temperature)?;
    if max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be at least 1".into()));
    }
    graph::check_inputs(snapshot.arch(), prompt, &[])?;
    let weights = Weights::new(snapshot);
    let mut dec = weights.decoder();
    let mut out = dec.feed(prompt)?.expect("non-empty prompt");
    let mut response = Vec::with_capacity(max_len);
    loop {
        let p = tempered_probs(&out.logits, temperature);
        let dist = WeightedIndex::new(&p)
            .map_err(|e| Error::NonFinite(format!("next-token distribution: {e}")))?;
        let y = dist.sample(rng);
        response.push(y);
        if y == eos || response.len() == max_len {
            return Ok(response);
        }
        out = dec.step(y)?;
    }
}

/// Seeded ancestral sampling; identical seeds give identical responses.
pub fn sample(
    snapshot: &PolicySnapshot,
    prompt: &[usize],
    eos: usize,
    temperature: f64,
    max_len: usize,
    rng_seed: u64,
) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    sample_with_rng(snapshot, prompt, eos, temperature, max_len, &mut rng)
}

/// Argmax decoding (lowest token id on ties).
pub fn greedy(
    snapshot: &PolicySnapshot,
    prompt: &[usize],
    eos: usize,
    max_len: usize,
) -> Result<Vec<usize>> {
    graph::check_inputs(snapshot.arch(), prompt, &[])?;
    let weights = Weights::new(snapshot);
    let mut dec = weights.decoder();
    let mut out = dec.feed(prompt)?.expect("non-empty prompt");
    let mut response = Vec::new();
    loop {
        let mut best = 0;
        for (i, z) in out.logits.iter().enumerate() {
            if *z > out.logits[best] {
                best = i;
            }
        }
        response.push(best);
        if best == eos || response.len() >= max_len {
            return Ok(response);
        }
        out = dec.step(best)?;
    }
}

/// Gradient of one trajectory's log-likelihood, split by parameter block.
#[derive(Clone, Debug)]
pub struct GradientBundle {
    pub trajectory_id: usize,
    pub snapshot_version: u64,
    pub log_likelihood: f64,
    /// Full gradient over θ.
    pub g: ParamVector,
    /// Output-matrix gradient from the residual/hidden outer-product sum.
    pub w_block: RealMatrix,
    /// Output-matrix gradient from the reverse sweep.
    pub w_block_tape: RealMatrix,
    /// Backbone gradient.
    pub phi_block: ParamVector,
    /// Backbone gradient of each response token's log-probability.
    pub per_token_phi: Vec<ParamVector>,
    pub tokens: Vec<TokenDiagnostics>,
}

impl GradientBundle {
    pub fn with_id(mut self, id: usize) -> Self {
        self.trajectory_id = id;
        self
    }
}

/// `Σ_k q_k h_kᵀ` over the response positions.
pub fn closed_form_w_gradient(tokens: &[TokenDiagnostics], vocab: usize, dim: usize) -> RealMatrix {
    let mut w = RealMatrix::zeros(vocab, dim);
    for t in tokens {
        for (v, q) in t.residual.iter().enumerate() {
            for (o, h) in w.row_mut(v).iter_mut().zip(&t.hidden) {
                *o += q * h;
            }
        }
    }
    w
}

pub fn trajectory_gradient(
    snapshot: &PolicySnapshot,
    prompt: &[usize],
    response: &[usize],
) -> Result<GradientBundle> {
    let (ell, tokens) = forward(snapshot, prompt, response)?;
    let mut tape = Tape::new();
    let vars = PolicyVars::register(&mut tape, snapshot)?;
    let seq = vars.record_sequence(&mut tape, prompt, response)?;
    let g = tape.backward_checked(seq.log_likelihood, 1.0, snapshot.params())?;
    let (w, phi_block) = g.split(&[OUTPUT_WEIGHT]);
    let w_block_tape = w.require(OUTPUT_WEIGHT)?.clone();
    let per_token_phi = seq
        .token_log_probs
        .iter()
        .map(|v| Ok(tape.backward(*v, 1.0)?.split(&[OUTPUT_WEIGHT]).1))
        .collect::<Result<Vec<_>>>()?;
    let arch = snapshot.arch();
    let w_block = closed_form_w_gradient(&tokens, arch.vocab_size, arch.model_dim);
    Ok(GradientBundle {
        trajectory_id: 0,
        snapshot_version: snapshot.version(),
        log_likelihood: ell,
        g,
        w_block,
        w_block_tape,
        phi_block,
        per_token_phi,
        tokens,
    })
}

/// Response log-likelihood recorded on a fresh tape (value only).
pub fn tape_log_likelihood(
    snapshot: &PolicySnapshot,
    prompt: &[usize],
    response: &[usize],
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = PolicyVars::register(&mut tape, snapshot)?;
    let seq = vars.record_sequence(&mut tape, prompt, response)?;
    Ok(tape.scalar(seq.log_likelihood))
}

#[cfg(test)]
mod tests;
