//! Exact expansion of the response distribution for one prompt.

use rayon::prelude::*;

use crate::env::ToolQASpec;
use crate::error::{Error, Result};
use crate::numerics::kernels::log_softmax;
use crate::numerics::{Dual, ParamVector, Real};
use crate::policy::{Decoder, PolicySnapshot, Weights};

/// Largest `|V|^L` the enumerator accepts.
pub const ENUMERATION_BOUND: f64 = 5e6;

/// Every complete response to a prompt with its exact probability.
///
/// Responses end at EOS or have exactly `max_len` tokens, and are stored in
/// lexicographic token order.
#[derive(Clone, Debug)]
pub struct EnumeratedDistribution {
    pub prompt: Vec<usize>,
    pub max_len: usize,
    tokens: Vec<usize>,
    offsets: Vec<usize>,
    log_probs: Vec<f64>,
    /// Directional derivative of each log-probability, when enumerated with a tangent.
    tangents: Option<Vec<f64>>,
}

impl EnumeratedDistribution {
    pub fn len(&self) -> usize {
        self.log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_probs.is_empty()
    }

    pub fn trajectory(&self, i: usize) -> &[usize] {
        &self.tokens[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn log_prob(&self, i: usize) -> f64 {
        self.log_probs[i]
    }

    pub fn prob(&self, i: usize) -> f64 {
        self.log_probs[i].exp()
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn tangents(&self) -> Option<&[f64]> {
        self.tangents.as_deref()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[usize], f64)> + '_ {
        (0..self.len()).map(|i| (self.trajectory(i), self.prob(i)))
    }

    pub fn total_mass(&self) -> f64 {
        self.log_probs.iter().map(|l| l.exp()).sum()
    }

    /// Index of `response`, if it is a complete trajectory.
    pub fn find(&self, response: &[usize]) -> Option<usize> {
        let mut lo = 0;
        let mut hi = self.len();
        while lo < hi {
            let mid = (lo + hi) / 2;
            match self.trajectory(mid).cmp(response) {
                std::cmp::Ordering::Less => lo = mid + 1,
                std::cmp::Ordering::Greater => hi = mid,
                std::cmp::Ordering::Equal => return Some(mid),
            }
        }
        None
    }
}

#[derive(Default)]
struct Shard {
    tokens: Vec<usize>,
    offsets: Vec<usize>,
    log_probs: Vec<f64>,
    tangents: Vec<f64>,
}

impl Shard {
    fn push<T: Real>(&mut self, prefix: &[usize], lp: T, tangent: impl Fn(T) -> f64) {
        self.offsets.push(self.tokens.len());
        self.tokens.extend_from_slice(prefix);
        self.log_probs.push(lp.re());
        self.tangents.push(tangent(lp));
    }
}

struct Expander<F> {
    eos: usize,
    max_len: usize,
    vocab: usize,
    tangent: F,
}

impl<F> Expander<F> {
    fn expand<T: Real>(
        &self,
        dec: &Decoder<'_, T>,
        logits: &[T],
        prefix: &mut Vec<usize>,
        logp: T,
        shard: &mut Shard,
    ) -> Result<()>
    where
        F: Fn(T) -> f64,
    {
        let mut ls = vec![T::zero(); self.vocab];
        log_softmax(logits, &mut ls);
        for v in 0..self.vocab {
            self.child(dec, &ls, v, prefix, logp, shard)?;
        }
        Ok(())
    }

    fn child<T: Real>(
        &self,
        dec: &Decoder<'_, T>,
        ls: &[T],
        v: usize,
        prefix: &mut Vec<usize>,
        logp: T,
        shard: &mut Shard,
    ) -> Result<()>
    where
        F: Fn(T) -> f64,
    {
        let lp = logp + ls[v];
        prefix.push(v);
        if v == self.eos || prefix.len() == self.max_len {
            shard.push(prefix, lp, &self.tangent);
        } else {
            let mut next = dec.clone();
            let out = next.step(v)?;
            self.expand(&next, &out.logits, prefix, lp, shard)?;
        }
        prefix.pop();
        Ok(())
    }
}

fn check_guard(vocab: usize, max_len: usize, bound: f64) -> Result<()> {
    let required = (vocab as f64).powi(max_len as i32);
    if required > bound {
        return Err(Error::EnumerationGuard { required, bound });
    }
    Ok(())
}

fn enumerate_generic<T: Real>(
    weights: &Weights<T>,
    prompt: &[usize],
    eos: usize,
    max_len: usize,
    tangent: impl Fn(T) -> f64 + Sync,
) -> Result<EnumeratedDistribution> {
    let arch = weights.arch();
    if max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be at least 1".into()));
    }
    if prompt.is_empty() {
        return Err(Error::MalformedPrompt("empty prompt".into()));
    }
    if prompt.len() + max_len > arch.context_window {
        return Err(Error::ContextOverflow {
            len: prompt.len() + max_len,
            window: arch.context_window,
        });
    }
    let mut root = weights.decoder();
    let out = root.feed(prompt)?.expect("non-empty prompt");
    let mut ls = vec![T::zero(); arch.vocab_size];
    log_softmax(&out.logits, &mut ls);
    let ex = Expander {
        eos,
        max_len,
        vocab: arch.vocab_size,
        tangent,
    };
    let shards = (0..arch.vocab_size)
        .into_par_iter()
        .map(|v| {
            let mut shard = Shard::default();
            let mut prefix = Vec::with_capacity(max_len);
            ex.child(&root, &ls, v, &mut prefix, T::zero(), &mut shard)?;
            Ok(shard)
        })
        .collect::<Result<Vec<_>>>()?;
    let total: usize = shards.iter().map(|s| s.log_probs.len()).sum();
    let mut dist = EnumeratedDistribution {
        prompt: prompt.to_vec(),
        max_len,
        tokens: Vec::new(),
        offsets: Vec::with_capacity(total + 1),
        log_probs: Vec::with_capacity(total),
        tangents: Some(Vec::with_capacity(total)),
    };
    for s in shards {
        let base = dist.tokens.len();
        dist.offsets.extend(s.offsets.iter().map(|o| o + base));
        dist.tokens.extend(s.tokens);
        dist.log_probs.extend(s.log_probs);
        dist.tangents.as_mut().expect("tangents").extend(s.tangents);
    }
    dist.offsets.push(dist.tokens.len());
    Ok(dist)
}

/// Enumerates responses to `prompt` ending at `eos` or after `max_len` tokens.
pub fn enumerate_sequences(
    snapshot: &PolicySnapshot,
    prompt: &[usize],
    eos: usize,
    max_len: usize,
) -> Result<EnumeratedDistribution> {
    check_guard(snapshot.arch().vocab_size, max_len, ENUMERATION_BOUND)?;
    let weights = Weights::new(snapshot);
    let mut dist = enumerate_generic(&weights, prompt, eos, max_len, |_: f64| 0.0)?;
    dist.tangents = None;
    Ok(dist)
}

pub fn enumerate_distribution(
    snapshot: &PolicySnapshot,
    spec: &ToolQASpec,
    prompt: &[usize],
) -> Result<EnumeratedDistribution> {
    spec.query(prompt)?;
    enumerate_sequences(snapshot, prompt, spec.eos, spec.max_response_len)
}

/// Enumeration carrying `d/dt log π(y)` along `direction` for every response.
pub fn enumerate_with_tangent(
    snapshot: &PolicySnapshot,
    spec: &ToolQASpec,
    prompt: &[usize],
    direction: &ParamVector,
) -> Result<EnumeratedDistribution> {
    spec.query(prompt)?;
    check_guard(
        snapshot.arch().vocab_size,
        spec.max_response_len,
        ENUMERATION_BOUND,
    )?;
    let weights = Weights::<Dual>::with_tangent(snapshot, direction)?;
    enumerate_generic(
        &weights,
        prompt,
        spec.eos,
        spec.max_response_len,
        |d: Dual| d.eps,
    )
}
