//! Incremental decoding with a key/value cache, generic over [`Real`].
//!
//! The per-row arithmetic mirrors the tape forward exactly (same kernels,
//! same operand order), so hidden states and logits agree bit-for-bit with
//! the tape path for `f64`, and with the value part for [`Dual`].

use crate::error::{Error, Result};
use crate::numerics::kernels::{attend_row, mat_vec, vec_mat};
use crate::numerics::{Dual, ParamVector, Real};
use crate::policy::snapshot::{
    PolicyArchitecture, PolicySnapshot, OUTPUT_WEIGHT, POSITION_EMBEDDING, TOKEN_EMBEDDING,
};

#[derive(Clone, Debug)]
struct BlockWeights<T> {
    query: Vec<T>,
    key: Vec<T>,
    value: Vec<T>,
    out: Vec<T>,
    ffn_in: Vec<T>,
    ffn_in_bias: Vec<T>,
    ffn_out: Vec<T>,
    ffn_out_bias: Vec<T>,
}

/// Policy parameters lifted into scalar type `T`.
#[derive(Clone, Debug)]
pub struct Weights<T> {
    arch: PolicyArchitecture,
    token: Vec<T>,
    position: Vec<T>,
    blocks: Vec<BlockWeights<T>>,
    output: Vec<T>,
}

impl<T: Real> Weights<T> {
    fn build(snapshot: &PolicySnapshot, lift: impl Fn(&str) -> Vec<T>) -> Self {
        let arch = *snapshot.arch();
        let blocks = (0..arch.num_blocks)
            .map(|b| {
                let [q, k, v, o, w1, b1, w2, b2] = PolicyArchitecture::block_names(b);
                BlockWeights {
                    query: lift(&q),
                    key: lift(&k),
                    value: lift(&v),
                    out: lift(&o),
                    ffn_in: lift(&w1),
                    ffn_in_bias: lift(&b1),
                    ffn_out: lift(&w2),
                    ffn_out_bias: lift(&b2),
                }
            })
            .collect();
        Self {
            arch,
            token: lift(TOKEN_EMBEDDING),
            position: lift(POSITION_EMBEDDING),
            blocks,
            output: lift(OUTPUT_WEIGHT),
        }
    }

    pub fn arch(&self) -> &PolicyArchitecture {
        &self.arch
    }

    pub fn decoder(&self) -> Decoder<'_, T> {
        let n = self.arch.num_blocks;
        Decoder {
            weights: self,
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            len: 0,
        }
    }
}

impl Weights<f64> {
    pub fn new(snapshot: &PolicySnapshot) -> Self {
        let p = snapshot.params();
        Self::build(snapshot, |name| {
            p.require(name).expect("layout segment").data().to_vec()
        })
    }
}

impl Weights<Dual> {
    /// Weights carrying `direction` as their tangent.
    pub fn with_tangent(snapshot: &PolicySnapshot, direction: &ParamVector) -> Result<Self> {
        snapshot.params().check_compatible(direction)?;
        let p = snapshot.params();
        Ok(Self::build(snapshot, |name| {
            let v = p.require(name).expect("layout segment").data();
            let t = direction.require(name).expect("compatible segment").data();
            v.iter().zip(t).map(|(a, b)| Dual::new(*a, *b)).collect()
        }))
    }
}

/// Output of one decoding step.
#[derive(Clone, Debug)]
pub struct StepOutput<T> {
    pub hidden: Vec<T>,
    pub logits: Vec<T>,
}

/// Incremental decoder state; cloning it forks the prefix.
#[derive(Clone, Debug)]
pub struct Decoder<'w, T> {
    weights: &'w Weights<T>,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
}

impl<T: Real> Decoder<'_, T> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Feeds `token` at the next position, returning the hidden state there
    /// and the logits for the following token.
    pub fn step(&mut self, token: usize) -> Result<StepOutput<T>> {
        let w = self.weights;
        let arch = &w.arch;
        let (d, f) = (arch.model_dim, arch.ffn_dim);
        if token >= arch.vocab_size {
            return Err(Error::TokenOutOfRange {
                token,
                vocab: arch.vocab_size,
            });
        }
        if self.len >= arch.context_window {
            return Err(Error::ContextOverflow {
                len: self.len + 1,
                window: arch.context_window,
            });
        }
        let pos = self.len;
        let mut x: Vec<T> = w.token[token * d..(token + 1) * d]
            .iter()
            .zip(&w.position[pos * d..(pos + 1) * d])
            .map(|(a, b)| *a + *b)
            .collect();
        let mut q = vec![T::zero(); d];
        let mut kv = vec![T::zero(); d];
        let mut att = vec![T::zero(); d];
        let mut proj = vec![T::zero(); d];
        let mut u = vec![T::zero(); f];
        for (b, bw) in w.blocks.iter().enumerate() {
            vec_mat(&x, &bw.query, &mut q);
            vec_mat(&x, &bw.key, &mut kv);
            self.keys[b].extend_from_slice(&kv);
            vec_mat(&x, &bw.value, &mut kv);
            self.values[b].extend_from_slice(&kv);
            attend_row(
                &q,
                &self.keys[b],
                &self.values[b],
                arch.num_heads,
                &mut att,
                None,
            );
            vec_mat(&att, &bw.out, &mut proj);
            for (xi, pi) in x.iter_mut().zip(&proj) {
                *xi += *pi;
            }
            vec_mat(&x, &bw.ffn_in, &mut u);
            for (ui, bi) in u.iter_mut().zip(&bw.ffn_in_bias) {
                *ui += *bi;
                *ui = ui.tanh();
            }
            vec_mat(&u, &bw.ffn_out, &mut proj);
            for (pi, bi) in proj.iter_mut().zip(&bw.ffn_out_bias) {
                *pi += *bi;
            }
            for (xi, pi) in x.iter_mut().zip(&proj) {
                *xi += *pi;
            }
        }
        let mut logits = vec![T::zero(); arch.vocab_size];
        mat_vec(&w.output, &x, &mut logits);
        self.len += 1;
        Ok(StepOutput { hidden: x, logits })
    }

    /// Feeds a whole sequence, returning the last step's output.
    pub fn feed(&mut self, tokens: &[usize]) -> Result<Option<StepOutput<T>>> {
        let mut last = None;
        for &t in tokens {
            last = Some(self.step(t)?);
        }
        Ok(last)
    }
}
