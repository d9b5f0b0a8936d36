//! Recording the policy forward pass on a [`Tape`].

use crate::error::{Error, Result};
use crate::numerics::{RealMatrix, Tape, Var};
use crate::policy::snapshot::{
    PolicyArchitecture, PolicySnapshot, OUTPUT_WEIGHT, POSITION_EMBEDDING, TOKEN_EMBEDDING,
};

struct BlockVars {
    query: Var,
    key: Var,
    value: Var,
    out: Var,
    ffn_in: Var,
    ffn_in_bias: Var,
    ffn_out: Var,
    ffn_out_bias: Var,
}

/// Parameter leaves of one snapshot registered on a tape.
pub struct PolicyVars {
    arch: PolicyArchitecture,
    token: Var,
    position: Var,
    blocks: Vec<BlockVars>,
    pub output: Var,
}

/// Tape nodes for one scored sequence.
pub struct SequenceVars {
    /// Hidden states at the positions predicting each response token (`T x d`).
    pub hidden: Var,
    /// Per-token log-probabilities of the response tokens, in order.
    pub token_log_probs: Vec<Var>,
    /// Log-softmax rows at those positions (`T x |V|`).
    pub log_probs: Var,
    /// Σ of `token_log_probs` (scalar).
    pub log_likelihood: Var,
}

impl PolicyVars {
    /// Registers every parameter segment of `snapshot` in storage order.
    pub fn register(tape: &mut Tape, snapshot: &PolicySnapshot) -> Result<Self> {
        let vars = tape.params(snapshot.params())?;
        let names: Vec<&str> = snapshot.params().names().collect();
        let find = |name: &str| -> Var {
            let i = names
                .iter()
                .position(|n| *n == name)
                .expect("layout segment");
            vars[i]
        };
        let arch = *snapshot.arch();
        let blocks = (0..arch.num_blocks)
            .map(|b| {
                let [q, k, v, o, w1, b1, w2, b2] = PolicyArchitecture::block_names(b);
                BlockVars {
                    query: find(&q),
                    key: find(&k),
                    value: find(&v),
                    out: find(&o),
                    ffn_in: find(&w1),
                    ffn_in_bias: find(&b1),
                    ffn_out: find(&w2),
                    ffn_out_bias: find(&b2),
                }
            })
            .collect();
        Ok(Self {
            arch,
            token: find(TOKEN_EMBEDDING),
            position: find(POSITION_EMBEDDING),
            blocks,
            output: find(OUTPUT_WEIGHT),
        })
    }

    /// Records the response log-likelihood of `response` given `prompt`.
    pub fn record_sequence(
        &self,
        tape: &mut Tape,
        prompt: &[usize],
        response: &[usize],
    ) -> Result<SequenceVars> {
        check_inputs(&self.arch, prompt, response)?;
        if response.is_empty() {
            let zero = tape.lin_comb(&[])?;
            let hidden = tape.constant(RealMatrix::zeros(0, self.arch.model_dim));
            let log_probs = tape.constant(RealMatrix::zeros(0, self.arch.vocab_size));
            return Ok(SequenceVars {
                hidden,
                token_log_probs: vec![],
                log_probs,
                log_likelihood: zero,
            });
        }
        let mut ids = prompt.to_vec();
        ids.extend_from_slice(&response[..response.len() - 1]);
        let n = ids.len();
        let positions: Vec<usize> = (0..n).collect();
        let tok = tape.gather(self.token, &ids)?;
        let pos = tape.gather(self.position, &positions)?;
        let mut x = tape.add(tok, pos)?;
        for b in &self.blocks {
            let q = tape.matmul(x, b.query)?;
            let k = tape.matmul(x, b.key)?;
            let v = tape.matmul(x, b.value)?;
            let a = tape.attention(q, k, v, self.arch.num_heads)?;
            let proj = tape.matmul(a, b.out)?;
            x = tape.add(x, proj)?;
            let u = tape.matmul(x, b.ffn_in)?;
            let u = tape.add_row(u, b.ffn_in_bias)?;
            let u = tape.tanh(u);
            let f = tape.matmul(u, b.ffn_out)?;
            let f = tape.add_row(f, b.ffn_out_bias)?;
            x = tape.add(x, f)?;
        }
        let hidden = tape.row_slice(x, prompt.len() - 1, response.len())?;
        let logits = tape.matmul_bt(hidden, self.output)?;
        let lp = tape.log_softmax_rows(logits);
        let token_log_probs = response
            .iter()
            .enumerate()
            .map(|(k, &y)| tape.select(lp, k, y))
            .collect::<Result<Vec<_>>>()?;
        let terms: Vec<(Var, f64)> = token_log_probs.iter().map(|v| (*v, 1.0)).collect();
        let log_likelihood = tape.lin_comb(&terms)?;
        Ok(SequenceVars {
            hidden,
            token_log_probs,
            log_probs: lp,
            log_likelihood,
        })
    }
}

pub(crate) fn check_inputs(
    arch: &PolicyArchitecture,
    prompt: &[usize],
    response: &[usize],
) -> Result<()> {
    if prompt.is_empty() {
        return Err(Error::MalformedPrompt("empty prompt".into()));
    }
    if let Some(&t) = prompt
        .iter()
        .chain(response)
        .find(|&&t| t >= arch.vocab_size)
    {
        return Err(Error::TokenOutOfRange {
            token: t,
            vocab: arch.vocab_size,
        });
    }
    let len = prompt.len() + response.len();
    if len > arch.context_window {
        return Err(Error::ContextOverflow {
            len,
            window: arch.context_window,
        });
    }
    Ok(())
}
