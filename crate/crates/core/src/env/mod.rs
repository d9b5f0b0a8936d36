//! ToolQA: a single-turn key/value lookup task behind a tool-call grammar.
//!
//! A prompt is `[BOS, key]`. A well-formed response is zero or more thought
//! segments `[THINK, filler+, DOT]` followed by exactly
//! `[CALL, LOOKUP, key', ENDCALL, value, EOS]`. The reward factorizes into a
//! format bit and a semantic bit.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SUCCESS_REWARD: f64 = 10.0;
pub const FORMAT_PENALTY: f64 = -0.1;

/// Length of the mandatory call/answer tail.
pub const CALL_LEN: usize = 6;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolQASpec {
    pub bos: usize,
    pub eos: usize,
    pub call: usize,
    pub endcall: usize,
    pub lookup: usize,
    pub dot: usize,
    /// Present only when fillers exist.
    pub think: Option<usize>,
    pub keys: Vec<usize>,
    pub values: Vec<usize>,
    /// `table[i]` is the value token answering `keys[i]`.
    pub table: Vec<usize>,
    pub fillers: Vec<usize>,
    pub max_response_len: usize,
}

impl ToolQASpec {
    /// Token layout: six specials, keys, values, then THINK and fillers.
    /// Key `i` maps to value `i mod num_values`.
    pub fn build(
        num_keys: usize,
        num_values: usize,
        num_fillers: usize,
        max_response_len: usize,
    ) -> Result<Self> {
        let keys: Vec<usize> = (6..6 + num_keys).collect();
        let values: Vec<usize> = (6 + num_keys..6 + num_keys + num_values).collect();
        let next = 6 + num_keys + num_values;
        let (think, fillers) = if num_fillers > 0 {
            (Some(next), (next + 1..next + 1 + num_fillers).collect())
        } else {
            (None, Vec::new())
        };
        let table = (0..num_keys)
            .map(|i| {
                values
                    .get(i % num_values.max(1))
                    .copied()
                    .unwrap_or(usize::MAX)
            })
            .collect();
        let spec = Self {
            bos: 0,
            eos: 1,
            call: 2,
            endcall: 3,
            lookup: 4,
            dot: 5,
            think,
            keys,
            values,
            table,
            fillers,
            max_response_len,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Ten tokens, two keys, two values, no fillers, L = 6.
    pub fn micro() -> Self {
        Self::build(2, 2, 0, 6).expect("valid micro spec")
    }

    /// Micro vocabulary plus THINK and two fillers, L = 12.
    pub fn small() -> Self {
        Self::build(2, 2, 2, 12).expect("valid small spec")
    }

    /// Replaces the key→value table (`table[i]` answers `keys[i]`).
    pub fn with_table(mut self, table: Vec<usize>) -> Result<Self> {
        self.table = table;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.keys.is_empty() || self.values.is_empty() {
            return bad("at least one key and one value are required".into());
        }
        if self.table.len() != self.keys.len() {
            return bad(format!(
                "table covers {} of {} keys",
                self.table.len(),
                self.keys.len()
            ));
        }
        if let Some(v) = self.table.iter().find(|v| !self.values.contains(v)) {
            return bad(format!("table maps to non-value token {v}"));
        }
        if self.fillers.is_empty() != self.think.is_none() {
            return bad("THINK exists exactly when fillers do".into());
        }
        if self.max_response_len < CALL_LEN {
            return bad(format!(
                "max_response_len {} < {CALL_LEN}",
                self.max_response_len
            ));
        }
        let mut ids = self.all_tokens();
        let n = ids.len();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != n {
            return bad("token ids are not distinct".into());
        }
        if ids != (0..n).collect::<Vec<_>>() {
            return bad("token ids are not contiguous from 0".into());
        }
        Ok(())
    }

    fn all_tokens(&self) -> Vec<usize> {
        let mut ids = vec![
            self.bos,
            self.eos,
            self.call,
            self.endcall,
            self.lookup,
            self.dot,
        ];
        ids.extend(self.think);
        ids.extend(&self.keys);
        ids.extend(&self.values);
        ids.extend(&self.fillers);
        ids
    }

    pub fn vocab_size(&self) -> usize {
        6 + self.think.iter().count() + self.keys.len() + self.values.len() + self.fillers.len()
    }

    /// Context needed for a two-token prompt plus a full response.
    pub fn context_window(&self) -> usize {
        2 + self.max_response_len
    }

    pub fn prompt(&self, key: usize) -> Vec<usize> {
        vec![self.bos, key]
    }

    pub fn prompts(&self) -> Vec<Vec<usize>> {
        self.keys.iter().map(|&k| self.prompt(k)).collect()
    }

    pub fn answer(&self, key: usize) -> Option<usize> {
        self.keys
            .iter()
            .position(|&k| k == key)
            .map(|i| self.table[i])
    }

    /// Query key of a `[BOS, key]` prompt.
    pub fn query(&self, prompt: &[usize]) -> Result<usize> {
        match prompt {
            [b, k] if *b == self.bos && self.keys.contains(k) => Ok(*k),
            _ => Err(Error::MalformedPrompt(format!("{prompt:?}"))),
        }
    }

    /// Length of the thought-segment prefix if `response` parses as one.
    fn thought_prefix(&self, response: &[usize]) -> Option<usize> {
        let mut i = 0;
        while let (Some(think), Some(&t)) = (self.think, response.get(i)) {
            if t != think {
                break;
            }
            i += 1;
            let start = i;
            while response.get(i).is_some_and(|t| self.fillers.contains(t)) {
                i += 1;
            }
            if i == start || response.get(i) != Some(&self.dot) {
                return None;
            }
            i += 1;
        }
        Some(i)
    }

    /// `[key', value]` of a format-valid response.
    fn call_slots(&self, response: &[usize]) -> Option<(usize, usize)> {
        if response.len() > self.max_response_len {
            return None;
        }
        let start = self.thought_prefix(response)?;
        match &response[start..] {
            [c, l, k, e, v, end]
                if *c == self.call
                    && *l == self.lookup
                    && self.keys.contains(k)
                    && *e == self.endcall
                    && self.values.contains(v)
                    && *end == self.eos =>
            {
                Some((*k, *v))
            }
            _ => None,
        }
    }
}

pub fn score_format(spec: &ToolQASpec, response: &[usize]) -> u8 {
    spec.call_slots(response).is_some() as u8
}

/// Correct value at the answer slot (well-formed) or anywhere before EOS
/// (malformed).
pub fn score_semantic(spec: &ToolQASpec, prompt: &[usize], response: &[usize]) -> Result<u8> {
    let q = spec.query(prompt)?;
    let want = spec.answer(q).expect("query is a key");
    let hit = match spec.call_slots(response) {
        Some((_, v)) => v == want,
        None => response
            .iter()
            .take_while(|&&t| t != spec.eos)
            .any(|&t| t == want),
    };
    Ok(hit as u8)
}

/// Well-formed call whose key argument differs from the query.
pub fn hallucinated_argument(spec: &ToolQASpec, prompt: &[usize], response: &[usize]) -> u8 {
    match (spec.call_slots(response), prompt.get(1)) {
        (Some((k, _)), Some(q)) => (k != *q) as u8,
        _ => 0,
    }
}

pub fn reward(r_fmt: u8, r_sem: u8) -> f64 {
    SUCCESS_REWARD * f64::from(r_fmt * r_sem) + FORMAT_PENALTY * f64::from(1 - r_fmt)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub prompt: Vec<usize>,
    pub response: Vec<usize>,
    pub r_fmt: u8,
    pub r_sem: u8,
    pub reward: f64,
    pub hallucinated_arg: u8,
}

impl Episode {
    pub fn score(spec: &ToolQASpec, prompt: &[usize], response: &[usize]) -> Result<Self> {
        let r_fmt = score_format(spec, response);
        let r_sem = score_semantic(spec, prompt, response)?;
        Ok(Self {
            prompt: prompt.to_vec(),
            response: response.to_vec(),
            r_fmt,
            r_sem,
            reward: reward(r_fmt, r_sem),
            hallucinated_arg: hallucinated_argument(spec, prompt, response),
        })
    }

    /// Correctness label: positive reward.
    pub fn is_correct(&self) -> bool {
        self.reward > 0.0
    }
}

/// Well-formed, correct episodes with keys stratified across `count`.
pub fn demonstrations(
    spec: &ToolQASpec,
    count: usize,
    rng_seed: u64,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if count == 0 {
        return Err(Error::InvalidArgument(
            "demonstration count must be at least 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut keys: Vec<usize> = (0..count).map(|i| spec.keys[i % spec.keys.len()]).collect();
    keys.shuffle(&mut rng);
    let room = spec.max_response_len - CALL_LEN;
    let out = keys
        .into_iter()
        .map(|key| {
            let mut response = Vec::new();
            if let Some(think) = spec.think {
                let segments = rng.gen_range(0..=2);
                for _ in 0..segments {
                    let len = rng.gen_range(1..=2);
                    if response.len() + len + 2 > room {
                        break;
                    }
                    response.push(think);
                    for _ in 0..len {
                        response.push(*spec.fillers.choose(&mut rng).expect("fillers"));
                    }
                    response.push(spec.dot);
                }
            }
            let answer = spec.answer(key).expect("key");
            response.extend([spec.call, spec.lookup, key, spec.endcall, answer, spec.eos]);
            (spec.prompt(key), response)
        })
        .collect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const K0: usize = 6;
    const K1: usize = 7;
    const V0: usize = 8;
    const V1: usize = 9;

    #[test]
    fn micro_layout() {
        let s = ToolQASpec::micro();
        assert_eq!(s.vocab_size(), 10);
        assert_eq!(
            (s.keys.clone(), s.values.clone()),
            (vec![K0, K1], vec![V0, V1])
        );
        assert_eq!(s.table, vec![V0, V1]);
        let small = ToolQASpec::small();
        assert_eq!(small.vocab_size(), 13);
        assert_eq!(small.context_window(), 14);
    }

    #[test]
    fn format_examples() {
        let s = ToolQASpec::micro();
        assert_eq!(score_format(&s, &[2, 4, K0, 3, V1, 1]), 1);
        assert_eq!(score_format(&s, &[2, 4, V0, 3, V1, 1]), 0);
        assert_eq!(score_format(&s, &[2, 4, K0, 3, V1]), 0);
        assert_eq!(score_format(&s, &[]), 0);
    }

    #[test]
    fn thought_segments() {
        let s = ToolQASpec::small();
        let (think, f0, f1) = (10, 11, 12);
        let tail = [2, 4, K0, 3, V0, 1];
        let ok: Vec<usize> = [think, f0, f1, 5].iter().chain(&tail).copied().collect();
        assert_eq!(score_format(&s, &ok), 1);
        let empty: Vec<usize> = [think, 5].iter().chain(&tail).copied().collect();
        assert_eq!(score_format(&s, &empty), 0);
        let too_long: Vec<usize> = [think, f0, 5, think, f1, 5, think, f0, 5]
            .iter()
            .chain(&tail)
            .copied()
            .collect();
        assert_eq!(too_long.len(), 15);
        assert_eq!(score_format(&s, &too_long), 0);
    }

    /// Brute force over every sequence of length ≤ 6 on the micro vocabulary.
    #[test]
    fn exhaustive_format_count() {
        let s = ToolQASpec::micro();
        let mut count = 0;
        let mut seq = Vec::new();
        fn walk(s: &ToolQASpec, seq: &mut Vec<usize>, count: &mut usize) {
            if score_format(s, seq) == 1 {
                *count += 1;
            }
            if seq.len() == 6 {
                return;
            }
            for t in 0..10 {
                seq.push(t);
                walk(s, seq, count);
                seq.pop();
            }
        }
        walk(&s, &mut seq, &mut count);
        assert_eq!(count, s.keys.len() * s.values.len());
    }

    #[test]
    fn semantic_examples() {
        let s = ToolQASpec::micro();
        assert_eq!(
            score_semantic(&s, &[0, K0], &[2, 4, K0, 3, V0, 1]).unwrap(),
            1
        );
        assert_eq!(
            score_semantic(&s, &[0, K0], &[2, 4, K0, 3, V1, 1]).unwrap(),
            0
        );
        let e = Episode::score(&s, &[0, K0], &[V0, 1]).unwrap();
        assert_eq!((e.r_fmt, e.r_sem, e.reward), (0, 1, -0.1));
        assert_eq!(score_semantic(&s, &[0, K0], &[1, V0]).unwrap(), 0);
        assert!(matches!(
            score_semantic(&s, &[0, V0], &[1]),
            Err(Error::MalformedPrompt(_))
        ));
    }

    #[test]
    fn format_and_semantic_sets_overlap_without_nesting() {
        let s = ToolQASpec::micro();
        let both = Episode::score(&s, &[0, K0], &[2, 4, K0, 3, V0, 1]).unwrap();
        let fmt_only = Episode::score(&s, &[0, K0], &[2, 4, K0, 3, V1, 1]).unwrap();
        let sem_only = Episode::score(&s, &[0, K0], &[V0, 1]).unwrap();
        assert_eq!((both.r_fmt, both.r_sem), (1, 1));
        assert_eq!((fmt_only.r_fmt, fmt_only.r_sem), (1, 0));
        assert_eq!((sem_only.r_fmt, sem_only.r_sem), (0, 1));
    }

    #[test]
    fn hallucination_examples() {
        let s = ToolQASpec::micro();
        assert_eq!(
            hallucinated_argument(&s, &[0, K0], &[2, 4, K1, 3, V1, 1]),
            1
        );
        assert_eq!(
            hallucinated_argument(&s, &[0, K0], &[2, 4, K0, 3, V1, 1]),
            0
        );
        assert_eq!(hallucinated_argument(&s, &[0, K0], &[2, 4, K1, 3, V1]), 0);
    }

    #[test]
    fn reward_positive_iff_both_bits() {
        for f in 0..2u8 {
            for m in 0..2u8 {
                assert_eq!(reward(f, m) > 0.0, f * m == 1);
            }
        }
        assert_eq!(reward(1, 0), 0.0);
    }

    #[test]
    fn demonstrations_stratified_and_valid() {
        let s = ToolQASpec::micro();
        let demos = demonstrations(&s, 4, 3).unwrap();
        for k in &s.keys {
            assert_eq!(demos.iter().filter(|(p, _)| p[1] == *k).count(), 2);
        }
        for (p, r) in &demos {
            let e = Episode::score(&s, p, r).unwrap();
            assert_eq!((e.r_fmt, e.r_sem), (1, 1));
            assert_eq!(r.len(), 6);
        }
        let small = ToolQASpec::small();
        let demos = demonstrations(&small, 200, 5).unwrap();
        assert!(demos.iter().any(|(_, r)| r.len() > 6));
        for (p, r) in &demos {
            let e = Episode::score(&small, p, r).unwrap();
            assert_eq!((e.r_fmt, e.r_sem), (1, 1));
        }
        assert!(demonstrations(&s, 0, 0).is_err());
    }

    #[test]
    fn validation_rejects_bad_tables() {
        assert!(ToolQASpec::micro().with_table(vec![V0]).is_err());
        assert!(ToolQASpec::micro().with_table(vec![V0, K0]).is_err());
        assert!(ToolQASpec::build(2, 2, 0, 5).is_err());
    }
}
