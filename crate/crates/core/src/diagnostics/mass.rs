use serde::{Deserialize, Serialize};

use super::EnumeratedDistribution;
use crate::env::{score_format, score_semantic, ToolQASpec};
use crate::error::Result;

/// Exact format and semantic masses of one prompt's response distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FormatMassReport {
    pub p_fmt: f64,
    pub p_sem: f64,
    /// Mass of responses that are both well-formed and correct.
    pub joint: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q_fmt_given_sem: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q_sem_given_fmt: Option<f64>,
}

impl FormatMassReport {
    /// `p_sem · q(fmt | sem)`, when the conditional exists.
    pub fn joint_via_semantic(&self) -> Option<f64> {
        self.q_fmt_given_sem.map(|q| self.p_sem * q)
    }

    pub fn joint_via_format(&self) -> Option<f64> {
        self.q_sem_given_fmt.map(|q| self.p_fmt * q)
    }

    /// Largest gap between the directly summed joint and either factorization,
    /// relative to the joint.
    ///
    /// Format mass of an untrained policy can sit far below 1e-12, where an
    /// absolute gap would pass vacuously.
    pub fn factorization_error(&self) -> f64 {
        let gap = [self.joint_via_semantic(), self.joint_via_format()]
            .into_iter()
            .flatten()
            .map(|j| (j - self.joint).abs())
            .fold(0.0, f64::max);
        if self.joint > 0.0 {
            gap / self.joint
        } else {
            gap
        }
    }
}

/// Masses from `(probability, r_fmt, r_sem)` triples.
///
/// The conditionals are sums of renormalized probabilities, not ratios of the
/// marginal sums, so the factorizations are checked against an independent
/// summation order.
pub fn format_mass_from<I>(items: I) -> FormatMassReport
where
    I: IntoIterator<Item = (f64, u8, u8)> + Clone,
{
    let (mut p_fmt, mut p_sem, mut joint) = (0.0, 0.0, 0.0);
    for (p, f, s) in items.clone() {
        if f == 1 {
            p_fmt += p;
        }
        if s == 1 {
            p_sem += p;
        }
        if f == 1 && s == 1 {
            joint += p;
        }
    }
    let conditional = |mass: f64, given: fn(u8, u8) -> bool| {
        (mass > 0.0).then(|| {
            items
                .clone()
                .into_iter()
                .filter(|&(_, f, s)| f == 1 && s == 1 && given(f, s))
                .map(|(p, _, _)| p / mass)
                .sum::<f64>()
        })
    };
    FormatMassReport {
        p_fmt,
        p_sem,
        joint,
        q_fmt_given_sem: conditional(p_sem, |_, s| s == 1),
        q_sem_given_fmt: conditional(p_fmt, |f, _| f == 1),
    }
}

pub fn format_mass(dist: &EnumeratedDistribution, spec: &ToolQASpec) -> Result<FormatMassReport> {
    let scored = (0..dist.len())
        .map(|i| {
            let y = dist.trajectory(i);
            Ok((
                dist.prob(i),
                score_format(spec, y),
                score_semantic(spec, &dist.prompt, y)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(format_mass_from(scored))
}
