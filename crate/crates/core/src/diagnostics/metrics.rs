use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::env::{Episode, ToolQASpec};
use crate::error::{Error, Result};
use crate::numerics::kernels::dot;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegeneracyReport {
    pub duplication_ratio: f64,
    pub hallucination_rate: f64,
    pub format_error_rate: f64,
    pub valid_action_ratio: f64,
}

/// Token runs between DOT/EOS delimiters; delimiters are dropped, as are empty runs.
pub fn chunks<'a>(spec: &ToolQASpec, response: &'a [usize]) -> Vec<&'a [usize]> {
    response
        .split(|&t| t == spec.dot || t == spec.eos)
        .filter(|c| !c.is_empty())
        .collect()
}

/// Share of chunks whose content occurs more than once; zero without chunks.
pub fn duplication_ratio(chunks: &[&[usize]]) -> f64 {
    if chunks.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&[usize], usize> = HashMap::new();
    for c in chunks {
        *counts.entry(c).or_default() += 1;
    }
    let repeated = chunks.iter().filter(|c| counts[*c] > 1).count();
    repeated as f64 / chunks.len() as f64
}

pub fn degeneracy_metrics(spec: &ToolQASpec, episodes: &[Episode]) -> Result<DegeneracyReport> {
    if episodes.is_empty() {
        return Err(Error::InvalidArgument("no episodes".into()));
    }
    let n = episodes.len() as f64;
    let duplication: f64 = episodes
        .iter()
        .map(|e| duplication_ratio(&chunks(spec, &e.response)))
        .sum();
    let hallucinated = episodes
        .iter()
        .map(|e| u32::from(e.hallucinated_arg))
        .sum::<u32>();
    let valid = episodes.iter().map(|e| u32::from(e.r_fmt)).sum::<u32>();
    let valid_action_ratio = f64::from(valid) / n;
    Ok(DegeneracyReport {
        duplication_ratio: duplication / n,
        hallucination_rate: f64::from(hallucinated) / n,
        format_error_rate: 1.0 - valid_action_ratio,
        valid_action_ratio,
    })
}

/// Mean of per-token hidden vectors.
pub fn mean_pool(rows: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = rows.first() else {
        return Vec::new();
    };
    let mut out = vec![0.0; first.len()];
    for r in rows {
        out.iter_mut().zip(r).for_each(|(o, x)| *o += x);
    }
    out.iter_mut().for_each(|o| *o /= rows.len() as f64);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationScore {
    /// Leave-one-out nearest-centroid accuracy.
    pub probe_accuracy: f64,
    /// Mean within-class minus mean between-class cosine similarity.
    pub cosine_gap: f64,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn separation_score(vectors: &[Vec<f64>], labels: &[bool]) -> Result<SeparationScore> {
    if vectors.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} vectors with {} labels",
            vectors.len(),
            labels.len()
        )));
    }
    if !labels.iter().any(|&l| l) || labels.iter().all(|&l| l) {
        return Err(Error::InvalidArgument("both labels must be present".into()));
    }
    let dim = vectors[0].len();
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::ShapeMismatch("vectors of different widths".into()));
    }
    let mut sums = [vec![0.0; dim], vec![0.0; dim]];
    let mut counts = [0usize; 2];
    for (v, &l) in vectors.iter().zip(labels) {
        sums[l as usize]
            .iter_mut()
            .zip(v)
            .for_each(|(s, x)| *s += x);
        counts[l as usize] += 1;
    }
    let centroid = |class: usize, without: Option<&[f64]>| -> Option<Vec<f64>> {
        let n = counts[class] - without.is_some() as usize;
        (n > 0).then(|| {
            let mut c = sums[class].clone();
            if let Some(w) = without {
                c.iter_mut().zip(w).for_each(|(s, x)| *s -= x);
            }
            c.iter_mut().for_each(|s| *s /= n as f64);
            c
        })
    };
    let mut correct = 0usize;
    for (v, &l) in vectors.iter().zip(labels) {
        let own = l as usize;
        let Some(own_c) = centroid(own, Some(v)) else {
            continue;
        };
        let other_c = centroid(1 - own, None).expect("both classes present");
        if sq_dist(v, &own_c) < sq_dist(v, &other_c) {
            correct += 1;
        }
    }
    let (mut within, mut nw, mut between, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            let c = cosine(&vectors[i], &vectors[j]);
            if labels[i] == labels[j] {
                within += c;
                nw += 1;
            } else {
                between += c;
                nb += 1;
            }
        }
    }
    let within = if nw > 0 { within / nw as f64 } else { 0.0 };
    Ok(SeparationScore {
        probe_accuracy: correct as f64 / vectors.len() as f64,
        cosine_gap: within - between / nb as f64,
    })
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties; `None` if either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mean) * (b - mean);
        sxx += (a - mean) * (a - mean);
        syy += (b - mean) * (b - mean);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}
