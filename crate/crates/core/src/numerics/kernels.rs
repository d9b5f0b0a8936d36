//! Row-level kernels shared by the tape and the incremental decoder.
//!
//! Both code paths call these functions with identical operand order, so a
//! prefix scored by the tape and the same prefix decoded incrementally
//! produce bit-identical values.

use crate::error::{Error, Result};
use crate::numerics::Real;

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

/// `out = x · W` with `W` stored row-major as `x.len() x out.len()`.
#[inline]
pub fn vec_mat<T: Real>(x: &[T], w: &[T], out: &mut [T]) {
    let cols = out.len();
    debug_assert_eq!(w.len(), x.len() * cols);
    for o in out.iter_mut() {
        *o = T::zero();
    }
    for (k, xk) in x.iter().enumerate() {
        let row = &w[k * cols..(k + 1) * cols];
        for (o, wkj) in out.iter_mut().zip(row) {
            *o += *xk * *wkj;
        }
    }
}

/// `out = W · x` with `W` stored row-major as `out.len() x x.len()`.
#[inline]
pub fn mat_vec<T: Real>(w: &[T], x: &[T], out: &mut [T]) {
    let cols = x.len();
    debug_assert_eq!(w.len(), out.len() * cols);
    for (v, o) in out.iter_mut().enumerate() {
        *o = dot(&w[v * cols..(v + 1) * cols], x);
    }
}

#[inline]
fn max_re<T: Real>(z: &[T]) -> f64 {
    z.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.re()))
}

/// Softmax with max-subtraction.
pub fn softmax<T: Real>(z: &[T], out: &mut [T]) {
    let m = T::constant(max_re(z));
    let mut total = T::zero();
    for (o, x) in out.iter_mut().zip(z) {
        *o = (*x - m).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

/// Log-softmax with max-subtraction.
pub fn log_softmax<T: Real>(z: &[T], out: &mut [T]) {
    let m = T::constant(max_re(z));
    let mut total = T::zero();
    for x in z {
        total += (*x - m).exp();
    }
    let lse = total.ln();
    for (o, x) in out.iter_mut().zip(z) {
        *o = (*x - m) - lse;
    }
}

/// Checked softmax over plain reals.
pub fn softmax_checked(logits: &[f64]) -> Result<Vec<f64>> {
    if let Some(i) = logits.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("softmax input {i}")));
    }
    let mut out = vec![0.0; logits.len()];
    softmax(logits, &mut out);
    Ok(out)
}

/// Causal multi-head attention for the query at position `keys.len()/d - 1`.
///
/// `keys` and `values` hold rows `0..=i` contiguously. When `probs` is given
/// it receives the attention weights, laid out `heads x (i+1)`.
pub fn attend_row<T: Real>(
    query: &[T],
    keys: &[T],
    values: &[T],
    heads: usize,
    out: &mut [T],
    mut probs: Option<&mut [f64]>,
) {
    let d = query.len();
    let head_dim = d / heads;
    let n = keys.len() / d;
    let scale = T::constant(1.0 / (head_dim as f64).sqrt());
    let mut scores = vec![T::zero(); n];
    let mut weights = vec![T::zero(); n];
    for h in 0..heads {
        let lo = h * head_dim;
        let hi = lo + head_dim;
        for (j, s) in scores.iter_mut().enumerate() {
            *s = dot(&query[lo..hi], &keys[j * d + lo..j * d + hi]) * scale;
        }
        softmax(&scores, &mut weights);
        if let Some(p) = probs.as_deref_mut() {
            for (j, w) in weights.iter().enumerate() {
                p[h * n + j] = w.re();
            }
        }
        for o in out[lo..hi].iter_mut() {
            *o = T::zero();
        }
        for (j, w) in weights.iter().enumerate() {
            let v = &values[j * d + lo..j * d + hi];
            for (o, vj) in out[lo..hi].iter_mut().zip(v) {
                *o += *w * *vj;
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln σ(x)`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        let p = softmax_checked(&[0.0, 0.0]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        let p = softmax_checked(&[1000.0, 1000.0, 1000.0]).unwrap();
        for x in p {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax_checked(&[1f64.ln(), 3f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15);
        assert!((p[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(softmax_checked(&[0.0, f64::INFINITY]).is_err());
        assert!(softmax_checked(&[f64::NAN]).is_err());
    }

    #[test]
    fn log_sigmoid_is_stable_in_both_tails() {
        assert!((log_sigmoid(0.0) - 0.5f64.ln()).abs() < 1e-15);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-12);
        assert!(log_sigmoid(800.0) <= 0.0 && log_sigmoid(800.0) > -1e-300);
        assert!((sigmoid(2.0) - 1.0 / (1.0 + (-2f64).exp())).abs() < 1e-16);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_normalised_and_shift_invariant(
                z in prop::collection::vec(-10f64..10.0, 1..12),
                c in -10f64..10.0,
            ) {
                let p = softmax_checked(&z).unwrap();
                let total: f64 = p.iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
                prop_assert!(p.iter().all(|x| *x >= 0.0));
                let shifted: Vec<f64> = z.iter().map(|x| x + c).collect();
                let q = softmax_checked(&shifted).unwrap();
                for (a, b) in p.iter().zip(&q) {
                    prop_assert!((a - b).abs() <= 1e-14);
                }
            }
        }
    }
}
