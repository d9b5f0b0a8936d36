use super::*;
use crate::numerics::fd::{directional_derivative, finite_difference_check, FD_STEP};
use crate::numerics::{inner, Dual};
use rand_distr::StandardNormal;

fn micro() -> PolicyArchitecture {
    PolicyArchitecture::new(10, 8)
}

fn random_tokens(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..vocab)).collect()
}

fn random_direction(like: &ParamVector, rng: &mut ChaCha8Rng) -> ParamVector {
    let flat: Vec<f64> = (0..like.dim())
        .map(|_| rng.sample(StandardNormal))
        .collect();
    like.unflatten(&flat).unwrap()
}

fn rel(a: &ParamVector, b: &ParamVector) -> f64 {
    let mut d = a.clone();
    d.axpy(-1.0, b).unwrap();
    d.norm() / a.norm().max(b.norm()).max(1e-300)
}

fn zero_output(snapshot: &PolicySnapshot) -> PolicySnapshot {
    let mut p = snapshot.params().clone();
    let w = p.get_mut(OUTPUT_WEIGHT).unwrap();
    *w = RealMatrix::zeros(w.rows(), w.cols());
    PolicySnapshot::from_params(*snapshot.arch(), p, 0).unwrap()
}

#[test]
fn uniform_vocab_two_scores_three_halves() {
    let arch = PolicyArchitecture::new(2, 4);
    let snap = zero_output(&PolicySnapshot::init(arch, 0).unwrap());
    let (ell, diags) = forward(&snap, &[0], &[1, 0, 1]).unwrap();
    assert!((ell - 3.0 * 0.5f64.ln()).abs() < 1e-15);
    assert_eq!(diags.len(), 3);
}

#[test]
fn empty_response_has_zero_likelihood() {
    let snap = PolicySnapshot::random(micro(), 1, 0.2).unwrap();
    let (ell, diags) = forward(&snap, &[0, 5], &[]).unwrap();
    assert_eq!(ell, 0.0);
    assert!(diags.is_empty());
}

#[test]
fn rejects_bad_tokens_and_overflow() {
    let snap = PolicySnapshot::random(micro(), 1, 0.2).unwrap();
    assert!(matches!(
        forward(&snap, &[0, 10], &[1]),
        Err(Error::TokenOutOfRange {
            token: 10,
            vocab: 10
        })
    ));
    assert!(matches!(
        forward(&snap, &[0, 5], &[2; 7]),
        Err(Error::ContextOverflow { len: 9, window: 8 })
    ));
}

#[test]
fn likelihood_matches_per_prefix_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for seed in 0..10 {
        let snap = PolicySnapshot::random(micro(), seed, 0.3).unwrap();
        let prompt = [0, rng.gen_range(5..10)];
        let response = random_tokens(&mut rng, 6, 10);
        let (ell, diags) = forward(&snap, &prompt, &response).unwrap();
        let mut product = 1.0;
        for k in 0..response.len() {
            let table = full_next_token_table(&snap, &prompt, &response[..k]).unwrap();
            assert_eq!(table, diags[k].probs, "table differs from forward at {k}");
            product *= table[response[k]];
        }
        assert!((ell.exp() - product).abs() <= 1e-12 * product);
        let tape_ell = tape_log_likelihood(&snap, &prompt, &response).unwrap();
        assert_eq!(tape_ell.to_bits(), ell.to_bits());
    }
}

#[test]
fn residuals_and_distributions_normalised() {
    let snap = PolicySnapshot::random(micro(), 3, 0.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let response = sample_with_rng(&snap, &[0, 6], 1, 1.0, 6, &mut rng).unwrap();
        let (_, diags) = forward(&snap, &[0, 6], &response).unwrap();
        for t in diags {
            assert!(t.residual.iter().sum::<f64>().abs() < 1e-12);
            assert!((t.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn table_normalised_on_random_prefixes() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let snap = PolicySnapshot::random(micro(), 11, 0.5).unwrap();
    for _ in 0..1000 {
        let len = rng.gen_range(0..6);
        let partial = random_tokens(&mut rng, len, 10);
        let p = full_next_token_table(&snap, &[0, 7], &partial).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn zero_output_matrix_gives_uniform_table() {
    let snap = zero_output(&PolicySnapshot::random(micro(), 2, 0.5).unwrap());
    let p = full_next_token_table(&snap, &[0, 5], &[2, 4]).unwrap();
    assert!(p.iter().all(|x| *x == 0.1));
}

/// Backbone arranged so the hidden state is `e_0` everywhere, with a huge
/// output weight for `eos`.
fn all_mass_on(eos: usize) -> PolicySnapshot {
    let arch = micro();
    let base = PolicySnapshot::init(arch, 0).unwrap();
    let mut p = base.params().zeros_like();
    p.get_mut("block0.ffn.out.bias")
        .unwrap()
        .set(0, 0, 1.0)
        .unwrap();
    p.get_mut(OUTPUT_WEIGHT).unwrap().set(eos, 0, 1e3).unwrap();
    PolicySnapshot::from_params(arch, p, 0).unwrap()
}

#[test]
fn degenerate_policy_samples_eos() {
    let snap = all_mass_on(1);
    for seed in 0..20 {
        assert_eq!(sample(&snap, &[0, 5], 1, 1.0, 6, seed).unwrap(), vec![1]);
    }
    assert_eq!(greedy(&snap, &[0, 5], 1, 6).unwrap(), vec![1]);
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let snap = PolicySnapshot::random(micro(), 5, 0.5).unwrap();
    let a = sample(&snap, &[0, 6], 1, 1.0, 6, 99).unwrap();
    let b = sample(&snap, &[0, 6], 1, 1.0, 6, 99).unwrap();
    assert_eq!(a, b);
}

fn frequency_check(temperature: f64) {
    let arch = PolicyArchitecture::new(3, 2);
    let snap = PolicySnapshot::random(arch, 8, 1.0).unwrap();
    let logits = next_token_logits(&snap, &[0], &[]).unwrap();
    let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
    let expected = crate::numerics::kernels::softmax_checked(&scaled).unwrap();
    let table = next_token_distribution(&snap, &[0], &[], temperature).unwrap();
    assert_eq!(table, expected);
    let n = 100_000;
    let mut counts = [0usize; 3];
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    for _ in 0..n {
        let y = sample_with_rng(&snap, &[0], 2, temperature, 1, &mut rng).unwrap();
        counts[y[0]] += 1;
    }
    for v in 0..3 {
        let p = expected[v];
        let se = (p * (1.0 - p) / n as f64).sqrt();
        let freq = counts[v] as f64 / n as f64;
        assert!((freq - p).abs() < 3.0 * se, "token {v}: {freq} vs {p}");
    }
}

#[test]
fn empirical_frequencies_match_table() {
    frequency_check(1.0);
}

#[test]
fn temperature_rescales_logits() {
    frequency_check(0.5);
}

#[test]
fn single_token_w_block_is_residual_outer_hidden() {
    let snap = PolicySnapshot::random(micro(), 4, 0.3).unwrap();
    let b = trajectory_gradient(&snap, &[0, 5], &[2]).unwrap();
    let t = &b.tokens[0];
    let expected = RealMatrix::from_fn(10, 32, |v, j| t.residual[v] * t.hidden[j]);
    assert_eq!(b.w_block, expected);
    assert_eq!(b.w_block_tape, expected);
}

#[test]
fn bundle_invariants_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for seed in 0..10 {
        let snap = PolicySnapshot::random(micro(), 100 + seed, 0.3).unwrap();
        let len = rng.gen_range(1..7);
        let response = random_tokens(&mut rng, len, 10);
        let b = trajectory_gradient(&snap, &[0, 6], &response).unwrap();
        let wc = ParamVector::new().with("w", b.w_block.clone()).unwrap();
        let wt = ParamVector::new()
            .with("w", b.w_block_tape.clone())
            .unwrap();
        assert!(rel(&wc, &wt) < 1e-12, "closed vs tape {}", rel(&wc, &wt));
        let mut sum = b.phi_block.zeros_like();
        for p in &b.per_token_phi {
            sum.axpy(1.0, p).unwrap();
        }
        assert!(rel(&sum, &b.phi_block) < 1e-10);
        let gg = inner(&b.g, &b.g).unwrap();
        let split = inner(&wt, &wt).unwrap() + inner(&b.phi_block, &b.phi_block).unwrap();
        assert!((gg - split).abs() <= 1e-12 * gg);
        let (ell, _) = forward(&snap, &[0, 6], &response).unwrap();
        assert_eq!(ell, b.log_likelihood);
    }
}

#[test]
fn gradient_matches_directional_probes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let snap = PolicySnapshot::random(micro(), 55, 0.3).unwrap();
    let prompt = [0, 8];
    let response = [2, 4, 6, 3, 7, 1];
    let b = trajectory_gradient(&snap, &prompt, &response).unwrap();
    let arch = *snap.arch();
    let f = |p: &ParamVector| {
        let s = PolicySnapshot::from_params(arch, p.clone(), 0).unwrap();
        forward(&s, &prompt, &response).unwrap().0
    };
    let along_g = directional_derivative(f, snap.params(), &b.g, FD_STEP).unwrap();
    let gg = inner(&b.g, &b.g).unwrap();
    assert!((along_g - gg).abs() / gg < 1e-6);
    for _ in 0..20 {
        let u = random_direction(snap.params(), &mut rng);
        let fd = directional_derivative(f, snap.params(), &u, FD_STEP).unwrap();
        let exact = inner(&b.g, &u).unwrap();
        assert!(
            (fd - exact).abs() / exact.abs().max(1e-3) < 1e-6,
            "{fd} vs {exact}"
        );
    }
}

#[test]
fn log_likelihood_passes_coordinate_finite_differences() {
    let snap = PolicySnapshot::random(micro(), 77, 0.3).unwrap();
    let prompt = [0, 9];
    let response = [2, 4, 5, 3, 8, 1];
    let b = trajectory_gradient(&snap, &prompt, &response).unwrap();
    let arch = *snap.arch();
    let f = |p: &ParamVector| {
        let s = PolicySnapshot::from_params(arch, p.clone(), 0).unwrap();
        forward(&s, &prompt, &response).unwrap().0
    };
    let report = finite_difference_check(f, snap.params(), &b.g, FD_STEP).unwrap();
    assert!(report.non_finite.is_empty());
    assert!(report.max_relative_error < 1e-6, "{report:?}");
}

#[test]
fn dual_decoder_matches_values_and_reverse_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let snap = PolicySnapshot::random(micro(), 9, 0.3).unwrap();
    let dir = random_direction(snap.params(), &mut rng);
    let plain = Weights::new(&snap);
    let dual = Weights::<Dual>::with_tangent(&snap, &dir).unwrap();
    let prompt = [0, 7];
    let response = [3, 2, 6, 1];
    let mut d0 = plain.decoder();
    let mut d1 = dual.decoder();
    let mut ell = Dual::default();
    let mut o0 = d0.feed(&prompt).unwrap().unwrap();
    let mut o1 = d1.feed(&prompt).unwrap().unwrap();
    for (k, &y) in response.iter().enumerate() {
        for (a, b) in o0.logits.iter().zip(&o1.logits) {
            assert_eq!(a.to_bits(), b.re.to_bits());
        }
        let mut lp = vec![Dual::default(); 10];
        log_softmax(&o1.logits, &mut lp);
        ell += lp[y];
        if k + 1 < response.len() {
            o0 = d0.step(y).unwrap();
            o1 = d1.step(y).unwrap();
        }
    }
    let b = trajectory_gradient(&snap, &prompt, &response).unwrap();
    assert_eq!(ell.re, b.log_likelihood);
    let exact = inner(&b.g, &dir).unwrap();
    assert!((ell.eps - exact).abs() <= 1e-10 * exact.abs().max(1.0));
}
