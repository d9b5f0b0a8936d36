use super::*;
use crate::env::{demonstrations, score_format, ToolQASpec};
use crate::numerics::inner;
use crate::policy::{greedy, trajectory_gradient, PolicyArchitecture, OUTPUT_WEIGHT};
use proptest::prelude::*;
use rand::Rng;

fn micro_arch(spec: &ToolQASpec) -> PolicyArchitecture {
    PolicyArchitecture::new(spec.vocab_size(), spec.context_window())
}

fn rel(a: &ParamVector, b: &ParamVector) -> f64 {
    let mut d = a.clone();
    d.axpy(-1.0, b).unwrap();
    d.norm() / a.norm().max(b.norm()).max(1e-300)
}

/// A sampled group from a random (non-uniform) snapshot with random centered advantages.
fn random_group(snapshot: &PolicySnapshot, spec: &ToolQASpec, g: usize, seed: u64) -> Group {
    let config = TrainConfig {
        group_size: g,
        rng_seed: seed,
        ..TrainConfig::default()
    };
    let prompt = spec.prompt(spec.keys[0]);
    let episodes = rollout(snapshot, spec, &prompt, &config, 0).unwrap();
    let mut rng = stream_rng(seed, 1, 1);
    let raw: Vec<f64> = (0..g).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let adv = compute_advantages(&raw, AdvantageMode::Centered).unwrap();
    Group::with_advantages(prompt, episodes, adv).unwrap()
}

#[test]
fn advantage_examples() {
    let r = [10.0, 10.0, 0.0, 0.0];
    assert_eq!(
        compute_advantages(&r, AdvantageMode::Centered).unwrap(),
        vec![5.0, 5.0, -5.0, -5.0]
    );
    assert_eq!(
        compute_advantages(&r, AdvantageMode::Standardized).unwrap(),
        vec![1.0, 1.0, -1.0, -1.0]
    );
    for mode in [AdvantageMode::Centered, AdvantageMode::Standardized] {
        assert_eq!(compute_advantages(&[-0.1; 8], mode).unwrap(), vec![0.0; 8]);
    }
    assert!(compute_advantages(&[1.0], AdvantageMode::Centered).is_err());
}

proptest! {
    #[test]
    fn advantages_always_centered(
        rewards in prop::collection::vec(prop_oneof![Just(10.0), Just(0.0), Just(-0.1), -20f64..20.0], 2..16),
    ) {
        for mode in [AdvantageMode::Centered, AdvantageMode::Standardized] {
            let a = compute_advantages(&rewards, mode).unwrap();
            prop_assert!(a.iter().sum::<f64>().abs() < CENTERING_TOL);
        }
    }
}

#[test]
fn group_rejects_uncentered_advantages() {
    let spec = ToolQASpec::micro();
    let e = Episode::score(&spec, &[0, 6], &[1]).unwrap();
    let r = Group::with_advantages(vec![0, 6], vec![e.clone(), e.clone()], vec![1.0, 0.5]);
    assert!(matches!(r, Err(Error::NotCentered(_))));
    assert!(Group::with_advantages(vec![0, 6], vec![e], vec![0.0]).is_err());
}

#[test]
fn zero_advantages_give_zero_loss_and_gradient() {
    let spec = ToolQASpec::micro();
    let snap = PolicySnapshot::random(micro_arch(&spec), 3, 0.3).unwrap();
    let mut group = random_group(&snap, &spec, 4, 3);
    group.advantages = vec![0.0; 4];
    let loss = rl_loss(&group, &snap).unwrap();
    assert_eq!(loss.value(), 0.0);
    assert_eq!(loss.gradient(snap.params()).unwrap().max_abs(), 0.0);
}

#[test]
fn rl_gradient_is_advantage_weighted_sum_of_trajectory_gradients() {
    let spec = ToolQASpec::micro();
    for (g, seed) in [(2, 1), (8, 2), (8, 3)] {
        let snap = PolicySnapshot::random(micro_arch(&spec), seed, 0.3).unwrap();
        let group = random_group(&snap, &spec, g, seed);
        let grad = rl_loss(&group, &snap)
            .unwrap()
            .gradient(snap.params())
            .unwrap();
        let mut expected = snap.params().zeros_like();
        for (e, a) in group.episodes.iter().zip(&group.advantages) {
            let b = trajectory_gradient(&snap, &group.prompt, &e.response).unwrap();
            expected.axpy(-a, &b.g).unwrap();
        }
        assert!(
            rel(&grad, &expected) < 1e-10,
            "G={g}: {}",
            rel(&grad, &expected)
        );
    }
}

#[test]
fn pair_with_opposite_advantages() {
    let spec = ToolQASpec::micro();
    let snap = PolicySnapshot::random(micro_arch(&spec), 12, 0.3).unwrap();
    let mut group = random_group(&snap, &spec, 2, 12);
    group.advantages = vec![1.0, -1.0];
    let grad = rl_loss(&group, &snap)
        .unwrap()
        .gradient(snap.params())
        .unwrap();
    let g1 = trajectory_gradient(&snap, &group.prompt, &group.episodes[0].response)
        .unwrap()
        .g;
    let g2 = trajectory_gradient(&snap, &group.prompt, &group.episodes[1].response)
        .unwrap()
        .g;
    let mut expected = g2.clone();
    expected.axpy(-1.0, &g1).unwrap();
    assert!(rel(&grad, &expected) < 1e-10);
}

#[test]
fn doubling_advantages_doubles_gradient_exactly() {
    let spec = ToolQASpec::micro();
    let snap = PolicySnapshot::random(micro_arch(&spec), 5, 0.3).unwrap();
    let group = random_group(&snap, &spec, 6, 5);
    let mut doubled = group.clone();
    doubled.advantages.iter_mut().for_each(|a| *a *= 2.0);
    let g1 = rl_loss(&group, &snap)
        .unwrap()
        .gradient(snap.params())
        .unwrap();
    let g2 = rl_loss(&doubled, &snap)
        .unwrap()
        .gradient(snap.params())
        .unwrap();
    assert_eq!(g1.scaled(2.0), g2);
}

#[test]
fn reward_scaling_preserves_update_direction() {
    let spec = ToolQASpec::micro();
    let snap = PolicySnapshot::random(micro_arch(&spec), 6, 0.3).unwrap();
    let base = random_group(&snap, &spec, 8, 6);
    let rewards = [10.0, -0.1, 0.0, 10.0, -0.1, -0.1, 0.0, 10.0];
    let grad_for = |c: f64| {
        let scaled: Vec<f64> = rewards.iter().map(|r| c * r).collect();
        let adv = compute_advantages(&scaled, AdvantageMode::Centered).unwrap();
        let group =
            Group::with_advantages(base.prompt.clone(), base.episodes.clone(), adv).unwrap();
        rl_loss(&group, &snap)
            .unwrap()
            .gradient(snap.params())
            .unwrap()
    };
    let (a, b) = (grad_for(1.0), grad_for(3.7));
    let cosine = inner(&a, &b).unwrap() / (a.norm() * b.norm());
    assert!((cosine - 1.0).abs() < 1e-12);
    assert!((b.norm() / a.norm() - 3.7).abs() < 1e-10);
}

fn constant_head(dim: usize, bias: f64) -> SealHead {
    let base = SealHead::init(dim, 0).unwrap();
    let mut p = base.params().zeros_like();
    p.get_mut("seal.out.bias").unwrap().set(0, 0, bias).unwrap();
    SealHead::from_params(p).unwrap()
}

#[test]
fn seal_loss_reference_values() {
    let spec = ToolQASpec::micro();
    let snap = PolicySnapshot::random(micro_arch(&spec), 7, 0.3).unwrap();
    let group = random_group(&snap, &spec, 4, 7);
    let half = seal_loss(&group, &snap, &constant_head(32, 0.0)).unwrap();
    assert!((half.value() - 2f64.ln()).abs() < 1e-15);

    let wrong: Vec<Episode> = group.episodes.clone();
    assert!(wrong.iter().all(|e| !e.is_correct()));
    let sure = seal_loss(&group, &snap, &constant_head(32, -40.0)).unwrap();
    assert!(sure.value() < 1e-15);

    let correct = Episode::score(&spec, &[0, 6], &[2, 4, 6, 3, 8, 1]).unwrap();
    let all_correct =
        Group::with_advantages(vec![0, 6], vec![correct.clone(), correct], vec![0.0, 0.0]).unwrap();
    let sure = seal_loss(&all_correct, &snap, &constant_head(32, 40.0)).unwrap();
    assert!(sure.value() < 1e-15);
}

#[test]
fn seal_loss_rejects_empty_responses() {
    let spec = ToolQASpec::micro();
    let snap = PolicySnapshot::random(micro_arch(&spec), 7, 0.3).unwrap();
    let e = Episode::score(&spec, &[0, 6], &[]).unwrap();
    let group = Group::with_advantages(vec![0, 6], vec![e.clone(), e], vec![0.0, 0.0]).unwrap();
    assert!(seal_loss(&group, &snap, &SealHead::init(32, 1).unwrap()).is_err());
}

#[test]
fn seal_gradient_matches_finite_differences_and_skips_output_matrix() {
    let spec = ToolQASpec::micro();
    let arch = micro_arch(&spec);
    let snap = PolicySnapshot::random(arch, 8, 0.3).unwrap();
    let head = SealHead::init(32, 8).unwrap();
    let mut group = random_group(&snap, &spec, 4, 8);
    let good = Episode::score(&spec, &group.prompt, &[2, 4, 6, 3, 8, 1]).unwrap();
    group.episodes[1] = good;
    let loss = seal_loss(&group, &snap, &head).unwrap();
    let point = snap.params().concat(head.params()).unwrap();
    let grad = loss.gradient(&point).unwrap();
    assert_eq!(grad.require(OUTPUT_WEIGHT).unwrap().max_abs(), 0.0);
    assert!(grad.max_abs() > 0.0);
    let names: Vec<&str> = snap.params().names().collect();
    let f = |p: &ParamVector| {
        let (theta, h) = p.split(&names);
        let s = PolicySnapshot::from_params(arch, theta, 0).unwrap();
        seal_loss(&group, &s, &SealHead::from_params(h).unwrap())
            .unwrap()
            .value()
    };
    let report = crate::numerics::fd::finite_difference_check(
        f,
        &point,
        &grad,
        crate::numerics::fd::FD_STEP,
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-6, "{report:?}");
}

#[test]
fn kl_reference_values() {
    let p = [0.5, 0.5];
    let q = [0.75, 0.25];
    let expected = 0.5 * (2.0f64 / 3.0).ln() + 0.5 * 2f64.ln();
    assert!((kl_divergence(&p, &q) - expected).abs() < 1e-15);
    assert!((expected - 0.14384).abs() < 1e-5);

    let spec = ToolQASpec::micro();
    let snap = PolicySnapshot::random(micro_arch(&spec), 9, 0.3).unwrap();
    let group = random_group(&snap, &spec, 4, 9);
    assert!(kl_anchor_loss(&group, &snap, &snap).unwrap().value().abs() < 1e-12);
    let other = PolicySnapshot::random(PolicyArchitecture::new(10, 9), 0, 0.3).unwrap();
    assert!(matches!(
        kl_anchor_loss(&group, &snap, &other),
        Err(Error::InvalidArchitecture(_))
    ));
}

#[test]
fn kl_nonnegative_over_random_pairs() {
    let spec = ToolQASpec::micro();
    let mut arch = micro_arch(&spec);
    arch.model_dim = 8;
    arch.ffn_dim = 16;
    let episodes: Vec<Episode> = [[2, 4, 6, 3, 8, 1], [5, 5, 1, 0, 0, 0]]
        .iter()
        .map(|r| Episode::score(&spec, &[0, 7], r).unwrap())
        .collect();
    let group = Group::with_advantages(vec![0, 7], episodes, vec![0.0, 0.0]).unwrap();
    for seed in 0..1000 {
        let a = PolicySnapshot::random(arch, 2 * seed, 0.5).unwrap();
        let b = PolicySnapshot::random(arch, 2 * seed + 1, 0.5).unwrap();
        assert!(kl_anchor_loss(&group, &a, &b).unwrap().value() >= 0.0);
    }
}

fn micro_state(seed: u64) -> (ToolQASpec, TrainState) {
    let spec = ToolQASpec::micro();
    let policy = PolicySnapshot::init(micro_arch(&spec), seed).unwrap();
    let head = SealHead::init(32, seed).unwrap();
    (spec, TrainState::new(policy, head))
}

#[test]
fn uniform_start_with_equal_rewards_leaves_parameters_unchanged() {
    let (spec, state) = micro_state(0);
    let config = TrainConfig {
        kl_coef: 0.0,
        ..TrainConfig::default()
    };
    let (next, record) = train_step(&state, &config, &spec).unwrap();
    assert!(record.group.episodes.iter().all(|e| e.reward == -0.1));
    assert_eq!(record.grad_norm, 0.0);
    assert_eq!(next.policy.params(), state.policy.params());
    assert_eq!(next.step, 1);
}

fn random_state(seed: u64) -> (ToolQASpec, TrainState) {
    let spec = ToolQASpec::micro();
    let policy = PolicySnapshot::random(micro_arch(&spec), seed, 0.3).unwrap();
    (
        spec,
        TrainState::new(policy, SealHead::init(32, seed).unwrap()),
    )
}

#[test]
fn train_step_is_deterministic() {
    let (spec, state) = random_state(4);
    let config = TrainConfig {
        seal_weight: 0.5,
        rng_seed: 4,
        ..TrainConfig::default()
    };
    let (a, ra) = train_step(&state, &config, &spec).unwrap();
    let (b, rb) = train_step(&state, &config, &spec).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(a, b);
}

#[test]
fn halving_step_size_halves_the_update() {
    let (spec, state) = random_state(5);
    let config = TrainConfig {
        kl_coef: 0.0,
        seal_weight: 0.5,
        learning_rate: 1e-2,
        rng_seed: 5,
        ..TrainConfig::default()
    };
    let half = TrainConfig {
        learning_rate: 5e-3,
        ..config.clone()
    };
    let delta = |c: &TrainConfig| {
        let (next, _) = train_step(&state, c, &spec).unwrap();
        let mut d = next.policy.params().clone();
        d.axpy(-1.0, state.policy.params()).unwrap();
        d
    };
    let (full, halved) = (delta(&config), delta(&half));
    assert!(full.norm() > 0.0);
    assert!(rel(&full.scaled(0.5), &halved) < 1e-10);
}

#[test]
fn plain_objective_matches_reference_path_bit_for_bit() {
    for seed in 0..3 {
        let (spec, state) = random_state(20 + seed);
        let config = TrainConfig {
            kl_coef: 0.0,
            seal_weight: 0.0,
            rng_seed: seed,
            ..TrainConfig::default()
        };
        let (next, record) = train_step(&state, &config, &spec).unwrap();
        let prompt = step_prompt(&spec, config.rng_seed, 0);
        let episodes = rollout(&state.policy, &spec, &prompt, &config, 0).unwrap();
        let group = Group::new(prompt, episodes, config.advantage_mode).unwrap();
        assert_eq!(group, record.group);
        let grad = rl_loss(&group, &state.policy)
            .unwrap()
            .gradient(state.policy.params())
            .unwrap();
        let expected = state
            .policy
            .apply_update(&grad, -config.learning_rate)
            .unwrap();
        let a: Vec<u64> = next
            .policy
            .params()
            .flatten()
            .iter()
            .map(|x| x.to_bits())
            .collect();
        let b: Vec<u64> = expected
            .params()
            .flatten()
            .iter()
            .map(|x| x.to_bits())
            .collect();
        assert_eq!(a, b);
    }
}

#[test]
fn overflowing_forward_aborts_step() {
    let (spec, state) = random_state(6);
    let blown = state
        .policy
        .with_params(state.policy.params().scaled(1e200))
        .unwrap();
    let state = TrainState {
        policy: blown,
        ..state
    };
    assert!(matches!(
        train_step(&state, &TrainConfig::default(), &spec),
        Err(Error::NonFiniteLoss { step: 0 })
    ));
}

#[test]
fn seal_start_step_delays_the_head() {
    let (spec, state) = random_state(7);
    let config = TrainConfig {
        seal_weight: 0.5,
        seal_start_step: 3,
        ..TrainConfig::default()
    };
    let (next, record) = train_step(&state, &config, &spec).unwrap();
    assert!(record.seal_loss.is_none());
    assert_eq!(next.head, state.head);
}

#[test]
fn mid_train_zero_epochs_is_identity() {
    let spec = ToolQASpec::micro();
    let snap = PolicySnapshot::init(micro_arch(&spec), 0).unwrap();
    let demos = demonstrations(&spec, 8, 0).unwrap();
    let out = mid_train(&snap, &demos, 0, 0.05).unwrap();
    assert_eq!(out.snapshot, snap);
    assert!(out.losses.is_empty());
}

#[test]
fn mid_train_loss_non_increasing_at_small_step() {
    let spec = ToolQASpec::micro();
    let snap = PolicySnapshot::init(micro_arch(&spec), 1).unwrap();
    let demos = demonstrations(&spec, 16, 1).unwrap();
    let out = mid_train(&snap, &demos, 60, 0.01).unwrap();
    for w in out.losses.windows(2) {
        assert!(w[1] <= w[0], "{} then {}", w[0], w[1]);
    }
}

#[test]
fn mid_train_default_budget_instils_format() {
    let spec = ToolQASpec::micro();
    let snap = PolicySnapshot::init(micro_arch(&spec), 2).unwrap();
    let demos = demonstrations(&spec, 16, 2).unwrap();
    let out = mid_train(
        &snap,
        &demos,
        DEFAULT_MID_TRAIN_EPOCHS,
        DEFAULT_MID_TRAIN_LR,
    )
    .unwrap();
    let valid: Vec<u8> = demos
        .iter()
        .map(|(p, _)| {
            let r = greedy(&out.snapshot, p, spec.eos, spec.max_response_len).unwrap();
            score_format(&spec, &r)
        })
        .collect();
    let ratio = valid.iter().map(|v| f64::from(*v)).sum::<f64>() / valid.len() as f64;
    assert!(ratio >= 0.9, "greedy valid ratio {ratio}");
}

#[test]
fn stream_rng_is_keyed_by_all_three_inputs() {
    let draw = |s, t, i| stream_rng(s, t, i).gen::<u64>();
    assert_eq!(draw(1, 2, 3), draw(1, 2, 3));
    assert_ne!(draw(1, 2, 3), draw(1, 3, 2));
    assert_ne!(draw(1, 2, 3), draw(2, 2, 3));
}
