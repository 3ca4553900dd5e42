use gaidrl_core::env::{Action, ActionSpace, EnvConfig, UavRelayEnv};
use gaidrl_core::plugins::stack::{compose_stack, EnhancementStack};
use gaidrl_core::rl::{
    bellman_target, critic_regression, soft_update, train_loop, Agent, Mode, ReplayBuffer, Schedule, Td3Config,
    Transition,
};
use gaidrl_nn::{AdamConfig, AdamState, Mlp, ParamSet, Tensor};
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn small_env(space: ActionSpace) -> EnvConfig {
    EnvConfig {
        antennas: 8,
        horizon: 10,
        action_space: space,
        ..EnvConfig::default()
    }
}

fn small_td3() -> Td3Config {
    Td3Config {
        hidden: vec![16, 16],
        batch_size: 16,
        warmup_steps: 50,
        ..Td3Config::default()
    }
}

fn agent(space: ActionSpace, stack: &str, seed: u64) -> (EnvConfig, Agent) {
    let env = small_env(space);
    let a = compose_stack(&EnhancementStack::from_name(stack).unwrap(), &env, &small_td3(), seed).unwrap();
    (env, a)
}

fn transition(i: usize, dim: usize) -> Transition {
    Transition {
        state: vec![i as f64; dim],
        action: vec![0.5],
        reward: i as f64,
        next_state: vec![0.0; dim],
        done: false,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn buffer_is_bounded_fifo(cap in 1usize..20, pushes in 0usize..60) {
        let mut b = ReplayBuffer::new(cap, 0).unwrap();
        for i in 0..pushes {
            b.push(transition(i, 3)).unwrap();
            prop_assert!(b.len() <= cap);
        }
        prop_assert_eq!(b.len(), pushes.min(cap));
        let oldest = pushes.saturating_sub(cap);
        for j in 0..b.len() {
            prop_assert_eq!(b.get(j).unwrap().reward, (oldest + j) as f64);
        }
    }

    #[test]
    fn soft_update_is_a_convex_combination(tau in 0.0f64..=1.0, a in -10.0f64..10.0, b in -10.0f64..10.0) {
        let mut target = ParamSet::new();
        target.push("w", Tensor::row(vec![a, 2.0 * a]));
        let mut online = ParamSet::new();
        online.push("w", Tensor::row(vec![b, -b]));
        let before = target.clone();
        if tau == 0.0 {
            // tau = 0 is outside the config range but must be a no-op here
            soft_update(&mut target, &online, tau).unwrap();
            prop_assert_eq!(&target, &before);
        } else {
            soft_update(&mut target, &online, tau).unwrap();
            for ((t, o), p) in target.tensors()[0].data().iter().zip(online.tensors()[0].data()).zip(before.tensors()[0].data()) {
                prop_assert!((t - ((1.0 - tau) * p + tau * o)).abs() <= 1e-12);
                prop_assert!(*t >= p.min(*o) - 1e-12 && *t <= p.max(*o) + 1e-12);
            }
        }
    }

    #[test]
    fn twin_min_target_never_exceeds_either_critic(r in -5.0f64..5.0, q1 in -50.0f64..50.0, q2 in -50.0f64..50.0, gamma in 0.01f64..0.999) {
        let y = bellman_target(r, false, gamma, q1.min(q2));
        prop_assert!(y <= r + gamma * q1 + 1e-12);
        prop_assert!(y <= r + gamma * q2 + 1e-12);
        prop_assert_eq!(bellman_target(r, true, gamma, q1.min(q2)), r);
    }
}

#[test]
fn bellman_examples() {
    assert_eq!(bellman_target(1.0, true, 0.99, 123.0), 1.0);
    assert!((bellman_target(1.0, false, 0.99, 3.0f64.min(2.0)) - 2.98).abs() < 1e-12);
}

#[test]
fn exact_fit_has_zero_critic_loss() {
    let mut critic = Mlp::new(&[4, 8, 1], gaidrl_nn::Activation::Relu, gaidrl_nn::Activation::Identity, 3).unwrap();
    let sa = Tensor::matrix(5, 4, (0..20).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let y = critic.predict(sa.clone()).unwrap();
    let mut opt = AdamState::new(critic.params(), AdamConfig::with_lr(1e-3));
    let loss = critic_regression(&mut critic, &mut opt, &sa, &y).unwrap();
    assert!(loss.abs() < 1e-20, "{loss}");
}

#[test]
fn full_exploration_is_uniform_over_the_table() {
    let (env_cfg, mut a) = agent(ActionSpace::Discrete, "vanilla", 4);
    a.set_epsilon(1.0);
    let env = UavRelayEnv::new(env_cfg.clone()).unwrap();
    let obs = env.observation();
    let k = env_cfg.discrete_actions();
    let draws = 10_000;
    let mut counts = vec![0usize; k];
    for _ in 0..draws {
        match a.act(&obs, Mode::Train).unwrap().action {
            Action::Discrete { index } => counts[index] += 1,
            other => panic!("unexpected {other:?}"),
        }
    }
    let expected = draws as f64 / k as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new((k - 1) as f64).unwrap().cdf(chi2);
    assert!(p > 0.01, "chi2 {chi2}, p {p}");
}

#[test]
fn eval_is_deterministic_and_train_is_clipped() {
    for stack in ["vanilla", "gdm", "transformer"] {
        let (env_cfg, mut a) = agent(ActionSpace::Continuous, stack, 1);
        let env = UavRelayEnv::new(env_cfg).unwrap();
        let obs = env.observation();
        let first = a.act(&obs, Mode::Eval).unwrap();
        assert_eq!(first, a.act(&obs, Mode::Eval).unwrap(), "{stack}");
        for _ in 0..200 {
            let t = a.act(&obs, Mode::Train).unwrap();
            assert!(t.stored.iter().all(|v| (-1.0..=1.0).contains(v)), "{stack}");
        }
    }
}

fn train(space: ActionSpace, stack: &str, episodes: usize, seed: u64) -> (Agent, gaidrl_core::rl::TrainRecord) {
    let (env_cfg, mut a) = agent(space, stack, seed);
    let mut env = UavRelayEnv::new(env_cfg).unwrap();
    let mut buf = ReplayBuffer::new(1000, seed).unwrap();
    let sched = Schedule {
        episodes,
        eval_every: 2,
        eval_episodes: 1,
    };
    let rec = train_loop(&mut env, &mut a, &mut buf, &sched, seed, |_, _| {}).unwrap();
    (a, rec)
}

#[test]
fn warmup_accounting_and_delay_rule() {
    let (a, rec) = train(ActionSpace::Continuous, "vanilla", 12, 0);
    // 50 warmup steps = 5 episodes of 10 steps
    for row in &rec.episodes[..5] {
        assert_eq!(row.critic_updates, 0);
    }
    assert!(rec.episodes[5].critic_updates > 0);
    let last = rec.episodes.last().unwrap();
    assert_eq!(last.env_steps, 12 * 10);
    assert_eq!(last.critic_updates, (12 * 10 - 50) as u64);
    assert_eq!(a.actor_updates(), a.critic_updates() / 2);
    assert_eq!(rec.evals.len(), 6);
    assert!(rec.wall_clock.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn every_stack_trains_in_every_space() {
    let cases: &[(ActionSpace, &[&str])] = &[
        (
            ActionSpace::Continuous,
            &["vanilla", "gdm", "gan", "transformer", "gdm-gan-transformer", "gdm-gan-transformer-vae", "vae"],
        ),
        (ActionSpace::Discrete, &["vanilla", "gdm", "gan", "gdm-gan-transformer-vae", "transformer"]),
        (ActionSpace::Hybrid, &["vanilla", "gdm", "gdm-latent", "gan-latent", "gdm-gan-transformer-vae-latent"]),
    ];
    for (space, stacks) in cases {
        for stack in *stacks {
            let (a, rec) = train(*space, stack, 8, 2);
            assert!(rec.episodes.iter().all(|r| r.reward.is_finite()), "{space} {stack}");
            assert!(a.critic_updates() > 0, "{space} {stack}");
        }
    }
}

#[test]
fn fixed_seed_reproduces_the_record() {
    for (space, stack) in [
        (ActionSpace::Continuous, "gdm-gan"),
        (ActionSpace::Discrete, "vanilla"),
        (ActionSpace::Hybrid, "gdm-latent"),
    ] {
        let (_, a) = train(space, stack, 7, 9);
        let (_, b) = train(space, stack, 7, 9);
        assert_eq!(a.episodes, b.episodes, "{space} {stack}");
        assert_eq!(a.evals, b.evals, "{space} {stack}");
    }
}

#[test]
fn full_tau_copies_online_into_targets() {
    let env_cfg = small_env(ActionSpace::Continuous);
    let td3 = Td3Config {
        tau: 1.0,
        policy_delay: 1,
        ..small_td3()
    };
    let mut a = compose_stack(&EnhancementStack::vanilla(), &env_cfg, &td3, 0).unwrap();
    let mut env = UavRelayEnv::new(env_cfg).unwrap();
    let mut buf = ReplayBuffer::new(1000, 0).unwrap();
    let sched = Schedule {
        episodes: 7,
        eval_every: 0,
        eval_episodes: 0,
    };
    train_loop(&mut env, &mut a, &mut buf, &sched, 0, |_, _| {}).unwrap();
    assert_eq!(a.actor_params(), a.actor_target_params());
    for i in 0..2 {
        assert_eq!(a.critic(i).params(), a.critic_target(i).params());
    }
}

#[test]
fn delay_two_skips_the_first_actor_update() {
    let env_cfg = small_env(ActionSpace::Continuous);
    let small = Td3Config {
        batch_size: 4,
        ..small_td3()
    };
    let mut a = compose_stack(&EnhancementStack::vanilla(), &env_cfg, &small, 0).unwrap();
    let mut env = UavRelayEnv::new(env_cfg.clone()).unwrap();
    let mut buf = ReplayBuffer::new(100, 0).unwrap();
    let obs = env.observation();
    for _ in 0..10 {
        let act = a.random_action();
        let s = env.step(&act.action).unwrap();
        buf.push(Transition {
            state: obs.clone(),
            action: act.stored,
            reward: s.reward,
            next_state: s.state.observation(&env_cfg),
            done: s.done,
        })
        .unwrap();
    }
    let mut b = buf;
    let first = a.update(&mut b).unwrap();
    assert!(first.actor_loss.is_none());
    assert!(first.critic_loss.iter().all(|l| *l >= 0.0));
    let second = a.update(&mut b).unwrap();
    assert!(second.actor_loss.is_some());
}
