use gaidrl_core::env::{ActionSpace, EnvConfig, UavRelayEnv};
use gaidrl_core::plugins::diffusion::{gdm_sample_action, DiffusionConfig, DiffusionPolicy, NoiseSchedule};
use gaidrl_core::plugins::hybrid::{HybridConfig, HybridLatentModel, HybridTrainer};
use gaidrl_core::plugins::stack::{compose_stack, EnhancementStack};
use gaidrl_core::plugins::vae::{normalized_mse, vae_encode, VaeConfig, VaeModel, VaeTrainer};
use gaidrl_core::rl::Td3Config;
use gaidrl_core::Error;
use gaidrl_nn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

#[test]
fn reparameterized_samples_match_the_posterior() {
    let model = VaeModel::new(10, &VaeConfig { latent: 3, hidden: 16, ..VaeConfig::default() }, 5).unwrap();
    let state: Vec<f64> = (0..10).map(|i| (i as f64 * 0.7).cos()).collect();
    let (mu, logvar, z0) = vae_encode(&model, &state, 0, false).unwrap();
    assert_eq!(z0, mu);
    let draws: Vec<Vec<f64>> = (0..20_000u64).map(|s| vae_encode(&model, &state, s, true).unwrap().2).collect();
    for j in 0..3 {
        let col: Vec<f64> = draws.iter().map(|z| z[j]).collect();
        let (m, v) = mean_var(&col);
        let sd = (0.5 * logvar[j]).exp();
        assert!((m - mu[j]).abs() <= 0.03 * sd, "mean {m} vs {}", mu[j]);
        assert!((v / logvar[j].exp() - 1.0).abs() <= 0.03, "var {v} vs {}", logvar[j].exp());
    }
}

#[test]
fn chain_marginal_matches_closed_form() {
    let s = NoiseSchedule::linear(5, 1e-4, 0.1).unwrap();
    let a0 = 0.7;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 50_000;
    let mut chain = vec![a0; n];
    for k in 1..=5 {
        for x in chain.iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *x = s.alpha(k).sqrt() * *x + s.beta(k).sqrt() * e;
        }
        let (m, v) = mean_var(&chain);
        let closed: Vec<f64> = (0..n).map(|_| s.noised(a0, k, rng.sample(StandardNormal))).collect();
        let (mc, vc) = mean_var(&closed);
        let ab = s.alpha_bar(k);
        let sd = (1.0 - ab).sqrt();
        assert!((m - ab.sqrt() * a0).abs() < 4.0 * sd / (n as f64).sqrt() + 1e-12);
        assert!((mc - ab.sqrt() * a0).abs() < 4.0 * sd / (n as f64).sqrt() + 1e-12);
        assert!((v / (1.0 - ab) - 1.0).abs() < 0.05);
        assert!((vc / (1.0 - ab) - 1.0).abs() < 0.05);
    }
}

#[test]
fn gdm_samples_are_squashed_and_seeded() {
    let p = DiffusionPolicy::with_mlp(&DiffusionConfig::default(), 6, 4, 2).unwrap();
    let state = [0.1, -0.4, 0.9, 0.0, 2.0, -1.0];
    for seed in 0..50 {
        let a = gdm_sample_action(&p, &state, seed, false).unwrap();
        assert_eq!(a.len(), 4);
        assert!(a.iter().all(|v| v.abs() <= 1.0));
        assert_eq!(a, gdm_sample_action(&p, &state, seed, true).unwrap());
    }
    assert_ne!(gdm_sample_action(&p, &state, 0, false).unwrap(), gdm_sample_action(&p, &state, 1, false).unwrap());
}

#[test]
fn vae_compresses_environment_states() {
    let cfg = EnvConfig { antennas: 8, ..EnvConfig::default() };
    let mut env = UavRelayEnv::new(cfg.clone()).unwrap();
    let mut rows = Vec::new();
    for ep in 0..40 {
        env.reset(ep).unwrap();
        rows.extend(env.observation());
    }
    let d = cfg.obs_dim();
    let states = Tensor::matrix(40, d, rows).unwrap();
    let vc = VaeConfig { latent: 8, hidden: 64, beta_kl: 0.01, ..VaeConfig::default() };
    let mut t = VaeTrainer::new(VaeModel::new(d, &vc, 0).unwrap(), 3e-3, 1);
    let before = normalized_mse(&states, &t.model.reconstruct(&states).unwrap());
    for _ in 0..600 {
        t.step(&states).unwrap();
    }
    let after = normalized_mse(&states, &t.model.reconstruct(&states).unwrap());
    assert!(after < 0.5 * before, "{before} -> {after}");
    assert_eq!(t.steps(), 600);
}

#[test]
fn hybrid_latent_separates_three_modes() {
    let modes = [(0usize, [0.8, -0.5]), (2, [-0.6, 0.3]), (4, [0.0, 0.9])];
    let n = 60;
    let mut states = Vec::new();
    let mut moves = Vec::new();
    let mut powers = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..n {
        let (m, p) = modes[i % 3];
        states.extend([rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
        moves.push(m);
        powers.extend(p);
    }
    let states = Tensor::matrix(n, 2, states).unwrap();
    let powers = Tensor::matrix(n, 2, powers).unwrap();
    let hc = HybridConfig { beta_kl: 0.01, ..HybridConfig::default() };
    let mut t = HybridTrainer::new(HybridLatentModel::new(2, &hc, 0).unwrap(), 5e-3, 1);
    for _ in 0..800 {
        t.step(&states, &moves, &powers).unwrap();
    }
    let z = t.model.encode_mean(&states, &moves, &powers).unwrap();
    let out = t.model.decode_batch(&states, &moves, &z).unwrap();
    for (o, p) in out.data().iter().zip(powers.data()) {
        assert!((o - p).abs() <= 0.1, "{o} vs {p}");
    }
}

#[test]
fn stack_violations_are_named() {
    let env = EnvConfig { antennas: 8, ..EnvConfig::default() };
    let td3 = Td3Config::default();
    let bad = EnhancementStack {
        vae_hybrid_action: true,
        ..EnhancementStack::default()
    };
    match compose_stack(&bad, &env, &td3, 0) {
        Err(Error::Invalid(v)) => assert_eq!(v[0].path, "/stack/vae_hybrid_action"),
        other => panic!("{other:?}"),
    }
    let both = EnhancementStack {
        gdm_policy: true,
        transformer_actor: true,
        vae_state: true,
        vae: VaeConfig { latent: 0, ..VaeConfig::default() },
        ..EnhancementStack::default()
    };
    match compose_stack(&both, &env, &td3, 0) {
        Err(Error::Invalid(v)) => {
            let paths: Vec<_> = v.iter().map(|x| x.path.as_str()).collect();
            assert!(paths.contains(&"/stack/transformer_actor"));
            assert!(paths.contains(&"/stack/vae/latent"));
        }
        other => panic!("{other:?}"),
    }
    let hybrid = EnvConfig { action_space: ActionSpace::Hybrid, ..env };
    assert!(compose_stack(&bad, &hybrid, &td3, 0).is_ok());
}
