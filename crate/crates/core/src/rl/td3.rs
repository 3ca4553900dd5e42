use gaidrl_nn::ParamSet;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Violation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Td3Config {
    pub gamma: f64,
    pub tau: f64,
    pub policy_delay: usize,
    pub explore_noise: f64,
    pub target_noise: f64,
    pub noise_clip: f64,
    pub batch_size: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub hidden: Vec<usize>,
    pub buffer_capacity: usize,
    pub warmup_steps: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of all training steps over which epsilon decays linearly.
    pub epsilon_fraction: f64,
}

impl Default for Td3Config {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.005,
            policy_delay: 2,
            explore_noise: 0.1,
            target_noise: 0.2,
            noise_clip: 0.5,
            batch_size: 256,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            hidden: vec![256, 256],
            buffer_capacity: 100_000,
            warmup_steps: 1000,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_fraction: 0.3,
        }
    }
}

impl Td3Config {
    pub fn violations(&self, at: &str) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut bad = |f: &str, m: &str| {
            out.push(Violation {
                path: format!("{at}/{f}"),
                message: m.to_string(),
            })
        };
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            bad("gamma", "must lie in (0, 1)");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            bad("tau", "must lie in (0, 1]");
        }
        if self.policy_delay == 0 {
            bad("policy_delay", "must be at least 1");
        }
        for (f, v) in [
            ("explore_noise", self.explore_noise),
            ("target_noise", self.target_noise),
            ("noise_clip", self.noise_clip),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                bad(f, "must be nonnegative");
            }
        }
        for (f, v) in [("actor_lr", self.actor_lr), ("critic_lr", self.critic_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                bad(f, "must be positive");
            }
        }
        if self.batch_size == 0 {
            bad("batch_size", "must be at least 1");
        }
        if self.buffer_capacity < self.batch_size {
            bad("buffer_capacity", "must hold at least one batch");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            bad("hidden", "needs at least one positive width");
        }
        let eps_ok = |v: f64| (0.0..=1.0).contains(&v);
        if !eps_ok(self.epsilon_start) || !eps_ok(self.epsilon_end) {
            bad("epsilon_start", "epsilon values must lie in [0, 1]");
        }
        if !(self.epsilon_fraction > 0.0 && self.epsilon_fraction <= 1.0) {
            bad("epsilon_fraction", "must lie in (0, 1]");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations("");
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Invalid(v))
        }
    }
}

/// `r + (1 - done) * gamma * min_target_q`.
pub fn bellman_target(reward: f64, done: bool, gamma: f64, min_target_q: f64) -> f64 {
    if done {
        reward
    } else {
        reward + gamma * min_target_q
    }
}

/// `target <- (1 - tau) * target + tau * online`.
pub fn soft_update(target: &mut ParamSet, online: &ParamSet, tau: f64) -> Result<()> {
    if target.shapes() != online.shapes() {
        return Err(Error::Usage("soft update between differently shaped parameter sets".into()));
    }
    for (t, o) in target.tensors_mut().iter_mut().zip(online.tensors()) {
        for (tv, ov) in t.data_mut().iter_mut().zip(o.data()) {
            *tv = (1.0 - tau) * *tv + tau * ov;
        }
    }
    Ok(())
}

/// Linear decay from `start` to `end` over the first `fraction * total` steps.
pub fn epsilon_at(config: &Td3Config, step: usize, total: usize) -> f64 {
    let horizon = (config.epsilon_fraction * total as f64).max(1.0);
    let t = (step as f64 / horizon).min(1.0);
    config.epsilon_start + (config.epsilon_end - config.epsilon_start) * t
}

#[cfg(test)]
mod tests {
    use super::*;
    use gaidrl_nn::Tensor;

    #[test]
    fn bellman_examples() {
        assert_eq!(bellman_target(1.0, true, 0.99, 2.0), 1.0);
        assert!((bellman_target(1.0, false, 0.99, 2.0) - 2.98).abs() < 1e-12);
        assert!((bellman_target(1.0, false, 0.99, f64::min(3.0, 2.0)) - 2.98).abs() < 1e-12);
    }

    fn scalar_set(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("x", Tensor::scalar(v));
        p
    }

    #[test]
    fn soft_update_endpoints() {
        let online = scalar_set(10.0);
        let mut t = scalar_set(0.0);
        soft_update(&mut t, &online, 0.0).unwrap();
        assert_eq!(t.tensors()[0].item(), 0.0);
        soft_update(&mut t, &online, 0.1).unwrap();
        assert!((t.tensors()[0].item() - 1.0).abs() < 1e-15);
        soft_update(&mut t, &online, 1.0).unwrap();
        assert_eq!(t.tensors()[0].item(), 10.0);
        let mut other = ParamSet::new();
        other.push("x", Tensor::zeros(&[2]));
        assert!(matches!(soft_update(&mut other, &online, 0.5), Err(Error::Usage(_))));
    }

    #[test]
    fn epsilon_schedule() {
        let c = Td3Config::default();
        assert_eq!(epsilon_at(&c, 0, 1000), 1.0);
        assert!((epsilon_at(&c, 150, 1000) - 0.525).abs() < 1e-12);
        assert!((epsilon_at(&c, 300, 1000) - 0.05).abs() < 1e-12);
        assert!((epsilon_at(&c, 999, 1000) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn config_rules() {
        assert!(Td3Config::default().validate().is_ok());
        let bad = Td3Config {
            gamma: 1.0,
            tau: 0.0,
            policy_delay: 0,
            ..Td3Config::default()
        };
        assert_eq!(bad.violations("/td3").len(), 3);
    }
}
