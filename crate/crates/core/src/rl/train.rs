//! Episode loop: warmup, exploration schedule, updates and periodic
//! noiseless evaluation.

use std::time::Instant;

use gaidrl_nn::derive_seed;
use serde::{Deserialize, Serialize};

use super::agent::{Agent, Mode};
use super::buffer::{ReplayBuffer, Transition};
use super::td3::epsilon_at;
use crate::env::UavRelayEnv;
use crate::error::{Error, Result};

/// Offset separating evaluation reset seeds from training reset seeds.
const EVAL_STREAM: u64 = 1 << 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub episodes: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            episodes: 300,
            eval_every: 10,
            eval_episodes: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub episode: usize,
    pub reward: f64,
    pub mean_rate: f64,
    pub mean_power: f64,
    pub violations: usize,
    pub env_steps: usize,
    pub critic_updates: u64,
    pub actor_updates: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub episode: usize,
    pub mean_reward: f64,
    pub mean_rate: f64,
    pub mean_power: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainRecord {
    pub episodes: Vec<EpisodeRow>,
    pub evals: Vec<EvalRow>,
    /// Cumulative training seconds after each episode, evaluation excluded.
    pub wall_clock: Vec<f64>,
}

struct Rollout {
    reward: f64,
    rate: f64,
    power: f64,
    violations: usize,
    steps: usize,
}

fn evaluate(env: &mut UavRelayEnv, agent: &mut Agent, episodes: usize, seed: u64) -> Result<(f64, f64, f64)> {
    let mut acc = (0.0, 0.0, 0.0);
    for i in 0..episodes {
        env.reset(derive_seed(seed, EVAL_STREAM + i as u64))?;
        let mut r = Rollout { reward: 0.0, rate: 0.0, power: 0.0, violations: 0, steps: 0 };
        while !env.is_done() {
            let a = agent.act(&env.observation(), Mode::Eval)?;
            let s = env.step(&a.action)?;
            r.reward += s.reward;
            r.rate += s.rate;
            r.power += s.power;
            r.steps += 1;
        }
        acc.0 += r.reward;
        acc.1 += r.rate / r.steps as f64;
        acc.2 += r.power / r.steps as f64;
    }
    let n = episodes.max(1) as f64;
    Ok((acc.0 / n, acc.1 / n, acc.2 / n))
}

/// Trains `agent` on `env` for `schedule.episodes` episodes. Episode `e`
/// resets with `derive_seed(seed, e)`; `on_episode` sees each row as it is
/// produced together with the cumulative training seconds.
pub fn train_loop(
    env: &mut UavRelayEnv,
    agent: &mut Agent,
    buffer: &mut ReplayBuffer,
    schedule: &Schedule,
    seed: u64,
    mut on_episode: impl FnMut(&EpisodeRow, f64),
) -> Result<TrainRecord> {
    if schedule.episodes == 0 {
        return Err(Error::Config("schedule needs at least one episode".into()));
    }
    if env.config().action_space != agent.space() {
        return Err(Error::Usage("agent and environment disagree on the action space".into()));
    }
    let total = schedule.episodes * env.config().horizon;
    let warmup = agent.config().warmup_steps;
    let batch = agent.config().batch_size;
    let mut eval_env = UavRelayEnv::new(env.config().clone())?;
    let mut record = TrainRecord::default();
    let mut global = 0usize;
    let mut eval_time = 0.0;
    let start = Instant::now();
    for ep in 0..schedule.episodes {
        env.reset(derive_seed(seed, ep as u64))?;
        let mut obs = env.observation();
        let mut r = Rollout { reward: 0.0, rate: 0.0, power: 0.0, violations: 0, steps: 0 };
        while !env.is_done() {
            let a = if global < warmup {
                agent.random_action()
            } else {
                agent.set_epsilon(epsilon_at(agent.config(), global, total));
                agent.act(&obs, Mode::Train)?
            };
            let s = env.step(&a.action)?;
            let next = s.state.observation(env.config());
            buffer.push(Transition {
                state: obs,
                action: a.stored,
                reward: s.reward,
                next_state: next.clone(),
                done: s.done,
            })?;
            obs = next;
            global += 1;
            r.reward += s.reward;
            r.rate += s.rate;
            r.power += s.power;
            r.violations += usize::from(s.violation);
            r.steps += 1;
            if global > warmup && buffer.len() >= batch {
                agent.update(buffer)?;
            }
        }
        let row = EpisodeRow {
            episode: ep + 1,
            reward: r.reward,
            mean_rate: r.rate / r.steps as f64,
            mean_power: r.power / r.steps as f64,
            violations: r.violations,
            env_steps: global,
            critic_updates: agent.critic_updates(),
            actor_updates: agent.actor_updates(),
        };
        let clock = start.elapsed().as_secs_f64() - eval_time;
        on_episode(&row, clock);
        record.episodes.push(row);
        record.wall_clock.push(clock);
        if schedule.eval_every > 0 && (ep + 1) % schedule.eval_every == 0 && schedule.eval_episodes > 0 {
            let t = Instant::now();
            let (mean_reward, mean_rate, mean_power) = evaluate(&mut eval_env, agent, schedule.eval_episodes, seed)?;
            record.evals.push(EvalRow {
                episode: ep + 1,
                mean_reward,
                mean_rate,
                mean_power,
            });
            eval_time += t.elapsed().as_secs_f64();
        }
    }
    Ok(record)
}
