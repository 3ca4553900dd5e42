//! Exact baselines: backward induction on the lattice instance and
//! exhaustive one-step search.

use std::io::Write;
use std::path::Path;

use crate::env::{transition, ula_positions, Action, ActionSpace, EnvConfig, UavRelayEnv, WorldState};
use crate::error::{Error, Result};
use crate::par::map_range;

pub const MAX_GRID: usize = 5;
pub const MAX_LEVELS: usize = 3;
pub const MAX_HORIZON: usize = 20;
pub const MAX_RESOLUTION: usize = 21;

/// Deterministic finite-horizon MDP over lattice cells. Dynamics do not
/// depend on the step index, so one transition table serves every t.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    pub grid: usize,
    pub actions: usize,
    pub horizon: usize,
    pub start: usize,
    /// `[cell * actions + a]`
    pub next: Vec<usize>,
    pub rewards: Vec<f64>,
}

impl TabularMdp {
    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    pub fn cell_index(&self, c: [usize; 2]) -> usize {
        c[0] * self.grid + c[1]
    }

    pub fn cell_coords(&self, s: usize) -> [usize; 2] {
        [s / self.grid, s % self.grid]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[s * self.actions + a]
    }

    pub fn successor(&self, s: usize, a: usize) -> usize {
        self.next[s * self.actions + a]
    }
}

fn tiny_violations(config: &EnvConfig) -> Vec<String> {
    let mut v = Vec::new();
    if config.action_space != ActionSpace::Discrete {
        v.push("action_space must be discrete".to_string());
    }
    match config.grid_cells {
        Some(g) if (1..=MAX_GRID).contains(&g) => {}
        Some(g) => v.push(format!("grid_cells {g} exceeds {MAX_GRID}")),
        None => v.push("grid_cells must be set".to_string()),
    }
    if config.power_levels > MAX_LEVELS {
        v.push(format!("power_levels {} exceeds {MAX_LEVELS}", config.power_levels));
    }
    if config.horizon > MAX_HORIZON {
        v.push(format!("horizon {} exceeds {MAX_HORIZON}", config.horizon));
    }
    if config.user_position.is_none() {
        v.push("user_position must be pinned".to_string());
    }
    v
}

/// Enumerates the lattice instance through the simulator's own transition.
pub fn build_tabular_mdp(config: &EnvConfig) -> Result<TabularMdp> {
    let bad = tiny_violations(config);
    if !bad.is_empty() {
        return Err(Error::Config(format!("not a tabular instance: {}", bad.join("; "))));
    }
    config.validate()?;
    let grid = config.grid_cells.expect("checked");
    let user = config.user_position.expect("checked");
    let actions = config.discrete_actions();
    let elements = ula_positions(config.antennas, config.spacing());
    let env = UavRelayEnv::new(config.clone())?;
    let start_cell = env.state().cell.expect("lattice mode");
    let cells = grid * grid;
    let rows = map_range(cells, |s| -> Result<Vec<(usize, f64)>> {
        let c = [s / grid, s % grid];
        let pos = crate::env::lattice_position(config, c);
        (0..actions)
            .map(|a| {
                let o = transition(config, &elements, pos, Some(c), user, &Action::Discrete { index: a })?;
                let nc = o.cell.expect("lattice mode");
                Ok((nc[0] * grid + nc[1], o.reward))
            })
            .collect()
    });
    let mut next = Vec::with_capacity(cells * actions);
    let mut rewards = Vec::with_capacity(cells * actions);
    for row in rows {
        for (n, r) in row? {
            next.push(n);
            rewards.push(r);
        }
    }
    Ok(TabularMdp {
        grid,
        actions,
        horizon: config.horizon,
        start: start_cell[0] * grid + start_cell[1],
        next,
        rewards,
    })
}

/// Optimal values indexed by steps remaining.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    pub cells: usize,
    pub horizon: usize,
    /// `[remaining * cells + s]`, remaining in `0..=horizon`
    pub values: Vec<f64>,
    /// `[(remaining - 1) * cells + s]`, remaining in `1..=horizon`
    pub greedy: Vec<usize>,
}

impl ValueTable {
    pub fn value(&self, s: usize, remaining: usize) -> f64 {
        self.values[remaining * self.cells + s]
    }

    pub fn greedy_action(&self, s: usize, remaining: usize) -> Option<usize> {
        (remaining > 0).then(|| self.greedy[(remaining - 1) * self.cells + s])
    }

    /// Largest `|V_k(s) - max_a [r + V_{k-1}(s')]|` over all entries.
    pub fn bellman_residual(&self, mdp: &TabularMdp) -> f64 {
        let mut worst: f64 = 0.0;
        for s in 0..self.cells {
            worst = worst.max(self.value(s, 0).abs());
        }
        for k in 1..=self.horizon {
            for s in 0..self.cells {
                let best = (0..mdp.actions)
                    .map(|a| mdp.reward(s, a) + self.value(mdp.successor(s, a), k - 1))
                    .fold(f64::NEG_INFINITY, f64::max);
                worst = worst.max((self.value(s, k) - best).abs());
            }
        }
        worst
    }

    /// CSV with columns `state,t,value,greedy_action`; t is the step index,
    /// the terminal row has an empty action.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "state,t,value,greedy_action")?;
        for t in 0..=self.horizon {
            let remaining = self.horizon - t;
            for s in 0..self.cells {
                let a = self.greedy_action(s, remaining).map(|a| a.to_string()).unwrap_or_default();
                writeln!(f, "{s},{t},{},{a}", self.value(s, remaining))?;
            }
        }
        f.flush()?;
        Ok(())
    }
}

/// Backward induction; ties go to the lowest action index.
pub fn value_iteration(mdp: &TabularMdp) -> ValueTable {
    let cells = mdp.cells();
    let mut values = vec![0.0; cells];
    let mut greedy = Vec::with_capacity(cells * mdp.horizon);
    for k in 1..=mdp.horizon {
        let prev = &values[(k - 1) * cells..k * cells];
        let layer = map_range(cells, |s| {
            let mut best = (f64::NEG_INFINITY, 0);
            for a in 0..mdp.actions {
                let q = mdp.reward(s, a) + prev[mdp.successor(s, a)];
                if q > best.0 {
                    best = (q, a);
                }
            }
            best
        });
        values.extend(layer.iter().map(|b| b.0));
        greedy.extend(layer.iter().map(|b| b.1));
    }
    ValueTable {
        cells,
        horizon: mdp.horizon,
        values,
        greedy,
    }
}

/// Return of the greedy policy simulated in the environment from reset.
pub fn greedy_rollout(config: &EnvConfig, mdp: &TabularMdp, table: &ValueTable) -> Result<f64> {
    let mut env = UavRelayEnv::new(config.clone())?;
    env.reset(config.seed)?;
    let mut total = 0.0;
    let mut t = 0;
    while !env.is_done() {
        let s = mdp.cell_index(env.state().cell.expect("lattice mode"));
        let a = table.greedy_action(s, mdp.horizon - t).expect("steps remain");
        total += env.step(&Action::Discrete { index: a })?.reward;
        t += 1;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OneStep {
    pub action: Action,
    pub reward: f64,
}

/// Immediate-reward maximizer over a grid of the configured action space:
/// `resolution` points per continuous dimension spanning [-1, 1], the full
/// table for discrete actions.
pub fn exhaustive_one_step(config: &EnvConfig, state: &WorldState, resolution: usize) -> Result<OneStep> {
    if !(2..=MAX_RESOLUTION).contains(&resolution) {
        return Err(Error::Config(format!("resolution must lie in 2..={MAX_RESOLUTION}, got {resolution}")));
    }
    let elements = ula_positions(config.antennas, config.spacing());
    let r = resolution;
    let level = |i: usize| -1.0 + 2.0 * i as f64 / (r - 1) as f64;
    let candidates: Vec<Action> = match config.action_space {
        ActionSpace::Discrete => (0..config.discrete_actions()).map(|index| Action::Discrete { index }).collect(),
        ActionSpace::Hybrid => (0..5 * r * r)
            .map(|i| Action::Hybrid {
                move_index: i / (r * r),
                p_bs: level(i / r % r),
                p_uav: level(i % r),
            })
            .collect(),
        ActionSpace::Continuous => (0..r * r * r * r)
            .map(|i| Action::Continuous {
                values: [level(i / (r * r * r)), level(i / (r * r) % r), level(i / r % r), level(i % r)],
            })
            .collect(),
    };
    let rewards = map_range(candidates.len(), |i| {
        transition(config, &elements, state.uav, state.cell, state.user, &candidates[i]).map(|o| o.reward)
    });
    let mut best: Option<(f64, usize)> = None;
    for (i, v) in rewards.into_iter().enumerate() {
        let v = v?;
        if best.is_none_or(|b| v > b.0) {
            best = Some((v, i));
        }
    }
    let (reward, i) = best.expect("nonempty candidate set");
    Ok(OneStep {
        action: candidates[i].clone(),
        reward,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> EnvConfig {
        EnvConfig {
            antennas: 8,
            action_space: ActionSpace::Discrete,
            power_levels: 2,
            grid_cells: Some(3),
            horizon: 10,
            user_position: Some([90.0, 60.0]),
            ..EnvConfig::default()
        }
    }

    #[test]
    fn counts_and_valid_targets() {
        let mdp = build_tabular_mdp(&tiny()).unwrap();
        assert_eq!(mdp.cells(), 9);
        assert_eq!(mdp.actions, 20);
        assert!(mdp.next.iter().all(|&n| n < 9));
    }

    #[test]
    fn rejects_oversized() {
        for c in [
            EnvConfig { grid_cells: Some(6), ..tiny() },
            EnvConfig { horizon: 21, ..tiny() },
            EnvConfig { power_levels: 4, ..tiny() },
            EnvConfig { user_position: None, ..tiny() },
        ] {
            assert!(matches!(build_tabular_mdp(&c), Err(Error::Config(_))));
        }
    }

    #[test]
    fn horizon_zero_is_all_zero() {
        let mut mdp = build_tabular_mdp(&tiny()).unwrap();
        mdp.horizon = 0;
        let v = value_iteration(&mdp);
        assert!(v.values.iter().all(|&x| x == 0.0));
        assert_eq!(v.greedy_action(0, 0), None);
    }

    #[test]
    fn two_state_chain() {
        let mdp = TabularMdp {
            grid: 1,
            actions: 1,
            horizon: 2,
            start: 0,
            next: vec![0],
            rewards: vec![1.0],
        };
        let v = value_iteration(&mdp);
        assert_eq!(v.value(0, 2), 2.0);
        let zero = TabularMdp { rewards: vec![0.0], ..mdp };
        assert_eq!(value_iteration(&zero).value(0, 2), 0.0);
    }

    #[test]
    fn exhaustive_rejects_bad_resolution() {
        let env = UavRelayEnv::new(EnvConfig::default()).unwrap();
        assert!(exhaustive_one_step(env.config(), env.state(), 1).is_err());
        assert!(exhaustive_one_step(env.config(), env.state(), 22).is_err());
    }
}
