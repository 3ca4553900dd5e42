//! BS -> UAV relay -> ground user scenario.
//!
//! The BS array lies on the x-axis centered at the origin, which is also the
//! south-west corner of the square service area `[0, side]^2`. The UAV flies
//! at a fixed altitude; the user is on the ground.

mod action;
pub mod channel;

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use action::{decode_action, table_entry, table_size, Action, ActionSpace, Motion, Move, PhysicalAction};
pub use channel::{
    free_space_gain, rayleigh_distance, spherical_channel, two_hop_rate, ula_positions, wrap_phase,
};

use crate::error::{Error, Result, Violation};

/// Minimum user distance from the BS as a fraction of the area side.
pub const USER_MIN_DISTANCE_FRACTION: f64 = 0.8;

/// Number of scalar features before the per-antenna block.
pub const GEOMETRY_FEATURES: usize = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub antennas: usize,
    pub wavelength: f64,
    pub area_side: f64,
    pub altitude: f64,
    pub p_bs_max: f64,
    pub p_uav_max: f64,
    pub noise_power: f64,
    pub horizon: usize,
    pub max_displacement: f64,
    pub w_rate: f64,
    pub w_power: f64,
    pub penalty: f64,
    pub action_space: ActionSpace,
    /// Levels per transmitter in the discrete table; level k is (k+1)/L of max.
    pub power_levels: usize,
    /// Restricts the UAV to a `g x g` lattice of pitch `max_displacement`
    /// centered on the area (small exact instances).
    pub grid_cells: Option<usize>,
    /// Pins the user instead of sampling it at reset.
    pub user_position: Option<[f64; 2]>,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            antennas: 64,
            wavelength: 0.01,
            area_side: 100.0,
            altitude: 50.0,
            p_bs_max: 1.0,
            p_uav_max: 0.5,
            noise_power: 1e-12,
            horizon: 100,
            max_displacement: 5.0,
            w_rate: 1.0,
            w_power: 0.3,
            penalty: 5.0,
            action_space: ActionSpace::Continuous,
            power_levels: 3,
            grid_cells: None,
            user_position: None,
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn spacing(&self) -> f64 {
        self.wavelength / 2.0
    }

    pub fn aperture(&self) -> f64 {
        (self.antennas.saturating_sub(1)) as f64 * self.spacing()
    }

    pub fn obs_dim(&self) -> usize {
        2 * self.antennas + GEOMETRY_FEATURES
    }

    pub fn center(&self) -> [f64; 2] {
        [self.area_side / 2.0, self.area_side / 2.0]
    }

    /// Collects every violated invariant, paths prefixed by `at`.
    pub fn violations(&self, at: &str) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut bad = |field: &str, message: String| {
            out.push(Violation {
                path: format!("{at}/{field}"),
                message,
            })
        };
        for (field, v) in [
            ("wavelength", self.wavelength),
            ("area_side", self.area_side),
            ("altitude", self.altitude),
            ("p_bs_max", self.p_bs_max),
            ("p_uav_max", self.p_uav_max),
            ("noise_power", self.noise_power),
            ("max_displacement", self.max_displacement),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                bad(field, format!("must be a positive finite number, got {v}"));
            }
        }
        for (field, v) in [("w_rate", self.w_rate), ("w_power", self.w_power), ("penalty", self.penalty)] {
            if !(v >= 0.0 && v.is_finite()) {
                bad(field, format!("must be nonnegative and finite, got {v}"));
            }
        }
        if self.antennas == 0 {
            bad("antennas", "must be at least 1".into());
        }
        if self.horizon == 0 {
            bad("horizon", "must be at least 1".into());
        }
        if self.power_levels == 0 {
            bad("power_levels", "must be at least 1".into());
        }
        if let Some(g) = self.grid_cells {
            if g == 0 || g % 2 == 0 {
                bad("grid_cells", format!("must be odd and positive, got {g}"));
            } else if (g / 2) as f64 * self.max_displacement > self.area_side / 2.0 {
                bad("grid_cells", "lattice does not fit inside the area".into());
            }
            if self.action_space == ActionSpace::Continuous {
                bad("grid_cells", "lattice mode needs the discrete or hybrid action space".into());
            }
        }
        if let Some([x, y]) = self.user_position {
            let inside = (0.0..=self.area_side).contains(&x) && (0.0..=self.area_side).contains(&y);
            if !inside {
                bad("user_position", "outside the service area".into());
            } else if x.hypot(y) < USER_MIN_DISTANCE_FRACTION * self.area_side {
                bad(
                    "user_position",
                    format!("closer than {USER_MIN_DISTANCE_FRACTION} x side to the BS"),
                );
            }
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

    pub fn discrete_actions(&self) -> usize {
        table_size(self.power_levels)
    }
}

/// `w_rate * rate - w_power * normalized power - penalty * [violation]`.
pub fn reward(rate: f64, p_bs: f64, p_uav: f64, violation: bool, config: &EnvConfig) -> f64 {
    let power = (p_bs + p_uav) / (config.p_bs_max + config.p_uav_max);
    let penalty = if violation { config.penalty } else { 0.0 };
    config.w_rate * rate - config.w_power * power - penalty
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub uav: [f64; 2],
    /// Lattice coordinates in grid mode.
    pub cell: Option<[usize; 2]>,
    pub user: [f64; 2],
    pub p_bs: f64,
    pub p_uav: f64,
    pub magnitudes: Vec<f64>,
    /// Absolute channel phases in (-pi, pi].
    pub phases: Vec<f64>,
    pub step: usize,
}

impl WorldState {
    /// `[uav x, uav y, user x, user y, p_bs, p_uav, t]` scaled to [0, 1],
    /// then N magnitudes as `altitude / r_n`, then N inter-element phase
    /// increments over pi (first entry 0).
    pub fn observation(&self, config: &EnvConfig) -> Vec<f64> {
        let s = config.area_side;
        let mut obs = Vec::with_capacity(config.obs_dim());
        obs.extend_from_slice(&[
            self.uav[0] / s,
            self.uav[1] / s,
            self.user[0] / s,
            self.user[1] / s,
            self.p_bs / config.p_bs_max,
            self.p_uav / config.p_uav_max,
            self.step as f64 / config.horizon as f64,
        ]);
        let to_ratio = 4.0 * std::f64::consts::PI * config.altitude / config.wavelength;
        obs.extend(self.magnitudes.iter().map(|m| m * to_ratio));
        obs.push(0.0);
        obs.extend(
            self.phases
                .windows(2)
                .map(|w| wrap_phase(w[1] - w[0]) / std::f64::consts::PI),
        );
        obs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub state: WorldState,
    pub reward: f64,
    pub rate: f64,
    pub power: f64,
    pub violation: bool,
    pub done: bool,
}

/// Geometry of one transition, shared by the simulator and the exact solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outcome {
    pub uav: [f64; 2],
    pub cell: Option<[usize; 2]>,
    pub rate: f64,
    pub reward: f64,
    pub violation: bool,
    pub p_bs: f64,
    pub p_uav: f64,
}

pub fn lattice_position(config: &EnvConfig, cell: [usize; 2]) -> [f64; 2] {
    let g = config.grid_cells.unwrap_or(1);
    let c = config.center();
    let half = (g / 2) as f64;
    [
        c[0] + (cell[0] as f64 - half) * config.max_displacement,
        c[1] + (cell[1] as f64 - half) * config.max_displacement,
    ]
}

/// Physics of one step: moves the UAV (clamping with a violation flag),
/// evaluates the relay rate at the new position and the reward.
pub fn transition(
    config: &EnvConfig,
    elements: &[[f64; 3]],
    uav: [f64; 2],
    cell: Option<[usize; 2]>,
    user: [f64; 2],
    action: &Action,
) -> Result<Outcome> {
    let phys = decode_action(config, action)?;
    let side = config.area_side;
    let (next, next_cell, move_bad) = match (phys.motion, cell, config.grid_cells) {
        (Motion::Step(mv), Some([i, j]), Some(g)) => {
            let [dx, dy] = mv.direction();
            let ni = i as i64 + dx;
            let nj = j as i64 + dy;
            if ni < 0 || nj < 0 || ni >= g as i64 || nj >= g as i64 {
                (uav, Some([i, j]), true)
            } else {
                let c = [ni as usize, nj as usize];
                (lattice_position(config, c), Some(c), false)
            }
        }
        (Motion::Displace(_), Some(_), _) | (_, Some(_), None) | (_, None, Some(_)) => {
            return Err(Error::Usage("lattice state and action space disagree".into()))
        }
        (motion, None, None) => {
            let d = match motion {
                Motion::Displace(d) => d,
                Motion::Step(mv) => {
                    let [dx, dy] = mv.direction();
                    [dx as f64 * config.max_displacement, dy as f64 * config.max_displacement]
                }
            };
            let raw = [uav[0] + d[0], uav[1] + d[1]];
            let clamped = [raw[0].clamp(0.0, side), raw[1].clamp(0.0, side)];
            (clamped, None, clamped != raw)
        }
    };
    let violation = move_bad || phys.power_violation;
    let uav3 = [next[0], next[1], config.altitude];
    let h = spherical_channel(elements, config.wavelength, uav3)?;
    let g = free_space_gain(config.wavelength, uav3, [user[0], user[1], 0.0])?;
    let rate = two_hop_rate(&h, g, phys.p_bs, phys.p_uav, config.noise_power)?;
    Ok(Outcome {
        uav: next,
        cell: next_cell,
        rate,
        reward: reward(rate, phys.p_bs, phys.p_uav, violation, config),
        violation,
        p_bs: phys.p_bs,
        p_uav: phys.p_uav,
    })
}

/// Seeded user position at least `0.8 * side` from the BS.
pub fn sample_user(config: &EnvConfig, rng: &mut ChaCha8Rng) -> [f64; 2] {
    let s = config.area_side;
    loop {
        let p = [rng.random_range(0.0..s), rng.random_range(0.0..s)];
        if p[0].hypot(p[1]) >= USER_MIN_DISTANCE_FRACTION * s {
            return p;
        }
    }
}

#[derive(Debug, Clone)]
pub struct UavRelayEnv {
    config: EnvConfig,
    elements: Vec<[f64; 3]>,
    state: WorldState,
    done: bool,
}

impl UavRelayEnv {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        let elements = ula_positions(config.antennas, config.spacing());
        let seed = config.seed;
        let mut env = Self {
            state: WorldState {
                uav: config.center(),
                cell: None,
                user: [0.0, 0.0],
                p_bs: 0.0,
                p_uav: 0.0,
                magnitudes: Vec::new(),
                phases: Vec::new(),
                step: 0,
            },
            config,
            elements,
            done: false,
        };
        env.reset(seed)?;
        Ok(env)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn elements(&self) -> &[[f64; 3]] {
        &self.elements
    }

    pub fn state(&self) -> &WorldState {
        &self.state
    }

    pub fn observation(&self) -> Vec<f64> {
        self.state.observation(&self.config)
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// True when the UAV is inside the array's Rayleigh distance.
    pub fn uav_in_near_field(&self) -> bool {
        let r = channel::distance([0.0; 3], [self.state.uav[0], self.state.uav[1], self.config.altitude]);
        rayleigh_distance(self.config.aperture(), self.config.wavelength).is_ok_and(|rd| r <= rd)
    }

    fn channel_features(&self, uav: [f64; 2]) -> Result<(Vec<f64>, Vec<f64>)> {
        let h = spherical_channel(&self.elements, self.config.wavelength, [uav[0], uav[1], self.config.altitude])?;
        Ok((h.iter().map(|c| c.norm()).collect(), h.iter().map(|c| wrap_phase(c.arg())).collect()))
    }

    pub fn reset(&mut self, seed: u64) -> Result<&WorldState> {
        let user = match self.config.user_position {
            Some(p) => p,
            None => sample_user(&self.config, &mut ChaCha8Rng::seed_from_u64(seed)),
        };
        let (uav, cell) = match self.config.grid_cells {
            Some(g) => {
                let c = [g / 2, g / 2];
                (lattice_position(&self.config, c), Some(c))
            }
            None => (self.config.center(), None),
        };
        let (magnitudes, phases) = self.channel_features(uav)?;
        self.state = WorldState {
            uav,
            cell,
            user,
            p_bs: 0.0,
            p_uav: 0.0,
            magnitudes,
            phases,
            step: 0,
        };
        self.done = false;
        Ok(&self.state)
    }

    pub fn step(&mut self, action: &Action) -> Result<StepResult> {
        if self.done {
            return Err(Error::Usage("episode already finished; call reset".into()));
        }
        if action.space() != self.config.action_space {
            return Err(Error::Usage(format!(
                "{} action in a {} environment",
                action.space(),
                self.config.action_space
            )));
        }
        let s = &self.state;
        let out = transition(&self.config, &self.elements, s.uav, s.cell, s.user, action)?;
        let (magnitudes, phases) = self.channel_features(out.uav)?;
        self.state = WorldState {
            uav: out.uav,
            cell: out.cell,
            user: self.state.user,
            p_bs: out.p_bs,
            p_uav: out.p_uav,
            magnitudes,
            phases,
            step: self.state.step + 1,
        };
        self.done = self.state.step >= self.config.horizon;
        Ok(StepResult {
            state: self.state.clone(),
            reward: out.reward,
            rate: out.rate,
            power: out.p_bs + out.p_uav,
            violation: out.violation,
            done: self.done,
        })
    }
}

/// Appends step results as JSON lines.
pub fn write_trace<W: Write>(out: &mut W, steps: &[StepResult]) -> Result<()> {
    for s in steps {
        serde_json::to_writer(&mut *out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EnvConfig {
        EnvConfig {
            antennas: 8,
            horizon: 5,
            ..EnvConfig::default()
        }
    }

    #[test]
    fn reward_examples() {
        let c = EnvConfig::default();
        assert_eq!(reward(0.0, 0.0, 0.0, false, &c), 0.0);
        let full = reward(2.0, c.p_bs_max, c.p_uav_max, false, &c);
        assert!((full - 1.7).abs() < 1e-12);
        let pen = reward(2.0, c.p_bs_max, c.p_uav_max, true, &c);
        assert!((pen + 3.3).abs() < 1e-12);
    }

    #[test]
    fn reset_is_seeded() {
        let mut a = UavRelayEnv::new(small()).unwrap();
        let mut b = UavRelayEnv::new(small()).unwrap();
        assert_eq!(a.reset(11).unwrap(), b.reset(11).unwrap());
        assert_eq!(a.state().step, 0);
        assert_eq!(a.state().uav, [50.0, 50.0]);
        let other = b.reset(12).unwrap().user;
        assert_ne!(a.state().user, other);
    }

    #[test]
    fn observation_layout() {
        let env = UavRelayEnv::new(small()).unwrap();
        let obs = env.observation();
        assert_eq!(obs.len(), 2 * 8 + 7);
        assert!(obs.iter().all(|v| v.is_finite()));
        assert_eq!(obs[7 + 8], 0.0);
        for m in &obs[7..15] {
            assert!(*m > 0.0 && *m <= 1.0);
        }
    }

    #[test]
    fn episode_terminates_at_horizon() {
        let mut env = UavRelayEnv::new(small()).unwrap();
        let a = Action::Continuous { values: [0.1, 0.0, 0.0, 0.0] };
        for t in 1..=5 {
            let r = env.step(&a).unwrap();
            assert_eq!(r.done, t == 5);
            assert_eq!(r.state.step, t);
        }
        assert!(matches!(env.step(&a), Err(Error::Usage(_))));
    }

    #[test]
    fn wrong_space_is_rejected() {
        let mut env = UavRelayEnv::new(small()).unwrap();
        assert!(env.step(&Action::Discrete { index: 0 }).is_err());
    }

    #[test]
    fn stay_keeps_rate() {
        let mut env = UavRelayEnv::new(small()).unwrap();
        let a = Action::Continuous { values: [0.0, 0.0, 0.4, 0.2] };
        let r1 = env.step(&a).unwrap();
        let r2 = env.step(&a).unwrap();
        assert_eq!(r1.rate.to_bits(), r2.rate.to_bits());
        assert_eq!(r1.state.magnitudes, r2.state.magnitudes);
    }

    #[test]
    fn leaving_the_area_is_clamped_and_penalized() {
        let mut cfg = small();
        cfg.max_displacement = 60.0;
        let mut env = UavRelayEnv::new(cfg).unwrap();
        let r = env.step(&Action::Continuous { values: [1.0, 0.0, 0.0, 0.0] }).unwrap();
        assert!(r.violation);
        assert_eq!(r.state.uav, [100.0, 50.0]);
    }

    #[test]
    fn lattice_edges_block_moves() {
        let cfg = EnvConfig {
            antennas: 4,
            grid_cells: Some(3),
            action_space: ActionSpace::Discrete,
            power_levels: 2,
            ..EnvConfig::default()
        };
        let mut env = UavRelayEnv::new(cfg).unwrap();
        // east twice: second move leaves the lattice
        let east = Move::East.index() * 4;
        assert!(!env.step(&Action::Discrete { index: east }).unwrap().violation);
        let r = env.step(&Action::Discrete { index: east }).unwrap();
        assert!(r.violation);
        assert_eq!(r.state.cell, Some([2, 1]));
        assert_eq!(r.state.uav, [55.0, 50.0]);
    }

    #[test]
    fn config_violations_are_collected() {
        let cfg = EnvConfig {
            antennas: 0,
            wavelength: -1.0,
            horizon: 0,
            ..EnvConfig::default()
        };
        let v = cfg.violations("/env");
        let paths: Vec<_> = v.iter().map(|v| v.path.as_str()).collect();
        assert!(paths.contains(&"/env/antennas"));
        assert!(paths.contains(&"/env/wavelength"));
        assert!(paths.contains(&"/env/horizon"));
    }

    #[test]
    fn trace_is_jsonl() {
        let mut env = UavRelayEnv::new(small()).unwrap();
        let a = Action::Continuous { values: [0.0; 4] };
        let steps = vec![env.step(&a).unwrap(), env.step(&a).unwrap()];
        let mut buf = Vec::new();
        write_trace(&mut buf, &steps).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        let back: StepResult = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(back, steps[0]);
    }
}
