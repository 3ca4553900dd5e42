use serde::{Deserialize, Serialize};

use super::EnvConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ActionSpace {
    #[default]
    Continuous,
    Discrete,
    Hybrid,
}

impl ActionSpace {
    pub const ALL: [ActionSpace; 3] = [ActionSpace::Continuous, ActionSpace::Discrete, ActionSpace::Hybrid];

    pub fn name(self) -> &'static str {
        match self {
            ActionSpace::Continuous => "continuous",
            ActionSpace::Discrete => "discrete",
            ActionSpace::Hybrid => "hybrid",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "continuous" => Ok(ActionSpace::Continuous),
            "discrete" => Ok(ActionSpace::Discrete),
            "hybrid" => Ok(ActionSpace::Hybrid),
            other => Err(Error::Config(format!("unknown action space {other:?}"))),
        }
    }
}

impl std::fmt::Display for ActionSpace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Way-point moves. North is +y, east is +x.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Move {
    Stay,
    North,
    South,
    East,
    West,
}

impl Move {
    pub const COUNT: usize = 5;
    pub const ALL: [Move; 5] = [Move::Stay, Move::North, Move::South, Move::East, Move::West];

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Usage(format!("move index {i} out of range 0..5")))
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn direction(self) -> [i64; 2] {
        match self {
            Move::Stay => [0, 0],
            Move::North => [0, 1],
            Move::South => [0, -1],
            Move::East => [1, 0],
            Move::West => [-1, 0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Action {
    /// (dx, dy, p_bs, p_uav), each nominally in [-1, 1].
    Continuous { values: [f64; 4] },
    Discrete { index: usize },
    Hybrid { move_index: usize, p_bs: f64, p_uav: f64 },
}

impl Action {
    pub fn space(&self) -> ActionSpace {
        match self {
            Action::Continuous { .. } => ActionSpace::Continuous,
            Action::Discrete { .. } => ActionSpace::Discrete,
            Action::Hybrid { .. } => ActionSpace::Hybrid,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Motion {
    Displace([f64; 2]),
    Step(Move),
}

/// Decoded action in physical units. `power_violation` is set when a
/// requested power fell outside `[0, max]` before clamping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicalAction {
    pub motion: Motion,
    pub p_bs: f64,
    pub p_uav: f64,
    pub power_violation: bool,
}

/// Entry `index` of the discrete table: `(move, bs level, uav level)`, with
/// `index = move * L^2 + bs * L + uav`.
pub fn table_entry(levels: usize, index: usize) -> Result<(Move, usize, usize)> {
    let size = Move::COUNT * levels * levels;
    if index >= size {
        return Err(Error::Usage(format!("discrete index {index} out of range 0..{size}")));
    }
    let mv = Move::from_index(index / (levels * levels))?;
    let rest = index % (levels * levels);
    Ok((mv, rest / levels, rest % levels))
}

pub fn table_size(levels: usize) -> usize {
    Move::COUNT * levels * levels
}

fn level_power(level: usize, levels: usize, max: f64) -> f64 {
    (level + 1) as f64 / levels as f64 * max
}

fn affine_power(raw: f64, max: f64) -> (f64, bool) {
    let p = (raw + 1.0) / 2.0 * max;
    let bad = !(0.0..=max).contains(&p);
    (p.clamp(0.0, max), bad)
}

pub fn decode_action(config: &EnvConfig, action: &Action) -> Result<PhysicalAction> {
    match *action {
        Action::Continuous { values } => {
            if values.iter().any(|v| v.is_nan()) {
                return Err(Error::Usage("NaN in continuous action".into()));
            }
            let step = config.max_displacement;
            let (p_bs, v1) = affine_power(values[2], config.p_bs_max);
            let (p_uav, v2) = affine_power(values[3], config.p_uav_max);
            let dx = values[0].clamp(-1.0, 1.0) * step;
            let dy = values[1].clamp(-1.0, 1.0) * step;
            let move_bad = values[0].abs() > 1.0 || values[1].abs() > 1.0;
            Ok(PhysicalAction {
                motion: Motion::Displace([dx, dy]),
                p_bs,
                p_uav,
                power_violation: v1 || v2 || move_bad,
            })
        }
        Action::Discrete { index } => {
            let l = config.power_levels;
            let (mv, b, u) = table_entry(l, index)?;
            Ok(PhysicalAction {
                motion: Motion::Step(mv),
                p_bs: level_power(b, l, config.p_bs_max),
                p_uav: level_power(u, l, config.p_uav_max),
                power_violation: false,
            })
        }
        Action::Hybrid { move_index, p_bs, p_uav } => {
            let mv = Move::from_index(move_index)?;
            if p_bs.is_nan() || p_uav.is_nan() {
                return Err(Error::Usage("NaN in hybrid action".into()));
            }
            let (p_bs, v1) = affine_power(p_bs, config.p_bs_max);
            let (p_uav, v2) = affine_power(p_uav, config.p_uav_max);
            Ok(PhysicalAction {
                motion: Motion::Step(mv),
                p_bs,
                p_uav,
                power_violation: v1 || v2,
            })
        }
    }
}
