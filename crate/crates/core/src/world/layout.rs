use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::WorldConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutKind {
    FourWay,
    ThreeWay,
}

impl LayoutKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayoutKind::FourWay => "four_way",
            LayoutKind::ThreeWay => "three_way",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            LayoutKind::FourWay => 0,
            LayoutKind::ThreeWay => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(LayoutKind::FourWay),
            1 => Some(LayoutKind::ThreeWay),
            _ => None,
        }
    }

    pub fn arms(self) -> &'static [Arm] {
        match self {
            LayoutKind::FourWay => &[Arm::North, Arm::East, Arm::South, Arm::West],
            LayoutKind::ThreeWay => &[Arm::North, Arm::East, Arm::West],
        }
    }
}

impl fmt::Display for LayoutKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayoutKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "four_way" => Ok(LayoutKind::FourWay),
            "three_way" => Ok(LayoutKind::ThreeWay),
            other => Err(Error::Config(format!("unknown layout kind {other:?}"))),
        }
    }
}

/// An approach arm, named by compass direction from the intersection centre.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    North,
    East,
    South,
    West,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::North, Arm::East, Arm::South, Arm::West];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Arm> {
        Arm::ALL.get(id as usize).copied()
    }

    /// Unit vector from the centre out along the arm.
    pub fn outward(self) -> [f64; 2] {
        match self {
            Arm::North => [0.0, 1.0],
            Arm::East => [1.0, 0.0],
            Arm::South => [0.0, -1.0],
            Arm::West => [-1.0, 0.0],
        }
    }

    /// Heading of a vehicle driving in from this arm.
    pub fn inbound_heading(self) -> f64 {
        match self {
            Arm::North => -FRAC_PI_2,
            Arm::East => -PI,
            Arm::South => FRAC_PI_2,
            Arm::West => 0.0,
        }
    }

    pub fn opposite(self) -> Arm {
        match self {
            Arm::North => Arm::South,
            Arm::East => Arm::West,
            Arm::South => Arm::North,
            Arm::West => Arm::East,
        }
    }

    /// The arm reached by turning left from this approach.
    pub fn left_of_approach(self) -> Arm {
        match self {
            Arm::West => Arm::North,
            Arm::North => Arm::East,
            Arm::East => Arm::South,
            Arm::South => Arm::West,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Arm::North => "N",
            Arm::East => "E",
            Arm::South => "S",
            Arm::West => "W",
        }
    }
}

/// Intersection geometry. Single-lane arms with right-hand traffic meet at a
/// square conflict box of side `2 * interior_half`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub kind: LayoutKind,
    pub arm_length: f64,
    pub lane_width: f64,
    pub interior_half: f64,
    arms: Vec<Arm>,
}

impl Layout {
    pub fn build(kind: LayoutKind, params: &WorldConfig) -> Result<Layout> {
        if !(params.arm_length > 0.0 && params.lane_width > 0.0) {
            return Err(Error::Config("arm_length and lane_width must be positive".into()));
        }
        if !(params.interior_half >= params.lane_width) {
            return Err(Error::Config("interior_half must be at least lane_width".into()));
        }
        Ok(Layout {
            kind,
            arm_length: params.arm_length,
            lane_width: params.lane_width,
            interior_half: params.interior_half,
            arms: kind.arms().to_vec(),
        })
    }

    pub fn arms(&self) -> &[Arm] {
        &self.arms
    }

    pub fn has_arm(&self, arm: Arm) -> bool {
        self.arms.contains(&arm)
    }

    /// Side length of the conflict box.
    pub fn interior_side(&self) -> f64 {
        2.0 * self.interior_half
    }

    pub fn in_interior(&self, x: f64, y: f64) -> bool {
        x.abs() <= self.interior_half && y.abs() <= self.interior_half
    }

    /// Centre of the inbound lane at `dist` metres from the interior edge.
    pub fn inbound_point(&self, arm: Arm, dist: f64) -> [f64; 2] {
        let u = arm.outward();
        let right = right_of([-u[0], -u[1]]);
        let r = self.interior_half + dist;
        let off = self.lane_width / 2.0;
        [u[0] * r + right[0] * off, u[1] * r + right[1] * off]
    }

    /// Centre of the outbound lane at `dist` metres from the interior edge.
    pub fn outbound_point(&self, arm: Arm, dist: f64) -> [f64; 2] {
        let u = arm.outward();
        let right = right_of(u);
        let r = self.interior_half + dist;
        let off = self.lane_width / 2.0;
        [u[0] * r + right[0] * off, u[1] * r + right[1] * off]
    }
}

/// Right-hand normal of a direction vector.
pub(crate) fn right_of(d: [f64; 2]) -> [f64; 2] {
    [d[1], -d[0]]
}
