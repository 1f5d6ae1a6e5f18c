use std::f64::consts::{FRAC_PI_2, PI, TAU};

use super::layout::{Arm, Layout};
use crate::error::{Error, Result};

/// Wrap an angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    (a + PI).rem_euclid(TAU) - PI
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Turn {
    Straight,
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Piece {
    Line { start: [f64; 2], heading: f64, length: f64 },
    /// `sense` is +1 for counter-clockwise (left) and -1 for clockwise.
    Arc { center: [f64; 2], radius: f64, start_angle: f64, sense: f64, length: f64 },
}

impl Piece {
    pub fn length(&self) -> f64 {
        match *self {
            Piece::Line { length, .. } | Piece::Arc { length, .. } => length,
        }
    }

    fn pose_at(&self, s: f64) -> Pose {
        match *self {
            Piece::Line { start, heading, .. } => Pose {
                x: start[0] + s * heading.cos(),
                y: start[1] + s * heading.sin(),
                psi: wrap_angle(heading),
            },
            Piece::Arc { center, radius, start_angle, sense, .. } => {
                let theta = start_angle + sense * s / radius;
                Pose {
                    x: center[0] + radius * theta.cos(),
                    y: center[1] + radius * theta.sin(),
                    psi: wrap_angle(theta + sense * FRAC_PI_2),
                }
            }
        }
    }
}

/// A fixed route from an approach arm to a destination arm, parameterised by
/// arc length: inbound straight, an interior piece (straight or a quarter
/// circle tangent to both lane centrelines), outbound straight.
#[derive(Clone, Debug, PartialEq)]
pub struct PathSpec {
    pub approach: Arm,
    pub destination: Arm,
    pub turn: Turn,
    pieces: Vec<Piece>,
    offsets: Vec<f64>,
    total_length: f64,
    /// Arc position where the path enters the conflict box.
    interior_entry: f64,
    /// Arc position where the path leaves the conflict box.
    interior_exit: f64,
}

impl PathSpec {
    pub fn pieces(&self) -> &[Piece] {
        &self.pieces
    }

    pub fn total_length(&self) -> f64 {
        self.total_length
    }

    pub fn interior_entry(&self) -> f64 {
        self.interior_entry
    }

    pub fn interior_exit(&self) -> f64 {
        self.interior_exit
    }

    /// Pose at `arc_pos` metres along the path.
    pub fn pose(&self, arc_pos: f64) -> Result<Pose> {
        if !(0.0..=self.total_length).contains(&arc_pos) {
            return Err(Error::InvalidInput(format!(
                "arc position {arc_pos} outside [0, {}]",
                self.total_length
            )));
        }
        Ok(self.pose_clamped(arc_pos))
    }

    /// Pose with `arc_pos` clamped into the valid range.
    pub fn pose_clamped(&self, arc_pos: f64) -> Pose {
        let s = arc_pos.clamp(0.0, self.total_length);
        let idx = self.offsets.iter().rposition(|&o| o <= s).unwrap_or(0);
        self.pieces[idx].pose_at(s - self.offsets[idx])
    }

    pub fn start_pose(&self) -> Pose {
        self.pose_clamped(0.0)
    }

    pub fn end_pose(&self) -> Pose {
        self.pose_clamped(self.total_length)
    }
}

pub fn make_path(layout: &Layout, approach: Arm, destination: Arm) -> Result<PathSpec> {
    if approach == destination {
        return Err(Error::Path(format!("approach and destination are both {approach:?}")));
    }
    for arm in [approach, destination] {
        if !layout.has_arm(arm) {
            return Err(Error::Path(format!("{arm:?} arm absent from {} layout", layout.kind)));
        }
    }

    let arm_len = layout.arm_length;
    let in_heading = approach.inbound_heading();
    let in_start = layout.inbound_point(approach, arm_len);
    let in_end = layout.inbound_point(approach, 0.0);
    let out_start = layout.outbound_point(destination, 0.0);

    let turn = if destination == approach.opposite() {
        Turn::Straight
    } else if destination == approach.left_of_approach() {
        Turn::Left
    } else {
        Turn::Right
    };

    let mut pieces = vec![Piece::Line { start: in_start, heading: in_heading, length: arm_len }];
    match turn {
        Turn::Straight => pieces.push(Piece::Line {
            start: in_end,
            heading: in_heading,
            length: 2.0 * layout.interior_half,
        }),
        Turn::Left | Turn::Right => {
            let (sense, radius) = if turn == Turn::Left {
                (1.0, layout.interior_half + layout.lane_width / 2.0)
            } else {
                (-1.0, layout.interior_half - layout.lane_width / 2.0)
            };
            // Centre sits on the turning side of the inbound lane end.
            let normal_angle = in_heading + sense * FRAC_PI_2;
            let center = [
                in_end[0] + radius * normal_angle.cos(),
                in_end[1] + radius * normal_angle.sin(),
            ];
            let start_angle = normal_angle + PI;
            pieces.push(Piece::Arc { center, radius, start_angle, sense, length: radius * FRAC_PI_2 });
        }
    }
    let out_heading = wrap_angle(Arm::inbound_heading(destination) + PI);
    pieces.push(Piece::Line { start: out_start, heading: out_heading, length: arm_len });

    let mut offsets = Vec::with_capacity(pieces.len());
    let mut acc = 0.0;
    for p in &pieces {
        offsets.push(acc);
        acc += p.length();
    }
    let interior_entry = offsets[1];
    let interior_exit = offsets[2];
    Ok(PathSpec {
        approach,
        destination,
        turn,
        pieces,
        offsets,
        total_length: acc,
        interior_entry,
        interior_exit,
    })
}
