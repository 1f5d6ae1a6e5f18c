//! Exhaustive crossing-order scheduler used as an optimal baseline.
//!
//! Every vehicle drives at `v_max` up to a hold point just short of the
//! conflict box, waits there for its release tick, then crosses at `v_max`.
//! Only the released part of each trajectory is checked for overlap, which
//! makes the result a relaxation of anything the closed-loop simulator can
//! achieve under the same geometry.

use std::fmt::Write as _;

use itertools::Itertools;

use crate::config::{Environment, WorldConfig};
use crate::episode::ScenarioSpec;
use crate::error::{Error, Result};
use crate::world::{Phase, PathSpec, Pose, VehicleState, step_vehicle};

/// Largest scenario `optimal_schedule` will enumerate.
pub const MAX_ENUMERATED: usize = 8;

/// Free-flow track of one vehicle from its hold point to its exit.
#[derive(Clone, Debug)]
pub struct Track {
    /// Ticks from appearance to the hold point at full speed.
    pub hold_steps: u64,
    /// Arc position of the hold point.
    pub hold_arc: f64,
    /// Arc position where the path enters the conflict box.
    pub interior_arc: f64,
    /// Poses at 0, 1, 2, ... ticks after release, up to the last tick
    /// before exit.
    pub poses: Vec<Pose>,
}

impl Track {
    /// Ticks from release until the vehicle has left the map.
    pub fn crossing_steps(&self) -> u64 {
        self.poses.len() as u64
    }

    /// Ticks from release until the front of the path's interior piece.
    fn steps_to_interior(&self, cfg: &WorldConfig) -> u64 {
        let d = (self.interior_arc - self.hold_arc).max(0.0);
        (d / (cfg.v_max * cfg.dt) - 1e-9).ceil().max(0.0) as u64
    }
}

/// Build the hold-point track by stepping a lone vehicle at `a_max` from its
/// entry at `v_max`, exactly as the simulator does.
pub fn track(path: &PathSpec, cfg: &WorldConfig) -> Track {
    let hold_limit = path.interior_entry() - cfg.vehicle_radius;
    let mut state = VehicleState::parked(path);
    state.phase = Phase::Active;
    state.v = cfg.v_max;
    let mut arcs_poses = vec![(state.arc_pos, state.pose())];
    while state.phase == Phase::Active {
        state = step_vehicle(&state, path, cfg.a_max, cfg).expect("a_max is in range");
        if state.phase == Phase::Active {
            arcs_poses.push((state.arc_pos, state.pose()));
        }
    }
    let hold = arcs_poses.iter().rposition(|&(arc, _)| arc <= hold_limit + 1e-9).unwrap_or(0);
    Track {
        hold_steps: hold as u64,
        hold_arc: arcs_poses[hold].0,
        interior_arc: path.interior_entry(),
        poses: arcs_poses[hold..].iter().map(|&(_, p)| p).collect(),
    }
}

/// Whether two tracks overlap when the second is released `offset` ticks
/// after the first. Discs closer than `2r + buffer` overlap.
pub fn tracks_overlap(first: &Track, second: &Track, offset: u64, min_dist: f64) -> bool {
    let limit_sq = min_dist * min_dist;
    let start = offset as usize;
    let end = first.poses.len().min(start + second.poses.len());
    (start..end).any(|t| {
        let a = first.poses[t];
        let b = second.poses[t - start];
        let dx = a.x - b.x;
        let dy = a.y - b.y;
        dx * dx + dy * dy < limit_sq
    })
}

/// Release offsets (ticks after `first`) at which `second` would overlap it.
fn forbidden_offsets(first: &Track, second: &Track, min_dist: f64) -> Vec<u32> {
    (0..first.poses.len() as u64)
        .filter(|&d| tracks_overlap(first, second, d, min_dist))
        .map(|d| d as u32)
        .collect()
}

/// Pairwise release conflicts for one scenario: for each ordered pair, the
/// offsets at which the follower may not be released after the leader.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConflictTable {
    n: usize,
    forbidden: Vec<Vec<u32>>,
}

impl ConflictTable {
    pub fn n_vehicles(&self) -> usize {
        self.n
    }

    /// Sorted offsets at which `second` overlaps `first` when released that
    /// many ticks later.
    pub fn forbidden(&self, first: usize, second: usize) -> &[u32] {
        &self.forbidden[first * self.n + second]
    }

    /// Smallest safe release offset of `second` after `first`.
    pub fn separation(&self, first: usize, second: usize) -> u32 {
        let f = self.forbidden(first, second);
        (0..).find(|d| f.binary_search(d).is_err()).expect("finite set")
    }

    /// No release offset in either order makes the pair overlap.
    pub fn is_independent(&self, a: usize, b: usize) -> bool {
        self.forbidden(a, b).is_empty() && self.forbidden(b, a).is_empty()
    }

    pub fn allows(&self, first: usize, second: usize, offset: u64) -> bool {
        u32::try_from(offset).map_or(true, |d| self.forbidden(first, second).binary_search(&d).is_err())
    }
}

/// Scenario geometry plus the per-slot tracks the scheduler works on.
#[derive(Clone, Debug)]
pub struct Problem {
    pub dt: f64,
    pub entry_steps: Vec<u64>,
    pub tracks: Vec<Track>,
}

impl Problem {
    pub fn new(env: &Environment, scenario: &ScenarioSpec) -> Result<Problem> {
        if scenario.layout != env.layout.kind {
            return Err(Error::InvalidInput(format!(
                "scenario is for {} but the environment is {}",
                scenario.layout, env.layout.kind
            )));
        }
        let tracks = scenario
            .vehicles
            .iter()
            .map(|v| v.path(&env.layout).map(|p| track(&p, &env.world)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Problem {
            dt: env.world.dt,
            entry_steps: scenario.vehicles.iter().map(|v| u64::from(v.entry_step)).collect(),
            tracks,
        })
    }

    pub fn n_vehicles(&self) -> usize {
        self.tracks.len()
    }

    /// Earliest possible release tick of each slot.
    pub fn arrival(&self, slot: usize) -> u64 {
        self.entry_steps[slot] + self.tracks[slot].hold_steps
    }

    /// Exit tick with no other traffic.
    pub fn free_flow_exit(&self, slot: usize) -> u64 {
        self.arrival(slot) + self.tracks[slot].crossing_steps()
    }
}

/// Sweep release offsets for every ordered pair. `buffer` widens the
/// minimum centre distance beyond `2r`.
pub fn conflict_table(env: &Environment, problem: &Problem, buffer: f64) -> Result<ConflictTable> {
    if !(buffer >= 0.0 && buffer.is_finite()) {
        return Err(Error::InvalidInput(format!("margin {buffer} must be finite and non-negative")));
    }
    let n = problem.n_vehicles();
    let min_dist = 2.0 * env.world.vehicle_radius + buffer;
    let mut forbidden = vec![Vec::new(); n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                forbidden[i * n + j] = forbidden_offsets(&problem.tracks[i], &problem.tracks[j], min_dist);
            }
        }
    }
    Ok(ConflictTable { n, forbidden })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub order: Vec<usize>,
    /// Per slot: tick the vehicle leaves its hold point.
    pub release_tick: Vec<u64>,
    /// Per slot: seconds at which the vehicle reaches the conflict box.
    pub interior_entry: Vec<f64>,
    /// Per slot: tick at which the vehicle has left the map.
    pub exit_tick: Vec<u64>,
    pub delay_ticks: u64,
    pub total_delay: f64,
    pub makespan: f64,
}

impl Schedule {
    pub fn makespan_ticks(&self) -> u64 {
        self.exit_tick.iter().copied().max().unwrap_or(0)
    }

    /// Plain `key = value` report.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let join = |xs: Vec<String>| xs.join(", ");
        let _ = writeln!(out, "order = [{}]", join(self.order.iter().map(ToString::to_string).collect()));
        let _ = writeln!(
            out,
            "interior_entry = [{}]",
            join(self.interior_entry.iter().map(|t| format!("{t:.3}")).collect())
        );
        let _ = writeln!(out, "total_delay = {:.3}", self.total_delay);
        let _ = writeln!(out, "makespan = {:.3}", self.makespan);
        out
    }
}

/// Greedy earliest release in the given crossing order: each vehicle leaves
/// no earlier than its arrival and its predecessor, at the first tick whose
/// offset to every earlier vehicle is conflict-free.
pub fn schedule_for_order(
    env: &Environment,
    problem: &Problem,
    order: &[usize],
    table: &ConflictTable,
) -> Result<Schedule> {
    let n = problem.n_vehicles();
    if table.n_vehicles() != n {
        return Err(Error::InvalidInput("conflict table does not match scenario".into()));
    }
    let mut seen = vec![false; n];
    if order.len() != n || order.iter().any(|&s| s >= n || std::mem::replace(&mut seen[s], true)) {
        return Err(Error::Schedule(format!("{order:?} is not a permutation of 0..{n}")));
    }
    let mut release = vec![0u64; n];
    for (k, &slot) in order.iter().enumerate() {
        let mut e = problem.arrival(slot);
        if k > 0 {
            e = e.max(release[order[k - 1]]);
        }
        while !order[..k].iter().all(|&p| table.allows(p, slot, e - release[p])) {
            e += 1;
        }
        release[slot] = e;
    }
    Ok(finish(env, problem, order.to_vec(), release))
}

fn finish(env: &Environment, problem: &Problem, order: Vec<usize>, release: Vec<u64>) -> Schedule {
    let dt = problem.dt;
    let exit_tick: Vec<u64> =
        (0..problem.n_vehicles()).map(|s| release[s] + problem.tracks[s].crossing_steps()).collect();
    let interior_entry = (0..problem.n_vehicles())
        .map(|s| (release[s] + problem.tracks[s].steps_to_interior(&env.world)) as f64 * dt)
        .collect();
    let delay_ticks: u64 = (0..problem.n_vehicles()).map(|s| exit_tick[s] - problem.free_flow_exit(s)).sum();
    let makespan = exit_tick.iter().copied().max().unwrap_or(0) as f64 * dt;
    Schedule {
        order,
        release_tick: release,
        interior_entry,
        exit_tick,
        delay_ticks,
        total_delay: delay_ticks as f64 * dt,
        makespan,
    }
}

/// Minimum total delay over every crossing order. Ties go to the smaller
/// makespan, then to the lexicographically first order.
pub fn optimal_schedule(env: &Environment, problem: &Problem, table: &ConflictTable) -> Result<Schedule> {
    let n = problem.n_vehicles();
    if n == 0 {
        return Err(Error::Schedule("empty scenario".into()));
    }
    if n > MAX_ENUMERATED {
        return Err(Error::Schedule(format!("{n} vehicles exceeds the enumeration limit of {MAX_ENUMERATED}")));
    }
    let mut best: Option<Schedule> = None;
    for order in (0..n).permutations(n) {
        let s = schedule_for_order(env, problem, &order, table)?;
        let better = match &best {
            None => true,
            Some(b) => {
                (s.delay_ticks, s.makespan_ticks(), &s.order) < (b.delay_ticks, b.makespan_ticks(), &b.order)
            }
        };
        if better {
            best = Some(s);
        }
    }
    Ok(best.expect("at least one order"))
}

/// Convenience wrapper: zero-buffer table plus exhaustive search.
pub fn solve(env: &Environment, scenario: &ScenarioSpec) -> Result<Schedule> {
    let problem = Problem::new(env, scenario)?;
    let table = conflict_table(env, &problem, 0.0)?;
    optimal_schedule(env, &problem, &table)
}

/// Pairs that overlap when every vehicle crosses from its release tick.
pub fn schedule_overlaps(env: &Environment, problem: &Problem, schedule: &Schedule) -> Vec<(usize, usize, u64)> {
    let min_dist = 2.0 * env.world.vehicle_radius;
    let n = problem.n_vehicles();
    let mut out = Vec::new();
    let end = schedule.makespan_ticks();
    for t in 0..end {
        for i in 0..n {
            for j in (i + 1)..n {
                let (Some(a), Some(b)) = (pose_at(problem, schedule, i, t), pose_at(problem, schedule, j, t)) else {
                    continue;
                };
                if (a.x - b.x).powi(2) + (a.y - b.y).powi(2) < min_dist * min_dist {
                    out.push((i, j, t));
                }
            }
        }
    }
    out
}

fn pose_at(problem: &Problem, schedule: &Schedule, slot: usize, tick: u64) -> Option<Pose> {
    let r = schedule.release_tick[slot];
    if tick < r {
        return None;
    }
    problem.tracks[slot].poses.get((tick - r) as usize).copied()
}
