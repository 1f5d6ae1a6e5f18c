//! Space-time reservation coordinator.
//!
//! Vehicles book the cells their predicted footprint sweeps, tick by tick.
//! A booking is accepted only if none of its cells is already taken; an
//! accepted vehicle then drives exactly the predicted full-throttle
//! trajectory, so the booking is never violated. Vehicles without a booking
//! queue behind the stop line and ask again every tick.
//!
//! Bookings cover the whole remaining path, not only the conflict box, so
//! that two booked vehicles sharing an arm can never close up on each other.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::config::{AimConfig, WorldConfig};
use crate::episode::Policy;
use crate::error::Result;
use crate::world::{braking_distance, step_vehicle, PathSpec, Phase, VehicleState, World};

/// `(cell_ix, cell_iy, tick)`.
pub type CellKey = (i32, i32, u32);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Reservation {
    pub slot: usize,
    /// First tick at which the footprint touches the conflict box.
    pub entry_step: u32,
    /// Sorted, deduplicated.
    pub occupied: Vec<CellKey>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Accepted,
    Rejected,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReservationGrid {
    pub cell_size: f64,
    pub horizon: u32,
    occupancy: HashMap<CellKey, usize>,
}

impl ReservationGrid {
    pub fn new(cell_size: f64, horizon: u32) -> Self {
        Self { cell_size, horizon, occupancy: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.occupancy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occupancy.is_empty()
    }

    pub fn occupant(&self, key: CellKey) -> Option<usize> {
        self.occupancy.get(&key).copied()
    }

    pub fn is_free(&self, candidate: &Reservation) -> bool {
        candidate.occupied.iter().all(|k| !self.occupancy.contains_key(k))
            && candidate.occupied.iter().all(|k| k.2 <= self.horizon)
    }

    /// Book `candidate` if it overlaps nothing; otherwise leave the grid
    /// untouched.
    pub fn request(&mut self, candidate: &Reservation) -> Decision {
        if candidate.occupied.is_empty() || !self.is_free(candidate) {
            return Decision::Rejected;
        }
        for &k in &candidate.occupied {
            self.occupancy.insert(k, candidate.slot);
        }
        Decision::Accepted
    }

    /// Book whatever cells of `candidate` are still free. Returns the number
    /// of cells that could not be booked.
    pub fn force_book(&mut self, candidate: &Reservation) -> usize {
        let mut clashes = 0;
        for &k in &candidate.occupied {
            match self.occupancy.get(&k) {
                Some(_) => clashes += 1,
                None => {
                    self.occupancy.insert(k, candidate.slot);
                }
            }
        }
        clashes
    }

    /// Occupancy ledger as `cell_ix,cell_iy,tick,slot` lines, sorted.
    pub fn dump(&self) -> String {
        let mut rows: Vec<(CellKey, usize)> = self.occupancy.iter().map(|(&k, &s)| (k, s)).collect();
        rows.sort_unstable();
        let mut out = String::from("cell_ix,cell_iy,tick,slot\n");
        for ((ix, iy, t), slot) in rows {
            let _ = writeln!(out, "{ix},{iy},{t},{slot}");
        }
        out
    }
}

/// Cells whose square intersects the disc of `radius` around `(x, y)`.
fn disc_cells(x: f64, y: f64, radius: f64, cell: f64, tick: u32, out: &mut Vec<CellKey>) {
    let ix0 = ((x - radius) / cell).floor() as i32;
    let ix1 = ((x + radius) / cell).floor() as i32;
    let iy0 = ((y - radius) / cell).floor() as i32;
    let iy1 = ((y + radius) / cell).floor() as i32;
    // Exact tangency does not count; lane centrelines are computed through
    // trig and land a few ulps off their nominal values.
    let r2 = (radius - 1e-9) * (radius - 1e-9);
    for ix in ix0..=ix1 {
        let lo_x = f64::from(ix) * cell;
        let dx = (lo_x - x).max(0.0).max(x - (lo_x + cell));
        for iy in iy0..=iy1 {
            let lo_y = f64::from(iy) * cell;
            let dy = (lo_y - y).max(0.0).max(y - (lo_y + cell));
            if dx * dx + dy * dy < r2 {
                out.push((ix, iy, tick));
            }
        }
    }
}

fn touches_interior(x: f64, y: f64, radius: f64, half: f64) -> bool {
    let dx = (x.abs() - half).max(0.0);
    let dy = (y.abs() - half).max(0.0);
    dx * dx + dy * dy < radius * radius
}

/// Full-throttle trajectory from `state` at `start_tick` until the vehicle
/// leaves its path, as `(tick, x, y)` samples including the current pose.
fn full_throttle_trajectory(
    state: &VehicleState,
    path: &PathSpec,
    start_tick: u32,
    cfg: &WorldConfig,
) -> Vec<(u32, f64, f64)> {
    let mut out = vec![(start_tick, state.x, state.y)];
    let mut st = *state;
    let mut tick = start_tick;
    while st.phase == Phase::Active {
        st = step_vehicle(&st, path, cfg.a_max, cfg).expect("a_max is in range");
        tick += 1;
        if st.phase == Phase::Active {
            out.push((tick, st.x, st.y));
        }
    }
    out
}

/// Cells swept by the vehicle if it accelerates to `v_max` from its current
/// state at `start_tick` and holds it until leaving the path.
pub fn predict_occupancy(
    slot: usize,
    state: &VehicleState,
    path: &PathSpec,
    start_tick: u32,
    interior_half: f64,
    cfg: &WorldConfig,
    aim: &AimConfig,
) -> Reservation {
    let radius = cfg.vehicle_radius + aim.safety_buffer;
    let mut occupied = Vec::new();
    let mut entry_step = None;
    for (tick, x, y) in full_throttle_trajectory(state, path, start_tick, cfg) {
        if entry_step.is_none() && touches_interior(x, y, radius, interior_half) {
            entry_step = Some(tick);
        }
        disc_cells(x, y, radius, aim.cell_size, tick, &mut occupied);
    }
    occupied.sort_unstable();
    occupied.dedup();
    Reservation { slot, entry_step: entry_step.unwrap_or(start_tick), occupied }
}

/// Counters describing one coordinated episode.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AimStats {
    pub requests: usize,
    pub rejections: usize,
    /// Vehicles that could no longer stop before the line when refused and
    /// were pushed through anyway.
    pub emergency_grants: usize,
}

/// The reservation coordinator as a [`Policy`].
#[derive(Clone, Debug)]
pub struct AimPolicy {
    aim: AimConfig,
    horizon: u32,
    grid: ReservationGrid,
    reserved: Vec<bool>,
    stats: AimStats,
}

impl AimPolicy {
    /// `horizon` is the last tick that may be booked.
    pub fn new(aim: AimConfig, horizon: u32) -> Self {
        Self {
            grid: ReservationGrid::new(aim.cell_size, horizon),
            aim,
            horizon,
            reserved: Vec::new(),
            stats: AimStats::default(),
        }
    }

    pub fn for_env(env: &crate::config::Environment, aim: &AimConfig) -> Self {
        Self::new(aim.clone(), env.horizon_steps() as u32)
    }

    pub fn grid(&self) -> &ReservationGrid {
        &self.grid
    }

    pub fn stats(&self) -> &AimStats {
        &self.stats
    }

    pub fn is_reserved(&self, slot: usize) -> bool {
        self.reserved.get(slot).copied().unwrap_or(false)
    }

    /// No vehicle without a booking is ahead on the same arm.
    fn is_lane_leader(&self, world: &World, slot: usize) -> bool {
        let me = world.vehicles()[slot];
        let approach = world.specs()[slot].approach;
        world.vehicles().iter().enumerate().all(|(other, st)| {
            other == slot
                || !st.is_active()
                || world.specs()[other].approach != approach
                || st.arc_pos <= me.arc_pos
                || self.reserved[other]
        })
    }

    /// Arc positions the vehicle must be able to stop before (`stop`) and
    /// must not pass this tick (`hard`).
    fn limits(&self, world: &World, slot: usize) -> (f64, f64) {
        let cfg = world.config();
        let me = world.vehicles()[slot];
        let approach = world.specs()[slot].approach;
        let gap = cfg.lane_gap();
        let mut stop = world.paths()[slot].interior_entry() - cfg.vehicle_radius;
        let mut hard = f64::INFINITY;
        for (other, st) in world.vehicles().iter().enumerate() {
            if other == slot || !st.is_active() || world.specs()[other].approach != approach {
                continue;
            }
            if st.arc_pos > me.arc_pos {
                stop = stop.min(st.arc_pos + braking_distance(st.v, cfg) - gap);
                hard = hard.min(st.arc_pos - gap);
            }
        }
        (stop, hard)
    }

    fn yield_action(&self, world: &World, slot: usize) -> f64 {
        let cfg = world.config();
        let me = world.vehicles()[slot];
        let path = &world.paths()[slot];
        let (stop, hard) = self.limits(world, slot);
        let next = step_vehicle(&me, path, cfg.a_max, cfg).expect("a_max is in range");
        let margin = if me.v == 0.0 { self.aim.restart_margin } else { 0.0 };
        let room = next.phase == Phase::Active
            && next.arc_pos + braking_distance(next.v, cfg) + margin <= stop
            && next.arc_pos <= hard;
        if room {
            cfg.a_max
        } else if me.v == 0.0 {
            0.0
        } else {
            cfg.a_min
        }
    }
}

impl Policy for AimPolicy {
    fn reset(&mut self, world: &World) -> Result<()> {
        self.grid = ReservationGrid::new(self.aim.cell_size, self.horizon);
        self.reserved = vec![false; world.n_vehicles()];
        self.stats = AimStats::default();
        Ok(())
    }

    fn act(&mut self, world: &World) -> Result<Vec<f64>> {
        let cfg = world.config();
        if self.reserved.len() != world.n_vehicles() {
            self.reserved.resize(world.n_vehicles(), false);
        }
        let tick = world.tick() as u32;
        let mut actions = vec![0.0; world.n_vehicles()];
        for slot in 0..world.n_vehicles() {
            let st = world.vehicles()[slot];
            if !st.is_active() {
                // A fresh vehicle may reuse the slot later (continuous flow).
                self.reserved[slot] = false;
                continue;
            }
            if self.reserved[slot] {
                actions[slot] = cfg.a_max;
                continue;
            }
            if self.is_lane_leader(world, slot) {
                let path = &world.paths()[slot];
                let candidate =
                    predict_occupancy(slot, &st, path, tick, world.layout().interior_half, cfg, &self.aim);
                self.stats.requests += 1;
                if self.grid.request(&candidate) == Decision::Accepted {
                    self.reserved[slot] = true;
                    actions[slot] = cfg.a_max;
                    continue;
                }
                self.stats.rejections += 1;
                let stop_line = path.interior_entry() - cfg.vehicle_radius;
                if st.arc_pos + braking_distance(st.v, cfg) > stop_line + 1e-9 {
                    self.grid.force_book(&candidate);
                    self.stats.emergency_grants += 1;
                    self.reserved[slot] = true;
                    actions[slot] = cfg.a_max;
                    continue;
                }
            }
            actions[slot] = self.yield_action(world, slot);
        }
        Ok(actions)
    }
}
