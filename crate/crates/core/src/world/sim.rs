use serde::{Deserialize, Serialize};

use super::layout::{Arm, Layout};
use super::path::{make_path, PathSpec, Pose};
use crate::config::{Environment, WorldConfig};
use crate::error::{Error, Result};

/// Per-vehicle features in the flattened state vector:
/// `x, y, v, psi, x_des, y_des`.
pub const STATE_FEATURES: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VehicleSpec {
    pub slot: usize,
    /// Entry tick; the entry time is `entry_step * dt`.
    pub entry_step: u32,
    pub approach: Arm,
    pub destination: Arm,
}

impl VehicleSpec {
    pub fn entry_time(&self, dt: f64) -> f64 {
        f64::from(self.entry_step) * dt
    }

    pub fn path(&self, layout: &Layout) -> Result<PathSpec> {
        make_path(layout, self.approach, self.destination)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Pending,
    Active,
    Exited,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub psi: f64,
    pub x_des: f64,
    pub y_des: f64,
    pub arc_pos: f64,
    pub phase: Phase,
}

impl VehicleState {
    /// A vehicle waiting at the start of its path.
    pub fn parked(path: &PathSpec) -> VehicleState {
        let start = path.start_pose();
        let end = path.end_pose();
        VehicleState {
            x: start.x,
            y: start.y,
            v: 0.0,
            psi: start.psi,
            x_des: end.x,
            y_des: end.y,
            arc_pos: 0.0,
            phase: Phase::Pending,
        }
    }

    pub fn is_active(&self) -> bool {
        self.phase == Phase::Active
    }

    pub fn pose(&self) -> Pose {
        Pose { x: self.x, y: self.y, psi: self.psi }
    }

    pub fn features(&self) -> [f64; STATE_FEATURES] {
        [self.x, self.y, self.v, self.psi, self.x_des, self.y_des]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldState {
    pub tick: u64,
    pub vehicles: Vec<VehicleState>,
}

impl WorldState {
    pub fn time(&self, dt: f64) -> f64 {
        self.tick as f64 * dt
    }
}

/// Advance one active vehicle by one tick: velocity first, then position.
pub fn step_vehicle(
    state: &VehicleState,
    path: &PathSpec,
    accel: f64,
    cfg: &WorldConfig,
) -> Result<VehicleState> {
    step_vehicle_scaled(state, path, accel, cfg, 1.0)
}

/// As [`step_vehicle`], with the executed velocity multiplied by
/// `speed_factor` before integration (noise injection).
pub fn step_vehicle_scaled(
    state: &VehicleState,
    path: &PathSpec,
    accel: f64,
    cfg: &WorldConfig,
    speed_factor: f64,
) -> Result<VehicleState> {
    if !accel.is_finite() || accel < cfg.a_min || accel > cfg.a_max {
        return Err(Error::InvalidInput(format!(
            "acceleration {accel} outside [{}, {}]",
            cfg.a_min, cfg.a_max
        )));
    }
    if state.phase != Phase::Active {
        return Err(Error::InvalidInput(format!("cannot step a {:?} vehicle", state.phase)));
    }
    let mut v = (state.v + accel * cfg.dt).clamp(0.0, cfg.v_max);
    if speed_factor != 1.0 {
        v = (v * speed_factor).clamp(0.0, cfg.v_max);
    }
    let arc = state.arc_pos + v * cfg.dt;
    let mut next = *state;
    if arc >= path.total_length() {
        let end = path.end_pose();
        next.arc_pos = path.total_length();
        next.x = end.x;
        next.y = end.y;
        next.psi = end.psi;
        next.v = 0.0;
        next.phase = Phase::Exited;
    } else {
        let pose = path.pose_clamped(arc);
        next.arc_pos = arc;
        next.x = pose.x;
        next.y = pose.y;
        next.psi = pose.psi;
        next.v = v;
    }
    Ok(next)
}

/// Distance travelled when braking at `a_min` from `v` until standstill,
/// integrated exactly as the simulator would.
pub fn braking_distance(v: f64, cfg: &WorldConfig) -> f64 {
    let mut v = v;
    let mut d = 0.0;
    while v > 0.0 {
        v = (v + cfg.a_min * cfg.dt).max(0.0);
        d += v * cfg.dt;
    }
    d
}

/// Unordered pairs `(i, j)`, `i < j`, of active vehicles whose footprint
/// discs overlap. Touching at exactly `2 * r` is not a collision.
pub fn detect_collisions(vehicles: &[VehicleState], cfg: &WorldConfig) -> Vec<(usize, usize)> {
    let limit = 2.0 * cfg.vehicle_radius;
    let limit_sq = limit * limit;
    let mut pairs = Vec::new();
    for i in 0..vehicles.len() {
        if !vehicles[i].is_active() {
            continue;
        }
        for j in (i + 1)..vehicles.len() {
            if !vehicles[j].is_active() {
                continue;
            }
            let dx = vehicles[i].x - vehicles[j].x;
            let dy = vehicles[i].y - vehicles[j].y;
            if dx * dx + dy * dy < limit_sq {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Shortest traversal time of `path` for a lone vehicle starting at
/// `entry_v` and accelerating at `a_max` throughout.
pub fn free_flow_steps(path: &PathSpec, entry_v: f64, cfg: &WorldConfig) -> u64 {
    if path.total_length() <= 0.0 {
        return 0;
    }
    let mut state = VehicleState::parked(path);
    state.v = entry_v.clamp(0.0, cfg.v_max);
    state.phase = Phase::Active;
    let mut steps = 0;
    while state.phase == Phase::Active {
        state = step_vehicle(&state, path, cfg.a_max, cfg).expect("a_max is in range");
        steps += 1;
    }
    steps
}

pub fn free_flow_time(path: &PathSpec, entry_v: f64, cfg: &WorldConfig) -> f64 {
    free_flow_steps(path, entry_v, cfg) as f64 * cfg.dt
}

/// A running intersection: per-slot paths and the mutable world state.
#[derive(Clone, Debug)]
pub struct World {
    cfg: WorldConfig,
    layout: Layout,
    specs: Vec<VehicleSpec>,
    paths: Vec<PathSpec>,
    state: WorldState,
    /// Ticks each slot spent held back by the admission check.
    admission_wait: Vec<u32>,
}

impl World {
    pub fn new(env: &Environment, specs: &[VehicleSpec]) -> Result<World> {
        let paths = specs.iter().map(|s| s.path(&env.layout)).collect::<Result<Vec<_>>>()?;
        for (i, spec) in specs.iter().enumerate() {
            if spec.slot != i {
                return Err(Error::InvalidInput(format!("slot {} stored at index {i}", spec.slot)));
            }
        }
        let vehicles = paths.iter().map(VehicleState::parked).collect();
        let mut world = World {
            cfg: env.world.clone(),
            layout: env.layout.clone(),
            specs: specs.to_vec(),
            paths,
            state: WorldState { tick: 0, vehicles },
            admission_wait: vec![0; specs.len()],
        };
        world.admit_arrivals();
        Ok(world)
    }

    pub fn config(&self) -> &WorldConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn specs(&self) -> &[VehicleSpec] {
        &self.specs
    }

    pub fn paths(&self) -> &[PathSpec] {
        &self.paths
    }

    pub fn state(&self) -> &WorldState {
        &self.state
    }

    pub fn vehicles(&self) -> &[VehicleState] {
        &self.state.vehicles
    }

    pub fn n_vehicles(&self) -> usize {
        self.specs.len()
    }

    pub fn tick(&self) -> u64 {
        self.state.tick
    }

    pub fn time(&self) -> f64 {
        self.state.time(self.cfg.dt)
    }

    pub fn admission_wait(&self) -> &[u32] {
        &self.admission_wait
    }

    pub fn all_exited(&self) -> bool {
        self.state.vehicles.iter().all(|v| v.phase == Phase::Exited)
    }

    /// Flattened `n * 6` feature vector.
    pub fn state_vector(&self) -> Vec<f64> {
        self.state.vehicles.iter().flat_map(|v| v.features()).collect()
    }

    pub fn collisions(&self) -> Vec<(usize, usize)> {
        detect_collisions(&self.state.vehicles, &self.cfg)
    }

    /// Apply one acceleration per slot (ignored for inactive slots), advance
    /// time, admit arriving vehicles and report collisions.
    pub fn step(&mut self, actions: &[f64], speed_factors: Option<&[f64]>) -> Result<Vec<(usize, usize)>> {
        if actions.len() != self.specs.len() {
            return Err(Error::InvalidInput(format!(
                "expected {} actions, got {}",
                self.specs.len(),
                actions.len()
            )));
        }
        for slot in 0..self.specs.len() {
            let current = self.state.vehicles[slot];
            if !current.is_active() {
                continue;
            }
            let factor = speed_factors.map_or(1.0, |f| f[slot]);
            self.state.vehicles[slot] =
                step_vehicle_scaled(&current, &self.paths[slot], actions[slot], &self.cfg, factor)?;
        }
        self.state.tick += 1;
        self.admit_arrivals();
        Ok(self.collisions())
    }

    /// Whether a vehicle entering `slot`'s path now, at full speed, keeps a
    /// safe distance to every active vehicle (and can brake behind any
    /// vehicle ahead on the same arm).
    pub fn entry_clear(&self, slot: usize) -> bool {
        let path = &self.paths[slot];
        let start = path.start_pose();
        let gap = self.cfg.lane_gap();
        let own_stop = braking_distance(self.cfg.v_max, &self.cfg);
        let approach = self.specs[slot].approach;
        for (other, st) in self.state.vehicles.iter().enumerate() {
            if other == slot || !st.is_active() {
                continue;
            }
            let dx = st.x - start.x;
            let dy = st.y - start.y;
            if (dx * dx + dy * dy).sqrt() < gap {
                return false;
            }
            if self.specs[other].approach == approach && st.arc_pos < self.paths[other].interior_exit() {
                if st.arc_pos < gap {
                    return false;
                }
                if st.arc_pos + braking_distance(st.v, &self.cfg) - own_stop < gap {
                    return false;
                }
            }
        }
        true
    }

    fn admit_arrivals(&mut self) {
        let tick = self.state.tick;
        for slot in 0..self.specs.len() {
            let st = self.state.vehicles[slot];
            if st.phase != Phase::Pending || u64::from(self.specs[slot].entry_step) > tick {
                continue;
            }
            if self.entry_clear(slot) {
                let v = &mut self.state.vehicles[slot];
                v.phase = Phase::Active;
                v.v = self.cfg.v_max;
            } else {
                self.admission_wait[slot] += 1;
            }
        }
    }

    /// Replace a slot's vehicle with a fresh one (continuous traffic).
    pub fn respawn(&mut self, spec: VehicleSpec) -> Result<()> {
        let slot = spec.slot;
        if slot >= self.specs.len() {
            return Err(Error::InvalidInput(format!("slot {slot} out of range")));
        }
        let path = spec.path(&self.layout)?;
        self.state.vehicles[slot] = VehicleState::parked(&path);
        self.paths[slot] = path;
        self.specs[slot] = spec;
        self.admission_wait[slot] = 0;
        if u64::from(spec.entry_step) <= self.state.tick && self.entry_clear(slot) {
            let v = &mut self.state.vehicles[slot];
            v.phase = Phase::Active;
            v.v = self.cfg.v_max;
        }
        Ok(())
    }

    /// Take a vehicle out of the world where it stands.
    pub fn remove(&mut self, slot: usize) {
        let v = &mut self.state.vehicles[slot];
        v.phase = Phase::Exited;
        v.v = 0.0;
    }
}
