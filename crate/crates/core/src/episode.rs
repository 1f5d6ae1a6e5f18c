//! Scenario sampling, rewards, returns-to-go and the episode loop.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Environment, RewardConfig};
use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::world::{Arm, LayoutKind, VehicleSpec, VehicleState, World, STATE_FEATURES};

const SCENARIO_STREAM: u64 = 0x5C;
const NOISE_STREAM: u64 = 0x4E;

/// One randomly drawn episode setup.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub layout: LayoutKind,
    pub vehicles: Vec<VehicleSpec>,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn n_vehicles(&self) -> usize {
        self.vehicles.len()
    }

    pub fn approaches(&self) -> Vec<Arm> {
        self.vehicles.iter().map(|v| v.approach).collect()
    }
}

/// Random approaches, destinations and entry times.
pub fn sample_scenario(env: &Environment, n_vehicles: usize, seed: u64) -> Result<ScenarioSpec> {
    if n_vehicles == 0 {
        return Err(Error::InvalidInput("a scenario needs at least one vehicle".into()));
    }
    let arms = env.layout.arms();
    let mut rng = rng_from(seed, &[SCENARIO_STREAM, 0]);
    let approaches: Vec<Arm> = (0..n_vehicles).map(|_| arms[rng.gen_range(0..arms.len())]).collect();
    sample_with_approaches(env, &approaches, seed)
}

/// Random destinations and entry times for fixed approaches.
pub fn sample_with_approaches(env: &Environment, approaches: &[Arm], seed: u64) -> Result<ScenarioSpec> {
    if approaches.is_empty() {
        return Err(Error::InvalidInput("a scenario needs at least one vehicle".into()));
    }
    let arms = env.layout.arms();
    let mut rng = rng_from(seed, &[SCENARIO_STREAM, 1]);
    let window_steps = (env.scenario.entry_window / env.world.dt).round() as u32;
    let mut vehicles = Vec::with_capacity(approaches.len());
    for (slot, &approach) in approaches.iter().enumerate() {
        if !env.layout.has_arm(approach) {
            return Err(Error::InvalidInput(format!("{approach:?} arm absent from layout")));
        }
        let others: Vec<Arm> = arms.iter().copied().filter(|&a| a != approach).collect();
        let destination = others[rng.gen_range(0..others.len())];
        let entry_step = rng.gen_range(0..=window_steps);
        vehicles.push(VehicleSpec { slot, entry_step, approach, destination });
    }
    // The episode starts when the first vehicle appears.
    let first = vehicles.iter().map(|v| v.entry_step).min().unwrap_or(0);
    for v in &mut vehicles {
        v.entry_step -= first;
    }
    Ok(ScenarioSpec { layout: env.layout.kind, vehicles, seed })
}

/// Speed reward of one vehicle, minus the collision penalty.
pub fn reward_vehicle(v: f64, collided_now: bool, cfg: &RewardConfig) -> f64 {
    let speed = cfg.c1 * (v - cfg.v_min) / (cfg.v_max - cfg.v_min);
    if collided_now {
        speed - cfg.c2
    } else {
        speed
    }
}

/// Sum of per-vehicle rewards over active vehicles.
pub fn reward_step(vehicles: &[VehicleState], collisions: &[(usize, usize)], cfg: &RewardConfig) -> f64 {
    vehicles
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_active())
        .map(|(i, v)| {
            let hit = collisions.iter().any(|&(a, b)| a == i || b == i);
            reward_vehicle(v.v, hit, cfg)
        })
        .sum()
}

/// Reverse cumulative sum: `rtgs[t] = rewards[t] + rewards[t+1] + ...`.
pub fn compute_rtgs(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::InvalidInput("cannot compute returns-to-go of an empty sequence".into()));
    }
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc += rewards[t];
        out[t] = acc;
    }
    Ok(out)
}

/// Anything that produces one acceleration per slot each tick.
pub trait Policy {
    fn reset(&mut self, _world: &World) -> Result<()> {
        Ok(())
    }

    fn act(&mut self, world: &World) -> Result<Vec<f64>>;

    /// Called after the world has advanced with `actions`.
    fn observe(&mut self, _world: &World, _actions: &[f64], _reward: f64) -> Result<()> {
        Ok(())
    }
}

/// Every active vehicle floors it: the uncoordinated baseline.
#[derive(Clone, Debug, Default)]
pub struct MaxSpeedPolicy;

impl Policy for MaxSpeedPolicy {
    fn act(&mut self, world: &World) -> Result<Vec<f64>> {
        let a = world.config().a_max;
        Ok(world.vehicles().iter().map(|v| if v.is_active() { a } else { 0.0 }).collect())
    }
}

/// Same acceleration for every vehicle, every tick.
#[derive(Clone, Debug)]
pub struct ConstantPolicy(pub f64);

impl Policy for ConstantPolicy {
    fn act(&mut self, world: &World) -> Result<Vec<f64>> {
        Ok(vec![self.0; world.n_vehicles()])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Collision,
    AllExited,
    Truncated,
}

impl Termination {
    pub fn code(self) -> u32 {
        match self {
            Termination::AllExited => 0,
            Termination::Collision => 1,
            Termination::Truncated => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Termination::AllExited),
            1 => Some(Termination::Collision),
            2 => Some(Termination::Truncated),
            _ => None,
        }
    }
}

/// One recorded episode. Index `t` holds the state observed before the
/// `t`-th action, that action, and the reward of the resulting transition.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub scenario: ScenarioSpec,
    pub n_vehicles: usize,
    pub dt: f64,
    /// `T * n_vehicles * 6`, row-major by timestep.
    pub states: Vec<f32>,
    /// `T * n_vehicles`.
    pub actions: Vec<f32>,
    pub rewards: Vec<f64>,
    pub rtgs: Vec<f64>,
    pub termination: Termination,
    pub return_total: f64,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.n_vehicles * STATE_FEATURES
    }

    pub fn state(&self, t: usize) -> &[f32] {
        let d = self.state_dim();
        &self.states[t * d..(t + 1) * d]
    }

    pub fn action(&self, t: usize) -> &[f32] {
        &self.actions[t * self.n_vehicles..(t + 1) * self.n_vehicles]
    }

    pub fn length_s(&self) -> f64 {
        self.len() as f64 * self.dt
    }

    pub fn collided(&self) -> bool {
        self.termination == Termination::Collision
    }

    /// Round rewards and returns to single precision, the on-disk
    /// representation, so in-memory and loaded datasets compare equal.
    pub fn quantize(&mut self) {
        for r in self.rewards.iter_mut().chain(self.rtgs.iter_mut()) {
            *r = f64::from(*r as f32);
        }
        self.return_total = self.rtgs.first().copied().unwrap_or(0.0);
    }

    /// Check the structural invariants; `rel_tol` bounds the return-to-go
    /// consistency error.
    pub fn validate(&self, rel_tol: f64) -> Result<()> {
        let t = self.len();
        if t == 0 {
            return Err(Error::InvalidInput("episode has no steps".into()));
        }
        if self.states.len() != t * self.state_dim()
            || self.actions.len() != t * self.n_vehicles
            || self.rtgs.len() != t
        {
            return Err(Error::InvalidInput("episode sequence lengths disagree".into()));
        }
        let mut acc = 0.0;
        for k in (0..t).rev() {
            acc += self.rewards[k];
            let err = (acc - self.rtgs[k]).abs();
            if err > rel_tol * acc.abs().max(1.0) {
                return Err(Error::InvalidInput(format!("return-to-go mismatch at step {k}: {err}")));
            }
        }
        if self.return_total != self.rtgs[0] {
            return Err(Error::InvalidInput("return_total differs from rtgs[0]".into()));
        }
        Ok(())
    }
}

/// Multiplicative velocity noise applied to the executed dynamics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VelocityNoise {
    pub pct: f64,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeOptions {
    pub t_max: f64,
    pub noise: Option<VelocityNoise>,
}

impl EpisodeOptions {
    pub fn new(t_max: f64) -> Self {
        Self { t_max, noise: None }
    }
}

pub fn run_episode(
    env: &Environment,
    scenario: &ScenarioSpec,
    policy: &mut dyn Policy,
    t_max: f64,
) -> Result<EpisodeRecord> {
    run_episode_with(env, scenario, policy, &EpisodeOptions::new(t_max))
}

/// Step the world under `policy` until the first collision, until every
/// vehicle has exited, or until `t_max`.
pub fn run_episode_with(
    env: &Environment,
    scenario: &ScenarioSpec,
    policy: &mut dyn Policy,
    opts: &EpisodeOptions,
) -> Result<EpisodeRecord> {
    if !(opts.t_max > 0.0) {
        return Err(Error::InvalidInput("t_max must be positive".into()));
    }
    if scenario.layout != env.layout.kind {
        return Err(Error::InvalidInput(format!(
            "scenario layout {} does not match environment layout {}",
            scenario.layout, env.layout.kind
        )));
    }
    let mut world = World::new(env, &scenario.vehicles)?;
    let n = world.n_vehicles();
    let max_ticks = (opts.t_max / env.world.dt).round() as u64;
    let mut noise_rng = opts
        .noise
        .filter(|nz| nz.pct > 0.0)
        .map(|nz| (nz.pct, rng_from(nz.seed, &[NOISE_STREAM, scenario.seed])));

    policy.reset(&world)?;
    let mut states = Vec::new();
    let mut actions_log = Vec::new();
    let mut rewards = Vec::new();
    let termination = loop {
        let state = world.state_vector();
        let actions = policy.act(&world)?;
        if actions.len() != n {
            return Err(Error::Aborted {
                tick: world.tick(),
                reason: format!("policy returned {} actions for {n} vehicles", actions.len()),
            });
        }
        if let Some(i) = actions.iter().position(|a| !a.is_finite()) {
            return Err(Error::Aborted {
                tick: world.tick(),
                reason: format!("non-finite action {} for slot {i}", actions[i]),
            });
        }
        let factors: Option<Vec<f64>> = noise_rng
            .as_mut()
            .map(|(pct, rng)| (0..n).map(|_| 1.0 + rng.gen_range(-*pct..=*pct)).collect());
        let collisions = world.step(&actions, factors.as_deref())?;
        let reward = reward_step(world.vehicles(), &collisions, &env.reward);

        states.extend(state.iter().map(|&x| x as f32));
        actions_log.extend(actions.iter().map(|&a| a as f32));
        rewards.push(reward);
        policy.observe(&world, &actions, reward)?;

        if !collisions.is_empty() {
            break Termination::Collision;
        }
        if world.all_exited() {
            break Termination::AllExited;
        }
        if world.tick() >= max_ticks {
            break Termination::Truncated;
        }
    };
    let rtgs = compute_rtgs(&rewards)?;
    let return_total = rtgs[0];
    Ok(EpisodeRecord {
        scenario: scenario.clone(),
        n_vehicles: n,
        dt: env.world.dt,
        states,
        actions: actions_log,
        rewards,
        rtgs,
        termination,
        return_total,
    })
}
