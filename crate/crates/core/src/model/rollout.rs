use ndarray::Array2;

use super::checkpoint::DtModel;
use super::net::{predict, Window};
use crate::config::Environment;
use crate::episode::{run_episode_with, EpisodeOptions, EpisodeRecord, Policy, ScenarioSpec};
use crate::error::{Error, Result};
use crate::world::{Layout, World, STATE_FEATURES};

/// Features of an unused model slot: a vehicle that has already left,
/// parked at the far end of an outbound lane with zero speed.
pub fn sentinel_features(layout: &Layout, k: usize) -> [f64; STATE_FEATURES] {
    let arms = layout.arms();
    let arm = arms[k % arms.len()];
    let [x, y] = layout.outbound_point(arm, layout.arm_length);
    let u = arm.outward();
    let psi = u[1].atan2(u[0]);
    [x, y, 0.0, crate::world::wrap_angle(psi), x, y]
}

/// The model as a controller. It keeps the running token history and the
/// return-to-go it is conditioned on, reduced by every observed reward.
pub struct DtPolicy<'a> {
    model: &'a DtModel,
    g0: f64,
    ghat: f64,
    states: Vec<Vec<f64>>,
    prev_actions: Vec<Vec<f64>>,
    rtgs: Vec<f64>,
    timesteps: Vec<usize>,
    step: usize,
    /// Return-to-go after every observed reward, starting with `g0`.
    trace: Vec<f64>,
    /// Rewards observed so far, in order.
    rewards: Vec<f64>,
}

impl<'a> DtPolicy<'a> {
    pub fn new(model: &'a DtModel, g0: f64) -> Result<DtPolicy<'a>> {
        if !g0.is_finite() {
            return Err(Error::InvalidInput(format!("initial return-to-go {g0} is not finite")));
        }
        Ok(DtPolicy {
            model,
            g0,
            ghat: g0,
            states: Vec::new(),
            prev_actions: Vec::new(),
            rtgs: Vec::new(),
            timesteps: Vec::new(),
            step: 0,
            trace: Vec::new(),
            rewards: Vec::new(),
        })
    }

    pub fn g0(&self) -> f64 {
        self.g0
    }

    pub fn trace(&self) -> &[f64] {
        &self.trace
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    fn model_slots(&self) -> usize {
        self.model.model.action_dim
    }

    /// Model-width state vector: the world's vehicles followed by sentinels.
    fn model_state(&self, world: &World) -> Result<Vec<f64>> {
        let n = world.n_vehicles();
        let slots = self.model_slots();
        if n > slots {
            return Err(Error::InvalidInput(format!("{n} vehicles exceed the model's {slots} slots")));
        }
        let mut raw = world.state_vector();
        for k in n..slots {
            raw.extend_from_slice(&sentinel_features(world.layout(), k));
        }
        Ok(self.model.norm.state(raw))
    }

    fn push(&mut self, state: Vec<f64>, prev_action: Vec<f64>) {
        let k = self.model.model.context_len;
        self.states.push(state);
        self.prev_actions.push(prev_action);
        self.rtgs.push(self.ghat / self.model.norm.return_scale);
        self.timesteps.push(self.step);
        if self.states.len() > k {
            self.states.remove(0);
            self.prev_actions.remove(0);
            self.rtgs.remove(0);
            self.timesteps.remove(0);
        }
    }

    /// Drop the token history and condition afresh on `g0` from timestep 0,
    /// starting at the world's current state.
    pub fn restart(&mut self, world: &World) -> Result<()> {
        self.states.clear();
        self.prev_actions.clear();
        self.rtgs.clear();
        self.timesteps.clear();
        self.step = 0;
        self.ghat = self.g0;
        let s = self.model_state(world)?;
        self.push(s, vec![0.0; self.model_slots()]);
        Ok(())
    }

    fn window(&self) -> Window {
        let l = self.states.len();
        let rows = |v: &[Vec<f64>], w: usize| {
            Array2::from_shape_vec((l, w), v.iter().flatten().copied().collect()).expect("rectangular history")
        };
        Window {
            states: rows(&self.states, self.model.model.state_dim),
            prev_actions: rows(&self.prev_actions, self.model.model.action_dim),
            rtgs: self.rtgs.clone(),
            timesteps: self.timesteps.clone(),
            targets: None,
        }
    }
}

impl Policy for DtPolicy<'_> {
    fn reset(&mut self, world: &World) -> Result<()> {
        self.trace = vec![self.g0];
        self.rewards.clear();
        self.restart(world)
    }

    fn act(&mut self, world: &World) -> Result<Vec<f64>> {
        let out = predict(&self.model.params, &self.model.model, &self.window())?;
        let last = out.row(out.nrows() - 1);
        let cfg = world.config();
        let mut actions = Vec::with_capacity(world.n_vehicles());
        for (slot, &a) in last.iter().take(world.n_vehicles()).enumerate() {
            if !a.is_finite() {
                return Err(Error::Aborted { tick: world.tick(), reason: format!("non-finite action for slot {slot}") });
            }
            actions.push(a.clamp(cfg.a_min, cfg.a_max));
        }
        Ok(actions)
    }

    fn observe(&mut self, world: &World, actions: &[f64], reward: f64) -> Result<()> {
        self.ghat -= reward;
        self.trace.push(self.ghat);
        self.rewards.push(reward);
        self.step += 1;
        let scale = self.model.norm.action_scale;
        let mut prev: Vec<f64> = actions.iter().map(|a| a / scale).collect();
        prev.resize(self.model_slots(), 0.0);
        let s = self.model_state(world)?;
        self.push(s, prev);
        Ok(())
    }
}

/// Result of one closed-loop episode under the model.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub record: EpisodeRecord,
    /// Conditioning return after each step, starting with `g0`.
    pub rtg_trace: Vec<f64>,
}

impl Rollout {
    /// `|G0 - sum(r) - G_T|`: zero up to rounding when the conditioning
    /// return was reduced by exactly the observed rewards.
    pub fn telescoping_error(&self) -> f64 {
        let g0 = self.rtg_trace[0];
        let gt = *self.rtg_trace.last().expect("trace starts with g0");
        let total: f64 = self.record.rewards.iter().sum();
        (g0 - total - gt).abs()
    }
}

pub fn rollout(model: &DtModel, env: &Environment, scenario: &ScenarioSpec, g0: f64, opts: &EpisodeOptions) -> Result<Rollout> {
    let mut policy = DtPolicy::new(model, g0)?;
    let record = run_episode_with(env, scenario, &mut policy, opts)?;
    Ok(Rollout { record, rtg_trace: policy.trace })
}
