//! Metrics and the evaluation suites: plain, noisy, continuous traffic,
//! scenario variations and the three-way comparison against the coordinator
//! and the optimal schedule.

use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aim::AimPolicy;
use crate::config::{Environment, RunConfig};
use crate::episode::{
    reward_step, run_episode, sample_scenario, EpisodeOptions, EpisodeRecord, Policy, ScenarioSpec, VelocityNoise,
};
use crate::error::{Error, Result};
use crate::model::{rollout, DtModel, DtPolicy};
use crate::oracle;
use crate::rng::{derive_seed, rng_from};
use crate::world::{Arm, LayoutKind, Phase, VehicleSpec, World};

const EVAL_STREAM: u64 = 0xE7A1;
const CONTINUOUS_STREAM: u64 = 0xC0417;
const MAX_NOISE: f64 = 0.1;

/// One evaluated episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub scenario: usize,
    pub seed: u64,
    pub n_vehicles: usize,
    pub return_total: f64,
    pub length_s: f64,
    pub collided: bool,
}

/// Mean and population standard deviation of returns and lengths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n_episodes: usize,
    pub avg_return: f64,
    pub std_return: f64,
    pub avg_length_s: f64,
    pub std_length_s: f64,
    /// `avg_return` divided by the vehicles per episode.
    pub return_per_vehicle: f64,
}

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl Summary {
    fn of(rows: &[&EpisodeRow]) -> Option<Summary> {
        if rows.is_empty() {
            return None;
        }
        let (avg_return, std_return) = mean_std(rows.iter().map(|r| r.return_total));
        let (avg_length_s, std_length_s) = mean_std(rows.iter().map(|r| r.length_s));
        let per_vehicle = rows.iter().map(|r| r.return_total / r.n_vehicles as f64).sum::<f64>() / rows.len() as f64;
        Some(Summary {
            n_episodes: rows.len(),
            avg_return,
            std_return,
            avg_length_s,
            std_length_s,
            return_per_vehicle: per_vehicle,
        })
    }
}

/// Totals of a continuous-traffic run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuousStats {
    pub duration_s: f64,
    /// Vehicles that left the intersection normally.
    pub crossings: usize,
    /// Vehicles removed after a collision.
    pub collided_vehicles: usize,
    pub total_return: f64,
    /// `total_return / crossings`.
    pub return_per_vehicle: f64,
    /// `collided_vehicles / (crossings + collided_vehicles)`.
    pub collision_rate_per_crossing: f64,
    /// Times the policy history was restarted.
    pub segments: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub suite: String,
    pub config_hash: String,
    pub collision_rate: f64,
    /// Every episode, collided or not.
    pub pooled: Summary,
    /// Collision-free episodes only; absent when every episode collided.
    pub collision_free: Option<Summary>,
    /// Largest `|G0 - sum(r) - G_T|` over the episodes, when model rollouts
    /// produced them.
    pub max_rtg_error: Option<f64>,
    pub continuous: Option<ContinuousStats>,
    pub rows: Vec<EpisodeRow>,
}

pub fn row_of(index: usize, ep: &EpisodeRecord) -> EpisodeRow {
    EpisodeRow {
        scenario: index,
        seed: ep.scenario.seed,
        n_vehicles: ep.n_vehicles,
        return_total: ep.return_total,
        length_s: ep.length_s(),
        collided: ep.collided(),
    }
}

pub fn compute_metrics(suite: &str, config_hash: &str, episodes: &[EpisodeRecord]) -> Result<MetricsReport> {
    let rows: Vec<EpisodeRow> = episodes.iter().enumerate().map(|(i, e)| row_of(i, e)).collect();
    metrics_from_rows(suite, config_hash, rows)
}

pub fn metrics_from_rows(suite: &str, config_hash: &str, rows: Vec<EpisodeRow>) -> Result<MetricsReport> {
    if rows.is_empty() {
        return Err(Error::InvalidInput("no episodes to summarize".into()));
    }
    let all: Vec<&EpisodeRow> = rows.iter().collect();
    let free: Vec<&EpisodeRow> = rows.iter().filter(|r| !r.collided).collect();
    let collided = rows.len() - free.len();
    Ok(MetricsReport {
        suite: suite.to_string(),
        config_hash: config_hash.to_string(),
        collision_rate: collided as f64 / rows.len() as f64,
        pooled: Summary::of(&all).expect("non-empty"),
        collision_free: Summary::of(&free),
        max_rtg_error: None,
        continuous: None,
        rows,
    })
}

fn summary_lines(out: &mut String, name: &str, s: &Summary) {
    let _ = writeln!(
        out,
        "{name:<16} {:>8} {:>12.3} {:>10.3} {:>10.2} {:>9.2} {:>12.3}",
        s.n_episodes, s.avg_return, s.std_return, s.avg_length_s, s.std_length_s, s.return_per_vehicle
    );
}

impl MetricsReport {
    /// Human-readable table.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "suite: {}", self.suite);
        let _ = writeln!(out, "config: {}", self.config_hash);
        let collided = self.rows.iter().filter(|r| r.collided).count();
        let _ = writeln!(out, "collision rate: {:.4} ({collided}/{})", self.collision_rate, self.rows.len());
        let _ = writeln!(
            out,
            "{:<16} {:>8} {:>12} {:>10} {:>10} {:>9} {:>12}",
            "episodes", "count", "avg_return", "std", "avg_len_s", "std", "per_vehicle"
        );
        summary_lines(&mut out, "all", &self.pooled);
        match &self.collision_free {
            Some(s) => summary_lines(&mut out, "collision-free", s),
            None => {
                let _ = writeln!(out, "collision-free   none");
            }
        }
        if let Some(e) = self.max_rtg_error {
            let _ = writeln!(out, "max rtg bookkeeping error: {e:.3e}");
        }
        if let Some(c) = &self.continuous {
            let _ = writeln!(out, "duration: {:.1} s, restarts: {}", c.duration_s, c.segments);
            let _ = writeln!(out, "crossings: {}, collided vehicles: {}", c.crossings, c.collided_vehicles);
            let _ = writeln!(out, "total return: {:.3}", c.total_return);
            let _ = writeln!(out, "return per vehicle: {:.3}", c.return_per_vehicle);
            let _ = writeln!(out, "collision rate per crossing: {:.4}", c.collision_rate_per_crossing);
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("# config {}\nscenario,seed,n_vehicles,return,length_s,collided\n", self.config_hash);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.2},{}",
                r.scenario, r.seed, r.n_vehicles, r.return_total, r.length_s, r.collided as u8
            );
        }
        out
    }
}

/// `n` held-out scenarios for an environment, drawn from a stream disjoint
/// from the data generators.
pub fn eval_scenarios(env: &Environment, n: usize, seed: u64) -> Result<Vec<ScenarioSpec>> {
    (0..n as u64)
        .map(|i| sample_scenario(env, env.scenario.n_vehicles, derive_seed(seed, &[EVAL_STREAM, i])))
        .collect()
}

/// Initial return-to-go: the configured value, else the training mean.
pub fn initial_rtg(model: &DtModel, cfg: &RunConfig) -> f64 {
    cfg.eval.g0.unwrap_or(model.norm.return_mean)
}

fn check_horizon(model: &DtModel, env: &Environment) -> Result<()> {
    if env.horizon_steps() >= model.model.max_timestep as u64 {
        return Err(Error::Config(format!(
            "episode horizon of {} steps exceeds the model's {} timestep embeddings",
            env.horizon_steps(),
            model.model.max_timestep
        )));
    }
    Ok(())
}

/// Model rollouts on `scenarios`, in parallel, in scenario order.
pub fn run_model(
    model: &DtModel,
    env: &Environment,
    scenarios: &[ScenarioSpec],
    g0: f64,
    noise: Option<VelocityNoise>,
) -> Result<Vec<crate::model::Rollout>> {
    check_horizon(model, env)?;
    let opts = EpisodeOptions { t_max: env.scenario.t_max, noise };
    scenarios.par_iter().map(|s| rollout(model, env, s, g0, &opts)).collect()
}

/// Coordinator episodes on `scenarios`.
pub fn run_aim(cfg: &RunConfig, env: &Environment, scenarios: &[ScenarioSpec]) -> Result<Vec<EpisodeRecord>> {
    scenarios
        .par_iter()
        .map(|s| {
            let mut policy = AimPolicy::for_env(env, &cfg.aim);
            run_episode(env, s, &mut policy, env.scenario.t_max)
        })
        .collect()
}

fn model_report(suite: &str, cfg: &RunConfig, rollouts: &[crate::model::Rollout]) -> Result<MetricsReport> {
    let episodes: Vec<EpisodeRecord> = rollouts.iter().map(|r| r.record.clone()).collect();
    let mut report = compute_metrics(suite, &cfg.hash(), &episodes)?;
    report.max_rtg_error = Some(rollouts.iter().map(|r| r.telescoping_error()).fold(0.0, f64::max));
    Ok(report)
}

/// The model on `n_scenarios` plain scenarios of the configured world.
pub fn eval_plain(model: &DtModel, cfg: &RunConfig, seed: u64) -> Result<MetricsReport> {
    let env = cfg.environment()?;
    let scenarios = eval_scenarios(&env, cfg.eval.n_scenarios, seed)?;
    let rollouts = run_model(model, &env, &scenarios, initial_rtg(model, cfg), None)?;
    model_report("plain", cfg, &rollouts)
}

/// The same scenarios as [`eval_plain`] with multiplicative velocity noise
/// drawn uniformly from `[-noise_pct, noise_pct]` each step.
pub fn eval_noise(model: &DtModel, cfg: &RunConfig, noise_pct: f64, seed: u64) -> Result<MetricsReport> {
    if !(0.0..=MAX_NOISE).contains(&noise_pct) {
        return Err(Error::InvalidInput(format!("noise {noise_pct} outside [0, {MAX_NOISE}]")));
    }
    let env = cfg.environment()?;
    let scenarios = eval_scenarios(&env, cfg.eval.n_scenarios, seed)?;
    let noise = Some(VelocityNoise { pct: noise_pct, seed });
    let rollouts = run_model(model, &env, &scenarios, initial_rtg(model, cfg), noise)?;
    model_report(&format!("noise {noise_pct}"), cfg, &rollouts)
}

/// A change of vehicle count or layout relative to the training world.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variation {
    pub n_vehicles: usize,
    pub layout: LayoutKind,
}

impl Variation {
    pub const VEHICLES_3_ON_4WAY: Variation = Variation { n_vehicles: 3, layout: LayoutKind::FourWay };
    pub const FIVE_ON_3WAY: Variation = Variation { n_vehicles: 5, layout: LayoutKind::ThreeWay };

    pub fn parse(name: &str) -> Result<Variation> {
        match name {
            "vehicles_3_on_4way" => Ok(Self::VEHICLES_3_ON_4WAY),
            "five_on_3way" => Ok(Self::FIVE_ON_3WAY),
            _ => Err(Error::InvalidInput(format!(
                "unknown variation {name:?} (expected vehicles_3_on_4way or five_on_3way)"
            ))),
        }
    }

    pub fn name(&self) -> String {
        format!("{} vehicles on {}", self.n_vehicles, self.layout)
    }
}

/// The model on a different vehicle count or layout. Fewer vehicles than
/// model slots are padded with parked sentinels.
pub fn eval_variation(model: &DtModel, cfg: &RunConfig, variation: Variation, seed: u64) -> Result<MetricsReport> {
    if variation.n_vehicles == 0 {
        return Err(Error::InvalidInput("a variation needs at least one vehicle".into()));
    }
    if variation.n_vehicles > model.model.action_dim {
        return Err(Error::InvalidInput(format!(
            "{} vehicles exceed the model's {} slots",
            variation.n_vehicles, model.model.action_dim
        )));
    }
    let env = cfg.environment()?.with_layout(variation.layout)?.with_vehicles(variation.n_vehicles);
    let scenarios = eval_scenarios(&env, cfg.eval.n_scenarios, seed)?;
    let rollouts = run_model(model, &env, &scenarios, initial_rtg(model, cfg), None)?;
    model_report(&variation.name(), cfg, &rollouts)
}

fn fresh_spec(env: &Environment, slot: usize, entry_step: u32, rng: &mut impl Rng) -> VehicleSpec {
    let arms = env.layout.arms();
    let approach = arms[rng.gen_range(0..arms.len())];
    let others: Vec<Arm> = arms.iter().copied().filter(|&a| a != approach).collect();
    let destination = others[rng.gen_range(0..others.len())];
    VehicleSpec { slot, entry_step, approach, destination }
}

/// Continuous traffic for `duration_s`: every slot that empties, by exit or
/// by collision (which removes both vehicles), is refilled with a fresh
/// random vehicle that may enter `refill_gap` seconds later. The model's
/// history restarts at the conditioning return whenever a slot is refilled
/// or the timestep table runs out.
pub fn eval_continuous(model: &DtModel, cfg: &RunConfig, duration_s: f64, seed: u64) -> Result<MetricsReport> {
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(Error::InvalidInput(format!("duration {duration_s} must be positive")));
    }
    let env = cfg.environment()?;
    let n = env.scenario.n_vehicles;
    let dt = env.world.dt;
    let gap = (cfg.eval.refill_gap / dt).round() as u32;
    let ticks = (duration_s / dt).round() as u64;
    let mut rng = rng_from(seed, &[CONTINUOUS_STREAM]);
    let specs: Vec<VehicleSpec> = (0..n)
        .map(|slot| fresh_spec(&env, slot, gap * slot as u32, &mut rng))
        .collect();
    let mut world = World::new(&env, &specs)?;
    let g0 = initial_rtg(model, cfg);
    let mut policy = DtPolicy::new(model, g0)?;
    policy.reset(&world)?;
    let max_steps = model.model.max_timestep as u64 - 1;
    let mut since_restart = 0u64;
    let mut segments = 1usize;
    let mut crossings = 0usize;
    let mut collided_vehicles = 0usize;
    let mut total_return = 0.0;
    while world.tick() < ticks {
        let actions = policy.act(&world)?;
        let before: Vec<Phase> = world.vehicles().iter().map(|v| v.phase).collect();
        let collisions = world.step(&actions, None)?;
        let reward = reward_step(world.vehicles(), &collisions, &env.reward);
        total_return += reward;
        policy.observe(&world, &actions, reward)?;
        since_restart += 1;

        let mut emptied: Vec<usize> = Vec::new();
        for (slot, v) in world.vehicles().iter().enumerate() {
            if before[slot] != Phase::Exited && v.phase == Phase::Exited {
                crossings += 1;
                emptied.push(slot);
            }
        }
        for &(i, j) in &collisions {
            for slot in [i, j] {
                if !emptied.contains(&slot) {
                    world.remove(slot);
                    collided_vehicles += 1;
                    emptied.push(slot);
                }
            }
        }
        emptied.sort_unstable();
        let entry = (world.tick() as u32).saturating_add(gap);
        for &slot in &emptied {
            world.respawn(fresh_spec(&env, slot, entry, &mut rng))?;
        }
        let pending_or_active = world.vehicles().iter().filter(|v| v.phase != Phase::Exited).count();
        if pending_or_active != n {
            return Err(Error::Aborted {
                tick: world.tick(),
                reason: format!("{pending_or_active} of {n} slots occupied after refill"),
            });
        }
        if !emptied.is_empty() || since_restart >= max_steps {
            policy.restart(&world)?;
            since_restart = 0;
            segments += 1;
        }
    }
    let finished = crossings + collided_vehicles;
    let row = EpisodeRow {
        scenario: 0,
        seed,
        n_vehicles: n,
        return_total: total_return,
        length_s: world.tick() as f64 * dt,
        collided: collided_vehicles > 0,
    };
    let mut report = metrics_from_rows("continuous", &cfg.hash(), vec![row])?;
    report.continuous = Some(ContinuousStats {
        duration_s: world.tick() as f64 * dt,
        crossings,
        collided_vehicles,
        total_return,
        return_per_vehicle: if crossings > 0 { total_return / crossings as f64 } else { 0.0 },
        collision_rate_per_crossing: if finished > 0 { collided_vehicles as f64 / finished as f64 } else { 0.0 },
        segments,
    });
    Ok(report)
}

/// One scenario of the three-way comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub scenario: usize,
    pub seed: u64,
    pub dt_return: f64,
    pub dt_length_s: f64,
    pub dt_collided: bool,
    pub aim_return: f64,
    pub aim_length_s: f64,
    pub aim_collided: bool,
    pub optimal_makespan_s: f64,
}

impl CompareRow {
    /// Model minus coordinator episode length; `None` when the model
    /// collided.
    pub fn length_gap(&self) -> Option<f64> {
        (!self.dt_collided).then_some(self.dt_length_s - self.aim_length_s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub config_hash: String,
    /// Rows ranked by length gap, best first; collided rows last.
    pub rows: Vec<CompareRow>,
    pub dt: MetricsReport,
    pub aim: MetricsReport,
    /// Mean model length over the scenarios where it did not collide.
    pub dt_mean_length_s: f64,
    /// Mean coordinator length over the same scenarios.
    pub aim_mean_length_s_same: f64,
    /// Scenarios where the model finished strictly sooner.
    pub n_best: usize,
}

impl Comparison {
    pub fn length_ratio(&self) -> f64 {
        self.dt_mean_length_s / self.aim_mean_length_s_same
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# config {}\nscenario,seed,dt_return,dt_length_s,dt_collided,aim_return,aim_length_s,optimal_makespan_s,dt_minus_aim_s\n",
            self.config_hash
        );
        for r in &self.rows {
            let gap = r.length_gap().map(|g| format!("{g:.2}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.2},{},{:.6},{:.2},{:.2},{gap}",
                r.scenario,
                r.seed,
                r.dt_return,
                r.dt_length_s,
                r.dt_collided as u8,
                r.aim_return,
                r.aim_length_s,
                r.optimal_makespan_s
            );
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "config: {}", self.config_hash);
        let _ = writeln!(out, "scenarios: {}", self.rows.len());
        let _ = writeln!(out, "model collision rate: {:.4}", self.dt.collision_rate);
        let _ = writeln!(out, "coordinator collision rate: {:.4}", self.aim.collision_rate);
        let _ = writeln!(
            out,
            "mean length on model collision-free scenarios: model {:.3} s, coordinator {:.3} s, ratio {:.4}",
            self.dt_mean_length_s,
            self.aim_mean_length_s_same,
            self.length_ratio()
        );
        let opt = self.rows.iter().map(|r| r.optimal_makespan_s).sum::<f64>() / self.rows.len() as f64;
        let _ = writeln!(out, "mean optimal makespan: {opt:.3} s");
        let _ = writeln!(out, "model faster than coordinator: {} scenarios", self.n_best);
        out
    }
}

/// Model, coordinator and optimal schedule on the same `n` scenarios.
pub fn compare(model: &DtModel, cfg: &RunConfig, n: usize, seed: u64) -> Result<Comparison> {
    if n == 0 {
        return Err(Error::InvalidInput("compare needs at least one scenario".into()));
    }
    let env = cfg.environment()?;
    let scenarios = eval_scenarios(&env, n, seed)?;
    let rollouts = run_model(model, &env, &scenarios, initial_rtg(model, cfg), None)?;
    let aim = run_aim(cfg, &env, &scenarios)?;
    let optimal: Vec<f64> = scenarios
        .par_iter()
        .map(|s| oracle::solve(&env, s).map(|sch| sch.makespan))
        .collect::<Result<_>>()?;
    let mut rows: Vec<CompareRow> = (0..n)
        .map(|i| {
            let d = &rollouts[i].record;
            CompareRow {
                scenario: i,
                seed: scenarios[i].seed,
                dt_return: d.return_total,
                dt_length_s: d.length_s(),
                dt_collided: d.collided(),
                aim_return: aim[i].return_total,
                aim_length_s: aim[i].length_s(),
                aim_collided: aim[i].collided(),
                optimal_makespan_s: optimal[i],
            }
        })
        .collect();
    let free: Vec<&CompareRow> = rows.iter().filter(|r| !r.dt_collided).collect();
    let (dt_mean, aim_mean) = if free.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        let k = free.len() as f64;
        (
            free.iter().map(|r| r.dt_length_s).sum::<f64>() / k,
            free.iter().map(|r| r.aim_length_s).sum::<f64>() / k,
        )
    };
    let n_best = free.iter().filter(|r| r.dt_length_s < r.aim_length_s).count();
    rows.sort_by(|a, b| match (a.length_gap(), b.length_gap()) {
        (Some(x), Some(y)) => x.total_cmp(&y).then(a.scenario.cmp(&b.scenario)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.scenario.cmp(&b.scenario),
    });
    let hash = cfg.hash();
    let mut dt = model_report("model", cfg, &rollouts)?;
    dt.config_hash = hash.clone();
    Ok(Comparison {
        config_hash: hash.clone(),
        rows,
        dt,
        aim: compute_metrics("coordinator", &hash, &aim)?,
        dt_mean_length_s: dt_mean,
        aim_mean_length_s_same: aim_mean,
        n_best,
    })
}
