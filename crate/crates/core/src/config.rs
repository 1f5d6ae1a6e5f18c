//! Run configuration: physical constants, reward weights, coordinator and
//! model settings. Loaded from TOML; the in-repo default lives in
//! `configs/default.toml` and is compiled into the binary.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::world::{Layout, LayoutKind};

pub const DEFAULT_CONFIG_TOML: &str = include_str!("../configs/default.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub layout: LayoutKind,
    /// Simulation step, seconds.
    pub dt: f64,
    pub v_max: f64,
    pub a_min: f64,
    pub a_max: f64,
    pub arm_length: f64,
    pub lane_width: f64,
    pub interior_half: f64,
    pub vehicle_radius: f64,
    /// Extra headway beyond touching discs kept by queued vehicles and
    /// required before a new vehicle is admitted onto an arm.
    pub follow_gap: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            layout: LayoutKind::FourWay,
            dt: 0.1,
            v_max: 10.0,
            a_min: -1.5,
            a_max: 1.5,
            arm_length: 50.0,
            lane_width: 4.0,
            interior_half: 4.0,
            vehicle_radius: 1.5,
            follow_gap: 1.0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dt", self.dt),
            ("v_max", self.v_max),
            ("a_max", self.a_max),
            ("arm_length", self.arm_length),
            ("lane_width", self.lane_width),
            ("interior_half", self.interior_half),
            ("vehicle_radius", self.vehicle_radius),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {value}")));
            }
        }
        if !(self.a_min.is_finite() && self.a_min < 0.0) {
            return Err(Error::Config(format!("a_min must be negative, got {}", self.a_min)));
        }
        if self.interior_half < self.lane_width {
            return Err(Error::Config(format!(
                "interior_half ({}) must be at least lane_width ({})",
                self.interior_half, self.lane_width
            )));
        }
        if !(self.follow_gap >= 0.0) {
            return Err(Error::Config("follow_gap must be non-negative".into()));
        }
        Ok(())
    }

    /// Minimum centre distance kept along a lane.
    pub fn lane_gap(&self) -> f64 {
        2.0 * self.vehicle_radius + self.follow_gap
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    pub c1: f64,
    pub c2: f64,
    #[serde(default)]
    pub v_min: f64,
    pub v_max: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { c1: 1.5, c2: 100.0, v_min: 0.0, v_max: 10.0 }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(Error::Config("reward weights c1, c2 must be positive".into()));
        }
        if !(self.v_max > self.v_min) {
            return Err(Error::Config("reward v_max must exceed v_min".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n_vehicles: usize,
    /// Entry times are drawn from `[0, entry_window]` seconds.
    pub entry_window: f64,
    /// Episode truncation, seconds.
    pub t_max: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self { n_vehicles: 5, entry_window: 5.0, t_max: 60.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AimConfig {
    pub cell_size: f64,
    /// Added to the vehicle radius when marking reserved cells.
    pub safety_buffer: f64,
    /// A stopped vehicle without a reservation only creeps forward when at
    /// least this much room remains before its stopping target.
    pub restart_margin: f64,
}

impl Default for AimConfig {
    fn default() -> Self {
        Self { cell_size: 1.0, safety_buffer: 0.5, restart_margin: 2.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Supervise only the final position of each sampled window.
    LastOnly,
    /// Supervise every position of the window.
    AllPositions,
}

impl LossMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::LastOnly => "last_only",
            LossMode::AllPositions => "all_positions",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub context_len: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub embed_dim: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub dropout: f64,
    pub max_timestep: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            context_len: 10,
            n_layers: 3,
            n_heads: 4,
            embed_dim: 64,
            state_dim: 30,
            action_dim: 5,
            dropout: 0.0,
            max_timestep: 1024,
        }
    }
}

impl ModelConfig {
    /// The configuration used by the original large-scale runs.
    pub fn paper_scale() -> Self {
        Self {
            context_len: 30,
            n_layers: 12,
            n_heads: 8,
            embed_dim: 128,
            dropout: 0.1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.context_len == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.embed_dim == 0
            || self.state_dim == 0
            || self.action_dim == 0
            || self.max_timestep == 0
        {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !self.embed_dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Learning-rate shape after warmup.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    #[default]
    Constant,
    /// Half-cosine from the peak rate down to zero at the last update.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub warmup_frac: f64,
    #[serde(default)]
    pub lr_decay: LrDecay,
    pub loss_mode: LossMode,
    pub seed: u64,
    /// Emit a telemetry line every this many updates (0 disables).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 10,
            steps: 400,
            batch_size: 32,
            learning_rate: 1e-3,
            grad_clip: 0.25,
            warmup_frac: 0.02,
            lr_decay: LrDecay::Constant,
            loss_mode: LossMode::AllPositions,
            seed: 0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("iterations, steps and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.grad_clip > 0.0) {
            return Err(Error::Config("learning_rate and grad_clip must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Config("warmup_frac must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn total_updates(&self) -> usize {
        self.iterations * self.steps
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub n_scenarios: usize,
    pub noise_pct: f64,
    pub continuous_duration: f64,
    /// Delay before a refilled slot's vehicle may enter, seconds.
    pub refill_gap: f64,
    /// Initial return-to-go; `None` uses the dataset mean return.
    #[serde(default)]
    pub g0: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_scenarios: 100, noise_pct: 0.02, continuous_duration: 300.0, refill_gap: 1.0, g0: None }
    }
}

/// Every tunable of a run in one place.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub reward: RewardConfig,
    pub scenario: ScenarioConfig,
    pub aim: AimConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The defaults overlaid with a (possibly partial) config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::layered(&[text.as_str()], &[])
    }

    /// The defaults overlaid with each TOML document in turn, then with
    /// `section.key=value` overrides. Later layers win; a document only
    /// needs the keys it changes.
    pub fn layered(docs: &[&str], overrides: &[String]) -> Result<Self> {
        let mut merged: toml::Table = toml::from_str(DEFAULT_CONFIG_TOML).expect("default config parses");
        for doc in docs {
            let layer: toml::Table = toml::from_str(doc).map_err(|e| Error::Config(e.to_string()))?;
            merge_tables(&mut merged, layer);
        }
        for item in overrides {
            apply_override(&mut merged, item)?;
        }
        let cfg: RunConfig = toml::Value::Table(merged).try_into().map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The shipped default configuration.
    pub fn builtin() -> Self {
        Self::from_toml_str(DEFAULT_CONFIG_TOML).expect("shipped default config is valid")
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.reward.validate()?;
        if self.reward.v_max != self.world.v_max {
            return Err(Error::Config(format!(
                "reward.v_max ({}) must equal world.v_max ({})",
                self.reward.v_max, self.world.v_max
            )));
        }
        if self.scenario.n_vehicles == 0 {
            return Err(Error::Config("scenario.n_vehicles must be at least 1".into()));
        }
        if !(self.scenario.entry_window >= 0.0 && self.scenario.t_max > 0.0) {
            return Err(Error::Config("entry_window must be >= 0 and t_max > 0".into()));
        }
        if !(self.aim.cell_size > 0.0 && self.aim.safety_buffer >= 0.0) {
            return Err(Error::Config("aim cell_size must be positive, safety_buffer >= 0".into()));
        }
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex digest over every effective value.
    pub fn hash(&self) -> String {
        digest_hex(self.to_toml().as_bytes())
    }

    /// Digest of the parts that shape generated data (world, reward,
    /// scenario, coordinator). Model and training settings are excluded so a
    /// dataset stays valid across model sweeps.
    pub fn data_hash(&self) -> String {
        #[derive(Serialize)]
        struct DataPart<'a> {
            world: &'a WorldConfig,
            reward: &'a RewardConfig,
            scenario: &'a ScenarioConfig,
            aim: &'a AimConfig,
        }
        let part = DataPart {
            world: &self.world,
            reward: &self.reward,
            scenario: &self.scenario,
            aim: &self.aim,
        };
        digest_hex(toml::to_string(&part).expect("config serializes").as_bytes())
    }

    pub fn environment(&self) -> Result<Environment> {
        Environment::new(self.world.clone(), self.reward.clone(), self.scenario.clone())
    }
}

fn merge_tables(base: &mut toml::Table, layer: toml::Table) {
    for (key, value) in layer {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(l)) => merge_tables(b, l),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// Apply one `section.key=value` override. The value is read as a TOML
/// value, falling back to a bare string (`world.layout=three_way`).
fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let (path, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {item:?} is not of the form section.key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let keys: Vec<&str> = path.trim().split('.').collect();
    let (last, parents) = keys.split_last().expect("split yields at least one item");
    let mut cursor = table;
    for key in parents {
        cursor = match cursor.entry(key.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new())) {
            toml::Value::Table(t) => t,
            _ => return Err(Error::Config(format!("override {item:?}: {key} is not a section"))),
        };
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}

pub fn digest_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(32);
    for b in &digest[..16] {
        let _ = write!(out, "{b:02x}");
    }
    out
}

/// The simulated environment: layout plus the physical, reward and episode
/// constants every episode runs under. Immutable and shareable.
#[derive(Clone, Debug)]
pub struct Environment {
    pub layout: Layout,
    pub world: WorldConfig,
    pub reward: RewardConfig,
    pub scenario: ScenarioConfig,
}

impl Environment {
    pub fn new(world: WorldConfig, reward: RewardConfig, scenario: ScenarioConfig) -> Result<Self> {
        world.validate()?;
        reward.validate()?;
        let layout = Layout::build(world.layout, &world)?;
        Ok(Self { layout, world, reward, scenario })
    }

    /// Same constants on a different layout.
    pub fn with_layout(&self, kind: LayoutKind) -> Result<Self> {
        let mut world = self.world.clone();
        world.layout = kind;
        Self::new(world, self.reward.clone(), self.scenario.clone())
    }

    pub fn with_vehicles(&self, n_vehicles: usize) -> Self {
        let mut env = self.clone();
        env.scenario.n_vehicles = n_vehicles;
        env
    }

    pub fn horizon_steps(&self) -> u64 {
        (self.scenario.t_max / self.world.dt).round() as u64
    }
}

impl Default for Environment {
    fn default() -> Self {
        RunConfig::builtin().environment().expect("default environment is valid")
    }
}
