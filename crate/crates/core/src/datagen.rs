//! Training corpora: generation, mixing and the on-disk format.
//!
//! A dataset file is
//!
//! ```text
//! magic "AIMDTDS\0" | u32 version | u32 manifest length | manifest (TOML)
//! then per episode: u32 payload length | payload | 8-byte SHA-256 prefix
//! ```
//!
//! All integers and floats are little-endian. A payload holds the episode
//! header (steps, vehicles, termination, layout, scenario seed, per-vehicle
//! entry specs) followed by the f32 blocks `states`, `actions`, `rewards`,
//! `rtgs`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aim::AimPolicy;
use crate::config::{digest_hex, RunConfig};
use crate::episode::{
    run_episode, sample_scenario, sample_with_approaches, EpisodeRecord, MaxSpeedPolicy, ScenarioSpec,
    Termination,
};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};
use crate::world::{Arm, LayoutKind, VehicleSpec, STATE_FEATURES};

pub const MAGIC: &[u8; 8] = b"AIMDTDS\0";
pub const FORMAT_VERSION: u32 = 1;

const FREE_STREAM: u64 = 0xF4EE;
const COLLISION_STREAM: u64 = 0xC011;
const MIX_STREAM: u64 = 0x313;
/// Resampling attempts per slot before collision-free generation gives up.
const MAX_ATTEMPTS: u64 = 64;
/// Episodes simulated per parallel batch when hunting for collisions.
const COLLISION_BATCH: u64 = 256;
/// Minimum standard deviation written to the manifest.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Aim,
    Uncoordinated,
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub source: Source,
    pub layout: LayoutKind,
    pub n_vehicles: usize,
    pub dt: f64,
    pub n_episodes: usize,
    pub n_collision_free: usize,
    pub n_collision: usize,
    /// Collision episodes added per free episode when mixed.
    #[serde(default)]
    pub mix_ratio: Option<f64>,
    pub return_mean: f64,
    pub return_std: f64,
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
}

impl DatasetManifest {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn hash(&self) -> String {
        digest_hex(self.to_toml().as_bytes())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub episodes: Vec<EpisodeRecord>,
}

/// Return and per-feature state statistics of a set of episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetStats {
    pub return_mean: f64,
    pub return_std: f64,
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
}

/// Population statistics, accumulated in episode order. Standard deviations
/// are floored at [`STD_FLOOR`].
pub fn compute_stats(episodes: &[EpisodeRecord], state_dim: usize) -> DatasetStats {
    let mut sum = vec![0.0f64; state_dim];
    let mut sq = vec![0.0f64; state_dim];
    let mut count = 0usize;
    for ep in episodes {
        for row in ep.states.chunks_exact(state_dim) {
            for (k, &x) in row.iter().enumerate() {
                let x = f64::from(x);
                sum[k] += x;
                sq[k] += x * x;
            }
            count += 1;
        }
    }
    let (state_mean, state_std) = if count == 0 {
        (vec![0.0; state_dim], vec![1.0; state_dim])
    } else {
        let c = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / c).collect();
        let std = sq.iter().zip(&mean).map(|(q, m)| (q / c - m * m).max(0.0).sqrt().max(STD_FLOOR)).collect();
        (mean, std)
    };
    let (return_mean, return_std) = if episodes.is_empty() {
        (0.0, 1.0)
    } else {
        let c = episodes.len() as f64;
        let mean = episodes.iter().map(|e| e.return_total).sum::<f64>() / c;
        let var = episodes.iter().map(|e| (e.return_total - mean).powi(2)).sum::<f64>() / c;
        (mean, var.sqrt().max(STD_FLOOR))
    };
    DatasetStats { return_mean, return_std, state_mean, state_std }
}

impl Dataset {
    /// Assemble a dataset and fill in counts and statistics.
    pub fn new(
        cfg_hash: &str,
        seed: u64,
        source: Source,
        layout: LayoutKind,
        n_vehicles: usize,
        dt: f64,
        episodes: Vec<EpisodeRecord>,
    ) -> Result<Dataset> {
        for (i, ep) in episodes.iter().enumerate() {
            if ep.n_vehicles != n_vehicles || ep.scenario.layout != layout {
                return Err(Error::Dataset(format!(
                    "episode {i} has {} vehicles on {}, expected {n_vehicles} on {layout}",
                    ep.n_vehicles, ep.scenario.layout
                )));
            }
        }
        let stats = compute_stats(&episodes, n_vehicles * STATE_FEATURES);
        let n_collision = episodes.iter().filter(|e| e.collided()).count();
        Ok(Dataset {
            manifest: DatasetManifest {
                format_version: FORMAT_VERSION,
                config_hash: cfg_hash.to_string(),
                seed,
                source,
                layout,
                n_vehicles,
                dt,
                n_episodes: episodes.len(),
                n_collision_free: episodes.len() - n_collision,
                n_collision,
                mix_ratio: None,
                return_mean: stats.return_mean,
                return_std: stats.return_std,
                state_mean: stats.state_mean,
                state_std: stats.state_std,
            },
            episodes,
        })
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.manifest.n_vehicles * STATE_FEATURES
    }
}

/// All approach combinations for `n` vehicles, in lexicographic order of arm
/// indices.
pub fn approach_combinations(arms: &[Arm], n: usize) -> Vec<Vec<Arm>> {
    let k = arms.len();
    let total = k.pow(n as u32);
    (0..total)
        .map(|mut c| {
            let mut combo = vec![arms[0]; n];
            for slot in (0..n).rev() {
                combo[slot] = arms[c % k];
                c /= k;
            }
            combo
        })
        .collect()
}

fn run_aim(cfg: &RunConfig, env: &crate::config::Environment, scenario: &ScenarioSpec) -> Result<EpisodeRecord> {
    let mut policy = AimPolicy::for_env(env, &cfg.aim);
    let mut ep = run_episode(env, scenario, &mut policy, cfg.scenario.t_max)?;
    ep.quantize();
    Ok(ep)
}

/// Coordinator demonstrations: `n_per_combination` episodes for every
/// approach combination. A collided episode is discarded and its slot
/// resampled.
pub fn gen_collision_free(cfg: &RunConfig, n_per_combination: usize, seed: u64) -> Result<Dataset> {
    if n_per_combination == 0 {
        return Err(Error::InvalidInput("n_per_combination must be at least 1".into()));
    }
    let env = cfg.environment()?;
    let n = cfg.scenario.n_vehicles;
    let combos = approach_combinations(env.layout.arms(), n);
    let jobs: Vec<(usize, usize)> =
        (0..combos.len()).flat_map(|c| (0..n_per_combination).map(move |k| (c, k))).collect();
    let episodes = jobs
        .par_iter()
        .map(|&(c, k)| {
            for attempt in 0..MAX_ATTEMPTS {
                let s = derive_seed(seed, &[FREE_STREAM, c as u64, k as u64, attempt]);
                let scenario = sample_with_approaches(&env, &combos[c], s)?;
                let ep = run_aim(cfg, &env, &scenario)?;
                if !ep.collided() {
                    return Ok(ep);
                }
            }
            Err(Error::Dataset(format!("combination {c} sample {k}: every attempt collided")))
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(&cfg.data_hash(), seed, Source::Aim, env.layout.kind, n, env.world.dt, episodes)
}

/// Uncoordinated full-throttle episodes, keeping the first `n_episodes`
/// that end in a collision.
pub fn gen_collision(cfg: &RunConfig, n_episodes: usize, seed: u64) -> Result<Dataset> {
    if n_episodes == 0 {
        return Err(Error::InvalidInput("n_episodes must be at least 1".into()));
    }
    let env = cfg.environment()?;
    let n = cfg.scenario.n_vehicles;
    let mut kept = Vec::with_capacity(n_episodes);
    let mut next = 0u64;
    let limit = (n_episodes as u64).saturating_mul(1000).max(10_000);
    while kept.len() < n_episodes {
        if next >= limit {
            return Err(Error::Dataset(format!(
                "only {} colliding episodes in {next} attempts",
                kept.len()
            )));
        }
        let batch: Vec<u64> = (next..next + COLLISION_BATCH).collect();
        next += COLLISION_BATCH;
        let results = batch
            .par_iter()
            .map(|&i| {
                let scenario = sample_scenario(&env, n, derive_seed(seed, &[COLLISION_STREAM, i]))?;
                let mut ep = run_episode(&env, &scenario, &mut MaxSpeedPolicy, cfg.scenario.t_max)?;
                ep.quantize();
                Ok(ep)
            })
            .collect::<Result<Vec<_>>>()?;
        kept.extend(results.into_iter().filter(EpisodeRecord::collided).take(n_episodes - kept.len()));
    }
    Dataset::new(&cfg.data_hash(), seed, Source::Uncoordinated, env.layout.kind, n, env.world.dt, kept)
}

/// Number of collision episodes `mix` adds for a free corpus of size `n_free`.
pub fn mix_count(n_free: usize, ratio: f64) -> usize {
    // The epsilon keeps products like 0.29 * 100 from rounding down a whole
    // episode.
    (ratio * n_free as f64 + 1e-9).floor() as usize
}

/// All free episodes plus `floor(ratio * |free|)` collision episodes drawn
/// without replacement, shuffled.
pub fn mix(free: &Dataset, collision: &Dataset, ratio: f64, seed: u64) -> Result<Dataset> {
    if !(ratio >= 0.0 && ratio.is_finite()) {
        return Err(Error::InvalidInput(format!("mix ratio {ratio} must be finite and non-negative")));
    }
    let (a, b) = (&free.manifest, &collision.manifest);
    if a.layout != b.layout || a.n_vehicles != b.n_vehicles || a.dt != b.dt {
        return Err(Error::Dataset("free and collision datasets describe different worlds".into()));
    }
    if a.config_hash != b.config_hash {
        return Err(Error::Dataset(format!(
            "config hash mismatch: {} vs {}",
            a.config_hash, b.config_hash
        )));
    }
    let k = mix_count(free.len(), ratio);
    if k > collision.len() {
        return Err(Error::Dataset(format!(
            "need {k} collision episodes, only {} available",
            collision.len()
        )));
    }
    let mut rng = rng_from(seed, &[MIX_STREAM]);
    let mut picked = index::sample(&mut rng, collision.len(), k).into_vec();
    picked.sort_unstable();
    let mut episodes: Vec<EpisodeRecord> = free.episodes.clone();
    episodes.extend(picked.iter().map(|&i| collision.episodes[i].clone()));
    episodes.shuffle(&mut rng);
    let mut out = Dataset::new(&a.config_hash, seed, Source::Mixed, a.layout, a.n_vehicles, a.dt, episodes)?;
    out.manifest.mix_ratio = Some(ratio);
    Ok(out)
}

fn encode_episode(ep: &EpisodeRecord, out: &mut Vec<u8>) {
    let put_u32 = |out: &mut Vec<u8>, x: u32| out.extend_from_slice(&x.to_le_bytes());
    put_u32(out, ep.len() as u32);
    put_u32(out, ep.n_vehicles as u32);
    put_u32(out, ep.termination.code());
    put_u32(out, u32::from(ep.scenario.layout.code()));
    out.extend_from_slice(&ep.scenario.seed.to_le_bytes());
    for v in &ep.scenario.vehicles {
        put_u32(out, v.entry_step);
        out.extend_from_slice(&[v.approach.id(), v.destination.id(), 0, 0]);
    }
    for block in [&ep.states, &ep.actions] {
        for &x in block.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    for block in [&ep.rewards, &ep.rtgs] {
        for &x in block.iter() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> std::result::Result<&[u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or("payload too short")?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> std::result::Result<Vec<f32>, String> {
        let bytes = self.take(n.checked_mul(4).ok_or("block size overflow")?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

fn decode_episode(payload: &[u8], dt: f64) -> std::result::Result<EpisodeRecord, String> {
    let mut c = Cursor { buf: payload, pos: 0 };
    let t = c.u32()? as usize;
    let n = c.u32()? as usize;
    let termination = Termination::from_code(c.u32()?).ok_or("unknown termination code")?;
    let layout = u8::try_from(c.u32()?).ok().and_then(LayoutKind::from_code).ok_or("unknown layout code")?;
    let seed = c.u64()?;
    if t == 0 || n == 0 {
        return Err("episode has no steps or no vehicles".into());
    }
    let mut vehicles = Vec::with_capacity(n);
    for slot in 0..n {
        let entry_step = c.u32()?;
        let ids = c.take(4)?;
        let approach = Arm::from_id(ids[0]).ok_or("bad approach arm")?;
        let destination = Arm::from_id(ids[1]).ok_or("bad destination arm")?;
        vehicles.push(VehicleSpec { slot, entry_step, approach, destination });
    }
    let states = c.f32s(t * n * STATE_FEATURES)?;
    let actions = c.f32s(t * n)?;
    let rewards: Vec<f64> = c.f32s(t)?.into_iter().map(f64::from).collect();
    let rtgs: Vec<f64> = c.f32s(t)?.into_iter().map(f64::from).collect();
    if c.pos != payload.len() {
        return Err(format!("{} trailing bytes in payload", payload.len() - c.pos));
    }
    let return_total = rtgs[0];
    Ok(EpisodeRecord {
        scenario: ScenarioSpec { layout, vehicles, seed },
        n_vehicles: n,
        dt,
        states,
        actions,
        rewards,
        rtgs,
        termination,
        return_total,
    })
}

fn checksum(payload: &[u8]) -> [u8; 8] {
    Sha256::digest(payload)[..8].try_into().expect("8 bytes")
}

/// Serialize to bytes. The same dataset always yields the same bytes.
pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let manifest = ds.manifest.to_toml();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    let mut payload = Vec::new();
    for ep in &ds.episodes {
        payload.clear();
        encode_episode(ep, &mut payload);
        out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&checksum(&payload));
    }
    out
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    if ds.manifest.n_episodes != ds.episodes.len() {
        return Err(Error::Dataset(format!(
            "manifest lists {} episodes, dataset holds {}",
            ds.manifest.n_episodes,
            ds.episodes.len()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_dataset(ds))?;
    w.flush()?;
    Ok(())
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], what: impl FnOnce() -> String) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Dataset(format!("{}: unexpected end of file", what())),
        _ => Error::Io(e),
    })
}

/// Load a dataset, checking the header, every record checksum and the
/// episode count. When `expected_hash` is given the manifest must carry it.
pub fn read_dataset(path: &Path, expected_hash: Option<&str>) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut head = [0u8; 16];
    read_exact_or(&mut r, &mut head, || "header".into())?;
    if &head[..8] != MAGIC {
        return Err(Error::Dataset("not a dataset file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(head[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Dataset(format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let mlen = u32::from_le_bytes(head[12..16].try_into().expect("4 bytes")) as usize;
    let mut mbytes = vec![0u8; mlen];
    read_exact_or(&mut r, &mut mbytes, || "manifest".into())?;
    let text = String::from_utf8(mbytes).map_err(|_| Error::Dataset("manifest is not UTF-8".into()))?;
    let manifest: DatasetManifest =
        toml::from_str(&text).map_err(|e| Error::Dataset(format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Dataset(format!("manifest format version {}", manifest.format_version)));
    }
    if let Some(h) = expected_hash {
        if manifest.config_hash != h {
            return Err(Error::Dataset(format!(
                "dataset built for config {}, expected {h}",
                manifest.config_hash
            )));
        }
    }
    let mut episodes = Vec::with_capacity(manifest.n_episodes.min(1 << 20));
    for i in 0..manifest.n_episodes {
        let mut len = [0u8; 4];
        read_exact_or(&mut r, &mut len, || format!("record {i}"))?;
        let mut payload = vec![0u8; u32::from_le_bytes(len) as usize];
        read_exact_or(&mut r, &mut payload, || format!("record {i}"))?;
        let mut sum = [0u8; 8];
        read_exact_or(&mut r, &mut sum, || format!("record {i}"))?;
        if sum != checksum(&payload) {
            return Err(Error::Dataset(format!("record {i}: checksum mismatch")));
        }
        let ep = decode_episode(&payload, manifest.dt).map_err(|e| Error::Dataset(format!("record {i}: {e}")))?;
        if ep.n_vehicles != manifest.n_vehicles || ep.scenario.layout != manifest.layout {
            return Err(Error::Dataset(format!("record {i}: vehicles or layout disagree with manifest")));
        }
        ep.validate(1e-4).map_err(|e| Error::Dataset(format!("record {i}: {e}")))?;
        episodes.push(ep);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Dataset(format!(
            "{} bytes after the last of {} records",
            rest.len(),
            manifest.n_episodes
        )));
    }
    let n_collision = episodes.iter().filter(|e| e.collided()).count();
    if n_collision != manifest.n_collision || episodes.len() - n_collision != manifest.n_collision_free {
        return Err(Error::Dataset("episode counts disagree with manifest".into()));
    }
    Ok(Dataset { manifest, episodes })
}
