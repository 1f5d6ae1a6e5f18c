use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use aimdt::aim::AimPolicy;
use aimdt::config::RunConfig;
use aimdt::datagen::{gen_collision, gen_collision_free, mix, read_dataset, write_dataset};
use aimdt::episode::{run_episode, sample_scenario, EpisodeOptions, MaxSpeedPolicy};
use aimdt::eval::{self, Variation};
use aimdt::model::{check_dimensions, fit, load_checkpoint, rollout, save_checkpoint, DtModel};
use aimdt::oracle;
use aimdt::plot::episode_svg;
use aimdt::world::LayoutKind;

/// Intersection coordination with a return-conditioned sequence model.
///
/// Every command reads the built-in default configuration, overlaid with
/// `--config` files and `--set` overrides (later wins); command flags win
/// over both. All randomness derives from `--seed`.
#[derive(Parser, Debug)]
#[command(name = "aimdt", version)]
struct Cli {
    /// TOML config file(s) overlaid on the defaults, in order.
    #[arg(long, global = true)]
    config: Vec<PathBuf>,
    /// Override one config value, e.g. `--set train.learning_rate=3e-4`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Root seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum DataPolicy {
    /// Reservation coordinator, collision-free episodes.
    Aim,
    /// Everyone at full throttle, colliding episodes only.
    Uncoordinated,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Layout {
    FourWay,
    ThreeWay,
}

impl From<Layout> for LayoutKind {
    fn from(l: Layout) -> LayoutKind {
        match l {
            Layout::FourWay => LayoutKind::FourWay,
            Layout::ThreeWay => LayoutKind::ThreeWay,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Suite {
    Plain,
    Noise,
    Continuous,
    Variation,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum PlotPolicy {
    Aim,
    Model,
    Uncoordinated,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a dataset of episodes.
    GenData {
        #[arg(long)]
        layout: Option<Layout>,
        #[arg(long, value_enum)]
        policy: DataPolicy,
        /// Episodes per approach combination (coordinator data).
        #[arg(long, conflicts_with = "episodes")]
        per_combination: Option<usize>,
        /// Number of colliding episodes to keep (uncoordinated data).
        #[arg(long)]
        episodes: Option<usize>,
        /// Vehicles per episode.
        #[arg(long)]
        vehicles: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Add a fraction of collision episodes to a collision-free dataset.
    Mix {
        #[arg(long)]
        free: PathBuf,
        #[arg(long)]
        collision: PathBuf,
        /// Collision episodes added per free episode.
        #[arg(long)]
        ratio: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Extra config layer with `[model]` and/or `[train]` sections.
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint; prints a report and optionally writes CSV rows.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value = "plain")]
        suite: Suite,
        /// Velocity noise fraction for the noise suite.
        #[arg(long)]
        noise: Option<f64>,
        /// vehicles_3_on_4way or five_on_3way, for the variation suite.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        scenarios: Option<usize>,
        /// Length of the continuous suite, seconds.
        #[arg(long)]
        duration: Option<f64>,
        /// Initial return-to-go (default: the training data's mean return).
        #[arg(long)]
        g0: Option<f64>,
        /// Write the report here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Model vs coordinator vs optimal schedule on the same scenarios.
    Compare {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 100)]
        scenarios: usize,
        #[arg(long)]
        g0: Option<f64>,
        /// CSV destination (default: standard output).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Optimal crossing order for a random scenario.
    Schedule {
        #[arg(long)]
        vehicles: Option<usize>,
        #[arg(long)]
        layout: Option<Layout>,
    },
    /// Render one episode as SVG.
    Plot {
        #[arg(long, value_enum, default_value = "aim")]
        policy: PlotPolicy,
        /// Required for `--policy model`.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        g0: Option<f64>,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        vehicles: Option<usize>,
        #[arg(long)]
        layout: Option<Layout>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(cli: &Cli, extra: Option<&Path>, overrides: &[String]) -> anyhow::Result<RunConfig> {
    let mut docs = Vec::new();
    for path in cli.config.iter().map(PathBuf::as_path).chain(extra) {
        docs.push(std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?);
    }
    let mut all = cli.set.clone();
    all.extend_from_slice(overrides);
    let docs: Vec<&str> = docs.iter().map(String::as_str).collect();
    Ok(RunConfig::layered(&docs, &all)?)
}

/// Render `key=value` overrides for the flags that were given.
fn flag_overrides(pairs: &[(&str, Option<String>)]) -> Vec<String> {
    pairs.iter().filter_map(|(k, v)| v.as_ref().map(|v| format!("{k}={v}"))).collect()
}

fn layout_name(l: Option<Layout>) -> Option<String> {
    l.map(|l| format!("\"{}\"", LayoutKind::from(l).as_str()))
}

fn write_text(path: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_model(path: &Path) -> anyhow::Result<DtModel> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let seed = cli.seed;
    match &cli.command {
        Command::GenData { layout, policy, per_combination, episodes, vehicles, out } => {
            let cfg = load_config(
                &cli,
                None,
                &flag_overrides(&[
                    ("world.layout", layout_name(*layout)),
                    ("scenario.n_vehicles", vehicles.map(|v| v.to_string())),
                ]),
            )?;
            let ds = match policy {
                DataPolicy::Aim => {
                    let Some(k) = per_combination else { bail!("--policy aim needs --per-combination") };
                    gen_collision_free(&cfg, *k, seed)?
                }
                DataPolicy::Uncoordinated => {
                    let Some(n) = episodes else { bail!("--policy uncoordinated needs --episodes") };
                    gen_collision(&cfg, *n, seed)?
                }
            };
            write_dataset(&ds, out)?;
            eprintln!(
                "wrote {} episodes ({} collided) to {}, config {}",
                ds.len(),
                ds.manifest.n_collision,
                out.display(),
                ds.manifest.config_hash
            );
        }
        Command::Mix { free, collision, ratio, out } => {
            let free = read_dataset(free, None)?;
            let coll = read_dataset(collision, None)?;
            let ds = mix(&free, &coll, *ratio, seed)?;
            write_dataset(&ds, out)?;
            eprintln!(
                "wrote {} episodes ({} collided) to {}, config {}",
                ds.len(),
                ds.manifest.n_collision,
                out.display(),
                ds.manifest.config_hash
            );
        }
        Command::Train { data, model_config, iters, steps, batch, lr, out } => {
            let cfg = load_config(
                &cli,
                model_config.as_deref(),
                &flag_overrides(&[
                    ("train.iterations", iters.map(|v| v.to_string())),
                    ("train.steps", steps.map(|v| v.to_string())),
                    ("train.batch_size", batch.map(|v| v.to_string())),
                    ("train.learning_rate", lr.map(|v| format!("{v:e}"))),
                    ("train.seed", Some(seed.to_string())),
                ]),
            )?;
            let ds = read_dataset(data, Some(&cfg.data_hash()))
                .with_context(|| format!("reading dataset {}", data.display()))?;
            check_dimensions(&ds, &cfg.model)?;
            let (model, _) = fit(&cfg, &ds, |e| {
                eprintln!(
                    "update {:>7}  loss {:.6}  lr {:.2e}  grad_norm {:.4}  {:.1}s",
                    e.update, e.loss, e.learning_rate, e.grad_norm, e.elapsed_s
                )
            })?;
            save_checkpoint(&model, out)?;
            eprintln!("wrote checkpoint {}, config {}", out.display(), model.config_hash);
        }
        Command::Eval { ckpt, suite, noise, variant, scenarios, duration, g0, out, csv } => {
            let cfg = load_config(
                &cli,
                None,
                &flag_overrides(&[
                    ("eval.n_scenarios", scenarios.map(|v| v.to_string())),
                    ("eval.noise_pct", noise.map(|v| v.to_string())),
                    ("eval.continuous_duration", duration.map(|v| v.to_string())),
                    ("eval.g0", g0.map(|v| v.to_string())),
                ]),
            )?;
            let model = load_model(ckpt)?;
            let report = match suite {
                Suite::Plain => eval::eval_plain(&model, &cfg, seed)?,
                Suite::Noise => eval::eval_noise(&model, &cfg, cfg.eval.noise_pct, seed)?,
                Suite::Continuous => eval::eval_continuous(&model, &cfg, cfg.eval.continuous_duration, seed)?,
                Suite::Variation => {
                    let Some(name) = variant else { bail!("--suite variation needs --variant") };
                    eval::eval_variation(&model, &cfg, Variation::parse(name)?, seed)?
                }
            };
            write_text(out.as_deref(), &report.to_text())?;
            if let Some(path) = csv {
                write_text(Some(path), &report.to_csv())?;
            }
        }
        Command::Compare { ckpt, scenarios, g0, out } => {
            let cfg = load_config(&cli, None, &flag_overrides(&[("eval.g0", g0.map(|v| v.to_string()))]))?;
            let model = load_model(ckpt)?;
            let cmp = eval::compare(&model, &cfg, *scenarios, seed)?;
            eprint!("{}", cmp.to_text());
            write_text(out.as_deref(), &cmp.to_csv())?;
        }
        Command::Schedule { vehicles, layout } => {
            let cfg = load_config(
                &cli,
                None,
                &flag_overrides(&[
                    ("world.layout", layout_name(*layout)),
                    ("scenario.n_vehicles", vehicles.map(|v| v.to_string())),
                ]),
            )?;
            let env = cfg.environment()?;
            let scenario = sample_scenario(&env, cfg.scenario.n_vehicles, seed)?;
            let schedule = oracle::solve(&env, &scenario)?;
            println!("config = \"{}\"", cfg.hash());
            println!("seed = {seed}");
            for v in &scenario.vehicles {
                println!(
                    "# slot {}: {} -> {}, enters at {:.1} s",
                    v.slot,
                    v.approach.label(),
                    v.destination.label(),
                    v.entry_time(env.world.dt)
                );
            }
            print!("{}", schedule.to_text());
        }
        Command::Plot { policy, ckpt, g0, noise, vehicles, layout, out } => {
            let cfg = load_config(
                &cli,
                None,
                &flag_overrides(&[
                    ("world.layout", layout_name(*layout)),
                    ("scenario.n_vehicles", vehicles.map(|v| v.to_string())),
                    ("eval.g0", g0.map(|v| v.to_string())),
                ]),
            )?;
            let env = cfg.environment()?;
            let scenario = sample_scenario(&env, cfg.scenario.n_vehicles, seed)?;
            let t_max = cfg.scenario.t_max;
            let ep = match policy {
                PlotPolicy::Aim => run_episode(&env, &scenario, &mut AimPolicy::for_env(&env, &cfg.aim), t_max)?,
                PlotPolicy::Uncoordinated => run_episode(&env, &scenario, &mut MaxSpeedPolicy, t_max)?,
                PlotPolicy::Model => {
                    let Some(path) = ckpt else { bail!("--policy model needs --ckpt") };
                    let model = load_model(path)?;
                    let opts = EpisodeOptions {
                        t_max,
                        noise: noise.map(|pct| aimdt::episode::VelocityNoise { pct, seed }),
                    };
                    rollout(&model, &env, &scenario, eval::initial_rtg(&model, &cfg), &opts)?.record
                }
            };
            let title = format!(
                "{policy:?} seed {seed}: {:.1} s, return {:.2}, {:?} (config {})",
                ep.length_s(),
                ep.return_total,
                ep.termination,
                cfg.hash()
            );
            std::fs::write(out, episode_svg(&ep, &env.layout, &title))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
