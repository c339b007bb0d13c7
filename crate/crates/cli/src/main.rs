use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use chaser_core::bridge::{bench_bridge, serve_env, RemoteEnv};
use chaser_core::checkpoint::load_agent;
use chaser_core::config::Config;
use chaser_core::eval::{
    endurance_run, episode_seed, evaluate, export_trajectory, plot_log, rollout, ActorPolicy,
    Controller, EvalConfig, PursuitOracle, RandomPolicy,
};
use chaser_core::trainer::{read_log, Phase, Trainer};

#[derive(Parser)]
#[command(
    name = "chaser-rl",
    version,
    about = "Train and evaluate a camera-guided drone chaser"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a policy from scratch, or continue from a training checkpoint.
    Train {
        /// `key = value` configuration file; unset keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides train.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides train.episodes; with --resume, the new total.
        #[arg(long)]
        episodes: Option<usize>,
        /// Run directory; defaults to runs/<unix time>-seed<seed>.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Training checkpoint to continue from; its stored configuration is used.
        #[arg(long, conflicts_with_all = ["config", "seed"])]
        resume: Option<PathBuf>,
    },
    /// Run frozen-policy episodes and report tracking success.
    Eval {
        #[arg(long, required_if_eq("policy", "actor"))]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// `random` and `oracle` are the reference baselines and need no checkpoint.
        #[arg(long, value_enum, default_value_t = PolicyKind::Actor)]
        policy: PolicyKind,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One long episode with respawns instead of termination.
    Endure {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 30_000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a training log as an SVG.
    Plot {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Host environments over TCP, one per connection.
    Serve {
        #[arg(long)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Measure step latency against a running server.
    BenchBridge {
        #[arg(long)]
        endpoint: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 10_000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PolicyKind {
    Actor,
    Random,
    Oracle,
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::from_file(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(Config::default()),
    }
}

fn run_dir(out: Option<PathBuf>, seed: u64) -> Result<PathBuf> {
    let dir = out.unwrap_or_else(|| {
        let secs = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        PathBuf::from(format!("runs/{secs}-seed{seed}"))
    });
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn train(
    config: Option<PathBuf>,
    seed: Option<u64>,
    episodes: Option<usize>,
    out: Option<PathBuf>,
    resume: Option<PathBuf>,
) -> Result<()> {
    let trainer = match &resume {
        Some(ckpt) => Trainer::resume(ckpt, episodes)?,
        None => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.set("train.seed", &s.to_string())?;
            }
            if let Some(n) = episodes {
                cfg.set("train.episodes", &n.to_string())?;
            }
            let dir = run_dir(out.clone(), cfg.train().seed)?;
            fs::write(dir.join("config.txt"), cfg.echo())?;
            let t = Trainer::new(cfg.train())?;
            return run_training(t, &dir);
        }
    };
    if trainer.episode >= trainer.cfg.episodes {
        bail!(
            "checkpoint already has {} episodes; pass --episodes to extend",
            trainer.episode
        );
    }
    let dir = match out {
        Some(d) => d,
        None => resume
            .as_deref()
            .and_then(Path::parent)
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(".")),
    };
    trainer.cfg.validate()?;
    run_training(trainer, &dir)
}

fn run_training(mut trainer: Trainer, dir: &Path) -> Result<()> {
    log::info!(
        "training episodes {}..{} into {}",
        trainer.episode + 1,
        trainer.cfg.episodes,
        dir.display()
    );
    let total = trainer.cfg.episodes;
    trainer.run(dir, |rec| {
        if rec.phase == Phase::Eval {
            log::info!(
                "eval after {}: reward {:.1} steps {} on-target {:.2}",
                rec.episode,
                rec.total_reward,
                rec.steps,
                rec.on_target_fraction
            );
        } else if rec.episode % 10 == 0 || rec.episode == total {
            log::info!(
                "episode {}/{}: reward {:.1} steps {} value error {:.1}",
                rec.episode,
                total,
                rec.total_reward,
                rec.steps,
                rec.value_error
            );
        }
    })?;
    println!("{}", dir.join("final.ckpt").display());
    Ok(())
}

fn eval(
    checkpoint: Option<PathBuf>,
    config: Option<PathBuf>,
    episodes: Option<usize>,
    seed: Option<u64>,
    policy: PolicyKind,
    out: Option<PathBuf>,
) -> Result<()> {
    let cfg = load_config(config.as_deref())?;
    let env_cfg = cfg.env();
    let mut ecfg: EvalConfig = cfg.eval();
    if let Some(n) = episodes {
        ecfg.episodes = n;
    }
    if let Some(s) = seed {
        ecfg.seed = s;
    }
    let agent = checkpoint
        .as_deref()
        .map(|p| load_agent(p).with_context(|| format!("loading {}", p.display())))
        .transpose()?;
    let mut ctrl: Box<dyn Controller + '_> = match (policy, &agent) {
        (PolicyKind::Actor, Some(a)) => Box::new(ActorPolicy(a)),
        (PolicyKind::Actor, None) => bail!("--checkpoint is required for the actor policy"),
        (PolicyKind::Random, _) => Box::new(RandomPolicy::default()),
        (PolicyKind::Oracle, _) => Box::new(PursuitOracle::default()),
    };
    let report = evaluate(ctrl.as_mut(), &env_cfg, &ecfg)?;
    let dir = run_dir(out, ecfg.seed)?;
    fs::write(dir.join("config.txt"), cfg.echo())?;
    write_json(&dir.join("eval.json"), &report)?;
    if ecfg.episodes > 0 {
        let first = rollout(
            ctrl.as_mut(),
            &env_cfg,
            episode_seed(ecfg.seed, 0),
            ecfg.success_threshold,
            None,
        )?;
        export_trajectory(&first.trace, &dir.join("trajectory.tsv"))?;
    }
    println!(
        "{} / {} episodes tracked ({:.1}%), mean detected fraction {:.3}",
        report.successes,
        report.episodes,
        100.0 * report.success_rate(),
        report.mean_detected_fraction
    );
    Ok(())
}

fn endure(
    checkpoint: PathBuf,
    config: Option<PathBuf>,
    steps: usize,
    seed: u64,
    out: Option<PathBuf>,
) -> Result<()> {
    let cfg = load_config(config.as_deref())?;
    let agent =
        load_agent(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let report = endurance_run(&agent, &cfg.env(), steps, seed)?;
    let dir = run_dir(out, seed)?;
    fs::write(dir.join("config.txt"), cfg.echo())?;
    export_trajectory(&report.trace, &dir.join("endurance.tsv"))?;
    let align = report.r_align();
    let window = align.len().min(1000);
    let mean = |xs: &[f64]| {
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().sum::<f64>() / xs.len() as f64
        }
    };
    let summary = serde_json::json!({
        "steps": report.rewards.len(),
        "respawns": report.respawns,
        "total_reward": report.rewards.iter().sum::<f64>(),
        "min_reward": report.rewards.iter().copied().fold(f64::INFINITY, f64::min),
        "max_reward": report.rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        "mean_r_align_first": mean(&align[..window]),
        "mean_r_align_last": mean(&align[align.len() - window..]),
    });
    write_json(&dir.join("endurance.json"), &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn plot(log_path: PathBuf, out: Option<PathBuf>) -> Result<()> {
    let records = read_log(&log_path)?;
    let out = out.unwrap_or_else(|| log_path.with_extension("svg"));
    fs::write(&out, plot_log(&records)).with_context(|| format!("writing {}", out.display()))?;
    println!("{}", out.display());
    Ok(())
}

fn serve(host: String, port: u16, config: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config.as_deref())?;
    let listener = std::net::TcpListener::bind((host.as_str(), port))
        .with_context(|| format!("binding {host}:{port}"))?;
    log::info!(
        "serving on {} config {}",
        listener.local_addr()?,
        cfg.hash()
    );
    serve_env(listener, cfg.env(), cfg.hash())?;
    Ok(())
}

fn bench(endpoint: String, config: Option<PathBuf>, steps: usize, seed: u64) -> Result<()> {
    let cfg = load_config(config.as_deref())?;
    let mut env = RemoteEnv::connect(endpoint.as_str(), seed, &cfg.hash())
        .with_context(|| format!("connecting to {endpoint}"))?;
    let report = bench_bridge(&mut env, steps)?;
    env.close()?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CHASER_RL_LOG", "info")).init();
    match Cli::parse().cmd {
        Cmd::Train {
            config,
            seed,
            episodes,
            out,
            resume,
        } => train(config, seed, episodes, out, resume),
        Cmd::Eval {
            checkpoint,
            config,
            episodes,
            seed,
            policy,
            out,
        } => eval(checkpoint, config, episodes, seed, policy, out),
        Cmd::Endure {
            checkpoint,
            config,
            steps,
            seed,
            out,
        } => endure(checkpoint, config, steps, seed, out),
        Cmd::Plot { log, out } => plot(log, out),
        Cmd::Serve { port, host, config } => serve(host, port, config),
        Cmd::BenchBridge {
            endpoint,
            config,
            steps,
            seed,
        } => bench(endpoint, config, steps, seed),
    }
}
