//! Episode orchestration, training metrics, and the resumable training loop.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ddpg::{
    Agent, DdpgConfig, DdpgError, Normalizer, OuConfig, OuNoise, ReplayBuffer, Transition,
};
use crate::env::{Action, Env, EnvConfig, EnvError, Environment, StackedState};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("episode {episode}: {source}")]
    Learner {
        episode: usize,
        #[source]
        source: DdpgError,
    },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl TrainError {
    pub(crate) fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }
}

/// SplitMix64 mix of a master seed and a stream index, so every random consumer gets an
/// independent, reproducible seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        ^ stream
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_AGENT: u64 = 1;
const STREAM_ENV: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_REPLAY: u64 = 4;
const STREAM_EVAL: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub episodes: usize,
    pub seed: u64,
    /// Frozen-policy evaluation after every this many training episodes; 0 disables it.
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// 0 disables periodic checkpoints (`final.ckpt` is always written).
    pub checkpoint_every: usize,
    pub env: EnvConfig,
    pub ddpg: DdpgConfig,
    pub ou: OuConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 6000,
            seed: 0,
            eval_every: 25,
            eval_episodes: 1,
            checkpoint_every: 100,
            env: EnvConfig::default(),
            ddpg: DdpgConfig::default(),
            ou: OuConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.episodes == 0 {
            return Err(TrainError::Config("episodes must be at least 1".into()));
        }
        self.env
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        self.ddpg
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        if !(self.ou.dt > 0.0 && self.ou.theta >= 0.0 && self.ou.sigma >= 0.0) {
            return Err(TrainError::Config("ou parameters out of range".into()));
        }
        Ok(())
    }

    pub fn normalizer(&self) -> Normalizer {
        Normalizer {
            frame_width: self.env.camera.width,
            frame_height: self.env.camera.height,
            max_speed: self.env.sim.max_speed,
            yaw_scale: std::f64::consts::PI,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EndCause {
    /// Lost-intruder termination.
    Lost,
    Truncated,
    /// Stopped by the caller's step limit.
    Stopped,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub phase: Phase,
    pub total_reward: f64,
    pub steps: usize,
    pub sum_align: f64,
    pub sum_track: f64,
    pub sum_penalty: f64,
    pub cause: EndCause,
    pub value_error: f64,
    pub detected_fraction: f64,
    pub on_target_fraction: f64,
    pub learner_updates: usize,
    pub mean_critic_loss: Option<f64>,
    pub wall_time: f64,
}

impl EpisodeRecord {
    /// Equality ignoring wall-clock time.
    pub fn same_outcome(&self, other: &Self) -> bool {
        Self {
            wall_time: 0.0,
            ..self.clone()
        } == Self {
            wall_time: 0.0,
            ..other.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub state: StackedState,
    pub action: Action,
    pub reward: f64,
    pub r_align: f64,
    pub r_track: f64,
    pub on_target: bool,
}

/// Exploration and learning state used by training episodes.
pub struct Exploration<'a> {
    pub noise: &'a mut OuNoise,
    pub noise_dt: f64,
    pub reset_noise: bool,
    pub buffer: &'a mut ReplayBuffer,
    pub rng: &'a mut ChaCha8Rng,
}

/// Mean `|G_t - Q(s_t, a_t)|` with `G_t` the discounted return to episode end.
pub fn absolute_value_error(returns_rewards: &[f64], q: &[f64], gamma: f64) -> f64 {
    assert_eq!(
        returns_rewards.len(),
        q.len(),
        "trace and predictions differ in length"
    );
    if q.is_empty() {
        return 0.0;
    }
    let mut g = 0.0;
    let mut total = 0.0;
    for (r, q) in returns_rewards.iter().zip(q).rev() {
        g = r + gamma * g;
        total += (g - q).abs();
    }
    total / q.len() as f64
}

/// Runs one episode. With `explore` set, acts with the noisy policy, stores transitions and
/// runs learner iterations; otherwise acts with the deterministic actor and learns nothing.
/// `max_steps` bounds episodes whose environment never truncates.
pub fn run_episode<E: Environment + ?Sized>(
    agent: &mut Agent,
    env: &mut E,
    mut explore: Option<Exploration<'_>>,
    episode: usize,
    max_steps: Option<usize>,
) -> Result<(EpisodeRecord, Vec<TraceStep>), TrainError> {
    let started = Instant::now();
    let learner_err = |source| TrainError::Learner { episode, source };
    if let Some(ex) = explore.as_mut() {
        if ex.reset_noise {
            ex.noise.reset();
        }
    }
    let mut state = env.reset()?;
    let mut trace = Vec::new();
    let (mut sum_align, mut sum_track, mut sum_penalty) = (0.0, 0.0, 0.0);
    let (mut detected, mut on_target) = (0usize, 0usize);
    let (mut updates, mut loss_sum) = (0usize, 0.0);
    let cause = loop {
        let action = match explore.as_mut() {
            Some(ex) => agent.select_action(&state, Some((&mut *ex.noise, ex.noise_dt))),
            None => agent.policy(&state),
        }
        .map_err(|e| learner_err(e.into()))?;
        let (action, _) = action.clamped();
        let out = env.step(action)?;
        if !out.reward.is_finite() {
            return Err(learner_err(DdpgError::NonFinite("reward")));
        }
        sum_align += out.info.r_align;
        sum_track += out.info.r_track;
        sum_penalty += out.info.penalty;
        detected += out.info.box_present as usize;
        on_target += out.info.on_target as usize;
        trace.push(TraceStep {
            state,
            action,
            reward: out.reward,
            r_align: out.info.r_align,
            r_track: out.info.r_track,
            on_target: out.info.on_target,
        });
        if let Some(ex) = explore.as_mut() {
            ex.buffer.push(Transition {
                state,
                action,
                reward: out.reward,
                next_state: out.state,
                terminal: out.terminated,
            });
            if let Some(stats) = agent.maybe_learn(ex.buffer, ex.rng).map_err(learner_err)? {
                updates += 1;
                loss_sum += stats.critic_loss;
            }
        }
        state = out.state;
        if out.terminated {
            break EndCause::Lost;
        }
        if out.truncated {
            break EndCause::Truncated;
        }
        if max_steps.is_some_and(|m| trace.len() >= m) {
            break EndCause::Stopped;
        }
    };
    let pairs: Vec<(StackedState, Action)> = trace.iter().map(|t| (t.state, t.action)).collect();
    let q = agent.q_values(&pairs).map_err(|e| learner_err(e.into()))?;
    let rewards: Vec<f64> = trace.iter().map(|t| t.reward).collect();
    let value_error = absolute_value_error(&rewards, &q, agent.cfg.gamma);
    let n = trace.len();
    let record = EpisodeRecord {
        episode,
        phase: if explore.is_some() {
            Phase::Train
        } else {
            Phase::Eval
        },
        total_reward: sum_align + sum_track + sum_penalty,
        steps: n,
        sum_align,
        sum_track,
        sum_penalty,
        cause,
        value_error,
        detected_fraction: detected as f64 / n as f64,
        on_target_fraction: on_target as f64 / n as f64,
        learner_updates: updates,
        mean_critic_loss: (updates > 0).then(|| loss_sum / updates as f64),
        wall_time: started.elapsed().as_secs_f64(),
    };
    Ok((record, trace))
}

/// Everything that evolves during training. Saving it and loading it back continues the
/// run exactly.
#[derive(Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub agent: Agent,
    pub buffer: ReplayBuffer,
    pub noise: OuNoise,
    pub replay_rng: ChaCha8Rng,
    pub env: Env,
    /// Training episodes completed so far.
    pub episode: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let mut agent_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_AGENT));
        let agent = Agent::new(&mut agent_rng, cfg.ddpg.clone(), cfg.normalizer());
        let env = Env::new(cfg.env.clone(), derive_seed(cfg.seed, STREAM_ENV))?;
        Ok(Self {
            agent,
            buffer: ReplayBuffer::new(cfg.ddpg.buffer_capacity),
            noise: OuNoise::new(&cfg.ou, derive_seed(cfg.seed, STREAM_NOISE)),
            replay_rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_REPLAY)),
            env,
            episode: 0,
            cfg,
        })
    }

    pub fn train_episode(&mut self) -> Result<(EpisodeRecord, Vec<TraceStep>), TrainError> {
        let idx = self.episode + 1;
        let explore = Exploration {
            noise: &mut self.noise,
            noise_dt: self.cfg.ou.dt,
            reset_noise: self.cfg.ou.reset_per_episode,
            buffer: &mut self.buffer,
            rng: &mut self.replay_rng,
        };
        let out = run_episode(&mut self.agent, &mut self.env, Some(explore), idx, None)?;
        self.episode = idx;
        Ok(out)
    }

    /// Frozen-policy episodes on their own environment streams, keyed by the training
    /// episode they follow so they never perturb training randomness.
    pub fn eval_episodes(&mut self) -> Result<Vec<EpisodeRecord>, TrainError> {
        let mut out = Vec::with_capacity(self.cfg.eval_episodes);
        for k in 0..self.cfg.eval_episodes {
            let seed = derive_seed(
                self.cfg.seed,
                STREAM_EVAL + (self.episode as u64) * 1024 + k as u64,
            );
            let mut env = Env::new(self.cfg.env.clone(), seed)?;
            let (rec, _) = run_episode(&mut self.agent, &mut env, None, self.episode, None)?;
            out.push(rec);
        }
        Ok(out)
    }

    /// Trains until `cfg.episodes`, appending records to `out/log.jsonl` and writing
    /// checkpoints; `on_record` sees every record as it is produced.
    pub fn run(
        &mut self,
        out_dir: &Path,
        mut on_record: impl FnMut(&EpisodeRecord),
    ) -> Result<Vec<EpisodeRecord>, TrainError> {
        fs::create_dir_all(out_dir).map_err(|e| TrainError::io(out_dir, e))?;
        let log_path = out_dir.join("log.jsonl");
        let mut log = open_log(&log_path, self.episode == 0)?;
        let mut records = Vec::new();
        let mut emit = |rec: EpisodeRecord, log: &mut BufWriter<File>| -> Result<(), TrainError> {
            let line = serde_json::to_string(&rec).map_err(|e| TrainError::io(&log_path, e))?;
            writeln!(log, "{line}")
                .and_then(|_| log.flush())
                .map_err(|e| TrainError::io(&log_path, e))?;
            on_record(&rec);
            records.push(rec);
            Ok(())
        };
        while self.episode < self.cfg.episodes {
            let (rec, _) = self.train_episode()?;
            log::debug!(
                "episode {} reward {:.1} steps {} cause {:?}",
                rec.episode,
                rec.total_reward,
                rec.steps,
                rec.cause
            );
            emit(rec, &mut log)?;
            if self.cfg.eval_every > 0 && self.episode.is_multiple_of(self.cfg.eval_every) {
                for rec in self.eval_episodes()? {
                    emit(rec, &mut log)?;
                }
            }
            if self.cfg.checkpoint_every > 0
                && self.episode.is_multiple_of(self.cfg.checkpoint_every)
            {
                self.save(&out_dir.join(format!("checkpoint-{}.ckpt", self.episode)))?;
            }
        }
        self.save(&out_dir.join("final.ckpt"))?;
        Ok(records)
    }
}

fn open_log(path: &Path, truncate: bool) -> Result<BufWriter<File>, TrainError> {
    let file = if truncate {
        File::create(path)
    } else {
        OpenOptions::new().append(true).create(true).open(path)
    }
    .map_err(|e| TrainError::io(path, e))?;
    Ok(BufWriter::new(file))
}

/// Reads a `log.jsonl` back.
pub fn read_log(path: &Path) -> Result<Vec<EpisodeRecord>, TrainError> {
    let text = fs::read_to_string(path).map_err(|e| TrainError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| TrainError::io(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_error_examples() {
        assert_eq!(absolute_value_error(&[5.0], &[3.0], 0.99), 2.0);
        assert!((absolute_value_error(&[1.0, 1.0], &[0.0, 0.0], 0.99) - 1.495).abs() < 1e-12);
        let r = [1.0, -2.0, 3.0];
        let g2 = 3.0;
        let g1 = -2.0 + 0.9 * g2;
        let g0 = 1.0 + 0.9 * g1;
        assert_eq!(absolute_value_error(&r, &[g0, g1, g2], 0.9), 0.0);
    }

    #[test]
    fn derived_seeds_differ_by_stream() {
        let a: Vec<u64> = (0..100).map(|s| derive_seed(7, s)).collect();
        let mut b = a.clone();
        b.sort();
        b.dedup();
        assert_eq!(b.len(), a.len());
        assert_ne!(derive_seed(1, 1), derive_seed(2, 1));
    }
}
