//! Frozen-policy evaluation, tracking-success accounting, trajectory export and the
//! endurance run.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ddpg::Agent;
use crate::env::{Action, Env, EnvConfig, EnvError, Environment, LostPolicy, StackedState};
use crate::nn::NnError;
use crate::perception::{frame_center_distance, BoundingBox, CameraModel};
use crate::scalar::Scalar;
use crate::sim::{SimConfig, WorldState, YawMode};
use crate::trainer::{absolute_value_error, derive_seed, EpisodeRecord, Phase};

/// Per-step tracking predicate: a detection whose centre lies within `min(W, H)` pixels of
/// the frame centre.
pub fn tracking_success_step<T: Scalar>(
    bbox: Option<&BoundingBox<T>>,
    camera: &CameraModel<T>,
) -> bool {
    bbox.is_some_and(|b| frame_center_distance(b, camera) <= camera.min_side())
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: &'static str, step: usize },
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> EvalError {
    EvalError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// A closed-loop controller. Controllers that are not the learned policy may read the true
/// world state.
pub trait Controller {
    fn begin_episode(&mut self, _seed: u64) {}
    fn act(
        &mut self,
        state: &StackedState,
        world: &WorldState,
        sim: &SimConfig,
    ) -> Result<Action, NnError>;
    /// Agent whose critic scores the visited pairs, if any.
    fn agent(&self) -> Option<&Agent> {
        None
    }
}

/// The deterministic actor, without exploration noise.
pub struct ActorPolicy<'a>(pub &'a Agent);

impl Controller for ActorPolicy<'_> {
    fn act(
        &mut self,
        state: &StackedState,
        _: &WorldState,
        _: &SimConfig,
    ) -> Result<Action, NnError> {
        self.0.policy(state)
    }

    fn agent(&self) -> Option<&Agent> {
        Some(self.0)
    }
}

/// Uniform random commands, reseeded per episode.
pub struct RandomPolicy {
    rng: ChaCha8Rng,
}

impl Default for RandomPolicy {
    fn default() -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }
}

impl Controller for RandomPolicy {
    fn begin_episode(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    fn act(&mut self, _: &StackedState, _: &WorldState, _: &SimConfig) -> Result<Action, NnError> {
        let mut a = [0.0; 4];
        for x in &mut a {
            *x = self.rng.random_range(-1.0..=1.0);
        }
        Ok(Action::from_array(a))
    }
}

/// Privileged pursuit: turns toward the true intruder bearing and servoes to a standoff
/// point using the intruder's true velocity as feed-forward.
#[derive(Debug, Clone, Copy)]
pub struct PursuitOracle {
    pub standoff: f64,
    pub gain: f64,
}

impl Default for PursuitOracle {
    fn default() -> Self {
        Self {
            standoff: 2.5,
            gain: 1.0,
        }
    }
}

impl Controller for PursuitOracle {
    fn act(
        &mut self,
        _: &StackedState,
        world: &WorldState,
        sim: &SimConfig,
    ) -> Result<Action, NnError> {
        let c = &world.chaser;
        let rel = c.to_body(world.intruder.position);
        let bearing = rel.y.atan2(rel.x);
        let yaw = match sim.yaw_mode {
            YawMode::Rate => bearing / (sim.max_yaw_rate * sim.dt),
            YawMode::Absolute => crate::geom::wrap_angle(c.yaw + bearing) / std::f64::consts::PI,
        };
        let v_body = world.intruder.velocity.rotate_z(-c.yaw);
        let err = rel - crate::geom::Vec3::new(self.standoff, 0.0, 0.0);
        let want = v_body + err * self.gain;
        Ok(Action::new(
            want.x / sim.max_speed,
            want.y / sim.max_speed,
            want.z / sim.max_speed,
            yaw,
        )
        .clamped()
        .0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub seed: u64,
    pub total_reward: f64,
    pub steps: usize,
    pub lost: bool,
    pub detected_fraction: f64,
    pub on_target_fraction: f64,
    pub value_error: Option<f64>,
    pub success: bool,
    pub respawns: u64,
    /// Mean pixel distance of the detection centre from the frame centre, over detected steps.
    pub mean_center_offset_px: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub successes: usize,
    pub success_threshold: f64,
    pub total_rewards: Vec<f64>,
    pub value_errors: Vec<f64>,
    pub mean_detected_fraction: f64,
    /// Set when no detection can sit farther than `min(W, H)` from the centre, so the
    /// per-step tracking predicate reduces to "detected".
    pub predicate_is_detection: bool,
    pub per_episode: Vec<EpisodeSummary>,
    /// Per-step rewards of every episode.
    #[serde(skip)]
    pub reward_series: Vec<Vec<f64>>,
}

impl EvalReport {
    pub fn success_rate(&self) -> f64 {
        if self.episodes == 0 {
            0.0
        } else {
            self.successes as f64 / self.episodes as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub t: usize,
    pub chaser: [f64; 3],
    pub intruder: [f64; 3],
    pub detected: bool,
    pub r_align: f64,
    pub r_track: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrajectoryTrace {
    pub points: Vec<TrajectoryPoint>,
}

impl TrajectoryTrace {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn r_align(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.r_align).collect()
    }

    pub fn r_track(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.r_track).collect()
    }
}

/// Full record of one controlled episode.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub summary: EpisodeSummary,
    pub trace: TrajectoryTrace,
    pub rewards: Vec<f64>,
}

/// Runs one episode of `ctrl` on a fresh environment seeded with `seed`. `max_steps` caps
/// episodes that never truncate on their own.
pub fn rollout<C: Controller + ?Sized>(
    ctrl: &mut C,
    env_cfg: &EnvConfig,
    seed: u64,
    success_threshold: f64,
    max_steps: Option<usize>,
) -> Result<Rollout, EvalError> {
    let mut env = Env::new(env_cfg.clone(), seed)?;
    ctrl.begin_episode(derive_seed(seed, 0xC0));
    let mut state = env.reset()?;
    let mut trace = TrajectoryTrace::default();
    let mut rewards = Vec::new();
    let mut pairs = Vec::new();
    let (mut detected, mut on_target) = (0usize, 0usize);
    let mut offset_sum = 0.0;
    let mut lost = false;
    loop {
        let world = env.world().expect("reset done");
        let action = ctrl.act(&state, world, &env_cfg.sim)?.clamped().0;
        let out = env.step(action)?;
        let step = rewards.len();
        if !out.reward.is_finite() || !out.state.to_flat().iter().all(|v| v.is_finite()) {
            return Err(EvalError::NonFinite {
                what: "step outcome",
                step,
            });
        }
        let world = env.world().expect("reset done");
        trace.points.push(TrajectoryPoint {
            t: step,
            chaser: world.chaser.position.to_array(),
            intruder: world.intruder.position.to_array(),
            detected: out.info.box_present,
            r_align: out.info.r_align,
            r_track: out.info.r_track,
        });
        if !world.chaser.position.is_finite() || !world.intruder.position.is_finite() {
            return Err(EvalError::NonFinite {
                what: "position",
                step,
            });
        }
        rewards.push(out.reward);
        pairs.push((state, action));
        detected += out.info.box_present as usize;
        if let Some(b) = &out.info.detection {
            offset_sum += frame_center_distance(b, &env_cfg.camera);
        }
        on_target += out.info.on_target as usize;
        state = out.state;
        if out.terminated {
            lost = true;
            break;
        }
        if out.truncated || max_steps.is_some_and(|m| rewards.len() >= m) {
            break;
        }
    }
    let n = rewards.len();
    let value_error = match ctrl.agent() {
        Some(agent) => {
            let q = agent.q_values(&pairs)?;
            Some(absolute_value_error(&rewards, &q, agent.cfg.gamma))
        }
        None => None,
    };
    let on_target_fraction = on_target as f64 / n as f64;
    let summary = EpisodeSummary {
        seed,
        total_reward: rewards.iter().sum(),
        steps: n,
        lost,
        detected_fraction: detected as f64 / n as f64,
        on_target_fraction,
        value_error,
        success: !lost && on_target_fraction >= success_threshold,
        respawns: env.respawns(),
        mean_center_offset_px: (detected > 0).then(|| offset_sum / detected as f64),
    };
    Ok(Rollout {
        summary,
        trace,
        rewards,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub episodes: usize,
    pub seed: u64,
    /// Fraction of steps on which the tracking predicate must hold.
    pub success_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 500,
            seed: 0,
            success_threshold: 0.9,
        }
    }
}

/// Seed of evaluation episode `index`; independent of how many episodes are run.
pub fn episode_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, 0xE0A1_0000_0000 + index as u64)
}

/// Frozen-policy batch evaluation; nothing is learned and the agent is only read.
pub fn evaluate<C: Controller + ?Sized>(
    ctrl: &mut C,
    env_cfg: &EnvConfig,
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    let mut per_episode = Vec::with_capacity(cfg.episodes);
    let mut reward_series = Vec::with_capacity(cfg.episodes);
    for i in 0..cfg.episodes {
        let r = rollout(
            ctrl,
            env_cfg,
            episode_seed(cfg.seed, i),
            cfg.success_threshold,
            None,
        )?;
        per_episode.push(r.summary);
        reward_series.push(r.rewards);
    }
    let n = per_episode.len();
    Ok(EvalReport {
        episodes: n,
        successes: per_episode.iter().filter(|e| e.success).count(),
        success_threshold: cfg.success_threshold,
        total_rewards: per_episode.iter().map(|e| e.total_reward).collect(),
        value_errors: per_episode.iter().filter_map(|e| e.value_error).collect(),
        mean_detected_fraction: if n == 0 {
            0.0
        } else {
            per_episode.iter().map(|e| e.detected_fraction).sum::<f64>() / n as f64
        },
        predicate_is_detection: env_cfg.camera.half_diagonal() <= env_cfg.camera.min_side(),
        per_episode,
        reward_series,
    })
}

#[derive(Debug, Clone)]
pub struct EnduranceReport {
    pub trace: TrajectoryTrace,
    pub rewards: Vec<f64>,
    pub respawns: u64,
}

impl EnduranceReport {
    pub fn r_align(&self) -> Vec<f64> {
        self.trace.r_align()
    }

    pub fn r_track(&self) -> Vec<f64> {
        self.trace.r_track()
    }
}

/// One uninterrupted episode of `steps` steps: no truncation, and lost intruders are
/// respawned in view (and counted) instead of ending the run.
pub fn endurance_run(
    agent: &Agent,
    env_cfg: &EnvConfig,
    steps: usize,
    seed: u64,
) -> Result<EnduranceReport, EvalError> {
    let mut cfg = env_cfg.clone();
    cfg.truncate = false;
    cfg.lost_policy = LostPolicy::Respawn;
    let r = rollout(&mut ActorPolicy(agent), &cfg, seed, 0.0, Some(steps))?;
    Ok(EnduranceReport {
        trace: r.trace,
        rewards: r.rewards,
        respawns: r.summary.respawns,
    })
}

const TRACE_HEADER: &str =
    "t\tchaser_x\tchaser_y\tchaser_z\tintruder_x\tintruder_y\tintruder_z\tdetected\tr_align\tr_track";

/// Writes `path` as a tab-separated table and a matching `.svg` plot next to it.
pub fn export_trajectory(trace: &TrajectoryTrace, path: &Path) -> Result<PathBuf, EvalError> {
    let mut out = String::with_capacity(64 * (trace.len() + 1));
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for p in &trace.points {
        let [cx, cy, cz] = p.chaser;
        let [ix, iy, iz] = p.intruder;
        writeln!(
            out,
            "{}\t{cx}\t{cy}\t{cz}\t{ix}\t{iy}\t{iz}\t{}\t{}\t{}",
            p.t, p.detected as u8, p.r_align, p.r_track
        )
        .expect("writing to a string");
    }
    fs::write(path, out).map_err(|e| io_err(path, e))?;
    let svg_path = path.with_extension("svg");
    fs::write(&svg_path, trajectory_svg(trace)).map_err(|e| io_err(&svg_path, e))?;
    Ok(svg_path)
}

pub fn parse_trajectory(path: &Path) -> Result<TrajectoryTrace, EvalError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(TRACE_HEADER) {
        return Err(io_err(path, "line 1: unexpected header"));
    }
    let mut points = Vec::new();
    for (i, line) in lines.enumerate() {
        let bad = |what: &str| io_err(path, format!("line {}: {what}", i + 2));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 10 {
            return Err(bad("expected 10 columns"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
        points.push(TrajectoryPoint {
            t: f[0].parse().map_err(|_| bad("bad step index"))?,
            chaser: [num(f[1])?, num(f[2])?, num(f[3])?],
            intruder: [num(f[4])?, num(f[5])?, num(f[6])?],
            detected: match f[7] {
                "1" => true,
                "0" => false,
                _ => return Err(bad("detected must be 0 or 1")),
            },
            r_align: num(f[8])?,
            r_track: num(f[9])?,
        });
    }
    Ok(TrajectoryTrace { points })
}

const CHASER_COLOR: &str = "#2ca02c";
const INTRUDER_COLOR: &str = "#d62728";

struct Panel {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

impl Panel {
    /// Maps data ranges onto the panel, keeping a small margin.
    fn polyline(
        &self,
        xs: &[f64],
        ys: &[f64],
        xr: (f64, f64),
        yr: (f64, f64),
        style: &str,
    ) -> String {
        let sx = |v: f64| self.x + 10.0 + (v - xr.0) / (xr.1 - xr.0) * (self.w - 20.0);
        let sy = |v: f64| self.y + self.h - 10.0 - (v - yr.0) / (yr.1 - yr.0) * (self.h - 20.0);
        let mut pts = String::new();
        for (x, y) in xs.iter().zip(ys) {
            write!(pts, "{:.2},{:.2} ", sx(*x), sy(*y)).expect("writing to a string");
        }
        format!(
            "<polyline fill=\"none\" {style} points=\"{}\"/>\n",
            pts.trim_end()
        )
    }

    fn frame(&self, title: &str) -> String {
        format!(
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#999\"/>\n\
             <text x=\"{}\" y=\"{}\" font-size=\"13\" font-family=\"sans-serif\">{title}</text>\n",
            self.x,
            self.y,
            self.w,
            self.h,
            self.x + 4.0,
            self.y - 6.0
        )
    }
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
            (a.min(v), b.max(v))
        });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn svg_doc(width: f64, height: f64, body: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{body}</svg>\n"
    )
}

/// Top-down (x-y) and side (x-z) views, chaser in green and intruder in red.
pub fn trajectory_svg(trace: &TrajectoryTrace) -> String {
    let col = |pick: fn(&TrajectoryPoint) -> [f64; 3], k: usize| -> Vec<f64> {
        trace.points.iter().map(|p| pick(p)[k]).collect()
    };
    let chaser = |p: &TrajectoryPoint| p.chaser;
    let intruder = |p: &TrajectoryPoint| p.intruder;
    let panels = [
        (
            Panel {
                x: 20.0,
                y: 30.0,
                w: 420.0,
                h: 380.0,
            },
            1,
            "top-down (x, y)",
        ),
        (
            Panel {
                x: 470.0,
                y: 30.0,
                w: 420.0,
                h: 380.0,
            },
            2,
            "side (x, z)",
        ),
    ];
    let mut body = String::new();
    for (panel, k, title) in &panels {
        let (cx, ix) = (col(chaser, 0), col(intruder, 0));
        let (cv, iv) = (col(chaser, *k), col(intruder, *k));
        let xr = range(cx.iter().chain(&ix).copied());
        let yr = range(cv.iter().chain(&iv).copied());
        body.push_str(&panel.frame(title));
        let cs = format!("stroke=\"{CHASER_COLOR}\" stroke-width=\"2\" class=\"chaser\"");
        let is = format!("stroke=\"{INTRUDER_COLOR}\" stroke-width=\"2\" stroke-dasharray=\"6 3\" class=\"intruder\"");
        body.push_str(&panel.polyline(&cx, &cv, xr, yr, &cs));
        body.push_str(&panel.polyline(&ix, &iv, xr, yr, &is));
    }
    svg_doc(910.0, 430.0, &body)
}

/// Reward-per-episode and value-error curves from a training log, training episodes as a
/// line and interleaved evaluation episodes as a second line.
pub fn plot_log(records: &[EpisodeRecord]) -> String {
    let split = |phase: Phase, f: fn(&EpisodeRecord) -> f64| -> (Vec<f64>, Vec<f64>) {
        records
            .iter()
            .filter(|r| r.phase == phase)
            .map(|r| (r.episode as f64, f(r)))
            .unzip()
    };
    let panels = [
        (
            Panel {
                x: 20.0,
                y: 30.0,
                w: 420.0,
                h: 300.0,
            },
            "total reward per episode",
            (|r: &EpisodeRecord| r.total_reward) as fn(&EpisodeRecord) -> f64,
        ),
        (
            Panel {
                x: 470.0,
                y: 30.0,
                w: 420.0,
                h: 300.0,
            },
            "absolute value error",
            |r: &EpisodeRecord| r.value_error,
        ),
    ];
    let mut body = String::new();
    for (panel, title, f) in &panels {
        let (tx, ty) = split(Phase::Train, *f);
        let (ex, ey) = split(Phase::Eval, *f);
        let xr = range(tx.iter().chain(&ex).copied());
        let yr = range(ty.iter().chain(&ey).copied());
        body.push_str(&panel.frame(title));
        body.push_str(&panel.polyline(
            &tx,
            &ty,
            xr,
            yr,
            "stroke=\"#1f77b4\" stroke-width=\"1\" class=\"train\"",
        ));
        body.push_str(&panel.polyline(
            &ex,
            &ey,
            xr,
            yr,
            "stroke=\"#ff7f0e\" stroke-width=\"2\" class=\"eval\"",
        ));
    }
    svg_doc(910.0, 350.0, &body)
}
