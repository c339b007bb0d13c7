//! The pursuit MDP: stacked observations, the align/track reward model with penalties, and
//! episode termination.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eval::tracking_success_step;
use crate::perception::{
    apply_detection_noise, frame_center_distance, perimeter, project, BoundingBox as GenericBox,
    CameraModel as GenericCamera, DetectionNoise,
};
use crate::sim::{
    self, reset_world, respawn_intruder, step_world, SimConfig, SimError, WorldState,
};

pub use crate::sim::Action;

type BoundingBox = GenericBox<f64>;
type CameraModel = GenericCamera<f64>;

pub const OBS_DIM: usize = 8;
pub const HISTORY: usize = 5;
pub const STATE_DIM: usize = OBS_DIM * HISTORY;
pub const ACTION_DIM: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("episode over")]
    EpisodeOver,
    #[error("environment has not been reset")]
    NotReset,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("remote error {code}: {message}")]
    Remote { code: String, message: String },
}

/// One detector frame plus the chaser's own velocity and heading.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Observation {
    pub x_low: f64,
    pub y_low: f64,
    pub x_high: f64,
    pub y_high: f64,
    pub v_x: f64,
    pub v_y: f64,
    pub v_z: f64,
    pub yaw_d: f64,
}

impl Observation {
    /// Zero-filled box fields stand for "no detection".
    pub fn new(detection: Option<&BoundingBox>, velocity: [f64; 3], yaw: f64) -> Self {
        let b = detection.copied().unwrap_or_default();
        Self {
            x_low: b.x_low,
            y_low: b.y_low,
            x_high: b.x_high,
            y_high: b.y_high,
            v_x: velocity[0],
            v_y: velocity[1],
            v_z: velocity[2],
            yaw_d: yaw,
        }
    }

    pub fn to_array(self) -> [f64; OBS_DIM] {
        [
            self.x_low,
            self.y_low,
            self.x_high,
            self.y_high,
            self.v_x,
            self.v_y,
            self.v_z,
            self.yaw_d,
        ]
    }

    pub fn from_array(a: [f64; OBS_DIM]) -> Self {
        Self {
            x_low: a[0],
            y_low: a[1],
            x_high: a[2],
            y_high: a[3],
            v_x: a[4],
            v_y: a[5],
            v_z: a[6],
            yaw_d: a[7],
        }
    }

    pub fn has_detection(&self) -> bool {
        self.x_low != 0.0 || self.y_low != 0.0 || self.x_high != 0.0 || self.y_high != 0.0
    }
}

/// The five most recent observations, oldest first.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StackedState {
    pub frames: [Observation; HISTORY],
}

impl StackedState {
    pub fn filled(obs: Observation) -> Self {
        Self {
            frames: [obs; HISTORY],
        }
    }

    pub fn newest(&self) -> &Observation {
        &self.frames[HISTORY - 1]
    }

    /// Drops the oldest frame and appends `obs`.
    pub fn push(&self, obs: Observation) -> Self {
        let mut frames = self.frames;
        frames.rotate_left(1);
        frames[HISTORY - 1] = obs;
        Self { frames }
    }

    /// Flattened frame-major: 8 components of the oldest frame first.
    pub fn to_flat(&self) -> [f64; STATE_DIM] {
        let mut out = [0.0; STATE_DIM];
        for (i, f) in self.frames.iter().enumerate() {
            out[i * OBS_DIM..(i + 1) * OBS_DIM].copy_from_slice(&f.to_array());
        }
        out
    }

    pub fn from_flat(v: &[f64]) -> Option<Self> {
        if v.len() != STATE_DIM {
            return None;
        }
        let mut frames = [Observation::default(); HISTORY];
        for (i, f) in frames.iter_mut().enumerate() {
            let mut a = [0.0; OBS_DIM];
            a.copy_from_slice(&v[i * OBS_DIM..(i + 1) * OBS_DIM]);
            *f = Observation::from_array(a);
        }
        Some(Self { frames })
    }
}

pub fn stack_observation(history: &StackedState, obs: Observation) -> StackedState {
    history.push(obs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub r_max: f64,
    pub r_min: f64,
    /// Centre offset mapped to `r_min`; the frame half-diagonal.
    pub d_max: f64,
    /// Perimeter mapped to `r_max`.
    pub perimeter_ref: f64,
    pub collision_distance: f64,
    pub collision_penalty: f64,
    pub lost_penalty: f64,
    pub lost_steps: u32,
    pub max_steps: u32,
}

/// Perimeter of the projected intruder at `standoff` metres, `8 f r / z`.
pub fn perimeter_at(camera: &CameraModel, radius: f64, standoff: f64) -> f64 {
    8.0 * camera.focal * radius / standoff
}

impl RewardConfig {
    pub const DEFAULT_STANDOFF: f64 = 2.0;

    pub fn for_camera(camera: &CameraModel, intruder_radius: f64) -> Self {
        Self {
            r_max: 5.0,
            r_min: -100.0,
            d_max: camera.half_diagonal(),
            perimeter_ref: perimeter_at(camera, intruder_radius, Self::DEFAULT_STANDOFF),
            collision_distance: 0.5,
            collision_penalty: -100.0,
            lost_penalty: -200.0,
            lost_steps: 50,
            max_steps: 750,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.r_min < self.r_max) {
            return Err("r_min must be below r_max".into());
        }
        if !(self.perimeter_ref > 0.0 && self.d_max > 0.0) {
            return Err("perimeter_ref and d_max must be positive".into());
        }
        if self.lost_steps == 0 || self.max_steps == 0 {
            return Err("lost_steps and max_steps must be positive".into());
        }
        Ok(())
    }

    fn span(&self) -> f64 {
        self.r_max - self.r_min
    }
}

/// Best at the frame centre, falling linearly to `r_min` at `d_max`; zero without a detection.
pub fn reward_align(
    detection: Option<&BoundingBox>,
    camera: &CameraModel,
    cfg: &RewardConfig,
) -> f64 {
    match detection {
        None => 0.0,
        Some(b) => {
            let d = frame_center_distance(b, camera);
            (cfg.r_max - cfg.span() * d / cfg.d_max).clamp(cfg.r_min, cfg.r_max)
        }
    }
}

/// Rises linearly with the box perimeter, reaching `r_max` at `perimeter_ref`; zero when the
/// perimeter is zero.
pub fn reward_track(detection: Option<&BoundingBox>, cfg: &RewardConfig) -> f64 {
    let p = perimeter(detection);
    if p <= 0.0 {
        return 0.0;
    }
    (cfg.r_min + cfg.span() * p / cfg.perimeter_ref).clamp(cfg.r_min, cfg.r_max)
}

/// Collision and lost-intruder penalties; the flag requests termination.
pub fn penalty(distance_m: f64, miss_streak: u32, cfg: &RewardConfig) -> (f64, bool) {
    let mut p = 0.0;
    if distance_m <= cfg.collision_distance {
        p += cfg.collision_penalty;
    }
    let lost = miss_streak >= cfg.lost_steps;
    if lost {
        p += cfg.lost_penalty;
    }
    (p, lost)
}

/// What happens after `lost_steps` consecutive misses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LostPolicy {
    Terminate,
    /// Penalise, put the intruder back in view and keep going.
    Respawn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub sim: SimConfig,
    pub camera: CameraModel,
    pub noise: DetectionNoise,
    pub reward: RewardConfig,
    pub lost_policy: LostPolicy,
    /// Step cap; `false` disables truncation.
    pub truncate: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        let sim = SimConfig::default();
        let camera = CameraModel::default();
        let reward = RewardConfig::for_camera(&camera, sim.intruder.radius);
        Self {
            sim,
            camera,
            noise: DetectionNoise::default(),
            reward,
            lost_policy: LostPolicy::Terminate,
            truncate: true,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        self.sim.validate()?;
        self.reward
            .validate()
            .map_err(|m| EnvError::Sim(SimError::Config(m)))?;
        if !(self.camera.width > 0.0 && self.camera.height > 0.0 && self.camera.focal > 0.0) {
            return Err(SimError::Config("camera dimensions must be positive".into()).into());
        }
        if !(0.0..=1.0).contains(&self.noise.miss_rate) || self.noise.pixel_jitter_sigma < 0.0 {
            return Err(SimError::Config("detection noise out of range".into()).into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub distance: f64,
    pub box_present: bool,
    pub detection: Option<BoundingBox>,
    pub r_align: f64,
    pub r_track: f64,
    pub penalty: f64,
    pub miss_streak: u32,
    pub respawned: bool,
    /// Box centre within `min(W, H)` of the frame centre.
    pub on_target: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub state: StackedState,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
    pub info: StepInfo,
}

/// Reset/step contract shared by the in-process and remote environments.
pub trait Environment {
    fn reset(&mut self) -> Result<StackedState, EnvError>;
    fn step(&mut self, action: Action) -> Result<StepOutcome, EnvError>;
}

/// In-process environment. All randomness (spawns, intruder motion, detector noise) derives
/// from the seed given at construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Env {
    cfg: EnvConfig,
    rng: ChaCha8Rng,
    world: Option<WorldState>,
    history: Option<StackedState>,
    miss_streak: u32,
    steps: u32,
    done: bool,
    respawns: u64,
}

impl Env {
    pub fn new(cfg: EnvConfig, seed: u64) -> Result<Self, EnvError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            rng: ChaCha8Rng::seed_from_u64(seed),
            world: None,
            history: None,
            miss_streak: 0,
            steps: 0,
            done: false,
            respawns: 0,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn camera(&self) -> &CameraModel {
        &self.cfg.camera
    }

    pub fn world(&self) -> Option<&WorldState> {
        self.world.as_ref()
    }

    pub fn respawns(&self) -> u64 {
        self.respawns
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    fn detect(&mut self, allow_miss: bool) -> Option<BoundingBox> {
        let world = self.world.as_ref().expect("world present");
        let raw = project(
            &self.cfg.camera,
            &world.chaser,
            world.intruder.position,
            self.cfg.sim.intruder.radius,
        );
        let mut noise = self.cfg.noise;
        if !allow_miss {
            noise.miss_rate = 0.0;
        }
        apply_detection_noise(&mut self.rng, raw, &noise, &self.cfg.camera)
    }

    fn observe(&self, detection: Option<&BoundingBox>) -> Observation {
        let c = &self.world.as_ref().expect("world present").chaser;
        Observation::new(detection, c.velocity.to_array(), c.yaw)
    }
}

impl Environment for Env {
    /// New random episode; the history holds five copies of the first frame. The first frame
    /// never drops the detection since the spawn guarantees visibility.
    fn reset(&mut self) -> Result<StackedState, EnvError> {
        let world = reset_world(&self.cfg.sim, &self.cfg.camera, &mut self.rng)?;
        self.world = Some(world);
        let det = self.detect(false);
        let state = StackedState::filled(self.observe(det.as_ref()));
        self.history = Some(state);
        self.miss_streak = 0;
        self.steps = 0;
        self.done = false;
        Ok(state)
    }

    fn step(&mut self, action: Action) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeOver);
        }
        let history = self.history.ok_or(EnvError::NotReset)?;
        {
            let world = self.world.as_mut().ok_or(EnvError::NotReset)?;
            step_world(world, &self.cfg.sim, action);
        }
        self.steps += 1;
        let det = self.detect(true);
        if det.is_some() {
            self.miss_streak = 0;
        } else {
            self.miss_streak += 1;
        }
        let r_align = reward_align(det.as_ref(), &self.cfg.camera, &self.cfg.reward);
        let r_track = reward_track(det.as_ref(), &self.cfg.reward);
        let distance = sim::distance(self.world.as_ref().expect("world present"));
        let (pen, lost) = penalty(distance, self.miss_streak, &self.cfg.reward);
        let streak = self.miss_streak;

        let mut terminated = false;
        let mut respawned = false;
        if lost {
            match self.cfg.lost_policy {
                LostPolicy::Terminate => terminated = true,
                LostPolicy::Respawn => {
                    let world = self.world.as_mut().expect("world present");
                    respawn_intruder(world, &self.cfg.sim, &self.cfg.camera, &mut self.rng);
                    self.miss_streak = 0;
                    self.respawns += 1;
                    respawned = true;
                }
            }
        }
        let truncated = !terminated && self.cfg.truncate && self.steps >= self.cfg.reward.max_steps;
        self.done = terminated || truncated;

        let state = history.push(self.observe(det.as_ref()));
        self.history = Some(state);
        Ok(StepOutcome {
            state,
            reward: r_align + r_track + pen,
            terminated,
            truncated,
            info: StepInfo {
                distance,
                box_present: det.is_some(),
                detection: det,
                r_align,
                r_track,
                penalty: pen,
                miss_streak: streak,
                respawned,
                on_target: tracking_success_step(det.as_ref(), &self.cfg.camera),
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{DroneState, Vec3};
    use crate::sim::IntruderPolicy;
    use proptest::prelude::*;

    fn cam() -> CameraModel {
        CameraModel::default()
    }

    fn cfg() -> RewardConfig {
        RewardConfig::for_camera(&cam(), 0.3)
    }

    fn centered(half: f64) -> BoundingBox {
        BoundingBox::new(320.0 - half, 240.0 - half, 320.0 + half, 240.0 + half)
    }

    #[test]
    fn align_examples() {
        let c = cfg();
        assert_eq!(c.d_max, 400.0);
        assert_eq!(reward_align(None, &cam(), &c), 0.0);
        assert_eq!(reward_align(Some(&centered(10.0)), &cam(), &c), 5.0);
        let corner = BoundingBox::new(0.0, 0.0, 0.0, 0.0);
        assert!((reward_align(Some(&corner), &cam(), &c) + 100.0).abs() < 1e-12);
    }

    #[test]
    fn track_examples() {
        let c = cfg();
        assert_eq!(reward_track(None, &c), 0.0);
        let q = c.perimeter_ref / 4.0;
        assert!((reward_track(Some(&centered(q / 2.0)), &c) - 5.0).abs() < 1e-12);
        let half = c.perimeter_ref / 8.0;
        assert!((reward_track(Some(&centered(half / 2.0)), &c) + 47.5).abs() < 1e-9);
    }

    #[test]
    fn default_perimeter_reference_matches_standoff_formula() {
        let c = cfg();
        let want = 8.0 * cam().focal * 0.3 / RewardConfig::DEFAULT_STANDOFF;
        assert!((c.perimeter_ref - want).abs() < 1e-9);
    }

    #[test]
    fn penalty_examples() {
        let c = cfg();
        assert_eq!(penalty(0.4, 0, &c), (-100.0, false));
        assert_eq!(penalty(3.0, 50, &c), (-200.0, true));
        assert_eq!(penalty(3.0, 0, &c), (0.0, false));
        assert_eq!(penalty(0.5, 50, &c), (-300.0, true));
    }

    #[test]
    fn stacking_is_a_fifo_window() {
        let o = |i: f64| Observation::from_array([i; 8]);
        let mut s = StackedState::filled(o(1.0));
        for i in 2..=5 {
            s = stack_observation(&s, o(i as f64));
        }
        let s6 = stack_observation(&s, o(6.0));
        let got: Vec<f64> = s6.frames.iter().map(|f| f.x_low).collect();
        assert_eq!(got, vec![2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut sat = s;
        for _ in 0..5 {
            sat = sat.push(o(9.0));
        }
        assert!(sat.frames.iter().all(|f| *f == o(9.0)));
        assert_eq!(StackedState::from_flat(&s6.to_flat()), Some(s6));
    }

    #[test]
    fn reset_fills_history_with_first_frame() {
        let mut env = Env::new(EnvConfig::default(), 7).unwrap();
        let s = env.reset().unwrap();
        assert!(s.frames.iter().all(|f| f == &s.frames[0]));
        assert!(s.frames[0].has_detection());
        let mut again = Env::new(EnvConfig::default(), 7).unwrap();
        assert_eq!(again.reset().unwrap(), s);
    }

    #[test]
    fn stepping_before_reset_or_after_end_is_an_error() {
        let mut env = Env::new(EnvConfig::default(), 1).unwrap();
        assert!(matches!(env.step(Action::ZERO), Err(EnvError::NotReset)));
        let mut cfg = EnvConfig::default();
        cfg.reward.max_steps = 3;
        let mut env = Env::new(cfg, 1).unwrap();
        env.reset().unwrap();
        let mut last = None;
        for _ in 0..3 {
            last = Some(env.step(Action::ZERO).unwrap());
        }
        let last = last.unwrap();
        assert!(last.truncated || last.terminated);
        assert!(matches!(env.step(Action::ZERO), Err(EnvError::EpisodeOver)));
    }

    #[test]
    fn truncates_at_max_steps() {
        // perfectly still scenario: intruder hovers straight ahead
        let mut cfg = EnvConfig::default();
        cfg.noise = DetectionNoise::NONE;
        let mut env = Env::new(cfg, 3).unwrap();
        env.reset().unwrap();
        env.world = Some(WorldState::new(
            DroneState::at(Vec3::new(0.0, 0.0, 10.0), 0.0),
            DroneState::at(Vec3::new(2.0, 0.0, 10.0), 0.0),
            IntruderPolicy::straight(0.0, 0.0, 0.0),
            0.1,
            0,
        ));
        let mut steps = 0;
        loop {
            let out = env.step(Action::ZERO).unwrap();
            steps += 1;
            assert!(!out.terminated);
            // reference perimeter at 2 m, perfectly centred
            assert!((out.reward - 10.0).abs() < 1e-9, "reward {}", out.reward);
            if out.truncated {
                break;
            }
        }
        assert_eq!(steps, 750);
    }

    #[test]
    fn fifty_misses_terminate_with_lost_penalty() {
        let mut cfg = EnvConfig::default();
        cfg.noise = DetectionNoise::NONE;
        let mut env = Env::new(cfg, 3).unwrap();
        env.reset().unwrap();
        // intruder directly behind the chaser, never visible
        env.world = Some(WorldState::new(
            DroneState::at(Vec3::new(0.0, 0.0, 10.0), 0.0),
            DroneState::at(Vec3::new(-5.0, 0.0, 10.0), 0.0),
            IntruderPolicy::straight(0.0, 0.0, 0.0),
            0.1,
            0,
        ));
        for i in 1..=50 {
            let out = env.step(Action::ZERO).unwrap();
            assert_eq!(out.info.miss_streak, i);
            if i < 50 {
                assert!(!out.terminated);
                assert_eq!(out.reward, 0.0);
            } else {
                assert!(out.terminated && !out.truncated);
                assert_eq!(out.reward, -200.0);
            }
        }
    }

    #[test]
    fn respawn_policy_keeps_the_episode_alive() {
        let mut cfg = EnvConfig::default();
        cfg.noise = DetectionNoise::NONE;
        cfg.lost_policy = LostPolicy::Respawn;
        cfg.truncate = false;
        let mut env = Env::new(cfg, 3).unwrap();
        env.reset().unwrap();
        env.world = Some(WorldState::new(
            DroneState::at(Vec3::new(0.0, 0.0, 10.0), 0.0),
            DroneState::at(Vec3::new(-5.0, 0.0, 10.0), 0.0),
            IntruderPolicy::straight(0.0, 0.0, 0.0),
            0.1,
            0,
        ));
        for _ in 0..49 {
            env.step(Action::ZERO).unwrap();
        }
        let out = env.step(Action::ZERO).unwrap();
        assert!(out.info.respawned && !out.terminated);
        assert_eq!(out.info.penalty, -200.0);
        assert_eq!(env.respawns(), 1);
        let next = env.step(Action::ZERO).unwrap();
        assert!(next.info.box_present);
    }

    proptest! {
        #[test]
        fn align_bounded_and_non_increasing(d1 in 0.0f64..500.0, d2 in 0.0f64..500.0) {
            let c = cfg();
            let at = |d: f64| {
                let x = 320.0 + d * 0.8;
                let y = 240.0 + d * 0.6;
                BoundingBox::new(x, y, x, y)
            };
            let (a1, a2) = (reward_align(Some(&at(d1)), &cam(), &c), reward_align(Some(&at(d2)), &cam(), &c));
            prop_assert!((-100.0..=5.0).contains(&a1));
            if d1 <= d2 { prop_assert!(a1 >= a2); }
        }

        #[test]
        fn track_bounded_and_non_decreasing(p1 in 0.001f64..3000.0, p2 in 0.001f64..3000.0) {
            let c = cfg();
            let sq = |p: f64| BoundingBox::new(0.0, 0.0, p / 4.0, p / 4.0);
            let (t1, t2) = (reward_track(Some(&sq(p1)), &c), reward_track(Some(&sq(p2)), &c));
            prop_assert!((-100.0..=5.0).contains(&t1));
            if p1 <= p2 { prop_assert!(t1 <= t2); }
        }

        #[test]
        fn rollout_reward_decomposes(seed in 0u64..40, actions in prop::collection::vec(
            (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0), 1..120)) {
            let mut env = Env::new(EnvConfig::default(), seed).unwrap();
            let mut prev = env.reset().unwrap();
            for (a, b, c, d) in actions {
                let out = env.step(Action::new(a, b, c, d)).unwrap();
                let i = &out.info;
                prop_assert_eq!(out.reward, i.r_align + i.r_track + i.penalty);
                prop_assert!((-400.0..=10.0).contains(&out.reward));
                prop_assert!(!(out.terminated && out.truncated));
                if i.box_present { prop_assert_eq!(i.miss_streak, 0); }
                if out.terminated { prop_assert!(i.miss_streak >= 50); }
                prop_assert_eq!(&out.state.frames[..4], &prev.frames[1..]);
                prev = out.state;
                if out.terminated || out.truncated { break; }
            }
        }
    }
}
