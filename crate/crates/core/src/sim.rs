//! Point-mass kinematics for the chaser and the intruder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::geom::{wrap_angle, DroneState as GenericDroneState, Vec3 as GenericVec3};
use crate::perception::{center_in_frame, CameraModel};

type Vec3 = GenericVec3<f64>;
type DroneState = GenericDroneState<f64>;

pub const SPAWN_ATTEMPTS: usize = 100;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SimError {
    #[error("invalid simulator configuration: {0}")]
    Config(String),
    #[error("no spawn with the intruder in view after {0} attempts")]
    SpawnExhausted(usize),
}

/// Normalised chaser command: forward, lateral, vertical velocity and yaw, each in `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    pub v_x: f64,
    pub v_y: f64,
    pub v_z: f64,
    pub yaw_d: f64,
}

impl Action {
    pub const ZERO: Self = Self {
        v_x: 0.0,
        v_y: 0.0,
        v_z: 0.0,
        yaw_d: 0.0,
    };

    pub fn new(v_x: f64, v_y: f64, v_z: f64, yaw_d: f64) -> Self {
        Self {
            v_x,
            v_y,
            v_z,
            yaw_d,
        }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.v_x, self.v_y, self.v_z, self.yaw_d]
    }

    /// Clamps each component into `[-1, 1]` (non-finite components become 0) and reports
    /// how many components had to change.
    pub fn clamped(self) -> (Self, usize) {
        let mut changed = 0;
        let a = self.to_array().map(|v| {
            let c = if v.is_finite() {
                v.clamp(-1.0, 1.0)
            } else {
                0.0
            };
            if c != v {
                changed += 1;
            }
            c
        });
        (Self::from_array(a), changed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntruderMode {
    WaypointLoop,
    SmoothedRandomWalk,
    StraightLine,
}

impl std::str::FromStr for IntruderMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "waypoint-loop" => Ok(Self::WaypointLoop),
            "smoothed-random-walk" => Ok(Self::SmoothedRandomWalk),
            "straight-line" => Ok(Self::StraightLine),
            other => Err(format!("unknown intruder mode `{other}`")),
        }
    }
}

impl std::fmt::Display for IntruderMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::WaypointLoop => "waypoint-loop",
            Self::SmoothedRandomWalk => "smoothed-random-walk",
            Self::StraightLine => "straight-line",
        })
    }
}

/// How the fourth action component drives the heading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum YawMode {
    /// `yaw += cmd * max_yaw_rate * dt`
    Rate,
    /// `yaw = cmd * pi`
    Absolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntruderConfig {
    pub mode: IntruderMode,
    pub speed_min: f64,
    pub speed_max: f64,
    pub evasion_trigger: f64,
    pub evasion_multiplier: f64,
    pub speed_cap: f64,
    pub constrain_altitude: bool,
    /// Largest climb/descent angle of the trajectory, degrees.
    pub max_pitch_deg: f64,
    /// Heading diffusion of the random walk, rad per sqrt(s).
    pub turn_sigma: f64,
    pub radius: f64,
}

impl Default for IntruderConfig {
    fn default() -> Self {
        Self {
            mode: IntruderMode::SmoothedRandomWalk,
            speed_min: 1.0,
            speed_max: 5.0,
            evasion_trigger: 2.0,
            evasion_multiplier: 1.5,
            speed_cap: 7.5,
            constrain_altitude: false,
            max_pitch_deg: 15.0,
            turn_sigma: 0.5,
            radius: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub max_speed: f64,
    pub max_yaw_rate: f64,
    pub spawn_range: f64,
    pub base_altitude: f64,
    pub yaw_mode: YawMode,
    pub intruder: IntruderConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            max_speed: 1.0,
            max_yaw_rate: 1.0,
            spawn_range: 5.0,
            base_altitude: 10.0,
            yaw_mode: YawMode::Rate,
            intruder: IntruderConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.to_string()));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be positive");
        }
        if !(self.spawn_range > 0.0 && self.spawn_range.is_finite()) {
            return bad("spawn range must be positive");
        }
        if !(self.max_speed > 0.0 && self.max_yaw_rate > 0.0) {
            return bad("max speed and max yaw rate must be positive");
        }
        let i = &self.intruder;
        if !(1.0 <= i.speed_min && i.speed_min <= i.speed_max && i.speed_max <= 5.0) {
            return bad("intruder speeds must satisfy 1 <= speed_min <= speed_max <= 5");
        }
        if i.evasion_multiplier < 1.0 {
            return bad("evasion multiplier must be at least 1");
        }
        if i.evasion_multiplier * i.speed_max > i.speed_cap + 1e-12 {
            return bad("evasion multiplier times max speed exceeds the speed cap");
        }
        if !(i.radius > 0.0) {
            return bad("intruder radius must be positive");
        }
        if !(0.0..90.0).contains(&i.max_pitch_deg) || i.turn_sigma < 0.0 || i.evasion_trigger < 0.0
        {
            return bad("intruder trajectory parameters out of range");
        }
        Ok(())
    }
}

/// Per-episode intruder behaviour and trajectory-generator state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntruderPolicy {
    pub mode: IntruderMode,
    pub base_speed: f64,
    pub evasion_multiplier: f64,
    pub evasion_trigger_distance: f64,
    pub speed_cap: f64,
    heading: f64,
    pitch: f64,
    max_pitch: f64,
    turn_sigma: f64,
    waypoints: Vec<Vec3>,
    next_waypoint: usize,
}

impl IntruderPolicy {
    /// Straight-line policy with an explicit direction; evasion disabled.
    pub fn straight(base_speed: f64, heading: f64, pitch: f64) -> Self {
        Self {
            mode: IntruderMode::StraightLine,
            base_speed,
            evasion_multiplier: 1.0,
            evasion_trigger_distance: 0.0,
            speed_cap: f64::MAX,
            heading,
            pitch,
            max_pitch: pitch.abs(),
            turn_sigma: 0.0,
            waypoints: Vec::new(),
            next_waypoint: 0,
        }
    }

    pub fn with_evasion(mut self, trigger: f64, multiplier: f64, cap: f64) -> Self {
        self.evasion_trigger_distance = trigger;
        self.evasion_multiplier = multiplier;
        self.speed_cap = cap;
        self
    }

    pub fn waypoint_loop(base_speed: f64, waypoints: Vec<Vec3>) -> Self {
        Self {
            mode: IntruderMode::WaypointLoop,
            waypoints,
            ..Self::straight(base_speed, 0.0, 0.0)
        }
    }

    fn sample<R: Rng + ?Sized>(cfg: &SimConfig, start: Vec3, rng: &mut R) -> Self {
        let i = &cfg.intruder;
        let base_speed = if i.speed_max > i.speed_min {
            rng.random_range(i.speed_min..=i.speed_max)
        } else {
            i.speed_min
        };
        let max_pitch = if i.constrain_altitude {
            0.0
        } else {
            i.max_pitch_deg.to_radians()
        };
        let heading = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let pitch = if max_pitch > 0.0 {
            rng.random_range(-max_pitch..=max_pitch)
        } else {
            0.0
        };
        let waypoints = if i.mode == IntruderMode::WaypointLoop {
            let r = cfg.spawn_range;
            (0..4)
                .map(|_| {
                    let z = if i.constrain_altitude {
                        start.z
                    } else {
                        cfg.base_altitude + rng.random_range(-r..r)
                    };
                    Vec3::new(rng.random_range(-r..r), rng.random_range(-r..r), z)
                })
                .collect()
        } else {
            Vec::new()
        };
        Self {
            mode: i.mode,
            base_speed,
            evasion_multiplier: i.evasion_multiplier,
            evasion_trigger_distance: i.evasion_trigger,
            speed_cap: i.speed_cap,
            heading,
            pitch,
            max_pitch,
            turn_sigma: i.turn_sigma,
            waypoints,
            next_waypoint: 0,
        }
    }

    fn direction(&self) -> Vec3 {
        let (sp, cp) = self.pitch.sin_cos();
        Vec3::new(cp, 0.0, sp).rotate_z(self.heading)
    }

    /// Speed for this step given the chaser distance.
    pub fn step_speed(&self, distance: f64) -> f64 {
        if distance < self.evasion_trigger_distance {
            (self.base_speed * self.evasion_multiplier).min(self.speed_cap)
        } else {
            self.base_speed
        }
    }
}

/// Advances the intruder by one step along its trajectory generator.
pub fn intruder_step<R: Rng + ?Sized>(
    policy: &mut IntruderPolicy,
    intruder: &DroneState,
    chaser: &DroneState,
    dt: f64,
    rng: &mut R,
) -> DroneState {
    let speed = policy.step_speed(intruder.position.distance(chaser.position));
    let dir = match policy.mode {
        IntruderMode::StraightLine => policy.direction(),
        IntruderMode::SmoothedRandomWalk => {
            let s = policy.turn_sigma * dt.sqrt();
            let dh: f64 = StandardNormal.sample(rng);
            let dp: f64 = StandardNormal.sample(rng);
            policy.heading = wrap_angle(policy.heading + s * dh);
            policy.pitch = (policy.pitch + 0.5 * s * dp).clamp(-policy.max_pitch, policy.max_pitch);
            policy.direction()
        }
        IntruderMode::WaypointLoop => {
            if policy.waypoints.is_empty() {
                Vec3::zero()
            } else {
                let target = policy.waypoints[policy.next_waypoint];
                if target.distance(intruder.position) <= speed * dt {
                    policy.next_waypoint = (policy.next_waypoint + 1) % policy.waypoints.len();
                }
                (policy.waypoints[policy.next_waypoint] - intruder.position).normalized()
            }
        }
    };
    let velocity = dir * speed;
    let yaw = if velocity.x != 0.0 || velocity.y != 0.0 {
        wrap_angle(velocity.y.atan2(velocity.x))
    } else {
        intruder.yaw
    };
    DroneState {
        position: intruder.position + velocity * dt,
        velocity,
        yaw,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub chaser: DroneState,
    pub intruder: DroneState,
    pub policy: IntruderPolicy,
    pub time_step: u64,
    pub dt: f64,
    /// Command components that had to be clamped into `[-1, 1]`.
    pub clamped_components: u64,
    rng: ChaCha8Rng,
}

impl WorldState {
    /// Builds a world from explicit states; the intruder random stream is seeded with `seed`.
    pub fn new(
        chaser: DroneState,
        intruder: DroneState,
        policy: IntruderPolicy,
        dt: f64,
        seed: u64,
    ) -> Self {
        Self {
            chaser,
            intruder,
            policy,
            time_step: 0,
            dt,
            clamped_components: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn distance(&self) -> f64 {
        self.chaser.position.distance(self.intruder.position)
    }
}

pub fn distance(world: &WorldState) -> f64 {
    world.distance()
}

fn spawn_point<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> Vec3 {
    let r = cfg.spawn_range;
    Vec3::new(
        rng.random_range(-r..r),
        rng.random_range(-r..r),
        cfg.base_altitude + rng.random_range(-r..r),
    )
}

/// Random start with the chaser facing the intruder, resampled until the intruder's centre
/// is inside the camera frame.
pub fn reset_world<R: Rng + ?Sized>(
    cfg: &SimConfig,
    camera: &CameraModel<f64>,
    rng: &mut R,
) -> Result<WorldState, SimError> {
    cfg.validate()?;
    for _ in 0..SPAWN_ATTEMPTS {
        let c = spawn_point(cfg, rng);
        let i = spawn_point(cfg, rng);
        let d = i - c;
        let chaser = DroneState::at(c, d.y.atan2(d.x));
        if !center_in_frame(camera, &chaser, i) {
            continue;
        }
        let policy = IntruderPolicy::sample(cfg, i, rng);
        let intruder = DroneState::at(i, policy.heading);
        return Ok(WorldState::new(
            chaser,
            intruder,
            policy,
            cfg.dt,
            rng.random(),
        ));
    }
    Err(SimError::SpawnExhausted(SPAWN_ATTEMPTS))
}

/// Moves the intruder to a fresh random point inside the chaser's view.
pub fn respawn_intruder<R: Rng + ?Sized>(
    world: &mut WorldState,
    cfg: &SimConfig,
    camera: &CameraModel<f64>,
    rng: &mut R,
) {
    let r = cfg.spawn_range;
    let mut pos = None;
    for _ in 0..SPAWN_ATTEMPTS {
        let offset = Vec3::new(
            rng.random_range(0.0..2.0 * r),
            rng.random_range(-r..r),
            rng.random_range(-r..r),
        );
        let p = world.chaser.position + offset.rotate_z(world.chaser.yaw);
        if center_in_frame(camera, &world.chaser, p) {
            pos = Some(p);
            break;
        }
    }
    let p = pos.unwrap_or_else(|| {
        world.chaser.position + Vec3::new(r.max(1.0), 0.0, 0.0).rotate_z(world.chaser.yaw)
    });
    world.intruder = DroneState::at(p, world.intruder.yaw);
}

pub fn step_world(world: &mut WorldState, cfg: &SimConfig, cmd: Action) {
    let (cmd, clamped) = cmd.clamped();
    world.clamped_components += clamped as u64;
    let dt = world.dt;

    let body = Vec3::new(cmd.v_x, cmd.v_y, 0.0) * cfg.max_speed;
    let horizontal = body.rotate_z(world.chaser.yaw);
    let velocity = Vec3::new(horizontal.x, horizontal.y, cmd.v_z * cfg.max_speed);
    let previous_chaser = world.chaser;
    world.chaser.velocity = velocity;
    world.chaser.position += velocity * dt;
    world.chaser.yaw = match cfg.yaw_mode {
        YawMode::Rate => wrap_angle(world.chaser.yaw + cmd.yaw_d * cfg.max_yaw_rate * dt),
        YawMode::Absolute => wrap_angle(cmd.yaw_d * std::f64::consts::PI),
    };

    world.intruder = intruder_step(
        &mut world.policy,
        &world.intruder,
        &previous_chaser,
        dt,
        &mut world.rng,
    );
    world.time_step += 1;
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn still_world(yaw: f64) -> WorldState {
        WorldState::new(
            DroneState::at(Vec3::new(0.0, 0.0, 10.0), yaw),
            DroneState::at(Vec3::new(50.0, 0.0, 10.0), 0.0),
            IntruderPolicy::straight(1.0, 0.0, 0.0),
            0.1,
            0,
        )
    }

    #[test]
    fn forward_command_moves_along_heading() {
        let cfg = SimConfig::default();
        let mut w = still_world(0.0);
        step_world(&mut w, &cfg, Action::new(1.0, 0.0, 0.0, 0.0));
        assert!((w.chaser.position.x - 0.1).abs() < 1e-12);
        assert_eq!(w.chaser.position.y, 0.0);
        assert_eq!(w.time_step, 1);

        let mut w = still_world(FRAC_PI_2);
        step_world(&mut w, &cfg, Action::new(1.0, 0.0, 0.0, 0.0));
        assert!(w.chaser.position.x.abs() < 1e-12);
        assert!((w.chaser.position.y - 0.1).abs() < 1e-12);
    }

    #[test]
    fn yaw_rate_integrates() {
        let cfg = SimConfig::default();
        let mut w = still_world(0.0);
        step_world(&mut w, &cfg, Action::new(0.0, 0.0, 0.0, 1.0));
        assert!((w.chaser.yaw - 0.1).abs() < 1e-12);
    }

    #[test]
    fn absolute_yaw_mode_sets_heading() {
        let cfg = SimConfig {
            yaw_mode: YawMode::Absolute,
            ..SimConfig::default()
        };
        let mut w = still_world(0.0);
        step_world(&mut w, &cfg, Action::new(0.0, 0.0, 0.0, 0.5));
        assert!((w.chaser.yaw - FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_commands_are_clamped_and_counted() {
        let cfg = SimConfig::default();
        let mut w = still_world(0.0);
        step_world(&mut w, &cfg, Action::new(3.0, 0.0, -2.0, 0.0));
        assert_eq!(w.clamped_components, 2);
        assert!((w.chaser.velocity.x - 1.0).abs() < 1e-12);
        assert!((w.chaser.velocity.z + 1.0).abs() < 1e-12);
    }

    #[test]
    fn straight_line_displacement_is_speed_times_dt() {
        let mut p = IntruderPolicy::straight(2.0, 0.3, 0.1);
        let e = DroneState::at(Vec3::zero(), 0.0);
        let d = DroneState::at(Vec3::new(100.0, 0.0, 0.0), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let next = intruder_step(&mut p, &e, &d, 0.1, &mut rng);
        assert!((next.position.norm() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn evasion_speeds_up_only_inside_trigger() {
        let mut p = IntruderPolicy::straight(2.0, 0.0, 0.0).with_evasion(2.0, 1.5, 7.5);
        let e = DroneState::at(Vec3::zero(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let far = DroneState::at(Vec3::new(10.0, 0.0, 0.0), 0.0);
        let n = intruder_step(&mut p, &e, &far, 0.1, &mut rng);
        assert!((n.velocity.norm() - 2.0).abs() < 1e-12);
        let near = DroneState::at(Vec3::new(1.0, 0.0, 0.0), 0.0);
        let n = intruder_step(&mut p, &e, &near, 0.1, &mut rng);
        // 2 m/s * 1.5
        assert!((n.velocity.norm() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn waypoint_loop_visits_waypoints_in_order() {
        let wps = vec![Vec3::new(1.0, 0.0, 0.0), Vec3::new(1.0, 1.0, 0.0)];
        let mut p = IntruderPolicy::waypoint_loop(1.0, wps);
        let mut e = DroneState::at(Vec3::zero(), 0.0);
        let d = DroneState::at(Vec3::new(100.0, 0.0, 0.0), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..15 {
            e = intruder_step(&mut p, &e, &d, 0.1, &mut rng);
        }
        assert!(
            e.position.y > 0.3,
            "turned toward the second waypoint: {:?}",
            e.position
        );
        assert!((e.position.x - 1.0).abs() < 1e-9);
    }

    #[test]
    fn reset_is_deterministic_and_within_spawn_box() {
        let cfg = SimConfig::default();
        let cam = CameraModel::default();
        let a = reset_world(&cfg, &cam, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = reset_world(&cfg, &cam, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a, b);
        for p in [a.chaser.position, a.intruder.position] {
            assert!(p.x.abs() < 5.0 && p.y.abs() < 5.0 && (p.z - 10.0).abs() < 5.0);
        }
        assert!(center_in_frame(&cam, &a.chaser, a.intruder.position));
        assert_eq!(a.chaser.velocity, Vec3::zero());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cam = CameraModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = SimConfig {
            dt: 0.0,
            ..SimConfig::default()
        };
        assert!(matches!(
            reset_world(&cfg, &cam, &mut rng),
            Err(SimError::Config(_))
        ));
        let cfg = SimConfig {
            spawn_range: 0.0,
            ..SimConfig::default()
        };
        assert!(matches!(
            reset_world(&cfg, &cam, &mut rng),
            Err(SimError::Config(_))
        ));
    }

    proptest! {
        #[test]
        fn base_speed_stays_in_range(seed in 0u64..500) {
            let w = reset_world(&SimConfig::default(), &CameraModel::default(),
                &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert!((1.0..=5.0).contains(&w.policy.base_speed));
        }

        #[test]
        fn rollout_invariants(seed in 0u64..200, cmds in prop::collection::vec(
            (-1.5f64..1.5, -1.5f64..1.5, -1.5f64..1.5, -1.5f64..1.5), 1..60)) {
            let cfg = SimConfig::default();
            let cam = CameraModel::default();
            let mut w = reset_world(&cfg, &cam, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let mut twin = w.clone();
            for (i, &(a, b, c, d)) in cmds.iter().enumerate() {
                let cmd = Action::new(a, b, c, d);
                let prev_intruder = w.intruder.position;
                step_world(&mut w, &cfg, cmd);
                step_world(&mut twin, &cfg, cmd);
                prop_assert_eq!(&w, &twin);
                prop_assert_eq!(w.time_step, i as u64 + 1);
                prop_assert!((-std::f64::consts::PI..std::f64::consts::PI).contains(&w.chaser.yaw));
                prop_assert!(w.chaser.velocity.norm() <= cfg.max_speed * 3f64.sqrt() + 1e-12);
                let step_speed = w.intruder.position.distance(prev_intruder) / cfg.dt;
                let base = w.policy.base_speed;
                prop_assert!(step_speed >= base - 1e-9);
                prop_assert!(step_speed <= base * w.policy.evasion_multiplier + 1e-9);
            }
        }

        #[test]
        fn distance_is_a_metric(
            a in prop::array::uniform3(-10.0f64..10.0),
            b in prop::array::uniform3(-10.0f64..10.0),
            c in prop::array::uniform3(-10.0f64..10.0)
        ) {
            let (a, b, c) = (Vec3::new(a[0], a[1], a[2]), Vec3::new(b[0], b[1], b[2]), Vec3::new(c[0], c[1], c[2]));
            prop_assert_eq!(a.distance(b), b.distance(a));
            prop_assert!(a.distance(c) <= a.distance(b) + b.distance(c) + 1e-12);
        }
    }
}
