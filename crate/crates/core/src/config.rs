//! Line-oriented `key = value` configuration with typed keys, defaults and range checks.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ddpg::{DdpgConfig, OuConfig};
use crate::env::{perimeter_at, EnvConfig, RewardConfig};
use crate::eval::EvalConfig;
use crate::perception::{CameraModel, DetectionNoise};
use crate::sim::{IntruderMode, YawMode};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { key: String, line: usize },
    #[error("line {line}: `{key}` expects {expected}, got `{value}`")]
    Type {
        key: String,
        line: usize,
        expected: String,
        value: String,
    },
    #[error("line {line}: `{key}` = {value} is out of range ({range})")]
    Range {
        key: String,
        line: usize,
        value: String,
        range: String,
    },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: `{key}` set twice")]
    Duplicate { key: String, line: usize },
    #[error("`{key}`: {message}")]
    Invalid { key: String, message: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

impl ConfigError {
    /// The key the error is about, if any.
    pub fn key(&self) -> Option<&str> {
        match self {
            Self::UnknownKey { key, .. }
            | Self::Type { key, .. }
            | Self::Range { key, .. }
            | Self::Duplicate { key, .. }
            | Self::Invalid { key, .. } => Some(key),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Bool(bool),
    Int(u64),
    Float(f64),
    Text(String),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Bool(b) => write!(f, "{b}"),
            Self::Int(i) => write!(f, "{i}"),
            // `{:?}` keeps a decimal point and round-trips exactly
            Self::Float(x) => write!(f, "{x:?}"),
            Self::Text(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Kind {
    /// Inclusive/exclusive bounds: (lo, lo_open, hi, hi_open).
    Float(f64, bool, f64, bool),
    Int(u64, u64),
    Bool,
    Choice(&'static [&'static str]),
}

impl Kind {
    fn expected(&self) -> String {
        match self {
            Kind::Float(..) => "a number".into(),
            Kind::Int(..) => "a non-negative integer".into(),
            Kind::Bool => "true or false".into(),
            Kind::Choice(c) => format!("one of {}", c.join(", ")),
        }
    }

    fn range(&self) -> String {
        match *self {
            Kind::Float(lo, lo_open, hi, hi_open) => format!(
                "{}{lo}, {hi}{}",
                if lo_open { "(" } else { "[" },
                if hi_open { ")" } else { "]" }
            ),
            Kind::Int(lo, hi) => format!("[{lo}, {hi}]"),
            _ => String::new(),
        }
    }

    fn parse(&self, raw: &str) -> Result<Value, bool> {
        // Err(false): type error, Err(true): range error
        match *self {
            Kind::Float(lo, lo_open, hi, hi_open) => {
                let x: f64 = raw.parse().map_err(|_| false)?;
                let ok = x.is_finite()
                    && if lo_open { x > lo } else { x >= lo }
                    && if hi_open { x < hi } else { x <= hi };
                if ok {
                    Ok(Value::Float(x))
                } else {
                    Err(true)
                }
            }
            Kind::Int(lo, hi) => {
                let x: u64 = raw.parse().map_err(|_| false)?;
                if (lo..=hi).contains(&x) {
                    Ok(Value::Int(x))
                } else {
                    Err(true)
                }
            }
            Kind::Bool => match raw {
                "true" => Ok(Value::Bool(true)),
                "false" => Ok(Value::Bool(false)),
                _ => Err(false),
            },
            Kind::Choice(options) => {
                if options.contains(&raw) {
                    Ok(Value::Text(raw.to_string()))
                } else {
                    Err(false)
                }
            }
        }
    }
}

const INF: f64 = f64::INFINITY;
const INTRUDER_MODES: &[&str] = &["waypoint-loop", "smoothed-random-walk", "straight-line"];
const YAW_MODES: &[&str] = &["rate", "absolute"];

/// Every accepted key with its type, range and default (as it would be written in a file).
const SCHEMA: &[(&str, Kind, &str)] = &[
    ("camera.height", Kind::Int(1, 100_000), "480"),
    (
        "camera.hfov_deg",
        Kind::Float(0.0, true, 180.0, true),
        "60.0",
    ),
    ("camera.width", Kind::Int(1, 100_000), "640"),
    ("ddpg.actor_lr", Kind::Float(0.0, true, 1.0, false), "0.001"),
    ("ddpg.batch_size", Kind::Int(2, 1 << 20), "128"),
    ("ddpg.buffer_capacity", Kind::Int(2, 1 << 30), "100000"),
    (
        "ddpg.critic_lr",
        Kind::Float(0.0, true, 1.0, false),
        "0.001",
    ),
    ("ddpg.gamma", Kind::Float(0.0, true, 1.0, false), "0.99"),
    ("ddpg.tau", Kind::Float(0.0, true, 1.0, false), "0.001"),
    ("ddpg.warmup", Kind::Int(0, 1 << 30), "1000"),
    ("episode.max_steps", Kind::Int(1, 1 << 32), "750"),
    ("eval.episodes", Kind::Int(1, 1 << 32), "500"),
    (
        "eval.success_threshold",
        Kind::Float(0.0, false, 1.0, false),
        "0.9",
    ),
    ("intruder.constrain_altitude", Kind::Bool, "false"),
    (
        "intruder.evasion_multiplier",
        Kind::Float(1.0, false, INF, true),
        "1.5",
    ),
    (
        "intruder.evasion_trigger",
        Kind::Float(0.0, false, INF, true),
        "2.0",
    ),
    (
        "intruder.max_pitch_deg",
        Kind::Float(0.0, false, 90.0, true),
        "15.0",
    ),
    (
        "intruder.mode",
        Kind::Choice(INTRUDER_MODES),
        "smoothed-random-walk",
    ),
    ("intruder.radius", Kind::Float(0.0, true, INF, true), "0.3"),
    (
        "intruder.speed_cap",
        Kind::Float(0.0, true, INF, true),
        "7.5",
    ),
    (
        "intruder.speed_max",
        Kind::Float(1.0, false, 5.0, false),
        "5.0",
    ),
    (
        "intruder.speed_min",
        Kind::Float(1.0, false, 5.0, false),
        "1.0",
    ),
    (
        "intruder.turn_sigma",
        Kind::Float(0.0, false, INF, true),
        "0.5",
    ),
    ("ou.reset_per_episode", Kind::Bool, "false"),
    ("ou.sigma", Kind::Float(0.0, false, INF, true), "0.2"),
    ("ou.theta", Kind::Float(0.0, false, INF, true), "0.15"),
    (
        "perception.jitter_sigma",
        Kind::Float(0.0, false, INF, true),
        "2.0",
    ),
    (
        "perception.miss_rate",
        Kind::Float(0.0, false, 1.0, false),
        "0.03",
    ),
    (
        "reward.collision_distance",
        Kind::Float(0.0, false, INF, true),
        "0.5",
    ),
    ("reward.lost_steps", Kind::Int(1, 1 << 32), "50"),
    // empty default: derived from the camera and intruder radius
    (
        "reward.perimeter_ref",
        Kind::Float(0.0, true, INF, true),
        "",
    ),
    (
        "sim.base_altitude",
        Kind::Float(-INF, true, INF, true),
        "10.0",
    ),
    ("sim.dt", Kind::Float(0.0, true, INF, true), "0.1"),
    ("sim.max_speed", Kind::Float(0.0, true, INF, true), "1.0"),
    ("sim.max_yaw_rate", Kind::Float(0.0, true, INF, true), "1.0"),
    ("sim.spawn_range", Kind::Float(0.0, true, INF, true), "5.0"),
    ("sim.yaw_mode", Kind::Choice(YAW_MODES), "rate"),
    ("train.checkpoint_every", Kind::Int(0, 1 << 32), "100"),
    ("train.episodes", Kind::Int(1, 1 << 32), "6000"),
    ("train.eval_episodes", Kind::Int(0, 1 << 32), "1"),
    ("train.eval_every", Kind::Int(0, 1 << 32), "25"),
    ("train.seed", Kind::Int(0, u64::MAX), "0"),
];

fn schema(key: &str) -> Option<&'static (&'static str, Kind, &'static str)> {
    SCHEMA.iter().find(|(k, _, _)| *k == key)
}

/// Effective configuration: every key in the schema mapped to a validated value.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    values: BTreeMap<&'static str, Value>,
}

impl Default for Config {
    fn default() -> Self {
        let mut cfg = Self::bare_defaults();
        cfg.fill_derived();
        cfg
    }
}

impl Config {
    pub fn keys() -> impl Iterator<Item = &'static str> {
        SCHEMA.iter().map(|(k, _, _)| *k)
    }

    fn bare_defaults() -> Self {
        let values = SCHEMA
            .iter()
            .filter(|(_, _, d)| !d.is_empty())
            .map(|(k, kind, d)| (*k, kind.parse(d).expect("schema defaults are valid")))
            .collect();
        Self { values }
    }

    fn fill_derived(&mut self) {
        if !self.values.contains_key("reward.perimeter_ref") {
            let p = perimeter_at(
                &self.camera(),
                self.f("intruder.radius"),
                RewardConfig::DEFAULT_STANDOFF,
            );
            self.values.insert("reward.perimeter_ref", Value::Float(p));
        }
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::bare_defaults();
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or(ConfigError::Syntax { line })?;
            let (key, value) = (key.trim(), value.trim());
            if seen.insert(key.to_string(), line).is_some() {
                return Err(ConfigError::Duplicate {
                    key: key.into(),
                    line,
                });
            }
            cfg.set_at(key, value, line)?;
        }
        cfg.fill_derived();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }

    fn set_at(&mut self, key: &str, raw: &str, line: usize) -> Result<(), ConfigError> {
        let (k, kind, _) = schema(key).ok_or_else(|| ConfigError::UnknownKey {
            key: key.into(),
            line,
        })?;
        let v = kind.parse(raw).map_err(|range| {
            if range {
                ConfigError::Range {
                    key: key.into(),
                    line,
                    value: raw.into(),
                    range: kind.range(),
                }
            } else {
                ConfigError::Type {
                    key: key.into(),
                    line,
                    expected: kind.expected(),
                    value: raw.into(),
                }
            }
        })?;
        self.values.insert(k, v);
        Ok(())
    }

    /// Sets one key from its textual value, as if it appeared in a file.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<(), ConfigError> {
        self.set_at(key, raw, 0)?;
        self.validate()
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.values.get(key)
    }

    fn f(&self, key: &str) -> f64 {
        match self.values[key] {
            Value::Float(x) => x,
            Value::Int(i) => i as f64,
            _ => unreachable!("{key} is numeric"),
        }
    }

    fn u(&self, key: &str) -> u64 {
        match self.values[key] {
            Value::Int(i) => i,
            _ => unreachable!("{key} is an integer"),
        }
    }

    fn b(&self, key: &str) -> bool {
        match self.values[key] {
            Value::Bool(b) => b,
            _ => unreachable!("{key} is a flag"),
        }
    }

    fn s(&self, key: &str) -> &str {
        match &self.values[key] {
            Value::Text(s) => s,
            _ => unreachable!("{key} is a choice"),
        }
    }

    /// Cross-key checks that single-key ranges cannot express.
    fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key: &str, message: &str| ConfigError::Invalid {
            key: key.into(),
            message: message.into(),
        };
        if self.f("intruder.speed_min") > self.f("intruder.speed_max") {
            return Err(invalid(
                "intruder.speed_min",
                "must not exceed intruder.speed_max",
            ));
        }
        if self.f("intruder.evasion_multiplier") * self.f("intruder.speed_max")
            > self.f("intruder.speed_cap") + 1e-12
        {
            return Err(invalid(
                "intruder.speed_cap",
                "must be at least intruder.evasion_multiplier * intruder.speed_max",
            ));
        }
        if self.u("ddpg.buffer_capacity") < self.u("ddpg.batch_size") {
            return Err(invalid(
                "ddpg.buffer_capacity",
                "must hold at least one batch",
            ));
        }
        if self.u("reward.lost_steps") > u32::MAX as u64
            || self.u("episode.max_steps") > u32::MAX as u64
        {
            return Err(invalid("episode.max_steps", "too large"));
        }
        Ok(())
    }

    /// The effective configuration in the input format, one key per line, sorted.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// SHA-256 of [`Self::echo`].
    pub fn hash(&self) -> String {
        format!("{:x}", Sha256::digest(self.echo().as_bytes()))
    }

    pub fn camera(&self) -> CameraModel<f64> {
        CameraModel::from_hfov(
            self.f("camera.width"),
            self.f("camera.height"),
            self.f("camera.hfov_deg"),
        )
    }

    pub fn env(&self) -> EnvConfig {
        let mut env = EnvConfig::default();
        let s = &mut env.sim;
        s.dt = self.f("sim.dt");
        s.max_speed = self.f("sim.max_speed");
        s.max_yaw_rate = self.f("sim.max_yaw_rate");
        s.spawn_range = self.f("sim.spawn_range");
        s.base_altitude = self.f("sim.base_altitude");
        s.yaw_mode = match self.s("sim.yaw_mode") {
            "absolute" => YawMode::Absolute,
            _ => YawMode::Rate,
        };
        let i = &mut s.intruder;
        i.mode = self
            .s("intruder.mode")
            .parse::<IntruderMode>()
            .expect("validated choice");
        i.speed_min = self.f("intruder.speed_min");
        i.speed_max = self.f("intruder.speed_max");
        i.evasion_trigger = self.f("intruder.evasion_trigger");
        i.evasion_multiplier = self.f("intruder.evasion_multiplier");
        i.speed_cap = self.f("intruder.speed_cap");
        i.constrain_altitude = self.b("intruder.constrain_altitude");
        i.max_pitch_deg = self.f("intruder.max_pitch_deg");
        i.turn_sigma = self.f("intruder.turn_sigma");
        i.radius = self.f("intruder.radius");
        env.camera = self.camera();
        env.noise = DetectionNoise {
            miss_rate: self.f("perception.miss_rate"),
            pixel_jitter_sigma: self.f("perception.jitter_sigma"),
        };
        env.reward = RewardConfig {
            perimeter_ref: self.f("reward.perimeter_ref"),
            collision_distance: self.f("reward.collision_distance"),
            lost_steps: self.u("reward.lost_steps") as u32,
            max_steps: self.u("episode.max_steps") as u32,
            ..RewardConfig::for_camera(&env.camera, i.radius)
        };
        env
    }

    pub fn ddpg(&self) -> DdpgConfig {
        DdpgConfig {
            gamma: self.f("ddpg.gamma"),
            tau: self.f("ddpg.tau"),
            batch_size: self.u("ddpg.batch_size") as usize,
            buffer_capacity: self.u("ddpg.buffer_capacity") as usize,
            actor_lr: self.f("ddpg.actor_lr"),
            critic_lr: self.f("ddpg.critic_lr"),
            warmup: self.u("ddpg.warmup") as usize,
        }
    }

    pub fn ou(&self) -> OuConfig {
        OuConfig {
            theta: self.f("ou.theta"),
            sigma: self.f("ou.sigma"),
            reset_per_episode: self.b("ou.reset_per_episode"),
            ..OuConfig::default()
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            episodes: self.u("train.episodes") as usize,
            seed: self.u("train.seed"),
            eval_every: self.u("train.eval_every") as usize,
            eval_episodes: self.u("train.eval_episodes") as usize,
            checkpoint_every: self.u("train.checkpoint_every") as usize,
            env: self.env(),
            ddpg: self.ddpg(),
            ou: self.ou(),
        }
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            episodes: self.u("eval.episodes") as usize,
            seed: self.u("train.seed"),
            success_threshold: self.f("eval.success_threshold"),
        }
    }
}
