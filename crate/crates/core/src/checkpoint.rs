//! Binary checkpoint container: a JSON header followed by named little-endian f64 records.
//! The byte layout is documented in `docs/checkpoint-format.md`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::ddpg::{Agent, DdpgConfig, Normalizer, OuNoise, ReplayBuffer, Transition};
use crate::env::{Action, Env, StackedState, ACTION_DIM, STATE_DIM};
use crate::nn::{AdamState, Mode, Network, NetworkSpec};
use crate::trainer::{TrainConfig, TrainError, Trainer};

pub const MAGIC: &[u8; 8] = b"CHSRCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CheckpointError {
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("{0}")]
    Mismatch(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

fn fmt_err(offset: usize, message: impl Into<String>) -> CheckpointError {
    CheckpointError::Format {
        offset,
        message: message.into(),
    }
}

/// Decoded container: header document plus records in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: Value,
    pub records: Vec<(String, Vec<f64>)>,
}

impl Container {
    pub fn new(header: Value) -> Self {
        Self {
            header,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, values: Vec<f64>) {
        self.records.push((name.into(), values));
    }

    pub fn record_map(&self) -> BTreeMap<&str, &[f64]> {
        self.records
            .iter()
            .map(|(n, v)| (n.as_str(), v.as_slice()))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serialises");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for (name, values) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(fmt_err(0, "bad magic"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(fmt_err(8, format!("unsupported format version {version}")));
        }
        let header_len = r.u64()? as usize;
        let at = r.pos;
        let header: Value = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| fmt_err(at, format!("header: {e}")))?;
        let count = r.u64()?;
        let mut records = Vec::new();
        for _ in 0..count {
            let at = r.pos;
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| fmt_err(at, "record name is not UTF-8"))?
                .to_string();
            let n = r.u64()? as usize;
            let at = r.pos;
            let raw = r.take(
                n.checked_mul(8)
                    .ok_or_else(|| fmt_err(at, "record too large"))?,
            )?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            records.push((name, values));
        }
        let body_end = r.pos;
        let digest = r.take(32)?;
        if digest != Sha256::digest(&bytes[..body_end]).as_slice() {
            return Err(fmt_err(body_end, "checksum mismatch"));
        }
        if r.pos != bytes.len() {
            return Err(fmt_err(r.pos, "trailing bytes"));
        }
        Ok(Self { header, records })
    }

    pub fn write(&self, path: &Path) -> Result<(), CheckpointError> {
        // write-then-rename so a crash never leaves a truncated checkpoint behind
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.to_bytes())
            .and_then(|_| fs::rename(&tmp, path))
            .map_err(|e| CheckpointError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })
    }

    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| fmt_err(self.pos, format!("truncated: needed {n} more bytes")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NetworkHeader {
    spec: NetworkSpec,
    mode: Mode,
}

fn put_network(c: &mut Container, prefix: &str, net: &Network<f64>) {
    for (name, v) in net.named_state() {
        c.push(format!("{prefix}.{name}"), v.to_vec());
    }
}

fn network_header(net: &Network<f64>) -> Value {
    serde_json::to_value(NetworkHeader {
        spec: net.spec().clone(),
        mode: net.mode(),
    })
    .expect("network header serialises")
}

fn take_network(c: &Container, prefix: &str) -> Result<Network<f64>, CheckpointError> {
    let h: NetworkHeader = serde_json::from_value(c.header["networks"][prefix].clone())
        .map_err(|e| CheckpointError::Mismatch(format!("network {prefix}: {e}")))?;
    // parameters are overwritten below; the draw only sizes the tensors
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut net = Network::new(h.spec, &mut rng)
        .map_err(|e| CheckpointError::Mismatch(format!("network {prefix}: {e}")))?;
    net.set_mode(h.mode);
    let records = c.record_map();
    let names: Vec<String> = net.named_state().into_iter().map(|(n, _)| n).collect();
    for name in names {
        let key = format!("{prefix}.{name}");
        let v = records
            .get(key.as_str())
            .ok_or_else(|| CheckpointError::Mismatch(format!("missing record {key}")))?;
        net.load_tensor(&name, v)
            .map_err(|e| CheckpointError::Mismatch(format!("{key}: {e}")))?;
    }
    Ok(net)
}

pub fn network_to_container(net: &Network<f64>) -> Container {
    let mut c = Container::new(serde_json::json!({
        "kind": "network",
        "networks": { "net": network_header(net) },
    }));
    put_network(&mut c, "net", net);
    c
}

pub fn network_from_container(c: &Container) -> Result<Network<f64>, CheckpointError> {
    take_network(c, "net")
}

const NETS: [&str; 4] = ["actor", "critic", "target_actor", "target_critic"];

fn agent_container(agent: &Agent, kind: &str) -> Container {
    let nets = [
        &agent.actor,
        &agent.critic,
        &agent.target_actor,
        &agent.target_critic,
    ];
    let mut headers = serde_json::Map::new();
    for (name, net) in NETS.iter().zip(nets) {
        headers.insert(name.to_string(), network_header(net));
    }
    let mut c = Container::new(serde_json::json!({
        "kind": kind,
        "networks": headers,
        "normalization": agent.norm,
        "normalization_scales": agent.norm.scales(),
        "ddpg": agent.cfg,
    }));
    for (name, net) in NETS.iter().zip(nets) {
        put_network(&mut c, name, net);
    }
    c
}

fn agent_from(c: &Container) -> Result<Agent, CheckpointError> {
    let norm: Normalizer = serde_json::from_value(c.header["normalization"].clone())
        .map_err(|e| CheckpointError::Mismatch(format!("normalization: {e}")))?;
    let cfg: DdpgConfig = serde_json::from_value(c.header["ddpg"].clone())
        .map_err(|e| CheckpointError::Mismatch(format!("ddpg: {e}")))?;
    let mut nets = NETS
        .iter()
        .map(|n| take_network(c, n))
        .collect::<Result<Vec<_>, _>>()?;
    let target_critic = nets.pop().expect("four networks");
    let target_actor = nets.pop().expect("four networks");
    let critic = nets.pop().expect("four networks");
    let actor = nets.pop().expect("four networks");
    if actor.input_width() != STATE_DIM || actor.output_width() != ACTION_DIM {
        return Err(CheckpointError::Mismatch(format!(
            "actor maps {} -> {}, expected {STATE_DIM} -> {ACTION_DIM}",
            actor.input_width(),
            actor.output_width()
        )));
    }
    if critic.input_width() != STATE_DIM + ACTION_DIM || critic.output_width() != 1 {
        return Err(CheckpointError::Mismatch(
            "critic has the wrong input or output width".into(),
        ));
    }
    let mut agent = Agent::from_networks(actor, critic, cfg, norm);
    agent.target_actor = target_actor;
    agent.target_critic = target_critic;
    Ok(agent)
}

/// Networks, targets, normalisation constants and learner settings.
pub fn save_agent(agent: &Agent, path: &Path) -> Result<(), CheckpointError> {
    agent_container(agent, "agent").write(path)
}

/// Loads the agent stored in any checkpoint kind (policy or full training state).
pub fn load_agent(path: &Path) -> Result<Agent, CheckpointError> {
    agent_from(&Container::read(path)?)
}

fn put_adam(c: &mut Container, prefix: &str, opt: &AdamState<f64>) -> Value {
    for (i, (m, v)) in opt.m.iter().zip(&opt.v).enumerate() {
        c.push(format!("{prefix}.m.{i}"), m.clone());
        c.push(format!("{prefix}.v.{i}"), v.clone());
    }
    serde_json::json!({
        "lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps,
        "step": opt.step, "tensors": opt.m.len(),
    })
}

fn take_adam(
    c: &Container,
    prefix: &str,
    into: &mut AdamState<f64>,
) -> Result<(), CheckpointError> {
    let h = &c.header["optimizers"][prefix];
    let bad = |m: &str| CheckpointError::Mismatch(format!("optimizer {prefix}: {m}"));
    let tensors = h["tensors"]
        .as_u64()
        .ok_or_else(|| bad("missing tensor count"))? as usize;
    if tensors != into.m.len() {
        return Err(bad("tensor count differs from network"));
    }
    into.lr = h["lr"].as_f64().ok_or_else(|| bad("lr"))?;
    into.beta1 = h["beta1"].as_f64().ok_or_else(|| bad("beta1"))?;
    into.beta2 = h["beta2"].as_f64().ok_or_else(|| bad("beta2"))?;
    into.eps = h["eps"].as_f64().ok_or_else(|| bad("eps"))?;
    into.step = h["step"].as_u64().ok_or_else(|| bad("step"))?;
    let records = c.record_map();
    for i in 0..tensors {
        for (which, dst) in [("m", &mut into.m[i]), ("v", &mut into.v[i])] {
            let key = format!("{prefix}.{which}.{i}");
            let src = records
                .get(key.as_str())
                .ok_or_else(|| bad(&format!("missing {key}")))?;
            if src.len() != dst.len() {
                return Err(bad(&format!("{key} has the wrong length")));
            }
            dst.copy_from_slice(src);
        }
    }
    Ok(())
}

fn put_replay(c: &mut Container, buf: &ReplayBuffer) -> Value {
    let items = buf.items();
    let mut s = Vec::with_capacity(items.len() * STATE_DIM);
    let mut s2 = Vec::with_capacity(items.len() * STATE_DIM);
    let mut a = Vec::with_capacity(items.len() * ACTION_DIM);
    let mut r = Vec::with_capacity(items.len());
    let mut d = Vec::with_capacity(items.len());
    for t in items {
        s.extend_from_slice(&t.state.to_flat());
        s2.extend_from_slice(&t.next_state.to_flat());
        a.extend_from_slice(&t.action.to_array());
        r.push(t.reward);
        d.push(if t.terminal { 1.0 } else { 0.0 });
    }
    c.push("replay.state", s);
    c.push("replay.action", a);
    c.push("replay.reward", r);
    c.push("replay.next_state", s2);
    c.push("replay.terminal", d);
    serde_json::json!({
        "capacity": buf.capacity(), "cursor": buf.cursor(), "len": items.len(),
    })
}

fn take_replay(c: &Container) -> Result<ReplayBuffer, CheckpointError> {
    let h = &c.header["replay"];
    let bad = |m: &str| CheckpointError::Mismatch(format!("replay: {m}"));
    let capacity = h["capacity"].as_u64().ok_or_else(|| bad("capacity"))? as usize;
    let cursor = h["cursor"].as_u64().ok_or_else(|| bad("cursor"))? as usize;
    let len = h["len"].as_u64().ok_or_else(|| bad("len"))? as usize;
    let recs = c.record_map();
    let get = |k: &str, width: usize| -> Result<&[f64], CheckpointError> {
        let v = recs
            .get(k)
            .copied()
            .ok_or_else(|| bad(&format!("missing {k}")))?;
        if v.len() != len * width {
            return Err(bad(&format!("{k} has the wrong length")));
        }
        Ok(v)
    };
    let (s, a, r) = (
        get("replay.state", STATE_DIM)?,
        get("replay.action", ACTION_DIM)?,
        get("replay.reward", 1)?,
    );
    let (s2, d) = (
        get("replay.next_state", STATE_DIM)?,
        get("replay.terminal", 1)?,
    );
    let items = (0..len)
        .map(|i| {
            let mut act = [0.0; ACTION_DIM];
            act.copy_from_slice(&a[i * ACTION_DIM..(i + 1) * ACTION_DIM]);
            Transition {
                state: StackedState::from_flat(&s[i * STATE_DIM..(i + 1) * STATE_DIM])
                    .expect("width"),
                action: Action::from_array(act),
                reward: r[i],
                next_state: StackedState::from_flat(&s2[i * STATE_DIM..(i + 1) * STATE_DIM])
                    .expect("width"),
                terminal: d[i] != 0.0,
            }
        })
        .collect();
    ReplayBuffer::from_parts(capacity, items, cursor).ok_or_else(|| bad("inconsistent cursor"))
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("state serialises")
}

fn from_value<T: serde::de::DeserializeOwned>(
    c: &Container,
    key: &str,
) -> Result<T, CheckpointError> {
    serde_json::from_value(c.header[key].clone())
        .map_err(|e| CheckpointError::Mismatch(format!("{key}: {e}")))
}

impl Trainer {
    /// Full training state: agent, optimisers, replay contents and every random stream.
    pub fn to_container(&self) -> Container {
        let mut c = agent_container(&self.agent, "training");
        let actor = put_adam(&mut c, "actor_opt", &self.agent.actor_opt);
        let critic = put_adam(&mut c, "critic_opt", &self.agent.critic_opt);
        let replay = put_replay(&mut c, &self.buffer);
        let h = c.header.as_object_mut().expect("header is an object");
        h.insert(
            "optimizers".into(),
            serde_json::json!({"actor_opt": actor, "critic_opt": critic}),
        );
        h.insert("replay".into(), replay);
        h.insert("train_config".into(), to_value(&self.cfg));
        h.insert("episode".into(), to_value(&self.episode));
        h.insert("noise".into(), to_value(&self.noise));
        h.insert("replay_rng".into(), to_value(&self.replay_rng));
        h.insert("env".into(), to_value(&self.env));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, CheckpointError> {
        if c.header["kind"] != "training" {
            return Err(CheckpointError::Mismatch(
                "not a training checkpoint".into(),
            ));
        }
        let mut agent = agent_from(c)?;
        take_adam(c, "actor_opt", &mut agent.actor_opt)?;
        take_adam(c, "critic_opt", &mut agent.critic_opt)?;
        let cfg: TrainConfig = from_value(c, "train_config")?;
        let noise: OuNoise = from_value(c, "noise")?;
        let replay_rng: ChaCha8Rng = from_value(c, "replay_rng")?;
        let env: Env = from_value(c, "env")?;
        let episode: usize = from_value(c, "episode")?;
        Ok(Self {
            cfg,
            agent,
            buffer: take_replay(c)?,
            noise,
            replay_rng,
            env,
            episode,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        self.to_container()
            .write(path)
            .map_err(|e| TrainError::Checkpoint(e.to_string()))
    }

    /// Restores a training checkpoint; `episodes` may extend the original run length.
    pub fn resume(path: &Path, episodes: Option<usize>) -> Result<Self, TrainError> {
        let c = Container::read(path).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        let mut t = Self::from_container(&c).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        if let Some(n) = episodes {
            t.cfg.episodes = n;
        }
        Ok(t)
    }
}
