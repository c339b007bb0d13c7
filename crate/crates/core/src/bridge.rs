//! Environment server and client speaking newline-delimited JSON over TCP. One connection
//! hosts one environment; every request gets exactly one response.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::env::{
    Action, Env, EnvConfig, EnvError, Environment, StackedState, StepInfo, StepOutcome,
};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Request {
    Hello {
        version: u32,
        seed: u64,
        config_hash: String,
    },
    Reset,
    Step {
        action: [f64; 4],
    },
    Close,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Response {
    Ready {
        version: u32,
        config_hash: String,
    },
    State {
        observation: Vec<f64>,
        reward: f64,
        terminated: bool,
        truncated: bool,
        info: Option<StepInfo>,
    },
    Error {
        code: String,
        message: String,
    },
}

impl Response {
    fn error(code: &str, message: impl Into<String>) -> Self {
        Self::Error {
            code: code.into(),
            message: message.into(),
        }
    }

    fn from_env_error(e: &EnvError) -> Self {
        let code = match e {
            EnvError::EpisodeOver => "episode-over",
            EnvError::NotReset => "not-reset",
            _ => "environment",
        };
        Self::error(code, e.to_string())
    }
}

fn write_line<T: Serialize>(w: &mut impl Write, msg: &T) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, msg)?;
    w.write_all(b"\n")?;
    w.flush()
}

/// Serves one connection until the client closes it or sends something unparseable.
pub fn handle_connection(
    stream: TcpStream,
    cfg: &EnvConfig,
    config_hash: &str,
) -> std::io::Result<()> {
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    let mut env: Option<Env> = None;
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Ok(());
        }
        let req: Request = match serde_json::from_str(line.trim_end()) {
            Ok(r) => r,
            Err(e) => {
                write_line(&mut writer, &Response::error("malformed", e.to_string()))?;
                return Ok(());
            }
        };
        let resp = match (req, env.as_mut()) {
            (
                Request::Hello {
                    version,
                    seed,
                    config_hash: h,
                },
                None,
            ) => {
                if version != PROTOCOL_VERSION {
                    let msg = format!("server speaks version {PROTOCOL_VERSION}, client {version}");
                    write_line(&mut writer, &Response::error("version-mismatch", msg))?;
                    return Ok(());
                }
                if h != config_hash {
                    write_line(
                        &mut writer,
                        &Response::error("config-mismatch", "configuration hash differs"),
                    )?;
                    return Ok(());
                }
                match Env::new(cfg.clone(), seed) {
                    Ok(e) => {
                        env = Some(e);
                        Response::Ready {
                            version: PROTOCOL_VERSION,
                            config_hash: config_hash.to_string(),
                        }
                    }
                    Err(e) => Response::from_env_error(&e),
                }
            }
            (Request::Hello { .. }, Some(_)) => Response::error("usage", "hello already received"),
            (Request::Close, _) => {
                write_line(
                    &mut writer,
                    &Response::Ready {
                        version: PROTOCOL_VERSION,
                        config_hash: config_hash.to_string(),
                    },
                )?;
                return Ok(());
            }
            (_, None) => Response::error("usage", "hello required first"),
            (Request::Reset, Some(e)) => match e.reset() {
                Ok(s) => Response::State {
                    observation: s.to_flat().to_vec(),
                    reward: 0.0,
                    terminated: false,
                    truncated: false,
                    info: None,
                },
                Err(err) => Response::from_env_error(&err),
            },
            (Request::Step { action }, Some(e)) => match e.step(Action::from_array(action)) {
                Ok(o) => Response::State {
                    observation: o.state.to_flat().to_vec(),
                    reward: o.reward,
                    terminated: o.terminated,
                    truncated: o.truncated,
                    info: Some(o.info),
                },
                Err(err) => Response::from_env_error(&err),
            },
        };
        write_line(&mut writer, &resp)?;
    }
}

/// Handle to a running server; dropping it does not stop the listener thread.
pub struct ServerHandle {
    pub addr: std::net::SocketAddr,
    stop: Arc<AtomicBool>,
}

impl ServerHandle {
    /// Stops accepting new connections; connections in flight finish normally.
    pub fn shutdown(&self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the blocking accept
        let _ = TcpStream::connect(self.addr);
    }
}

/// Accepts connections on `listener` forever, one thread per connection.
pub fn serve_env(
    listener: TcpListener,
    cfg: EnvConfig,
    config_hash: String,
) -> std::io::Result<()> {
    serve_until(listener, cfg, config_hash, Arc::new(AtomicBool::new(false)))
}

fn serve_until(
    listener: TcpListener,
    cfg: EnvConfig,
    config_hash: String,
    stop: Arc<AtomicBool>,
) -> std::io::Result<()> {
    let cfg = Arc::new(cfg);
    let hash = Arc::new(config_hash);
    for stream in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        let (cfg, hash) = (Arc::clone(&cfg), Arc::clone(&hash));
        thread::spawn(move || {
            let peer = stream.peer_addr().ok();
            if let Err(e) = handle_connection(stream, &cfg, &hash) {
                log::info!("connection {peer:?} ended: {e}");
            }
        });
    }
    Ok(())
}

/// Binds `addr` and serves on a background thread.
pub fn spawn_server(
    addr: impl ToSocketAddrs,
    cfg: EnvConfig,
    config_hash: String,
) -> std::io::Result<ServerHandle> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&stop);
    thread::spawn(move || serve_until(listener, cfg, config_hash, flag));
    Ok(ServerHandle { addr: local, stop })
}

/// Client-side environment; a drop-in replacement for [`Env`].
pub struct RemoteEnv {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    line: String,
}

impl RemoteEnv {
    pub fn connect(
        endpoint: impl ToSocketAddrs,
        seed: u64,
        config_hash: &str,
    ) -> Result<Self, EnvError> {
        let stream =
            TcpStream::connect(endpoint).map_err(|e| EnvError::Transport(e.to_string()))?;
        stream
            .set_nodelay(true)
            .map_err(|e| EnvError::Transport(e.to_string()))?;
        let reader = BufReader::new(
            stream
                .try_clone()
                .map_err(|e| EnvError::Transport(e.to_string()))?,
        );
        let mut env = Self {
            reader,
            writer: BufWriter::new(stream),
            line: String::new(),
        };
        match env.call(&Request::Hello {
            version: PROTOCOL_VERSION,
            seed,
            config_hash: config_hash.to_string(),
        })? {
            Response::Ready { .. } => Ok(env),
            other => Err(EnvError::Protocol(format!(
                "unexpected reply to hello: {other:?}"
            ))),
        }
    }

    fn call(&mut self, req: &Request) -> Result<Response, EnvError> {
        write_line(&mut self.writer, req).map_err(|e| EnvError::Transport(e.to_string()))?;
        self.line.clear();
        let n = self
            .reader
            .read_line(&mut self.line)
            .map_err(|e| EnvError::Transport(e.to_string()))?;
        if n == 0 {
            return Err(EnvError::Transport("connection closed by server".into()));
        }
        let resp: Response = serde_json::from_str(self.line.trim_end())
            .map_err(|e| EnvError::Protocol(e.to_string()))?;
        if let Response::Error { code, message } = resp {
            return Err(match code.as_str() {
                "episode-over" => EnvError::EpisodeOver,
                "not-reset" => EnvError::NotReset,
                _ => EnvError::Remote { code, message },
            });
        }
        Ok(resp)
    }

    fn state(observation: &[f64]) -> Result<StackedState, EnvError> {
        StackedState::from_flat(observation).ok_or_else(|| {
            EnvError::Protocol(format!("observation has {} values", observation.len()))
        })
    }

    pub fn close(mut self) -> Result<(), EnvError> {
        self.call(&Request::Close).map(|_| ())
    }
}

impl Environment for RemoteEnv {
    fn reset(&mut self) -> Result<StackedState, EnvError> {
        match self.call(&Request::Reset)? {
            Response::State { observation, .. } => Self::state(&observation),
            other => Err(EnvError::Protocol(format!(
                "unexpected reply to reset: {other:?}"
            ))),
        }
    }

    fn step(&mut self, action: Action) -> Result<StepOutcome, EnvError> {
        match self.call(&Request::Step {
            action: action.to_array(),
        })? {
            Response::State {
                observation,
                reward,
                terminated,
                truncated,
                info: Some(info),
            } => Ok(StepOutcome {
                state: Self::state(&observation)?,
                reward,
                terminated,
                truncated,
                info,
            }),
            other => Err(EnvError::Protocol(format!(
                "unexpected reply to step: {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub steps: usize,
    pub episodes: usize,
    pub total_seconds: f64,
    pub mean_us: f64,
    pub p50_us: f64,
    pub p99_us: f64,
}

/// Times `steps` zero-action step round-trips, resetting whenever an episode ends.
pub fn bench_bridge(env: &mut dyn Environment, steps: usize) -> Result<BenchReport, EnvError> {
    let start = Instant::now();
    let mut lat = Vec::with_capacity(steps);
    env.reset()?;
    let mut episodes = 1;
    for _ in 0..steps {
        let t = Instant::now();
        let out = env.step(Action::ZERO)?;
        lat.push(t.elapsed().as_secs_f64() * 1e6);
        if out.terminated || out.truncated {
            env.reset()?;
            episodes += 1;
        }
    }
    let total = start.elapsed().as_secs_f64();
    lat.sort_by(|a, b| a.total_cmp(b));
    let pct = |p: f64| {
        if lat.is_empty() {
            0.0
        } else {
            lat[((lat.len() - 1) as f64 * p).round() as usize]
        }
    };
    Ok(BenchReport {
        steps,
        episodes,
        total_seconds: total,
        mean_us: if lat.is_empty() {
            0.0
        } else {
            lat.iter().sum::<f64>() / lat.len() as f64
        },
        p50_us: pct(0.5),
        p99_us: pct(0.99),
    })
}
