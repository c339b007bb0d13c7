//! Deep deterministic policy gradient: replay, Ornstein-Uhlenbeck exploration, and the
//! actor/critic learner with slowly tracking target networks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::env::{Action, StackedState, ACTION_DIM, OBS_DIM, STATE_DIM};
use crate::nn::{AdamState, Mode, Network, NnError, Tensor2};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DdpgError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("{0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdpgConfig {
    pub gamma: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Transitions collected before the first learner iteration.
    pub warmup: usize,
}

impl Default for DdpgConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.001,
            batch_size: 128,
            buffer_capacity: 100_000,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            warmup: 1000,
        }
    }
}

impl DdpgConfig {
    pub fn validate(&self) -> Result<(), DdpgError> {
        let bad = |m: &str| Err(DdpgError::Config(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must be in (0, 1]");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must be in (0, 1]");
        }
        // batch norm needs at least two rows in train mode
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if self.buffer_capacity < self.batch_size {
            return bad("buffer_capacity must hold at least one batch");
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuConfig {
    pub theta: f64,
    pub sigma: f64,
    pub mu: f64,
    pub dt: f64,
    pub reset_per_episode: bool,
}

impl Default for OuConfig {
    fn default() -> Self {
        Self {
            theta: 0.15,
            sigma: 0.2,
            mu: 0.0,
            dt: 1.0,
            reset_per_episode: false,
        }
    }
}

/// Ornstein-Uhlenbeck process over the four action components, with its own random stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuNoise {
    pub theta: f64,
    pub sigma: f64,
    pub mu: f64,
    pub state: [f64; ACTION_DIM],
    rng: ChaCha8Rng,
}

impl OuNoise {
    pub fn new(cfg: &OuConfig, seed: u64) -> Self {
        Self {
            theta: cfg.theta,
            sigma: cfg.sigma,
            mu: cfg.mu,
            state: [cfg.mu; ACTION_DIM],
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn reset(&mut self) {
        self.state = [self.mu; ACTION_DIM];
    }

    /// `x <- x + theta (mu - x) dt + sigma sqrt(dt) xi`.
    pub fn sample(&mut self, dt: f64) -> [f64; ACTION_DIM] {
        let s = dt.sqrt();
        for x in &mut self.state {
            let xi: f64 = StandardNormal.sample(&mut self.rng);
            *x += self.theta * (self.mu - *x) * dt + self.sigma * s * xi;
        }
        self.state
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: StackedState,
    pub action: Action,
    pub reward: f64,
    pub next_state: StackedState,
    /// Set only on true termination, never on truncation.
    pub terminal: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("replay buffer holds {have} transitions, {need} requested")]
pub struct NotReady {
    pub have: usize,
    pub need: usize,
}

/// Fixed-capacity ring of transitions with FIFO eviction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: Vec::new(),
            cursor: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    /// Stored transitions in insertion order, oldest first.
    pub fn iter_oldest_first(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.items.len() < self.capacity {
            0
        } else {
            self.cursor
        };
        self.items[split..].iter().chain(self.items[..split].iter())
    }

    /// Rebuilds a buffer from transitions listed oldest first.
    pub fn from_parts(capacity: usize, items: Vec<Transition>, cursor: usize) -> Option<Self> {
        if capacity == 0 || items.len() > capacity || cursor >= capacity {
            return None;
        }
        if items.len() < capacity && cursor != items.len() % capacity {
            return None;
        }
        Some(Self {
            capacity,
            items,
            cursor,
        })
    }

    /// Raw storage order, paired with [`Self::from_parts`].
    pub fn items(&self) -> &[Transition] {
        &self.items
    }

    /// Uniform draw with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        n: usize,
    ) -> Result<Vec<usize>, NotReady> {
        if self.items.len() < n || n == 0 {
            return Err(NotReady {
                have: self.items.len(),
                need: n,
            });
        }
        Ok((0..n)
            .map(|_| rng.random_range(0..self.items.len()))
            .collect())
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        n: usize,
    ) -> Result<Vec<&Transition>, NotReady> {
        Ok(self
            .sample_indices(rng, n)?
            .into_iter()
            .map(|i| &self.items[i])
            .collect())
    }
}

/// Rescales raw observations before they reach the networks: pixels by frame size,
/// velocities by the speed limit, yaw by pi.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub frame_width: f64,
    pub frame_height: f64,
    pub max_speed: f64,
    pub yaw_scale: f64,
}

impl Default for Normalizer {
    fn default() -> Self {
        Self {
            frame_width: 640.0,
            frame_height: 480.0,
            max_speed: 1.0,
            yaw_scale: std::f64::consts::PI,
        }
    }
}

impl Normalizer {
    pub fn scales(&self) -> [f64; OBS_DIM] {
        [
            self.frame_width,
            self.frame_height,
            self.frame_width,
            self.frame_height,
            self.max_speed,
            self.max_speed,
            self.max_speed,
            self.yaw_scale,
        ]
    }

    pub fn apply(&self, state: &StackedState) -> [f64; STATE_DIM] {
        let scales = self.scales();
        let mut v = state.to_flat();
        for (i, x) in v.iter_mut().enumerate() {
            *x /= scales[i % OBS_DIM];
        }
        v
    }

    pub fn batch<'a>(
        &self,
        states: impl ExactSizeIterator<Item = &'a StackedState>,
    ) -> Tensor2<f64> {
        let rows = states.len();
        let mut data = Vec::with_capacity(rows * STATE_DIM);
        for s in states {
            data.extend_from_slice(&self.apply(s));
        }
        Tensor2::from_vec(rows, STATE_DIM, data).expect("row width is STATE_DIM")
    }
}

/// Anything that can score a batch of (state, action) rows and differentiate with respect
/// to the actions. The learned critic implements it; tests plug in closed-form critics.
pub trait ActionValue {
    /// Returns `Q` as a `(batch, 1)` tensor and `dQ/da` as `(batch, action_dim)`.
    fn value_and_action_grad(
        &mut self,
        states: &Tensor2<f64>,
        actions: &Tensor2<f64>,
    ) -> Result<(Tensor2<f64>, Tensor2<f64>), NnError>;
}

impl ActionValue for Network<f64> {
    /// Runs in train mode so batch statistics match the critic's own updates.
    fn value_and_action_grad(
        &mut self,
        states: &Tensor2<f64>,
        actions: &Tensor2<f64>,
    ) -> Result<(Tensor2<f64>, Tensor2<f64>), NnError> {
        let input = Tensor2::hcat(&[states, actions])?;
        let q = self.forward(&input, Mode::Train)?;
        let ones = Tensor2::filled(q.rows(), 1, 1.0);
        let g = self.backward_with(&ones, false)?;
        Ok((q, g.columns(states.cols(), actions.cols())))
    }
}

/// One gradient-ascent step on mean `Q(s, mu(s))` for the actor. Returns the mean Q before
/// the step.
pub fn actor_ascent_step<Q: ActionValue + ?Sized>(
    actor: &mut Network<f64>,
    opt: &mut AdamState<f64>,
    states: &Tensor2<f64>,
    critic: &mut Q,
) -> Result<f64, DdpgError> {
    let actions = actor.forward(states, Mode::Train)?;
    let (q, dq_da) = critic.value_and_action_grad(states, &actions)?;
    let mean_q = q.mean();
    if !mean_q.is_finite() {
        return Err(DdpgError::NonFinite("actor objective"));
    }
    let b = states.rows() as f64;
    // minimise -mean Q
    let upstream = dq_da.map(|g| -g / b);
    actor.backward(&upstream)?;
    opt.step(actor)?;
    Ok(mean_q)
}

/// `target <- tau source + (1 - tau) target` over parameters and running statistics.
pub fn soft_update(
    target: &mut Network<f64>,
    source: &Network<f64>,
    tau: f64,
) -> Result<(), NnError> {
    if !target.same_architecture(source) {
        return Err(NnError::Usage(
            "soft update between different architectures".into(),
        ));
    }
    let src = source.named_state();
    for (t, (_, s)) in target.state_mut().into_iter().zip(src) {
        for (ti, si) in t.iter_mut().zip(s) {
            *ti = tau * si + (1.0 - tau) * *ti;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnStats {
    pub critic_loss: f64,
    pub mean_q: f64,
}

#[derive(Debug, Clone)]
pub struct Agent {
    pub actor: Network<f64>,
    pub critic: Network<f64>,
    pub target_actor: Network<f64>,
    pub target_critic: Network<f64>,
    pub actor_opt: AdamState<f64>,
    pub critic_opt: AdamState<f64>,
    pub cfg: DdpgConfig,
    pub norm: Normalizer,
}

impl Agent {
    /// Fresh networks drawn from `rng`; targets start as exact copies.
    pub fn new<R: Rng + ?Sized>(rng: &mut R, cfg: DdpgConfig, norm: Normalizer) -> Self {
        let actor = Network::actor(STATE_DIM, ACTION_DIM, rng);
        let critic = Network::critic(STATE_DIM, ACTION_DIM, rng);
        Self::from_networks(actor, critic, cfg, norm)
    }

    pub fn from_networks(
        actor: Network<f64>,
        critic: Network<f64>,
        cfg: DdpgConfig,
        norm: Normalizer,
    ) -> Self {
        Self {
            target_actor: actor.clone_parameters(),
            target_critic: critic.clone_parameters(),
            actor_opt: AdamState::new(&actor, cfg.actor_lr),
            critic_opt: AdamState::new(&critic, cfg.critic_lr),
            actor,
            critic,
            cfg,
            norm,
        }
    }

    /// Deterministic actor output on one state.
    pub fn policy(&self, state: &StackedState) -> Result<Action, NnError> {
        let x = Tensor2::from_vec(1, STATE_DIM, self.norm.apply(state).to_vec())?;
        let a = self.actor.infer(&x)?;
        let mut out = [0.0; ACTION_DIM];
        out.copy_from_slice(a.row(0));
        Ok(Action::from_array(out))
    }

    /// Actor output plus optional exploration noise, clamped into the action box.
    pub fn select_action(
        &self,
        state: &StackedState,
        noise: Option<(&mut OuNoise, f64)>,
    ) -> Result<Action, NnError> {
        let mut a = self.policy(state)?.to_array();
        if let Some((ou, dt)) = noise {
            let n = ou.sample(dt);
            for (x, e) in a.iter_mut().zip(n) {
                *x = (*x + e).clamp(-1.0, 1.0);
            }
        }
        Ok(Action::from_array(a))
    }

    fn batch_tensors(&self, batch: &[&Transition]) -> (Tensor2<f64>, Tensor2<f64>, Tensor2<f64>) {
        let s = self.norm.batch(batch.iter().map(|t| &t.state));
        let s2 = self.norm.batch(batch.iter().map(|t| &t.next_state));
        let a: Vec<f64> = batch.iter().flat_map(|t| t.action.to_array()).collect();
        let a = Tensor2::from_vec(batch.len(), ACTION_DIM, a).expect("action width");
        (s, a, s2)
    }

    /// Bootstrapped targets `r + gamma Q'(s', mu'(s'))`, bootstrap dropped on terminal rows.
    pub fn critic_targets(&self, batch: &[&Transition]) -> Result<Vec<f64>, NnError> {
        let (_, _, s2) = self.batch_tensors(batch);
        let a2 = self.target_actor.infer(&s2)?;
        let q2 = self.target_critic.infer(&Tensor2::hcat(&[&s2, &a2])?)?;
        Ok(batch
            .iter()
            .zip(q2.data())
            .map(|(t, q)| {
                if t.terminal {
                    t.reward
                } else {
                    t.reward + self.cfg.gamma * q
                }
            })
            .collect())
    }

    /// One Adam step on the mean squared TD error; returns the loss before the step.
    pub fn critic_update(&mut self, batch: &[&Transition]) -> Result<f64, DdpgError> {
        let y = self.critic_targets(batch)?;
        let (s, a, _) = self.batch_tensors(batch);
        self.critic_regression_step(&s, &a, &y)
    }

    /// Mean squared error step of `Q(s, a)` towards fixed targets `y`.
    pub fn critic_regression_step(
        &mut self,
        s: &Tensor2<f64>,
        a: &Tensor2<f64>,
        y: &[f64],
    ) -> Result<f64, DdpgError> {
        let q = self.critic.forward(&Tensor2::hcat(&[s, a])?, Mode::Train)?;
        let b = y.len() as f64;
        let mut loss = 0.0;
        let grad: Vec<f64> = q
            .data()
            .iter()
            .zip(y)
            .map(|(q, y)| {
                let d = q - y;
                loss += d * d;
                2.0 * d / b
            })
            .collect();
        loss /= b;
        if !loss.is_finite() {
            return Err(DdpgError::NonFinite("critic loss"));
        }
        self.critic
            .backward(&Tensor2::from_vec(y.len(), 1, grad)?)?;
        self.critic_opt.step(&mut self.critic)?;
        Ok(loss)
    }

    /// One ascent step of the actor through the current critic; returns mean Q before it.
    pub fn actor_update(&mut self, batch: &[&Transition]) -> Result<f64, DdpgError> {
        let s = self.norm.batch(batch.iter().map(|t| &t.state));
        actor_ascent_step(&mut self.actor, &mut self.actor_opt, &s, &mut self.critic)
    }

    pub fn update_targets(&mut self) -> Result<(), NnError> {
        soft_update(&mut self.target_actor, &self.actor, self.cfg.tau)?;
        soft_update(&mut self.target_critic, &self.critic, self.cfg.tau)
    }

    /// Critic step, then actor step, then both target blends.
    pub fn learn(&mut self, batch: &[&Transition]) -> Result<LearnStats, DdpgError> {
        let critic_loss = self.critic_update(batch)?;
        let mean_q = self.actor_update(batch)?;
        self.update_targets()?;
        self.actor.clear_caches();
        self.critic.clear_caches();
        Ok(LearnStats {
            critic_loss,
            mean_q,
        })
    }

    /// Samples a batch and learns from it once the buffer has passed warm-up.
    pub fn maybe_learn<R: Rng + ?Sized>(
        &mut self,
        buffer: &ReplayBuffer,
        rng: &mut R,
    ) -> Result<Option<LearnStats>, DdpgError> {
        if buffer.len() < self.cfg.warmup.max(self.cfg.batch_size) {
            return Ok(None);
        }
        let batch = match buffer.sample(rng, self.cfg.batch_size) {
            Ok(b) => b,
            Err(_) => return Ok(None),
        };
        self.learn(&batch).map(Some)
    }

    /// Critic estimate for each (state, action) pair, eval mode.
    pub fn q_values(&self, pairs: &[(StackedState, Action)]) -> Result<Vec<f64>, NnError> {
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        let s = self.norm.batch(pairs.iter().map(|(s, _)| s));
        let a: Vec<f64> = pairs.iter().flat_map(|(_, a)| a.to_array()).collect();
        let a = Tensor2::from_vec(pairs.len(), ACTION_DIM, a)?;
        Ok(self.critic.infer(&Tensor2::hcat(&[&s, &a])?)?.into_vec())
    }

    pub fn state_eq(&self, other: &Self) -> bool {
        self.actor.state_eq(&other.actor)
            && self.critic.state_eq(&other.critic)
            && self.target_actor.state_eq(&other.target_actor)
            && self.target_critic.state_eq(&other.target_critic)
            && self.actor_opt == other.actor_opt
            && self.critic_opt == other.critic_opt
            && self.cfg == other.cfg
            && self.norm == other.norm
    }
}
