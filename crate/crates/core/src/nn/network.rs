use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Layer, LayerKind, LayerSpec, Mode, NnError, Tensor2};
use crate::scalar::Scalar;

/// Input head: consumes `width` consecutive input columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub width: usize,
    pub layers: Vec<LayerSpec>,
}

/// Architecture: parallel input heads whose outputs are concatenated and fed to a trunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub heads: Vec<HeadSpec>,
    pub trunk: Vec<LayerSpec>,
}

fn chain_width(input: usize, layers: &[LayerSpec]) -> Result<usize, NnError> {
    let mut w = input;
    for (i, l) in layers.iter().enumerate() {
        if l.fan_in != w {
            return Err(NnError::Shape(format!(
                "layer {i} expects {} inputs but receives {w}",
                l.fan_in
            )));
        }
        if l.kind != LayerKind::Dense && l.fan_in != l.fan_out {
            return Err(NnError::Shape(format!("layer {i} must preserve width")));
        }
        w = l.fan_out;
    }
    Ok(w)
}

impl NetworkSpec {
    pub fn sequential(input: usize, layers: Vec<LayerSpec>) -> Self {
        Self {
            heads: vec![HeadSpec {
                width: input,
                layers: Vec::new(),
            }],
            trunk: layers,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.heads.is_empty() {
            return Err(NnError::Shape(
                "network needs at least one input head".into(),
            ));
        }
        let concat: usize = self
            .heads
            .iter()
            .map(|h| chain_width(h.width, &h.layers))
            .sum::<Result<usize, _>>()?;
        chain_width(concat, &self.trunk)?;
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.heads.iter().map(|h| h.width).sum()
    }

    pub fn concat_width(&self) -> usize {
        self.heads
            .iter()
            .map(|h| h.layers.last().map_or(h.width, |l| l.fan_out))
            .sum()
    }

    pub fn output_width(&self) -> usize {
        self.trunk.last().map_or(self.concat_width(), |l| l.fan_out)
    }

    /// Number of learnable scalars implied by the layer list.
    pub fn parameter_count(&self) -> usize {
        self.heads
            .iter()
            .flat_map(|h| h.layers.iter())
            .chain(self.trunk.iter())
            .map(|l| match l.kind {
                LayerKind::Dense => l.fan_in * l.fan_out + l.fan_out,
                LayerKind::Batchnorm => 2 * l.fan_in,
                _ => 0,
            })
            .sum()
    }
}

/// flatten(8x5) -> [dense 256 -> batchnorm -> relu] x3 -> dense 4 -> tanh
pub fn actor_spec(state_width: usize, action_dim: usize) -> NetworkSpec {
    let mut layers = Vec::new();
    let mut w = state_width;
    for _ in 0..3 {
        layers.push(LayerSpec::dense(w, 256));
        layers.push(LayerSpec::batchnorm(256));
        layers.push(LayerSpec::relu(256));
        w = 256;
    }
    layers.push(LayerSpec::dense_init(w, action_dim, 3e-3));
    layers.push(LayerSpec::tanh(action_dim));
    NetworkSpec::sequential(state_width, layers)
}

/// State head (192) and action head (64), concatenated, then two hidden layers of 256 and a
/// single Q output.
pub fn critic_spec(state_width: usize, action_dim: usize) -> NetworkSpec {
    let head = |width: usize, units: usize| HeadSpec {
        width,
        layers: vec![
            LayerSpec::dense(width, units),
            LayerSpec::batchnorm(units),
            LayerSpec::relu(units),
        ],
    };
    let mut trunk = Vec::new();
    let mut w = 192 + 64;
    for _ in 0..2 {
        trunk.push(LayerSpec::dense(w, 256));
        trunk.push(LayerSpec::batchnorm(256));
        trunk.push(LayerSpec::relu(256));
        w = 256;
    }
    trunk.push(LayerSpec::dense_init(w, 1, 3e-3));
    NetworkSpec {
        heads: vec![head(state_width, 192), head(action_dim, 64)],
        trunk,
    }
}

#[derive(Debug, Clone)]
struct Head<T> {
    width: usize,
    layers: Vec<Layer<T>>,
}

/// A dense network with optional multi-head input, batch normalisation, and cached
/// activations for backpropagation.
#[derive(Debug, Clone)]
pub struct Network<T> {
    spec: NetworkSpec,
    heads: Vec<Head<T>>,
    trunk: Vec<Layer<T>>,
    mode: Mode,
}

fn run_train<T: Scalar>(layers: &mut [Layer<T>], mut x: Tensor2<T>) -> Result<Tensor2<T>, NnError> {
    for l in layers.iter_mut() {
        x = l.forward(x, Mode::Train)?;
    }
    Ok(x)
}

fn run_eval<T: Scalar>(layers: &[Layer<T>], x: &Tensor2<T>) -> Tensor2<T> {
    let mut out = x.clone();
    for l in layers {
        out = l.infer(&out);
    }
    out
}

fn run_backward<T: Scalar>(
    layers: &mut [Layer<T>],
    mut g: Tensor2<T>,
    param_grads: bool,
) -> Result<Tensor2<T>, NnError> {
    for l in layers.iter_mut().rev() {
        g = l.backward(g, param_grads)?;
    }
    Ok(g)
}

impl<T: Scalar> Network<T> {
    pub fn new<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Result<Self, NnError> {
        spec.validate()?;
        let heads = spec
            .heads
            .iter()
            .map(|h| Head {
                width: h.width,
                layers: h.layers.iter().map(|l| Layer::build(l, rng)).collect(),
            })
            .collect();
        let trunk = spec.trunk.iter().map(|l| Layer::build(l, rng)).collect();
        Ok(Self {
            spec,
            heads,
            trunk,
            mode: Mode::Train,
        })
    }

    pub fn actor<R: Rng + ?Sized>(state_width: usize, action_dim: usize, rng: &mut R) -> Self {
        Self::new(actor_spec(state_width, action_dim), rng).expect("actor spec is consistent")
    }

    pub fn critic<R: Rng + ?Sized>(state_width: usize, action_dim: usize, rng: &mut R) -> Self {
        Self::new(critic_spec(state_width, action_dim), rng).expect("critic spec is consistent")
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn input_width(&self) -> usize {
        self.spec.input_width()
    }

    pub fn output_width(&self) -> usize {
        self.spec.output_width()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    fn check_input(&self, input: &Tensor2<T>) -> Result<(), NnError> {
        if input.cols() != self.input_width() || input.rows() == 0 {
            return Err(NnError::Shape(format!(
                "network expects (batch >= 1, {}) input, got {:?}",
                self.input_width(),
                input.shape()
            )));
        }
        Ok(())
    }

    fn check_output(out: Tensor2<T>) -> Result<Tensor2<T>, NnError> {
        if out.all_finite() {
            Ok(out)
        } else {
            Err(NnError::NonFinite("network output"))
        }
    }

    /// Forward pass. Train mode normalises with batch statistics, updates running statistics,
    /// and caches activations for [`Self::backward`]; eval mode leaves the network untouched.
    pub fn forward(&mut self, input: &Tensor2<T>, mode: Mode) -> Result<Tensor2<T>, NnError> {
        if mode == Mode::Eval {
            return self.infer(input);
        }
        self.check_input(input)?;
        let single = self.heads.len() == 1;
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut start = 0;
        for h in &mut self.heads {
            let x = if single {
                input.clone()
            } else {
                input.columns(start, h.width)
            };
            start += h.width;
            outs.push(run_train(&mut h.layers, x)?);
        }
        let joined = if outs.len() == 1 {
            outs.pop().unwrap()
        } else {
            Tensor2::hcat(&outs.iter().collect::<Vec<_>>())?
        };
        Self::check_output(run_train(&mut self.trunk, joined)?)
    }

    /// Eval-mode forward pass on a shared reference.
    pub fn infer(&self, input: &Tensor2<T>) -> Result<Tensor2<T>, NnError> {
        self.check_input(input)?;
        let single = self.heads.len() == 1;
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut start = 0;
        for h in &self.heads {
            let x = if single {
                input.clone()
            } else {
                input.columns(start, h.width)
            };
            start += h.width;
            outs.push(run_eval(&h.layers, &x));
        }
        let joined = if outs.len() == 1 {
            outs.pop().unwrap()
        } else {
            Tensor2::hcat(&outs.iter().collect::<Vec<_>>())?
        };
        Self::check_output(run_eval(&self.trunk, &joined))
    }

    /// Backpropagates `upstream` (d loss / d output) through the cached train-mode pass.
    /// Parameter gradients are overwritten when `param_grads` is set; the input gradient is
    /// always returned.
    pub fn backward_with(
        &mut self,
        upstream: &Tensor2<T>,
        param_grads: bool,
    ) -> Result<Tensor2<T>, NnError> {
        if upstream.cols() != self.output_width() {
            return Err(NnError::Shape(format!(
                "upstream gradient has {} columns, network outputs {}",
                upstream.cols(),
                self.output_width()
            )));
        }
        let g = run_backward(&mut self.trunk, upstream.clone(), param_grads)?;
        let single = self.heads.len() == 1;
        let mut grads_in = Vec::with_capacity(self.heads.len());
        let mut start = 0;
        for h in &mut self.heads {
            let w = h.layers.last().map_or(h.width, |l| l.fan_out());
            let part = if single {
                g.clone()
            } else {
                g.columns(start, w)
            };
            start += w;
            grads_in.push(run_backward(&mut h.layers, part, param_grads)?);
        }
        let out = if grads_in.len() == 1 {
            grads_in.pop().unwrap()
        } else {
            Tensor2::hcat(&grads_in.iter().collect::<Vec<_>>())?
        };
        if out.all_finite() {
            Ok(out)
        } else {
            Err(NnError::NonFinite("input gradient"))
        }
    }

    pub fn backward(&mut self, upstream: &Tensor2<T>) -> Result<Tensor2<T>, NnError> {
        self.backward_with(upstream, true)
    }

    fn layers(&self) -> impl Iterator<Item = (String, &Layer<T>)> {
        self.heads
            .iter()
            .enumerate()
            .flat_map(|(hi, h)| {
                h.layers
                    .iter()
                    .enumerate()
                    .map(move |(li, l)| (format!("head{hi}.{li}"), l))
            })
            .chain(
                self.trunk
                    .iter()
                    .enumerate()
                    .map(|(li, l)| (format!("trunk.{li}"), l)),
            )
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer<T>> {
        self.heads
            .iter_mut()
            .flat_map(|h| h.layers.iter_mut())
            .chain(self.trunk.iter_mut())
    }

    /// Learnable tensors with stable names such as `trunk.0.weight`.
    pub fn named_params(&self) -> Vec<(String, &[T])> {
        self.layers()
            .flat_map(|(prefix, l)| {
                l.params()
                    .into_iter()
                    .map(move |(n, v)| (format!("{prefix}.{n}"), v))
            })
            .collect()
    }

    /// Learnable tensors plus batch-norm running statistics.
    pub fn named_state(&self) -> Vec<(String, &[T])> {
        self.layers()
            .flat_map(|(prefix, l)| {
                l.state()
                    .into_iter()
                    .map(move |(n, v)| (format!("{prefix}.{n}"), v))
            })
            .collect()
    }

    /// Mutable view in the same order as [`Self::named_state`].
    pub fn state_mut(&mut self) -> Vec<&mut [T]> {
        self.layers_mut().flat_map(|l| l.state_mut()).collect()
    }

    pub fn params_and_grads(&mut self) -> Vec<(&mut [T], &[T])> {
        self.layers_mut()
            .flat_map(|l| l.params_and_grads())
            .collect()
    }

    pub fn grads(&self) -> Vec<&[T]> {
        self.layers().flat_map(|(_, l)| l.grads()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.named_params().iter().map(|(_, v)| v.len()).sum()
    }

    pub fn clear_caches(&mut self) {
        self.layers_mut().for_each(Layer::clear_cache);
    }

    /// Deep copy with fresh (empty) activation caches.
    pub fn clone_parameters(&self) -> Self {
        let mut c = self.clone();
        c.clear_caches();
        c
    }

    /// SHA-256 over every state tensor; used to prove evaluation leaves a network untouched.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, v) in self.named_state() {
            h.update(name.as_bytes());
            for x in v {
                h.update(x.as_f64().to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }

    /// Overwrites the tensor called `name` (as listed by [`Self::named_state`]).
    pub fn load_tensor(&mut self, name: &str, values: &[T]) -> Result<(), NnError> {
        let names: Vec<(String, usize)> = self
            .named_state()
            .into_iter()
            .map(|(n, v)| (n, v.len()))
            .collect();
        let idx = names
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| NnError::Shape(format!("unknown tensor {name}")))?;
        if names[idx].1 != values.len() {
            return Err(NnError::Shape(format!(
                "tensor {name} holds {} values, got {}",
                names[idx].1,
                values.len()
            )));
        }
        self.state_mut()[idx].copy_from_slice(values);
        Ok(())
    }

    pub fn same_architecture(&self, other: &Self) -> bool {
        self.spec == other.spec
    }

    /// Parameter-for-parameter equality including running statistics.
    pub fn state_eq(&self, other: &Self) -> bool {
        self.same_architecture(other)
            && self
                .named_state()
                .iter()
                .zip(other.named_state().iter())
                .all(|((_, a), (_, b))| a == b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn actor_parameter_count_matches_layer_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let actor = Network::<f64>::actor(40, 4, &mut rng);
        // 40*256+256 + 2*(256*256+256) + 256*4+4 dense, plus 3 batchnorms of 2*256
        let dense = (40 * 256 + 256) + 2 * (256 * 256 + 256) + (256 * 4 + 4);
        assert_eq!(dense, 143_108);
        assert_eq!(actor.parameter_count(), dense + 3 * 2 * 256);
        assert_eq!(actor.parameter_count(), 144_644);
        assert_eq!(actor.spec().parameter_count(), 144_644);
    }

    #[test]
    fn critic_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let critic = Network::<f64>::critic(40, 4, &mut rng);
        assert_eq!(critic.spec().concat_width(), 256);
        assert_eq!(critic.input_width(), 44);
        let x = Tensor2::filled(7, 44, 0.1);
        let y = critic.infer(&x).unwrap();
        assert_eq!(y.shape(), (7, 1));
        let expected = (40 * 192 + 192)
            + (4 * 64 + 64)
            + 2 * (192 + 64)
            + 2 * (256 * 256 + 256 + 2 * 256)
            + (256 + 1);
        assert_eq!(critic.parameter_count(), expected);
    }

    #[test]
    fn zero_actor_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut actor = Network::<f64>::actor(40, 4, &mut rng);
        for v in actor.state_mut() {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
        // running variance back to 1 so eval-mode normalisation is well defined
        let names: Vec<String> = actor.named_state().into_iter().map(|(n, _)| n).collect();
        for n in names.iter().filter(|n| n.ends_with("running_var")) {
            actor.load_tensor(n, &vec![1.0; 256]).unwrap();
        }
        let y = actor.infer(&Tensor2::filled(3, 40, 0.7)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_forward_is_deterministic_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let actor = Network::<f64>::actor(40, 4, &mut rng);
        let x =
            Tensor2::from_vec(2, 40, (0..80).map(|i| (i as f64).sin() * 50.0).collect()).unwrap();
        let a = actor.infer(&x).unwrap();
        let b = actor.infer(&x).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut actor = Network::<f64>::actor(40, 4, &mut rng);
        let x = Tensor2::zeros(2, 39);
        assert!(matches!(
            actor.forward(&x, Mode::Train),
            Err(NnError::Shape(_))
        ));
    }

    #[test]
    fn clone_is_isolated() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Network::<f64>::actor(40, 4, &mut rng);
        let mut b = a.clone_parameters();
        b.state_mut()[0][0] += 1.0;
        assert!(!a.state_eq(&b));
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn inconsistent_spec_is_rejected() {
        let spec = NetworkSpec::sequential(3, vec![LayerSpec::dense(4, 2)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(Network::<f64>::new(spec, &mut rng).is_err());
    }
}
