use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Mode, NnError, Tensor2};
use crate::scalar::Scalar;

pub const BATCHNORM_MOMENTUM: f64 = 0.9;
pub const BATCHNORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Dense,
    Batchnorm,
    Relu,
    Tanh,
}

/// Shape and kind of one layer. `init_range` overrides the default
/// `1/sqrt(fan_in)` uniform initialisation of a dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub fan_in: usize,
    pub fan_out: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_range: Option<f64>,
}

impl LayerSpec {
    pub fn dense(fan_in: usize, fan_out: usize) -> Self {
        Self {
            kind: LayerKind::Dense,
            fan_in,
            fan_out,
            init_range: None,
        }
    }

    pub fn dense_init(fan_in: usize, fan_out: usize, range: f64) -> Self {
        Self {
            init_range: Some(range),
            ..Self::dense(fan_in, fan_out)
        }
    }

    pub fn batchnorm(width: usize) -> Self {
        Self {
            kind: LayerKind::Batchnorm,
            fan_in: width,
            fan_out: width,
            init_range: None,
        }
    }

    pub fn relu(width: usize) -> Self {
        Self {
            kind: LayerKind::Relu,
            fan_in: width,
            fan_out: width,
            init_range: None,
        }
    }

    pub fn tanh(width: usize) -> Self {
        Self {
            kind: LayerKind::Tanh,
            fan_in: width,
            fan_out: width,
            init_range: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dense<T> {
    pub(crate) fan_in: usize,
    pub(crate) fan_out: usize,
    /// `fan_in x fan_out`, row-major.
    pub(crate) weight: Vec<T>,
    pub(crate) bias: Vec<T>,
    pub(crate) grad_weight: Vec<T>,
    pub(crate) grad_bias: Vec<T>,
    cache: Option<Tensor2<T>>,
}

impl<T: Scalar> Dense<T> {
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, range: f64, rng: &mut R) -> Self {
        let mut draw = |n: usize| -> Vec<T> {
            (0..n)
                .map(|_| T::of(rng.random_range(-range..=range)))
                .collect()
        };
        let weight = draw(fan_in * fan_out);
        let bias = draw(fan_out);
        Self {
            fan_in,
            fan_out,
            weight,
            bias,
            grad_weight: vec![T::zero(); fan_in * fan_out],
            grad_bias: vec![T::zero(); fan_out],
            cache: None,
        }
    }

    fn affine(&self, x: &Tensor2<T>) -> Tensor2<T> {
        let n = x.rows();
        let mut out = Tensor2::zeros(n, self.fan_out);
        for r in 0..n {
            out.row_mut(r).copy_from_slice(&self.bias);
        }
        T::gemm(
            n,
            self.fan_in,
            self.fan_out,
            T::one(),
            x.data(),
            false,
            &self.weight,
            false,
            T::one(),
            out.data_mut(),
        );
        out
    }

    fn backward(&mut self, grad: &Tensor2<T>, param_grads: bool) -> Result<Tensor2<T>, NnError> {
        let x = self.cache.take().ok_or(NnError::NoForwardCache)?;
        let n = x.rows();
        if param_grads {
            // dW = x^T * grad
            T::gemm(
                self.fan_in,
                n,
                self.fan_out,
                T::one(),
                x.data(),
                true,
                grad.data(),
                false,
                T::zero(),
                &mut self.grad_weight,
            );
            self.grad_bias.iter_mut().for_each(|g| *g = T::zero());
            for r in 0..n {
                for (g, &d) in self.grad_bias.iter_mut().zip(grad.row(r)) {
                    *g += d;
                }
            }
        }
        // dx = grad * W^T
        let mut dx = Tensor2::zeros(n, self.fan_in);
        T::gemm(
            n,
            self.fan_out,
            self.fan_in,
            T::one(),
            grad.data(),
            false,
            &self.weight,
            true,
            T::zero(),
            dx.data_mut(),
        );
        Ok(dx)
    }
}

#[derive(Debug, Clone)]
struct BatchNormCache<T> {
    xhat: Tensor2<T>,
    inv_std: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub(crate) width: usize,
    pub(crate) gamma: Vec<T>,
    pub(crate) beta: Vec<T>,
    pub(crate) running_mean: Vec<T>,
    pub(crate) running_var: Vec<T>,
    pub(crate) grad_gamma: Vec<T>,
    pub(crate) grad_beta: Vec<T>,
    cache: Option<BatchNormCache<T>>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            gamma: vec![T::one(); width],
            beta: vec![T::zero(); width],
            running_mean: vec![T::zero(); width],
            running_var: vec![T::one(); width],
            grad_gamma: vec![T::zero(); width],
            grad_beta: vec![T::zero(); width],
            cache: None,
        }
    }

    fn forward_train(&mut self, x: &Tensor2<T>) -> Result<Tensor2<T>, NnError> {
        let n = x.rows();
        if n < 2 {
            return Err(NnError::Usage(
                "batchnorm in train mode needs a batch of at least 2".into(),
            ));
        }
        let nf = T::of(n as f64);
        let eps = T::of(BATCHNORM_EPS);
        let momentum = T::of(BATCHNORM_MOMENTUM);
        let mut mean = vec![T::zero(); self.width];
        for r in 0..n {
            for (m, &v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= nf);
        let mut var = vec![T::zero(); self.width];
        for r in 0..n {
            for ((s, &v), &m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        var.iter_mut().for_each(|s| *s /= nf);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

        let mut xhat = Tensor2::zeros(n, self.width);
        let mut out = Tensor2::zeros(n, self.width);
        for r in 0..n {
            let xr = x.row(r);
            let hr = xhat.row_mut(r);
            let or = out.row_mut(r);
            for j in 0..self.width {
                let h = (xr[j] - mean[j]) * inv_std[j];
                hr[j] = h;
                or[j] = self.gamma[j] * h + self.beta[j];
            }
        }

        // Running variance tracks the unbiased estimate.
        let unbias = nf / T::of((n - 1) as f64);
        for j in 0..self.width {
            self.running_mean[j] =
                momentum * self.running_mean[j] + (T::one() - momentum) * mean[j];
            self.running_var[j] =
                momentum * self.running_var[j] + (T::one() - momentum) * var[j] * unbias;
        }
        self.cache = Some(BatchNormCache { xhat, inv_std });
        Ok(out)
    }

    fn infer(&self, x: &Tensor2<T>) -> Tensor2<T> {
        let eps = T::of(BATCHNORM_EPS);
        let scale: Vec<T> = self
            .running_var
            .iter()
            .zip(&self.gamma)
            .map(|(&v, &g)| g / (v + eps).sqrt())
            .collect();
        let mut out = x.clone();
        for r in 0..x.rows() {
            let row = out.row_mut(r);
            for j in 0..self.width {
                row[j] = (row[j] - self.running_mean[j]) * scale[j] + self.beta[j];
            }
        }
        out
    }

    fn backward(&mut self, grad: &Tensor2<T>, param_grads: bool) -> Result<Tensor2<T>, NnError> {
        let BatchNormCache { xhat, inv_std } = self.cache.take().ok_or(NnError::NoForwardCache)?;
        let n = grad.rows();
        let nf = T::of(n as f64);
        let mut sum_dy = vec![T::zero(); self.width];
        let mut sum_dy_xhat = vec![T::zero(); self.width];
        for r in 0..n {
            let g = grad.row(r);
            let h = xhat.row(r);
            for j in 0..self.width {
                sum_dy[j] += g[j];
                sum_dy_xhat[j] += g[j] * h[j];
            }
        }
        if param_grads {
            self.grad_beta.copy_from_slice(&sum_dy);
            self.grad_gamma.copy_from_slice(&sum_dy_xhat);
        }
        let k: Vec<T> = (0..self.width)
            .map(|j| self.gamma[j] * inv_std[j] / nf)
            .collect();
        let mut dx = Tensor2::zeros(n, self.width);
        for r in 0..n {
            let g = grad.row(r);
            let h = xhat.row(r);
            let d = &mut dx.data_mut()[r * self.width..(r + 1) * self.width];
            for j in 0..self.width {
                d[j] = k[j] * (nf * g[j] - sum_dy[j] - h[j] * sum_dy_xhat[j]);
            }
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone)]
pub enum Layer<T> {
    Dense(Dense<T>),
    BatchNorm(BatchNorm<T>),
    Relu {
        width: usize,
        cache: Option<Tensor2<T>>,
    },
    Tanh {
        width: usize,
        cache: Option<Tensor2<T>>,
    },
}

impl<T: Scalar> Layer<T> {
    pub fn build<R: Rng + ?Sized>(spec: &LayerSpec, rng: &mut R) -> Self {
        match spec.kind {
            LayerKind::Dense => {
                let range = spec.init_range.unwrap_or(1.0 / (spec.fan_in as f64).sqrt());
                Layer::Dense(Dense::new(spec.fan_in, spec.fan_out, range, rng))
            }
            LayerKind::Batchnorm => Layer::BatchNorm(BatchNorm::new(spec.fan_in)),
            LayerKind::Relu => Layer::Relu {
                width: spec.fan_in,
                cache: None,
            },
            LayerKind::Tanh => Layer::Tanh {
                width: spec.fan_in,
                cache: None,
            },
        }
    }

    pub fn fan_in(&self) -> usize {
        match self {
            Layer::Dense(d) => d.fan_in,
            Layer::BatchNorm(b) => b.width,
            Layer::Relu { width, .. } | Layer::Tanh { width, .. } => *width,
        }
    }

    pub fn fan_out(&self) -> usize {
        match self {
            Layer::Dense(d) => d.fan_out,
            _ => self.fan_in(),
        }
    }

    pub fn forward(&mut self, x: Tensor2<T>, mode: Mode) -> Result<Tensor2<T>, NnError> {
        if mode == Mode::Eval {
            return Ok(self.infer(&x));
        }
        match self {
            Layer::Dense(d) => {
                let out = d.affine(&x);
                d.cache = Some(x);
                Ok(out)
            }
            Layer::BatchNorm(b) => b.forward_train(&x),
            Layer::Relu { cache, .. } => {
                let out = x.map(|v| if v > T::zero() { v } else { T::zero() });
                *cache = Some(out.clone());
                Ok(out)
            }
            Layer::Tanh { cache, .. } => {
                let out = x.map(T::tanh);
                *cache = Some(out.clone());
                Ok(out)
            }
        }
    }

    pub fn infer(&self, x: &Tensor2<T>) -> Tensor2<T> {
        match self {
            Layer::Dense(d) => d.affine(x),
            Layer::BatchNorm(b) => b.infer(x),
            Layer::Relu { .. } => x.map(|v| if v > T::zero() { v } else { T::zero() }),
            Layer::Tanh { .. } => x.map(T::tanh),
        }
    }

    pub fn backward(&mut self, grad: Tensor2<T>, param_grads: bool) -> Result<Tensor2<T>, NnError> {
        match self {
            Layer::Dense(d) => d.backward(&grad, param_grads),
            Layer::BatchNorm(b) => b.backward(&grad, param_grads),
            Layer::Relu { cache, .. } => {
                let out = cache.take().ok_or(NnError::NoForwardCache)?;
                let mut g = grad;
                for (gv, &o) in g.data_mut().iter_mut().zip(out.data()) {
                    if o <= T::zero() {
                        *gv = T::zero();
                    }
                }
                Ok(g)
            }
            Layer::Tanh { cache, .. } => {
                let out = cache.take().ok_or(NnError::NoForwardCache)?;
                let mut g = grad;
                for (gv, &o) in g.data_mut().iter_mut().zip(out.data()) {
                    *gv *= T::one() - o * o;
                }
                Ok(g)
            }
        }
    }

    /// Learnable tensors in a fixed order.
    pub fn params(&self) -> Vec<(&'static str, &[T])> {
        match self {
            Layer::Dense(d) => vec![("weight", &d.weight), ("bias", &d.bias)],
            Layer::BatchNorm(b) => vec![("gamma", &b.gamma), ("beta", &b.beta)],
            _ => Vec::new(),
        }
    }

    /// Learnable tensors paired with their most recent gradients, same order as [`Self::params`].
    pub fn params_and_grads(&mut self) -> Vec<(&mut [T], &[T])> {
        match self {
            Layer::Dense(d) => vec![
                (&mut d.weight[..], &d.grad_weight[..]),
                (&mut d.bias[..], &d.grad_bias[..]),
            ],
            Layer::BatchNorm(b) => vec![
                (&mut b.gamma[..], &b.grad_gamma[..]),
                (&mut b.beta[..], &b.grad_beta[..]),
            ],
            _ => Vec::new(),
        }
    }

    pub fn grads(&self) -> Vec<&[T]> {
        match self {
            Layer::Dense(d) => vec![&d.grad_weight, &d.grad_bias],
            Layer::BatchNorm(b) => vec![&b.grad_gamma, &b.grad_beta],
            _ => Vec::new(),
        }
    }

    /// Learnable tensors followed by non-learnable running statistics.
    pub fn state(&self) -> Vec<(&'static str, &[T])> {
        match self {
            Layer::BatchNorm(b) => vec![
                ("gamma", &b.gamma),
                ("beta", &b.beta),
                ("running_mean", &b.running_mean),
                ("running_var", &b.running_var),
            ],
            _ => self.params(),
        }
    }

    pub fn state_mut(&mut self) -> Vec<&mut [T]> {
        match self {
            Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
            Layer::BatchNorm(b) => vec![
                &mut b.gamma,
                &mut b.beta,
                &mut b.running_mean,
                &mut b.running_var,
            ],
            _ => Vec::new(),
        }
    }

    pub fn clear_cache(&mut self) {
        match self {
            Layer::Dense(d) => d.cache = None,
            Layer::BatchNorm(b) => b.cache = None,
            Layer::Relu { cache, .. } | Layer::Tanh { cache, .. } => *cache = None,
        }
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Dense(_) => LayerKind::Dense,
            Layer::BatchNorm(_) => LayerKind::Batchnorm,
            Layer::Relu { .. } => LayerKind::Relu,
            Layer::Tanh { .. } => LayerKind::Tanh,
        }
    }
}
