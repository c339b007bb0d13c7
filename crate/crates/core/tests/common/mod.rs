//! Shared oracles for the integration tests.
#![allow(dead_code)]

use chaser_core::nn::{Mode, Network, Tensor2};

pub mod criteria;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor2<f64> {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    Tensor2::from_vec(rows, cols, data).unwrap()
}

/// Jitters every parameter so identity-initialised layers (batchnorm scale and shift) are
/// exercised away from their special values.
pub fn jitter_params(net: &mut Network<f64>, rng: &mut impl Rng, scale: f64) {
    for (p, _) in net.params_and_grads() {
        for v in p.iter_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
}

/// Largest relative errors found by [`gradcheck`].
#[derive(Debug, Clone, Copy, Default)]
pub struct GradReport {
    pub params: f64,
    pub inputs: f64,
    pub checked: usize,
}

impl GradReport {
    pub fn worst(&self) -> f64 {
        self.params.max(self.inputs)
    }
}

const STEP: f64 = 1e-6;
/// Gradients smaller than this are compared absolutely.
const FLOOR: f64 = 1e-4;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

// sum(w * (f(+h) - f(-h))) / 2h, differencing elementwise to keep the cancellation small
fn central(plus: &Tensor2<f64>, minus: &Tensor2<f64>, w: &Tensor2<f64>) -> f64 {
    let s: f64 = plus
        .data()
        .iter()
        .zip(minus.data())
        .zip(w.data())
        .map(|((p, m), w)| w * (p - m))
        .sum();
    s / (2.0 * STEP)
}

/// Compares backpropagated gradients of `sum(w * net(x))` in train mode against central
/// differences. Checks every input entry and up to `per_tensor` entries of each parameter
/// tensor (all of them if the tensor is smaller).
pub fn gradcheck(
    net: &mut Network<f64>,
    x: &Tensor2<f64>,
    rng: &mut impl Rng,
    per_tensor: usize,
) -> GradReport {
    let y = net.forward(x, Mode::Train).unwrap();
    let w = random_tensor(rng, y.rows(), y.cols(), 1.0);
    let gx = net.backward(&w).unwrap();
    let grads: Vec<Vec<f64>> = net.grads().into_iter().map(|g| g.to_vec()).collect();
    let mut report = GradReport::default();

    for i in 0..x.data().len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += STEP;
        let mut xm = x.clone();
        xm.data_mut()[i] -= STEP;
        let num = central(
            &net.forward(&xp, Mode::Train).unwrap(),
            &net.forward(&xm, Mode::Train).unwrap(),
            &w,
        );
        report.inputs = report.inputs.max(rel(gx.data()[i], num));
        report.checked += 1;
    }

    for (t, g) in grads.iter().enumerate() {
        let picks: Vec<usize> = if g.len() <= per_tensor {
            (0..g.len()).collect()
        } else {
            (0..per_tensor)
                .map(|_| rng.random_range(0..g.len()))
                .collect()
        };
        for i in picks {
            let orig = net.params_and_grads()[t].0[i];
            net.params_and_grads()[t].0[i] = orig + STEP;
            let plus = net.forward(x, Mode::Train).unwrap();
            net.params_and_grads()[t].0[i] = orig - STEP;
            let minus = net.forward(x, Mode::Train).unwrap();
            net.params_and_grads()[t].0[i] = orig;
            let num = central(&plus, &minus, &w);
            report.params = report.params.max(rel(g[i], num));
            report.checked += 1;
        }
    }
    report
}

/// Outcome of one acceptance-style check.
#[derive(Debug, Clone)]
pub struct Check {
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}
