//! Activations, initializers and the adaptive-moment optimizer.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::Gradients;
use crate::graph::Graph;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// He-normal tensor with fan-in `fan_in`.
pub fn he_normal(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    normal(rng, shape, (2.0 / fan_in as f64).sqrt())
}

pub fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| dist.sample(rng)).collect()).unwrap()
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Inserts `<prefix>.weight [out, in]` and `<prefix>.bias [out]`.
pub fn init_linear(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, din: usize, dout: usize) {
    store.insert(format!("{prefix}.weight"), he_normal(rng, &[dout, din], din));
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[dout]));
}

/// Inserts `<prefix>.weight [out, in, k, k]` and `<prefix>.bias [out]`.
pub fn init_conv(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    prefix: &str,
    cin: usize,
    cout: usize,
    k: usize,
) {
    store.insert(
        format!("{prefix}.weight"),
        he_normal(rng, &[cout, cin, k, k], cin * k * k),
    );
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[cout]));
}

/// Applies `<prefix>.weight` / `<prefix>.bias` as a dense layer.
pub fn linear(g: &mut Graph, prefix: &str, x: crate::graph::Var) -> crate::graph::Var {
    let w = g.p(&format!("{prefix}.weight"));
    let b = g.p(&format!("{prefix}.bias"));
    g.linear(x, w, Some(b))
}

/// Applies `<prefix>.weight` / `<prefix>.bias` as a convolution.
pub fn conv(g: &mut Graph, prefix: &str, x: crate::graph::Var, dilation: usize) -> crate::graph::Var {
    let w = g.p(&format!("{prefix}.weight"));
    let b = g.p(&format!("{prefix}.bias"));
    g.conv2d(x, w, Some(b), dilation)
}

/// Gradients of every trainable bound parameter, keyed by name.
pub fn collect_grads(g: &Graph, grads: &Gradients) -> BTreeMap<String, Tensor> {
    g.bound_params()
        .filter_map(|(name, var)| grads.get(var).map(|t| (name.to_string(), t)))
        .collect()
}

/// Adam with per-parameter learning rates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// One update. `lr(name)` returning `None` leaves that tensor untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr: impl Fn(&str) -> Option<f64>,
    ) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, grad) in grads {
            let Some(rate) = lr(name) else { continue };
            let Some(param) = store.get_mut(name) else {
                continue;
            };
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            for (((p, g), m), v) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= rate * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            }
        }
    }
}
