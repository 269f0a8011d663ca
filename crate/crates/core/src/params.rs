//! Named parameter storage, seeded initialization and the Adam optimizer.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::Gradients;
use crate::rng;
use crate::tensor::Tensor;

/// How a parameter is filled at creation.
#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    /// He-normal with the given fan-in.
    KaimingNormal { fan_in: usize },
    /// Uniform in `±1/sqrt(fan_in)`.
    Uniform { fan_in: usize },
    Constant(f64),
    /// Explicit values (shape-checked).
    Values(Vec<f64>),
}

/// Trainable parameters plus non-trainable buffers (batch-norm running stats).
/// Ordered maps keep iteration, checkpoints and optimizer updates deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Creates `name` if missing. Each parameter draws from its own stream
    /// keyed by `(seed, name)`, so optional modules never shift the values of
    /// parameters they do not own.
    pub fn ensure(&mut self, seed: u64, name: &str, shape: &[usize], init: Init) {
        if self.params.contains_key(name) {
            return;
        }
        let n: usize = shape.iter().product();
        let data = match init {
            Init::KaimingNormal { fan_in } => {
                let mut r = rng::stream(seed, &format!("init/{name}"));
                let std = (2.0 / fan_in as f64).sqrt();
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut r);
                        z * std
                    })
                    .collect()
            }
            Init::Uniform { fan_in } => {
                let mut r = rng::stream(seed, &format!("init/{name}"));
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| r.random_range(-bound..bound)).collect()
            }
            Init::Constant(v) => vec![v; n],
            Init::Values(v) => {
                assert_eq!(v.len(), n, "init values for {name}: wrong length");
                v
            }
        };
        self.params
            .insert(name.to_string(), Tensor::from_vec(shape, data).unwrap());
    }

    pub fn ensure_buffer(&mut self, name: &str, shape: &[usize], value: f64) {
        self.buffers
            .entry(name.to_string())
            .or_insert_with(|| Tensor::full(shape, value));
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn set(&mut self, name: &str, value: Tensor) {
        self.params.insert(name.to_string(), value);
    }

    pub fn buffer(&self, name: &str) -> &Tensor {
        self.buffers
            .get(name)
            .unwrap_or_else(|| panic!("unknown buffer `{name}`"))
    }

    pub fn set_buffer(&mut self, name: &str, value: Tensor) {
        self.buffers.insert(name.to_string(), value);
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr`; parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (name, g) in grads.params() {
            let Some(p) = store.get_mut(name) else {
                continue;
            };
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            for (((pv, mv), vv), gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                let mhat = *mv / bias1;
                let vhat = *vv / bias2;
                *pv -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}
