//! Building blocks shared by the model modules: a forward session binding a
//! [`Graph`] to a [`ParamStore`], batch norm with running statistics, and
//! parameter-creation helpers.

use std::collections::HashMap;

use crate::autograd::{Graph, NormAxes, Var};
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;

/// Batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BnUpdate {
    pub prefix: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Elements per channel group; used for the unbiased variance.
    pub count: usize,
}

/// One forward pass: the tape, the parameters it reads, and side effects
/// (running-stat updates) to apply after the step.
pub struct Session<'a> {
    pub graph: Graph,
    pub store: &'a ParamStore,
    pub train: bool,
    pub bn_updates: Vec<BnUpdate>,
    bound: HashMap<String, Var>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, train: bool) -> Self {
        Session {
            graph: Graph::new(),
            store,
            train,
            bn_updates: Vec::new(),
            bound: HashMap::new(),
        }
    }

    /// Binds a stored parameter into the graph once per session.
    pub fn param(&mut self, name: &str) -> Var {
        if let Some(v) = self.bound.get(name) {
            return *v;
        }
        let v = self.graph.param(name, self.store.get(name).clone());
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.graph.constant(value)
    }

    /// A leaf that keeps its gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.graph.leaf(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.graph.value(v)
    }
}

/// Folds observed batch statistics into the running buffers.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate], momentum: f64) {
    for u in updates {
        let mean_name = format!("{}.running_mean", u.prefix);
        let var_name = format!("{}.running_var", u.prefix);
        let correction = if u.count > 1 {
            u.count as f64 / (u.count - 1) as f64
        } else {
            1.0
        };
        let mut rm = store.buffer(&mean_name).clone();
        let mut rv = store.buffer(&var_name).clone();
        for (i, (m, v)) in rm.data_mut().iter_mut().zip(rv.data_mut()).enumerate() {
            *m = (1.0 - momentum) * *m + momentum * u.mean[i];
            *v = (1.0 - momentum) * *v + momentum * u.var[i] * correction;
        }
        store.set_buffer(&mean_name, rm);
        store.set_buffer(&var_name, rv);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub prefix: String,
    pub channels: usize,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(prefix: impl Into<String>, channels: usize, eps: f64) -> Self {
        BatchNorm {
            prefix: prefix.into(),
            channels,
            eps,
        }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        let c = self.channels;
        store.ensure(seed, &format!("{}.gamma", self.prefix), &[c], Init::Constant(1.0));
        store.ensure(seed, &format!("{}.beta", self.prefix), &[c], Init::Constant(0.0));
        store.ensure_buffer(&format!("{}.running_mean", self.prefix), &[c], 0.0);
        store.ensure_buffer(&format!("{}.running_var", self.prefix), &[c], 1.0);
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let xhat = if s.train {
            let (b, _, h, w) = s.value(x).dims4();
            let (xhat, stats) = s.graph.normalize(x, NormAxes::Batch, self.eps);
            s.bn_updates.push(BnUpdate {
                prefix: self.prefix.clone(),
                mean: stats.mean,
                var: stats.var,
                count: b * h * w,
            });
            xhat
        } else {
            let mean = s.store.buffer(&format!("{}.running_mean", self.prefix)).data().to_vec();
            let var = s.store.buffer(&format!("{}.running_var", self.prefix)).data().to_vec();
            s.graph.normalize_fixed(x, &mean, &var, self.eps)
        };
        let gamma = s.param(&format!("{}.gamma", self.prefix));
        let beta = s.param(&format!("{}.beta", self.prefix));
        s.graph.channel_affine(xhat, gamma, beta)
    }
}

/// Bias-free square convolution with He-normal weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        Conv {
            name: name.into(),
            in_ch,
            out_ch,
            kernel,
            stride,
        }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        let fan_in = self.in_ch * self.kernel * self.kernel;
        store.ensure(
            seed,
            &self.name,
            &[self.out_ch, self.in_ch, self.kernel, self.kernel],
            Init::KaimingNormal { fan_in },
        );
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let w = s.param(&self.name);
        s.graph.conv2d(x, w, self.stride, self.kernel / 2)
    }
}

/// Dense layer `x · wᵀ + b` with uniform fan-in init and zero bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub prefix: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(prefix: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            prefix: prefix.into(),
            in_dim,
            out_dim,
            bias: true,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        store.ensure(
            seed,
            &format!("{}.w", self.prefix),
            &[self.out_dim, self.in_dim],
            Init::Uniform { fan_in: self.in_dim },
        );
        if self.bias {
            store.ensure(seed, &format!("{}.b", self.prefix), &[self.out_dim], Init::Constant(0.0));
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let w = s.param(&format!("{}.w", self.prefix));
        let b = self.bias.then(|| s.param(&format!("{}.b", self.prefix)));
        s.graph.linear(x, w, b)
    }
}
