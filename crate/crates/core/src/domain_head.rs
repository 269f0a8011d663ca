//! Domain discriminator behind a gradient reversal layer.
//!
//! The discriminator descends the domain cross-entropy while everything
//! upstream of the reversal ascends it, so a single backward pass plays the
//! min-max game between content generator and discriminator.

use crate::autograd::{sigmoid, Var};
use crate::error::{Error, Result};
use crate::layers::{Linear, Session};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Identity forward, `-strength` times the upstream gradient backward.
pub fn grl(s: &mut Session, x: Var, strength: f64) -> Result<Var> {
    if !(strength >= 0.0) {
        return Err(Error::InvalidArgument(format!("GRL strength must be ≥ 0, got {strength}")));
    }
    Ok(s.graph.grad_reverse(x, strength))
}

/// Reversal strength at `step` of `total_steps`: constant, or a linear ramp
/// from 0 to `max` over the first `warmup_fraction` of training.
pub fn grl_schedule(max: f64, warmup_fraction: Option<f64>, step: usize, total_steps: usize) -> f64 {
    match warmup_fraction {
        Some(frac) if frac > 0.0 && total_steps > 0 => {
            let ramp = frac * total_steps as f64;
            max * (step as f64 / ramp).min(1.0)
        }
        _ => max,
    }
}

/// Two-layer classifier `Linear → ReLU → Linear` over `N` domains.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainHead {
    pub in_dim: usize,
    pub hidden: usize,
    pub domains: usize,
    fc1: Linear,
    fc2: Linear,
}

impl DomainHead {
    pub fn new(prefix: &str, in_dim: usize, hidden: usize, domains: usize) -> Result<Self> {
        if domains < 2 {
            return Err(Error::InvalidArgument(format!("domain head needs ≥ 2 domains, got {domains}")));
        }
        Ok(DomainHead {
            in_dim,
            hidden,
            domains,
            fc1: Linear::new(format!("{prefix}.fc1"), in_dim, hidden),
            fc2: Linear::new(format!("{prefix}.fc2"), hidden, domains),
        })
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        self.fc1.init(store, seed);
        self.fc2.init(store, seed);
    }

    /// Logits `(B, N)`.
    pub fn discriminate(&self, s: &mut Session, features: Var) -> Result<Var> {
        let shape = s.graph.shape(features);
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(Error::Shape(format!(
                "domain head expects (B, {}), got {:?}",
                self.in_dim, shape
            )));
        }
        let h = self.fc1.forward(s, features);
        let h = s.graph.relu(h);
        Ok(self.fc2.forward(s, h))
    }
}

fn zero_based(labels: &[u32], domains: usize) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|&l| {
            if l == 0 || l as usize > domains {
                Err(Error::LabelOutOfRange {
                    label: l as usize,
                    classes: domains,
                })
            } else {
                Ok(l as usize - 1)
            }
        })
        .collect()
}

/// Mean categorical cross-entropy of domain logits against 1-based domain ids.
pub fn adv_loss(s: &mut Session, logits: Var, domains: &[u32]) -> Result<Var> {
    let (b, n) = s.value(logits).dims2();
    if b != domains.len() {
        return Err(Error::Shape(format!("{} logit rows for {} labels", b, domains.len())));
    }
    let idx = zero_based(domains, n)?;
    Ok(s.graph.cross_entropy(logits, &idx))
}

/// [`adv_loss`] on plain tensors.
pub fn adv_loss_value(logits: &Tensor, domains: &[u32]) -> Result<f64> {
    let store = ParamStore::new();
    let mut s = Session::new(&store, false);
    let l = s.constant(logits.clone());
    let loss = adv_loss(&mut s, l, domains)?;
    Ok(s.value(loss).item())
}

/// Softmax probabilities of `(B, N)` logits.
pub fn domain_probabilities(logits: &Tensor) -> Tensor {
    let (_, n) = logits.dims2();
    let mut p = logits.clone();
    for row in p.data_mut().chunks_mut(n) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
        row.iter_mut().for_each(|v| *v = (*v - max).exp() / total);
    }
    p
}

/// Convenience for binary heads: element-wise sigmoid.
pub fn probabilities(logits: &Tensor) -> Vec<f64> {
    logits.data().iter().map(|&z| sigmoid(z)).collect()
}
