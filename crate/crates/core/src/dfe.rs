//! Dynamic feature extractor: half of the channels go through an
//! instance-conditioned mixture-of-experts convolution gated by the input,
//! the other half through a static conv block, and a fusion block merges
//! both back to the original width.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Conv, Linear, Session};
use crate::params::{Init, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct DfeBlock {
    pub prefix: String,
    pub channels: usize,
    pub experts: usize,
    pub kernel: usize,
    /// Kernel size of the static branch conv.
    pub static_kernel: usize,
    /// Whether the static branch applies batch norm and ReLU after its conv.
    pub static_norm_act: bool,
    pub eps: f64,
}

impl DfeBlock {
    pub fn new(prefix: &str, channels: usize, experts: usize, eps: f64) -> Result<Self> {
        if channels < 2 || channels % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "{prefix}: channel split needs an even channel count, got {channels}"
            )));
        }
        if experts < 2 {
            return Err(Error::InvalidArgument(format!("{prefix}: need at least 2 experts, got {experts}")));
        }
        Ok(DfeBlock {
            prefix: prefix.to_string(),
            channels,
            experts,
            kernel: 3,
            static_kernel: 3,
            static_norm_act: true,
            eps,
        })
    }

    pub fn half(&self) -> usize {
        self.channels / 2
    }

    fn attention_layer(&self) -> Linear {
        Linear::new(format!("{}.attn", self.prefix), self.half(), self.experts)
    }

    fn static_conv(&self) -> Conv {
        Conv::new(format!("{}.static.w", self.prefix), self.half(), self.half(), self.static_kernel, 1)
    }

    fn static_bn(&self) -> BatchNorm {
        BatchNorm::new(format!("{}.static.bn", self.prefix), self.half(), self.eps)
    }

    fn fuse_conv(&self) -> Conv {
        Conv::new(format!("{}.fuse.w", self.prefix), self.channels, self.channels, 3, 1)
    }

    fn fuse_bn(&self) -> BatchNorm {
        BatchNorm::new(format!("{}.fuse.bn", self.prefix), self.channels, self.eps)
    }

    pub fn experts_name(&self) -> String {
        format!("{}.experts", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        let h = self.half();
        let k = self.kernel;
        self.attention_layer().init(store, seed);
        store.ensure(
            seed,
            &self.experts_name(),
            &[self.experts, h * h * k * k],
            Init::KaimingNormal { fan_in: h * k * k },
        );
        self.static_conv().init(store, seed);
        if self.static_norm_act {
            self.static_bn().init(store, seed);
        }
        self.fuse_conv().init(store, seed);
        self.fuse_bn().init(store, seed);
    }

    fn check_input(&self, s: &Session, m: Var, channels: usize) -> Result<()> {
        let shape = s.graph.shape(m);
        if shape.len() != 4 || shape[1] != channels {
            return Err(Error::Shape(format!(
                "{}: expected {} channels, got shape {:?}",
                self.prefix, channels, shape
            )));
        }
        Ok(())
    }

    /// First and second half of the channels.
    pub fn channel_split(&self, s: &mut Session, m: Var) -> Result<(Var, Var)> {
        self.check_input(s, m, self.channels)?;
        let h = self.half();
        Ok((
            s.graph.slice_channels(m, 0, h),
            s.graph.slice_channels(m, h, self.channels),
        ))
    }

    /// `softmax(linear(GAP(M_a)) / temperature)`, shape `(B, K)`.
    pub fn attention(&self, s: &mut Session, m_a: Var, temperature: f64) -> Result<Var> {
        self.check_input(s, m_a, self.half())?;
        if !(temperature > 0.0) {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
        }
        let pooled = s.graph.gap(m_a);
        let logits = self.attention_layer().forward(s, pooled);
        let scaled = s.graph.scale(logits, 1.0 / temperature);
        Ok(s.graph.softmax_rows(scaled))
    }

    /// `conv(M_a, Σ_k a_k·W_k) ⊗ M_a` for given attention weights `(B, K)`.
    pub fn dynamic_branch_with(&self, s: &mut Session, m_a: Var, attention: Var) -> Result<Var> {
        self.check_input(s, m_a, self.half())?;
        let b = s.graph.shape(m_a)[0];
        if s.graph.shape(attention) != [b, self.experts] {
            return Err(Error::Shape(format!(
                "{}: attention shape {:?}, expected [{b}, {}]",
                self.prefix,
                s.graph.shape(attention),
                self.experts
            )));
        }
        let h = self.half();
        let experts = s.param(&self.experts_name());
        let mixed = s.graph.matmul(attention, experts);
        let kernels = s.graph.reshape(mixed, &[b, h, h, self.kernel, self.kernel]);
        let conv = s.graph.conv2d_per_sample(m_a, kernels, self.kernel / 2);
        Ok(s.graph.mul(conv, m_a))
    }

    pub fn dynamic_branch(&self, s: &mut Session, m_a: Var, temperature: f64) -> Result<Var> {
        let a = self.attention(s, m_a, temperature)?;
        self.dynamic_branch_with(s, m_a, a)
    }

    /// Same-padding conv, optionally followed by batch norm and ReLU.
    pub fn static_branch(&self, s: &mut Session, m_b: Var) -> Result<Var> {
        self.check_input(s, m_b, self.half())?;
        let z = self.static_conv().forward(s, m_b);
        if !self.static_norm_act {
            return Ok(z);
        }
        let z = self.static_bn().forward(s, z);
        Ok(s.graph.relu(z))
    }

    /// `δ(concat(Z, Z′))` with δ = conv 3×3 → batch norm → ReLU.
    pub fn fuse(&self, s: &mut Session, z: Var, z_static: Var) -> Result<Var> {
        let (sa, sb) = (s.graph.shape(z).to_vec(), s.graph.shape(z_static).to_vec());
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::Shape(format!("{}: cannot fuse {:?} with {:?}", self.prefix, sa, sb)));
        }
        if sa[1] + sb[1] != self.channels {
            return Err(Error::Shape(format!(
                "{}: fused width {} != {}",
                self.prefix,
                sa[1] + sb[1],
                self.channels
            )));
        }
        let cat = s.graph.concat_channels(z, z_static);
        let f = self.fuse_conv().forward(s, cat);
        let f = self.fuse_bn().forward(s, f);
        Ok(s.graph.relu(f))
    }

    pub fn forward(&self, s: &mut Session, m: Var, temperature: f64) -> Result<Var> {
        let (m_a, m_b) = self.channel_split(s, m)?;
        let z = self.dynamic_branch(s, m_a, temperature)?;
        let z_static = self.static_branch(s, m_b)?;
        self.fuse(s, z, z_static)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn block(channels: usize) -> (DfeBlock, ParamStore) {
        let b = DfeBlock::new("dfe", channels, 4, 1e-5).unwrap();
        let mut store = ParamStore::new();
        b.init(&mut store, 11);
        (b, store)
    }

    #[test]
    fn odd_channels_rejected_at_construction() {
        assert!(DfeBlock::new("x", 7, 4, 1e-5).is_err());
        assert!(DfeBlock::new("x", 2, 1, 1e-5).is_err());
    }

    #[test]
    fn split_halves_and_restores() {
        for c in [2usize, 8] {
            let (b, store) = block(c);
            let x = random(&[2, c, 3, 3], 1);
            let mut s = Session::new(&store, false);
            let m = s.constant(x.clone());
            let (ma, mb) = b.channel_split(&mut s, m).unwrap();
            assert_eq!(s.graph.shape(ma)[1], c / 2);
            assert_eq!(s.graph.shape(mb)[1], c / 2);
            let back = s.graph.concat_channels(ma, mb);
            assert_eq!(s.value(back), &x);
        }
    }

    #[test]
    fn attention_on_simplex() {
        let (b, store) = block(8);
        let mut s = Session::new(&store, false);
        let m = s.constant(random(&[3, 4, 5, 5], 2).scale(10.0));
        let a = b.attention(&mut s, m, 1.0).unwrap();
        for row in s.value(a).data().chunks(4) {
            assert!(row.iter().all(|v| *v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_experts_ignore_attention() {
        let (b, mut store) = block(4);
        let single = store.get(&b.experts_name()).row(0);
        let copies = Tensor::stack_rows(&vec![single; 4]).unwrap();
        store.set(&b.experts_name(), copies);
        let x = random(&[2, 2, 4, 4], 3);
        let mut outs = Vec::new();
        for w in [[0.7, 0.1, 0.1, 0.1], [0.0, 0.0, 0.5, 0.5]] {
            let mut s = Session::new(&store, false);
            let m = s.constant(x.clone());
            let a = s.constant(Tensor::from_vec(&[2, 4], [w, w].concat()).unwrap());
            let z = b.dynamic_branch_with(&mut s, m, a).unwrap();
            outs.push(s.value(z).clone());
        }
        for (p, q) in outs[0].data().iter().zip(outs[1].data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_input_gives_zero_dynamic_output() {
        let (b, store) = block(4);
        let mut s = Session::new(&store, false);
        let m = s.constant(Tensor::zeros(&[1, 2, 3, 3]));
        let z = b.dynamic_branch(&mut s, m, 30.0).unwrap();
        assert!(s.value(z).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn one_hot_attention_is_static_conv_times_input() {
        let (b, store) = block(4);
        let x = random(&[1, 2, 4, 5], 4);
        let mut s = Session::new(&store, false);
        let m = s.constant(x.clone());
        let a = s.constant(Tensor::from_vec(&[1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        let z = b.dynamic_branch_with(&mut s, m, a).unwrap();
        // direct convolution oracle with expert 0
        let w = store.get(&b.experts_name()).data()[..2 * 2 * 9].to_vec();
        let (h, wd) = (4usize, 5usize);
        for o in 0..2 {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = 0.0;
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = y as isize + ky as isize - 1;
                                let ix = xx as isize + kx as isize - 1;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w[((o * 2 + c) * 3 + ky) * 3 + kx]
                                    * x.data()[(c * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                    let gate = x.data()[(o * h + y) * wd + xx];
                    let got = s.value(z).data()[(o * h + y) * wd + xx];
                    assert!((got - acc * gate).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn static_branch_identity_and_linearity() {
        let mut b = DfeBlock::new("dfe", 4, 2, 1e-5).unwrap();
        b.static_kernel = 1;
        b.static_norm_act = false;
        let mut store = ParamStore::new();
        b.init(&mut store, 0);
        store.set(
            "dfe.static.w",
            Tensor::from_vec(&[2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        );
        let x = random(&[2, 2, 3, 4], 5);
        let mut s = Session::new(&store, false);
        let m = s.constant(x.clone());
        let z = b.static_branch(&mut s, m).unwrap();
        assert_eq!(s.value(z), &x);

        let (b3, store3) = {
            let mut b3 = DfeBlock::new("dfe", 4, 2, 1e-5).unwrap();
            b3.static_norm_act = false;
            let mut st = ParamStore::new();
            b3.init(&mut st, 0);
            (b3, st)
        };
        let mut s = Session::new(&store3, false);
        let m = s.constant(x.clone());
        let m2 = s.constant(x.scale(2.5));
        let z1 = b3.static_branch(&mut s, m).unwrap();
        let z2 = b3.static_branch(&mut s, m2).unwrap();
        assert_eq!(s.graph.shape(z1), &[2, 2, 3, 4]);
        for (p, q) in s.value(z1).data().iter().zip(s.value(z2).data()) {
            assert!((2.5 * p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_shape_batch_equivariance_and_independence() {
        let (b, store) = block(6);
        let x = random(&[3, 6, 4, 4], 6);
        let run = |input: &Tensor| {
            let mut s = Session::new(&store, false);
            let m = s.constant(input.clone());
            let f = b.forward(&mut s, m, 5.0).unwrap();
            s.value(f).clone()
        };
        let out = run(&x);
        assert_eq!(out.shape(), &[3, 6, 4, 4]);
        let permuted = Tensor::stack_rows(&[x.row(2), x.row(0), x.row(1)]).unwrap();
        let pout = run(&permuted);
        assert_eq!(pout.row(0), out.row(2));
        assert_eq!(pout.row(1), out.row(0));
        let mut perturbed = x.clone();
        perturbed.data_mut()[2 * 96 + 5] += 0.75;
        let q = run(&perturbed);
        assert_eq!(q.row(0), out.row(0));
        assert_eq!(q.row(1), out.row(1));
        assert_ne!(q.row(2), out.row(2));
        assert_eq!(run(&x), out);
    }
}
