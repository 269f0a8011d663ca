//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are
//! appended in evaluation order, so a single reverse sweep visits each node
//! after all of its consumers. Only leaf gradients survive the sweep.

use crate::tensor::{col2im, gemm, im2col, ConvGeometry, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// `(upstream grad, node output, parent values, which parents need grads)`.
type BackwardFn = Box<dyn Fn(&Tensor, &Tensor, &[&Tensor], &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Which elements share one normalization group.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormAxes {
    /// One group per channel, spanning batch and space (batch norm).
    Batch,
    /// One group per (sample, channel), spanning space (instance norm).
    Instance,
}

/// Group statistics produced by [`Graph::normalize`]; variances are biased.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, v)| self.get(*v))
    }

    /// Named parameter gradients in registration order; parameters the loss
    /// does not reach are skipped.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(n, v)| self.get(*v).map(|g| (n.as_str(), g)))
    }
}

/// Group index of each flat position of a `(B, C, H, W)` tensor.
fn group_of(axes: NormAxes, dims: (usize, usize, usize, usize)) -> impl Fn(usize) -> usize {
    let (_, c, h, w) = dims;
    let plane = h * w;
    move |k: usize| match axes {
        NormAxes::Batch => (k / plane) % c,
        NormAxes::Instance => k / plane,
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn leaf_node(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf_node(value, false)
    }

    /// A leaf whose gradient is retained (inputs under test, for instance).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.leaf_node(value, true)
    }

    pub fn param(&mut self, name: &str, value: Tensor) -> Var {
        let v = self.leaf_node(value, true);
        self.params.push((name.to_string(), v));
        v
    }

    pub fn param_vars(&self) -> &[(String, Var)] {
        &self.params
    }

    fn push(&mut self, value: Tensor, parents: &[Var], backward: BackwardFn) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: if requires_grad { Some(backward) } else { None },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), 1.0));
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let parents: Vec<&Tensor> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| self.nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&g, &node.value, &parents, &needs);
            for ((&p, need), pg) in node.parents.iter().zip(&needs).zip(parent_grads) {
                if !need {
                    continue;
                }
                if let Some(pg) = pg {
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot => *slot = Some(pg),
                    }
                }
            }
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }

    // ---- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(
            value,
            &[a, b],
            Box::new(|g, _, _, _| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(
            value,
            &[a, b],
            Box::new(|g, _, p, needs| {
                vec![
                    needs[0].then(|| g.zip_map(p[1], |gv, bv| gv * bv)),
                    needs[1].then(|| g.zip_map(p[0], |gv, av| gv * av)),
                ]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).scale(factor);
        self.push(value, &[a], Box::new(move |g, _, _, _| vec![Some(g.scale(factor))]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(
            value,
            &[a],
            Box::new(|g, _, p, _| vec![Some(g.zip_map(p[0], |gv, x| if x > 0.0 { gv } else { 0.0 }))]),
        )
    }

    /// Identity forward; multiplies the upstream gradient by `-strength`.
    pub fn grad_reverse(&mut self, a: Var, strength: f64) -> Var {
        let value = self.value(a).clone();
        self.push(
            value,
            &[a],
            Box::new(move |g, _, _, _| vec![Some(g.scale(-strength))]),
        )
    }

    /// Copies `a` into a fresh constant, cutting the tape.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.constant(value)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let src_shape = self.shape(a).to_vec();
        let value = self.value(a).reshape(shape).expect("reshape: element count mismatch");
        self.push(
            value,
            &[a],
            Box::new(move |g, _, _, _| vec![Some(g.reshape(&src_shape).expect("reshape grad"))]),
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let shape = self.shape(a).to_vec();
        self.push(
            value,
            &[a],
            Box::new(move |g, _, _, _| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    // ---- convolution ------------------------------------------------------

    /// 2-D convolution without bias. `x: (B, C, H, W)`, `w: (O, C, k, k)`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let (b, c, h, wd) = self.value(x).dims4();
        let wshape = self.shape(w).to_vec();
        assert_eq!(wshape.len(), 4, "conv2d kernel must be rank 4");
        assert_eq!(wshape[1], c, "conv2d: kernel expects {} channels, input has {}", wshape[1], c);
        assert_eq!(wshape[2], wshape[3], "conv2d: square kernels only");
        let o = wshape[0];
        let geo = ConvGeometry {
            channels: c,
            height: h,
            width: wd,
            kernel: wshape[2],
            stride,
            pad,
        };
        let (plen, npix) = (geo.patch_len(), geo.out_pixels());
        let mut cols = vec![0.0; b * plen * npix];
        let mut out = vec![0.0; b * o * npix];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for bi in 0..b {
                let col = &mut cols[bi * plen * npix..(bi + 1) * plen * npix];
                im2col(&xv[bi * c * h * wd..(bi + 1) * c * h * wd], &geo, col);
                gemm(
                    o,
                    plen,
                    npix,
                    wv,
                    plen,
                    1,
                    col,
                    npix,
                    1,
                    0.0,
                    &mut out[bi * o * npix..(bi + 1) * o * npix],
                    npix,
                    1,
                );
            }
        }
        let value = Tensor::from_vec(&[b, o, geo.out_height(), geo.out_width()], out).unwrap();
        self.push(
            value,
            &[x, w],
            Box::new(move |g, _, p, needs| {
                let gd = g.data();
                let wv = p[1].data();
                let gx = needs[0].then(|| {
                    let mut gx = vec![0.0; b * c * h * wd];
                    let mut dcols = vec![0.0; plen * npix];
                    for bi in 0..b {
                        gemm(
                            plen,
                            o,
                            npix,
                            wv,
                            1,
                            plen,
                            &gd[bi * o * npix..(bi + 1) * o * npix],
                            npix,
                            1,
                            0.0,
                            &mut dcols,
                            npix,
                            1,
                        );
                        col2im(&dcols, &geo, &mut gx[bi * c * h * wd..(bi + 1) * c * h * wd]);
                    }
                    Tensor::from_vec(&[b, c, h, wd], gx).unwrap()
                });
                let gw = needs[1].then(|| {
                    let mut gw = vec![0.0; o * plen];
                    for bi in 0..b {
                        gemm(
                            o,
                            npix,
                            plen,
                            &gd[bi * o * npix..(bi + 1) * o * npix],
                            npix,
                            1,
                            &cols[bi * plen * npix..(bi + 1) * plen * npix],
                            1,
                            npix,
                            1.0,
                            &mut gw,
                            plen,
                            1,
                        );
                    }
                    Tensor::from_vec(&wshape, gw).unwrap()
                });
                vec![gx, gw]
            }),
        )
    }

    /// Stride-1 convolution where every batch row has its own kernel.
    /// `x: (B, C, H, W)`, `w: (B, O, C, k, k)`.
    pub fn conv2d_per_sample(&mut self, x: Var, w: Var, pad: usize) -> Var {
        let (b, c, h, wd) = self.value(x).dims4();
        let wshape = self.shape(w).to_vec();
        assert_eq!(wshape.len(), 5, "per-sample kernels must be rank 5");
        assert_eq!(wshape[0], b, "per-sample kernels: batch mismatch");
        assert_eq!(wshape[2], c, "per-sample kernels: channel mismatch");
        let o = wshape[1];
        let geo = ConvGeometry {
            channels: c,
            height: h,
            width: wd,
            kernel: wshape[3],
            stride: 1,
            pad,
        };
        let (plen, npix) = (geo.patch_len(), geo.out_pixels());
        let klen = o * plen;
        let mut cols = vec![0.0; b * plen * npix];
        let mut out = vec![0.0; b * o * npix];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for bi in 0..b {
                let col = &mut cols[bi * plen * npix..(bi + 1) * plen * npix];
                im2col(&xv[bi * c * h * wd..(bi + 1) * c * h * wd], &geo, col);
                gemm(
                    o,
                    plen,
                    npix,
                    &wv[bi * klen..(bi + 1) * klen],
                    plen,
                    1,
                    col,
                    npix,
                    1,
                    0.0,
                    &mut out[bi * o * npix..(bi + 1) * o * npix],
                    npix,
                    1,
                );
            }
        }
        let value = Tensor::from_vec(&[b, o, geo.out_height(), geo.out_width()], out).unwrap();
        self.push(
            value,
            &[x, w],
            Box::new(move |g, _, p, needs| {
                let gd = g.data();
                let wv = p[1].data();
                let gx = needs[0].then(|| {
                    let mut gx = vec![0.0; b * c * h * wd];
                    let mut dcols = vec![0.0; plen * npix];
                    for bi in 0..b {
                        gemm(
                            plen,
                            o,
                            npix,
                            &wv[bi * klen..(bi + 1) * klen],
                            1,
                            plen,
                            &gd[bi * o * npix..(bi + 1) * o * npix],
                            npix,
                            1,
                            0.0,
                            &mut dcols,
                            npix,
                            1,
                        );
                        col2im(&dcols, &geo, &mut gx[bi * c * h * wd..(bi + 1) * c * h * wd]);
                    }
                    Tensor::from_vec(&[b, c, h, wd], gx).unwrap()
                });
                let gw = needs[1].then(|| {
                    let mut gw = vec![0.0; b * klen];
                    for bi in 0..b {
                        gemm(
                            o,
                            npix,
                            plen,
                            &gd[bi * o * npix..(bi + 1) * o * npix],
                            npix,
                            1,
                            &cols[bi * plen * npix..(bi + 1) * plen * npix],
                            1,
                            npix,
                            0.0,
                            &mut gw[bi * klen..(bi + 1) * klen],
                            plen,
                            1,
                        );
                    }
                    Tensor::from_vec(&wshape, gw).unwrap()
                });
                vec![gx, gw]
            }),
        )
    }

    // ---- normalization ----------------------------------------------------

    /// Standardizes each group of a `(B, C, H, W)` tensor to zero mean and
    /// unit variance, with `sqrt(var + eps)` as the divisor.
    pub fn normalize(&mut self, x: Var, axes: NormAxes, eps: f64) -> (Var, GroupStats) {
        let dims = self.value(x).dims4();
        let (b, c, h, w) = dims;
        let (groups, group_len) = match axes {
            NormAxes::Batch => (c, b * h * w),
            NormAxes::Instance => (b * c, h * w),
        };
        let group = group_of(axes, dims);
        let xv = self.value(x).data();
        let mut mean = vec![0.0; groups];
        for (k, v) in xv.iter().enumerate() {
            mean[group(k)] += v;
        }
        mean.iter_mut().for_each(|m| *m /= group_len as f64);
        let mut var = vec![0.0; groups];
        for (k, v) in xv.iter().enumerate() {
            let gi = group(k);
            let d = v - mean[gi];
            var[gi] += d * d;
        }
        var.iter_mut().for_each(|v| *v /= group_len as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out: Vec<f64> = xv
            .iter()
            .enumerate()
            .map(|(k, v)| {
                let gi = group(k);
                (v - mean[gi]) * inv_std[gi]
            })
            .collect();
        let value = Tensor::from_vec(&[b, c, h, w], out).unwrap();
        let var_out = self.push(
            value,
            &[x],
            Box::new(move |g, xhat, _, _| {
                let group = group_of(axes, dims);
                let gd = g.data();
                let xd = xhat.data();
                let mut g_mean = vec![0.0; groups];
                let mut gx_mean = vec![0.0; groups];
                for k in 0..gd.len() {
                    let gi = group(k);
                    g_mean[gi] += gd[k];
                    gx_mean[gi] += gd[k] * xd[k];
                }
                let n = group_len as f64;
                let dx: Vec<f64> = (0..gd.len())
                    .map(|k| {
                        let gi = group(k);
                        inv_std[gi] * (gd[k] - g_mean[gi] / n - xd[k] * gx_mean[gi] / n)
                    })
                    .collect();
                vec![Some(Tensor::from_vec(xhat.shape(), dx).unwrap())]
            }),
        );
        (var_out, GroupStats { mean, var })
    }

    /// Per-channel standardization with externally supplied statistics
    /// (inference-mode batch norm).
    pub fn normalize_fixed(&mut self, x: Var, mean: &[f64], var: &[f64], eps: f64) -> Var {
        let (_, c, h, w) = self.value(x).dims4();
        assert_eq!(mean.len(), c);
        assert_eq!(var.len(), c);
        let plane = h * w;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mean = mean.to_vec();
        let value = {
            let xv = self.value(x);
            let mut out = xv.clone();
            for (k, v) in out.data_mut().iter_mut().enumerate() {
                let ci = (k / plane) % c;
                *v = (*v - mean[ci]) * inv_std[ci];
            }
            out
        };
        self.push(
            value,
            &[x],
            Box::new(move |g, _, _, _| {
                let mut dx = g.clone();
                for (k, v) in dx.data_mut().iter_mut().enumerate() {
                    *v *= inv_std[(k / plane) % c];
                }
                vec![Some(dx)]
            }),
        )
    }

    /// `y = gamma[c] · x + beta[c]` over a `(B, C, H, W)` tensor.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        assert_eq!(self.value(gamma).len(), c, "channel_affine: gamma length");
        assert_eq!(self.value(beta).len(), c, "channel_affine: beta length");
        let plane = h * w;
        let value = {
            let gv = self.value(gamma).data();
            let bv = self.value(beta).data();
            let mut out = self.value(x).clone();
            for (k, v) in out.data_mut().iter_mut().enumerate() {
                let ci = (k / plane) % c;
                *v = gv[ci] * *v + bv[ci];
            }
            out
        };
        self.push(
            value,
            &[x, gamma, beta],
            Box::new(move |g, _, p, needs| {
                let gd = g.data();
                let xd = p[0].data();
                let gv = p[1].data();
                let dx = needs[0].then(|| {
                    let mut dx = g.clone();
                    for (k, v) in dx.data_mut().iter_mut().enumerate() {
                        *v *= gv[(k / plane) % c];
                    }
                    dx
                });
                let (mut dg, mut db) = (vec![0.0; c], vec![0.0; c]);
                for k in 0..b * c * plane {
                    let ci = (k / plane) % c;
                    dg[ci] += gd[k] * xd[k];
                    db[ci] += gd[k];
                }
                vec![
                    dx,
                    Some(Tensor::from_vec(p[1].shape(), dg).unwrap()),
                    Some(Tensor::from_vec(p[2].shape(), db).unwrap()),
                ]
            }),
        )
    }

    /// `y[b, c] = gamma[b, c] · x[b, c] + beta[b, c]` (per-sample affine, as in AdaIN).
    pub fn sample_channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        assert_eq!(self.shape(gamma), &[b, c], "sample_channel_affine: gamma shape");
        assert_eq!(self.shape(beta), &[b, c], "sample_channel_affine: beta shape");
        let plane = h * w;
        let value = {
            let gv = self.value(gamma).data();
            let bv = self.value(beta).data();
            let mut out = self.value(x).clone();
            for (k, v) in out.data_mut().iter_mut().enumerate() {
                let bc = k / plane;
                *v = gv[bc] * *v + bv[bc];
            }
            out
        };
        self.push(
            value,
            &[x, gamma, beta],
            Box::new(move |g, _, p, needs| {
                let gd = g.data();
                let xd = p[0].data();
                let gv = p[1].data();
                let dx = needs[0].then(|| {
                    let mut dx = g.clone();
                    for (k, v) in dx.data_mut().iter_mut().enumerate() {
                        *v *= gv[k / plane];
                    }
                    dx
                });
                let (mut dg, mut db) = (vec![0.0; b * c], vec![0.0; b * c]);
                for k in 0..gd.len() {
                    dg[k / plane] += gd[k] * xd[k];
                    db[k / plane] += gd[k];
                }
                vec![
                    dx,
                    Some(Tensor::from_vec(&[b, c], dg).unwrap()),
                    Some(Tensor::from_vec(&[b, c], db).unwrap()),
                ]
            }),
        )
    }

    // ---- reductions and dense layers --------------------------------------

    /// Global average pooling `(B, C, H, W) -> (B, C)`.
    pub fn gap(&mut self, x: Var) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        let plane = h * w;
        let value = {
            let xv = self.value(x).data();
            let out: Vec<f64> = xv
                .chunks(plane)
                .map(|p| p.iter().sum::<f64>() / plane as f64)
                .collect();
            Tensor::from_vec(&[b, c], out).unwrap()
        };
        self.push(
            value,
            &[x],
            Box::new(move |g, _, _, _| {
                let mut dx = Vec::with_capacity(b * c * plane);
                for &gv in g.data() {
                    dx.extend(std::iter::repeat_n(gv / plane as f64, plane));
                }
                vec![Some(Tensor::from_vec(&[b, c, h, w], dx).unwrap())]
            }),
        )
    }

    /// `y = x · wᵀ + bias` with `x: (B, in)`, `w: (out, in)`, `bias: (out)`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Var {
        let (b, inp) = self.value(x).dims2();
        let (out_dim, w_in) = self.value(w).dims2();
        assert_eq!(inp, w_in, "linear: input width {} vs weight width {}", inp, w_in);
        let mut out = vec![0.0; b * out_dim];
        if let Some(bias) = bias {
            assert_eq!(self.value(bias).len(), out_dim, "linear: bias length");
            let bv = self.value(bias).data();
            for row in out.chunks_mut(out_dim) {
                row.copy_from_slice(bv);
            }
        }
        gemm(
            b,
            inp,
            out_dim,
            self.value(x).data(),
            inp,
            1,
            self.value(w).data(),
            1,
            inp,
            1.0,
            &mut out,
            out_dim,
            1,
        );
        let value = Tensor::from_vec(&[b, out_dim], out).unwrap();
        let mut parents = vec![x, w];
        parents.extend(bias);
        self.push(
            value,
            &parents,
            Box::new(move |g, _, p, needs| {
                let gd = g.data();
                let dx = needs[0].then(|| {
                    let mut dx = vec![0.0; b * inp];
                    gemm(b, out_dim, inp, gd, out_dim, 1, p[1].data(), inp, 1, 0.0, &mut dx, inp, 1);
                    Tensor::from_vec(&[b, inp], dx).unwrap()
                });
                let dw = needs[1].then(|| {
                    let mut dw = vec![0.0; out_dim * inp];
                    gemm(out_dim, b, inp, gd, 1, out_dim, p[0].data(), inp, 1, 0.0, &mut dw, inp, 1);
                    Tensor::from_vec(&[out_dim, inp], dw).unwrap()
                });
                let mut grads = vec![dx, dw];
                if p.len() == 3 {
                    let mut db = vec![0.0; out_dim];
                    for row in gd.chunks(out_dim) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    grads.push(Some(Tensor::from_vec(p[2].shape(), db).unwrap()));
                }
                grads
            }),
        )
    }

    /// `(M, K) · (K, N)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        assert_eq!(k, k2, "matmul: inner dims {} vs {}", k, k2);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), k, 1, self.value(b).data(), n, 1, 0.0, &mut out, n, 1);
        let value = Tensor::from_vec(&[m, n], out).unwrap();
        self.push(
            value,
            &[a, b],
            Box::new(move |g, _, p, needs| {
                let gd = g.data();
                let da = needs[0].then(|| {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gd, n, 1, p[1].data(), 1, n, 0.0, &mut da, k, 1);
                    Tensor::from_vec(&[m, k], da).unwrap()
                });
                let db = needs[1].then(|| {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, p[0].data(), 1, k, gd, n, 1, 0.0, &mut db, n, 1);
                    Tensor::from_vec(&[k, n], db).unwrap()
                });
                vec![da, db]
            }),
        )
    }

    /// Row-wise softmax of a `(B, K)` tensor.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (_, k) = self.value(x).dims2();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(k) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        self.push(
            value,
            &[x],
            Box::new(move |g, y, _, _| {
                let mut dx = g.clone();
                for (drow, yrow) in dx.data_mut().chunks_mut(k).zip(y.data().chunks(k)) {
                    let dot: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (d, yv) in drow.iter_mut().zip(yrow) {
                        *d = yv * (*d - dot);
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    // ---- layout -----------------------------------------------------------

    /// Concatenates two `(B, ·, H, W)` tensors along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (n, ca, h, w) = self.value(a).dims4();
        let (n2, cb, h2, w2) = self.value(b).dims4();
        assert_eq!((n, h, w), (n2, h2, w2), "concat_channels: misaligned inputs");
        let plane = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for i in 0..n {
                out.extend_from_slice(&av[i * ca * plane..(i + 1) * ca * plane]);
                out.extend_from_slice(&bv[i * cb * plane..(i + 1) * cb * plane]);
            }
        }
        let value = Tensor::from_vec(&[n, ca + cb, h, w], out).unwrap();
        self.push(
            value,
            &[a, b],
            Box::new(move |g, _, _, _| {
                let gd = g.data();
                let (mut ga, mut gb) = (Vec::with_capacity(n * ca * plane), Vec::with_capacity(n * cb * plane));
                for i in 0..n {
                    let base = i * (ca + cb) * plane;
                    ga.extend_from_slice(&gd[base..base + ca * plane]);
                    gb.extend_from_slice(&gd[base + ca * plane..base + (ca + cb) * plane]);
                }
                vec![
                    Some(Tensor::from_vec(&[n, ca, h, w], ga).unwrap()),
                    Some(Tensor::from_vec(&[n, cb, h, w], gb).unwrap()),
                ]
            }),
        )
    }

    /// Channels `start..end` of a `(B, C, H, W)` tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, end: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert!(start < end && end <= c, "slice_channels: bad range {}..{} of {}", start, end, c);
        let plane = h * w;
        let width = end - start;
        let mut out = Vec::with_capacity(n * width * plane);
        {
            let xv = self.value(x).data();
            for i in 0..n {
                out.extend_from_slice(&xv[(i * c + start) * plane..(i * c + end) * plane]);
            }
        }
        let value = Tensor::from_vec(&[n, width, h, w], out).unwrap();
        self.push(
            value,
            &[x],
            Box::new(move |g, _, _, _| {
                let mut dx = vec![0.0; n * c * plane];
                let gd = g.data();
                for i in 0..n {
                    dx[(i * c + start) * plane..(i * c + end) * plane]
                        .copy_from_slice(&gd[i * width * plane..(i + 1) * width * plane]);
                }
                vec![Some(Tensor::from_vec(&[n, c, h, w], dx).unwrap())]
            }),
        )
    }

    /// Row `i` of the result is row `i` of `options[choice[i]]`.
    pub fn gather_rows(&mut self, options: &[Var], choice: &[usize]) -> Var {
        let shape = self.shape(options[0]).to_vec();
        for o in options {
            assert_eq!(self.shape(*o), shape.as_slice(), "gather_rows: shape mismatch");
        }
        assert_eq!(shape[0], choice.len(), "gather_rows: choice length");
        assert!(choice.iter().all(|&c| c < options.len()), "gather_rows: choice out of range");
        let row = self.value(options[0]).row_len();
        let mut out = Vec::with_capacity(row * choice.len());
        for (i, &c) in choice.iter().enumerate() {
            out.extend_from_slice(&self.value(options[c]).data()[i * row..(i + 1) * row]);
        }
        let value = Tensor::from_vec(&shape, out).unwrap();
        let choice = choice.to_vec();
        let count = options.len();
        self.push(
            value,
            options,
            Box::new(move |g, _, _, needs| {
                (0..count)
                    .map(|opt| {
                        needs[opt].then(|| {
                            let mut d = Tensor::zeros(g.shape());
                            for (i, &c) in choice.iter().enumerate() {
                                if c == opt {
                                    d.data_mut()[i * row..(i + 1) * row]
                                        .copy_from_slice(&g.data()[i * row..(i + 1) * row]);
                                }
                            }
                            d
                        })
                    })
                    .collect()
            }),
        )
    }

    // ---- losses -----------------------------------------------------------

    /// Mean binary cross-entropy from logits, `labels[i] ∈ {0, 1}`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Var {
        let z = self.value(logits).data();
        assert_eq!(z.len(), labels.len(), "bce_with_logits: length mismatch");
        let n = z.len() as f64;
        let loss: f64 = z
            .iter()
            .zip(labels)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let labels = labels.to_vec();
        self.push(
            Tensor::scalar(loss),
            &[logits],
            Box::new(move |g, _, p, _| {
                let scale = g.item() / labels.len() as f64;
                let mut dz = p[0].clone();
                for (v, &y) in dz.data_mut().iter_mut().zip(&labels) {
                    *v = (sigmoid(*v) - y) * scale;
                }
                vec![Some(dz)]
            }),
        )
    }

    /// Mean categorical cross-entropy of `(B, N)` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let (b, n) = self.value(logits).dims2();
        assert_eq!(b, labels.len(), "cross_entropy: batch mismatch");
        let mut probs = self.value(logits).clone();
        let mut loss = 0.0;
        for (row, &y) in probs.data_mut().chunks_mut(n).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        loss /= b as f64;
        let labels = labels.to_vec();
        self.push(
            Tensor::scalar(loss),
            &[logits],
            Box::new(move |g, _, _, _| {
                let scale = g.item() / b as f64;
                let mut d = probs.clone();
                for (row, &y) in d.data_mut().chunks_mut(n).zip(&labels) {
                    row[y] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                vec![Some(d)]
            }),
        )
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
