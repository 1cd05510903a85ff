//! A small tape-based reverse-mode differentiator over [`Tensor`]s.
//!
//! Every operation appends a node to the [`Graph`]; nodes are created in
//! topological order, so the backward pass is a single reverse sweep.

pub mod kernels;

use std::sync::Arc;

use crate::tensor::Tensor;
use kernels::ConvGeometry;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    UpConv { x: Var, w: Var, b: Var },
    InstanceNorm { x: Var, gamma: Var, beta: Var, stats: Vec<(f32, f32)> },
    LeakyRelu { x: Var, slope: f32 },
    Add { a: Var, b: Var },
    AddChannelBias { x: Var, v: Var },
    Concat { a: Var, b: Var },
    Linear { x: Var, w: Var, b: Var },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    track: bool,
}

/// Parameter gradients keyed by parameter index.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, param: usize) -> Option<&Tensor> {
        self.grads.get(param).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (usize, &mut Tensor)> {
        self.grads
            .iter_mut()
            .enumerate()
            .filter_map(|(i, g)| g.as_mut().map(|g| (i, g)))
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.data().iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = (max_norm / norm) as f32;
            for g in self.grads.iter_mut().flatten() {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
        norm
    }
}

impl Graph {
    /// A graph that records operations for a backward pass.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            track: true,
        }
    }

    /// A graph for inference only; [`Graph::backward`] returns no gradients.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            track: false,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, needs_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, op: Op, needs_grad: bool) -> Var {
        let needs_grad = needs_grad && self.track;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    pub fn param(&mut self, index: usize, value: &Arc<Tensor>) -> Var {
        self.push_arc(Arc::clone(value), Op::Param(index), true)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (n, c, h, wd) = self.value(x).dims4().expect("conv2d input must be NCHW");
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be [Co, C, k, k]");
        assert_eq!(ws[1], c, "conv weight channels do not match input");
        let geom = ConvGeometry {
            channels: c,
            height: h,
            width: wd,
            kernel: ws[2],
            stride,
            pad,
        };
        let (ho, wo) = geom.out_hw();
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            n,
            &geom,
            self.value(w).data(),
            self.value(b).data(),
            ws[0],
        );
        let t = Tensor::new(&[n, ws[0], ho, wo], out).expect("conv output shape");
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(t, Op::Conv2d { x, w, b, stride, pad }, ng)
    }

    /// 2×2 stride-2 transposed convolution doubling spatial size.
    pub fn upconv(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (n, c, h, wd) = self.value(x).dims4().expect("upconv input must be NCHW");
        let ws = self.shape(w).to_vec();
        assert_eq!(ws[0], c, "upconv weight must be [C, Co, 2, 2]");
        let out = kernels::upconv_forward(
            self.value(x).data(),
            n,
            c,
            h,
            wd,
            self.value(w).data(),
            self.value(b).data(),
            ws[1],
        );
        let t = Tensor::new(&[n, ws[1], 2 * h, 2 * wd], out).expect("upconv output shape");
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(t, Op::UpConv { x, w, b }, ng)
    }

    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4().expect("norm input must be NCHW");
        let (out, stats) = kernels::instance_norm_forward(
            self.value(x).data(),
            n,
            c,
            h * w,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let t = Tensor::new(&[n, c, h, w], out).expect("norm output shape");
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(t, Op::InstanceNorm { x, gamma, beta, stats }, ng)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        let t = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let ng = self.ng(x);
        self.push(t, Op::LeakyRelu { x, slope }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self
            .value(a)
            .zip_map(self.value(b), |p, q| p + q)
            .expect("add operands must share a shape");
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Add { a, b }, ng)
    }

    /// Adds a per-sample, per-channel vector `v: [N, C]` to every pixel of `x: [N, C, H, W]`.
    pub fn add_channel_bias(&mut self, x: Var, v: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4().expect("bias target must be NCHW");
        assert_eq!(self.shape(v), &[n, c], "channel bias must be [N, C]");
        let mut t = self.value(x).clone();
        let hw = h * w;
        let vd = self.value(v).data().to_vec();
        for (i, plane) in t.data_mut().chunks_mut(hw).enumerate() {
            let add = vd[i];
            plane.iter_mut().for_each(|p| *p += add);
        }
        let ng = self.ng(x) || self.ng(v);
        self.push(t, Op::AddChannelBias { x, v }, ng)
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let t = Tensor::concat_channels(self.value(a), self.value(b)).expect("concat shapes");
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Concat { a, b }, ng)
    }

    /// `y = x Wᵀ + b` with `x: [N, D]`, `w: [O, D]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 2, "linear input must be [N, D]");
        assert_eq!(ws[1], xs[1], "linear weight must be [O, D]");
        let (n, d, o) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0f32; n * o];
        for row in out.chunks_mut(o) {
            row.copy_from_slice(self.value(b).data());
        }
        kernels::gemm(n, d, o, self.value(x).data(), false, self.value(w).data(), true, &mut out, 1.0);
        let t = Tensor::new(&[n, o], out).expect("linear output shape");
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(t, Op::Linear { x, w, b }, ng)
    }

    /// Back-propagates `seed` (the gradient of a scalar objective w.r.t. `output`).
    ///
    /// `param_count` sizes the returned [`Gradients`].
    pub fn backward(&self, output: Var, seed: Tensor, param_count: usize) -> Gradients {
        let mut out = Gradients {
            grads: (0..param_count).map(|_| None).collect(),
        };
        if !self.track {
            return out;
        }
        assert_eq!(seed.shape(), self.shape(output), "seed gradient shape");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);

        for idx in (0..=output.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(p) => accumulate(&mut out.grads[*p], gy),
                Op::Conv2d { x, w, b, stride, pad } => {
                    let xv = self.value(*x);
                    let (n, c, h, wd) = xv.dims4().unwrap();
                    let ws = self.shape(*w).to_vec();
                    let geom = ConvGeometry {
                        channels: c,
                        height: h,
                        width: wd,
                        kernel: ws[2],
                        stride: *stride,
                        pad: *pad,
                    };
                    let (dx, dw, db) = kernels::conv2d_backward(
                        xv.data(),
                        n,
                        &geom,
                        self.value(*w).data(),
                        ws[0],
                        gy.data(),
                        self.ng(*x),
                        self.ng(*w),
                    );
                    if let Some(dx) = dx {
                        accumulate(&mut grads[x.0], Tensor::new(xv.shape(), dx).unwrap());
                    }
                    if self.ng(*w) {
                        accumulate(&mut grads[w.0], Tensor::new(&ws, dw).unwrap());
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads[b.0], Tensor::new(&[ws[0]], db).unwrap());
                    }
                }
                Op::UpConv { x, w, b } => {
                    let xv = self.value(*x);
                    let (n, c, h, wd) = xv.dims4().unwrap();
                    let ws = self.shape(*w).to_vec();
                    let (dx, dw, db) = kernels::upconv_backward(
                        xv.data(),
                        n,
                        c,
                        h,
                        wd,
                        self.value(*w).data(),
                        ws[1],
                        gy.data(),
                        self.ng(*x),
                    );
                    if let Some(dx) = dx {
                        accumulate(&mut grads[x.0], Tensor::new(xv.shape(), dx).unwrap());
                    }
                    if self.ng(*w) {
                        accumulate(&mut grads[w.0], Tensor::new(&ws, dw).unwrap());
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads[b.0], Tensor::new(&[ws[1]], db).unwrap());
                    }
                }
                Op::InstanceNorm { x, gamma, beta, stats } => {
                    let xv = self.value(*x);
                    let (n, c, h, w) = xv.dims4().unwrap();
                    let (dx, dg, db) = kernels::instance_norm_backward(
                        xv.data(),
                        n,
                        c,
                        h * w,
                        self.value(*gamma).data(),
                        stats,
                        gy.data(),
                        self.ng(*x),
                    );
                    if let Some(dx) = dx {
                        accumulate(&mut grads[x.0], Tensor::new(xv.shape(), dx).unwrap());
                    }
                    if self.ng(*gamma) {
                        accumulate(&mut grads[gamma.0], Tensor::new(&[c], dg).unwrap());
                    }
                    if self.ng(*beta) {
                        accumulate(&mut grads[beta.0], Tensor::new(&[c], db).unwrap());
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    let xv = self.value(*x);
                    let d = xv
                        .zip_map(&gy, |v, g| if v > 0.0 { g } else { slope * g })
                        .unwrap();
                    accumulate(&mut grads[x.0], d);
                }
                Op::Add { a, b } => {
                    if self.ng(*a) && self.ng(*b) {
                        accumulate(&mut grads[a.0], gy.clone());
                        accumulate(&mut grads[b.0], gy);
                    } else if self.ng(*a) {
                        accumulate(&mut grads[a.0], gy);
                    } else if self.ng(*b) {
                        accumulate(&mut grads[b.0], gy);
                    }
                }
                Op::AddChannelBias { x, v } => {
                    if self.ng(*v) {
                        let (n, c, h, w) = gy.dims4().unwrap();
                        let dv: Vec<f32> = gy.data().chunks(h * w).map(|p| p.iter().sum()).collect();
                        accumulate(&mut grads[v.0], Tensor::new(&[n, c], dv).unwrap());
                    }
                    if self.ng(*x) {
                        accumulate(&mut grads[x.0], gy);
                    }
                }
                Op::Concat { a, b } => {
                    let (n, ca, h, w) = self.value(*a).dims4().unwrap();
                    let cb = self.shape(*b)[1];
                    let hw = h * w;
                    let mut da = Vec::with_capacity(n * ca * hw);
                    let mut dbv = Vec::with_capacity(n * cb * hw);
                    for s in 0..n {
                        let base = s * (ca + cb) * hw;
                        da.extend_from_slice(&gy.data()[base..base + ca * hw]);
                        dbv.extend_from_slice(&gy.data()[base + ca * hw..base + (ca + cb) * hw]);
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads[a.0], Tensor::new(&[n, ca, h, w], da).unwrap());
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads[b.0], Tensor::new(&[n, cb, h, w], dbv).unwrap());
                    }
                }
                Op::Linear { x, w, b } => {
                    let xs = self.shape(*x).to_vec();
                    let ws = self.shape(*w).to_vec();
                    let (n, d, o) = (xs[0], xs[1], ws[0]);
                    if self.ng(*x) {
                        let mut dx = vec![0.0f32; n * d];
                        kernels::gemm(n, o, d, gy.data(), false, self.value(*w).data(), false, &mut dx, 0.0);
                        accumulate(&mut grads[x.0], Tensor::new(&xs, dx).unwrap());
                    }
                    if self.ng(*w) {
                        let mut dw = vec![0.0f32; o * d];
                        kernels::gemm(o, n, d, gy.data(), true, self.value(*x).data(), false, &mut dw, 0.0);
                        accumulate(&mut grads[w.0], Tensor::new(&ws, dw).unwrap());
                    }
                    if self.ng(*b) {
                        let mut db = vec![0.0f32; o];
                        for row in gy.data().chunks(o) {
                            for (acc, v) in db.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        accumulate(&mut grads[b.0], Tensor::new(&[o], db).unwrap());
                    }
                }
            }
        }
        out
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d<r, f(params)>/d params for a small conv stack.
    #[test]
    fn conv_norm_stack_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params: Vec<Arc<Tensor>> = vec![
            Arc::new(Tensor::randn(&[3, 2, 3, 3], &mut rng).scale(0.4)),
            Arc::new(Tensor::randn(&[3], &mut rng).scale(0.1)),
            Arc::new(Tensor::randn(&[3], &mut rng).scale(0.2).map(|v| v + 1.0)),
            Arc::new(Tensor::randn(&[3], &mut rng).scale(0.1)),
            Arc::new(Tensor::randn(&[3, 2, 2, 2], &mut rng).scale(0.4)),
            Arc::new(Tensor::randn(&[2], &mut rng).scale(0.1)),
            Arc::new(Tensor::randn(&[3, 4], &mut rng).scale(0.4)),
            Arc::new(Tensor::randn(&[3], &mut rng).scale(0.1)),
        ];
        let x = Tensor::randn(&[2, 2, 6, 6], &mut rng);
        let emb = Tensor::randn(&[2, 4], &mut rng);
        let probe = Tensor::randn(&[2, 4, 6, 6], &mut rng);

        let run = |params: &[Arc<Tensor>], tracked: bool| {
            let mut g = if tracked { Graph::new() } else { Graph::inference() };
            let p: Vec<Var> = params.iter().enumerate().map(|(i, t)| g.param(i, t)).collect();
            let xi = g.input(x.clone());
            let e = g.input(emb.clone());
            let h = g.conv2d(xi, p[0], p[1], 2, 1);
            let h = g.instance_norm(h, p[2], p[3]);
            let tb = g.linear(e, p[6], p[7]);
            let h = g.add_channel_bias(h, tb);
            let h = g.leaky_relu(h, 0.01);
            let u = g.upconv(h, p[4], p[5]);
            let y = g.concat(u, xi);
            let v: f64 = g
                .value(y)
                .data()
                .iter()
                .zip(probe.data())
                .map(|(a, b)| (*a as f64) * (*b as f64))
                .sum();
            (g, y, v)
        };

        let (g, y, _) = run(&params, true);
        let grads = g.backward(y, probe.clone(), params.len());
        let eps = 2e-3f32;
        for pi in 0..params.len() {
            let analytic = grads.get(pi).unwrap();
            for k in 0..params[pi].len().min(6) {
                let mut plus = params.clone();
                let mut minus = params.clone();
                Arc::make_mut(&mut plus[pi]).data_mut()[k] += eps;
                Arc::make_mut(&mut minus[pi]).data_mut()[k] -= eps;
                let fd = (run(&plus, false).2 - run(&minus, false).2) / (2.0 * eps as f64);
                let a = analytic.data()[k] as f64;
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-2);
                assert!(err < 1e-2, "param {pi}[{k}]: analytic {a} vs fd {fd}");
            }
        }
    }
}
