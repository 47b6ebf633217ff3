//! Reverse-mode tape over [`Tensor`] values.
//!
//! A [`Graph`] borrows a [`ParamStore`] read-only, records every op in
//! evaluation order and, on [`Graph::backward`], walks the tape in reverse,
//! releasing each node's value once its gradient has been propagated.

use super::kernels::{conv_backward, conv_forward, ConvShape};
use super::{ParamStore, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
enum Op {
    Input,
    Param(usize),
    Conv2d { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    GlobalAvgPool(Var),
    ScaleChannels { x: Var, s: Var },
    PixelShuffle { x: Var, r: usize },
    SoftmaxChannels(Var),
    Fuse { w: Var, preds: Var },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Per-parameter gradients, aligned with the store's indices. Parameters
/// that did not take part in the forward pass have `None`.
pub type ParamGrads = Vec<Option<Tensor>>;

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match self.nodes[v.0].op {
            Op::Param(i) => self.params.get(i),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Input, t, false)
    }

    pub fn param(&mut self, idx: usize) -> Var {
        if let Some(v) = self.param_vars[idx] {
            return v;
        }
        let v = self.push(Op::Param(idx), Tensor::zeros([0, 0, 0, 0]), true);
        self.param_vars[idx] = Some(v);
        v
    }

    /// Stride-1 convolution with "same" zero padding; `weight` is
    /// `[co, ci, k, k]` with odd `k`, `bias` holds `co` values.
    pub fn conv2d(&mut self, x: Var, weight: usize, bias: usize) -> Var {
        let w = self.param(weight);
        let b = self.param(bias);
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        assert_eq!(xs[1], ws[1], "conv input channels");
        assert!(ws[2] == ws[3] && ws[2] % 2 == 1, "odd square kernel");
        let s = ConvShape {
            n: xs[0],
            ci: xs[1],
            co: ws[0],
            h: xs[2],
            w: xs[3],
            k: ws[2],
        };
        let mut y = Tensor::zeros([s.n, s.co, s.h, s.w]);
        conv_forward(
            s,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            y.data_mut(),
        );
        self.push(Op::Conv2d { x, w, b }, y, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Add(a, b), y, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut y = self.value(x).clone();
        y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let rg = self.rg(x);
        self.push(Op::Relu(x), y, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut y = self.value(x).clone();
        y.data_mut()
            .iter_mut()
            .for_each(|v| *v = 1.0 / (1.0 + (-*v).exp()));
        let rg = self.rg(x);
        self.push(Op::Sigmoid(x), y, rg)
    }

    /// `[n, c, h, w] -> [n, c, 1, 1]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let [n, c, _, _] = t.shape();
        let hw = t.plane_len() as f32;
        let data = t
            .data()
            .chunks_exact(t.plane_len())
            .map(|p| p.iter().sum::<f32>() / hw)
            .collect();
        let rg = self.rg(x);
        self.push(Op::GlobalAvgPool(x), Tensor::from_vec([n, c, 1, 1], data), rg)
    }

    /// Multiplies every plane of `x` by the matching scalar in `s` (`[n, c, 1, 1]`).
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Var {
        let mut y = self.value(x).clone();
        let sv = self.value(s);
        let [n, c, _, _] = y.shape();
        assert_eq!(sv.shape(), [n, c, 1, 1]);
        let hw = y.plane_len();
        for (plane, &g) in y.data_mut().chunks_exact_mut(hw).zip(sv.data()) {
            plane.iter_mut().for_each(|v| *v *= g);
        }
        let rg = self.rg(x) || self.rg(s);
        self.push(Op::ScaleChannels { x, s }, y, rg)
    }

    /// Channel-to-space rearrangement `[n, c*r*r, h, w] -> [n, c, h*r, w*r]`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Var {
        let t = self.value(x);
        let [n, cr, h, w] = t.shape();
        assert_eq!(cr % (r * r), 0, "channels not divisible by r^2");
        let c = cr / (r * r);
        let mut y = Tensor::zeros([n, c, h * r, w * r]);
        let (src, dst) = (t.data(), y.data_mut());
        for_each_shuffle_pair([n, c, h, w], r, |pi, si| dst[si] = src[pi]);
        let rg = self.rg(x);
        self.push(Op::PixelShuffle { x, r }, y, rg)
    }

    /// Softmax across channels independently at every pixel.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let mut y = self.value(x).clone();
        let [n, c, _, _] = y.shape();
        let hw = y.plane_len();
        for item in 0..n {
            let d = y.item_mut(item);
            for p in 0..hw {
                let max = (0..c).map(|k| d[k * hw + p]).fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0;
                for k in 0..c {
                    let e = (d[k * hw + p] - max).exp();
                    d[k * hw + p] = e;
                    sum += e;
                }
                for k in 0..c {
                    d[k * hw + p] /= sum;
                }
            }
        }
        let rg = self.rg(x);
        self.push(Op::SoftmaxChannels(x), y, rg)
    }

    /// Per-pixel weighted sum of RGB predictions. `w` is `[n, p, h, w]`,
    /// `preds` is the channel concatenation `[n, 3p, h, w]`; the result is
    /// `[n, 3, h, w]` with each weight plane broadcast over RGB.
    pub fn fuse(&mut self, w: Var, preds: Var) -> Var {
        let wt = self.value(w);
        let pt = self.value(preds);
        let [n, p, h, wd] = wt.shape();
        assert_eq!(pt.shape(), [n, 3 * p, h, wd], "fusion operand shapes");
        let hw = h * wd;
        let mut y = Tensor::zeros([n, 3, h, wd]);
        for item in 0..n {
            let (wi, pi) = (wt.item(item), pt.item(item));
            let yi = y.item_mut(item);
            for k in 0..p {
                let wk = &wi[k * hw..(k + 1) * hw];
                for c in 0..3 {
                    let src = &pi[(3 * k + c) * hw..(3 * k + c + 1) * hw];
                    let dst = &mut yi[c * hw..(c + 1) * hw];
                    for ((d, s), g) in dst.iter_mut().zip(src).zip(wk) {
                        *d += s * g;
                    }
                }
            }
        }
        let rg = self.rg(w) || self.rg(preds);
        self.push(Op::Fuse { w, preds }, y, rg)
    }

    /// Propagates the seed gradients back to the parameters, consuming the
    /// tape.
    pub fn backward(mut self, seeds: Vec<(Var, Tensor)>) -> ParamGrads {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            assert_eq!(g.shape(), self.value(v).shape(), "seed gradient shape");
            accumulate(&mut grads, v, g);
        }
        let mut out: ParamGrads = vec![None; self.params.len()];
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op;
            match op {
                Op::Input => {}
                Op::Param(p) => out[p] = Some(g),
                Op::Conv2d { x, w, b } => {
                    let xt = self.value(x);
                    let wt = self.value(w);
                    let xs = xt.shape();
                    let ws = wt.shape();
                    let s = ConvShape {
                        n: xs[0],
                        ci: xs[1],
                        co: ws[0],
                        h: xs[2],
                        w: xs[3],
                        k: ws[2],
                    };
                    let mut dw = Tensor::zeros(ws);
                    let mut db = Tensor::zeros(self.value(b).shape());
                    let mut dx = self.rg(x).then(|| Tensor::zeros(xs));
                    conv_backward(
                        s,
                        xt.data(),
                        wt.data(),
                        g.data(),
                        dw.data_mut(),
                        db.data_mut(),
                        dx.as_mut().map(|t| t.data_mut()),
                    );
                    accumulate(&mut grads, w, dw);
                    accumulate(&mut grads, b, db);
                    if let Some(dx) = dx {
                        accumulate(&mut grads, x, dx);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(a) && self.rg(b) {
                        accumulate(&mut grads, a, g.clone());
                        accumulate(&mut grads, b, g);
                    } else if self.rg(a) {
                        accumulate(&mut grads, a, g);
                    } else if self.rg(b) {
                        accumulate(&mut grads, b, g);
                    }
                }
                Op::Relu(x) => {
                    let mut dx = g;
                    for (d, y) in dx.data_mut().iter_mut().zip(self.nodes[i].value.data()) {
                        if *y <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads, x, dx);
                }
                Op::Sigmoid(x) => {
                    let mut dx = g;
                    for (d, y) in dx.data_mut().iter_mut().zip(self.nodes[i].value.data()) {
                        *d *= y * (1.0 - y);
                    }
                    accumulate(&mut grads, x, dx);
                }
                Op::GlobalAvgPool(x) => {
                    let xs = self.value(x).shape();
                    let hw = xs[2] * xs[3];
                    let inv = 1.0 / hw as f32;
                    let data = g
                        .data()
                        .iter()
                        .flat_map(|&v| std::iter::repeat_n(v * inv, hw))
                        .collect();
                    accumulate(&mut grads, x, Tensor::from_vec(xs, data));
                }
                Op::ScaleChannels { x, s } => {
                    let xt = self.value(x);
                    let st = self.value(s);
                    let hw = xt.plane_len();
                    if self.rg(s) {
                        let data = g
                            .data()
                            .chunks_exact(hw)
                            .zip(xt.data().chunks_exact(hw))
                            .map(|(gp, xp)| gp.iter().zip(xp).map(|(a, b)| a * b).sum())
                            .collect();
                        accumulate(&mut grads, s, Tensor::from_vec(st.shape(), data));
                    }
                    if self.rg(x) {
                        let mut dx = g;
                        for (plane, &sv) in dx.data_mut().chunks_exact_mut(hw).zip(st.data()) {
                            plane.iter_mut().for_each(|v| *v *= sv);
                        }
                        accumulate(&mut grads, x, dx);
                    }
                }
                Op::PixelShuffle { x, r } => {
                    let xs = self.value(x).shape();
                    let mut dx = Tensor::zeros(xs);
                    let c = xs[1] / (r * r);
                    let (src, dst) = (g.data(), dx.data_mut());
                    for_each_shuffle_pair([xs[0], c, xs[2], xs[3]], r, |pi, si| dst[pi] = src[si]);
                    accumulate(&mut grads, x, dx);
                }
                Op::SoftmaxChannels(x) => {
                    let y = &self.nodes[i].value;
                    let [n, c, _, _] = y.shape();
                    let hw = y.plane_len();
                    let mut dx = g;
                    for item in 0..n {
                        let yi = y.item(item);
                        let di = dx.item_mut(item);
                        for p in 0..hw {
                            let dot: f32 = (0..c).map(|k| yi[k * hw + p] * di[k * hw + p]).sum();
                            for k in 0..c {
                                di[k * hw + p] = yi[k * hw + p] * (di[k * hw + p] - dot);
                            }
                        }
                    }
                    accumulate(&mut grads, x, dx);
                }
                Op::Fuse { w, preds } => {
                    let wt = self.value(w);
                    let pt = self.value(preds);
                    let [n, p, h, wd] = wt.shape();
                    let hw = h * wd;
                    if self.rg(w) {
                        let mut dw = Tensor::zeros(wt.shape());
                        for item in 0..n {
                            let (gi, pi) = (g.item(item), pt.item(item));
                            let dwi = dw.item_mut(item);
                            for k in 0..p {
                                let dst = &mut dwi[k * hw..(k + 1) * hw];
                                for c in 0..3 {
                                    let src = &pi[(3 * k + c) * hw..(3 * k + c + 1) * hw];
                                    let gc = &gi[c * hw..(c + 1) * hw];
                                    for ((d, s), gv) in dst.iter_mut().zip(src).zip(gc) {
                                        *d += s * gv;
                                    }
                                }
                            }
                        }
                        accumulate(&mut grads, w, dw);
                    }
                    if self.rg(preds) {
                        let mut dp = Tensor::zeros(pt.shape());
                        for item in 0..n {
                            let (gi, wi) = (g.item(item), wt.item(item));
                            let dpi = dp.item_mut(item);
                            for k in 0..p {
                                let wk = &wi[k * hw..(k + 1) * hw];
                                for c in 0..3 {
                                    let dst = &mut dpi[(3 * k + c) * hw..(3 * k + c + 1) * hw];
                                    let gc = &gi[c * hw..(c + 1) * hw];
                                    for ((d, wv), gv) in dst.iter_mut().zip(wk).zip(gc) {
                                        *d = wv * gv;
                                    }
                                }
                            }
                        }
                        accumulate(&mut grads, preds, dp);
                    }
                }
            }
            // Every consumer of node i sits later on the tape and has already
            // been processed.
            self.nodes[i].value = Tensor::zeros([0, 0, 0, 0]);
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Calls `f(packed_index, spread_index)` for every element of a
/// `[n, c*r*r, h, w]` <-> `[n, c, h*r, w*r]` rearrangement.
fn for_each_shuffle_pair(dims: [usize; 4], r: usize, mut f: impl FnMut(usize, usize)) {
    let [n, c, h, w] = dims;
    let (oh, ow) = (h * r, w * r);
    for item in 0..n {
        for ch in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let plane = ((item * c + ch) * r * r + i * r + j) * h * w;
                    for y in 0..h {
                        for x in 0..w {
                            let si = ((item * c + ch) * oh + y * r + i) * ow + x * r + j;
                            f(plane + y * w + x, si);
                        }
                    }
                }
            }
        }
    }
}
