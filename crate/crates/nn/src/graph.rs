//! Tape-based reverse-mode automatic differentiation.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order and [`Graph::backward`] walks it in reverse.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::{col2im, gemm, im2col, ConvGeom, MatRef, PadMode};
use crate::params::{ParamId, ParamKey, ParamStore};
use crate::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which elements share normalization statistics in an NCHW tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// Per sample and channel, over H x W.
    Instance,
    /// Per channel, over N x H x W.
    Batch,
    /// Per sample, over C x H x W.
    Layer,
}

enum Op {
    Leaf,
    Param(ParamKey),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        out_ch: usize,
        cols: Vec<f32>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Relu(Var),
    LeakyRelu(Var, f32),
    Tanh(Var),
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample(Var),
    Concat(Vec<Var>),
    Normalize {
        x: Var,
        kind: NormKind,
        rstd: Vec<f32>,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    GlobalAvgPool(Var),
    Reshape(Var),
    Narrow {
        x: Var,
        start: usize,
    },
    Softmax(Var),
    MeanAll(Var),
    L1 {
        a: Var,
        b: Var,
    },
    MseConst {
        a: Var,
        target: f32,
    },
    External {
        x: Var,
        grad: Tensor,
    },
    Dropout {
        x: Var,
        mask: Vec<f32>,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to every parameter it touched.
#[derive(Default, Debug)]
pub struct Gradients {
    map: HashMap<ParamKey, Tensor>,
}

impl Gradients {
    pub fn get(&self, key: ParamKey) -> Option<&Tensor> {
        self.map.get(&key)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Adds another set of gradients into this one.
    pub fn merge(&mut self, other: Gradients) {
        for (k, v) in other.map {
            match self.map.get_mut(&k) {
                Some(t) => t.add_assign(&v),
                None => {
                    self.map.insert(k, v);
                }
            }
        }
    }
}

pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    train: bool,
    rng: RefCell<ChaCha8Rng>,
    buffer_updates: RefCell<Vec<(ParamKey, Tensor)>>,
}

impl Graph {
    /// A graph in inference mode: dropout off, batch norm uses running stats.
    pub fn eval() -> Self {
        Self::with_mode(false, 0)
    }

    /// A graph in training mode; `seed` drives dropout masks.
    pub fn train(seed: u64) -> Self {
        Self::with_mode(true, seed)
    }

    fn with_mode(train: bool, seed: u64) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            train,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
            buffer_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A copy of `v` that blocks gradient flow.
    pub fn detach(&self, v: Var) -> Var {
        let t = (*self.value(v)).clone();
        self.constant(t)
    }

    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        let p = &store.params()[id.0];
        self.push(p.value.clone(), Op::Param(store.key(id)), p.trainable)
    }

    /// Schedules a non-trainable buffer overwrite (e.g. running statistics).
    pub fn record_buffer_update(&self, key: ParamKey, value: Tensor) {
        self.buffer_updates.borrow_mut().push((key, value));
    }

    /// Applies recorded buffer overwrites that belong to `store`.
    pub fn apply_buffer_updates(&self, store: &mut ParamStore) {
        for (key, value) in self.buffer_updates.borrow().iter() {
            if key.store == store.uid() {
                *store.get_mut(ParamId(key.index)) = value.clone();
            }
        }
    }

    pub fn rng_f32(&self) -> f32 {
        self.rng.borrow_mut().gen::<f32>()
    }

    // ---- forward operations ----

    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, mode: PadMode) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, c, h, wd) = xv.dims4();
        let (o, ci, kh, kw) = wv.dims4();
        assert_eq!(c, ci, "conv2d: input has {c} channels, kernel expects {ci}");
        let geom = ConvGeom {
            batch: n,
            in_ch: c,
            height: h,
            width: wd,
            kh,
            kw,
            stride,
            pad,
            mode,
        };
        let (oh, ow) = geom.out_hw();
        let cols = im2col(xv.data(), &geom);
        let ncols = geom.col_cols();
        let mut mat = vec![0.0f32; o * ncols];
        gemm(
            MatRef::new(wv.data(), o, geom.col_rows()),
            MatRef::new(&cols, geom.col_rows(), ncols),
            &mut mat,
            0.0,
        );
        let plane = oh * ow;
        let mut out = vec![0.0f32; n * o * plane];
        let bias = b.map(|b| self.value(b));
        for oc in 0..o {
            let bv = bias.as_ref().map_or(0.0, |t| t.data()[oc]);
            for s in 0..n {
                let src = &mat[oc * ncols + s * plane..][..plane];
                let dst = &mut out[(s * o + oc) * plane..][..plane];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d = v + bv;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            Tensor::new(&[n, o, oh, ow], out),
            Op::Conv {
                x,
                w,
                b,
                geom,
                out_ch: o,
                cols,
            },
            rg,
        )
    }

    /// `x [N, I]` times `w [O, I]` transposed, plus `b [O]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, i) = xv.dims2();
        let (o, i2) = wv.dims2();
        assert_eq!(i, i2, "linear: input width {i}, weight expects {i2}");
        let mut out = vec![0.0f32; n * o];
        gemm(MatRef::new(xv.data(), n, i), MatRef::t(wv.data(), o, i), &mut out, 0.0);
        if let Some(b) = b {
            let bv = self.value(b);
            for row in out.chunks_mut(o) {
                for (v, bb) in row.iter_mut().zip(bv.data()) {
                    *v += bb;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::new(&[n, o], out), Op::Linear { x, w, b }, rg)
    }

    fn zip_op(&self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32, op: Op) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "elementwise op on mismatched shapes");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(av.shape(), data), op, rg)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.zip_op(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.zip_op(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.zip_op(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&self, a: Var, s: f32) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), self.rg(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a), self.rg(a))
    }

    pub fn leaky_relu(&self, a: Var, slope: f32) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope), self.rg(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let v = self.value(a).map(f32::tanh);
        self.push(v, Op::Tanh(a), self.rg(a))
    }

    /// 2x2 max pooling with stride 2; odd trailing rows/cols are dropped.
    pub fn max_pool2(&self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        let d = xv.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + 2 * y * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * y + dy) * w + 2 * xx + dx;
                        if d[i] > d[best] {
                            best = i;
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best as u32);
                }
            }
        }
        self.push(Tensor::new(&[n, c, oh, ow], out), Op::MaxPool { x, argmax }, self.rg(x))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let mut out = vec![0.0f32; n * c * 4 * h * w];
        let d = xv.data();
        for plane in 0..n * c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(plane * 2 * h + y) * 2 * w + xx] = d[(plane * h + y / 2) * w + xx / 2];
                }
            }
        }
        self.push(Tensor::new(&[n, c, 2 * h, 2 * w], out), Op::Upsample(x), self.rg(x))
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat(&self, parts: &[Var]) -> Var {
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| self.value(*p)).collect();
        let (n, _, h, w) = vals[0].dims4();
        let total_c: usize = vals
            .iter()
            .map(|v| {
                let (n2, c, h2, w2) = v.dims4();
                assert_eq!((n, h, w), (n2, h2, w2), "concat: spatial/batch mismatch");
                c
            })
            .sum();
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total_c * plane);
        for s in 0..n {
            for v in &vals {
                let c = v.shape()[1];
                out.extend_from_slice(&v.data()[s * c * plane..(s + 1) * c * plane]);
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(Tensor::new(&[n, total_c, h, w], out), Op::Concat(parts.to_vec()), rg)
    }

    /// Zero-mean, unit-variance normalization without affine parameters.
    /// Returns the normalized tensor and the per-group mean and biased variance.
    pub fn normalize_with_stats(&self, x: Var, kind: NormKind, eps: f32) -> (Var, Vec<f32>, Vec<f32>) {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let groups = group_count(kind, &shape);
        let d = xv.data();
        let mut mean = vec![0.0f32; groups];
        let mut var = vec![0.0f32; groups];
        let mut rstd = vec![0.0f32; groups];
        let mut out = vec![0.0f32; d.len()];
        for g in 0..groups {
            let mut count = 0usize;
            let mut sum = 0.0f64;
            for r in group_ranges(kind, &shape, g) {
                sum += d[r.clone()].iter().map(|v| *v as f64).sum::<f64>();
                count += r.len();
            }
            let m = sum / count as f64;
            let mut sq = 0.0f64;
            for r in group_ranges(kind, &shape, g) {
                sq += d[r].iter().map(|v| (*v as f64 - m).powi(2)).sum::<f64>();
            }
            let v = sq / count as f64;
            let rs = 1.0 / (v + eps as f64).sqrt();
            for r in group_ranges(kind, &shape, g) {
                for i in r {
                    out[i] = ((d[i] as f64 - m) * rs) as f32;
                }
            }
            mean[g] = m as f32;
            var[g] = v as f32;
            rstd[g] = rs as f32;
        }
        let v = self.push(Tensor::new(&shape, out), Op::Normalize { x, kind, rstd }, self.rg(x));
        (v, mean, var)
    }

    pub fn normalize(&self, x: Var, kind: NormKind, eps: f32) -> Var {
        self.normalize_with_stats(x, kind, eps).0
    }

    /// `x * gamma + beta` per channel. `gamma`/`beta` are `[C]` (shared over
    /// the batch) or `[N, C]` (per sample, as in adaptive instance norm).
    pub fn channel_affine(&self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let (n, c, h, w) = xv.dims4();
        let per_sample = gv.shape().len() == 2;
        assert_eq!(gv.len(), if per_sample { n * c } else { c }, "channel_affine: bad gamma shape");
        assert_eq!(gv.shape(), bv.shape());
        let plane = h * w;
        let mut out = vec![0.0f32; xv.len()];
        for s in 0..n {
            for ch in 0..c {
                let pi = if per_sample { s * c + ch } else { ch };
                let (gg, bb) = (gv.data()[pi], bv.data()[pi]);
                let off = (s * c + ch) * plane;
                for i in off..off + plane {
                    out[i] = xv.data()[i] * gg + bb;
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(Tensor::new(&[n, c, h, w], out), Op::ChannelAffine { x, gamma, beta }, rg)
    }

    /// Mean over H x W, giving `[N, C]`.
    pub fn global_avg_pool(&self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let plane = h * w;
        let out = xv
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f32>() / plane as f32)
            .collect();
        self.push(Tensor::new(&[n, c], out), Op::GlobalAvgPool(x), self.rg(x))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let t = (*self.value(x)).clone().reshape(shape);
        self.push(t, Op::Reshape(x), self.rg(x))
    }

    /// Columns `start..start+len` of a `[N, P]` tensor.
    pub fn narrow(&self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let (n, p) = xv.dims2();
        assert!(start + len <= p);
        let mut out = Vec::with_capacity(n * len);
        for row in xv.data().chunks(p) {
            out.extend_from_slice(&row[start..start + len]);
        }
        self.push(Tensor::new(&[n, len], out), Op::Narrow { x, start }, self.rg(x))
    }

    /// Softmax across the channel axis of an NCHW tensor.
    pub fn softmax_channels(&self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let plane = h * w;
        let d = xv.data();
        let mut out = vec![0.0f32; d.len()];
        for s in 0..n {
            let base = s * c * plane;
            for p in 0..plane {
                let mut mx = f32::NEG_INFINITY;
                for ch in 0..c {
                    mx = mx.max(d[base + ch * plane + p]);
                }
                let mut z = 0.0f32;
                for ch in 0..c {
                    let e = (d[base + ch * plane + p] - mx).exp();
                    out[base + ch * plane + p] = e;
                    z += e;
                }
                for ch in 0..c {
                    out[base + ch * plane + p] /= z;
                }
            }
        }
        self.push(Tensor::new(&[n, c, h, w], out), Op::Softmax(x), self.rg(x))
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.data().iter().map(|v| *v as f64).sum::<f64>() / xv.len() as f64;
        self.push(Tensor::scalar(m as f32), Op::MeanAll(x), self.rg(x))
    }

    /// Mean absolute difference.
    pub fn l1(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "l1: mismatched shapes");
        let m = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (*x as f64 - *y as f64).abs())
            .sum::<f64>()
            / av.len() as f64;
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::scalar(m as f32), Op::L1 { a, b }, rg)
    }

    /// Mean squared distance to a constant target (least-squares GAN terms).
    pub fn mse_const(&self, a: Var, target: f32) -> Var {
        let av = self.value(a);
        let m = av
            .data()
            .iter()
            .map(|x| (*x as f64 - target as f64).powi(2))
            .sum::<f64>()
            / av.len() as f64;
        self.push(Tensor::scalar(m as f32), Op::MseConst { a, target }, self.rg(a))
    }

    /// A scalar computed outside the graph, with its gradient w.r.t. `x`
    /// supplied by the caller.
    pub fn external_scalar(&self, x: Var, value: f32, grad: Tensor) -> Var {
        assert_eq!(grad.shape(), self.value(x).shape(), "external gradient shape mismatch");
        self.push(Tensor::scalar(value), Op::External { x, grad }, self.rg(x))
    }

    /// Inverted dropout; the identity in inference mode.
    pub fn dropout(&self, x: Var, rate: f32) -> Var {
        if !self.train || rate <= 0.0 {
            return x;
        }
        let xv = self.value(x);
        let keep = 1.0 - rate;
        let mask: Vec<f32> = {
            let mut rng = self.rng.borrow_mut();
            (0..xv.len())
                .map(|_| if rng.gen::<f32>() < keep { 1.0 / keep } else { 0.0 })
                .collect()
        };
        let out = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        self.push(Tensor::new(xv.shape(), out), Op::Dropout { x, mask }, self.rg(x))
    }

    /// Adds several scalars.
    pub fn sum_scalars(&self, parts: &[Var]) -> Var {
        let mut acc = parts[0];
        for p in &parts[1..] {
            acc = self.add(acc, *p);
        }
        acc
    }

    // ---- reverse pass ----

    /// Backpropagates from scalar `loss`; returns parameter gradients.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Vec<f32>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            backward_node(&nodes, node, &gout, &mut grads, &mut out);
        }
        out
    }
}

fn group_count(kind: NormKind, shape: &[usize]) -> usize {
    match kind {
        NormKind::Instance => shape[0] * shape[1],
        NormKind::Batch => shape[1],
        NormKind::Layer => shape[0],
    }
}

fn group_ranges(kind: NormKind, shape: &[usize], g: usize) -> Vec<std::ops::Range<usize>> {
    let (n, c) = (shape[0], shape[1]);
    let plane: usize = shape[2..].iter().product();
    match kind {
        NormKind::Instance => vec![g * plane..(g + 1) * plane],
        NormKind::Layer => vec![g * c * plane..(g + 1) * c * plane],
        NormKind::Batch => (0..n)
            .map(|s| (s * c + g) * plane..(s * c + g + 1) * plane)
            .collect(),
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], nodes: &[Node], v: Var, g: Vec<f32>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(&g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn backward_node(
    nodes: &[Node],
    node: &Node,
    gout: &[f32],
    grads: &mut [Option<Vec<f32>>],
    out: &mut Gradients,
) {
    let val = |v: Var| -> &Tensor { &nodes[v.0].value };
    let rg = |v: Var| nodes[v.0].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Param(key) => {
            let t = Tensor::new(node.value.shape(), gout.to_vec());
            match out.map.get_mut(key) {
                Some(e) => e.add_assign(&t),
                None => {
                    out.map.insert(*key, t);
                }
            }
        }
        Op::Conv {
            x,
            w,
            b,
            geom,
            out_ch,
            cols,
        } => {
            let (oh, ow) = geom.out_hw();
            let plane = oh * ow;
            let ncols = geom.col_cols();
            let o = *out_ch;
            // [N, O, P] -> [O, N*P]
            let mut gmat = vec![0.0f32; o * ncols];
            for s in 0..geom.batch {
                for oc in 0..o {
                    gmat[oc * ncols + s * plane..][..plane]
                        .copy_from_slice(&gout[(s * o + oc) * plane..][..plane]);
                }
            }
            if let Some(b) = b {
                if rg(*b) {
                    let gb: Vec<f32> = gmat.chunks(ncols).map(|r| r.iter().sum()).collect();
                    accumulate(grads, nodes, *b, gb);
                }
            }
            if rg(*w) {
                let mut gw = vec![0.0f32; o * geom.col_rows()];
                gemm(
                    MatRef::new(&gmat, o, ncols),
                    MatRef::t(cols, geom.col_rows(), ncols),
                    &mut gw,
                    0.0,
                );
                accumulate(grads, nodes, *w, gw);
            }
            if rg(*x) {
                let mut gcols = vec![0.0f32; geom.col_rows() * ncols];
                gemm(
                    MatRef::t(val(*w).data(), o, geom.col_rows()),
                    MatRef::new(&gmat, o, ncols),
                    &mut gcols,
                    0.0,
                );
                let mut gx = vec![0.0f32; val(*x).len()];
                col2im(&gcols, geom, &mut gx);
                accumulate(grads, nodes, *x, gx);
            }
        }
        Op::Linear { x, w, b } => {
            let (n, i) = val(*x).dims2();
            let (o, _) = val(*w).dims2();
            if let Some(b) = b {
                if rg(*b) {
                    let mut gb = vec![0.0f32; o];
                    for row in gout.chunks(o) {
                        for (a, v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    accumulate(grads, nodes, *b, gb);
                }
            }
            if rg(*w) {
                let mut gw = vec![0.0f32; o * i];
                gemm(MatRef::t(gout, n, o), MatRef::new(val(*x).data(), n, i), &mut gw, 0.0);
                accumulate(grads, nodes, *w, gw);
            }
            if rg(*x) {
                let mut gx = vec![0.0f32; n * i];
                gemm(MatRef::new(gout, n, o), MatRef::new(val(*w).data(), o, i), &mut gx, 0.0);
                accumulate(grads, nodes, *x, gx);
            }
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, gout.to_vec());
            accumulate(grads, nodes, *b, gout.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, gout.to_vec());
            accumulate(grads, nodes, *b, gout.iter().map(|g| -g).collect());
        }
        Op::Mul(a, b) => {
            if rg(*a) {
                let g = gout.iter().zip(val(*b).data()).map(|(g, y)| g * y).collect();
                accumulate(grads, nodes, *a, g);
            }
            if rg(*b) {
                let g = gout.iter().zip(val(*a).data()).map(|(g, y)| g * y).collect();
                accumulate(grads, nodes, *b, g);
            }
        }
        Op::Scale(a, s) => accumulate(grads, nodes, *a, gout.iter().map(|g| g * s).collect()),
        Op::Relu(a) => {
            let g = gout
                .iter()
                .zip(node.value.data())
                .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                .collect();
            accumulate(grads, nodes, *a, g);
        }
        Op::LeakyRelu(a, slope) => {
            let g = gout
                .iter()
                .zip(val(*a).data())
                .map(|(g, x)| if *x > 0.0 { *g } else { g * slope })
                .collect();
            accumulate(grads, nodes, *a, g);
        }
        Op::Tanh(a) => {
            let g = gout
                .iter()
                .zip(node.value.data())
                .map(|(g, y)| g * (1.0 - y * y))
                .collect();
            accumulate(grads, nodes, *a, g);
        }
        Op::MaxPool { x, argmax } => {
            let mut g = vec![0.0f32; val(*x).len()];
            for (go, &i) in gout.iter().zip(argmax) {
                g[i as usize] += go;
            }
            accumulate(grads, nodes, *x, g);
        }
        Op::Upsample(x) => {
            let (n, c, h, w) = val(*x).dims4();
            let mut g = vec![0.0f32; n * c * h * w];
            for plane in 0..n * c {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        g[(plane * h + y / 2) * w + xx / 2] += gout[(plane * 2 * h + y) * 2 * w + xx];
                    }
                }
            }
            accumulate(grads, nodes, *x, g);
        }
        Op::Concat(parts) => {
            let (n, _, h, w) = node.value.dims4();
            let total_c = node.value.shape()[1];
            let plane = h * w;
            let mut offset = 0;
            for p in parts {
                let c = val(*p).shape()[1];
                if rg(*p) {
                    let mut g = Vec::with_capacity(n * c * plane);
                    for s in 0..n {
                        g.extend_from_slice(&gout[(s * total_c + offset) * plane..][..c * plane]);
                    }
                    accumulate(grads, nodes, *p, g);
                }
                offset += c;
            }
        }
        Op::Normalize { x, kind, rstd } => {
            let shape = node.value.shape();
            let y = node.value.data();
            let mut g = vec![0.0f32; y.len()];
            for (gi, rs) in rstd.iter().enumerate() {
                let ranges = group_ranges(*kind, shape, gi);
                let m: usize = ranges.iter().map(|r| r.len()).sum();
                let mut sum_g = 0.0f64;
                let mut sum_gy = 0.0f64;
                for r in &ranges {
                    for i in r.clone() {
                        sum_g += gout[i] as f64;
                        sum_gy += gout[i] as f64 * y[i] as f64;
                    }
                }
                let (mean_g, mean_gy) = (sum_g / m as f64, sum_gy / m as f64);
                for r in ranges {
                    for i in r {
                        g[i] = ((gout[i] as f64 - mean_g - y[i] as f64 * mean_gy) * *rs as f64) as f32;
                    }
                }
            }
            accumulate(grads, nodes, *x, g);
        }
        Op::ChannelAffine { x, gamma, beta } => {
            let xv = val(*x);
            let gv = val(*gamma);
            let (n, c, h, w) = xv.dims4();
            let plane = h * w;
            let per_sample = gv.shape().len() == 2;
            let mut gx = vec![0.0f32; xv.len()];
            let mut gg = vec![0.0f32; gv.len()];
            let mut gb = vec![0.0f32; gv.len()];
            for s in 0..n {
                for ch in 0..c {
                    let pi = if per_sample { s * c + ch } else { ch };
                    let off = (s * c + ch) * plane;
                    let gam = gv.data()[pi];
                    let mut sg = 0.0f32;
                    let mut sgx = 0.0f32;
                    for i in off..off + plane {
                        gx[i] = gout[i] * gam;
                        sg += gout[i];
                        sgx += gout[i] * xv.data()[i];
                    }
                    gg[pi] += sgx;
                    gb[pi] += sg;
                }
            }
            accumulate(grads, nodes, *x, gx);
            accumulate(grads, nodes, *gamma, gg);
            accumulate(grads, nodes, *beta, gb);
        }
        Op::GlobalAvgPool(x) => {
            let (_, _, h, w) = val(*x).dims4();
            let plane = h * w;
            let mut g = Vec::with_capacity(gout.len() * plane);
            for go in gout {
                g.extend(std::iter::repeat(go / plane as f32).take(plane));
            }
            accumulate(grads, nodes, *x, g);
        }
        Op::Reshape(x) => accumulate(grads, nodes, *x, gout.to_vec()),
        Op::Narrow { x, start } => {
            let (n, p) = val(*x).dims2();
            let len = node.value.shape()[1];
            let mut g = vec![0.0f32; n * p];
            for s in 0..n {
                g[s * p + start..s * p + start + len].copy_from_slice(&gout[s * len..(s + 1) * len]);
            }
            accumulate(grads, nodes, *x, g);
        }
        Op::Softmax(x) => {
            let (n, c, h, w) = node.value.dims4();
            let plane = h * w;
            let y = node.value.data();
            let mut g = vec![0.0f32; y.len()];
            for s in 0..n {
                let base = s * c * plane;
                for p in 0..plane {
                    let mut dot = 0.0f32;
                    for ch in 0..c {
                        let i = base + ch * plane + p;
                        dot += gout[i] * y[i];
                    }
                    for ch in 0..c {
                        let i = base + ch * plane + p;
                        g[i] = y[i] * (gout[i] - dot);
                    }
                }
            }
            accumulate(grads, nodes, *x, g);
        }
        Op::MeanAll(x) => {
            let n = val(*x).len();
            accumulate(grads, nodes, *x, vec![gout[0] / n as f32; n]);
        }
        Op::L1 { a, b } => {
            let av = val(*a);
            let bv = val(*b);
            let scale = gout[0] / av.len() as f32;
            let g: Vec<f32> = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(x, y)| {
                    let d = x - y;
                    if d > 0.0 {
                        scale
                    } else if d < 0.0 {
                        -scale
                    } else {
                        0.0
                    }
                })
                .collect();
            if rg(*b) {
                accumulate(grads, nodes, *b, g.iter().map(|v| -v).collect());
            }
            accumulate(grads, nodes, *a, g);
        }
        Op::MseConst { a, target } => {
            let av = val(*a);
            let scale = 2.0 * gout[0] / av.len() as f32;
            let g = av.data().iter().map(|x| scale * (x - target)).collect();
            accumulate(grads, nodes, *a, g);
        }
        Op::External { x, grad } => {
            let g = grad.data().iter().map(|v| v * gout[0]).collect();
            accumulate(grads, nodes, *x, g);
        }
        Op::Dropout { x, mask } => {
            let g = gout.iter().zip(mask).map(|(g, m)| g * m).collect();
            accumulate(grads, nodes, *x, g);
        }
    }
}
