//! Parameterized building blocks. Each layer only holds parameter ids; the
//! values live in a [`ParamStore`] and are bound into a [`Graph`] per forward.

use crate::graph::{Graph, NormKind, Var};
use crate::params::{Init, ParamId, ParamStore};
use crate::{PadMode, Tensor};

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub mode: PadMode,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        mode: PadMode,
        bias: bool,
    ) -> Self {
        let fan_in = in_ch * k * k;
        let w = ps.add(&format!("{name}.weight"), &[out_ch, in_ch, k, k], Init::Kaiming { fan_in });
        let b = bias.then(|| ps.add(&format!("{name}.bias"), &[out_ch], Init::Zeros));
        Self { w, b, stride, pad, mode }
    }

    /// Same-size 3x3 convolution with zero padding.
    pub fn same3(ps: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, bias: bool) -> Self {
        Self::new(ps, name, in_ch, out_ch, 3, 1, 1, PadMode::Zero, bias)
    }

    pub fn forward(&self, g: &Graph, ps: &ParamStore, x: Var) -> Var {
        let w = g.param(ps, self.w);
        let b = self.b.map(|b| g.param(ps, b));
        g.conv2d(x, w, b, self.stride, self.pad, self.mode)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = ps.add(&format!("{name}.weight"), &[out_dim, in_dim], Init::Kaiming { fan_in: in_dim });
        let b = ps.add(&format!("{name}.bias"), &[out_dim], Init::Zeros);
        Self { w, b }
    }

    pub fn forward(&self, g: &Graph, ps: &ParamStore, x: Var) -> Var {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        g.linear(x, w, Some(b))
    }
}

/// Batch normalization with running statistics for inference.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f32,
    pub eps: f32,
}

impl BatchNorm2d {
    pub fn new(ps: &mut ParamStore, name: &str, ch: usize) -> Self {
        Self {
            gamma: ps.add(&format!("{name}.gamma"), &[ch], Init::Ones),
            beta: ps.add(&format!("{name}.beta"), &[ch], Init::Zeros),
            running_mean: ps.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[ch])),
            running_var: ps.add_buffer(&format!("{name}.running_var"), Tensor::full(&[ch], 1.0)),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &Graph, ps: &ParamStore, x: Var) -> Var {
        let gamma = g.param(ps, self.gamma);
        let beta = g.param(ps, self.beta);
        if g.is_train() {
            let (xn, mean, var) = g.normalize_with_stats(x, NormKind::Batch, self.eps);
            let shape = g.shape(x);
            let count = (shape[0] * shape[2] * shape[3]) as f32;
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let m = self.momentum;
            let rm = ps.get(self.running_mean).data();
            let rv = ps.get(self.running_var).data();
            let new_mean = rm.iter().zip(&mean).map(|(r, b)| (1.0 - m) * r + m * b).collect();
            let new_var = rv.iter().zip(&var).map(|(r, b)| (1.0 - m) * r + m * b * unbias).collect();
            let ch = mean.len();
            g.record_buffer_update(ps.key(self.running_mean), Tensor::new(&[ch], new_mean));
            g.record_buffer_update(ps.key(self.running_var), Tensor::new(&[ch], new_var));
            g.channel_affine(xn, gamma, beta)
        } else {
            // Fold running statistics into the affine transform.
            let gv = g.value(gamma);
            let bv = g.value(beta);
            let rm = ps.get(self.running_mean).data();
            let rv = ps.get(self.running_var).data();
            let ch = rm.len();
            let mut scale = Vec::with_capacity(ch);
            let mut shift = Vec::with_capacity(ch);
            for c in 0..ch {
                let s = gv.data()[c] / (rv[c] + self.eps).sqrt();
                scale.push(s);
                shift.push(bv.data()[c] - rm[c] * s);
            }
            let s = g.constant(Tensor::new(&[ch], scale));
            let b = g.constant(Tensor::new(&[ch], shift));
            g.channel_affine(x, s, b)
        }
    }
}

/// Instance or layer normalization with a learned per-channel affine.
#[derive(Clone, Debug)]
pub struct AffineNorm {
    pub kind: NormKind,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f32,
}

impl AffineNorm {
    pub fn instance(ps: &mut ParamStore, name: &str, ch: usize) -> Self {
        Self::new(ps, name, ch, NormKind::Instance)
    }

    pub fn layer(ps: &mut ParamStore, name: &str, ch: usize) -> Self {
        Self::new(ps, name, ch, NormKind::Layer)
    }

    fn new(ps: &mut ParamStore, name: &str, ch: usize, kind: NormKind) -> Self {
        Self {
            kind,
            gamma: ps.add(&format!("{name}.gamma"), &[ch], Init::Ones),
            beta: ps.add(&format!("{name}.beta"), &[ch], Init::Zeros),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &Graph, ps: &ParamStore, x: Var) -> Var {
        let xn = g.normalize(x, self.kind, self.eps);
        let gamma = g.param(ps, self.gamma);
        let beta = g.param(ps, self.beta);
        g.channel_affine(xn, gamma, beta)
    }
}

/// Normalization applied after a convolution.
#[derive(Clone, Debug)]
pub enum Norm {
    None,
    Batch(BatchNorm2d),
    Affine(AffineNorm),
}

impl Norm {
    pub fn forward(&self, g: &Graph, ps: &ParamStore, x: Var) -> Var {
        match self {
            Norm::None => x,
            Norm::Batch(bn) => bn.forward(g, ps, x),
            Norm::Affine(n) => n.forward(g, ps, x),
        }
    }
}
