//! U-net with configurable normalization, used for the segmentation cascade
//! (batch norm) and for the heart localizer (instance norm).

use serde::{Deserialize, Serialize};
use styleseg_nn::{AffineNorm, BatchNorm2d, Checkpoint, Conv2d, Graph, Norm, ParamStore, Tensor, Var};

use crate::error::{Error, Result};
use crate::volume::NUM_CLASSES;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UNetNorm {
    Batch,
    Instance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetArch {
    pub in_channels: usize,
    pub base_width: usize,
    /// Number of 2x poolings.
    pub depth: usize,
    pub dropout: f32,
    pub norm: UNetNorm,
}

impl UNetArch {
    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }
}

#[derive(Clone, Debug)]
struct ConvNorm {
    conv: Conv2d,
    norm: Norm,
}

impl ConvNorm {
    fn new(ps: &mut ParamStore, name: &str, inc: usize, outc: usize, kind: UNetNorm) -> Self {
        let conv = Conv2d::same3(ps, &format!("{name}.conv"), inc, outc, true);
        let norm = match kind {
            UNetNorm::Batch => Norm::Batch(BatchNorm2d::new(ps, &format!("{name}.bn"), outc)),
            UNetNorm::Instance => Norm::Affine(AffineNorm::instance(ps, &format!("{name}.in"), outc)),
        };
        Self { conv, norm }
    }

    fn forward(&self, g: &Graph, ps: &ParamStore, x: Var) -> Var {
        let y = self.conv.forward(g, ps, x);
        let y = self.norm.forward(g, ps, y);
        g.relu(y)
    }
}

#[derive(Clone, Debug)]
struct DoubleConv(ConvNorm, ConvNorm);

impl DoubleConv {
    fn new(ps: &mut ParamStore, name: &str, inc: usize, outc: usize, kind: UNetNorm) -> Self {
        Self(
            ConvNorm::new(ps, &format!("{name}.0"), inc, outc, kind),
            ConvNorm::new(ps, &format!("{name}.1"), outc, outc, kind),
        )
    }

    fn forward(&self, g: &Graph, ps: &ParamStore, x: Var) -> Var {
        let y = self.0.forward(g, ps, x);
        self.1.forward(g, ps, y)
    }
}

#[derive(Clone, Debug)]
struct UpLevel {
    up: ConvNorm,
    block: DoubleConv,
}

/// A 4-class U-net. Parameters live in `store`; the layer structs hold ids.
#[derive(Clone, Debug)]
pub struct UNet {
    pub arch: UNetArch,
    pub store: ParamStore,
    down: Vec<DoubleConv>,
    bottom: DoubleConv,
    up: Vec<UpLevel>,
    head: Conv2d,
}

impl UNet {
    pub fn new(arch: UNetArch, seed: u64) -> Self {
        let mut ps = ParamStore::new(seed);
        let w = |l: usize| arch.base_width << l;
        let mut down = Vec::new();
        let mut inc = arch.in_channels;
        for l in 0..arch.depth {
            down.push(DoubleConv::new(&mut ps, &format!("down{l}"), inc, w(l), arch.norm));
            inc = w(l);
        }
        let bottom = DoubleConv::new(&mut ps, "bottom", inc, w(arch.depth), arch.norm);
        let mut up = Vec::new();
        for l in (0..arch.depth).rev() {
            up.push(UpLevel {
                up: ConvNorm::new(&mut ps, &format!("up{l}.proj"), w(l + 1), w(l), arch.norm),
                block: DoubleConv::new(&mut ps, &format!("up{l}"), 2 * w(l), w(l), arch.norm),
            });
        }
        let head = Conv2d::new(&mut ps, "head", w(0), NUM_CLASSES, 1, 1, 0, styleseg_nn::PadMode::Zero, true);
        Self {
            arch,
            store: ps,
            down,
            bottom,
            up,
            head,
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let m = self.arch.size_multiple();
        if shape.len() != 4 || shape[1] != self.arch.in_channels {
            return Err(Error::Shape(format!(
                "U-net expects [N, {}, H, W] input, got {shape:?}",
                self.arch.in_channels
            )));
        }
        if shape[2] % m != 0 || shape[3] % m != 0 {
            return Err(Error::Shape(format!("U-net input {}x{} is not a multiple of {m}", shape[2], shape[3])));
        }
        Ok(())
    }

    /// Class logits `[N, 4, H, W]`.
    pub fn logits(&self, g: &Graph, x: Var) -> Result<Var> {
        self.check_input(&g.shape(x))?;
        let ps = &self.store;
        let mut skips = Vec::with_capacity(self.arch.depth);
        let mut h = x;
        for block in &self.down {
            h = block.forward(g, ps, h);
            skips.push(h);
            h = g.max_pool2(h);
        }
        h = self.bottom.forward(g, ps, h);
        for level in &self.up {
            let skip = skips.pop().expect("one skip per level");
            let u = level.up.forward(g, ps, g.upsample2(h));
            let cat = g.dropout(g.concat(&[skip, u]), self.arch.dropout);
            h = level.block.forward(g, ps, cat);
        }
        Ok(self.head.forward(g, ps, h))
    }

    /// Per-pixel class probabilities `[N, 4, H, W]`.
    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        let z = self.logits(g, x)?;
        Ok(g.softmax_channels(z))
    }

    /// Inference-mode probabilities for a batch.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let g = Graph::eval();
        let xv = g.constant(x.clone());
        let p = self.forward(&g, xv)?;
        Ok((*g.value(p)).clone())
    }

    pub fn to_checkpoint(&self, kind: &str) -> Checkpoint {
        Checkpoint::new(kind, serde_json::to_value(&self.arch).expect("arch serializes")).with_store("unet", &self.store)
    }

    pub fn from_checkpoint(ck: &Checkpoint, kind: &str) -> Result<Self> {
        let arch: UNetArch = serde_json::from_value(ck.arch.clone())
            .map_err(|e| Error::Validation(format!("checkpoint architecture header: {e}")))?;
        ck.expect(kind, &ck.arch)?;
        let mut net = Self::new(arch, 0);
        ck.restore("unet", &mut net.store)?;
        Ok(net)
    }
}
