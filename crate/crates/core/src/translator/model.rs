//! Content/style encoders, AdaIN decoder and patch discriminator for each of
//! the two domains.

use serde::{Deserialize, Serialize};
use styleseg_nn::{AffineNorm, Checkpoint, Conv2d, Graph, Linear, NormKind, PadMode, ParamStore, Tensor, Var};

use crate::config::TranslatorConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_KIND: &str = "translator";

/// Which domain's encoder/decoder/discriminator to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub const BOTH: [Domain; 2] = [Domain::Source, Domain::Target];

    fn prefix(self) -> &'static str {
        match self {
            Domain::Source => "a",
            Domain::Target => "b",
        }
    }

    pub fn other(self) -> Domain {
        match self {
            Domain::Source => Domain::Target,
            Domain::Target => Domain::Source,
        }
    }
}

/// Architecture fields of the translator config; stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslatorArch {
    pub dim: usize,
    pub n_downsample: usize,
    pub n_res: usize,
    pub style_dim: usize,
    pub mlp_dim: usize,
    pub style_downsample: usize,
    pub dis_dim: usize,
    pub dis_layers: usize,
    pub pad_mode: PadMode,
}

impl From<&TranslatorConfig> for TranslatorArch {
    fn from(c: &TranslatorConfig) -> Self {
        Self {
            dim: c.dim,
            n_downsample: c.n_downsample,
            n_res: c.n_res,
            style_dim: c.style_dim,
            mlp_dim: c.mlp_dim,
            style_downsample: c.style_downsample,
            dis_dim: c.dis_dim,
            dis_layers: c.dis_layers,
            pad_mode: c.pad_mode,
        }
    }
}

impl TranslatorArch {
    pub fn content_channels(&self) -> usize {
        self.dim << self.n_downsample
    }
}

fn conv(ps: &mut ParamStore, name: &str, inc: usize, outc: usize, k: usize, stride: usize, mode: PadMode) -> Conv2d {
    Conv2d::new(ps, name, inc, outc, k, stride, (k - 1) / 2, mode, true)
}

#[derive(Clone, Debug)]
struct ResBlock {
    c1: Conv2d,
    n1: AffineNorm,
    c2: Conv2d,
    n2: AffineNorm,
}

#[derive(Clone, Debug)]
struct ContentEncoder {
    stem: Conv2d,
    stem_norm: AffineNorm,
    down: Vec<(Conv2d, AffineNorm)>,
    res: Vec<ResBlock>,
}

#[derive(Clone, Debug)]
struct StyleEncoder {
    stem: Conv2d,
    down: Vec<Conv2d>,
    out: Linear,
}

#[derive(Clone, Debug)]
struct Decoder {
    mlp: Vec<Linear>,
    res: Vec<(Conv2d, Conv2d)>,
    up: Vec<(Conv2d, AffineNorm)>,
    out: Conv2d,
}

#[derive(Clone, Debug)]
struct Discriminator {
    layers: Vec<Conv2d>,
    out: Conv2d,
}

#[derive(Clone, Debug)]
struct DomainNets {
    content: ContentEncoder,
    style: StyleEncoder,
    decoder: Decoder,
}

/// Both domains' generators (in `gen`) and discriminators (in `dis`).
#[derive(Clone, Debug)]
pub struct TranslatorModel {
    pub arch: TranslatorArch,
    pub gen: ParamStore,
    pub dis: ParamStore,
    nets: [DomainNets; 2],
    discs: [Discriminator; 2],
}

fn idx(d: Domain) -> usize {
    match d {
        Domain::Source => 0,
        Domain::Target => 1,
    }
}

impl TranslatorModel {
    pub fn new(arch: TranslatorArch, seed: u64) -> Self {
        let mut gen = ParamStore::new(seed);
        let mut dis = ParamStore::new(seed ^ 0x9e37_79b9_7f4a_7c15);
        let nets = Domain::BOTH.map(|d| Self::build_domain(&arch, &mut gen, d.prefix()));
        let discs = Domain::BOTH.map(|d| Self::build_disc(&arch, &mut dis, d.prefix()));
        Self {
            arch,
            gen,
            dis,
            nets,
            discs,
        }
    }

    fn build_domain(a: &TranslatorArch, ps: &mut ParamStore, p: &str) -> DomainNets {
        let m = a.pad_mode;
        let stem = conv(ps, &format!("{p}.enc_c.stem"), 1, a.dim, 7, 1, m);
        let stem_norm = AffineNorm::instance(ps, &format!("{p}.enc_c.stem_in"), a.dim);
        let mut ch = a.dim;
        let mut down = Vec::new();
        for i in 0..a.n_downsample {
            let c = Conv2d::new(ps, &format!("{p}.enc_c.down{i}"), ch, 2 * ch, 4, 2, 1, m, true);
            down.push((c, AffineNorm::instance(ps, &format!("{p}.enc_c.down{i}_in"), 2 * ch)));
            ch *= 2;
        }
        let res = (0..a.n_res)
            .map(|i| ResBlock {
                c1: conv(ps, &format!("{p}.enc_c.res{i}.0"), ch, ch, 3, 1, m),
                n1: AffineNorm::instance(ps, &format!("{p}.enc_c.res{i}.0_in"), ch),
                c2: conv(ps, &format!("{p}.enc_c.res{i}.1"), ch, ch, 3, 1, m),
                n2: AffineNorm::instance(ps, &format!("{p}.enc_c.res{i}.1_in"), ch),
            })
            .collect();
        let content = ContentEncoder {
            stem,
            stem_norm,
            down,
            res,
        };

        let sstem = conv(ps, &format!("{p}.enc_s.stem"), 1, a.dim, 7, 1, m);
        let mut sch = a.dim;
        let mut sdown = Vec::new();
        for i in 0..a.style_downsample {
            let next = if i < 2 { 2 * sch } else { sch };
            sdown.push(Conv2d::new(ps, &format!("{p}.enc_s.down{i}"), sch, next, 4, 2, 1, m, true));
            sch = next;
        }
        let style = StyleEncoder {
            stem: sstem,
            down: sdown,
            out: Linear::new(ps, &format!("{p}.enc_s.out"), sch, a.style_dim),
        };

        let adain_params = 4 * ch * a.n_res;
        let mlp = vec![
            Linear::new(ps, &format!("{p}.dec.mlp0"), a.style_dim, a.mlp_dim),
            Linear::new(ps, &format!("{p}.dec.mlp1"), a.mlp_dim, a.mlp_dim),
            Linear::new(ps, &format!("{p}.dec.mlp2"), a.mlp_dim, adain_params),
        ];
        let dres = (0..a.n_res)
            .map(|i| {
                (
                    conv(ps, &format!("{p}.dec.res{i}.0"), ch, ch, 3, 1, m),
                    conv(ps, &format!("{p}.dec.res{i}.1"), ch, ch, 3, 1, m),
                )
            })
            .collect();
        let mut up = Vec::new();
        for i in 0..a.n_downsample {
            let c = conv(ps, &format!("{p}.dec.up{i}"), ch, ch / 2, 5, 1, m);
            up.push((c, AffineNorm::layer(ps, &format!("{p}.dec.up{i}_ln"), ch / 2)));
            ch /= 2;
        }
        let out = conv(ps, &format!("{p}.dec.out"), ch, 1, 7, 1, m);
        DomainNets {
            content,
            style,
            decoder: Decoder { mlp, res: dres, up, out },
        }
    }

    fn build_disc(a: &TranslatorArch, ps: &mut ParamStore, p: &str) -> Discriminator {
        let mut layers = Vec::new();
        let mut ch = 1;
        let mut next = a.dis_dim;
        for i in 0..a.dis_layers {
            layers.push(Conv2d::new(ps, &format!("{p}.dis.l{i}"), ch, next, 4, 2, 1, a.pad_mode, true));
            ch = next;
            next *= 2;
        }
        Discriminator {
            layers,
            out: Conv2d::new(ps, &format!("{p}.dis.out"), ch, 1, 1, 1, 0, PadMode::Zero, true),
        }
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.arch.n_downsample.max(self.arch.style_downsample).max(self.arch.dis_layers)
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let m = self.size_multiple();
        if shape.len() != 4 || shape[1] != 1 || shape[2] % m != 0 || shape[3] % m != 0 || shape[2] == 0 || shape[3] == 0 {
            return Err(Error::Shape(format!(
                "translator expects [N, 1, H, W] with H, W positive multiples of {m}, got {shape:?}"
            )));
        }
        Ok(())
    }

    pub fn g_content(&self, g: &Graph, x: Var, d: Domain) -> Var {
        let ps = &self.gen;
        let e = &self.nets[idx(d)].content;
        let mut h = g.relu(e.stem_norm.forward(g, ps, e.stem.forward(g, ps, x)));
        for (c, n) in &e.down {
            h = g.relu(n.forward(g, ps, c.forward(g, ps, h)));
        }
        for r in &e.res {
            let y = g.relu(r.n1.forward(g, ps, r.c1.forward(g, ps, h)));
            let y = r.n2.forward(g, ps, r.c2.forward(g, ps, y));
            h = g.add(h, y);
        }
        h
    }

    pub fn g_style(&self, g: &Graph, x: Var, d: Domain) -> Var {
        let ps = &self.gen;
        let e = &self.nets[idx(d)].style;
        let mut h = g.relu(e.stem.forward(g, ps, x));
        for c in &e.down {
            h = g.relu(c.forward(g, ps, h));
        }
        let pooled = g.global_avg_pool(h);
        e.out.forward(g, ps, pooled)
    }

    /// Instance norm followed by a per-sample affine `(1 + gamma) * x + beta`.
    fn adain(g: &Graph, x: Var, params: Var, offset: usize, ch: usize) -> Var {
        let gamma = g.narrow(params, offset, ch);
        let beta = g.narrow(params, offset + ch, ch);
        let n = g.shape(params)[0];
        let ones = g.constant(Tensor::full(&[n, ch], 1.0));
        let xn = g.normalize(x, NormKind::Instance, 1e-5);
        g.channel_affine(xn, g.add(gamma, ones), beta)
    }

    pub fn g_decode(&self, g: &Graph, content: Var, style: Var, d: Domain) -> Var {
        let ps = &self.gen;
        let dec = &self.nets[idx(d)].decoder;
        let mut p = style;
        for (i, l) in dec.mlp.iter().enumerate() {
            p = l.forward(g, ps, p);
            if i + 1 < dec.mlp.len() {
                p = g.relu(p);
            }
        }
        let ch = self.arch.content_channels();
        let mut h = content;
        let mut off = 0;
        for (c1, c2) in &dec.res {
            let y = c1.forward(g, ps, h);
            let y = g.relu(Self::adain(g, y, p, off, ch));
            let y = c2.forward(g, ps, y);
            let y = Self::adain(g, y, p, off + 2 * ch, ch);
            off += 4 * ch;
            h = g.add(h, y);
        }
        for (c, n) in &dec.up {
            h = g.relu(n.forward(g, ps, c.forward(g, ps, g.upsample2(h))));
        }
        dec.out.forward(g, ps, h)
    }

    pub fn g_discriminate(&self, g: &Graph, x: Var, d: Domain) -> Var {
        let ps = &self.dis;
        let disc = &self.discs[idx(d)];
        let mut h = x;
        for l in &disc.layers {
            h = g.leaky_relu(l.forward(g, ps, h), 0.2);
        }
        disc.out.forward(g, ps, h)
    }

    /// Inference-mode `(content, style)` of a batch `[N, 1, H, W]`.
    pub fn encode(&self, x: &Tensor, d: Domain) -> Result<(Tensor, Tensor)> {
        self.check_input(x.shape())?;
        let g = Graph::eval();
        let xv = g.constant(x.clone());
        let c = self.g_content(&g, xv, d);
        let s = self.g_style(&g, xv, d);
        Ok(((*g.value(c)).clone(), (*g.value(s)).clone()))
    }

    /// Inference-mode decoding of content `[N, C, h, w]` with styles `[N, style_dim]`.
    pub fn decode(&self, content: &Tensor, style: &Tensor, d: Domain) -> Result<Tensor> {
        let cs = content.shape();
        let ss = style.shape();
        if cs.len() != 4 || cs[1] != self.arch.content_channels() || ss != [cs[0], self.arch.style_dim] {
            return Err(Error::Shape(format!(
                "decode: content {cs:?} (expected [N, {}, h, w]) with style {ss:?} (expected [N, {}])",
                self.arch.content_channels(),
                self.arch.style_dim
            )));
        }
        let g = Graph::eval();
        let c = g.constant(content.clone());
        let s = g.constant(style.clone());
        let y = self.g_decode(&g, c, s, d);
        Ok((*g.value(y)).clone())
    }

    /// Re-renders `x` from domain `from` with style codes of the other domain.
    pub fn translate(&self, x: &Tensor, style: &Tensor, from: Domain) -> Result<Tensor> {
        let (c, _) = self.encode(x, from)?;
        self.decode(&c, style, from.other())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(CHECKPOINT_KIND, serde_json::to_value(&self.arch).expect("arch serializes"))
            .with_store("gen", &self.gen)
            .with_store("dis", &self.dis)
    }

    /// Loads a checkpoint, failing if its architecture differs from `expected`.
    pub fn from_checkpoint(ck: &Checkpoint, expected: Option<&TranslatorArch>) -> Result<Self> {
        let arch: TranslatorArch = serde_json::from_value(ck.arch.clone())
            .map_err(|e| Error::Validation(format!("translator checkpoint header: {e}")))?;
        let want = serde_json::to_value(expected.unwrap_or(&arch)).expect("arch serializes");
        ck.expect(CHECKPOINT_KIND, &want)?;
        let mut m = Self::new(arch, 0);
        ck.restore("gen", &mut m.gen)?;
        ck.restore("dis", &mut m.dis)?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TranslatorArch {
        TranslatorArch {
            dim: 4,
            n_downsample: 2,
            n_res: 1,
            style_dim: 8,
            mlp_dim: 16,
            style_downsample: 3,
            dis_dim: 4,
            dis_layers: 2,
            pad_mode: PadMode::Reflect,
        }
    }

    fn image(n: usize, h: usize) -> Tensor {
        Tensor::new(&[n, 1, h, h], (0..n * h * h).map(|i| ((i * 7919) % 97) as f32 / 50.0 - 1.0).collect())
    }

    #[test]
    fn default_content_shape() {
        let m = TranslatorModel::new(TranslatorArch::from(&TranslatorConfig::default()), 1);
        let (c, s) = m.encode(&image(1, 64), Domain::Source).unwrap();
        assert_eq!(c.shape(), &[1, 256, 16, 16]);
        assert_eq!(s.shape(), &[1, 8]);
    }

    #[test]
    fn encode_decode_shapes_and_determinism() {
        let m = TranslatorModel::new(small(), 2);
        let x = image(2, 16);
        let (c, s) = m.encode(&x, Domain::Target).unwrap();
        assert_eq!(c.shape(), &[2, 16, 4, 4]);
        let (c2, s2) = m.encode(&x, Domain::Target).unwrap();
        assert_eq!((c.data(), s.data()), (c2.data(), s2.data()));
        let y = m.decode(&c, &s, Domain::Target).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.all_finite());

        let s_other = Tensor::new(&[2, 8], (0..16).map(|i| i as f32 * 0.3 - 2.0).collect());
        let y2 = m.decode(&c, &s_other, Domain::Target).unwrap();
        let diff: f32 = y.data().iter().zip(y2.data()).map(|(a, b)| (a - b).abs()).sum::<f32>() / y.len() as f32;
        assert!(diff > 0.0);
    }

    #[test]
    fn shape_errors() {
        let m = TranslatorModel::new(small(), 2);
        assert!(m.encode(&image(1, 12), Domain::Source).is_err());
        let (c, _) = m.encode(&image(1, 16), Domain::Source).unwrap();
        assert!(m.decode(&c, &Tensor::zeros(&[1, 7]), Domain::Source).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let m = TranslatorModel::new(small(), 5);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ckpt");
        m.to_checkpoint().save(&p).unwrap();
        let ck = Checkpoint::load(&p).unwrap();
        let back = TranslatorModel::from_checkpoint(&ck, Some(&small())).unwrap();
        assert!(back.gen.same_values(&m.gen) && back.dis.same_values(&m.dis));
        let other = TranslatorArch { n_res: 2, ..small() };
        assert!(TranslatorModel::from_checkpoint(&ck, Some(&other)).is_err());
    }
}
