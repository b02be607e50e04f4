//! Alternating least-squares GAN training of both domains' generators and
//! discriminators.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use styleseg_nn::{Adam, AdamConfig, Graph, Tensor, Var};

use crate::config::{TranslationLossWeights, TranslatorConfig};
use crate::error::{Error, Result};
use crate::segmenter::train::stack_images;
use crate::seed::child_rng;
use crate::translator::kl::kl_with_grad;
use crate::translator::model::{Domain, TranslatorArch, TranslatorModel};
use crate::volume::Volume;

/// Loss terms of one generator/discriminator update (sums over both domains).
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StepLosses {
    pub dis: f64,
    pub gen_gan: f64,
    pub recon_x: f64,
    pub recon_c: f64,
    pub recon_s: f64,
    pub kl: f64,
    pub gen_total: f64,
}

impl StepLosses {
    fn add(&mut self, o: &StepLosses, w: f64) {
        self.dis += w * o.dis;
        self.gen_gan += w * o.gen_gan;
        self.recon_x += w * o.recon_x;
        self.recon_c += w * o.recon_c;
        self.recon_s += w * o.recon_s;
        self.kl += w * o.kl;
        self.gen_total += w * o.gen_total;
    }

    fn all_finite(&self) -> bool {
        [self.dis, self.gen_gan, self.recon_x, self.recon_c, self.recon_s, self.kl, self.gen_total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Interval means of every loss term.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TranslatorLog {
    /// `(last iteration of the interval, mean losses)`.
    pub intervals: Vec<(usize, StepLosses)>,
}

impl TranslatorLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,dis,gen_gan,recon_x,recon_c,recon_s,kl,gen_total\n");
        for (it, l) in &self.intervals {
            s.push_str(&format!(
                "{it},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                l.dis, l.gen_gan, l.recon_x, l.recon_c, l.recon_s, l.kl, l.gen_total
            ));
        }
        s
    }
}

/// Every slice of every volume, as 2D training units.
pub fn slice_pool(volumes: &[Volume]) -> Vec<Array2<f32>> {
    volumes
        .iter()
        .flat_map(|v| (0..v.num_slices()).map(move |z| v.slice(z).to_owned()))
        .collect()
}

fn scalar(g: &Graph, v: Var) -> f64 {
    g.value(v).item() as f64
}

/// KL term on a batch of encoded styles. A single code has no spread, so it
/// falls back to `|s|^2 / 2`, the KL of a unit-variance Gaussian centred on it.
fn kl_term(g: &Graph, s: Var) -> Result<Var> {
    let st = g.value(s);
    let (n, d) = st.dims2();
    if n < 2 {
        let sq = g.mse_const(s, 0.0);
        return Ok(g.scale(sq, 0.5 * d as f32));
    }
    let arr = Array2::from_shape_fn((n, d), |(i, j)| st.data()[i * d + j] as f64);
    let (kl, grad) = kl_with_grad(arr.view())?;
    Ok(g.external_scalar(s, kl as f32, Tensor::new(&[n, d], grad.iter().map(|v| *v as f32).collect())))
}

fn random_styles(rng: &mut impl Rng, n: usize, d: usize) -> Tensor {
    Tensor::new(&[n, d], (0..n * d).map(|_| rng.sample::<f32, _>(StandardNormal)).collect())
}

/// Optimizer state for both parameter groups.
pub struct Trainer {
    pub model: TranslatorModel,
    gen_opt: Adam,
    dis_opt: Adam,
    weights: TranslationLossWeights,
    base_lr: f64,
    lr_step: usize,
    lr_gamma: f64,
    iteration: usize,
}

impl Trainer {
    pub fn new(cfg: &TranslatorConfig, seed: u64) -> Self {
        let model = TranslatorModel::new(TranslatorArch::from(cfg), seed);
        let adam = AdamConfig {
            lr: cfg.lr as f32,
            beta1: cfg.beta1 as f32,
            beta2: cfg.beta2 as f32,
            weight_decay: cfg.weight_decay as f32,
            ..AdamConfig::default()
        };
        Self {
            gen_opt: Adam::new(&model.gen, adam),
            dis_opt: Adam::new(&model.dis, adam),
            model,
            weights: cfg.weights.clone(),
            base_lr: cfg.lr,
            lr_step: cfg.lr_step,
            lr_gamma: cfg.lr_gamma,
            iteration: 0,
        }
    }

    /// One discriminator update followed by one generator update on batches
    /// `xa` (source) and `xb` (target), with prior style samples `sa`, `sb`.
    pub fn step(&mut self, xa: &Tensor, xb: &Tensor, sa: &Tensor, sb: &Tensor) -> Result<StepLosses> {
        let lr = self.base_lr * self.lr_gamma.powi((self.iteration / self.lr_step) as i32);
        self.gen_opt.set_lr(lr as f32);
        self.dis_opt.set_lr(lr as f32);
        self.iteration += 1;
        let m = &self.model;
        m.check_input(xa.shape())?;
        m.check_input(xb.shape())?;
        let w = &self.weights;

        let g = Graph::train(0);
        let (va, vb) = (g.constant(xa.clone()), g.constant(xb.clone()));
        let (vsa, vsb) = (g.constant(sa.clone()), g.constant(sb.clone()));
        let (ca, sa_enc) = (m.g_content(&g, va, Domain::Source), m.g_style(&g, va, Domain::Source));
        let (cb, sb_enc) = (m.g_content(&g, vb, Domain::Target), m.g_style(&g, vb, Domain::Target));
        let xa_rec = m.g_decode(&g, ca, sa_enc, Domain::Source);
        let xb_rec = m.g_decode(&g, cb, sb_enc, Domain::Target);
        let x_ba = m.g_decode(&g, cb, vsa, Domain::Source);
        let x_ab = m.g_decode(&g, ca, vsb, Domain::Target);

        let dis = {
            let gd = Graph::train(0);
            let fake_a = gd.constant((*g.value(x_ba)).clone());
            let fake_b = gd.constant((*g.value(x_ab)).clone());
            let real_a = gd.constant(xa.clone());
            let real_b = gd.constant(xb.clone());
            let terms = [
                gd.mse_const(m.g_discriminate(&gd, fake_a, Domain::Source), 0.0),
                gd.mse_const(m.g_discriminate(&gd, real_a, Domain::Source), 1.0),
                gd.mse_const(m.g_discriminate(&gd, fake_b, Domain::Target), 0.0),
                gd.mse_const(m.g_discriminate(&gd, real_b, Domain::Target), 1.0),
            ];
            let loss = gd.scale(gd.sum_scalars(&terms), w.gan as f32);
            let v = scalar(&gd, loss);
            if v.is_finite() {
                let grads = gd.backward(loss);
                self.dis_opt.step(&mut self.model.dis, &grads);
            }
            v
        };
        let m = &self.model;

        let cb_rec = m.g_content(&g, x_ba, Domain::Source);
        let sa_rec = m.g_style(&g, x_ba, Domain::Source);
        let ca_rec = m.g_content(&g, x_ab, Domain::Target);
        let sb_rec = m.g_style(&g, x_ab, Domain::Target);

        let gan_a = g.mse_const(m.g_discriminate(&g, x_ba, Domain::Source), 1.0);
        let gan_b = g.mse_const(m.g_discriminate(&g, x_ab, Domain::Target), 1.0);
        let gan = g.add(gan_a, gan_b);
        let recon_x = g.add(g.l1(xa_rec, va), g.l1(xb_rec, vb));
        let recon_c = g.add(g.l1(ca_rec, ca), g.l1(cb_rec, cb));
        let recon_s = g.add(g.l1(sa_rec, vsa), g.l1(sb_rec, vsb));
        let kl = g.add(kl_term(&g, sa_enc)?, kl_term(&g, sb_enc)?);
        let total = g.sum_scalars(&[
            g.scale(gan, w.gan as f32),
            g.scale(recon_x, w.recon_x as f32),
            g.scale(recon_c, w.recon_c as f32),
            g.scale(recon_s, w.recon_s as f32),
            g.scale(kl, w.kl as f32),
        ]);
        let losses = StepLosses {
            dis,
            gen_gan: scalar(&g, gan),
            recon_x: scalar(&g, recon_x),
            recon_c: scalar(&g, recon_c),
            recon_s: scalar(&g, recon_s),
            kl: scalar(&g, kl),
            gen_total: scalar(&g, total),
        };
        if !losses.all_finite() {
            return Err(Error::Diverged {
                stage: "translator".into(),
                msg: format!("non-finite loss at iteration {}: {losses:?}", self.iteration),
            });
        }
        let grads = g.backward(total);
        self.gen_opt.step(&mut self.model.gen, &grads);
        Ok(losses)
    }
}

/// Trains a translator on unpaired source and target slices.
pub fn train_translator(source: &[Volume], target: &[Volume], cfg: &TranslatorConfig, seed: u64) -> Result<(TranslatorModel, TranslatorLog)> {
    let pool_a = slice_pool(source);
    let pool_b = slice_pool(target);
    if pool_a.is_empty() || pool_b.is_empty() {
        return Err(Error::Validation("translator training needs source and target slices".into()));
    }
    let mut trainer = Trainer::new(cfg, seed);
    let mut rng = child_rng(seed, "translator/batches");
    let n = cfg.batch_size;
    let mut log = TranslatorLog::default();
    let mut acc = StepLosses::default();
    let mut in_interval = 0usize;
    for it in 1..=cfg.iterations {
        let pick = |rng: &mut rand_chacha::ChaCha8Rng, pool: &[Array2<f32>]| {
            let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..pool.len())).collect();
            let refs: Vec<&Array2<f32>> = idx.iter().map(|&i| &pool[i]).collect();
            stack_images(&refs)
        };
        let xa = pick(&mut rng, &pool_a);
        let xb = pick(&mut rng, &pool_b);
        let sa = random_styles(&mut rng, n, cfg.style_dim);
        let sb = random_styles(&mut rng, n, cfg.style_dim);
        let l = trainer.step(&xa, &xb, &sa, &sb)?;
        acc.add(&l, 1.0);
        in_interval += 1;
        if it % cfg.log_interval == 0 || it == cfg.iterations {
            let mut mean = StepLosses::default();
            mean.add(&acc, 1.0 / in_interval as f64);
            log::info!(
                "translator: iter {it}/{} dis {:.4} gan {:.4} recon_x {:.4} recon_c {:.4} recon_s {:.4} kl {:.4}",
                cfg.iterations,
                mean.dis,
                mean.gen_gan,
                mean.recon_x,
                mean.recon_c,
                mean.recon_s,
                mean.kl
            );
            log.intervals.push((it, mean));
            acc = StepLosses::default();
            in_interval = 0;
        }
    }
    Ok((trainer.model, log))
}

/// Mean per-pixel `|decode(encode(x)) - x|` over all slices, within `domain`.
pub fn reconstruction_l1(m: &TranslatorModel, volumes: &[Volume], domain: Domain) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for x in slice_pool(volumes) {
        let t = stack_images(&[&x]);
        let (c, s) = m.encode(&t, domain)?;
        let y = m.decode(&c, &s, domain)?;
        sum += y.data().iter().zip(t.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>();
        count += t.len();
    }
    if count == 0 {
        return Err(Error::Validation("no slices to reconstruct".into()));
    }
    Ok(sum / count as f64)
}

/// Converts a `[H, W]` view into a `[1, 1, H, W]` tensor.
pub fn slice_tensor(x: ArrayView2<'_, f32>) -> Tensor {
    let (h, w) = x.dim();
    Tensor::new(&[1, 1, h, w], x.iter().copied().collect())
}
