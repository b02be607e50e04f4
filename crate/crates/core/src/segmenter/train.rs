//! Mini-batch training of a [`UNet`] on 2D slices with the composite loss.

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use styleseg_nn::{Adam, AdamConfig, Graph, Tensor};

use crate::config::AugmentConfig;
use crate::error::{Error, Result};
use crate::seed::{child_rng, child_seed};
use crate::segmenter::augment::{augment, random_intensity_remap};
use crate::segmenter::loss::{loss_composite, softmax_backward, SegLossWeights};
use crate::segmenter::unet::UNet;
use crate::volume::{LabelMap, Volume, NUM_CLASSES};

/// One labelled 2D training slice.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Array2<f32>,
    pub label: Array2<u8>,
}

/// Splits paired volumes into slices.
pub fn slices_of(pairs: &[(Volume, LabelMap)]) -> Vec<Sample> {
    pairs
        .iter()
        .flat_map(|(v, l)| {
            (0..v.num_slices()).map(move |z| Sample {
                image: v.slice(z).to_owned(),
                label: l.slice(z).to_owned(),
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub loss: SegLossWeights,
    pub augment: AugmentConfig,
    /// Interior knots of the random intensity remapping; 0 disables it.
    pub remap_knots: usize,
    pub seed: u64,
}

/// Per-epoch mean training loss.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCurve {
    pub stage: String,
    pub epoch_loss: Vec<f64>,
}

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss\n");
        for (i, l) in self.epoch_loss.iter().enumerate() {
            s.push_str(&format!("{},{:.8}\n", i + 1, l));
        }
        s
    }
}

/// Stacks single-channel slices into `[N, 1, H, W]`.
pub fn stack_images(images: &[&Array2<f32>]) -> Tensor {
    let (h, w) = images[0].dim();
    let mut data = Vec::with_capacity(images.len() * h * w);
    for im in images {
        data.extend(im.iter());
    }
    Tensor::new(&[images.len(), 1, h, w], data)
}

/// Concatenates per-sample channel blocks `[N, Ca, H, W]` and `[N, Cb, H, W]`.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, ca, h, w) = a.dims4();
    let (nb, cb, hb, wb) = b.dims4();
    assert_eq!((n, h, w), (nb, hb, wb));
    let plane = h * w;
    let mut data = Vec::with_capacity(n * (ca + cb) * plane);
    for s in 0..n {
        data.extend_from_slice(&a.data()[s * ca * plane..(s + 1) * ca * plane]);
        data.extend_from_slice(&b.data()[s * cb * plane..(s + 1) * cb * plane]);
    }
    Tensor::new(&[n, ca + cb, h, w], data)
}

/// Sample `s` of a `[N, C, H, W]` tensor as `f64` `[C, H, W]`.
pub fn sample_f64(t: &Tensor, s: usize) -> Array3<f64> {
    let (_, c, h, w) = t.dims4();
    let off = s * c * h * w;
    Array3::from_shape_fn((c, h, w), |(k, i, j)| t.data()[off + (k * h + i) * w + j] as f64)
}

/// Loss over a batch of probabilities (mean over samples) and its gradient
/// with respect to the logits.
pub fn batch_loss(probs: &Tensor, labels: &[&Array2<u8>], w: &SegLossWeights) -> Result<(f64, Tensor)> {
    let (n, c, h, wd) = probs.dims4();
    assert_eq!(c, NUM_CLASSES);
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(probs.len());
    for (s, y) in labels.iter().enumerate() {
        let p = sample_f64(probs, s);
        let (l, g) = loss_composite(p.view(), y.view(), w)?;
        total += l / n as f64;
        let gz = softmax_backward(p.view(), g.view());
        grad.extend(gz.iter().map(|v| (*v / n as f64) as f32));
    }
    Ok((total, Tensor::new(&[n, c, h, wd], grad)))
}

/// Frozen network whose probabilities are appended as extra input channels.
pub type Prior<'a> = Option<&'a UNet>;

/// Builds the network input for a batch of images.
pub fn network_input(images: &[&Array2<f32>], prior: Prior<'_>) -> Result<Tensor> {
    let x = stack_images(images);
    match prior {
        None => Ok(x),
        Some(p1) => {
            let probs = p1.predict(&x)?;
            Ok(concat_channels(&x, &probs))
        }
    }
}

/// Trains `net` in place. With `prior`, the input is the image concatenated
/// with the prior network's probabilities (the second cascade stage).
pub fn fit(net: &mut UNet, samples: &[Sample], prior: Prior<'_>, cfg: &FitConfig, stage: &str) -> Result<LossCurve> {
    if samples.is_empty() {
        return Err(Error::Validation(format!("{stage}: empty training set")));
    }
    let mut opt = Adam::new(
        &net.store,
        AdamConfig {
            lr: cfg.lr as f32,
            weight_decay: cfg.weight_decay as f32,
            ..AdamConfig::default()
        },
    );
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut curve = LossCurve {
        stage: stage.to_string(),
        epoch_loss: Vec::with_capacity(cfg.epochs),
    };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut child_rng(cfg.seed, &format!("shuffle/{epoch}")));
        let mut sum = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let aug: Vec<(Array2<f32>, Array2<u8>)> = chunk
                .iter()
                .map(|&i| {
                    let s = &samples[i];
                    let seed = child_seed(cfg.seed, &format!("aug/{epoch}/{i}"));
                    let (mut x, y) = augment(&s.image, &s.label, &cfg.augment, seed);
                    random_intensity_remap(&mut x, cfg.remap_knots, seed);
                    (x, y)
                })
                .collect();
            let images: Vec<&Array2<f32>> = aug.iter().map(|(x, _)| x).collect();
            let labels: Vec<&Array2<u8>> = aug.iter().map(|(_, y)| y).collect();
            let input = network_input(&images, prior)?;

            let g = Graph::train(child_seed(cfg.seed, &format!("dropout/{epoch}/{b}")));
            let x = g.constant(input);
            let z = net.logits(&g, x)?;
            let p = g.softmax_channels(z);
            let (loss, dz) = batch_loss(&g.value(p), &labels, &cfg.loss)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    stage: stage.to_string(),
                    msg: format!("non-finite loss {loss} at epoch {} batch {b}", epoch + 1),
                });
            }
            let l = g.external_scalar(z, loss as f32, dz);
            let grads = g.backward(l);
            opt.step(&mut net.store, &grads);
            g.apply_buffer_updates(&mut net.store);
            sum += loss;
            batches += 1;
        }
        let mean = sum / batches as f64;
        log::info!("{stage}: epoch {}/{} loss {mean:.5}", epoch + 1, cfg.epochs);
        curve.epoch_loss.push(mean);
    }
    Ok(curve)
}

/// Inference-mode probabilities for a volume, slice batches of `batch`.
pub fn predict_volume(net: &UNet, prior: Prior<'_>, v: &Volume, batch: usize) -> Result<Vec<Array3<f32>>> {
    let mut out = Vec::with_capacity(v.num_slices());
    let slices: Vec<Array2<f32>> = (0..v.num_slices()).map(|z| v.slice(z).to_owned()).collect();
    for chunk in slices.chunks(batch.max(1)) {
        let refs: Vec<&Array2<f32>> = chunk.iter().collect();
        let probs = net.predict(&network_input(&refs, prior)?)?;
        for s in 0..chunk.len() {
            out.push(sample_f64(&probs, s).mapv(|v| v as f32));
        }
    }
    Ok(out)
}

