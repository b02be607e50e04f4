//! U-net 1 on the image, U-net 2 on `[image, p1]`, trained in a four-stage
//! curriculum, plus ensemble inference over several cascades.

use std::path::Path;

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};
use styleseg_nn::{Checkpoint, Tensor};

use crate::config::{AugmentConfig, SegmenterConfig};
use crate::error::{Error, Result};
use crate::segmenter::loss::SegLossWeights;
use crate::segmenter::train::{concat_channels, fit, sample_f64, stack_images, FitConfig, LossCurve, Sample};
use crate::segmenter::unet::{UNet, UNetArch, UNetNorm};
use crate::seed::child_seed;
use crate::volume::{LabelMap, ProbMap, Volume, NUM_CLASSES};

pub const CHECKPOINT_KIND: &str = "cascade";

/// The four curriculum steps, in order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurriculumStage {
    Unet1Pretrain,
    Unet1Finetune,
    Unet2Pretrain,
    Unet2Finetune,
}

impl CurriculumStage {
    pub const ALL: [CurriculumStage; 4] = [
        CurriculumStage::Unet1Pretrain,
        CurriculumStage::Unet1Finetune,
        CurriculumStage::Unet2Pretrain,
        CurriculumStage::Unet2Finetune,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CurriculumStage::Unet1Pretrain => "unet1_pretrain",
            CurriculumStage::Unet1Finetune => "unet1_finetune",
            CurriculumStage::Unet2Pretrain => "unet2_pretrain",
            CurriculumStage::Unet2Finetune => "unet2_finetune",
        }
    }

    pub fn is_finetune(self) -> bool {
        matches!(self, CurriculumStage::Unet1Finetune | CurriculumStage::Unet2Finetune)
    }
}

pub fn unet_arch(cfg: &SegmenterConfig, in_channels: usize) -> UNetArch {
    UNetArch {
        in_channels,
        base_width: cfg.base_width,
        depth: cfg.depth,
        dropout: cfg.dropout as f32,
        norm: UNetNorm::Batch,
    }
}

pub fn loss_weights(cfg: &SegmenterConfig) -> SegLossWeights {
    SegLossWeights {
        omega: cfg.class_weights,
        lambda: cfg.lambda,
        edge_norm: cfg.edge_norm,
    }
}

/// Training settings of one curriculum stage.
pub fn stage_fit_config(cfg: &SegmenterConfig, augment: &AugmentConfig, stage: CurriculumStage, seed: u64) -> FitConfig {
    let (lr, epochs) = if stage.is_finetune() {
        (cfg.lr_finetune, cfg.epochs_finetune)
    } else {
        (cfg.lr_initial, cfg.epochs_pretrain)
    };
    FitConfig {
        epochs,
        batch_size: cfg.batch_size,
        lr,
        weight_decay: cfg.weight_decay,
        loss: loss_weights(cfg),
        augment: augment.clone(),
        remap_knots: 0,
        seed: child_seed(seed, stage.name()),
    }
}

#[derive(Clone, Debug)]
pub struct CascadeModel {
    pub unet1: UNet,
    pub unet2: UNet,
}

#[derive(Serialize, Deserialize, PartialEq)]
struct CascadeHeader {
    unet1: UNetArch,
    unet2: UNetArch,
}

impl CascadeModel {
    pub fn new(cfg: &SegmenterConfig, seed: u64) -> Self {
        Self {
            unet1: UNet::new(unet_arch(cfg, 1), child_seed(seed, "unet1/init")),
            unet2: UNet::new(unet_arch(cfg, 1 + NUM_CLASSES), child_seed(seed, "unet2/init")),
        }
    }

    /// Runs one curriculum stage in place. Stages 3 and 4 read U-net 1 but
    /// never update it.
    pub fn train_stage(&mut self, stage: CurriculumStage, samples: &[Sample], fit_cfg: &FitConfig) -> Result<LossCurve> {
        match stage {
            CurriculumStage::Unet1Pretrain | CurriculumStage::Unet1Finetune => fit(&mut self.unet1, samples, None, fit_cfg, stage.name()),
            CurriculumStage::Unet2Pretrain | CurriculumStage::Unet2Finetune => {
                fit(&mut self.unet2, samples, Some(&self.unet1), fit_cfg, stage.name())
            }
        }
    }

    /// Inference-mode `(p1, p2)` for a batch `[N, 1, H, W]`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        if x.shape().len() != 4 || x.shape()[1] != 1 {
            return Err(Error::Shape(format!("cascade expects [N, 1, H, W], got {:?}", x.shape())));
        }
        let p1 = self.unet1.predict(x)?;
        let p2 = self.unet2.predict(&concat_channels(x, &p1))?;
        Ok((p1, p2))
    }

    /// `(p1, p2)` for every slice of `v`, `batch` slices at a time.
    pub fn predict_volume(&self, v: &Volume, batch: usize) -> Result<(ProbMap, ProbMap)> {
        let slices: Vec<_> = (0..v.num_slices()).map(|z| v.slice(z).to_owned()).collect();
        let mut p1s: Vec<Array3<f32>> = Vec::with_capacity(slices.len());
        let mut p2s: Vec<Array3<f32>> = Vec::with_capacity(slices.len());
        for chunk in slices.chunks(batch.max(1)) {
            let refs: Vec<_> = chunk.iter().collect();
            let (p1, p2) = self.forward(&stack_images(&refs))?;
            for s in 0..chunk.len() {
                p1s.push(sample_f64(&p1, s).mapv(|v| v as f32));
                p2s.push(sample_f64(&p2, s).mapv(|v| v as f32));
            }
        }
        Ok((ProbMap::from_slices(&p1s)?, ProbMap::from_slices(&p2s)?))
    }

    fn header(&self) -> CascadeHeader {
        CascadeHeader {
            unet1: self.unet1.arch.clone(),
            unet2: self.unet2.arch.clone(),
        }
    }

    pub fn same_config(&self, other: &CascadeModel) -> bool {
        self.header() == other.header()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let arch = serde_json::to_value(self.header()).expect("header serializes");
        Checkpoint::new(CHECKPOINT_KIND, arch)
            .with_store("unet1", &self.unet1.store)
            .with_store("unet2", &self.unet2.store)
            .save(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let h: CascadeHeader = serde_json::from_value(ck.arch.clone())
            .map_err(|e| Error::Validation(format!("{}: cascade header: {e}", path.display())))?;
        ck.expect(CHECKPOINT_KIND, &ck.arch)?;
        if h.unet2.in_channels != h.unet1.in_channels + NUM_CLASSES {
            return Err(Error::Validation(format!(
                "{}: U-net 2 takes {} channels, expected {}",
                path.display(),
                h.unet2.in_channels,
                h.unet1.in_channels + NUM_CLASSES
            )));
        }
        let mut unet1 = UNet::new(h.unet1, 0);
        let mut unet2 = UNet::new(h.unet2, 0);
        ck.restore("unet1", &mut unet1.store)?;
        ck.restore("unet2", &mut unet2.store)?;
        Ok(Self { unet1, unet2 })
    }
}

/// Mean of the members' `p2` maps and its argmax (ties to the lower class).
pub fn ensemble_predict(models: &[CascadeModel], v: &Volume, batch: usize) -> Result<(ProbMap, LabelMap)> {
    let first = models
        .first()
        .ok_or_else(|| Error::Validation("ensemble needs at least one model".into()))?;
    if let Some(i) = models.iter().position(|m| !m.same_config(first)) {
        return Err(Error::config("ensemble", format!("member {i} has a different architecture from member 0")));
    }
    let maps = models
        .iter()
        .map(|m| m.predict_volume(v, batch).map(|(_, p2)| p2))
        .collect::<Result<Vec<_>>>()?;
    let mean = mean_probs(&maps)?;
    let labels = mean.argmax();
    Ok((mean, labels))
}

/// Element-wise mean accumulated in `f64`; a mean of identical maps
/// reproduces them exactly.
pub fn mean_probs(maps: &[ProbMap]) -> Result<ProbMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Validation("mean of zero probability maps".into()))?;
    let mut acc: Array4<f64> = first.probs().mapv(|v| v as f64);
    for m in &maps[1..] {
        if m.probs().dim() != acc.dim() {
            return Err(Error::Shape("probability maps differ in extent".into()));
        }
        acc.zip_mut_with(m.probs(), |a, b| *a += *b as f64);
    }
    let n = maps.len() as f64;
    ProbMap::new(acc.mapv(|v| (v / n) as f32))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    use crate::volume::{Modality, Spacing};

    fn small_cfg() -> SegmenterConfig {
        SegmenterConfig {
            base_width: 4,
            depth: 2,
            batch_size: 2,
            epochs_pretrain: 1,
            epochs_finetune: 1,
            ..SegmenterConfig::default()
        }
    }

    fn volume(seed: usize) -> Volume {
        let x = Array3::from_shape_fn((2, 8, 8), |(z, i, j)| (((z + seed) * 31 + i * 7 + j * 3) % 11) as f32 / 5.0 - 1.0);
        Volume::new(x, Spacing::new(1.25, 1.25, 10.0), Modality::Target).unwrap()
    }

    fn samples() -> Vec<Sample> {
        (0..4)
            .map(|k| Sample {
                image: ndarray::Array2::from_shape_fn((8, 8), |(i, j)| ((i * j + k) % 5) as f32 - 2.0),
                label: ndarray::Array2::from_shape_fn((8, 8), |(i, j)| (((i / 2) + (j / 3) + k) % 4) as u8),
            })
            .collect()
    }

    #[test]
    fn shapes_and_channel_count() {
        let m = CascadeModel::new(&small_cfg(), 1);
        assert_eq!(m.unet2.arch.in_channels, 5);
        let (p1, p2) = m.predict_volume(&volume(0), 2).unwrap();
        assert_eq!(p1.dim(), (2, 8, 8));
        assert_eq!(p2.dim(), (2, 8, 8));
        assert!(m.forward(&Tensor::zeros(&[1, 2, 8, 8])).is_err());
    }

    #[test]
    fn frozen_unet1_is_unchanged_by_stages_3_and_4() {
        let cfg = small_cfg();
        let mut m = CascadeModel::new(&cfg, 2);
        let aug = AugmentConfig::default();
        m.train_stage(CurriculumStage::Unet1Pretrain, &samples(), &stage_fit_config(&cfg, &aug, CurriculumStage::Unet1Pretrain, 3))
            .unwrap();
        let before = m.unet1.store.clone();
        let u2_before = m.unet2.store.clone();
        for stage in [CurriculumStage::Unet2Pretrain, CurriculumStage::Unet2Finetune] {
            m.train_stage(stage, &samples(), &stage_fit_config(&cfg, &aug, stage, 3)).unwrap();
        }
        assert!(m.unet1.store.same_values(&before));
        assert!(!m.unet2.store.same_values(&u2_before));
    }

    #[test]
    fn unet2_ignores_image_when_its_weights_are_zeroed() {
        let mut m = CascadeModel::new(&small_cfg(), 4);
        let id = m.unet2.store.id_of("down0.0.conv.weight").unwrap();
        let w = m.unet2.store.get_mut(id);
        let (o, i) = (w.shape()[0], w.shape()[1]);
        let k = w.len() / (o * i);
        for oc in 0..o {
            for t in 0..k {
                w.data_mut()[oc * i * k + t] = 0.0;
            }
        }
        let x1 = stack_images(&[&volume(0).slice(0).to_owned()]);
        let x2 = stack_images(&[&volume(5).slice(1).to_owned()]);
        assert_ne!(x1.data(), x2.data());
        let p1 = m.unet1.predict(&x1).unwrap();
        let a = m.unet2.predict(&concat_channels(&x1, &p1)).unwrap();
        let b = m.unet2.predict(&concat_channels(&x2, &p1)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn ensemble_contract() {
        let cfg = small_cfg();
        let m = CascadeModel::new(&cfg, 6);
        let v = volume(1);
        let (_, p2) = m.predict_volume(&v, 2).unwrap();
        let (mean, labels) = ensemble_predict(std::slice::from_ref(&m), &v, 2).unwrap();
        assert_eq!(mean, p2);
        assert_eq!(labels, p2.argmax());
        let three = vec![m.clone(), m.clone(), m.clone()];
        let (mean3, labels3) = ensemble_predict(&three, &v, 2).unwrap();
        assert_eq!(mean3, p2);
        assert_eq!(labels3, labels);

        let other = CascadeModel::new(&SegmenterConfig { base_width: 8, ..cfg }, 6);
        assert!(matches!(ensemble_predict(&[m, other], &v, 2), Err(Error::Config { .. })));
        assert!(ensemble_predict(&[], &v, 2).is_err());
    }

    #[test]
    fn two_model_mean_example() {
        let mk = |a: f32, b: f32| {
            let mut p = Array4::zeros((4, 1, 1, 1));
            p[[0, 0, 0, 0]] = a;
            p[[1, 0, 0, 0]] = b;
            ProbMap::new(p).unwrap()
        };
        let mean = mean_probs(&[mk(0.6, 0.4), mk(0.2, 0.8)]).unwrap();
        assert!((mean.probs()[[0, 0, 0, 0]] - 0.4).abs() < 1e-7);
        assert!((mean.probs()[[1, 0, 0, 0]] - 0.6).abs() < 1e-7);
        assert_eq!(mean.argmax().labels()[[0, 0, 0]], 1);
        assert_eq!(mk(0.5, 0.5).argmax().labels()[[0, 0, 0]], 0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = CascadeModel::new(&small_cfg(), 8);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        m.save(&p).unwrap();
        let back = CascadeModel::load(&p).unwrap();
        assert!(back.unet1.store.same_values(&m.unet1.store) && back.unet2.store.same_values(&m.unet2.store));
        m.unet1.to_checkpoint("localizer").save(&p).unwrap();
        assert!(CascadeModel::load(&p).is_err());
    }
}
