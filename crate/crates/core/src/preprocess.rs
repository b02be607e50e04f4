//! Spatial normalization: in-plane resampling, heart localization, cropping
//! and per-volume intensity normalization.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};
use styleseg_nn::Checkpoint;

use crate::config::{AugmentConfig, LocalizerConfig, PreprocessConfig};
use crate::error::{Error, Result};
use crate::io;
use crate::manifest::{DatasetManifest, Record, Split};
use crate::metrics::dice;
use crate::segmenter::loss::SegLossWeights;
use crate::segmenter::train::{fit, predict_volume, slices_of, FitConfig, LossCurve};
use crate::segmenter::unet::{UNet, UNetArch, UNetNorm};
use crate::volume::{Class, LabelMap, Modality, ProbMap, Spacing, Volume};

pub const STD_FLOOR: f64 = 1e-6;
const LOCALIZER_KIND: &str = "localizer";

/// Output length when resampling `n` samples from spacing `from` to `to`.
pub fn resampled_len(n: usize, from: f64, to: f64) -> usize {
    ((n as f64 * from / to).round() as usize).max(1)
}

/// Continuous source index of every output sample (pixel centres aligned).
pub fn sample_positions(n_in: usize, from: f64, to: f64) -> Vec<f64> {
    let n_out = resampled_len(n_in, from, to);
    (0..n_out)
        .map(|i| ((i as f64 + 0.5) * to / from - 0.5).clamp(0.0, (n_in - 1) as f64))
        .collect()
}

fn check_spacing(target: f64) -> Result<()> {
    if !(target.is_finite() && target > 0.0) {
        return Err(Error::config("preprocess.target_spacing", format!("must be positive, got {target}")));
    }
    Ok(())
}

/// Bilinear in-plane resampling to `target` mm; the slice axis is untouched.
pub fn resample_volume(v: &Volume, target: f64) -> Result<Volume> {
    check_spacing(target)?;
    let sp = v.spacing();
    let (ns, h, w) = v.dim();
    let rows = sample_positions(h, sp.row, target);
    let cols = sample_positions(w, sp.col, target);
    let x = v.voxels();
    let out = Array3::from_shape_fn((ns, rows.len(), cols.len()), |(z, i, j)| {
        let (r, c) = (rows[i], cols[j]);
        let (r0, c0) = (r.floor() as usize, c.floor() as usize);
        let (r1, c1) = ((r0 + 1).min(h - 1), (c0 + 1).min(w - 1));
        let (fr, fc) = ((r - r0 as f64) as f32, (c - c0 as f64) as f32);
        let top = x[[z, r0, c0]] + fc * (x[[z, r0, c1]] - x[[z, r0, c0]]);
        let bot = x[[z, r1, c0]] + fc * (x[[z, r1, c1]] - x[[z, r1, c0]]);
        top + fr * (bot - top)
    });
    Volume::new(out, Spacing::new(target, target, sp.slice), v.modality())
}

/// Nearest-neighbour resampling of labels on the grid of [`resample_volume`].
pub fn resample_labels(l: &LabelMap, spacing: Spacing, target: f64) -> Result<LabelMap> {
    check_spacing(target)?;
    let (ns, h, w) = l.dim();
    let rows = sample_positions(h, spacing.row, target);
    let cols = sample_positions(w, spacing.col, target);
    let y = l.labels();
    let out = Array3::from_shape_fn((ns, rows.len(), cols.len()), |(z, i, j)| {
        y[[z, rows[i].round() as usize, cols[j].round() as usize]]
    });
    LabelMap::new(out)
}

/// A `size x size` window centred at `center` (row, col). Parts outside the
/// image are zero padded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropWindow {
    pub center: (usize, usize),
    pub size: usize,
}

impl CropWindow {
    /// Top-left corner, possibly negative.
    pub fn origin(&self) -> (isize, isize) {
        let half = (self.size / 2) as isize;
        (self.center.0 as isize - half, self.center.1 as isize - half)
    }

    fn source(&self, i: usize, j: usize, h: usize, w: usize) -> Option<(usize, usize)> {
        let (r0, c0) = self.origin();
        let (r, c) = (r0 + i as isize, c0 + j as isize);
        (r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w).then_some((r as usize, c as usize))
    }

    /// Per-pixel flag: does the window pixel fall inside an `h x w` image?
    pub fn inside(&self, h: usize, w: usize) -> Array2<bool> {
        Array2::from_shape_fn((self.size, self.size), |(i, j)| self.source(i, j, h, w).is_some())
    }
}

fn crop3<T: Copy + Default>(a: &Array3<T>, win: &CropWindow) -> Array3<T> {
    let (ns, h, w) = a.dim();
    Array3::from_shape_fn((ns, win.size, win.size), |(z, i, j)| {
        win.source(i, j, h, w).map_or(T::default(), |(r, c)| a[[z, r, c]])
    })
}

pub fn crop_labels(l: &LabelMap, win: &CropWindow) -> LabelMap {
    LabelMap::new(crop3(l.labels(), win)).expect("cropping keeps labels in range")
}

/// Z-score with a standard-deviation floor, over the pixels where `mask`
/// holds; other pixels are set to 0.
fn zscore_masked(a: &mut Array3<f32>, mask: &Array3<bool>) {
    let vals: Vec<f64> = a.iter().zip(mask.iter()).filter(|(_, m)| **m).map(|(v, _)| *v as f64).collect();
    if vals.is_empty() {
        a.fill(0.0);
        return;
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt().max(STD_FLOOR);
    for (v, m) in a.iter_mut().zip(mask.iter()) {
        *v = if *m { ((*v as f64 - mean) / sd) as f32 } else { 0.0 };
    }
}

/// Per-volume z-score over all voxels.
pub fn normalize_volume(v: &Volume) -> Volume {
    let mut x = v.voxels().clone();
    let mask = Array3::from_elem(x.dim(), true);
    zscore_masked(&mut x, &mask);
    Volume::new(x, v.spacing(), v.modality()).expect("normalization keeps voxels finite")
}

/// Crops `v` to `win` and z-scores the in-image part of the crop; padded
/// pixels are 0 (the normalized mean).
pub fn crop_and_normalize(v: &Volume, win: &CropWindow) -> Volume {
    let mut x = crop3(v.voxels(), win);
    let (_, h, w) = v.dim();
    let inside = win.inside(h, w);
    let mask = Array3::from_shape_fn(x.dim(), |(_, i, j)| inside[[i, j]]);
    zscore_masked(&mut x, &mask);
    Volume::new(x, v.spacing(), v.modality()).expect("normalization keeps voxels finite")
}

/// Centre of mass of an aggregated (summed) mask, rounded to the nearest
/// pixel; the image centre when the aggregate is empty.
pub fn crop_center_from_masks(agg: &Array2<u32>) -> (usize, usize) {
    let (h, w) = agg.dim();
    let (mut sr, mut sc, mut n) = (0.0f64, 0.0f64, 0.0f64);
    for ((i, j), c) in agg.indexed_iter() {
        let c = *c as f64;
        sr += c * i as f64;
        sc += c * j as f64;
        n += c;
    }
    if n == 0.0 {
        return (h / 2, w / 2);
    }
    ((sr / n).round() as usize, (sc / n).round() as usize)
}

/// Sum over slices of the per-slice argmax foreground masks.
pub fn aggregate_foreground(p: &ProbMap) -> Array2<u32> {
    let labels = p.argmax();
    labels
        .labels()
        .map(|v| (*v != Class::Bg as u8) as u32)
        .sum_axis(Axis(0))
}

/// Instance-normalized U-net giving rough heart masks on resampled volumes.
#[derive(Clone, Debug)]
pub struct Localizer {
    pub net: UNet,
}

impl Localizer {
    pub fn arch(cfg: &LocalizerConfig) -> UNetArch {
        UNetArch {
            in_channels: 1,
            base_width: cfg.base_width,
            depth: cfg.depth,
            dropout: 0.0,
            norm: UNetNorm::Instance,
        }
    }

    fn pad_to_multiple(v: &Volume, m: usize) -> Volume {
        let (ns, h, w) = v.dim();
        let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        if (ph, pw) == (h, w) {
            return v.clone();
        }
        let mut x = Array3::zeros((ns, ph, pw));
        x.slice_mut(s![.., ..h, ..w]).assign(v.voxels());
        Volume::new(x, v.spacing(), v.modality()).expect("padding keeps voxels finite")
    }

    fn pad_labels(l: &LabelMap, m: usize) -> LabelMap {
        let (ns, h, w) = l.dim();
        let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        let mut y = Array3::zeros((ns, ph, pw));
        y.slice_mut(s![.., ..h, ..w]).assign(l.labels());
        LabelMap::new(y).expect("padding keeps labels in range")
    }

    /// Trains on resampled labelled volumes with plain cross entropy.
    pub fn train(
        pairs: &[(Volume, LabelMap)],
        cfg: &LocalizerConfig,
        augment: &AugmentConfig,
        seed: u64,
    ) -> Result<(Self, LossCurve)> {
        if pairs.is_empty() {
            return Err(Error::Validation("localizer: empty training set".into()));
        }
        let arch = Self::arch(cfg);
        let m = arch.size_multiple();
        let prepared: Vec<(Volume, LabelMap)> = pairs
            .iter()
            .map(|(v, l)| (Self::pad_to_multiple(&normalize_volume(v), m), Self::pad_labels(l, m)))
            .collect();
        let mut net = UNet::new(arch, crate::seed::child_seed(seed, "init"));
        let fc = FitConfig {
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            lr: cfg.lr,
            weight_decay: 0.0,
            loss: SegLossWeights {
                omega: [1.0; 4],
                lambda: 0.0,
                ..SegLossWeights::default()
            },
            augment: augment.clone(),
            remap_knots: cfg.remap_knots,
            seed: crate::seed::child_seed(seed, "fit"),
        };
        let curve = fit(&mut net, &slices_of(&prepared), None, &fc, "localizer")?;
        Ok((Self { net }, curve))
    }

    /// Class probabilities for every slice of a resampled volume.
    pub fn predict(&self, v: &Volume) -> Result<ProbMap> {
        let (_, h, w) = v.dim();
        let padded = Self::pad_to_multiple(&normalize_volume(v), self.net.arch.size_multiple());
        let slices = predict_volume(&self.net, None, &padded, 8)?;
        let cropped: Vec<Array3<f32>> = slices.iter().map(|p| p.slice(s![.., ..h, ..w]).to_owned()).collect();
        ProbMap::from_slices(&cropped)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.net.to_checkpoint(LOCALIZER_KIND).save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self {
            net: UNet::from_checkpoint(&Checkpoint::load(path)?, LOCALIZER_KIND)?,
        })
    }
}

/// Window centred on the aggregated localizer foreground.
pub fn locate_crop(v: &Volume, m: &Localizer, size: usize) -> Result<CropWindow> {
    let p = m.predict(v)?;
    Ok(CropWindow {
        center: crop_center_from_masks(&aggregate_foreground(&p)),
        size,
    })
}

/// Foreground Dice of the localizer's argmax against ground truth.
pub fn localizer_foreground_dice(m: &Localizer, pairs: &[(Volume, LabelMap)]) -> Result<f64> {
    let mut total = 0.0;
    for (v, l) in pairs {
        let pred = m.predict(v)?.argmax();
        let fg = |x: &LabelMap| LabelMap::new(x.labels().mapv(|c| (c != 0) as u8)).expect("binary labels");
        total += dice(&fg(&pred), &fg(l), Class::Lv)?;
    }
    Ok(total / pairs.len().max(1) as f64)
}

/// Result of preprocessing one case.
#[derive(Clone, Debug)]
pub struct Preprocessed {
    pub image: Volume,
    pub label: Option<LabelMap>,
    pub window: CropWindow,
}

pub fn preprocess_case(v: &Volume, label: Option<&LabelMap>, m: &Localizer, cfg: &PreprocessConfig) -> Result<Preprocessed> {
    let rv = resample_volume(v, cfg.target_spacing)?;
    let window = locate_crop(&rv, m, cfg.crop_size)?;
    let label = label
        .map(|l| resample_labels(l, v.spacing(), cfg.target_spacing).map(|rl| crop_labels(&rl, &window)))
        .transpose()?;
    Ok(Preprocessed {
        image: crop_and_normalize(&rv, &window),
        label,
        window,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct WindowRecord {
    case_id: String,
    center: (usize, usize),
    size: usize,
}

/// Preprocesses every record of `manifest` into `out`, writing a manifest
/// with the same case ids, splits and modalities plus `windows.json`.
pub fn preprocess_manifest(manifest: &DatasetManifest, m: &Localizer, cfg: &PreprocessConfig, out: &Path) -> Result<DatasetManifest> {
    for d in ["images", "labels"] {
        fs::create_dir_all(out.join(d)).map_err(|e| Error::io(out.join(d), e))?;
    }
    let mut result = DatasetManifest::new(out);
    let mut windows = Vec::new();
    for r in &manifest.records {
        let v = manifest.load_image(r)?;
        let l = r.label.as_ref().map(|_| manifest.load_label(r)).transpose()?;
        let pp = preprocess_case(&v, l.as_ref(), m, cfg)?;
        let image = PathBuf::from("images").join(format!("{}.raw", r.case_id));
        io::save_volume(&pp.image, &out.join(&image))?;
        let label = match &pp.label {
            Some(l) => {
                let p = PathBuf::from("labels").join(format!("{}.raw", r.case_id));
                io::save_labelmap(l, &out.join(&p))?;
                Some(p)
            }
            None => None,
        };
        windows.push(WindowRecord {
            case_id: r.case_id.clone(),
            center: pp.window.center,
            size: pp.window.size,
        });
        result.records.push(Record {
            case_id: r.case_id.clone(),
            image,
            label,
            modality: r.modality,
            split: r.split,
        });
    }
    let wpath = out.join("windows.json");
    let text = serde_json::to_string_pretty(&windows).expect("windows serialize");
    fs::write(&wpath, text).map_err(|e| Error::io(&wpath, e))?;
    result.save(&out.join("manifest.json"))?;
    Ok(result)
}

/// Resampled labelled pairs of one split and modality.
pub fn resampled_pairs(manifest: &DatasetManifest, split: Split, modality: Modality, target: f64) -> Result<Vec<(Volume, LabelMap)>> {
    manifest
        .select(split, modality)
        .map(|r| {
            let (v, l) = manifest.load_pair(r)?;
            Ok((resample_volume(&v, target)?, resample_labels(&l, v.spacing(), target)?))
        })
        .collect()
}
