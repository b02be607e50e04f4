//! Labelled target-style dataset: each labelled source volume re-rendered
//! with `k` prior style codes, paired with its unmodified label.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::Rng;
use rand_distr::StandardNormal;
use styleseg_nn::Tensor;

use crate::error::{Error, Result};
use crate::io;
use crate::manifest::{DatasetManifest, Record, Split};
use crate::preprocess::normalize_volume;
use crate::seed::child_rng;
use crate::translator::model::{Domain, TranslatorModel};
use crate::translator::train::slice_tensor;
use crate::volume::{Modality, Volume};

/// Draws one style code from `N(0, I)`.
pub fn sample_style(style_dim: usize, seed: u64, name: &str) -> Vec<f32> {
    let mut rng = child_rng(seed, name);
    (0..style_dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

/// Renders every slice of source volume `v` in the target domain with one
/// style code, then z-scores the result.
pub fn synthesize_volume(m: &TranslatorModel, v: &Volume, style: &[f32]) -> Result<Volume> {
    if style.len() != m.arch.style_dim {
        return Err(Error::Shape(format!("style code has {} entries, expected {}", style.len(), m.arch.style_dim)));
    }
    let s = Tensor::new(&[1, style.len()], style.to_vec());
    let (d, h, w) = v.dim();
    let mut out = Array3::zeros((d, h, w));
    for z in 0..d {
        let y = m.translate(&slice_tensor(v.slice(z)), &s, Domain::Source)?;
        for (o, val) in out.index_axis_mut(ndarray::Axis(0), z).iter_mut().zip(y.data()) {
            *o = *val;
        }
    }
    let synth = Volume::new(out, v.spacing(), Modality::SynthTarget)?;
    Ok(normalize_volume(&synth))
}

fn copy_file(from: &Path, to: &Path) -> Result<()> {
    fs::copy(from, to).map(|_| ()).map_err(|e| Error::io(from, e))
}

/// Synthesizes `k` styles for each labelled training source record of
/// `manifest` into `out` (`images/`, `labels/`, `manifest.json`). Style `j` of
/// case `c` is drawn from the child stream `style/c/j` of `seed`. Case ids are
/// `{case}_s{j}`.
pub fn synthesize_dataset(m: &TranslatorModel, manifest: &DatasetManifest, k: usize, seed: u64, out: &Path) -> Result<DatasetManifest> {
    if k == 0 {
        return Err(Error::Validation("styles per image must be at least 1".into()));
    }
    for d in ["images", "labels"] {
        fs::create_dir_all(out.join(d)).map_err(|e| Error::io(out.join(d), e))?;
    }
    let mut result = DatasetManifest::new(out);
    for r in manifest.select(Split::Train, Modality::Source) {
        let label_src = manifest
            .label_path(r)
            .ok_or_else(|| Error::Validation(format!("source case {} has no label", r.case_id)))?;
        let v = manifest.load_image(r)?;
        for j in 0..k {
            let case_id = format!("{}_s{j}", r.case_id);
            let style = sample_style(m.arch.style_dim, seed, &format!("style/{}/{j}", r.case_id));
            let synth = synthesize_volume(m, &v, &style)?;
            let image = PathBuf::from("images").join(format!("{case_id}.raw"));
            io::save_volume(&synth, &out.join(&image))?;
            let label = PathBuf::from("labels").join(format!("{case_id}.raw"));
            copy_file(&label_src, &out.join(&label))?;
            copy_file(&io::sidecar_path(&label_src), &io::sidecar_path(&out.join(&label)))?;
            result.records.push(Record {
                case_id,
                image,
                label: Some(label),
                modality: Modality::SynthTarget,
                split: Split::Train,
            });
        }
        log::debug!("synthesized {k} styles for {}", r.case_id);
    }
    result.save(&out.join("manifest.json"))?;
    Ok(result)
}
