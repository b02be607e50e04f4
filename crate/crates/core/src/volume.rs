//! Image, label and probability volumes shared by every stage.

use ndarray::{Array2, Array3, Array4, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 4;

/// Segmentation classes, in the fixed channel order used everywhere.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
#[repr(u8)]
pub enum Class {
    Bg = 0,
    Lv = 1,
    Myo = 2,
    Rv = 3,
}

impl Class {
    pub const ALL: [Class; 4] = [Class::Bg, Class::Lv, Class::Myo, Class::Rv];
    pub const FOREGROUND: [Class; 3] = [Class::Lv, Class::Myo, Class::Rv];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Class> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Bg => "BG",
            Class::Lv => "LV",
            Class::Myo => "MYO",
            Class::Rv => "RV",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    /// Labelled, bSSFP-like.
    Source,
    /// Unlabelled at training time, LGE-like.
    Target,
    /// Source anatomy rendered in target style by the translator.
    SynthTarget,
}

/// Physical voxel size in millimetres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Spacing {
    pub row: f64,
    pub col: f64,
    pub slice: f64,
}

impl Spacing {
    pub fn new(row: f64, col: f64, slice: f64) -> Self {
        Self { row, col, slice }
    }

    pub fn isotropic_in_plane(in_plane: f64, slice: f64) -> Self {
        Self::new(in_plane, in_plane, slice)
    }

    pub fn is_valid(&self) -> bool {
        [self.row, self.col, self.slice]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self::new(self.row * factor, self.col * factor, self.slice * factor)
    }
}

impl From<[f64; 3]> for Spacing {
    fn from(v: [f64; 3]) -> Self {
        Self::new(v[0], v[1], v[2])
    }
}

impl From<Spacing> for [f64; 3] {
    fn from(s: Spacing) -> Self {
        [s.row, s.col, s.slice]
    }
}

/// A stack of 2D slices (`slices x height x width`) with physical spacing.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    voxels: Array3<f32>,
    spacing: Spacing,
    modality: Modality,
}

impl Volume {
    pub fn new(voxels: Array3<f32>, spacing: Spacing, modality: Modality) -> Result<Self> {
        let (s, h, w) = voxels.dim();
        if s == 0 || h == 0 || w == 0 {
            return Err(Error::Validation(format!("volume has empty extent {:?}", voxels.dim())));
        }
        if !spacing.is_valid() {
            return Err(Error::Validation(format!("non-positive spacing {spacing:?}")));
        }
        if let Some(pos) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite voxel at flat index {pos}")));
        }
        Ok(Self {
            voxels,
            spacing,
            modality,
        })
    }

    pub fn voxels(&self) -> &Array3<f32> {
        &self.voxels
    }

    pub fn into_voxels(self) -> Array3<f32> {
        self.voxels
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn with_modality(mut self, modality: Modality) -> Self {
        self.modality = modality;
        self
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.voxels.dim()
    }

    pub fn num_slices(&self) -> usize {
        self.voxels.len_of(Axis(0))
    }

    pub fn slice(&self, z: usize) -> ArrayView2<'_, f32> {
        self.voxels.index_axis(Axis(0), z)
    }
}

/// Integer class labels with the same extent as their image volume.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    labels: Array3<u8>,
}

impl LabelMap {
    pub fn new(labels: Array3<u8>) -> Result<Self> {
        let (s, h, w) = labels.dim();
        if s == 0 || h == 0 || w == 0 {
            return Err(Error::Validation(format!("label map has empty extent {:?}", labels.dim())));
        }
        if let Some(bad) = labels.iter().find(|v| **v as usize >= NUM_CLASSES) {
            return Err(Error::Validation(format!("label value {bad} outside 0..=3")));
        }
        Ok(Self { labels })
    }

    pub fn zeros(dim: (usize, usize, usize)) -> Self {
        Self {
            labels: Array3::zeros(dim),
        }
    }

    pub fn labels(&self) -> &Array3<u8> {
        &self.labels
    }

    pub fn into_labels(self) -> Array3<u8> {
        self.labels
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.labels.dim()
    }

    pub fn slice(&self, z: usize) -> ArrayView2<'_, u8> {
        self.labels.index_axis(Axis(0), z)
    }

    pub fn mask(&self, class: Class) -> Array3<bool> {
        self.labels.mapv(|v| v == class as u8)
    }

    pub fn count(&self, class: Class) -> usize {
        self.labels.iter().filter(|v| **v == class as u8).count()
    }

    pub fn check_matches(&self, v: &Volume) -> Result<()> {
        if self.dim() != v.dim() {
            return Err(Error::Shape(format!(
                "label map {:?} vs volume {:?}",
                self.dim(),
                v.dim()
            )));
        }
        Ok(())
    }
}

/// Per-class probabilities, `classes x slices x height x width`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    probs: Array4<f32>,
}

pub const PROB_SUM_TOL: f32 = 1e-5;

impl ProbMap {
    pub fn new(probs: Array4<f32>) -> Result<Self> {
        let (c, s, h, w) = probs.dim();
        if c != NUM_CLASSES || s == 0 || h == 0 || w == 0 {
            return Err(Error::Validation(format!("probability map extent {:?}", probs.dim())));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Validation("probability outside [0, 1]".into()));
        }
        let sums = probs.sum_axis(Axis(0));
        if let Some(bad) = sums.iter().find(|v| (**v - 1.0).abs() > PROB_SUM_TOL) {
            return Err(Error::Validation(format!("class probabilities sum to {bad}")));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &Array4<f32> {
        &self.probs
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        let (_, s, h, w) = self.probs.dim();
        (s, h, w)
    }

    /// Per-pixel argmax; ties go to the lower class index.
    pub fn argmax(&self) -> LabelMap {
        let (s, h, w) = self.dim();
        let mut labels = Array3::<u8>::zeros((s, h, w));
        for ((z, y, x), out) in labels.indexed_iter_mut() {
            let mut best = 0;
            for c in 1..NUM_CLASSES {
                if self.probs[[c, z, y, x]] > self.probs[[best, z, y, x]] {
                    best = c;
                }
            }
            *out = best as u8;
        }
        LabelMap { labels }
    }

    /// Element-wise mean of several maps of equal extent.
    pub fn mean(maps: &[ProbMap]) -> Result<ProbMap> {
        let first = maps
            .first()
            .ok_or_else(|| Error::Validation("mean of zero probability maps".into()))?;
        let mut acc = first.probs.mapv(|v| v as f64);
        for m in &maps[1..] {
            if m.probs.dim() != first.probs.dim() {
                return Err(Error::Shape("probability maps differ in extent".into()));
            }
            acc.zip_mut_with(&m.probs, |a, b| *a += *b as f64);
        }
        let n = maps.len() as f64;
        let mut probs = acc.mapv(|v| (v / n) as f32);
        renormalize(&mut probs);
        ProbMap::new(probs)
    }

    /// Probabilities of slice `z`, `classes x height x width`.
    pub fn slice(&self, z: usize) -> ndarray::ArrayView3<'_, f32> {
        self.probs.index_axis(Axis(1), z)
    }

    /// Stacks per-slice `classes x h x w` maps along the slice axis.
    pub fn from_slices(slices: &[Array3<f32>]) -> Result<ProbMap> {
        let views: Vec<_> = slices.iter().map(|s| s.view()).collect();
        let probs = ndarray::stack(Axis(1), &views).map_err(|e| Error::Shape(e.to_string()))?;
        ProbMap::new(probs)
    }
}

/// Rescales each pixel's class vector to sum to one.
pub fn renormalize(probs: &mut Array4<f32>) {
    let (c, s, h, w) = probs.dim();
    for z in 0..s {
        for y in 0..h {
            for x in 0..w {
                let mut sum = 0.0f64;
                for k in 0..c {
                    sum += probs[[k, z, y, x]] as f64;
                }
                for k in 0..c {
                    probs[[k, z, y, x]] = (probs[[k, z, y, x]] as f64 / sum) as f32;
                }
            }
        }
    }
}

/// Binary mask of one class in a 2D label slice.
pub fn class_mask2(labels: ArrayView2<'_, u8>, class: Class) -> Array2<bool> {
    labels.mapv(|v| v == class as u8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_invalid_contents() {
        assert!(Volume::new(Array3::zeros((0, 4, 4)), Spacing::new(1.0, 1.0, 1.0), Modality::Source).is_err());
        assert!(Volume::new(Array3::zeros((1, 4, 4)), Spacing::new(0.0, 1.0, 1.0), Modality::Source).is_err());
        let mut v = Array3::zeros((1, 2, 2));
        v[[0, 1, 1]] = f32::NAN;
        assert!(Volume::new(v, Spacing::new(1.0, 1.0, 1.0), Modality::Source).is_err());
        let mut l = Array3::zeros((1, 2, 2));
        l[[0, 0, 1]] = 4u8;
        assert!(LabelMap::new(l).is_err());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let mut p = Array4::zeros((4, 1, 1, 2));
        p[[1, 0, 0, 0]] = 0.5;
        p[[2, 0, 0, 0]] = 0.5;
        p[[3, 0, 0, 1]] = 1.0;
        let pm = ProbMap::new(p).unwrap();
        assert_eq!(pm.argmax().labels().as_slice().unwrap(), &[1, 3]);
    }

    #[test]
    fn prob_map_validates_normalization() {
        let p = Array4::from_elem((4, 1, 2, 2), 0.3);
        assert!(ProbMap::new(p).is_err());
        let p = Array4::from_elem((4, 1, 2, 2), 0.25);
        assert!(ProbMap::new(p).is_ok());
    }
}
