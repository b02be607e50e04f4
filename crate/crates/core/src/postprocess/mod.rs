//! Slice-wise dense CRF refinement followed by hierarchical 3D morphology.

pub mod crf;
pub mod morph;

use crate::config::{CrfParams, MorphParams};
use crate::error::{Error, Result};
use crate::volume::{LabelMap, ProbMap, Volume};

pub use crf::{crf_refine, crf_refine_f32};
pub use morph::morph_refine;

/// Applies `crf_refine` to every slice of `p` with the matching image slice.
pub fn crf_volume(p: &ProbMap, image: &Volume, params: &CrfParams) -> Result<ProbMap> {
    if p.dim() != image.dim() {
        return Err(Error::Shape(format!("probabilities {:?} vs image {:?}", p.dim(), image.dim())));
    }
    let slices = (0..image.num_slices())
        .map(|z| crf_refine_f32(p.slice(z), image.slice(z), params))
        .collect::<Result<Vec<_>>>()?;
    ProbMap::from_slices(&slices)
}

/// CRF, per-pixel argmax, then morphology.
pub fn postprocess(p: &ProbMap, image: &Volume, crf: &CrfParams, morph: &MorphParams) -> Result<LabelMap> {
    let refined = crf_volume(p, image, crf)?;
    Ok(morph_refine(&refined.argmax(), morph))
}

/// Fraction of pixels whose argmax changed between two maps.
pub fn changed_fraction(a: &LabelMap, b: &LabelMap) -> f64 {
    let n = a.labels().len() as f64;
    let diff = a.labels().iter().zip(b.labels().iter()).filter(|(x, y)| x != y).count();
    diff as f64 / n
}
