//! Raw little-endian payload plus JSON sidecar.
//!
//! `case.raw` holds the voxels (`float32` or `uint8`, C order, slice-major)
//! and `case.json` holds `{dims, spacing, modality, dtype}`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelMap, Modality, ProbMap, Spacing, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Float32,
    Uint8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub dims: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing: Option<Spacing>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality: Option<Modality>,
    pub dtype: DType,
}

/// Sidecar path for a payload path (`x.raw` -> `x.json`).
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn write_pair(path: &Path, sidecar: &Sidecar, payload: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, payload).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_vec_pretty(sidecar).expect("sidecar serializes");
    fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

fn read_pair(path: &Path, dtype: DType) -> Result<(Sidecar, Vec<u8>)> {
    let side = sidecar_path(path);
    let text = fs::read(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: Sidecar = serde_json::from_slice(&text).map_err(|e| Error::format(&side, e.to_string()))?;
    if sidecar.dtype != dtype {
        return Err(Error::format(&side, format!("dtype {:?}, expected {dtype:?}", sidecar.dtype)));
    }
    let payload = fs::read(path).map_err(|e| Error::io(path, e))?;
    let width = match dtype {
        DType::Float32 => 4,
        DType::Uint8 => 1,
    };
    let expected = sidecar.dims.iter().product::<usize>() * width;
    if payload.len() != expected {
        return Err(Error::format(
            path,
            format!("payload has {} bytes, sidecar dims {:?} imply {expected}", payload.len(), sidecar.dims),
        ));
    }
    Ok((sidecar, payload))
}

fn dims3(path: &Path, dims: &[usize]) -> Result<(usize, usize, usize)> {
    match dims {
        [s, h, w] => Ok((*s, *h, *w)),
        _ => Err(Error::format(path, format!("expected 3 dims, sidecar has {dims:?}"))),
    }
}

fn f32_bytes(values: impl Iterator<Item = f32>) -> Vec<u8> {
    values.flat_map(|v| v.to_le_bytes()).collect()
}

fn bytes_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    let (s, h, w) = v.dim();
    let sidecar = Sidecar {
        dims: vec![s, h, w],
        spacing: Some(v.spacing()),
        modality: Some(v.modality()),
        dtype: DType::Float32,
    };
    write_pair(path, &sidecar, &f32_bytes(v.voxels().iter().copied()))
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let (sidecar, payload) = read_pair(path, DType::Float32)?;
    let dim = dims3(path, &sidecar.dims)?;
    let spacing = sidecar
        .spacing
        .ok_or_else(|| Error::format(sidecar_path(path), "volume sidecar lacks spacing"))?;
    let modality = sidecar
        .modality
        .ok_or_else(|| Error::format(sidecar_path(path), "volume sidecar lacks modality"))?;
    let voxels = Array3::from_shape_vec(dim, bytes_f32(&payload)).expect("length checked");
    Volume::new(voxels, spacing, modality)
}

pub fn save_labelmap(l: &LabelMap, path: &Path) -> Result<()> {
    let (s, h, w) = l.dim();
    let sidecar = Sidecar {
        dims: vec![s, h, w],
        spacing: None,
        modality: None,
        dtype: DType::Uint8,
    };
    let payload: Vec<u8> = l.labels().iter().copied().collect();
    write_pair(path, &sidecar, &payload)
}

pub fn load_labelmap(path: &Path) -> Result<LabelMap> {
    let (sidecar, payload) = read_pair(path, DType::Uint8)?;
    let dim = dims3(path, &sidecar.dims)?;
    let labels = Array3::from_shape_vec(dim, payload).expect("length checked");
    LabelMap::new(labels)
}

pub fn save_probmap(p: &ProbMap, path: &Path) -> Result<()> {
    let sidecar = Sidecar {
        dims: p.probs().shape().to_vec(),
        spacing: None,
        modality: None,
        dtype: DType::Float32,
    };
    write_pair(path, &sidecar, &f32_bytes(p.probs().iter().copied()))
}

pub fn load_probmap(path: &Path) -> Result<ProbMap> {
    let (sidecar, payload) = read_pair(path, DType::Float32)?;
    let dim = match sidecar.dims.as_slice() {
        [c, s, h, w] => (*c, *s, *h, *w),
        d => return Err(Error::format(path, format!("expected 4 dims, sidecar has {d:?}"))),
    };
    let probs = Array4::from_shape_vec(dim, bytes_f32(&payload)).expect("length checked");
    ProbMap::new(probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn zero_volume_round_trip() {
        let dir = tmp();
        let path = dir.path().join("z.raw");
        let v = Volume::new(Array3::zeros((1, 4, 4)), Spacing::new(1.0, 1.0, 1.0), Modality::Source).unwrap();
        save_volume(&v, &path).unwrap();
        assert_eq!(load_volume(&path).unwrap(), v);
    }

    #[test]
    fn sidecar_records_spacing_and_payload_length() {
        let dir = tmp();
        let path = dir.path().join("v.raw");
        let vox = Array3::from_shape_fn((3, 5, 7), |(z, y, x)| (z * 35 + y * 7 + x) as f32 * 0.5);
        let v = Volume::new(vox, Spacing::new(1.25, 1.25, 10.0), Modality::Target).unwrap();
        save_volume(&v, &path).unwrap();
        let side: serde_json::Value =
            serde_json::from_slice(&std::fs::read(sidecar_path(&path)).unwrap()).unwrap();
        assert_eq!(side["spacing"], serde_json::json!([1.25, 1.25, 10.0]));
        assert_eq!(side["dims"], serde_json::json!([3, 5, 7]));
        assert_eq!(side["modality"], "target");
        assert_eq!(side["dtype"], "float32");
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 3 * 5 * 7 * 4);
    }

    #[test]
    fn labelmap_payload_and_validation() {
        let dir = tmp();
        let path = dir.path().join("l.raw");
        let l = LabelMap::zeros((1, 192, 192));
        save_labelmap(&l, &path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 36864);
        assert_eq!(load_labelmap(&path).unwrap(), l);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[100] = 4;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_labelmap(&path), Err(Error::Validation(_))));
    }

    #[test]
    fn sidecar_mismatch_and_non_finite_rejected() {
        let dir = tmp();
        let path = dir.path().join("v.raw");
        let v = Volume::new(Array3::zeros((2, 3, 3)), Spacing::new(1.0, 1.0, 1.0), Modality::Source).unwrap();
        save_volume(&v, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_volume(&path), Err(Error::Format { .. })));

        let mut bytes = f32_bytes(std::iter::repeat(0.0).take(18));
        bytes[0..4].copy_from_slice(&f32::INFINITY.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_volume(&path), Err(Error::Validation(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn random_round_trips_are_bit_exact(
            s in 1usize..4, h in 1usize..9, w in 1usize..9,
            seed in any::<u64>(),
            row in 0.1f64..5.0, slice in 0.5f64..12.0,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let vox = Array3::from_shape_fn((s, h, w), |_| rng.gen_range(-1e6f32..1e6));
            let labels = Array3::from_shape_fn((s, h, w), |_| rng.gen_range(0u8..4));
            let v = Volume::new(vox, Spacing::new(row, row * 1.5, slice), Modality::SynthTarget).unwrap();
            let l = LabelMap::new(labels).unwrap();
            let dir = tmp();
            let vp = dir.path().join("v.raw");
            let lp = dir.path().join("l.raw");
            save_volume(&v, &vp).unwrap();
            save_labelmap(&l, &lp).unwrap();
            let back = load_volume(&vp).unwrap();
            prop_assert_eq!(back.spacing(), v.spacing());
            prop_assert!(back.voxels().iter().zip(v.voxels()).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert_eq!(back.modality(), v.modality());
            prop_assert_eq!(load_labelmap(&lp).unwrap(), l);
        }
    }
}
