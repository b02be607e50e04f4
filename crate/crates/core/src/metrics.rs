//! Dice overlap and average surface distance.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array3, Zip};

use crate::config::SurfaceMode;
use crate::error::{Error, Result};
use crate::io;
use crate::manifest::{DatasetManifest, Split};
use crate::plot;
use crate::volume::{Class, LabelMap, Modality, Spacing};

fn check_shapes(a: &LabelMap, b: &LabelMap) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// `2|P ∩ G| / (|P| + |G|)`; 1.0 when both are empty.
pub fn dice(pred: &LabelMap, gt: &LabelMap, cls: Class) -> Result<f64> {
    check_shapes(pred, gt)?;
    let c = cls as u8;
    let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
    Zip::from(pred.labels()).and(gt.labels()).for_each(|p, g| {
        let (ip, ig) = (*p == c, *g == c);
        np += ip as usize;
        ng += ig as usize;
        inter += (ip && ig) as usize;
    });
    if np + ng == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (np + ng) as f64)
}

/// Foreground voxels with at least one face neighbour outside the mask;
/// voxels on the array border count as having an outside neighbour.
pub fn boundary(mask: &Array3<bool>, mode: SurfaceMode) -> Array3<bool> {
    let (s, h, w) = mask.dim();
    Array3::from_shape_fn((s, h, w), |(z, r, c)| {
        if !mask[[z, r, c]] {
            return false;
        }
        let in_plane = r == 0
            || c == 0
            || r + 1 == h
            || c + 1 == w
            || !mask[[z, r - 1, c]]
            || !mask[[z, r + 1, c]]
            || !mask[[z, r, c - 1]]
            || !mask[[z, r, c + 1]];
        match mode {
            SurfaceMode::Slice2d => in_plane,
            SurfaceMode::Volume3d => in_plane || z == 0 || z + 1 == s || !mask[[z - 1, r, c]] || !mask[[z + 1, r, c]],
        }
    })
}

/// One-dimensional squared distance transform of samples `f` spaced `step`
/// apart: `d[x] = min_q (step (x - q))^2 + f[q]`.
fn edt_1d(f: &[f64], step: f64, d: &mut [f64], v: &mut [usize], zb: &mut [f64]) {
    let n = f.len();
    let w = step * step;
    let mut k = 0usize;
    let Some(q0) = f.iter().position(|x| x.is_finite()) else {
        d.iter_mut().for_each(|x| *x = f64::INFINITY);
        return;
    };
    v[0] = q0;
    zb[0] = f64::NEG_INFINITY;
    zb[1] = f64::INFINITY;
    for q in q0 + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + w * (q * q) as f64) - (f[p] + w * (p * p) as f64)) / (2.0 * w * (q as f64 - p as f64));
            // zb[0] is -inf, so this terminates with k >= 0.
            if s <= zb[k] {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                zb[k] = s;
                zb[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (x, out) in d.iter_mut().enumerate() {
        while zb[k + 1] < x as f64 {
            k += 1;
        }
        let dx = x as f64 - v[k] as f64;
        *out = w * dx * dx + f[v[k]];
    }
}

/// Exact squared Euclidean distance (mm²) from every voxel to the nearest
/// `true` voxel, with anisotropic spacing. All infinite if `seeds` is empty.
pub fn squared_edt(seeds: &Array3<bool>, spacing: Spacing) -> Array3<f64> {
    let (s, h, w) = seeds.dim();
    let mut dist = seeds.mapv(|b| if b { 0.0 } else { f64::INFINITY });
    let n = s.max(h).max(w);
    let (mut f, mut d) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut zb) = (vec![0usize; n], vec![0.0; n + 1]);
    for (axis, len, step) in [(2usize, w, spacing.col), (1, h, spacing.row), (0, s, spacing.slice)] {
        for mut lane in dist.lanes_mut(ndarray::Axis(axis)) {
            for i in 0..len {
                f[i] = lane[i];
            }
            edt_1d(&f[..len], step, &mut d[..len], &mut v[..len], &mut zb[..len + 1]);
            for i in 0..len {
                lane[i] = d[i];
            }
        }
    }
    dist
}

/// Symmetric average surface distance in mm, pooling both boundary sets;
/// `None` when either boundary is empty.
pub fn asd(pred: &LabelMap, gt: &LabelMap, cls: Class, spacing: Spacing, mode: SurfaceMode) -> Result<Option<f64>> {
    check_shapes(pred, gt)?;
    let bp = boundary(&pred.mask(cls), mode);
    let bg = boundary(&gt.mask(cls), mode);
    let np = bp.iter().filter(|b| **b).count();
    let ng = bg.iter().filter(|b| **b).count();
    if np == 0 || ng == 0 {
        return Ok(None);
    }
    let dg = squared_edt(&bg, spacing);
    let dp = squared_edt(&bp, spacing);
    let mut total = 0.0;
    Zip::from(&bp).and(&dg).for_each(|b, d| {
        if *b {
            total += d.sqrt();
        }
    });
    Zip::from(&bg).and(&dp).for_each(|b, d| {
        if *b {
            total += d.sqrt();
        }
    });
    Ok(Some(total / (np + ng) as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub case_id: String,
    /// LV, MYO, RV.
    pub dice: [f64; 3],
    pub asd: [Option<f64>; 3],
}

fn mean_present(v: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v.into_iter().flatten() {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

impl CaseResult {
    pub fn compute(case_id: &str, pred: &LabelMap, gt: &LabelMap, spacing: Spacing, mode: SurfaceMode) -> Result<Self> {
        let mut dice_v = [0.0; 3];
        let mut asd_v = [None; 3];
        for (i, cls) in Class::FOREGROUND.into_iter().enumerate() {
            dice_v[i] = dice(pred, gt, cls)?;
            asd_v[i] = asd(pred, gt, cls, spacing, mode)?;
        }
        Ok(Self {
            case_id: case_id.to_string(),
            dice: dice_v,
            asd: asd_v,
        })
    }

    pub fn avg_dice(&self) -> f64 {
        self.dice.iter().sum::<f64>() / 3.0
    }

    pub fn avg_asd(&self) -> Option<f64> {
        mean_present(self.asd)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub cases: Vec<CaseResult>,
}

impl EvalReport {
    pub fn mean_dice(&self, i: usize) -> f64 {
        self.cases.iter().map(|c| c.dice[i]).sum::<f64>() / self.cases.len().max(1) as f64
    }

    /// Class mean over cases where the value is present.
    pub fn mean_asd(&self, i: usize) -> Option<f64> {
        mean_present(self.cases.iter().map(|c| c.asd[i]))
    }

    pub fn absent_asd(&self, i: usize) -> usize {
        self.cases.iter().filter(|c| c.asd[i].is_none()).count()
    }

    /// Mean of the three class Dice means.
    pub fn avg_dice(&self) -> f64 {
        (0..3).map(|i| self.mean_dice(i)).sum::<f64>() / 3.0
    }

    /// Mean of the available class ASD means.
    pub fn avg_asd(&self) -> Option<f64> {
        mean_present((0..3).map(|i| self.mean_asd(i)))
    }

    /// `case_id,class,dice,asd_mm` with one row per case and class plus an
    /// AVG row per case; absent distances are written as `NA`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("case_id,class,dice,asd_mm\n");
        let fmt = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.6}"));
        for c in &self.cases {
            for (i, cls) in Class::FOREGROUND.iter().enumerate() {
                let _ = writeln!(s, "{},{},{:.6},{}", c.case_id, cls.name(), c.dice[i], fmt(c.asd[i]));
            }
            let _ = writeln!(s, "{},AVG,{:.6},{}", c.case_id, c.avg_dice(), fmt(c.avg_asd()));
        }
        s
    }

    /// Class means, AVG and the count of absent distances.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("class,mean_dice,mean_asd_mm,asd_absent\n");
        let fmt = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.6}"));
        for (i, cls) in Class::FOREGROUND.iter().enumerate() {
            let _ = writeln!(s, "{},{:.6},{},{}", cls.name(), self.mean_dice(i), fmt(self.mean_asd(i)), self.absent_asd(i));
        }
        let absent: usize = (0..3).map(|i| self.absent_asd(i)).sum();
        let _ = writeln!(s, "AVG,{:.6},{},{}", self.avg_dice(), fmt(self.avg_asd()), absent);
        s
    }

    /// Writes `cases.csv`, `summary.csv` and the Dice/ASD plots to `out`.
    pub fn write(&self, out: &Path, title: &str) -> Result<()> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let write = |name: &str, text: String| {
            let p = out.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        write("cases.csv", self.to_csv())?;
        write("summary.csv", self.summary_csv())?;
        let names = ["LV", "MYO", "RV"];
        let dice_groups: Vec<(String, Vec<f64>)> = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.to_string(), self.cases.iter().map(|c| c.dice[i]).collect()))
            .collect();
        write("dice_box.svg", plot::box_plot(&format!("{title}: Dice"), &dice_groups, Some((0.0, 1.0))))?;
        let asd_groups: Vec<(String, Vec<f64>)> = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.to_string(), self.cases.iter().filter_map(|c| c.asd[i]).collect()))
            .collect();
        write("asd_box.svg", plot::box_plot(&format!("{title}: ASD (mm)"), &asd_groups, None))
    }
}

/// Scores every labelled `(split, modality)` case of `manifest` against the
/// prediction `pred_dir/<case_id>.raw`.
pub fn evaluate_split(
    pred_dir: &Path,
    manifest: &DatasetManifest,
    split: Split,
    modality: Modality,
    mode: SurfaceMode,
) -> Result<EvalReport> {
    let mut cases = Vec::new();
    for r in manifest.select(split, modality) {
        let (vol, gt) = manifest.load_pair(r)?;
        let path = pred_dir.join(format!("{}.raw", r.case_id));
        if !path.exists() {
            return Err(Error::MissingArtifact {
                stage: format!("prediction for case {}", r.case_id),
                path,
            });
        }
        let pred = io::load_labelmap(&path)?;
        cases.push(CaseResult::compute(&r.case_id, &pred, &gt, vol.spacing(), mode)?);
    }
    Ok(EvalReport { cases })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(s: usize, h: usize, w: usize, cells: &[(usize, usize, usize, u8)]) -> LabelMap {
        let mut a = Array3::zeros((s, h, w));
        for &(z, r, c, v) in cells {
            a[[z, r, c]] = v;
        }
        LabelMap::new(a).unwrap()
    }

    #[test]
    fn dice_examples() {
        let p = map(1, 2, 2, &[(0, 0, 0, 1), (0, 0, 1, 1)]);
        let g = map(1, 2, 2, &[(0, 0, 1, 1), (0, 1, 1, 1)]);
        assert_eq!(dice(&p, &g, Class::Lv).unwrap(), 0.5);
        assert_eq!(dice(&p, &p, Class::Lv).unwrap(), 1.0);
        assert_eq!(dice(&p, &g, Class::Rv).unwrap(), 1.0);
        assert!(dice(&p, &map(1, 2, 3, &[]), Class::Lv).is_err());
    }

    #[test]
    fn asd_examples() {
        let sp = Spacing::new(1.25, 1.25, 10.0);
        let p = map(1, 5, 5, &[(0, 2, 2, 3)]);
        let g = map(1, 5, 5, &[(0, 2, 3, 3)]);
        let d = asd(&p, &g, Class::Rv, sp, SurfaceMode::Slice2d).unwrap().unwrap();
        assert!((d - 1.25).abs() < 1e-12);
        assert_eq!(asd(&p, &p, Class::Rv, sp, SurfaceMode::Slice2d).unwrap(), Some(0.0));
        let empty = map(1, 5, 5, &[]);
        assert_eq!(asd(&empty, &g, Class::Rv, sp, SurfaceMode::Slice2d).unwrap(), None);
    }

    #[test]
    fn edt_matches_brute_force() {
        let seeds = Array3::from_shape_fn((3, 7, 9), |(z, r, c)| (z * 31 + r * 7 + c * 13) % 17 == 0);
        let sp = Spacing::new(1.3, 0.7, 4.0);
        let d = squared_edt(&seeds, sp);
        for ((z, r, c), v) in d.indexed_iter() {
            let mut best = f64::INFINITY;
            for ((z2, r2, c2), s) in seeds.indexed_iter() {
                if *s {
                    let dz = (z as f64 - z2 as f64) * sp.slice;
                    let dr = (r as f64 - r2 as f64) * sp.row;
                    let dc = (c as f64 - c2 as f64) * sp.col;
                    best = best.min(dz * dz + dr * dr + dc * dc);
                }
            }
            assert!((v - best).abs() < 1e-9, "{v} vs {best} at {z},{r},{c}");
        }
    }

    #[test]
    fn report_means_and_csv() {
        let mk = |id: &str, d: f64| CaseResult {
            case_id: id.into(),
            dice: [d, 0.5, 0.6],
            asd: [Some(1.0), None, Some(2.0)],
        };
        let rep = EvalReport {
            cases: vec![mk("a", 0.8), mk("b", 0.9)],
        };
        assert!((rep.mean_dice(0) - 0.85).abs() < 1e-12);
        assert_eq!(rep.mean_asd(1), None);
        assert_eq!(rep.absent_asd(1), 2);
        let avg = (rep.mean_dice(0) + rep.mean_dice(1) + rep.mean_dice(2)) / 3.0;
        assert_eq!(rep.avg_dice(), avg);
        assert_eq!(rep.avg_asd(), Some(1.5));
        let csv = rep.to_csv();
        assert!(csv.starts_with("case_id,class,dice,asd_mm\na,LV,0.800000,1.000000\na,MYO,0.500000,NA\n"));
    }
}
