//! Procedural two-modality cardiac phantom.
//!
//! Anatomy is a stack of nested ellipses drawn in millimetres (LV cavity,
//! myocardial ring, RV crescent) inside a body ellipse; a modality style then
//! paints tissue intensities, an optional scar analog, a smooth bias field and
//! noise. Geometry and style are independent, so the same case rendered in
//! both styles has the same labels.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{PhantomSpec, SplitCounts, StyleParams};
use crate::error::{Error, Result};
use crate::io;
use crate::manifest::{DatasetManifest, Record, Split};
use crate::seed::{child_rng, child_seed};
use crate::volume::{Class, LabelMap, Modality, Spacing, Volume};

#[derive(Clone, Copy, Debug, PartialEq)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn new(cx: f64, cy: f64, a: f64, b: f64, theta: f64) -> Self {
        Self {
            cx,
            cy,
            a,
            b,
            cos: theta.cos(),
            sin: theta.sin(),
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2) < 1.0
    }

    /// Point on the ellipse scaled by `s` at parametric angle `phi`.
    fn point(&self, phi: f64, s: f64) -> (f64, f64) {
        let u = self.a * s * phi.cos();
        let v = self.b * s * phi.sin();
        (
            self.cx + u * self.cos - v * self.sin,
            self.cy + u * self.sin + v * self.cos,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
struct SliceAnatomy {
    lv: Ellipse,
    myo: Ellipse,
    rv: Ellipse,
}

impl SliceAnatomy {
    fn class_at(&self, x: f64, y: f64) -> Class {
        if self.lv.contains(x, y) {
            Class::Lv
        } else if self.myo.contains(x, y) {
            Class::Myo
        } else if self.rv.contains(x, y) {
            Class::Rv
        } else {
            Class::Bg
        }
    }
}

/// Style-independent anatomy of one case, in millimetres.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseGeometry {
    fov_mm: f64,
    slice_thickness_mm: f64,
    slices: Vec<SliceAnatomy>,
    body: Ellipse,
    organ: Ellipse,
    /// Angle around the ring and spatial width (mm) of each scar patch.
    scar_patches: Vec<(f64, f64)>,
    /// Scar is rendered when this uniform draw falls below the style's
    /// scar probability.
    scar_draw: f64,
    bias_coeffs: [f64; 5],
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

/// Largest distance from the heart's bounding centre to any heart point.
fn heart_half_extent(a_outer: f64, rv: f64) -> f64 {
    (a_outer + rv / 2.0).max(1.5 * rv)
}

impl CaseGeometry {
    pub fn sample(spec: &PhantomSpec, case_seed: u64) -> Result<Self> {
        spec.validate()?;
        let g = &spec.geometry;
        let fov = spec.fov_mm();
        let margin = 2.0;
        let worst = g.center_jitter_mm
            + heart_half_extent(g.lv_radius_mm[1] + g.myo_thickness_mm[1], g.rv_extent_mm[1]);
        if worst > fov / 2.0 - margin {
            return Err(Error::Validation(format!(
                "phantom geometry reaches {:.1} mm from the centre but the field of view is {fov:.1} mm",
                worst + margin
            )));
        }
        let mut rng = child_rng(case_seed, "geometry");
        let theta = rng.gen_range(-1.0..=1.0) * g.max_rotation_rad;
        let a0 = uniform(&mut rng, g.lv_radius_mm);
        let aspect = uniform(&mut rng, g.lv_aspect);
        let t = uniform(&mut rng, g.myo_thickness_mm);
        let rv0 = uniform(&mut rng, g.rv_extent_mm);
        let jr = g.center_jitter_mm * rng.gen::<f64>().sqrt();
        let jphi = rng.gen_range(0.0..2.0 * PI);
        let drift = (rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6));

        let (cos, sin) = (theta.cos(), theta.sin());
        let heart_cx = fov / 2.0 + jr * jphi.cos();
        let heart_cy = fov / 2.0 + jr * jphi.sin();
        // The RV sits on the -u side, so shift the LV toward +u to centre the heart.
        let lv_cx = heart_cx + cos * rv0 / 2.0;
        let lv_cy = heart_cy + sin * rv0 / 2.0;

        let n = spec.slices;
        let slices = (0..n)
            .map(|k| {
                let s = if n > 1 { k as f64 / (n - 1) as f64 } else { 0.0 };
                let f = 1.0 - (1.0 - g.apex_scale) * s.powf(1.5);
                let cx = lv_cx + drift.0 * k as f64;
                let cy = lv_cy + drift.1 * k as f64;
                let a = a0 * f;
                let b = a0 * aspect * f;
                let (ao, bo) = (a + t, b + t);
                let ext = rv0 * f * f;
                let off = 0.5 * ao;
                SliceAnatomy {
                    lv: Ellipse::new(cx, cy, a, b, theta),
                    myo: Ellipse::new(cx, cy, ao, bo, theta),
                    rv: Ellipse::new(cx - cos * off, cy - sin * off, off + ext, bo, theta),
                }
            })
            .collect();

        let [ba, bb] = g.body_semi_axes_mm;
        let body = Ellipse::new(
            fov / 2.0,
            fov / 2.0,
            ba * rng.gen_range(0.95..1.05),
            bb * rng.gen_range(0.95..1.05),
            rng.gen_range(-0.15..0.15),
        );
        let organ_r = rng.gen_range(9.0..14.0);
        let organ_phi = theta + rng.gen_range(0.3..1.2);
        let organ_d = a0 + t + organ_r + rng.gen_range(3.0..7.0);
        let organ = Ellipse::new(
            lv_cx + organ_d * organ_phi.cos(),
            lv_cy + organ_d * organ_phi.sin(),
            organ_r,
            organ_r * rng.gen_range(0.6..0.9),
            rng.gen_range(0.0..PI),
        );

        let mut scar_rng = child_rng(case_seed, "scar");
        let scar_draw = scar_rng.gen::<f64>();
        let n_patches = scar_rng.gen_range(1..=3);
        let scar_patches = (0..n_patches)
            .map(|_| (scar_rng.gen_range(0.0..2.0 * PI), scar_rng.gen_range(3.0..6.0)))
            .collect();

        let mut bias_rng = child_rng(case_seed, "bias");
        let mut bias_coeffs = [0.0f64; 5];
        for c in bias_coeffs.iter_mut() {
            *c = bias_rng.gen_range(-1.0..1.0);
        }
        let l1: f64 = bias_coeffs.iter().map(|c| c.abs()).sum::<f64>().max(1e-12);
        bias_coeffs.iter_mut().for_each(|c| *c /= l1);

        Ok(Self {
            fov_mm: fov,
            slice_thickness_mm: spec.slice_thickness_mm,
            slices,
            body,
            organ,
            scar_patches,
            scar_draw,
            bias_coeffs,
        })
    }

    /// Pixel grid size for an in-plane spacing.
    pub fn grid_size(&self, spacing_mm: f64) -> usize {
        (self.fov_mm / spacing_mm).round().max(1.0) as usize
    }

    pub fn labels(&self, spacing_mm: f64) -> LabelMap {
        let n = self.grid_size(spacing_mm);
        let labels = Array3::from_shape_fn((self.slices.len(), n, n), |(z, r, c)| {
            let (x, y) = ((c as f64 + 0.5) * spacing_mm, (r as f64 + 0.5) * spacing_mm);
            self.slices[z].class_at(x, y) as u8
        });
        LabelMap::new(labels).expect("classes are in range")
    }

    /// Multiplicative bias in `[1 - amp, 1 + amp]` at a point.
    fn bias(&self, x: f64, y: f64, amp: f64) -> f64 {
        let u = 2.0 * x / self.fov_mm - 1.0;
        let v = 2.0 * y / self.fov_mm - 1.0;
        let basis = [u, v, u * v, u * u, v * v];
        let p: f64 = basis.iter().zip(&self.bias_coeffs).map(|(b, c)| b * c).sum();
        1.0 + amp * p
    }

    fn scar_weight(&self, z: usize, x: f64, y: f64) -> f64 {
        let s = &self.slices[z];
        let mid = (s.lv.a + s.myo.a) / (2.0 * s.myo.a);
        self.scar_patches
            .iter()
            .map(|&(phi, w)| {
                let (px, py) = s.myo.point(phi, mid);
                let d2 = (x - px).powi(2) + (y - py).powi(2);
                (-d2 / (2.0 * w * w)).exp()
            })
            .fold(0.0, f64::max)
    }

    pub fn has_scar(&self, style: &StyleParams) -> bool {
        self.scar_draw < style.scar_probability
    }

    /// Noise-free intensities followed by additive Gaussian noise drawn from
    /// `noise_seed`, clipped to `[0, 1]`.
    pub fn render(&self, style: &StyleParams, modality: Modality, noise_seed: u64) -> Volume {
        let sp = style.spacing_mm;
        let n = self.grid_size(sp);
        let scar = self.has_scar(style);
        let mut rng = child_rng(noise_seed, "noise");
        let noise = Normal::new(0.0, style.noise_sigma.max(0.0)).expect("sigma is finite");
        let mut vox = Array3::<f32>::zeros((self.slices.len(), n, n));
        for ((z, r, c), out) in vox.indexed_iter_mut() {
            let (x, y) = ((c as f64 + 0.5) * sp, (r as f64 + 0.5) * sp);
            let base = match self.slices[z].class_at(x, y) {
                Class::Lv => style.lv,
                Class::Rv => style.rv,
                Class::Myo if scar => {
                    let w = self.scar_weight(z, x, y);
                    style.myo + (style.scar_intensity - style.myo) * w
                }
                Class::Myo => style.myo,
                Class::Bg if self.organ.contains(x, y) && self.body.contains(x, y) => style.organ,
                Class::Bg if self.body.contains(x, y) => style.body,
                Class::Bg => style.air,
            };
            let v = base * self.bias(x, y, style.bias_amplitude) + noise.sample(&mut rng);
            *out = v.clamp(0.0, 1.0) as f32;
        }
        let spacing = Spacing::isotropic_in_plane(sp, self.slice_thickness_mm);
        Volume::new(vox, spacing, modality).expect("rendered volume is valid")
    }
}

/// Generates one case in the given modality's style.
pub fn generate_phantom_case(spec: &PhantomSpec, modality: Modality, case_seed: u64) -> Result<(Volume, LabelMap)> {
    let geom = CaseGeometry::sample(spec, case_seed)?;
    let style = match modality {
        Modality::Source => &spec.source_style,
        Modality::Target | Modality::SynthTarget => &spec.target_style,
    };
    let vol = geom.render(style, modality, case_seed);
    let labels = geom.labels(style.spacing_mm);
    Ok((vol, labels))
}

const SPLITS: [Split; 4] = [Split::TranslatorTrain, Split::Train, Split::Val, Split::Test];

fn split_count(c: &SplitCounts, s: Split) -> usize {
    match s {
        Split::TranslatorTrain => c.translator_train,
        Split::Train => c.train,
        Split::Val => c.val,
        Split::Test => c.test,
    }
}

fn split_tag(s: Split) -> &'static str {
    match s {
        Split::TranslatorTrain => "pool",
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

/// Writes the whole corpus under `out` and returns its manifest (also saved
/// as `out/manifest.json`). Translator-pool cases are written without labels.
pub fn generate_corpus(spec: &PhantomSpec, seed: u64, out: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let mut manifest = DatasetManifest::new(out);
    for (modality, counts, tag) in [
        (Modality::Source, &spec.counts.source, "src"),
        (Modality::Target, &spec.counts.target, "tgt"),
    ] {
        for split in SPLITS {
            for i in 0..split_count(counts, split) {
                let case_id = format!("{tag}_{}_{i:03}", split_tag(split));
                let case_seed = child_seed(seed, &case_id);
                let (vol, lab) = generate_phantom_case(spec, modality, case_seed)?;
                let image = Path::new("images").join(format!("{case_id}.raw"));
                io::save_volume(&vol, &out.join(&image))?;
                let label = if split == Split::TranslatorTrain {
                    None
                } else {
                    let p = Path::new("labels").join(format!("{case_id}.raw"));
                    io::save_labelmap(&lab, &out.join(&p))?;
                    Some(p)
                };
                manifest.records.push(Record {
                    case_id,
                    image,
                    label,
                    modality,
                    split,
                });
            }
        }
    }
    manifest.save(&out.join("manifest.json"))?;
    Ok(manifest)
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_statistic(a: &[f32], b: &[f32]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f32::total_cmp);
    b.sort_by(f32::total_cmp);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

/// Intensities of all non-background voxels.
pub fn cardiac_intensities(v: &Volume, l: &LabelMap) -> Vec<f32> {
    v.voxels()
        .iter()
        .zip(l.labels().iter())
        .filter(|(_, c)| **c != Class::Bg as u8)
        .map(|(x, _)| *x)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> PhantomSpec {
        PhantomSpec::default()
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_phantom_case(&spec(), Modality::Target, 42).unwrap();
        let b = generate_phantom_case(&spec(), Modality::Target, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom_case(&spec(), Modality::Target, 43).unwrap();
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn mid_slices_have_all_classes_and_enclosed_lv() {
        let s = spec();
        for seed in 0..20 {
            let (vol, lab) = generate_phantom_case(&s, Modality::Source, seed).unwrap();
            assert_eq!(vol.dim(), lab.dim());
            assert!(lab.labels().iter().all(|v| *v < 4));
            let (n, h, w) = lab.dim();
            for z in [n / 2 - 1, n / 2] {
                let sl = lab.slice(z);
                for c in Class::ALL {
                    assert!(sl.iter().any(|v| *v == c as u8), "seed {seed} slice {z} lacks {c:?}");
                }
                for r in 0..h {
                    for c in 0..w {
                        if sl[[r, c]] != Class::Lv as u8 {
                            continue;
                        }
                        assert!(r > 0 && c > 0 && r + 1 < h && c + 1 < w);
                        for (dr, dc) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                            let nb = sl[[(r as i64 + dr) as usize, (c as i64 + dc) as usize]];
                            assert!(nb == Class::Lv as u8 || nb == Class::Myo as u8);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn myo_ring_is_at_least_two_pixels_thick() {
        let s = spec();
        for seed in 0..10 {
            let (_, lab) = generate_phantom_case(&s, Modality::Target, seed).unwrap();
            let (n, h, w) = lab.dim();
            for z in 0..n {
                let sl = lab.slice(z);
                for r in 2..h - 2 {
                    for c in 2..w - 2 {
                        if sl[[r, c]] != Class::Lv as u8 {
                            continue;
                        }
                        // A 5-pixel step from any LV pixel cannot reach outside the ring
                        // without crossing at least two MYO pixels.
                        for (dr, dc) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                            let at = |k: i64| sl[[(r as i64 + dr * k) as usize, (c as i64 + dc * k) as usize]];
                            if at(1) == Class::Myo as u8 {
                                assert_eq!(at(2), Class::Myo as u8, "seed {seed} z {z} ({r},{c})");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn anatomy_is_style_invariant() {
        let s = spec();
        let g = CaseGeometry::sample(&s, 9).unwrap();
        let mut same_grid = s.target_style.clone();
        same_grid.spacing_mm = s.source_style.spacing_mm;
        let va = g.render(&s.source_style, Modality::Source, 1);
        let vb = g.render(&same_grid, Modality::Target, 1);
        assert_ne!(va.voxels(), vb.voxels());
        assert_eq!(g.labels(s.source_style.spacing_mm), g.labels(same_grid.spacing_mm));
        let (_, la) = generate_phantom_case(&s, Modality::Source, 9).unwrap();
        assert_eq!(la, g.labels(s.source_style.spacing_mm));
    }

    #[test]
    fn scar_free_myo_variance_is_bounded_by_noise_and_bias() {
        let mut s = spec();
        s.target_style.scar_probability = 0.0;
        let st = &s.target_style;
        for seed in 0..8 {
            let (vol, lab) = generate_phantom_case(&s, Modality::Target, seed).unwrap();
            let vals: Vec<f64> = vol
                .voxels()
                .iter()
                .zip(lab.labels())
                .filter(|(_, c)| **c == Class::Myo as u8)
                .map(|(v, _)| *v as f64)
                .collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            // Noise variance plus the largest variance a bias in
            // [myo(1-A), myo(1+A)] can add, with a sampling allowance on
            // the noise term.
            let sigma2 = st.noise_sigma.powi(2);
            let bound = sigma2 * (1.0 + 4.0 * (2.0 / (n - 1.0)).sqrt()) + (st.myo * st.bias_amplitude).powi(2);
            assert!(var <= bound, "seed {seed}: var {var} > bound {bound}");
        }
        // With scar the same statistic exceeds the bound on some case.
        let mut scarred = spec();
        scarred.target_style.scar_probability = 1.0;
        let (vol, lab) = generate_phantom_case(&scarred, Modality::Target, 0).unwrap();
        let vals: Vec<f64> = vol
            .voxels()
            .iter()
            .zip(lab.labels())
            .filter(|(_, c)| **c == Class::Myo as u8)
            .map(|(v, _)| *v as f64)
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(var > st.noise_sigma.powi(2) + (st.myo * st.bias_amplitude).powi(2));
    }

    #[test]
    fn geometry_that_cannot_fit_is_rejected() {
        let mut s = spec();
        s.image_size = 24;
        assert!(matches!(
            generate_phantom_case(&s, Modality::Source, 0),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn target_grid_is_coarser() {
        let s = spec();
        let (src, _) = generate_phantom_case(&s, Modality::Source, 3).unwrap();
        let (tgt, _) = generate_phantom_case(&s, Modality::Target, 3).unwrap();
        assert_eq!(src.dim(), (6, 64, 64));
        assert_eq!(tgt.dim(), (6, 53, 53));
        assert_eq!(tgt.spacing(), Spacing::new(1.5, 1.5, 10.0));
    }

    #[test]
    fn ks_statistic_basics() {
        assert_eq!(ks_statistic(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(ks_statistic(&[0.0, 0.1], &[0.5, 0.6]), 1.0);
        assert!((ks_statistic(&[0.0, 1.0], &[0.5, 1.5]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn corpus_counts_and_empty_split() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = spec();
        s.counts.source = SplitCounts { translator_train: 2, train: 3, val: 1, test: 0 };
        s.counts.target = SplitCounts { translator_train: 2, train: 0, val: 1, test: 2 };
        let m = generate_corpus(&s, 5, dir.path()).unwrap();
        assert_eq!(m.count(Split::TranslatorTrain, Modality::Source), 2);
        assert_eq!(m.count(Split::Train, Modality::Source), 3);
        assert_eq!(m.count(Split::Train, Modality::Target), 0);
        assert_eq!(m.count(Split::Test, Modality::Target), 2);
        assert!(m.select(Split::TranslatorTrain, Modality::Target).all(|r| r.label.is_none()));
        let back = DatasetManifest::load(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(back.records, m.records);
        let r = back.find("src_train_001").unwrap();
        let (v, l) = back.load_pair(r).unwrap();
        assert_eq!(v.dim(), l.dim());
    }
}
