//! On-the-fly augmentation of (slice, label) pairs: rotation, scaling and
//! elastic deformation share one coordinate map; gamma touches the image only.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::AugmentConfig;
use crate::seed::child_rng;

/// Drawn parameters of one augmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentParams {
    pub angle_rad: f64,
    pub scale: f64,
    pub gamma: f64,
    /// Per-pixel displacement `(d_row, d_col)` in pixels.
    pub displacement: Option<(Array2<f64>, Array2<f64>)>,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            angle_rad: 0.0,
            scale: 1.0,
            gamma: 1.0,
            displacement: None,
        }
    }

    pub fn sample(cfg: &AugmentConfig, h: usize, w: usize, seed: u64) -> Self {
        if !cfg.enabled {
            return Self::identity();
        }
        let mut rng = child_rng(seed, "augment");
        let angle = cfg.rotation_deg.to_radians();
        let angle_rad = if angle > 0.0 { rng.gen_range(-angle..=angle) } else { 0.0 };
        let uniform = |rng: &mut rand_chacha::ChaCha8Rng, r: [f64; 2]| if r[1] > r[0] { rng.gen_range(r[0]..=r[1]) } else { r[0] };
        let scale = uniform(&mut rng, cfg.scale_range);
        let gamma = uniform(&mut rng, cfg.gamma_range);
        let displacement = (cfg.elastic_alpha > 0.0).then(|| {
            let mut field = || {
                let noise = Array2::from_shape_fn((h, w), |_| rng.sample::<f64, _>(StandardNormal));
                let mut f = gaussian_blur(&noise, cfg.elastic_sigma);
                let sd = (f.iter().map(|v| v * v).sum::<f64>() / f.len() as f64).sqrt();
                if sd > 0.0 {
                    f.mapv_inplace(|v| v * cfg.elastic_alpha / sd);
                }
                f
            };
            let dr = field();
            let dc = field();
            (dr, dc)
        });
        Self {
            angle_rad,
            scale,
            gamma,
            displacement,
        }
    }

    /// Source coordinate sampled by output pixel `(i, j)`: the inverse of a
    /// rotation by `angle_rad` and scaling by `scale` about the slice centre,
    /// plus the elastic displacement.
    pub fn source_coord(&self, i: usize, j: usize, h: usize, w: usize) -> (f64, f64) {
        let (cr, cc) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (dr, dc) = (i as f64 - cr, j as f64 - cc);
        let (s, c) = self.angle_rad.sin_cos();
        let mut r = cr + (c * dr + s * dc) / self.scale;
        let mut q = cc + (-s * dr + c * dc) / self.scale;
        if let Some((fr, fc)) = &self.displacement {
            r += fr[[i, j]];
            q += fc[[i, j]];
        }
        (r, q)
    }
}

/// Separable Gaussian blur with edge replication, truncated at 3 sigma.
pub fn gaussian_blur(a: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return a.clone();
    }
    let rad = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-rad..=rad).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let z: f64 = k.iter().sum();
    let k: Vec<f64> = k.iter().map(|v| v / z).collect();
    let (h, w) = a.dim();
    let pass = |src: &Array2<f64>, along_rows: bool| {
        Array2::from_shape_fn((h, w), |(i, j)| {
            k.iter()
                .enumerate()
                .map(|(t, kv)| {
                    let d = t as isize - rad;
                    if along_rows {
                        kv * src[[(i as isize + d).clamp(0, h as isize - 1) as usize, j]]
                    } else {
                        kv * src[[i, (j as isize + d).clamp(0, w as isize - 1) as usize]]
                    }
                })
                .sum()
        })
    };
    pass(&pass(a, true), false)
}

fn clamp_index(v: isize, n: usize) -> usize {
    v.clamp(0, n as isize - 1) as usize
}

fn bilinear(x: &Array2<f32>, r: f64, c: f64) -> f32 {
    let (h, w) = x.dim();
    let (r0, c0) = (r.floor(), c.floor());
    let (fr, fc) = ((r - r0) as f32, (c - c0) as f32);
    let (r0, c0) = (r0 as isize, c0 as isize);
    let at = |a: isize, b: isize| x[[clamp_index(a, h), clamp_index(b, w)]];
    let top = at(r0, c0) + fc * (at(r0, c0 + 1) - at(r0, c0));
    let bot = at(r0 + 1, c0) + fc * (at(r0 + 1, c0 + 1) - at(r0 + 1, c0));
    top + fr * (bot - top)
}

/// Applies `p` to an image (bilinear) and its label map (nearest), with edge
/// replication outside the slice.
pub fn apply(x: &Array2<f32>, y: &Array2<u8>, p: &AugmentParams) -> (Array2<f32>, Array2<u8>) {
    let (h, w) = x.dim();
    assert_eq!((h, w), y.dim(), "image and label shapes differ");
    let mut xo = Array2::zeros((h, w));
    let mut yo = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let (r, c) = p.source_coord(i, j, h, w);
            xo[[i, j]] = bilinear(x, r, c);
            yo[[i, j]] = y[[clamp_index(r.round() as isize, h), clamp_index(c.round() as isize, w)]];
        }
    }
    if p.gamma != 1.0 {
        let lo = xo.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = xo.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        if hi > lo {
            let g = p.gamma as f32;
            xo.mapv_inplace(|v| lo + (hi - lo) * ((v - lo) / (hi - lo)).powf(g));
        }
    }
    (xo, yo)
}

pub fn augment(x: &Array2<f32>, y: &Array2<u8>, cfg: &AugmentConfig, seed: u64) -> (Array2<f32>, Array2<u8>) {
    if !cfg.enabled {
        return (x.clone(), y.clone());
    }
    let (h, w) = x.dim();
    apply(x, y, &AugmentParams::sample(cfg, h, w, seed))
}

/// Replaces intensities by a random piecewise-linear transfer curve with
/// `knots` interior points (not necessarily monotone), applied after min-max
/// scaling to [0, 1]. Breaks reliance on absolute contrast.
pub fn random_intensity_remap(x: &mut Array2<f32>, knots: usize, seed: u64) {
    if knots == 0 {
        return;
    }
    let lo = x.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if hi <= lo {
        return;
    }
    let mut rng = child_rng(seed, "remap");
    let ys: Vec<f32> = (0..knots + 2).map(|_| rng.gen::<f32>()).collect();
    let seg = (knots + 1) as f32;
    x.mapv_inplace(|v| {
        let t = (v - lo) / (hi - lo) * seg;
        let k = (t.floor() as usize).min(knots);
        let f = t - k as f32;
        ys[k] + f * (ys[k + 1] - ys[k])
    });
}
