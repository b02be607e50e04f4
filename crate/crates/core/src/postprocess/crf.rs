//! Fully connected CRF over one slice with a Potts model, solved by
//! mean-field iterations.
//!
//! The smoothness kernel `exp(-|Δpos|² / 2σγ²)` is separable and always
//! applied exactly. The appearance kernel
//! `exp(-|Δpos|² / 2σα² - |ΔI|² / 2σβ²)` is applied either as an explicit
//! dense matrix or, approximately, by splatting onto intensity bins, blurring
//! and slicing back.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};

use crate::config::{CrfMethod, CrfParams};
use crate::error::{Error, Result};

pub const UNARY_CLAMP: f64 = 1e-8;
/// Intensity bins per σβ in the approximate path.
const BINS_PER_SIGMA: f64 = 16.0;

fn gauss_table(n: usize, sigma: f64) -> Vec<f64> {
    (0..n).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp()).collect()
}

/// `out = (G_rows ⊗ G_cols) * q` for each channel, with full (untruncated)
/// Gaussian support and no padding beyond the slice.
fn spatial_blur(q: &Array3<f64>, gr: &[f64], gc: &[f64]) -> Array3<f64> {
    let (c, h, w) = q.dim();
    let mut tmp = Array3::zeros((c, h, w));
    for k in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mut s = 0.0;
                for jj in 0..w {
                    s += gc[j.abs_diff(jj)] * q[[k, i, jj]];
                }
                tmp[[k, i, j]] = s;
            }
        }
    }
    let mut out = Array3::zeros((c, h, w));
    for k in 0..c {
        for i in 0..h {
            for ii in 0..h {
                let g = gr[i.abs_diff(ii)];
                for j in 0..w {
                    out[[k, i, j]] += g * tmp[[k, ii, j]];
                }
            }
        }
    }
    out
}

/// Message passing for one kernel: `m_i = sum_{j != i} k(i, j) q_j`.
trait Kernel {
    fn apply(&self, q: &Array3<f64>) -> Array3<f64>;
    /// `sum_{j != i} k(i, j)` per pixel.
    fn row_sums(&self) -> Array2<f64>;
}

struct Smoothness {
    gr: Vec<f64>,
    gc: Vec<f64>,
    h: usize,
    w: usize,
}

impl Smoothness {
    fn new(h: usize, w: usize, sigma: f64) -> Self {
        Self {
            gr: gauss_table(h, sigma),
            gc: gauss_table(w, sigma),
            h,
            w,
        }
    }
}

impl Kernel for Smoothness {
    fn apply(&self, q: &Array3<f64>) -> Array3<f64> {
        // Self weight is g(0)^2 = 1.
        spatial_blur(q, &self.gr, &self.gc) - q
    }

    fn row_sums(&self) -> Array2<f64> {
        let rs: Vec<f64> = (0..self.h).map(|i| (0..self.h).map(|ii| self.gr[i.abs_diff(ii)]).sum()).collect();
        let cs: Vec<f64> = (0..self.w).map(|j| (0..self.w).map(|jj| self.gc[j.abs_diff(jj)]).sum()).collect();
        Array2::from_shape_fn((self.h, self.w), |(i, j)| rs[i] * cs[j] - 1.0)
    }
}

/// Explicit `N x N` appearance kernel with zero diagonal.
struct DenseAppearance {
    k: Vec<f64>,
    h: usize,
    w: usize,
}

impl DenseAppearance {
    fn new(x: ArrayView2<'_, f64>, sa: f64, sb: f64) -> Self {
        let (h, w) = x.dim();
        let n = h * w;
        let gr = gauss_table(h, sa);
        let gc = gauss_table(w, sa);
        let flat: Vec<f64> = x.iter().copied().collect();
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            let (ri, ci) = (i / w, i % w);
            let row = &mut k[i * n..(i + 1) * n];
            for (j, out) in row.iter_mut().enumerate() {
                if j == i {
                    continue;
                }
                let di = flat[i] - flat[j];
                *out = gr[ri.abs_diff(j / w)] * gc[ci.abs_diff(j % w)] * (-di * di / (2.0 * sb * sb)).exp();
            }
        }
        Self { k, h, w }
    }
}

impl Kernel for DenseAppearance {
    fn apply(&self, q: &Array3<f64>) -> Array3<f64> {
        let (c, h, w) = q.dim();
        let n = h * w;
        // q as a (c x n) row-major matrix; out = q * K^T, K symmetric.
        let qs = q.as_standard_layout();
        let mut out = Array3::<f64>::zeros((c, h, w));
        unsafe {
            matrixmultiply::dgemm(
                c,
                n,
                n,
                1.0,
                qs.as_ptr(),
                n as isize,
                1,
                self.k.as_ptr(),
                1,
                n as isize,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        out
    }

    fn row_sums(&self) -> Array2<f64> {
        let n = self.h * self.w;
        Array2::from_shape_fn((self.h, self.w), |(i, j)| {
            let r = (i * self.w + j) * n;
            self.k[r..r + n].iter().sum()
        })
    }
}

/// Appearance kernel approximated on an intensity grid: each pixel splats
/// onto its two nearest bins (linear weights), bins are blurred exactly in
/// space and with a Gaussian across intensity, then sliced back. The
/// approximate self-weight is subtracted so `j != i` still holds.
struct BinnedAppearance {
    lo: Vec<usize>,
    frac: Vec<f64>,
    bins: usize,
    gi: Vec<f64>,
    gr: Vec<f64>,
    gc: Vec<f64>,
    self_w: Vec<f64>,
    h: usize,
    w: usize,
}

impl BinnedAppearance {
    fn new(x: ArrayView2<'_, f64>, sa: f64, sb: f64) -> Self {
        let (h, w) = x.dim();
        let step = sb / BINS_PER_SIGMA;
        let min = x.iter().copied().fold(f64::INFINITY, f64::min);
        let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let bins = ((max - min) / step).floor() as usize + 2;
        let mut lo = Vec::with_capacity(h * w);
        let mut frac = Vec::with_capacity(h * w);
        for v in x.iter() {
            let t = (v - min) / step;
            let b = (t.floor() as usize).min(bins - 2);
            lo.push(b);
            frac.push(t - b as f64);
        }
        let gi: Vec<f64> = (0..bins)
            .map(|d| (-(d as f64 * step).powi(2) / (2.0 * sb * sb)).exp())
            .collect();
        let self_w = frac
            .iter()
            .map(|f| {
                let (a, b) = (1.0 - f, *f);
                a * a + b * b + 2.0 * a * b * gi[1]
            })
            .collect();
        Self {
            lo,
            frac,
            bins,
            gi,
            gr: gauss_table(h, sa),
            gc: gauss_table(w, sa),
            self_w,
            h,
            w,
        }
    }
}

impl Kernel for BinnedAppearance {
    fn apply(&self, q: &Array3<f64>) -> Array3<f64> {
        let (c, h, w) = q.dim();
        let nb = self.bins;
        let mut out = Array3::zeros((c, h, w));
        for k in 0..c {
            let mut grid = Array3::<f64>::zeros((nb, h, w));
            for (p, v) in q.index_axis(Axis(0), k).iter().enumerate() {
                let (i, j) = (p / w, p % w);
                grid[[self.lo[p], i, j]] += (1.0 - self.frac[p]) * v;
                grid[[self.lo[p] + 1, i, j]] += self.frac[p] * v;
            }
            let blurred = spatial_blur(&grid, &self.gr, &self.gc);
            let mut mixed = Array3::<f64>::zeros((nb, h, w));
            for b in 0..nb {
                for b2 in 0..nb {
                    let g = self.gi[b.abs_diff(b2)];
                    if g < 1e-300 {
                        continue;
                    }
                    let src = blurred.index_axis(Axis(0), b2);
                    mixed.index_axis_mut(Axis(0), b).scaled_add(g, &src);
                }
            }
            for p in 0..h * w {
                let (i, j) = (p / w, p % w);
                let v = (1.0 - self.frac[p]) * mixed[[self.lo[p], i, j]] + self.frac[p] * mixed[[self.lo[p] + 1, i, j]];
                out[[k, i, j]] = v - self.self_w[p] * q[[k, i, j]];
            }
        }
        out
    }

    fn row_sums(&self) -> Array2<f64> {
        let ones = Array3::ones((1, self.h, self.w));
        self.apply(&ones).index_axis_move(Axis(0), 0)
    }
}

fn unary(p: ArrayView3<'_, f64>) -> Array3<f64> {
    p.mapv(|v| -v.max(UNARY_CLAMP).ln())
}

/// `Q_i(l) ∝ exp(-U_i(l) - sum_{l' != l} M_i(l'))`, which under Potts equals
/// `exp(-U_i(l) + M_i(l))` up to normalization.
fn update(u: &Array3<f64>, m: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = u.dim();
    let mut q = Array3::zeros((c, h, w));
    for i in 0..h {
        for j in 0..w {
            let e: Vec<f64> = (0..c).map(|k| -u[[k, i, j]] + m[[k, i, j]]).collect();
            let mx = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = e.iter().map(|v| (v - mx).exp()).sum();
            for k in 0..c {
                q[[k, i, j]] = (e[k] - mx).exp() / z;
            }
        }
    }
    q
}

fn normalized_message(kernel: &dyn Kernel, q: &Array3<f64>, weight: f64, sums: Option<&Array2<f64>>) -> Array3<f64> {
    let mut m = kernel.apply(q);
    match sums {
        Some(s) => {
            for mut ch in m.outer_iter_mut() {
                ch.zip_mut_with(s, |v, s| *v = if *s > 0.0 { weight * *v / s } else { 0.0 });
            }
        }
        None => m.mapv_inplace(|v| weight * v),
    }
    m
}

/// Mean-field refinement of class probabilities `p` (`classes x h x w`)
/// using image `x` (`h x w`). Without pairwise weight or iterations the
/// input is returned unchanged.
pub fn crf_refine(p: ArrayView3<'_, f64>, x: ArrayView2<'_, f64>, params: &CrfParams) -> Result<Array3<f64>> {
    let (_, h, w) = p.dim();
    if (h, w) != x.dim() {
        return Err(Error::Shape(format!("probabilities {:?} vs image {:?}", p.dim(), x.dim())));
    }
    if params.iterations == 0 || (params.w1 == 0.0 && params.w2 == 0.0) {
        return Ok(p.to_owned());
    }
    let approximate = match params.method {
        CrfMethod::Exact => false,
        CrfMethod::Approximate => true,
        CrfMethod::Auto => h * w > params.exact_max_pixels,
    };
    let smooth = Smoothness::new(h, w, params.sigma_gamma);
    let appearance: Box<dyn Kernel> = if approximate {
        Box::new(BinnedAppearance::new(x, params.sigma_alpha, params.sigma_beta))
    } else {
        Box::new(DenseAppearance::new(x, params.sigma_alpha, params.sigma_beta))
    };
    let (s1, s2) = if params.normalize_kernels {
        (Some(smooth.row_sums()), Some(appearance.row_sums()))
    } else {
        (None, None)
    };
    let u = unary(p);
    let mut q = update(&u, &Array3::zeros(u.dim()));
    for _ in 0..params.iterations {
        let mut m = Array3::zeros(q.dim());
        if params.w1 > 0.0 {
            m += &normalized_message(&smooth, &q, params.w1, s1.as_ref());
        }
        if params.w2 > 0.0 {
            m += &normalized_message(appearance.as_ref(), &q, params.w2, s2.as_ref());
        }
        q = update(&u, &m);
    }
    Ok(q)
}

/// `crf_refine` on `f32` maps, renormalized per pixel after narrowing.
pub fn crf_refine_f32(p: ArrayView3<'_, f32>, x: ArrayView2<'_, f32>, params: &CrfParams) -> Result<Array3<f32>> {
    if (p.dim().1, p.dim().2) != x.dim() {
        return Err(Error::Shape(format!("probabilities {:?} vs image {:?}", p.dim(), x.dim())));
    }
    if params.iterations == 0 || (params.w1 == 0.0 && params.w2 == 0.0) {
        return Ok(p.to_owned());
    }
    let q = crf_refine(p.mapv(f64::from).view(), x.mapv(f64::from).view(), params)?;
    let mut out = Array3::zeros(q.dim());
    let (c, h, w) = q.dim();
    for i in 0..h {
        for j in 0..w {
            let z: f64 = (0..c).map(|k| q[[k, i, j]]).sum();
            for k in 0..c {
                out[[k, i, j]] = (q[[k, i, j]] / z) as f32;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_and_smooth_kernels_match_definition() {
        let x = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64 * 0.1);
        let dense = DenseAppearance::new(x.view(), 2.0, 0.5);
        let smooth = Smoothness::new(3, 4, 1.5);
        let q = Array3::from_shape_fn((2, 3, 4), |(k, i, j)| ((k + 2 * i + j) % 3) as f64);
        let md = dense.apply(&q);
        let ms = smooth.apply(&q);
        for k in 0..2 {
            for i in 0..3 {
                for j in 0..4 {
                    let (mut ed, mut es) = (0.0, 0.0);
                    for i2 in 0..3 {
                        for j2 in 0..4 {
                            if (i2, j2) == (i, j) {
                                continue;
                            }
                            let d2 = ((i as f64 - i2 as f64).powi(2) + (j as f64 - j2 as f64).powi(2)) as f64;
                            let di = x[[i, j]] - x[[i2, j2]];
                            ed += (-d2 / 8.0 - di * di / 0.5).exp() * q[[k, i2, j2]];
                            es += (-d2 / 4.5).exp() * q[[k, i2, j2]];
                        }
                    }
                    assert!((md[[k, i, j]] - ed).abs() < 1e-12);
                    assert!((ms[[k, i, j]] - es).abs() < 1e-12);
                }
            }
        }
    }
}
