//! im2col lowering of 2D convolutions onto single-precision GEMM.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PadMode {
    #[default]
    Zero,
    Reflect,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub mode: PadMode,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        let oh = (self.height + 2 * self.pad - self.kh) / self.stride + 1;
        let ow = (self.width + 2 * self.pad - self.kw) / self.stride + 1;
        (oh, ow)
    }

    /// Rows of the lowered matrix (`C * KH * KW`).
    pub fn col_rows(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    /// Columns of the lowered matrix (`N * OH * OW`).
    pub fn col_cols(&self) -> usize {
        let (oh, ow) = self.out_hw();
        self.batch * oh * ow
    }
}

/// Maps a padded coordinate back into `0..n`, or `None` for zero padding.
#[inline]
fn source_index(i: isize, n: usize, mode: PadMode) -> Option<usize> {
    if i >= 0 && (i as usize) < n {
        return Some(i as usize);
    }
    match mode {
        PadMode::Zero => None,
        PadMode::Reflect => {
            if n == 1 {
                return Some(0);
            }
            let period = 2 * (n as isize - 1);
            let mut r = i.rem_euclid(period);
            if r >= n as isize {
                r = period - r;
            }
            Some(r as usize)
        }
    }
}

/// For a row of output positions, the source column of each tap, plus the
/// contiguous in-bounds run `lo..hi` when the stride is 1.
struct Taps {
    idx: Vec<Option<usize>>,
    run: Option<(usize, usize, usize)>,
}

fn taps(k: usize, out: usize, g: &ConvGeom, n: usize) -> Taps {
    let idx: Vec<Option<usize>> = (0..out)
        .map(|o| source_index((o * g.stride + k) as isize - g.pad as isize, n, g.mode))
        .collect();
    let run = (g.stride == 1).then(|| {
        // Output o reads source o + k - pad; in bounds for lo <= o < hi.
        let lo = g.pad.saturating_sub(k).min(out);
        let hi = (n + g.pad).saturating_sub(k).clamp(lo, out);
        (lo, hi, lo + k - g.pad.min(lo + k))
    });
    Taps { idx, run }
}

/// Lowers an NCHW input into a `[C*KH*KW, N*OH*OW]` row-major matrix.
pub fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (oh, ow) = g.out_hw();
    let plane = oh * ow;
    let cols = g.batch * plane;
    let mut out = vec![0.0f32; g.col_rows() * cols];
    let row_idx: Vec<Vec<Option<usize>>> = (0..g.kh).map(|k| taps(k, oh, g, g.height).idx).collect();
    let col_taps: Vec<Taps> = (0..g.kw).map(|k| taps(k, ow, g, g.width)).collect();
    for c in 0..g.in_ch {
        for ki in 0..g.kh {
            for (kj, ct) in col_taps.iter().enumerate() {
                let r = (c * g.kh + ki) * g.kw + kj;
                let dst_row = &mut out[r * cols..(r + 1) * cols];
                for n in 0..g.batch {
                    let src = &x[(n * g.in_ch + c) * g.height * g.width..][..g.height * g.width];
                    let dst = &mut dst_row[n * plane..(n + 1) * plane];
                    for (oy, iy) in row_idx[ki].iter().enumerate() {
                        let Some(iy) = iy else { continue };
                        let d = &mut dst[oy * ow..(oy + 1) * ow];
                        let srow = &src[iy * g.width..(iy + 1) * g.width];
                        match ct.run {
                            Some((lo, hi, s0)) => {
                                d[lo..hi].copy_from_slice(&srow[s0..s0 + hi - lo]);
                                if g.mode == PadMode::Reflect {
                                    for o in (0..lo).chain(hi..ow) {
                                        if let Some(ix) = ct.idx[o] {
                                            d[o] = srow[ix];
                                        }
                                    }
                                }
                            }
                            None => {
                                for (v, ix) in d.iter_mut().zip(&ct.idx) {
                                    if let Some(ix) = ix {
                                        *v = srow[*ix];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters-and-adds lowered gradients into NCHW.
pub fn col2im(cols_data: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let (oh, ow) = g.out_hw();
    let plane = oh * ow;
    let cols = g.batch * plane;
    let row_idx: Vec<Vec<Option<usize>>> = (0..g.kh)
        .map(|k| {
            (0..oh)
                .map(|o| source_index((o * g.stride + k) as isize - g.pad as isize, g.height, g.mode))
                .collect()
        })
        .collect();
    let col_idx: Vec<Vec<Option<usize>>> = (0..g.kw)
        .map(|k| {
            (0..ow)
                .map(|o| source_index((o * g.stride + k) as isize - g.pad as isize, g.width, g.mode))
                .collect()
        })
        .collect();
    for c in 0..g.in_ch {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (c * g.kh + ki) * g.kw + kj;
                let src_row = &cols_data[r * cols..(r + 1) * cols];
                for n in 0..g.batch {
                    let dst = &mut dx[(n * g.in_ch + c) * g.height * g.width..][..g.height * g.width];
                    let src = &src_row[n * plane..(n + 1) * plane];
                    for (oy, iy) in row_idx[ki].iter().enumerate() {
                        if let Some(iy) = iy {
                            let s = &src[oy * ow..(oy + 1) * ow];
                            let drow = &mut dst[iy * g.width..(iy + 1) * g.width];
                            for (v, ix) in s.iter().zip(&col_idx[kj]) {
                                if let Some(ix) = ix {
                                    drow[*ix] += *v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Row-major matrix view used by [`gemm`]: `(data, rows, cols, transposed)`.
pub struct MatRef<'a> {
    pub data: &'a [f32],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f32], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    /// The transpose of a stored `rows x cols` matrix.
    pub fn t(data: &'a [f32], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            transposed: true,
        }
    }

    fn logical(&self) -> (usize, usize, isize, isize) {
        if self.transposed {
            (self.cols, self.rows, 1, self.cols as isize)
        } else {
            (self.rows, self.cols, self.cols as isize, 1)
        }
    }
}

/// `c = alpha * a * b + beta * c` with `c` stored row-major `m x n`.
pub fn gemm(a: MatRef<'_>, b: MatRef<'_>, c: &mut [f32], beta: f32) {
    let (m, k, rsa, csa) = a.logical();
    let (k2, n, rsb, csb) = b.logical();
    assert_eq!(k, k2, "inner dimensions differ");
    assert_eq!(c.len(), m * n);
    assert!(a.data.len() >= m * k && b.data.len() >= k * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    // SAFETY: the asserts above bound every index matrixmultiply touches
    // through the given strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f32], w: &[f32], g: &ConvGeom, out_ch: usize) -> Vec<f32> {
        let (oh, ow) = g.out_hw();
        let mut out = vec![0.0; g.batch * out_ch * oh * ow];
        for n in 0..g.batch {
            for o in 0..out_ch {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..g.in_ch {
                            for i in 0..g.kh {
                                for j in 0..g.kw {
                                    let iy = (y * g.stride + i) as isize - g.pad as isize;
                                    let ix = (xx * g.stride + j) as isize - g.pad as isize;
                                    let (Some(iy), Some(ix)) = (
                                        source_index(iy, g.height, g.mode),
                                        source_index(ix, g.width, g.mode),
                                    ) else {
                                        continue;
                                    };
                                    acc += x[((n * g.in_ch + c) * g.height + iy) * g.width + ix]
                                        * w[((o * g.in_ch + c) * g.kh + i) * g.kw + j];
                                }
                            }
                        }
                        out[((n * out_ch + o) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn reflect_index_matches_numpy_reflect() {
        let got: Vec<usize> = (-3..7).map(|i| source_index(i, 4, PadMode::Reflect).unwrap()).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
    }

    #[test]
    fn lowered_conv_matches_direct_loops() {
        for mode in [PadMode::Zero, PadMode::Reflect] {
            for (stride, pad, k) in [(1, 1, 3), (2, 1, 4), (1, 3, 7), (1, 0, 1)] {
                let g = ConvGeom {
                    batch: 2,
                    in_ch: 3,
                    height: 9,
                    width: 8,
                    kh: k,
                    kw: k,
                    stride,
                    pad,
                    mode,
                };
                let x: Vec<f32> = (0..2 * 3 * 9 * 8).map(|i| ((i * 37 % 11) as f32) - 5.0).collect();
                let out_ch = 2;
                let w: Vec<f32> = (0..out_ch * 3 * k * k).map(|i| ((i * 13 % 7) as f32) * 0.25 - 0.7).collect();
                let cols = im2col(&x, &g);
                let mut out = vec![0.0; out_ch * g.col_cols()];
                gemm(MatRef::new(&w, out_ch, g.col_rows()), MatRef::new(&cols, g.col_rows(), g.col_cols()), &mut out, 0.0);
                let (oh, ow) = g.out_hw();
                let expect = naive_conv(&x, &w, &g, out_ch);
                for n in 0..2 {
                    for o in 0..out_ch {
                        for p in 0..oh * ow {
                            let a = out[o * g.col_cols() + n * oh * ow + p];
                            let b = expect[(n * out_ch + o) * oh * ow + p];
                            assert!((a - b).abs() < 1e-4, "{mode:?} s{stride} p{pad} k{k}: {a} vs {b}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            batch: 1,
            in_ch: 2,
            height: 5,
            width: 6,
            kh: 3,
            kw: 3,
            stride: 2,
            pad: 2,
            mode: PadMode::Reflect,
        };
        let x: Vec<f32> = (0..60).map(|i| (i as f32 * 0.37).sin()).collect();
        let y: Vec<f32> = (0..g.col_rows() * g.col_cols()).map(|i| (i as f32 * 0.11).cos()).collect();
        let ax = im2col(&x, &g);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let mut aty = vec![0.0; 60];
        col2im(&y, &g, &mut aty);
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert!((lhs - rhs).abs() < 1e-4, "{lhs} vs {rhs}");
    }
}
