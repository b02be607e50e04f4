//! Composite segmentation loss: weighted cross entropy plus a Sobel edge
//! term over the foreground classes, with analytic gradients w.r.t. the
//! class probabilities.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};

use crate::config::EdgeNorm;
use crate::error::{Error, Result};
use crate::volume::NUM_CLASSES;

pub const PROB_CLAMP: f64 = 1e-8;

/// Horizontal-gradient Sobel kernel; the vertical one is its transpose.
pub const SOBEL_1: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];

pub fn sobel_2() -> [[f64; 3]; 3] {
    let mut t = [[0.0; 3]; 3];
    for (r, row) in SOBEL_1.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            t[c][r] = *v;
        }
    }
    t
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegLossWeights {
    /// BG, LV, MYO, RV.
    pub omega: [f64; NUM_CLASSES],
    pub lambda: f64,
    pub edge_norm: EdgeNorm,
}

impl Default for SegLossWeights {
    fn default() -> Self {
        Self {
            omega: [0.2, 0.25, 0.3, 0.25],
            lambda: 0.5,
            edge_norm: EdgeNorm::Euclidean,
        }
    }
}

fn check(p: &ArrayView3<'_, f64>, y: &ArrayView2<'_, u8>) -> Result<()> {
    let (c, h, w) = p.dim();
    if c != NUM_CLASSES || (h, w) != y.dim() {
        return Err(Error::Shape(format!("probabilities {:?} vs labels {:?}", p.dim(), y.dim())));
    }
    Ok(())
}

/// Mean over pixels of `-omega[y] * ln(max(p[y], clamp))`, and its gradient.
pub fn loss_wce(p: ArrayView3<'_, f64>, y: ArrayView2<'_, u8>, omega: &[f64; 4]) -> Result<(f64, Array3<f64>)> {
    check(&p, &y)?;
    let n = y.len() as f64;
    let mut grad = Array3::zeros(p.dim());
    let mut loss = 0.0;
    for ((r, c), &cls) in y.indexed_iter() {
        let k = cls as usize;
        let pk = p[[k, r, c]];
        loss -= omega[k] * pk.max(PROB_CLAMP).ln();
        if pk > PROB_CLAMP {
            grad[[k, r, c]] = -omega[k] / (n * pk);
        }
    }
    Ok((loss / n, grad))
}

/// Same-size, zero-padded separable 3x3 filter (the `cols` pass runs first):
/// `out[i, j] = sum_a sum_b rows[a] * cols[b] * q[i + a - 1, j + b - 1]`.
fn separable3(q: ArrayView2<'_, f64>, rows: [f64; 3], cols: [f64; 3]) -> Array2<f64> {
    let (h, w) = q.dim();
    let mut tmp = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut s = 0.0;
            for (b, cb) in cols.iter().enumerate() {
                let jj = j as isize + b as isize - 1;
                if *cb != 0.0 && jj >= 0 && (jj as usize) < w {
                    s += cb * q[[i, jj as usize]];
                }
            }
            tmp[[i, j]] = s;
        }
    }
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut s = 0.0;
            for (a, ra) in rows.iter().enumerate() {
                let ii = i as isize + a as isize - 1;
                if *ra != 0.0 && ii >= 0 && (ii as usize) < h {
                    s += ra * tmp[[ii as usize, j]];
                }
            }
            out[[i, j]] = s;
        }
    }
    out
}

const SMOOTH: [f64; 3] = [1.0, 2.0, 1.0];
const DIFF: [f64; 3] = [-1.0, 0.0, 1.0];
const DIFF_FLIPPED: [f64; 3] = [1.0, 0.0, -1.0];

/// Zero-padded `(q * S1, q * S2)`, both the same size as `q`.
pub fn sobel_edges(q: ArrayView2<'_, f64>) -> (Array2<f64>, Array2<f64>) {
    (separable3(q, SMOOTH, DIFF), separable3(q, DIFF, SMOOTH))
}

/// Adjoints of the two filters (kernels flipped).
fn sobel_adjoint(d1: ArrayView2<'_, f64>, d2: ArrayView2<'_, f64>) -> Array2<f64> {
    separable3(d1, SMOOTH, DIFF_FLIPPED) + separable3(d2, DIFF_FLIPPED, SMOOTH)
}

/// Sum over foreground classes and both filters of the norm of the edge-map
/// difference between `p` and one-hot `y`, and its gradient.
pub fn loss_edge(p: ArrayView3<'_, f64>, y: ArrayView2<'_, u8>, norm: EdgeNorm) -> Result<(f64, Array3<f64>)> {
    check(&p, &y)?;
    let mut grad = Array3::zeros(p.dim());
    let mut loss = 0.0;
    for m in 1..NUM_CLASSES {
        let diff = Array2::from_shape_fn(y.dim(), |(r, c)| {
            p[[m, r, c]] - if y[[r, c]] as usize == m { 1.0 } else { 0.0 }
        });
        let (mut d1, mut d2) = sobel_edges(diff.view());
        for d in [&mut d1, &mut d2] {
            let sq: f64 = d.iter().map(|v| v * v).sum();
            match norm {
                EdgeNorm::Euclidean => {
                    let nrm = sq.sqrt();
                    loss += nrm;
                    if nrm > 0.0 {
                        d.mapv_inplace(|v| v / nrm);
                    } else {
                        d.fill(0.0);
                    }
                }
                EdgeNorm::SquaredEuclidean => {
                    loss += sq;
                    d.mapv_inplace(|v| 2.0 * v);
                }
            }
        }
        grad.index_axis_mut(Axis(0), m).assign(&sobel_adjoint(d1.view(), d2.view()));
    }
    Ok((loss, grad))
}

/// `L_wce + lambda * L_edge` and its gradient.
pub fn loss_composite(p: ArrayView3<'_, f64>, y: ArrayView2<'_, u8>, w: &SegLossWeights) -> Result<(f64, Array3<f64>)> {
    let (lw, gw) = loss_wce(p, y, &w.omega)?;
    if w.lambda == 0.0 {
        return Ok((lw, gw));
    }
    let (le, ge) = loss_edge(p, y, w.edge_norm)?;
    Ok((lw + w.lambda * le, gw + ge * w.lambda))
}

/// Pulls a gradient w.r.t. softmax probabilities back to the logits:
/// `dz_k = p_k (g_k - sum_c p_c g_c)`.
pub fn softmax_backward(p: ArrayView3<'_, f64>, g: ArrayView3<'_, f64>) -> Array3<f64> {
    let (c, h, w) = p.dim();
    let mut out = Array3::zeros((c, h, w));
    for r in 0..h {
        for col in 0..w {
            let dot: f64 = (0..c).map(|k| p[[k, r, col]] * g[[k, r, col]]).sum();
            for k in 0..c {
                out[[k, r, col]] = p[[k, r, col]] * (g[[k, r, col]] - dot);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn one_hot(y: &Array2<u8>) -> Array3<f64> {
        let (h, w) = y.dim();
        Array3::from_shape_fn((4, h, w), |(k, r, c)| if y[[r, c]] as usize == k { 1.0 } else { 0.0 })
    }

    #[test]
    fn wce_hand_values() {
        let y = Array2::from_elem((1, 1), 2u8);
        let mut p = Array3::from_elem((4, 1, 1), 0.5 / 3.0);
        p[[2, 0, 0]] = 0.5;
        let (l, _) = loss_wce(p.view(), y.view(), &[0.2, 0.25, 0.3, 0.25]).unwrap();
        assert!((l - 0.3 * 2f64.ln()).abs() < 1e-12);
        assert!((l - 0.20794).abs() < 1e-5);

        let y = Array2::from_elem((1, 1), 1u8);
        let p = Array3::from_elem((4, 1, 1), 0.25);
        let (l, _) = loss_wce(p.view(), y.view(), &[0.2, 0.25, 0.3, 0.25]).unwrap();
        assert!((l - 0.34657).abs() < 1e-5);
    }

    #[test]
    fn perfect_prediction_is_zero() {
        let y = Array2::from_shape_fn((5, 6), |(r, c)| ((r + 2 * c) % 4) as u8);
        let p = one_hot(&y);
        let (l, _) = loss_wce(p.view(), y.view(), &[0.2, 0.25, 0.3, 0.25]).unwrap();
        assert!(l <= 1e-7);
        let (e, _) = loss_edge(p.view(), y.view(), EdgeNorm::Euclidean).unwrap();
        assert_eq!(e, 0.0);
    }

    #[test]
    fn sobel_step_and_constant() {
        let q = Array2::from_shape_fn((6, 6), |(_, c)| if c > 2 { 1.0 } else { 0.0 });
        let (g1, _) = sobel_edges(q.view());
        for r in 1..5 {
            assert_eq!(g1[[r, 2]], 4.0);
            assert_eq!(g1[[r, 3]], 4.0);
            assert_eq!(g1[[r, 1]], 0.0);
        }
        let q = Array2::from_elem((5, 5), 0.7);
        let (g1, g2) = sobel_edges(q.view());
        for r in 1..4 {
            for c in 1..4 {
                assert!(g1[[r, c]].abs() < 1e-15 && g2[[r, c]].abs() < 1e-15);
            }
        }
        assert!(SOBEL_1.iter().flatten().sum::<f64>() == 0.0);
        assert_eq!(sobel_2()[0], [-1.0, -2.0, -1.0]);
    }

    #[test]
    fn sobel_transpose_symmetry() {
        let q = Array2::from_shape_fn((5, 7), |(r, c)| ((r * 7 + c * 3) % 5) as f64 * 0.25);
        let (g1, g2) = sobel_edges(q.view());
        let qt = q.t().to_owned();
        let (h1, h2) = sobel_edges(qt.view());
        assert_eq!(h1, g2.t());
        assert_eq!(h2, g1.t());
    }

    #[test]
    fn lambda_zero_is_wce() {
        let y = Array2::from_shape_fn((4, 4), |(r, c)| ((r + c) % 4) as u8);
        let p = Array3::from_elem((4, 4, 4), 0.25);
        let w = SegLossWeights {
            lambda: 0.0,
            ..Default::default()
        };
        let (a, _) = loss_composite(p.view(), y.view(), &w).unwrap();
        let (b, _) = loss_wce(p.view(), y.view(), &w.omega).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatch_errors() {
        let y = Array2::zeros((4, 4));
        let p = Array3::from_elem((4, 4, 5), 0.25);
        assert!(loss_wce(p.view(), y.view(), &[1.0; 4]).is_err());
        assert!(loss_edge(p.view(), y.view(), EdgeNorm::Euclidean).is_err());
    }
}
