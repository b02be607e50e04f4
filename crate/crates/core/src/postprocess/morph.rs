//! Hierarchical 3D closing of a 4-class label map.

use ndarray::{s, Array3};

use crate::config::{MorphOp, MorphParams, StructuringElement};
use crate::volume::{Class, LabelMap};

fn offsets(se: StructuringElement) -> Vec<(isize, isize, isize)> {
    match se {
        StructuringElement::Cross6 => vec![(0, 0, 0), (-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)],
        StructuringElement::InPlaneCross => vec![(0, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)],
        StructuringElement::Cube26 => {
            let mut v = Vec::with_capacity(27);
            for dz in -1..=1 {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        v.push((dz, dy, dx));
                    }
                }
            }
            v
        }
    }
}

/// One dilation (`any`) or erosion (`all`) step; outside the array is false.
fn step(m: &Array3<bool>, offs: &[(isize, isize, isize)], dilate: bool) -> Array3<bool> {
    let (s, h, w) = m.dim();
    Array3::from_shape_fn((s, h, w), |(z, y, x)| {
        let at = |&(dz, dy, dx): &(isize, isize, isize)| {
            let (zz, yy, xx) = (z as isize + dz, y as isize + dy, x as isize + dx);
            zz >= 0
                && yy >= 0
                && xx >= 0
                && (zz as usize) < s
                && (yy as usize) < h
                && (xx as usize) < w
                && m[[zz as usize, yy as usize, xx as usize]]
        };
        if dilate {
            offs.iter().any(at)
        } else {
            offs.iter().all(at)
        }
    })
}

/// Closing (or opening) with `iterations` steps each way, computed on a
/// domain padded by `iterations` voxels so the result equals the operation
/// on an unbounded grid restricted to the array.
pub fn close_or_open(mask: &Array3<bool>, params: &MorphParams) -> Array3<bool> {
    let k = params.iterations;
    if k == 0 {
        return mask.clone();
    }
    let offs = offsets(params.structuring_element);
    let (s, h, w) = mask.dim();
    let pz = if params.structuring_element == StructuringElement::InPlaneCross { 0 } else { k };
    let mut m = Array3::from_elem((s + 2 * pz, h + 2 * k, w + 2 * k), false);
    m.slice_mut(s![pz..pz + s, k..k + h, k..k + w]).assign(mask);
    let first_dilate = params.operation == MorphOp::Closing;
    for _ in 0..k {
        m = step(&m, &offs, first_dilate);
    }
    for _ in 0..k {
        m = step(&m, &offs, !first_dilate);
    }
    m.slice(s![pz..pz + s, k..k + h, k..k + w]).to_owned()
}

/// Closes the foreground union `U`, then MYO and LV, each clipped to `U`.
/// Voxels in closed LV become LV; otherwise closed MYO becomes MYO;
/// remaining voxels of `U` (former RV or gained by the union) become RV;
/// everything else is BG.
pub fn morph_refine(y: &LabelMap, params: &MorphParams) -> LabelMap {
    let labels = y.labels();
    let union = close_or_open(&labels.mapv(|v| v != Class::Bg as u8), params);
    let myo = close_or_open(&y.mask(Class::Myo), params);
    let lv = close_or_open(&y.mask(Class::Lv), params);
    let out = Array3::from_shape_fn(labels.dim(), |idx| {
        if !union[idx] {
            Class::Bg as u8
        } else if lv[idx] {
            Class::Lv as u8
        } else if myo[idx] {
            Class::Myo as u8
        } else {
            Class::Rv as u8
        }
    });
    LabelMap::new(out).expect("labels are in range")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closing_fills_interior_hole_and_keeps_empty() {
        let mut a = Array3::zeros((5, 7, 7));
        a.slice_mut(s![1..4, 1..6, 1..6]).fill(Class::Lv as u8);
        a[[2, 3, 3]] = 0;
        let out = morph_refine(&LabelMap::new(a.clone()).unwrap(), &MorphParams::default());
        assert_eq!(out.labels()[[2, 3, 3]], Class::Lv as u8);
        a[[2, 3, 3]] = Class::Lv as u8;
        assert_eq!(out.labels(), &a);

        let empty = LabelMap::zeros((3, 5, 5));
        assert_eq!(morph_refine(&empty, &MorphParams::default()), empty);
    }

    #[test]
    fn padded_closing_does_not_erode_at_border() {
        let mask = Array3::from_elem((2, 4, 4), true);
        assert_eq!(close_or_open(&mask, &MorphParams::default()), mask);
    }
}
