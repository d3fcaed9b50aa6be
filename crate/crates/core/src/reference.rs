//! Independent reference implementations used only for verification.
//!
//! These are deliberately written in the most literal style possible — plain
//! nested loops and pixel counting — so they share no code path with the
//! optimized kernels they check.

use crate::boxes::BBox;
use crate::error::Result;
use crate::tensor::{Elem, NdArray};

/// Direct-definition 2-D convolution: five nested loops, no im2col, no GEMM.
pub fn conv2d_naive<T: Elem>(
    x: &NdArray<T>,
    w: &NdArray<T>,
    b: Option<&[T]>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<NdArray<T>> {
    let (n, cin, h, wi) = x.dims4()?;
    let (cout, cg, kh, kw) = w.dims4()?;
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (wi + 2 * padding - kw) / stride + 1;
    let cog = cout / groups;
    let mut out = NdArray::zeros(&[n, cout, ho, wo]);
    let xd = x.data();
    let wd = w.data();
    let od = out.data_mut();
    for ni in 0..n {
        for co in 0..cout {
            let gi = co / cog;
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut acc = b.map(|b| b[co]).unwrap_or(T::ZERO);
                    for ci in 0..cg {
                        let c_in = gi * cg + ci;
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let ii = (oi * stride + ki) as isize - padding as isize;
                                let jj = (oj * stride + kj) as isize - padding as isize;
                                if ii < 0 || jj < 0 || ii >= h as isize || jj >= wi as isize {
                                    continue;
                                }
                                let xv = xd[((ni * cin + c_in) * h + ii as usize) * wi + jj as usize];
                                let wv = wd[((co * cg + ci) * kh + ki) * kw + kj];
                                acc += xv * wv;
                            }
                        }
                    }
                    od[((ni * cout + co) * ho + oi) * wo + oj] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Direct-definition affine map over the last axis.
pub fn linear_naive<T: Elem>(x: &NdArray<T>, w: &NdArray<T>, b: Option<&[T]>) -> Result<NdArray<T>> {
    let (dout, din) = w.dims2()?;
    let m = x.numel() / din;
    let mut oshape = x.shape().to_vec();
    *oshape.last_mut().unwrap() = dout;
    let mut out = NdArray::zeros(&oshape);
    let xd = x.data();
    let wd = w.data();
    let od = out.data_mut();
    for mi in 0..m {
        for o in 0..dout {
            let mut acc = b.map(|b| b[o]).unwrap_or(T::ZERO);
            for i in 0..din {
                acc += xd[mi * din + i] * wd[o * din + i];
            }
            od[mi * dout + o] = acc;
        }
    }
    Ok(out)
}

/// Rasterizes a box onto a pixel grid of `cell` subdivisions per unit and
/// counts covered cells. Exact for boxes whose corners lie on the grid.
fn pixel_area(b: &BBox, cell: f64, count: impl Fn(f64, f64) -> bool) -> f64 {
    let mut covered = 0u64;
    let x0 = (b.x * cell).floor() as i64;
    let y0 = (b.y * cell).floor() as i64;
    let x1 = ((b.x + b.w) * cell).ceil() as i64;
    let y1 = ((b.y + b.h) * cell).ceil() as i64;
    for yi in y0..y1 {
        for xi in x0..x1 {
            let cx = (xi as f64 + 0.5) / cell;
            let cy = (yi as f64 + 0.5) / cell;
            if count(cx, cy) {
                covered += 1;
            }
        }
    }
    covered as f64 / (cell * cell)
}

fn inside(b: &BBox, px: f64, py: f64) -> bool {
    px > b.x && px < b.x + b.w && py > b.y && py < b.y + b.h
}

/// Pixel-counting IoU oracle. With integer-coordinate boxes and `cell = 1`
/// the count is exact; fractional boxes should be scaled up first.
pub fn iou_pixels(a: &BBox, b: &BBox, cell: f64) -> f64 {
    let hull = BBox {
        x: a.x.min(b.x),
        y: a.y.min(b.y),
        w: (a.x + a.w).max(b.x + b.w) - a.x.min(b.x),
        h: (a.y + a.h).max(b.y + b.h) - a.y.min(b.y),
    };
    let inter = pixel_area(&hull, cell, |px, py| inside(a, px, py) && inside(b, px, py));
    let union = pixel_area(&hull, cell, |px, py| inside(a, px, py) || inside(b, px, py));
    if union == 0.0 {
        return 0.0;
    }
    inter / union
}

/// Pixel-counting GIoU oracle, same grid convention as [`iou_pixels`].
pub fn giou_pixels(a: &BBox, b: &BBox, cell: f64) -> f64 {
    let hull = BBox {
        x: a.x.min(b.x),
        y: a.y.min(b.y),
        w: (a.x + a.w).max(b.x + b.w) - a.x.min(b.x),
        h: (a.y + a.h).max(b.y + b.h) - a.y.min(b.y),
    };
    let inter = pixel_area(&hull, cell, |px, py| inside(a, px, py) && inside(b, px, py));
    let union = pixel_area(&hull, cell, |px, py| inside(a, px, py) || inside(b, px, py));
    let hull_area = pixel_area(&hull, cell, |px, py| inside(&hull, px, py));
    if union == 0.0 {
        if hull_area == 0.0 {
            return 0.0;
        }
        return -1.0;
    }
    inter / union - (hull_area - union) / hull_area
}

/// Direct-sum focal loss for ONE sample: `pred` and `target` are row-major
/// `g*g` maps, `pos` the flat index of the single positive cell. Literal
/// per-cell loop over the defining formula (alpha 2, beta 4, eps 1e-6).
pub fn focal_naive(pred: &[f64], target: &[f64], pos: usize) -> f64 {
    let eps = 1e-6;
    let mut sum = 0.0;
    for (k, (&p, &y)) in pred.iter().zip(target).enumerate() {
        let p = p.clamp(eps, 1.0 - eps);
        if k == pos {
            sum += (1.0 - p) * (1.0 - p) * p.ln();
        } else {
            sum += (1.0 - y).powi(4) * p * p * (1.0 - p).ln();
        }
    }
    -sum
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_iou_on_known_boxes() {
        // Two 2x2 squares sharing half their area.
        let a = BBox { x: 0.0, y: 0.0, w: 2.0, h: 2.0 };
        let b = BBox { x: 1.0, y: 0.0, w: 2.0, h: 2.0 };
        // inter = 2, union = 6.
        assert!((iou_pixels(&a, &b, 4.0) - 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn pixel_giou_identical_boxes_is_one() {
        let a = BBox { x: 1.0, y: 2.0, w: 3.0, h: 4.0 };
        assert!((giou_pixels(&a, &a, 4.0) - 1.0).abs() < 1e-12);
    }
}
