//! Training objective: Gaussian-weighted focal classification loss plus
//! GIoU and L1 box regression at the ground-truth center cell, combined as
//! `total = focal + lambda_giou * (1 - GIoU) + lambda_l1 * L1`.
//!
//! Targets for a sample are a full-grid unnormalized Gaussian peaked (exactly
//! 1) at the box-center cell, the fractional center offsets, and the
//! normalized box size. The Gaussian radius follows the corner-point
//! minimum-overlap construction (overlap 0.7, radius floored at one cell).

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::lgch::HeadVars;
use crate::tape::{Tape, Var};
use crate::tensor::{Elem, NdArray};

pub const FOCAL_ALPHA: i32 = 2;
pub const FOCAL_BETA: i32 = 4;
pub const FOCAL_EPS: f64 = 1e-6;
pub const RADIUS_MIN_OVERLAP: f64 = 0.7;

#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub lambda_giou: f64,
    pub lambda_l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_giou: 2.0, lambda_l1: 5.0 }
    }
}

/// Per-sample supervision derived from a normalized ground-truth box.
pub struct TargetMaps<T: Elem> {
    /// `[grid, grid]` Gaussian heatmap, exactly 1 at the center cell.
    pub cls: NdArray<T>,
    /// `(row, col)` of the center cell.
    pub center_cell: (usize, usize),
    /// Fractional offsets `(x, y)` of the true center within its cell.
    pub offset: (f64, f64),
    /// Normalized `(w, h)`.
    pub size: (f64, f64),
    /// The normalized ground-truth box itself.
    pub gt: BBox,
}

/// Largest corner displacement (in cells) keeping IoU with the original box
/// at or above `min_overlap`, taken as the minimum over the shift / shrink /
/// grow cases.
pub fn gaussian_radius(h: f64, w: f64, min_overlap: f64) -> f64 {
    // Shifted box of the same size: (w-r)(h-r) / (2wh - (w-r)(h-r)) = o.
    let a1 = 1.0;
    let b1 = h + w;
    let c1 = w * h * (1.0 - min_overlap) / (1.0 + min_overlap);
    let r1 = (b1 - (b1 * b1 - 4.0 * a1 * c1).sqrt()) / (2.0 * a1);
    // Shrunk box: (w-2r)(h-2r) / (wh) = o.
    let a2 = 4.0;
    let b2 = 2.0 * (h + w);
    let c2 = (1.0 - min_overlap) * w * h;
    let r2 = (b2 - (b2 * b2 - 4.0 * a2 * c2).sqrt()) / (2.0 * a2);
    // Grown box: wh / ((w+2r)(h+2r)) = o.
    let a3 = 4.0 * min_overlap;
    let b3 = -2.0 * min_overlap * (h + w);
    let c3 = (min_overlap - 1.0) * w * h;
    let r3 = (-b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / (2.0 * a3);
    r1.min(r2).min(r3)
}

/// Builds the supervision maps for one normalized ground-truth box on a
/// `grid x grid` score map.
pub fn make_targets<T: Elem>(gt: &BBox, grid: usize) -> Result<TargetMaps<T>> {
    if !(gt.w > 0.0 && gt.h > 0.0) {
        return Err(Error::Input(format!("degenerate ground-truth box {}x{}", gt.w, gt.h)));
    }
    let (cx, cy) = gt.center();
    if !(0.0..=1.0).contains(&cx) || !(0.0..=1.0).contains(&cy) {
        return Err(Error::Input(format!("box center ({}, {}) outside the unit square", cx, cy)));
    }
    let g = grid as f64;
    let j = ((cx * g).floor() as usize).min(grid - 1);
    let i = ((cy * g).floor() as usize).min(grid - 1);
    let offset = (cx * g - j as f64, cy * g - i as f64);

    let raw = gaussian_radius(gt.h * g, gt.w * g, RADIUS_MIN_OVERLAP);
    let radius = (raw.floor() as i64).max(1) as f64;
    let sigma = (2.0 * radius + 1.0) / 6.0;
    let mut cls = vec![T::ZERO; grid * grid];
    for r in 0..grid {
        for c in 0..grid {
            let di = r as f64 - i as f64;
            let dj = c as f64 - j as f64;
            cls[r * grid + c] = T::from_f64((-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp());
        }
    }
    Ok(TargetMaps {
        cls: NdArray::from_vec(&[grid, grid], cls)?,
        center_cell: (i, j),
        offset,
        size: (gt.w, gt.h),
        gt: *gt,
    })
}

/// All loss terms as tape scalars.
pub struct LossVars {
    pub total: Var,
    pub focal: Var,
    pub giou: Var,
    pub l1: Var,
}

/// Focal classification loss over a batch of score maps:
/// `-(1/N) sum[ y=1: (1-p)^2 ln p ; else: (1-y)^4 p^2 ln(1-p) ]`
/// with one positive cell per sample.
pub fn focal_loss<T: Elem>(
    tape: &mut Tape<T>,
    score: Var,
    targets: &[TargetMaps<T>],
) -> Result<Var> {
    let (n, c, g, g2) = tape.value(score).dims4()?;
    check_batch(targets, n, c, g, g2, 1, "focal_loss")?;
    // Negative-cell weights (1-y)^4, exactly zero at the positive cell.
    let mut wneg = vec![T::ZERO; n * g * g];
    let mut centers = Vec::with_capacity(n);
    for (s, t) in targets.iter().enumerate() {
        for k in 0..g * g {
            let y = t.cls.data()[k].to_f64();
            wneg[s * g * g + k] = T::from_f64((1.0 - y).powi(FOCAL_BETA));
        }
        let (i, j) = t.center_cell;
        centers.push(s * g * g + i * g + j);
    }
    let wneg = tape.constant(NdArray::from_vec(&[n, 1, g, g], wneg)?);
    let p = tape.clamp(score, T::from_f64(FOCAL_EPS), T::from_f64(1.0 - FOCAL_EPS))?;
    let ones = tape.constant(NdArray::full(&[n, 1, g, g], T::ONE));
    let q = tape.sub(ones, p)?;
    let lnq = tape.ln(q)?;
    let p2 = tape.hadamard(p, p)?;
    let neg = tape.hadamard(p2, lnq)?;
    let neg = tape.hadamard(neg, wneg)?;
    let neg_sum = tape.sum_all(neg)?;
    let pc = tape.pick(p, centers)?;
    let ones_n = tape.constant(NdArray::full(&[n], T::ONE));
    let qc = tape.sub(ones_n, pc)?;
    let qc2 = tape.hadamard(qc, qc)?;
    let lnpc = tape.ln(pc)?;
    let pos = tape.hadamard(qc2, lnpc)?;
    let pos_sum = tape.sum_all(pos)?;
    let both = tape.add(pos_sum, neg_sum)?;
    tape.mul_scalar(both, T::from_f64(-1.0 / n as f64))
}

/// GIoU loss (`1 - mean GIoU`) and L1 loss (mean |(cx,cy,w,h) difference|)
/// of the boxes read from the offset/size maps at each sample's ground-truth
/// center cell.
pub fn box_losses<T: Elem>(
    tape: &mut Tape<T>,
    offset: Var,
    size: Var,
    targets: &[TargetMaps<T>],
) -> Result<(Var, Var)> {
    let (n, c, g, g2) = tape.value(offset).dims4()?;
    check_batch(targets, n, c, g, g2, 2, "box_losses")?;
    let (nz, cz, gz, gz2) = tape.value(size).dims4()?;
    if (nz, cz, gz, gz2) != (n, 2, g, g) {
        return Err(Error::dim("box_losses", format!("size map shape {:?}", tape.value(size).shape())));
    }
    let mut ix = Vec::with_capacity(n);
    let mut iy = Vec::with_capacity(n);
    let mut jv = Vec::with_capacity(n);
    let mut iv = Vec::with_capacity(n);
    let (mut gcx, mut gcy, mut gw, mut gh, mut garea) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut gx1, mut gy1, mut gx2, mut gy2) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (s, t) in targets.iter().enumerate() {
        let (i, j) = t.center_cell;
        ix.push(s * 2 * g * g + i * g + j);
        iy.push(s * 2 * g * g + g * g + i * g + j);
        jv.push(T::from_f64(j as f64));
        iv.push(T::from_f64(i as f64));
        let (cx, cy) = t.gt.center();
        gcx.push(T::from_f64(cx));
        gcy.push(T::from_f64(cy));
        gw.push(T::from_f64(t.gt.w));
        gh.push(T::from_f64(t.gt.h));
        garea.push(T::from_f64(t.gt.w * t.gt.h));
        gx1.push(T::from_f64(t.gt.x));
        gy1.push(T::from_f64(t.gt.y));
        gx2.push(T::from_f64(t.gt.x + t.gt.w));
        gy2.push(T::from_f64(t.gt.y + t.gt.h));
    }
    let cvec = |tape: &mut Tape<T>, v: Vec<T>| tape.constant(NdArray::from_vec(&[n], v).unwrap());
    let inv_g = T::from_f64(1.0 / g as f64);

    let ox = tape.pick(offset, ix)?;
    let oy = tape.pick(offset, iy)?;
    let sw = {
        let idx: Vec<usize> = (0..n).map(|s| s * 2 * g * g).collect();
        let idx: Vec<usize> =
            idx.iter().zip(targets).map(|(b, t)| b + t.center_cell.0 * g + t.center_cell.1).collect();
        tape.pick(size, idx)?
    };
    let sh = {
        let idx: Vec<usize> = (0..n)
            .map(|s| {
                let (i, j) = targets[s].center_cell;
                s * 2 * g * g + g * g + i * g + j
            })
            .collect();
        tape.pick(size, idx)?
    };
    let jc = cvec(tape, jv);
    let ic = cvec(tape, iv);
    let cx = tape.add(ox, jc)?;
    let cx = tape.mul_scalar(cx, inv_g)?;
    let cy = tape.add(oy, ic)?;
    let cy = tape.mul_scalar(cy, inv_g)?;

    let half = T::from_f64(0.5);
    let hw = tape.mul_scalar(sw, half)?;
    let hh = tape.mul_scalar(sh, half)?;
    let px1 = tape.sub(cx, hw)?;
    let px2 = tape.add(cx, hw)?;
    let py1 = tape.sub(cy, hh)?;
    let py2 = tape.add(cy, hh)?;

    let gx1 = cvec(tape, gx1);
    let gy1 = cvec(tape, gy1);
    let gx2 = cvec(tape, gx2);
    let gy2 = cvec(tape, gy2);

    let ix2 = tape.minimum(px2, gx2)?;
    let ix1 = tape.maximum(px1, gx1)?;
    let iw = tape.sub(ix2, ix1)?;
    let iw = tape.relu(iw)?;
    let iy2 = tape.minimum(py2, gy2)?;
    let iy1 = tape.maximum(py1, gy1)?;
    let ih = tape.sub(iy2, iy1)?;
    let ih = tape.relu(ih)?;
    let inter = tape.hadamard(iw, ih)?;

    let parea = tape.hadamard(sw, sh)?;
    let gareac = cvec(tape, garea);
    let areas = tape.add(parea, gareac)?;
    let union = tape.sub(areas, inter)?;

    let hx2 = tape.maximum(px2, gx2)?;
    let hx1 = tape.minimum(px1, gx1)?;
    let hullw = tape.sub(hx2, hx1)?;
    let hy2 = tape.maximum(py2, gy2)?;
    let hy1 = tape.minimum(py1, gy1)?;
    let hullh = tape.sub(hy2, hy1)?;
    let hull = tape.hadamard(hullw, hullh)?;

    let iou = tape.div(inter, union)?;
    let excess = tape.sub(hull, union)?;
    let excess = tape.div(excess, hull)?;
    let giou = tape.sub(iou, excess)?;
    let giou_sum = tape.sum_all(giou)?;
    let neg_mean = tape.mul_scalar(giou_sum, T::from_f64(-1.0 / n as f64))?;
    let giou_loss = tape.add_scalar(neg_mean, T::ONE)?;

    let gcx = cvec(tape, gcx);
    let gcy = cvec(tape, gcy);
    let gw = cvec(tape, gw);
    let gh = cvec(tape, gh);
    let dcx = tape.sub(cx, gcx)?;
    let dcx = tape.abs(dcx)?;
    let dcy = tape.sub(cy, gcy)?;
    let dcy = tape.abs(dcy)?;
    let dw = tape.sub(sw, gw)?;
    let dw = tape.abs(dw)?;
    let dh = tape.sub(sh, gh)?;
    let dh = tape.abs(dh)?;
    let d1 = tape.add(dcx, dcy)?;
    let d2 = tape.add(dw, dh)?;
    let d = tape.add(d1, d2)?;
    let dsum = tape.sum_all(d)?;
    let l1 = tape.mul_scalar(dsum, T::from_f64(1.0 / (4.0 * n as f64)))?;
    Ok((giou_loss, l1))
}

/// Combined objective over head outputs and per-sample targets.
pub fn total_loss<T: Elem>(
    tape: &mut Tape<T>,
    head: &HeadVars,
    targets: &[TargetMaps<T>],
    weights: &LossWeights,
) -> Result<LossVars> {
    let focal = focal_loss(tape, head.score, targets)?;
    let (giou, l1) = box_losses(tape, head.offset, head.size, targets)?;
    let wg = tape.mul_scalar(giou, T::from_f64(weights.lambda_giou))?;
    let wl = tape.mul_scalar(l1, T::from_f64(weights.lambda_l1))?;
    let t = tape.add(focal, wg)?;
    let total = tape.add(t, wl)?;
    Ok(LossVars { total, focal, giou, l1 })
}

fn check_batch<T: Elem>(
    targets: &[TargetMaps<T>],
    n: usize,
    c: usize,
    g: usize,
    g2: usize,
    want_c: usize,
    op: &str,
) -> Result<()> {
    if targets.len() != n {
        return Err(Error::dim(op, format!("{} targets for batch of {}", targets.len(), n)));
    }
    if c != want_c || g != g2 {
        return Err(Error::dim(op, format!("map shape [{},{},{},{}]", n, c, g, g2)));
    }
    for t in targets {
        if t.cls.shape() != [g, g] {
            return Err(Error::dim(op, format!("target grid {:?} vs map grid {}", t.cls.shape(), g)));
        }
        if t.center_cell.0 >= g || t.center_cell.1 >= g {
            return Err(Error::dim(op, format!("center cell {:?} outside grid {}", t.center_cell, g)));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;

    fn maps_from(
        tape: &mut Tape<f64>,
        score: NdArray<f64>,
        offset: NdArray<f64>,
        size: NdArray<f64>,
    ) -> HeadVars {
        HeadVars {
            score: tape.leaf(score),
            offset: tape.leaf(offset),
            size: tape.leaf(size),
        }
    }

    #[test]
    fn target_example_center_box() {
        let gt = BBox::from_center(0.5, 0.5, 0.25, 0.25);
        let t: TargetMaps<f64> = make_targets(&gt, 16).unwrap();
        assert_eq!(t.center_cell, (8, 8));
        assert!(t.offset.0.abs() < 1e-12 && t.offset.1.abs() < 1e-12);
        assert!((t.size.0 - 0.25).abs() < 1e-12 && (t.size.1 - 0.25).abs() < 1e-12);
        // Peak exactly 1 at the center; symmetric about it.
        assert_eq!(t.cls.data()[8 * 16 + 8], 1.0);
        let m = t.cls.data().iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(m, 1.0);
        for d in 1..8 {
            assert_eq!(t.cls.data()[(8 + d) * 16 + 8], t.cls.data()[(8 - d) * 16 + 8]);
            assert_eq!(t.cls.data()[8 * 16 + 8 + d], t.cls.data()[8 * 16 + 8 - d]);
        }
    }

    #[test]
    fn degenerate_gt_rejected() {
        assert!(make_targets::<f64>(&BBox::new(0.2, 0.2, 0.0, 0.1), 16).is_err());
        assert!(make_targets::<f64>(&BBox::from_center(1.5, 0.5, 0.2, 0.2), 16).is_err());
    }

    #[test]
    fn radius_is_tight_at_the_binding_case() {
        // For each of the three corner-motion cases, the returned radius must
        // keep IoU at or above the overlap floor, and the binding case must
        // sit exactly on it.
        for (h, w) in [(10.0f64, 14.0), (3.0, 3.0), (20.0, 5.0)] {
            let r = gaussian_radius(h, w, RADIUS_MIN_OVERLAP);
            assert!(r > 0.0);
            let shift = {
                let inter = (w - r) * (h - r);
                inter / (2.0 * w * h - inter)
            };
            let shrink = (w - 2.0 * r) * (h - 2.0 * r) / (w * h);
            let grow = w * h / ((w + 2.0 * r) * (h + 2.0 * r));
            for v in [shift, shrink, grow] {
                assert!(v >= RADIUS_MIN_OVERLAP - 1e-9, "case IoU {} below floor", v);
            }
            let tightest = shift.min(shrink).min(grow);
            assert!((tightest - RADIUS_MIN_OVERLAP).abs() < 1e-9, "binding case must be exact");
        }
    }

    #[test]
    fn focal_hand_oracle_2x2() {
        // One positive, Gaussian zero elsewhere, predictions all 0.5:
        // positive (1-p)^2 ln p and three negatives p^2 ln(1-p) each give
        // 0.25 ln 0.5, so the loss is exactly ln 2.
        let mut tape = Tape::new();
        let score = tape.leaf(NdArray::full(&[1, 1, 2, 2], 0.5f64));
        let mut t: TargetMaps<f64> =
            make_targets(&BBox::from_center(0.25, 0.25, 0.5, 0.5), 2).unwrap();
        t.cls = NdArray::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        t.center_cell = (0, 0);
        let l = focal_loss(&mut tape, score, &[t]).unwrap();
        assert!((tape.value(l).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn focal_matches_naive_sum_on_random_maps() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(30);
        let g = 4;
        for _ in 0..5 {
            let n = 2;
            let mut targets = Vec::new();
            for _ in 0..n {
                let cx = rng.gen::<f64>() * 0.6 + 0.2;
                let cy = rng.gen::<f64>() * 0.6 + 0.2;
                targets.push(
                    make_targets::<f64>(&BBox::from_center(cx, cy, 0.3, 0.2), g).unwrap(),
                );
            }
            let pred: Vec<f64> = (0..n * g * g).map(|_| rng.gen::<f64>() * 0.96 + 0.02).collect();
            let parr = NdArray::from_vec(&[n, 1, g, g], pred.clone()).unwrap();
            let mut tape = Tape::new();
            let pv = tape.leaf(parr);
            let l = focal_loss(&mut tape, pv, &targets).unwrap();
            let mut expect = 0.0;
            for (s, t) in targets.iter().enumerate() {
                expect += reference::focal_naive(
                    &pred[s * g * g..(s + 1) * g * g],
                    t.cls.data(),
                    t.center_cell.0 * g + t.center_cell.1,
                );
            }
            expect /= n as f64;
            assert!((tape.value(l).item().unwrap() - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn perfect_predictions_drive_total_to_zero() {
        let g = 8;
        let gt = BBox::from_center(0.5, 0.25, 0.25, 0.25);
        let t: TargetMaps<f64> = make_targets(&gt, g).unwrap();
        let (i, j) = t.center_cell;
        // Score: near-1 at the positive cell, near-0 elsewhere.
        let mut s = vec![1e-9; g * g];
        s[i * g + j] = 1.0 - 1e-9;
        // Offset and size maps exactly equal to the targets everywhere.
        let mut off = vec![0.0; 2 * g * g];
        for k in 0..g * g {
            off[k] = t.offset.0;
            off[g * g + k] = t.offset.1;
        }
        let mut sz = vec![0.0; 2 * g * g];
        for k in 0..g * g {
            sz[k] = t.size.0;
            sz[g * g + k] = t.size.1;
        }
        let mut tape = Tape::new();
        let head = maps_from(
            &mut tape,
            NdArray::from_vec(&[1, 1, g, g], s).unwrap(),
            NdArray::from_vec(&[1, 2, g, g], off).unwrap(),
            NdArray::from_vec(&[1, 2, g, g], sz).unwrap(),
        );
        let l = total_loss(&mut tape, &head, &[t], &LossWeights::default()).unwrap();
        assert!(tape.value(l.total).item().unwrap() < 1e-9);
        assert!(tape.value(l.giou).item().unwrap().abs() < 1e-12);
        assert!(tape.value(l.l1).item().unwrap().abs() < 1e-12);
    }

    #[test]
    fn box_losses_match_scalar_oracles() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let g = 8;
        for _ in 0..20 {
            let gt = BBox::from_center(
                rng.gen::<f64>() * 0.5 + 0.25,
                rng.gen::<f64>() * 0.5 + 0.25,
                rng.gen::<f64>() * 0.3 + 0.05,
                rng.gen::<f64>() * 0.3 + 0.05,
            );
            let t: TargetMaps<f64> = make_targets(&gt, g).unwrap();
            let (i, j) = t.center_cell;
            let (ox, oy) = (rng.gen::<f64>(), rng.gen::<f64>());
            let (w, h) = (rng.gen::<f64>() * 0.4 + 0.05, rng.gen::<f64>() * 0.4 + 0.05);
            let mut off = vec![0.123; 2 * g * g];
            off[i * g + j] = ox;
            off[g * g + i * g + j] = oy;
            let mut sz = vec![0.456; 2 * g * g];
            sz[i * g + j] = w;
            sz[g * g + i * g + j] = h;
            let mut tape = Tape::new();
            let ov = tape.leaf(NdArray::from_vec(&[1, 2, g, g], off).unwrap());
            let sv = tape.leaf(NdArray::from_vec(&[1, 2, g, g], sz).unwrap());
            let (gl, l1) = box_losses(&mut tape, ov, sv, &[t]).unwrap();
            let pred = BBox::from_center((j as f64 + ox) / g as f64, (i as f64 + oy) / g as f64, w, h);
            let want_gl = 1.0 - pred.giou(&gt);
            let (pcx, pcy) = pred.center();
            let (gcx, gcy) = gt.center();
            let want_l1 =
                ((pcx - gcx).abs() + (pcy - gcy).abs() + (w - gt.w).abs() + (h - gt.h).abs()) / 4.0;
            assert!((tape.value(gl).item().unwrap() - want_gl).abs() < 1e-12);
            assert!((tape.value(l1).item().unwrap() - want_l1).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_ablation_reduces_to_focal() {
        let g = 4;
        let gt = BBox::from_center(0.5, 0.5, 0.3, 0.3);
        let t: TargetMaps<f64> = make_targets(&gt, g).unwrap();
        let mk = |tape: &mut Tape<f64>| {
            let score = tape.leaf(NdArray::full(&[1, 1, g, g], 0.4f64));
            let offset = tape.leaf(NdArray::full(&[1, 2, g, g], 0.3f64));
            let size = tape.leaf(NdArray::full(&[1, 2, g, g], 0.2f64));
            HeadVars { score, offset, size }
        };
        let mut tape = Tape::new();
        let head = mk(&mut tape);
        let zero = total_loss(
            &mut tape,
            &head,
            &[make_targets(&gt, g).unwrap()],
            &LossWeights { lambda_giou: 0.0, lambda_l1: 0.0 },
        )
        .unwrap();
        let focal_only = focal_loss(&mut tape, head.score, &[t]).unwrap();
        assert_eq!(
            tape.value(zero.total).item().unwrap(),
            tape.value(focal_only).item().unwrap()
        );
        // And the default weights combine linearly.
        let mut tape2 = Tape::new();
        let head2 = mk(&mut tape2);
        let l = total_loss(
            &mut tape2,
            &head2,
            &[make_targets(&gt, g).unwrap()],
            &LossWeights::default(),
        )
        .unwrap();
        let t_val = tape2.value(l.total).item().unwrap();
        let parts = tape2.value(l.focal).item().unwrap()
            + 2.0 * tape2.value(l.giou).item().unwrap()
            + 5.0 * tape2.value(l.l1).item().unwrap();
        assert!((t_val - parts).abs() < 1e-12);
    }

    #[test]
    fn map_gradients_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(32);
        let g = 4;
        let gt = BBox::from_center(0.55, 0.45, 0.3, 0.25);
        let s0: Vec<f64> = (0..g * g).map(|_| rng.gen::<f64>() * 0.9 + 0.05).collect();
        let o0: Vec<f64> = (0..2 * g * g).map(|_| rng.gen::<f64>() * 0.9 + 0.05).collect();
        let z0: Vec<f64> = (0..2 * g * g).map(|_| rng.gen::<f64>() * 0.4 + 0.05).collect();
        let eval = |s: &[f64], o: &[f64], z: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let head = HeadVars {
                score: tape.leaf(NdArray::from_vec(&[1, 1, g, g], s.to_vec()).unwrap()),
                offset: tape.leaf(NdArray::from_vec(&[1, 2, g, g], o.to_vec()).unwrap()),
                size: tape.leaf(NdArray::from_vec(&[1, 2, g, g], z.to_vec()).unwrap()),
            };
            let t = make_targets::<f64>(&gt, g).unwrap();
            let l = total_loss(&mut tape, &head, &[t], &LossWeights::default()).unwrap();
            tape.value(l.total).item().unwrap()
        };
        // Analytic gradients.
        let mut tape = Tape::new();
        let sarr = NdArray::from_vec(&[1, 1, g, g], s0.clone()).unwrap().with_grad();
        let oarr = NdArray::from_vec(&[1, 2, g, g], o0.clone()).unwrap().with_grad();
        let zarr = NdArray::from_vec(&[1, 2, g, g], z0.clone()).unwrap().with_grad();
        let head = HeadVars {
            score: tape.leaf(sarr),
            offset: tape.leaf(oarr),
            size: tape.leaf(zarr),
        };
        let t = make_targets::<f64>(&gt, g).unwrap();
        let l = total_loss(&mut tape, &head, &[t], &LossWeights::default()).unwrap();
        tape.backward(l.total).unwrap();
        let eps = 1e-6;
        let check = |var: Var, base: &[f64], which: usize, tape: &Tape<f64>| {
            let grad = tape.grad(var).unwrap();
            for k in (0..base.len()).step_by(3) {
                let mut lo = base.to_vec();
                let mut hi = base.to_vec();
                lo[k] -= eps;
                hi[k] += eps;
                let (flo, fhi) = match which {
                    0 => (eval(&lo, &o0, &z0), eval(&hi, &o0, &z0)),
                    1 => (eval(&s0, &lo, &z0), eval(&s0, &hi, &z0)),
                    _ => (eval(&s0, &o0, &lo), eval(&s0, &o0, &hi)),
                };
                let fd = (fhi - flo) / (2.0 * eps);
                let denom = fd.abs().max(grad[k].abs()).max(1e-8);
                assert!(
                    ((fd - grad[k]) / denom).abs() < 1e-6,
                    "map {} idx {}: fd {} vs ad {}",
                    which,
                    k,
                    fd,
                    grad[k]
                );
            }
        };
        check(head.score, &s0, 0, &tape);
        check(head.offset, &o0, 1, &tape);
        check(head.size, &z0, 2, &tape);
    }
}
