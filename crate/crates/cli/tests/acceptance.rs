//! Acceptance gate for the workspace: ten independent criteria, printed one
//! line each with their pinned tolerances, exiting nonzero if any fail.
//!
//! The target is deliberately `harness = false` so every line is visible in
//! `cargo test` output and a failed criterion cannot stop the others from
//! running.

use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use cgtrack_core::boxes::BBox;
use cgtrack_core::gradcheck::{run_scope, Scope, FD_TOLERANCE};
use cgtrack_core::layers::Ctx;
use cgtrack_core::lgch::HeadVars;
use cgtrack_core::metrics::{evaluate, SequenceRecord};
use cgtrack_core::model::{Model, ModelConfig, Variant};
use cgtrack_core::objective::{make_targets, total_loss, LossWeights, TargetMaps};
use cgtrack_core::profiler::{cascade_trace, profile};
use cgtrack_core::reference;
use cgtrack_core::synth::{generate, SynthConfig};
use cgtrack_core::tape::Tape;
use cgtrack_core::tensor::NdArray;
use cgtrack_core::track::{track_sequence, TrackConfig};
use cgtrack_core::train::{build_batch, smoke_train, TrainBatch, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Criterion {
    name: &'static str,
    bound: Option<Duration>,
    run: fn() -> Result<String, String>,
}

fn main() {
    let criteria: [Criterion; 10] = [
        Criterion {
            name: "SE-block parameter identity",
            bound: Some(Duration::from_secs(1)),
            run: c01_se_params,
        },
        Criterion {
            name: "zero-cost cascade fusion",
            bound: Some(Duration::from_secs(1)),
            run: c02_fusion,
        },
        Criterion {
            name: "gated-head parameter affinity",
            bound: Some(Duration::from_secs(1)),
            run: c03_head_affinity,
        },
        Criterion {
            name: "shape contract (B config)",
            bound: Some(Duration::from_secs(10)),
            run: c04_shapes,
        },
        Criterion {
            name: "finite-difference gradient suite",
            bound: Some(Duration::from_secs(300)),
            run: c05_gradients,
        },
        Criterion { name: "oracle equivalence", bound: None, run: c06_oracles },
        Criterion { name: "loss identities", bound: None, run: c07_loss_identities },
        Criterion {
            name: "overfit-and-track experiment",
            bound: Some(Duration::from_secs(600)),
            run: c08_overfit,
        },
        Criterion { name: "metrics fixtures", bound: None, run: c09_metrics },
        Criterion { name: "pipeline determinism", bound: None, run: c10_determinism },
    ];

    println!("acceptance: {} criteria", criteria.len());
    let mut failed = 0usize;
    for (k, c) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            Err(format!("panicked: {}", msg))
        });
        let elapsed = start.elapsed();
        let result = match (result, c.bound) {
            (Ok(d), Some(b)) if elapsed > b => {
                Err(format!("{} — but took {:.1}s, bound {:.0}s", d, elapsed.as_secs_f64(), b.as_secs_f64()))
            }
            (r, _) => r,
        };
        match result {
            Ok(detail) => {
                println!(
                    "[{:2}/10] pass  {:>7.2}s  {} — {}",
                    k + 1,
                    elapsed.as_secs_f64(),
                    c.name,
                    detail
                );
            }
            Err(reason) => {
                failed += 1;
                println!(
                    "[{:2}/10] FAIL  {:>7.2}s  {} — {}",
                    k + 1,
                    elapsed.as_secs_f64(),
                    c.name,
                    reason
                );
            }
        }
    }
    if failed == 0 {
        println!("acceptance: 10/10 passed");
    } else {
        println!("acceptance: {}/10 passed, {} FAILED", 10 - failed, failed);
        std::process::exit(1);
    }
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

/// Criterion 1: the two SE blocks of the B-config cascade hold exactly
/// 550,912 trainable parameters (0.551 M, table tolerance ±1,000).
fn c01_se_params() -> Result<String, String> {
    let rep = profile(&ModelConfig::variant(Variant::B)).map_err(|e| e.to_string())?;
    let se = rep.params_with_prefix("hfc.se") as i64;
    ensure(
        (se - 550_912).abs() <= 1_000,
        format!("hfc.se1+se2 = {} outside 550912 ±1000", se),
    )?;
    ensure(se == 550_912, format!("hfc.se1+se2 = {} != 550912 exactly", se))?;
    Ok(format!("hfc.se1+se2 params = {} (required 550912, tolerance ±1000)", se))
}

/// Criterion 2: upsample/concat fusion itself costs zero parameters and the
/// cascade channel trace is 768 -> 1280 -> 1664.
fn c02_fusion() -> Result<String, String> {
    let cfg = ModelConfig::variant(Variant::B);
    let rep = profile(&cfg).map_err(|e| e.to_string())?;
    let fusion_only = rep.params_with_prefix("hfc.") - rep.params_with_prefix("hfc.se");
    ensure(fusion_only == 0, format!("fusion layers report {} params, want 0", fusion_only))?;
    let trace = cascade_trace(&cfg);
    ensure(
        trace == [768, 1280, 1664],
        format!("channel trace {:?}, want [768, 1280, 1664]", trace),
    )?;
    Ok(format!("fusion params = 0, channel trace {:?}", trace))
}

/// Criterion 3: head parameter count is affine in the expansion ratio r
/// (second differences exactly zero over r = 1..4); absolute values logged.
fn c03_head_affinity() -> Result<String, String> {
    let mut cfg = ModelConfig::variant(Variant::B);
    let mut p = Vec::new();
    for r in 1..=4usize {
        cfg.eg_ratio = r;
        p.push(profile(&cfg).map_err(|e| e.to_string())?.params_with_prefix("head.") as i64);
    }
    let d: Vec<i64> = p.windows(2).map(|w| w[1] - w[0]).collect();
    ensure(
        d[0] == d[1] && d[1] == d[2],
        format!("first differences {:?} are not constant (p = {:?})", d, p),
    )?;
    Ok(format!("head params over r=1..4: {:?}, constant slope {}", p, d[0]))
}

/// Criterion 4: B-config forward shapes on a 128/256 crop pair.
fn c04_shapes() -> Result<String, String> {
    let cfg = ModelConfig::variant(Variant::B);
    let mut model = Model::<f32>::new(&cfg, 0).map_err(|e| e.to_string())?;
    let fill = |shape: &[usize]| {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|i| (i as f32 * 0.618_034) % 1.0).collect();
        NdArray::from_vec(shape, data).unwrap()
    };
    let z = fill(&[1, 3, 128, 128]);
    let x = fill(&[1, 3, 256, 256]);
    let mut tape = Tape::new();
    tape.set_check_finite(false);
    let Model { store, backbone, hfc, head, .. } = &mut model;
    let mut ctx = Ctx::new(&mut tape, store, false);
    let zv = ctx.tape.constant(z);
    let xv = ctx.tape.constant(x);
    let pyr = backbone.extract_pyramid(&mut ctx, zv, xv).map_err(|e| e.to_string())?;
    let shape = |ctx: &Ctx<f32>, v| ctx.tape.value(v).shape().to_vec();
    let (s1, s2, s3) = (shape(&ctx, pyr.shallow), shape(&ctx, pyr.mid), shape(&ctx, pyr.deep));
    ensure(s1 == [1, 384, 16, 16], format!("shallow stage shape {:?}", s1))?;
    ensure(s2 == [1, 512, 8, 8], format!("mid stage shape {:?}", s2))?;
    ensure(s3 == [1, 768, 4, 4], format!("deep stage shape {:?}", s3))?;
    let fused = hfc.forward(&mut ctx, &pyr).map_err(|e| e.to_string())?;
    let sf = shape(&ctx, fused);
    ensure(sf == [1, 1664, 16, 16], format!("fused map shape {:?}", sf))?;
    let hv = head.forward(&mut ctx, fused).map_err(|e| e.to_string())?;
    let (hs, ho, hz) = (shape(&ctx, hv.score), shape(&ctx, hv.offset), shape(&ctx, hv.size));
    ensure(hs == [1, 1, 16, 16], format!("score map shape {:?}", hs))?;
    ensure(ho == [1, 2, 16, 16], format!("offset map shape {:?}", ho))?;
    ensure(hz == [1, 2, 16, 16], format!("size map shape {:?}", hz))?;
    Ok("stages (384,16,16)/(512,8,8)/(768,4,4), fused (1664,16,16), head 1/2/2 maps".to_string())
}

/// Criterion 5: 64-bit central finite differences over every trainable group
/// in all five scopes, floored relative error < 1e-5.
fn c05_gradients() -> Result<String, String> {
    let mut groups = 0usize;
    let mut worst = 0.0f64;
    let mut fails = Vec::new();
    for scope in Scope::ALL {
        let outcomes = run_scope(scope).map_err(|e| format!("{}: {}", scope.name(), e))?;
        for o in &outcomes {
            groups += 1;
            if o.max_rel > worst {
                worst = o.max_rel;
            }
            if !o.passed() {
                fails.push(format!("{}:{} ({:.2e})", scope.name(), o.group, o.max_rel));
            }
        }
    }
    ensure(fails.is_empty(), format!("groups over tolerance {:.0e}: {}", FD_TOLERANCE, fails.join(", ")))?;
    Ok(format!(
        "{} parameter groups over 5 scopes, worst rel err {:.2e} (tolerance 1e-5)",
        groups, worst
    ))
}

/// Criterion 6: optimized kernels against independent literal oracles.
fn c06_oracles() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let mut randn = |shape: &[usize], scale: f32| {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| (rng.gen::<f32>() * 2.0 - 1.0) * scale).collect();
        NdArray::from_vec(shape, data).unwrap()
    };

    // conv2d / depthwise / strided vs five nested loops, f32, < 1e-5.
    let geoms: [(&str, [usize; 4], [usize; 4], usize, usize, usize, bool); 3] = [
        ("conv3x3", [2, 3, 12, 12], [8, 3, 3, 3], 1, 1, 1, true),
        ("conv5x5s2", [1, 4, 13, 13], [6, 4, 5, 5], 2, 2, 1, false),
        ("depthwise", [2, 8, 9, 9], [8, 1, 3, 3], 1, 1, 8, true),
    ];
    let mut conv_worst = 0.0f32;
    for (label, xs, ws, stride, padding, groups, bias) in geoms {
        let x = randn(&xs, 1.0);
        let w = randn(&ws, 0.5);
        let b: Option<Vec<f32>> = bias.then(|| (0..ws[0]).map(|i| i as f32 * 0.1 - 0.3).collect());
        let want = reference::conv2d_naive(&x, &w, b.as_deref(), stride, padding, groups)
            .map_err(|e| e.to_string())?;
        let mut tape = Tape::<f32>::new();
        let xv = tape.leaf(x);
        let wv = tape.leaf(w);
        let bv = b.map(|b| tape.leaf(NdArray::from_vec(&[ws[0]], b).unwrap()));
        let got = tape.conv2d(xv, wv, bv, stride, padding, groups).map_err(|e| e.to_string())?;
        let diff = max_abs_diff(tape.value(got).data(), want.data());
        ensure(diff < 1e-5, format!("{}: max |diff| {} >= 1e-5", label, diff))?;
        conv_worst = conv_worst.max(diff);
    }

    // linear vs nested loops, f32, < 1e-5.
    let x = randn(&[5, 7, 32], 1.0);
    let w = randn(&[16, 32], 0.5);
    let b: Vec<f32> = (0..16).map(|i| i as f32 * 0.05).collect();
    let want = reference::linear_naive(&x, &w, Some(&b)).map_err(|e| e.to_string())?;
    let mut tape = Tape::<f32>::new();
    let xv = tape.leaf(x);
    let wv = tape.leaf(w);
    let bv = tape.leaf(NdArray::from_vec(&[16], b).unwrap());
    let got = tape.linear(xv, wv, Some(bv)).map_err(|e| e.to_string())?;
    let lin_diff = max_abs_diff(tape.value(got).data(), want.data());
    ensure(lin_diff < 1e-5, format!("linear: max |diff| {} >= 1e-5", lin_diff))?;

    // iou/giou vs pixel counting on 1,000 integer-coordinate pairs, < 1e-3.
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let mut box_worst = 0.0f64;
    for _ in 0..1_000 {
        let mut rb = || {
            BBox::new(
                rng.gen_range(0..24) as f64,
                rng.gen_range(0..24) as f64,
                rng.gen_range(1..=12) as f64,
                rng.gen_range(1..=12) as f64,
            )
        };
        let (a, b) = (rb(), rb());
        let di = (a.iou(&b) - reference::iou_pixels(&a, &b, 4.0)).abs();
        let dg = (a.giou(&b) - reference::giou_pixels(&a, &b, 4.0)).abs();
        ensure(di < 1e-3, format!("iou oracle diff {} on {:?} vs {:?}", di, a, b))?;
        ensure(dg < 1e-3, format!("giou oracle diff {} on {:?} vs {:?}", dg, a, b))?;
        box_worst = box_worst.max(di).max(dg);
    }

    // focal loss vs the direct per-cell sum, f64, < 1e-9.
    let mut rng = ChaCha8Rng::seed_from_u64(62);
    let g = 4usize;
    let mut focal_worst = 0.0f64;
    for _ in 0..5 {
        let n = 2usize;
        let mut targets: Vec<TargetMaps<f64>> = Vec::new();
        for _ in 0..n {
            let cx = rng.gen::<f64>() * 0.6 + 0.2;
            let cy = rng.gen::<f64>() * 0.6 + 0.2;
            targets.push(
                make_targets(&BBox::from_center(cx, cy, 0.3, 0.2), g).map_err(|e| e.to_string())?,
            );
        }
        let pred: Vec<f64> = (0..n * g * g).map(|_| rng.gen::<f64>() * 0.96 + 0.02).collect();
        let mut tape = Tape::new();
        let pv = tape.leaf(NdArray::from_vec(&[n, 1, g, g], pred.clone()).unwrap());
        let got = cgtrack_core::objective::focal_loss(&mut tape, pv, &targets)
            .map_err(|e| e.to_string())?;
        let got = tape.value(got).data()[0];
        let want = targets
            .iter()
            .enumerate()
            .map(|(s, t)| {
                reference::focal_naive(
                    &pred[s * g * g..(s + 1) * g * g],
                    t.cls.data(),
                    t.center_cell.0 * g + t.center_cell.1,
                )
            })
            .sum::<f64>()
            / n as f64;
        let diff = (got - want).abs();
        ensure(diff < 1e-9, format!("focal oracle diff {} >= 1e-9", diff))?;
        focal_worst = focal_worst.max(diff);
    }

    Ok(format!(
        "conv/linear worst |diff| {:.1e} (<1e-5), iou/giou worst {:.1e} over 1000 pairs (<1e-3), focal worst {:.1e} (<1e-9)",
        conv_worst.max(lin_diff),
        box_worst,
        focal_worst
    ))
}

/// Criterion 7: exact loss identities.
fn c07_loss_identities() -> Result<String, String> {
    // Perfect prediction drives the total to (numerical) zero.
    let g = 8usize;
    let gt = BBox::from_center(0.5, 0.25, 0.25, 0.25);
    let t: TargetMaps<f64> = make_targets(&gt, g).map_err(|e| e.to_string())?;
    let (i, j) = t.center_cell;
    let mut s = vec![1e-9; g * g];
    s[i * g + j] = 1.0 - 1e-9;
    let mut off = vec![0.0; 2 * g * g];
    let mut sz = vec![0.0; 2 * g * g];
    for k in 0..g * g {
        off[k] = t.offset.0;
        off[g * g + k] = t.offset.1;
        sz[k] = t.size.0;
        sz[g * g + k] = t.size.1;
    }
    let mut tape = Tape::new();
    let head = HeadVars {
        score: tape.leaf(NdArray::from_vec(&[1, 1, g, g], s).unwrap()),
        offset: tape.leaf(NdArray::from_vec(&[1, 2, g, g], off).unwrap()),
        size: tape.leaf(NdArray::from_vec(&[1, 2, g, g], sz).unwrap()),
    };
    let l = total_loss(&mut tape, &head, &[t], &LossWeights::default()).map_err(|e| e.to_string())?;
    let total = tape.value(l.total).data()[0];
    ensure(total < 1e-9, format!("perfect-prediction total loss {} >= 1e-9", total))?;

    // giou(A, A) = 1 exactly, on several boxes.
    for b in [
        BBox::new(0.0, 0.0, 1.0, 1.0),
        BBox::new(3.25, -2.0, 7.5, 0.125),
        BBox::new(-5.0, 4.0, 2.0, 9.0),
    ] {
        ensure(b.giou(&b) == 1.0, format!("giou(A,A) = {} != 1 for {:?}", b.giou(&b), b))?;
    }

    // Worked example: (0,0,10,10) vs (5,0,10,10) has IoU = GIoU = 1/3 exactly.
    let a = BBox::new(0.0, 0.0, 10.0, 10.0);
    let b = BBox::new(5.0, 0.0, 10.0, 10.0);
    ensure(a.iou(&b) == 1.0 / 3.0, format!("worked IoU {} != 1/3", a.iou(&b)))?;
    ensure(a.giou(&b) == 1.0 / 3.0, format!("worked GIoU {} != 1/3", a.giou(&b)))?;
    Ok(format!(
        "perfect-prediction total {:.1e} (<1e-9); giou(A,A)=1; worked pair IoU=GIoU=1/3 exact",
        total
    ))
}

/// Concatenates two training batches along the batch axis.
fn merge_batches(a: TrainBatch<f32>, b: TrainBatch<f32>) -> TrainBatch<f32> {
    let cat = |x: &NdArray<f32>, y: &NdArray<f32>| {
        let mut shape = x.shape().to_vec();
        shape[0] += y.shape()[0];
        let mut data = x.data().to_vec();
        data.extend_from_slice(y.data());
        NdArray::from_vec(&shape, data).unwrap()
    };
    let mut targets = a.targets;
    targets.extend(b.targets);
    TrainBatch { z: cat(&a.z, &b.z), x: cat(&a.x, &b.x), targets }
}

/// Criterion 8: overfitting a T-config model on one fixed 8-sample batch from
/// a static synthetic sequence halves the loss within 200 steps, and the
/// overfit model then tracks that sequence at IoU > 0.7 on every frame.
fn c08_overfit() -> Result<String, String> {
    let cfg = ModelConfig::variant(Variant::T);
    let mut model = Model::<f32>::new(&cfg, 42).map_err(|e| e.to_string())?;
    let synth = SynthConfig {
        velocity: (0.0, 0.0),
        scale_amplitude: 0.0,
        occluder: false,
        seed: 11,
        ..Default::default()
    };
    let seq = generate(&synth, 20).map_err(|e| e.to_string())?;

    // Half the batch is sampled at the tracker's own operating point
    // (centered crops, zero jitter), half with crop jitter for batch-statistic
    // diversity: the offset and size heads are supervised only at each
    // sample's positive cell, so the centered samples pin down exactly the
    // cell and regression targets the tracking loop will query.
    let anchors = build_batch::<f32>(&cfg, &seq, 4, 0.0, 7).map_err(|e| e.to_string())?;
    let jittered = build_batch::<f32>(&cfg, &seq, 4, 0.15, 8).map_err(|e| e.to_string())?;
    let batch = merge_batches(anchors, jittered);

    let train = TrainConfig { steps: 90, lr: 2e-3, ..Default::default() };
    let history = smoke_train(&mut model, &batch, &train).map_err(|e| e.to_string())?;
    let first = history[0].total;
    let last = history.last().unwrap().total;
    let steps = history.len();
    ensure(
        steps <= 200,
        format!("{} training steps exceed the 200-step budget", steps),
    )?;
    ensure(
        last <= 0.5 * first,
        format!("loss {:.3} -> {:.3} after {} steps: reduction under 50%", first, last, steps),
    )?;

    // Re-estimate BatchNorm running statistics from the training batch at the
    // final weights, so eval-mode tracking sees the same normalization the
    // heads were fit under.
    model.refresh_bn(&batch.z, &batch.x).map_err(|e| e.to_string())?;

    let boxes = track_sequence(&mut model, &seq.frames, &seq.record.frames[0], &TrackConfig::default())
        .map_err(|e| e.to_string())?;
    let mut min_iou = f64::INFINITY;
    for (k, (b, g)) in boxes.iter().zip(&seq.record.frames).enumerate() {
        let iou = b.iou(g);
        min_iou = min_iou.min(iou);
        ensure(iou > 0.7, format!("frame {}: IoU {:.3} <= 0.7 after overfit", k, iou))?;
    }
    Ok(format!(
        "loss {:.2} -> {:.2} ({:.0}% drop, {} steps <= 200); tracked min IoU {:.3} > 0.7 over {} frames",
        first,
        last,
        100.0 * (1.0 - last / first),
        steps,
        min_iou,
        boxes.len()
    ))
}

/// Criterion 9: evaluation fixtures with exact expected values, and curve
/// monotonicity on randomized inputs.
fn c09_metrics() -> Result<String, String> {
    // results == ground truth.
    let gt: Vec<BBox> = (0..7)
        .map(|k| BBox::new(10.0 + k as f64, 20.0, 30.0, 40.0))
        .collect();
    let rec = SequenceRecord::new("exact", gt.clone()).map_err(|e| e.to_string())?;
    let rep = evaluate(&gt, &rec).map_err(|e| e.to_string())?;
    ensure(rep.precision_at_20 == 1.0, format!("precision_at_20 = {} != 1", rep.precision_at_20))?;
    ensure(
        rep.success_auc == 20.0 / 21.0,
        format!("success_auc = {} != 20/21", rep.success_auc),
    )?;

    // Every frame at IoU exactly 0.5.
    let gt: Vec<BBox> = (0..5).map(|k| BBox::new(k as f64 * 3.0, 0.0, 2.0, 1.0)).collect();
    let half: Vec<BBox> = gt.iter().map(|b| BBox::new(b.x, b.y, 1.0, 1.0)).collect();
    let rec = SequenceRecord::new("half", gt).map_err(|e| e.to_string())?;
    let rep = evaluate(&half, &rec).map_err(|e| e.to_string())?;
    ensure(
        rep.success_auc == 10.0 / 21.0,
        format!("all-0.5 success_auc = {} != 10/21", rep.success_auc),
    )?;

    // Monotone curves on random boxes.
    let mut rng = ChaCha8Rng::seed_from_u64(90);
    let rb = |rng: &mut ChaCha8Rng| {
        BBox::new(
            rng.gen::<f64>() * 50.0,
            rng.gen::<f64>() * 50.0,
            rng.gen::<f64>() * 30.0 + 1.0,
            rng.gen::<f64>() * 30.0 + 1.0,
        )
    };
    let gt: Vec<BBox> = (0..50).map(|_| rb(&mut rng)).collect();
    let res: Vec<BBox> = (0..50).map(|_| rb(&mut rng)).collect();
    let rec = SequenceRecord::new("random", gt).map_err(|e| e.to_string())?;
    let rep = evaluate(&res, &rec).map_err(|e| e.to_string())?;
    for w in rep.precision_curve.windows(2) {
        ensure(w[1] >= w[0], format!("precision curve not nondecreasing: {:?}", w))?;
    }
    for w in rep.success_curve.windows(2) {
        ensure(w[1] <= w[0], format!("success curve not nonincreasing: {:?}", w))?;
    }
    Ok("exact fixtures 1.0 and 20/21; all-0.5 fixture 10/21; random curves monotone".to_string())
}

/// Criterion 10: the full synth -> smoke-train -> track -> eval pipeline,
/// run twice through the installed binary with one seed, produces
/// byte-identical result and report files.
fn c10_determinism() -> Result<String, String> {
    let bin = env!("CARGO_BIN_EXE_cgtrack");
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = "model.variant = T\nsynth.frames = 6\ntrain.steps = 2\ntrain.batch = 4\nseed = 123\n";
    let cfg_path = root.path().join("run.cfg");
    std::fs::write(&cfg_path, config).map_err(|e| e.to_string())?;

    let run = |dir: &Path| -> Result<(Vec<u8>, Vec<u8>), String> {
        std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
        let seq = dir.join("seq");
        let gt = seq.join("groundtruth.txt");
        let ckpt = dir.join("model.ckpt");
        let results = dir.join("results.txt");
        let report = dir.join("report.csv");
        let steps: [&[&str]; 5] = [
            &["synth", "--config", cfg_path.to_str().unwrap(), "--out", seq.to_str().unwrap()],
            &["init", "--variant", "T", "--out", ckpt.to_str().unwrap(), "--seed", "123"],
            &[
                "smoke-train",
                "--ckpt",
                ckpt.to_str().unwrap(),
                "--data",
                seq.to_str().unwrap(),
                "--config",
                cfg_path.to_str().unwrap(),
            ],
            &[
                "track",
                "--ckpt",
                ckpt.to_str().unwrap(),
                "--seq",
                seq.to_str().unwrap(),
                "--out",
                results.to_str().unwrap(),
                "--config",
                cfg_path.to_str().unwrap(),
            ],
            &[
                "eval",
                "--results",
                results.to_str().unwrap(),
                "--gt",
                gt.to_str().unwrap(),
                "--report",
                report.to_str().unwrap(),
            ],
        ];
        for args in steps {
            let out = Command::new(bin).args(args).output().map_err(|e| e.to_string())?;
            if !out.status.success() {
                let mut msg = String::new();
                let _ = write!(msg, "`cgtrack {}` failed: ", args.join(" "));
                msg.push_str(String::from_utf8_lossy(&out.stderr).trim());
                return Err(msg);
            }
        }
        let r = std::fs::read(&results).map_err(|e| e.to_string())?;
        let p = std::fs::read(&report).map_err(|e| e.to_string())?;
        Ok((r, p))
    };

    let (res_a, rep_a) = run(&root.path().join("run1"))?;
    let (res_b, rep_b) = run(&root.path().join("run2"))?;
    ensure(!res_a.is_empty() && !rep_a.is_empty(), "pipeline produced empty files")?;
    ensure(res_a == res_b, "result files differ between identically seeded runs")?;
    ensure(rep_a == rep_b, "report files differ between identically seeded runs")?;
    Ok(format!(
        "result ({} B) and report ({} B) files byte-identical across two seeded runs",
        res_a.len(),
        rep_a.len()
    ))
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}
