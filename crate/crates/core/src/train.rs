//! Smoke training: batch assembly from synthetic sequences, a decoupled
//! weight-decay Adam optimizer, and the step loop with a CSV loss history.

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::objective::{make_targets, total_loss, LossWeights, TargetMaps};
use crate::params::{ParamId, ParamStore};
use crate::synth::SynthSequence;
use crate::tape::Tape;
use crate::tensor::{Elem, NdArray};
use crate::track::crop_resize;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Adam with decoupled weight decay. Moments are kept in f64 regardless of
/// the parameter element type, so update arithmetic is identical for f32 and
/// f64 models.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            moments: Vec::new(),
        }
    }

    /// Applies one update over `(parameter, gradient)` pairs. With `lr == 0`
    /// parameters are left bit-identical (weight decay included).
    pub fn step<T: Elem>(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[(ParamId, Vec<T>)],
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, g) in grads {
            let arr = store.get_mut(*id);
            if arr.numel() != g.len() {
                return Err(Error::dim(
                    "adamw",
                    format!(
                        "gradient length {} does not match parameter '{}' ({} elements)",
                        g.len(),
                        arr.numel(),
                        arr.numel()
                    ),
                ));
            }
            let slot = id.index();
            if self.moments.len() <= slot {
                self.moments.resize_with(slot + 1, || None);
            }
            let (m, v) = self.moments[slot]
                .get_or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            if self.lr == 0.0 {
                // Still track moments so a later nonzero-lr schedule would be
                // well-defined, but leave the parameter untouched.
                for (k, gk) in g.iter().enumerate() {
                    let gf = gk.to_f64();
                    m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gf;
                    v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gf * gf;
                }
                continue;
            }
            let data = arr.data_mut();
            for (k, gk) in g.iter().enumerate() {
                let gf = gk.to_f64();
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gf;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gf * gf;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                let p = data[k].to_f64();
                let stepped =
                    p - self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p);
                data[k] = T::from_f64(stepped);
            }
        }
        Ok(())
    }
}

/// A fixed training batch: stacked template and search crops plus per-sample
/// supervision in normalized search-crop coordinates.
pub struct TrainBatch<T: Elem> {
    pub z: NdArray<T>,
    pub x: NdArray<T>,
    pub targets: Vec<TargetMaps<T>>,
}

/// Stacks `[1, c, h, w]` arrays along the batch axis.
fn stack<T: Elem>(items: &[NdArray<T>]) -> Result<NdArray<T>> {
    let first = items.first().ok_or_else(|| Error::Input("cannot stack zero arrays".into()))?;
    let (_, c, h, w) = first.dims4()?;
    let mut data = Vec::with_capacity(items.len() * c * h * w);
    for it in items {
        if it.shape() != first.shape() {
            return Err(Error::dim("stack", "mismatched sample shapes"));
        }
        data.extend_from_slice(it.data());
    }
    NdArray::from_vec(&[items.len(), c, h, w], data)
}

/// Builds an `n`-sample batch from a synthetic sequence: template cropped on
/// the ground truth, search cropped on a jittered copy of it (so offsets and
/// sizes carry signal), targets mapped into the search crop.
pub fn build_batch<T: Elem>(
    cfg: &ModelConfig,
    seq: &SynthSequence,
    n: usize,
    jitter: f64,
    seed: u64,
) -> Result<TrainBatch<T>> {
    if n == 0 {
        return Err(Error::Input("batch size must be positive".into()));
    }
    if !(0.0..=0.25).contains(&jitter) {
        return Err(Error::Input(format!("jitter {} outside [0, 0.25]", jitter)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tsize = cfg.backbone.template_size;
    let ssize = cfg.backbone.search_size;
    let grid = cfg.grid();
    let mut zs = Vec::with_capacity(n);
    let mut xs = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for k in 0..n {
        let fi = k % seq.frames.len();
        let frame = &seq.frames[fi];
        let gt = seq.record.frames[fi];
        let (zimg, _) = crop_resize(frame, &gt, 2.0, tsize)?;
        let jittered = BBox::from_center(
            gt.x + gt.w / 2.0 + rng.gen_range(-jitter..=jitter) * gt.w,
            gt.y + gt.h / 2.0 + rng.gen_range(-jitter..=jitter) * gt.h,
            gt.w * (1.0 + rng.gen_range(-jitter..=jitter)),
            gt.h * (1.0 + rng.gen_range(-jitter..=jitter)),
        );
        let (ximg, affine) = crop_resize(frame, &jittered, 4.0, ssize)?;
        let gt_crop = affine.image_to_crop(&gt);
        targets.push(make_targets::<T>(&gt_crop, grid)?);
        zs.push(zimg.to_ndarray::<T>());
        xs.push(ximg.to_ndarray::<T>());
    }
    Ok(TrainBatch { z: stack(&zs)?, x: stack(&xs)?, targets })
}

#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub loss_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            lr: 4e-5,
            weight_decay: 1e-4,
            loss_weights: LossWeights::default(),
        }
    }
}

/// One row of the loss history.
#[derive(Clone, Copy, Debug)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub focal: f64,
    pub giou: f64,
    pub l1: f64,
}

/// Renders the history as CSV (`step,total,focal,giou,l1`).
pub fn history_csv(history: &[StepRecord]) -> String {
    let mut out = String::from("step,total,focal,giou,l1\n");
    for r in history {
        out.push_str(&format!("{},{},{},{},{}\n", r.step, r.total, r.focal, r.giou, r.l1));
    }
    out
}

/// Runs `steps` optimization steps on one fixed batch. Aborts with a
/// diagnostic naming the first non-finite array if the loss leaves the
/// finite range.
pub fn smoke_train<T: Elem>(
    model: &mut Model<T>,
    batch: &TrainBatch<T>,
    cfg: &TrainConfig,
) -> Result<Vec<StepRecord>> {
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut tape = Tape::new();
        tape.set_check_finite(false);
        let fwd = model.forward(&mut tape, &batch.z, &batch.x, true)?;
        let losses = total_loss(&mut tape, &fwd.head, &batch.targets, &cfg.loss_weights)?;
        let total = tape.value(losses.total).data()[0].to_f64();
        if !total.is_finite() {
            let culprit = tape
                .first_non_finite_node()
                .map(|(_, name)| name)
                .unwrap_or_else(|| "loss".to_string());
            return Err(Error::NonFinite(format!(
                "step {}: loss is non-finite; first non-finite array: {}",
                step, culprit
            )));
        }
        history.push(StepRecord {
            step,
            total,
            focal: tape.value(losses.focal).data()[0].to_f64(),
            giou: tape.value(losses.giou).data()[0].to_f64(),
            l1: tape.value(losses.l1).data()[0].to_f64(),
        });
        tape.backward(losses.total)?;
        let grads: Vec<(ParamId, Vec<T>)> = fwd
            .params
            .iter()
            .filter_map(|&(pid, var)| tape.grad(var).map(|g| (pid, g.to_vec())))
            .collect();
        opt.step(&mut model.store, &grads)?;
    }
    Ok(history)
}
