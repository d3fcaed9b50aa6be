//! Central finite-difference verification of the analytic gradients.
//!
//! Each scope builds a reduced-size, 64-bit instance of one subsystem, runs
//! one taped forward to collect analytic parameter gradients, then re-runs
//! the forward with individually perturbed parameter entries and compares
//! against the central difference quotient. Inputs are fixed up front, so the
//! loss is a pure function of the parameters.

use crate::backbone::{Backbone, BackboneConfig, PyramidVars};
use crate::error::{Error, Result};
use crate::hfc::{FusionMode, Hfc, HfcConfig};
use crate::layers::{BatchNorm2d, Conv2d, Ctx, Linear};
use crate::lgch::{HeadConfig, LgchHead};
use crate::model::{Model, ModelConfig};
use crate::objective::{total_loss, LossWeights};
use crate::params::{ParamId, ParamStore};
use crate::synth::{generate, SynthConfig};
use crate::tape::{Tape, Var};
use crate::tensor::NdArray;
use crate::train::build_batch;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central-difference step.
pub const FD_EPS: f64 = 1e-6;
/// Pass threshold on the floored relative error.
pub const FD_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Ndcore,
    Backbone,
    Hfc,
    Lgch,
    Objective,
}

impl Scope {
    pub const ALL: [Scope; 5] =
        [Scope::Ndcore, Scope::Backbone, Scope::Hfc, Scope::Lgch, Scope::Objective];

    pub fn name(&self) -> &'static str {
        match self {
            Scope::Ndcore => "ndcore",
            Scope::Backbone => "backbone",
            Scope::Hfc => "hfc",
            Scope::Lgch => "lgch",
            Scope::Objective => "objective",
        }
    }
}

/// Parses a `--scope` argument: a scope name or `all`.
pub fn parse_scopes(s: &str) -> Result<Vec<Scope>> {
    match s.trim().to_ascii_lowercase().as_str() {
        "all" => Ok(Scope::ALL.to_vec()),
        "ndcore" => Ok(vec![Scope::Ndcore]),
        "backbone" => Ok(vec![Scope::Backbone]),
        "hfc" => Ok(vec![Scope::Hfc]),
        "lgch" => Ok(vec![Scope::Lgch]),
        "objective" => Ok(vec![Scope::Objective]),
        other => Err(Error::Input(format!(
            "unknown gradcheck scope '{}' (expected ndcore|backbone|hfc|lgch|objective|all)",
            other
        ))),
    }
}

/// Result for one parameter group (one named array).
#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub group: String,
    pub entries: usize,
    pub max_rel: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel < FD_TOLERANCE
    }
}

/// Up to four probe positions spread across an array.
fn sample_indices(len: usize) -> Vec<usize> {
    let mut idx = vec![0, len / 3, 2 * len / 3, len - 1];
    idx.dedup();
    idx.sort_unstable();
    idx.dedup();
    idx
}

fn randu(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> NdArray<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    NdArray::from_vec(shape, data).unwrap()
}

type Built = (Tape<f64>, Var, Vec<(ParamId, Var)>);

/// Runs the harness: one analytic pass, then central differences on sampled
/// entries of every touched trainable parameter.
fn check_groups(
    store: &mut ParamStore<f64>,
    mut build: impl FnMut(&mut ParamStore<f64>) -> Result<Built>,
) -> Result<Vec<CheckOutcome>> {
    let analytic: Vec<(ParamId, Vec<f64>)> = {
        let (mut tape, loss, pairs) = build(store)?;
        tape.backward(loss)?;
        pairs
            .iter()
            .filter_map(|&(pid, v)| tape.grad(v).map(|g| (pid, g.to_vec())))
            .collect()
    };
    if analytic.is_empty() {
        return Err(Error::Usage("no trainable parameters were touched".into()));
    }
    let mut eval = |store: &mut ParamStore<f64>| -> Result<f64> {
        let (tape, loss, _) = build(store)?;
        Ok(tape.value(loss).data()[0])
    };
    let mut out = Vec::with_capacity(analytic.len());
    for (pid, g) in &analytic {
        let name = store.name(*pid).to_string();
        let idxs = sample_indices(g.len());
        let mut max_rel = 0.0f64;
        for &i in &idxs {
            let orig = store.get(*pid).data()[i];
            store.get_mut(*pid).data_mut()[i] = orig + FD_EPS;
            let lp = eval(store)?;
            store.get_mut(*pid).data_mut()[i] = orig - FD_EPS;
            let lm = eval(store)?;
            store.get_mut(*pid).data_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * FD_EPS);
            let a = g[i];
            // Mixed comparison: the error scale never drops below 1, so the
            // test enforces |a - fd| <= tol * max(|a|, |fd|, 1). Sub-unit
            // gradients are compared at an absolute 1e-5, which keeps two
            // finite-difference artifacts from masquerading as failures:
            // evaluation roundoff divided by 2*eps, and probes whose +/- eps
            // window straddles a relu/hardswish kink.
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
        }
        out.push(CheckOutcome { group: name, entries: idxs.len(), max_rel });
    }
    Ok(out)
}

/// Weighted readout `sum(x * w)` so every output position gets a distinct
/// adjoint.
fn weighted_sum(tape: &mut Tape<f64>, x: Var, w: &NdArray<f64>) -> Result<Var> {
    let wv = tape.constant(w.clone());
    let prod = tape.hadamard(x, wv)?;
    tape.sum_all(prod)
}

fn check_ndcore() -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let mut store = ParamStore::<f64>::new();
    let conv = Conv2d::new(&mut store, &mut rng, "chain.conv", 3, 4, 3, 1, 1, 1, true)?;
    let dw = Conv2d::new(&mut store, &mut rng, "chain.dw", 4, 4, 3, 1, 1, 4, true)?;
    let bn = BatchNorm2d::new(&mut store, "chain.bn", 4)?;
    let lin = Linear::new(&mut store, &mut rng, "chain.lin", 4, 6, true)?;
    let pos = store.register(
        "chain.pos",
        crate::init::trunc_normal::<f64>(&mut rng, &[64, 4], 0.02).with_grad(),
    )?;
    let x = randu(&mut rng, &[2, 3, 8, 8], -1.0, 1.0);
    let w_bmm = randu(&mut rng, &[2, 16, 16], -0.5, 0.5);
    let w_relu = randu(&mut rng, &[2, 16, 6], -0.5, 0.5);
    let w_div = randu(&mut rng, &[2, 16, 4], -0.5, 0.5);
    let w_slice = randu(&mut rng, &[2, 16, 7], -0.5, 0.5);

    let build = |store: &mut ParamStore<f64>| -> Result<Built> {
        let mut tape = Tape::new();
        tape.set_check_finite(false);
        let (loss, pairs) = {
            let mut ctx = Ctx::new(&mut tape, store, true);
            let xv = ctx.tape.constant(x.clone());
            let c1 = conv.forward(&mut ctx, xv)?;
            let b1 = bn.forward(&mut ctx, c1)?;
            let h1 = ctx.tape.hardswish(b1)?;
            let d1 = dw.forward(&mut ctx, h1)?;
            let r6 = ctx.tape.relu6(d1)?;
            let gate = ctx.tape.sigmoid(b1)?;
            let m = ctx.tape.hadamard(r6, gate)?;
            let up = ctx.tape.upsample2x(m)?;
            let gp = ctx.tape.global_avg_pool(up)?;
            let sc = ctx.tape.scale_channels(m, gp)?;
            let rs = ctx.tape.reshape(sc, &[2, 4, 64])?;
            let pm = ctx.tape.permute(rs, &[0, 2, 1])?;
            let pv = ctx.p(pos)?;
            let ar = ctx.tape.add_rows(pm, pv)?;
            let ss = ctx.tape.subsample_grid(ar, 8, 8)?;
            let li = lin.forward(&mut ctx, ss)?;
            let sm = ctx.tape.softmax_last(li)?;
            let bm = ctx.tape.bmm(sm, li, true)?;
            let cl = ctx.tape.clamp(bm, -8.0, 8.0)?;
            let t1 = weighted_sum(ctx.tape, cl, &w_bmm)?;
            let rl = ctx.tape.relu(li)?;
            let t2 = weighted_sum(ctx.tape, rl, &w_relu)?;
            let ab = ctx.tape.abs(ss)?;
            let al = ctx.tape.add_scalar(ab, 1.1)?;
            let lg = ctx.tape.ln(al)?;
            let sgm = ctx.tape.sigmoid(ss)?;
            let den = ctx.tape.add_scalar(sgm, 1.0)?;
            let dv = ctx.tape.div(lg, den)?;
            let t3 = weighted_sum(ctx.tape, dv, &w_div)?;
            let half = ctx.tape.mul_scalar(li, 0.5)?;
            let quarter = ctx.tape.mul_scalar(li, 0.25)?;
            let mn = ctx.tape.minimum(li, half)?;
            let mx = ctx.tape.maximum(li, quarter)?;
            let mm = ctx.tape.add(mn, mx)?;
            let t4 = ctx.tape.sum_all(mm)?;
            let cc = ctx.tape.concat(li, sm, 2)?;
            let sl = ctx.tape.slice_axis(cc, 2, 2, 7)?;
            let t5 = weighted_sum(ctx.tape, sl, &w_slice)?;
            let pk = ctx.tape.pick(bm, vec![0, 7, 100, 511])?;
            let t6 = ctx.tape.sum_all(pk)?;
            let mut loss = ctx.tape.add(t1, t2)?;
            loss = ctx.tape.add(loss, t3)?;
            loss = ctx.tape.sub(loss, t4)?;
            loss = ctx.tape.add(loss, t5)?;
            loss = ctx.tape.add(loss, t6)?;
            loss = ctx.tape.mul_scalar(loss, 0.5)?;
            (loss, ctx.into_param_vars())
        };
        Ok((tape, loss, pairs))
    };
    check_groups(&mut store, build)
}

fn check_backbone() -> Result<Vec<CheckOutcome>> {
    let cfg = BackboneConfig::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(1002);
    let mut store = ParamStore::<f64>::new();
    let bb = Backbone::new(&mut store, &mut rng, &cfg)?;
    let z = randu(&mut rng, &[1, 3, 64, 64], 0.0, 1.0);
    let x = randu(&mut rng, &[1, 3, 128, 128], 0.0, 1.0);
    let w_shallow = randu(&mut rng, &[1, 8, 8, 8], -0.5, 0.5);
    let w_mid = randu(&mut rng, &[1, 12, 4, 4], -0.5, 0.5);
    let w_deep = randu(&mut rng, &[1, 16, 2, 2], -0.5, 0.5);

    let build = |store: &mut ParamStore<f64>| -> Result<Built> {
        let mut tape = Tape::new();
        tape.set_check_finite(false);
        let (loss, pairs) = {
            let mut ctx = Ctx::new(&mut tape, store, true);
            let zv = ctx.tape.constant(z.clone());
            let xv = ctx.tape.constant(x.clone());
            let pyr = bb.extract_pyramid(&mut ctx, zv, xv)?;
            let t1 = weighted_sum(ctx.tape, pyr.shallow, &w_shallow)?;
            let t2 = weighted_sum(ctx.tape, pyr.mid, &w_mid)?;
            let t3 = weighted_sum(ctx.tape, pyr.deep, &w_deep)?;
            let s = ctx.tape.add(t1, t2)?;
            let loss = ctx.tape.add(s, t3)?;
            (loss, ctx.into_param_vars())
        };
        Ok((tape, loss, pairs))
    };
    check_groups(&mut store, build)
}

fn check_hfc() -> Result<Vec<CheckOutcome>> {
    let dims = [8usize, 12, 16];
    let mut rng = ChaCha8Rng::seed_from_u64(1003);
    let mut store = ParamStore::<f64>::new();
    let hfc =
        Hfc::new(&mut store, &mut rng, dims, &HfcConfig { mode: FusionMode::Cascade, se_ratio: 2 })?;
    let shallow = randu(&mut rng, &[1, 8, 8, 8], -1.0, 1.0);
    let mid = randu(&mut rng, &[1, 12, 4, 4], -1.0, 1.0);
    let deep = randu(&mut rng, &[1, 16, 2, 2], -1.0, 1.0);
    let w = randu(&mut rng, &[1, 36, 8, 8], -0.5, 0.5);

    let build = |store: &mut ParamStore<f64>| -> Result<Built> {
        let mut tape = Tape::new();
        tape.set_check_finite(false);
        let (loss, pairs) = {
            let mut ctx = Ctx::new(&mut tape, store, true);
            let pyr = PyramidVars {
                shallow: ctx.tape.constant(shallow.clone()),
                mid: ctx.tape.constant(mid.clone()),
                deep: ctx.tape.constant(deep.clone()),
            };
            let fused = hfc.forward(&mut ctx, &pyr)?;
            let loss = weighted_sum(ctx.tape, fused, &w)?;
            (loss, ctx.into_param_vars())
        };
        Ok((tape, loss, pairs))
    };
    check_groups(&mut store, build)
}

fn check_lgch() -> Result<Vec<CheckOutcome>> {
    let cfg = HeadConfig::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(1004);
    let mut store = ParamStore::<f64>::new();
    let head = LgchHead::new(&mut store, &mut rng, &cfg)?;
    let x = randu(&mut rng, &[1, cfg.in_channels, cfg.grid, cfg.grid], -1.0, 1.0);
    let w_score = randu(&mut rng, &[1, 1, cfg.grid, cfg.grid], -0.5, 0.5);
    let w_offset = randu(&mut rng, &[1, 2, cfg.grid, cfg.grid], -0.5, 0.5);
    let w_size = randu(&mut rng, &[1, 2, cfg.grid, cfg.grid], -0.5, 0.5);

    let build = |store: &mut ParamStore<f64>| -> Result<Built> {
        let mut tape = Tape::new();
        tape.set_check_finite(false);
        let (loss, pairs) = {
            let mut ctx = Ctx::new(&mut tape, store, true);
            let xv = ctx.tape.constant(x.clone());
            let hv = head.forward(&mut ctx, xv)?;
            let t1 = weighted_sum(ctx.tape, hv.score, &w_score)?;
            let t2 = weighted_sum(ctx.tape, hv.offset, &w_offset)?;
            let t3 = weighted_sum(ctx.tape, hv.size, &w_size)?;
            let s = ctx.tape.add(t1, t2)?;
            let loss = ctx.tape.add(s, t3)?;
            (loss, ctx.into_param_vars())
        };
        Ok((tape, loss, pairs))
    };
    check_groups(&mut store, build)
}

fn check_objective() -> Result<Vec<CheckOutcome>> {
    let cfg = ModelConfig::toy();
    let mut model = Model::<f64>::new(&cfg, 1005)?;
    let seq = generate(
        &SynthConfig { velocity: (0.0, 0.0), scale_amplitude: 0.0, seed: 17, ..Default::default() },
        2,
    )?;
    let batch = build_batch::<f64>(&cfg, &seq, 2, 0.05, 3)?;
    let weights = LossWeights::default();
    let Model { store, backbone, hfc, head, .. } = &mut model;

    let build = |store: &mut ParamStore<f64>| -> Result<Built> {
        let mut tape = Tape::new();
        tape.set_check_finite(false);
        let (hv, pairs) = {
            let mut ctx = Ctx::new(&mut tape, store, true);
            let zv = ctx.tape.constant(batch.z.clone());
            let xv = ctx.tape.constant(batch.x.clone());
            let pyr = backbone.extract_pyramid(&mut ctx, zv, xv)?;
            let fused = hfc.forward(&mut ctx, &pyr)?;
            let hv = head.forward(&mut ctx, fused)?;
            (hv, ctx.into_param_vars())
        };
        let lv = total_loss(&mut tape, &hv, &batch.targets, &weights)?;
        Ok((tape, lv.total, pairs))
    };
    check_groups(store, build)
}

/// Runs one scope's checks.
pub fn run_scope(scope: Scope) -> Result<Vec<CheckOutcome>> {
    match scope {
        Scope::Ndcore => check_ndcore(),
        Scope::Backbone => check_backbone(),
        Scope::Hfc => check_hfc(),
        Scope::Lgch => check_lgch(),
        Scope::Objective => check_objective(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_all_pass(scope: Scope, expected_groups: Option<usize>) {
        let outcomes = run_scope(scope).unwrap();
        if let Some(n) = expected_groups {
            assert_eq!(outcomes.len(), n);
        }
        assert!(!outcomes.is_empty());
        for o in &outcomes {
            assert!(
                o.passed(),
                "{} group '{}' failed: max rel err {}",
                scope.name(),
                o.group,
                o.max_rel
            );
        }
    }

    #[test]
    fn ndcore_chain_gradients_match_finite_differences() {
        // conv w/b, dw w/b, bn gamma/beta, linear w/b, pos table = 9 groups.
        assert_all_pass(Scope::Ndcore, Some(9));
    }

    #[test]
    fn hfc_gradients_match_finite_differences() {
        // Two SE blocks, two bias-free linears each.
        assert_all_pass(Scope::Hfc, Some(4));
    }

    #[test]
    fn lgch_gradients_match_finite_differences() {
        assert_all_pass(Scope::Lgch, None);
    }

    #[test]
    fn scope_parsing() {
        assert_eq!(parse_scopes("all").unwrap().len(), 5);
        assert_eq!(parse_scopes(" Backbone ").unwrap(), vec![Scope::Backbone]);
        assert!(parse_scopes("everything").is_err());
    }

    #[test]
    fn probe_positions_are_deduplicated() {
        assert_eq!(sample_indices(1), vec![0]);
        assert_eq!(sample_indices(2), vec![0, 1]);
        assert_eq!(sample_indices(99), vec![0, 33, 66, 98]);
    }
}
