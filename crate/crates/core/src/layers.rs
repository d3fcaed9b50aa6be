//! Parameterized layers: thin structs holding [`ParamId`]s plus hyperparameters.
//!
//! Layers do not own values — a [`Ctx`] couples a tape with the parameter
//! store for one forward pass, registering each referenced parameter as a
//! labeled tape leaf exactly once (so gradients accumulate correctly when a
//! layer is applied twice).

use crate::error::Result;
use crate::init::trunc_normal;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Elem, NdArray};
use rand_chacha::ChaCha8Rng;

/// Weight init scale used across the model (see backbone design notes).
pub const INIT_STD: f64 = 0.02;

/// One forward pass worth of state: the recording tape, the store, and the
/// train/eval switch. `train` controls batch-norm statistics;
/// `bn_momentum` overrides every layer's running-stat momentum when set
/// (1.0 re-estimates the buffers from the current batch in one pass).
pub struct Ctx<'a, T: Elem> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a mut ParamStore<T>,
    pub train: bool,
    pub bn_momentum: Option<f64>,
    vars: Vec<Option<Var>>,
}

impl<'a, T: Elem> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a mut ParamStore<T>, train: bool) -> Self {
        let n = store.len();
        Ctx { tape, store, train, bn_momentum: None, vars: vec![None; n] }
    }

    /// Tape leaf for a parameter, memoized per pass.
    pub fn p(&mut self, id: ParamId) -> Result<Var> {
        let slot = id.index();
        if let Some(v) = self.vars[slot] {
            return Ok(v);
        }
        let arr = self.store.get(id).clone();
        let v = self.tape.leaf_labeled(arr, self.store.name(id))?;
        self.vars[slot] = Some(v);
        Ok(v)
    }

    /// Consumes the context, releasing the tape/store borrows and returning
    /// every parameter leaf registered during the pass. Callers use this to
    /// read parameter gradients after `tape.backward`.
    pub fn into_param_vars(self) -> Vec<(ParamId, Var)> {
        self.vars
            .into_iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i as u32), v)))
            .collect()
    }
}

/// 2-D convolution layer.
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2d {
    /// Registers weights under `name.weight` / `name.bias`. Weights are
    /// truncated-normal (std 0.02), biases zero.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Elem>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = trunc_normal::<T>(rng, &[cout, cin / groups, k, k], INIT_STD).with_grad();
        let w = store.register(&format!("{}.weight", name), w)?;
        let b = if bias {
            Some(store.register(&format!("{}.bias", name), NdArray::zeros(&[cout]).with_grad())?)
        } else {
            None
        };
        Ok(Conv2d { w, b, stride, padding, groups })
    }

    pub fn forward<T: Elem>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = ctx.p(self.w)?;
        let b = match self.b {
            Some(b) => Some(ctx.p(b)?),
            None => None,
        };
        ctx.tape.conv2d(x, w, b, self.stride, self.padding, self.groups)
    }
}

/// Fully connected layer over the last axis.
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Elem>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = trunc_normal::<T>(rng, &[dout, din], INIT_STD).with_grad();
        let w = store.register(&format!("{}.weight", name), w)?;
        let b = if bias {
            Some(store.register(&format!("{}.bias", name), NdArray::zeros(&[dout]).with_grad())?)
        } else {
            None
        };
        Ok(Linear { w, b })
    }

    pub fn forward<T: Elem>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = ctx.p(self.w)?;
        let b = match self.b {
            Some(b) => Some(ctx.p(b)?),
            None => None,
        };
        ctx.tape.linear(x, w, b)
    }
}

/// Batch normalization over NCHW, eps 1e-5, running-stats momentum 0.1.
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new<T: Elem>(store: &mut ParamStore<T>, name: &str, c: usize) -> Result<Self> {
        let gamma =
            store.register(&format!("{}.gamma", name), NdArray::full(&[c], T::ONE).with_grad())?;
        let beta = store.register(&format!("{}.beta", name), NdArray::zeros(&[c]).with_grad())?;
        let running_mean = store.register(&format!("{}.running_mean", name), NdArray::zeros(&[c]))?;
        let running_var =
            store.register(&format!("{}.running_var", name), NdArray::full(&[c], T::ONE))?;
        Ok(BatchNorm2d { gamma, beta, running_mean, running_var, eps: 1e-5, momentum: 0.1 })
    }

    /// A second normalization stream for a layer invoked on inputs with
    /// different distributions per call site (e.g. a stem shared by two crop
    /// resolutions): shares `gamma`/`beta` with `affine`, owns separate
    /// running buffers so each stream's eval statistics stay faithful.
    pub fn with_shared_affine<T: Elem>(
        store: &mut ParamStore<T>,
        name: &str,
        affine: &BatchNorm2d,
    ) -> Result<Self> {
        let c = store.get(affine.gamma).numel();
        let running_mean = store.register(&format!("{}.running_mean", name), NdArray::zeros(&[c]))?;
        let running_var =
            store.register(&format!("{}.running_var", name), NdArray::full(&[c], T::ONE))?;
        Ok(BatchNorm2d {
            gamma: affine.gamma,
            beta: affine.beta,
            running_mean,
            running_var,
            eps: affine.eps,
            momentum: affine.momentum,
        })
    }

    pub fn forward<T: Elem>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let gamma = ctx.p(self.gamma)?;
        let beta = ctx.p(self.beta)?;
        let rm = ctx.store.get(self.running_mean).data().to_vec();
        let rv = ctx.store.get(self.running_var).data().to_vec();
        let (n, _, h, w) = ctx.tape.value(x).dims4()?;
        let (y, stats) =
            ctx.tape.batch_norm(x, gamma, beta, &rm, &rv, T::from_f64(self.eps), ctx.train)?;
        if let Some((batch_mean, mut batch_var)) = stats {
            // The ordinary update stores the unbiased variance; a momentum
            // override stores the statistics exactly as used for
            // normalization, so calibration makes eval reproduce train-mode
            // outputs on the calibration batch.
            let m = n * h * w;
            if ctx.bn_momentum.is_none() && m > 1 {
                let f = T::from_f64(m as f64 / (m as f64 - 1.0));
                for v in &mut batch_var {
                    *v = *v * f;
                }
            }
            let mom = T::from_f64(ctx.bn_momentum.unwrap_or(self.momentum));
            let keep = T::ONE - mom;
            let rm_arr = ctx.store.get_mut(self.running_mean);
            for (r, &b) in rm_arr.data_mut().iter_mut().zip(&batch_mean) {
                *r = *r * keep + b * mom;
            }
            let rv_arr = ctx.store.get_mut(self.running_var);
            for (r, &b) in rv_arr.data_mut().iter_mut().zip(&batch_var) {
                *r = *r * keep + b * mom;
            }
        }
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn ctx_memoizes_parameter_leaves() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::new(&mut store, &mut rng, "l", 3, 3, true).unwrap();
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &mut store, false);
        let x = ctx.tape.leaf(NdArray::<f64>::zeros(&[2, 3]));
        let _ = lin.forward(&mut ctx, x).unwrap();
        let n = ctx.tape.len();
        // Applying the layer again must not re-register its parameters.
        let _ = lin.forward(&mut ctx, x).unwrap();
        assert_eq!(ctx.tape.len(), n + 1);
    }

    #[test]
    fn shared_layer_accumulates_gradient_across_uses() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lin = Linear::new(&mut store, &mut rng, "l", 2, 2, false).unwrap();
        let x = NdArray::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();

        let grad_for_uses = |store: &mut ParamStore<f64>, uses: usize| -> Vec<f64> {
            let mut tape = Tape::new();
            let pvars = {
                let mut ctx = Ctx::new(&mut tape, store, false);
                let xv = ctx.tape.leaf(x.clone());
                let mut acc = lin.forward(&mut ctx, xv).unwrap();
                for _ in 1..uses {
                    let y = lin.forward(&mut ctx, xv).unwrap();
                    acc = ctx.tape.add(acc, y).unwrap();
                }
                let loss = ctx.tape.sum_all(acc).unwrap();
                let pv = ctx.into_param_vars();
                tape.backward(loss).unwrap();
                pv
            };
            let (_, wvar) = pvars.into_iter().find(|(id, _)| *id == lin.w).unwrap();
            tape.grad(wvar).unwrap().to_vec()
        };

        let g1 = grad_for_uses(&mut store, 1);
        let g2 = grad_for_uses(&mut store, 2);
        for (a, b) in g2.iter().zip(&g1) {
            assert!((a - 2.0 * b).abs() < 1e-12, "double use must double the gradient");
        }
    }

    #[test]
    fn batch_norm_layer_updates_running_stats_in_train_only() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 2).unwrap();
        let x = NdArray::from_vec(&[1, 2, 1, 2], vec![1.0, 3.0, -1.0, 5.0]).unwrap();
        {
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, &mut store, false);
            let xv = ctx.tape.leaf(x.clone());
            bn.forward(&mut ctx, xv).unwrap();
        }
        assert_eq!(store.get(bn.running_mean).data(), &[0.0, 0.0], "eval must not mutate");
        {
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, &mut store, true);
            let xv = ctx.tape.leaf(x.clone());
            bn.forward(&mut ctx, xv).unwrap();
        }
        // Batch means are 2.0 per channel; running = 0.9*0 + 0.1*2.
        let rm = store.get(bn.running_mean).data();
        assert!((rm[0] - 0.2).abs() < 1e-12 && (rm[1] - 0.2).abs() < 1e-12);
    }
}
