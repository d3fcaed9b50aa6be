//! Hierarchical one-stream backbone.
//!
//! A LeViT-style feature extractor adapted to tracking: the template and
//! search crops are patch-embedded to stride-16 token grids, flattened,
//! concatenated, and processed jointly by three transformer stages. Between
//! stages a shrink-attention module downsamples each image's token grid by 2×
//! per side (queries from a strided subset, keys/values joint) while widening
//! channels. The search-region tokens of each stage are reshaped back into
//! 2-D correlation maps, giving a three-level pyramid.

use crate::error::{Error, Result};
use crate::layers::{BatchNorm2d, Conv2d, Ctx, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tape::Var;
use crate::tensor::Elem;
use crate::init::trunc_normal;
use rand_chacha::ChaCha8Rng;

/// Backbone hyperparameters. See [`BackboneConfig::validate`] for invariants.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub stage_dims: [usize; 3],
    pub stage_depths: [usize; 3],
    pub stage_heads: [usize; 3],
    /// Per-head query/key width; per-head value width is twice this in stage
    /// blocks and four times this in shrink modules.
    pub key_dim: usize,
    pub mlp_ratio: usize,
    pub template_size: usize,
    pub search_size: usize,
    pub patch_stride: usize,
}

impl BackboneConfig {
    /// Small configuration for gradient checks and fast tests.
    pub fn toy() -> Self {
        BackboneConfig {
            stage_dims: [8, 12, 16],
            stage_depths: [1, 1, 1],
            stage_heads: [1, 2, 2],
            key_dim: 4,
            mlp_ratio: 2,
            template_size: 64,
            search_size: 128,
            patch_stride: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_stride != 16 {
            return Err(Error::Input("patch_stride must be 16 (four stride-2 convolutions)".into()));
        }
        if !(self.stage_dims[0] < self.stage_dims[1] && self.stage_dims[1] < self.stage_dims[2]) {
            return Err(Error::Input(format!(
                "stage_dims must be strictly increasing, got {:?}",
                self.stage_dims
            )));
        }
        if self.stage_dims[0] % 8 != 0 {
            return Err(Error::Input("stage_dims[0] must be divisible by 8 (patch schedule)".into()));
        }
        let div = self.patch_stride * 4;
        if self.template_size % div != 0 || self.search_size % div != 0 {
            return Err(Error::Input(format!(
                "template/search sizes must be divisible by {} (two shrink steps), got {}/{}",
                div, self.template_size, self.search_size
            )));
        }
        if self.stage_depths.iter().any(|&d| d == 0)
            || self.stage_heads.iter().any(|&h| h == 0)
            || self.key_dim == 0
            || self.mlp_ratio == 0
        {
            return Err(Error::Input("depths, heads, key_dim, mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    /// Template grid side at stage `i` (0-based; halves per shrink).
    pub fn template_grid(&self, stage: usize) -> usize {
        (self.template_size / self.patch_stride) >> stage
    }

    /// Search grid side at stage `i`.
    pub fn search_grid(&self, stage: usize) -> usize {
        (self.search_size / self.patch_stride) >> stage
    }
}

/// The three search-region correlation maps (shallow = stage 1 ... deep =
/// stage 3), as tape variables of shape `[n, c_i, g_i, g_i]`.
pub struct PyramidVars {
    pub shallow: Var,
    pub mid: Var,
    pub deep: Var,
}

struct Block {
    qkv: Linear,
    proj: Linear,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
    key_dim: usize,
}

struct Shrink {
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    heads: usize,
    key_dim: usize,
}

/// Assembled backbone (parameter handles only; values live in the store).
pub struct Backbone {
    pub cfg: BackboneConfig,
    patch_convs: Vec<Conv2d>,
    // The stem runs once per crop stream; the streams share conv and affine
    // weights but keep separate running statistics (template vs search
    // resolutions have different activation distributions).
    patch_bns: Vec<BatchNorm2d>,
    patch_bns_search: Vec<BatchNorm2d>,
    pos_template: ParamId,
    pos_search: ParamId,
    stages: Vec<Vec<Block>>,
    shrinks: Vec<Shrink>,
}

impl Backbone {
    pub fn new<T: Elem>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        cfg: &BackboneConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let c1 = cfg.stage_dims[0];
        let schedule = [3, c1 / 8, c1 / 4, c1 / 2, c1];
        let mut patch_convs = Vec::new();
        let mut patch_bns = Vec::new();
        let mut patch_bns_search = Vec::new();
        for i in 0..4 {
            patch_convs.push(Conv2d::new(
                store,
                rng,
                &format!("backbone.patch.conv{}", i + 1),
                schedule[i],
                schedule[i + 1],
                3,
                2,
                1,
                1,
                false,
            )?);
            let bn = BatchNorm2d::new(store, &format!("backbone.patch.bn{}", i + 1), schedule[i + 1])?;
            patch_bns_search.push(BatchNorm2d::with_shared_affine(
                store,
                &format!("backbone.patch.bn{}.search", i + 1),
                &bn,
            )?);
            patch_bns.push(bn);
        }
        let lt = cfg.template_grid(0) * cfg.template_grid(0);
        let ls = cfg.search_grid(0) * cfg.search_grid(0);
        let pos_template = store.register(
            "backbone.pos.template",
            trunc_normal::<T>(rng, &[lt, c1], crate::layers::INIT_STD).with_grad(),
        )?;
        let pos_search = store.register(
            "backbone.pos.search",
            trunc_normal::<T>(rng, &[ls, c1], crate::layers::INIT_STD).with_grad(),
        )?;
        let mut stages = Vec::new();
        for s in 0..3 {
            let c = cfg.stage_dims[s];
            let heads = cfg.stage_heads[s];
            let dk = cfg.key_dim;
            let dv = 2 * dk;
            let mut blocks = Vec::new();
            for b in 0..cfg.stage_depths[s] {
                let base = format!("backbone.stage{}.block{}", s + 1, b);
                blocks.push(Block {
                    qkv: Linear::new(store, rng, &format!("{}.attn.qkv", base), c, heads * (2 * dk + dv), true)?,
                    proj: Linear::new(store, rng, &format!("{}.attn.proj", base), heads * dv, c, true)?,
                    fc1: Linear::new(store, rng, &format!("{}.mlp.fc1", base), c, c * cfg.mlp_ratio, true)?,
                    fc2: Linear::new(store, rng, &format!("{}.mlp.fc2", base), c * cfg.mlp_ratio, c, true)?,
                    heads,
                    key_dim: dk,
                });
            }
            stages.push(blocks);
        }
        let mut shrinks = Vec::new();
        for s in 0..2 {
            let cin = cfg.stage_dims[s];
            let cout = cfg.stage_dims[s + 1];
            let heads = cfg.stage_heads[s + 1];
            let dk = cfg.key_dim;
            let dv = 4 * dk;
            let base = format!("backbone.shrink{}", s + 1);
            shrinks.push(Shrink {
                q: Linear::new(store, rng, &format!("{}.q", base), cin, heads * dk, true)?,
                k: Linear::new(store, rng, &format!("{}.k", base), cin, heads * dk, true)?,
                v: Linear::new(store, rng, &format!("{}.v", base), cin, heads * dv, true)?,
                proj: Linear::new(store, rng, &format!("{}.proj", base), heads * dv, cout, true)?,
                heads,
                key_dim: dk,
            });
        }
        Ok(Backbone {
            cfg: cfg.clone(),
            patch_convs,
            patch_bns,
            patch_bns_search,
            pos_template,
            pos_search,
            stages,
            shrinks,
        })
    }

    /// Four stride-2 conv+BN steps with hardswish between: image to a
    /// stride-16 feature map of `stage_dims[0]` channels.
    fn patch_embed<T: Elem>(&self, ctx: &mut Ctx<T>, img: Var, bns: &[BatchNorm2d]) -> Result<Var> {
        let mut x = img;
        for i in 0..4 {
            x = self.patch_convs[i].forward(ctx, x)?;
            x = bns[i].forward(ctx, x)?;
            if i < 3 {
                x = ctx.tape.hardswish(x)?;
            }
        }
        Ok(x)
    }

    /// `[n, c, g, g]` map to `[n, g*g, c]` tokens.
    fn map_to_tokens<T: Elem>(ctx: &mut Ctx<T>, map: Var) -> Result<Var> {
        let (n, c, h, w) = ctx.tape.value(map).dims4()?;
        let flat = ctx.tape.reshape(map, &[n, c, h * w])?;
        ctx.tape.permute(flat, &[0, 2, 1])
    }

    /// `[n, g*g, c]` tokens to an `[n, c, g, g]` map.
    fn tokens_to_map<T: Elem>(ctx: &mut Ctx<T>, tokens: Var, side: usize) -> Result<Var> {
        let (n, l, c) = ctx.tape.value(tokens).dims3()?;
        if l != side * side {
            return Err(Error::dim(
                "tokens_to_map",
                format!("{} tokens do not form a {}x{} grid", l, side, side),
            ));
        }
        let grid = ctx.tape.reshape(tokens, &[n, side, side, c])?;
        ctx.tape.permute(grid, &[0, 3, 1, 2])
    }

    /// Patch-embeds the template crop and adds its position table.
    pub fn embed_template_tokens<T: Elem>(&self, ctx: &mut Ctx<T>, z: Var) -> Result<Var> {
        self.check_image(ctx, z, self.cfg.template_size, "template")?;
        let map = self.patch_embed(ctx, z, &self.patch_bns)?;
        let tok = Self::map_to_tokens(ctx, map)?;
        let table = ctx.p(self.pos_template)?;
        ctx.tape.add_rows(tok, table)
    }

    /// Patch-embeds the search crop and adds its position table.
    pub fn embed_search_tokens<T: Elem>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        self.check_image(ctx, x, self.cfg.search_size, "search")?;
        let map = self.patch_embed(ctx, x, &self.patch_bns_search)?;
        let tok = Self::map_to_tokens(ctx, map)?;
        let table = ctx.p(self.pos_search)?;
        ctx.tape.add_rows(tok, table)
    }

    fn check_image<T: Elem>(&self, ctx: &Ctx<T>, v: Var, size: usize, what: &str) -> Result<()> {
        let (_, c, h, w) = ctx.tape.value(v).dims4()?;
        if c != 3 || h != size || w != size {
            return Err(Error::dim(
                "backbone",
                format!("{} crop must be [n,3,{},{}], got {:?}", what, size, size, ctx.tape.value(v).shape()),
            ));
        }
        Ok(())
    }

    fn split_heads<T: Elem>(ctx: &mut Ctx<T>, x: Var, heads: usize, d: usize) -> Result<Var> {
        let (n, l, hd) = ctx.tape.value(x).dims3()?;
        debug_assert_eq!(hd, heads * d);
        let r = ctx.tape.reshape(x, &[n, l, heads, d])?;
        ctx.tape.permute(r, &[0, 2, 1, 3])
    }

    fn merge_heads<T: Elem>(ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let s = ctx.tape.value(x).shape().to_vec(); // [n, h, l, d]
        let p = ctx.tape.permute(x, &[0, 2, 1, 3])?;
        ctx.tape.reshape(p, &[s[0], s[2], s[1] * s[3]])
    }

    fn block_forward<T: Elem>(&self, ctx: &mut Ctx<T>, block: &Block, x: Var) -> Result<Var> {
        let (n, l, _c) = ctx.tape.value(x).dims3()?;
        let dk = block.key_dim;
        let dv = 2 * dk;
        let h = block.heads;
        // Joint attention over template+search tokens.
        let qkv = block.qkv.forward(ctx, x)?;
        let qkv = ctx.tape.reshape(qkv, &[n, l, h, 2 * dk + dv])?;
        let qkv = ctx.tape.permute(qkv, &[0, 2, 1, 3])?;
        let q = ctx.tape.slice_axis(qkv, 3, 0, dk)?;
        let k = ctx.tape.slice_axis(qkv, 3, dk, dk)?;
        let v = ctx.tape.slice_axis(qkv, 3, 2 * dk, dv)?;
        let scores = ctx.tape.bmm(q, k, true)?;
        let scores = ctx.tape.mul_scalar(scores, T::from_f64(1.0 / (dk as f64).sqrt()))?;
        let attn = ctx.tape.softmax_last(scores)?;
        let o = ctx.tape.bmm(attn, v, false)?;
        let o = Self::merge_heads(ctx, o)?;
        let o = ctx.tape.hardswish(o)?;
        let o = block.proj.forward(ctx, o)?;
        let x = ctx.tape.add(x, o)?;
        // MLP, residual.
        let m = block.fc1.forward(ctx, x)?;
        let m = ctx.tape.hardswish(m)?;
        let m = block.fc2.forward(ctx, m)?;
        ctx.tape.add(x, m)
    }

    /// Shrink attention from stage `i` to `i+1`: queries from the stride-2
    /// token subset of each segment, keys/values from all tokens.
    fn shrink_forward<T: Elem>(
        &self,
        ctx: &mut Ctx<T>,
        shrink: &Shrink,
        x: Var,
        tg: usize,
        sg: usize,
    ) -> Result<Var> {
        let (_n, l, _c) = ctx.tape.value(x).dims3()?;
        let (lt, ls) = (tg * tg, sg * sg);
        if lt + ls != l {
            return Err(Error::dim(
                "shrink_attention",
                format!("segments {}+{} do not cover {} tokens", lt, ls, l),
            ));
        }
        let zt = ctx.tape.slice_axis(x, 1, 0, lt)?;
        let xs = ctx.tape.slice_axis(x, 1, lt, ls)?;
        let ztq = ctx.tape.subsample_grid(zt, tg, tg)?;
        let xsq = ctx.tape.subsample_grid(xs, sg, sg)?;
        let qtok = ctx.tape.concat(ztq, xsq, 1)?;
        let dk = shrink.key_dim;
        let dv = 4 * dk;
        let h = shrink.heads;
        let q = shrink.q.forward(ctx, qtok)?;
        let q = Self::split_heads(ctx, q, h, dk)?;
        let k = shrink.k.forward(ctx, x)?;
        let k = Self::split_heads(ctx, k, h, dk)?;
        let v = shrink.v.forward(ctx, x)?;
        let v = Self::split_heads(ctx, v, h, dv)?;
        let scores = ctx.tape.bmm(q, k, true)?;
        let scores = ctx.tape.mul_scalar(scores, T::from_f64(1.0 / (dk as f64).sqrt()))?;
        let attn = ctx.tape.softmax_last(scores)?;
        let o = ctx.tape.bmm(attn, v, false)?;
        let o = Self::merge_heads(ctx, o)?;
        let o = ctx.tape.hardswish(o)?;
        shrink.proj.forward(ctx, o)
    }

    /// Runs the three stages over joined tokens and extracts the search-region
    /// correlation map of each stage.
    pub fn forward_tokens<T: Elem>(&self, ctx: &mut Ctx<T>, ztok: Var, xtok: Var) -> Result<PyramidVars> {
        let (_, _, cz) = ctx.tape.value(ztok).dims3()?;
        let (_, _, cx) = ctx.tape.value(xtok).dims3()?;
        if cz != cx {
            return Err(Error::dim("join_tokens", format!("channel mismatch {} vs {}", cz, cx)));
        }
        let mut x = ctx.tape.concat(ztok, xtok, 1)?;
        let mut maps = Vec::with_capacity(3);
        for s in 0..3 {
            for block in &self.stages[s] {
                x = self.block_forward(ctx, block, x)?;
            }
            let (tg, sg) = (self.cfg.template_grid(s), self.cfg.search_grid(s));
            let xs = ctx.tape.slice_axis(x, 1, tg * tg, sg * sg)?;
            maps.push(Self::tokens_to_map(ctx, xs, sg)?);
            if s < 2 {
                x = self.shrink_forward(ctx, &self.shrinks[s], x, tg, sg)?;
            }
        }
        Ok(PyramidVars { shallow: maps[0], mid: maps[1], deep: maps[2] })
    }

    /// Full pyramid from an image pair.
    pub fn extract_pyramid<T: Elem>(&self, ctx: &mut Ctx<T>, z: Var, x: Var) -> Result<PyramidVars> {
        let zt = self.embed_template_tokens(ctx, z)?;
        let xt = self.embed_search_tokens(ctx, x)?;
        self.forward_tokens(ctx, zt, xt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use crate::tensor::NdArray;
    use rand::{Rng, SeedableRng};

    fn toy_setup() -> (ParamStore<f64>, Backbone) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let bb = Backbone::new(&mut store, &mut rng, &BackboneConfig::toy()).unwrap();
        (store, bb)
    }

    fn rand_image(rng: &mut ChaCha8Rng, n: usize, size: usize) -> NdArray<f64> {
        let data: Vec<f64> = (0..n * 3 * size * size).map(|_| rng.gen::<f64>()).collect();
        NdArray::from_vec(&[n, 3, size, size], data).unwrap()
    }

    fn pyramid_values(
        store: &mut ParamStore<f64>,
        bb: &Backbone,
        z: &NdArray<f64>,
        x: &NdArray<f64>,
    ) -> [NdArray<f64>; 3] {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, store, false);
        let zv = ctx.tape.leaf(z.clone());
        let xv = ctx.tape.leaf(x.clone());
        let p = bb.extract_pyramid(&mut ctx, zv, xv).unwrap();
        [tape.value(p.shallow).clone(), tape.value(p.mid).clone(), tape.value(p.deep).clone()]
    }

    #[test]
    fn toy_shape_contract() {
        let (mut store, bb) = toy_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let z = rand_image(&mut rng, 2, 64);
        let x = rand_image(&mut rng, 2, 128);
        let [s, m, d] = pyramid_values(&mut store, &bb, &z, &x);
        assert_eq!(s.shape(), &[2, 8, 8, 8]);
        assert_eq!(m.shape(), &[2, 12, 4, 4]);
        assert_eq!(d.shape(), &[2, 16, 2, 2]);
    }

    #[test]
    fn deterministic_and_eval_mode_pure() {
        let (mut store, bb) = toy_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(102);
        let z = rand_image(&mut rng, 1, 64);
        let x = rand_image(&mut rng, 1, 128);
        let before = store.to_bytes();
        let a = pyramid_values(&mut store, &bb, &z, &x);
        let b = pyramid_values(&mut store, &bb, &z, &x);
        for (p, q) in a.iter().zip(b.iter()) {
            assert_eq!(p.data(), q.data(), "two eval runs must be bit-identical");
        }
        assert_eq!(store.to_bytes(), before, "eval mode must not mutate state");
    }

    #[test]
    fn batch_independence_in_eval() {
        let (mut store, bb) = toy_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(103);
        let z = rand_image(&mut rng, 2, 64);
        let x = rand_image(&mut rng, 2, 128);
        let joint = pyramid_values(&mut store, &bb, &z, &x);
        // Sample 0 alone.
        let z0 = NdArray::from_vec(&[1, 3, 64, 64], z.data()[..3 * 64 * 64].to_vec()).unwrap();
        let x0 = NdArray::from_vec(&[1, 3, 128, 128], x.data()[..3 * 128 * 128].to_vec()).unwrap();
        let solo = pyramid_values(&mut store, &bb, &z0, &x0);
        for (j, s) in joint.iter().zip(solo.iter()) {
            let per_sample = j.numel() / 2;
            for (a, b) in j.data()[..per_sample].iter().zip(s.data()) {
                assert!((a - b).abs() < 1e-12, "sample 0 must not depend on sample 1");
            }
        }
    }

    #[test]
    fn zeroed_projections_make_stages_transparent() {
        // With attention out-projections and MLP second layers zeroed, every
        // stage block is the identity, so the pyramid depends only on patch
        // embedding, position tables, and shrink modules. Randomizing the
        // remaining block weights must then change nothing.
        let (mut store, bb) = toy_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(104);
        let z = rand_image(&mut rng, 1, 64);
        let x = rand_image(&mut rng, 1, 128);
        let zero_names: Vec<String> = store
            .iter()
            .map(|(n, _)| n.to_string())
            .filter(|n| {
                (n.contains(".attn.proj.") || n.contains(".mlp.fc2.")) && n.starts_with("backbone.stage")
            })
            .collect();
        for n in &zero_names {
            let id = store.id(n).unwrap();
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let base = pyramid_values(&mut store, &bb, &z, &x);
        // Scramble qkv and fc1 weights; output must be unchanged.
        let scramble: Vec<String> = store
            .iter()
            .map(|(n, _)| n.to_string())
            .filter(|n| n.contains(".attn.qkv.") || n.contains(".mlp.fc1."))
            .collect();
        for n in &scramble {
            let id = store.id(n).unwrap();
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v += 0.37);
        }
        let same = pyramid_values(&mut store, &bb, &z, &x);
        for (a, b) in base.iter().zip(same.iter()) {
            assert_eq!(a.data(), b.data());
        }
        // Sanity: perturbing a shrink weight does change the deep maps.
        let id = store.id("backbone.shrink1.q.weight").unwrap();
        store.get_mut(id).data_mut()[0] += 0.5;
        let changed = pyramid_values(&mut store, &bb, &z, &x);
        assert!(changed[1].max_abs_diff(&base[1]).unwrap() > 0.0);
    }

    #[test]
    fn zero_position_tables_are_identity_on_tokens() {
        let (mut store, bb) = toy_setup();
        for name in ["backbone.pos.template", "backbone.pos.search"] {
            let id = store.id(name).unwrap();
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(105);
        let z = rand_image(&mut rng, 1, 64);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &mut store, false);
        let zv = ctx.tape.leaf(z);
        let with_pos = bb.embed_template_tokens(&mut ctx, zv).unwrap();
        let map = bb.patch_embed(&mut ctx, zv, &bb.patch_bns).unwrap();
        let plain = Backbone::map_to_tokens(&mut ctx, map).unwrap();
        assert_eq!(tape.value(with_pos).data(), tape.value(plain).data());
    }

    #[test]
    fn position_tables_receive_gradient() {
        let (mut store, bb) = toy_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(106);
        let z = rand_image(&mut rng, 1, 64);
        let x = rand_image(&mut rng, 1, 128);
        let mut tape = Tape::new();
        let pvars = {
            let mut ctx = Ctx::new(&mut tape, &mut store, false);
            let zv = ctx.tape.leaf(z);
            let xv = ctx.tape.leaf(x);
            let p = bb.extract_pyramid(&mut ctx, zv, xv).unwrap();
            let s = ctx.tape.sum_all(p.shallow).unwrap();
            let m = ctx.tape.sum_all(p.mid).unwrap();
            let loss = ctx.tape.add(s, m).unwrap();
            let pv = ctx.into_param_vars();
            tape.backward(loss).unwrap();
            pv
        };
        for want in ["backbone.pos.template", "backbone.pos.search"] {
            let id = store.id(want).unwrap();
            let (_, var) = pvars.iter().find(|(pid, _)| *pid == id).unwrap();
            let g = tape.grad(*var).expect("position table gradient");
            assert!(g.iter().any(|&v| v != 0.0), "{} gradient must be nonzero", want);
        }
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let mut cfg = BackboneConfig::toy();
        cfg.stage_dims = [16, 12, 8];
        assert!(cfg.validate().is_err());
        let mut cfg = BackboneConfig::toy();
        cfg.template_size = 100;
        assert!(cfg.validate().is_err());
        assert!(BackboneConfig::toy().validate().is_ok());
    }

    #[test]
    fn join_then_split_recovers_segments() {
        let (mut store, bb) = toy_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(107);
        let z = rand_image(&mut rng, 1, 64);
        let x = rand_image(&mut rng, 1, 128);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &mut store, false);
        let zv = ctx.tape.leaf(z);
        let xv = ctx.tape.leaf(x);
        let zt = bb.embed_template_tokens(&mut ctx, zv).unwrap();
        let xt = bb.embed_search_tokens(&mut ctx, xv).unwrap();
        let joined = ctx.tape.concat(zt, xt, 1).unwrap();
        assert_eq!(ctx.tape.shape(joined), &[1, 16 + 64, 8]);
        let z2 = ctx.tape.slice_axis(joined, 1, 0, 16).unwrap();
        let x2 = ctx.tape.slice_axis(joined, 1, 16, 64).unwrap();
        assert_eq!(tape.value(z2).data(), tape.value(zt).data());
        assert_eq!(tape.value(x2).data(), tape.value(xt).data());
    }
}
