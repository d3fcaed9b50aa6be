//! Hierarchical feature cascade.
//!
//! Fuses the three-level backbone pyramid into one high-resolution map.
//! The cascade runs deepest-first: the deep map is upsampled 2x and
//! concatenated onto the mid map, refined by a residual
//! squeeze-and-excitation block, upsampled again, concatenated onto the
//! shallow map, and refined once more. Concatenation and nearest-neighbor
//! upsampling are parameter-free; all learnable capacity sits in the two SE
//! blocks. An additive baseline (1x1 projections + sum) is provided for
//! comparison.

use crate::backbone::PyramidVars;
use crate::error::{Error, Result};
use crate::layers::{Conv2d, Ctx, Linear};
use crate::params::ParamStore;
use crate::tape::Var;
use crate::tensor::Elem;
use rand_chacha::ChaCha8Rng;

/// How the pyramid levels are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    /// Concatenation cascade with residual SE refinement (the default).
    Cascade,
    /// Additive baseline: project deep/mid to the shallow width and sum.
    Addition,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HfcConfig {
    pub mode: FusionMode,
    /// SE bottleneck reduction ratio.
    pub se_ratio: usize,
}

impl Default for HfcConfig {
    fn default() -> Self {
        HfcConfig { mode: FusionMode::Cascade, se_ratio: 16 }
    }
}

/// Residual squeeze-and-excitation: `x + x * sigmoid(W2 relu(W1 gap(x)))`
/// with bias-free bottleneck linears (`2*C^2/r` parameters).
pub struct ResidualSe {
    w1: Linear,
    w2: Linear,
    pub channels: usize,
}

impl ResidualSe {
    pub fn new<T: Elem>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        ratio: usize,
    ) -> Result<Self> {
        if ratio == 0 || channels % ratio != 0 {
            return Err(Error::Input(format!(
                "SE ratio {} must divide channel count {}",
                ratio, channels
            )));
        }
        let mid = channels / ratio;
        Ok(ResidualSe {
            w1: Linear::new(store, rng, &format!("{}.w1", name), channels, mid, false)?,
            w2: Linear::new(store, rng, &format!("{}.w2", name), mid, channels, false)?,
            channels,
        })
    }

    pub fn forward<T: Elem>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let g = ctx.tape.global_avg_pool(x)?; // [n, c]
        let h = self.w1.forward(ctx, g)?;
        let h = ctx.tape.relu(h)?;
        let s = self.w2.forward(ctx, h)?;
        let s = ctx.tape.sigmoid(s)?;
        let gated = ctx.tape.scale_channels(x, s)?;
        ctx.tape.add(x, gated)
    }
}

/// Assembled fusion module. Construct with the backbone's `stage_dims`.
pub struct Hfc {
    pub cfg: HfcConfig,
    pub stage_dims: [usize; 3],
    se1: Option<ResidualSe>,
    se2: Option<ResidualSe>,
    proj_deep: Option<Conv2d>,
    proj_mid: Option<Conv2d>,
}

impl Hfc {
    pub fn new<T: Elem>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        stage_dims: [usize; 3],
        cfg: &HfcConfig,
    ) -> Result<Self> {
        let [c1, c2, c3] = stage_dims;
        match cfg.mode {
            FusionMode::Cascade => {
                let mid_cat = c3 + c2;
                let out_cat = mid_cat + c1;
                let se1 = ResidualSe::new(store, rng, "hfc.se1", mid_cat, cfg.se_ratio)?;
                let se2 = ResidualSe::new(store, rng, "hfc.se2", out_cat, cfg.se_ratio)?;
                Ok(Hfc {
                    cfg: cfg.clone(),
                    stage_dims,
                    se1: Some(se1),
                    se2: Some(se2),
                    proj_deep: None,
                    proj_mid: None,
                })
            }
            FusionMode::Addition => {
                let proj_deep =
                    Conv2d::new(store, rng, "hfc.proj_deep", c3, c1, 1, 1, 0, 1, false)?;
                let proj_mid = Conv2d::new(store, rng, "hfc.proj_mid", c2, c1, 1, 1, 0, 1, false)?;
                Ok(Hfc {
                    cfg: cfg.clone(),
                    stage_dims,
                    se1: None,
                    se2: None,
                    proj_deep: Some(proj_deep),
                    proj_mid: Some(proj_mid),
                })
            }
        }
    }

    /// Channel width of the fused output map.
    pub fn out_channels(&self) -> usize {
        match self.cfg.mode {
            FusionMode::Cascade => self.stage_dims.iter().sum(),
            FusionMode::Addition => self.stage_dims[0],
        }
    }

    /// Fuses the pyramid into a single map at the shallow (stride-16)
    /// resolution.
    pub fn forward<T: Elem>(&self, ctx: &mut Ctx<T>, pyr: &PyramidVars) -> Result<Var> {
        match self.cfg.mode {
            FusionMode::Cascade => {
                let up_deep = ctx.tape.upsample2x(pyr.deep)?;
                let cat1 = ctx.tape.concat(up_deep, pyr.mid, 1)?;
                let o1 = self.se1.as_ref().unwrap().forward(ctx, cat1)?;
                let up1 = ctx.tape.upsample2x(o1)?;
                let cat2 = ctx.tape.concat(up1, pyr.shallow, 1)?;
                self.se2.as_ref().unwrap().forward(ctx, cat2)
            }
            FusionMode::Addition => {
                let d = self.proj_deep.as_ref().unwrap().forward(ctx, pyr.deep)?;
                let d = ctx.tape.upsample2x(d)?;
                let d = ctx.tape.upsample2x(d)?;
                let m = self.proj_mid.as_ref().unwrap().forward(ctx, pyr.mid)?;
                let m = ctx.tape.upsample2x(m)?;
                let dm = ctx.tape.add(d, m)?;
                ctx.tape.add(dm, pyr.shallow)
            }
        }
    }
}
