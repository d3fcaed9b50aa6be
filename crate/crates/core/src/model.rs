//! Full tracker model: backbone + hierarchical feature cascade + gated
//! center head, with named variants, checkpoint self-description, and
//! forward entry points for training and tracking.

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::hfc::{FusionMode, Hfc, HfcConfig};
use crate::layers::Ctx;
use crate::lgch::{HeadConfig, HeadVars, LgchHead};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Elem, NdArray};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use std::str::FromStr;

/// Named model size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    T,
    S,
    B,
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "T" => Ok(Variant::T),
            "S" => Ok(Variant::S),
            "B" => Ok(Variant::B),
            other => Err(Error::Input(format!("unknown variant '{}', expected T, S, or B", other))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::T => "T",
            Variant::S => "S",
            Variant::B => "B",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub hfc: HfcConfig,
    pub head_channels: usize,
    pub head_blocks: usize,
    pub eg_ratio: usize,
}

impl ModelConfig {
    pub fn variant(v: Variant) -> Self {
        let backbone = match v {
            Variant::B => BackboneConfig {
                stage_dims: [384, 512, 768],
                stage_depths: [4, 4, 4],
                stage_heads: [6, 9, 12],
                key_dim: 16,
                mlp_ratio: 2,
                template_size: 128,
                search_size: 256,
                patch_stride: 16,
            },
            Variant::S => BackboneConfig {
                stage_dims: [128, 256, 384],
                stage_depths: [4, 4, 4],
                stage_heads: [4, 6, 8],
                key_dim: 16,
                mlp_ratio: 2,
                template_size: 128,
                search_size: 256,
                patch_stride: 16,
            },
            Variant::T => BackboneConfig {
                stage_dims: [128, 256, 384],
                stage_depths: [2, 3, 4],
                stage_heads: [4, 6, 8],
                key_dim: 16,
                mlp_ratio: 2,
                template_size: 128,
                search_size: 256,
                patch_stride: 16,
            },
        };
        ModelConfig {
            backbone,
            hfc: HfcConfig::default(),
            head_channels: 256,
            head_blocks: 4,
            eg_ratio: 2,
        }
    }

    /// Small configuration for gradient checks and fast tests.
    pub fn toy() -> Self {
        ModelConfig {
            backbone: BackboneConfig::toy(),
            hfc: HfcConfig { mode: FusionMode::Cascade, se_ratio: 2 },
            head_channels: 8,
            head_blocks: 2,
            eg_ratio: 2,
        }
    }

    /// Channels of the fused map entering the head.
    pub fn fused_channels(&self) -> usize {
        match self.hfc.mode {
            FusionMode::Cascade => self.backbone.stage_dims.iter().sum(),
            FusionMode::Addition => self.backbone.stage_dims[0],
        }
    }

    /// Output grid side (search size / patch stride).
    pub fn grid(&self) -> usize {
        self.backbone.search_grid(0)
    }

    pub fn head_config(&self) -> HeadConfig {
        HeadConfig {
            in_channels: self.fused_channels(),
            channels: self.head_channels,
            blocks: self.head_blocks,
            eg_ratio: self.eg_ratio,
            grid: self.grid(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.head_config().validate()
    }
}

/// Forward products: the head maps plus every `(parameter, tape leaf)` pair
/// touched, so gradients can be read back after `backward`.
pub struct ForwardOut {
    pub head: HeadVars,
    pub params: Vec<(ParamId, Var)>,
}

pub struct Model<T: Elem> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub backbone: Backbone,
    pub hfc: Hfc,
    pub head: LgchHead,
}

/// Keys written into the checkpoint as non-trainable `meta.*` arrays so a
/// saved model describes its own architecture.
const META_KEYS: [&str; 12] = [
    "meta.stage_dims",
    "meta.stage_depths",
    "meta.stage_heads",
    "meta.key_dim",
    "meta.mlp_ratio",
    "meta.template_size",
    "meta.search_size",
    "meta.patch_stride",
    "meta.fusion_mode",
    "meta.se_ratio",
    "meta.head",
    "meta.version",
];

impl<T: Elem> Model<T> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        Self::register_meta(&mut store, cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(&mut store, &mut rng, &cfg.backbone)?;
        let hfc = Hfc::new(&mut store, &mut rng, cfg.backbone.stage_dims, &cfg.hfc)?;
        let head = LgchHead::new(&mut store, &mut rng, &cfg.head_config())?;
        Ok(Model { cfg: cfg.clone(), store, backbone, hfc, head })
    }

    fn register_meta(store: &mut ParamStore<T>, cfg: &ModelConfig) -> Result<()> {
        let arr = |v: &[usize]| {
            NdArray::from_vec(&[v.len()], v.iter().map(|&x| T::from_f64(x as f64)).collect())
                .unwrap()
        };
        let b = &cfg.backbone;
        store.register("meta.version", arr(&[1]))?;
        store.register("meta.stage_dims", arr(&b.stage_dims))?;
        store.register("meta.stage_depths", arr(&b.stage_depths))?;
        store.register("meta.stage_heads", arr(&b.stage_heads))?;
        store.register("meta.key_dim", arr(&[b.key_dim]))?;
        store.register("meta.mlp_ratio", arr(&[b.mlp_ratio]))?;
        store.register("meta.template_size", arr(&[b.template_size]))?;
        store.register("meta.search_size", arr(&[b.search_size]))?;
        store.register("meta.patch_stride", arr(&[b.patch_stride]))?;
        store.register(
            "meta.fusion_mode",
            arr(&[match cfg.hfc.mode {
                FusionMode::Cascade => 0,
                FusionMode::Addition => 1,
            }]),
        )?;
        store.register("meta.se_ratio", arr(&[cfg.hfc.se_ratio]))?;
        store.register("meta.head", arr(&[cfg.head_channels, cfg.head_blocks, cfg.eg_ratio]))?;
        debug_assert!(META_KEYS.iter().all(|k| store.id(k).is_some()));
        Ok(())
    }

    /// Full differentiable forward over an image pair batch.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        z: &NdArray<T>,
        x: &NdArray<T>,
        train: bool,
    ) -> Result<ForwardOut> {
        self.forward_with(tape, z, x, train, None)
    }

    fn forward_with(
        &mut self,
        tape: &mut Tape<T>,
        z: &NdArray<T>,
        x: &NdArray<T>,
        train: bool,
        bn_momentum: Option<f64>,
    ) -> Result<ForwardOut> {
        let mut ctx = Ctx::new(tape, &mut self.store, train);
        ctx.bn_momentum = bn_momentum;
        let zv = ctx.tape.constant(z.clone());
        let xv = ctx.tape.constant(x.clone());
        let pyr = self.backbone.extract_pyramid(&mut ctx, zv, xv)?;
        let fused = self.hfc.forward(&mut ctx, &pyr)?;
        let head = self.head.forward(&mut ctx, fused)?;
        Ok(ForwardOut { head, params: ctx.into_param_vars() })
    }

    /// Re-estimates every batch-norm running buffer from one train-mode
    /// forward of the given batch (momentum forced to 1, no optimizer).
    /// After a high-churn training run the buffers trail the final weights;
    /// calling this makes eval-mode forwards agree with train-mode forwards
    /// on the calibration batch.
    pub fn refresh_bn(&mut self, z: &NdArray<T>, x: &NdArray<T>) -> Result<()> {
        let mut tape = Tape::new();
        tape.set_check_finite(false);
        self.forward_with(&mut tape, z, x, true, Some(1.0))?;
        Ok(())
    }

    /// Embeds the template once (eval mode) and returns its token array for
    /// reuse across a sequence.
    pub fn embed_template(&mut self, z: &NdArray<T>) -> Result<NdArray<T>> {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &mut self.store, false);
        let zv = ctx.tape.constant(z.clone());
        let tok = self.backbone.embed_template_tokens(&mut ctx, zv)?;
        Ok(tape.value(tok).clone())
    }

    /// Eval forward of one search crop against cached template tokens.
    pub fn forward_search(&mut self, ztok: &NdArray<T>, x: &NdArray<T>) -> Result<HeadMaps<T>> {
        let mut tape = Tape::new();
        tape.set_check_finite(false);
        let head = {
            let mut ctx = Ctx::new(&mut tape, &mut self.store, false);
            let zt = ctx.tape.constant(ztok.clone());
            let xv = ctx.tape.constant(x.clone());
            let xt = self.backbone.embed_search_tokens(&mut ctx, xv)?;
            let pyr = self.backbone.forward_tokens(&mut ctx, zt, xt)?;
            let fused = self.hfc.forward(&mut ctx, &pyr)?;
            self.head.forward(&mut ctx, fused)?
        };
        Ok(HeadMaps {
            score: tape.value(head.score).clone(),
            offset: tape.value(head.offset).clone(),
            size: tape.value(head.size).clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.save(path)
    }

    /// Rebuilds a model from a checkpoint, reading the architecture from the
    /// `meta.*` arrays and then loading every value.
    pub fn load(path: &Path) -> Result<Self> {
        let loaded = ParamStore::<T>::load(path)?;
        let cfg = config_from_meta(&loaded)?;
        let mut model = Self::new(&cfg, 0)?;
        model.store.copy_values_from(&loaded)?;
        Ok(model)
    }
}

/// Concrete (off-tape) head maps from an eval forward.
pub struct HeadMaps<T: Elem> {
    pub score: NdArray<T>,
    pub offset: NdArray<T>,
    pub size: NdArray<T>,
}

/// Reconstructs the configuration a checkpoint was saved with.
pub fn config_from_meta<T: Elem>(store: &ParamStore<T>) -> Result<ModelConfig> {
    let get = |name: &str| -> Result<Vec<usize>> {
        let arr = store
            .get_by_name(name)
            .ok_or_else(|| Error::Input(format!("checkpoint missing '{}'", name)))?;
        Ok(arr.data().iter().map(|v| v.to_f64().round() as usize).collect())
    };
    let dims = get("meta.stage_dims")?;
    let depths = get("meta.stage_depths")?;
    let heads = get("meta.stage_heads")?;
    if dims.len() != 3 || depths.len() != 3 || heads.len() != 3 {
        return Err(Error::Input("meta stage arrays must have length 3".into()));
    }
    let head = get("meta.head")?;
    if head.len() != 3 {
        return Err(Error::Input("meta.head must be [channels, blocks, ratio]".into()));
    }
    Ok(ModelConfig {
        backbone: BackboneConfig {
            stage_dims: [dims[0], dims[1], dims[2]],
            stage_depths: [depths[0], depths[1], depths[2]],
            stage_heads: [heads[0], heads[1], heads[2]],
            key_dim: get("meta.key_dim")?[0],
            mlp_ratio: get("meta.mlp_ratio")?[0],
            template_size: get("meta.template_size")?[0],
            search_size: get("meta.search_size")?[0],
            patch_stride: get("meta.patch_stride")?[0],
        },
        hfc: HfcConfig {
            mode: match get("meta.fusion_mode")?[0] {
                0 => FusionMode::Cascade,
                1 => FusionMode::Addition,
                other => {
                    return Err(Error::Input(format!("unknown fusion mode code {}", other)))
                }
            },
            se_ratio: get("meta.se_ratio")?[0],
        },
        head_channels: head[0],
        head_blocks: head[1],
        eg_ratio: head[2],
    })
}

/// True for names that never receive gradients (metadata and BN statistics).
pub fn is_non_trainable_name(name: &str) -> bool {
    name.starts_with("meta.")
        || name.ends_with(".running_mean")
        || name.ends_with(".running_var")
}
