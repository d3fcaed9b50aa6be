//! Lightweight gated center head.
//!
//! The fused map is reduced by a shared 1x1 convolution, then processed by
//! three parallel branches — classification, local offset, box size — each a
//! stack of efficient-gating (EG) blocks followed by a 1x1 projection and a
//! sigmoid. An EG block expands channels by a ratio `r` through a gate/value
//! pair (`relu6(X1) * X2`) sandwiched between depthwise 7x7 convolutions,
//! which keeps its trainable parameter count affine in `r`.
//!
//! Box decoding (argmax over the window-penalized score map plus sub-cell
//! offset and size lookup) lives here too.

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::layers::{BatchNorm2d, Conv2d, Ctx};
use crate::params::ParamStore;
use crate::tape::Var;
use crate::tensor::{Elem, NdArray};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadConfig {
    /// Channels of the fused input map.
    pub in_channels: usize,
    /// Width after the shared reduction (256 in the full model).
    pub channels: usize,
    /// EG blocks per branch.
    pub blocks: usize,
    /// EG expansion ratio `r`.
    pub eg_ratio: usize,
    /// Output grid side (search size / 16).
    pub grid: usize,
}

impl HeadConfig {
    pub fn toy() -> Self {
        HeadConfig { in_channels: 36, channels: 8, blocks: 2, eg_ratio: 2, grid: 8 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.channels == 0
            || self.blocks == 0
            || self.eg_ratio == 0
            || self.grid < 2
        {
            return Err(Error::Input(
                "head config fields must be positive (grid at least 2)".into(),
            ));
        }
        Ok(())
    }
}

/// One efficient-gating block: `out = BN(proj(DW7(relu6(gate(O)) * value(O))))`
/// where `O = BN(DW7(x))`. Channels in == channels out; no residual skip.
pub struct EgBlock {
    dw1: Conv2d,
    bn1: BatchNorm2d,
    gate: Conv2d,
    value: Conv2d,
    dw2: Conv2d,
    proj: Conv2d,
    bn2: BatchNorm2d,
}

impl EgBlock {
    pub fn new<T: Elem>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c: usize,
        r: usize,
    ) -> Result<Self> {
        let rc = r * c;
        Ok(EgBlock {
            dw1: Conv2d::new(store, rng, &format!("{}.dw1", name), c, c, 7, 1, 3, c, true)?,
            bn1: BatchNorm2d::new(store, &format!("{}.bn1", name), c)?,
            gate: Conv2d::new(store, rng, &format!("{}.gate", name), c, rc, 1, 1, 0, 1, true)?,
            value: Conv2d::new(store, rng, &format!("{}.value", name), c, rc, 1, 1, 0, 1, true)?,
            dw2: Conv2d::new(store, rng, &format!("{}.dw2", name), rc, rc, 7, 1, 3, rc, true)?,
            proj: Conv2d::new(store, rng, &format!("{}.proj", name), rc, c, 1, 1, 0, 1, true)?,
            bn2: BatchNorm2d::new(store, &format!("{}.bn2", name), c)?,
        })
    }

    pub fn forward<T: Elem>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let o = self.dw1.forward(ctx, x)?;
        let o = self.bn1.forward(ctx, o)?;
        let x1 = self.gate.forward(ctx, o)?;
        let x2 = self.value.forward(ctx, o)?;
        let g = ctx.tape.relu6(x1)?;
        let p = ctx.tape.hadamard(g, x2)?;
        let y = self.dw2.forward(ctx, p)?;
        let y = self.proj.forward(ctx, y)?;
        self.bn2.forward(ctx, y)
    }

    /// Closed-form trainable parameter count of one block: depthwise 7x7
    /// (weights+bias) + BN + gate/value expansions + depthwise 7x7 on rC +
    /// projection + BN.
    pub fn param_count(c: u64, r: u64) -> u64 {
        let rc = r * c;
        (49 * c + c + 2 * c) + 2 * (rc * c + rc) + (49 * rc + rc) + (rc * c + c) + 2 * c
    }
}

struct Branch {
    blocks: Vec<EgBlock>,
    out: Conv2d,
}

impl Branch {
    fn new<T: Elem>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &HeadConfig,
        out_channels: usize,
    ) -> Result<Self> {
        let mut blocks = Vec::new();
        for b in 0..cfg.blocks {
            blocks.push(EgBlock::new(
                store,
                rng,
                &format!("{}.block{}", name, b),
                cfg.channels,
                cfg.eg_ratio,
            )?);
        }
        let out =
            Conv2d::new(store, rng, &format!("{}.out", name), cfg.channels, out_channels, 1, 1, 0, 1, true)?;
        Ok(Branch { blocks, out })
    }

    fn forward<T: Elem>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(ctx, h)?;
        }
        let h = self.out.forward(ctx, h)?;
        ctx.tape.sigmoid(h)
    }
}

/// Head output maps on the tape: score `[n,1,g,g]`, offset `[n,2,g,g]`
/// (x then y channel), size `[n,2,g,g]` (width then height), all in (0,1).
pub struct HeadVars {
    pub score: Var,
    pub offset: Var,
    pub size: Var,
}

pub struct LgchHead {
    pub cfg: HeadConfig,
    reduce: Conv2d,
    cls: Branch,
    offset: Branch,
    size: Branch,
}

impl LgchHead {
    pub fn new<T: Elem>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        cfg: &HeadConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let reduce =
            Conv2d::new(store, rng, "head.reduce", cfg.in_channels, cfg.channels, 1, 1, 0, 1, true)?;
        let cls = Branch::new(store, rng, "head.cls", cfg, 1)?;
        let offset = Branch::new(store, rng, "head.offset", cfg, 2)?;
        let size = Branch::new(store, rng, "head.size", cfg, 2)?;
        Ok(LgchHead { cfg: cfg.clone(), reduce, cls, offset, size })
    }

    pub fn forward<T: Elem>(&self, ctx: &mut Ctx<T>, fused: Var) -> Result<HeadVars> {
        let (_, c, h, w) = ctx.tape.value(fused).dims4()?;
        if c != self.cfg.in_channels || h != self.cfg.grid || w != self.cfg.grid {
            return Err(Error::dim(
                "head_forward",
                format!(
                    "expected fused map [n,{},{},{}], got {:?}",
                    self.cfg.in_channels,
                    self.cfg.grid,
                    self.cfg.grid,
                    ctx.tape.value(fused).shape()
                ),
            ));
        }
        let x = self.reduce.forward(ctx, fused)?;
        Ok(HeadVars {
            score: self.cls.forward(ctx, x)?,
            offset: self.offset.forward(ctx, x)?,
            size: self.size.forward(ctx, x)?,
        })
    }
}

/// Symmetric Hann window of length `n`, built by mirroring the first half so
/// the two central samples of an even-length window are bit-identical.
pub fn hann1d(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    let mut w = vec![0.0; n];
    for i in 0..(n + 1) / 2 {
        let v = 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos());
        w[i] = v;
        w[n - 1 - i] = v;
    }
    w
}

/// Outer product of [`hann1d`] with itself, shape `[g, g]`.
pub fn hann2d(g: usize) -> NdArray<f64> {
    let h = hann1d(g);
    let mut data = Vec::with_capacity(g * g);
    for i in 0..g {
        for j in 0..g {
            data.push(h[i] * h[j]);
        }
    }
    NdArray::from_vec(&[g, g], data).unwrap()
}

/// Result of [`decode_box`]: the box in normalized crop coordinates (center
/// at `(cell + offset)/g`, width/height direct from the size map), the raw
/// score at the chosen cell, the window-penalized value that won the argmax,
/// and the winning cell `(row, col)`.
#[derive(Clone, Debug)]
pub struct Decoded {
    pub bbox: BBox,
    pub score: f64,
    pub penalized: f64,
    pub cell: (usize, usize),
}

/// Decodes one sample's head maps: `score' = (1-w)*score + w*(score*window)`,
/// argmax with ties broken toward the smallest row-major index, then offset
/// and size lookups at the winning cell.
pub fn decode_box<T: Elem>(
    score: &NdArray<T>,
    offset: &NdArray<T>,
    size: &NdArray<T>,
    window: &NdArray<f64>,
    window_weight: f64,
) -> Result<Decoded> {
    let (ns, cs, g, g2) = score.dims4()?;
    let (no, co, go, go2) = offset.dims4()?;
    let (nz, cz, gz, gz2) = size.dims4()?;
    if ns != 1 || no != 1 || nz != 1 {
        return Err(Error::dim("decode_box", "decoding expects batch size 1"));
    }
    if cs != 1 || co != 2 || cz != 2 || g != g2 || (go, go2) != (g, g) || (gz, gz2) != (g, g) {
        return Err(Error::dim(
            "decode_box",
            format!(
                "map shapes must be [1,1,g,g]/[1,2,g,g]/[1,2,g,g], got {:?}/{:?}/{:?}",
                score.shape(),
                offset.shape(),
                size.shape()
            ),
        ));
    }
    if window.shape() != [g, g] {
        return Err(Error::dim(
            "decode_box",
            format!("window shape {:?} does not match grid {}", window.shape(), g),
        ));
    }
    if !(0.0..=1.0).contains(&window_weight) {
        return Err(Error::Input(format!("window weight {} outside [0,1]", window_weight)));
    }
    let mut best = f64::NEG_INFINITY;
    let mut cell = (0usize, 0usize);
    for i in 0..g {
        for j in 0..g {
            let s = score.data()[i * g + j].to_f64();
            let p = (1.0 - window_weight) * s + window_weight * s * window.data()[i * g + j];
            if p > best {
                best = p;
                cell = (i, j);
            }
        }
    }
    let (i, j) = cell;
    let off_x = offset.data()[i * g + j].to_f64();
    let off_y = offset.data()[g * g + i * g + j].to_f64();
    let bw = size.data()[i * g + j].to_f64();
    let bh = size.data()[g * g + i * g + j].to_f64();
    let cx = (j as f64 + off_x) / g as f64;
    let cy = (i as f64 + off_y) / g as f64;
    Ok(Decoded {
        bbox: BBox::from_center(cx, cy, bw, bh),
        score: score.data()[i * g + j].to_f64(),
        penalized: best,
        cell,
    })
}
