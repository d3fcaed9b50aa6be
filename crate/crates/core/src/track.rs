//! Template/search cropping and the per-frame tracking loop.
//!
//! A crop is a square window of side `context_factor * sqrt(w*h)` centered on
//! a box, resampled to a fixed output size with nearest-neighbor lookup and
//! channel-mean padding outside the image. The accompanying affine record
//! maps normalized crop coordinates back to image pixels exactly, so decoded
//! boxes can be placed on the original frame.

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::lgch::{decode_box, hann2d, Decoded};
use crate::model::Model;
use crate::synth::Image;
use crate::tensor::{Elem, NdArray};

/// Maps between normalized crop coordinates (the unit square over the crop)
/// and image pixel coordinates: `image = center + (crop - 0.5) * side`.
#[derive(Clone, Copy, Debug)]
pub struct CropAffine {
    pub cx: f64,
    pub cy: f64,
    pub side: f64,
}

impl CropAffine {
    /// Normalized crop box -> image pixels.
    pub fn crop_to_image(&self, b: &BBox) -> BBox {
        BBox::from_center(
            self.cx + (b.x + b.w / 2.0 - 0.5) * self.side,
            self.cy + (b.y + b.h / 2.0 - 0.5) * self.side,
            b.w * self.side,
            b.h * self.side,
        )
    }

    /// Image-pixel box -> normalized crop coordinates.
    pub fn image_to_crop(&self, b: &BBox) -> BBox {
        BBox::from_center(
            (b.x + b.w / 2.0 - self.cx) / self.side + 0.5,
            (b.y + b.h / 2.0 - self.cy) / self.side + 0.5,
            b.w / self.side,
            b.h / self.side,
        )
    }
}

/// Cuts the context window around `b` and resamples it to `out`x`out`.
/// Pixels outside the source image take the per-channel mean.
pub fn crop_resize(img: &Image, b: &BBox, context: f64, out: usize) -> Result<(Image, CropAffine)> {
    if !b.is_valid() || b.w <= 0.0 || b.h <= 0.0 {
        return Err(Error::Input(format!(
            "cannot crop around a degenerate box ({}, {}, {}, {})",
            b.x, b.y, b.w, b.h
        )));
    }
    if context <= 0.0 || out == 0 {
        return Err(Error::Input("context factor and output size must be positive".into()));
    }
    let side = context * (b.w * b.h).sqrt();
    let affine = CropAffine { cx: b.x + b.w / 2.0, cy: b.y + b.h / 2.0, side };
    let means: Vec<u8> = img
        .channel_means()
        .iter()
        .map(|m| (m * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let mut crop = Image::new(out, out, img.c);
    for v in 0..out {
        let ny = (v as f64 + 0.5) / out as f64;
        let sy = affine.cy + (ny - 0.5) * side;
        let yi = sy.floor();
        for u in 0..out {
            let nx = (u as f64 + 0.5) / out as f64;
            let sx = affine.cx + (nx - 0.5) * side;
            let xi = sx.floor();
            let inside =
                xi >= 0.0 && yi >= 0.0 && (xi as usize) < img.w && (yi as usize) < img.h;
            for ch in 0..img.c {
                let val = if inside {
                    img.at(ch, yi as usize, xi as usize)
                } else {
                    means[ch]
                };
                crop.set(ch, v, u, val);
            }
        }
    }
    Ok((crop, affine))
}

/// Clamps a box so it lies fully inside a `w`x`h` image, preserving its size
/// where possible (the size itself is clamped to the image first).
pub fn clip_box(b: &BBox, w: usize, h: usize) -> BBox {
    let (iw, ih) = (w as f64, h as f64);
    let bw = b.w.clamp(1.0, iw);
    let bh = b.h.clamp(1.0, ih);
    BBox::new(b.x.clamp(0.0, iw - bw), b.y.clamp(0.0, ih - bh), bw, bh)
}

#[derive(Clone, Copy, Debug)]
pub struct TrackConfig {
    /// Context factor for the search crop.
    pub search_factor: f64,
    /// Context factor for the template crop.
    pub template_factor: f64,
    /// Hanning blend weight handed to the decoder.
    pub window_weight: f64,
}

impl Default for TrackConfig {
    fn default() -> Self {
        TrackConfig { search_factor: 4.0, template_factor: 2.0, window_weight: 0.3 }
    }
}

impl TrackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.search_factor <= 0.0 || self.template_factor <= 0.0 {
            return Err(Error::Input("context factors must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.window_weight) {
            return Err(Error::Input(format!(
                "window weight {} outside [0,1]",
                self.window_weight
            )));
        }
        Ok(())
    }
}

/// Per-sequence tracker state: template tokens embedded once at init, the
/// last emitted box (always inside image bounds), and the score window.
pub struct TrackerState<T: Elem> {
    pub ztok: NdArray<T>,
    pub prev: BBox,
    pub cfg: TrackConfig,
    window: NdArray<f64>,
}

impl<T: Elem> TrackerState<T> {
    /// Embeds the template from the first frame around the init box.
    pub fn init(
        model: &mut Model<T>,
        frame: &Image,
        init: &BBox,
        cfg: &TrackConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if !init.is_valid() || init.w <= 0.0 || init.h <= 0.0 {
            return Err(Error::Input("init box is degenerate".into()));
        }
        let tsize = model.cfg.backbone.template_size;
        let (zimg, _) = crop_resize(frame, init, cfg.template_factor, tsize)?;
        let ztok = model.embed_template(&zimg.to_ndarray::<T>())?;
        Ok(TrackerState {
            ztok,
            prev: clip_box(init, frame.w, frame.h),
            cfg: *cfg,
            window: hann2d(model.cfg.grid()),
        })
    }

    /// Runs one frame: crop around the previous box, forward, decode, map
    /// back to image coordinates, clip, and update the state.
    pub fn step(&mut self, model: &mut Model<T>, frame: &Image) -> Result<(BBox, Decoded)> {
        let ssize = model.cfg.backbone.search_size;
        let (ximg, affine) = crop_resize(frame, &self.prev, self.cfg.search_factor, ssize)?;
        let maps = model.forward_search(&self.ztok, &ximg.to_ndarray::<T>())?;
        let dec = decode_box(&maps.score, &maps.offset, &maps.size, &self.window, self.cfg.window_weight)?;
        let raw = affine.crop_to_image(&dec.bbox);
        let clipped = clip_box(&raw, frame.w, frame.h);
        self.prev = clipped;
        Ok((clipped, dec))
    }
}

/// Tracks a whole sequence. The first output is the init box, verbatim.
pub fn track_sequence<T: Elem>(
    model: &mut Model<T>,
    frames: &[Image],
    init: &BBox,
    cfg: &TrackConfig,
) -> Result<Vec<BBox>> {
    let first = frames.first().ok_or_else(|| Error::Input("empty sequence".into()))?;
    let mut state = TrackerState::init(model, first, init, cfg)?;
    let mut out = Vec::with_capacity(frames.len());
    out.push(*init);
    for frame in &frames[1..] {
        let (b, _) = state.step(model, frame)?;
        out.push(b);
    }
    Ok(out)
}
