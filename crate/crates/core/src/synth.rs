//! Synthetic sequence generator and the portable pixel-map format.
//!
//! Sequences are a bright textured rectangle moving over low-contrast noise,
//! with exact integer ground-truth boxes, optional scale oscillation, and an
//! optional occluder bar sweeping the image. Everything derives from one
//! seeded ChaCha stream, so identical configurations produce bit-identical
//! pixels.
//!
//! Images are stored as `.pix`: an ASCII header line `width height channels`
//! followed by raw channel-planar bytes (all of channel 0 row-major, then
//! channel 1, ...).

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::metrics::SequenceRecord;
use crate::tensor::{Elem, NdArray};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::Path;

/// Channel-planar 8-bit image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub w: usize,
    pub h: usize,
    pub c: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(w: usize, h: usize, c: usize) -> Self {
        Image { w, h, c, data: vec![0; w * h * c] }
    }

    #[inline]
    pub fn at(&self, ch: usize, y: usize, x: usize) -> u8 {
        self.data[(ch * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, ch: usize, y: usize, x: usize, v: u8) {
        self.data[(ch * self.h + y) * self.w + x] = v;
    }

    /// Fills an axis-aligned rectangle (clipped to the image) in one channel.
    fn fill_rect(&mut self, ch: usize, x0: i64, y0: i64, w: i64, h: i64, v: u8) {
        let xs = x0.max(0) as usize;
        let ys = y0.max(0) as usize;
        let xe = (x0 + w).clamp(0, self.w as i64) as usize;
        let ye = (y0 + h).clamp(0, self.h as i64) as usize;
        for y in ys..ye {
            for x in xs..xe {
                self.set(ch, y, x, v);
            }
        }
    }

    /// `[1, c, h, w]` array scaled to [0, 1].
    pub fn to_ndarray<T: Elem>(&self) -> NdArray<T> {
        let data: Vec<T> =
            self.data.iter().map(|&b| T::from_f64(b as f64 / 255.0)).collect();
        NdArray::from_vec(&[1, self.c, self.h, self.w], data).unwrap()
    }

    /// Mean of each channel in [0, 1] units.
    pub fn channel_means(&self) -> Vec<f64> {
        let plane = self.w * self.h;
        (0..self.c)
            .map(|ch| {
                let sum: u64 =
                    self.data[ch * plane..(ch + 1) * plane].iter().map(|&b| b as u64).sum();
                sum as f64 / (plane as f64 * 255.0)
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        write!(f, "{} {} {}\n", self.w, self.h, self.c)?;
        f.write_all(&self.data)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or(Error::Format {
            offset: bytes.len(),
            msg: "missing header newline".into(),
        })?;
        let header = std::str::from_utf8(&bytes[..nl])
            .map_err(|_| Error::Format { offset: 0, msg: "header is not ASCII".into() })?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Format {
                offset: 0,
                msg: format!("header must be 'w h c', got '{}'", header),
            });
        }
        let parse = |s: &str| -> Result<usize> {
            s.parse::<usize>()
                .map_err(|_| Error::Format { offset: 0, msg: format!("bad header field '{}'", s) })
        };
        let (w, h, c) = (parse(fields[0])?, parse(fields[1])?, parse(fields[2])?);
        let need = w * h * c;
        let data = &bytes[nl + 1..];
        if data.len() != need {
            return Err(Error::Format {
                offset: nl + 1 + data.len().min(need),
                msg: format!("expected {} pixel bytes, found {}", need, data.len()),
            });
        }
        Ok(Image { w, h, c, data: data.to_vec() })
    }
}

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    /// Base target side range in pixels (chosen once per sequence).
    pub target_min: usize,
    pub target_max: usize,
    /// Center velocity in px/frame.
    pub velocity: (f64, f64),
    /// Relative scale oscillation amplitude (0 disables).
    pub scale_amplitude: f64,
    pub occluder: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 256,
            height: 256,
            target_min: 32,
            target_max: 56,
            velocity: (3.0, 2.0),
            scale_amplitude: 0.1,
            occluder: false,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_min < 4 || self.target_min > self.target_max {
            return Err(Error::Input(format!(
                "target size range [{}, {}] invalid (min 4, non-empty)",
                self.target_min, self.target_max
            )));
        }
        let limit = self.width.min(self.height);
        let worst = (self.target_max as f64 * (1.0 + self.scale_amplitude)).ceil() as usize;
        if worst >= limit {
            return Err(Error::Input(format!(
                "target (up to {} px with oscillation) does not fit a {}x{} image",
                worst, self.width, self.height
            )));
        }
        if !(0.0..1.0).contains(&self.scale_amplitude) {
            return Err(Error::Input("scale amplitude must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

pub struct SynthSequence {
    pub record: SequenceRecord,
    pub frames: Vec<Image>,
}

const SCALE_PERIOD: f64 = 20.0;

/// Generates `n_frames` frames with exact ground truth.
pub fn generate(cfg: &SynthConfig, n_frames: usize) -> Result<SynthSequence> {
    cfg.validate()?;
    if n_frames < 2 {
        return Err(Error::Input(format!("a sequence needs at least 2 frames, got {}", n_frames)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let base_w = rng.gen_range(cfg.target_min..=cfg.target_max) as f64;
    let base_h = rng.gen_range(cfg.target_min..=cfg.target_max) as f64;
    let max_half = (cfg.target_max as f64 * (1.0 + cfg.scale_amplitude)) / 2.0 + 1.0;
    let mut cx = rng.gen_range(max_half..w - max_half);
    let mut cy = rng.gen_range(max_half..h - max_half);
    let (mut vx, mut vy) = cfg.velocity;

    let mut frames = Vec::with_capacity(n_frames);
    let mut gts = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        // Scale oscillation.
        let s = 1.0
            + cfg.scale_amplitude * (2.0 * std::f64::consts::PI * t as f64 / SCALE_PERIOD).sin();
        let tw = (base_w * s).round().max(4.0);
        let th = (base_h * s).round().max(4.0);

        // Integer target rectangle, clamped inside the image.
        let x0 = (cx - tw / 2.0).round().clamp(0.0, w - tw) as i64;
        let y0 = (cy - th / 2.0).round().clamp(0.0, h - th) as i64;
        gts.push(BBox::new(x0 as f64, y0 as f64, tw, th));

        // Noise background (low contrast).
        let mut img = Image::new(cfg.width, cfg.height, 3);
        for v in img.data.iter_mut() {
            *v = 100 + (rng.gen::<u8>() % 64);
        }
        // Target: bright fill with a dark border and a quadrant accent so
        // scale and offset are visually recoverable.
        let (twi, thi) = (tw as i64, th as i64);
        for (ch, v) in [(0usize, 235u8), (1, 90), (2, 40)] {
            img.fill_rect(ch, x0, y0, twi, thi, v);
        }
        let b = 2.min(twi / 4).min(thi / 4).max(1);
        for (ch, v) in [(0usize, 25u8), (1, 25), (2, 160)] {
            img.fill_rect(ch, x0, y0, twi, b, v);
            img.fill_rect(ch, x0, y0 + thi - b, twi, b, v);
            img.fill_rect(ch, x0, y0, b, thi, v);
            img.fill_rect(ch, x0 + twi - b, y0, b, thi, v);
        }
        for (ch, v) in [(0usize, 255u8), (1, 230), (2, 120)] {
            img.fill_rect(ch, x0, y0, twi / 2, thi / 2, v);
        }
        // Occluder bar sweeping left to right over the sequence.
        if cfg.occluder {
            let bar_w = (cfg.target_max / 2).max(4) as i64;
            let span = cfg.width as i64 + bar_w;
            let bx = -bar_w + (span * t as i64) / n_frames.max(1) as i64;
            for ch in 0..3 {
                img.fill_rect(ch, bx, 0, bar_w, cfg.height as i64, 120);
            }
        }
        frames.push(img);

        // Advance motion, bouncing at walls.
        cx += vx;
        cy += vy;
        if cx < max_half {
            cx = 2.0 * max_half - cx;
            vx = -vx;
        }
        if cx > w - max_half {
            cx = 2.0 * (w - max_half) - cx;
            vx = -vx;
        }
        if cy < max_half {
            cy = 2.0 * max_half - cy;
            vy = -vy;
        }
        if cy > h - max_half {
            cy = 2.0 * (h - max_half) - cy;
            vy = -vy;
        }
    }
    let record = SequenceRecord {
        name: format!("synth-{}", cfg.seed),
        frames: gts,
        attributes: BTreeSet::new(),
    };
    record.validate()?;
    Ok(SynthSequence { record, frames })
}

/// Writes a sequence directory: `000001.pix`, `000002.pix`, ... plus
/// `groundtruth.txt` in `x,y,w,h` lines.
pub fn save_sequence(dir: &Path, seq: &SynthSequence) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, frame) in seq.frames.iter().enumerate() {
        frame.save(&dir.join(format!("{:06}.pix", i + 1)))?;
    }
    crate::metrics::write_boxes_file(&dir.join("groundtruth.txt"), &seq.record.frames)?;
    Ok(())
}

/// Reads a sequence directory written by [`save_sequence`]. The record name
/// is the directory's base name.
pub fn load_sequence(dir: &Path) -> Result<SynthSequence> {
    let gt = crate::metrics::read_boxes_file(&dir.join("groundtruth.txt"))?;
    let mut frames = Vec::with_capacity(gt.len());
    for i in 0..gt.len() {
        frames.push(Image::load(&dir.join(format!("{:06}.pix", i + 1)))?);
    }
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "sequence".to_string());
    let record = SequenceRecord { name, frames: gt, attributes: BTreeSet::new() };
    record.validate()?;
    Ok(SynthSequence { record, frames })
}
