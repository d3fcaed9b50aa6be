//! One-pass-evaluation toolkit: precision / success curves, their scalar
//! scores, and attribute-sliced aggregation.
//!
//! Precision at threshold `t` (0..50 px) is the fraction of scored frames
//! whose center error is `<= t`; success at overlap `tau` (0, 0.05, .., 1.0)
//! counts frames with IoU strictly `> tau`, and the success score (AUC) is
//! the mean of the 21 curve values. Frames whose ground truth is absent
//! (NaN) are skipped entirely; every other frame, including frame 1, is
//! scored. Aggregation over sequences pools frames, not per-sequence scores.

use crate::boxes::BBox;
use crate::error::{Error, Result};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

pub const PRECISION_THRESHOLDS: usize = 51;
pub const SUCCESS_THRESHOLDS: usize = 21;

/// One benchmark sequence: ordered ground-truth boxes in pixel coordinates
/// (absent frames allowed past the first) plus attribute tags.
#[derive(Clone, Debug)]
pub struct SequenceRecord {
    pub name: String,
    pub frames: Vec<BBox>,
    pub attributes: BTreeSet<String>,
}

impl SequenceRecord {
    pub fn new(name: &str, frames: Vec<BBox>) -> Result<Self> {
        let rec =
            SequenceRecord { name: name.to_string(), frames, attributes: BTreeSet::new() };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::Input(format!("sequence {} has no frames", self.name)));
        }
        if !self.frames[0].is_valid() {
            return Err(Error::Input(format!(
                "sequence {} first frame must carry a valid box",
                self.name
            )));
        }
        Ok(())
    }
}

/// Curves and scores for one evaluation slice.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Fraction with center error <= t, for integer t = 0..=50 px.
    pub precision_curve: Vec<f64>,
    pub precision_at_20: f64,
    /// Fraction with IoU > tau, for tau = 0.05*k, k = 0..=20.
    pub success_curve: Vec<f64>,
    /// Mean of the 21 success values.
    pub success_auc: f64,
    /// Number of frames that entered the statistics.
    pub frames_scored: usize,
}

/// Overall plus per-attribute reports (deterministic attribute order).
#[derive(Clone, Debug)]
pub struct BenchmarkReport {
    pub overall: EvalReport,
    pub per_attribute: BTreeMap<String, EvalReport>,
}

/// Overlap threshold for success index `k`.
pub fn tau(k: usize) -> f64 {
    k as f64 * 0.05
}

fn curves_from_samples(errs: &[f64], ious: &[f64]) -> EvalReport {
    let n = errs.len();
    let mut precision_curve = vec![0.0; PRECISION_THRESHOLDS];
    let mut success_curve = vec![0.0; SUCCESS_THRESHOLDS];
    if n > 0 {
        for (t, p) in precision_curve.iter_mut().enumerate() {
            let hits = errs.iter().filter(|&&e| e <= t as f64).count();
            *p = hits as f64 / n as f64;
        }
        for (k, s) in success_curve.iter_mut().enumerate() {
            let hits = ious.iter().filter(|&&v| v > tau(k)).count();
            *s = hits as f64 / n as f64;
        }
    }
    let success_auc = success_curve.iter().sum::<f64>() / SUCCESS_THRESHOLDS as f64;
    EvalReport {
        precision_at_20: precision_curve[20],
        precision_curve,
        success_curve,
        success_auc,
        frames_scored: n,
    }
}

fn collect_samples(
    results: &[BBox],
    gt: &SequenceRecord,
    errs: &mut Vec<f64>,
    ious: &mut Vec<f64>,
) -> Result<()> {
    gt.validate()?;
    if results.len() != gt.frames.len() {
        return Err(Error::Input(format!(
            "sequence {}: {} result boxes for {} ground-truth frames",
            gt.name,
            results.len(),
            gt.frames.len()
        )));
    }
    for (r, g) in results.iter().zip(&gt.frames) {
        if !g.is_valid() {
            continue; // absent ground truth
        }
        errs.push(r.center_error(g));
        ious.push(r.iou(g));
    }
    Ok(())
}

/// Scores one sequence.
pub fn evaluate(results: &[BBox], gt: &SequenceRecord) -> Result<EvalReport> {
    let mut errs = Vec::new();
    let mut ious = Vec::new();
    collect_samples(results, gt, &mut errs, &mut ious)?;
    Ok(curves_from_samples(&errs, &ious))
}

/// Frame-pooled aggregation over the sequences that carry `attribute`
/// (all sequences when `None`). Sequences are pooled in name order, so the
/// result is independent of input order.
pub fn aggregate(
    pairs: &[(&[BBox], &SequenceRecord)],
    attribute: Option<&str>,
) -> Result<EvalReport> {
    let mut selected: Vec<&(&[BBox], &SequenceRecord)> = pairs
        .iter()
        .filter(|(_, gt)| attribute.map_or(true, |a| gt.attributes.contains(a)))
        .collect();
    if selected.is_empty() {
        return Err(Error::Input(match attribute {
            Some(a) => format!("no sequence carries attribute '{}'", a),
            None => "no sequences to aggregate".to_string(),
        }));
    }
    selected.sort_by(|a, b| a.1.name.cmp(&b.1.name));
    let mut errs = Vec::new();
    let mut ious = Vec::new();
    for (results, gt) in selected {
        collect_samples(results, gt, &mut errs, &mut ious)?;
    }
    Ok(curves_from_samples(&errs, &ious))
}

/// Overall report plus one sub-report per attribute present anywhere.
pub fn evaluate_benchmark(pairs: &[(&[BBox], &SequenceRecord)]) -> Result<BenchmarkReport> {
    let overall = aggregate(pairs, None)?;
    let mut tags = BTreeSet::new();
    for (_, gt) in pairs {
        tags.extend(gt.attributes.iter().cloned());
    }
    let mut per_attribute = BTreeMap::new();
    for tag in tags {
        let rep = aggregate(pairs, Some(&tag))?;
        per_attribute.insert(tag, rep);
    }
    Ok(BenchmarkReport { overall, per_attribute })
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

/// Parses a box file: one frame per line, `x,y,w,h` decimals, literal `NaN`
/// allowed (absent ground truth). Blank lines are ignored.
pub fn parse_boxes(text: &str) -> Result<Vec<BBox>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(Error::Input(format!(
                "box file line {}: expected 4 comma-separated fields, got {}",
                ln + 1,
                parts.len()
            )));
        }
        let mut vals = [0.0f64; 4];
        for (v, p) in vals.iter_mut().zip(&parts) {
            *v = p.parse::<f64>().map_err(|_| {
                Error::Input(format!("box file line {}: bad number '{}'", ln + 1, p))
            })?;
        }
        out.push(BBox { x: vals[0], y: vals[1], w: vals[2], h: vals[3] });
    }
    Ok(out)
}

/// Serializes boxes in the same `x,y,w,h` format (shortest round-trip float
/// formatting, so identical values give identical bytes).
pub fn format_boxes(boxes: &[BBox]) -> String {
    let mut s = String::new();
    for b in boxes {
        let _ = writeln!(s, "{},{},{},{}", b.x, b.y, b.w, b.h);
    }
    s
}

pub fn read_boxes_file(path: &Path) -> Result<Vec<BBox>> {
    parse_boxes(&std::fs::read_to_string(path)?)
}

pub fn write_boxes_file(path: &Path, boxes: &[BBox]) -> Result<()> {
    std::fs::write(path, format_boxes(boxes))?;
    Ok(())
}

/// Parses an attribute file: one `name: tag,tag,...` line per sequence.
pub fn parse_attributes(text: &str) -> Result<BTreeMap<String, BTreeSet<String>>> {
    let mut out = BTreeMap::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (name, tags) = line.split_once(':').ok_or_else(|| {
            Error::Input(format!("attribute file line {}: missing ':'", ln + 1))
        })?;
        let set: BTreeSet<String> = tags
            .split(',')
            .map(|t| t.trim().to_string())
            .filter(|t| !t.is_empty())
            .collect();
        out.insert(name.trim().to_string(), set);
    }
    Ok(out)
}

/// CSV rendering of a report: `curve,threshold,value` rows for both curves,
/// then `summary` rows. Deterministic for identical inputs.
pub fn report_csv(report: &BenchmarkReport) -> String {
    let mut s = String::from("curve,threshold,value\n");
    let one = |s: &mut String, prefix: &str, rep: &EvalReport| {
        for (t, v) in rep.precision_curve.iter().enumerate() {
            let _ = writeln!(s, "{}precision,{},{}", prefix, t, v);
        }
        for (k, v) in rep.success_curve.iter().enumerate() {
            let _ = writeln!(s, "{}success,{:.2},{}", prefix, tau(k), v);
        }
        let _ = writeln!(s, "{}summary,precision_at_20,{}", prefix, rep.precision_at_20);
        let _ = writeln!(s, "{}summary,success_auc,{}", prefix, rep.success_auc);
        let _ = writeln!(s, "{}summary,frames,{}", prefix, rep.frames_scored);
    };
    one(&mut s, "", &report.overall);
    for (tag, rep) in &report.per_attribute {
        one(&mut s, &format!("{}:", tag), rep);
    }
    s
}
