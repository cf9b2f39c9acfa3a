use ndarray::Array2;

use crate::conditioning::SketchBitmap;
use crate::dataset::{extract_edges, AbstractionLevel};
use crate::error::{Error, Result};
use crate::image_ae::ImageTensor;

/// Stroke tolerance used when none is configured.
pub const DEFAULT_REC_TOLERANCE: usize = 2;

/// Grows every set pixel to the square of radius `r` around it.
pub fn dilate(mask: &Array2<bool>, r: usize) -> Array2<bool> {
    if r == 0 {
        return mask.clone();
    }
    let (h, w) = mask.dim();
    let mut rows = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            rows[[y, x]] = (lo..=hi).any(|k| mask[[y, k]]);
        }
    }
    let mut out = Array2::from_elem((h, w), false);
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            out[[y, x]] = (lo..=hi).any(|k| rows[[k, x]]);
        }
    }
    out
}

/// Fraction of the input's ink pixels within `tolerance_px` (Chebyshev
/// distance) of an ink pixel in `edges`.
pub fn rec_from_edges(input: &SketchBitmap, edges: &SketchBitmap, tolerance_px: usize) -> Result<f64> {
    if input.size() != edges.size() {
        return Err(Error::ShapeMismatch {
            expected: vec![input.size(), input.size()],
            got: vec![edges.size(), edges.size()],
        });
    }
    let ink = input.binarized();
    let total = ink.iter().filter(|v| **v).count();
    if total == 0 {
        return Err(Error::UndefinedMetric("input sketch has no ink".into()));
    }
    let covered = dilate(&edges.binarized(), tolerance_px);
    let hit = ink.iter().zip(covered.iter()).filter(|(a, b)| **a && **b).count();
    Ok(hit as f64 / total as f64)
}

/// Recall of the input strokes among mid-level edges re-extracted from the
/// synthesized image.
pub fn rec_score(input: &SketchBitmap, synth: &ImageTensor, tolerance_px: usize) -> Result<f64> {
    if input.ink_count() == 0 {
        return Err(Error::UndefinedMetric("input sketch has no ink".into()));
    }
    let edges = extract_edges(synth, AbstractionLevel::Mid, input.size())?;
    rec_from_edges(input, &edges, tolerance_px)
}
