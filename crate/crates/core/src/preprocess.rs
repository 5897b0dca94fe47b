//! Collimation removal, resizing and intensity normalisation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{normalize_sequence, Image};

pub const DEFAULT_COLLIMATION_EPS: f64 = 1e-6;

/// Field of view left after removing collimated borders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Crop {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

impl Crop {
    pub fn full(width: usize, height: usize) -> Self {
        Self {
            x0: 0,
            y0: 0,
            width,
            height,
        }
    }
}

/// Per-pixel variance over time.
fn temporal_variance(frames: &[Image]) -> Vec<f64> {
    let n = frames.len() as f64;
    let len = frames[0].data.len();
    let mut mean = vec![0.0; len];
    for f in frames {
        for (m, v) in mean.iter_mut().zip(&f.data) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; len];
    for f in frames {
        for ((s, v), m) in var.iter_mut().zip(&f.data).zip(&mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    var
}

/// Peels border rows, then columns, whose mean temporal variance is below
/// `eps`. Fails when more than half of both dimensions would be removed.
pub fn detect_collimation(frames: &[Image], eps: f64) -> Result<Crop> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Shape("no frames to preprocess".into()))?;
    let (w, h) = (first.width, first.height);
    if frames.iter().any(|f| (f.width, f.height) != (w, h)) {
        return Err(Error::Shape("frames of differing sizes".into()));
    }
    let var = temporal_variance(frames);
    let row_active =
        |y: usize, x0: usize, x1: usize| var[y * w + x0..y * w + x1].iter().sum::<f64>() / (x1 - x0) as f64 >= eps;
    let collimated = |rows: usize, cols: usize| Error::Collimation {
        rows,
        cols,
        height: h,
        width: w,
    };
    let Some(top) = (0..h).find(|&y| row_active(y, 0, w)) else {
        return Err(collimated(h, w));
    };
    let bottom = (0..h).rev().find(|&y| row_active(y, 0, w)).expect("top exists");
    let col_active = |x: usize| (top..=bottom).map(|y| var[y * w + x]).sum::<f64>() / (bottom - top + 1) as f64 >= eps;
    let left = (0..w).find(|&x| col_active(x)).unwrap_or(w);
    let right = (0..w).rev().find(|&x| col_active(x)).unwrap_or(0);
    let removed_rows = h - (bottom - top + 1);
    let removed_cols = if left > right { w } else { w - (right - left + 1) };
    if (2 * removed_rows > h && 2 * removed_cols > w) || left > right {
        return Err(collimated(removed_rows, removed_cols));
    }
    Ok(Crop {
        x0: left,
        y0: top,
        width: right - left + 1,
        height: bottom - top + 1,
    })
}

/// Crops, resizes to `target x target` and normalises a sequence to `[0, 1]`.
pub fn apply_crop(frames: &[Image], crop: Crop, target: usize) -> Vec<Image> {
    let mut out: Vec<Image> = frames
        .iter()
        .map(|f| f.crop(crop.x0, crop.y0, crop.width, crop.height).resize(target, target))
        .collect();
    normalize_sequence(&mut out);
    out
}

#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub frames: Vec<Image>,
    pub crop: Crop,
}

pub fn preprocess_frames(frames: &[Image], target: usize, eps: f64) -> Result<Preprocessed> {
    if target == 0 {
        return Err(Error::Config("target resolution must be positive".into()));
    }
    let crop = detect_collimation(frames, eps)?;
    Ok(Preprocessed {
        frames: apply_crop(frames, crop, target),
        crop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noisy(w: usize, h: usize, n: usize, border: usize, seed: u64) -> Vec<Image> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let mut im = Image::filled(w, h, 0.0);
                for y in border..h - border {
                    for x in border..w - border {
                        im.set(x, y, rng.gen_range(0.2..0.9));
                    }
                }
                im
            })
            .collect()
    }

    #[test]
    fn black_border_is_removed_exactly() {
        let frames = noisy(40, 40, 5, 10, 1);
        let crop = detect_collimation(&frames, DEFAULT_COLLIMATION_EPS).unwrap();
        assert_eq!(crop, Crop { x0: 10, y0: 10, width: 20, height: 20 });
        let inner = frames[2].crop(10, 10, 20, 20);
        assert_eq!(inner.data, frames[2].crop(crop.x0, crop.y0, crop.width, crop.height).data);
    }

    #[test]
    fn no_border_at_target_size_is_normalisation_only() {
        let frames = noisy(16, 16, 3, 0, 2);
        let out = preprocess_frames(&frames, 16, DEFAULT_COLLIMATION_EPS).unwrap();
        let mut expect = frames.clone();
        normalize_sequence(&mut expect);
        assert_eq!(out.frames, expect);
        assert_eq!(out.crop, Crop::full(16, 16));
    }

    #[test]
    fn large_input_is_downsampled() {
        let frames = noisy(128, 128, 2, 0, 3);
        let out = preprocess_frames(&frames, 32, DEFAULT_COLLIMATION_EPS).unwrap();
        assert_eq!((out.frames[0].width, out.frames[0].height), (32, 32));
    }

    #[test]
    fn mostly_collimated_input_is_rejected() {
        let frames = noisy(40, 40, 4, 11, 4);
        let err = detect_collimation(&frames, DEFAULT_COLLIMATION_EPS).unwrap_err();
        assert_eq!(err.category(), "CollimationError");
        let still = vec![Image::filled(8, 8, 0.5); 3];
        assert!(detect_collimation(&still, DEFAULT_COLLIMATION_EPS).is_err());
    }
}
