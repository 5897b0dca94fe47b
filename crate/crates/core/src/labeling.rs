//! Per-frame phase labels, 10 fps normalisation and training windows.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::ecg::PhaseSignal;
use crate::error::{Error, Result};

/// Frames in a network input window.
pub const WINDOW_LEN: usize = 10;
/// Zero-based position of the first classified frame inside a window.
pub const TARGET_OFFSET: usize = 3;
/// Number of classified frames per window.
pub const TARGET_LEN: usize = 4;
pub const TARGET_FPS: f64 = 10.0;

/// Inclusive range of frame indices within a parent sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameInterval {
    pub start: usize,
    pub end: usize,
}

impl FrameInterval {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start <= end);
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, i: usize) -> bool {
        (self.start..=self.end).contains(&i)
    }

    pub fn indices(&self) -> Range<usize> {
        self.start..self.end + 1
    }

    pub fn intersect(&self, other: &FrameInterval) -> Option<FrameInterval> {
        let s = self.start.max(other.start);
        let e = self.end.min(other.end);
        (s <= e).then(|| FrameInterval::new(s, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameLabelTrack {
    /// Fractional labels, `labels[j]` belongs to frame `interval.start + j`.
    pub labels: Vec<f64>,
    pub fps: f64,
    pub interval: FrameInterval,
}

impl FrameLabelTrack {
    pub fn label_of(&self, frame: usize) -> Option<f64> {
        self.interval
            .contains(frame)
            .then(|| self.labels[frame - self.interval.start])
    }
}

/// Samples `[⌊iS/N⌋, ⌊(i+1)S/N⌋)` covered by frame `i` of `n_frames`.
pub fn frame_sample_range(i: usize, n_frames: usize, n_samples: usize) -> Range<usize> {
    let at = |k: usize| (k as u128 * n_samples as u128 / n_frames as u128) as usize;
    at(i)..at(i + 1)
}

/// Splits the phase signal into `n_frames` equal intervals and labels each
/// frame with the mean phase over its interval. Frames not entirely inside
/// the valid ECG range are dropped.
pub fn map_phase_to_frames(phase: &PhaseSignal, n_frames: usize, fps: f64) -> Result<FrameLabelTrack> {
    let n_samples = phase.values.len();
    let mut kept: Vec<(usize, f64)> = Vec::new();
    for i in 0..n_frames {
        let r = frame_sample_range(i, n_frames, n_samples);
        if r.is_empty() || r.start < phase.valid_start || r.end > phase.valid_end {
            continue;
        }
        let sum: u64 = phase.values[r.clone()].iter().map(|&v| v as u64).sum();
        kept.push((i, sum as f64 / r.len() as f64));
    }
    let (Some(&(first, _)), Some(&(last, _))) = (kept.first(), kept.last()) else {
        return Err(Error::NoOverlap);
    };
    Ok(FrameLabelTrack {
        labels: kept.into_iter().map(|(_, l)| l).collect(),
        fps,
        interval: FrameInterval::new(first, last),
    })
}

/// Positions kept when decimating `n` frames at `fps` to 10 fps: output
/// frame `k` is input frame `round(k * fps / 10)`.
pub fn resample_indices(n: usize, fps: f64) -> Result<Vec<usize>> {
    if !(fps >= TARGET_FPS) {
        return Err(Error::UnsupportedFrameRate { fps });
    }
    let step = fps / TARGET_FPS;
    Ok((0..)
        .map(|k| (k as f64 * step).round() as usize)
        .take_while(|&i| i < n)
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Resampled<T> {
    pub frames: Vec<T>,
    pub labels: Vec<f64>,
    /// Parent-sequence frame index of every kept frame.
    pub source: Vec<usize>,
}

/// Decimates a labelled track and its frames (one per track label) to 10 fps.
pub fn resample_to_10fps<T: Clone>(track: &FrameLabelTrack, frames: &[T]) -> Result<Resampled<T>> {
    if frames.len() != track.labels.len() {
        return Err(Error::Shape(format!(
            "{} frames for {} labels",
            frames.len(),
            track.labels.len()
        )));
    }
    let idx = resample_indices(track.labels.len(), track.fps)?;
    Ok(Resampled {
        frames: idx.iter().map(|&i| frames[i].clone()).collect(),
        labels: idx.iter().map(|&i| track.labels[i]).collect(),
        source: idx.iter().map(|&i| track.interval.start + i).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingWindow {
    /// First frame of the window.
    pub start: usize,
    /// Labels of frames `start + 3 ..= start + 6`.
    pub targets: [f64; TARGET_LEN],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WindowDataset {
    pub windows: Vec<TrainingWindow>,
}

impl WindowDataset {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

/// All `x - 9` windows of 10 consecutive frames; none when `x < 10`.
pub fn make_training_windows(labels: &[f64]) -> WindowDataset {
    if labels.len() < WINDOW_LEN {
        return WindowDataset::default();
    }
    let windows = (0..=labels.len() - WINDOW_LEN)
        .map(|w| {
            let mut targets = [0.0; TARGET_LEN];
            targets.copy_from_slice(&labels[w + TARGET_OFFSET..w + TARGET_OFFSET + TARGET_LEN]);
            TrainingWindow { start: w, targets }
        })
        .collect();
    WindowDataset { windows }
}
