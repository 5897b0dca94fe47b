//! Synthetic ECG traces and cine sequences with analytically known truth.
//!
//! The ECG is a sum of Gaussian bumps per beat plus baseline wander and
//! white noise. Frames show dark spline vessels on a bright background; the
//! vessel geometry contracts towards the image centre during systole and
//! relaxes during diastole, following the phase defined by the clean ECG.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bundle::{save_bundle, StudyBundle};
use crate::ecg::{
    bandpass_zero_phase, detect_end_of_systole, detect_t_peak, lowpass_zero_phase, t_window,
    EcgTrace, PhaseSignal,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::labeling::{frame_sample_range, map_phase_to_frames, FrameInterval};
use crate::vesselness::{CenterlineAnnotation, CenterlinePoint};

/// Seconds of extra ECG simulated on both sides of the acquisition so that
/// beats straddling its edges are fully defined.
const MARGIN_S: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub heart_rate_bpm: f64,
    /// Uniform relative jitter of each RR interval.
    pub rr_jitter: f64,
    pub duration_s: f64,
    pub ecg_fs: f64,
    /// `None` gives a noise-free trace.
    pub ecg_snr_db: Option<f64>,
    pub baseline_wander_mv: f64,
    /// T wave position as a fraction of the RR interval.
    pub t_fraction: f64,
    pub t_inverted: bool,
    pub fps: f64,
    pub size: usize,
    pub vessel_count: usize,
    pub vessel_radius: (f64, f64),
    pub motion_amplitude_px: f64,
    pub fade_in: usize,
    /// Last fully opacified frame; `None` keeps contrast to the end.
    pub fade_out: Option<usize>,
    pub ramp_frames: usize,
    pub pan_velocity: (f64, f64),
    pub frame_noise: f64,
    pub collimation_px: usize,
    pub bit_depth: u8,
    /// Every n-th opacified frame carries a centreline annotation.
    pub annotate_every: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            heart_rate_bpm: 70.0,
            rr_jitter: 0.03,
            duration_s: 5.0,
            ecg_fs: 400.0,
            ecg_snr_db: Some(25.0),
            baseline_wander_mv: 0.2,
            t_fraction: 0.35,
            t_inverted: false,
            fps: 15.0,
            size: 64,
            vessel_count: 4,
            vessel_radius: (1.0, 3.0),
            motion_amplitude_px: 8.0,
            fade_in: 0,
            fade_out: None,
            ramp_frames: 0,
            pan_velocity: (0.0, 0.0),
            frame_noise: 0.02,
            collimation_px: 0,
            bit_depth: 16,
            annotate_every: 4,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn frame_count(&self) -> usize {
        (self.duration_s * self.fps).round() as usize
    }

    pub fn sample_count(&self) -> usize {
        (self.duration_s * self.ecg_fs).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("heart_rate_bpm", self.heart_rate_bpm),
            ("duration_s", self.duration_s),
            ("ecg_fs", self.ecg_fs),
            ("fps", self.fps),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.duration_s < 60.0 / self.heart_rate_bpm {
            return Err(Error::Config(format!(
                "duration {} s is shorter than one beat at {} bpm",
                self.duration_s, self.heart_rate_bpm
            )));
        }
        if !(0.0..0.5).contains(&self.rr_jitter) || !(0.2..0.6).contains(&self.t_fraction) {
            return Err(Error::Config("rr_jitter or t_fraction out of range".into()));
        }
        let n = self.frame_count();
        let fade_out = self.fade_out.unwrap_or(n.saturating_sub(1));
        if n == 0 || self.fade_in >= fade_out.max(1) || fade_out >= n {
            return Err(Error::Config(format!(
                "need fade_in < fade_out < frame count, got {} / {fade_out} / {n}",
                self.fade_in
            )));
        }
        if self.size < 8 || 2 * self.collimation_px >= self.size {
            return Err(Error::Config(format!(
                "frame size {} with collimation {} leaves no field",
                self.size, self.collimation_px
            )));
        }
        if self.vessel_radius.0 <= 0.0 || self.vessel_radius.1 < self.vessel_radius.0 {
            return Err(Error::Config("vessel radius range must be positive".into()));
        }
        if self.bit_depth != 8 && self.bit_depth != 16 {
            return Err(Error::Config(format!("bit depth must be 8 or 16, got {}", self.bit_depth)));
        }
        Ok(())
    }

    fn fade_out_frame(&self) -> usize {
        self.fade_out.unwrap_or(self.frame_count() - 1)
    }
}

/// Beat boundaries in acquisition samples; may extend past either end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthBeat {
    pub r: i64,
    /// Centre of the T bump.
    pub t: i64,
    /// End of systole from the detection rules applied to the clean trace.
    pub eos: i64,
    pub next_r: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcgTruth {
    pub beats: Vec<TruthBeat>,
    pub n_samples: usize,
    pub fs: f64,
}

impl EcgTruth {
    /// R bump centres inside the acquisition.
    pub fn r_peaks(&self) -> Vec<usize> {
        self.beats
            .iter()
            .map(|b| b.r)
            .filter(|&r| r >= 0 && (r as usize) < self.n_samples)
            .map(|r| r as usize)
            .collect()
    }

    pub fn heart_rate(&self) -> f64 {
        let rates: Vec<f64> = self
            .beats
            .iter()
            .map(|b| 60.0 * self.fs / (b.next_r - b.r) as f64)
            .collect();
        rates.iter().sum::<f64>() / rates.len() as f64
    }

    /// Per-sample phase over the whole acquisition.
    pub fn phase(&self) -> PhaseSignal {
        let n = self.n_samples as i64;
        let mut values = vec![1u8; self.n_samples];
        for b in &self.beats {
            for i in b.r.max(0)..b.eos.min(n) {
                values[i as usize] = 0;
            }
        }
        PhaseSignal {
            fs: self.fs,
            values,
            valid_start: 0,
            valid_end: self.n_samples,
        }
    }

    /// Contraction level in `[0, 1]` at time `t` seconds: raised-cosine
    /// rise over systole, linear relaxation over diastole.
    pub fn contraction(&self, t: f64) -> f64 {
        let s = t * self.fs;
        let Some(b) = self
            .beats
            .iter()
            .find(|b| (b.r as f64) <= s && s < b.next_r as f64)
        else {
            return 0.0;
        };
        let (r, e, nr) = (b.r as f64, b.eos as f64, b.next_r as f64);
        if s < e {
            0.5 * (1.0 - (PI * (s - r) / (e - r)).cos())
        } else {
            1.0 - (s - e) / (nr - e)
        }
    }
}

fn gaussian(x: f64, centre: f64, sigma: f64) -> f64 {
    (-0.5 * ((x - centre) / sigma).powi(2)).exp()
}

/// Clean single-lead waveform for beats with R peaks at `r_times` seconds.
fn clean_waveform(times: &[f64], beats: &[(f64, f64, f64)], t_amp: f64) -> Vec<f64> {
    let mut out = vec![0.0; times.len()];
    let dt = times[1] - times[0];
    let t0 = times[0];
    let waves = |r: f64, rr: f64, tc: f64| {
        [
            (r - 0.15, 0.025, 0.12),
            (r - 0.03, 0.008, -0.12),
            (r, 0.010, 1.0),
            (r + 0.03, 0.008, -0.25),
            (tc, 0.045 * rr.sqrt(), t_amp),
        ]
    };
    for &(r, rr, tc) in beats {
        for (c, sigma, amp) in waves(r, rr, tc) {
            let lo = (((c - 5.0 * sigma - t0) / dt).floor().max(0.0)) as usize;
            let hi = ((((c + 5.0 * sigma - t0) / dt).ceil()) as usize).min(times.len());
            for i in lo..hi {
                out[i] += amp * gaussian(times[i], c, sigma);
            }
        }
    }
    out
}

/// Synthetic ECG with known R, T and end-of-systole positions.
pub fn gen_ecg(cfg: &SynthConfig) -> Result<(EcgTrace, EcgTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let fs = cfg.ecg_fs;
    let n = cfg.sample_count();
    let margin = (MARGIN_S * fs).round() as i64;
    let rr_mean = 60.0 / cfg.heart_rate_bpm;

    // R peaks on the sample grid, relative to the acquisition start.
    let mut r_idx: Vec<i64> = Vec::new();
    let mut r = -margin - (rng.gen::<f64>() * rr_mean * fs) as i64;
    while r <= n as i64 + margin {
        r_idx.push(r);
        let rr = rr_mean * (1.0 + cfg.rr_jitter * (2.0 * rng.gen::<f64>() - 1.0));
        r += (rr * fs).round().max(1.0) as i64;
    }
    r_idx.push(r);

    let first = r_idx[0] - margin;
    let last = *r_idx.last().expect("non-empty") + margin;
    let times: Vec<f64> = (first..last).map(|i| i as f64 / fs).collect();
    let beats: Vec<(f64, f64, f64)> = r_idx
        .windows(2)
        .map(|w| {
            let rr = (w[1] - w[0]) as f64 / fs;
            let tc = (w[0] as f64 / fs) + cfg.t_fraction * rr;
            (w[0] as f64 / fs, rr, tc)
        })
        .collect();
    let t_amp = if cfg.t_inverted { -0.3 } else { 0.3 };
    let clean = clean_waveform(&times, &beats, t_amp);

    let clean_trace = EcgTrace::new(fs, clean.clone())?;
    let smoothed = lowpass_zero_phase(&bandpass_zero_phase(&clean_trace, 3.0, 45.0)?, 10.0)?;
    let to_ext = |i: i64| (i - first) as usize;
    let mut truth_beats = Vec::with_capacity(beats.len());
    for (k, w) in r_idx.windows(2).enumerate() {
        let (r0, r1) = (to_ext(w[0]), to_ext(w[1]));
        let eos = match detect_t_peak(&smoothed, r0, r1) {
            Ok(t) => detect_end_of_systole(&smoothed, t, r0, r1).index,
            Err(_) => t_window(r0, r1).1,
        };
        truth_beats.push(TruthBeat {
            r: w[0],
            t: (beats[k].2 * fs).round() as i64,
            eos: eos as i64 + first,
            next_r: w[1],
        });
    }

    let start = to_ext(0);
    let mut samples: Vec<f64> = clean[start..start + n].to_vec();
    let signal_rms = (samples.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    let wander_f = 0.15 + 0.2 * rng.gen::<f64>();
    let wander_phase = 2.0 * PI * rng.gen::<f64>();
    let noise_sd = cfg
        .ecg_snr_db
        .map(|snr| signal_rms / 10f64.powf(snr / 20.0))
        .unwrap_or(0.0);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    for (i, v) in samples.iter_mut().enumerate() {
        let t = i as f64 / fs;
        *v += cfg.baseline_wander_mv * (2.0 * PI * wander_f * t + wander_phase).sin();
        if noise_sd > 0.0 {
            *v += noise_sd * normal.sample(&mut rng);
        }
    }
    // Only beats overlapping the acquisition are kept in the truth.
    let kept: Vec<TruthBeat> = truth_beats
        .into_iter()
        .filter(|b| b.next_r > 0 && b.r < n as i64)
        .collect();
    Ok((
        EcgTrace::new(fs, samples)?,
        EcgTruth {
            beats: kept,
            n_samples: n,
            fs,
        },
    ))
}

/// Contrast opacity of frame `k`.
pub fn contrast_envelope(cfg: &SynthConfig, k: usize) -> f64 {
    let ramp = (cfg.ramp_frames + 1) as f64;
    let fade_out = cfg.fade_out_frame();
    if k < cfg.fade_in {
        0.0
    } else if k < cfg.fade_in + cfg.ramp_frames {
        (k - cfg.fade_in + 1) as f64 / ramp
    } else if k <= fade_out {
        1.0
    } else {
        (1.0 - (k - fade_out) as f64 / ramp).max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub beats: Vec<TruthBeat>,
    pub heart_rate_bpm: f64,
    pub frame_labels: Vec<f64>,
    pub edf_frames: Vec<usize>,
    pub contrast: Vec<f64>,
    /// Frames at full opacity.
    pub contrast_filled: FrameInterval,
}

#[derive(Debug, Clone)]
pub struct SynthSequence {
    pub config: SynthConfig,
    pub ecg: EcgTrace,
    pub ecg_truth: EcgTruth,
    pub frames: Vec<Image>,
    /// Generating centrelines of every frame (empty before opacification).
    pub centerlines: Vec<CenterlineAnnotation>,
    pub truth: SynthTruth,
}

/// Base vessel geometry: polylines sampled densely along Catmull-Rom
/// splines through 4-7 random control points.
fn gen_vessels(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<CenterlinePoint>> {
    let size = cfg.size as f64;
    let lo = cfg.collimation_px as f64 + 0.1 * size;
    let hi = size - 1.0 - cfg.collimation_px as f64 - 0.1 * size;
    let step = (hi - lo) / 4.0;
    (0..cfg.vessel_count)
        .map(|_| {
            let n_ctrl = rng.gen_range(4..=7);
            let radius = rng.gen_range(cfg.vessel_radius.0..=cfg.vessel_radius.1);
            let mut pts = vec![(rng.gen_range(lo..=hi), rng.gen_range(lo..=hi))];
            let mut heading = rng.gen_range(0.0..2.0 * PI);
            for _ in 1..n_ctrl {
                heading += rng.gen_range(-0.8..0.8);
                let (px, py) = *pts.last().expect("non-empty");
                let mut nx = px + step * heading.cos();
                let mut ny = py + step * heading.sin();
                if !(lo..=hi).contains(&nx) || !(lo..=hi).contains(&ny) {
                    heading += PI;
                    nx = (px + step * heading.cos()).clamp(lo, hi);
                    ny = (py + step * heading.sin()).clamp(lo, hi);
                }
                pts.push((nx, ny));
            }
            catmull_rom(&pts, 0.5)
                .into_iter()
                .map(|(x, y)| CenterlinePoint { x, y, radius })
                .collect()
        })
        .collect()
}

fn catmull_rom(ctrl: &[(f64, f64)], spacing: f64) -> Vec<(f64, f64)> {
    let n = ctrl.len();
    let at = |i: isize| ctrl[i.clamp(0, n as isize - 1) as usize];
    let mut out = Vec::new();
    for seg in 0..n - 1 {
        let (p0, p1, p2, p3) = (
            at(seg as isize - 1),
            at(seg as isize),
            at(seg as isize + 1),
            at(seg as isize + 2),
        );
        let len = ((p2.0 - p1.0).powi(2) + (p2.1 - p1.1).powi(2)).sqrt();
        let steps = ((len / spacing).ceil() as usize).max(1);
        for s in 0..steps {
            let t = s as f64 / steps as f64;
            let (t2, t3) = (t * t, t * t * t);
            let f = |a: f64, b: f64, c: f64, d: f64| {
                0.5 * (2.0 * b + (c - a) * t + (2.0 * a - 5.0 * b + 4.0 * c - d) * t2
                    + (3.0 * b - a - 3.0 * c + d) * t3)
            };
            out.push((f(p0.0, p1.0, p2.0, p3.0), f(p0.1, p1.1, p2.1, p3.1)));
        }
    }
    out.push(ctrl[n - 1]);
    out
}

fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

/// Vessel geometry of the frame at time `t`: every vessel moves rigidly
/// `A * s(t)` pixels from its centroid towards the image centre, plus panning.
fn displaced(
    base: &[Vec<CenterlinePoint>],
    cfg: &SynthConfig,
    contraction: f64,
    frame: usize,
) -> CenterlineAnnotation {
    let c = (cfg.size as f64 - 1.0) / 2.0;
    let (px, py) = (cfg.pan_velocity.0 * frame as f64, cfg.pan_velocity.1 * frame as f64);
    let shift = cfg.motion_amplitude_px * contraction;
    CenterlineAnnotation {
        vessels: base
            .iter()
            .map(|v| {
                let n = v.len().max(1) as f64;
                let (mx, my) = v.iter().fold((0.0, 0.0), |(x, y), p| (x + p.x / n, y + p.y / n));
                let (dx, dy) = (c - mx, c - my);
                let norm = dx.hypot(dy);
                let (ux, uy) = if norm > 1e-9 { (dx / norm, dy / norm) } else { (0.0, -1.0) };
                v.iter()
                    .map(|p| CenterlinePoint {
                        x: round3(p.x + shift * ux + px),
                        y: round3(p.y + shift * uy + py),
                        radius: round3(p.radius),
                    })
                    .collect()
            })
            .collect(),
    }
}

/// Anti-aliased vessel coverage: `clamp(0.5 - (d - r), 0, 1)` with `d - r`
/// minimised over centreline points.
fn coverage(ann: &CenterlineAnnotation, size: usize) -> Vec<f64> {
    let mut excess = vec![f64::INFINITY; size * size];
    for p in ann.points() {
        let reach = p.radius + 1.0;
        let x0 = (p.x - reach).floor().max(0.0) as usize;
        let y0 = (p.y - reach).floor().max(0.0) as usize;
        let x1 = ((p.x + reach).ceil().max(0.0) as usize).min(size - 1);
        let y1 = ((p.y + reach).ceil().max(0.0) as usize).min(size - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = ((x as f64 - p.x).powi(2) + (y as f64 - p.y).powi(2)).sqrt() - p.radius;
                let e = &mut excess[y * size + x];
                if d < *e {
                    *e = d;
                }
            }
        }
    }
    excess.into_iter().map(|e| (0.5 - e).clamp(0.0, 1.0)).collect()
}

/// Frame `i` is an end-diastolic frame iff it lies entirely in diastole and
/// an R peak falls inside frame `i + 1`.
pub fn analytic_edf_frames(truth: &EcgTruth, n_frames: usize) -> Vec<usize> {
    let ranges: Vec<_> = (0..n_frames)
        .map(|i| frame_sample_range(i, n_frames, truth.n_samples))
        .collect();
    let pure_diastole = |i: usize| {
        let r = &ranges[i];
        let (a, b) = (r.start as i64, r.end as i64);
        !r.is_empty()
            && truth
                .beats
                .iter()
                .all(|bt| bt.eos <= a || bt.r >= b)
    };
    (0..n_frames.saturating_sub(1))
        .filter(|&i| {
            let next = &ranges[i + 1];
            pure_diastole(i)
                && truth
                    .beats
                    .iter()
                    .any(|bt| bt.r >= next.start as i64 && bt.r < next.end as i64)
        })
        .collect()
}

/// Renders the cine frames for a generated ECG.
pub fn gen_cine(cfg: &SynthConfig, ecg_truth: &EcgTruth) -> Result<SynthSequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let n = cfg.frame_count();
    let size = cfg.size;
    let base = gen_vessels(cfg, &mut rng);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let bg_phase = rng.gen_range(0.0..2.0 * PI);
    let background: Vec<f64> = (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f64, (i / size) as f64);
            0.8 + 0.05 * ((x + 0.7 * y) / size as f64 * 2.0 * PI + bg_phase).sin()
        })
        .collect();
    let b = cfg.collimation_px;
    let inside = |x: usize, y: usize| x >= b && y >= b && x < size - b && y < size - b;

    let mut frames = Vec::with_capacity(n);
    let mut centerlines = Vec::with_capacity(n);
    let mut contrast = Vec::with_capacity(n);
    for k in 0..n {
        let t = (k as f64 + 0.5) / cfg.fps;
        let ann = displaced(&base, cfg, ecg_truth.contraction(t), k);
        let opacity = contrast_envelope(cfg, k);
        let cov = coverage(&ann, size);
        let mut data = vec![0.0; size * size];
        for y in 0..size {
            for x in 0..size {
                let i = y * size + x;
                if inside(x, y) {
                    let v = background[i] - 0.5 * opacity * cov[i]
                        + cfg.frame_noise * normal.sample(&mut rng);
                    data[i] = v.clamp(0.0, 1.0);
                }
            }
        }
        frames.push(Image::new(size, size, data)?);
        centerlines.push(if opacity > 0.0 {
            ann
        } else {
            CenterlineAnnotation::default()
        });
        contrast.push(opacity);
    }

    let labels = map_phase_to_frames(&ecg_truth.phase(), n, cfg.fps)?.labels;
    let filled_start = cfg.fade_in + cfg.ramp_frames;
    let truth = SynthTruth {
        beats: ecg_truth.beats.clone(),
        heart_rate_bpm: ecg_truth.heart_rate(),
        edf_frames: analytic_edf_frames(ecg_truth, n),
        frame_labels: labels,
        contrast,
        contrast_filled: FrameInterval::new(filled_start, cfg.fade_out_frame().max(filled_start)),
    };
    Ok(SynthSequence {
        config: cfg.clone(),
        ecg: EcgTrace::new(cfg.ecg_fs, Vec::new())?,
        ecg_truth: ecg_truth.clone(),
        frames,
        centerlines,
        truth,
    })
}

/// ECG and frames of one synthetic acquisition.
pub fn gen_sequence(cfg: &SynthConfig) -> Result<SynthSequence> {
    let (ecg, ecg_truth) = gen_ecg(cfg)?;
    let mut seq = gen_cine(cfg, &ecg_truth)?;
    seq.ecg = ecg;
    Ok(seq)
}

/// Ranges from which per-sequence configurations are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthDistribution {
    pub heart_rate_bpm: (f64, f64),
    pub fps_choices: Vec<f64>,
    pub duration_s: (f64, f64),
    pub ecg_snr_db: (f64, f64),
    pub motion_amplitude_px: (f64, f64),
    pub t_fraction: (f64, f64),
    pub size: usize,
    pub vessel_count: (usize, usize),
    pub frame_noise: f64,
    /// Probability that a sequence has a blank prefix and a washout.
    pub contrast_fade_prob: f64,
    pub pan_speed_px: f64,
    pub collimation_px: usize,
    pub bit_depth: u8,
}

impl Default for SynthDistribution {
    fn default() -> Self {
        Self {
            heart_rate_bpm: (40.0, 120.0),
            fps_choices: vec![10.0, 15.0, 30.0],
            duration_s: (4.0, 6.0),
            ecg_snr_db: (10.0, 30.0),
            motion_amplitude_px: (6.0, 10.0),
            t_fraction: (0.30, 0.40),
            size: 64,
            vessel_count: (3, 5),
            frame_noise: 0.02,
            contrast_fade_prob: 0.0,
            pan_speed_px: 0.0,
            collimation_px: 0,
            bit_depth: 16,
        }
    }
}

impl SynthDistribution {
    /// Deterministic configuration for sequence `index` under `seed`.
    pub fn sample(&self, seed: u64, index: u64) -> SynthConfig {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index.wrapping_add(1_000));
        let range = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| {
            if hi > lo {
                rng.gen_range(lo..=hi)
            } else {
                lo
            }
        };
        let heart_rate_bpm = range(&mut rng, self.heart_rate_bpm);
        let fps = self.fps_choices[rng.gen_range(0..self.fps_choices.len().max(1))];
        let duration_s = range(&mut rng, self.duration_s).max(60.0 / heart_rate_bpm);
        let n = (duration_s * fps).round() as usize;
        let (fade_in, fade_out, ramp) = if rng.gen::<f64>() < self.contrast_fade_prob {
            let ramp = (fps / 10.0).round() as usize;
            let fade_in = rng.gen_range(n / 8..=n / 4);
            let fade_out = rng.gen_range(3 * n / 4..=(7 * n / 8).max(3 * n / 4)).min(n - 1);
            (fade_in, Some(fade_out), ramp)
        } else {
            (0, None, 0)
        };
        let angle = rng.gen_range(0.0..2.0 * PI);
        let speed = self.pan_speed_px * rng.gen::<f64>();
        SynthConfig {
            heart_rate_bpm,
            duration_s,
            ecg_snr_db: Some(range(&mut rng, self.ecg_snr_db)),
            t_fraction: range(&mut rng, self.t_fraction),
            t_inverted: false,
            fps,
            size: self.size,
            vessel_count: rng.gen_range(self.vessel_count.0..=self.vessel_count.1),
            motion_amplitude_px: range(&mut rng, self.motion_amplitude_px),
            fade_in,
            fade_out,
            ramp_frames: ramp,
            pan_velocity: (speed * angle.cos(), speed * angle.sin()),
            frame_noise: self.frame_noise,
            collimation_px: self.collimation_px,
            bit_depth: self.bit_depth,
            seed: seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add(index),
            ..SynthConfig::default()
        }
    }
}

/// Directory name of sequence `index` inside a generated dataset.
pub fn dataset_entry_name(index: u64) -> String {
    format!("seq_{index:04}")
}

/// Writes `n` bundles with truth sidecars under `out`, one per
/// subdirectory. Each is a pure function of `(dist, seed, index)`.
pub fn gen_dataset(n: u64, dist: &SynthDistribution, seed: u64, out: &Path) -> Result<Vec<PathBuf>> {
    (0..n)
        .map(|i| {
            let cfg = dist.sample(seed, i);
            let seq = gen_sequence(&cfg)?;
            let name = dataset_entry_name(i);
            let bundle = StudyBundle::from_synth(&seq, &name)?;
            let dir = out.join(&name);
            save_bundle(&bundle, &dir)?;
            Ok(dir)
        })
        .collect()
}
