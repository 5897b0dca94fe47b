//! ECG conditioning, beat annotation and the per-sample phase signal.
//!
//! The chain is: zero-phase band-pass, R-peak detection on the band-passed
//! trace, a second zero-phase low-pass, then per beat a T peak and an
//! end-of-systole point. Systole (0) runs from each R peak to its
//! end-of-systole point, diastole (1) from there to the next R peak.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcgTrace {
    /// Sampling rate in Hz.
    pub fs: f64,
    /// Samples in millivolts.
    pub samples: Vec<f64>,
}

impl EcgTrace {
    pub fn new(fs: f64, samples: Vec<f64>) -> Result<Self> {
        if !(fs.is_finite() && fs > 0.0) {
            return Err(Error::Config(format!("sampling rate must be positive, got {fs}")));
        }
        Ok(Self { fs, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.fs
    }

    fn with_samples(&self, samples: Vec<f64>) -> Self {
        Self { fs: self.fs, samples }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EcgConfig {
    pub bandpass_lo_hz: f64,
    pub bandpass_hi_hz: f64,
    pub lowpass_hz: f64,
    /// Filter length in seconds; the tap count is rounded up to odd.
    pub filter_seconds: f64,
}

impl Default for EcgConfig {
    fn default() -> Self {
        Self {
            bandpass_lo_hz: 3.0,
            bandpass_hi_hz: 45.0,
            lowpass_hz: 10.0,
            filter_seconds: 0.3,
        }
    }
}

/// Odd tap count covering `seconds` of signal.
pub fn tap_count(fs: f64, seconds: f64) -> usize {
    let n = ((seconds * fs).round() as usize).max(3);
    n | 1
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

fn hamming(n: usize, len: usize) -> f64 {
    0.54 - 0.46 * (2.0 * PI * n as f64 / (len - 1) as f64).cos()
}

/// Gain of a symmetric FIR at `freq` Hz.
fn gain_at(taps: &[f64], freq: f64, fs: f64) -> f64 {
    let m = (taps.len() - 1) as f64 / 2.0;
    taps.iter()
        .enumerate()
        .map(|(n, h)| h * (2.0 * PI * freq / fs * (n as f64 - m)).cos())
        .sum()
}

/// Hamming-windowed sinc band-pass, unit gain at the passband centre.
pub fn design_bandpass(lo: f64, hi: f64, fs: f64, ntaps: usize) -> Vec<f64> {
    let m = (ntaps - 1) as f64 / 2.0;
    let (a, b) = (2.0 * lo / fs, 2.0 * hi / fs);
    let taps: Vec<f64> = (0..ntaps)
        .map(|n| {
            let x = n as f64 - m;
            (b * sinc(b * x) - a * sinc(a * x)) * hamming(n, ntaps)
        })
        .collect();
    let g = gain_at(&taps, 0.5 * (lo + hi), fs);
    taps.into_iter().map(|h| h / g).collect()
}

/// Hamming-windowed sinc low-pass, unit gain at DC.
pub fn design_lowpass(cutoff: f64, fs: f64, ntaps: usize) -> Vec<f64> {
    let m = (ntaps - 1) as f64 / 2.0;
    let a = 2.0 * cutoff / fs;
    let taps: Vec<f64> = (0..ntaps)
        .map(|n| a * sinc(a * (n as f64 - m)) * hamming(n, ntaps))
        .collect();
    let g: f64 = taps.iter().sum();
    taps.into_iter().map(|h| h / g).collect()
}

fn fir_causal(taps: &[f64], x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let span = taps.len().min(i + 1);
            (0..span).map(|j| taps[j] * x[i - j]).sum()
        })
        .collect()
}

/// Forward then backward FIR pass with odd-reflection edge padding.
pub fn filtfilt(taps: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    let n = x.len();
    if n < taps.len() {
        return Err(Error::SignalTooShort {
            len: n,
            taps: taps.len(),
        });
    }
    let pad = (3 * taps.len()).min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|k| 2.0 * x[0] - x[k]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|k| 2.0 * x[n - 1] - x[n - 1 - k]));
    let mut y = fir_causal(taps, &ext);
    y.reverse();
    let mut y = fir_causal(taps, &y);
    y.reverse();
    Ok(y[pad..pad + n].to_vec())
}

pub fn bandpass_zero_phase(trace: &EcgTrace, lo: f64, hi: f64) -> Result<EcgTrace> {
    bandpass_with_length(trace, lo, hi, EcgConfig::default().filter_seconds)
}

pub fn bandpass_with_length(trace: &EcgTrace, lo: f64, hi: f64, seconds: f64) -> Result<EcgTrace> {
    if !(lo > 0.0 && lo < hi && hi < trace.fs / 2.0) {
        return Err(Error::Config(format!(
            "band-pass needs 0 < lo < hi < fs/2, got [{lo}, {hi}] at fs {}",
            trace.fs
        )));
    }
    let taps = design_bandpass(lo, hi, trace.fs, tap_count(trace.fs, seconds));
    Ok(trace.with_samples(filtfilt(&taps, &trace.samples)?))
}

pub fn lowpass_zero_phase(trace: &EcgTrace, cutoff: f64) -> Result<EcgTrace> {
    lowpass_with_length(trace, cutoff, EcgConfig::default().filter_seconds)
}

pub fn lowpass_with_length(trace: &EcgTrace, cutoff: f64, seconds: f64) -> Result<EcgTrace> {
    if !(cutoff > 0.0 && cutoff < trace.fs / 2.0) {
        return Err(Error::Config(format!(
            "low-pass needs 0 < cutoff < fs/2, got {cutoff} at fs {}",
            trace.fs
        )));
    }
    let taps = design_lowpass(cutoff, trace.fs, tap_count(trace.fs, seconds));
    Ok(trace.with_samples(filtfilt(&taps, &trace.samples)?))
}

const REFRACTORY_S: f64 = 0.2;
const INTEGRATION_S: f64 = 0.15;
const REFINE_S: f64 = 0.075;
const LEARNING_S: f64 = 2.0;

fn is_local_max(x: &[f64], i: usize) -> bool {
    i > 0 && i + 1 < x.len() && x[i] > x[i - 1] && x[i] >= x[i + 1]
}

fn is_local_min(x: &[f64], i: usize) -> bool {
    i > 0 && i + 1 < x.len() && x[i] < x[i - 1] && x[i] <= x[i + 1]
}

/// Energy envelope: centred derivative, squaring, moving-window integration.
fn integrated_energy(x: &[f64], fs: f64) -> Vec<f64> {
    let n = x.len();
    let at = |i: isize| x[i.clamp(0, n as isize - 1) as usize];
    let sq: Vec<f64> = (0..n as isize)
        .map(|i| {
            let d = (2.0 * at(i + 1) + at(i + 2) - at(i - 2) - 2.0 * at(i - 1)) * fs / 8.0;
            d * d
        })
        .collect();
    let half = ((INTEGRATION_S * fs).round() as usize / 2).max(1);
    let mut prefix = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + sq[i];
    }
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

/// QRS detection on a band-passed trace: energy envelope with adaptive
/// signal/noise thresholds, search-back for missed beats, a 200 ms
/// refractory period and refinement to the largest absolute deflection.
pub fn detect_r_peaks(filtered: &EcgTrace) -> Result<Vec<usize>> {
    let x = &filtered.samples;
    let fs = filtered.fs;
    let n = x.len();
    if n < 5 {
        return Err(Error::InsufficientBeats { found: 0 });
    }
    let energy = integrated_energy(x, fs);
    let refractory = (REFRACTORY_S * fs).round() as usize;
    // Boundary samples count when the envelope rises into the edge, so a QRS
    // truncated by the recording start or end can still be found.
    let candidates: Vec<usize> = (0..n)
        .filter(|&i| match i {
            0 => energy[0] > energy[1],
            i if i == n - 1 => energy[i] > energy[i - 1],
            _ => is_local_max(&energy, i),
        })
        .collect();

    let learn = ((LEARNING_S * fs) as usize).clamp(1, n);
    let head = &energy[..learn];
    let mut spk = head.iter().cloned().fold(0.0, f64::max) / 3.0;
    let mut npk = head.iter().sum::<f64>() / learn as f64 / 2.0;
    let mut accepted: Vec<usize> = Vec::new();

    let threshold = |spk: f64, npk: f64| npk + 0.25 * (spk - npk);
    let mut ci = 0;
    while ci < candidates.len() {
        let c = candidates[ci];
        let v = energy[c];
        let thr = threshold(spk, npk);
        if v > thr && v > 0.0 {
            match accepted.last().copied() {
                Some(last) if c - last < refractory => {
                    if v > energy[last] {
                        *accepted.last_mut().expect("non-empty") = c;
                        spk = 0.125 * v + 0.875 * spk;
                    }
                }
                prev => {
                    if let Some(prev) = prev {
                        if let Some(missed) =
                            search_back(&energy, &candidates, &accepted, prev, c, thr, refractory)
                        {
                            accepted.push(missed);
                            spk = 0.25 * energy[missed] + 0.75 * spk;
                        }
                    }
                    accepted.push(c);
                    spk = 0.125 * v + 0.875 * spk;
                }
            }
        } else {
            npk = 0.125 * v + 0.875 * npk;
        }
        ci += 1;
    }

    let half = (REFINE_S * fs).round() as usize;
    let abs: Vec<f64> = x.iter().map(|v| v.abs()).collect();
    let mut peaks: Vec<usize> = Vec::with_capacity(accepted.len());
    for c in accepted {
        let lo = c.saturating_sub(half);
        let hi = (c + half + 1).min(n);
        let mut best = lo;
        for i in lo..hi {
            if abs[i] > abs[best] {
                best = i;
            }
        }
        // A complex cut by the recording edge has no reliable peak position.
        if !is_local_max(&abs, best) || best < half || best + half >= n {
            continue;
        }
        match peaks.last().copied() {
            Some(last) if best - last.min(best) < refractory => {
                if abs[best] > abs[last] {
                    *peaks.last_mut().expect("non-empty") = best;
                }
            }
            _ => peaks.push(best),
        }
    }
    if peaks.len() < 2 {
        return Err(Error::InsufficientBeats { found: peaks.len() });
    }
    Ok(peaks)
}

/// Looks for a beat missed between `prev` and `next` when the gap is long
/// compared with the recent RR average.
fn search_back(
    energy: &[f64],
    candidates: &[usize],
    accepted: &[usize],
    prev: usize,
    next: usize,
    thr: f64,
    refractory: usize,
) -> Option<usize> {
    if accepted.len() < 2 {
        return None;
    }
    let recent = &accepted[accepted.len().saturating_sub(9)..];
    let rr = (recent[recent.len() - 1] - recent[0]) as f64 / (recent.len() - 1) as f64;
    if ((next - prev) as f64) < 1.66 * rr {
        return None;
    }
    candidates
        .iter()
        .copied()
        .filter(|&c| c > prev + refractory && c + refractory < next && energy[c] > 0.5 * thr)
        .max_by(|&a, &b| energy[a].total_cmp(&energy[b]).then(b.cmp(&a)))
}

/// First and one-past-last sample of the `[20%, 65%)` beat window.
pub fn t_window(r0: usize, r1: usize) -> (usize, usize) {
    let len = r1 - r0;
    (r0 + (20 * len).div_ceil(100), r0 + (65 * len).div_ceil(100))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Polarity {
    Max,
    Min,
}

fn extremum(x: &[f64], i: usize) -> Option<Polarity> {
    if is_local_max(x, i) {
        Some(Polarity::Max)
    } else if is_local_min(x, i) {
        Some(Polarity::Min)
    } else {
        None
    }
}

/// T peak of the beat `[r0, r1)`: the local extremum inside the window with
/// the largest temporal span, where the span of a maximum (minimum) is the
/// distance between the nearest strictly higher (lower) samples on either
/// side, bounded by the beat. Ties go to the earliest candidate.
pub fn detect_t_peak(smoothed: &EcgTrace, r0: usize, r1: usize) -> Result<usize> {
    let x = &smoothed.samples;
    if r1 <= r0 || r1 > x.len() {
        return Err(Error::TPeakNotFound { r: r0 });
    }
    let (start, end) = t_window(r0, r1);
    let mut best: Option<(usize, usize)> = None;
    for c in start..end {
        let Some(pol) = extremum(x, c) else { continue };
        let beyond = |i: usize| match pol {
            Polarity::Max => x[i] > x[c],
            Polarity::Min => x[i] < x[c],
        };
        let left = (r0..c).rev().find(|&i| beyond(i)).unwrap_or(r0);
        let right = (c + 1..r1).find(|&i| beyond(i)).unwrap_or(r1);
        let span = right - left;
        if best.is_none_or(|(_, s)| span > s) {
            best = Some((c, span));
        }
    }
    best.map(|(c, _)| c).ok_or(Error::TPeakNotFound { r: r0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndOfSystole {
    pub index: usize,
    /// True when neither rule fired before the next R peak.
    pub degraded: bool,
}

/// Earlier of the first extremum after the T peak and the first point where
/// the signal crosses the mean of the `[20%, 65%)` window.
pub fn detect_end_of_systole(smoothed: &EcgTrace, t_peak: usize, r0: usize, r1: usize) -> EndOfSystole {
    let x = &smoothed.samples;
    let (start, end) = t_window(r0, r1);
    let mean = x[start..end].iter().sum::<f64>() / (end - start) as f64;
    let side = (x[t_peak] - mean).signum();
    let stop = r1.min(x.len());
    for i in t_peak + 1..stop {
        let crossed = if side > 0.0 {
            x[i] < mean
        } else if side < 0.0 {
            x[i] > mean
        } else {
            x[i] != mean
        };
        if crossed || extremum(x, i).is_some() {
            return EndOfSystole {
                index: i,
                degraded: false,
            };
        }
    }
    EndOfSystole {
        index: end,
        degraded: true,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Beat {
    pub r: usize,
    pub next_r: usize,
    pub t_peak: Option<usize>,
    pub eos: usize,
    pub degraded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakSet {
    pub r_peaks: Vec<usize>,
    /// One entry per complete beat, `beats[k]` spans `r_peaks[k]..r_peaks[k + 1]`.
    pub beats: Vec<Beat>,
}

impl PeakSet {
    pub fn t_peaks(&self) -> Vec<usize> {
        self.beats.iter().filter_map(|b| b.t_peak).collect()
    }

    pub fn eos_points(&self) -> Vec<usize> {
        self.beats.iter().map(|b| b.eos).collect()
    }
}

/// T peak and end of systole for every complete beat. Beats without a T
/// candidate fall back to the end of the window and are flagged degraded.
pub fn annotate_beats(smoothed: &EcgTrace, r_peaks: &[usize]) -> PeakSet {
    let beats = r_peaks
        .windows(2)
        .map(|w| {
            let (r0, r1) = (w[0], w[1]);
            match detect_t_peak(smoothed, r0, r1) {
                Ok(t) => {
                    let e = detect_end_of_systole(smoothed, t, r0, r1);
                    if e.degraded {
                        log::warn!("beat at sample {r0}: no end-of-systole event, using window end");
                    }
                    Beat {
                        r: r0,
                        next_r: r1,
                        t_peak: Some(t),
                        eos: e.index,
                        degraded: e.degraded,
                    }
                }
                Err(_) => {
                    log::warn!("beat at sample {r0}: no T peak candidate, using window end");
                    Beat {
                        r: r0,
                        next_r: r1,
                        t_peak: None,
                        eos: t_window(r0, r1).1,
                        degraded: true,
                    }
                }
            }
        })
        .collect();
    PeakSet {
        r_peaks: r_peaks.to_vec(),
        beats,
    }
}

/// Filtered signals and the detected beats of one trace.
#[derive(Debug, Clone)]
pub struct Annotation {
    pub filtered: EcgTrace,
    pub smoothed: EcgTrace,
    pub peaks: PeakSet,
}

pub fn annotate(trace: &EcgTrace, cfg: &EcgConfig) -> Result<Annotation> {
    let filtered = bandpass_with_length(
        trace,
        cfg.bandpass_lo_hz,
        cfg.bandpass_hi_hz,
        cfg.filter_seconds,
    )?;
    let r = detect_r_peaks(&filtered)?;
    let smoothed = lowpass_with_length(&filtered, cfg.lowpass_hz, cfg.filter_seconds)?;
    let peaks = annotate_beats(&smoothed, &r);
    Ok(Annotation {
        filtered,
        smoothed,
        peaks,
    })
}

/// Per-sample systole (0) / diastole (1) labels; only `valid_start..valid_end`
/// (first R peak up to the last R peak) carries a label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSignal {
    pub fs: f64,
    pub values: Vec<u8>,
    pub valid_start: usize,
    pub valid_end: usize,
}

impl PhaseSignal {
    pub fn label(&self, i: usize) -> Option<u8> {
        (self.valid_start..self.valid_end)
            .contains(&i)
            .then(|| self.values[i])
    }
}

pub fn build_phase_signal(peaks: &PeakSet, n_samples: usize, fs: f64) -> Result<PhaseSignal> {
    if peaks.r_peaks.len() < 2 || peaks.beats.is_empty() {
        return Err(Error::InsufficientBeats {
            found: peaks.r_peaks.len(),
        });
    }
    let mut values = vec![0u8; n_samples];
    for b in &peaks.beats {
        let eos = b.eos.min(n_samples);
        let next = b.next_r.min(n_samples);
        for v in &mut values[eos.min(next)..next] {
            *v = 1;
        }
    }
    let first = peaks.beats[0].r.min(n_samples);
    let last = peaks.beats[peaks.beats.len() - 1].next_r.min(n_samples);
    Ok(PhaseSignal {
        fs,
        values,
        valid_start: first,
        valid_end: last,
    })
}

/// Mean instantaneous heart rate `mean(60 / RR)` in beats per minute.
pub fn heart_rate(r_peaks: &[usize], fs: f64) -> Result<f64> {
    if r_peaks.len() < 2 {
        return Err(Error::InsufficientBeats {
            found: r_peaks.len(),
        });
    }
    let rates: Vec<f64> = r_peaks
        .windows(2)
        .map(|w| 60.0 * fs / (w[1] - w[0]) as f64)
        .collect();
    Ok(rates.iter().sum::<f64>() / rates.len() as f64)
}
