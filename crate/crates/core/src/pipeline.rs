//! Run configuration and the per-bundle processing chains shared by the
//! command-line tool: training-set assembly, prediction and evaluation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bundle::{load_bundle, StudyBundle};
use crate::ecg::{annotate, build_phase_signal, heart_rate, EcgConfig};
use crate::error::{Error, Result};
use crate::image::{subtract_temporal_mean, Image};
use crate::labeling::{map_phase_to_frames, resample_indices, FrameInterval, FrameLabelTrack, WINDOW_LEN};
use crate::metrics::EvalPair;
use crate::phasenet::{
    trace_from_features, PhaseModel, PhaseNetArch, PhaseSequence, PhaseTrainConfig,
    PredictionTrace, SchmittConfig,
};
use crate::preprocess::{apply_crop, detect_collimation, Crop, DEFAULT_COLLIMATION_EPS};
use crate::vesselness::{
    rasterize_mask, select_frame_interval, Mask, VesselModel, VesselNetArch, VesselTrainConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub vessel_weights: Option<PathBuf>,
    pub phase_weights: Option<PathBuf>,
    pub vessel_arch: VesselNetArch,
    pub phase_arch: PhaseNetArch,
    pub schmitt: SchmittConfig,
    pub ecg: EcgConfig,
    pub vessel_train: VesselTrainConfig,
    pub phase_train: PhaseTrainConfig,
    pub collimation_eps: f64,
    /// EDF matching tolerance in frames.
    pub edf_tolerance: usize,
    pub seed: u64,
    pub threads: usize,
    pub plot: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            vessel_weights: None,
            phase_weights: None,
            vessel_arch: VesselNetArch::default(),
            phase_arch: PhaseNetArch::default(),
            schmitt: SchmittConfig::default(),
            ecg: EcgConfig::default(),
            vessel_train: VesselTrainConfig::default(),
            phase_train: PhaseTrainConfig::default(),
            collimation_eps: DEFAULT_COLLIMATION_EPS,
            edf_tolerance: 1,
            seed: 0,
            threads: 1,
            plot: false,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let de = &mut serde_json::Deserializer::from_slice(&text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::Config(format!("{}: {}", e.path(), e.inner())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.schmitt;
        if !(0.0 <= s.lo && s.lo < s.hi && s.hi <= 1.0) {
            return Err(Error::Config(format!(
                "schmitt thresholds need 0 <= lo < hi <= 1, got lo {} hi {}",
                s.lo, s.hi
            )));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        if !(self.collimation_eps > 0.0) {
            return Err(Error::Config("collimation_eps must be positive".into()));
        }
        if self.phase_train.learning_rate <= 0.0 || self.vessel_train.learning_rate <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        self.vessel_arch.validate()?;
        self.phase_arch.validate()?;
        let e = &self.ecg;
        if !(e.bandpass_lo_hz > 0.0 && e.bandpass_lo_hz < e.bandpass_hi_hz && e.lowpass_hz > 0.0) {
            return Err(Error::Config(format!("invalid ECG filter settings {e:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Train,
    Evaluate,
    Predict,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "decision", content = "reason")]
pub enum Inclusion {
    Accept,
    Reject(String),
}

pub const MIN_FRAMES: usize = 20;
pub const MIN_VISIBLE_FRAMES: usize = 15;

/// More than 20 frames, more than 15 vessel-filled frames and, outside pure
/// prediction, an ECG with at least two R peaks.
pub fn inclusion_filter(
    frames: usize,
    visible: &FrameInterval,
    r_peaks: Option<usize>,
    mode: RunMode,
) -> Inclusion {
    if frames <= MIN_FRAMES {
        return Inclusion::Reject("frame count".into());
    }
    if visible.len() <= MIN_VISIBLE_FRAMES {
        return Inclusion::Reject("visible frames".into());
    }
    if mode != RunMode::Predict {
        match r_peaks {
            None => return Inclusion::Reject("ECG missing".into()),
            Some(n) if n < 2 => return Inclusion::Reject("R peaks".into()),
            Some(_) => {}
        }
    }
    Inclusion::Accept
}

/// Collimation crop and vessel-resolution frames of a bundle.
pub struct Prepared {
    pub frames: Vec<Image>,
    pub crop: Crop,
    pub vessel_frames: Vec<Image>,
}

pub fn prepare(bundle: &StudyBundle, cfg: &RunConfig) -> Result<Prepared> {
    let frames = bundle.frames();
    let crop = detect_collimation(&frames, cfg.collimation_eps)?;
    let vessel_frames = apply_crop(&frames, crop, cfg.vessel_arch.resolution);
    Ok(Prepared {
        frames,
        crop,
        vessel_frames,
    })
}

/// Phase-net input frames of `interval`, normalised over that interval.
pub fn phase_frames(prep: &Prepared, interval: FrameInterval, resolution: usize) -> Vec<Image> {
    apply_crop(&prep.frames[interval.indices()], prep.crop, resolution)
}

/// `(frame, mask)` training pairs at the vessel resolution from a bundle's
/// centreline annotations.
pub fn vessel_pairs(bundle: &StudyBundle, cfg: &RunConfig) -> Result<Vec<(Image, Mask)>> {
    let Some(annotations) = &bundle.annotations else {
        return Ok(Vec::new());
    };
    let prep = prepare(bundle, cfg)?;
    let r = cfg.vessel_arch.resolution;
    let (sx, sy) = (r as f64 / prep.crop.width as f64, r as f64 / prep.crop.height as f64);
    Ok(annotations
        .iter()
        .map(|a| {
            let ann = a.vessels.crop_and_scale(prep.crop.x0 as f64, prep.crop.y0 as f64, sx, sy);
            (prep.vessel_frames[a.frame].clone(), rasterize_mask(&ann, r, r))
        })
        .collect())
}

/// Ground-truth frame labels from the bundle's ECG.
#[derive(Debug, Clone)]
pub struct EcgLabels {
    pub track: FrameLabelTrack,
    pub r_peaks: Vec<usize>,
    pub heart_rate_bpm: f64,
}

pub fn ecg_labels(bundle: &StudyBundle, cfg: &RunConfig) -> Result<EcgLabels> {
    let ecg = bundle
        .ecg
        .as_ref()
        .ok_or_else(|| Error::Config(format!("bundle {} has no ECG", bundle.id())))?;
    let ann = annotate(ecg, &cfg.ecg)?;
    let phase = build_phase_signal(&ann.peaks, ecg.len(), ecg.fs)?;
    let track = map_phase_to_frames(&phase, bundle.frame_count(), bundle.meta.fps)?;
    Ok(EcgLabels {
        heart_rate_bpm: heart_rate(&ann.peaks.r_peaks, ecg.fs)?,
        r_peaks: ann.peaks.r_peaks,
        track,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub id: String,
    pub reason: String,
}

/// A labelled 10 fps training sequence for the phase net, or the reason the
/// bundle was excluded.
pub fn phase_training_sequence(
    bundle: &StudyBundle,
    vessel: &VesselModel,
    cfg: &RunConfig,
) -> Result<std::result::Result<PhaseSequence, Rejection>> {
    let id = bundle.id().to_string();
    let reject = |reason: &str| Ok(Err(Rejection { id: id.clone(), reason: reason.into() }));
    let prep = prepare(bundle, cfg).map_err(|e| e.in_stage("preprocess", &id))?;
    let scores = vessel.scores(&prep.vessel_frames).map_err(|e| e.in_stage("vesselness", &id))?;
    let interval = select_frame_interval(&scores)?;
    let labels = match bundle.ecg {
        Some(_) => match ecg_labels(bundle, cfg) {
            Ok(l) => Some(l),
            Err(Error::InsufficientBeats { .. }) => return reject("R peaks"),
            Err(Error::NoOverlap) => return reject("no labelled frames"),
            Err(e) => return Err(e.in_stage("labeling", &id)),
        },
        None => None,
    };
    match inclusion_filter(
        bundle.frame_count(),
        &interval,
        labels.as_ref().map(|l| l.r_peaks.len()),
        RunMode::Train,
    ) {
        Inclusion::Accept => {}
        Inclusion::Reject(r) => return reject(&r),
    }
    let labels = labels.expect("accepted bundles have an ECG");
    let Some(common) = interval.intersect(&labels.track.interval) else {
        return reject("no labelled frames");
    };
    let frames = phase_frames(&prep, interval, cfg.phase_arch.resolution);
    let idx = resample_indices(common.len(), bundle.meta.fps).map_err(|e| e.in_stage("resample", &id))?;
    if idx.len() < WINDOW_LEN {
        return reject("too few frames at 10 fps");
    }
    let mut selected: Vec<Image> = idx
        .iter()
        .map(|&i| frames[common.start + i - interval.start].clone())
        .collect();
    subtract_temporal_mean(&mut selected);
    Ok(Ok(PhaseSequence {
        id,
        frames: selected,
        labels: idx
            .iter()
            .map(|&i| labels.track.labels[common.start + i - labels.track.interval.start])
            .collect(),
    }))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub preprocess_s: f64,
    pub vesselness_s: f64,
    pub phase_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub trace: PredictionTrace,
    pub vessel_scores: Vec<f64>,
    pub timings: StageTimings,
}

/// The full online chain for one bundle: preprocess, vesselness interval,
/// 10 fps decimation, cached spatial features, sliding windows,
/// aggregation, upsampling, hysteresis and EDF flags.
pub fn predict_bundle(
    bundle: &StudyBundle,
    vessel: &VesselModel,
    phase: &PhaseModel,
    cfg: &RunConfig,
) -> Result<Prediction> {
    let id = bundle.id();
    let start = Instant::now();
    let prep = prepare(bundle, cfg).map_err(|e| e.in_stage("preprocess", id))?;
    let t_prep = start.elapsed().as_secs_f64();

    let t = Instant::now();
    let scores = vessel
        .scores(&prep.vessel_frames)
        .map_err(|e| e.in_stage("vesselness", id))?;
    let interval = select_frame_interval(&scores).map_err(|e| e.in_stage("vesselness", id))?;
    let t_vessel = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let idx = resample_indices(interval.len(), bundle.meta.fps).map_err(|e| e.in_stage("resample", id))?;
    if idx.len() < WINDOW_LEN {
        return Err(Error::SequenceTooShort {
            frames: idx.len(),
            needed: WINDOW_LEN,
        }
        .in_stage("resample", id));
    }
    let frames = phase_frames(&prep, interval, phase.arch.resolution);
    let mut selected: Vec<Image> = idx.iter().map(|&i| frames[i].clone()).collect();
    subtract_temporal_mean(&mut selected);
    let source: Vec<usize> = idx.iter().map(|&i| interval.start + i).collect();
    let features = phase
        .spatial_features(&selected)
        .map_err(|e| e.in_stage("phasenet", id))?;
    let trace = trace_from_features(phase, &features, &source, interval, bundle.meta.fps, cfg.schmitt, id)
        .map_err(|e| e.in_stage("phasenet", id))?;
    let t_phase = t.elapsed().as_secs_f64();

    Ok(Prediction {
        trace,
        vessel_scores: scores,
        timings: StageTimings {
            preprocess_s: t_prep,
            vesselness_s: t_vessel,
            phase_s: t_phase,
            total_s: start.elapsed().as_secs_f64(),
        },
    })
}

/// Ground truth against a prediction over the frames both cover.
#[derive(Debug, Clone)]
pub struct Evaluated {
    pub pair: EvalPair,
    /// First original frame of the evaluated range.
    pub first_frame: usize,
    pub heart_rate_bpm: f64,
    pub probabilities: Vec<f64>,
}

pub fn evaluate_trace(bundle: &StudyBundle, trace: &PredictionTrace, cfg: &RunConfig) -> Result<Evaluated> {
    let id = bundle.id();
    let labels = ecg_labels(bundle, cfg).map_err(|e| e.in_stage("labeling", id))?;
    let common = trace
        .interval
        .intersect(&labels.track.interval)
        .ok_or(Error::NoOverlap)
        .map_err(|e| e.in_stage("evaluate", id))?;
    let gt: Vec<f64> = common
        .indices()
        .map(|f| labels.track.labels[f - labels.track.interval.start])
        .collect();
    let preds = &trace.frames[common.start - trace.interval.start..=common.end - trace.interval.start];
    Ok(Evaluated {
        pair: EvalPair::new(id, gt, preds.iter().map(|p| p.label).collect())?,
        first_frame: common.start,
        heart_rate_bpm: labels.heart_rate_bpm,
        probabilities: preds.iter().map(|p| p.probability).collect(),
    })
}

/// Evaluation of one bundle after the inclusion filter, or the reason it
/// was excluded.
pub fn evaluate_bundle(
    bundle: &StudyBundle,
    trace: &PredictionTrace,
    cfg: &RunConfig,
) -> Result<std::result::Result<Evaluated, Rejection>> {
    let id = bundle.id();
    let reject = |reason: &str| Ok(Err(Rejection { id: id.to_string(), reason: reason.into() }));
    let r_peaks = match &bundle.ecg {
        Some(ecg) => match annotate(ecg, &cfg.ecg) {
            Ok(a) => Some(a.peaks.r_peaks.len()),
            Err(Error::InsufficientBeats { found }) => Some(found),
            Err(e) => return Err(e.in_stage("labeling", id)),
        },
        None => None,
    };
    match inclusion_filter(bundle.frame_count(), &trace.interval, r_peaks, RunMode::Evaluate) {
        Inclusion::Accept => {}
        Inclusion::Reject(r) => return reject(&r),
    }
    match evaluate_trace(bundle, trace, cfg) {
        Ok(e) => Ok(Ok(e)),
        Err(Error::Stage { source, .. }) if matches!(*source, Error::NoOverlap) => reject("no labelled frames"),
        Err(e) => Err(e),
    }
}

/// Applies `f` to every item on up to `threads` scoped threads; results keep
/// the input order.
pub fn parallel_map<T, R, F>(items: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(&f).collect::<Vec<R>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}

pub fn load_bundles(dirs: &[PathBuf], threads: usize) -> Result<Vec<StudyBundle>> {
    parallel_map(dirs, threads, |d| load_bundle(d)).into_iter().collect()
}

/// Training pairs from every annotated bundle.
pub fn collect_vessel_pairs(bundles: &[StudyBundle], cfg: &RunConfig) -> Result<Vec<(Image, Mask)>> {
    let per: Vec<Result<Vec<(Image, Mask)>>> = parallel_map(bundles, cfg.threads, |b| vessel_pairs(b, cfg));
    let mut out = Vec::new();
    for p in per {
        out.extend(p?);
    }
    Ok(out)
}

/// Phase training sequences and rejections over all bundles.
pub fn collect_phase_sequences(
    bundles: &[StudyBundle],
    vessel: &VesselModel,
    cfg: &RunConfig,
) -> Result<(Vec<PhaseSequence>, Vec<Rejection>)> {
    let per = parallel_map(bundles, cfg.threads, |b| phase_training_sequence(b, vessel, cfg));
    let (mut seqs, mut rejected) = (Vec::new(), Vec::new());
    for r in per {
        match r? {
            Ok(s) => seqs.push(s),
            Err(rej) => {
                log::warn!("excluding {}: {}", rej.id, rej.reason);
                rejected.push(rej);
            }
        }
    }
    Ok((seqs, rejected))
}
