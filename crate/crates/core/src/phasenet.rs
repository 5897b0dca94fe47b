//! Cardiac phase classifier and its sliding-window application.
//!
//! A spatial CNN maps every frame to a 64-vector. Ten consecutive vectors
//! pass a depthwise temporal convolution (10x64 -> 8x64) and a two-layer
//! classifier that outputs diastole probabilities for window positions 3-6.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use angiophase_tensor::layers::{apply_layer, init_layer};
use angiophase_tensor::{
    adam_step, load_weights, save_weights, AdamConfig, AdamState, CustomOp, EngineError, Graph,
    LayerSpec, Mode, NodeId, ParamStore, Sequential, Tensor,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{stack, Image};
use crate::labeling::{FrameInterval, TARGET_LEN, TARGET_OFFSET, WINDOW_LEN};
use crate::metrics::edf_frames_binary;

pub const FEATURE_DIM: usize = 64;
pub const SPATIAL_CHANNELS: [usize; 5] = [8, 16, 32, 64, 64];
pub const TEMPORAL_KERNEL: usize = 3;
/// Frames left after the valid temporal convolution.
pub const TEMPORAL_LEN: usize = WINDOW_LEN - TEMPORAL_KERNEL + 1;
const INFER_BATCH: usize = 16;
const TRAIN_PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhaseNetArch {
    pub resolution: usize,
    pub hidden: usize,
    pub dropout: f64,
}

impl Default for PhaseNetArch {
    fn default() -> Self {
        Self {
            resolution: 64,
            hidden: 64,
            dropout: 0.5,
        }
    }
}

impl PhaseNetArch {
    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || self.hidden == 0 || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("invalid phase net architecture {self:?}")));
        }
        Ok(())
    }

    /// Five conv/ReLU/pool blocks (the pool is skipped once the map is 1x1),
    /// then a dense projection to 64 features.
    pub fn spatial(&self) -> Sequential {
        let mut seq = Sequential::new();
        let mut size = self.resolution;
        let mut in_ch = 1;
        for (l, &ch) in SPATIAL_CHANNELS.iter().enumerate() {
            seq = seq
                .push(format!("spatial.conv{l}"), LayerSpec::conv3x3(in_ch, ch))
                .push(format!("spatial.relu{l}"), LayerSpec::Relu);
            if size > 1 {
                seq = seq.push(format!("spatial.pool{l}"), LayerSpec::MaxPool2d { kernel: 2, stride: 2 });
                size /= 2;
            }
            in_ch = ch;
        }
        seq.push("spatial.flatten", LayerSpec::Flatten)
            .push(
                "spatial.fc",
                LayerSpec::Dense {
                    inputs: in_ch * size * size,
                    outputs: FEATURE_DIM,
                },
            )
            .push("spatial.relu_fc", LayerSpec::Relu)
    }

    pub fn temporal(&self) -> LayerSpec {
        LayerSpec::DepthwiseConv1d {
            channels: FEATURE_DIM,
            kernel: TEMPORAL_KERNEL,
        }
    }

    pub fn classifier(&self) -> Sequential {
        Sequential::new()
            .push("cls.flatten", LayerSpec::Flatten)
            .push(
                "cls.fc1",
                LayerSpec::Dense {
                    inputs: TEMPORAL_LEN * FEATURE_DIM,
                    outputs: self.hidden,
                },
            )
            .push("cls.relu", LayerSpec::Relu)
            .push("cls.dropout", LayerSpec::Dropout { rate: self.dropout })
            .push(
                "cls.fc2",
                LayerSpec::Dense {
                    inputs: self.hidden,
                    outputs: TARGET_LEN,
                },
            )
            .push("cls.sigmoid", LayerSpec::Sigmoid)
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        self.spatial().init_params(&mut params, &mut rng)?;
        init_layer("temporal", &self.temporal(), &mut params, &mut rng)?;
        self.classifier().init_params(&mut params, &mut rng)?;
        Ok(params)
    }

    /// `[n, 1, r, r]` frames to `[n, 64]` features.
    pub fn build_spatial(&self, g: &mut Graph, params: &ParamStore, x: NodeId) -> Result<NodeId> {
        let s = g.value(x).shape().to_vec();
        if s.len() != 4 || s[1] != 1 || s[2] != self.resolution || s[3] != self.resolution {
            return Err(Error::Shape(format!(
                "phase net expects [n, 1, {r}, {r}] frames, got {s:?}",
                r = self.resolution
            )));
        }
        Ok(self.spatial().apply(g, params, x)?)
    }

    /// `[w, 10, 64]` feature windows to `[w, 4]` probabilities.
    pub fn build_head(&self, g: &mut Graph, params: &ParamStore, windows: NodeId) -> Result<NodeId> {
        let t = apply_layer(g, params, "temporal", &self.temporal(), windows)?;
        Ok(self.classifier().apply(g, params, t)?)
    }

    /// `[m, 64]` features of consecutive frames to `[m - 9, 4]` probabilities.
    pub fn build_sliding(&self, g: &mut Graph, params: &ParamStore, features: NodeId) -> Result<NodeId> {
        let w = g.frame_windows(features, WINDOW_LEN)?;
        self.build_head(g, params, w)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({ "kind": "phase-net", "arch": self })
    }
}

/// Per-element phase loss: binary cross-entropy, scaled by 0.25 when a
/// binary target is already on the right side of 0.5.
pub fn phase_loss(p: f64, y: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("probability {p} outside (0, 1)")));
    }
    if !(0.0..=1.0).contains(&y) {
        return Err(Error::Domain(format!("target {y} outside [0, 1]")));
    }
    Ok(loss_weight(p, y) * bce(p, y))
}

/// Derivative of [`phase_loss`] in `p` (piecewise; the weight is constant
/// on either side of 0.5).
pub fn phase_loss_grad(p: f64, y: f64) -> Result<f64> {
    phase_loss(p, y)?;
    Ok(loss_weight(p, y) * (p - y) / (p * (1.0 - p)))
}

fn bce(p: f64, y: f64) -> f64 {
    let a = if y > 0.0 { -y * p.ln() } else { 0.0 };
    let b = if y < 1.0 { -(1.0 - y) * (1.0 - p).ln() } else { 0.0 };
    a + b
}

fn loss_weight(p: f64, y: f64) -> f64 {
    if (y == 0.0 || y == 1.0) && p.round() == y {
        0.25
    } else {
        1.0
    }
}

/// Mean phase loss over all elements of `[p, y]`; probabilities are clamped
/// away from 0 and 1 so early training cannot produce infinities.
#[derive(Debug, Clone, Copy, Default)]
pub struct PhaseLoss;

impl CustomOp for PhaseLoss {
    fn name(&self) -> &str {
        "phase_loss"
    }

    fn forward(&self, inputs: &[&Tensor]) -> angiophase_tensor::Result<Tensor> {
        let (p, y) = (inputs[0], inputs[1]);
        if p.shape() != y.shape() {
            return Err(EngineError::shape(
                "phase_loss",
                format!("prediction {:?} vs target {:?}", p.shape(), y.shape()),
            ));
        }
        let n = p.len() as f64;
        let total: f64 = p
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &y)| {
                let p = p.clamp(TRAIN_PROB_EPS, 1.0 - TRAIN_PROB_EPS);
                loss_weight(p, y) * bce(p, y)
            })
            .sum();
        Ok(Tensor::scalar(total / n))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
    ) -> angiophase_tensor::Result<Vec<Option<Tensor>>> {
        let (p, y) = (inputs[0], inputs[1]);
        let scale = grad.item() / p.len() as f64;
        let g = Tensor::from_fn(p.shape(), |i| {
            let raw = p.data()[i];
            let yi = y.data()[i];
            let pc = raw.clamp(TRAIN_PROB_EPS, 1.0 - TRAIN_PROB_EPS);
            if pc != raw {
                0.0
            } else {
                scale * loss_weight(pc, yi) * (pc - yi) / (pc * (1.0 - pc))
            }
        });
        Ok(vec![Some(g), None])
    }
}

/// Trained (or initialised) classifier with a counter of spatial CNN
/// evaluations, one per frame.
#[derive(Debug, Clone)]
pub struct PhaseModel {
    pub arch: PhaseNetArch,
    pub params: ParamStore,
    invocations: Arc<AtomicUsize>,
}

impl PhaseModel {
    pub fn new(arch: PhaseNetArch, params: ParamStore) -> Self {
        Self {
            arch,
            params,
            invocations: Arc::new(AtomicUsize::new(0)),
        }
    }

    pub fn init(arch: PhaseNetArch, seed: u64) -> Result<Self> {
        Ok(Self::new(arch, arch.init_params(seed)?))
    }

    /// Frames passed through the spatial CNN since the last reset.
    pub fn spatial_invocations(&self) -> usize {
        self.invocations.load(Ordering::Relaxed)
    }

    pub fn reset_invocations(&self) {
        self.invocations.store(0, Ordering::Relaxed);
    }

    /// `[m, 64]` features, computing the spatial CNN once per frame.
    pub fn spatial_features(&self, frames: &[Image]) -> Result<Tensor> {
        let mut rows = Vec::with_capacity(frames.len());
        for chunk in frames.chunks(INFER_BATCH) {
            let mut g = Graph::new(Mode::Infer, 0);
            let x = g.constant(stack(chunk)?)?;
            let f = self.arch.build_spatial(&mut g, &self.params, x)?;
            self.invocations.fetch_add(chunk.len(), Ordering::Relaxed);
            rows.push(g.value(f).clone());
        }
        if rows.is_empty() {
            return Err(Error::Shape("no frames for feature extraction".into()));
        }
        Ok(Tensor::stack_outer(&rows)?)
    }

    /// Probabilities for positions 3-6 of one `[10, 64]` feature window.
    pub fn predict_window(&self, features: &Tensor) -> Result<[f64; TARGET_LEN]> {
        if features.shape() != [WINDOW_LEN, FEATURE_DIM] {
            return Err(Error::Shape(format!(
                "window features must be [{WINDOW_LEN}, {FEATURE_DIM}], got {:?}",
                features.shape()
            )));
        }
        Ok(self.predict_windows(features)?[0])
    }

    /// Probabilities of every step-1 window over `[m, 64]` features.
    pub fn predict_windows(&self, features: &Tensor) -> Result<Vec<[f64; TARGET_LEN]>> {
        let m = features.shape()[0];
        if m < WINDOW_LEN {
            return Err(Error::SequenceTooShort {
                frames: m,
                needed: WINDOW_LEN,
            });
        }
        let mut g = Graph::new(Mode::Infer, 0);
        let x = g.constant(features.clone())?;
        let p = self.arch.build_sliding(&mut g, &self.params, x)?;
        Ok(g.value(p)
            .data()
            .chunks_exact(TARGET_LEN)
            .map(|c| [c[0], c[1], c[2], c[3]])
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_weights(&self.params, path, Some(&self.arch.to_json()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, manifest) = load_weights(path)?;
        let arch = manifest
            .arch
            .as_ref()
            .filter(|a| a["kind"] == "phase-net")
            .and_then(|a| serde_json::from_value::<PhaseNetArch>(a["arch"].clone()).ok())
            .ok_or_else(|| Error::format(path.display().to_string(), "not a phase net weight file"))?;
        let expected = arch.init_params(0)?;
        for (name, p) in expected.iter() {
            let got = params.value(name)?;
            if got.shape() != p.value.shape() {
                return Err(Error::format(
                    path.display().to_string(),
                    format!("{name} has shape {:?}, expected {:?}", got.shape(), p.value.shape()),
                ));
            }
        }
        Ok(Self::new(arch, params))
    }
}

/// Number of windows covering frame `i` of an `m`-frame sequence.
pub fn coverage_count(i: usize, m: usize) -> usize {
    if m < WINDOW_LEN {
        return 0;
    }
    let lo = i.saturating_sub(WINDOW_LEN - TARGET_OFFSET - 1);
    let Some(hi) = i.checked_sub(TARGET_OFFSET).map(|h| h.min(m - WINDOW_LEN)) else {
        return 0;
    };
    if hi >= lo {
        hi - lo + 1
    } else {
        0
    }
}

/// Candidate probabilities per frame, in window order.
pub fn window_candidates(windows: &[[f64; TARGET_LEN]], m: usize) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new(); m];
    for (w, probs) in windows.iter().enumerate() {
        for (j, &p) in probs.iter().enumerate() {
            out[w + TARGET_OFFSET + j].push(p);
        }
    }
    out
}

/// The candidate farthest from 0.5 (earliest on ties); `None` with fewer
/// than two candidates.
pub fn aggregate(candidates: &[f64]) -> Option<f64> {
    if candidates.len() < 2 {
        return None;
    }
    let mut best = candidates[0];
    for &p in &candidates[1..] {
        if (p - 0.5).abs() > (best - 0.5).abs() {
            best = p;
        }
    }
    Some(best)
}

/// Piecewise-linear interpolation of `(frame, p)` knots at every frame in
/// `interval`, holding the end values outside the knot range.
pub fn upsample_probs(knots: &[(usize, f64)], interval: FrameInterval) -> Result<Vec<f64>> {
    if knots.len() < 2 {
        return Err(Error::SequenceTooShort {
            frames: knots.len(),
            needed: 2,
        });
    }
    let mut out = Vec::with_capacity(interval.len());
    let mut k = 0;
    for f in interval.indices() {
        while k + 2 < knots.len() && knots[k + 1].0 <= f {
            k += 1;
        }
        let (a, pa) = knots[k];
        let (b, pb) = knots[k + 1];
        out.push(if f <= a {
            pa
        } else if f >= b {
            pb
        } else {
            pa + (pb - pa) * (f - a) as f64 / (b - a) as f64
        });
    }
    Ok(out)
}

/// Hysteresis thresholding: switch to 1 at `p >= hi`, to 0 at `p <= lo`,
/// hold otherwise; the first state is 1 iff the first value is >= 0.5.
pub fn schmitt_filter(probs: &[f64], hi: f64, lo: f64) -> Result<Vec<u8>> {
    if !(0.0 <= lo && lo < hi && hi <= 1.0) {
        return Err(Error::Config(format!(
            "Schmitt thresholds need 0 <= lo < hi <= 1, got lo {lo}, hi {hi}"
        )));
    }
    let Some(&first) = probs.first() else {
        return Ok(Vec::new());
    };
    let mut state = u8::from(first >= 0.5);
    Ok(probs
        .iter()
        .map(|&p| {
            if p >= hi {
                state = 1;
            } else if p <= lo {
                state = 0;
            }
            state
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResampledFrame {
    /// Frame index in the original sequence.
    pub source: usize,
    pub candidates: Vec<f64>,
    pub selected: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePrediction {
    pub frame: usize,
    pub probability: f64,
    pub label: u8,
    pub edf: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionTrace {
    pub id: String,
    pub fps: f64,
    /// Vesselness-selected interval of the original sequence.
    pub interval: FrameInterval,
    pub resampled: Vec<ResampledFrame>,
    /// One entry per frame of `interval`.
    pub frames: Vec<FramePrediction>,
}

impl PredictionTrace {
    pub fn labels(&self) -> Vec<u8> {
        self.frames.iter().map(|f| f.label).collect()
    }

    pub fn edf_frames(&self) -> Vec<usize> {
        self.frames.iter().filter(|f| f.edf).map(|f| f.frame).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchmittConfig {
    pub hi: f64,
    pub lo: f64,
}

impl Default for SchmittConfig {
    fn default() -> Self {
        Self { hi: 0.6, lo: 0.4 }
    }
}

/// Everything after the spatial features: windows, aggregation,
/// upsampling to the original frames, hysteresis and EDF flags.
pub fn trace_from_features(
    model: &PhaseModel,
    features: &Tensor,
    source: &[usize],
    interval: FrameInterval,
    fps: f64,
    schmitt: SchmittConfig,
    id: &str,
) -> Result<PredictionTrace> {
    let m = features.shape()[0];
    if source.len() != m {
        return Err(Error::Shape(format!("{} source indices for {m} frames", source.len())));
    }
    let windows = model.predict_windows(features)?;
    let candidates = window_candidates(&windows, m);
    let resampled: Vec<ResampledFrame> = candidates
        .into_iter()
        .zip(source)
        .map(|(c, &s)| ResampledFrame {
            source: s,
            selected: aggregate(&c),
            candidates: c,
        })
        .collect();
    let knots: Vec<(usize, f64)> = resampled
        .iter()
        .filter_map(|r| r.selected.map(|p| (r.source, p)))
        .collect();
    let probs = upsample_probs(&knots, interval)?;
    let labels = schmitt_filter(&probs, schmitt.hi, schmitt.lo)?;
    let edf = edf_frames_binary(&labels);
    let frames = interval
        .indices()
        .zip(probs.iter().zip(&labels))
        .enumerate()
        .map(|(j, (frame, (&probability, &label)))| FramePrediction {
            frame,
            probability,
            label,
            edf: edf.binary_search(&j).is_ok(),
        })
        .collect();
    Ok(PredictionTrace {
        id: id.to_string(),
        fps,
        interval,
        resampled,
        frames,
    })
}

/// One labelled training sequence at 10 fps and network resolution.
#[derive(Debug, Clone)]
pub struct PhaseSequence {
    pub id: String,
    pub frames: Vec<Image>,
    pub labels: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhaseTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Longest run of consecutive frames fed per optimisation step.
    pub chunk_frames: usize,
    pub augment: bool,
    pub max_rotation_deg: f64,
    pub intensity_jitter: f64,
    pub seed: u64,
}

impl Default for PhaseTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 1e-3,
            chunk_frames: 24,
            augment: true,
            max_rotation_deg: 10.0,
            intensity_jitter: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PhaseTraining {
    pub model: PhaseModel,
    pub epoch_losses: Vec<f64>,
}

fn augment(frames: &[Image], rng: &mut ChaCha8Rng, cfg: &PhaseTrainConfig) -> Vec<Image> {
    let flip = rng.gen_bool(0.5);
    let angle = rng.gen_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg);
    let gain = 1.0 + rng.gen_range(-cfg.intensity_jitter..=cfg.intensity_jitter);
    frames
        .iter()
        .map(|f| {
            let f = if flip { f.flip_horizontal() } else { f.clone() };
            f.rotate(angle).scale_intensity(gain)
        })
        .collect()
}

/// Adam training on windows drawn from consecutive runs of each sequence;
/// spatial features are shared by all windows of a run.
pub fn train_phasenet(
    sequences: &[PhaseSequence],
    arch: PhaseNetArch,
    cfg: &PhaseTrainConfig,
) -> Result<PhaseTraining> {
    let usable: Vec<&PhaseSequence> = sequences
        .iter()
        .filter(|s| s.frames.len() >= WINDOW_LEN)
        .collect();
    if usable.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for s in &usable {
        if s.frames.len() != s.labels.len() {
            return Err(Error::Shape(format!(
                "sequence {}: {} frames, {} labels",
                s.id,
                s.frames.len(),
                s.labels.len()
            )));
        }
    }
    let chunk = cfg.chunk_frames.max(WINDOW_LEN);
    let mut params = arch.init_params(cfg.seed)?;
    let mut adam = AdamState::new(AdamConfig {
        lr: cfg.learning_rate,
        ..AdamConfig::default()
    });
    let loss_op: Arc<dyn CustomOp> = Arc::new(PhaseLoss);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0ba5_e11e);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &si in &order {
            let s = usable[si];
            let len = chunk.min(s.frames.len());
            let start = rng.gen_range(0..=s.frames.len() - len);
            let frames = &s.frames[start..start + len];
            let frames = if cfg.augment {
                augment(frames, &mut rng, cfg)
            } else {
                frames.to_vec()
            };
            let n_windows = len - WINDOW_LEN + 1;
            let targets = Tensor::from_fn(&[n_windows, TARGET_LEN], |i| {
                s.labels[start + i / TARGET_LEN + TARGET_OFFSET + i % TARGET_LEN]
            });
            let mut g = Graph::new(Mode::Train, rng.gen());
            let x = g.constant(stack(&frames)?)?;
            let feats = arch.build_spatial(&mut g, &params, x)?;
            let p = arch.build_sliding(&mut g, &params, feats)?;
            let y = g.constant(targets)?;
            let loss = g.custom(loss_op.clone(), &[p, y])?;
            total += g.value(loss).item();
            g.backward(loss, &Tensor::scalar(1.0), &mut params)?;
            adam_step(&mut params, &mut adam)?;
        }
        let mean = total / usable.len() as f64;
        log::debug!("phase net epoch loss {mean:.5}");
        epoch_losses.push(mean);
    }
    Ok(PhaseTraining {
        model: PhaseModel::new(arch, params),
        epoch_losses,
    })
}
