//! Vessel segmentation and contrast-filled interval selection.
//!
//! A small encoder-decoder network maps each frame to a per-pixel vessel
//! probability. The frame's vesselness score is the sum of those
//! probabilities; frames scoring below two thirds of the sequence maximum
//! are discarded and the longest remaining run is kept.

use std::path::Path;
use std::sync::Arc;

use angiophase_tensor::layers::{apply_layer, init_layer};
use angiophase_tensor::{
    adam_step, load_weights, save_weights, AdamConfig, AdamState, CustomOp, EngineError, Graph,
    LayerSpec, Mode, NodeId, Padding, ParamStore, Tensor,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{stack, unstack, Image};
use crate::labeling::FrameInterval;

pub const JACCARD_MU: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CenterlinePoint {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CenterlineAnnotation {
    /// One ordered polyline per vessel.
    pub vessels: Vec<Vec<CenterlinePoint>>,
}

impl CenterlineAnnotation {
    pub fn points(&self) -> impl Iterator<Item = &CenterlinePoint> {
        self.vessels.iter().flatten()
    }

    pub fn is_empty(&self) -> bool {
        self.points().next().is_none()
    }

    /// Maps the annotation through a crop at `(x0, y0)` followed by a
    /// pixel-centre aligned rescale by `(sx, sy)`.
    pub fn crop_and_scale(&self, x0: f64, y0: f64, sx: f64, sy: f64) -> Self {
        let map = |v: f64, o: f64, s: f64| (v - o + 0.5) * s - 0.5;
        let rs = (sx * sy).sqrt();
        Self {
            vessels: self
                .vessels
                .iter()
                .map(|v| {
                    v.iter()
                        .map(|p| CenterlinePoint {
                            x: map(p.x, x0, sx),
                            y: map(p.y, y0, sy),
                            radius: p.radius * rs,
                        })
                        .collect()
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn to_image(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f64::from(u8::from(v))).collect(),
        }
    }

    /// Thresholds a probability map at 0.5.
    pub fn from_probabilities(p: &Image) -> Self {
        Self {
            width: p.width,
            height: p.height,
            data: p.data.iter().map(|&v| v >= 0.5).collect(),
        }
    }
}

/// Pixel `(x, y)` is set iff some centreline point lies within its radius
/// of the pixel centre `(x, y)`.
pub fn rasterize_mask(ann: &CenterlineAnnotation, width: usize, height: usize) -> Mask {
    let mut mask = Mask::empty(width, height);
    for p in ann.points() {
        let x0 = (p.x - p.radius).ceil().max(0.0) as usize;
        let y0 = (p.y - p.radius).ceil().max(0.0) as usize;
        let x1 = (p.x + p.radius).floor();
        let y1 = (p.y + p.radius).floor();
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        let x1 = (x1 as usize).min(width.saturating_sub(1));
        let y1 = (y1 as usize).min(height.saturating_sub(1));
        let r2 = p.radius * p.radius;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dx, dy) = (x as f64 - p.x, y as f64 - p.y);
                if dx * dx + dy * dy <= r2 {
                    mask.data[y * width + x] = true;
                }
            }
        }
    }
    mask
}

fn jaccard_terms(p: &[f64], t: &[f64], mu: f64) -> (f64, f64) {
    let (mut pt, mut pp, mut tt) = (0.0, 0.0, 0.0);
    for (&a, &b) in p.iter().zip(t) {
        pt += a * b;
        pp += a * a;
        tt += b * b;
    }
    let num = mu + pt;
    (num, num + (pp - pt) + (tt - pt))
}

/// `1 - (μ + ΣPT) / (μ + ΣP² + ΣT² - ΣPT)`.
pub fn jaccard_loss(p: &[f64], t: &[f64], mu: f64) -> Result<f64> {
    if p.len() != t.len() {
        return Err(Error::Shape(format!("{} probabilities vs {} mask pixels", p.len(), t.len())));
    }
    let (num, den) = jaccard_terms(p, t, mu);
    Ok(1.0 - num / den)
}

/// Gradient of [`jaccard_loss`] with respect to `p`.
pub fn jaccard_grad(p: &[f64], t: &[f64], mu: f64) -> Result<Vec<f64>> {
    if p.len() != t.len() {
        return Err(Error::Shape(format!("{} probabilities vs {} mask pixels", p.len(), t.len())));
    }
    let (num, den) = jaccard_terms(p, t, mu);
    Ok(p.iter()
        .zip(t)
        .map(|(&a, &b)| -(b * den - num * (2.0 * a - b)) / (den * den))
        .collect())
}

/// Jaccard loss averaged over the images of a batch (leading dimension).
#[derive(Debug, Clone, Copy)]
pub struct JaccardLoss {
    pub mu: f64,
}

impl CustomOp for JaccardLoss {
    fn name(&self) -> &str {
        "jaccard_loss"
    }

    fn forward(&self, inputs: &[&Tensor]) -> angiophase_tensor::Result<Tensor> {
        let (p, t) = (inputs[0], inputs[1]);
        if p.shape() != t.shape() {
            return Err(EngineError::shape(
                self.name(),
                format!("{:?} vs {:?}", p.shape(), t.shape()),
            ));
        }
        let n = p.shape()[0];
        let per = p.len() / n;
        let total: f64 = p
            .data()
            .chunks_exact(per)
            .zip(t.data().chunks_exact(per))
            .map(|(a, b)| {
                let (num, den) = jaccard_terms(a, b, self.mu);
                1.0 - num / den
            })
            .sum();
        Ok(Tensor::scalar(total / n as f64))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
    ) -> angiophase_tensor::Result<Vec<Option<Tensor>>> {
        let (p, t) = (inputs[0], inputs[1]);
        let n = p.shape()[0];
        let per = p.len() / n;
        let g = grad.item() / n as f64;
        let mut out = Vec::with_capacity(p.len());
        for (a, b) in p.data().chunks_exact(per).zip(t.data().chunks_exact(per)) {
            let (num, den) = jaccard_terms(a, b, self.mu);
            out.extend(
                a.iter()
                    .zip(b)
                    .map(|(&pa, &tb)| -g * (tb * den - num * (2.0 * pa - tb)) / (den * den)),
            );
        }
        Ok(vec![Some(Tensor::new(p.shape().to_vec(), out)?), None])
    }
}

pub fn vesselness_score(p: &Image) -> f64 {
    p.sum()
}

/// Longest run of frames scoring at least two thirds of the maximum;
/// ties go to the earliest run.
pub fn select_frame_interval(scores: &[f64]) -> Result<FrameInterval> {
    if scores.is_empty() {
        return Err(Error::SequenceTooShort { frames: 0, needed: 1 });
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let keep = |s: f64| 3.0 * s >= 2.0 * max;
    let mut best = FrameInterval::new(0, 0);
    let mut best_len = 0;
    let mut i = 0;
    while i < scores.len() {
        if !keep(scores[i]) {
            i += 1;
            continue;
        }
        let start = i;
        while i < scores.len() && keep(scores[i]) {
            i += 1;
        }
        if i - start > best_len {
            best_len = i - start;
            best = FrameInterval::new(start, i - 1);
        }
    }
    Ok(best)
}

/// `2|A∩B| / (|A| + |B|)`, 1 when both masks are empty.
pub fn dice_score(pred: &Mask, gt: &Mask) -> Result<f64> {
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{} masks",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let inter = pred.data.iter().zip(&gt.data).filter(|(a, b)| **a && **b).count();
    let total = pred.count() + gt.count();
    Ok(if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    })
}

/// Encoder-decoder with skip connections. Level `l` has `base << l`
/// channels; every level is one 3x3 convolution followed by ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VesselNetArch {
    pub resolution: usize,
    pub depth: usize,
    pub base_channels: usize,
}

impl Default for VesselNetArch {
    fn default() -> Self {
        Self {
            resolution: 64,
            depth: 3,
            base_channels: 8,
        }
    }
}

impl VesselNetArch {
    pub fn validate(&self) -> Result<()> {
        let factor = 1usize << (self.depth.max(1) - 1);
        if self.depth < 2 || self.base_channels == 0 || self.resolution % factor != 0 {
            return Err(Error::Config(format!(
                "vessel net needs depth >= 2 and a resolution divisible by {factor}, got {self:?}"
            )));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Named layers in parameter order.
    pub fn layers(&self) -> Vec<(String, LayerSpec)> {
        let mut out = Vec::new();
        let mut inc = 1;
        for l in 0..self.depth {
            out.push((format!("enc{l}"), LayerSpec::conv3x3(inc, self.channels(l))));
            inc = self.channels(l);
        }
        for l in (0..self.depth - 1).rev() {
            let in_ch = self.channels(l + 1) + self.channels(l);
            out.push((format!("dec{l}"), LayerSpec::conv3x3(in_ch, self.channels(l))));
        }
        out.push((
            "head".into(),
            LayerSpec::Conv2d {
                in_ch: self.channels(0),
                out_ch: 1,
                kernel: 1,
                stride: 1,
                padding: Padding::Valid,
            },
        ));
        out
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, spec) in self.layers() {
            init_layer(&name, &spec, &mut params, &mut rng)?;
        }
        Ok(params)
    }

    /// Probability map node for an `[n, 1, r, r]` input.
    pub fn build(&self, g: &mut Graph, params: &ParamStore, x: NodeId) -> Result<NodeId> {
        let layers = self.layers();
        let spec = |name: &str| -> &LayerSpec {
            &layers.iter().find(|(n, _)| n == name).expect("layer exists").1
        };
        let mut skips = Vec::with_capacity(self.depth);
        let mut h = x;
        for l in 0..self.depth {
            if l > 0 {
                h = g.max_pool2d(h, 2, 2)?;
            }
            let name = format!("enc{l}");
            h = apply_layer(g, params, &name, spec(&name), h)?;
            h = g.relu(h)?;
            skips.push(h);
        }
        for l in (0..self.depth - 1).rev() {
            let up = g.upsample2x(h)?;
            let cat = g.concat_channels(up, skips[l])?;
            let name = format!("dec{l}");
            h = apply_layer(g, params, &name, spec(&name), cat)?;
            h = g.relu(h)?;
        }
        let logits = apply_layer(g, params, "head", spec("head"), h)?;
        Ok(g.sigmoid(logits)?)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({ "kind": "vessel-unet", "arch": self })
    }
}

#[derive(Debug, Clone)]
pub struct VesselModel {
    pub arch: VesselNetArch,
    pub params: ParamStore,
}

const INFER_BATCH: usize = 16;

impl VesselModel {
    /// Probability maps for frames already at the network resolution.
    pub fn predict(&self, frames: &[Image]) -> Result<Vec<Image>> {
        let r = self.arch.resolution;
        let mut out = Vec::with_capacity(frames.len());
        for chunk in frames.chunks(INFER_BATCH) {
            if let Some(f) = chunk.iter().find(|f| (f.width, f.height) != (r, r)) {
                return Err(Error::Shape(format!(
                    "vessel net expects {r}x{r} frames, got {}x{}",
                    f.width, f.height
                )));
            }
            let mut g = Graph::new(Mode::Infer, 0);
            let x = g.constant(stack(chunk)?)?;
            let p = self.arch.build(&mut g, &self.params, x)?;
            out.extend(unstack(g.value(p))?);
        }
        Ok(out)
    }

    pub fn scores(&self, frames: &[Image]) -> Result<Vec<f64>> {
        Ok(self.predict(frames)?.iter().map(vesselness_score).collect())
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
            .filter(|a| a["kind"] == "vessel-unet")
            .and_then(|a| serde_json::from_value::<VesselNetArch>(a["arch"].clone()).ok())
            .ok_or_else(|| Error::format(path.display().to_string(), "not a vessel net weight file"))?;
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
        Ok(Self { arch, params })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VesselTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub mu: f64,
    pub seed: u64,
}

impl Default for VesselTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 4,
            learning_rate: 2e-3,
            mu: JACCARD_MU,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VesselTraining {
    pub model: VesselModel,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains the segmenter on `(frame, mask)` pairs at the architecture resolution.
pub fn train_vesselness(
    pairs: &[(Image, Mask)],
    arch: VesselNetArch,
    cfg: &VesselTrainConfig,
) -> Result<VesselTraining> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let r = arch.resolution;
    for (f, m) in pairs {
        if (f.width, f.height, m.width, m.height) != (r, r, r, r) {
            return Err(Error::Shape(format!(
                "training pair {}x{} / {}x{} does not match resolution {r}",
                f.width, f.height, m.width, m.height
            )));
        }
    }
    let mut params = arch.init_params(cfg.seed)?;
    let mut adam = AdamState::new(AdamConfig {
        lr: cfg.learning_rate,
        ..AdamConfig::default()
    });
    let loss_op = Arc::new(JaccardLoss { mu: cfg.mu });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7e55e1);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let frames: Vec<Image> = batch.iter().map(|&i| pairs[i].0.clone()).collect();
            let masks: Vec<Image> = batch.iter().map(|&i| pairs[i].1.to_image()).collect();
            let mut g = Graph::new(Mode::Train, 0);
            let x = g.constant(stack(&frames)?)?;
            let t = g.constant(stack(&masks)?)?;
            let p = arch.build(&mut g, &params, x)?;
            let loss = g.custom(loss_op.clone(), &[p, t])?;
            total += g.value(loss).item() * batch.len() as f64;
            g.backward(loss, &Tensor::scalar(1.0), &mut params)?;
            adam_step(&mut params, &mut adam)?;
        }
        epoch_losses.push(total / pairs.len() as f64);
    }
    Ok(VesselTraining {
        model: VesselModel { arch, params },
        epoch_losses,
    })
}
