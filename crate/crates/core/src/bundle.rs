//! Study bundles: a directory holding a JSON manifest, one raw frame blob
//! and optional ECG, centreline annotation and synthetic truth sidecars.
//!
//! ```text
//! <bundle>/meta.json         BundleMeta
//! <bundle>/frames.raw        little-endian 8- or 16-bit pixels, frame-major
//! <bundle>/ecg.json          {"fs": .., "samples": [..]}
//! <bundle>/annotations.json  [{"frame": k, "vessels": [[{x, y, radius}, ..]]}]
//! <bundle>/truth.json        generator truth
//! ```

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::ecg::EcgTrace;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::synth::{SynthSequence, SynthTruth};
use crate::vesselness::CenterlineAnnotation;

pub const META_FILE: &str = "meta.json";
pub const FRAMES_FILE: &str = "frames.raw";
pub const ECG_FILE: &str = "ecg.json";
pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const TRUTH_FILE: &str = "truth.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleMeta {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub fps: f64,
    pub frames: usize,
    pub bit_depth: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub primary_angle_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub secondary_angle_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patient_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sequence_id: Option<String>,
}

impl BundleMeta {
    pub fn bytes_per_pixel(&self) -> usize {
        usize::from(self.bit_depth / 8)
    }

    pub fn blob_len(&self) -> usize {
        self.frames * self.width * self.height * self.bytes_per_pixel()
    }

    fn max_value(&self) -> f64 {
        if self.bit_depth == 8 {
            255.0
        } else {
            65535.0
        }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::format(format!("{path}.fps"), format!("must be positive, got {}", self.fps)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::format(format!("{path}.width"), "frame dimensions must be non-zero"));
        }
        if self.bit_depth != 8 && self.bit_depth != 16 {
            return Err(Error::format(
                format!("{path}.bit_depth"),
                format!("must be 8 or 16, got {}", self.bit_depth),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameAnnotation {
    pub frame: usize,
    pub vessels: CenterlineAnnotation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyBundle {
    pub meta: BundleMeta,
    /// Raw pixel bytes exactly as stored.
    pub blob: Vec<u8>,
    pub ecg: Option<EcgTrace>,
    pub annotations: Option<Vec<FrameAnnotation>>,
    pub truth: Option<SynthTruth>,
}

impl StudyBundle {
    /// Quantises frames with values in `[0, 1]` into a bundle blob.
    pub fn from_frames(meta: BundleMeta, frames: &[Image]) -> Result<Self> {
        meta.validate("meta")?;
        if frames.len() != meta.frames {
            return Err(Error::Shape(format!("{} frames for meta.frames = {}", frames.len(), meta.frames)));
        }
        let max = meta.max_value();
        let mut blob = Vec::with_capacity(meta.blob_len());
        for f in frames {
            if (f.width, f.height) != (meta.width, meta.height) {
                return Err(Error::Shape(format!(
                    "{}x{} frame in a {}x{} bundle",
                    f.width, f.height, meta.width, meta.height
                )));
            }
            for &v in &f.data {
                let q = (v.clamp(0.0, 1.0) * max).round();
                if meta.bit_depth == 8 {
                    blob.push(q as u8);
                } else {
                    blob.extend_from_slice(&(q as u16).to_le_bytes());
                }
            }
        }
        Ok(Self {
            meta,
            blob,
            ecg: None,
            annotations: None,
            truth: None,
        })
    }

    /// Bundle of a synthetic sequence; annotations are kept for every
    /// `annotate_every`-th opacified frame.
    pub fn from_synth(seq: &SynthSequence, id: &str) -> Result<Self> {
        let cfg = &seq.config;
        let meta = BundleMeta {
            id: id.to_string(),
            width: cfg.size,
            height: cfg.size,
            fps: cfg.fps,
            frames: seq.frames.len(),
            bit_depth: cfg.bit_depth,
            primary_angle_deg: None,
            secondary_angle_deg: None,
            patient_id: None,
            sequence_id: Some(id.to_string()),
        };
        let mut bundle = Self::from_frames(meta, &seq.frames)?;
        bundle.ecg = Some(seq.ecg.clone());
        let every = cfg.annotate_every.max(1);
        bundle.annotations = Some(
            seq.centerlines
                .iter()
                .enumerate()
                .filter(|(k, c)| !c.is_empty() && k % every == 0)
                .map(|(frame, c)| FrameAnnotation {
                    frame,
                    vessels: c.clone(),
                })
                .collect(),
        );
        bundle.truth = Some(seq.truth.clone());
        Ok(bundle)
    }

    pub fn id(&self) -> &str {
        &self.meta.id
    }

    pub fn frame_count(&self) -> usize {
        self.meta.frames
    }

    /// Frame `k` with intensities scaled to `[0, 1]`.
    pub fn frame(&self, k: usize) -> Image {
        let (w, h) = (self.meta.width, self.meta.height);
        let bpp = self.meta.bytes_per_pixel();
        let max = self.meta.max_value();
        let bytes = &self.blob[k * w * h * bpp..(k + 1) * w * h * bpp];
        let data = if bpp == 1 {
            bytes.iter().map(|&b| b as f64 / max).collect()
        } else {
            bytes
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]) as f64 / max)
                .collect()
        };
        Image {
            width: w,
            height: h,
            data,
        }
    }

    pub fn frames(&self) -> Vec<Image> {
        (0..self.meta.frames).map(|k| self.frame(k)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.meta.validate("meta")?;
        if self.blob.len() != self.meta.blob_len() {
            return Err(Error::format(
                FRAMES_FILE,
                format!(
                    "expected {} bytes ({} frames of {}x{} at {} bits), found {}",
                    self.meta.blob_len(),
                    self.meta.frames,
                    self.meta.width,
                    self.meta.height,
                    self.meta.bit_depth,
                    self.blob.len()
                ),
            ));
        }
        if let Some(ecg) = &self.ecg {
            if !(ecg.fs.is_finite() && ecg.fs > 0.0) {
                return Err(Error::format("ecg.fs", format!("must be positive, got {}", ecg.fs)));
            }
        }
        if let Some(ann) = &self.annotations {
            if let Some((i, a)) = ann.iter().enumerate().find(|(_, a)| a.frame >= self.meta.frames) {
                return Err(Error::format(
                    format!("annotations[{i}].frame"),
                    format!("frame {} beyond {} frames", a.frame, self.meta.frames),
                ));
            }
        }
        Ok(())
    }
}

/// Reads `dir/name`, reporting schema errors with the field path.
pub fn read_json<T: DeserializeOwned>(dir: &Path, name: &str) -> Result<T> {
    let path = dir.join(name);
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let de = &mut serde_json::Deserializer::from_slice(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        Error::format(format!("{name}:{field}"), e.into_inner().to_string())
    })
}

fn read_optional<T: DeserializeOwned>(dir: &Path, name: &str) -> Result<Option<T>> {
    if dir.join(name).exists() {
        read_json(dir, name).map(Some)
    } else {
        Ok(None)
    }
}

/// Writes pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let path = dir.join(name);
    let mut text = serde_json::to_vec_pretty(value)
        .map_err(|e| Error::format(name, e.to_string()))?;
    text.push(b'\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EcgFile {
    fs: f64,
    samples: Vec<f64>,
}

pub fn load_bundle(dir: impl AsRef<Path>) -> Result<StudyBundle> {
    let dir = dir.as_ref();
    let meta: BundleMeta = read_json(dir, META_FILE)?;
    meta.validate(META_FILE)?;
    let blob_path = dir.join(FRAMES_FILE);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let ecg = read_optional::<EcgFile>(dir, ECG_FILE)?
        .map(|e| EcgTrace::new(e.fs, e.samples))
        .transpose()
        .map_err(|e| Error::format(ECG_FILE, e.to_string()))?;
    let bundle = StudyBundle {
        meta,
        blob,
        ecg,
        annotations: read_optional(dir, ANNOTATIONS_FILE)?,
        truth: read_optional(dir, TRUTH_FILE)?,
    };
    bundle.validate()?;
    Ok(bundle)
}

pub fn save_bundle(bundle: &StudyBundle, dir: impl AsRef<Path>) -> Result<()> {
    bundle.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(dir, META_FILE, &bundle.meta)?;
    let blob_path = dir.join(FRAMES_FILE);
    fs::write(&blob_path, &bundle.blob).map_err(|e| Error::io(&blob_path, e))?;
    if let Some(ecg) = &bundle.ecg {
        write_json(dir, ECG_FILE, ecg)?;
    }
    if let Some(a) = &bundle.annotations {
        write_json(dir, ANNOTATIONS_FILE, a)?;
    }
    if let Some(t) = &bundle.truth {
        write_json(dir, TRUTH_FILE, t)?;
    }
    Ok(())
}

/// Bundle directories directly below `root` (those holding a manifest),
/// sorted by name.
pub fn list_bundles(root: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
    let root = root.as_ref();
    if root.join(META_FILE).exists() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs: Vec<_> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(META_FILE).exists())
        .collect();
    dirs.sort();
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> StudyBundle {
        let meta = BundleMeta {
            id: "tiny".into(),
            width: 4,
            height: 4,
            fps: 15.0,
            frames: 2,
            bit_depth: 8,
            primary_angle_deg: Some(-30.5),
            secondary_angle_deg: None,
            patient_id: Some("p1".into()),
            sequence_id: None,
        };
        let frames: Vec<Image> = (0..2)
            .map(|k| Image::new(4, 4, (0..16).map(|i| (i + k) as f64 / 20.0).collect()).unwrap())
            .collect();
        let mut b = StudyBundle::from_frames(meta, &frames).unwrap();
        b.ecg = Some(EcgTrace::new(400.0, vec![0.1, -0.25, 1.0 / 3.0]).unwrap());
        b
    }

    fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut v: Vec<_> = fs::read_dir(dir)
            .unwrap()
            .map(|e| {
                let p = e.unwrap().path();
                (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
            })
            .collect();
        v.sort();
        v
    }

    #[test]
    fn minimal_bundle_round_trips_byte_identically() {
        let tmp = tempfile::tempdir().unwrap();
        let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
        let bundle = tiny();
        save_bundle(&bundle, &a).unwrap();
        let loaded = load_bundle(&a).unwrap();
        assert_eq!(loaded, bundle);
        save_bundle(&loaded, &b).unwrap();
        assert_eq!(dir_bytes(&a), dir_bytes(&b));
    }

    #[test]
    fn short_blob_names_both_sizes() {
        let tmp = tempfile::tempdir().unwrap();
        save_bundle(&tiny(), tmp.path()).unwrap();
        let p = tmp.path().join(FRAMES_FILE);
        let mut blob = fs::read(&p).unwrap();
        blob.pop();
        fs::write(&p, blob).unwrap();
        let err = load_bundle(tmp.path()).unwrap_err();
        let msg = err.to_string();
        assert_eq!(err.category(), "FormatError");
        assert!(msg.contains("expected 32 bytes") && msg.contains("found 31"), "{msg}");
    }

    #[test]
    fn schema_violation_reports_field_path() {
        let tmp = tempfile::tempdir().unwrap();
        save_bundle(&tiny(), tmp.path()).unwrap();
        let p = tmp.path().join(META_FILE);
        let text = fs::read_to_string(&p).unwrap().replace("\"fps\": 15.0", "\"fps\": \"fast\"");
        fs::write(&p, text).unwrap();
        match load_bundle(tmp.path()).unwrap_err() {
            Error::Format { path, .. } => assert_eq!(path, "meta.json:fps"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn sixteen_bit_pixels_are_little_endian() {
        let meta = BundleMeta {
            id: "x".into(),
            width: 1,
            height: 1,
            fps: 10.0,
            frames: 1,
            bit_depth: 16,
            primary_angle_deg: None,
            secondary_angle_deg: None,
            patient_id: None,
            sequence_id: None,
        };
        let b = StudyBundle::from_frames(meta, &[Image::filled(1, 1, 258.0 / 65535.0)]).unwrap();
        assert_eq!(b.blob, vec![2, 1]);
        assert_eq!(b.frame(0).data, vec![258.0 / 65535.0]);
    }
}
