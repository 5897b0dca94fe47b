//! Grayscale frames and the geometric operations the pipeline needs.

use angiophase_tensor::Tensor;

use crate::error::{Error, Result};

/// Row-major grayscale image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height || width == 0 || height == 0 {
            return Err(Error::Shape(format!(
                "{} values for a {width}x{height} image",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Bilinear sample at pixel-centre coordinates, replicating the border.
    pub fn sample(&self, fx: f64, fy: f64) -> f64 {
        let fx = fx.clamp(0.0, (self.width - 1) as f64);
        let fy = fy.clamp(0.0, (self.height - 1) as f64);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
        let top = self.get(x0, y0) * (1.0 - ax) + self.get(x1, y0) * ax;
        let bottom = self.get(x0, y1) * (1.0 - ax) + self.get(x1, y1) * ax;
        top * (1.0 - ay) + bottom * ay
    }

    /// Bilinear resize with pixel-centre alignment; same size is the identity.
    pub fn resize(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            let fy = (y as f64 + 0.5) * sy - 0.5;
            for x in 0..width {
                data.push(self.sample((x as f64 + 0.5) * sx - 0.5, fy));
            }
        }
        Image {
            width,
            height,
            data,
        }
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Image {
        let mut data = Vec::with_capacity(width * height);
        for y in y0..y0 + height {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x0 + width]);
        }
        Image {
            width,
            height,
            data,
        }
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            out.data[y * self.width..(y + 1) * self.width].reverse();
        }
        out
    }

    /// Rotation about the image centre by `degrees` (counter-clockwise in
    /// image coordinates), bilinear, border replicated.
    pub fn rotate(&self, degrees: f64) -> Image {
        let (s, c) = degrees.to_radians().sin_cos();
        let cx = (self.width as f64 - 1.0) / 2.0;
        let cy = (self.height as f64 - 1.0) / 2.0;
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            let dy = y as f64 - cy;
            for x in 0..self.width {
                let dx = x as f64 - cx;
                data.push(self.sample(cx + c * dx + s * dy, cy - s * dx + c * dy));
            }
        }
        Image {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn scale_intensity(&self, k: f64) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| v * k).collect(),
        }
    }

    /// 8-bit binary portable graymap of values clamped to `[0, 1]`.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.data
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }
}

/// Min-max normalisation to `[0, 1]` over a whole sequence.
pub fn normalize_sequence(frames: &mut [Image]) {
    let (lo, hi) = frames
        .iter()
        .flat_map(|f| f.data.iter())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    for f in frames.iter_mut() {
        for v in f.data.iter_mut() {
            *v = if range > 0.0 { (*v - lo) / range } else { 0.0 };
        }
    }
}

/// Subtracts the per-pixel mean over the sequence, leaving only what moves.
pub fn subtract_temporal_mean(frames: &mut [Image]) {
    let Some(first) = frames.first() else {
        return;
    };
    let n = frames.len() as f64;
    let mut mean = vec![0.0; first.data.len()];
    for f in frames.iter() {
        for (m, v) in mean.iter_mut().zip(&f.data) {
            *m += v / n;
        }
    }
    for f in frames.iter_mut() {
        for (v, m) in f.data.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
}

/// Stacks equally sized images into an `[n, 1, h, w]` tensor.
pub fn stack(frames: &[Image]) -> Result<Tensor> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Shape("no frames to stack".into()))?;
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(frames.len() * w * h);
    for f in frames {
        if (f.width, f.height) != (w, h) {
            return Err(Error::Shape(format!(
                "frame of {}x{} in a {w}x{h} stack",
                f.width, f.height
            )));
        }
        data.extend_from_slice(&f.data);
    }
    Ok(Tensor::new(vec![frames.len(), 1, h, w], data)?)
}

/// Splits an `[n, 1, h, w]` tensor back into images.
pub fn unstack(t: &Tensor) -> Result<Vec<Image>> {
    let s = t.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::Shape(format!("expected [n, 1, h, w], got {s:?}")));
    }
    let (h, w) = (s[2], s[3]);
    Ok(t.data()
        .chunks_exact(h * w)
        .map(|c| Image {
            width: w,
            height: h,
            data: c.to_vec(),
        })
        .collect())
}
