//! Grayscale images, binary masks and the edge maps both are translated into.
//!
//! Source images go through a Canny-style detector (Gaussian smoothing,
//! Sobel gradient, non-maximum suppression, hysteresis). Template masks are
//! reduced to their inner contour.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width * height != data.len() {
            return Err(Error::DimMismatch { expected: width * height, got: data.len() });
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidRange("gray values must lie in [0, 1]".into()));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self { width, height, data: vec![value.clamp(0.0, 1.0); width * height] }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y).clamp(0.0, 1.0));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskImage {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl MaskImage {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if width * height != data.len() {
            return Err(Error::DimMismatch { expected: width * height, got: data.len() });
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }
}

/// Edge strength in `[0, 1]` plus the thresholded edge set.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
    binary: Vec<bool>,
}

impl EdgeImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>, binary: Vec<bool>) -> Result<Self> {
        if width * height != data.len() {
            return Err(Error::DimMismatch { expected: width * height, got: data.len() });
        }
        if width * height != binary.len() {
            return Err(Error::DimMismatch { expected: width * height, got: binary.len() });
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidRange("edge strength must lie in [0, 1]".into()));
        }
        Ok(Self { width, height, data, binary })
    }

    /// Edge image whose strength is 1 exactly on `binary`.
    pub fn from_binary(width: usize, height: usize, binary: Vec<bool>) -> Result<Self> {
        let data = binary.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect();
        Self::new(width, height, data, binary)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn binary(&self) -> &[bool] {
        &self.binary
    }

    pub fn strength(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn is_edge(&self, x: usize, y: usize) -> bool {
        self.binary[y * self.width + x]
    }

    pub fn edge_count(&self) -> usize {
        self.binary.iter().filter(|v| **v).count()
    }

    pub fn edge_pixels(&self) -> Vec<(usize, usize)> {
        (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| (x, y)))
            .filter(|&(x, y)| self.is_edge(x, y))
            .collect()
    }
}

/// Hysteresis thresholds are relative to the strongest gradient in the image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeConfig {
    pub low: f64,
    pub high: f64,
    /// Gaussian pre-smoothing; 0 disables it.
    pub sigma: f64,
}

impl Default for EdgeConfig {
    fn default() -> Self {
        Self { low: 0.1, high: 0.2, sigma: 1.0 }
    }
}

/// Normalized 1D Gaussian taps, radius `ceil(3 sigma)`.
pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with replicate padding.
pub(crate) fn gaussian_blur(data: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    if k.len() == 1 {
        return data.to_vec();
    }
    let r = (k.len() / 2) as i64;
    let clampx = |x: i64| x.clamp(0, width as i64 - 1) as usize;
    let clampy = |y: i64| y.clamp(0, height as i64 - 1) as usize;
    let mut tmp = vec![0.0; data.len()];
    for y in 0..height {
        let row = &data[y * width..(y + 1) * width];
        for x in 0..width {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * row[clampx(x as i64 + i as i64 - r)];
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; data.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * tmp[clampy(y as i64 + i as i64 - r) * width + x];
            }
            out[y * width + x] = acc;
        }
    }
    out
}

/// Sobel gradient; border pixels get zero gradient.
fn sobel(data: &[f64], width: usize, height: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; data.len()];
    let mut gy = vec![0.0; data.len()];
    let at = |x: usize, y: usize| data[y * width + x];
    for y in 1..height - 1 {
        for x in 1..width - 1 {
            let dx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            let dy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
            gx[y * width + x] = dx / 8.0;
            gy[y * width + x] = dy / 8.0;
        }
    }
    (gx, gy)
}

/// Unit step along the gradient direction, quantized to 8 neighbours.
fn gradient_step(gx: f64, gy: f64) -> (i64, i64) {
    const TAN_22_5: f64 = 0.414_213_562_373_095_1;
    let (ax, ay) = (gx.abs(), gy.abs());
    let sx = if gx >= 0.0 { 1 } else { -1 };
    let sy = if gy >= 0.0 { 1 } else { -1 };
    if ay <= ax * TAN_22_5 {
        (sx, 0)
    } else if ax <= ay * TAN_22_5 {
        (0, sy)
    } else {
        (sx, sy)
    }
}

pub fn detect_edges(img: &GrayImage, cfg: &EdgeConfig) -> Result<EdgeImage> {
    let (w, h) = (img.width, img.height);
    if w < 3 || h < 3 {
        return Err(Error::ImageTooSmall { width: w, height: h });
    }
    if !(cfg.low >= 0.0 && cfg.high >= cfg.low && cfg.high <= 1.0) {
        return Err(Error::InvalidRange(format!("hysteresis thresholds {} / {}", cfg.low, cfg.high)));
    }
    let smooth = gaussian_blur(&img.data, w, h, cfg.sigma);
    let (gx, gy) = sobel(&smooth, w, h);
    let mag: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect();
    let max = mag.iter().cloned().fold(0.0, f64::max);
    if max <= 1e-12 {
        return EdgeImage::new(w, h, vec![0.0; w * h], vec![false; w * h]);
    }
    let tie = 1e-9 * max;

    // Non-maximum suppression. Ties along the gradient keep the pixel on the
    // brighter side, so an ideal step yields a single-pixel line.
    let mut thin = vec![0.0; w * h];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let i = y * w + x;
            let m = mag[i];
            if m <= tie {
                continue;
            }
            let (dx, dy) = gradient_step(gx[i], gy[i]);
            let ahead = mag[((y as i64 + dy) as usize) * w + (x as i64 + dx) as usize];
            let behind = mag[((y as i64 - dy) as usize) * w + (x as i64 - dx) as usize];
            if m > ahead + tie && m >= behind - tie {
                thin[i] = m / max;
            }
        }
    }

    let mut binary = vec![false; w * h];
    let mut queue = VecDeque::new();
    for (i, v) in thin.iter().enumerate() {
        if *v >= cfg.high && *v > 0.0 {
            binary[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = ((i % w) as i64, (i / w) as i64);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if !binary[j] && thin[j] >= cfg.low && thin[j] > 0.0 {
                    binary[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }
    EdgeImage::new(w, h, thin, binary)
}

/// Inner contour: mask pixels with at least one 4-neighbour outside the mask
/// (the frame counts as outside).
pub fn mask_to_edges(mask: &MaskImage) -> Result<EdgeImage> {
    if mask.count() == 0 {
        return Err(Error::EmptyMask);
    }
    let (w, h) = (mask.width, mask.height);
    let inside = |x: i64, y: i64| x >= 0 && y >= 0 && x < w as i64 && y < h as i64 && mask.get(x as usize, y as usize);
    let mut binary = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let (xi, yi) = (x as i64, y as i64);
            if !inside(xi - 1, yi) || !inside(xi + 1, yi) || !inside(xi, yi - 1) || !inside(xi, yi + 1) {
                binary[y * w + x] = true;
            }
        }
    }
    EdgeImage::from_binary(w, h, binary)
}
