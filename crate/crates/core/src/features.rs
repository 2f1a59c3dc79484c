//! Hand-crafted patch descriptors on edge maps.
//!
//! A descriptor is a set of magnitude-weighted gradient-orientation
//! histograms (8 bins, soft-binned in angle and space, Gaussian-weighted
//! around the patch centre) lifted to the working dimension by a fixed
//! seeded matrix with orthonormal columns and then L2-normalized. The lift
//! preserves inner products, so it only sets the token width.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::edge_maps::{gaussian_blur, EdgeImage};
use crate::error::{Error, Result};
use crate::geometry::Point;

pub const ORIENTATION_BINS: usize = 8;

/// Unit-norm feature vector whose length is a multiple of 4.
#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor(DVector<f64>);

impl Descriptor {
    /// Normalizes `v`; an all-zero vector becomes `e1`.
    pub fn new(v: DVector<f64>) -> Result<Self> {
        if v.is_empty() || !v.len().is_multiple_of(4) {
            return Err(Error::DimMismatch { expected: 4 * (v.len() / 4 + 1), got: v.len() });
        }
        let n = v.norm();
        if n <= 1e-12 || !n.is_finite() {
            return Ok(Self::fallback(v.len()));
        }
        Ok(Self(v / n))
    }

    pub fn fallback(dim: usize) -> Self {
        let mut v = DVector::zeros(dim);
        v[0] = 1.0;
        Self(v)
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &Descriptor) -> f64 {
        self.0.dot(&other.0)
    }
}

/// Which side of the match a token set describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Template,
    Image,
}

/// Row-per-token feature matrix with the tokens' 2D grid coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSet {
    pub features: DMatrix<f64>,
    pub positions: Vec<[f64; 2]>,
    pub side: Side,
}

impl TokenSet {
    pub fn new(features: DMatrix<f64>, positions: Vec<[f64; 2]>, side: Side) -> Result<Self> {
        if features.nrows() != positions.len() {
            return Err(Error::LengthMismatch(features.nrows(), positions.len()));
        }
        Ok(Self { features, positions, side })
    }

    pub fn from_descriptors(desc: &[Descriptor], positions: Vec<[f64; 2]>, side: Side) -> Result<Self> {
        let dim = desc.first().map(|d| d.dim()).unwrap_or(0);
        if let Some(d) = desc.iter().find(|d| d.dim() != dim) {
            return Err(Error::DimMismatch { expected: dim, got: d.dim() });
        }
        let mut m = DMatrix::zeros(desc.len(), dim);
        for (r, d) in desc.iter().enumerate() {
            m.row_mut(r).copy_from(&d.as_vector().transpose());
        }
        Self::new(m, positions, side)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Rescales every row to unit L2 norm (zero rows become `e1`).
    pub fn normalize_rows(&mut self) {
        for mut row in self.features.row_iter_mut() {
            let n = row.norm();
            if n > 1e-12 && n.is_finite() {
                row /= n;
            } else {
                row.fill(0.0);
                if !row.is_empty() {
                    row[0] = 1.0;
                }
            }
        }
    }
}

/// Shape of one descriptor family (coarse or fine).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescriptorSpec {
    /// Window side in pixels; the window spans `center ± window / 2`.
    pub window: usize,
    /// Spatial subdivision per axis (2 for coarse, 1 for fine).
    pub cells: usize,
    /// Output dimension, divisible by 4 and at least `8 * cells^2`.
    pub dim: usize,
    /// Gaussian weight around the centre, in pixels.
    pub spatial_sigma: f64,
    /// Gaussian smoothing applied to the edge map before differentiation.
    pub smoothing: f64,
    /// Subtract the histogram mean before lifting, so unrelated patches
    /// score near zero rather than uniformly high.
    pub centered: bool,
    pub lift_seed: u64,
}

impl DescriptorSpec {
    pub fn coarse() -> Self {
        Self {
            window: 65,
            cells: 2,
            dim: 64,
            spatial_sigma: 30.0,
            smoothing: 1.0,
            centered: true,
            lift_seed: 0x5eed_c0a5,
        }
    }

    pub fn fine() -> Self {
        Self {
            window: 9,
            cells: 1,
            dim: 32,
            spatial_sigma: 2.0,
            smoothing: 1.0,
            centered: true,
            lift_seed: 0x5eed_f1e0,
        }
    }

    pub fn raw_len(&self) -> usize {
        ORIENTATION_BINS * self.cells * self.cells
    }

    pub fn validate(&self) -> Result<()> {
        if !self.dim.is_multiple_of(4) || self.dim < self.raw_len() {
            return Err(Error::DimMismatch { expected: self.raw_len().next_multiple_of(4), got: self.dim });
        }
        if self.cells == 0 || self.window == 0 || !(self.spatial_sigma > 0.0) || self.smoothing < 0.0 {
            return Err(Error::InvalidRange("descriptor window, cells and sigmas must be positive".into()));
        }
        Ok(())
    }
}

/// Per-pixel gradient magnitude and soft orientation bin.
#[derive(Clone, Debug)]
pub struct GradientField {
    width: usize,
    height: usize,
    mag: Vec<f64>,
    /// Continuous bin coordinate in `[0, 8)`.
    bin: Vec<f64>,
}

impl GradientField {
    pub fn new(e: &EdgeImage, smoothing: f64) -> Self {
        let (w, h) = (e.width(), e.height());
        let s = gaussian_blur(e.data(), w, h, smoothing);
        let at = |x: usize, y: usize| s[y * w + x];
        let mut mag = vec![0.0; w * h];
        let mut bin = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let gx = 0.5 * (at((x + 1).min(w - 1), y) - at(x.saturating_sub(1), y));
                let gy = 0.5 * (at(x, (y + 1).min(h - 1)) - at(x, y.saturating_sub(1)));
                let m = gx.hypot(gy);
                let i = y * w + x;
                mag[i] = m;
                if m > 0.0 {
                    let mut a = gy.atan2(gx);
                    if a < 0.0 {
                        a += 2.0 * PI;
                    }
                    bin[i] = (a / (2.0 * PI) * ORIENTATION_BINS as f64) % ORIENTATION_BINS as f64;
                }
            }
        }
        Self { width: w, height: h, mag, bin }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Raw histogram, laid out `[cell_y][cell_x][bin]`.
    pub fn histogram(&self, center: (usize, usize), spec: &DescriptorSpec) -> Result<Vec<f64>> {
        let (cx, cy) = center;
        if cx >= self.width || cy >= self.height {
            return Err(Error::WindowOutOfRange { x: cx, y: cy });
        }
        let r = (spec.window / 2) as i64;
        let ncell = spec.cells;
        let nb = ORIENTATION_BINS;
        let mut hist = vec![0.0; nb * ncell * ncell];
        let inv2s2 = 1.0 / (2.0 * spec.spatial_sigma * spec.spatial_sigma);
        let span = (2 * r).max(1) as f64;
        // continuous cell coordinate and its two-tap weights, per offset
        let taps = |d: i64| -> [(usize, f64); 2] {
            let t = (d + r) as f64 / span * ncell as f64 - 0.5;
            let lo = t.floor();
            let frac = t - lo;
            let lo_i = lo as i64;
            let clampc = |c: i64| c.clamp(0, ncell as i64 - 1) as usize;
            [(clampc(lo_i), 1.0 - frac), (clampc(lo_i + 1), frac)]
        };
        for dy in -r..=r {
            let y = cy as i64 + dy;
            if y < 0 || y >= self.height as i64 {
                continue;
            }
            let ty = taps(dy);
            for dx in -r..=r {
                let x = cx as i64 + dx;
                if x < 0 || x >= self.width as i64 {
                    continue;
                }
                let i = y as usize * self.width + x as usize;
                let m = self.mag[i];
                if m == 0.0 {
                    continue;
                }
                let wgt = m * (-((dx * dx + dy * dy) as f64) * inv2s2).exp();
                let b = self.bin[i];
                let b0 = b.floor();
                let fb = b - b0;
                let b0 = b0 as usize % nb;
                let b1 = (b0 + 1) % nb;
                let tx = taps(dx);
                for &(cyi, wy) in &ty {
                    if wy == 0.0 {
                        continue;
                    }
                    for &(cxi, wx) in &tx {
                        if wx == 0.0 {
                            continue;
                        }
                        let base = (cyi * ncell + cxi) * nb;
                        let ws = wgt * wy * wx;
                        hist[base + b0] += ws * (1.0 - fb);
                        hist[base + b1] += ws * fb;
                    }
                }
            }
        }
        Ok(hist)
    }
}

/// Seeded `dim x raw` matrix with orthonormal columns.
pub fn lift_matrix(raw: usize, dim: usize, seed: u64) -> Result<DMatrix<f64>> {
    if dim < raw {
        return Err(Error::DimMismatch { expected: raw, got: dim });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::<f64>::from_fn(dim, raw, |_, _| StandardNormal.sample(&mut rng));
    let qr = g.qr();
    let mut q = qr.q();
    // fix column signs so the basis does not depend on QR conventions
    let r = qr.r();
    for c in 0..raw {
        if r[(c, c)] < 0.0 {
            let mut col = q.column_mut(c);
            col *= -1.0;
        }
    }
    Ok(q)
}

/// Computes descriptors of one family over one edge map.
#[derive(Clone, Debug)]
pub struct DescriptorExtractor {
    field: GradientField,
    spec: DescriptorSpec,
    lift: DMatrix<f64>,
}

impl DescriptorExtractor {
    pub fn new(e: &EdgeImage, spec: DescriptorSpec) -> Result<Self> {
        spec.validate()?;
        let lift = lift_matrix(spec.raw_len(), spec.dim, spec.lift_seed)?;
        Ok(Self { field: GradientField::new(e, spec.smoothing), spec, lift })
    }

    pub fn spec(&self) -> &DescriptorSpec {
        &self.spec
    }

    pub fn histogram(&self, center: (usize, usize)) -> Result<Vec<f64>> {
        self.field.histogram(center, &self.spec)
    }

    pub fn describe(&self, center: (usize, usize)) -> Result<Descriptor> {
        let mut h = self.histogram(center)?;
        if h.iter().all(|v| *v <= 1e-12) {
            return Ok(Descriptor::fallback(self.spec.dim));
        }
        if self.spec.centered {
            let mean = h.iter().sum::<f64>() / h.len() as f64;
            h.iter_mut().for_each(|v| *v -= mean);
        }
        let n = h.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n <= 1e-12 {
            return Ok(Descriptor::fallback(self.spec.dim));
        }
        let hv = DVector::from_vec(h);
        Descriptor::new(&self.lift * hv)
    }

    /// Descriptors for a dense grid at `stride`, centred per `cell_center`.
    pub fn describe_grid(&self, stride: usize) -> Result<DescriptorGrid> {
        let cols = self.field.width().div_ceil(stride);
        let rows = self.field.height().div_ceil(stride);
        let mut grid = DescriptorGrid::empty(cols, rows, stride, self.spec.dim);
        for gy in 0..rows {
            for gx in 0..cols {
                let c = (
                    crate::sampling::cell_center(gx, stride).min(self.field.width() - 1),
                    crate::sampling::cell_center(gy, stride).min(self.field.height() - 1),
                );
                let d = self.describe(c)?;
                grid.set(gx, gy, d.as_vector().as_slice());
            }
        }
        Ok(grid)
    }
}

/// One-off descriptor of the patch centred at `center`.
pub fn describe_patch(e: &EdgeImage, center: (usize, usize), spec: &DescriptorSpec) -> Result<Descriptor> {
    if center.0 >= e.width() || center.1 >= e.height() {
        return Err(Error::WindowOutOfRange { x: center.0, y: center.1 });
    }
    DescriptorExtractor::new(e, *spec)?.describe(center)
}

/// Dense grid of descriptors; cells may be unset.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorGrid {
    pub cols: usize,
    pub rows: usize,
    pub stride: usize,
    pub dim: usize,
    data: Vec<f64>,
    valid: Vec<bool>,
}

impl DescriptorGrid {
    pub fn empty(cols: usize, rows: usize, stride: usize, dim: usize) -> Self {
        Self { cols, rows, stride, dim, data: vec![0.0; cols * rows * dim], valid: vec![false; cols * rows] }
    }

    pub fn set(&mut self, gx: usize, gy: usize, v: &[f64]) {
        let i = gy * self.cols + gx;
        self.data[i * self.dim..(i + 1) * self.dim].copy_from_slice(v);
        self.valid[i] = true;
    }

    pub fn get(&self, gx: usize, gy: usize) -> Option<&[f64]> {
        if gx >= self.cols || gy >= self.rows {
            return None;
        }
        let i = gy * self.cols + gx;
        self.valid[i].then(|| &self.data[i * self.dim..(i + 1) * self.dim])
    }

    pub fn get_signed(&self, gx: i64, gy: i64) -> Option<&[f64]> {
        if gx < 0 || gy < 0 {
            return None;
        }
        self.get(gx as usize, gy as usize)
    }

    pub fn is_valid(&self, gx: usize, gy: usize) -> bool {
        self.get(gx, gy).is_some()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Pixel centre of cell `(gx, gy)`.
    pub fn center(&self, gx: usize, gy: usize) -> Point {
        Point::new(
            crate::sampling::cell_center(gx, self.stride) as f64,
            crate::sampling::cell_center(gy, self.stride) as f64,
        )
    }
}
