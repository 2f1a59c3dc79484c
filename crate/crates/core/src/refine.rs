//! Coarse alignment by warping, global-local feature fusion, and window
//! correlation with a 2D-softmax expectation for sub-pixel matches.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::attention::{run_transformer, AttentionBlockWeights};
use crate::edge_maps::EdgeImage;
use crate::error::{Error, Result};
use crate::features::{lift_matrix, DescriptorExtractor, DescriptorGrid, Side, TokenSet};
use crate::geometry::{dlt_weighted, Homography, Point, PointMatch, WeightedMatchSet};
use crate::sampling::{cell_center, COARSE_STRIDE, FINE_STRIDE};
use crate::weights;

/// Fine cells per coarse cell along each axis.
pub const FINE_PER_COARSE: usize = COARSE_STRIDE / FINE_STRIDE;

/// Source edge map resampled into the template frame.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpedImage {
    pub image: EdgeImage,
    /// Maps source coordinates into the warped frame.
    pub h: Homography,
}

/// Bilinear sample with zero outside the image.
fn bilinear(data: &[f64], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let at = |xi: i64, yi: i64| {
        if xi < 0 || yi < 0 || xi >= w as i64 || yi >= h as i64 {
            0.0
        } else {
            data[yi as usize * w + xi as usize]
        }
    };
    let mut v = 0.0;
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        if wy == 0.0 {
            continue;
        }
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            if wx == 0.0 {
                continue;
            }
            v += wy * wx * at(x0 + dx, y0 + dy);
        }
    }
    v
}

/// Removes round-off from coordinates that are integral up to 1e-9, so exact
/// integer shifts resample exactly.
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

/// `out(p) = in(h⁻¹ p)` on a frame of the input's size.
pub fn warp_image(img: &EdgeImage, h: &Homography) -> Result<WarpedImage> {
    warp_image_to(img, h, img.width(), img.height())
}

/// `out(p) = in(h⁻¹ p)` on a `width x height` frame, bilinear, zero outside.
/// The warped edge set is the bilinearly resampled indicator at `>= 0.5`.
pub fn warp_image_to(img: &EdgeImage, h: &Homography, width: usize, height: usize) -> Result<WarpedImage> {
    let inv = h.inverse()?;
    let m = inv.matrix();
    let (sw, sh) = (img.width(), img.height());
    let indicator: Vec<f64> = img.binary().iter().map(|b| if *b { 1.0 } else { 0.0 }).collect();
    let mut data = vec![0.0; width * height];
    let mut binary = vec![false; width * height];
    for y in 0..height {
        for x in 0..width {
            let (xf, yf) = (x as f64, y as f64);
            let wz = m[(2, 0)] * xf + m[(2, 1)] * yf + m[(2, 2)];
            if wz.abs() < 1e-12 {
                continue;
            }
            let sx = snap((m[(0, 0)] * xf + m[(0, 1)] * yf + m[(0, 2)]) / wz);
            let sy = snap((m[(1, 0)] * xf + m[(1, 1)] * yf + m[(1, 2)]) / wz);
            if !(sx > -1.0 && sy > -1.0 && sx < sw as f64 && sy < sh as f64) {
                continue;
            }
            let i = y * width + x;
            data[i] = bilinear(img.data(), sw, sh, sx, sy).clamp(0.0, 1.0);
            binary[i] = bilinear(&indicator, sw, sh, sx, sy) >= 0.5;
        }
    }
    Ok(WarpedImage { image: EdgeImage::new(width, height, data, binary)?, h: *h })
}

/// Square patch of edge strength centred at `c`, bilinear, zero outside.
pub fn extract_window(img: &EdgeImage, c: Point, size: usize) -> Vec<f64> {
    let half = (size as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(size * size);
    for dy in 0..size {
        for dx in 0..size {
            out.push(bilinear(img.data(), img.width(), img.height(), c.x + dx as f64 - half, c.y + dy as f64 - half));
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Identity,
    Relu,
}

/// Two-layer map `W2 act(W1 [coarse; fine] + b1) + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionWeights {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    pub activation: Activation,
    pub coarse_dim: usize,
    pub fine_dim: usize,
}

impl FusionWeights {
    /// `W1 = [κ P | I]`, `W2 = I`, zero biases: adds a fixed orthonormal
    /// projection of the coarse feature, scaled by `kappa`, to the fine one.
    pub fn projection(coarse_dim: usize, fine_dim: usize, kappa: f64, seed: u64) -> Result<Self> {
        let p = if coarse_dim >= fine_dim {
            lift_matrix(fine_dim, coarse_dim, seed)?.transpose()
        } else {
            lift_matrix(coarse_dim, fine_dim, seed)?
        };
        let mut w1 = DMatrix::zeros(fine_dim, coarse_dim + fine_dim);
        w1.view_mut((0, 0), (fine_dim, coarse_dim)).copy_from(&(p * kappa));
        w1.view_mut((0, coarse_dim), (fine_dim, fine_dim)).fill_with_identity();
        Ok(Self {
            w1,
            b1: DVector::zeros(fine_dim),
            w2: DMatrix::identity(fine_dim, fine_dim),
            b2: DVector::zeros(fine_dim),
            activation: Activation::Identity,
            coarse_dim,
            fine_dim,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.w2.nrows()
    }

    fn check(&self) -> Result<()> {
        let hidden = self.w1.nrows();
        if self.w1.ncols() != self.coarse_dim + self.fine_dim {
            return Err(Error::DimMismatch { expected: self.coarse_dim + self.fine_dim, got: self.w1.ncols() });
        }
        if self.b1.len() != hidden || self.w2.ncols() != hidden {
            return Err(Error::DimMismatch { expected: hidden, got: self.w2.ncols() });
        }
        if self.b2.len() != self.w2.nrows() {
            return Err(Error::DimMismatch { expected: self.w2.nrows(), got: self.b2.len() });
        }
        if !self.out_dim().is_multiple_of(4) {
            return Err(Error::DimMismatch { expected: self.out_dim().next_multiple_of(4), got: self.out_dim() });
        }
        Ok(())
    }

    /// Output before re-normalization.
    pub fn apply_raw(&self, coarse: &[f64], fine: &[f64]) -> Result<DVector<f64>> {
        if coarse.len() != self.coarse_dim {
            return Err(Error::DimMismatch { expected: self.coarse_dim, got: coarse.len() });
        }
        if fine.len() != self.fine_dim {
            return Err(Error::DimMismatch { expected: self.fine_dim, got: fine.len() });
        }
        let x = DVector::from_iterator(self.coarse_dim + self.fine_dim, coarse.iter().chain(fine).copied());
        let mut hdn = &self.w1 * x + &self.b1;
        if self.activation == Activation::Relu {
            hdn.apply(|v| *v = v.max(0.0));
        }
        Ok(&self.w2 * hdn + &self.b2)
    }

    pub fn to_named(&self) -> Vec<(String, DMatrix<f64>)> {
        let act = match self.activation {
            Activation::Identity => 0.0,
            Activation::Relu => 1.0,
        };
        vec![
            ("fusion.w1".into(), self.w1.clone()),
            ("fusion.b1".into(), DMatrix::from_column_slice(self.b1.len(), 1, self.b1.as_slice())),
            ("fusion.w2".into(), self.w2.clone()),
            ("fusion.b2".into(), DMatrix::from_column_slice(self.b2.len(), 1, self.b2.as_slice())),
            ("fusion.relu".into(), DMatrix::from_element(1, 1, act)),
        ]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        weights::save(path, &self.to_named())
    }

    /// Loads a fusion map with the given input dimensions; the hidden and
    /// output widths come from the file.
    pub fn load(path: &Path, coarse_dim: usize, fine_dim: usize) -> Result<Self> {
        let entries = weights::load(path)?;
        let find = |n: &str| {
            entries
                .iter()
                .find(|(k, _)| k == n)
                .map(|(_, m)| m.clone())
                .ok_or_else(|| Error::WeightFormat(format!("missing matrix {n}")))
        };
        let w1 = find("fusion.w1")?;
        let w2 = find("fusion.w2")?;
        let hidden = w1.nrows();
        let out = w2.nrows();
        let b1 = weights::take(&entries, "fusion.b1", hidden, 1)?;
        let b2 = weights::take(&entries, "fusion.b2", out, 1)?;
        let relu = weights::take(&entries, "fusion.relu", 1, 1)?[(0, 0)] != 0.0;
        let fw = Self {
            w1,
            b1: b1.column(0).into_owned(),
            w2,
            b2: b2.column(0).into_owned(),
            activation: if relu { Activation::Relu } else { Activation::Identity },
            coarse_dim,
            fine_dim,
        };
        fw.check()?;
        Ok(fw)
    }
}

/// Fine descriptors at the listed fine cells only.
pub fn describe_fine_cells(
    ex: &DescriptorExtractor,
    width: usize,
    height: usize,
    cells: &[(usize, usize)],
) -> Result<DescriptorGrid> {
    let cols = width.div_ceil(FINE_STRIDE);
    let rows = height.div_ceil(FINE_STRIDE);
    let mut grid = DescriptorGrid::empty(cols, rows, FINE_STRIDE, ex.spec().dim);
    for &(gx, gy) in cells {
        if gx >= cols || gy >= rows || grid.is_valid(gx, gy) {
            continue;
        }
        let c = (cell_center(gx, FINE_STRIDE).min(width - 1), cell_center(gy, FINE_STRIDE).min(height - 1));
        grid.set(gx, gy, ex.describe(c)?.as_vector().as_slice());
    }
    Ok(grid)
}

/// Broadcasts each coarse token (positions are coarse grid coordinates) to
/// its block of fine cells, concatenates with the fine descriptor there,
/// applies the fusion map and re-normalizes. Fine cells outside every
/// token's block, or without a fine descriptor, stay unset.
pub fn fuse_features(coarse: &TokenSet, fine: &DescriptorGrid, fw: &FusionWeights) -> Result<DescriptorGrid> {
    fw.check()?;
    if coarse.dim() != fw.coarse_dim {
        return Err(Error::DimMismatch { expected: fw.coarse_dim, got: coarse.dim() });
    }
    if fine.dim != fw.fine_dim {
        return Err(Error::DimMismatch { expected: fw.fine_dim, got: fine.dim });
    }
    let mut out = DescriptorGrid::empty(fine.cols, fine.rows, fine.stride, fw.out_dim());
    for (r, pos) in coarse.positions.iter().enumerate() {
        let (cx, cy) = (pos[0] as usize, pos[1] as usize);
        let cvec: Vec<f64> = coarse.features.row(r).iter().copied().collect();
        for fy in cy * FINE_PER_COARSE..(cy + 1) * FINE_PER_COARSE {
            for fx in cx * FINE_PER_COARSE..(cx + 1) * FINE_PER_COARSE {
                let Some(f) = fine.get(fx, fy) else { continue };
                let v = fw.apply_raw(&cvec, f)?;
                let n = v.norm();
                let v = if n > 1e-12 {
                    v / n
                } else {
                    let mut e = DVector::zeros(fw.out_dim());
                    e[0] = 1.0;
                    e
                };
                out.set(fx, fy, v.as_slice());
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineParams {
    /// Window side `w`; the correlation window holds the cells at offsets
    /// `-w/2 ..= w/2` along each axis.
    pub window: usize,
    /// Softmax temperature applied to the correlation.
    pub temperature: f64,
}

impl Default for FineParams {
    fn default() -> Self {
        Self { window: 8, temperature: 0.05 }
    }
}

impl FineParams {
    pub fn radius(&self) -> usize {
        self.window / 2
    }
}

/// Mean offset and per-axis variances of a heatmap laid out row-major over
/// cell offsets `-r ..= r`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeatmapMoments {
    pub mean: [f64; 2],
    pub var: [f64; 2],
}

impl HeatmapMoments {
    /// Total variance `Σ p ‖offset − mean‖²`.
    pub fn total_variance(&self) -> f64 {
        self.var[0] + self.var[1]
    }
}

pub fn heatmap_moments(p: &[f64], radius: usize) -> Result<HeatmapMoments> {
    let side = 2 * radius + 1;
    if p.len() != side * side {
        return Err(Error::DimMismatch { expected: side * side, got: p.len() });
    }
    let r = radius as f64;
    let coords = |k: usize| ((k % side) as f64 - r, (k / side) as f64 - r);
    let mut mean = [0.0; 2];
    for (k, pk) in p.iter().enumerate() {
        let (dx, dy) = coords(k);
        mean[0] += pk * dx;
        mean[1] += pk * dy;
    }
    let mut var = [0.0; 2];
    for (k, pk) in p.iter().enumerate() {
        let (dx, dy) = coords(k);
        var[0] += pk * (dx - mean[0]).powi(2);
        var[1] += pk * (dy - mean[1]).powi(2);
    }
    Ok(HeatmapMoments { mean, var })
}

/// In-place softmax of `v / temperature`.
pub fn softmax_in_place(v: &mut [f64], temperature: f64) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in v.iter_mut() {
        *x = ((*x - m) / temperature).exp();
        z += *x;
    }
    for x in v.iter_mut() {
        *x /= z;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FineMatch {
    /// Template position (fine cell centre).
    pub i: Point,
    /// Sub-pixel match in the warped frame.
    pub j_warped: Point,
    /// Expectation offset in fine-cell units.
    pub offset: [f64; 2],
    /// Total heatmap variance, fine-cell units squared.
    pub variance: f64,
}

/// Optional per-window attention over template and image window tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalTransformer {
    pub weights: AttentionBlockWeights,
}

fn window_vectors(grid: &DescriptorGrid, cell: (usize, usize), radius: usize) -> Option<Vec<&[f64]>> {
    let r = radius as i64;
    let mut out = Vec::with_capacity((2 * radius + 1).pow(2));
    for dy in -r..=r {
        for dx in -r..=r {
            out.push(grid.get_signed(cell.0 as i64 + dx, cell.1 as i64 + dy)?);
        }
    }
    Some(out)
}

/// Correlates the template vector at fine cell `cell` with the warped-image
/// window around the same cell and returns the softmax expectation. Returns
/// `BorderSkip` if any window cell lacks a fused vector.
pub fn subpixel_match(
    f_t: &DescriptorGrid,
    f_iw: &DescriptorGrid,
    cell: (usize, usize),
    params: &FineParams,
    local: Option<&LocalTransformer>,
) -> Result<FineMatch> {
    if f_t.dim != f_iw.dim {
        return Err(Error::DimMismatch { expected: f_t.dim, got: f_iw.dim });
    }
    let radius = params.radius();
    let center = f_t.get(cell.0, cell.1).ok_or(Error::BorderSkip)?;
    let window = window_vectors(f_iw, cell, radius).ok_or(Error::BorderSkip)?;
    let mut corr: Vec<f64> = match local {
        None => window.iter().map(|v| dot(center, v)).collect(),
        Some(lt) => {
            let t_win = window_vectors(f_t, cell, radius).ok_or(Error::BorderSkip)?;
            let side = 2 * radius + 1;
            let positions: Vec<[f64; 2]> = (0..side * side).map(|k| [(k % side) as f64, (k / side) as f64]).collect();
            let to_set = |vs: &[&[f64]], s: Side| {
                let m = DMatrix::from_fn(vs.len(), f_t.dim, |r, c| vs[r][c]);
                TokenSet::new(m, positions.clone(), s)
            };
            let (tt, ti) =
                run_transformer(&to_set(&t_win, Side::Template)?, &to_set(&window, Side::Image)?, &lt.weights)?;
            let mid = (side * side) / 2;
            let c = tt.features.row(mid);
            (0..side * side).map(|k| c.dot(&ti.features.row(k))).collect()
        }
    };
    softmax_in_place(&mut corr, params.temperature);
    let mom = heatmap_moments(&corr, radius)?;
    let i = f_t.center(cell.0, cell.1);
    let s = f_t.stride as f64;
    Ok(FineMatch {
        i,
        j_warped: Point::new(i.x + s * mom.mean[0], i.y + s * mom.mean[1]),
        offset: mom.mean,
        variance: mom.total_variance(),
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Maps warped-frame matches back to the source through `warp⁻¹`; every
/// match gets weight 1.
pub fn finalize_matches(fine: &[FineMatch], warp: &Homography) -> Result<WeightedMatchSet> {
    let inv = warp.inverse()?;
    let matches = fine.iter().map(|f| Ok(PointMatch::new(f.i, inv.apply(f.j_warped)?))).collect::<Result<Vec<_>>>()?;
    Ok(WeightedMatchSet::uniform(matches))
}

pub fn estimate_final_homography(ms: &WeightedMatchSet) -> Result<Homography> {
    dlt_weighted(ms)
}

/// One `tx ty ix iy variance` line per match.
pub fn fine_dump(fine: &[FineMatch], final_matches: &WeightedMatchSet) -> String {
    let mut out = String::new();
    for (f, m) in fine.iter().zip(&final_matches.matches) {
        writeln!(out, "{} {} {} {} {}", m.p_t.x, m.p_t.y, m.p_i.x, m.p_i.y, f.variance).unwrap();
    }
    out
}

/// Fine cells inside the given coarse cells whose pixel block contains an
/// edge pixel, sorted row-major.
pub fn template_fine_cells(e: &EdgeImage, coarse_cells: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for &(cx, cy) in coarse_cells {
        for fy in cy * FINE_PER_COARSE..(cy + 1) * FINE_PER_COARSE {
            for fx in cx * FINE_PER_COARSE..(cx + 1) * FINE_PER_COARSE {
                let has_edge = (0..FINE_STRIDE).any(|dy| {
                    (0..FINE_STRIDE).any(|dx| {
                        let (x, y) = (fx * FINE_STRIDE + dx, fy * FINE_STRIDE + dy);
                        x < e.width() && y < e.height() && e.is_edge(x, y)
                    })
                });
                if has_edge {
                    out.push((fx, fy));
                }
            }
        }
    }
    out.sort_by_key(|&(x, y)| (y, x));
    out.dedup();
    out
}

/// Every fine cell of the coarse cells within one coarse step of the given
/// ones, i.e. everything a centred window of radius `<= 4` fine cells can
/// reach.
pub fn window_support(coarse_cells: &[(usize, usize)], coarse_cols: usize, coarse_rows: usize) -> Vec<(usize, usize)> {
    let mut mark = vec![false; coarse_cols * coarse_rows];
    for &(cx, cy) in coarse_cells {
        for ny in cy.saturating_sub(1)..=(cy + 1).min(coarse_rows - 1) {
            for nx in cx.saturating_sub(1)..=(cx + 1).min(coarse_cols - 1) {
                mark[ny * coarse_cols + nx] = true;
            }
        }
    }
    (0..coarse_rows)
        .flat_map(|y| (0..coarse_cols).map(move |x| (x, y)))
        .filter(|&(x, y)| mark[y * coarse_cols + x])
        .collect()
}

/// Fine cells covered by the given coarse cells.
pub fn fine_cells_of(coarse_cells: &[(usize, usize)]) -> Vec<(usize, usize)> {
    coarse_cells
        .iter()
        .flat_map(|&(cx, cy)| {
            (cy * FINE_PER_COARSE..(cy + 1) * FINE_PER_COARSE)
                .flat_map(move |fy| (cx * FINE_PER_COARSE..(cx + 1) * FINE_PER_COARSE).map(move |fx| (fx, fy)))
        })
        .collect()
}
