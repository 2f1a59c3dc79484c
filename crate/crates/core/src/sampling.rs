//! Grid patchification of edge maps and farthest point sampling.

use crate::edge_maps::EdgeImage;
use crate::error::{Error, Result};
use crate::geometry::Point;

pub const COARSE_STRIDE: usize = 8;
pub const FINE_STRIDE: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchCell {
    pub gx: usize,
    pub gy: usize,
    /// `g * stride + stride / 2` along each axis.
    pub center: (usize, usize),
    pub contains_edge: bool,
}

impl PatchCell {
    pub fn center_point(&self) -> Point {
        Point::new(self.center.0 as f64, self.center.1 as f64)
    }
}

/// Row-major cells of a regular grid over an edge image.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub stride: usize,
    pub cols: usize,
    pub rows: usize,
    pub cells: Vec<PatchCell>,
}

impl PatchGrid {
    pub fn cell(&self, gx: usize, gy: usize) -> &PatchCell {
        &self.cells[gy * self.cols + gx]
    }

    pub fn edge_cells(&self) -> impl Iterator<Item = &PatchCell> {
        self.cells.iter().filter(|c| c.contains_edge)
    }
}

/// Pixel centre of grid cell `g` at `stride`.
pub fn cell_center(g: usize, stride: usize) -> usize {
    g * stride + stride / 2
}

pub fn build_patch_grid(e: &EdgeImage, stride: usize) -> Result<PatchGrid> {
    if stride != COARSE_STRIDE && stride != FINE_STRIDE {
        return Err(Error::BadStride(stride));
    }
    let (w, h) = (e.width(), e.height());
    if stride > w.min(h) {
        return Err(Error::BadStride(stride));
    }
    let cols = w.div_ceil(stride);
    let rows = h.div_ceil(stride);
    let mut flags = vec![false; cols * rows];
    for (x, y) in e.edge_pixels() {
        flags[(y / stride) * cols + x / stride] = true;
    }
    let cells = (0..rows)
        .flat_map(|gy| (0..cols).map(move |gx| (gx, gy)))
        .map(|(gx, gy)| PatchCell {
            gx,
            gy,
            center: (cell_center(gx, stride), cell_center(gy, stride)),
            contains_edge: flags[gy * cols + gx],
        })
        .collect();
    Ok(PatchGrid { stride, cols, rows, cells })
}

/// Index of the point closest to the centroid of `points` (lowest index on ties).
pub fn centroid_seed(points: &[Point]) -> Option<usize> {
    if points.is_empty() {
        return None;
    }
    let n = points.len() as f64;
    let c = points.iter().fold(Point::origin(), |acc, p| Point::new(acc.x + p.x / n, acc.y + p.y / n));
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, p) in points.iter().enumerate() {
        let d = (p - c).norm_squared();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    Some(best)
}

/// Greedy max-min selection starting from `seed_index`. Returns every index
/// when `n >= points.len()`; ties go to the lowest index.
pub fn fps(points: &[Point], n: usize, seed_index: usize) -> Vec<usize> {
    if points.is_empty() || n == 0 {
        return Vec::new();
    }
    if n >= points.len() {
        return (0..points.len()).collect();
    }
    let seed = seed_index.min(points.len() - 1);
    let mut chosen = Vec::with_capacity(n);
    let mut min_d = vec![f64::INFINITY; points.len()];
    let mut taken = vec![false; points.len()];
    let mut current = seed;
    loop {
        chosen.push(current);
        taken[current] = true;
        if chosen.len() == n {
            break;
        }
        let anchor = points[current];
        let mut next = None;
        let mut next_d = -1.0;
        for (i, p) in points.iter().enumerate() {
            let d = (p - anchor).norm_squared();
            if d < min_d[i] {
                min_d[i] = d;
            }
            if !taken[i] && min_d[i] > next_d {
                next_d = min_d[i];
                next = Some(i);
            }
        }
        current = next.expect("n < points.len() leaves a candidate");
    }
    chosen
}
