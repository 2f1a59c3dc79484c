//! Coarse and fine matching objectives, evaluated for diagnostics.

use crate::coarse_match::{AssignmentMatrix, MatchingMethod};
use crate::error::{Error, Result};
use crate::geometry::{Homography, Point};
use crate::sampling::{cell_center, COARSE_STRIDE};

pub const LOG_CLAMP: f64 = 1e-12;
pub const VARIANCE_FLOOR: f64 = 1e-6;
pub const DEFAULT_LOSS_WEIGHT: f64 = 10.0;

/// Ground-truth coarse correspondences as `(template row, image column)`
/// indices into an assignment matrix, plus template rows with no
/// counterpart.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruthCoarse {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
}

/// Projects each template cell centre through `h_gt` and snaps it to the
/// stride-8 cell containing it. Template cells whose projection leaves the
/// `(cols, rows)` image grid, or lands on a cell absent from `image_cells`,
/// are unmatched.
pub fn gt_coarse_matches(
    h_gt: &Homography,
    template_cells: &[(usize, usize)],
    image_cells: &[(usize, usize)],
    image_grid: (usize, usize),
) -> GroundTruthCoarse {
    let (cols, rows) = image_grid;
    let mut lookup = vec![None; cols * rows];
    for (j, &(x, y)) in image_cells.iter().enumerate() {
        if x < cols && y < rows && lookup[y * cols + x].is_none() {
            lookup[y * cols + x] = Some(j);
        }
    }
    let s = COARSE_STRIDE as f64;
    let mut gt = GroundTruthCoarse::default();
    for (t, &(gx, gy)) in template_cells.iter().enumerate() {
        let c = Point::new(cell_center(gx, COARSE_STRIDE) as f64, cell_center(gy, COARSE_STRIDE) as f64);
        let target = h_gt.apply(c).ok().and_then(|p| {
            let (fx, fy) = ((p.x / s).floor(), (p.y / s).floor());
            (fx >= 0.0 && fy >= 0.0 && fx < cols as f64 && fy < rows as f64)
                .then(|| lookup[fy as usize * cols + fx as usize])
                .flatten()
        });
        match target {
            Some(j) => gt.pairs.push((t, j)),
            None => gt.unmatched.push(t),
        }
    }
    gt
}

fn nll(v: f64) -> f64 {
    -v.max(LOG_CLAMP).ln()
}

/// Mean `-log c` over the ground-truth pairs; for optimal transport also
/// the mean `-log` row-dustbin confidence over the unmatched rows.
pub fn coarse_loss(c: &AssignmentMatrix, gt: &GroundTruthCoarse) -> Result<f64> {
    if gt.pairs.is_empty() {
        return Err(Error::EmptyGroundTruth);
    }
    let (m, n) = c.c.shape();
    for &(i, j) in &gt.pairs {
        if i >= m || j >= n {
            return Err(Error::DimMismatch { expected: m.max(n), got: i.max(j) });
        }
    }
    let mut loss = gt.pairs.iter().map(|&(i, j)| nll(c.c[(i, j)])).sum::<f64>() / gt.pairs.len() as f64;
    if c.method == MatchingMethod::Ot && !gt.unmatched.is_empty() {
        let dust = c.dustbin_rows.as_ref().ok_or_else(|| Error::InvalidRange("assignment has no dustbin".into()))?;
        let mut acc = 0.0;
        for &i in &gt.unmatched {
            if i >= dust.len() {
                return Err(Error::DimMismatch { expected: dust.len(), got: i });
            }
            acc += nll(dust[i]);
        }
        loss += acc / gt.unmatched.len() as f64;
    }
    Ok(loss)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FineLoss {
    /// Mean of `‖j′ − j′_gt‖ / σ²`.
    pub position: f64,
    /// Mean of `m ‖P^T − P^{I_w}‖`.
    pub appearance: f64,
}

impl FineLoss {
    pub fn total(&self) -> f64 {
        self.position + self.appearance
    }
}

/// Variance-weighted position error plus masked window difference. All
/// slices are aligned per fine match.
pub fn fine_loss(
    j_prime: &[Point],
    variances: &[f64],
    gt: &[Point],
    windows_t: &[Vec<f64>],
    windows_iw: &[Vec<f64>],
    masks: &[f64],
) -> Result<FineLoss> {
    let n = j_prime.len();
    for len in [variances.len(), gt.len(), windows_t.len(), windows_iw.len(), masks.len()] {
        if len != n {
            return Err(Error::LengthMismatch(n, len));
        }
    }
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let position =
        j_prime.iter().zip(gt).zip(variances).map(|((j, g), v)| (j - g).norm() / v.max(VARIANCE_FLOOR)).sum::<f64>()
            / n as f64;
    let mut appearance = 0.0;
    for k in 0..n {
        if windows_t[k].len() != windows_iw[k].len() {
            return Err(Error::LengthMismatch(windows_t[k].len(), windows_iw[k].len()));
        }
        if masks[k] == 0.0 {
            continue;
        }
        let d = windows_t[k].iter().zip(&windows_iw[k]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        appearance += masks[k] * d;
    }
    Ok(FineLoss { position, appearance: appearance / n as f64 })
}

/// `λ L_c + L_f`.
pub fn total_loss(coarse: f64, fine: f64, lambda: f64) -> f64 {
    lambda * coarse + fine
}
