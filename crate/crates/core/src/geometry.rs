//! Planar homographies: weighted DLT estimation, inversion, reprojection
//! error, the cumulative-error AUC metric and ground-truth sampling.

use std::fmt;

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = nalgebra::Point2<f64>;

const DET_EPS: f64 = 1e-12;
const W_EPS: f64 = 1e-12;
const RANK_TOL: f64 = 1e-10;

/// A 3x3 projective transform kept in canonical form: unit Frobenius norm
/// and non-negative `m[2][2]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
}

impl Homography {
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularMatrix);
        }
        let norm = m.norm();
        if norm == 0.0 {
            return Err(Error::SingularMatrix);
        }
        // Already-canonical input keeps its bits, so re-parsing is lossless.
        let mut m = if (norm - 1.0).abs() <= 1e-12 { m } else { m / norm };
        // sign: m22 >= 0, or the first non-zero entry positive when m22 == 0
        let pivot = if m[(2, 2)] != 0.0 {
            m[(2, 2)]
        } else {
            (0..3).flat_map(|r| (0..3).map(move |c| (r, c))).map(|(r, c)| m[(r, c)]).find(|v| *v != 0.0).unwrap_or(1.0)
        };
        if pivot < 0.0 {
            m = -m;
        }
        if m.determinant().abs() <= DET_EPS {
            return Err(Error::SingularMatrix);
        }
        Ok(Self { m })
    }

    pub fn from_row_slice(v: &[f64; 9]) -> Result<Self> {
        Self::new(Matrix3::from_row_slice(v))
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity()).expect("identity is invertible")
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self::new(Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0)).expect("translation is invertible")
    }

    /// Similarity about `center`: scale, then rotate by `angle` radians.
    pub fn similarity_about(center: Point, scale: f64, angle: f64) -> Result<Self> {
        let (s, c) = angle.sin_cos();
        let a = Matrix3::new(scale * c, -scale * s, 0.0, scale * s, scale * c, 0.0, 0.0, 0.0, 1.0);
        let to = Matrix3::new(1.0, 0.0, center.x, 0.0, 1.0, center.y, 0.0, 0.0, 1.0);
        let from = Matrix3::new(1.0, 0.0, -center.x, 0.0, 1.0, -center.y, 0.0, 0.0, 1.0);
        Self::new(to * a * from)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn to_row_array(&self) -> [f64; 9] {
        let m = &self.m;
        [m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 0)], m[(1, 1)], m[(1, 2)], m[(2, 0)], m[(2, 1)], m[(2, 2)]]
    }

    pub fn apply(&self, p: Point) -> Result<Point> {
        apply_homography(self, p)
    }

    pub fn inverse(&self) -> Result<Self> {
        invert(self)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Homography) -> Result<Self> {
        Self::new(self.m * other.m)
    }

    /// Frobenius distance between canonical forms.
    pub fn distance(&self, other: &Homography) -> f64 {
        (self.m - other.m).norm()
    }

    /// Parses the single-line text form written by `Display`.
    pub fn parse(text: &str) -> Result<Self> {
        let vals: Vec<f64> = text
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("homography text: {e}")))?;
        let arr: [f64; 9] = vals
            .try_into()
            .map_err(|v: Vec<f64>| Error::Config(format!("homography needs 9 numbers, got {}", v.len())))?;
        Self::from_row_slice(&arr)
    }
}

impl fmt::Display for Homography {
    /// Nine row-major numbers on one line.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.to_row_array().iter().map(|v| format!("{v}")).collect();
        write!(f, "{}", parts.join(" "))
    }
}

impl Serialize for Homography {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_row_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Homography {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let arr = <[f64; 9]>::deserialize(d)?;
        Homography::from_row_slice(&arr).map_err(serde::de::Error::custom)
    }
}

/// Template point and its image counterpart.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointMatch {
    pub p_t: Point,
    pub p_i: Point,
}

impl PointMatch {
    pub fn new(p_t: Point, p_i: Point) -> Self {
        Self { p_t, p_i }
    }
}

/// Matches with feature score `s`, consistency score `e` and the combined
/// weight `w = s * e`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightedMatchSet {
    pub matches: Vec<PointMatch>,
    pub s: Vec<f64>,
    pub e: Vec<f64>,
    pub w: Vec<f64>,
}

impl WeightedMatchSet {
    pub fn new(matches: Vec<PointMatch>, s: Vec<f64>, e: Vec<f64>) -> Result<Self> {
        if s.len() != matches.len() {
            return Err(Error::LengthMismatch(matches.len(), s.len()));
        }
        if e.len() != matches.len() {
            return Err(Error::LengthMismatch(matches.len(), e.len()));
        }
        let w = s.iter().zip(&e).map(|(a, b)| a * b).collect();
        Ok(Self { matches, s, e, w })
    }

    /// Every match weighted 1.
    pub fn uniform(matches: Vec<PointMatch>) -> Self {
        let n = matches.len();
        Self { matches, s: vec![1.0; n], e: vec![1.0; n], w: vec![1.0; n] }
    }

    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }
}

pub fn apply_homography(h: &Homography, p: Point) -> Result<Point> {
    let v = h.m * Vector3::new(p.x, p.y, 1.0);
    if v.z.abs() <= W_EPS {
        return Err(Error::DegeneratePoint);
    }
    Ok(Point::new(v.x / v.z, v.y / v.z))
}

pub fn invert(h: &Homography) -> Result<Homography> {
    let inv = h.m.try_inverse().ok_or(Error::SingularMatrix)?;
    Homography::new(inv)
}

/// Similarity transform taking points to zero centroid and mean distance √2.
fn hartley_transform(pts: &[Point]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let (cx, cy) = pts.iter().fold((0.0, 0.0), |(x, y), p| (x + p.x, y + p.y));
    let (cx, cy) = (cx / n, cy / n);
    let mean = pts.iter().map(|p| ((p.x - cx).powi(2) + (p.y - cy).powi(2)).sqrt()).sum::<f64>() / n;
    let s = if mean > 0.0 { std::f64::consts::SQRT_2 / mean } else { 1.0 };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

fn transform(t: &Matrix3<f64>, p: Point) -> Point {
    Point::new(t[(0, 0)] * p.x + t[(0, 2)], t[(1, 1)] * p.y + t[(1, 2)])
}

/// Weighted DLT over explicit per-match weights. Matches with non-positive
/// or non-finite weight are ignored.
pub fn weighted_dlt(matches: &[PointMatch], weights: &[f64]) -> Result<Homography> {
    if matches.len() != weights.len() {
        return Err(Error::LengthMismatch(matches.len(), weights.len()));
    }
    let used: Vec<(PointMatch, f64)> = matches
        .iter()
        .zip(weights)
        .filter(|(m, w)| **w > 0.0 && w.is_finite() && m.p_t.iter().chain(m.p_i.iter()).all(|c| c.is_finite()))
        .map(|(m, w)| (*m, *w))
        .collect();
    if used.len() < 4 {
        return Err(Error::InsufficientMatches(used.len()));
    }
    let t_pts: Vec<Point> = used.iter().map(|(m, _)| m.p_t).collect();
    let i_pts: Vec<Point> = used.iter().map(|(m, _)| m.p_i).collect();
    let tt = hartley_transform(&t_pts);
    let ti = hartley_transform(&i_pts);

    // Pad to at least 9 rows so the SVD exposes a full 9x9 right basis.
    let rows = (2 * used.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (k, (m, w)) in used.iter().enumerate() {
        let sw = w.sqrt();
        let p = transform(&tt, m.p_t);
        let q = transform(&ti, m.p_i);
        let (x, y, u, v) = (p.x, p.y, q.x, q.y);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for c in 0..9 {
            a[(2 * k, c)] = sw * r0[c];
            a[(2 * k + 1, c)] = sw * r1[c];
        }
    }

    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(Error::RankDeficient)?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let sv = |k: usize| svd.singular_values[order[k]];
    if sv(0) <= 0.0 || sv(7) / sv(0) < RANK_TOL {
        return Err(Error::RankDeficient);
    }
    let h = v_t.row(order[8]);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let ti_inv = ti.try_inverse().ok_or(Error::SingularMatrix)?;
    Homography::new(ti_inv * hn * tt)
}

/// Weighted least-squares DLT over `ms.w`.
pub fn dlt_weighted(ms: &WeightedMatchSet) -> Result<Homography> {
    weighted_dlt(&ms.matches, &ms.w)
}

/// Per-point distance between `h_est(p)` and `h_gt(p)`.
pub fn reprojection_errors(h_est: &Homography, h_gt: &Homography, pts: &[Point]) -> Result<Vec<f64>> {
    if pts.is_empty() {
        return Err(Error::EmptyInput);
    }
    pts.iter()
        .map(|p| {
            let a = h_est.apply(*p)?;
            let b = h_gt.apply(*p)?;
            Ok((a - b).norm())
        })
        .collect()
}

/// Area under the cumulative error curve up to `threshold`, as a
/// percentage: the mean of `max(0, 1 - err / threshold)`. Infinite errors
/// score 0.
pub fn auc(per_sample_errors: &[f64], threshold: f64) -> Result<f64> {
    if per_sample_errors.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(threshold > 0.0) || !threshold.is_finite() {
        return Err(Error::InvalidRange(format!("auc threshold {threshold}")));
    }
    let total: f64 =
        per_sample_errors.iter().map(|e| if e.is_nan() { 0.0 } else { (1.0 - e / threshold).max(0.0) }).sum();
    Ok(100.0 * total / per_sample_errors.len() as f64)
}

/// Ranges for ground-truth sampling: a similarity about `center`
/// followed by an independent displacement of each frame corner.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationConfig {
    pub width: f64,
    pub height: f64,
    pub center: [f64; 2],
    pub scale_min: f64,
    pub scale_max: f64,
    /// Maximum absolute rotation in degrees.
    pub rotation_deg: f64,
    /// Per-corner offsets are uniform in `[-corner_px, corner_px]`.
    pub corner_px: f64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            width: 640.0,
            height: 480.0,
            center: [320.0, 240.0],
            scale_min: 0.8,
            scale_max: 1.2,
            rotation_deg: 15.0,
            corner_px: 32.0,
        }
    }
}

impl PerturbationConfig {
    /// All ranges collapsed: the sampled homography is the identity.
    pub fn none(width: f64, height: f64) -> Self {
        Self {
            width,
            height,
            center: [width / 2.0, height / 2.0],
            scale_min: 1.0,
            scale_max: 1.0,
            rotation_deg: 0.0,
            corner_px: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidRange(m.to_string()));
        if !(self.scale_min > 0.0) || !(self.scale_max >= self.scale_min) || !self.scale_max.is_finite() {
            return bad("scale range must lie in (0, inf) with min <= max");
        }
        if !(self.rotation_deg >= 0.0) || !self.rotation_deg.is_finite() {
            return bad("rotation bound must be >= 0");
        }
        if !(self.corner_px >= 0.0) || !self.corner_px.is_finite() {
            return bad("corner perturbation bound must be >= 0");
        }
        if !(self.width > 0.0 && self.height > 0.0) {
            return bad("frame size must be positive");
        }
        Ok(())
    }

    fn corners(&self) -> [Point; 4] {
        [
            Point::new(0.0, 0.0),
            Point::new(self.width, 0.0),
            Point::new(self.width, self.height),
            Point::new(0.0, self.height),
        ]
    }
}

/// Exact homography taking the frame corners to the corners plus `offsets`.
pub fn corner_displacement(cfg: &PerturbationConfig, offsets: &[[f64; 2]; 4]) -> Result<Homography> {
    let matches: Vec<PointMatch> = cfg
        .corners()
        .iter()
        .zip(offsets)
        .map(|(c, d)| PointMatch::new(*c, Point::new(c.x + d[0], c.y + d[1])))
        .collect();
    weighted_dlt(&matches, &[1.0; 4])
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Deterministic ground-truth homography for `seed`.
pub fn sample_gt_homography(seed: u64, cfg: &PerturbationConfig) -> Result<Homography> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = uniform(&mut rng, cfg.scale_min, cfg.scale_max);
    let angle = uniform(&mut rng, -cfg.rotation_deg, cfg.rotation_deg).to_radians();
    let mut offsets = [[0.0; 2]; 4];
    for o in offsets.iter_mut() {
        o[0] = uniform(&mut rng, -cfg.corner_px, cfg.corner_px);
        o[1] = uniform(&mut rng, -cfg.corner_px, cfg.corner_px);
    }
    let sim = Homography::similarity_about(Point::new(cfg.center[0], cfg.center[1]), scale, angle)?;
    let corners = corner_displacement(cfg, &offsets)?;
    corners.compose(&sim)
}
