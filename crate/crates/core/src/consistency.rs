//! Distance-and-angle spatial compatibility of coarse matches and the
//! leading-eigenvector inlier score.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point, PointMatch, WeightedMatchSet};

pub const POWER_ITERS: usize = 50;
pub const POWER_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyParams {
    pub sigma_d: f64,
    pub sigma_alpha: f64,
    pub lambda_c: f64,
    pub k_nn: usize,
}

impl Default for ConsistencyParams {
    fn default() -> Self {
        Self { sigma_d: 0.4, sigma_alpha: 1.0, lambda_c: 0.5, k_nn: 3 }
    }
}

impl ConsistencyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_d > 0.0) || !(self.sigma_alpha > 0.0) {
            return Err(Error::InvalidRange("sigma_d and sigma_alpha must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda_c) {
            return Err(Error::InvalidRange(format!("lambda_c {} outside [0, 1]", self.lambda_c)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompatibilityMatrix {
    /// Symmetric, zero diagonal, entries in `[0, 1]`.
    pub e_mat: DMatrix<f64>,
    pub params: ConsistencyParams,
}

/// Non-negative, max-normalized leading eigenvector.
#[derive(Clone, Debug, PartialEq)]
pub struct InlierScores {
    pub e: Vec<f64>,
}

/// Pairwise Euclidean distances divided by their mean over unordered pairs.
pub fn normalize_pairwise_distances(points: &[Point]) -> Result<DMatrix<f64>> {
    let k = points.len();
    if k < 2 {
        return Err(Error::TooFewMatches(k));
    }
    let mut d = DMatrix::from_fn(k, k, |a, b| (points[a] - points[b]).norm());
    let pairs = (k * (k - 1) / 2) as f64;
    let mean = (0..k).flat_map(|a| (a + 1..k).map(move |b| (a, b))).map(|(a, b)| d[(a, b)]).sum::<f64>() / pairs;
    if mean == 0.0 {
        return Err(Error::DegenerateSet);
    }
    d /= mean;
    Ok(d)
}

/// `[1 - (d_t/d_i - 1)² / σ_d²]₊`
pub fn distance_compat(d_t: f64, d_i: f64, sigma_d: f64) -> Result<f64> {
    if d_i == 0.0 {
        return Err(Error::ZeroDenominator);
    }
    let r = d_t / d_i - 1.0;
    Ok((1.0 - r * r / (sigma_d * sigma_d)).max(0.0))
}

/// Order-independent form of [`distance_compat`]: the ratio is taken as
/// larger over smaller.
pub fn distance_compat_sym(d_t: f64, d_i: f64, sigma_d: f64) -> Result<f64> {
    let (hi, lo) = if d_t >= d_i { (d_t, d_i) } else { (d_i, d_t) };
    distance_compat(hi, lo, sigma_d)
}

/// `[1 - (c_t - c_i)² / σ_α²]₊`
pub fn angular_compat(c_t: f64, c_i: f64, sigma_alpha: f64) -> f64 {
    let d = c_t - c_i;
    (1.0 - d * d / (sigma_alpha * sigma_alpha)).max(0.0)
}

/// Unsigned angle between two non-zero vectors, in `[0, π]`.
fn angle_between(u: nalgebra::Vector2<f64>, v: nalgebra::Vector2<f64>) -> f64 {
    let cross = u.x * v.y - u.y * v.x;
    cross.abs().atan2(u.dot(&v))
}

/// Up to `k` nearest neighbours of `points[i]` excluding `i` itself and
/// every index in `exclude`, nearest first, lower index on ties.
pub fn nearest_neighbors(points: &[Point], i: usize, k: usize, exclude: &[usize]) -> Vec<usize> {
    let mut cand: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .filter(|(x, _)| *x != i && !exclude.contains(x))
        .map(|(x, p)| ((p - points[i]).norm_squared(), x))
        .collect();
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    cand.into_iter().take(k).map(|(_, x)| x).collect()
}

/// Largest angle between `p_i - p_x` and `p_i - p_j` over the given
/// neighbours `x`; 0 when there are none.
fn max_angle(points: &[Point], i: usize, j: usize, neighbors: &[usize]) -> Result<f64> {
    let dij = points[i] - points[j];
    if dij.norm_squared() == 0.0 {
        return Err(Error::DegenerateVector);
    }
    let mut best = 0.0f64;
    for &x in neighbors {
        let dix = points[i] - points[x];
        if dix.norm_squared() == 0.0 {
            return Err(Error::DegenerateVector);
        }
        best = best.max(angle_between(dix, dij));
    }
    Ok(best)
}

/// Angle property of the ordered pair `(i, j)`, computed independently on
/// each side from that side's own `k` nearest neighbours of `p_i` (excluding
/// `i` and `j`). Uses `min(k, K-2)` neighbours.
pub fn angle_property(i: usize, j: usize, template: &[Point], image: &[Point], k_nn: usize) -> Result<(f64, f64)> {
    if template.len() != image.len() {
        return Err(Error::LengthMismatch(template.len(), image.len()));
    }
    let k = k_nn.min(template.len().saturating_sub(2));
    let nt = nearest_neighbors(template, i, k, &[j]);
    let ni = nearest_neighbors(image, i, k, &[j]);
    Ok((max_angle(template, i, j, &nt)?, max_angle(image, i, j, &ni)?))
}

/// `E(a,b) = λ α + (1-λ) β` with both terms symmetrized, zero diagonal.
/// With fewer than three matches there are no angle neighbours and only
/// the distance term is used.
pub fn build_compat_matrix(
    template: &[Point],
    image: &[Point],
    params: &ConsistencyParams,
) -> Result<CompatibilityMatrix> {
    if template.len() != image.len() {
        return Err(Error::LengthMismatch(template.len(), image.len()));
    }
    let n = template.len();
    if n < 2 {
        return Err(Error::TooFewMatches(n));
    }
    params.validate()?;
    let dt = normalize_pairwise_distances(template)?;
    let di = normalize_pairwise_distances(image)?;
    let k = params.k_nn.min(n - 2);
    let lambda = if k == 0 { 0.0 } else { params.lambda_c };

    // k+1 nearest per point, so that dropping the partner still leaves k.
    let knn_t: Vec<Vec<usize>> = (0..n).map(|a| nearest_neighbors(template, a, k + 1, &[])).collect();
    let knn_i: Vec<Vec<usize>> = (0..n).map(|a| nearest_neighbors(image, a, k + 1, &[])).collect();
    let pick =
        |list: &[usize], skip: usize| -> Vec<usize> { list.iter().copied().filter(|x| *x != skip).take(k).collect() };
    let alpha_dir = |a: usize, b: usize| -> Result<f64> {
        let ct = max_angle(template, a, b, &pick(&knn_t[a], b))?;
        let ci = max_angle(image, a, b, &pick(&knn_i[a], b))?;
        Ok(angular_compat(ct, ci, params.sigma_alpha))
    };

    let mut e = DMatrix::zeros(n, n);
    for a in 0..n {
        for b in a + 1..n {
            let beta = if di[(a, b)] == 0.0 && dt[(a, b)] == 0.0 {
                1.0
            } else if di[(a, b)] == 0.0 || dt[(a, b)] == 0.0 {
                0.0
            } else {
                distance_compat_sym(dt[(a, b)], di[(a, b)], params.sigma_d)?
            };
            let alpha = if lambda > 0.0 { 0.5 * (alpha_dir(a, b)? + alpha_dir(b, a)?) } else { 0.0 };
            let v = lambda * alpha + (1.0 - lambda) * beta;
            e[(a, b)] = v;
            e[(b, a)] = v;
        }
    }
    Ok(CompatibilityMatrix { e_mat: e, params: *params })
}

/// Power iteration from the uniform vector; absolute values, then scaled so
/// the largest entry is 1. An all-zero matrix yields the uniform vector.
pub fn leading_eigenvector(cm: &CompatibilityMatrix, iters: usize, tol: f64) -> InlierScores {
    let n = cm.e_mat.nrows();
    if n == 0 {
        return InlierScores { e: Vec::new() };
    }
    let mut x = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    for _ in 0..iters {
        let y = &cm.e_mat * &x;
        let norm = y.norm();
        if norm == 0.0 || !norm.is_finite() {
            return InlierScores { e: vec![1.0; n] };
        }
        let y = y / norm;
        let change = (&y - &x).norm();
        x = y;
        if change < tol {
            break;
        }
    }
    let x = x.abs();
    let max = x.max();
    if max == 0.0 {
        return InlierScores { e: vec![1.0; n] };
    }
    InlierScores { e: (x / max).iter().copied().collect() }
}

/// `w_k = s_k · e_k`.
pub fn combine_weights(matches: Vec<PointMatch>, s: Vec<f64>, e: &InlierScores) -> Result<WeightedMatchSet> {
    WeightedMatchSet::new(matches, s, e.e.clone())
}

/// Consistency scores for a match set, or all ones when there are fewer
/// than two matches.
pub fn inlier_scores(matches: &[PointMatch], params: &ConsistencyParams) -> Result<InlierScores> {
    let template: Vec<Point> = matches.iter().map(|m| m.p_t).collect();
    let image: Vec<Point> = matches.iter().map(|m| m.p_i).collect();
    match build_compat_matrix(&template, &image, params) {
        Ok(cm) => Ok(leading_eigenvector(&cm, POWER_ITERS, POWER_TOL)),
        Err(Error::TooFewMatches(_)) => Ok(InlierScores { e: vec![1.0; matches.len()] }),
        Err(err) => Err(err),
    }
}

/// Ranking AUROC of `scores` with `labels[k] = true` marking positives;
/// ties count one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, l)| **l).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, l)| !**l).map(|(s, _)| *s).collect();
    if pos.is_empty() || neg.is_empty() {
        return f64::NAN;
    }
    let mut wins = 0.0;
    for p in &pos {
        for q in &neg {
            wins += if p > q {
                1.0
            } else if p == q {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Homography;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn pts(v: &[(f64, f64)]) -> Vec<Point> {
        v.iter().map(|&(x, y)| Point::new(x, y)).collect()
    }

    #[test]
    fn pairwise_distances() {
        let d = normalize_pairwise_distances(&pts(&[(0.0, 0.0), (3.0, 4.0)])).unwrap();
        assert_eq!(d[(0, 1)], 1.0);
        assert_eq!(d[(1, 0)], 1.0);

        let sq = pts(&[(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]);
        let d = normalize_pairwise_distances(&sq).unwrap();
        let mean = (4.0 + 2.0 * 2f64.sqrt()) / 6.0;
        assert!((d[(0, 1)] - 1.0 / mean).abs() < 1e-12);
        assert!((d[(0, 2)] - 2f64.sqrt() / mean).abs() < 1e-12);

        let scaled: Vec<Point> = sq.iter().map(|p| Point::new(p.x * 7.5, p.y * 7.5)).collect();
        assert!((normalize_pairwise_distances(&scaled).unwrap() - d).amax() < 1e-12);

        assert!(matches!(normalize_pairwise_distances(&pts(&[(1.0, 1.0); 3])), Err(Error::DegenerateSet)));
    }

    #[test]
    fn compat_formulas() {
        assert_eq!(distance_compat(2.0, 2.0, 0.4).unwrap(), 1.0);
        assert!(distance_compat(1.4, 1.0, 0.4).unwrap().abs() < 1e-12);
        assert!((distance_compat(1.2, 1.0, 0.4).unwrap() - 0.75).abs() < 1e-12);
        assert!(matches!(distance_compat(1.0, 0.0, 0.4), Err(Error::ZeroDenominator)));
        assert_eq!(distance_compat_sym(1.0, 1.2, 0.4).unwrap(), distance_compat_sym(1.2, 1.0, 0.4).unwrap());

        assert_eq!(angular_compat(0.7, 0.7, 1.0), 1.0);
        assert_eq!(angular_compat(0.2, 1.2, 1.0), 0.0);
        assert!((angular_compat(1.0, 0.5, 1.0) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn angle_property_cases() {
        // x sits opposite j across i.
        let p = pts(&[(0.0, 0.0), (1.0, 0.0), (-1.0, 0.0), (0.0, 5.0)]);
        let (ct, ci) = angle_property(0, 1, &p, &p, 1).unwrap();
        assert!((ct - PI).abs() < 1e-12 && (ci - PI).abs() < 1e-12);

        // Neighbours collinear with (i, j) on j's side.
        let p = pts(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0), (3.0, 0.0), (4.0, 0.0)]);
        assert_eq!(angle_property(0, 4, &p, &p, 3).unwrap(), (0.0, 0.0));

        let dup = pts(&[(0.0, 0.0), (0.0, 0.0), (1.0, 1.0)]);
        assert!(matches!(angle_property(0, 1, &dup, &dup, 1), Err(Error::DegenerateVector)));
    }

    /// Enumerates every neighbour triple by brute force.
    #[test]
    fn angle_property_grid_oracle() {
        let t = pts(&[(0.0, 0.0), (2.0, 1.0), (-1.0, 2.0), (3.0, -2.0), (1.0, 3.0)]);
        let im = pts(&[(5.0, 5.0), (4.0, 7.0), (8.0, 6.0), (6.0, 2.0), (3.0, 3.0)]);
        for i in 0..5 {
            for j in 0..5 {
                if i == j {
                    continue;
                }
                let (ct, ci) = angle_property(i, j, &t, &im, 3).unwrap();
                for (side, got) in [(&t, ct), (&im, ci)] {
                    let mut others: Vec<usize> = (0..5).filter(|x| *x != i && *x != j).collect();
                    others.sort_by(|a, b| {
                        let da = (side[*a] - side[i]).norm_squared();
                        let db = (side[*b] - side[i]).norm_squared();
                        da.total_cmp(&db).then(a.cmp(b))
                    });
                    let expect = others
                        .iter()
                        .map(|&x| {
                            let u = side[i] - side[x];
                            let v = side[i] - side[j];
                            (u.dot(&v) / (u.norm() * v.norm())).clamp(-1.0, 1.0).acos()
                        })
                        .fold(0.0, f64::max);
                    assert!((got - expect).abs() < 1e-9, "i={i} j={j}");
                }
            }
        }
    }

    fn similarity(rng: &mut ChaCha8Rng) -> Homography {
        Homography::similarity_about(Point::new(320.0, 240.0), rng.random_range(0.7..1.4), rng.random_range(-PI..PI))
            .unwrap()
            .compose(&Homography::translation(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)))
            .unwrap()
    }

    #[test]
    fn compat_matrix_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t: Vec<Point> =
            (0..12).map(|_| Point::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0))).collect();
        let h = similarity(&mut rng);
        let mut im: Vec<Point> = t.iter().map(|p| h.apply(*p).unwrap()).collect();
        im[3] = Point::new(10.0, 400.0);
        let params = ConsistencyParams::default();
        let cm = build_compat_matrix(&t, &im, &params).unwrap();
        let e = &cm.e_mat;
        for a in 0..12 {
            assert_eq!(e[(a, a)], 0.0);
            for b in 0..12 {
                assert_eq!(e[(a, b)], e[(b, a)]);
                assert!((0.0..=1.0).contains(&e[(a, b)]));
            }
        }
        // Element-wise recomputation.
        let dt = normalize_pairwise_distances(&t).unwrap();
        let di = normalize_pairwise_distances(&im).unwrap();
        for a in 0..12 {
            for b in 0..12 {
                if a == b {
                    continue;
                }
                let beta = {
                    let r = dt[(a, b)].max(di[(a, b)]) / dt[(a, b)].min(di[(a, b)]) - 1.0;
                    (1.0 - r * r / 0.16).max(0.0)
                };
                let (ct, ci) = angle_property(a, b, &t, &im, 3).unwrap();
                let (ct2, ci2) = angle_property(b, a, &t, &im, 3).unwrap();
                let alpha = 0.5 * (angular_compat(ct, ci, 1.0) + angular_compat(ct2, ci2, 1.0));
                assert!((e[(a, b)] - (0.5 * alpha + 0.5 * beta)).abs() < 1e-12);
            }
        }
        // Uniform scaling of one side leaves E unchanged.
        let big: Vec<Point> = im.iter().map(|p| Point::new(p.x * 3.0, p.y * 3.0)).collect();
        assert!((build_compat_matrix(&t, &big, &params).unwrap().e_mat - e).amax() < 1e-12);
    }

    #[test]
    fn compat_matrix_small_cases() {
        let t = pts(&[(0.0, 0.0), (10.0, 0.0)]);
        let im = pts(&[(5.0, 5.0), (5.0, 25.0)]);
        let cm = build_compat_matrix(&t, &im, &ConsistencyParams::default()).unwrap();
        assert_eq!(cm.e_mat[(0, 1)], 1.0);
        assert!(matches!(
            build_compat_matrix(&t[..1], &im[..1], &ConsistencyParams::default()),
            Err(Error::TooFewMatches(1))
        ));
    }

    #[test]
    fn power_iteration_cases() {
        let cm = |m: DMatrix<f64>| CompatibilityMatrix { e_mat: m, params: ConsistencyParams::default() };
        let e = leading_eigenvector(&cm(DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 2.0, 0.0])), 50, 1e-8);
        assert_eq!(e.e, vec![1.0, 1.0]);
        assert_eq!(leading_eigenvector(&cm(DMatrix::zeros(4, 4)), 50, 1e-8).e, vec![1.0; 4]);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let a = DMatrix::from_fn(6, 6, |_, _| rng.random_range(0.0..1.0));
            let m = (&a + a.transpose()) * 0.5;
            let got = leading_eigenvector(&cm(m.clone()), 50, 1e-8);
            let eig = m.clone().symmetric_eigen();
            let k = eig.eigenvalues.imax();
            let v = eig.eigenvectors.column(k).abs();
            let g = DVector::from_vec(got.e.clone());
            let cos = g.dot(&v) / (g.norm() * v.norm());
            assert!(cos > 1.0 - 1e-8);
            assert!(got.e.iter().all(|x| (0.0..=1.0).contains(x)));

            let scaled = leading_eigenvector(&cm(m * 4.0), 50, 1e-8);
            for (x, y) in scaled.e.iter().zip(&got.e) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn combine_cases() {
        let m = vec![PointMatch { p_t: Point::new(0.0, 0.0), p_i: Point::new(1.0, 1.0) }; 3];
        let s = vec![0.5, 0.2, 0.9];
        let w = combine_weights(m.clone(), s.clone(), &InlierScores { e: vec![1.0; 3] }).unwrap();
        assert_eq!(w.w, s);
        let e = InlierScores { e: vec![0.1, 1.0, 0.4] };
        let w = combine_weights(m.clone(), vec![1.0; 3], &e).unwrap();
        assert_eq!(w.w, e.e);
        let w = combine_weights(m.clone(), s.clone(), &e).unwrap();
        for k in 0..3 {
            assert_eq!(w.w[k], s[k] * e.e[k]);
        }
        assert!(matches!(combine_weights(m, vec![1.0; 2], &e), Err(Error::LengthMismatch(..))));
    }

    #[test]
    fn auroc_basic() {
        assert_eq!(auroc(&[0.9, 0.8, 0.1], &[true, true, false]), 1.0);
        assert_eq!(auroc(&[0.1, 0.9], &[true, false]), 0.0);
        assert_eq!(auroc(&[0.5, 0.5], &[true, false]), 0.5);
    }
}
