//! Coarse score matrix, Sinkhorn / dual-softmax assignment and mutual
//! nearest-neighbour filtering.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::TokenSet;

pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_DUSTBIN: f64 = 1.0;
pub const DEFAULT_SINKHORN_ITERS: usize = 100;
pub const DEFAULT_THETA_C: f64 = 0.2;

/// Scalings are folded into the log potentials once they leave `e^±ABSORB`.
const ABSORB: f64 = 30.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    /// `⟨ft_i, fi_j⟩ / temperature`
    pub s: DMatrix<f64>,
    pub temperature: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchingMethod {
    /// Optimal transport with a dustbin row and column.
    #[default]
    Ot,
    /// Dual softmax.
    Ds,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentMatrix {
    pub c: DMatrix<f64>,
    pub method: MatchingMethod,
    /// Per-row dustbin confidence, on the same scale as `c` (OT only).
    pub dustbin_rows: Option<DVector<f64>>,
    /// Per-column dustbin confidence (OT only).
    pub dustbin_cols: Option<DVector<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoarsePair {
    /// Template token index.
    pub t: usize,
    /// Image token index.
    pub i: usize,
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CoarseMatchSet {
    pub pairs: Vec<CoarsePair>,
}

impl CoarseMatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.score).collect()
    }

    /// One `tx ty ix iy score` line per pair, using the supplied grid
    /// coordinates of each token.
    pub fn dump(&self, t_grid: &[(usize, usize)], i_grid: &[(usize, usize)]) -> String {
        let mut out = String::new();
        for p in &self.pairs {
            let (tx, ty) = t_grid[p.t];
            let (ix, iy) = i_grid[p.i];
            writeln!(out, "{tx} {ty} {ix} {iy} {}", p.score).unwrap();
        }
        out
    }
}

pub fn score_matrix(ft: &TokenSet, fi: &TokenSet, temperature: f64) -> Result<ScoreMatrix> {
    if ft.is_empty() || fi.is_empty() {
        return Err(Error::EmptyInput);
    }
    if ft.dim() != fi.dim() {
        return Err(Error::DimMismatch { expected: ft.dim(), got: fi.dim() });
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidRange(format!("temperature {temperature} must be positive")));
    }
    let s = (&ft.features * fi.features.transpose()) / temperature;
    Ok(ScoreMatrix { s, temperature })
}

/// Optimal-transport assignment with the default dustbin score.
pub fn sinkhorn(sm: &ScoreMatrix, iters: usize) -> AssignmentMatrix {
    sinkhorn_with_dustbin(sm, DEFAULT_DUSTBIN, iters)
}

/// Entropic optimal transport on the `(M+1)×(N+1)` matrix formed by adding a
/// dustbin row and column of constant score. Real rows and columns carry mass
/// `1/(M+N)`, the dustbin row `N/(M+N)` and the dustbin column `M/(M+N)`.
/// The returned confidences are the plan scaled by `M+N`, so every row sum
/// plus its dustbin entry is 1.
pub fn sinkhorn_with_dustbin(sm: &ScoreMatrix, dustbin: f64, iters: usize) -> AssignmentMatrix {
    let (m, n) = sm.s.shape();
    let z = augment(&sm.s, dustbin);
    let total = (m + n) as f64;
    let mut mu = vec![1.0 / total; m + 1];
    mu[m] = n as f64 / total;
    let mut nu = vec![1.0 / total; n + 1];
    nu[n] = m as f64 / total;

    let plan = scaling_sinkhorn(&z, &mu, &nu, iters.max(1)).unwrap_or_else(|| log_sinkhorn(&z, &mu, &nu, iters.max(1)));
    let scaled = plan * total;
    let c = scaled.view((0, 0), (m, n)).map(|v| v.clamp(0.0, 1.0));
    let dustbin_rows = DVector::from_iterator(m, (0..m).map(|i| scaled[(i, n)].clamp(0.0, 1.0)));
    let dustbin_cols = DVector::from_iterator(n, (0..n).map(|j| scaled[(m, j)].clamp(0.0, 1.0)));
    AssignmentMatrix {
        c,
        method: MatchingMethod::Ot,
        dustbin_rows: Some(dustbin_rows),
        dustbin_cols: Some(dustbin_cols),
    }
}

fn augment(s: &DMatrix<f64>, dustbin: f64) -> DMatrix<f64> {
    let (m, n) = s.shape();
    DMatrix::from_fn(m + 1, n + 1, |i, j| if i < m && j < n { s[(i, j)] } else { dustbin })
}

/// Scaling iterations on a kernel with absorbed log potentials. Returns
/// `None` if the kernel underflows so badly that a scaling becomes
/// non-finite, in which case the caller uses the plain log-domain solver.
fn scaling_sinkhorn(z: &DMatrix<f64>, mu: &[f64], nu: &[f64], iters: usize) -> Option<DMatrix<f64>> {
    let (r, c) = z.shape();
    let mut f: Vec<f64> = (0..r).map(|i| -z.row(i).max()).collect();
    let mut g = vec![0.0; c];
    let kernel = |f: &[f64], g: &[f64]| DMatrix::from_fn(r, c, |i, j| (z[(i, j)] + f[i] + g[j]).exp());
    let mut k = kernel(&f, &g);
    let mut a = vec![1.0; r];
    let mut b = vec![1.0; c];
    for _ in 0..iters {
        let kb = &k * DVector::from_column_slice(&b);
        for i in 0..r {
            a[i] = mu[i] / kb[i];
        }
        let ka = k.tr_mul(&DVector::from_column_slice(&a));
        for j in 0..c {
            b[j] = nu[j] / ka[j];
        }
        if a.iter().chain(&b).any(|v| !v.is_finite() || *v <= 0.0) {
            return None;
        }
        if a.iter().chain(&b).any(|v| v.ln().abs() > ABSORB) {
            for i in 0..r {
                f[i] += a[i].ln();
                a[i] = 1.0;
            }
            for j in 0..c {
                g[j] += b[j].ln();
                b[j] = 1.0;
            }
            k = kernel(&f, &g);
        }
    }
    let plan = DMatrix::from_fn(r, c, |i, j| a[i] * k[(i, j)] * b[j]);
    plan.iter().all(|v| v.is_finite()).then_some(plan)
}

fn log_sum_exp(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + it.map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn log_sinkhorn(z: &DMatrix<f64>, mu: &[f64], nu: &[f64], iters: usize) -> DMatrix<f64> {
    let (r, c) = z.shape();
    let mut u = vec![0.0; r];
    let mut v = vec![0.0; c];
    for _ in 0..iters {
        for i in 0..r {
            u[i] = mu[i].ln() - log_sum_exp((0..c).map(|j| z[(i, j)] + v[j]));
        }
        for j in 0..c {
            v[j] = nu[j].ln() - log_sum_exp((0..r).map(|i| z[(i, j)] + u[i]));
        }
    }
    DMatrix::from_fn(r, c, |i, j| (z[(i, j)] + u[i] + v[j]).exp())
}

/// `c(i,j) = softmax_row(s)(i,j) · softmax_col(s)(i,j)`.
pub fn dual_softmax(sm: &ScoreMatrix) -> AssignmentMatrix {
    let s = &sm.s;
    let (m, n) = s.shape();
    let row_max: Vec<f64> = (0..m).map(|i| s.row(i).max()).collect();
    let col_max: Vec<f64> = (0..n).map(|j| s.column(j).max()).collect();
    let row_z: Vec<f64> = (0..m).map(|i| s.row(i).iter().map(|v| (v - row_max[i]).exp()).sum()).collect();
    let col_z: Vec<f64> = (0..n).map(|j| s.column(j).iter().map(|v| (v - col_max[j]).exp()).sum()).collect();
    let c = DMatrix::from_fn(m, n, |i, j| {
        let v = s[(i, j)];
        ((v - row_max[i]).exp() / row_z[i]) * ((v - col_max[j]).exp() / col_z[j])
    });
    AssignmentMatrix { c, method: MatchingMethod::Ds, dustbin_rows: None, dustbin_cols: None }
}

/// Keeps `(i, j)` when `c(i,j)` is the maximum of its row and its column and
/// at least `theta_c`. Row maxima tie-break to the lowest `j`, column maxima
/// to the lowest `i`.
pub fn mnn_filter(a: &AssignmentMatrix, theta_c: f64) -> CoarseMatchSet {
    let c = &a.c;
    let (m, n) = c.shape();
    if m == 0 || n == 0 {
        return CoarseMatchSet::default();
    }
    let argmax = |it: &mut dyn Iterator<Item = f64>| {
        let mut best = 0;
        let mut bv = f64::NEG_INFINITY;
        for (k, v) in it.enumerate() {
            if v > bv {
                bv = v;
                best = k;
            }
        }
        best
    };
    let col_best: Vec<usize> = (0..n).map(|j| argmax(&mut c.column(j).iter().copied())).collect();
    let pairs = (0..m)
        .filter_map(|i| {
            let j = argmax(&mut c.row(i).iter().copied());
            let v = c[(i, j)];
            (col_best[j] == i && v >= theta_c).then_some(CoarsePair { t: i, i: j, score: v })
        })
        .collect();
    CoarseMatchSet { pairs }
}
