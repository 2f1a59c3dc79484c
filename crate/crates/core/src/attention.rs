//! 2D rotary position encoding, softmax and linear attention, and the
//! interleaved self/cross transformer.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::features::TokenSet;
use crate::weights;

/// Block-diagonal rotation `Θ(n)`: each 4-block rotates its first pair by
/// `x θ_k` and its second pair by `y θ_k`, with `θ_k = 10000^{-4(k-1)/C}`.
#[derive(Clone, Debug, PartialEq)]
pub struct RotaryEncoder {
    dim: usize,
    theta: Vec<f64>,
}

impl RotaryEncoder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 || !dim.is_multiple_of(4) {
            return Err(Error::DimMismatch { expected: dim.next_multiple_of(4).max(4), got: dim });
        }
        let theta = (0..dim / 4).map(|k| 10000f64.powf(-4.0 * k as f64 / dim as f64)).collect();
        Ok(Self { dim, theta })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    /// Rotates `v` in place by `Θ(pos)`.
    pub fn rotate_in_place(&self, pos: [f64; 2], v: &mut [f64]) {
        for (k, th) in self.theta.iter().enumerate() {
            let b = 4 * k;
            let (sx, cx) = (pos[0] * th).sin_cos();
            let (sy, cy) = (pos[1] * th).sin_cos();
            let (a0, a1) = (v[b], v[b + 1]);
            v[b] = cx * a0 - sx * a1;
            v[b + 1] = sx * a0 + cx * a1;
            let (a2, a3) = (v[b + 2], v[b + 3]);
            v[b + 2] = cy * a2 - sy * a3;
            v[b + 3] = sy * a2 + cy * a3;
        }
    }

    fn rotate_rows(&self, m: &mut DMatrix<f64>, positions: &[[f64; 2]]) {
        let mut buf = vec![0.0; self.dim];
        for (r, pos) in positions.iter().enumerate() {
            for c in 0..self.dim {
                buf[c] = m[(r, c)];
            }
            self.rotate_in_place(*pos, &mut buf);
            for c in 0..self.dim {
                m[(r, c)] = buf[c];
            }
        }
    }
}

/// `Θ(pos) f`.
pub fn rope_apply(enc: &RotaryEncoder, pos: [f64; 2], f: &DVector<f64>) -> Result<DVector<f64>> {
    if f.len() != enc.dim {
        return Err(Error::DimMismatch { expected: enc.dim, got: f.len() });
    }
    let mut out = f.clone();
    enc.rotate_in_place(pos, out.as_mut_slice());
    Ok(out)
}

/// `elu(x) + 1`, strictly positive.
pub fn elu_plus_one(x: f64) -> f64 {
    if x >= 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

/// Row-stochastic `Softmax(Q Kᵀ)`.
pub fn attention_matrix(q: &DMatrix<f64>, k: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if k.nrows() == 0 {
        return Err(Error::EmptyKeys);
    }
    if q.ncols() != k.ncols() {
        return Err(Error::DimMismatch { expected: q.ncols(), got: k.ncols() });
    }
    let mut s = q * k.transpose();
    for mut row in s.row_iter_mut() {
        let m = row.max();
        row.apply(|v| *v = (*v - m).exp());
        let z = row.sum();
        row /= z;
    }
    Ok(s)
}

/// Quadratic reference attention `Softmax(Q Kᵀ) V`.
pub fn softmax_attention(q: &DMatrix<f64>, k: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if k.nrows() != v.nrows() {
        return Err(Error::DimMismatch { expected: k.nrows(), got: v.nrows() });
    }
    Ok(attention_matrix(q, k)? * v)
}

/// Kernelized attention with rotary factors on `φ(q)`, `φ(k)` and `v`, and
/// an un-rotated denominator:
///
/// `out_m = Σ_n ⟨Θ(m)φ(q_m), Θ(n)φ(k_n)⟩ Θ(n) v_n / Σ_n ⟨φ(q_m), φ(k_n)⟩`
///
/// evaluated in `O(N C²)` by first summing `Σ_n Θ(n)φ(k_n) (Θ(n) v_n)ᵀ`.
pub fn linear_attention(
    q: &DMatrix<f64>,
    k: &DMatrix<f64>,
    v: &DMatrix<f64>,
    positions_q: &[[f64; 2]],
    positions_kv: &[[f64; 2]],
    enc: &RotaryEncoder,
) -> Result<DMatrix<f64>> {
    let c = enc.dim;
    for m in [q, k, v] {
        if m.ncols() != c {
            return Err(Error::DimMismatch { expected: c, got: m.ncols() });
        }
    }
    if k.nrows() != v.nrows() {
        return Err(Error::DimMismatch { expected: k.nrows(), got: v.nrows() });
    }
    if positions_q.len() != q.nrows() {
        return Err(Error::LengthMismatch(q.nrows(), positions_q.len()));
    }
    if positions_kv.len() != k.nrows() {
        return Err(Error::LengthMismatch(k.nrows(), positions_kv.len()));
    }
    if k.nrows() == 0 {
        return Err(Error::EmptyKeys);
    }
    let phi_q = q.map(elu_plus_one);
    let phi_k = k.map(elu_plus_one);
    let mut rq = phi_q.clone();
    enc.rotate_rows(&mut rq, positions_q);
    let mut rk = phi_k.clone();
    enc.rotate_rows(&mut rk, positions_kv);
    let mut rv = v.clone();
    enc.rotate_rows(&mut rv, positions_kv);

    let kv = rk.transpose() * &rv; // C x C
    let k_sum = phi_k.row_sum(); // 1 x C
    let num = &rq * kv;
    let den = &phi_q * k_sum.transpose(); // N x 1
    let mut out = num;
    for (r, mut row) in out.row_iter_mut().enumerate() {
        row /= den[r];
    }
    Ok(out)
}

/// Projections and feed-forward weights of one attention sublayer.
#[derive(Clone, Debug, PartialEq)]
pub struct SublayerWeights {
    pub wq: DMatrix<f64>,
    pub wk: DMatrix<f64>,
    pub wv: DMatrix<f64>,
    pub wo: DMatrix<f64>,
    /// `2C x C`
    pub ff1: DMatrix<f64>,
    /// `C x 2C`
    pub ff2: DMatrix<f64>,
}

impl SublayerWeights {
    fn zeros(c: usize) -> Self {
        Self {
            wq: DMatrix::zeros(c, c),
            wk: DMatrix::zeros(c, c),
            wv: DMatrix::zeros(c, c),
            wo: DMatrix::zeros(c, c),
            ff1: DMatrix::zeros(2 * c, c),
            ff2: DMatrix::zeros(c, 2 * c),
        }
    }

    fn seeded(c: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut mat = |r: usize, cols: usize| {
            let n = Normal::new(0.0, scale / (cols as f64).sqrt()).expect("finite scale");
            DMatrix::from_fn(r, cols, |_, _| n.sample(rng))
        };
        Self { wq: mat(c, c), wk: mat(c, c), wv: mat(c, c), wo: mat(c, c), ff1: mat(2 * c, c), ff2: mat(c, 2 * c) }
    }

    fn named(&self, prefix: &str) -> Vec<(String, DMatrix<f64>)> {
        [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv), ("wo", &self.wo), ("ff1", &self.ff1), ("ff2", &self.ff2)]
            .into_iter()
            .map(|(n, m)| (format!("{prefix}.{n}"), m.clone()))
            .collect()
    }

    fn from_named(entries: &[(String, DMatrix<f64>)], prefix: &str, c: usize) -> Result<Self> {
        let t = |n: &str, r, cc| weights::take(entries, &format!("{prefix}.{n}"), r, cc);
        Ok(Self {
            wq: t("wq", c, c)?,
            wk: t("wk", c, c)?,
            wv: t("wv", c, c)?,
            wo: t("wo", c, c)?,
            ff1: t("ff1", 2 * c, c)?,
            ff2: t("ff2", c, 2 * c)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub self_attn: SublayerWeights,
    pub cross_attn: SublayerWeights,
}

/// Weights of an `N`-layer self/cross transformer of width `dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlockWeights {
    pub dim: usize,
    pub layers: Vec<EncoderLayer>,
}

impl AttentionBlockWeights {
    pub fn zeros(dim: usize, n_layers: usize) -> Self {
        let layers = (0..n_layers)
            .map(|_| EncoderLayer { self_attn: SublayerWeights::zeros(dim), cross_attn: SublayerWeights::zeros(dim) })
            .collect();
        Self { dim, layers }
    }

    /// Gaussian init with standard deviation `scale / sqrt(fan_in)`.
    pub fn seeded(dim: usize, n_layers: usize, seed: u64, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = (0..n_layers)
            .map(|_| {
                let self_attn = SublayerWeights::seeded(dim, scale, &mut rng);
                let cross_attn = SublayerWeights::seeded(dim, scale, &mut rng);
                EncoderLayer { self_attn, cross_attn }
            })
            .collect();
        Self { dim, layers }
    }

    pub fn to_named(&self) -> Vec<(String, DMatrix<f64>)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(layer.self_attn.named(&format!("layer{l}.self")));
            out.extend(layer.cross_attn.named(&format!("layer{l}.cross")));
        }
        out
    }

    pub fn from_named(entries: &[(String, DMatrix<f64>)], dim: usize, n_layers: usize) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|l| {
                Ok(EncoderLayer {
                    self_attn: SublayerWeights::from_named(entries, &format!("layer{l}.self"), dim)?,
                    cross_attn: SublayerWeights::from_named(entries, &format!("layer{l}.cross"), dim)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { dim, layers })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        weights::save(path, &self.to_named())
    }

    pub fn load(path: &Path, dim: usize, n_layers: usize) -> Result<Self> {
        Self::from_named(&weights::load(path)?, dim, n_layers)
    }
}

/// Attention message from `src` into `x`, then residual add and feed-forward.
fn sublayer(
    x: &DMatrix<f64>,
    x_pos: &[[f64; 2]],
    src: &DMatrix<f64>,
    src_pos: &[[f64; 2]],
    w: &SublayerWeights,
    enc: &RotaryEncoder,
) -> Result<DMatrix<f64>> {
    let q = x * w.wq.transpose();
    let k = src * w.wk.transpose();
    let v = src * w.wv.transpose();
    let msg = linear_attention(&q, &k, &v, x_pos, src_pos, enc)? * w.wo.transpose();
    let x1 = x + msg;
    let hidden = (&x1 * w.ff1.transpose()).map(|v| v.max(0.0));
    Ok(&x1 + hidden * w.ff2.transpose())
}

/// Interleaved self- and cross-attention over the two token sets. Both
/// cross updates read the pre-update features, so swapping the inputs swaps
/// the outputs. Outputs are re-normalized to unit rows.
pub fn run_transformer(t: &TokenSet, i: &TokenSet, w: &AttentionBlockWeights) -> Result<(TokenSet, TokenSet)> {
    if t.is_empty() || i.is_empty() {
        return Err(Error::EmptyKeys);
    }
    for set in [t, i] {
        if set.dim() != w.dim {
            return Err(Error::DimMismatch { expected: w.dim, got: set.dim() });
        }
    }
    let enc = RotaryEncoder::new(w.dim)?;
    let mut ft = t.features.clone();
    let mut fi = i.features.clone();
    for layer in &w.layers {
        ft = sublayer(&ft, &t.positions, &ft, &t.positions, &layer.self_attn, &enc)?;
        fi = sublayer(&fi, &i.positions, &fi, &i.positions, &layer.self_attn, &enc)?;
        let nt = sublayer(&ft, &t.positions, &fi, &i.positions, &layer.cross_attn, &enc)?;
        let ni = sublayer(&fi, &i.positions, &ft, &t.positions, &layer.cross_attn, &enc)?;
        ft = nt;
        fi = ni;
    }
    let mut out_t = TokenSet::new(ft, t.positions.clone(), t.side)?;
    let mut out_i = TokenSet::new(fi, i.positions.clone(), i.side)?;
    out_t.normalize_rows();
    out_i.normalize_rows();
    Ok((out_t, out_i))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Side;
    use rand::Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn rand_pos(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 2]> {
        (0..n).map(|_| [rng.random_range(0..80) as f64, rng.random_range(0..60) as f64]).collect()
    }

    fn unit_tokens(rng: &mut ChaCha8Rng, n: usize, c: usize, side: Side) -> TokenSet {
        let mut t = TokenSet::new(rand_mat(rng, n, c), rand_pos(rng, n), side).unwrap();
        t.normalize_rows();
        t
    }

    /// Direct double sum of the linear-attention formula.
    fn brute_linear(
        q: &DMatrix<f64>,
        k: &DMatrix<f64>,
        v: &DMatrix<f64>,
        pq: &[[f64; 2]],
        pk: &[[f64; 2]],
        enc: &RotaryEncoder,
    ) -> DMatrix<f64> {
        let c = enc.dim();
        let mut out = DMatrix::zeros(q.nrows(), c);
        for m in 0..q.nrows() {
            let fq = DVector::from_iterator(c, q.row(m).iter().map(|x| elu_plus_one(*x)));
            let rq = rope_apply(enc, pq[m], &fq).unwrap();
            let mut num = DVector::zeros(c);
            let mut den = 0.0;
            for n in 0..k.nrows() {
                let fk = DVector::from_iterator(c, k.row(n).iter().map(|x| elu_plus_one(*x)));
                let rk = rope_apply(enc, pk[n], &fk).unwrap();
                let rv = rope_apply(enc, pk[n], &v.row(n).transpose()).unwrap();
                num += rv * rq.dot(&rk);
                den += fq.dot(&fk);
            }
            out.row_mut(m).copy_from(&(num / den).transpose());
        }
        out
    }

    #[test]
    fn theta_schedule() {
        let enc = RotaryEncoder::new(64).unwrap();
        assert_eq!(enc.theta().len(), 16);
        assert_eq!(enc.theta()[0], 1.0);
        assert!(enc.theta().windows(2).all(|w| w[1] < w[0]));
        assert!((enc.theta()[1] - 10000f64.powf(-4.0 / 64.0)).abs() < 1e-15);
        assert!(RotaryEncoder::new(30).is_err());
    }

    #[test]
    fn rope_zero_and_norm() {
        let enc = RotaryEncoder::new(16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = DVector::from_fn(16, |_, _| rng.random_range(-1.0..1.0));
        assert_eq!(rope_apply(&enc, [0.0, 0.0], &f).unwrap(), f);
        for _ in 0..100 {
            let p = [rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0)];
            let out = rope_apply(&enc, p, &f).unwrap();
            assert!((out.norm() - f.norm()).abs() < 1e-12);
        }
        assert!(matches!(rope_apply(&enc, [1.0, 1.0], &DVector::zeros(8)), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn rope_relative_identity() {
        let enc = RotaryEncoder::new(64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let m = [rng.random_range(-60.0..60.0), rng.random_range(-60.0..60.0)];
            let n = [rng.random_range(-60.0..60.0), rng.random_range(-60.0..60.0)];
            let f = DVector::from_fn(64, |_, _| rng.random_range(-1.0..1.0));
            let g = DVector::from_fn(64, |_, _| rng.random_range(-1.0..1.0));
            let lhs = rope_apply(&enc, m, &f).unwrap().dot(&rope_apply(&enc, n, &g).unwrap());
            let rhs = f.dot(&rope_apply(&enc, [n[0] - m[0], n[1] - m[1]], &g).unwrap());
            assert!((lhs - rhs).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_attention_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = rand_mat(&mut rng, 3, 4);
        let k = rand_mat(&mut rng, 1, 4);
        let v = rand_mat(&mut rng, 1, 6);
        let out = softmax_attention(&q, &k, &v).unwrap();
        for r in 0..3 {
            assert!((out.row(r) - v.row(0)).norm() < 1e-15);
        }

        let q = DMatrix::zeros(2, 4);
        let k = rand_mat(&mut rng, 5, 4);
        let v = rand_mat(&mut rng, 5, 3);
        let out = softmax_attention(&q, &k, &v).unwrap();
        let mean = v.row_mean();
        assert!((out.row(0) - &mean).norm() < 1e-12);

        let q = rand_mat(&mut rng, 5, 8);
        let k = rand_mat(&mut rng, 7, 8);
        let v = rand_mat(&mut rng, 7, 8);
        let out = softmax_attention(&q, &k, &v).unwrap();
        for m in 0..5 {
            let scores: Vec<f64> = (0..7).map(|n| q.row(m).dot(&k.row(n))).collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            let mut expect = [0.0; 8];
            for n in 0..7 {
                for c in 0..8 {
                    expect[c] += scores[n].exp() / z * v[(n, c)];
                }
            }
            for c in 0..8 {
                assert!((out[(m, c)] - expect[c]).abs() < 1e-10);
            }
        }
        let a = attention_matrix(&q, &k).unwrap();
        for r in 0..5 {
            assert!((a.row(r).sum() - 1.0).abs() < 1e-12);
        }
        assert!(matches!(softmax_attention(&q, &DMatrix::zeros(0, 8), &DMatrix::zeros(0, 8)), Err(Error::EmptyKeys)));
    }

    #[test]
    fn linear_attention_single_key_same_position() {
        let enc = RotaryEncoder::new(8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = rand_mat(&mut rng, 1, 8);
        let k = rand_mat(&mut rng, 1, 8);
        let v = rand_mat(&mut rng, 1, 8);
        let pos = [[3.0, 7.0]];
        let out = linear_attention(&q, &k, &v, &pos, &pos, &enc).unwrap();
        let expect = rope_apply(&enc, pos[0], &v.row(0).transpose()).unwrap();
        assert!((out.row(0).transpose() - expect).norm() < 1e-12);
    }

    #[test]
    fn linear_attention_zero_positions_is_plain_kernel_attention() {
        let enc = RotaryEncoder::new(8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (q, k, v) = (rand_mat(&mut rng, 4, 8), rand_mat(&mut rng, 6, 8), rand_mat(&mut rng, 6, 8));
        let out = linear_attention(&q, &k, &v, &[[0.0; 2]; 4], &[[0.0; 2]; 6], &enc).unwrap();
        let fq = q.map(elu_plus_one);
        let fk = k.map(elu_plus_one);
        let sim = &fq * fk.transpose();
        for m in 0..4 {
            let z = sim.row(m).sum();
            let expect = sim.row(m) * &v / z;
            assert!((out.row(m) - expect).norm() < 1e-12);
        }
    }

    #[test]
    fn linear_attention_matches_double_sum() {
        let enc = RotaryEncoder::new(16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let (q, k, v) = (rand_mat(&mut rng, 16, 16), rand_mat(&mut rng, 16, 16), rand_mat(&mut rng, 16, 16));
            let (pq, pk) = (rand_pos(&mut rng, 16), rand_pos(&mut rng, 16));
            let fast = linear_attention(&q, &k, &v, &pq, &pk, &enc).unwrap();
            let slow = brute_linear(&q, &k, &v, &pq, &pk, &enc);
            assert!((fast - slow).amax() < 1e-9);
        }
    }

    #[test]
    fn numerator_terms_translation_invariant() {
        let enc = RotaryEncoder::new(32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let fq = DVector::from_fn(32, |_, _| elu_plus_one(rng.random_range(-2.0..2.0)));
            let fk = DVector::from_fn(32, |_, _| elu_plus_one(rng.random_range(-2.0..2.0)));
            let m = [rng.random_range(0.0..80.0), rng.random_range(0.0..60.0)];
            let n = [rng.random_range(0.0..80.0), rng.random_range(0.0..60.0)];
            let d = [rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0)];
            let a = rope_apply(&enc, m, &fq).unwrap().dot(&rope_apply(&enc, n, &fk).unwrap());
            let b = rope_apply(&enc, [m[0] + d[0], m[1] + d[1]], &fq)
                .unwrap()
                .dot(&rope_apply(&enc, [n[0] + d[0], n[1] + d[1]], &fk).unwrap());
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn transformer_zero_weights_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = unit_tokens(&mut rng, 3, 16, Side::Template);
        let i = unit_tokens(&mut rng, 4, 16, Side::Image);
        let (ot, oi) = run_transformer(&t, &i, &AttentionBlockWeights::zeros(16, 4)).unwrap();
        assert!((ot.features - &t.features).amax() < 1e-15);
        assert!((oi.features - &i.features).amax() < 1e-15);
        assert_eq!(ot.positions, t.positions);
    }

    #[test]
    fn transformer_swap_symmetry_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let t = unit_tokens(&mut rng, 3, 16, Side::Template);
        let i = unit_tokens(&mut rng, 4, 16, Side::Image);
        let w = AttentionBlockWeights::seeded(16, 2, 99, 0.5);
        let (a_t, a_i) = run_transformer(&t, &i, &w).unwrap();
        let (b_i, b_t) = run_transformer(&i, &t, &w).unwrap();
        assert!((&a_t.features - &b_t.features).amax() < 1e-12);
        assert!((&a_i.features - &b_i.features).amax() < 1e-12);
        let (c_t, c_i) = run_transformer(&t, &i, &AttentionBlockWeights::seeded(16, 2, 99, 0.5)).unwrap();
        assert_eq!(c_t.features, a_t.features);
        assert_eq!(c_i.features, a_i.features);
        for r in 0..3 {
            assert!((a_t.features.row(r).norm() - 1.0).abs() < 1e-12);
        }
        assert!((&a_t.features - &t.features).amax() > 1e-6);
    }

    #[test]
    fn weights_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.bin");
        let w = AttentionBlockWeights::seeded(8, 2, 3, 1.0);
        w.save(&p).unwrap();
        assert_eq!(AttentionBlockWeights::load(&p, 8, 2).unwrap(), w);
        assert!(AttentionBlockWeights::load(&p, 8, 3).is_err());
    }
}
