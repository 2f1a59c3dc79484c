//! Quick oracle checks runnable from the command line.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{elu_plus_one, linear_attention, rope_apply, RotaryEncoder};
use crate::coarse_match::{sinkhorn, AssignmentMatrix, MatchingMethod, ScoreMatrix};
use crate::geometry::{weighted_dlt, Homography, Point, PointMatch};
use crate::losses::{coarse_loss, GroundTruthCoarse};
use crate::refine::heatmap_moments;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, worst: f64, tol: f64) -> Check {
    Check { name, passed: worst < tol, detail: format!("max deviation {worst:.3e} (tolerance {tol:.0e})") }
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
}

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn rope_relative(rng: &mut ChaCha8Rng) -> Check {
    let enc = RotaryEncoder::new(64).expect("64 is a multiple of 4");
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let m = [rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)];
        let n = [rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)];
        let (f, g) = (rand_vec(rng, 64), rand_vec(rng, 64));
        let lhs = rope_apply(&enc, m, &f).unwrap().dot(&rope_apply(&enc, n, &g).unwrap());
        let rhs = f.dot(&rope_apply(&enc, [n[0] - m[0], n[1] - m[1]], &g).unwrap());
        worst = worst.max((lhs - rhs).abs());
    }
    check("rope relative position", worst, 1e-9)
}

fn linear_attention_oracle(rng: &mut ChaCha8Rng) -> Check {
    let c = 16;
    let enc = RotaryEncoder::new(c).expect("16 is a multiple of 4");
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (nq, nk) = (rng.random_range(1..24), rng.random_range(1..24));
        let (q, k, v) = (rand_mat(rng, nq, c), rand_mat(rng, nk, c), rand_mat(rng, nk, c));
        let pq: Vec<[f64; 2]> = (0..nq).map(|_| [rng.random_range(0.0..60.0), rng.random_range(0.0..80.0)]).collect();
        let pk: Vec<[f64; 2]> = (0..nk).map(|_| [rng.random_range(0.0..60.0), rng.random_range(0.0..80.0)]).collect();
        let fast = linear_attention(&q, &k, &v, &pq, &pk, &enc).unwrap();
        for a in 0..nq {
            let fq = DVector::from_iterator(c, q.row(a).iter().map(|x| elu_plus_one(*x)));
            let rq = rope_apply(&enc, pq[a], &fq).unwrap();
            let mut num = DVector::zeros(c);
            let mut den = 0.0;
            for b in 0..nk {
                let fk = DVector::from_iterator(c, k.row(b).iter().map(|x| elu_plus_one(*x)));
                let rk = rope_apply(&enc, pk[b], &fk).unwrap();
                let rv = rope_apply(&enc, pk[b], &v.row(b).transpose()).unwrap();
                num += rv * rq.dot(&rk);
                den += fq.dot(&fk);
            }
            let brute = num / den;
            worst = worst.max((brute - fast.row(a).transpose()).amax());
        }
    }
    check("linear attention vs double sum", worst, 1e-9)
}

fn sinkhorn_marginals(rng: &mut ChaCha8Rng) -> Check {
    let (m, n) = (32, 48);
    let s = rand_mat(rng, m, n);
    let a = sinkhorn(&ScoreMatrix { s, temperature: 1.0 }, 100);
    let dr = a.dustbin_rows.expect("optimal transport keeps dustbins");
    let dc = a.dustbin_cols.expect("optimal transport keeps dustbins");
    let mut worst = 0.0f64;
    for i in 0..m {
        worst = worst.max((a.c.row(i).sum() + dr[i] - 1.0).abs());
    }
    for j in 0..n {
        worst = worst.max((a.c.column(j).sum() + dc[j] - 1.0).abs());
    }
    check("sinkhorn marginals", worst, 1e-6)
}

fn dlt_recovery(rng: &mut ChaCha8Rng) -> Check {
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let h = Homography::from_row_slice(&[
            1.0 + rng.random_range(-0.2..0.2),
            rng.random_range(-0.2..0.2),
            rng.random_range(-40.0..40.0),
            rng.random_range(-0.2..0.2),
            1.0 + rng.random_range(-0.2..0.2),
            rng.random_range(-40.0..40.0),
            rng.random_range(-3e-4..3e-4),
            rng.random_range(-3e-4..3e-4),
            1.0,
        ])
        .unwrap();
        let ms: Vec<PointMatch> = (0..12)
            .map(|_| {
                let p = Point::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
                PointMatch::new(p, h.apply(p).unwrap())
            })
            .collect();
        worst = worst.max(weighted_dlt(&ms, &vec![1.0; ms.len()]).unwrap().distance(&h));
    }
    check("weighted DLT exact recovery", worst, 1e-8)
}

fn heatmap_closed_form() -> Check {
    // Two equal spikes at offsets (-1, 0) and (1, 2) in a radius-2 window.
    let mut p = vec![0.0; 25];
    p[2 * 5 + 1] = 0.5;
    p[4 * 5 + 3] = 0.5;
    let mom = heatmap_moments(&p, 2).unwrap();
    let worst =
        [(mom.mean[0] - 0.0).abs(), (mom.mean[1] - 1.0).abs(), (mom.var[0] - 1.0).abs(), (mom.var[1] - 1.0).abs()]
            .into_iter()
            .fold(0.0, f64::max);
    check("heatmap moments", worst, 1e-12)
}

fn uniform_loss() -> Check {
    let n = 7;
    let a = AssignmentMatrix {
        c: DMatrix::from_element(n, n, 1.0 / n as f64),
        method: MatchingMethod::Ds,
        dustbin_rows: None,
        dustbin_cols: None,
    };
    let gt = GroundTruthCoarse { pairs: (0..n).map(|k| (k, k)).collect(), unmatched: vec![] };
    check("coarse loss of uniform assignment", (coarse_loss(&a, &gt).unwrap() - (n as f64).ln()).abs(), 1e-10)
}

/// Runs every check with a fixed seed.
pub fn run_selftest() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1f);
    vec![
        rope_relative(&mut rng),
        linear_attention_oracle(&mut rng),
        sinkhorn_marginals(&mut rng),
        dlt_recovery(&mut rng),
        heatmap_closed_form(),
        uniform_loss(),
    ]
}
