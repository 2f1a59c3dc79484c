//! Procedural template masks: smooth blobs, irregular polygons and
//! composite parts, optionally with holes.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::edge_maps::MaskImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Blob,
    Polygon,
    Part,
}

/// One primitive of a shape, in frame coordinates.
#[derive(Clone, Debug)]
enum Prim {
    /// `r(θ) = r0 (1 + Σ a_k cos(kθ + φ_k))` around a centre.
    Radial {
        cx: f64,
        cy: f64,
        r0: f64,
        harmonics: Vec<(f64, f64, f64)>,
    },
    Polygon(Vec<(f64, f64)>),
    Disc {
        cx: f64,
        cy: f64,
        r: f64,
    },
}

impl Prim {
    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Prim::Radial { cx, cy, r0, harmonics } => {
                let (dx, dy) = (x - cx, y - cy);
                let th = dy.atan2(dx);
                let r = r0 * (1.0 + harmonics.iter().map(|(k, a, ph)| a * (k * th + ph).cos()).sum::<f64>());
                dx * dx + dy * dy <= r * r
            }
            Prim::Polygon(v) => point_in_polygon(v, x, y),
            Prim::Disc { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
        }
    }
}

/// Even-odd rule.
fn point_in_polygon(v: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let n = v.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = v[i];
        let (xj, yj) = v[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn rotated_rect(cx: f64, cy: f64, hw: f64, hh: f64, angle: f64) -> Prim {
    let (s, c) = angle.sin_cos();
    let pts = [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)]
        .iter()
        .map(|&(x, y)| (cx + c * x - s * y, cy + s * x + c * y))
        .collect();
    Prim::Polygon(pts)
}

/// Deterministic mask for `seed`, centred in a `width x height` frame with
/// an outer radius of roughly 110–140 px.
pub fn generate_shape(seed: u64, width: usize, height: usize) -> MaskImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = match rng.random_range(0..3) {
        0 => ShapeKind::Blob,
        1 => ShapeKind::Polygon,
        _ => ShapeKind::Part,
    };
    generate_kind(&mut rng, kind, width, height)
}

pub fn generate_kind(rng: &mut ChaCha8Rng, kind: ShapeKind, width: usize, height: usize) -> MaskImage {
    let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
    let r0 = rng.random_range(110.0..140.0) * (width.min(height) as f64 / 480.0);
    let mut add: Vec<Prim> = Vec::new();
    let mut sub: Vec<Prim> = Vec::new();
    match kind {
        ShapeKind::Blob => {
            let harmonics = (2..=6)
                .map(|k| (k as f64, rng.random_range(0.04..0.18) / (k as f64).sqrt(), rng.random_range(0.0..2.0 * PI)))
                .collect();
            let rb = r0 * 0.85;
            add.push(Prim::Radial { cx, cy, r0: rb, harmonics });
            // One or two tabs or notches on the rim break near-rotational
            // symmetry, which would leave the pose ill-determined.
            let phase = rng.random_range(0.0..2.0 * PI);
            for k in 0..rng.random_range(1..=2) {
                let a = phase + k as f64 * rng.random_range(0.6 * PI..1.4 * PI);
                let disc =
                    Prim::Disc { cx: cx + rb * a.cos(), cy: cy + rb * a.sin(), r: r0 * rng.random_range(0.15..0.25) };
                if rng.random_bool(0.5) {
                    add.push(disc);
                } else {
                    sub.push(disc);
                }
            }
        }
        ShapeKind::Polygon => {
            let n = rng.random_range(5..=9);
            let mut angles: Vec<f64> =
                (0..n).map(|k| (k as f64 + rng.random_range(-0.3..0.3)) * 2.0 * PI / n as f64).collect();
            angles.sort_by(f64::total_cmp);
            let v = angles
                .iter()
                .map(|a| {
                    let r = r0 * rng.random_range(0.55..1.0);
                    (cx + r * a.cos(), cy + r * a.sin())
                })
                .collect();
            add.push(Prim::Polygon(v));
        }
        ShapeKind::Part => {
            let angle = rng.random_range(0.0..PI);
            let hw = r0 * rng.random_range(0.6..0.8);
            let hh = r0 * rng.random_range(0.3..0.5);
            add.push(rotated_rect(cx, cy, hw, hh, angle));
            let (s, c) = angle.sin_cos();
            let off = hw * rng.random_range(0.5..0.9);
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            add.push(Prim::Disc {
                cx: cx + side * c * off,
                cy: cy + side * s * off,
                r: hh * rng.random_range(1.1..1.5),
            });
            // notch cut into one long side
            let along = rng.random_range(-0.5..0.5) * hw;
            let (nx, ny) = (cx + c * along - s * hh, cy + s * along + c * hh);
            sub.push(rotated_rect(nx, ny, hh * 0.35, hh * 0.35, angle));
        }
    }
    if rng.random_bool(0.6) {
        let r = r0 * rng.random_range(0.12..0.22);
        let (dx, dy) = (rng.random_range(-0.25..0.25) * r0, rng.random_range(-0.25..0.25) * r0);
        sub.push(Prim::Disc { cx: cx + dx, cy: cy + dy, r });
    }
    let mask = MaskImage::from_fn(width, height, |x, y| {
        let (xf, yf) = (x as f64, y as f64);
        add.iter().any(|p| p.contains(xf, yf)) && !sub.iter().any(|p| p.contains(xf, yf))
    });
    // A degenerate draw (should not happen for these ranges) falls back to a disc.
    if mask.count() < 100 {
        return MaskImage::from_fn(width, height, |x, y| (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r0 * r0);
    }
    mask
}
