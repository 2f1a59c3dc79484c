//! Synthetic samples: a centred template mask and a source image rendered
//! from the mask under a sampled ground-truth homography.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::shapes::generate_shape;
use crate::edge_maps::{gaussian_blur, mask_to_edges, GrayImage, MaskImage};
use crate::error::{io_err, Error, Result};
use crate::geometry::{sample_gt_homography, Homography, Point};
use crate::pgm;

pub const BACKGROUND: f64 = 0.2;
pub const FOREGROUND: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    /// Paths are relative to the manifest's directory.
    pub template: PathBuf,
    pub source: PathBuf,
    /// Maps template coordinates to source coordinates.
    pub h: Homography,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub width: usize,
    pub height: usize,
    pub samples: Vec<SampleRecord>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(io_err(path))
    }
}

/// Crops/pads `mask` into a `width x height` frame so that its bounding-box
/// centre sits at the frame centre. Returns the integer shift applied.
pub fn center_mask(mask: &MaskImage, width: usize, height: usize) -> Result<(MaskImage, (i64, i64))> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    if x0 == usize::MAX {
        return Err(Error::EmptyMask);
    }
    let dx = (width as i64 - 1) / 2 - (x0 + x1) as i64 / 2;
    let dy = (height as i64 - 1) / 2 - (y0 + y1) as i64 / 2;
    let out = MaskImage::from_fn(width, height, |x, y| {
        let (sx, sy) = (x as i64 - dx, y as i64 - dy);
        sx >= 0
            && sy >= 0
            && sx < mask.width() as i64
            && sy < mask.height() as i64
            && mask.get(sx as usize, sy as usize)
    });
    if out.count() == 0 {
        return Err(Error::EmptyMask);
    }
    Ok((out, (dx, dy)))
}

/// Interior 1, inner-contour pixels 1/2, outside 0. Bilinear resampling of
/// this puts the steepest transition on the contour pixels themselves.
pub fn soft_mask(mask: &MaskImage) -> Result<Vec<f64>> {
    let contour = mask_to_edges(mask)?;
    Ok(mask
        .data()
        .iter()
        .zip(contour.binary())
        .map(|(m, c)| {
            if *c {
                0.5
            } else if *m {
                1.0
            } else {
                0.0
            }
        })
        .collect())
}

fn bilinear_zero(data: &[f64], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);
    let at = |xi: i64, yi: i64| {
        if xi < 0 || yi < 0 || xi >= w as i64 || yi >= h as i64 {
            0.0
        } else {
            data[yi as usize * w + xi as usize]
        }
    };
    (1.0 - fy) * ((1.0 - fx) * at(x0, y0) + fx * at(x0 + 1, y0))
        + fy * ((1.0 - fx) * at(x0, y0 + 1) + fx * at(x0 + 1, y0 + 1))
}

/// Renders the source image: the soft template mask pulled back through
/// `h`, mapped to background/foreground grey levels, then optional clutter
/// segments, blur and pixel noise.
pub fn render_source(
    template: &MaskImage,
    h: &Homography,
    cfg: &PipelineConfig,
    rng: &mut ChaCha8Rng,
) -> Result<GrayImage> {
    let (tw, th) = (template.width(), template.height());
    let soft = soft_mask(template)?;
    let inv = h.inverse()?;
    let (w, hh) = (cfg.width, cfg.height);
    let mut data = vec![BACKGROUND; w * hh];
    for y in 0..hh {
        for x in 0..w {
            let Ok(q) = inv.apply(Point::new(x as f64, y as f64)) else { continue };
            let v = bilinear_zero(&soft, tw, th, q.x, q.y);
            data[y * w + x] = BACKGROUND + (FOREGROUND - BACKGROUND) * v;
        }
    }
    for _ in 0..cfg.noise_edges {
        let (ax, ay) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..hh as f64));
        let len = rng.random_range(15.0..60.0);
        let ang: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let level = rng.random_range(0.0..1.0);
        let steps = (len * 2.0) as usize;
        for s in 0..=steps {
            let t = s as f64 / steps as f64 * len;
            let (px, py) = ((ax + t * ang.cos()).round(), (ay + t * ang.sin()).round());
            if px >= 0.0 && py >= 0.0 && (px as usize) < w && (py as usize) < hh {
                data[py as usize * w + px as usize] = level;
            }
        }
    }
    if cfg.blur > 0.0 {
        data = gaussian_blur(&data, w, hh, cfg.blur);
    }
    if cfg.pixel_noise > 0.0 {
        let n = Normal::new(0.0, cfg.pixel_noise).map_err(|e| Error::Config(e.to_string()))?;
        for v in data.iter_mut() {
            *v += n.sample(rng);
        }
    }
    for v in data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    GrayImage::new(w, hh, data)
}

/// Sorted `*.pgm` files in `dir`.
pub fn list_masks(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")))
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(Error::NoMasks(dir.to_path_buf()));
    }
    Ok(out)
}

/// Writes `count` procedural masks named `shape_NNN.pgm`.
pub fn write_shapes(dir: &Path, count: usize, seed: u64, width: usize, height: usize) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|k| {
            let path = dir.join(format!("shape_{k:03}.pgm"));
            pgm::write_mask(&path, &generate_shape(rng.random(), width, height))?;
            Ok(path)
        })
        .collect()
}

/// Generates `n` samples into `out`: `templates/`, `sources/` and
/// `manifest.json`. Everything is a function of `seed` and `cfg`.
pub fn synth_dataset(masks_dir: &Path, out: &Path, n: usize, cfg: &PipelineConfig, seed: u64) -> Result<Manifest> {
    cfg.validate()?;
    let masks = list_masks(masks_dir)?;
    let tdir = out.join("templates");
    let sdir = out.join("sources");
    for d in [&tdir, &sdir] {
        std::fs::create_dir_all(d).map_err(io_err(d))?;
    }
    let mut centred: Vec<Option<(MaskImage, PathBuf)>> = vec![None; masks.len()];
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let pert = cfg.perturbation();
    let mut samples = Vec::with_capacity(n);
    for k in 0..n {
        let sample_seed: u64 = master.random();
        let mi = master.random_range(0..masks.len());
        if centred[mi].is_none() {
            let raw = pgm::read_mask(&masks[mi])?;
            let (m, _) = center_mask(&raw, cfg.width, cfg.height)?;
            let rel = PathBuf::from("templates").join(format!("template_{mi:03}.pgm"));
            pgm::write_mask(&out.join(&rel), &m)?;
            centred[mi] = Some((m, rel));
        }
        let (template, trel) = centred[mi].as_ref().expect("just filled");
        let h = sample_gt_homography(sample_seed, &pert)?;
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed ^ 0x5a5a_5a5a_5a5a_5a5a);
        let src = render_source(template, &h, cfg, &mut rng)?;
        let id = format!("s{k:04}");
        let srel = PathBuf::from("sources").join(format!("{id}.pgm"));
        pgm::write_gray(&out.join(&srel), &src)?;
        samples.push(SampleRecord { id, template: trel.clone(), source: srel, h, seed: sample_seed });
    }
    let manifest = Manifest { width: cfg.width, height: cfg.height, samples };
    manifest.save(&out.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edge_maps::detect_edges;

    fn nearest_edge_distance(edges: &[(usize, usize)], p: Point) -> f64 {
        edges
            .iter()
            .map(|&(x, y)| ((x as f64 - p.x).powi(2) + (y as f64 - p.y).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn center_mask_moves_bbox_centre() {
        let m = MaskImage::from_fn(50, 40, |x, y| (2..=11).contains(&x) && (3..=8).contains(&y));
        let (c, (dx, dy)) = center_mask(&m, 50, 40).unwrap();
        assert_eq!(c.count(), m.count());
        assert_eq!((dx, dy), (24 - 6, 19 - 5));
        assert!(c.get(2 + dx as usize, 3 + dy as usize));
    }

    #[test]
    fn identity_render_reproduces_contour() {
        let cfg = PipelineConfig::default();
        let mask = generate_shape(3, 640, 480);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let src = render_source(&mask, &Homography::identity(), &cfg, &mut rng).unwrap();
        let found = detect_edges(&src, &cfg.edges()).unwrap();
        let contour = mask_to_edges(&mask).unwrap();
        let agree = contour.edge_pixels().iter().filter(|&&(x, y)| found.is_edge(x, y)).count();
        assert!(agree as f64 >= 0.9 * contour.edge_count() as f64, "{agree} / {}", contour.edge_count());
    }

    #[test]
    fn forward_render_lands_on_source_edges() {
        let cfg = PipelineConfig { scale_min: 0.9, scale_max: 1.1, corner_px: 16.0, ..PipelineConfig::default() };
        let mask = generate_shape(5, 640, 480);
        let contour = mask_to_edges(&mask).unwrap().edge_pixels();
        for seed in 0..3 {
            let h = sample_gt_homography(seed, &cfg.perturbation()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let src = render_source(&mask, &h, &cfg, &mut rng).unwrap();
            let edges = detect_edges(&src, &cfg.edges()).unwrap().edge_pixels();
            let close = contour
                .iter()
                .filter(|&&(x, y)| {
                    nearest_edge_distance(&edges, h.apply(Point::new(x as f64, y as f64)).unwrap()) <= 1.0
                })
                .count();
            assert!(close as f64 >= 0.95 * contour.len() as f64, "{close} / {}", contour.len());
        }
    }

    #[test]
    fn dataset_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let masks = dir.path().join("masks");
        write_shapes(&masks, 2, 9, 640, 480).unwrap();
        let cfg = PipelineConfig::default();
        let a = synth_dataset(&masks, &dir.path().join("a"), 3, &cfg, 42).unwrap();
        let b = synth_dataset(&masks, &dir.path().join("b"), 3, &cfg, 42).unwrap();
        assert_eq!(a, b);
        let ja = std::fs::read(dir.path().join("a/manifest.json")).unwrap();
        let jb = std::fs::read(dir.path().join("b/manifest.json")).unwrap();
        assert_eq!(ja, jb);
        for s in &a.samples {
            let x = std::fs::read(dir.path().join("a").join(&s.source)).unwrap();
            let y = std::fs::read(dir.path().join("b").join(&s.source)).unwrap();
            assert_eq!(x, y);
        }
        assert_eq!(Manifest::load(&dir.path().join("a/manifest.json")).unwrap(), a);
        assert!(matches!(list_masks(dir.path()), Err(Error::NoMasks(_))));
    }

    #[test]
    fn zero_perturbation_gives_identity() {
        let cfg = PipelineConfig {
            scale_min: 1.0,
            scale_max: 1.0,
            rotation_deg: 0.0,
            corner_px: 0.0,
            ..PipelineConfig::default()
        };
        let h = sample_gt_homography(7, &cfg.perturbation()).unwrap();
        assert!(h.distance(&Homography::identity()) < 1e-12);
    }
}
