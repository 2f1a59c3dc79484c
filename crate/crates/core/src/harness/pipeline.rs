//! End-to-end matching of one template mask against one source image.

use std::time::Instant;

use nalgebra::DMatrix;

use super::config::{FineWeighting, PipelineConfig, Weighting};
use super::synth::center_mask;
use crate::attention::{run_transformer, AttentionBlockWeights};
use crate::coarse_match::{
    dual_softmax, mnn_filter, score_matrix, sinkhorn_with_dustbin, CoarseMatchSet, MatchingMethod,
};
use crate::consistency::inlier_scores;
use crate::edge_maps::{detect_edges, mask_to_edges, EdgeImage, GrayImage, MaskImage};
use crate::error::{Error, Result};
use crate::features::{DescriptorExtractor, DescriptorGrid, Side, TokenSet};
use crate::geometry::{dlt_weighted, Homography, Point, PointMatch, WeightedMatchSet};
use crate::refine::{
    describe_fine_cells, estimate_final_homography, finalize_matches, fine_cells_of, fine_dump, fuse_features,
    subpixel_match, template_fine_cells, warp_image_to, window_support, FineMatch, FusionWeights, LocalTransformer,
};
use crate::sampling::{build_patch_grid, centroid_seed, fps, PatchGrid, COARSE_STRIDE};

/// Network weights used by one pipeline configuration.
#[derive(Clone, Debug)]
pub struct PipelineWeights {
    pub attention: Option<AttentionBlockWeights>,
    pub local: Option<LocalTransformer>,
    pub fusion: FusionWeights,
}

impl PipelineWeights {
    /// Loads weight files named in `cfg`, or draws seeded weights.
    pub fn from_config(cfg: &PipelineConfig) -> Result<Self> {
        let attention = if cfg.attention {
            Some(match &cfg.attention_weights {
                Some(p) => AttentionBlockWeights::load(p, cfg.coarse_dim, cfg.coarse_layers)?,
                None => AttentionBlockWeights::seeded(cfg.coarse_dim, cfg.coarse_layers, cfg.seed, cfg.attention_scale),
            })
        } else {
            None
        };
        let local = if cfg.local_attention {
            let weights = match &cfg.local_attention_weights {
                Some(p) => AttentionBlockWeights::load(p, cfg.fine_dim, cfg.fine_layers)?,
                None => {
                    AttentionBlockWeights::seeded(cfg.fine_dim, cfg.fine_layers, cfg.seed ^ 0xf1, cfg.attention_scale)
                }
            };
            Some(LocalTransformer { weights })
        } else {
            None
        };
        let fusion = match &cfg.fusion_weights {
            Some(p) => FusionWeights::load(p, cfg.coarse_dim, cfg.fine_dim)?,
            None => FusionWeights::projection(cfg.coarse_dim, cfg.fine_dim, cfg.fusion_kappa, cfg.seed ^ 0xf05e)?,
        };
        if fusion.out_dim() != cfg.fine_dim && local.is_some() {
            return Err(Error::Config("local attention needs fusion output width equal to fine_dim".into()));
        }
        Ok(Self { attention, local, fusion })
    }
}

/// Everything produced for one template/source pair.
#[derive(Clone, Debug)]
pub struct PipelineOutput {
    /// Template (original frame) to source.
    pub h: Homography,
    pub h_coarse: Homography,
    /// Coarse point matches (template frame as given) with `s`, `e`, `w`.
    pub coarse: WeightedMatchSet,
    pub fine: Vec<FineMatch>,
    pub fine_set: WeightedMatchSet,
    pub coarse_dump: String,
    pub fine_dump: String,
    pub template_tokens: usize,
    pub image_tokens: usize,
    /// True when too few fine matches survived and `h` is the coarse estimate.
    pub fine_fallback: bool,
    pub timings_ms: StageTimings,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageTimings {
    pub edges: f64,
    pub coarse: f64,
    pub fine: f64,
    pub total: f64,
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn degenerate(msg: impl Into<String>) -> Error {
    Error::PipelineDegenerate(msg.into())
}

fn cell_tokens(ex: &DescriptorExtractor, e: &EdgeImage, cells: &[(usize, usize)], side: Side) -> Result<TokenSet> {
    let dim = ex.spec().dim;
    let mut m = DMatrix::zeros(cells.len(), dim);
    for (r, &(gx, gy)) in cells.iter().enumerate() {
        let c = (
            crate::sampling::cell_center(gx, COARSE_STRIDE).min(e.width() - 1),
            crate::sampling::cell_center(gy, COARSE_STRIDE).min(e.height() - 1),
        );
        let d = ex.describe(c)?;
        m.row_mut(r).copy_from(&d.as_vector().transpose());
    }
    TokenSet::new(m, cells.iter().map(|&(x, y)| [x as f64, y as f64]).collect(), side)
}

fn grid_center(g: (usize, usize)) -> Point {
    Point::new(
        crate::sampling::cell_center(g.0, COARSE_STRIDE) as f64,
        crate::sampling::cell_center(g.1, COARSE_STRIDE) as f64,
    )
}

/// FPS over the template's edge cells, returned in row-major order.
pub fn sample_template_cells(grid: &PatchGrid, n: usize) -> Vec<(usize, usize)> {
    let cells: Vec<(usize, usize)> = grid.edge_cells().map(|c| (c.gx, c.gy)).collect();
    let pts: Vec<Point> = cells.iter().map(|&c| grid_center(c)).collect();
    let Some(seed) = centroid_seed(&pts) else { return Vec::new() };
    let mut sel: Vec<(usize, usize)> = fps(&pts, n, seed).into_iter().map(|i| cells[i]).collect();
    sel.sort_by_key(|&(x, y)| (y, x));
    sel
}

/// Coarse matching only: tokens, assignment and MNN filtering.
pub struct CoarseStage {
    pub sampled: Vec<(usize, usize)>,
    pub image_cells: Vec<(usize, usize)>,
    pub template_tokens: TokenSet,
    pub image_tokens: TokenSet,
    pub matches: CoarseMatchSet,
}

pub fn coarse_stage(et: &EdgeImage, ei: &EdgeImage, cfg: &PipelineConfig, w: &PipelineWeights) -> Result<CoarseStage> {
    let gt = build_patch_grid(et, COARSE_STRIDE)?;
    let gi = build_patch_grid(ei, COARSE_STRIDE)?;
    let sampled = sample_template_cells(&gt, cfg.n_patches);
    let image_cells: Vec<(usize, usize)> = gi.edge_cells().map(|c| (c.gx, c.gy)).collect();
    if sampled.is_empty() {
        return Err(degenerate("template has no edge cells"));
    }
    if image_cells.is_empty() {
        return Err(degenerate("source has no edge cells"));
    }
    let spec = cfg.coarse_spec();
    let mut tt = cell_tokens(&DescriptorExtractor::new(et, spec)?, et, &sampled, Side::Template)?;
    let mut ti = cell_tokens(&DescriptorExtractor::new(ei, spec)?, ei, &image_cells, Side::Image)?;
    if let Some(aw) = &w.attention {
        (tt, ti) = run_transformer(&tt, &ti, aw)?;
    }
    let sm = score_matrix(&tt, &ti, cfg.temperature)?;
    let assign = match cfg.matching {
        MatchingMethod::Ot => sinkhorn_with_dustbin(&sm, cfg.dustbin, cfg.sinkhorn_iters),
        MatchingMethod::Ds => dual_softmax(&sm),
    };
    let matches = mnn_filter(&assign, cfg.theta_c);
    Ok(CoarseStage { sampled, image_cells, template_tokens: tt, image_tokens: ti, matches })
}

/// Point matches between coarse cell centres, weighted per `cfg.weighting`.
pub fn weighted_coarse_matches(stage: &CoarseStage, cfg: &PipelineConfig) -> Result<WeightedMatchSet> {
    let pm: Vec<PointMatch> = stage
        .matches
        .pairs
        .iter()
        .map(|p| PointMatch::new(grid_center(stage.sampled[p.t]), grid_center(stage.image_cells[p.i])))
        .collect();
    let s = stage.matches.scores();
    let n = pm.len();
    match cfg.weighting {
        Weighting::Uniform => WeightedMatchSet::new(pm, vec![1.0; n], vec![1.0; n]),
        Weighting::Score => WeightedMatchSet::new(pm, s, vec![1.0; n]),
        Weighting::Consistency => {
            let e = inlier_scores(&pm, &cfg.consistency())?;
            WeightedMatchSet::new(pm, s, e.e)
        }
    }
}

/// Template-side fine features, computed once and reused across
/// refinement rounds.
pub struct FineTemplate {
    support: Vec<(usize, usize)>,
    support_fine: Vec<(usize, usize)>,
    cells: Vec<(usize, usize)>,
    fused: DescriptorGrid,
}

impl FineTemplate {
    pub fn new(
        et: &EdgeImage,
        sampled: &[(usize, usize)],
        sampled_features: Option<&TokenSet>,
        cfg: &PipelineConfig,
        w: &PipelineWeights,
    ) -> Result<Self> {
        let cols = et.width().div_ceil(COARSE_STRIDE);
        let rows = et.height().div_ceil(COARSE_STRIDE);
        let support = window_support(sampled, cols, rows);
        let support_fine = fine_cells_of(&support);
        let cells = template_fine_cells(et, sampled);
        let ext = DescriptorExtractor::new(et, cfg.fine_spec())?;
        let needed: &[(usize, usize)] = if w.local.is_some() { &support_fine } else { &cells };
        let ft = describe_fine_cells(&ext, et.width(), et.height(), needed)?;
        // Sampled template patches carry their matching features as coarse
        // context; other support cells use plain descriptors.
        let coarse_cells: &[(usize, usize)] = if w.local.is_some() { &support } else { sampled };
        let mut ct = cell_tokens(&DescriptorExtractor::new(et, cfg.coarse_spec())?, et, coarse_cells, Side::Template)?;
        if let Some(sf) = sampled_features {
            for (r, pos) in ct.positions.iter().enumerate() {
                if let Some(k) = sampled.iter().position(|&(x, y)| [x as f64, y as f64] == *pos) {
                    ct.features.row_mut(r).copy_from(&sf.features.row(k));
                }
            }
        }
        let fused = fuse_features(&ct, &ft, &w.fusion)?;
        Ok(Self { support, support_fine, cells, fused })
    }

    /// Fine matches against an image already warped into the template frame.
    pub fn match_warped(&self, iw: &EdgeImage, cfg: &PipelineConfig, w: &PipelineWeights) -> Result<Vec<FineMatch>> {
        let ext = DescriptorExtractor::new(iw, cfg.fine_spec())?;
        let fw = describe_fine_cells(&ext, iw.width(), iw.height(), &self.support_fine)?;
        let cw = cell_tokens(&DescriptorExtractor::new(iw, cfg.coarse_spec())?, iw, &self.support, Side::Image)?;
        let fused_w = fuse_features(&cw, &fw, &w.fusion)?;
        let params = cfg.fine_params();
        let mut out = Vec::with_capacity(self.cells.len());
        for &cell in &self.cells {
            match subpixel_match(&self.fused, &fused_w, cell, &params, w.local.as_ref()) {
                Ok(m) => out.push(m),
                Err(Error::BorderSkip) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }
}

/// Fine matches in the warped frame for the sampled template patches.
pub fn fine_stage(
    et: &EdgeImage,
    iw: &EdgeImage,
    sampled: &[(usize, usize)],
    sampled_features: Option<&TokenSet>,
    cfg: &PipelineConfig,
    w: &PipelineWeights,
) -> Result<Vec<FineMatch>> {
    FineTemplate::new(et, sampled, sampled_features, cfg, w)?.match_warped(iw, cfg, w)
}

/// Runs the full coarse-to-fine pipeline. `h` maps template pixels (as
/// given) to source pixels.
pub fn run_pipeline(
    template: &MaskImage,
    source: &GrayImage,
    cfg: &PipelineConfig,
    weights: &PipelineWeights,
) -> Result<PipelineOutput> {
    let t0 = Instant::now();
    // Centre the template in its own frame; `shift` maps given → centred.
    let (tmask, (dx, dy)) = center_mask(template, template.width(), template.height())?;
    let shift = Homography::translation(dx as f64, dy as f64);
    let et = mask_to_edges(&tmask)?;
    let ei = detect_edges(source, &cfg.edges())?;
    let t_edges = ms_since(t0);

    let t1 = Instant::now();
    let stage = coarse_stage(&et, &ei, cfg, weights)?;
    if stage.matches.len() < 4 {
        return Err(degenerate(format!("{} coarse matches", stage.matches.len())));
    }
    let coarse = weighted_coarse_matches(&stage, cfg)?;
    let h_c = dlt_weighted(&coarse).map_err(|e| degenerate(format!("coarse DLT: {e}")))?;
    let sampled_grid: Vec<(usize, usize)> = stage.sampled.clone();
    let coarse_dump = stage.matches.dump(&sampled_grid, &stage.image_cells);
    let t_coarse = ms_since(t1);

    let t2 = Instant::now();
    let sampled_features = weights.attention.as_ref().map(|_| &stage.template_tokens);
    let fine_template = FineTemplate::new(&et, &stage.sampled, sampled_features, cfg, weights)?;
    let mut h_centred = h_c;
    let mut fine_fallback = true;
    let mut fine = Vec::new();
    let mut fine_set = WeightedMatchSet::default();
    for _ in 0..cfg.refine_iters {
        let warp = h_centred.inverse().map_err(|e| degenerate(format!("homography: {e}")))?;
        let iw = warp_image_to(&ei, &warp, et.width(), et.height())?;
        let round = fine_template.match_warped(&iw.image, cfg, weights)?;
        let mut set = finalize_matches(&round, &warp)?;
        if cfg.fine_weighting == FineWeighting::InverseVariance {
            let e = round.iter().map(|f| 1.0 / f.variance.max(cfg.variance_floor)).collect();
            set = WeightedMatchSet::new(set.matches, set.s, e)?;
        }
        fine = round;
        let est = estimate_final_homography(&set);
        fine_set = set;
        match est {
            Ok(h) => {
                // Largest displacement of the matched template points.
                let moved = fine_set
                    .matches
                    .iter()
                    .map(|m| Ok((h.apply(m.p_t)? - h_centred.apply(m.p_t)?).norm()))
                    .collect::<Result<Vec<f64>>>()
                    .map(|d| d.into_iter().fold(0.0, f64::max))
                    .unwrap_or(f64::INFINITY);
                h_centred = h;
                fine_fallback = false;
                if moved < cfg.refine_tol {
                    break;
                }
            }
            Err(_) => break,
        }
    }
    let fine_dump = fine_dump(&fine, &fine_set);
    let t_fine = ms_since(t2);

    // Report matches in the template frame as given.
    let unshift = shift.inverse()?;
    let back = |m: &PointMatch| -> Result<PointMatch> { Ok(PointMatch::new(unshift.apply(m.p_t)?, m.p_i)) };
    let coarse = WeightedMatchSet { matches: coarse.matches.iter().map(back).collect::<Result<_>>()?, ..coarse };
    let fine_set = WeightedMatchSet { matches: fine_set.matches.iter().map(back).collect::<Result<_>>()?, ..fine_set };
    Ok(PipelineOutput {
        h: h_centred.compose(&shift)?,
        h_coarse: h_c.compose(&shift)?,
        coarse,
        fine,
        fine_set,
        coarse_dump,
        fine_dump,
        template_tokens: stage.template_tokens.len(),
        image_tokens: stage.image_tokens.len(),
        fine_fallback,
        timings_ms: StageTimings { edges: t_edges, coarse: t_coarse, fine: t_fine, total: ms_since(t0) },
    })
}

/// Source image with the template contour projected by `h` drawn in white.
pub fn overlay(source: &GrayImage, template: &MaskImage, h: &Homography) -> Result<GrayImage> {
    let contour = mask_to_edges(template)?;
    let (w, hh) = (source.width(), source.height());
    let mut data: Vec<f64> = source.data().iter().map(|v| v * 0.6).collect();
    for (x, y) in contour.edge_pixels() {
        let Ok(p) = h.apply(Point::new(x as f64, y as f64)) else { continue };
        let (px, py) = (p.x.round(), p.y.round());
        if px >= 0.0 && py >= 0.0 && (px as usize) < w && (py as usize) < hh {
            data[py as usize * w + px as usize] = 1.0;
        }
    }
    GrayImage::new(w, hh, data)
}
