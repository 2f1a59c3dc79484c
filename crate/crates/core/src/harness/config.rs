//! Flat, fully serializable pipeline configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::coarse_match::MatchingMethod;
use crate::consistency::ConsistencyParams;
use crate::edge_maps::EdgeConfig;
use crate::error::{io_err, Error, Result};
use crate::features::DescriptorSpec;
use crate::geometry::PerturbationConfig;
use crate::refine::FineParams;

/// How coarse matches are weighted in the coarse DLT.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// `w = s · e` with `e` from spatial consistency.
    #[default]
    Consistency,
    /// `w = s`.
    Score,
    /// `w = 1`.
    Uniform,
}

/// How fine matches are weighted in the final DLT.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FineWeighting {
    /// Every fine match weighs 1.
    #[default]
    Uniform,
    /// `1 / max(σ², variance_floor)` from the heatmap variance.
    InverseVariance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub width: usize,
    pub height: usize,

    /// Template patches kept by farthest point sampling.
    pub n_patches: usize,
    pub coarse_layers: usize,
    pub fine_layers: usize,
    pub attention: bool,
    pub local_attention: bool,
    pub attention_scale: f64,
    pub attention_weights: Option<PathBuf>,
    pub local_attention_weights: Option<PathBuf>,

    pub matching: MatchingMethod,
    pub temperature: f64,
    pub dustbin: f64,
    pub sinkhorn_iters: usize,
    pub theta_c: f64,

    pub weighting: Weighting,
    pub sigma_d: f64,
    pub sigma_alpha: f64,
    pub lambda_c: f64,
    pub k_nn: usize,

    /// Fine correlation window `w`.
    pub window: usize,
    pub fine_temperature: f64,
    pub fine_weighting: FineWeighting,
    /// Heatmap variance floor for inverse-variance weighting, in fine cells².
    pub variance_floor: f64,
    /// Warp / fine-match / DLT rounds; each round warps by the previous
    /// estimate.
    pub refine_iters: usize,
    /// Refinement stops early once no matched template point moves by this
    /// many pixels between rounds.
    pub refine_tol: f64,
    pub fusion_kappa: f64,
    pub fusion_weights: Option<PathBuf>,

    pub loss_weight: f64,

    pub edge_low: f64,
    pub edge_high: f64,
    pub edge_sigma: f64,

    pub coarse_window: usize,
    pub coarse_cells: usize,
    pub coarse_dim: usize,
    pub coarse_spatial_sigma: f64,
    pub fine_descriptor_window: usize,
    pub fine_cells: usize,
    pub fine_dim: usize,
    pub fine_spatial_sigma: f64,
    pub descriptor_smoothing: f64,
    pub descriptor_centering: bool,

    pub scale_min: f64,
    pub scale_max: f64,
    pub rotation_deg: f64,
    pub corner_px: f64,
    /// Random clutter segments drawn into synthetic sources.
    pub noise_edges: usize,
    /// Standard deviation of additive pixel noise in synthetic sources.
    pub pixel_noise: f64,
    /// Gaussian blur applied to synthetic sources.
    pub blur: f64,

    pub seed: u64,
    pub parallel: bool,
    pub write_artifacts: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let coarse = DescriptorSpec::coarse();
        let fine = DescriptorSpec::fine();
        let cons = ConsistencyParams::default();
        let edges = EdgeConfig::default();
        let fp = FineParams::default();
        let pert = PerturbationConfig::default();
        Self {
            width: 640,
            height: 480,
            n_patches: 128,
            coarse_layers: 4,
            fine_layers: 2,
            attention: false,
            local_attention: false,
            attention_scale: 0.1,
            attention_weights: None,
            local_attention_weights: None,
            matching: MatchingMethod::Ot,
            temperature: crate::coarse_match::DEFAULT_TEMPERATURE,
            dustbin: crate::coarse_match::DEFAULT_DUSTBIN,
            sinkhorn_iters: crate::coarse_match::DEFAULT_SINKHORN_ITERS,
            theta_c: crate::coarse_match::DEFAULT_THETA_C,
            weighting: Weighting::Consistency,
            sigma_d: cons.sigma_d,
            sigma_alpha: cons.sigma_alpha,
            lambda_c: cons.lambda_c,
            k_nn: cons.k_nn,
            window: fp.window,
            fine_temperature: fp.temperature,
            fine_weighting: FineWeighting::Uniform,
            variance_floor: 0.05,
            refine_iters: 1,
            refine_tol: 0.5,
            fusion_kappa: 0.1,
            fusion_weights: None,
            loss_weight: crate::losses::DEFAULT_LOSS_WEIGHT,
            edge_low: edges.low,
            edge_high: edges.high,
            edge_sigma: edges.sigma,
            coarse_window: coarse.window,
            coarse_cells: coarse.cells,
            coarse_dim: coarse.dim,
            coarse_spatial_sigma: coarse.spatial_sigma,
            fine_descriptor_window: fine.window,
            fine_cells: fine.cells,
            fine_dim: fine.dim,
            fine_spatial_sigma: fine.spatial_sigma,
            descriptor_smoothing: coarse.smoothing,
            descriptor_centering: coarse.centered,
            scale_min: pert.scale_min,
            scale_max: pert.scale_max,
            rotation_deg: pert.rotation_deg,
            corner_px: pert.corner_px,
            noise_edges: 0,
            pixel_noise: 0.0,
            blur: 0.0,
            seed: 0,
            parallel: true,
            write_artifacts: true,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width < 64 || self.height < 64 {
            return bad(format!("frame {}x{} is smaller than 64x64", self.width, self.height));
        }
        if self.n_patches == 0 {
            return bad("n_patches must be positive".into());
        }
        if !(self.theta_c > 0.0 && self.theta_c < 1.0) {
            return bad(format!("theta_c {} outside (0, 1)", self.theta_c));
        }
        if !(self.temperature > 0.0) || !(self.fine_temperature > 0.0) {
            return bad("temperatures must be positive".into());
        }
        if self.sinkhorn_iters == 0 {
            return bad("sinkhorn_iters must be at least 1".into());
        }
        if self.window < 2 || self.window > 8 || !self.window.is_multiple_of(2) {
            return bad(format!("window {} must be even and in [2, 8]", self.window));
        }
        if !(self.variance_floor > 0.0) {
            return bad("variance_floor must be positive".into());
        }
        if self.refine_iters == 0 {
            return bad("refine_iters must be at least 1".into());
        }
        if !(self.refine_tol >= 0.0) {
            return bad("refine_tol must be >= 0".into());
        }
        if !(self.fusion_kappa >= 0.0) {
            return bad("fusion_kappa must be >= 0".into());
        }
        if !(self.attention_scale >= 0.0) {
            return bad("attention_scale must be >= 0".into());
        }
        if !(self.loss_weight >= 0.0) {
            return bad("loss_weight must be >= 0".into());
        }
        if !(self.pixel_noise >= 0.0) || !(self.blur >= 0.0) {
            return bad("pixel_noise and blur must be >= 0".into());
        }
        self.consistency().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.coarse_spec().validate().map_err(|e| Error::Config(format!("coarse descriptor: {e}")))?;
        self.fine_spec().validate().map_err(|e| Error::Config(format!("fine descriptor: {e}")))?;
        self.perturbation().validate().map_err(|e| Error::Config(e.to_string()))?;
        let e = self.edges();
        if !(e.low >= 0.0 && e.high >= e.low && e.high <= 1.0) {
            return bad(format!("edge thresholds {} / {}", e.low, e.high));
        }
        Ok(())
    }

    pub fn consistency(&self) -> ConsistencyParams {
        ConsistencyParams {
            sigma_d: self.sigma_d,
            sigma_alpha: self.sigma_alpha,
            lambda_c: self.lambda_c,
            k_nn: self.k_nn,
        }
    }

    pub fn edges(&self) -> EdgeConfig {
        EdgeConfig { low: self.edge_low, high: self.edge_high, sigma: self.edge_sigma }
    }

    pub fn fine_params(&self) -> FineParams {
        FineParams { window: self.window, temperature: self.fine_temperature }
    }

    pub fn coarse_spec(&self) -> DescriptorSpec {
        DescriptorSpec {
            window: self.coarse_window,
            cells: self.coarse_cells,
            dim: self.coarse_dim,
            spatial_sigma: self.coarse_spatial_sigma,
            smoothing: self.descriptor_smoothing,
            centered: self.descriptor_centering,
            lift_seed: DescriptorSpec::coarse().lift_seed,
        }
    }

    pub fn fine_spec(&self) -> DescriptorSpec {
        DescriptorSpec {
            window: self.fine_descriptor_window,
            cells: self.fine_cells,
            dim: self.fine_dim,
            spatial_sigma: self.fine_spatial_sigma,
            smoothing: self.descriptor_smoothing,
            centered: self.descriptor_centering,
            lift_seed: DescriptorSpec::fine().lift_seed,
        }
    }

    pub fn perturbation(&self) -> PerturbationConfig {
        let (w, h) = (self.width as f64, self.height as f64);
        PerturbationConfig {
            width: w,
            height: h,
            center: [w / 2.0, h / 2.0],
            scale_min: self.scale_min,
            scale_max: self.scale_max,
            rotation_deg: self.rotation_deg,
            corner_px: self.corner_px,
        }
    }
}
