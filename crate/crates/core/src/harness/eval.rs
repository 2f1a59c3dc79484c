//! Batch evaluation over a synthetic manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::contour::measurement_points;
use super::pipeline::{overlay, run_pipeline, PipelineOutput, PipelineWeights};
use super::synth::Manifest;
use crate::error::{io_err, Error, Result};
use crate::geometry::{auc, reprojection_errors, Homography, WeightedMatchSet};
use crate::pgm::{read_gray, read_mask, write_gray};

pub const AUC_THRESHOLDS: [f64; 3] = [3.0, 5.0, 10.0];
pub const INLIER_PX: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub id: String,
    /// `ok`, `fallback` (fine stage too sparse, coarse H kept) or the error.
    pub status: String,
    /// Measurement-point errors; empty on failure.
    pub errors: Vec<f64>,
    /// Mean measurement-point error; `None` encodes the infinite sentinel.
    pub mean_err: Option<f64>,
    pub max_err: Option<f64>,
    pub coarse_matches: usize,
    pub fine_matches: usize,
    pub coarse_inlier_rate: Option<f64>,
    pub fine_inlier_rate: Option<f64>,
    pub h: Option<Homography>,
    #[serde(skip)]
    pub runtime_ms: f64,
}

impl SampleResult {
    /// Mean error with failures mapped to infinity.
    pub fn error_or_inf(&self) -> f64 {
        self.mean_err.unwrap_or(f64::INFINITY)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub n_failed: usize,
    pub auc_3: f64,
    pub auc_5: f64,
    pub auc_10: f64,
    pub samples: Vec<SampleResult>,
    pub config: PipelineConfig,
}

impl EvalReport {
    pub fn mean_errors(&self) -> Vec<f64> {
        self.samples.iter().map(SampleResult::error_or_inf).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn errors_csv(&self) -> String {
        let mut s = String::from("sample_id,mean_err,max_err\n");
        let f = |v: Option<f64>| v.map_or_else(|| "inf".to_string(), |x| format!("{x:.6}"));
        for r in &self.samples {
            let _ = writeln!(s, "{},{},{}", r.id, f(r.mean_err), f(r.max_err));
        }
        s
    }

    pub fn timings_csv(&self) -> String {
        let mut s = String::from("sample_id,runtime_ms\n");
        for r in &self.samples {
            let _ = writeln!(s, "{},{:.3}", r.id, r.runtime_ms);
        }
        s
    }
}

fn inlier_rate(ms: &WeightedMatchSet, h_gt: &Homography) -> Option<f64> {
    if ms.is_empty() {
        return None;
    }
    let ok = ms.matches.iter().filter(|m| h_gt.apply(m.p_t).is_ok_and(|p| (p - m.p_i).norm() <= INLIER_PX)).count();
    Some(ok as f64 / ms.len() as f64)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn write_artifacts(
    out: &Path,
    id: &str,
    o: &PipelineOutput,
    template: &crate::edge_maps::MaskImage,
    source: &crate::edge_maps::GrayImage,
) -> Result<()> {
    write_text(&out.join("homographies").join(format!("{id}.txt")), &format!("{}\n", o.h))?;
    write_text(&out.join("matches").join(format!("{id}_coarse.txt")), &o.coarse_dump)?;
    write_text(&out.join("matches").join(format!("{id}_fine.txt")), &o.fine_dump)?;
    write_gray(&out.join("overlays").join(format!("{id}.pgm")), &overlay(source, template, &o.h)?)
}

/// Evaluates one sample; never fails except on unreadable inputs.
fn eval_sample(
    base: &Path,
    rec: &super::synth::SampleRecord,
    cfg: &PipelineConfig,
    weights: &PipelineWeights,
    out: Option<&Path>,
) -> Result<SampleResult> {
    let t0 = Instant::now();
    let template = read_mask(&base.join(&rec.template))?;
    let source = read_gray(&base.join(&rec.source))?;
    let pts = measurement_points(&template)?;
    let mut r = SampleResult {
        id: rec.id.clone(),
        status: "ok".into(),
        errors: Vec::new(),
        mean_err: None,
        max_err: None,
        coarse_matches: 0,
        fine_matches: 0,
        coarse_inlier_rate: None,
        fine_inlier_rate: None,
        h: None,
        runtime_ms: 0.0,
    };
    match run_pipeline(&template, &source, cfg, weights) {
        Ok(o) => {
            let errs = reprojection_errors(&o.h, &rec.h, &pts)?;
            r.mean_err = Some(errs.iter().sum::<f64>() / errs.len() as f64);
            r.max_err = Some(errs.iter().copied().fold(0.0, f64::max));
            r.errors = errs;
            r.coarse_matches = o.coarse.len();
            r.fine_matches = o.fine_set.len();
            r.coarse_inlier_rate = inlier_rate(&o.coarse, &rec.h);
            r.fine_inlier_rate = inlier_rate(&o.fine_set, &rec.h);
            r.h = Some(o.h);
            if o.fine_fallback {
                r.status = "fallback".into();
            }
            if let Some(out) = out {
                write_artifacts(out, &rec.id, &o, &template, &source)?;
            }
        }
        Err(
            e @ (Error::PipelineDegenerate(_)
            | Error::InsufficientMatches(_)
            | Error::RankDeficient
            | Error::SingularMatrix
            | Error::DegeneratePoint),
        ) => {
            r.status = e.to_string();
        }
        Err(e) => return Err(e),
    }
    r.runtime_ms = t0.elapsed().as_secs_f64() * 1e3;
    Ok(r)
}

/// Runs every manifest sample and aggregates the AUC table. Failed samples
/// carry an infinite error. When `out` is given, writes `report.json`,
/// `errors.csv`, `timings.csv` and, if enabled, per-sample artifacts.
pub fn evaluate(manifest_path: &Path, cfg: &PipelineConfig, out: Option<&Path>) -> Result<EvalReport> {
    cfg.validate()?;
    let manifest = Manifest::load(manifest_path)?;
    if manifest.samples.is_empty() {
        return Err(Error::EmptyInput);
    }
    let base: PathBuf = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let weights = PipelineWeights::from_config(cfg)?;
    let artifacts = out.filter(|_| cfg.write_artifacts);
    if let Some(o) = artifacts {
        for sub in ["homographies", "matches", "overlays"] {
            let d = o.join(sub);
            fs::create_dir_all(&d).map_err(io_err(&d))?;
        }
    } else if let Some(o) = out {
        fs::create_dir_all(o).map_err(io_err(o))?;
    }
    let run = |rec| eval_sample(&base, rec, cfg, &weights, artifacts);
    let mut samples: Vec<SampleResult> = if cfg.parallel {
        manifest.samples.par_iter().map(run).collect::<Result<_>>()?
    } else {
        manifest.samples.iter().map(run).collect::<Result<_>>()?
    };
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    let errs: Vec<f64> = samples.iter().map(SampleResult::error_or_inf).collect();
    let report = EvalReport {
        n_samples: samples.len(),
        n_failed: samples.iter().filter(|s| s.mean_err.is_none()).count(),
        auc_3: auc(&errs, AUC_THRESHOLDS[0])?,
        auc_5: auc(&errs, AUC_THRESHOLDS[1])?,
        auc_10: auc(&errs, AUC_THRESHOLDS[2])?,
        samples,
        config: cfg.clone(),
    };
    if let Some(o) = out {
        write_text(&o.join("report.json"), &report.to_json())?;
        write_text(&o.join("errors.csv"), &report.errors_csv())?;
        write_text(&o.join("timings.csv"), &report.timings_csv())?;
    }
    Ok(report)
}
