//! Registration protocols, the pseudo-modality benchmark and report plots.

mod benchmark;
mod corpus;
pub mod plots;

pub use self::benchmark::{
    run_benchmark, AggregateReport, BenchmarkConfig, BenchmarkReport, MatcherChoice, Protocol, REPORT_SCHEMA,
};
pub use self::corpus::{corpus_image, pseudo_modality, write_corpus, PseudoModality, PseudoModalityParams};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Homography, HomographyConfig, Point};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetinalProtocolConfig {
    pub eval_size: usize,
    pub rmse_success: f64,
    pub mae_success: f64,
    pub min_matches: usize,
}

impl Default for RetinalProtocolConfig {
    fn default() -> Self {
        Self {
            eval_size: 768,
            rmse_success: 10.0,
            mae_success: 20.0,
            min_matches: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteProtocolConfig {
    pub h_err_success: f64,
    pub correct_px: f64,
    pub perturbation: HomographyConfig,
}

impl Default for RemoteProtocolConfig {
    fn default() -> Self {
        Self {
            h_err_success: 5.0,
            correct_px: 3.0,
            perturbation: HomographyConfig {
                rotation_range: [-20.0, 20.0],
                scale_range: [0.8, 1.2],
                perspective_distortion: 0.2,
                translation_range: [0.0, 0.0],
                seed: 0,
            },
        }
    }
}

/// Per-pair outcome. Absent errors mean the pair never reached estimation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub name: String,
    pub rmse: Option<f64>,
    pub mae: Option<f64>,
    pub h_err: Option<f64>,
    pub n_matches: usize,
    pub n_inliers: usize,
    pub n_correct: usize,
    pub n_keypoints_overlap: usize,
    pub success: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

/// Root-mean-square and maximum Euclidean error of `pred_h(a)` against `b`.
pub fn rmse_mae(pred_h: &Homography, gt_points: &[(Point, Point)]) -> Result<(f64, f64)> {
    if gt_points.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let mut sq = 0.0;
    let mut max = 0.0f64;
    for (a, b) in gt_points {
        let p = pred_h.apply(*a)?;
        let e2 = (p[0] - b[0]).powi(2) + (p[1] - b[1]).powi(2);
        sq += e2;
        max = max.max(e2.sqrt());
    }
    Ok(((sq / gt_points.len() as f64).sqrt(), max))
}

pub fn retinal_success(r: &PairReport, cfg: &RetinalProtocolConfig) -> bool {
    r.n_matches >= cfg.min_matches
        && matches!((r.rmse, r.mae), (Some(rmse), Some(mae)) if rmse < cfg.rmse_success && mae < cfg.mae_success)
}

pub fn retinal_srr(reports: &[PairReport], cfg: &RetinalProtocolConfig) -> Result<f64> {
    if reports.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    Ok(reports.iter().filter(|r| retinal_success(r, cfg)).count() as f64 / reports.len() as f64)
}

/// Mean RMSE and MAE over pairs that met the match minimum; `None` when no
/// pair qualifies.
pub fn mean_rmse_mae(reports: &[PairReport], cfg: &RetinalProtocolConfig) -> Option<(f64, f64)> {
    let kept: Vec<(f64, f64)> = reports
        .iter()
        .filter(|r| r.n_matches >= cfg.min_matches)
        .filter_map(|r| Some((r.rmse?, r.mae?)))
        .collect();
    if kept.is_empty() {
        return None;
    }
    let n = kept.len() as f64;
    Some((kept.iter().map(|k| k.0).sum::<f64>() / n, kept.iter().map(|k| k.1).sum::<f64>() / n))
}

pub fn remote_success(r: &PairReport, cfg: &RemoteProtocolConfig) -> bool {
    matches!(r.h_err, Some(e) if e < cfg.h_err_success)
}

/// `(srr, ms)`: fraction with `h_err` below threshold, and the mean over pairs
/// of correct matches per overlapping keypoint (0 for pairs with no overlap).
pub fn remote_srr_and_ms(reports: &[PairReport], cfg: &RemoteProtocolConfig) -> Result<(f64, f64)> {
    if reports.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let n = reports.len() as f64;
    let srr = reports.iter().filter(|r| remote_success(r, cfg)).count() as f64 / n;
    let ms = reports
        .iter()
        .map(|r| {
            if r.n_keypoints_overlap == 0 {
                log::warn!("{}: no keypoints in the overlap region", r.name);
                0.0
            } else {
                r.n_correct as f64 / r.n_keypoints_overlap as f64
            }
        })
        .sum::<f64>()
        / n;
    Ok((srr, ms))
}

/// Retinal SRR with the RMSE threshold replaced by each of `thresholds`
/// (MAE threshold scaled by the same factor).
pub fn srr_sweep(reports: &[PairReport], cfg: &RetinalProtocolConfig, thresholds: &[f64]) -> Result<Vec<(f64, f64)>> {
    thresholds
        .iter()
        .map(|&t| {
            let c = RetinalProtocolConfig {
                rmse_success: t,
                mae_success: cfg.mae_success * t / cfg.rmse_success,
                ..cfg.clone()
            };
            Ok((t, retinal_srr(reports, &c)?))
        })
        .collect()
}

/// Control points: a 5×5 grid over the image interior, mapped by `h`.
pub fn grid_control_points(size: (usize, usize), h: &Homography) -> Result<Vec<(Point, Point)>> {
    let (w, hgt) = (size.0 as f64, size.1 as f64);
    let mut out = Vec::with_capacity(25);
    for j in 0..5 {
        for i in 0..5 {
            let a = [w * (0.1 + 0.2 * i as f64), hgt * (0.1 + 0.2 * j as f64)];
            out.push((a, h.apply(a)?));
        }
    }
    Ok(out)
}
