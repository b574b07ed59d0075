//! Pair-level registration benchmark over a manifest.
//!
//! Consecutive manifest lines where the second carries `pair_homography` or
//! `gt_points` form a real pair. Every other image becomes a synthetic pair:
//! the pseudo-modality transform is applied, then the result is warped by a
//! seeded perturbation homography with a zero border.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::corpus::{pseudo_modality, PseudoModality, PseudoModalityParams};
use super::plots::{write_match_plot, write_ratio_histogram, LineClass};
use super::{
    grid_control_points, mean_rmse_mae, remote_srr_and_ms, remote_success, retinal_srr, retinal_success, rmse_mae,
    srr_sweep, PairReport, RemoteProtocolConfig, RetinalProtocolConfig,
};
use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::features::{read_manifest, read_tensor, Border, Image, ManifestEntry};
use crate::geometry::{
    dlt, estimate_homography, homography_error, sample_homography, Homography, HomographyConfig, Point, RansacConfig,
};
use crate::matcher::{
    extract_matches, knn_ratio_match, lowe_ratios, Match, DEFAULT_KNN_RATIO, DEFAULT_P_THRESHOLD, DEFAULT_SIGMA_FLOOR,
};
use crate::model::{describe_image, FeatureConfig, ImageFeatures, MifNet};
use crate::training::sample_rng;

pub const REPORT_SCHEMA: u32 = 1;
const RATIO_BINS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Retinal,
    Remote,
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "retinal" => Ok(Self::Retinal),
            "remote" => Ok(Self::Remote),
            other => Err(Error::Config(format!("unknown protocol `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatcherChoice {
    /// Ratio-test nearest neighbours on the network's final descriptors.
    Mif,
    /// Mutual-argmax extraction from the dual-softmax assignment.
    MifAssignment,
    BaseKnn,
}

impl MatcherChoice {
    pub fn needs_model(self) -> bool {
        !matches!(self, MatcherChoice::BaseKnn)
    }
}

impl std::str::FromStr for MatcherChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mif" => Ok(Self::Mif),
            "mif_assignment" => Ok(Self::MifAssignment),
            "base_knn" => Ok(Self::BaseKnn),
            other => Err(Error::Config(format!("unknown matcher `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub protocol: Protocol,
    pub matcher: MatcherChoice,
    pub pseudo_modality: PseudoModality,
    pub modality_params: PseudoModalityParams,
    /// Perturbation for synthetic pairs.
    pub perturbation: HomographyConfig,
    /// Synthetic images are resized to this square size when set.
    pub image_size: Option<usize>,
    pub features: FeatureConfig,
    pub ransac: RansacConfig,
    pub retinal: RetinalProtocolConfig,
    pub remote: RemoteProtocolConfig,
    pub knn_ratio: f64,
    pub p_threshold: f64,
    pub sigma_floor: f64,
    pub rmse_thresholds: Vec<f64>,
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    #[serde(skip)]
    pub jobs: usize,
    #[serde(skip)]
    pub plots: Option<PathBuf>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::Retinal,
            matcher: MatcherChoice::BaseKnn,
            pseudo_modality: PseudoModality::None,
            modality_params: PseudoModalityParams::default(),
            perturbation: RemoteProtocolConfig::default().perturbation,
            image_size: None,
            features: FeatureConfig::default(),
            ransac: RansacConfig::default(),
            retinal: RetinalProtocolConfig::default(),
            remote: RemoteProtocolConfig::default(),
            knn_ratio: DEFAULT_KNN_RATIO,
            p_threshold: DEFAULT_P_THRESHOLD,
            sigma_floor: DEFAULT_SIGMA_FLOOR,
            rmse_thresholds: vec![1.0, 3.0, 5.0, 10.0],
            seed: 0,
            jobs: 0,
            plots: None,
        }
    }
}

impl BenchmarkConfig {
    pub fn with_rotation_range(mut self, deg: f64) -> Self {
        self.perturbation.rotation_range = [-deg.abs(), deg.abs()];
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.perturbation.validate()?;
        let positive = [
            self.retinal.rmse_success,
            self.retinal.mae_success,
            self.remote.h_err_success,
            self.remote.correct_px,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) || self.retinal.eval_size == 0 {
            return Err(Error::Config("protocol thresholds must be positive".into()));
        }
        if self.rmse_thresholds.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::Config("rmse thresholds must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub n_pairs: usize,
    pub n_failed: usize,
    pub srr: f64,
    pub retinal_srr: f64,
    pub remote_srr: f64,
    pub ms: f64,
    pub mean_rmse: Option<f64>,
    pub mean_mae: Option<f64>,
    /// `(rmse threshold, retinal srr)`.
    pub srr_sweep: Vec<(f64, f64)>,
    pub lowe_ratio_histogram: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub schema: u32,
    pub protocol: Protocol,
    pub matcher: MatcherChoice,
    pub pseudo_modality: PseudoModality,
    pub seed: u64,
    pub config: BenchmarkConfig,
    pub aggregate: AggregateReport,
    pub pairs: Vec<PairReport>,
}

impl BenchmarkReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

enum PairSource {
    Synthetic(ManifestEntry),
    Real(ManifestEntry, ManifestEntry),
}

impl PairSource {
    fn name(&self) -> String {
        let stem = |e: &ManifestEntry| {
            e.image
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        };
        match self {
            PairSource::Synthetic(e) => stem(e),
            PairSource::Real(a, b) => format!("{}__{}", stem(a), stem(b)),
        }
    }
}

fn pair_sources(entries: Vec<ManifestEntry>) -> Vec<PairSource> {
    let mut out = Vec::new();
    let mut it = entries.into_iter().peekable();
    while let Some(e) = it.next() {
        if it.peek().is_some_and(ManifestEntry::closes_pair) {
            let b = it.next().expect("peeked");
            out.push(PairSource::Real(e, b));
        } else {
            out.push(PairSource::Synthetic(e));
        }
    }
    out
}

/// A prepared pair: both images, the GT mapping if known and the annotated
/// control points in native coordinates.
struct PreparedPair {
    image_a: Image,
    image_b: Image,
    gt: Option<Homography>,
    control: Vec<(Point, Point)>,
}

fn prepare(source: &PairSource, index: usize, cfg: &BenchmarkConfig) -> Result<PreparedPair> {
    match source {
        PairSource::Synthetic(e) => {
            let mut image = Image::load(&e.image)?;
            if let Some(s) = cfg.image_size {
                if image.size() != (s, s) {
                    image = image.resize(s, s);
                }
            }
            let mut rng = sample_rng(cfg.seed ^ 0xbe9c, 0, index);
            let size = image.size();
            let h = sample_homography(&cfg.perturbation, size, &mut rng)?;
            let modality_seed = cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(index as u64);
            let moved = pseudo_modality(&image, cfg.pseudo_modality, &cfg.modality_params, modality_seed);
            let image_b = moved.warp(&h, size, Border::Zero);
            let control = grid_control_points(size, &h)?;
            Ok(PreparedPair {
                image_a: image,
                image_b,
                gt: Some(h),
                control,
            })
        }
        PairSource::Real(a, b) => {
            let image_a = Image::load(&a.image)?;
            let image_b = Image::load(&b.image)?;
            let gt = b.pair_homography.as_ref().map(Homography::from_row_major).transpose()?;
            let control = match &b.gt_points {
                Some(path) => {
                    let m = read_tensor(path)?.to_matrix()?;
                    if m.ncols() != 4 {
                        return Err(Error::ShapeMismatch(format!("gt_points must be M×4, got {:?}", m.dim())));
                    }
                    m.rows().into_iter().map(|r| ([r[0], r[1]], [r[2], r[3]])).collect()
                }
                None => grid_control_points(image_a.size(), gt.as_ref().expect("pair closes with a homography"))?,
            };
            let gt = match gt {
                Some(h) => Some(h),
                None if control.len() >= 4 => dlt(&control).ok(),
                None => None,
            };
            Ok(PreparedPair {
                image_a,
                image_b,
                gt,
                control,
            })
        }
    }
}

/// Matches plus the descriptors used for the Lowe-ratio statistics.
fn match_pair(
    model: Option<(&MifNet, &ParamStore)>,
    fa: &ImageFeatures,
    fb: &ImageFeatures,
    cfg: &BenchmarkConfig,
) -> Result<(Vec<Match>, Vec<usize>)> {
    let hist = |a: &ndarray::Array2<f64>, b: &ndarray::Array2<f64>| -> Vec<usize> {
        let mut h = vec![0; RATIO_BINS];
        if let Ok(r) = lowe_ratios(a, b) {
            for (_, v) in r {
                h[((v * RATIO_BINS as f64) as usize).min(RATIO_BINS - 1)] += 1;
            }
        }
        h
    };
    match cfg.matcher {
        MatcherChoice::BaseKnn => {
            let m = if fb.len() < 2 {
                Vec::new()
            } else {
                knn_ratio_match(&fa.base, &fb.base, cfg.knn_ratio)?
            };
            Ok((m, hist(&fa.base, &fb.base)))
        }
        MatcherChoice::Mif | MatcherChoice::MifAssignment => {
            let (net, store) = model.ok_or_else(|| Error::Config("the mif matchers need a checkpoint".into()))?;
            let pred = net.predict(store, fa, fb)?;
            let m = if cfg.matcher == MatcherChoice::Mif {
                if fb.len() < 2 {
                    Vec::new()
                } else {
                    knn_ratio_match(&pred.descriptors_a, &pred.descriptors_b, cfg.knn_ratio)?
                }
            } else {
                extract_matches(&pred.p, &pred.sigma_a, &pred.sigma_b, cfg.p_threshold, cfg.sigma_floor)
            };
            Ok((m, hist(&pred.descriptors_a, &pred.descriptors_b)))
        }
    }
}

fn in_bounds(p: Point, size: (usize, usize)) -> bool {
    p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= (size.0 - 1) as f64 && p[1] <= (size.1 - 1) as f64
}

/// Whether each match reprojects within `tol` of its partner under `gt`.
pub fn classify_matches(
    gt: &Homography,
    kpts_a: &[Point],
    kpts_b: &[Point],
    matches: &[Match],
    tol: f64,
) -> Vec<bool> {
    matches
        .iter()
        .map(|m| match gt.apply(kpts_a[m.i]) {
            Ok(p) => ((p[0] - kpts_b[m.j][0]).powi(2) + (p[1] - kpts_b[m.j][1]).powi(2)).sqrt() <= tol,
            Err(_) => false,
        })
        .collect()
}

struct PairOutcome {
    report: PairReport,
    histogram: Vec<usize>,
}

fn evaluate_pair(
    source: &PairSource,
    index: usize,
    model: Option<(&MifNet, &ParamStore)>,
    cfg: &BenchmarkConfig,
) -> PairOutcome {
    let name = source.name();
    let mut report = PairReport {
        name: name.clone(),
        ..Default::default()
    };
    let mut histogram = vec![0; RATIO_BINS];
    if let Err(e) = run_pair(source, index, model, cfg, &mut report, &mut histogram) {
        log::warn!("pair {name}: {e}");
        report.failure = Some(e.to_string());
    }
    report.success = match cfg.protocol {
        Protocol::Retinal => retinal_success(&report, &cfg.retinal),
        Protocol::Remote => remote_success(&report, &cfg.remote),
    };
    PairOutcome { report, histogram }
}

fn run_pair(
    source: &PairSource,
    index: usize,
    model: Option<(&MifNet, &ParamStore)>,
    cfg: &BenchmarkConfig,
    report: &mut PairReport,
    histogram: &mut Vec<usize>,
) -> Result<()> {
    let pair = prepare(source, index, cfg)?;
    let fa = describe_image(&pair.image_a, &cfg.features)?;
    let fb = describe_image(&pair.image_b, &cfg.features)?;
    let (matches, hist) = match_pair(model, &fa, &fb, cfg)?;
    *histogram = hist;
    report.n_matches = matches.len();

    let (size_a, size_b) = (pair.image_a.size(), pair.image_b.size());
    let correct = match &pair.gt {
        Some(gt) => {
            report.n_keypoints_overlap = fa
                .kpts
                .coords
                .iter()
                .filter(|p| gt.apply(**p).is_ok_and(|q| in_bounds(q, size_b)))
                .count();
            let c = classify_matches(gt, &fa.kpts.coords, &fb.kpts.coords, &matches, cfg.remote.correct_px);
            report.n_correct = c.iter().filter(|x| **x).count();
            Some(c)
        }
        None => None,
    };
    if let Some(dir) = &cfg.plots {
        let classes: Vec<LineClass> = match &correct {
            Some(c) => c.iter().map(|&ok| if ok { LineClass::Correct } else { LineClass::Wrong }).collect(),
            None => vec![LineClass::Unknown; matches.len()],
        };
        let lines: Vec<(Point, Point)> = matches.iter().map(|m| (fa.kpts.coords[m.i], fb.kpts.coords[m.j])).collect();
        write_match_plot(
            &dir.join(format!("{index:04}_{}_matches.png", report.name)),
            &pair.image_a,
            &pair.image_b,
            &lines,
            &classes,
        )?;
    }

    let pts: Vec<(Point, Point)> = matches.iter().map(|m| (fa.kpts.coords[m.i], fb.kpts.coords[m.j])).collect();
    let mut rng = sample_rng(cfg.seed ^ 0x7a5c, 0, index);
    let (pred, inliers) = estimate_homography(&pts, &cfg.ransac, &mut rng)?;
    report.n_inliers = inliers.iter().filter(|x| **x).count();
    if let Some(gt) = &pair.gt {
        report.h_err = Some(homography_error(gt, &pred));
    }

    // Annotations are rescaled linearly to the evaluation resolution.
    let e = cfg.retinal.eval_size as f64;
    let (sax, say) = (e / size_a.0 as f64, e / size_a.1 as f64);
    let (sbx, sby) = (e / size_b.0 as f64, e / size_b.1 as f64);
    let pred_eval = Homography::scaling(sbx, sby)
        .compose(&pred)
        .compose(&Homography::scaling(sax, say).inverse());
    let control: Vec<(Point, Point)> = pair
        .control
        .iter()
        .map(|(a, b)| ([a[0] * sax, a[1] * say], [b[0] * sbx, b[1] * sby]))
        .collect();
    let (rmse, mae) = rmse_mae(&pred_eval, &control)?;
    report.rmse = Some(rmse);
    report.mae = Some(mae);
    Ok(())
}

/// Evaluates every pair of a manifest. Per-pair failures are recorded in the
/// pair reports; only an unreadable manifest or bad config abort the run.
pub fn run_benchmark(
    model: Option<(&MifNet, &ParamStore)>,
    manifest: &Path,
    cfg: &BenchmarkConfig,
) -> Result<BenchmarkReport> {
    cfg.validate()?;
    if cfg.matcher.needs_model() && model.is_none() {
        return Err(Error::Config("the mif matchers need a checkpoint".into()));
    }
    let sources = pair_sources(read_manifest(manifest)?);
    if sources.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    if let Some(dir) = &cfg.plots {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let outcomes: Vec<PairOutcome> = pool.install(|| {
        sources
            .par_iter()
            .enumerate()
            .map(|(i, s)| evaluate_pair(s, i, model, cfg))
            .collect()
    });

    let mut histogram = vec![0; RATIO_BINS];
    for o in &outcomes {
        histogram.iter_mut().zip(&o.histogram).for_each(|(h, v)| *h += v);
    }
    let pairs: Vec<PairReport> = outcomes.into_iter().map(|o| o.report).collect();
    if let Some(dir) = &cfg.plots {
        write_ratio_histogram(&dir.join("lowe_ratio_histogram.png"), &histogram)?;
    }
    let aggregate = aggregate(&pairs, cfg, histogram)?;
    Ok(BenchmarkReport {
        schema: REPORT_SCHEMA,
        protocol: cfg.protocol,
        matcher: cfg.matcher,
        pseudo_modality: cfg.pseudo_modality,
        seed: cfg.seed,
        config: cfg.clone(),
        aggregate,
        pairs,
    })
}

/// Dataset-level figures recomputed from the per-pair records.
pub fn aggregate(pairs: &[PairReport], cfg: &BenchmarkConfig, histogram: Vec<usize>) -> Result<AggregateReport> {
    let retinal = retinal_srr(pairs, &cfg.retinal)?;
    let (remote, ms) = remote_srr_and_ms(pairs, &cfg.remote)?;
    let means = mean_rmse_mae(pairs, &cfg.retinal);
    Ok(AggregateReport {
        n_pairs: pairs.len(),
        n_failed: pairs.iter().filter(|p| p.failure.is_some()).count(),
        srr: match cfg.protocol {
            Protocol::Retinal => retinal,
            Protocol::Remote => remote,
        },
        retinal_srr: retinal,
        remote_srr: remote,
        ms,
        mean_rmse: means.map(|m| m.0),
        mean_mae: means.map(|m| m.1),
        srr_sweep: srr_sweep(pairs, &cfg.retinal, &cfg.rmse_thresholds)?,
        lowe_ratio_histogram: histogram,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::corpus::write_corpus;

    fn identity_cfg() -> BenchmarkConfig {
        BenchmarkConfig {
            perturbation: HomographyConfig::zero(),
            features: FeatureConfig {
                max_keypoints: 96,
                ..Default::default()
            },
            jobs: 1,
            ..Default::default()
        }
    }

    #[test]
    fn identity_pairs_all_register() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_corpus(dir.path(), 3, 96, 1).unwrap();
        let report = run_benchmark(None, &manifest, &identity_cfg()).unwrap();
        assert_eq!(report.schema, 1);
        assert_eq!(report.aggregate.srr, 1.0, "{:?}", report.pairs);
        assert!(report.pairs.iter().all(|p| p.rmse.unwrap() < 1e-6));
    }

    #[test]
    fn aggregate_matches_per_pair_records() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_corpus(dir.path(), 4, 96, 2).unwrap();
        let cfg = BenchmarkConfig {
            pseudo_modality: PseudoModality::InvertGamma,
            jobs: 2,
            features: FeatureConfig {
                max_keypoints: 96,
                ..Default::default()
            },
            ..Default::default()
        };
        let report = run_benchmark(None, &manifest, &cfg).unwrap();
        let by_hand = report.pairs.iter().filter(|p| p.success).count() as f64 / report.pairs.len() as f64;
        assert_eq!(report.aggregate.srr, by_hand);
        let again = run_benchmark(None, &manifest, &BenchmarkConfig { jobs: 1, ..cfg }).unwrap();
        assert_eq!(serde_json::to_string(&report).unwrap(), serde_json::to_string(&again).unwrap());
    }

    #[test]
    fn real_pairs_use_the_manifest_homography() {
        let dir = tempfile::tempdir().unwrap();
        let img = crate::evaluation::corpus_image(4, 96);
        let h = Homography::translation(3.0, -2.0);
        img.save(&dir.path().join("a.png")).unwrap();
        img.warp(&h, img.size(), Border::Zero).save(&dir.path().join("b.png")).unwrap();
        let mut b = ManifestEntry::image("b.png");
        b.pair_homography = Some(h.to_row_major());
        let manifest = dir.path().join("m.jsonl");
        crate::features::write_manifest(&manifest, &[ManifestEntry::image("a.png"), b]).unwrap();
        let report = run_benchmark(None, &manifest, &identity_cfg()).unwrap();
        assert_eq!(report.pairs.len(), 1);
        assert!(report.pairs[0].success, "{:?}", report.pairs[0]);
    }

    #[test]
    fn failures_are_recorded_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        Image::filled(64, 64, 0.5).save(&dir.path().join("flat.png")).unwrap();
        let manifest = dir.path().join("m.jsonl");
        crate::features::write_manifest(&manifest, &[ManifestEntry::image("flat.png")]).unwrap();
        let report = run_benchmark(None, &manifest, &identity_cfg()).unwrap();
        assert_eq!(report.aggregate.n_failed, 1);
        assert!(!report.pairs[0].success);
    }

    #[test]
    fn mif_without_model_is_a_config_error() {
        let cfg = BenchmarkConfig {
            matcher: MatcherChoice::Mif,
            ..Default::default()
        };
        assert!(matches!(run_benchmark(None, Path::new("x"), &cfg), Err(Error::Config(_))));
    }
}
